import json

import pandas as pd
import pytest

from deltaproduct import cli
from deltaproduct.cli import EXIT_CONTRACT, EXIT_NUMERICAL, EXIT_OK, dispatch
from deltaproduct.constructions import VerificationReport
from deltaproduct.utils import RUN_MANIFEST

TINY_CONFIG = {
    'model': {'layers': 1, 'heads': 2, 'head_key_dim': 4, 'head_value_dim': 4, 'n_h': 2, 'model_dim': 8},
    'task': {
        'family': 'group_word',
        'group': 'S3',
        'train_length': [6, 6],
        'train_samples': 32,
        'eval_lengths': [6, 12],
        'eval_samples': 8,
    },
    'train': {'lr': 0.01, 'batch_size': 16, 'epochs': 1},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / 'tiny.json'
    path.write_text(json.dumps(TINY_CONFIG))
    return path


def stdout_json(capsys):
    return json.loads(capsys.readouterr().out)


def test_verify_construction(capsys):
    assert dispatch(['verify', '--construction', 'sn', '--n', '3', '--trials', '5', '--length', '64']) == EXIT_OK
    report = stdout_json(capsys)
    assert report['pass'] is True
    assert report['matched_trials'] == 5


def test_verify_writes_report_and_manifest(tmp_path, capsys):
    out = tmp_path / 'verify'
    argv = ['verify', '--construction', 'dihedral', '--n', '4', '--trials', '3', '--length', '32', '--out', str(out)]
    assert dispatch(argv) == EXIT_OK
    assert json.loads((out / 'verification.json').read_text())['pass'] is True
    manifest = json.loads((out / RUN_MANIFEST).read_text())
    assert manifest['command'] == 'verify'
    assert manifest['argv'] == argv
    assert 'torch' in manifest['versions']


def test_failed_verification_exits_with_numerical_code(monkeypatch, capsys):
    monkeypatch.setattr(
        cli, 'verify_construction', lambda *args, **kwargs: VerificationReport('broken', 2, 8, [True, False])
    )
    assert dispatch(['verify', '--construction', 'parity']) == EXIT_NUMERICAL
    assert stdout_json(capsys)['pass'] is False


def test_demo_instability(tmp_path, capsys):
    assert dispatch(['demo-instability', '--out', str(tmp_path)]) == EXIT_OK
    result = stdout_json(capsys)
    assert result['spectral_radius'] == pytest.approx(result['closed_form'])
    assert 1.2302 <= result['spectral_radius'] <= 1.2304
    assert result['final_norm'] > 1e4
    assert (tmp_path / 'instability.json').is_file()


def test_demo_instability_rejects_odd_steps(capsys):
    assert dispatch(['demo-instability', '--steps', '3']) == EXIT_CONTRACT
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error['error'] == 'ContractViolationError'


def test_unknown_flag(capsys):
    assert dispatch(['verify', '--construction', 'sn', '--bogus']) == EXIT_CONTRACT


def test_missing_command(capsys):
    assert dispatch([]) == EXIT_CONTRACT


def test_missing_config(tmp_path, capsys):
    assert dispatch(['train', '--config', str(tmp_path / 'missing.toml')]) == EXIT_CONTRACT
    assert 'config not found' in capsys.readouterr().err


def test_invalid_override(config_file, capsys):
    assert dispatch(['train', '--config', str(config_file), 'model.n_h=0']) == EXIT_CONTRACT


def test_gen_exports_data(config_file, tmp_path, capsys):
    out = tmp_path / 'data'
    assert dispatch(['gen', '--config', str(config_file), '--out', str(out), '--seed', '3']) == EXIT_OK
    files = stdout_json(capsys)
    assert set(files) == {'train', 'eval_6', 'eval_12', 'vocab'}
    assert len((out / 'train.jsonl').read_text().splitlines()) == 32
    assert json.loads((out / RUN_MANIFEST).read_text())['seed'] == 3


def test_eval_construction(tmp_path, capsys):
    argv = ['eval', '--construction', 'sn', '--n', '4', '--lengths', '8', '16', '--samples', '4']
    argv += ['--out', str(tmp_path)]
    assert dispatch(argv) == EXIT_OK
    table = stdout_json(capsys)
    assert [row['length'] for row in table] == [8, 16]
    assert all(row['accuracy'] == 1.0 for row in table)
    assert (tmp_path / 'evaluation.csv').is_file()


def test_train_eval_analyze(config_file, tmp_path, capsys):
    run = tmp_path / 'run'
    assert dispatch(['train', '--config', str(config_file), '--out', str(run)]) == EXIT_OK
    summary = stdout_json(capsys)
    assert [row['length'] for row in summary['evaluation']] == [6, 12]
    checkpoint = run / 'checkpoint'

    argv = ['eval', '--config', str(config_file), '--checkpoint', str(checkpoint), '--out', str(run / 'e')]
    assert dispatch(argv) == EXIT_OK
    table = stdout_json(capsys)
    assert [row['accuracy'] for row in table] == [row['accuracy'] for row in summary['evaluation']]

    analysis = tmp_path / 'analysis'
    argv = [
        'analyze',
        '--config',
        str(config_file),
        '--checkpoint',
        str(checkpoint),
        '--length',
        '20',
        '--merge',
        f'trained={run / "evaluation.csv"}',
        f'again={run / "e" / "evaluation.csv"}',
        '--out',
        str(analysis),
    ]
    assert dispatch(argv) == EXIT_OK
    result = stdout_json(capsys)
    assert result['extrapolation_rows'] == 4
    assert result['erank_markers']['bos_positions'] == [0]
    assert len(result['key_pca']) > 0
    for name in ('erank.csv', 'betas.csv', 'group_betas.csv', 'extrapolation.md', 'analysis.json'):
        assert (analysis / name).is_file()
    betas = pd.read_csv(analysis / 'betas.csv')
    assert len(betas) == 21 * 2 * 2


def test_train_with_seeds(config_file, tmp_path, capsys):
    run = tmp_path / 'sweep'
    assert dispatch(['train', '--config', str(config_file), '--out', str(run), '--seeds', '0', '1']) == EXIT_OK
    summary = stdout_json(capsys)
    assert [row['seed'] for row in summary['scores']] == [0, 1]
    assert (run / 'sweep.csv').is_file()


def test_analyze_needs_a_source(config_file, tmp_path, capsys):
    assert dispatch(['analyze', '--config', str(config_file), '--out', str(tmp_path)]) == EXIT_CONTRACT


@pytest.mark.parametrize('command', ['eval', 'analyze'])
def test_missing_checkpoint(command, config_file, tmp_path, capsys):
    argv = [command, '--config', str(config_file), '--checkpoint', str(tmp_path / 'nope'), '--out', str(tmp_path)]
    assert dispatch(argv) == EXIT_CONTRACT
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error['error'] == 'CheckpointNotFoundError'
    assert 'checkpoint not found' in error['message']


def test_unreadable_checkpoint_manifest(config_file, tmp_path, capsys):
    checkpoint = tmp_path / 'broken'
    checkpoint.mkdir()
    (checkpoint / 'manifest.json').write_text('{')
    argv = ['eval', '--config', str(config_file), '--checkpoint', str(checkpoint), '--out', str(tmp_path / 'e')]
    assert dispatch(argv) == EXIT_CONTRACT
    assert 'not valid JSON' in capsys.readouterr().err
