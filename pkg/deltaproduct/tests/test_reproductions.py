import pytest

from deltaproduct.config import load_run_spec
from deltaproduct.training import train_sweep

SEEDS = [0, 1, 2]


def accuracy_at(evaluation, length, column='accuracy'):
    return float(evaluation.loc[evaluation['length'] == length, column].iloc[0])


@pytest.mark.slow
def test_two_factors_track_s3(tmp_path):
    spec = load_run_spec(preset='desk_scale', overrides=['task.eval_lengths=[64, 128]', 'model.n_h=2'])
    best, _ = train_sweep(spec, SEEDS, output_dir=tmp_path)
    assert accuracy_at(best.evaluation, 64) >= 0.95
    assert accuracy_at(best.evaluation, 128) >= 0.85


@pytest.mark.slow
def test_single_factor_falls_short_on_s3(tmp_path):
    spec = load_run_spec(preset='desk_scale', overrides=['task.eval_lengths=[64, 128]', 'model.n_h=1'])
    best, _ = train_sweep(spec, SEEDS, output_dir=tmp_path)
    assert accuracy_at(best.evaluation, 64) <= 0.75


@pytest.mark.slow
@pytest.mark.parametrize(
    'mode, check',
    [
        ('symmetric_interval', lambda scaled: scaled >= 0.9),
        ('unit_interval', lambda scaled: scaled <= 0.4),
    ],
)
def test_parity_needs_negative_eigenvalues(tmp_path, mode, check):
    spec = load_run_spec(preset='chomsky_desk', overrides=[f'model.eigenvalue_mode={mode}'])
    best, _ = train_sweep(spec, SEEDS, output_dir=tmp_path)
    assert check(accuracy_at(best.evaluation, 256, 'scaled_accuracy'))
