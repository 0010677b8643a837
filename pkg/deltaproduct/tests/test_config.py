import json

import pytest

from deltaproduct.config import (
    PRESETS,
    BracketSamplerConfig,
    RunSpec,
    TaskSpec,
    apply_overrides,
    build_run_spec,
    config_hash,
    load_run_spec,
    parse_override,
)
from deltaproduct.errors import ConfigNotFoundError, ContractViolationError
from deltaproduct.recurrence import EigenvalueMode
from deltaproduct.resources import ExperimentResource


def test_defaults():
    spec = load_run_spec()
    assert spec == RunSpec()
    assert spec.model.eigenvalue_mode is EigenvalueMode.SYMMETRIC_INTERVAL
    assert spec.model.beta_max == 2.0


@pytest.mark.parametrize('preset', sorted(PRESETS))
def test_presets_validate(preset):
    spec = load_run_spec(preset=preset)
    assert spec.model.layers == PRESETS[preset]['model']['layers']


def test_preset_values():
    spec = load_run_spec(preset='chomsky_desk')
    assert spec.task.family == 'parity'
    assert spec.task.train_samples is None
    assert spec.train.steps == 2000
    assert spec.task.eval_lengths[0] == 40
    assert spec.task.eval_lengths[-1] == 256


def test_parse_override():
    assert parse_override('model.n_h=3') == (['model', 'n_h'], 3)
    assert parse_override('task.group=S5') == (['task', 'group'], 'S5')
    assert parse_override('task.train_length=[3, 40]') == (['task', 'train_length'], [3, 40])
    with pytest.raises(ContractViolationError):
        parse_override('model.n_h')


def test_apply_overrides_does_not_mutate_input():
    raw = {'model': {'n_h': 1}}
    updated = apply_overrides(raw, ['model.n_h=2', 'train.lr=0.5'])
    assert raw == {'model': {'n_h': 1}}
    assert updated == {'model': {'n_h': 2}, 'train': {'lr': 0.5}}


def test_override_into_scalar_is_rejected():
    with pytest.raises(ContractViolationError):
        apply_overrides({'output_dir': 'x'}, ['output_dir.sub=1'])


def test_precedence_preset_file_override(tmp_path):
    path = tmp_path / 'run.toml'
    path.write_text('[model]\nn_h = 3\nheads = 2\n\n[train]\nseed = 4\n')
    spec = load_run_spec(path, overrides=['model.heads=5'], preset='desk_scale')
    assert spec.model.n_h == 3
    assert spec.model.heads == 5
    assert spec.model.head_key_dim == PRESETS['desk_scale']['model']['head_key_dim']
    assert spec.seed == 4


def test_json_config(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps({'preset': 'modarith_desk', 'task': {'family': 'modarith_brackets'}}))
    spec = load_run_spec(path)
    assert spec.task.family == 'modarith_brackets'
    assert spec.train.grad_clip == 1.0


def test_missing_config(tmp_path):
    with pytest.raises(ConfigNotFoundError, match='config not found'):
        load_run_spec(tmp_path / 'nope.toml')


def test_unparsable_config(tmp_path):
    path = tmp_path / 'broken.toml'
    path.write_text('[model\n')
    with pytest.raises(ContractViolationError):
        load_run_spec(path)


@pytest.mark.parametrize(
    'override',
    [
        'model.n_h=0',
        'model.eigenvalue_mode="complex"',
        'model.unknown=1',
        'task.group="Q8"',
        'task.train_length=[5, 2]',
        'task.operator_weights={"/": 1.0}',
        'train.lr=-0.1',
        'task.train_samples=null',
    ],
)
def test_invalid_configurations(override):
    with pytest.raises(ContractViolationError):
        load_run_spec(overrides=[override])


def test_unknown_preset():
    with pytest.raises(ContractViolationError):
        build_run_spec({'preset': 'huge'})


def test_zero_learning_rate_is_allowed():
    assert load_run_spec(overrides=['train.lr=0']).train.lr == 0.0


def test_bracket_sampler_probabilities():
    with pytest.raises(ValueError):
        BracketSamplerConfig(p_binary=0.6, p_unary=0.3, p_paren=0.3)


def test_group_names():
    assert TaskSpec(group='D12').group == 'D12'
    assert TaskSpec(group='Z7').group == 'Z7'


def test_config_hash_is_stable():
    a = load_run_spec(overrides=['model.n_h=3'])
    b = load_run_spec(overrides=['model.n_h=3'])
    c = load_run_spec(overrides=['model.n_h=4'])
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(c)


def test_experiment_resource(tmp_path):
    resource = ExperimentResource(preset='desk_scale', output_dir=str(tmp_path), seed=9, overrides=['model.n_h=1'])
    spec = resource.run_spec()
    assert spec.output_dir == str(tmp_path)
    assert spec.seed == 9
    assert spec.model.n_h == 1
