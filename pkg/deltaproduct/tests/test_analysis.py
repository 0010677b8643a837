import math

import numpy as np
import pandas as pd
import pytest
import torch

from deltaproduct.analysis import (
    beta_saturated_heads,
    collect_keys,
    construction_betas,
    effective_rank,
    erank_trace,
    extrapolation_report,
    key_pca,
    record_betas,
    record_group_betas,
    report_frame,
)
from deltaproduct.constructions import build_mod_counter, build_sn_one_layer
from deltaproduct.errors import ContractViolationError
from deltaproduct.groups import SymmetricGroup
from deltaproduct.model import build_model
from deltaproduct.recurrence import EigenvalueMode
from deltaproduct.utils import extrapolation_markdown


@pytest.mark.parametrize(
    'h, expected',
    [
        (np.eye(4), 4.0),
        (np.outer([1.0, 2.0, 3.0], [1.0, -1.0]), 1.0),
        (np.diag([2.0, 1.0, 1.0]), 2 * math.sqrt(2)),
        (np.zeros((3, 3)), 0.0),
    ],
)
def test_effective_rank_examples(h, expected):
    assert effective_rank(h) == pytest.approx(expected)


def test_effective_rank_is_scale_invariant_and_bounded():
    rng = np.random.default_rng(0)
    for _ in range(20):
        h = rng.normal(size=(5, 3))
        value = effective_rank(h)
        assert 1.0 <= value <= 3.0 + 1e-12
        assert effective_rank(17.0 * h) == pytest.approx(value)


def test_erank_trace(tiny_model_config):
    model = build_model(tiny_model_config)
    tokens = [6, 0, 1, 2, 6, 3, 4]
    trace = erank_trace(model, tokens, heads=[1], bos_id=6, train_length=4)
    assert trace.values.shape == (7, 1)
    assert np.all(trace.values <= 3.0 + 1e-12)
    assert trace.bos_positions == [0, 4]
    frame = trace.to_frame()
    assert list(frame.columns) == ['position', 'head', 'erank', 'zero_state', 'layer']
    assert frame.attrs['train_length'] == 4
    assert trace.markers() == {'layer': 0, 'bos_positions': [0, 4], 'train_length': 4}


def test_erank_trace_rejects_bad_head(tiny_model_config):
    model = build_model(tiny_model_config)
    with pytest.raises(ContractViolationError):
        erank_trace(model, [0, 1], heads=[2])
    with pytest.raises(ContractViolationError):
        erank_trace(model, [0, 1], layer=1)


def test_record_betas_shape_and_range(tiny_model_config):
    cfg = tiny_model_config.model_copy(update={'eigenvalue_mode': EigenvalueMode.UNIT_INTERVAL})
    betas = record_betas(build_model(cfg), torch.tensor([1, 2, 3, 4, 5]))
    assert betas.shape == (5, 2, 2)
    assert np.all((betas >= 0.0) & (betas <= 1.0))


def test_record_group_betas(tiny_model_config):
    cfg = tiny_model_config.model_copy(update={'vocab_size': 7})
    frame = record_group_betas(build_model(cfg), SymmetricGroup(3))
    assert list(frame.columns) == ['element', 'head', 'factor', 'beta']
    assert len(frame) == 6 * 2 * 2
    assert frame['element'].nunique() == 6


def test_sn_construction_betas_are_reflections_or_identities():
    model = build_sn_one_layer(4)
    word = list(SymmetricGroup(4).elements)
    betas = construction_betas(model, word)
    assert betas.shape == (24, 3, 1)
    assert set(np.unique(betas)) <= {0.0, 2.0}
    assert beta_saturated_heads(np.full((4, 3, 1), 2.0)) == [0]


def test_beta_saturated_heads_from_frame():
    frame = pd.DataFrame(
        {
            'element': ['a', 'a', 'b', 'b'],
            'head': [0, 1, 0, 1],
            'factor': [0, 0, 0, 0],
            'beta': [1.95, 0.4, 1.9, 1.7],
        }
    )
    assert beta_saturated_heads(frame) == [0]
    assert beta_saturated_heads(frame, threshold=1.0) == [0, 1]


def test_key_pca_of_the_counter_has_one_direction():
    model = build_mod_counter(6)
    ratios = key_pca(model, [1] * 12)
    assert ratios[0] == pytest.approx(1.0)
    assert ratios.sum() == pytest.approx(1.0)


def test_key_pca_of_a_trained_model(tiny_model_config):
    model = build_model(tiny_model_config.model_copy(update={'init_std': 0.5}))
    tokens = torch.randint(0, 7, (3, 10))
    keys = collect_keys(model, tokens, head=1)
    assert keys.shape == (3 * 10 * 2, 4)
    assert np.allclose(np.linalg.norm(keys, axis=1), 1.0)
    ratios = key_pca(model, tokens, head=1)
    assert np.all(np.diff(ratios) <= 1e-12)
    assert ratios.sum() == pytest.approx(1.0)


def evaluation(accuracies, lengths=(64, 128)):
    return pd.DataFrame(
        {'length': list(lengths), 'accuracy': accuracies, 'scaled_accuracy': [max(0.0, 2 * a - 1) for a in accuracies]}
    )


def test_extrapolation_report_and_markdown():
    report = extrapolation_report(
        {'n_h=1': evaluation([0.9, 0.5]), 'n_h=2': evaluation([1.0, 0.8])},
        train_length=64,
    )
    assert report.lengths == [64, 128]
    assert len(report.rows) == 4
    frame = report_frame(report)
    assert list(frame.columns) == ['model', 'length', 'accuracy', 'scaled_accuracy']
    markdown = extrapolation_markdown(frame, train_length=report.train_length)
    assert 'n_h=2' in markdown
    assert 'Training context length: 64' in markdown


def test_extrapolation_report_rejects_mismatched_buckets():
    with pytest.raises(ContractViolationError):
        extrapolation_report({'a': evaluation([0.9, 0.5]), 'b': evaluation([0.9, 0.5], lengths=(64, 256))})


def test_extrapolation_report_rejects_bad_accuracy():
    table = evaluation([0.9, 0.5])
    table.loc[0, 'accuracy'] = 1.5
    with pytest.raises(ContractViolationError):
        extrapolation_report({'a': table})
