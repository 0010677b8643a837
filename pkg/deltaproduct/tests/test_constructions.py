import math

import numpy as np
import pytest
import torch

from deltaproduct.constructions import (
    ConstructionPredictor,
    NearestStateDecoder,
    build_construction,
    build_dihedral_two_layer,
    build_mod_counter,
    build_parity_counter,
    build_sn_one_layer,
    counter_oracle,
    group_oracle,
    injective_readout_query,
    is_orthogonal,
    is_permutation_matrix,
    perm_to_swaps,
    readout_is_injective,
    swap_factor,
    verify_construction,
)
from deltaproduct.errors import ContractViolationError, NumericalError
from deltaproduct.groups import DihedralElement, DihedralGroup, Permutation, SymmetricGroup
from deltaproduct.householder import householder_matrix, realize, reflection_2d


@pytest.mark.parametrize('n', [3, 4, 5])
def test_perm_to_swaps_realizes_every_permutation(n):
    for p in SymmetricGroup(n).elements:
        swaps = perm_to_swaps(p)
        assert len(swaps) <= n - 1
        m = np.eye(n)
        for a, b in swaps:
            m = householder_matrix(swap_factor(n, a, b)) @ m
        assert np.allclose(m, p.matrix(), atol=1e-12)


def test_sn_transitions_are_permutation_matrices():
    model = build_sn_one_layer(4)
    matrices = model.transition_matrices()
    assert len(matrices) == 24
    assert all(is_permutation_matrix(m) for m in matrices)
    assert all(update.n_h == 3 for update in model.table.values())


def test_s3_construction_matches_oracle():
    model, oracle = build_construction('sn', 3)
    report = verify_construction(model, oracle, trials=100, length=512)
    assert report.passed
    assert report.as_dict() == {
        'construction': 'S3 one layer',
        'trials': 100,
        'length': 512,
        'pass': True,
        'matched_trials': 100,
    }


@pytest.mark.parametrize('n', [3, 4, 5])
def test_sn_construction_matches_oracle(n):
    model = build_sn_one_layer(n)
    report = verify_construction(model, group_oracle(SymmetricGroup(n)), trials=100, length=512, seed=n)
    assert report.passed, report.as_dict()


@pytest.mark.parametrize('m', range(3, 11))
def test_dihedral_construction_matches_oracle(m):
    model = build_dihedral_two_layer(m)
    report = verify_construction(model, group_oracle(DihedralGroup(m)), trials=100, length=512, seed=m)
    assert report.passed, report.as_dict()


def test_dihedral_two_reflections_give_a_rotation():
    model = build_dihedral_two_layer(6)
    for i in range(6):
        for j in range(6):
            s_i, s_j = DihedralElement(6, True, i), DihedralElement(6, True, j)
            # y_2 = s_j · s_i
            assert model.run([s_i, s_j])[-1] == DihedralElement(6, False, j - i)


def test_dihedral_transitions_are_orthogonal():
    model = build_dihedral_two_layer(4)
    matrices = model.transition_matrices()
    assert len(matrices) == 2 + 2 * 8
    assert all(is_orthogonal(m) for m in matrices)


@pytest.mark.parametrize('d', range(2, 13))
def test_mod_counter_matches_oracle(d):
    model = build_mod_counter(d)
    report = verify_construction(model, counter_oracle(d), trials=100, length=512, seed=d)
    assert report.passed, report.as_dict()


def test_mod_counter_on_long_words():
    report = verify_construction(build_mod_counter(10), counter_oracle(10), trials=10, length=1000)
    assert report.passed


def test_mod_counter_rotates_back_to_start():
    model = build_mod_counter(4)
    states = model.states([[1, 1, 1, 1]])
    assert np.allclose(states[0, -1], model.h0, atol=1e-12)
    assert np.allclose(realize(model.table[1].product), reflection_2d(math.pi / 2) @ reflection_2d(0.0))


def test_mod_counter_with_extra_identity_factors():
    model = build_mod_counter(5, n_h=4)
    assert model.run([1, 0, 1, 1, 1, 1, 1]) == [1, 1, 2, 3, 4, 0, 1]


def test_parity_counter():
    model = build_parity_counter()
    assert model.run([1, 1, 0, 1]) == [1, 0, 0, 1]
    assert model.run([]) == []


def test_unknown_construction():
    with pytest.raises(ContractViolationError):
        build_construction('quaternion', 8)


def test_unknown_token_is_rejected():
    with pytest.raises(ContractViolationError):
        build_parity_counter().run([2])


def test_verification_detects_a_wrong_oracle():
    model = build_parity_counter()
    report = verify_construction(model, counter_oracle(3), trials=5, length=20)
    assert not report.passed


def test_decoder_rejects_drifted_state():
    decoder = NearestStateDecoder([np.zeros((1, 1)), np.ones((1, 1))], ['a', 'b'])
    assert decoder(np.array([[[1.0]], [[0.0]]])) == ['b', 'a']
    with pytest.raises(NumericalError):
        decoder(np.array([[[0.5]]]))


def test_decoder_margin_warning(caplog):
    decoder = NearestStateDecoder([np.zeros((1, 1)), np.full((1, 1), 1e-6)], [0, 1])
    assert decoder.margin == pytest.approx(1e-6)
    assert not decoder.check_margin('tight')
    assert 'tight' in caplog.text


def test_injective_readout_for_sn_states():
    n = 4
    states = [p.matrix() @ np.arange(1.0, n + 1.0) for p in SymmetricGroup(n).elements]
    q = injective_readout_query(range(1, n + 1), n)
    assert np.linalg.norm(q) == pytest.approx(1.0)
    injective, gap = readout_is_injective(states, q)
    assert injective
    assert gap > 0


def test_uniform_query_is_not_injective():
    states = [Permutation(p).matrix() @ np.array([1.0, 2.0, 3.0]) for p in [(0, 1, 2), (1, 0, 2)]]
    injective, _ = readout_is_injective(states, np.ones(3) / math.sqrt(3))
    assert not injective


def test_injective_readout_query_needs_two_values():
    with pytest.raises(ContractViolationError):
        injective_readout_query([1.0, 1.0], 3)


def test_construction_predictor_on_token_ids():
    group = SymmetricGroup(3)
    predictor = ConstructionPredictor(build_sn_one_layer(3), group)
    tokens = torch.tensor([[6, 1, 4, 2], [6, 0, 0, 5]])
    predictions = predictor.predict(tokens)
    assert predictions.shape == (2, 4)
    for row, out in zip(tokens.tolist(), predictions.tolist()):
        expected = group.prefix_products([group.elements[i] for i in row[1:]])
        assert out[0] == group.index(group.identity)
        assert out[1:] == [group.index(y) for y in expected]
