import itertools

import numpy as np
import pytest

from deltaproduct.errors import ContractViolationError
from deltaproduct.groups import (
    AlternatingGroup,
    CyclicGroup,
    DihedralElement,
    DihedralGroup,
    Permutation,
    SymmetricGroup,
    group_by_name,
    random_word,
    word_ids,
)


@pytest.mark.parametrize(
    'name, order',
    [('S3', 6), ('S4', 24), ('A5', 60), ('S5', 120), ('Z7', 7), ('D6', 12)],
)
def test_group_orders(name, order):
    group = group_by_name(name)
    assert group.order == order
    assert len(set(group.elements)) == order
    assert group.elements.index(group.identity) == group.index(group.identity)


@pytest.mark.parametrize('name', ['S3', 'A4', 'Z5', 'D4'])
def test_group_axioms(name):
    group = group_by_name(name)
    elements = group.elements
    for a in elements:
        assert group.multiply(a, group.identity) == a
        assert group.multiply(group.identity, a) == a
        assert any(group.multiply(a, b) == group.identity for b in elements)
    for a, b, c in itertools.islice(itertools.product(elements, repeat=3), 500):
        assert group.multiply(group.multiply(a, b), c) == group.multiply(a, group.multiply(b, c))


def test_permutation_composition_matches_matrices():
    a = Permutation((1, 2, 0, 3))
    b = Permutation((3, 0, 1, 2))
    assert np.array_equal((a * b).matrix(), a.matrix() @ b.matrix())
    assert a * a.inverse() == Permutation.identity(4)


def test_permutation_cycles_and_parity():
    p = Permutation((1, 0, 3, 4, 2))
    assert p.cycles() == [(0, 1), (2, 3, 4)]
    assert not p.is_even
    assert Permutation.transposition(3, 0, 2).mapping == (2, 1, 0)


def test_invalid_permutation():
    with pytest.raises(ContractViolationError):
        Permutation((0, 0, 1))


@pytest.mark.parametrize('m', [3, 4, 6])
def test_dihedral_multiplication_table(m):
    for i, j in itertools.product(range(m), repeat=2):
        r_i, r_j = DihedralElement(m, False, i), DihedralElement(m, False, j)
        s_i, s_j = DihedralElement(m, True, i), DihedralElement(m, True, j)
        assert r_i * r_j == DihedralElement(m, False, i + j)
        assert r_i * s_j == DihedralElement(m, True, i + j)
        assert s_i * r_j == DihedralElement(m, True, i - j)
        assert s_i * s_j == DihedralElement(m, False, i - j)


def test_dihedral_canonical_order():
    assert [repr(x) for x in DihedralGroup(3).elements] == ['r0', 'r1', 'r2', 's0', 's1', 's2']


def test_alternating_group_contains_only_even_permutations():
    assert all(p.is_even for p in AlternatingGroup(4).elements)


def test_prefix_products_multiply_on_the_left():
    group = SymmetricGroup(3)
    a, b = group.elements[1], group.elements[3]
    assert group.prefix_products([a, b]) == [a, b * a]


def test_cyclic_prefix_products_are_running_sums():
    group = CyclicGroup(5)
    assert group.prefix_products([3, 4, 1]) == [3, 2, 3]


def test_word_ids_round_trip_through_elements():
    group = group_by_name('S4')
    word = random_word(group, 30, np.random.default_rng(0))
    assert [group.elements[i] for i in word_ids(group, word)] == word


@pytest.mark.parametrize('name', ['Q8', 'S', 'Sx', 'Z1'])
def test_unknown_group(name):
    with pytest.raises(ContractViolationError):
        group_by_name(name)


def test_index_of_foreign_element():
    with pytest.raises(ContractViolationError):
        SymmetricGroup(3).index(Permutation.identity(4))
