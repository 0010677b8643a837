"""Finite groups of the word problems: symmetric, alternating, cyclic and dihedral.

Every group fixes a canonical element order, which is also the token id order of the datasets. Products follow the
word-problem convention y_t = x_t · y_{t−1}.
"""

import itertools
from abc import ABC, abstractmethod
from collections.abc import Hashable, Iterable, Sequence
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ContractViolationError


@dataclass(frozen=True, order=True)
class Permutation:
    """Bijection of {0, …, n−1}; ``mapping[p]`` is the image of position p.

    Acts on vectors through the permutation matrix P with P e_p = e_{mapping[p]}, so (a ∘ b)[p] = a[b[p]] has matrix
    P_a P_b.
    """

    mapping: tuple[int, ...]

    def __post_init__(self):
        mapping = tuple(int(p) for p in self.mapping)
        if sorted(mapping) != list(range(len(mapping))):
            raise ContractViolationError(f'{mapping} is not a permutation of 0..{len(mapping) - 1}')
        object.__setattr__(self, 'mapping', mapping)

    @classmethod
    def identity(cls, n: int) -> 'Permutation':
        return cls(tuple(range(n)))

    @classmethod
    def transposition(cls, n: int, a: int, b: int) -> 'Permutation':
        mapping = list(range(n))
        mapping[a], mapping[b] = b, a
        return cls(tuple(mapping))

    @property
    def size(self) -> int:
        return len(self.mapping)

    def __mul__(self, other: 'Permutation') -> 'Permutation':
        if other.size != self.size:
            raise ContractViolationError(f'cannot compose permutations of size {self.size} and {other.size}')
        return Permutation(tuple(self.mapping[q] for q in other.mapping))

    def inverse(self) -> 'Permutation':
        inverse = [0] * self.size
        for p, q in enumerate(self.mapping):
            inverse[q] = p
        return Permutation(tuple(inverse))

    def cycles(self) -> list[tuple[int, ...]]:
        """Nontrivial cycles, each starting at its smallest index, ordered by that index."""
        seen = set()
        cycles = []
        for start in range(self.size):
            if start in seen:
                continue
            cycle = [start]
            seen.add(start)
            nxt = self.mapping[start]
            while nxt != start:
                cycle.append(nxt)
                seen.add(nxt)
                nxt = self.mapping[nxt]
            if len(cycle) > 1:
                cycles.append(tuple(cycle))
        return cycles

    @property
    def is_even(self) -> bool:
        return sum(len(c) - 1 for c in self.cycles()) % 2 == 0

    def matrix(self) -> np.ndarray:
        m = np.zeros((self.size, self.size))
        m[list(self.mapping), list(range(self.size))] = 1.0
        return m

    def __repr__(self) -> str:
        return f'Permutation{self.mapping}'


@dataclass(frozen=True, order=True)
class DihedralElement:
    """Rotation r_i (``reflection=False``) or reflection s_i of the regular m-gon.

    Multiplication: r_i r_j = r_{i+j}, r_i s_j = s_{i+j}, s_i r_j = s_{i−j}, s_i s_j = r_{i−j} (indices mod m).
    """

    m: int
    reflection: bool
    index: int

    def __post_init__(self):
        if self.m < 2:
            raise ContractViolationError(f'dihedral group needs m >= 2, got {self.m}')
        object.__setattr__(self, 'index', self.index % self.m)

    def __mul__(self, other: 'DihedralElement') -> 'DihedralElement':
        if other.m != self.m:
            raise ContractViolationError(f'cannot multiply elements of D{self.m} and D{other.m}')
        sign = -1 if self.reflection else 1
        return DihedralElement(self.m, self.reflection != other.reflection, self.index + sign * other.index)

    def inverse(self) -> 'DihedralElement':
        if self.reflection:
            return self
        return DihedralElement(self.m, False, -self.index)

    def __repr__(self) -> str:
        return f'{"s" if self.reflection else "r"}{self.index}'


class FiniteGroup(ABC):
    """A finite group with a canonical element order."""

    name: str

    @property
    @abstractmethod
    def elements(self) -> tuple[Hashable, ...]: ...

    @property
    @abstractmethod
    def identity(self) -> Hashable: ...

    @abstractmethod
    def multiply(self, a, b): ...

    @property
    def order(self) -> int:
        return len(self.elements)

    @cached_property
    def _index(self) -> dict:
        return {element: i for i, element in enumerate(self.elements)}

    def index(self, element) -> int:
        try:
            return self._index[element]
        except KeyError as e:
            raise ContractViolationError(f'{element!r} is not an element of {self.name}') from e

    def prefix_products(self, word: Iterable) -> list:
        """y_t = x_t · y_{t−1} with y_0 the identity."""
        products = []
        current = self.identity
        for x in word:
            current = self.multiply(x, current)
            products.append(current)
        return products

    def __repr__(self) -> str:
        return self.name


class SymmetricGroup(FiniteGroup):
    """S_n with elements in lexicographic order of their mappings."""

    def __init__(self, n: int):
        if n < 2:
            raise ContractViolationError(f'symmetric group needs n >= 2, got {n}')
        self.n = n
        self.name = f'S{n}'

    @cached_property
    def elements(self) -> tuple[Permutation, ...]:
        return tuple(Permutation(p) for p in itertools.permutations(range(self.n)))

    @property
    def identity(self) -> Permutation:
        return Permutation.identity(self.n)

    def multiply(self, a: Permutation, b: Permutation) -> Permutation:
        return a * b


class AlternatingGroup(SymmetricGroup):
    def __init__(self, n: int):
        super().__init__(n)
        self.name = f'A{n}'

    @cached_property
    def elements(self) -> tuple[Permutation, ...]:
        return tuple(p for p in SymmetricGroup(self.n).elements if p.is_even)


class CyclicGroup(FiniteGroup):
    """Z_m as residues 0..m−1 under addition."""

    def __init__(self, m: int):
        if m < 2:
            raise ContractViolationError(f'cyclic group needs m >= 2, got {m}')
        self.m = m
        self.name = f'Z{m}'

    @cached_property
    def elements(self) -> tuple[int, ...]:
        return tuple(range(self.m))

    @property
    def identity(self) -> int:
        return 0

    def multiply(self, a: int, b: int) -> int:
        return (a + b) % self.m


class DihedralGroup(FiniteGroup):
    """D_m with rotations r_0..r_{m−1} first, then reflections s_0..s_{m−1}."""

    def __init__(self, m: int):
        if m < 2:
            raise ContractViolationError(f'dihedral group needs m >= 2, got {m}')
        self.m = m
        self.name = f'D{m}'

    @cached_property
    def elements(self) -> tuple[DihedralElement, ...]:
        rotations = [DihedralElement(self.m, False, i) for i in range(self.m)]
        reflections = [DihedralElement(self.m, True, i) for i in range(self.m)]
        return tuple(rotations + reflections)

    @property
    def identity(self) -> DihedralElement:
        return DihedralElement(self.m, False, 0)

    def multiply(self, a: DihedralElement, b: DihedralElement) -> DihedralElement:
        return a * b


def group_by_name(name: str) -> FiniteGroup:
    """``S<n>``, ``A<n>``, ``Z<m>`` or ``D<m>``.

    Raises:
        - ContractViolationError: When the name is not recognised.
    """
    kinds = {'S': SymmetricGroup, 'A': AlternatingGroup, 'Z': CyclicGroup, 'D': DihedralGroup}
    if len(name) >= 2 and name[0] in kinds and name[1:].isdigit():
        return kinds[name[0]](int(name[1:]))
    raise ContractViolationError(f'unknown group {name!r}')


def random_word(group: FiniteGroup, length: int, rng: np.random.Generator) -> list:
    return [group.elements[i] for i in rng.integers(0, group.order, size=length)]


def word_ids(group: FiniteGroup, word: Sequence) -> list[int]:
    return [group.index(x) for x in word]
