"""Hand-set DeltaProduct models that solve state-tracking problems exactly, plus brute-force verification.

Each construction fixes, per input token, the Householder factors of the state transition and the written values,
runs the recurrence of ``recurrence.py`` on float64 tensors, and decodes states with a nearest-state lookup table.
"""

import logging
import math
from abc import ABC, abstractmethod
from collections.abc import Callable, Hashable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ContractViolationError, NumericalError
from .groups import DihedralElement, DihedralGroup, FiniteGroup, Permutation, SymmetricGroup
from .householder import HouseholderFactor, HouseholderProduct, realize, reflection_2d, reflection_key, rotation_2d
from .numerics import matmul, singular_values
from .recurrence import StepSequence, forward_sequential

logger = logging.getLogger(__name__)

STATE_TOLERANCE = 1e-6
MARGIN_FACTOR = 10.0
DECODE_CHUNK = 4096


def perm_to_swaps(p: Permutation) -> list[tuple[int, int]]:
    """Transpositions whose successive application (first element first) realizes ``p``.

    A cycle (c0 c1 … c_{k−1}) with c_i ↦ c_{i+1} becomes (c0 c1), (c0 c2), …, (c0 c_{k−1}); cycles are visited from
    their smallest index, so the result is deterministic and has at most n − 1 entries.
    """
    swaps = []
    for cycle in p.cycles():
        swaps.extend((cycle[0], c) for c in cycle[1:])
    return swaps


def swap_factor(n: int, a: int, b: int) -> HouseholderFactor:
    """Reflection I − 2kkᵀ with k = (e_a − e_b)/√2, i.e. the transposition matrix of a and b."""
    key = np.zeros(n)
    key[a], key[b] = 1.0, -1.0
    return HouseholderFactor(2.0, key)


def identity_factor(n: int) -> HouseholderFactor:
    key = np.zeros(n)
    key[0] = 1.0
    return HouseholderFactor(0.0, key)


@dataclass(frozen=True)
class TokenUpdate:
    """What one input token does to the state: transition product and the written values (n_h x d)."""

    product: HouseholderProduct
    values: np.ndarray

    @property
    def n_h(self) -> int:
        return len(self.product.factors)


class NearestStateDecoder:
    """Maps a state to the label of the closest reference state.

    Args:
        - states (Sequence[np.ndarray]):
            Reference states, all of the same shape.
        - labels (Sequence[Hashable]):
            Output for each reference state.
        - tolerance (float):
            Maximal accepted distance to the nearest reference state.

    Raises:
        - ContractViolationError: When states and labels differ in number or the reference set is empty.
    """

    def __init__(self, states: Sequence[np.ndarray], labels: Sequence[Hashable], tolerance: float = STATE_TOLERANCE):
        if len(states) != len(labels) or not states:
            raise ContractViolationError('decoder needs one label per reference state and at least one state')
        self.states = np.stack([np.asarray(s, dtype=np.float64).reshape(-1) for s in states])
        self.labels = list(labels)
        self.tolerance = tolerance

    @property
    def margin(self) -> float:
        """Smallest distance between two reference states (infinite for a single state)."""
        if len(self.states) < 2:
            return math.inf
        diffs = self.states[:, None, :] - self.states[None, :, :]
        distances = np.linalg.norm(diffs, axis=-1)
        return float(distances[~np.eye(len(self.states), dtype=bool)].min())

    def check_margin(self, name: str) -> bool:
        ok = self.margin >= MARGIN_FACTOR * self.tolerance
        if not ok:
            logger.warning(
                f'{name}: decoder margin {self.margin:.3e} is below {MARGIN_FACTOR:g} x tolerance {self.tolerance:.0e}'
            )
        return ok

    def nearest(self, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Indices of the nearest reference state and the distances, for states stacked on the leading axes."""
        flat = np.asarray(states, dtype=np.float64).reshape(-1, self.states.shape[1])
        best = np.empty(len(flat), dtype=np.int64)
        nearest = np.empty(len(flat))
        for start in range(0, len(flat), DECODE_CHUNK):
            block = flat[start : start + DECODE_CHUNK]
            distances = np.linalg.norm(block[:, None, :] - self.states[None, :, :], axis=-1)
            best[start : start + len(block)] = distances.argmin(axis=1)
            nearest[start : start + len(block)] = distances.min(axis=1)
        shape = np.shape(states)[: np.ndim(states) - 2]
        return best.reshape(shape), nearest.reshape(shape)

    def __call__(self, states: np.ndarray) -> list:
        """Labels of states of shape ``(..., n, d)``, flattened over the leading axes.

        Raises:
            - NumericalError: When a state is farther than ``tolerance`` from every reference state.
        """
        best, distances = self.nearest(states)
        worst = float(distances.max()) if distances.size else 0.0
        if worst > self.tolerance:
            raise NumericalError(
                f'state drifted {worst:.3e} away from every reference state (tolerance {self.tolerance:.0e})',
                report={'max_distance': worst, 'tolerance': self.tolerance},
            )
        return [self.labels[i] for i in best.reshape(-1)]


class ConstructedModel(ABC):
    """Exact, non-learned model mapping a token sequence to one output per position."""

    name: str
    alphabet: tuple

    @abstractmethod
    def run_batch(self, words: Sequence[Sequence]) -> list[list]:
        """Outputs for equally long words, one list per word."""

    def run(self, word: Sequence) -> list:
        if len(word) == 0:
            return []
        return self.run_batch([word])[0]

    @abstractmethod
    def transition_matrices(self) -> list[np.ndarray]:
        """Dense transition matrices of every token (all layers)."""


class OneLayerConstruction(ConstructedModel):
    """Single-head, single-layer construction given by a token table, an initial state and a decoder.

    Args:
        - name (str):
            Label used in reports.
        - table (Mapping[Hashable, TokenUpdate]):
            Update of every input token; all entries share n_h, key dimension and value dimension.
        - h0 (np.ndarray):
            Initial state (n x d).
        - decoder (NearestStateDecoder):
            State-to-output lookup.
    """

    def __init__(self, name: str, table: Mapping[Hashable, TokenUpdate], h0: np.ndarray, decoder: NearestStateDecoder):
        self.name = name
        self.table = dict(table)
        self.alphabet = tuple(self.table)
        self.h0 = np.asarray(h0, dtype=np.float64)
        self.decoder = decoder
        shapes = {(u.n_h, u.product.dim, u.values.shape) for u in self.table.values()}
        if len(shapes) != 1:
            raise ContractViolationError(f'{name}: token updates disagree in n_h or dimensions: {shapes}')
        decoder.check_margin(name)

    def transition(self, token: Hashable) -> HouseholderProduct:
        try:
            return self.table[token].product
        except KeyError as e:
            raise ContractViolationError(f'{self.name}: unknown token {token!r}') from e

    def transition_matrices(self) -> list[np.ndarray]:
        return [realize(u.product) for u in self.table.values()]

    def step_sequence(self, words: Sequence[Sequence]) -> StepSequence:
        """Stacks the token updates of equally long words into a batched ``StepSequence``."""
        updates = [[self.table[token] for token in word] for word in words]
        keys = np.array([[[f.key for f in u.product.factors] for u in row] for row in updates])
        betas = np.array([[[f.beta for f in u.product.factors] for u in row] for row in updates])
        values = np.array([[u.values for u in row] for row in updates])
        gates = np.array([[u.product.gate for u in row] for row in updates])
        return StepSequence(
            keys=torch.from_numpy(keys),
            values=torch.from_numpy(values),
            betas=torch.from_numpy(betas),
            gates=torch.from_numpy(gates),
        )

    def states(self, words: Sequence[Sequence]) -> np.ndarray:
        """States after every token, shape ``(words, t, n, d)``."""
        for word in words:
            for token in word:
                self.transition(token)
        with torch.no_grad():
            states = forward_sequential(torch.from_numpy(self.h0), self.step_sequence(words))
        return states.numpy()

    def run_batch(self, words: Sequence[Sequence]) -> list[list]:
        if not words or len(words[0]) == 0:
            return [[] for _ in words]
        states = self.states(words)
        labels = self.decoder(states)
        t = states.shape[1]
        return [labels[i * t : (i + 1) * t] for i in range(len(words))]


def build_sn_one_layer(n: int) -> OneLayerConstruction:
    """One layer with n_h = n − 1 solving the S_n word problem.

    Every permutation is written as at most n − 1 swaps (β = 2 reflections), padded with β = 0 identities. The state
    is the vector (1, …, n) permuted by the prefix product; position q holding value p + 1 means y[p] = q.

    Raises:
        - ContractViolationError: When ``n < 2``.
    """
    if n < 2:
        raise ContractViolationError(f'S_n construction needs n >= 2, got {n}')
    group = SymmetricGroup(n)
    n_h = n - 1
    table = {}
    for g in group.elements:
        factors = [swap_factor(n, a, b) for a, b in perm_to_swaps(g)]
        factors += [identity_factor(n)] * (n_h - len(factors))
        table[g] = TokenUpdate(HouseholderProduct(tuple(factors)), np.zeros((n_h, 1)))
    h0 = np.arange(1.0, n + 1.0).reshape(n, 1)
    reference = [g.matrix() @ h0 for g in group.elements]
    decoder = NearestStateDecoder(reference, group.elements)
    return OneLayerConstruction(f'S{n} one layer', table, h0, decoder)


def build_mod_counter(d: int, n_h: int = 2) -> OneLayerConstruction:
    """One layer, one head, counting the tokens ``1`` modulo d.

    Token ``1`` applies the reflections H(0) then H(2π/d), whose product is the rotation R(2π/d); token ``0`` is the
    identity. Further factors (n_h > 2) are β = 0 identities. The decoder matches the d states reachable from
    H₀ = (1, 0)ᵀ by repeated rotation.

    Raises:
        - ContractViolationError: When ``d < 2`` or ``n_h < 2``.
    """
    if d < 2 or n_h < 2:
        raise ContractViolationError(f'mod counter needs d >= 2 and n_h >= 2, got d={d}, n_h={n_h}')
    padding = [identity_factor(2)] * (n_h - 2)
    rotate = [HouseholderFactor(2.0, reflection_key(0.0)), HouseholderFactor(2.0, reflection_key(2 * math.pi / d))]
    table = {
        0: TokenUpdate(HouseholderProduct(tuple([identity_factor(2)] * n_h)), np.zeros((n_h, 1))),
        1: TokenUpdate(HouseholderProduct(tuple(rotate + padding)), np.zeros((n_h, 1))),
    }
    h0 = np.array([[1.0], [0.0]])
    step = realize(table[1].product)
    reachable = [h0]
    for _ in range(d - 1):
        reachable.append(matmul(step, reachable[-1]))
    decoder = NearestStateDecoder(reachable, list(range(d)))
    return OneLayerConstruction(f'mod-{d} counter', table, h0, decoder)


def build_parity_counter() -> OneLayerConstruction:
    """Scalar DeltaNet head tracking the parity of ``1`` tokens (the S_2 word problem).

    Token ``1`` has β = 2, k = 1, v = ½, giving h ← −h + 1; token ``0`` has β = 0.
    """
    one = np.ones(1)
    table = {
        0: TokenUpdate(HouseholderProduct((HouseholderFactor(0.0, one),)), np.zeros((1, 1))),
        1: TokenUpdate(HouseholderProduct((HouseholderFactor(2.0, one),)), np.full((1, 1), 0.5)),
    }
    decoder = NearestStateDecoder([np.zeros((1, 1)), np.ones((1, 1))], [0, 1])
    return OneLayerConstruction('parity counter', table, np.zeros((1, 1)), decoder)


def dihedral_angle(element: DihedralElement, select: int) -> float:
    """Angle θ of the layer-two reflection H(θ) for ``element`` and set selector ``select`` ∈ {0, 1}."""
    m, i = element.m, element.index
    if element.reflection:
        return (-2 * i * math.pi / m) if select else ((2 + 2 * i) * math.pi / m)
    return ((1 - 2 * i) * math.pi / m) if select else ((1 + 2 * i) * math.pi / m)


@dataclass
class DihedralConstruction(ConstructedModel):
    """Two layers with n_h = 1 solving the D_m word problem.

    Layer one has two scalar heads tracking the parity of rotation tokens and of reflection tokens. Layer two runs a
    2-D reflection-only recurrence from d_0 = (1, 0)ᵀ whose states live in D = {d_i at angle 2iπ/m} (even number of
    rotation tokens so far) or C = {c_i at angle (1 − 2i)π/m} (odd). Every token applies one reflection
    H(θ(x, q)) with q = 1 when the state is in D and q = 0 when it is in C.

    That recurrence accumulates the left-to-right product x_1 ··· x_t. Layer two is therefore fed the inverse
    elements, and the decoded element is inverted, which yields x_t ··· x_1.
    """

    m: int
    name: str = field(init=False)
    alphabet: tuple = field(init=False)
    rotation_parity: OneLayerConstruction = field(init=False)
    reflection_parity: OneLayerConstruction = field(init=False)
    decoder: NearestStateDecoder = field(init=False)

    def __post_init__(self):
        if self.m < 2:
            raise ContractViolationError(f'dihedral construction needs m >= 2, got {self.m}')
        group = DihedralGroup(self.m)
        self.name = f'D{self.m} two layers'
        self.alphabet = group.elements
        counter = build_parity_counter()
        self.rotation_parity = counter
        self.reflection_parity = counter
        d_states = [np.array([[math.cos(2 * i * math.pi / self.m)], [math.sin(2 * i * math.pi / self.m)]])
                    for i in range(self.m)]
        c_states = [np.array([[math.cos((1 - 2 * i) * math.pi / self.m)], [math.sin((1 - 2 * i) * math.pi / self.m)]])
                    for i in range(self.m)]
        labels = [('D', i) for i in range(self.m)] + [('C', i) for i in range(self.m)]
        self.decoder = NearestStateDecoder(d_states + c_states, labels)
        self.decoder.check_margin(self.name)

    def layer_one(self, words: Sequence[Sequence[DihedralElement]]) -> tuple[np.ndarray, np.ndarray]:
        """Rotation and reflection parities after every token, shape ``(words, t)`` each."""
        rotations = [[0 if x.reflection else 1 for x in word] for word in words]
        reflections = [[1 if x.reflection else 0 for x in word] for word in words]
        rot = np.array(self.rotation_parity.run_batch(rotations))
        ref = np.array(self.reflection_parity.run_batch(reflections))
        return rot, ref

    def layer_two_steps(self, words: Sequence[Sequence[DihedralElement]], rotation_parity: np.ndarray) -> StepSequence:
        previous = np.concatenate([np.zeros_like(rotation_parity[:, :1]), rotation_parity[:, :-1]], axis=1)
        select = 1 - previous
        angles = np.array(
            [[dihedral_angle(x.inverse(), int(q)) for x, q in zip(word, row)] for word, row in zip(words, select)]
        )
        keys = np.stack([np.sin(angles / 2.0), -np.cos(angles / 2.0)], axis=-1)[..., None, :]
        return StepSequence(
            keys=torch.from_numpy(keys),
            values=torch.zeros(keys.shape[:-1] + (1,), dtype=torch.float64),
            betas=torch.full(keys.shape[:-1], 2.0, dtype=torch.float64),
            gates=torch.ones(keys.shape[:-2], dtype=torch.float64),
        )

    def run_batch(self, words: Sequence[Sequence[DihedralElement]]) -> list[list[DihedralElement]]:
        if not words or len(words[0]) == 0:
            return [[] for _ in words]
        rot, ref = self.layer_one(words)
        h0 = torch.tensor([[1.0], [0.0]], dtype=torch.float64)
        with torch.no_grad():
            states = forward_sequential(h0, self.layer_two_steps(words, rot)).numpy()
        labels = self.decoder(states)
        outputs = []
        t = states.shape[1]
        for w in range(len(words)):
            row = []
            for pos in range(t):
                _, index = labels[w * t + pos]
                left_to_right = DihedralElement(self.m, bool(ref[w, pos]), -index if ref[w, pos] else index)
                row.append(left_to_right.inverse())
            outputs.append(row)
        return outputs

    def transition_matrices(self) -> list[np.ndarray]:
        mats = self.rotation_parity.transition_matrices()
        for x in self.alphabet:
            for q in (0, 1):
                mats.append(reflection_2d(dihedral_angle(x, q)))
        return mats


def build_dihedral_two_layer(m: int) -> DihedralConstruction:
    return DihedralConstruction(m)


def is_orthogonal(m: np.ndarray, tolerance: float = 1e-9) -> bool:
    sigma = singular_values(m)
    return bool(np.all(np.abs(sigma - 1.0) <= tolerance))


def is_permutation_matrix(m: np.ndarray, tolerance: float = 1e-9) -> bool:
    rounded = np.round(m)
    if np.max(np.abs(m - rounded)) > tolerance or not np.all((rounded == 0) | (rounded == 1)):
        return False
    return bool(np.all(rounded.sum(axis=0) == 1) and np.all(rounded.sum(axis=1) == 1))


def injective_readout_query(values: Sequence[float], d: int) -> np.ndarray:
    """Unit query q ∝ (b, b², …, b^d) with b = δ_max/δ_min + 1 for state entries drawn from ``values``.

    With this q the readout H ↦ RMSNorm(Hᵀq) is injective on {values}^d (base-b digit encoding).

    Raises:
        - ContractViolationError: When fewer than two distinct values are given or ``d < 1``.
    """
    distinct = np.unique(np.asarray(values, dtype=np.float64))
    if distinct.size < 2 or d < 1:
        raise ContractViolationError('injective_readout_query needs at least two distinct values and d >= 1')
    gaps = np.diff(distinct)
    base = float(distinct[-1] - distinct[0]) / float(gaps.min()) + 1.0
    # b^(i − d) is proportional to b^i and stays finite for large d
    q = base ** (np.arange(1, d + 1, dtype=np.float64) - d)
    return q / np.linalg.norm(q)


def rmsnorm_scalar(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    return x / np.sqrt(eps + x * x)


def readout_is_injective(states: Sequence[np.ndarray], q: np.ndarray, eps: float = 1e-5) -> tuple[bool, float]:
    """Whether RMSNorm(hᵀq) separates the given d-vectors, and the smallest gap between distinct images."""
    images = np.array([rmsnorm_scalar(float(np.asarray(h).reshape(-1) @ q), eps) for h in states])
    unique_states = {tuple(np.round(np.asarray(h).reshape(-1), 12)) for h in states}
    order = np.unique(images)
    gap = float(np.diff(order).min()) if len(order) > 1 else math.inf
    return len(np.unique(np.round(images, 14))) == len(unique_states), gap


@dataclass
class VerificationReport:
    construction: str
    trials: int
    length: int
    matches: list[bool]

    @property
    def passed(self) -> bool:
        return all(self.matches)

    def as_dict(self) -> dict:
        return {
            'construction': self.construction,
            'trials': self.trials,
            'length': self.length,
            'pass': self.passed,
            'matched_trials': int(sum(self.matches)),
        }


def verify_construction(
    model: ConstructedModel,
    oracle: Callable[[Sequence], list],
    trials: int,
    length: int,
    seed: int = 0,
) -> VerificationReport:
    """Runs ``trials`` uniformly random words of ``length`` tokens and compares every position with ``oracle``.

    Raises:
        - ContractViolationError: When ``trials`` or ``length`` is not positive.
    """
    if trials < 1 or length < 1:
        raise ContractViolationError(f'trials and length must be positive, got {trials} and {length}')
    rng = np.random.default_rng(seed)
    words = [[model.alphabet[i] for i in rng.integers(0, len(model.alphabet), size=length)] for _ in range(trials)]
    outputs = model.run_batch(words)
    matches = [list(out) == list(oracle(word)) for out, word in zip(outputs, words)]
    report = VerificationReport(construction=model.name, trials=trials, length=length, matches=matches)
    logger.info(f'{model.name}: {sum(matches)}/{trials} trials of length {length} matched the oracle')
    return report


def group_oracle(group: FiniteGroup) -> Callable[[Sequence], list]:
    return group.prefix_products


def counter_oracle(d: int) -> Callable[[Sequence[int]], list[int]]:
    def count(word: Sequence[int]) -> list[int]:
        return [int(c) % d for c in np.cumsum(word)]

    return count


def build_construction(name: str, size: int) -> tuple[ConstructedModel, Callable[[Sequence], list]]:
    """Construction and matching oracle by CLI name: ``sn``, ``dihedral``, ``counter`` or ``parity``.

    Raises:
        - ContractViolationError: When the name is unknown.
    """
    if name == 'sn':
        return build_sn_one_layer(size), group_oracle(SymmetricGroup(size))
    if name == 'dihedral':
        return build_dihedral_two_layer(size), group_oracle(DihedralGroup(size))
    if name == 'counter':
        return build_mod_counter(size), counter_oracle(size)
    if name == 'parity':
        return build_parity_counter(), counter_oracle(2)
    raise ContractViolationError(f'unknown construction {name!r}; expected sn, dihedral, counter or parity')


class ConstructionPredictor:
    """Adapts a group construction to token-id batches as produced by the group word datasets.

    Position 0 of every row is the BOS token (id ``group.order``) and is treated as the identity element.
    """

    def __init__(self, model: ConstructedModel, group: FiniteGroup):
        self.model = model
        self.group = group

    @torch.no_grad()
    def predict(self, tokens: torch.Tensor) -> torch.Tensor:
        rows = tokens.tolist()
        bos = self.group.order
        words = [[self.group.identity if i == bos else self.group.elements[i] for i in row] for row in rows]
        outputs = self.model.run_batch(words)
        return torch.tensor([[self.group.index(y) for y in row] for row in outputs], dtype=torch.long)
