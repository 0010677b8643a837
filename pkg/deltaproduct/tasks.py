"""Seeded dataset generators with exact targets: group word problems, parity and modular arithmetic.

Every instance starts with a BOS token whose target is masked. Targets at masked positions hold ``IGNORE_INDEX`` so a
batch can go straight into ``torch.nn.functional.cross_entropy``.
"""

import json
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from .config import BracketSamplerConfig, TaskSpec
from .errors import TaskGenerationError
from .groups import FiniteGroup, group_by_name, random_word, word_ids

IGNORE_INDEX = -100
OPERATORS = ('+', '-', '*')


@dataclass(frozen=True)
class TaskInstance:
    """One sequence: input token ids, target ids and which targets count towards loss and accuracy.

    Args:
        - tokens (list[int]):
            Input ids, BOS first.
        - targets (list[int]):
            Target id per position, ``IGNORE_INDEX`` where ``loss_mask`` is false.
        - loss_mask (list[bool]):
            Positions that are trained and scored.
    """

    tokens: list[int]
    targets: list[int]
    loss_mask: list[bool]

    def __post_init__(self):
        if not len(self.tokens) == len(self.targets) == len(self.loss_mask):
            raise TaskGenerationError(
                f'instance fields differ in length: {len(self.tokens)}, {len(self.targets)}, {len(self.loss_mask)}'
            )
        for target, scored in zip(self.targets, self.loss_mask):
            if not scored and target != IGNORE_INDEX:
                raise TaskGenerationError('masked positions must carry IGNORE_INDEX targets')

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def length(self) -> int:
        """Number of tokens after BOS."""
        return len(self.tokens) - 1

    def as_dict(self) -> dict:
        return {'tokens': self.tokens, 'targets': self.targets, 'mask': self.loss_mask}


def _with_bos(bos: int, tokens: Sequence[int], targets: Sequence[int], mask: Sequence[bool]) -> TaskInstance:
    return TaskInstance(
        tokens=[bos] + [int(t) for t in tokens],
        targets=[IGNORE_INDEX] + [int(y) if m else IGNORE_INDEX for y, m in zip(targets, mask)],
        loss_mask=[False] + [bool(m) for m in mask],
    )


def _draw_lengths(rng: np.random.Generator, count: int, length_range: tuple[int, int]) -> np.ndarray:
    low, high = length_range
    if not 1 <= low <= high:
        raise TaskGenerationError(f'invalid length range {length_range}')
    return rng.integers(low, high + 1, size=count)


# Group word problems


def group_of(spec: TaskSpec) -> FiniteGroup:
    return group_by_name(spec.group)


def gen_group_word(spec: TaskSpec, seed: int, count: int, length: int) -> list[TaskInstance]:
    """Uniform i.i.d. group elements with the running product y_t = x_t · … · x_1 as target at every position.

    Token ids are the canonical element order of the group; BOS is ``|G|``.

    Raises:
        - TaskGenerationError: When ``length`` or ``count`` is negative.
    """
    if length < 0 or count < 0:
        raise TaskGenerationError(f'count and length must be nonnegative, got {count} and {length}')
    group = group_of(spec)
    rng = np.random.default_rng(seed)
    instances = []
    for _ in range(count):
        word = random_word(group, length, rng)
        targets = word_ids(group, group.prefix_products(word))
        instances.append(_with_bos(group.order, word_ids(group, word), targets, [True] * length))
    return instances


# Parity


def gen_parity(seed: int, count: int, length_range: tuple[int, int]) -> list[TaskInstance]:
    """Random bit strings; the target at position t is the parity of the ones among the first t bits. BOS is 2."""
    rng = np.random.default_rng(seed)
    instances = []
    for length in _draw_lengths(rng, count, length_range):
        bits = rng.integers(0, 2, size=length)
        instances.append(_with_bos(2, bits, np.cumsum(bits) % 2, [True] * length))
    return instances


# Modular arithmetic


def modarith_vocab(modulus: int, brackets: bool) -> dict[str, int]:
    """Digits ``0..m−1``, then ``+ - * = PAD``, then ``( )`` when brackets are enabled, then BOS."""
    names = [str(d) for d in range(modulus)] + list(OPERATORS) + ['=', 'PAD']
    if brackets:
        names += ['(', ')']
    names.append('BOS')
    return {name: i for i, name in enumerate(names)}


def evaluate_expression(symbols: Sequence[str], modulus: int) -> int:
    """Value of an arithmetic expression modulo ``modulus``.

    Recursive descent with ``*`` binding tighter than ``+``/``-``, left associativity and unary minus directly
    after an opening bracket.

    Raises:
        - TaskGenerationError: When the symbols do not form a well-formed expression.
    """
    pos = 0

    def peek() -> str | None:
        return symbols[pos] if pos < len(symbols) else None

    def take() -> str:
        nonlocal pos
        if pos >= len(symbols):
            raise TaskGenerationError('expression ends unexpectedly')
        pos += 1
        return symbols[pos - 1]

    def atom() -> int:
        symbol = take()
        if symbol == '(':
            negate = peek() == '-'
            if negate:
                take()
            value = -expr() if negate else expr()
            if take() != ')':
                raise TaskGenerationError('unbalanced brackets')
            return value
        if symbol.isdigit():
            return int(symbol)
        raise TaskGenerationError(f'unexpected symbol {symbol!r}')

    def term() -> int:
        value = atom()
        while peek() == '*':
            take()
            value = value * atom() % modulus
        return value

    def expr() -> int:
        value = term()
        while peek() in ('+', '-'):
            op = take()
            value = value + term() if op == '+' else value - term()
        return value % modulus

    result = expr()
    if pos != len(symbols):
        raise TaskGenerationError(f'trailing symbols after position {pos}')
    return result % modulus


def _operator(rng: np.random.Generator, weights: dict[str, float]) -> str:
    ops = [op for op in OPERATORS if weights.get(op, 0.0) > 0]
    p = np.array([weights[op] for op in ops])
    return ops[int(rng.choice(len(ops), p=p / p.sum()))]


def _flat_expression(rng: np.random.Generator, budget: int, modulus: int, weights: dict[str, float]) -> list[str]:
    size = budget if budget % 2 == 1 else budget - 1
    symbols = [str(rng.integers(0, modulus))]
    while len(symbols) < size:
        symbols += [_operator(rng, weights), str(rng.integers(0, modulus))]
    return symbols


def _bracket_expression(
    rng: np.random.Generator,
    budget: int,
    modulus: int,
    weights: dict[str, float],
    knobs: BracketSamplerConfig,
) -> list[str]:
    """Samples digit | (E) | (−E) | (E op E) recursively, never exceeding ``budget`` symbols."""
    kinds = [('binary', knobs.p_binary, 5), ('unary', knobs.p_unary, 4), ('paren', knobs.p_paren, 3)]
    feasible = [(kind, p) for kind, p, size in kinds if size <= budget and p > 0]
    digit_p = max(0.0, 1.0 - sum(p for _, p, _ in kinds))
    options = feasible + [('digit', digit_p if feasible else 1.0)]
    p = np.array([w for _, w in options])
    kind = options[int(rng.choice(len(options), p=p / p.sum()))][0] if p.sum() > 0 else 'digit'
    if kind == 'binary':
        left_budget = int(rng.integers(1, budget - 3))
        left = _bracket_expression(rng, left_budget, modulus, weights, knobs)
        right = _bracket_expression(rng, budget - 3 - len(left), modulus, weights, knobs)
        return ['('] + left + [_operator(rng, weights)] + right + [')']
    if kind == 'unary':
        return ['(', '-'] + _bracket_expression(rng, budget - 3, modulus, weights, knobs) + [')']
    if kind == 'paren':
        return ['('] + _bracket_expression(rng, budget - 2, modulus, weights, knobs) + [')']
    return [str(rng.integers(0, modulus))]


def gen_modarith(
    spec: TaskSpec,
    seed: int,
    count: int,
    length_range: tuple[int, int],
    brackets: bool,
) -> list[TaskInstance]:
    """Expressions over Z_m followed by ``=``; the only scored position is the slot right after ``=``.

    An instance of length L holds an expression of at most L − 2 symbols, ``=``, the result slot and PAD up to L.
    Without brackets operands and operators alternate and the expression fills the budget; with brackets the
    expression is sampled with the ``spec.brackets`` knobs.

    Raises:
        - TaskGenerationError: When a drawn length leaves no room for an expression (L < 3).
    """
    vocab = modarith_vocab(spec.modulus, brackets)
    rng = np.random.default_rng(seed)
    instances = []
    for length in _draw_lengths(rng, count, length_range):
        budget = int(length) - 2
        if budget < 1:
            raise TaskGenerationError(f'length {length} leaves no room for an expression, "=" and the result')
        if brackets:
            symbols = _bracket_expression(rng, budget, spec.modulus, spec.operator_weights, spec.brackets)
        else:
            symbols = _flat_expression(rng, budget, spec.modulus, spec.operator_weights)
        value = evaluate_expression(symbols, spec.modulus)
        pads = int(length) - len(symbols) - 1
        tokens = [vocab[s] for s in symbols] + [vocab['=']] + [vocab['PAD']] * pads
        targets = [IGNORE_INDEX] * (len(symbols) + 1) + [value] + [IGNORE_INDEX] * (pads - 1)
        mask = [False] * (len(symbols) + 1) + [True] + [False] * (pads - 1)
        instances.append(_with_bos(vocab['BOS'], tokens, targets, mask))
    return instances


def gen_chomsky(spec: TaskSpec, seed: int, count: int, length_range: tuple[int, int]) -> list[TaskInstance]:
    """Parity or modular arithmetic instances, depending on ``spec.family``.

    Raises:
        - TaskGenerationError: When the family is a group word problem.
    """
    if spec.family == 'parity':
        return gen_parity(seed, count, length_range)
    if spec.family in ('modarith_nobrackets', 'modarith_brackets'):
        return gen_modarith(spec, seed, count, length_range, brackets=spec.family == 'modarith_brackets')
    raise TaskGenerationError(f'{spec.family} is not a Chomsky-hierarchy task')


def generate(spec: TaskSpec, seed: int, count: int, length_range: tuple[int, int]) -> list[TaskInstance]:
    """Instances of any family; group words get one uniformly drawn length per instance."""
    if spec.family != 'group_word':
        return gen_chomsky(spec, seed, count, length_range)
    if length_range[0] == length_range[1]:
        return gen_group_word(spec, seed, count, length_range[0])
    rng = np.random.default_rng(seed)
    lengths = _draw_lengths(rng, count, length_range)
    seeds = rng.integers(0, 2**63 - 1, size=count)
    return [gen_group_word(spec, int(s), 1, int(n))[0] for s, n in zip(seeds, lengths)]


# Vocabulary and scoring


def task_vocab(spec: TaskSpec) -> dict[str, int]:
    """Token name to id, BOS included."""
    if spec.family == 'group_word':
        group = group_of(spec)
        vocab = {repr(g): i for i, g in enumerate(group.elements)}
        vocab['BOS'] = group.order
        return vocab
    if spec.family == 'parity':
        return {'0': 0, '1': 1, 'BOS': 2}
    return modarith_vocab(spec.modulus, spec.family == 'modarith_brackets')


def vocab_size(spec: TaskSpec) -> int:
    return len(task_vocab(spec))


def acc_rand(spec: TaskSpec) -> float:
    """Accuracy of uniform guessing over the possible targets."""
    if spec.family == 'group_word':
        return 1.0 / group_of(spec).order
    if spec.family == 'parity':
        return 0.5
    return 1.0 / spec.modulus


def scaled_accuracy(acc: float, chance: float) -> float:
    """(acc − chance) / (1 − chance), clamped below at 0.

    Raises:
        - TaskGenerationError: When ``chance`` is outside [0, 1).
    """
    if not 0.0 <= chance < 1.0:
        raise TaskGenerationError(f'chance accuracy must lie in [0, 1), got {chance}')
    return max(0.0, (acc - chance) / (1.0 - chance))


def collate(instances: Sequence[TaskInstance], pad_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pads instances with ``pad_id`` and returns ``(tokens, targets)`` as long tensors."""
    width = max(len(x) for x in instances)
    tokens = torch.full((len(instances), width), pad_id, dtype=torch.long)
    targets = torch.full((len(instances), width), IGNORE_INDEX, dtype=torch.long)
    for row, x in enumerate(instances):
        tokens[row, : len(x)] = torch.tensor(x.tokens, dtype=torch.long)
        targets[row, : len(x)] = torch.tensor(x.targets, dtype=torch.long)
    return tokens, targets


# Export


def export_jsonl(instances: Sequence[TaskInstance], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame([x.as_dict() for x in instances], columns=['tokens', 'targets', 'mask']).to_json(
        path, orient='records', lines=True
    )
    return path


def read_jsonl(path: str | Path) -> list[TaskInstance]:
    frame = pd.read_json(path, orient='records', lines=True)
    return [
        TaskInstance(tokens=list(row.tokens), targets=list(row.targets), loss_mask=[bool(m) for m in row.mask])
        for row in frame.itertuples(index=False)
    ]


def write_vocab(spec: TaskSpec, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(task_vocab(spec), indent=2), encoding='utf-8')
    return path
