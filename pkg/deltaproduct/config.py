"""Run configuration: pydantic schemas, TOML/JSON loading, dotted-key overrides and named presets."""

import copy
import hashlib
import json
import sys
from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigNotFoundError, ContractViolationError
from .recurrence import EigenvalueMode

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

TaskFamily = Literal['group_word', 'parity', 'modarith_nobrackets', 'modarith_brackets']
ScanMode = Literal['fused', 'sequential', 'expanded', 'chunked']
GROUP_NAMES = ('S3', 'S4', 'A5', 'S5')


class _Schema(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)


class ModelConfig(_Schema):
    """Architecture of a DeltaProduct language model.

    Args:
        - layers (int): Number of stacked DeltaProduct layers.
        - heads (int): Heads per layer, each with its own recurrence.
        - head_key_dim (int): Key dimension n of every head state.
        - head_value_dim (int): Value dimension d of every head state.
        - n_h (int): Householder factors per token.
        - eigenvalue_mode (EigenvalueMode): β range, [0, 1] or [0, 2].
        - gated (bool): Scalar forget gate per head and token.
        - vocab_size (int | None): Token vocabulary; ``None`` takes the task's vocabulary.
        - model_dim (int): Residual stream width l.
        - conv (bool): Causal depthwise convolution on the query/key/value paths.
        - conv_size (int): Kernel width of that convolution.
        - mlp_ratio (int): SwiGLU hidden width as a multiple of ``model_dim``.
        - norm_eps (float): RMSNorm epsilon.
        - tie_embeddings (bool): Reuse the embedding matrix as output projection.
        - scan (str): Recurrence evaluation order used in the forward pass.
        - chunk_size (int): Chunk length for ``scan='chunked'``.
        - init_std (float): Base standard deviation of the weight initialization.
    """

    layers: int = Field(1, ge=1)
    heads: int = Field(4, ge=1)
    head_key_dim: int = Field(16, ge=1)
    head_value_dim: int = Field(16, ge=1)
    n_h: int = Field(2, ge=1)
    eigenvalue_mode: EigenvalueMode = EigenvalueMode.SYMMETRIC_INTERVAL
    gated: bool = False
    vocab_size: int | None = Field(None, ge=1)
    model_dim: int = Field(64, ge=1)
    conv: bool = False
    conv_size: int = Field(4, ge=1)
    mlp_ratio: int = Field(4, ge=1)
    norm_eps: float = Field(1e-5, gt=0)
    tie_embeddings: bool = False
    scan: ScanMode = 'fused'
    chunk_size: int = Field(16, ge=1)
    init_std: float = Field(0.02, gt=0)

    @property
    def beta_max(self) -> float:
        return self.eigenvalue_mode.beta_max


class BracketSamplerConfig(_Schema):
    """Knobs of the random expression sampler for modular arithmetic with brackets.

    At every expansion the sampler picks a binary node with ``p_binary``, a negated parenthesis with ``p_unary``, a
    plain parenthesis with ``p_paren`` and a digit otherwise; nodes that would overrun the length budget fall back to
    shorter ones.
    """

    p_binary: float = Field(0.45, ge=0, le=1)
    p_unary: float = Field(0.15, ge=0, le=1)
    p_paren: float = Field(0.15, ge=0, le=1)

    @model_validator(mode='after')
    def _probabilities(self) -> 'BracketSamplerConfig':
        if self.p_binary + self.p_unary + self.p_paren > 1.0 + 1e-12:
            raise ValueError('p_binary + p_unary + p_paren must not exceed 1')
        return self


class TaskSpec(_Schema):
    """Which dataset to train and evaluate on.

    Args:
        - family (str): ``group_word``, ``parity``, ``modarith_nobrackets`` or ``modarith_brackets``.
        - group (str): Group of the word problem: ``S3``, ``S4``, ``A5``, ``S5``, ``Z<m>`` or ``D<m>``.
        - modulus (int): Modulus of the arithmetic tasks.
        - train_length (tuple[int, int]): Inclusive range of training sequence lengths (without BOS).
        - train_samples (int | None): Fixed training set size; ``None`` samples fresh instances every step.
        - eval_lengths (list[int]): Length buckets of the evaluation table.
        - eval_samples (int): Instances per evaluation bucket.
        - operator_weights (dict[str, float]): Relative frequencies of ``+``, ``-`` and ``*``.
        - brackets (BracketSamplerConfig): Expression sampler knobs.
    """

    family: TaskFamily = 'group_word'
    group: str = 'S3'
    modulus: int = Field(5, ge=2)
    train_length: tuple[int, int] = (64, 64)
    train_samples: int | None = Field(100_000, ge=1)
    eval_lengths: list[int] = Field(default_factory=lambda: [64, 128, 256, 512])
    eval_samples: int = Field(256, ge=1)
    operator_weights: dict[str, float] = Field(default_factory=lambda: {'+': 1.0, '-': 1.0, '*': 1.0})
    brackets: BracketSamplerConfig = Field(default_factory=BracketSamplerConfig)

    @field_validator('group')
    @classmethod
    def _group_name(cls, value: str) -> str:
        if value in GROUP_NAMES:
            return value
        if value[:1] in ('Z', 'D') and value[1:].isdigit() and int(value[1:]) >= 2:
            return value
        raise ValueError(f'unknown group {value!r}; expected one of {GROUP_NAMES}, Z<m> or D<m> with m >= 2')

    @field_validator('train_length')
    @classmethod
    def _length_range(cls, value: tuple[int, int]) -> tuple[int, int]:
        low, high = value
        if not 1 <= low <= high:
            raise ValueError(f'train_length must satisfy 1 <= min <= max, got {value}')
        return value

    @field_validator('eval_lengths')
    @classmethod
    def _eval_lengths(cls, value: list[int]) -> list[int]:
        if not value or min(value) < 1:
            raise ValueError('eval_lengths must be a nonempty list of positive lengths')
        return value

    @field_validator('operator_weights')
    @classmethod
    def _operators(cls, value: dict[str, float]) -> dict[str, float]:
        if not set(value) <= {'+', '-', '*'} or sum(value.values()) <= 0 or min(value.values()) < 0:
            raise ValueError(f'operator_weights needs nonnegative weights for +, - and * only, got {value}')
        return value


class TrainConfig(_Schema):
    """Optimisation settings.

    Either ``epochs`` over a fixed training set or an explicit ``steps`` count (required for streamed tasks).
    """

    lr: float = Field(1e-3, ge=0)
    min_lr: float = Field(0.0, ge=0)
    batch_size: int = Field(256, ge=1)
    epochs: int = Field(5, ge=1)
    steps: int | None = Field(None, ge=1)
    warmup_fraction: float = Field(0.1, ge=0, lt=1)
    weight_decay: float = Field(1e-6, ge=0)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0)
    grad_clip: float | None = Field(None, gt=0)
    seed: int = 0
    eval_every: int = Field(0, ge=0)
    log_every: int = Field(50, ge=1)


class RunSpec(_Schema):
    """Everything needed to reproduce one experiment."""

    model: ModelConfig = Field(default_factory=ModelConfig)
    task: TaskSpec = Field(default_factory=TaskSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    output_dir: str = 'runs/default'

    @property
    def seed(self) -> int:
        return self.train.seed

    @model_validator(mode='after')
    def _streamed_needs_steps(self) -> 'RunSpec':
        if self.task.train_samples is None and self.train.steps is None:
            raise ValueError('train.steps is required when task.train_samples is None (streamed training data)')
        return self


PRESETS: dict[str, dict[str, Any]] = {
    'desk_scale': {
        'model': {'layers': 1, 'heads': 4, 'head_key_dim': 16, 'head_value_dim': 16, 'n_h': 2, 'model_dim': 64},
        'task': {'family': 'group_word', 'group': 'S3', 'train_length': [64, 64], 'train_samples': 100_000},
        'train': {'lr': 1e-3, 'batch_size': 256, 'epochs': 5, 'weight_decay': 1e-6},
    },
    'full_scale': {
        'model': {'layers': 1, 'heads': 12, 'head_key_dim': 32, 'head_value_dim': 32, 'n_h': 2, 'model_dim': 384},
        'task': {
            'family': 'group_word',
            'group': 'S3',
            'train_length': [128, 128],
            'train_samples': 2_000_000,
            'eval_lengths': [128, 256, 512],
            'eval_samples': 2048,
        },
        'train': {'lr': 1e-3, 'batch_size': 1024, 'epochs': 100, 'weight_decay': 1e-6},
    },
    'chomsky_desk': {
        'model': {
            'layers': 3,
            'heads': 1,
            'head_key_dim': 32,
            'head_value_dim': 32,
            'n_h': 1,
            'model_dim': 64,
            'conv': True,
        },
        'task': {
            'family': 'parity',
            'train_length': [3, 40],
            'train_samples': None,
            'eval_lengths': list(range(40, 257, 8)),
        },
        'train': {
            'lr': 5e-4,
            'min_lr': 1e-6,
            'batch_size': 256,
            'steps': 2000,
            'warmup_fraction': 0.1,
            'weight_decay': 0.1,
        },
    },
    'modarith_desk': {
        'model': {
            'layers': 3,
            'heads': 1,
            'head_key_dim': 32,
            'head_value_dim': 32,
            'n_h': 1,
            'model_dim': 64,
            'conv': True,
        },
        'task': {
            'family': 'modarith_nobrackets',
            'modulus': 5,
            'train_length': [3, 40],
            'train_samples': None,
            'eval_lengths': list(range(40, 257, 8)),
        },
        'train': {
            'lr': 5e-4,
            'min_lr': 1e-6,
            'batch_size': 256,
            'steps': 2000,
            'warmup_fraction': 0.1,
            'weight_decay': 0.1,
            'grad_clip': 1.0,
        },
    },
}


def _deep_merge(base: dict[str, Any], update: Mapping[str, Any]) -> dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def parse_override(override: str) -> tuple[list[str], Any]:
    """Splits ``section.key=value`` into the key path and a value parsed as JSON when possible.

    Raises:
        - ContractViolationError: When the override has no ``=`` or an empty key.
    """
    key, sep, raw = override.partition('=')
    if not sep or not key.strip():
        raise ContractViolationError(f'override {override!r} is not of the form dotted.key=value')
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split('.'), value


def apply_overrides(raw: dict[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    result = copy.deepcopy(raw)
    for override in overrides:
        path, value = parse_override(override)
        node = result
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ContractViolationError(f'override {override!r} descends into a non-table value')
        node[path[-1]] = value
    return result


def read_config_file(path: str | Path) -> dict[str, Any]:
    """Reads a TOML (``.toml``) or JSON (anything else) config file into a plain mapping.

    Raises:
        - ConfigNotFoundError: When the file does not exist.
        - ContractViolationError: When the file cannot be parsed.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigNotFoundError(str(path))
    try:
        if path.suffix == '.toml':
            with path.open('rb') as fp:
                return tomllib.load(fp)
        with path.open('r', encoding='utf-8') as fp:
            return json.load(fp)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ContractViolationError(f'config {path} could not be parsed: {e}') from e


def build_run_spec(raw: Mapping[str, Any]) -> RunSpec:
    """Validates a raw mapping, resolving an optional top-level ``preset`` key first.

    Raises:
        - ContractViolationError: When the preset is unknown or the mapping does not validate.
    """
    raw = dict(raw)
    preset = raw.pop('preset', None)
    if preset is not None:
        if preset not in PRESETS:
            raise ContractViolationError(f'unknown preset {preset!r}; expected one of {sorted(PRESETS)}')
        raw = _deep_merge(PRESETS[preset], raw)
    try:
        return RunSpec.model_validate(raw)
    except ValidationError as e:
        raise ContractViolationError(f'invalid run configuration: {e}') from e


def load_run_spec(
    path: str | Path | None = None,
    overrides: Iterable[str] = (),
    preset: str | None = None,
) -> RunSpec:
    """Loads and validates a run configuration.

    Precedence, lowest first: preset, config file, dotted-key overrides.

    Args:
        - path (str | Path | None):
            TOML or JSON file. ``None`` starts from the preset (or the defaults) alone.
        - overrides (Iterable[str]):
            ``dotted.key=value`` strings, e.g. ``model.n_h=3``.
        - preset (str | None):
            Name of an entry in ``PRESETS``.

    Returns:
        - RunSpec: Validated configuration.

    Raises:
        - ConfigNotFoundError: When ``path`` does not exist.
        - ContractViolationError: When the configuration does not validate.
    """
    raw: dict[str, Any] = {} if preset is None else {'preset': preset}
    if path is not None:
        raw = _deep_merge(raw, read_config_file(path))
    return build_run_spec(apply_overrides(raw, overrides))


def config_hash(spec: BaseModel) -> str:
    canonical = json.dumps(spec.model_dump(mode='json'), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()
