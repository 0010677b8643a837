"""Inspection of trained and constructed models: effective rank, recorded β values, key PCA, extrapolation reports.

Everything returns pandas DataFrames or plain dictionaries ready to be written as CSV or JSON.
"""

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import torch
from dagster import get_dagster_logger
from einops import rearrange
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .constructions import OneLayerConstruction
from .errors import ContractViolationError
from .groups import FiniteGroup
from .model import DeltaProductModel, LayerTrace
from .numerics import as_matrix, pca, singular_values

ZERO_STATE_TOLERANCE = 0.0
SATURATION_THRESHOLD = 1.8


def effective_rank(h) -> float:
    """exp of the entropy of p_k = σ_k / Σ|σ_i|; 0 for the zero matrix.

    Terms with p_k = 0 contribute nothing. The result lies between 1 and the rank of ``h`` for nonzero ``h``.
    """
    sigma = singular_values(as_matrix(h))
    total = float(np.abs(sigma).sum())
    if total <= ZERO_STATE_TOLERANCE:
        return 0.0
    p = sigma / total
    p = p[p > 0]
    return float(math.exp(-float(np.sum(p * np.log(p)))))


@dataclass
class ErankTrace:
    """Effective rank of every head state at every position of one sequence.

    Args:
        - values (np.ndarray):
            ``(positions, heads)`` effective ranks.
        - zero_state (np.ndarray):
            ``(positions, heads)`` flags for zero states, whose rank is reported as 0.
        - heads (list[int]):
            Head indices of the columns.
        - layer (int):
            Layer the states come from.
        - bos_positions (list[int]):
            Positions of sequence boundaries (BOS tokens).
        - train_length (int | None):
            Training context length, as a marker for plots.
    """

    values: np.ndarray
    zero_state: np.ndarray
    heads: list[int]
    layer: int
    bos_positions: list[int] = field(default_factory=list)
    train_length: int | None = None

    def to_frame(self) -> pd.DataFrame:
        positions, heads = self.values.shape
        frame = pd.DataFrame(
            {
                'position': np.repeat(np.arange(positions), heads),
                'head': np.tile(self.heads, positions),
                'erank': self.values.reshape(-1),
                'zero_state': self.zero_state.reshape(-1),
            }
        )
        frame['layer'] = self.layer
        frame.attrs['bos_positions'] = list(self.bos_positions)
        frame.attrs['train_length'] = self.train_length
        return frame

    def markers(self) -> dict:
        return {'layer': self.layer, 'bos_positions': list(self.bos_positions), 'train_length': self.train_length}


def _check_layer(model: DeltaProductModel, layer: int) -> None:
    if not 0 <= layer < model.cfg.layers:
        raise ContractViolationError(f'layer {layer} out of range for a {model.cfg.layers}-layer model')


def _trace(model: DeltaProductModel, tokens: torch.Tensor | Sequence[int]) -> list[LayerTrace]:
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    if tokens.dim() == 1:
        tokens = tokens.unsqueeze(0)
    with torch.no_grad():
        _, traces = model(tokens, trace=True)
    return traces


def erank_trace(
    model: DeltaProductModel,
    tokens: torch.Tensor | Sequence[int],
    layer: int = 0,
    heads: Sequence[int] | None = None,
    bos_id: int | None = None,
    train_length: int | None = None,
) -> ErankTrace:
    """Runs one sequence through ``model`` and records the effective rank of each head state at each position.

    Raises:
        - ContractViolationError: When the layer or a head index is out of range.
    """
    _check_layer(model, layer)
    heads = list(range(model.cfg.heads)) if heads is None else list(heads)
    if any(not 0 <= h < model.cfg.heads for h in heads):
        raise ContractViolationError(f'head indices {heads} out of range for {model.cfg.heads} heads')
    states = _trace(model, tokens)[layer].states[0].numpy()
    positions = states.shape[1]
    values = np.zeros((positions, len(heads)))
    zero = np.zeros((positions, len(heads)), dtype=bool)
    for col, h in enumerate(heads):
        for pos in range(positions):
            values[pos, col] = effective_rank(states[h, pos])
            zero[pos, col] = values[pos, col] == 0.0
    flat = torch.as_tensor(tokens).reshape(-1).tolist()
    bos_positions = [] if bos_id is None else [i for i, t in enumerate(flat) if t == bos_id]
    get_dagster_logger().info(
        f'Effective rank trace over {positions} positions, layer {layer}, heads {heads}: '
        f'mean {values.mean():.3f}, max {values.max():.3f}'
    )
    return ErankTrace(values, zero, heads, layer, bos_positions, train_length)


def record_betas(model: DeltaProductModel, tokens: torch.Tensor | Sequence[int], layer: int = 0) -> np.ndarray:
    """β values of one sequence, shape ``(t, n_h, heads)``."""
    _check_layer(model, layer)
    betas = _trace(model, tokens)[layer].steps.betas[0]
    return rearrange(betas, 'h t j -> t j h').numpy()


def construction_betas(model: OneLayerConstruction, word: Sequence) -> np.ndarray:
    """β values a one-layer construction uses for ``word``, shape ``(t, n_h, 1)``."""
    return model.step_sequence([word]).betas[0].numpy()[..., None]


def record_group_betas(model: DeltaProductModel, group: FiniteGroup, layer: int = 0) -> pd.DataFrame:
    """β values for every group element presented once right after BOS (token id ``|G|``).

    Returns:
        - pd.DataFrame: Columns element, head, factor, beta.
    """
    _check_layer(model, layer)
    tokens = torch.tensor([[group.order, i] for i in range(group.order)], dtype=torch.long)
    with torch.no_grad():
        _, traces = model(tokens, trace=True)
    betas = traces[layer].steps.betas[:, :, 1, :].numpy()
    rows = [
        {'element': repr(g), 'head': h, 'factor': j, 'beta': float(betas[e, h, j])}
        for e, g in enumerate(group.elements)
        for h in range(betas.shape[1])
        for j in range(betas.shape[2])
    ]
    return pd.DataFrame(rows)


def beta_saturated_heads(betas: np.ndarray | pd.DataFrame, threshold: float = SATURATION_THRESHOLD) -> list[int]:
    """Heads with some factor whose mean β over tokens exceeds ``threshold`` (reflection-like heads).

    Args:
        - betas (np.ndarray | pd.DataFrame):
            ``(t, n_h, heads)`` array from ``record_betas`` or the frame of ``record_group_betas``.
        - threshold (float):
            Mean β above which a factor counts as saturated.
    """
    if isinstance(betas, pd.DataFrame):
        means = betas.groupby(['head', 'factor'])['beta'].mean()
        return sorted({int(h) for (h, _), m in means.items() if m > threshold})
    means = np.asarray(betas).mean(axis=0)
    return [int(h) for h in np.nonzero((means > threshold).any(axis=0))[0]]


def collect_keys(
    model: DeltaProductModel | OneLayerConstruction,
    tokens: torch.Tensor | Sequence,
    head: int = 0,
    layer: int = 0,
) -> np.ndarray:
    """All keys (every factor, every position) a head uses on ``tokens``, as rows."""
    if isinstance(model, OneLayerConstruction):
        words = tokens if tokens and isinstance(tokens[0], (list, tuple)) else [tokens]
        return model.step_sequence(words).keys.reshape(-1, model.h0.shape[0]).numpy()
    _check_layer(model, layer)
    if not 0 <= head < model.cfg.heads:
        raise ContractViolationError(f'head {head} out of range for {model.cfg.heads} heads')
    keys = _trace(model, tokens)[layer].steps.keys[:, head]
    return rearrange(keys, 'b t j n -> (b t j) n').numpy()


def key_pca(
    model: DeltaProductModel | OneLayerConstruction,
    tokens: torch.Tensor | Sequence,
    head: int = 0,
    layer: int = 0,
) -> np.ndarray:
    """Explained variance ratios of the keys of one head, descending."""
    ratios, _ = pca(collect_keys(model, tokens, head, layer))
    return ratios


class ExtrapolationRow(BaseModel):
    model_config = ConfigDict(extra='forbid')

    model: str
    length: int = Field(ge=1)
    accuracy: float = Field(ge=0, le=1)
    scaled_accuracy: float = Field(ge=0, le=1)


class ExtrapolationReport(BaseModel):
    """Long-format accuracy table of several models plus the training length marker."""

    model_config = ConfigDict(extra='forbid')

    train_length: int | None = None
    lengths: list[int]
    rows: list[ExtrapolationRow]


def extrapolation_report(tables: Mapping[str, pd.DataFrame], train_length: int | None = None) -> ExtrapolationReport:
    """Merges per-model evaluation tables into one validated long-format report.

    Raises:
        - ContractViolationError: When the tables do not share their length buckets or a row fails validation.
    """
    if not tables:
        raise ContractViolationError('extrapolation_report needs at least one table')
    buckets = {name: sorted(int(x) for x in table['length']) for name, table in tables.items()}
    reference = next(iter(buckets.values()))
    mismatched = [name for name, lengths in buckets.items() if lengths != reference]
    if mismatched:
        raise ContractViolationError(f'tables {mismatched} do not share the length buckets {reference}')
    try:
        rows = [
            ExtrapolationRow(
                model=name,
                length=int(row.length),
                accuracy=float(row.accuracy),
                scaled_accuracy=float(row.scaled_accuracy),
            )
            for name, table in tables.items()
            for row in table.itertuples(index=False)
        ]
        return ExtrapolationReport(train_length=train_length, lengths=reference, rows=rows)
    except ValidationError as e:
        raise ContractViolationError(f'invalid extrapolation row: {e}') from e


def report_frame(report: ExtrapolationReport) -> pd.DataFrame:
    frame = pd.DataFrame([row.model_dump() for row in report.rows], columns=list(ExtrapolationRow.model_fields))
    frame.attrs['train_length'] = report.train_length
    return frame
