"""The (Gated) DeltaProduct state recurrence H_i = g_i·A(x_i)·H_{i-1} + B(x_i).

A token update is n_h delta-rule micro-steps H ← (I − β k kᵀ) H + β k vᵀ, applied for j = 0 .. n_h - 1 after the
previous state has been scaled by the token gate. Four evaluation orders are provided and agree to round-off:

- ``forward_sequential``: token by token.
- ``forward_expanded``: one single-factor recurrence over the flattened n_h·t micro-steps, gates interleaved as
  [g_i, 1, …, 1], keeping every n_h-th state.
- ``forward_chunked``: per-chunk transition products and local writes (independent across chunks), a sequential
  pass over chunk boundaries, then every state from its chunk start.
- ``forward_fused``: same arithmetic as the sequential order, but differentiated by a hand-written reverse sweep
  (``HouseholderScan``) that stores one state per token instead of the full autograd tape.

Tensors carry arbitrary leading batch dimensions (``...``); keys have shape ``(..., n_h, n)`` per token, values
``(..., n_h, d)``, betas ``(..., n_h)``, gates ``(...)`` and states ``(..., n, d)``.
"""

from collections.abc import Sequence
from dataclasses import dataclass, replace
from enum import Enum

import torch
from einops import rearrange

from .errors import ContractViolationError

HiddenState = torch.Tensor


class EigenvalueMode(str, Enum):
    """Range of β and therefore of the eigenvalues of every Householder factor.

    ``unit_interval`` uses φ = sigmoid (β ∈ [0, 1], eigenvalues in [0, 1]); ``symmetric_interval`` uses
    φ = 2·sigmoid (β ∈ [0, 2], eigenvalues in [−1, 1]).
    """

    UNIT_INTERVAL = 'unit_interval'
    SYMMETRIC_INTERVAL = 'symmetric_interval'

    @property
    def beta_max(self) -> float:
        return 1.0 if self is EigenvalueMode.UNIT_INTERVAL else 2.0

    def phi(self, x: torch.Tensor) -> torch.Tensor:
        return self.beta_max * torch.sigmoid(x)


@dataclass(frozen=True)
class StepInputs:
    """Per-token bundle of n_h keys, values and betas plus one gate.

    ``values`` may be ``None`` for the homogeneous part of the update (no write).
    """

    keys: torch.Tensor
    values: torch.Tensor | None
    betas: torch.Tensor
    gate: torch.Tensor

    @property
    def n_h(self) -> int:
        return self.keys.shape[-2]

    def homogeneous(self) -> 'StepInputs':
        return replace(self, values=None)


@dataclass(frozen=True)
class StepSequence:
    """Step inputs for a whole sequence, time on the axis right before the per-token axes.

    Shapes: keys ``(..., t, n_h, n)``, values ``(..., t, n_h, d)``, betas ``(..., t, n_h)``, gates ``(..., t)``.
    """

    keys: torch.Tensor
    values: torch.Tensor
    betas: torch.Tensor
    gates: torch.Tensor

    def __post_init__(self):
        t, n_h = self.keys.shape[-3], self.keys.shape[-2]
        if self.values.shape[-3:-1] != (t, n_h) or self.betas.shape[-2:] != (t, n_h) or self.gates.shape[-1] != t:
            raise ContractViolationError(
                f'inconsistent step shapes: keys {tuple(self.keys.shape)}, values {tuple(self.values.shape)}, '
                f'betas {tuple(self.betas.shape)}, gates {tuple(self.gates.shape)}'
            )

    def __len__(self) -> int:
        return self.keys.shape[-3]

    @property
    def n_h(self) -> int:
        return self.keys.shape[-2]

    @property
    def key_dim(self) -> int:
        return self.keys.shape[-1]

    @property
    def value_dim(self) -> int:
        return self.values.shape[-1]

    @property
    def batch_shape(self) -> torch.Size:
        return self.keys.shape[:-3]

    def token(self, i: int) -> StepInputs:
        return StepInputs(
            keys=self.keys[..., i, :, :],
            values=self.values[..., i, :, :],
            betas=self.betas[..., i, :],
            gate=self.gates[..., i],
        )

    @classmethod
    def stack(cls, steps: Sequence[StepInputs]) -> 'StepSequence':
        if not steps:
            raise ContractViolationError('cannot stack an empty list of step inputs')
        return cls(
            keys=torch.stack([s.keys for s in steps], dim=-3),
            values=torch.stack([s.values for s in steps], dim=-3),
            betas=torch.stack([s.betas for s in steps], dim=-2),
            gates=torch.stack([torch.as_tensor(s.gate, dtype=s.betas.dtype) for s in steps], dim=-1),
        )

    def expanded(self) -> 'StepSequence':
        """Flattens the n_h micro-steps of every token into a single-factor sequence of length n_h·t.

        The gate of token i sits on its first micro-step and the remaining n_h − 1 micro-steps get gate 1.
        """
        if self.n_h == 1:
            return self
        tail = torch.ones(self.gates.shape + (self.n_h - 1,), dtype=self.gates.dtype, device=self.gates.device)
        gates = torch.cat([self.gates.unsqueeze(-1), tail], dim=-1)
        return StepSequence(
            keys=rearrange(self.keys, '... t j n -> ... (t j) 1 n'),
            values=rearrange(self.values, '... t j d -> ... (t j) 1 d'),
            betas=rearrange(self.betas, '... t j -> ... (t j) 1'),
            gates=rearrange(gates, '... t j -> ... (t j)'),
        )

    def padded(self, extra: int) -> 'StepSequence':
        """Appends ``extra`` identity tokens (β = 0, gate 1, zero values)."""
        if extra == 0:
            return self
        shape = self.batch_shape + (extra, self.n_h)
        options = {'dtype': self.keys.dtype, 'device': self.keys.device}
        keys = torch.zeros(shape + (self.key_dim,), **options)
        keys[..., 0] = 1.0
        return StepSequence(
            keys=torch.cat([self.keys, keys], dim=-3),
            values=torch.cat([self.values, torch.zeros(shape + (self.value_dim,), **options)], dim=-3),
            betas=torch.cat([self.betas, torch.zeros(shape, **options)], dim=-2),
            gates=torch.cat([self.gates, torch.ones(shape[:-1], **options)], dim=-1),
        )


def micro_step(h: torch.Tensor, key: torch.Tensor, value: torch.Tensor | None, beta: torch.Tensor) -> torch.Tensor:
    """One delta-rule update H − β k (kᵀH) + β k vᵀ, i.e. (I − β k kᵀ) H + β k vᵀ."""
    retrieved = torch.einsum('...n,...nd->...d', key, h)
    delta = -retrieved if value is None else value - retrieved
    return h + beta[..., None, None] * key[..., :, None] * delta[..., None, :]


def step(h_prev: HiddenState, s: StepInputs) -> HiddenState:
    """H_i = g·A·H_{i−1} + B with A = Π_j (I − β_j k_j k_jᵀ) (j = 0 applied first).

    The gate scales the carried state before the micro-steps, so it multiplies the homogeneous part only.
    """
    h = s.gate[..., None, None] * h_prev
    for j in range(s.n_h):
        value = None if s.values is None else s.values[..., j, :]
        h = micro_step(h, s.keys[..., j, :], value, s.betas[..., j])
    return h


def _check_state(h0: HiddenState, inputs: StepSequence) -> None:
    if h0.shape[-2] != inputs.key_dim or h0.shape[-1] != inputs.value_dim:
        raise ContractViolationError(
            f'state shape {tuple(h0.shape[-2:])} does not match (key_dim, value_dim) = '
            f'({inputs.key_dim}, {inputs.value_dim})'
        )


def _empty_states(h0: HiddenState, inputs: StepSequence) -> torch.Tensor:
    batch = torch.broadcast_shapes(h0.shape[:-2], inputs.batch_shape)
    return h0.new_zeros(batch + (0,) + h0.shape[-2:])


def forward_sequential(h0: HiddenState, inputs: StepSequence | Sequence[StepInputs]) -> torch.Tensor:
    """States H_1 … H_t stacked on axis −3."""
    if not isinstance(inputs, StepSequence):
        if len(inputs) == 0:
            return h0.new_zeros(h0.shape[:-2] + (0,) + h0.shape[-2:])
        inputs = StepSequence.stack(inputs)
    _check_state(h0, inputs)
    if len(inputs) == 0:
        return _empty_states(h0, inputs)
    states = []
    h = h0
    for i in range(len(inputs)):
        h = step(h, inputs.token(i))
        states.append(h)
    return torch.stack(states, dim=-3)


def forward_expanded(h0: HiddenState, inputs: StepSequence | Sequence[StepInputs]) -> torch.Tensor:
    if not isinstance(inputs, StepSequence):
        if len(inputs) == 0:
            return h0.new_zeros(h0.shape[:-2] + (0,) + h0.shape[-2:])
        inputs = StepSequence.stack(inputs)
    n_h = inputs.n_h
    states = forward_sequential(h0, inputs.expanded())
    return states[..., n_h - 1 :: n_h, :, :]


def forward_chunked(h0: HiddenState, inputs: StepSequence | Sequence[StepInputs], chunk: int) -> torch.Tensor:
    """Chunk-wise evaluation order.

    Within every chunk the cumulative transition products L_c = A_c ··· A_1 and the local states Z_c (the chunk
    run from a zero state) are built for all chunks at once. A sequential pass over chunk boundaries then gives the
    chunk start states S, and every state is L_c S + Z_c.

    Raises:
        - ContractViolationError: When ``chunk < 1``.
    """
    if chunk < 1:
        raise ContractViolationError(f'chunk size must be at least 1, got {chunk}')
    if not isinstance(inputs, StepSequence):
        if len(inputs) == 0:
            return h0.new_zeros(h0.shape[:-2] + (0,) + h0.shape[-2:])
        inputs = StepSequence.stack(inputs)
    _check_state(h0, inputs)
    t = len(inputs)
    if t == 0:
        return _empty_states(h0, inputs)
    if chunk == 1:
        return forward_sequential(h0, inputs)

    padded = inputs.padded((-t) % chunk)
    chunks = StepSequence(
        keys=rearrange(padded.keys, '... (c l) j n -> ... c l j n', l=chunk),
        values=rearrange(padded.values, '... (c l) j d -> ... c l j d', l=chunk),
        betas=rearrange(padded.betas, '... (c l) j -> ... c l j', l=chunk),
        gates=rearrange(padded.gates, '... (c l) -> ... c l', l=chunk),
    )
    num_chunks = chunks.keys.shape[-4]
    n, d = inputs.key_dim, inputs.value_dim
    eye = torch.eye(n, dtype=h0.dtype, device=h0.device)
    transition = eye.expand(chunks.batch_shape[:-1] + (num_chunks, n, n))
    local = h0.new_zeros(chunks.batch_shape[:-1] + (num_chunks, n, d))
    transitions, locals_ = [], []
    for c in range(chunk):
        token = chunks.token(c)
        transition = step(transition, token.homogeneous())
        local = step(local, token)
        transitions.append(transition)
        locals_.append(local)
    transitions = torch.stack(transitions, dim=-3)
    locals_ = torch.stack(locals_, dim=-3)

    starts = []
    h = h0.expand(torch.broadcast_shapes(h0.shape, locals_.shape[:-4] + (n, d)))
    for c in range(num_chunks):
        starts.append(h)
        h = transitions[..., c, -1, :, :] @ h + locals_[..., c, -1, :, :]
    starts = torch.stack(starts, dim=-3)

    states = transitions @ starts.unsqueeze(-3) + locals_
    states = rearrange(states, '... c l n d -> ... (c l) n d')
    return states[..., :t, :, :]


class HouseholderScan(torch.autograd.Function):
    """Sequential recurrence with a hand-written reverse sweep.

    Backward walks tokens in reverse, recomputes the n_h micro-states of one token from the stored state H_{i−1}
    and accumulates, for every micro-step S' = S + β k (v − kᵀS)ᵀ with upstream gradient G:

    - dS = G − β k (kᵀG)
    - dβ = (kᵀG)·(v − kᵀS)
    - dv = β kᵀG
    - dk = β (G (v − kᵀS) − S (kᵀG))

    and for the gate (applied to H_{i−1} first) dg = ⟨G, H_{i−1}⟩, dH_{i−1} = g G.
    """

    @staticmethod
    def forward(ctx, h0, keys, values, betas, gates):
        inputs = StepSequence(keys=keys, values=values, betas=betas, gates=gates)
        states = forward_sequential(h0, inputs)
        ctx.save_for_backward(h0, keys, values, betas, gates, states)
        return states

    @staticmethod
    def backward(ctx, grad_states):
        h0, keys, values, betas, gates, states = ctx.saved_tensors
        t, n_h = keys.shape[-3], keys.shape[-2]
        grad_keys = torch.zeros_like(keys)
        grad_values = torch.zeros_like(values)
        grad_betas = torch.zeros_like(betas)
        grad_gates = torch.zeros_like(gates)
        carried = torch.zeros_like(h0)
        for i in reversed(range(t)):
            grad = carried + grad_states[..., i, :, :]
            h_prev = h0 if i == 0 else states[..., i - 1, :, :]
            gate = gates[..., i]
            micro = [gate[..., None, None] * h_prev]
            for j in range(n_h - 1):
                micro.append(micro_step(micro[-1], keys[..., i, j, :], values[..., i, j, :], betas[..., i, j]))
            for j in reversed(range(n_h)):
                s = micro[j]
                key, value, beta = keys[..., i, j, :], values[..., i, j, :], betas[..., i, j]
                retrieved = torch.einsum('...n,...nd->...d', key, s)
                pulled = torch.einsum('...n,...nd->...d', key, grad)
                delta = value - retrieved
                grad_betas[..., i, j] = (pulled * delta).sum(-1)
                grad_values[..., i, j, :] = beta[..., None] * pulled
                grad_keys[..., i, j, :] = beta[..., None] * (
                    torch.einsum('...nd,...d->...n', grad, delta) - torch.einsum('...nd,...d->...n', s, pulled)
                )
                grad = grad - beta[..., None, None] * key[..., :, None] * pulled[..., None, :]
            grad_gates[..., i] = (grad * h_prev).sum(dim=(-2, -1))
            carried = gate[..., None, None] * grad
        return carried, grad_keys, grad_values, grad_betas, grad_gates


def forward_fused(h0: HiddenState, inputs: StepSequence) -> torch.Tensor:
    _check_state(h0, inputs)
    if len(inputs) == 0:
        return _empty_states(h0, inputs)
    batch = torch.broadcast_shapes(h0.shape[:-2], inputs.batch_shape)
    h0 = h0.expand(batch + h0.shape[-2:]).contiguous()

    def widen(x: torch.Tensor, trailing: int) -> torch.Tensor:
        return x.expand(batch + x.shape[x.dim() - trailing :])

    return HouseholderScan.apply(
        h0,
        widen(inputs.keys, 3),
        widen(inputs.values, 3),
        widen(inputs.betas, 2),
        widen(inputs.gates, 1),
    )


SCAN_MODES = ('fused', 'sequential', 'expanded', 'chunked')


def run_scan(h0: HiddenState, inputs: StepSequence, mode: str = 'fused', chunk: int = 16) -> torch.Tensor:
    """Dispatches to one of the evaluation orders by name."""
    if mode == 'fused':
        return forward_fused(h0, inputs)
    if mode == 'sequential':
        return forward_sequential(h0, inputs)
    if mode == 'expanded':
        return forward_expanded(h0, inputs)
    if mode == 'chunked':
        return forward_chunked(h0, inputs, chunk)
    raise ContractViolationError(f'unknown scan mode {mode!r}; expected one of {SCAN_MODES}')


def dense_transition(s: StepInputs, n: int) -> torch.Tensor:
    """Materializes g·A for one token as a dense ``(..., n, n)`` matrix."""
    eye = torch.eye(n, dtype=s.keys.dtype, device=s.keys.device)
    return step(eye.expand(s.keys.shape[:-2] + (n, n)), s.homogeneous())


def dense_write(s: StepInputs) -> torch.Tensor:
    """Materializes B for one token as a dense ``(..., n, d)`` matrix."""
    zeros = s.keys.new_zeros(s.keys.shape[:-2] + (s.keys.shape[-1], s.values.shape[-1]))
    return step(zeros, s)


def unit_gates_like(betas: torch.Tensor) -> torch.Tensor:
    return torch.ones(betas.shape[:-1], dtype=betas.dtype, device=betas.device)
