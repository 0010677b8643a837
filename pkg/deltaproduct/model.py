"""DeltaProduct layer and language model on top of the recurrence in ``recurrence.py``.

Layer dataflow for an input sequence x (batch, time, model_dim):

    k_j = normalize(SiLU(conv(W_j x)))   v_j = conv(V_j x)   β_j = φ(U_j x)   g = sigmoid(w_g x + b_g)
    q   = normalize(SiLU(conv(W_q x)))
    H_t = g_t A_t H_{t-1} + B_t                               (per head)
    o_t = W_o concat_h RMSNorm((H_t^h)ᵀ q_t^h)
    y_t = r_t + MLP(RMSNorm(r_t)),  r_t = x_t + o_t
"""

import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from .config import ModelConfig
from .errors import ContractViolationError, NumericalError
from .householder import MIN_KEY_NORM
from .recurrence import EigenvalueMode, StepInputs, StepSequence, run_scan

logger = logging.getLogger(__name__)

DTYPE = torch.float64
GATE_BIAS = 3.0


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        rms = x.pow(2).mean(dim=-1, keepdim=True).add(self.eps).rsqrt()
        return x * rms * self.weight


class CausalDepthwiseConv1d(nn.Module):
    """Per-channel causal convolution over time; position t sees t − size + 1 … t, zero-padded on the left."""

    def __init__(self, channels: int, size: int = 4):
        super().__init__()
        self.size = size
        self.weight = nn.Parameter(torch.zeros(channels, 1, size))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = rearrange(x, 'b t c -> b c t')
        x = F.conv1d(F.pad(x, (self.size - 1, 0)), self.weight, groups=x.shape[1])
        return rearrange(x, 'b c t -> b t c')


class SwiGLU(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.gate_proj = nn.Linear(dim, hidden, bias=False)
        self.up_proj = nn.Linear(dim, hidden, bias=False)
        self.down_proj = nn.Linear(hidden, dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.down_proj(F.silu(self.gate_proj(x)) * self.up_proj(x))


def normalize_keys(raw: torch.Tensor, what: str = 'key') -> torch.Tensor:
    """SiLU followed by L2 normalization over the last axis.

    Raises:
        - NumericalError: When a pre-normalization vector has norm below ``MIN_KEY_NORM``.
    """
    activated = F.silu(raw)
    norms = activated.norm(dim=-1, keepdim=True)
    if norms.numel() and torch.any(norms < MIN_KEY_NORM):
        smallest = norms.detach().min().item()
        raise NumericalError(
            f'{what} norm {smallest:.3e} is below {MIN_KEY_NORM:.0e} before normalization',
            report={'min_norm': smallest, 'shape': tuple(raw.shape)},
        )
    return activated / norms


@dataclass(frozen=True)
class LayerTrace:
    """Intermediate tensors of one layer, heads on axis 1: steps ``(b, h, t, …)``, states ``(b, h, t, n, d)``."""

    steps: StepSequence
    queries: torch.Tensor
    states: torch.Tensor


class DeltaProductLayer(nn.Module):
    """One DeltaProduct token mixer plus its decoder (readout, residual, RMSNorm, SwiGLU MLP).

    The decoder keeps a residual path around the MLP: with r = x + o the output is r + MLP(RMSNorm(r)), so a layer
    whose state stays at zero returns x + MLP(RMSNorm(x)) and not MLP(RMSNorm(x)) alone.

    Holds every learnable parameter of a layer: the n_h key/value/β projections for all heads (stacked in one
    ``nn.Linear`` each), the optional gate projection, the query and output projections, the head RMSNorm, the MLP
    and, when enabled, the causal depthwise convolutions of the query, key and value paths.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        heads, n_h, n, d, dim = cfg.heads, cfg.n_h, cfg.head_key_dim, cfg.head_value_dim, cfg.model_dim
        self.key_proj = nn.Linear(dim, heads * n_h * n, bias=False)
        self.value_proj = nn.Linear(dim, heads * n_h * d, bias=False)
        self.beta_proj = nn.Linear(dim, heads * n_h, bias=False)
        self.gate_proj = nn.Linear(dim, heads, bias=True) if cfg.gated else None
        self.query_proj = nn.Linear(dim, heads * n, bias=False)
        self.output_proj = nn.Linear(heads * d, dim, bias=False)
        self.head_norm = RMSNorm(d, cfg.norm_eps)
        self.mlp_norm = RMSNorm(dim, cfg.norm_eps)
        self.mlp = SwiGLU(dim, cfg.mlp_ratio * dim)
        if cfg.conv:
            self.query_conv = CausalDepthwiseConv1d(heads * n, cfg.conv_size)
            self.key_conv = CausalDepthwiseConv1d(heads * n_h * n, cfg.conv_size)
            self.value_conv = CausalDepthwiseConv1d(heads * n_h * d, cfg.conv_size)
        else:
            self.query_conv = self.key_conv = self.value_conv = None

    @property
    def mode(self) -> EigenvalueMode:
        return self.cfg.eigenvalue_mode

    def activate(
        self,
        key_raw: torch.Tensor,
        value_raw: torch.Tensor,
        beta_raw: torch.Tensor,
        gate_raw: torch.Tensor | None,
        mode: EigenvalueMode | None = None,
    ) -> StepInputs:
        """Turns raw projections ``(..., features)`` into per-head step inputs ``(..., heads, n_h, ·)``."""
        heads, n_h = self.cfg.heads, self.cfg.n_h
        mode = self.mode if mode is None else mode
        keys = normalize_keys(rearrange(key_raw, '... (h j n) -> ... h j n', h=heads, j=n_h))
        values = rearrange(value_raw, '... (h j d) -> ... h j d', h=heads, j=n_h)
        betas = mode.phi(rearrange(beta_raw, '... (h j) -> ... h j', h=heads, j=n_h))
        if gate_raw is None:
            gate = torch.ones(betas.shape[:-1], dtype=betas.dtype, device=betas.device)
        else:
            gate = torch.sigmoid(gate_raw)
        return StepInputs(keys=keys, values=values, betas=betas, gate=gate)

    def queries(self, query_raw: torch.Tensor) -> torch.Tensor:
        return normalize_keys(rearrange(query_raw, '... (h n) -> ... h n', h=self.cfg.heads), what='query')

    def step_sequence(self, x: torch.Tensor) -> tuple[StepSequence, torch.Tensor]:
        """Step inputs and queries for a batch of sequences ``(b, t, model_dim)``, heads moved before time."""
        key_raw, value_raw, query_raw = self.key_proj(x), self.value_proj(x), self.query_proj(x)
        if self.key_conv is not None:
            key_raw = self.key_conv(key_raw)
            value_raw = self.value_conv(value_raw)
            query_raw = self.query_conv(query_raw)
        gate_raw = None if self.gate_proj is None else self.gate_proj(x)
        s = self.activate(key_raw, value_raw, self.beta_proj(x), gate_raw)
        steps = StepSequence(
            keys=rearrange(s.keys, 'b t h j n -> b h t j n'),
            values=rearrange(s.values, 'b t h j d -> b h t j d'),
            betas=rearrange(s.betas, 'b t h j -> b h t j'),
            gates=rearrange(s.gate, 'b t h -> b h t'),
        )
        return steps, rearrange(self.queries(query_raw), 'b t h n -> b h t n')

    def forward(self, x: torch.Tensor, trace: bool = False) -> torch.Tensor | tuple[torch.Tensor, LayerTrace]:
        steps, queries = self.step_sequence(x)
        h0 = x.new_zeros(self.cfg.head_key_dim, self.cfg.head_value_dim)
        states = run_scan(h0, steps, mode=self.cfg.scan, chunk=self.cfg.chunk_size)
        readout = torch.einsum('bhtnd,bhtn->bhtd', states, queries)
        o = self.output_proj(rearrange(self.head_norm(readout), 'b h t d -> b t (h d)'))
        residual = x + o
        y = residual + self.mlp(self.mlp_norm(residual))
        if trace:
            return y, LayerTrace(steps=steps, queries=queries, states=states)
        return y


def compute_step_inputs(x: torch.Tensor, layer: DeltaProductLayer, mode: EigenvalueMode | None = None) -> StepInputs:
    """Per-token step inputs of ``layer`` for input vectors ``x`` of shape ``(..., model_dim)``.

    The convolution is not applied: it mixes neighbouring tokens and therefore needs the whole sequence.

    Raises:
        - ContractViolationError: When the last axis of ``x`` is not the model dimension.
        - NumericalError: When a key has (near) zero norm before normalization.
    """
    if x.shape[-1] != layer.cfg.model_dim:
        raise ContractViolationError(f'input has dimension {x.shape[-1]}, expected {layer.cfg.model_dim}')
    gate_raw = None if layer.gate_proj is None else layer.gate_proj(x)
    return layer.activate(layer.key_proj(x), layer.value_proj(x), layer.beta_proj(x), gate_raw, mode=mode)


def init_weights(module: nn.Module, std: float) -> None:
    """Normal init with std·min(1, √(2/fan_in)) for projections, std for embeddings, near-identity convolutions."""
    for sub in module.modules():
        if isinstance(sub, nn.Linear):
            fan_in = sub.weight.shape[1]
            nn.init.normal_(sub.weight, mean=0.0, std=std * min(1.0, math.sqrt(2.0 / fan_in)))
            if sub.bias is not None:
                nn.init.zeros_(sub.bias)
        elif isinstance(sub, nn.Embedding):
            nn.init.normal_(sub.weight, mean=0.0, std=std)
        elif isinstance(sub, CausalDepthwiseConv1d):
            nn.init.normal_(sub.weight, mean=0.0, std=std)
            with torch.no_grad():
                sub.weight[..., -1] += 1.0
    for sub in module.modules():
        if isinstance(sub, DeltaProductLayer) and sub.gate_proj is not None:
            # keep most of the state at init
            nn.init.constant_(sub.gate_proj.bias, GATE_BIAS)


class DeltaProductModel(nn.Module):
    """Embedding, stacked DeltaProduct layers, final RMSNorm and output projection."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.vocab_size is None:
            raise ContractViolationError('ModelConfig.vocab_size must be resolved before building a model')
        self.cfg = cfg
        self.embedding = nn.Embedding(cfg.vocab_size, cfg.model_dim)
        self.layers = nn.ModuleList([DeltaProductLayer(cfg) for _ in range(cfg.layers)])
        self.final_norm = RMSNorm(cfg.model_dim, cfg.norm_eps)
        self.lm_head = None if cfg.tie_embeddings else nn.Linear(cfg.model_dim, cfg.vocab_size, bias=False)
        init_weights(self, cfg.init_std)
        self.to(DTYPE)

    def _check_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        if tokens.dim() != 2:
            raise ContractViolationError(f'tokens must have shape (batch, time), got {tuple(tokens.shape)}')
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.cfg.vocab_size):
            raise ContractViolationError(
                f'token ids must lie in [0, {self.cfg.vocab_size}), '
                f'got range [{int(tokens.min())}, {int(tokens.max())}]'
            )
        return tokens

    def forward(self, tokens: torch.Tensor, trace: bool = False):
        """Logits ``(batch, time, vocab)``; with ``trace=True`` also one ``LayerTrace`` per layer.

        Raises:
            - ContractViolationError: When a token id is outside the vocabulary.
        """
        tokens = self._check_tokens(tokens)
        x = self.embedding(tokens)
        traces = []
        for layer in self.layers:
            if trace:
                x, layer_trace = layer(x, trace=True)
                traces.append(layer_trace)
            else:
                x = layer(x)
        x = self.final_norm(x)
        logits = x @ self.embedding.weight.T if self.lm_head is None else self.lm_head(x)
        return (logits, traces) if trace else logits

    @torch.no_grad()
    def predict(self, tokens: torch.Tensor) -> torch.Tensor:
        return self(tokens).argmax(dim=-1)


def build_model(cfg: ModelConfig, seed: int = 0) -> DeltaProductModel:
    torch.manual_seed(seed)
    model = DeltaProductModel(cfg)
    n_params = sum(p.numel() for p in model.parameters())
    logger.info(f'Built DeltaProduct model with {cfg.layers} layer(s), n_h={cfg.n_h}, {n_params} parameters')
    return model


def model_forward(tokens: torch.Tensor, weights: Mapping[str, torch.Tensor], cfg: ModelConfig) -> torch.Tensor:
    """Logits of a model with the given ``state_dict`` weights.

    Raises:
        - ContractViolationError: When a token id is outside the vocabulary or the weights do not fit ``cfg``.
    """
    model = DeltaProductModel(cfg)
    try:
        model.load_state_dict(dict(weights))
    except RuntimeError as e:
        raise ContractViolationError(f'weights do not match the model configuration: {e}') from e
    model.eval()
    with torch.no_grad():
        return model(tokens)
