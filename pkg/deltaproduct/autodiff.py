"""Reverse-mode gradients and the finite-difference oracle used to check them.

Gradients come from ``torch.autograd``. The recurrence enters the graph as the ``HouseholderScan`` primitive, every
other operation as a built-in differentiable torch operation.
"""

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import ContractViolationError

logger = logging.getLogger(__name__)

LossFn = Callable[[], torch.Tensor]


def grad(loss_fn: LossFn, params: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Gradients of a scalar loss with respect to ``params``, zeros for parameters the loss does not depend on.

    Args:
        - loss_fn (Callable[[], torch.Tensor]):
            Recomputes the scalar loss from the current parameter values.
        - params (Sequence[torch.Tensor]):
            Leaf tensors with ``requires_grad=True``.

    Returns:
        - list[torch.Tensor]: One gradient per parameter, same shapes.

    Raises:
        - ContractViolationError: When the loss is not a scalar or a parameter does not require gradients.
    """
    params = list(params)
    for p in params:
        if not p.requires_grad:
            raise ContractViolationError('grad() needs parameters with requires_grad=True')
    with torch.enable_grad():
        loss = loss_fn()
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise ContractViolationError('loss_fn must return a scalar tensor')
    if not loss.requires_grad:
        return [torch.zeros_like(p) for p in params]
    grads = torch.autograd.grad(loss.reshape(()), params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> torch.Tensor:
    return (analytic - numeric).abs() / torch.clamp(analytic.abs() + numeric.abs(), min=1e-8)


@dataclass
class FiniteDifferenceReport:
    """Outcome of comparing analytic gradients against central differences.

    Args:
        - max_relative_error (dict[str, float]):
            Largest relative error |a − n| / max(1e-8, |a| + |n|) per parameter.
        - tolerance (float):
            Threshold the errors were compared against.
        - checked_entries (dict[str, int]):
            How many entries of each parameter were perturbed.
    """

    max_relative_error: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-5
    checked_entries: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_relative_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def as_dict(self) -> dict:
        return {
            'passed': self.passed,
            'tolerance': self.tolerance,
            'worst': self.worst,
            'max_relative_error': self.max_relative_error,
            'checked_entries': self.checked_entries,
        }


def finite_difference_check(
    loss_fn: LossFn,
    params: Sequence[torch.Tensor] | dict[str, torch.Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-5,
    max_entries: int | None = None,
    directions: int | None = None,
    seed: int = 0,
) -> FiniteDifferenceReport:
    """Compares ``grad`` against central finite differences (L(p + h) − L(p − h)) / 2h.

    Either single entries are perturbed (all of them, or ``max_entries`` random ones per parameter), or, with
    ``directions`` set, the whole parameter is moved along random unit directions u and ⟨∇L, u⟩ is compared with the
    difference quotient. Directional checks stay meaningful when individual gradient entries are close to zero.

    Args:
        - loss_fn (Callable[[], torch.Tensor]):
            Recomputes the scalar loss from the current parameter values.
        - params (Sequence[torch.Tensor] | dict[str, torch.Tensor]):
            Parameters to check; a dict gives them names in the report.
        - step (float):
            Perturbation h.
        - tolerance (float):
            Pass threshold on the maximal relative error.
        - max_entries (int | None):
            Check at most this many randomly chosen entries per parameter; ``None`` checks all of them.
        - directions (int | None):
            Number of random directions per parameter; overrides entry-wise checking when set.
        - seed (int):
            Seed of the entry and direction selection.

    Returns:
        - FiniteDifferenceReport: Per-parameter maximal relative errors and the pass flag.

    Raises:
        - ContractViolationError: When ``step`` is not positive.
    """
    if step <= 0:
        raise ContractViolationError(f'finite-difference step must be positive, got {step}')
    named = dict(params) if isinstance(params, dict) else {f'param_{i}': p for i, p in enumerate(params)}
    analytic = dict(zip(named, grad(loss_fn, list(named.values()))))
    generator = torch.Generator().manual_seed(seed)
    report = FiniteDifferenceReport(tolerance=tolerance)

    def central_difference(p: torch.Tensor, offset: torch.Tensor) -> float:
        original = p.data.clone()
        p.data.add_(offset)
        upper = float(loss_fn())
        p.data.copy_(original - offset)
        lower = float(loss_fn())
        p.data.copy_(original)
        return (upper - lower) / (2.0 * step)

    with torch.no_grad():
        for name, p in named.items():
            g = analytic[name].reshape(-1)
            if directions is not None:
                probes = torch.randn(directions, p.numel(), generator=generator, dtype=p.dtype)
                probes = list(probes / probes.norm(dim=1, keepdim=True))
            else:
                indices = torch.arange(p.numel())
                if max_entries is not None and p.numel() > max_entries:
                    indices = torch.randperm(p.numel(), generator=generator)[:max_entries]
                probes = [F.one_hot(i, p.numel()).to(p.dtype) for i in indices]
            projected = torch.tensor([float(u @ g) for u in probes], dtype=p.dtype)
            numeric = torch.tensor([central_difference(p, step * u.view_as(p)) for u in probes], dtype=p.dtype)
            errors = relative_error(projected, numeric)
            report.max_relative_error[name] = float(errors.max()) if errors.numel() else 0.0
            report.checked_entries[name] = len(probes)
    logger.info(f'Finite-difference check: worst relative error {report.worst:.3e} (tolerance {tolerance:.1e})')
    return report
