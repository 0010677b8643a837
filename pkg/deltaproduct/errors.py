from typing import Any


class ContractViolationError(ValueError):
    """Raised when a caller breaks a documented precondition (shapes, ranges, unknown names)."""


class ConfigNotFoundError(ContractViolationError, FileNotFoundError):
    """Raised when a run configuration file does not exist."""

    def __init__(self, path: str):
        super().__init__(f'config not found: {path}')
        self.path = path


class CheckpointNotFoundError(ContractViolationError, FileNotFoundError):
    """Raised when a checkpoint directory has no manifest."""

    def __init__(self, path: str):
        super().__init__(f'checkpoint not found: {path}')
        self.path = path


class TaskGenerationError(ContractViolationError):
    """Raised when a dataset generator cannot produce a valid instance for the requested parameters."""


class NumericalError(ArithmeticError):
    """Raised when a computation leaves the finite / well-conditioned regime it relies on."""

    def __init__(self, message: str, report: dict[str, Any] | None = None):
        super().__init__(message)
        self.report = report or {}


class TrainingDivergedError(NumericalError):
    """Raised when the training loss becomes NaN or infinite.

    Args:
        - step (int):
            Optimizer step at which the loss diverged.
        - lr (float):
            Learning rate used for the diverging step.
        - grad_norms (dict[str, float]):
            Per-parameter gradient norms of the last finished backward pass.
    """

    def __init__(self, step: int, lr: float, grad_norms: dict[str, float]):
        worst = sorted(grad_norms.items(), key=lambda item: -item[1])[:5]
        super().__init__(
            f'Loss diverged at step {step} (lr={lr:.3e}); largest grad norms: {worst}',
            report={'step': step, 'lr': lr, 'grad_norms': grad_norms},
        )
        self.step = step
        self.lr = lr
        self.grad_norms = grad_norms
