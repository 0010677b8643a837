"""AdamW with cosine schedule, masked cross-entropy training and per-length evaluation."""

import math
from collections.abc import Callable, Iterable, Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from dagster import get_dagster_logger

from .config import ModelConfig, RunSpec, TaskSpec
from .errors import ContractViolationError, TrainingDivergedError
from .io_managers import Checkpoint, read_checkpoint, write_checkpoint
from .model import DeltaProductModel, build_model
from .tasks import IGNORE_INDEX, TaskInstance, acc_rand, collate, generate, scaled_accuracy, task_vocab, vocab_size

METRICS_FILE = 'metrics.csv'
PREDICTIONS_FILE = 'predictions.csv'
EVALUATION_FILE = 'evaluation.csv'
CHECKPOINT_DIR = 'checkpoint'


class AdamW(torch.optim.Optimizer):
    """Adam with bias-corrected moments and decoupled weight decay.

    The state of every parameter holds ``step``, ``exp_avg`` and ``exp_avg_sq``.
    """

    def __init__(
        self,
        params: Iterable[torch.nn.Parameter],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        if lr < 0:
            raise ContractViolationError(f'Invalid learning rate: {lr}')
        if not all(0.0 <= b < 1.0 for b in betas):
            raise ContractViolationError(f'Invalid betas: {betas}')
        defaults = {'lr': lr, 'betas': betas, 'eps': eps, 'weight_decay': weight_decay}
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure: Callable | None = None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            lr = group['lr']
            beta1, beta2 = group['betas']
            eps = group['eps']
            weight_decay = group['weight_decay']
            for p in group['params']:
                if p.grad is None:
                    continue
                grad = p.grad
                state = self.state[p]
                if len(state) == 0:
                    state['step'] = 0
                    state['exp_avg'] = torch.zeros_like(p)
                    state['exp_avg_sq'] = torch.zeros_like(p)
                state['step'] += 1
                t = state['step']
                exp_avg, exp_avg_sq = state['exp_avg'], state['exp_avg_sq']

                p.mul_(1.0 - lr * weight_decay)
                exp_avg.mul_(beta1).add_(grad, alpha=1.0 - beta1)
                exp_avg_sq.mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)
                m_hat = exp_avg / (1.0 - beta1**t)
                v_hat = exp_avg_sq / (1.0 - beta2**t)
                p.addcdiv_(m_hat, v_hat.sqrt().add_(eps), value=-lr)
        return loss


def cosine_schedule(step: int, total: int, warmup: int, lr_max: float, lr_min: float) -> float:
    """Linear warm-up from 0 to ``lr_max`` over ``warmup`` steps, then cosine annealing to ``lr_min`` at ``total``.

    Raises:
        - ContractViolationError: When ``step`` is outside [0, total] or ``warmup`` exceeds ``total``.
    """
    if not 0 <= step <= total or not 0 <= warmup <= total:
        raise ContractViolationError(f'need 0 <= step <= total and 0 <= warmup <= total, got {step}, {warmup}, {total}')
    if step < warmup:
        return lr_max * step / warmup
    if total == warmup:
        return lr_max
    progress = (step - warmup) / (total - warmup)
    return lr_min + 0.5 * (1.0 + math.cos(math.pi * progress)) * (lr_max - lr_min)


def masked_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy over positions whose target is not ``IGNORE_INDEX``."""
    if not bool((targets != IGNORE_INDEX).any()):
        return logits.sum() * 0.0
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=IGNORE_INDEX)


def resolve_model_config(model: ModelConfig, task: TaskSpec) -> ModelConfig:
    """Fills in the vocabulary size from the task.

    Raises:
        - ContractViolationError: When an explicit vocabulary is smaller than the task needs.
    """
    needed = vocab_size(task)
    if model.vocab_size is None:
        return model.model_copy(update={'vocab_size': needed})
    if model.vocab_size < needed:
        raise ContractViolationError(f'model.vocab_size={model.vocab_size} is below the task vocabulary size {needed}')
    return model


def grad_norms(model: torch.nn.Module) -> dict[str, float]:
    return {name: float(p.grad.norm()) for name, p in model.named_parameters() if p.grad is not None}


def _batches(spec: RunSpec, instances: list[TaskInstance] | None, pad_id: int) -> Iterator[tuple]:
    """Endless stream of collated training batches, deterministic in the run seed."""
    task, train = spec.task, spec.train
    if instances is None:
        root = np.random.SeedSequence([train.seed, 2])
        while True:
            batch_seed = int(root.spawn(1)[0].generate_state(1)[0])
            yield collate(generate(task, batch_seed, train.batch_size, task.train_length), pad_id)
    generator = torch.Generator().manual_seed(train.seed)
    while True:
        order = torch.randperm(len(instances), generator=generator).tolist()
        for start in range(0, len(order), train.batch_size):
            yield collate([instances[i] for i in order[start : start + train.batch_size]], pad_id)


def total_steps(spec: RunSpec) -> int:
    if spec.train.steps is not None:
        return spec.train.steps
    per_epoch = math.ceil(spec.task.train_samples / spec.train.batch_size)
    return spec.train.epochs * per_epoch


class Predictor(Protocol):
    def predict(self, tokens: torch.Tensor) -> torch.Tensor: ...


def eval_seed(seed: int, length: int) -> int:
    return int(np.random.SeedSequence([seed, 1, length]).generate_state(1)[0])


def evaluate(
    predictor: Predictor,
    task: TaskSpec,
    lengths: Sequence[int] | None = None,
    samples: int | None = None,
    seed: int = 0,
    batch_size: int = 64,
    output_dir: str | Path | None = None,
) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Per-length exact-match accuracy over the scored positions of freshly generated instances.

    Args:
        - predictor (Predictor):
            Anything with ``predict(tokens) -> ids`` of shape ``(batch, time)``, e.g. a trained model.
        - task (TaskSpec):
            Task to evaluate on.
        - lengths (Sequence[int] | None):
            Length buckets; defaults to ``task.eval_lengths``.
        - samples (int | None):
            Instances per bucket; defaults to ``task.eval_samples``.
        - seed (int):
            Evaluation seed, combined with the length into the generator seed.
        - batch_size (int):
            Instances per forward pass.
        - output_dir (str | Path | None):
            When given, ``evaluation.csv`` and ``predictions.csv`` are written there.

    Returns:
        - tuple[pd.DataFrame, pd.DataFrame]: The table (length, accuracy, scaled_accuracy, scored_tokens) and the
            predictions (instance, length, position, target, prediction).

    Raises:
        - ContractViolationError: When a length is not positive.
    """
    logger = get_dagster_logger()
    lengths = list(task.eval_lengths if lengths is None else lengths)
    samples = task.eval_samples if samples is None else samples
    if not lengths or min(lengths) < 1:
        raise ContractViolationError(f'evaluation lengths must be positive, got {lengths}')
    pad_id = task_vocab(task)['BOS']
    frames = []
    instance_offset = 0
    for length in lengths:
        instances = generate(task, eval_seed(seed, length), samples, (length, length))
        for start in range(0, len(instances), batch_size):
            tokens, targets = collate(instances[start : start + batch_size], pad_id)
            predictions = predictor.predict(tokens).cpu()
            rows, positions = torch.nonzero(targets != IGNORE_INDEX, as_tuple=True)
            frames.append(
                pd.DataFrame(
                    {
                        'instance': (rows + start + instance_offset).numpy(),
                        'length': length,
                        'position': positions.numpy(),
                        'target': targets[rows, positions].numpy(),
                        'prediction': predictions[rows, positions].numpy(),
                    }
                )
            )
        instance_offset += len(instances)
    predictions = pd.concat(frames, ignore_index=True)
    table = accuracy_table_from_predictions(predictions, acc_rand(task))
    for row in table.itertuples(index=False):
        logger.info(f'Length {row.length}: accuracy {row.accuracy:.4f}, scaled {row.scaled_accuracy:.4f}')
    if output_dir is not None:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        table.to_csv(output_dir / EVALUATION_FILE, index=False)
        predictions.to_csv(output_dir / PREDICTIONS_FILE, index=False)
    return table, predictions


def accuracy_table_from_predictions(predictions: pd.DataFrame, chance: float) -> pd.DataFrame:
    """Recomputes the per-length accuracy table from a predictions frame."""
    correct = (predictions['target'] == predictions['prediction']).astype(float)
    table = (
        predictions.assign(correct=correct)
        .groupby('length', sort=True)
        .agg(accuracy=('correct', 'mean'), scored_tokens=('correct', 'size'))
        .reset_index()
    )
    table['scaled_accuracy'] = [scaled_accuracy(a, chance) for a in table['accuracy']]
    return table[['length', 'accuracy', 'scaled_accuracy', 'scored_tokens']]


@dataclass
class TrainResult:
    model: DeltaProductModel
    metrics: pd.DataFrame
    evaluation: pd.DataFrame
    output_dir: Path | None

    @property
    def checkpoint_dir(self) -> Path | None:
        return None if self.output_dir is None else self.output_dir / CHECKPOINT_DIR


def _eval_columns(table: pd.DataFrame) -> dict[str, float]:
    return {f'acc_{row.length}': float(row.accuracy) for row in table.itertuples(index=False)}


def train(spec: RunSpec, output_dir: str | Path | None = None, evaluate_at_end: bool = True) -> TrainResult:
    """Trains a model on ``spec.task`` and writes ``metrics.csv``, the checkpoint and the final evaluation.

    Training instances are generated once (``task.train_samples``) and reshuffled every epoch, or streamed fresh
    for every step when ``train_samples`` is ``None``. The run is deterministic in ``spec.train.seed``.

    Args:
        - spec (RunSpec):
            Validated run configuration.
        - output_dir (str | Path | None):
            Artifact directory; defaults to ``spec.output_dir``. Pass an empty string to skip writing files.
        - evaluate_at_end (bool):
            Whether to run ``evaluate`` on ``task.eval_lengths`` after the last step.

    Returns:
        - TrainResult: Trained model, metrics log, final evaluation table and the artifact directory.

    Raises:
        - TrainingDivergedError: When the loss becomes NaN or infinite.
    """
    logger = get_dagster_logger()
    train_cfg, task = spec.train, spec.task
    output_dir = Path(spec.output_dir if output_dir is None else output_dir) if output_dir != '' else None
    cfg = resolve_model_config(spec.model, task)
    model = build_model(cfg, seed=train_cfg.seed)
    model.train()
    optimizer = AdamW(
        model.parameters(),
        lr=train_cfg.lr,
        betas=train_cfg.betas,
        eps=train_cfg.eps,
        weight_decay=train_cfg.weight_decay,
    )
    steps = total_steps(spec)
    warmup = int(train_cfg.warmup_fraction * steps)
    pad_id = task_vocab(task)['BOS']
    instances = None
    if task.train_samples is not None:
        instances = generate(task, train_cfg.seed, task.train_samples, task.train_length)
    batches = _batches(spec, instances, pad_id)
    logger.info(f'Training for {steps} steps ({warmup} warm-up) on {task.family} with seed {train_cfg.seed}')

    rows = []
    last_norms: dict[str, float] = {}
    for step in range(1, steps + 1):
        lr = cosine_schedule(step, steps, warmup, train_cfg.lr, train_cfg.min_lr)
        for group in optimizer.param_groups:
            group['lr'] = lr
        tokens, targets = next(batches)
        optimizer.zero_grad(set_to_none=True)
        loss = masked_cross_entropy(model(tokens), targets)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(step, lr, last_norms)
        loss.backward()
        last_norms = grad_norms(model)
        total_norm = math.sqrt(sum(n * n for n in last_norms.values()))
        if train_cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
        optimizer.step()
        row = {'step': step, 'loss': float(loss), 'lr': lr, 'grad_norm': total_norm}
        if train_cfg.eval_every and step % train_cfg.eval_every == 0 and step < steps:
            model.eval()
            table, _ = evaluate(model, task, seed=train_cfg.seed)
            model.train()
            row.update(_eval_columns(table))
        rows.append(row)
        if step % train_cfg.log_every == 0 or step == steps:
            logger.info(f'Step {step}/{steps}: loss {float(loss):.5f}, lr {lr:.3e}, grad norm {total_norm:.3e}')

    model.eval()
    evaluation = pd.DataFrame(columns=['length', 'accuracy', 'scaled_accuracy', 'scored_tokens'])
    if evaluate_at_end:
        evaluation, _ = evaluate(model, task, seed=train_cfg.seed, output_dir=output_dir)
        if rows:
            rows[-1].update(_eval_columns(evaluation))
    metrics = pd.DataFrame(rows)
    if output_dir is not None:
        output_dir.mkdir(parents=True, exist_ok=True)
        metrics.to_csv(output_dir / METRICS_FILE, index=False)
        write_checkpoint(Checkpoint.from_model(model), output_dir / CHECKPOINT_DIR)
        logger.info(f'Wrote metrics and checkpoint to {output_dir}')
    return TrainResult(model=model, metrics=metrics, evaluation=evaluation, output_dir=output_dir)


def load_model(checkpoint_dir: str | Path) -> DeltaProductModel:
    return read_checkpoint(checkpoint_dir).to_model()


def selection_score(spec: RunSpec, evaluation: pd.DataFrame) -> float:
    """Accuracy at the training length for group tasks, mean scaled accuracy for the others."""
    if evaluation.empty:
        return float('nan')
    if spec.task.family == 'group_word':
        at_train = evaluation[evaluation['length'] == spec.task.train_length[1]]
        return float((at_train if not at_train.empty else evaluation.iloc[:1])['accuracy'].iloc[0])
    return float(evaluation['scaled_accuracy'].mean())


def train_sweep(
    spec: RunSpec,
    seeds: Sequence[int],
    output_dir: str | Path | None = None,
) -> tuple[TrainResult, pd.DataFrame]:
    """Trains one run per seed (in ``<output_dir>/seed_<s>``) and returns the best run and the per-seed scores.

    Raises:
        - ContractViolationError: When ``seeds`` is empty.
    """
    if not seeds:
        raise ContractViolationError('train_sweep needs at least one seed')
    logger = get_dagster_logger()
    base = Path(spec.output_dir if output_dir is None else output_dir)
    results, scores = [], []
    for seed in seeds:
        run = spec.model_copy(update={'train': spec.train.model_copy(update={'seed': seed})})
        result = train(run, output_dir=base / f'seed_{seed}')
        results.append(result)
        scores.append({'seed': seed, 'score': selection_score(run, result.evaluation)})
    table = pd.DataFrame(scores)
    best = int(table['score'].fillna(-math.inf).to_numpy().argmax())
    logger.info(f'Best of {len(seeds)} seeds: seed {seeds[best]} with score {table["score"].iloc[best]:.4f}')
    table.to_csv(base / 'sweep.csv', index=False)
    return results[best], table
