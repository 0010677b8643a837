from pathlib import Path
from typing import Any

import pandas as pd
from dagster import (
    AssetExecutionContext,
    AssetIn,
    AssetKey,
    MetadataValue,
    asset,
    get_dagster_logger,
)

from .analysis import extrapolation_report, report_frame
from .constructions import build_construction, verify_construction
from .io_managers import Checkpoint
from .resources import ExperimentResource
from .tasks import export_jsonl, generate, write_vocab
from .training import eval_seed, evaluate, train
from .utils import create_markdown_report, validate_evaluation_table

# (construction, size) pairs checked by construction_report
CONSTRUCTIONS = [('sn', 3), ('sn', 4), ('sn', 5), ('dihedral', 4), ('dihedral', 6), ('counter', 7), ('parity', 2)]
VERIFY_TRIALS = 20
VERIFY_LENGTH = 256


@asset(
    key_prefix=['stage', 'data'],
    io_manager_key='json_io_manager',
    group_name='deltaproduct',
)
def task_dataset(context: AssetExecutionContext, experiment: ExperimentResource) -> dict[str, Any]:
    """Evaluation instances of every length bucket as JSON-lines files plus the vocabulary sidecar."""
    spec = experiment.run_spec()
    data_dir = Path(spec.output_dir) / 'data'
    files = {}
    for length in spec.task.eval_lengths:
        instances = generate(spec.task, eval_seed(spec.seed, length), spec.task.eval_samples, (length, length))
        files[str(length)] = str(export_jsonl(instances, data_dir / f'eval_{length}.jsonl'))
    vocab_path = write_vocab(spec.task, data_dir / 'vocab.json')

    summary = {
        'family': spec.task.family,
        'files': files,
        'vocab': str(vocab_path),
        'instances_per_length': spec.task.eval_samples,
    }
    context.add_output_metadata(
        metadata={
            'lengths': MetadataValue.json(spec.task.eval_lengths),
            'data preview': MetadataValue.json(summary),
        }
    )
    return summary


@asset(
    key_prefix=['stage', 'models'],
    io_manager_key='checkpoint_io_manager',
    group_name='deltaproduct',
)
def trained_checkpoint(context: AssetExecutionContext, experiment: ExperimentResource) -> Checkpoint:
    """DeltaProduct model trained on the configured task."""
    logger = get_dagster_logger()
    spec = experiment.run_spec()
    try:
        result = train(spec, evaluate_at_end=False)
    except Exception as e:
        logger.error(f'Training failed for {spec.task.family}: {str(e)}')
        raise

    last = result.metrics.iloc[-1]
    context.add_output_metadata(
        metadata={
            'steps': int(last['step']),
            'final loss': float(last['loss']),
            'metrics log': MetadataValue.path(str(Path(spec.output_dir) / 'metrics.csv')),
        }
    )
    return Checkpoint.from_model(result.model)


@asset(
    key_prefix=['stage', 'evaluation'],
    ins={'trained_checkpoint': AssetIn(AssetKey(['stage', 'models', 'trained_checkpoint']))},
    io_manager_key='csv_io_manager',
    group_name='deltaproduct',
)
def evaluation_table(
    context: AssetExecutionContext, experiment: ExperimentResource, trained_checkpoint: Checkpoint
) -> pd.DataFrame:
    """Per-length accuracy and scaled accuracy of the trained model."""
    spec = experiment.run_spec()
    table, predictions = evaluate(trained_checkpoint.to_model(), spec.task, seed=spec.seed, output_dir=spec.output_dir)
    validate_evaluation_table(table)

    context.add_output_metadata(
        metadata={
            'scored tokens': int(len(predictions)),
            'table': MetadataValue.md(table.to_markdown(index=False)),
        }
    )
    return table


@asset(
    key_prefix=['dm', 'reports'],
    ins={'evaluation_table': AssetIn(AssetKey(['stage', 'evaluation', 'evaluation_table']))},
    io_manager_key='md_io_manager',
    group_name='deltaproduct',
)
def extrapolation_summary(
    context: AssetExecutionContext, experiment: ExperimentResource, evaluation_table: pd.DataFrame
) -> str:
    """Report of accuracy against sequence length, with the training length marked."""
    spec = experiment.run_spec()
    label = f'n_h={spec.model.n_h} {spec.model.eigenvalue_mode.value}'
    report = extrapolation_report({label: evaluation_table}, train_length=spec.task.train_length[1])
    return create_markdown_report(context=context, report=report_frame(report), train_length=report.train_length)


@asset(
    key_prefix=['dm', 'reports'],
    io_manager_key='json_io_manager',
    group_name='deltaproduct',
)
def construction_report(context: AssetExecutionContext) -> list[dict[str, Any]]:
    """Brute-force verification of every hand-set construction against its oracle."""
    logger = get_dagster_logger()
    reports = []
    for name, size in CONSTRUCTIONS:
        model, oracle = build_construction(name, size)
        report = verify_construction(model, oracle, trials=VERIFY_TRIALS, length=VERIFY_LENGTH)
        if not report.passed:
            logger.error(f'{report.construction} failed verification')
        reports.append(report.as_dict())

    context.add_output_metadata(
        metadata={
            'passed': sum(r['pass'] for r in reports),
            'data preview': MetadataValue.json(reports),
        }
    )
    return reports
