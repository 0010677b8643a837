import json
import platform
import sys
from pathlib import Path
from typing import Any

import dagster
import numpy as np
import pandas as pd
import torch
from dagster import AssetExecutionContext, MetadataValue

from .config import RunSpec, config_hash

EVALUATION_COLUMNS = ('length', 'accuracy', 'scaled_accuracy')
RUN_MANIFEST = 'run_manifest.json'


def validate_evaluation_table(table: pd.DataFrame) -> None:
    """Basic validation for an evaluation table.

    Raises ValueError if expected columns are missing or accuracies leave [0, 1].
    """
    if not isinstance(table, pd.DataFrame):
        raise ValueError('evaluation table must be a pandas DataFrame.')
    missing = [c for c in EVALUATION_COLUMNS if c not in table.columns]
    if missing:
        raise ValueError(f'evaluation table is missing the columns {missing}.')
    if table.empty:
        raise ValueError('evaluation table has no rows.')
    for column in ('accuracy', 'scaled_accuracy'):
        values = table[column].to_numpy(dtype=float)
        if not np.all((values >= 0.0) & (values <= 1.0)):
            raise ValueError(f"evaluation table column '{column}' has values outside [0, 1].")
    if (table['length'] < 1).any():
        raise ValueError("evaluation table column 'length' must be positive.")


def extrapolation_markdown(summary: pd.DataFrame, train_length: int | None = None) -> str:
    """Wide markdown table: one row per length bucket, one column per model."""
    wide = summary.pivot(index='length', columns='model', values='accuracy').sort_index()
    md_report = wide.to_markdown(floatfmt='.4f')
    if train_length is not None:
        md_report += f'\n\nTraining context length: {train_length}\n'
    return md_report


def create_markdown_report(context: AssetExecutionContext | None, report: pd.DataFrame, **kwargs: Any) -> str:
    """Create a markdown report from a long-format extrapolation summary.

    Args:
        - context (AssetExecutionContext | None):
            Asset execution context; the report is attached as output metadata when given.
        - report (pd.DataFrame):
            Columns model, length, accuracy (and optionally scaled_accuracy).
        - kwargs (Any):
            Passed on to ``extrapolation_markdown``.

    Returns:
        - str:
            Markdown formatted report.
    """
    md_report = extrapolation_markdown(report, **kwargs)

    if context is not None:
        context.add_output_metadata(
            metadata={
                'report': MetadataValue.md(md_report),
            }
        )

    return md_report


def library_versions() -> dict[str, str]:
    return {
        'python': platform.python_version(),
        'numpy': np.__version__,
        'torch': torch.__version__,
        'pandas': pd.__version__,
        'dagster': dagster.__version__,
    }


def write_run_manifest(
    output_dir: str | Path,
    command: str,
    argv: list[str] | None = None,
    spec: RunSpec | None = None,
    seed: int | None = None,
    extra: dict[str, Any] | None = None,
) -> Path:
    """Writes ``run_manifest.json`` with the command, argv, config (and its hash), seed and library versions.

    Returns:
        - Path: Location of the manifest.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        'command': command,
        'argv': list(sys.argv[1:] if argv is None else argv),
        'config': None if spec is None else spec.model_dump(mode='json'),
        'config_hash': None if spec is None else config_hash(spec),
        'seed': spec.seed if seed is None and spec is not None else seed,
        'versions': library_versions(),
    }
    if extra:
        manifest.update(extra)
    path = output_dir / RUN_MANIFEST
    path.write_text(json.dumps(manifest, indent=2, default=str))
    return path
