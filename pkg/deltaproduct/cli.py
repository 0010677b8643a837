"""Command-line entry point: ``deltaproduct <command> [options] [key=value ...]``.

Exit codes: 0 on success, 1 on contract violations (bad arguments, missing or invalid config), 2 on numerical
failures (divergence, drift beyond tolerance, failed verification). Errors are reported as one JSON object on stderr.
"""

import argparse
import json
import math
import sys
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import pandas as pd
from dagster import get_dagster_logger

from .analysis import (
    beta_saturated_heads,
    erank_trace,
    extrapolation_report,
    key_pca,
    record_betas,
    record_group_betas,
    report_frame,
)
from .config import RunSpec, load_run_spec
from .constructions import ConstructionPredictor, build_construction, verify_construction
from .errors import ContractViolationError, NumericalError
from .groups import group_by_name
from .householder import rwkv7_instability_demo
from .tasks import export_jsonl, generate, task_vocab, write_vocab
from .training import eval_seed, evaluate, load_model, train, train_sweep
from .utils import create_markdown_report, write_run_manifest

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_NUMERICAL = 2


class CliUsageError(ContractViolationError):
    """Raised instead of exiting when the command line cannot be parsed."""


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise CliUsageError(message)


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--config', help='TOML or JSON run configuration')
    parser.add_argument('--preset', help='named preset applied below the config file')
    parser.add_argument('--out', help='output directory (overrides output_dir of the config)')
    parser.add_argument('--seed', type=int, help='seed (overrides train.seed of the config)')
    parser.add_argument('overrides', nargs='*', metavar='KEY=VALUE', help='dotted-key overrides, e.g. model.n_h=3')


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog='deltaproduct', description='DeltaProduct state-tracking experiments.')
    commands = parser.add_subparsers(dest='command', required=True, parser_class=ArgumentParser)

    gen = commands.add_parser('gen', help='export training and evaluation data as JSON lines')
    _add_config_args(gen)
    gen.add_argument('--count', type=int, default=1000, help='training instances when the task streams its data')

    train_cmd = commands.add_parser('train', help='train a model and evaluate it per length bucket')
    _add_config_args(train_cmd)
    train_cmd.add_argument('--seeds', type=int, nargs='+', help='train one run per seed and keep the best')

    eval_cmd = commands.add_parser('eval', help='evaluate a checkpoint or a construction')
    _add_config_args(eval_cmd)
    source = eval_cmd.add_mutually_exclusive_group(required=True)
    source.add_argument('--checkpoint', help='checkpoint directory written by train')
    source.add_argument('--construction', choices=['sn', 'dihedral'], help='evaluate a hand-set group model')
    eval_cmd.add_argument('--n', type=int, default=3, help='size of the constructed group')
    eval_cmd.add_argument('--lengths', type=int, nargs='+', help='length buckets (default: task.eval_lengths)')
    eval_cmd.add_argument('--samples', type=int, help='instances per bucket (default: task.eval_samples)')

    verify = commands.add_parser('verify', help='check a construction against its brute-force oracle')
    verify.add_argument('--construction', required=True, choices=['sn', 'dihedral', 'counter', 'parity'])
    verify.add_argument('--n', type=int, default=3, help='n of S_n, m of D_m or the counter modulus d')
    verify.add_argument('--trials', type=int, default=100)
    verify.add_argument('--length', type=int, default=512)
    verify.add_argument('--seed', type=int, default=0)
    verify.add_argument('--out', help='also write the report (and a run manifest) to this directory')

    analyze = commands.add_parser('analyze', help='effective rank, β and key statistics of a checkpoint')
    _add_config_args(analyze)
    analyze.add_argument('--checkpoint', help='checkpoint directory written by train')
    analyze.add_argument('--layer', type=int, default=0)
    analyze.add_argument('--head', type=int, default=0, help='head used for key PCA')
    analyze.add_argument('--length', type=int, default=256, help='length of the analyzed sequence')
    analyze.add_argument('--merge', nargs='+', metavar='NAME=CSV', help='merge evaluation tables into one report')

    demo = commands.add_parser('demo-instability', help='product of two RWKV-7 matrices with spectral radius > 1')
    demo.add_argument('--steps', type=int, default=100)
    demo.add_argument('--out', help='also write the result (and a run manifest) to this directory')
    return parser


def _run_spec(args: argparse.Namespace) -> RunSpec:
    overrides = list(args.overrides)
    if args.out:
        overrides.append(f'output_dir={json.dumps(args.out)}')
    if args.seed is not None:
        overrides.append(f'train.seed={args.seed}')
    return load_run_spec(args.config, overrides=overrides, preset=args.preset)


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, default=str))


def cmd_gen(args: argparse.Namespace, argv: Sequence[str]) -> int:
    spec = _run_spec(args)
    out = Path(spec.output_dir)
    count = spec.task.train_samples or args.count
    train_instances = generate(spec.task, spec.seed, count, spec.task.train_length)
    files = {'train': str(export_jsonl(train_instances, out / 'train.jsonl'))}
    for length in spec.task.eval_lengths:
        instances = generate(spec.task, eval_seed(spec.seed, length), spec.task.eval_samples, (length, length))
        files[f'eval_{length}'] = str(export_jsonl(instances, out / f'eval_{length}.jsonl'))
    files['vocab'] = str(write_vocab(spec.task, out / 'vocab.json'))
    write_run_manifest(out, 'gen', list(argv), spec)
    _print_json(files)
    return EXIT_OK


def cmd_train(args: argparse.Namespace, argv: Sequence[str]) -> int:
    spec = _run_spec(args)
    out = Path(spec.output_dir)
    if args.seeds:
        result, scores = train_sweep(spec, args.seeds)
        summary = {'best_run': str(result.output_dir), 'scores': scores.to_dict(orient='records')}
    else:
        result = train(spec)
        summary = {'run': str(result.output_dir)}
    summary['evaluation'] = result.evaluation.to_dict(orient='records')
    write_run_manifest(out, 'train', list(argv), spec, extra={'seeds': args.seeds})
    _print_json(summary)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, argv: Sequence[str]) -> int:
    spec = _run_spec(args)
    if args.checkpoint:
        predictor = load_model(args.checkpoint)
    else:
        name = f'S{args.n}' if args.construction == 'sn' else f'D{args.n}'
        if spec.task.family != 'group_word' or spec.task.group != name:
            task = spec.task.model_copy(update={'family': 'group_word', 'group': name})
            spec = spec.model_copy(update={'task': task})
        model, _ = build_construction(args.construction, args.n)
        predictor = ConstructionPredictor(model, group_by_name(name))
    table, _ = evaluate(predictor, spec.task, args.lengths, args.samples, seed=spec.seed, output_dir=spec.output_dir)
    write_run_manifest(spec.output_dir, 'eval', list(argv), spec, extra={'checkpoint': args.checkpoint})
    _print_json(table.to_dict(orient='records'))
    return EXIT_OK


def cmd_verify(args: argparse.Namespace, argv: Sequence[str]) -> int:
    model, oracle = build_construction(args.construction, args.n)
    report = verify_construction(model, oracle, trials=args.trials, length=args.length, seed=args.seed).as_dict()
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / 'verification.json').write_text(json.dumps(report, indent=2))
        write_run_manifest(args.out, 'verify', list(argv), seed=args.seed)
    _print_json(report)
    return EXIT_OK if report['pass'] else EXIT_NUMERICAL


def _merge_tables(pairs: Sequence[str], train_length: int) -> tuple[pd.DataFrame, dict]:
    tables = {}
    for pair in pairs:
        name, sep, path = pair.partition('=')
        if not sep:
            raise ContractViolationError(f'--merge expects NAME=CSV, got {pair!r}')
        if not Path(path).is_file():
            raise ContractViolationError(f'evaluation table not found: {path}')
        tables[name] = pd.read_csv(path)
    report = extrapolation_report(tables, train_length=train_length)
    return report_frame(report), report.model_dump(mode='json')


def cmd_analyze(args: argparse.Namespace, argv: Sequence[str]) -> int:
    spec = _run_spec(args)
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not args.checkpoint and not args.merge:
        raise ContractViolationError('analyze needs --checkpoint and/or --merge')
    summary = {}
    if args.merge:
        frame, report = _merge_tables(args.merge, spec.task.train_length[1])
        frame.to_csv(out / 'extrapolation.csv', index=False)
        (out / 'extrapolation.json').write_text(json.dumps(report, indent=2))
        (out / 'extrapolation.md').write_text(
            create_markdown_report(None, frame, train_length=spec.task.train_length[1])
        )
        summary['extrapolation_rows'] = len(frame)
    if args.checkpoint:
        model = load_model(args.checkpoint)
        bos = task_vocab(spec.task)['BOS']
        instance = generate(spec.task, spec.seed, 1, (args.length, args.length))[0]
        trace = erank_trace(model, instance.tokens, args.layer, bos_id=bos, train_length=spec.task.train_length[1])
        trace.to_frame().to_csv(out / 'erank.csv', index=False)
        betas = record_betas(model, instance.tokens, args.layer)
        t, n_h, heads = betas.shape
        pd.DataFrame(
            {
                'position': np.repeat(np.arange(t), n_h * heads),
                'factor': np.tile(np.repeat(np.arange(n_h), heads), t),
                'head': np.tile(np.arange(heads), t * n_h),
                'beta': betas.reshape(-1),
            }
        ).to_csv(out / 'betas.csv', index=False)
        ratios = key_pca(model, instance.tokens, args.head, args.layer)
        summary.update(
            {
                'erank_markers': trace.markers(),
                'beta_saturated_heads': beta_saturated_heads(betas),
                'key_pca': [float(r) for r in ratios],
            }
        )
        if spec.task.family == 'group_word':
            group_betas = record_group_betas(model, group_by_name(spec.task.group), args.layer)
            group_betas.to_csv(out / 'group_betas.csv', index=False)
            summary['group_beta_saturated_heads'] = beta_saturated_heads(group_betas)
        (out / 'analysis.json').write_text(json.dumps(summary, indent=2))
    write_run_manifest(out, 'analyze', list(argv), spec, extra={'checkpoint': args.checkpoint})
    _print_json(summary)
    return EXIT_OK


def cmd_demo_instability(args: argparse.Namespace, argv: Sequence[str]) -> int:
    demo = rwkv7_instability_demo(args.steps)
    result = {
        'spectral_radius': demo.spectral_radius,
        'closed_form': (27.0 + math.sqrt(153.0)) / 32.0,
        'final_norm': demo.norm_trace[-1],
        'norm_trace': demo.norm_trace,
        'perturbed_radii': {str(k): v for k, v in demo.perturbed_radii.items()},
    }
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / 'instability.json').write_text(json.dumps(result, indent=2))
        write_run_manifest(args.out, 'demo-instability', list(argv))
    _print_json(result)
    return EXIT_OK


COMMANDS = {
    'gen': cmd_gen,
    'train': cmd_train,
    'eval': cmd_eval,
    'verify': cmd_verify,
    'analyze': cmd_analyze,
    'demo-instability': cmd_demo_instability,
}


def _report_error(e: Exception) -> None:
    payload = {'error': type(e).__name__, 'message': str(e)}
    if isinstance(e, NumericalError):
        payload['report'] = e.report
    print(json.dumps(payload, default=str), file=sys.stderr)


def dispatch(argv: Sequence[str] | None = None) -> int:
    """Parses ``argv`` and runs the command; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    logger = get_dagster_logger()
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args, argv)
    except ContractViolationError as e:
        logger.error(f'{type(e).__name__}: {e}')
        _report_error(e)
        return EXIT_CONTRACT
    except NumericalError as e:
        logger.error(f'{type(e).__name__}: {e}')
        _report_error(e)
        return EXIT_NUMERICAL
    except OSError as e:
        # unreadable or unwritable paths given on the command line
        logger.error(f'{type(e).__name__}: {e}')
        _report_error(e)
        return EXIT_CONTRACT


def main() -> None:
    sys.exit(dispatch())
