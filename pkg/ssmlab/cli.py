"""
Command-line entry point: theorem checks, analyses, AR data, training,
evaluation and the perturbation probe.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
"""
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from functools import wraps
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import click
import numpy as np
import pandas as pd

from ssmlab import __version__
from ssmlab.core import analysis
from ssmlab.core.checks import run_all_checks
from ssmlab.core.config import ModelConfig, RunConfig, env_defaults, resolve_run_config
from ssmlab.core.data import (
    ARDataset, generate_ar_dataset, load_dataset, save_dataset, split_frame, verify_dataset
)
from ssmlab.core.errors import SSMLabError, TrainingDivergedError
from ssmlab.core.model import MixerStack, SSMLayer, TinyModel, load_model, save_model
from ssmlab.core.params import init_params
from ssmlab.core.training import accuracy_frame, evaluate_ar, run_table_row, summarize_table, table_models
from ssmlab.core.utils import ensure_output_dir, file_checksum, write_csv, write_report

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


def configure_logging(verbosity: int) -> None:
    """-v raises the level to INFO, -vv to DEBUG; otherwise SSMLAB_LOG_LEVEL."""
    if verbosity >= 2:
        level = logging.DEBUG
    elif verbosity == 1:
        level = logging.INFO
    else:
        level = getattr(logging, env_defaults()['log_level'], logging.WARNING)
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s',
                        force=True)


def parallel_map(fn: Callable, items: Sequence[Any], workers: int) -> List[Any]:
    """Ordered map over a process pool; inline when workers == 1."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


class Run:
    """Resolved configuration plus the files a subcommand writes."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.out = ensure_output_dir(config.output_dir)
        self.outputs: List[str] = []

    def csv(self, df: pd.DataFrame, name: str) -> None:
        self.outputs.append(write_csv(df, self.out / name))

    def report(self, report: Dict[str, Any], name: str) -> None:
        self.outputs.append(write_report(report, self.out / name))

    def finish(self, passed: Optional[bool] = None) -> None:
        manifest = {
            'version': __version__,
            'subcommand': self.config.subcommand,
            'created_utc': datetime.now(timezone.utc).isoformat(),
            'config': self.config.to_dict(),
            'outputs': {Path(p).name: file_checksum(p) for p in self.outputs},
            'passed': passed,
        }
        write_report(manifest, self.out / 'manifest.json')


def common_options(subcommand: str):
    """--config / --out / --seed / -v / --workers, resolved into a Run."""
    def decorator(fn):
        @click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
                      help='JSON experiment file')
        @click.option('--out', 'output_dir', type=click.Path(file_okay=False), default=None,
                      help='Output directory')
        @click.option('--seed', type=int, default=None, help='Seed override for every section')
        @click.option('-v', '--verbose', 'verbosity', count=True, help='-v info, -vv debug')
        @click.option('--workers', type=int, default=None, help='Worker processes (default: all cores)')
        @click.pass_context
        @wraps(fn)
        def wrapper(ctx, config_path, output_dir, seed, verbosity, workers, **kwargs):
            configure_logging(verbosity)
            try:
                config = resolve_run_config(subcommand, config_path, output_dir, seed, verbosity, workers)
                code = fn(Run(config), **kwargs)
            except TrainingDivergedError as e:
                click.echo(f'Error: {e}', err=True)
                ctx.exit(EXIT_FAILED)
            except SSMLabError as e:
                click.echo(f'Error: {e}', err=True)
                ctx.exit(EXIT_USAGE)
            ctx.exit(code or EXIT_OK)
        return wrapper
    return decorator


def _dataset(run: Run, path: Optional[str]) -> ARDataset:
    path = path or run.config.analysis.dataset
    if path:
        return load_dataset(path)
    return generate_ar_dataset(run.config.ar)


def _checkpoint(run: Run, path: Optional[str]) -> Optional[str]:
    return path or run.config.analysis.checkpoint


@click.group()
@click.version_option(__version__, prog_name='ssmlab')
def main():
    """State-space recurrences: theorem checks, diagnostics, and associative recall."""


# -- check ----------------------------------------------------------------------

@main.group()
def check():
    """Theorem verification suites."""


@check.command('theorems')
@common_options('check theorems')
def check_theorems(run: Run) -> int:
    """Parallel form, gradients, recency, over-smoothing, low-pass, polarization."""
    results = run_all_checks(run.config.check, workers=run.config.workers)
    summary = {'overall_passed': results['overall_passed'], 'checks': {}}
    for name, result in results['checks'].items():
        table = result.pop('table', None)
        if table is not None:
            run.csv(table, f'check_{name}.csv')
        summary['checks'][name] = result
        click.echo(f'{name:18s} {"PASS" if result["passed"] else "FAIL"}  {result["message"]}')
    run.report(summary, 'theorems_report.json')
    run.finish(results['overall_passed'])
    return EXIT_OK if results['overall_passed'] else EXIT_FAILED


# -- analyze ----------------------------------------------------------------------

@main.group()
def analyze():
    """Influence, smoothness, frequency response and gate-gap diagnostics."""


def _random_stack(run: Run, residual: bool = True) -> MixerStack:
    cfg = run.config.analysis
    layers = [init_params(cfg.variant, cfg.d_state, cfg.d_model, cfg.seed + i) for i in range(cfg.n_layers)]
    return MixerStack(layers, residual=residual)


def _random_inputs(run: Run) -> List[np.ndarray]:
    cfg = run.config.analysis
    rng = np.random.default_rng(cfg.seed)
    return [rng.normal(size=(cfg.seq_len, cfg.d_model)) for _ in range(cfg.n_inputs)]


def _influence_job(job: Tuple[str, Any, np.ndarray, int, str, List[int]]) -> Dict[str, Any]:
    label, model, x, channel, aggregate, window = job
    m = analysis.influence_matrix(model, x, output_channel=channel, aggregate=aggregate)
    fit = analysis.fit_decay_rate(m, window)
    return {'label': label, 'matrix': m, 'fit': fit}


@analyze.command('influence')
@click.option('--checkpoint', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Trained TinyModel; influence is reported at init and after training')
@click.option('--dataset', type=click.Path(exists=True, dir_okay=False), default=None)
@common_options('analyze influence')
def analyze_influence(run: Run, checkpoint: Optional[str], dataset: Optional[str]) -> int:
    """Influence matrix |dy_t/dx_s| and its decay fit."""
    cfg = run.config.analysis
    checkpoint = _checkpoint(run, checkpoint)
    if checkpoint:
        trained = load_model(checkpoint)
        tokens = next(iter(_dataset(run, dataset).eval.values())).inputs[0]
        initial = TinyModel.init(trained.config, trained.vocab_size)
        jobs = [('init', initial, tokens), ('trained', trained, tokens)]
    else:
        x = _random_inputs(run)[0]
        jobs = [('init', SSMLayer(init_params(cfg.variant, cfg.d_state, cfg.d_model, cfg.seed)), x)]
    results = parallel_map(_influence_job, [(label, model, x, cfg.output_channel, cfg.aggregate, cfg.lag_window)
                                            for label, model, x in jobs], run.config.workers)
    report = {}
    for result in results:
        suffix = '' if len(results) == 1 else f'_{result["label"]}'
        run.csv(result['matrix'].frame(), f'influence{suffix}.csv')
        run.csv(result['fit'].frame(), f'decay{suffix}.csv')
        report[result['label']] = {**result['matrix'].to_dict(), 'fit': result['fit'].to_dict(),
                                   'envelope': analysis.check_envelope(result['fit'])}
        fit = result['fit']
        click.echo(f'{result["label"]}: kappa_hat={fit.kappa_hat:.4g} kappa={fit.kappa} r2={fit.r_squared:.4f}')
    run.report(report, 'influence_report.json')
    run.finish()
    return EXIT_OK


def _smoothness_job(job: Tuple[MixerStack, np.ndarray]) -> analysis.LayerwiseReport:
    stack, x = job
    return analysis.layerwise_smoothness(stack, x)


@analyze.command('smoothness')
@common_options('analyze smoothness')
def analyze_smoothness(run: Run) -> int:
    """Per-layer smoothness of b, h, mixer and block outputs, with bound reports."""
    stack = _random_stack(run)
    reports = parallel_map(_smoothness_job, [(stack, x) for x in _random_inputs(run)], run.config.workers)
    frames, bounds = [], []
    for i, report in enumerate(reports):
        frame = report.frame()
        frame.insert(0, 'input', i)
        frames.append(frame)
        bounds.extend(report.bounds)
    run.csv(pd.concat(frames, ignore_index=True), 'smoothness.csv')
    run.csv(analysis.bound_frame(bounds), 'bound.csv')
    first_last = [(r.block_epsilons()[0], r.block_epsilons()[-1]) for r in reports]
    share = float(np.mean([last <= first for first, last in first_last]))
    run.report({'inputs': len(reports), 'layers': len(stack.layers), 'share_last_below_first': share,
                'bounds_claimed': sum(b.satisfied is not None for b in bounds),
                'bounds_violated': sum(b.satisfied is False for b in bounds)}, 'smoothness_report.json')
    click.echo(f'block smoothness last <= first on {share:.0%} of inputs')
    run.finish()
    return EXIT_OK


@analyze.command('spectrum')
@common_options('analyze spectrum')
def analyze_spectrum(run: Run) -> int:
    """Frequency response of an S4 kernel with its cutoffs and bound curve."""
    cfg = run.config.analysis
    s4 = init_params('s4', cfg.d_state, cfg.d_model, cfg.seed)
    omega = analysis.default_omega_grid(cfg.omega_points, cfg.omega_min, cfg.omega_max)
    response = analysis.frequency_response(s4, omega, cfg.epsilons)
    frames = []
    for d in range(s4.D):
        frame = response.frame(d)
        frame.insert(0, 'channel', d)
        frame['bound'] = response.bound[d]
        frames.append(frame)
    run.csv(pd.concat(frames, ignore_index=True), 'spectrum.csv')
    report = response.to_dict()
    run.report(report, 'spectrum_report.json')
    click.echo(f'low-pass verified: {report["verified"]}')
    run.finish(report['passed'])
    return EXIT_OK if report['passed'] else EXIT_FAILED


@analyze.command('gate-gap')
@click.option('--checkpoint', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--dataset', type=click.Path(exists=True, dir_okay=False), default=None)
@common_options('analyze gate-gap')
def analyze_gate_gap(run: Run, checkpoint: Optional[str], dataset: Optional[str]) -> int:
    """Cumulative histogram of per-channel A_max - A_min."""
    cfg = run.config.analysis
    checkpoint = _checkpoint(run, checkpoint)
    if checkpoint:
        model = load_model(checkpoint)
        split = next(iter(_dataset(run, dataset).eval.values()))
        inputs = list(split.inputs[:cfg.n_inputs])
    else:
        model = _random_stack(run)
        inputs = _random_inputs(run)
    report = analysis.gate_gap_histogram(model, inputs)
    run.csv(report.frame(), 'gate_gap.csv')
    run.csv(report.gaps, 'gate_gap_channels.csv')
    run.report(report.to_dict(), 'gate_gap_report.json')
    click.echo(f'channels with gap < 0.5: {report.fraction_below_half:.1%}')
    run.finish()
    return EXIT_OK


# -- data / train / eval / probe ---------------------------------------------------

@main.group()
def data():
    """Dataset generation."""


@data.command('gen-ar')
@common_options('data gen-ar')
def data_gen_ar(run: Run) -> int:
    """Generate, verify and save the associative-recall dataset."""
    dataset = generate_ar_dataset(run.config.ar)
    verification = verify_dataset(dataset)
    manifest = save_dataset(run.out, dataset)
    run.outputs.append(str(run.out / manifest['file']))
    run.report(verification, 'verification_report.json')
    splits = dataset.train + [dataset.eval[n_kv] for n_kv in sorted(dataset.eval)]
    run.csv(pd.concat([split_frame(s) for s in splits], ignore_index=True), 'splits.csv')
    click.echo(f'{sum(manifest["counts"].values())} examples written, sha256 {manifest["sha256"][:12]}')
    run.finish(verification['overall_passed'])
    return EXIT_OK if verification['overall_passed'] else EXIT_FAILED


@main.group()
def train():
    """Model training."""


def _table_job(job: Tuple[ModelConfig, ARDataset, Any, int]):
    model_cfg, dataset, train_cfg, seed = job
    return run_table_row(model_cfg, dataset, train_cfg, seed)


@train.command('ar')
@click.option('--dataset', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--table', 'full_table', is_flag=True, help='Train the seven depth/polarization rows')
@common_options('train ar')
def train_ar(run: Run, dataset: Optional[str], full_table: bool) -> int:
    """Train every configured model row for every seed, then evaluate."""
    cfg = run.config
    ar = _dataset(run, dataset)
    models = table_models(cfg.models[0]) if full_table else cfg.models
    jobs = [(m, ar, cfg.train, seed) for m in models for seed in cfg.seeds]
    results = parallel_map(_table_job, jobs, cfg.workers)
    tables = []
    for (model_cfg, _, _, seed), (model, metrics, table) in zip(jobs, results):
        stem = f'{model_cfg.name}_seed{seed}'
        save_model(run.out / f'model_{stem}.ssmc', model)
        run.outputs.append(str(run.out / f'model_{stem}.ssmc'))
        run.csv(metrics, f'metrics_{stem}.csv')
        tables.append(table)
    for model_cfg in models:
        run.csv(pd.concat([t for t in tables if t['row'].iloc[0] == model_cfg.name], ignore_index=True),
                f'table_{model_cfg.name}.csv')
    combined = pd.concat(tables, ignore_index=True)
    run.csv(combined, 'table.csv')
    run.csv(summarize_table(tables), 'table_summary.csv')
    click.echo(combined.groupby('row', sort=False)['avg'].mean().to_string())
    run.finish()
    return EXIT_OK


@main.group('eval')
def evaluate():
    """Model evaluation."""


@evaluate.command('ar')
@click.option('--checkpoint', type=click.Path(exists=True, dir_okay=False), multiple=True)
@click.option('--dataset', type=click.Path(exists=True, dir_okay=False), default=None)
@common_options('eval ar')
def eval_ar(run: Run, checkpoint: Tuple[str, ...], dataset: Optional[str]) -> int:
    """Accuracy per kv-count split and their average."""
    paths = list(checkpoint) or ([run.config.analysis.checkpoint] if run.config.analysis.checkpoint else [])
    if not paths:
        raise click.UsageError('eval ar needs --checkpoint (or analysis.checkpoint in the config)')
    ar = _dataset(run, dataset)
    frames = []
    for path in paths:
        model = load_model(path)
        results = evaluate_ar(model, ar.eval)
        frames.append(accuracy_frame(results, row=model.config.name, layers=model.config.n_layers,
                                     seed=model.config.seed))
        click.echo(f'{Path(path).name}: avg accuracy {results["avg"]:.4f}')
    run.csv(pd.concat(frames, ignore_index=True), 'accuracy.csv')
    run.finish()
    return EXIT_OK


@main.group()
def probe():
    """Positional robustness probes."""


@probe.command('perturb')
@click.option('--checkpoint', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--dataset', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--region', type=click.Choice(['leading', 'trailing', 'both']), default=None)
@common_options('probe perturb')
def probe_perturb(run: Run, checkpoint: Optional[str], dataset: Optional[str], region: Optional[str]) -> int:
    """Accuracy drop after corrupting leading or trailing pad slots."""
    cfg = run.config.analysis
    checkpoint = _checkpoint(run, checkpoint)
    if not checkpoint:
        raise click.UsageError('probe perturb needs --checkpoint (or analysis.checkpoint in the config)')
    model = load_model(checkpoint)
    ar = _dataset(run, dataset)
    regions = ['leading', 'trailing'] if region == 'both' else [region or cfg.region]
    rows = []
    for n_kv, split in sorted(ar.eval.items()):
        for r in regions:
            for seed in run.config.seeds:
                result = analysis.perturbation_probe(model, split, r, cfg.probe_length, seed=seed)
                rows.append({'kv_pairs': n_kv, **result})
    frame = pd.DataFrame(rows, columns=['kv_pairs', 'region', 'k', 'seed', 'usable', 'limiting_example',
                                        'clean_accuracy', 'corrupted_accuracy', 'drop'])
    run.csv(frame, 'perturbation.csv')
    summary = frame.groupby('region')['drop'].mean().to_dict()
    run.report({'mean_drop': summary, 'k': cfg.probe_length}, 'perturbation_report.json')
    click.echo(f'mean accuracy drop: {summary}')
    run.finish()
    return EXIT_OK


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Invoke the CLI and return its exit code instead of exiting."""
    try:
        result = main.main(args=list(argv) if argv is not None else None, prog_name='ssmlab',
                           standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.exceptions.Abort:
        return EXIT_FAILED
    return result if isinstance(result, int) else EXIT_OK


if __name__ == '__main__':
    sys.exit(run())
