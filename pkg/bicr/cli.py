# This file is part of the bicr package.
#
# Copyright (c) 2026-present, the bicr contributors.
#
# For the full copyright and license information, please view
# the LICENSE.txt file that was distributed with this source code.

"""
Command-line front end.

::

    bicr generate --config exp.env --out runs/a
    bicr run --config exp.env --mode rfl,frozen --jobs 2 --out runs/a
    bicr eval --out runs/a
    bicr theory --trials 1000 --out runs/theory
    bicr gradcheck --seeds 10
    bicr bench --n 10000

Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 failed verification verdict, 1 any other package error.
"""

import argparse
import logging
import sys
from typing import Dict, Optional, Sequence

from . import __version__
from .compat import json, json_dumps
from .config import (
    MODES,
    ExperimentConfig,
    dump_config,
    load_config,
    report_config,
)
from .diagnostics import (
    GRADCHECK_COMPONENTS,
    GRADCHECK_COORDS,
    bench_update,
    run_gradcheck,
)
from .evaltheory import error_sweep, evaluate_stage, fusion_sweep
from .exceptions import (
    AcceptanceError,
    BicrError,
    ImproperlyConfigured,
    TrainingDivergedError,
)
from .gallery import GalleryStore
from .lifelong import (
    ExperimentResult,
    build_stream,
    load_query_model,
    run_arms,
    save_checkpoint,
)
from .numkernel import make_rng
from .settings import Path
from .synthdata import load_stream, save_stream

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_ACCEPTANCE = 4

THEORY_KEY = 6

REPORT = 'report.json'
METRICS = 'metrics.csv'
STAGES = 'stages.jsonl'
GALLERY = 'gallery.bin'
CHECKPOINT = 'checkpoint.npz'
STREAM = 'stream.npz'
EFFECTIVE = 'effective.env'


def _key_value(text: str):
    key, sep, value = text.partition('=')
    if not sep or not key:
        raise argparse.ArgumentTypeError(f'expected KEY=VALUE, got {text!r}')
    return key.strip().upper(), value.strip()


def _add_config_args(parser: argparse.ArgumentParser):
    parser.add_argument('--config', help='experiment configuration document')
    parser.add_argument('--set', dest='overrides', action='append',
                        type=_key_value, default=[], metavar='KEY=VALUE',
                        help='override one configuration key')
    parser.add_argument('--seed', type=int, help='override SEED')
    parser.add_argument('--out', help='output directory (overrides '
                                      'OUTPUT_DIR)')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='bicr',
        description='Re-indexing-free lifelong retrieval experiments.')
    parser.add_argument('--version', action='version',
                        version=f'%(prog)s {__version__}')
    parser.add_argument('-v', '--verbose', action='count', default=0,
                        help='-v for progress, -vv for per-epoch detail')
    commands = parser.add_subparsers(dest='command', required=True)

    generate = commands.add_parser('generate',
                                   help='write the synthetic stream')
    _add_config_args(generate)

    run = commands.add_parser('run', help='run lifelong experiments')
    _add_config_args(run)
    run.add_argument('--mode', help='comma separated modes '
                                    f'({", ".join(MODES)})')
    run.add_argument('--jobs', type=int, default=1,
                     help='modes run concurrently')

    evaluate = commands.add_parser(
        'eval', help='re-evaluate a finished run from its files')
    evaluate.add_argument('--out', required=True, help='run directory')

    theory = commands.add_parser('theory', help='numeric theory sweeps')
    theory.add_argument('--trials', type=int, default=1000,
                        help='random error configurations; 0 skips both '
                             'sweeps')
    theory.add_argument('--fusion-trials', type=int,
                        help='random feature pairs (default: '
                             'min(trials, 100))')
    theory.add_argument('--seed', type=int, default=0)
    theory.add_argument('--grid', type=int, default=21,
                        help='fusion-weight grid points per axis')
    theory.add_argument('--out', help='directory for the sweep CSVs')

    gradcheck = commands.add_parser('gradcheck',
                                    help='finite-difference gradient checks')
    gradcheck.add_argument('--seed', type=int, default=0,
                           help='first seed')
    gradcheck.add_argument('--seeds', type=int, default=10,
                           help='number of consecutive seeds')
    gradcheck.add_argument('--component', action='append',
                           choices=GRADCHECK_COMPONENTS,
                           help='limit the check (repeatable)')
    gradcheck.add_argument('--coords', type=int, default=GRADCHECK_COORDS,
                           help='checked coordinates per parameter')
    gradcheck.add_argument('--inject-bug', action='store_true',
                           help=argparse.SUPPRESS)
    gradcheck.add_argument('--out', help='directory for gradcheck.json')

    bench = commands.add_parser('bench',
                                help='gallery update vs re-extraction')
    _add_config_args(bench)
    bench.add_argument('--n', type=int, default=10000,
                       help='gallery features')
    return parser


def _load(args) -> ExperimentConfig:
    overrides: Dict[str, str] = {}
    if getattr(args, 'seed', None) is not None:
        overrides['SEED'] = str(args.seed)
    if getattr(args, 'out', None):
        overrides['OUTPUT_DIR'] = args.out
    overrides.update(dict(args.overrides))
    return load_config(args.config, **overrides)


def _write_json(out: Path, name: str, payload):
    with out.file(name, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    logger.info('wrote %s', out(name))


def cmd_generate(args) -> int:
    cfg = _load(args)
    out = Path(cfg.output_dir).ensure()
    save_stream(out(STREAM), build_stream(cfg))
    with out.file(EFFECTIVE, 'w', encoding='utf-8') as f:
        f.write(dump_config(cfg))
    print(out(STREAM))
    return EXIT_OK


def _write_run(out: Path, result: ExperimentResult, stream):
    config_text = dump_config(result.config)
    with out.file(EFFECTIVE, 'w', encoding='utf-8') as f:
        f.write(config_text)
    save_stream(out(STREAM), stream)
    digest = result.content_hash()
    result.report.to_json(
        out(REPORT), hash=digest,
        config=report_config(result.config),
        stages=[r.to_dict() for r in result.records])
    result.report.to_csv(out(METRICS))
    with out.file(STAGES, 'w', encoding='utf-8') as f:
        for record in result.records:
            f.write(json_dumps(record.to_dict()) + '\n')
    result.state.store.persist(out(GALLERY))
    save_checkpoint(out(CHECKPOINT), result, config_text)
    logger.info('wrote run files to %s', out)
    return digest


def cmd_run(args) -> int:
    base = _load(args)
    modes = args.mode.split(',') if args.mode else [base.mode]
    modes = [mode.strip() for mode in modes]
    for mode in modes:
        if mode not in MODES:
            raise ImproperlyConfigured(
                f'--mode: unknown mode {mode!r}, expected one of {MODES}')
    stream = build_stream(base)
    results = run_arms(base, modes, jobs=args.jobs, stream=stream)
    root = Path(base.output_dir).ensure()
    for mode, result in results.items():
        out = root.path(mode).ensure() if len(modes) > 1 else root
        digest = _write_run(out, result, stream)
        forgetting = result.report.forgetting()['mAP']
        af = 'n/a' if forgetting is None else f'{forgetting:.4f}'
        print(f'{mode}: final mean mAP '
              f'{result.report.final_mean("mAP"):.4f}, AF {af}, '
              f'hash {digest}')
    return EXIT_OK


def cmd_eval(args) -> int:
    out = Path(args.out, required=True)
    cfg = load_config(out(EFFECTIVE, required=True))
    stream = load_stream(out(STREAM, required=True))
    try:
        model = load_query_model(out(CHECKPOINT, required=True), cfg)
    except (OSError, KeyError, ValueError) as exc:
        raise ImproperlyConfigured(
            f'{out(CHECKPOINT)}: cannot read checkpoint: {exc}') from exc
    store = GalleryStore.load(out(GALLERY, required=True))
    queries = {data.stage: data.query for data in stream
               if data.stage <= store.current_version}
    results = evaluate_stage(model, store, queries,
                             stage=store.current_version)
    with open(out(REPORT), encoding='utf-8') as f:
        reported = json.load(f)
    expected = {(row['dataset'], row['stage']): row
                for row in reported['metrics']}
    rows = []
    for dataset, metrics in sorted(results.items()):
        row = expected.get((dataset, store.current_version), {})
        for name in ('mAP', 'R1'):
            value = getattr(metrics, name)
            rows.append({'dataset': dataset, 'metric': name,
                         'value': value, 'reported': row.get(name)})
            print(f'dataset {dataset} {name} {value:.6f}')
    _write_json(out, 'eval.json', {'stage': store.current_version,
                                   'metrics': rows})
    mismatched = [row for row in rows if row['reported'] is None
                  or abs(row['value'] - row['reported']) > 1e-12]
    if mismatched:
        raise AcceptanceError(
            f'{len(mismatched)} metrics differ from {out(REPORT)}')
    return EXIT_OK


def cmd_theory(args) -> int:
    rng = make_rng(args.seed, THEORY_KEY)
    pairs = args.fusion_trials
    if pairs is None or args.trials == 0:
        pairs = min(args.trials, 100)
    verdicts = [error_sweep(args.trials, rng),
                fusion_sweep(pairs, rng, grid_size=args.grid)]
    if args.out:
        out = Path(args.out).ensure()
        for verdict in verdicts:
            verdict.to_csv(out(f'theory_{verdict.name}.csv'))
        _write_json(out, 'theory.json', {
            v.name: {'verdict': v.verdict, 'worst': v.worst,
                     'trials': len(v.rows)} for v in verdicts})
    for verdict in verdicts:
        print(f'{verdict.name}: {verdict.verdict}')
    failed = [v.name for v in verdicts if v.verdict == 'fail']
    if failed:
        raise AcceptanceError(f'theory sweeps failed: {", ".join(failed)}')
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seeds = list(range(args.seed, args.seed + args.seeds))
    report = run_gradcheck(seeds, args.component or GRADCHECK_COMPONENTS,
                           coords_per_param=args.coords,
                           inject_bug=args.inject_bug)
    for component, err in report.errors.items():
        print(f'{component}: max rel err {err:.3e}')
    if args.out:
        _write_json(Path(args.out).ensure(), 'gradcheck.json',
                    report.to_dict())
    if not report.passed:
        raise AcceptanceError(
            f'gradient check above {report.tolerance:g}')
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load(args)
    model = cfg.model
    report = bench_update(args.n, seed=cfg.seed, raw_dim=cfg.stream.raw_dim,
                          embed_dim=model.embed_dim,
                          hidden_dim=model.deep_hidden_dim,
                          hidden_layers=model.deep_hidden_layers,
                          prototypes=model.prototypes,
                          bottleneck=model.bottleneck)
    if args.out:
        _write_json(Path(cfg.output_dir).ensure(), 'bench.json',
                    report.to_dict())
    print(f'update {report.update_seconds:.4f}s, re-extraction '
          f'{report.reextract_seconds:.4f}s, speedup x{report.speedup:.1f}')
    return EXIT_OK


COMMANDS = {
    'generate': cmd_generate,
    'run': cmd_run,
    'eval': cmd_eval,
    'theory': cmd_theory,
    'gradcheck': cmd_gradcheck,
    'bench': cmd_bench,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=[logging.WARNING, logging.INFO,
               logging.DEBUG][min(args.verbose, 2)],
        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        return COMMANDS[args.command](args)
    except ImproperlyConfigured as exc:
        print(f'bicr: configuration error: {exc}', file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f'bicr: training diverged: {exc}', file=sys.stderr)
        return EXIT_DIVERGED
    except AcceptanceError as exc:
        print(f'bicr: {exc}', file=sys.stderr)
        return EXIT_ACCEPTANCE
    except BicrError as exc:
        print(f'bicr: {exc}', file=sys.stderr)
        return EXIT_ERROR
