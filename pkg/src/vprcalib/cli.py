"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 input validation failure (the
offending path is named on stderr), 3 stage failure (the stage is named on
stderr).  Relative output paths are taken inside ``--out-dir`` and any path
that would land outside it is rejected.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config, resolve
from .descriptors import load_descriptors
from .errors import InvalidConfig, VprCalibError
from .evaluation import EvalConfig, emit_artifacts, evaluate, separation_stats, verify_pairs
from .mining import MiningConfig, export_tuples, import_tuples, mine, tuning_set
from .optimizer import GncConfig, LMConfig, gnc_solve, optimize_lm
from .pipeline import (
    StageFailure,
    missing_inputs,
    read_ground_truth,
    read_observations,
    run_pipeline,
    write_sequence,
)
from .posegraph import odometry_from_graph, read_g2o, save_g2o
from .registration import RegistrationConfig
from .simulator import WorldConfig, generate
from .training import EmbeddingHead, TrainConfig, load_head, save_head, train

log = logging.getLogger("vprcalib")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_STAGE = 3


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# path handling
# --------------------------------------------------------------------------


def _out_dir(args) -> Path:
    out = Path(args.out_dir).resolve()
    if out.exists() and not out.is_dir():
        raise InputError(f"--out-dir is not a directory: {args.out_dir}")
    return out


def _out_path(out: Path, value) -> Path:
    p = Path(value)
    target = (p if p.is_absolute() else out / p).resolve()
    if target != out and not target.is_relative_to(out):
        raise InputError(f"output path {value} lies outside --out-dir {out}")
    return target


def _prepare(out: Path, *targets):
    try:
        out.mkdir(parents=True, exist_ok=True)
        for t in targets:
            t.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {exc.filename}: {exc.strerror}") from exc


def _load(path, what, loader):
    """Run ``loader(path)``, turning any failure into an :class:`InputError` naming ``path``."""
    if not Path(path).is_file():
        raise InputError(f"{what} not found: {path}")
    try:
        return loader(path)
    except (VprCalibError, OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"invalid {what} {path}: {exc}") from exc


def _descriptor_array(path, normalize=False):
    store = load_descriptors(path, normalize=normalize)
    ids = np.asarray(store.ids)
    if sorted(ids.tolist()) != list(range(len(ids))):
        raise ValueError("keyframe ids must be 0..N-1")
    return store.vectors[np.argsort(ids)]


def _odometry(path):
    return odometry_from_graph(read_g2o(path))


def _dump(path, obj):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _check_lengths(n_desc, observations=None, odometry=None, truth=None):
    if observations is not None and len(observations) != n_desc:
        raise InputError(f"{n_desc} descriptors but {len(observations)} observation frames")
    if odometry is not None and len(odometry) != n_desc - 1:
        raise InputError(f"{n_desc} descriptors but {len(odometry)} odometry steps")
    if truth is not None and len(truth.poses) != n_desc:
        raise InputError(f"{n_desc} descriptors but {len(truth.poses)} ground-truth poses")


def _positive_or_none(text):
    if text.lower() == "none":
        return None
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError("must be > 0 or 'none'")
    return value


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_simulate(args):
    out = _out_dir(args)
    overrides = {}
    if args.config:
        overrides = _load(args.config, "world config", lambda p: json.loads(Path(p).read_text(encoding="utf-8")))
        if not isinstance(overrides, dict):
            raise InputError(f"invalid world config {args.config}: expected a JSON object")
    for key in ("trajectory", "n_keyframes", "aliasing_pairs", "seed", "domain_seed"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    try:
        config = WorldConfig(**overrides).validate()
    except (TypeError, InvalidConfig) as exc:
        raise InputError(f"invalid world config: {exc}") from exc
    _prepare(out)
    with _stage("simulate"):
        world = generate(config)
        write_sequence(world, out, binary=not args.no_binary)
    return EXIT_OK


def cmd_mine(args):
    out = _out_dir(args)
    targets = [_out_path(out, p) for p in (args.out_tuples, args.out_graph, args.report)]
    desc = _load(args.descriptors, "descriptors", lambda p: _descriptor_array(p, args.normalize))
    obs = _load(args.observations, "observations", read_observations)
    odo = _load(args.odometry, "odometry", _odometry)
    _check_lengths(len(desc), obs, odo)
    config = MiningConfig(
        window=args.window,
        k_max=args.k_max,
        max_negatives=args.max_negatives,
        registration=RegistrationConfig(min_correspondences=args.min_correspondences),
        normalize=False,  # already applied while loading
        seed=args.seed,
    )
    _prepare(out, *targets)
    with _stage("mine"):
        tuples, graph, report = mine(desc, obs, odo, config)
        export_tuples(tuples, targets[0])
        save_g2o(graph, targets[1])
        _dump(targets[2], report.to_dict())
    return EXIT_OK


def cmd_optimize(args):
    out = _out_dir(args)
    targets = [_out_path(out, args.out_graph), _out_path(out, args.report)]
    graph = _load(args.input, "pose graph", read_g2o)
    lm = LMConfig(max_iters=args.max_iters)
    _prepare(out, *targets)
    with _stage("optimize"):
        if args.robust == "gnc":
            estimates, _, report = gnc_solve(graph, GncConfig(chi2_quantile=args.chi2_quantile, mu_growth=args.mu_growth, lm=lm))
        else:
            estimates, report = optimize_lm(graph, config=lm)
        save_g2o(graph.with_estimates(estimates), targets[0])
        _dump(targets[1], report.to_dict())
    return EXIT_OK


def cmd_train(args):
    out = _out_dir(args)
    targets = [_out_path(out, args.out_head), _out_path(out, args.history)]
    tuples = _load(args.tuples, "tuples", import_tuples)
    desc = _load(args.descriptors, "descriptors", _descriptor_array)
    head = _load(args.head, "head", load_head) if args.head else EmbeddingHead.identity(desc.shape[1])
    if head.d_in != desc.shape[1]:
        raise InputError(f"head expects dimension {head.d_in}, {args.descriptors} has {desc.shape[1]}")
    ids = {k for t in tuples for k in (t.anchor_id, t.positive_id, *t.negative_ids)}
    if ids and (min(ids) < 0 or max(ids) >= len(desc)):
        raise InputError(f"{args.tuples} references keyframes missing from {args.descriptors}")
    try:
        config = TrainConfig(
            margin=args.margin,
            learning_rate=args.learning_rate,
            epochs=args.epochs,
            grad_clip_norm=args.grad_clip_norm,
            cosine_decay=not args.no_cosine_decay,
            seed=args.seed,
        )
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    selected = tuning_set(tuples)
    _prepare(out, *targets)
    with _stage("train"):
        tuned, history = train(head, selected, desc, config)
        save_head(tuned, targets[0])
        _dump(
            targets[1],
            {"epoch_mean_loss": history, "tuples_used": len(selected), "tuples_excluded": len(tuples) - len(selected)},
        )
    return EXIT_OK


def cmd_eval(args):
    out = _out_dir(args)
    desc = _load(args.descriptors, "descriptors", _descriptor_array)
    obs = _load(args.observations, "observations", read_observations)
    odo = _load(args.odometry, "odometry", _odometry)
    truth = _load(args.ground_truth, "ground truth", read_ground_truth)
    _check_lengths(len(desc), obs, odo, truth)
    heads = {"untuned": None}
    if args.head:
        heads["tuned"] = _load(args.head, "head", load_head)
        if heads["tuned"].d_in != desc.shape[1]:
            raise InputError(f"head {args.head} expects dimension {heads['tuned'].d_in}, got {desc.shape[1]}")
    tuples = None
    if args.tuples:
        tuples = tuning_set(_load(args.tuples, "tuples", import_tuples))
        ids = {k for t in tuples for k in (t.anchor_id, t.positive_id, *t.negative_ids)}
        if ids and max(ids) >= len(desc):
            raise InputError(f"{args.tuples} references keyframes missing from {args.descriptors}")
    if args.thresholds < 2:
        raise InputError("--thresholds must be >= 2")
    config = EvalConfig(window=truth.window, revisit_radius=truth.revisit_radius, n_thresholds=args.thresholds, seed=args.seed)
    _prepare(out)
    with _stage("eval"):
        verified = verify_pairs(obs, odo, truth.positions, config)
        results = evaluate(desc, verified, heads, tuples=tuples or None, n_thresholds=args.thresholds)
        emit_artifacts(results, out)
        if tuples:
            for name, head in heads.items():
                log.info("%s separation gap %.4f", name, separation_stats(head, tuples, desc).gap)
    return EXIT_OK


def cmd_pipeline(args):
    out = _out_dir(args)
    try:
        data = load_config(args.config) if args.config else resolve()
        if args.seed is not None:
            data = resolve({**data, "seed": args.seed})
    except InvalidConfig as exc:
        raise InputError(f"invalid config {args.config or '<defaults>'}: {exc}") from exc
    except VprCalibError as exc:
        raise InputError(f"config {args.config}: {exc}") from exc
    missing = missing_inputs(data)
    if missing:
        raise InputError(f"input not found: {missing[0]}")
    if args.dump_config:
        target = _out_path(out, args.dump_config)
        _prepare(out, target)
        _dump(target, data)
    try:
        run_pipeline(data, out)
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


class _stage:
    """Context manager that turns any exception into a named stage failure."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, (KeyboardInterrupt, SystemExit)):
            raise StageFailure(self.name, exc) from exc
        return False


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def _with_out_dir(p, default="."):
    p.add_argument("--out-dir", default=default, help="directory receiving every output (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="vprcalib", description=__doc__.split("\n\n")[0], parents=[common])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("simulate", parents=[common], formatter_class=fmt, help="generate a synthetic sequence")
    p.add_argument("--config", help="JSON object of world settings (as in world_config.json)")
    p.add_argument("--trajectory", choices=["loop", "figure-eight", "grid"], help="path shape")
    p.add_argument("--n-keyframes", type=int, help="number of keyframes")
    p.add_argument("--aliasing-pairs", type=int, help="distant place pairs given look-alike descriptors")
    p.add_argument("--seed", type=int, help="world seed")
    p.add_argument("--domain-seed", type=int, help="seed of the descriptor domain shared across worlds")
    p.add_argument("--no-binary", action="store_true", help="skip descriptors.vprd")
    _with_out_dir(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("mine", parents=[common], formatter_class=fmt, help="mine training tuples from one sequence")
    p.add_argument("--descriptors", required=True, help="descriptor CSV or VPRD file")
    p.add_argument("--observations", required=True, help="observations JSON")
    p.add_argument("--odometry", required=True, help="g2o file whose odometry edges form the chain")
    p.add_argument("--window", type=int, default=10, help="temporal exclusion window in keyframes")
    p.add_argument("--k-max", type=int, default=50, help="neighbours walked per keyframe")
    p.add_argument("--max-negatives", type=int, default=10, help="negatives kept per tuple")
    p.add_argument("--min-correspondences", type=int, default=6, help="registration minimum")
    p.add_argument("--seed", type=int, default=0, help="RANSAC seed")
    p.add_argument("--normalize", action="store_true", help="L2-normalize descriptors before matching")
    p.add_argument("--out-tuples", default="tuples.json", help="tuple JSON output")
    p.add_argument("--out-graph", default="graph.g2o", help="pose graph with mined loop closures")
    p.add_argument("--report", default="mining_report.json", help="mining report JSON")
    _with_out_dir(p)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("optimize", parents=[common], formatter_class=fmt, help="optimize a g2o pose graph")
    p.add_argument("--input", required=True, help="g2o pose graph")
    p.add_argument("--robust", choices=["none", "gnc"], default="gnc", help="plain LM or GNC with a TLS cost")
    p.add_argument("--chi2-quantile", type=float, default=0.99, help="inlier bound quantile (6 DoF)")
    p.add_argument("--mu-growth", type=float, default=1.4, help="GNC control parameter growth factor")
    p.add_argument("--max-iters", type=int, default=100, help="LM iterations per solve")
    p.add_argument("--out-graph", default="optimized.g2o", help="graph with optimized estimates")
    p.add_argument("--report", default="optimize_report.json", help="solver report JSON")
    _with_out_dir(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("train", parents=[common], formatter_class=fmt, help="fine-tune an embedding head")
    p.add_argument("--tuples", required=True, help="tuple JSON; only inlier tuples are used")
    p.add_argument("--descriptors", required=True, help="descriptors of the mined sequence")
    p.add_argument("--head", help="initial head checkpoint (default: identity)")
    p.add_argument("--margin", type=float, default=0.25, help="triplet margin")
    p.add_argument("--learning-rate", type=float, default=1e-3, help="initial SGD step size")
    p.add_argument("--epochs", type=int, default=30, help="passes over the tuples")
    p.add_argument("--grad-clip-norm", type=_positive_or_none, default=1.0, help="global-norm clip, or 'none'")
    p.add_argument("--no-cosine-decay", action="store_true", help="keep the learning rate constant")
    p.add_argument("--seed", type=int, default=0, help="shuffle seed")
    p.add_argument("--out-head", default="head.json", help="tuned head checkpoint")
    p.add_argument("--history", default="history.json", help="per-epoch mean loss JSON")
    _with_out_dir(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], formatter_class=fmt, help="loop-closure detection metrics")
    p.add_argument("--descriptors", required=True, help="descriptors of the evaluated sequence")
    p.add_argument("--observations", required=True, help="observations JSON")
    p.add_argument("--odometry", required=True, help="odometry g2o chain")
    p.add_argument("--ground-truth", required=True, help="ground-truth JSON")
    p.add_argument("--head", help="tuned head; evaluated alongside the raw descriptors")
    p.add_argument("--tuples", help="tuples of this same sequence, for separation histograms")
    p.add_argument("--thresholds", type=int, default=50, help="size of the shared threshold grid")
    p.add_argument("--seed", type=int, default=0, help="RANSAC seed")
    _with_out_dir(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", parents=[common], formatter_class=fmt, help="run every stage end to end")
    p.add_argument("--config", help="YAML config; omitted keys take their defaults")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--dump-config", metavar="PATH", help="also write the resolved config as JSON")
    _with_out_dir(p, default="run")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
