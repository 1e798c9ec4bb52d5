"""End-to-end run: simulate, mine, optimize, train, evaluate.

Artifacts land under one output directory::

    simulate/tuning/         descriptors, observations, odometry, ground truth
    simulate/heldout_<k>/
    mine/                    tuples.json, graph.g2o, report.json
    optimize/                optimized.g2o, report.json
    train/                   head.json, history.json, separation/
    eval/heldout_<k>/        similarity, PR and summary files
    manifest.json

Mining already runs the robust solve over its graph; the optimize stage
writes that solve's estimates and report rather than repeating it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import platform
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import SEQUENCE_FILES, seeds, stage_configs
from .descriptors import DescriptorStore, load_descriptors, write_binary, write_csv
from .errors import InputLengthMismatch, IoFailure, VprCalibError
from .evaluation import emit_artifacts, emit_separation, evaluate, separation_stats, verify_pairs
from .mining import export_tuples, mine, tuning_set
from .posegraph import odometry_from_graph, read_g2o, save_g2o
from .registration import observations_from_json, observations_to_json
from .simulator import GroundTruth, config_to_json, generate
from .training import EmbeddingHead, save_head, train

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1


class StageFailure(VprCalibError):
    """A pipeline stage raised; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


# --------------------------------------------------------------------------
# sequence files
# --------------------------------------------------------------------------


def _write_text(path, text):
    try:
        Path(path).write_text(text, encoding="utf-8", newline="")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def write_sequence(world, out_dir, binary=True):
    """Write one simulated world as the files every subcommand reads."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    store = DescriptorStore.from_arrays(range(world.n), world.descriptors)
    write_csv(store, out / "descriptors.csv")
    if binary:
        write_binary(store, out / "descriptors.vprd")
    _write_text(out / "observations.json", observations_to_json(world.observations) + "\n")
    save_g2o(world.initial_graph(), out / "odometry.g2o")
    _write_text(out / "ground_truth.json", json.dumps(world.ground_truth.to_dict(), sort_keys=True) + "\n")
    _write_text(out / "world_config.json", config_to_json(world.config) + "\n")
    return {
        "descriptors": str(out / "descriptors.csv"),
        "observations": str(out / "observations.json"),
        "odometry": str(out / "odometry.g2o"),
        "ground_truth": str(out / "ground_truth.json"),
    }


def _read_json(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"{path}: {exc.strerror or exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise IoFailure(f"{path}: not valid JSON ({exc})") from exc


def read_observations(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"{path}: {exc.strerror or exc}") from exc
    return observations_from_json(text)


def read_ground_truth(path) -> GroundTruth:
    try:
        return GroundTruth.from_dict(_read_json(path))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputLengthMismatch(f"{path}: malformed ground truth ({exc})") from exc


def read_sequence(paths, normalize=False):
    """Load ``(descriptor array, observations, odometry, ground truth or None)``."""
    store = load_descriptors(paths["descriptors"], normalize=normalize)
    if sorted(int(k) for k in store.ids) != list(range(len(store))):
        raise InputLengthMismatch(f"{paths['descriptors']}: keyframe ids must be 0..N-1")
    order = np.argsort(store.ids)
    descriptors = store.vectors[order]
    observations = read_observations(paths["observations"])
    odometry = odometry_from_graph(read_g2o(paths["odometry"]))
    truth = read_ground_truth(paths["ground_truth"]) if paths.get("ground_truth") else None
    n = len(descriptors)
    if len(observations) != n or len(odometry) != n - 1 or (truth is not None and len(truth.poses) != n):
        raise InputLengthMismatch("descriptors, observations, odometry and ground truth disagree on keyframe count")
    return descriptors, observations, odometry, truth


def missing_inputs(data):
    """Input paths named in the config that do not exist."""
    inputs = data["inputs"]
    seqs = ([inputs["tuning"]] if inputs["tuning"] else []) + list(inputs["heldout"])
    return [p for seq in seqs for k in SEQUENCE_FILES if (p := seq.get(k)) and not Path(p).is_file()]


# --------------------------------------------------------------------------
# run
# --------------------------------------------------------------------------


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump(path, obj):
    _write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _versions():
    return {
        "vprcalib": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def run_pipeline(data, out_dir) -> dict:
    """Run every enabled stage of a resolved config; returns the manifest.

    Raises :class:`StageFailure` naming the first stage that fails.
    """
    out = Path(out_dir)
    cfg = stage_configs(data)
    enabled = data["stages"]
    timings = {}
    state = {}

    def stage(name, fn):
        if not enabled[name]:
            return
        start = time.perf_counter()
        try:
            fn()
        except StageFailure:
            raise
        except Exception as exc:  # surfaced to the CLI with the stage name
            raise StageFailure(name, exc) from exc
        timings[name] = time.perf_counter() - start
        log.info("stage %s: %.2f s", name, timings[name])

    def simulate():
        world = generate(cfg.tuning_world)
        state["tuning"] = (world.descriptors, world.observations, world.odometry, world.ground_truth)
        write_sequence(world, out / "simulate" / "tuning")
        state["heldout"] = []
        for k, wc in enumerate(cfg.heldout_worlds):
            hw = generate(wc)
            write_sequence(hw, out / "simulate" / f"heldout_{k}")
            state["heldout"].append((hw.descriptors, hw.observations, hw.odometry, hw.ground_truth))

    def load_inputs():
        inputs = data["inputs"]
        if "tuning" not in state:
            if inputs["tuning"] is None:
                raise VprCalibError("no tuning sequence: enable simulate or set inputs/tuning")
            state["tuning"] = read_sequence(inputs["tuning"], cfg.mining.normalize)
        if "heldout" not in state:
            state["heldout"] = [read_sequence(p, cfg.mining.normalize) for p in inputs["heldout"]]

    def mine_stage():
        load_inputs()
        desc, obs, odo, _ = state["tuning"]
        tuples, graph, report = mine(desc, obs, odo, cfg.mining)
        state["tuples"], state["mining_report"] = tuples, report
        d = out / "mine"
        d.mkdir(parents=True, exist_ok=True)
        export_tuples(tuples, d / "tuples.json")
        save_g2o(graph, d / "graph.g2o")
        _dump(d / "report.json", report.to_dict())
        state["graph"] = graph

    def optimize_stage():
        if "mining_report" not in state:
            raise VprCalibError("optimize needs the mine stage")
        report = state["mining_report"]
        d = out / "optimize"
        d.mkdir(parents=True, exist_ok=True)
        save_g2o(state["graph"].with_estimates(report.estimates), d / "optimized.g2o")
        _dump(d / "report.json", report.optimize_report.to_dict())

    def train_stage():
        if "tuples" not in state:
            raise VprCalibError("train needs the mine stage")
        desc = state["tuning"][0]
        selected = tuning_set(state["tuples"])
        head, history = train(EmbeddingHead.identity(desc.shape[1]), selected, desc, cfg.training)
        state["head"] = head
        d = out / "train"
        d.mkdir(parents=True, exist_ok=True)
        save_head(head, d / "head.json")
        _dump(d / "history.json", {"epoch_mean_loss": history})
        if selected:
            emit_separation(
                {"untuned": separation_stats(None, selected, desc), "tuned": separation_stats(head, selected, desc)},
                d / "separation",
            )

    def eval_stage():
        load_inputs()
        heads = {"untuned": None}
        if "head" in state:
            heads["tuned"] = state["head"]
        for k, (desc, obs, odo, truth) in enumerate(state["heldout"]):
            if truth is None:
                raise VprCalibError(f"held-out sequence {k} has no ground truth")
            ecfg = dataclasses.replace(cfg.evaluation, window=truth.window, revisit_radius=truth.revisit_radius)
            verified = verify_pairs(obs, odo, truth.positions, ecfg)
            results = evaluate(desc, verified, heads, n_thresholds=ecfg.n_thresholds)
            emit_artifacts(results, out / "eval" / f"heldout_{k}")

    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StageFailure("setup", exc) from exc
    stage("simulate", simulate)
    stage("mine", mine_stage)
    stage("optimize", optimize_stage)
    stage("train", train_stage)
    stage("eval", eval_stage)

    outputs = {
        p.relative_to(out).as_posix(): _sha256(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }
    manifest = {
        "version": MANIFEST_VERSION,
        "versions": _versions(),
        "seed": data["seed"],
        "seeds": seeds(data),
        "config": data,
        "stages": [{"name": name, "seconds": secs} for name, secs in timings.items()],
        "outputs": outputs,
    }
    _dump(out / "manifest.json", manifest)
    return manifest


MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["version", "versions", "seed", "seeds", "config", "stages", "outputs"],
    "properties": {
        "version": {"const": MANIFEST_VERSION},
        "versions": {"type": "object", "additionalProperties": {"type": "string"}},
        "seed": {"type": "integer"},
        "seeds": {"type": "object"},
        "config": {"type": "object"},
        "stages": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "seconds"],
                "properties": {"name": {"type": "string"}, "seconds": {"type": "number", "minimum": 0}},
            },
        },
        "outputs": {"type": "object", "additionalProperties": {"type": "string", "pattern": "^[0-9a-f]{64}$"}},
    },
}


def without_timings(manifest: dict) -> dict:
    """The manifest with per-stage wall times removed, for reproducibility checks."""
    stripped = dict(manifest)
    stripped["stages"] = [s["name"] for s in manifest["stages"]]
    return stripped
