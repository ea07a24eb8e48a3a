"""Experiment configuration, hashing, and run persistence.

A run is a flat directory holding the config snapshot, metric files and
derived tables. Every derived artifact records the hash of the config that
produced it, and all metric files are byte-reproducible from (config, seed);
wall-clock timings go to a separate file that is excluded from that
guarantee.
"""

from __future__ import annotations

import hashlib
import json
import os

import yaml

from cvdistill import model as md
from cvdistill.distill import DistillConfig
from cvdistill.model import TrainConfig
from cvdistill.world import DomainSpec, SplitSizes, generate_world

OUTPUT_ROOT_ENV = "CVDISTILL_RUNS"

EXIT_OK = 0
EXIT_MISSING_INPUT = 3
EXIT_HASH_MISMATCH = 4
EXIT_STAGE_FAILURE = 5


def config_hash(obj) -> str:
    """Stable hash of a JSON-serializable config fragment."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path) -> dict:
    with open(path) as f:
        return yaml.safe_load(f)


def output_root(override=None) -> str:
    return override or os.environ.get(OUTPUT_ROOT_ENV, "runs")


# --- config -> objects ------------------------------------------------------

def _domain_spec(domain_id: str, channels: int, d: dict) -> DomainSpec:
    gain = d.get("gain", 1.0)
    bias = d.get("bias", 0.0)
    return DomainSpec(
        domain_id=domain_id,
        feature_channels=channels,
        smoothness=float(d.get("smoothness", 2.0)),
        gain=tuple(gain) if isinstance(gain, (list, tuple)) else float(gain),
        bias=tuple(bias) if isinstance(bias, (list, tuple)) else float(bias),
        noise_std=float(d.get("noise_std", 0.0)),
        seed=int(d.get("seed", 0)),
    )


def build_world(world_cfg: dict):
    channels = int(world_cfg.get("feature_channels", 6))
    source = _domain_spec("source", channels, world_cfg["source"])
    target = _domain_spec("target", channels, world_cfg["target"])
    sizes = SplitSizes(**{k: int(v) for k, v in world_cfg["sizes"].items()})
    return generate_world(
        source,
        target,
        sizes,
        rows=int(world_cfg.get("rows", 64)),
        cols=int(world_cfg.get("cols", 64)),
        levels=int(world_cfg.get("levels", 3)),
        scale_s=float(world_cfg.get("scale_m_per_cell", 0.5)),
        seed=int(world_cfg.get("seed", 0)),
        map_size=world_cfg.get("map_size"),
    )


def teacher_train_config(cfg: dict) -> TrainConfig:
    t = cfg.get("teacher", {})
    return TrainConfig(
        learning_rate=float(t.get("learning_rate", 0.05)),
        momentum=float(t.get("momentum", 0.9)),
        epochs=int(t.get("epochs", 20)),
        batch_size=int(t.get("batch_size", 64)),
        supervise_levels=t.get("supervise_levels"),
        seed=int(t.get("seed", 0)),
    )


def train_teacher(cfg: dict, splits) -> md.LocalizerWeights:
    """Supervised teacher training on the labeled source split."""
    model_cfg = cfg.get("model", {})
    world_cfg = cfg["world"]
    source = splits["source-train"]
    rows, cols = source.grid_shape
    channels = source.pairs[0].aerial.shape[2]
    w0 = md.init_weights(
        channels,
        int(model_cfg.get("embed_dim", 8)),
        int(world_cfg.get("levels", 3)),
        int(model_cfg.get("init_seed", 0)),
    )
    sigma = float(cfg.get("teacher", {}).get("label_sigma", 4.0))
    labels = md.smoothed_location_labels(source.gt_array(), rows, cols, w0.levels, sigma)
    weights, _ = md.train(w0, source, labels, teacher_train_config(cfg), splits["source-val"])
    return weights


def distill_config(cfg: dict, **overrides) -> DistillConfig:
    d = dict(cfg.get("distill", {}))
    d.update({k: v for k, v in overrides.items() if v is not None})
    return DistillConfig(
        sigma=float(d.get("sigma", 4.0)),
        t_percent=float(d.get("t_percent", 80.0)),
        supervise_levels=int(d.get("supervise_levels", 2)),
        learning_rate=float(d.get("learning_rate", 0.05)),
        momentum=float(d.get("momentum", 0.9)),
        epochs=int(d.get("epochs", 20)),
        batch_size=int(d.get("batch_size", 64)),
        seed=int(d.get("seed", 0)),
        stopping=str(d.get("stopping", "validation")),
    )


# --- run persistence --------------------------------------------------------

def ensure_run_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    os.makedirs(os.path.join(path, "tables"), exist_ok=True)
    os.makedirs(os.path.join(path, "models"), exist_ok=True)
    return path


def write_config_snapshot(run_dir, cfg: dict) -> str:
    h = config_hash(cfg)
    snapshot = dict(cfg)
    snapshot["_config_hash"] = h
    with open(os.path.join(run_dir, "config.yaml"), "w") as f:
        yaml.safe_dump(snapshot, f, sort_keys=True)
    return h


def write_metrics(run_dir, metrics: dict, name: str = "metrics.json") -> None:
    with open(os.path.join(run_dir, name), "w") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
        f.write("\n")


def write_timings(run_dir, timings: dict) -> None:
    with open(os.path.join(run_dir, "timings.json"), "w") as f:
        json.dump(timings, f, indent=2, sort_keys=True)
        f.write("\n")


def eval_summary(result) -> dict:
    return {"mean_m": result.mean_m, "median_m": result.median_m, "n": int(result.pair_ids.size)}


def summary_rows(rows) -> str:
    """Render (method, mean, median, change%) rows as a fixed-width table."""
    lines = [f"{'method':<22}{'mean (m)':>10}{'median (m)':>12}{'change':>9}"]
    for method, mean, median, change in rows:
        change_txt = "-" if change is None else f"{change:+.0f}%"
        lines.append(f"{method:<22}{mean:>10.3f}{median:>12.3f}{change_txt:>9}")
    return "\n".join(lines)


def write_summary_csv(run_dir, rows) -> None:
    import csv

    with open(os.path.join(run_dir, "summary.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "mean_m", "median_m", "change_pct"])
        for method, mean, median, change in rows:
            writer.writerow(
                [method, repr(float(mean)), repr(float(median)), "" if change is None else repr(float(change))]
            )
