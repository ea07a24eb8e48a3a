"""Command-line experiment runner.

Every subcommand takes a YAML config plus a few overrides, writes its
artifacts into a run directory, and stamps them with the config hash so
dependent stages can refuse mismatched inputs.

Exit codes: 0 success, 2 usage error, 3 missing input file,
4 config-hash mismatch, 5 pipeline stage failure.
"""

from __future__ import annotations

import os
import sys

import click

from cvdistill import baselines as bl
from cvdistill import distill as ds
from cvdistill import evaluation as ev
from cvdistill import experiment as ex
from cvdistill import model as md
from cvdistill import world as wd


class HashMismatch(RuntimeError):
    pass


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guard(fn):
    try:
        return fn()
    except FileNotFoundError as exc:
        _fail(ex.EXIT_MISSING_INPUT, f"missing input: {exc}")
    except HashMismatch as exc:
        _fail(ex.EXIT_HASH_MISMATCH, str(exc))
    except ds.PipelineStageError as exc:
        _fail(ex.EXIT_STAGE_FAILURE, str(exc))


def _teacher_hash(cfg: dict) -> str:
    return ex.config_hash({k: cfg.get(k) for k in ("world", "model", "teacher")})


def _load_world_checked(cfg: dict, world_dir: str):
    splits, manifest = wd.load_world(world_dir)
    expected = ex.config_hash(cfg["world"])
    found = manifest.get("world_config_hash")
    if found != expected:
        raise HashMismatch(f"config-hash mismatch: world built from {found}, config is {expected}")
    return splits


def _load_teacher_checked(cfg: dict, path: str):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    weights, stored = md.load_weights(path)
    expected = _teacher_hash(cfg)
    if stored != expected:
        raise HashMismatch(f"config-hash mismatch: teacher trained from {stored}, config is {expected}")
    return weights


def _default_out(cfg: dict, name: str, out: str | None) -> str:
    if out:
        return out
    return os.path.join(ex.output_root(), f"{name}-{ex.config_hash(cfg)}")


@click.group()
def main():
    """Weakly-supervised cross-view localization experiments."""


@main.command("gen-world")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_dir", default=None, help="World output directory.")
def gen_world(config_path, out_dir):
    """Generate a synthetic two-domain world from the config's world section."""

    def run():
        cfg = ex.load_config(config_path)
        target = _default_out(cfg, "world", out_dir)
        splits = ex.build_world(cfg["world"])
        wd.save_world(target, splits, {"world_config_hash": ex.config_hash(cfg["world"])})
        click.echo(f"world written to {target}")

    _guard(run)


@main.command("train-teacher")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--world", "world_dir", required=True, type=click.Path())
@click.option("--out", "out_path", default=None, help="Teacher weights file (.npz).")
@click.option("--epochs", type=int, default=None)
@click.option("--sigma", type=float, default=None, help="Label smoothing, cells.")
@click.option("--k-prime", type=int, default=None, help="Level cutoff for the loss.")
@click.option("--seed", type=int, default=None)
def train_teacher(config_path, world_dir, out_path, epochs, sigma, k_prime, seed):
    """Train the source-area teacher model."""

    def run():
        cfg = ex.load_config(config_path)
        for key, value in (("epochs", epochs), ("label_sigma", sigma),
                           ("supervise_levels", k_prime), ("seed", seed)):
            if value is not None:
                cfg.setdefault("teacher", {})[key] = value
        splits = _load_world_checked(cfg, world_dir)
        weights = ex.train_teacher(cfg, splits)
        target = out_path or os.path.join(ex.output_root(), f"teacher-{_teacher_hash(cfg)}.npz")
        os.makedirs(os.path.dirname(target) or ".", exist_ok=True)
        md.save_weights(target, weights, _teacher_hash(cfg))
        result = ev.evaluate(weights, splits["test"])
        click.echo(f"teacher written to {target}")
        click.echo(f"test mean {result.mean_m:.3f} m, median {result.median_m:.3f} m")

    _guard(run)


def _write_model_evals(run_dir, splits, models: dict) -> dict:
    metrics = {}
    for name, weights in models.items():
        result = ev.evaluate(weights, splits["test"])
        metrics[name] = ex.eval_summary(result)
        md.save_weights(os.path.join(run_dir, "models", f"{name}.npz"), weights)
    return metrics


@main.command("distill")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--world", "world_dir", required=True, type=click.Path())
@click.option("--teacher", "teacher_path", required=True, type=click.Path())
@click.option("--variant", type=click.Choice([v for v in ds.VARIANTS if v != "teacher"]),
              default="st+m+of")
@click.option("--sigma", type=float, default=None)
@click.option("--t-percent", type=float, default=None)
@click.option("--k-prime", "supervise_levels", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", default=None)
def distill_cmd(config_path, world_dir, teacher_path, variant, sigma, t_percent,
                supervise_levels, seed, out_dir):
    """Run one self-distillation variant end to end."""

    def run():
        cfg = ex.load_config(config_path)
        for key, value in (("sigma", sigma), ("t_percent", t_percent),
                           ("supervise_levels", supervise_levels), ("seed", seed)):
            if value is not None:
                cfg.setdefault("distill", {})[key] = value
        splits = _load_world_checked(cfg, world_dir)
        teacher = _load_teacher_checked(cfg, teacher_path)
        config = ex.distill_config(cfg)
        record = ds.run_pipeline(splits, teacher, config, variant)

        run_dir = ex.ensure_run_dir(_default_out(cfg, f"distill-{variant}", out_dir))
        ex.write_config_snapshot(run_dir, cfg)
        metrics = {"variant": variant, "models": _write_model_evals(run_dir, splits, record["models"])}
        if "filter_report" in record:
            report = record["filter_report"]
            metrics["filter"] = {
                "t_percent": report.t_percent,
                "kept": report.n_kept,
                "total": report.n_total,
                "threshold_cells": report.threshold,
            }
        if "d_eps_spearman" in record:
            metrics["d_eps_spearman"] = record["d_eps_spearman"]
        ex.write_metrics(run_dir, metrics)
        ex.write_timings(run_dir, record["timings"])

        final = record["models"].get("final")
        if final is not None:
            test_eval = ev.evaluate(final, splits["test"])
            ev.write_per_sample_csv(os.path.join(run_dir, "tables", "test_per_sample.csv"), test_eval)
            comp = ev.compare(ev.evaluate(teacher, splits["test"]), test_eval)
            ev.write_histogram_csv(os.path.join(run_dir, "tables", "error_change_hist.csv"), comp)
        diag = record.get("adapt_diagnostics")
        if diag is not None:
            ev.write_scatter_csv(
                os.path.join(run_dir, "tables", "adapt_d_vs_teacher_eps.csv"),
                diag["d_cells"], diag["teacher_error_m"], diag["pair_id"],
            )
        click.echo(f"run written to {run_dir}")
        for name, summary in metrics["models"].items():
            click.echo(f"{name}: mean {summary['mean_m']:.3f} m, median {summary['median_m']:.3f} m")

    _guard(run)


@main.command("baseline-em")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--world", "world_dir", required=True, type=click.Path())
@click.option("--teacher", "teacher_path", required=True, type=click.Path())
@click.option("--omega", type=float, required=True)
@click.option("--mode", type=click.Choice(["joint", "finetune-only"]), default="joint")
@click.option("--out", "out_dir", default=None)
def baseline_em(config_path, world_dir, teacher_path, omega, mode, out_dir):
    """Entropy-minimization baseline for one weight value."""

    def run():
        cfg = ex.load_config(config_path)
        cfg.setdefault("baselines", {}).setdefault("em", {})["omega"] = omega
        splits = _load_world_checked(cfg, world_dir)
        teacher = _load_teacher_checked(cfg, teacher_path)
        em_cfg = cfg["baselines"].get("em", {})
        config = md.TrainConfig(
            learning_rate=float(em_cfg.get("learning_rate", 0.05)),
            momentum=float(em_cfg.get("momentum", 0.9)),
            epochs=int(em_cfg.get("epochs", 10)),
            batch_size=int(em_cfg.get("batch_size", 64)),
            seed=int(em_cfg.get("seed", 0)),
        )
        sigma = float(cfg.get("teacher", {}).get("label_sigma", 4.0))
        weights = bl.train_entropy_min(
            teacher, splits["source-train"], splits["adapt"],
            bl.EmConfig(omega, mode), config, sigma, splits["target-val"],
        )
        run_dir = ex.ensure_run_dir(_default_out(cfg, f"em-{omega}", out_dir))
        ex.write_config_snapshot(run_dir, cfg)
        val_eval = ev.evaluate(weights, splits["target-val"])
        test_eval = ev.evaluate(weights, splits["test"])
        ex.write_metrics(run_dir, {
            "omega": omega,
            "mode": mode,
            "target_val": ex.eval_summary(val_eval),
            "test": ex.eval_summary(test_eval),
        })
        md.save_weights(os.path.join(run_dir, "models", "em.npz"), weights)
        click.echo(f"omega={omega}: target-val mean {val_eval.mean_m:.3f} m")

    _guard(run)


@main.command("baseline-noisy-ft")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--world", "world_dir", required=True, type=click.Path())
@click.option("--teacher", "teacher_path", required=True, type=click.Path())
@click.option("--bound", type=float, required=True, help="GT corruption bound, meters.")
@click.option("--out", "out_dir", default=None)
def baseline_noisy_ft(config_path, world_dir, teacher_path, bound, out_dir):
    """Supervised finetuning on target GT corrupted within a bound."""

    def run():
        cfg = ex.load_config(config_path)
        cfg.setdefault("baselines", {}).setdefault("noisy", {})["bound_m"] = bound
        splits = _load_world_checked(cfg, world_dir)
        teacher = _load_teacher_checked(cfg, teacher_path)
        noisy_cfg = cfg["baselines"].get("noisy", {})
        config = md.TrainConfig(
            learning_rate=float(noisy_cfg.get("learning_rate", 0.05)),
            momentum=float(noisy_cfg.get("momentum", 0.9)),
            epochs=int(noisy_cfg.get("epochs", 10)),
            batch_size=int(noisy_cfg.get("batch_size", 64)),
            seed=int(noisy_cfg.get("seed", 0)),
        )
        sigma = float(cfg.get("teacher", {}).get("label_sigma", 4.0))
        weights, n_clamped = bl.train_noisy_supervised(
            teacher, splits["adapt"], bl.NoisyGtConfig(bound), config, sigma,
            noise_seed=int(noisy_cfg.get("noise_seed", 0)), val_split=splits["target-val"],
        )
        run_dir = ex.ensure_run_dir(_default_out(cfg, f"noisy-{bound}", out_dir))
        ex.write_config_snapshot(run_dir, cfg)
        test_eval = ev.evaluate(weights, splits["test"])
        ex.write_metrics(run_dir, {
            "bound_m": bound,
            "clamped": n_clamped,
            "test": ex.eval_summary(test_eval),
        })
        md.save_weights(os.path.join(run_dir, "models", "noisy_ft.npz"), weights)
        click.echo(f"bound={bound} m: test mean {test_eval.mean_m:.3f} m ({n_clamped} clamped)")

    _guard(run)


@main.command("baseline-entropy-filter")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--world", "world_dir", required=True, type=click.Path())
@click.option("--teacher", "teacher_path", required=True, type=click.Path())
@click.option("--t-percent", type=float, default=None)
@click.option("--out", "out_dir", default=None)
def baseline_entropy_filter(config_path, world_dir, teacher_path, t_percent, out_dir):
    """Proposed pipeline but with entropy-ranked sample selection."""

    def run():
        cfg = ex.load_config(config_path)
        if t_percent is not None:
            cfg.setdefault("distill", {})["t_percent"] = t_percent
        splits = _load_world_checked(cfg, world_dir)
        teacher = _load_teacher_checked(cfg, teacher_path)
        config = ex.distill_config(cfg)
        final, report = run_entropy_filtered(splits, teacher, config)
        run_dir = ex.ensure_run_dir(_default_out(cfg, "entropy-filter", out_dir))
        ex.write_config_snapshot(run_dir, cfg)
        test_eval = ev.evaluate(final, splits["test"])
        ex.write_metrics(run_dir, {
            "t_percent": report.t_percent,
            "kept": report.n_kept,
            "test": ex.eval_summary(test_eval),
        })
        md.save_weights(os.path.join(run_dir, "models", "final.npz"), final)
        click.echo(f"entropy-filtered student: test mean {test_eval.mean_m:.3f} m")

    _guard(run)


def run_entropy_filtered(splits, teacher, config):
    """Mode-based pseudo GT + entropy-ranked top-T% selection + final student."""
    adapt = splits["adapt"]
    val = splits["target-val"] if config.stopping == "validation" else None
    pseudo = ds.make_pseudo_gt(teacher, adapt, "mode", config.sigma)
    report = bl.filter_by_entropy(teacher, adapt, config.t_percent)
    kept = report.kept_indices()
    final = ds.train_student(
        teacher, adapt.subset(kept), pseudo.subset(kept), config.train_config(), val
    )
    return final, report


@main.command("eval")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--world", "world_dir", required=True, type=click.Path())
@click.option("--weights", "weights_path", required=True, type=click.Path())
@click.option("--split", "split_name", default="test")
@click.option("--out", "out_dir", default=None)
def eval_cmd(config_path, world_dir, weights_path, split_name, out_dir):
    """Evaluate saved weights on one split."""

    def run():
        cfg = ex.load_config(config_path)
        splits = _load_world_checked(cfg, world_dir)
        if not os.path.exists(weights_path):
            raise FileNotFoundError(weights_path)
        weights, _ = md.load_weights(weights_path)
        result = ev.evaluate(weights, splits[split_name])
        run_dir = ex.ensure_run_dir(_default_out(cfg, f"eval-{split_name}", out_dir))
        ex.write_metrics(run_dir, {split_name: ex.eval_summary(result)})
        ev.write_per_sample_csv(os.path.join(run_dir, "tables", "per_sample.csv"), result)
        click.echo(f"{split_name}: mean {result.mean_m:.3f} m, median {result.median_m:.3f} m")

    _guard(run)


@main.command("compare")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--world", "world_dir", required=True, type=click.Path())
@click.option("--weights-a", required=True, type=click.Path())
@click.option("--weights-b", required=True, type=click.Path())
@click.option("--split", "split_name", default="test")
@click.option("--out", "out_dir", default=None)
def compare_cmd(config_path, world_dir, weights_a, weights_b, split_name, out_dir):
    """Paired per-sample error change between two models."""

    def run():
        cfg = ex.load_config(config_path)
        splits = _load_world_checked(cfg, world_dir)
        for p in (weights_a, weights_b):
            if not os.path.exists(p):
                raise FileNotFoundError(p)
        wa, _ = md.load_weights(weights_a)
        wb, _ = md.load_weights(weights_b)
        split = splits[split_name]
        record = ev.compare(ev.evaluate(wa, split), ev.evaluate(wb, split))
        run_dir = ex.ensure_run_dir(_default_out(cfg, f"compare-{split_name}", out_dir))
        ex.write_metrics(run_dir, {
            "improved": record.improved,
            "worsened": record.worsened,
            "unchanged": record.unchanged,
        })
        ev.write_histogram_csv(os.path.join(run_dir, "tables", "error_change_hist.csv"), record)
        click.echo(f"improved {record.improved}, worsened {record.worsened}, "
                   f"unchanged {record.unchanged}")

    _guard(run)


@main.command("reproduce-all")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_dir", default=None)
def reproduce_all(config_path, out_dir):
    """Run the full experiment suite and emit a summary table."""

    def run():
        cfg = ex.load_config(config_path)
        run_dir = ex.ensure_run_dir(_default_out(cfg, "reproduce-all", out_dir))
        metrics, rows, timings = run_full_suite(cfg)
        ex.write_config_snapshot(run_dir, cfg)
        ex.write_metrics(run_dir, metrics)
        ex.write_timings(run_dir, timings)
        ex.write_summary_csv(run_dir, rows)
        click.echo(ex.summary_rows(rows))
        click.echo(f"run written to {run_dir}")

    _guard(run)


def run_full_suite(cfg: dict):
    """Teacher, all distillation variants, and all baselines for one config."""
    import time

    timings = {}
    t0 = time.perf_counter()
    splits = ex.build_world(cfg["world"])
    timings["world"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    teacher = ex.train_teacher(cfg, splits)
    timings["teacher"] = time.perf_counter() - t0
    teacher_eval = ev.evaluate(teacher, splits["test"])
    teacher_mean = teacher_eval.mean_m

    metrics = {"teacher": ex.eval_summary(teacher_eval)}
    rows = [("teacher", teacher_eval.mean_m, teacher_eval.median_m, None)]

    def change(mean):
        return 100.0 * (mean - teacher_mean) / teacher_mean

    config = ex.distill_config(cfg)
    for variant in ("st-m-of", "st+m-of", "st+m+of", "st+m+a"):
        t0 = time.perf_counter()
        record = ds.run_pipeline(splits, teacher, config, variant)
        timings[variant] = time.perf_counter() - t0
        result = ev.evaluate(record["models"]["final"], splits["test"])
        metrics[variant] = ex.eval_summary(result)
        if "d_eps_spearman" in record:
            metrics[variant]["d_eps_spearman"] = record["d_eps_spearman"]
        rows.append((variant, result.mean_m, result.median_m, change(result.mean_m)))

    t0 = time.perf_counter()
    final, report = run_entropy_filtered(splits, teacher, config)
    timings["entropy-filter"] = time.perf_counter() - t0
    result = ev.evaluate(final, splits["test"])
    metrics["entropy-filter"] = ex.eval_summary(result)
    rows.append(("entropy-filter", result.mean_m, result.median_m, change(result.mean_m)))

    em_cfg = cfg.get("baselines", {}).get("em", {})
    em_train = md.TrainConfig(
        learning_rate=float(em_cfg.get("learning_rate", 0.05)),
        momentum=float(em_cfg.get("momentum", 0.9)),
        epochs=int(em_cfg.get("epochs", 10)),
        batch_size=int(em_cfg.get("batch_size", 64)),
        seed=int(em_cfg.get("seed", 0)),
    )
    sigma = float(cfg.get("teacher", {}).get("label_sigma", 4.0))
    metrics["entropy-min"] = {}
    for omega in em_cfg.get("omegas", [0.0, 0.01, 0.1, 1.0]):
        t0 = time.perf_counter()
        weights = bl.train_entropy_min(
            teacher, splits["source-train"], splits["adapt"], bl.EmConfig(float(omega)),
            em_train, sigma, splits["target-val"],
        )
        timings[f"em-{omega}"] = time.perf_counter() - t0
        val_eval = ev.evaluate(weights, splits["target-val"])
        result = ev.evaluate(weights, splits["test"])
        metrics["entropy-min"][str(omega)] = {
            "target_val": ex.eval_summary(val_eval),
            "test": ex.eval_summary(result),
        }
        rows.append((f"em w={omega}", result.mean_m, result.median_m, change(result.mean_m)))

    noisy_cfg = cfg.get("baselines", {}).get("noisy", {})
    noisy_train = md.TrainConfig(
        learning_rate=float(noisy_cfg.get("learning_rate", 0.05)),
        momentum=float(noisy_cfg.get("momentum", 0.9)),
        epochs=int(noisy_cfg.get("epochs", 10)),
        batch_size=int(noisy_cfg.get("batch_size", 64)),
        seed=int(noisy_cfg.get("seed", 0)),
    )
    metrics["noisy-ft"] = {}
    for bound in noisy_cfg.get("bounds_m", [0.0, 1.0, 2.5, 5.0, 10.0]):
        t0 = time.perf_counter()
        weights, n_clamped = bl.train_noisy_supervised(
            teacher, splits["adapt"], bl.NoisyGtConfig(float(bound)), noisy_train, sigma,
            noise_seed=int(noisy_cfg.get("noise_seed", 0)), val_split=splits["target-val"],
        )
        timings[f"noisy-{bound}"] = time.perf_counter() - t0
        result = ev.evaluate(weights, splits["test"])
        metrics["noisy-ft"][str(bound)] = {"test": ex.eval_summary(result), "clamped": n_clamped}
        rows.append((f"noisy-ft b={bound}", result.mean_m, result.median_m, change(result.mean_m)))

    return metrics, rows, timings


if __name__ == "__main__":
    main()
