"""Batched experiment runners behind the command-line interface.

Every runner returns plain data (dicts and CSV text) so the CLI only has
to write files.  Trajectories are processed in seed chunks, optionally in
a process pool; results are reassembled in seed order so outputs do not
depend on the worker count.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import __version__
from .analysis import error_curve, format_float, mean_error_report, trajectory_norms
from .config import ExperimentConfig, iec_from_dict, parse_policy
from .errors import ConfigError
from .metrics import SampleSet, frechet_distance, model_reference
from .perturb import PerturbationConfig
from .sampler import NO_IEC, TrajectoryBatch, sample_batch

CHUNK = 512
VARIANTS = ("clean", "perturbed", "perturbed_iec")


def _run_chunk(args):
    model, schedule, pert, iec, seeds, record = args
    return sample_batch(model, schedule, pert, iec, seeds, record=record)


def run_batch(model, schedule, pert, iec, seeds, workers: int = 1,
              record: bool = True) -> TrajectoryBatch:
    chunks = [seeds[i:i + CHUNK] for i in range(0, len(seeds), CHUNK)]
    jobs = [(model, schedule, pert, iec, chunk, record) for chunk in chunks]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, jobs))
    else:
        parts = [_run_chunk(job) for job in jobs]
    return TrajectoryBatch.concat(parts)


def run_variants(cfg: ExperimentConfig, record: bool = True) -> dict[str, TrajectoryBatch]:
    """Clean, perturbed and perturbed+corrected runs from the same seeds."""
    schedule = cfg.build_schedule()
    model = cfg.build_model(schedule)
    seeds = cfg.seeds
    return {
        "clean": run_batch(model, schedule, PerturbationConfig(), NO_IEC, seeds,
                           cfg.workers, record),
        "perturbed": run_batch(model, schedule, cfg.perturbation, NO_IEC, seeds,
                               cfg.workers, record),
        "perturbed_iec": run_batch(model, schedule, cfg.perturbation, cfg.iec, seeds,
                                   cfg.workers, record),
    }


def final_errors(batch: TrajectoryBatch, clean: TrajectoryBatch) -> np.ndarray:
    return np.linalg.norm(batch.finals - clean.finals, axis=-1)


def overhead_pct(eval_counts, baseline_counts) -> float:
    base = float(np.mean(baseline_counts))
    # difference first, so integer count ratios come out exact
    return 100.0 * (float(np.mean(eval_counts)) - base) / base


def frechet_to_reference(cfg: ExperimentConfig, batch: TrajectoryBatch, reference=None):
    if len(batch) < batch.states.shape[-1] + 1:
        return None
    if reference is None:
        reference = model_reference(cfg.build_model(), cfg.n_reference, cfg.base_seed)
    return frechet_distance(SampleSet(batch.finals), reference)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_float(v) if isinstance(v, (float, np.floating)) else v
                         for v in row])
    return buf.getvalue()


def mean_curve(cfg: ExperimentConfig, clean: TrajectoryBatch, other: TrajectoryBatch):
    schedule = cfg.build_schedule()
    model = cfg.build_model(schedule)
    reports = [error_curve(clean[i], other[i], model, schedule, cfg.iec.lam)
               for i in range(len(clean))]
    return mean_error_report(reports)


def sample_report(cfg: ExperimentConfig) -> tuple[dict, dict[str, str]]:
    runs = run_variants(cfg)
    clean = runs["clean"]
    reference = None
    if cfg.n_trajectories >= clean.states.shape[-1] + 1:
        reference = model_reference(cfg.build_model(), cfg.n_reference, cfg.base_seed)
    baseline = runs["perturbed"].full_eval_count

    summary_rows, aggregates = [], {}
    for name in VARIANTS:
        batch = runs[name]
        err = final_errors(batch, clean)
        aggregates[name] = {
            "final_error_mean": float(err.mean()),
            "final_error_std": float(err.std()),
            "mean_eval_count": float(batch.full_eval_count.mean()),
            "overhead_ratio_pct": overhead_pct(batch.full_eval_count, baseline),
            "frechet_distance": frechet_to_reference(cfg, batch, reference) if reference else None,
        }
        for i, seed in enumerate(batch.seeds):
            summary_rows.append((name, int(seed), float(err[i]), int(batch.full_eval_count[i])))

    files = {
        "trajectories.csv": _csv(("variant", "seed", "final_error", "full_eval_count"),
                                 summary_rows),
        "errors.csv": mean_curve(cfg, clean, runs["perturbed"]).to_csv(),
        "errors_iec.csv": mean_curve(cfg, clean, runs["perturbed_iec"]).to_csv(),
    }
    report = {
        "aggregates": aggregates,
        "trajectories": [
            {"variant": v, "seed": s, "final_error": e, "full_eval_count": c}
            for v, s, e, c in summary_rows
        ],
    }
    return report, files


def norms_table(cfg: ExperimentConfig) -> tuple[dict, dict[str, str]]:
    schedule = cfg.build_schedule()
    model = cfg.build_model(schedule)
    clean = run_batch(model, schedule, PerturbationConfig(), NO_IEC, cfg.seeds,
                      cfg.workers, record=False)
    norms = trajectory_norms(model, clean.states, schedule, cfg.lambdas)
    keys = ["amplification"] + [float(l) for l in cfg.lambdas]
    names = ["amplification"] + [f"L_{l:g}" for l in cfg.lambdas]
    header = ["step", "t_index"]
    for n in names:
        header += [f"{n}_mean", f"{n}_min", f"{n}_max"]
    rows = []
    for p in range(schedule.T_sample):
        row = [p, schedule.source_index(p)]
        for k in keys:
            col = norms[k][:, p]
            row += [float(col.mean()), float(col.min()), float(col.max())]
        rows.append(row)
    long_rows = [
        (int(seed), p, n, float(norms[k][i, p]))
        for i, seed in enumerate(clean.seeds)
        for p in range(schedule.T_sample)
        for k, n in zip(keys, names)
    ]
    amp = norms["amplification"]
    summary = {
        "amplification_gt1_fraction": float((amp > 1).mean()),
        "mean_amplification_gt1_fraction": float((amp.mean(axis=0) > 1).mean()),
        "max_L": {n: float(norms[k].max()) for k, n in zip(keys[1:], names[1:])},
    }
    return summary, {
        "norms.csv": _csv(header, rows),
        "norms_trajectories.csv": _csv(("seed", "step", "quantity", "value"), long_rows),
    }


def _axis_config(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    pert, iec = cfg.perturbation, cfg.iec
    if axis == "lambda":
        return cfg.with_overrides(iec=replace(iec, lam=float(value)))
    if axis == "K":
        return cfg.with_overrides(iec=replace(iec, K=int(value)))
    if axis == "policy":
        fields = parse_policy(value)
        merged = {**iec.to_dict(), "fraction": None, "steps": [], **fields}
        return cfg.with_overrides(iec=iec_from_dict(merged))
    if axis == "cache_N":
        return cfg.with_overrides(perturbation=replace(pert, kind="cache", interval_N=int(value)))
    if axis == "bits":
        return cfg.with_overrides(perturbation=replace(pert, kind="quantize", bits=int(value)))
    if axis == "sigma":
        return cfg.with_overrides(perturbation=replace(pert, kind="additive", sigma=float(value)))
    if axis == "T":
        return cfg.with_overrides(T_sample=int(value))
    raise ConfigError(f"unknown ablation axis {axis!r}")


def ablation_table(cfg: ExperimentConfig, axis: str) -> tuple[dict, dict[str, str]]:
    values = cfg.ablate.get(axis)
    if not values:
        raise ConfigError(f"no values listed for ablation axis {axis!r}")
    rows, records = [], []
    for value in values:
        try:
            sub = _axis_config(cfg, axis, value)
        except ValueError as exc:
            raise ConfigError(f"bad value {value!r} for axis {axis!r}: {exc}") from exc
        runs = run_variants(sub, record=False)
        clean = runs["clean"]
        err = final_errors(runs["perturbed_iec"], clean)
        base_err = final_errors(runs["perturbed"], clean)
        fd = frechet_to_reference(sub, runs["perturbed_iec"])
        oh = overhead_pct(runs["perturbed_iec"].full_eval_count,
                          runs["perturbed"].full_eval_count)
        label = value if isinstance(value, str) else format_float(value)
        rows.append((axis, label, float(err.mean()), float(err.std()),
                     float(base_err.mean()), "" if fd is None else float(fd), oh))
        records.append({"value": value, "final_error_mean": float(err.mean()),
                        "baseline_final_error_mean": float(base_err.mean()),
                        "frechet_distance": fd, "overhead_ratio_pct": oh})
    header = ("axis", "value", "final_error_mean", "final_error_std",
              "baseline_final_error_mean", "frechet_distance", "overhead_ratio_pct")
    return {"axis": axis, "rows": records}, {"sweep.csv": _csv(header, rows)}


def metrics_report(cfg: ExperimentConfig) -> tuple[dict, dict[str, str]]:
    runs = run_variants(cfg, record=False)
    reference = model_reference(cfg.build_model(), cfg.n_reference, cfg.base_seed)
    fds = {name: frechet_to_reference(cfg, runs[name], reference) for name in VARIANTS}
    d = runs["clean"].states.shape[-1]
    rows = [
        (name, int(seed), *[float(v) for v in runs[name].finals[i]])
        for name in VARIANTS
        for i, seed in enumerate(runs[name].seeds)
    ]
    header = ("variant", "seed", *[f"x{j}" for j in range(d)])
    return {"frechet_distance": fds, "n_reference": cfg.n_reference}, {
        "samples.csv": _csv(header, rows)
    }


def report_header(cfg: ExperimentConfig, command: str) -> dict:
    return {
        "tool": "iecdiff",
        "version": __version__,
        "command": command,
        "config": cfg.to_dict(),
        "notes": {
            "overhead_unit": "model evaluations",
            "caching": "output-level (whole prediction reused)",
            "timestep_stride": "uniform",
        },
    }
