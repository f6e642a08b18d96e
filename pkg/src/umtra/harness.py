"""Experiment orchestration behind the command-line front end."""

from __future__ import annotations

import itertools
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

from . import io
from .config import ConfigError, ExperimentConfig, snapshot_protocol
from .datasets import LabeledDataset, gen_glyphs, load_image_dir, split, strip_labels
from .meta import TargetSampler, evaluate, meta_train
from .models import init_params, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "meta_loss", "eval_acc", "eval_ci", "wall_ms")
DEFAULT_SWEEP_CAP = 64


def workers_from_env() -> int:
    raw = os.environ.get("UMTRA_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"UMTRA_WORKERS must be an integer, got {raw!r}") from None


def load_splits(cfg: ExperimentConfig):
    """(train, val, test) class-disjoint labeled datasets for ``cfg``."""
    d = cfg.dataset
    if d.kind == "glyphs":
        ds = gen_glyphs(cfg.glyph_spec())
    else:
        ds = load_image_dir(d.path, d.layout)
        if not isinstance(ds, LabeledDataset):
            raise ConfigError(f"{d.path}: class ids are needed to build held-out evaluation splits")
    return split(ds, tuple(d.split), d.split_seed)


def algorithm_label(cfg: ExperimentConfig) -> str:
    if cfg.mode == "scratch":
        return "scratch"
    if cfg.mode == "supervised":
        return "supervised_maml"
    return f"umtra[{cfg.aug_label()}]"


def run_meta_train(cfg: ExperimentConfig, out_dir=None, workers: int = 1) -> dict:
    """Meta-train (unless scratch), evaluate on held-out classes, write artifacts.

    Writes ``log.csv``, ``model.ckpt`` and ``summary.json`` into ``out_dir``.
    """
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    train, val, test = load_splits(cfg)
    spec = cfg.model_spec(train.image_shape)
    mcfg = cfg.meta_config()
    source = strip_labels(train) if cfg.mode == "umtra" else train

    tmp_log = out / ".log.csv.partial"
    csv_log = io.CsvLog(tmp_log, LOG_COLUMNS)
    try:
        theta, _ = meta_train(
            mcfg,
            source,
            spec,
            snapshot=snapshot_protocol(cfg, val),
            on_row=csv_log.append,
            on_checkpoint=lambda it, p: save_checkpoint(p, out / f"model_{it:06d}.ckpt"),
            checkpoint_every=cfg.checkpoint_every,
            workers=workers,
        )
    finally:
        csv_log.close()
    os.replace(tmp_log, out / "log.csv")
    train_wall = time.perf_counter() - t_start

    save_checkpoint(theta, out / "model.ckpt")
    sampler = TargetSampler(test, cfg.n_way, cfg.k_shot_target, cfg.eval.seed)
    report = evaluate(theta, sampler, cfg.eval.n_tasks, cfg.eval.adapt_steps, cfg.eval_lr, workers=workers)
    summary = {
        "algorithm": algorithm_label(cfg),
        "mode": cfg.mode,
        "n_way": cfg.n_way,
        "k_shot": cfg.k_shot_target,
        "accuracy": report.mean,
        "ci": report.ci,
        "n_tasks": cfg.eval.n_tasks,
        "param_count": theta.count(),
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "checkpoint": "model.ckpt",
        "wall_time_train_s": train_wall,
        "wall_time_eval_s": report.wall_time,
        "wall_time_total_s": time.perf_counter() - t_start,
    }
    io.write_json(out / "summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
# sweeps


def grid_cells(grid: dict) -> tuple[list[str], list[tuple]]:
    axes = grid.get("axes")
    if not isinstance(axes, dict) or not axes:
        raise ConfigError("grid needs a non-empty 'axes' object")
    names = list(axes)
    for n in names:
        if not isinstance(axes[n], list) or not axes[n]:
            raise ConfigError(f"grid axis {n!r} must be a non-empty list")
    return names, list(itertools.product(*(axes[n] for n in names)))


def _cell_name(names, values) -> str:
    parts = []
    for n, v in zip(names, values):
        parts.append(f"{n.replace('.', '-')}={v if not isinstance(v, dict) else 'custom'}")
    return "__".join(parts)


def _run_cell(args):
    cfg_dict, overrides, out = args
    from .config import from_dict

    cfg = from_dict(cfg_dict).with_overrides(overrides)
    return run_meta_train(cfg, out, workers=1)


def run_sweep(cfg: ExperimentConfig, grid: dict, out_dir=None, workers: int = 1) -> Path:
    """Run every grid cell from the same base seed; write ``sweep.csv``."""
    names, cells = grid_cells(grid)
    cap = int(grid.get("cap", DEFAULT_SWEEP_CAP))
    if len(cells) > cap:
        raise ConfigError(f"grid has {len(cells)} cells, above the cap of {cap}; set \"cap\": {len(cells)}")
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for values in cells:
        overrides = dict(zip(names, values))
        cfg.with_overrides(overrides)  # validate before launching anything
        jobs.append((cfg.to_dict(), overrides, str(out / _cell_name(names, values))))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_run_cell, jobs))
    else:
        summaries = [_run_cell(j) for j in jobs]
    rows = [list(values) + [s["accuracy"], s["ci"]] for values, s in zip(cells, summaries)]
    rows = [[v if not isinstance(v, dict) else "custom" for v in r] for r in rows]
    io.write_csv(out / "sweep.csv", names + ["accuracy", "ci"], rows)
    io.atomic_write(out / "sweep.txt", heat_table(names, cells, [s["accuracy"] for s in summaries]))
    return out / "sweep.csv"


def heat_table(names: Sequence[str], cells: Sequence[tuple], accs: Sequence[float]) -> str:
    """Text rendering: a matrix for two axes, a list otherwise."""
    if len(names) == 2:
        rows_v = list(dict.fromkeys(c[0] for c in cells))
        cols_v = list(dict.fromkeys(c[1] for c in cells))
        lookup = {c: a for c, a in zip(cells, accs)}
        width = max(8, *(len(str(v)) + 2 for v in cols_v))
        head = f"{names[0]} \\ {names[1]}".ljust(24) + "".join(str(v).rjust(width) for v in cols_v)
        lines = [head]
        for r in rows_v:
            cells_txt = "".join(
                (f"{100 * lookup[(r, c)]:.2f}" if (r, c) in lookup else "-").rjust(width) for c in cols_v
            )
            lines.append(str(r).ljust(24) + cells_txt)
        return "\n".join(lines) + "\n"
    lines = []
    for c, a in zip(cells, accs):
        label = ", ".join(f"{n}={v}" for n, v in zip(names, c))
        lines.append(f"{label}: {100 * a:.2f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# accuracy curves


def run_curve(
    cfg: ExperimentConfig,
    checkpoints: Sequence[str],
    out_dir=None,
    steps: int | None = None,
    workers: int = 1,
) -> Path:
    """Per-step target-training accuracy (mean and 95% CI) for each model.

    ``scratch`` in place of a checkpoint path means a fresh seeded init.
    """
    if not checkpoints:
        raise ConfigError("curve needs at least one checkpoint")
    out = Path(out_dir or cfg.output_dir)
    _, _, test = load_splits(cfg)
    spec = cfg.model_spec(test.image_shape)
    steps = cfg.eval.adapt_steps if steps is None else steps
    sampler = TargetSampler(test, cfg.n_way, cfg.k_shot_target, cfg.eval.seed)
    series = {}
    for i, ck in enumerate(checkpoints):
        if ck == "scratch":
            params, label = init_params(spec, cfg.seed), "scratch"
        else:
            params = load_checkpoint(ck)
            if params.spec != spec:
                raise ConfigError(f"{ck}: model spec {params.spec} does not match config {spec}")
            label = Path(ck).parent.name or Path(ck).stem
        base, k = label, 2
        while label in series:
            label, k = f"{base}_{k}", k + 1
        rep = evaluate(params, sampler, cfg.eval.n_tasks, steps, cfg.eval_lr, curve=True, workers=workers)
        series[label] = (rep.curve_mean, rep.curve_ci)
    header = ["step"]
    for label in series:
        header += [f"{label}_mean", f"{label}_ci"]
    rows = []
    for s in range(steps + 1):
        row = [s]
        for mean, ci in series.values():
            row += [float(mean[s]), float(ci[s])]
        rows.append(row)
    path = io.write_csv(out / "curve.csv", header, rows)
    if cfg.emit_plots:
        io.atomic_write(out / "curve.svg", curve_svg_from_csv(path))
    return path


def curve_svg_from_csv(path) -> str:
    header, rows = io.read_csv(path)
    x = [float(r[0]) for r in rows]
    series = {}
    for j in range(1, len(header), 2):
        name = header[j][: -len("_mean")]
        series[name] = ([float(r[j]) for r in rows], [float(r[j + 1]) for r in rows])
    return io.line_plot_svg(x, series, title="target-task accuracy")


# ---------------------------------------------------------------------------
# reports


def load_summary(run_dir) -> dict:
    path = Path(run_dir) / "summary.json"
    try:
        summary = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{run_dir}: no summary.json") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: corrupt summary ({exc.msg})") from exc
    for key in ("algorithm", "n_way", "k_shot", "accuracy", "ci"):
        if key not in summary:
            raise ConfigError(f"{path}: summary lacks {key!r}")
    return summary


def build_report(run_dirs: Sequence[str]) -> tuple[list[str], list[list]]:
    """Rows of algorithm x (N, K) accuracy, in the order algorithms first appear."""
    summaries = [load_summary(d) for d in run_dirs]
    settings = sorted({(s["n_way"], s["k_shot"]) for s in summaries})
    algos = list(dict.fromkeys(s["algorithm"] for s in summaries))
    cells = {}
    for s in summaries:
        cells[(s["algorithm"], s["n_way"], s["k_shot"])] = (s["accuracy"], s["ci"])
    header = ["algorithm"]
    for n, k in settings:
        header += [f"({n},{k})_accuracy", f"({n},{k})_ci"]
    rows = []
    for a in algos:
        row = [a]
        for n, k in settings:
            acc, ci = cells.get((a, n, k), (None, None))
            row += [acc, ci]
        rows.append(row)
    return header, rows


def report_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cols = [str(h) for h in header]
    body = [[io.fmt(v) for v in r] for r in rows]
    widths = [max(len(c), *(len(r[i]) for r in body)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in body]
    return "\n".join(lines) + "\n"
