"""Inner adaptation, meta-updates, meta-training and target-task evaluation."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .augment import Compose, preset
from .datasets import LabeledDataset, strip_labels
from .models import ModelSpec, ParamSet, forward, init_params
from .rng import EVAL, SNAPSHOT, episode_stream, stream
from .taskgen import TargetTask, build_supervised_task, build_umtra_task, sample_target_task

log = logging.getLogger(__name__)

MODES = ("umtra", "supervised", "scratch")
GRAD_MODES = ("second_order", "first_order")


@dataclass
class MetaConfig:
    n_way: int = 5
    k_shot_target: int = 1
    meta_batch: int = 8
    inner_updates: int = 1
    inner_lr: float = 0.2
    outer_lr: float = 0.02
    meta_iterations: int = 2000
    grad_mode: str = "second_order"
    mode: str = "umtra"
    aug: Compose = field(default_factory=lambda: preset("zero_shift"))
    seed: int = 0

    def __post_init__(self):
        if self.n_way < 2:
            raise ValueError(f"n_way must be >= 2, got {self.n_way}")
        if self.meta_batch < 1 or self.inner_updates < 1:
            raise ValueError("meta_batch and inner_updates must be >= 1")
        # outer_lr = 0 is allowed: it reports the meta-loss without moving theta
        if not (self.inner_lr > 0 and self.outer_lr >= 0):
            raise ValueError("inner_lr must be positive and outer_lr non-negative")
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"grad_mode must be one of {GRAD_MODES}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


class NumericError(RuntimeError):
    pass


def classification_loss(params: ParamSet, images: np.ndarray, labels: np.ndarray) -> ad.Tensor:
    logits = forward(params, images)
    return ad.softmax_xent(logits, ad.one_hot(labels, logits.shape[1]))


def accuracy(params: ParamSet, images: np.ndarray, labels: np.ndarray) -> float:
    with ad.no_grad():
        logits = forward(params, images).data
    return float(np.mean(logits.argmax(axis=1) == labels))


def _task_losses(task):
    """(train_loss, valid_loss) callables for an episode or any object providing them."""
    if hasattr(task, "train_loss") and hasattr(task, "valid_loss"):
        return task.train_loss, task.valid_loss
    return (
        lambda p: classification_loss(p, task.train_x, task.train_y),
        lambda p: classification_loss(p, task.valid_x, task.valid_y),
    )


def inner_adapt(
    theta: ParamSet,
    train,
    alpha: float,
    n_updates: int,
    track_graph: bool,
) -> ParamSet:
    """``n_updates`` full-batch SGD steps on the task's training loss.

    ``train`` is either an :class:`EpisodeTask` (its train split is used) or a
    callable mapping a ParamSet to a scalar loss.  With ``track_graph`` the
    result stays differentiable with respect to ``theta``; otherwise each step
    starts from detached leaves.
    """
    loss_fn = train if callable(train) else _task_losses(train)[0]
    current = theta
    for step in range(n_updates):
        if not track_graph:
            current = current.leaves()
        loss = loss_fn(current)
        if not math.isfinite(loss.item()):
            raise NumericError(f"non-finite inner loss at inner step {step}")
        grads = ad.grad(loss, current, create_graph=track_graph)
        with ad.set_grad_enabled(track_graph):
            current = current.replace([ad.sub(current[n], ad.scale(grads[n], alpha)) for n in current])
    if not track_graph and n_updates:
        current = current.leaves()
    return current


def _task_meta_grad(theta_leaves: ParamSet, task, cfg: MetaConfig):
    train_loss, valid_loss = _task_losses(task)
    second = cfg.grad_mode == "second_order"
    adapted = inner_adapt(theta_leaves, train_loss, cfg.inner_lr, cfg.inner_updates, track_graph=second)
    vloss = valid_loss(adapted)
    wrt = theta_leaves if second else adapted
    g = ad.grad(vloss, wrt)
    return vloss.item(), [g[n].data for n in theta_leaves]


def meta_gradient(theta: ParamSet, tasks: Sequence, cfg: MetaConfig, workers: int = 1):
    """Summed validation loss over ``tasks`` and its gradient w.r.t. ``theta``.

    Per-task work may run on threads; reduction is always in task order.
    """
    leaves = theta.leaves()
    if workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda t: _task_meta_grad(leaves, t, cfg), tasks))
    else:
        results = [_task_meta_grad(leaves, t, cfg) for t in tasks]
    total = 0.0
    grads = [np.zeros(t.shape) for t in theta.tensors()]
    for loss, g in results:
        total += loss
        for acc, gi in zip(grads, g):
            acc += gi
    return total, grads


def meta_step(theta: ParamSet, tasks: Sequence, cfg: MetaConfig, workers: int = 1):
    """One outer SGD update on the summed post-adaptation validation loss.

    Returns the updated ParamSet and the summed meta-loss (before the update).
    """
    if len(tasks) != cfg.meta_batch:
        raise ValueError(f"meta_step got {len(tasks)} tasks, expected meta_batch={cfg.meta_batch}")
    total, grads = meta_gradient(theta, tasks, cfg, workers)
    if not math.isfinite(total):
        raise NumericError("non-finite meta-loss")
    new = [
        ad.Tensor(t.data - cfg.outer_lr * g, requires_grad=True, name=n)
        for (n, t), g in zip(theta.items(), grads)
    ]
    return theta.replace(new), total


def make_task(cfg: MetaConfig, source, iteration: int, index: int):
    rng = episode_stream(cfg.seed, iteration, index, cfg.meta_batch)
    if cfg.mode == "umtra":
        return build_umtra_task(source, cfg.n_way, cfg.aug, rng)
    return build_supervised_task(source, cfg.n_way, cfg.k_shot_target, rng)


@dataclass
class EvalReport:
    accuracies: np.ndarray
    mean: float
    ci: float
    curve_mean: np.ndarray | None = None
    curve_ci: np.ndarray | None = None
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {"mean": self.mean, "ci": self.ci, "n_tasks": int(len(self.accuracies)), "wall_time": self.wall_time}


def ci95(values: np.ndarray) -> float:
    """1.96 standard errors (over the first axis)."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return 0.0 if values.ndim == 1 else np.zeros(values.shape[1:])
    return 1.96 * values.std(axis=0, ddof=1) / math.sqrt(len(values))


def target_train(theta: ParamSet, task: TargetTask, steps: int, lr: float):
    """Plain SGD on the target train split; query accuracy after every step."""
    params = theta.leaves()
    curve = [accuracy(params, task.query_x, task.query_y)]
    for _ in range(steps):
        params = inner_adapt(params, lambda p: classification_loss(p, task.train_x, task.train_y), lr, 1, False)
        curve.append(accuracy(params, task.query_x, task.query_y))
    return params, curve


def _final_accuracy(theta: ParamSet, task: TargetTask, steps: int, lr: float) -> float:
    params = inner_adapt(
        theta.leaves(), lambda p: classification_loss(p, task.train_x, task.train_y), lr, steps, False
    )
    return accuracy(params, task.query_x, task.query_y)


class TargetSampler:
    """Deterministic target-task source: task ``i`` is a pure function of (seed, i)."""

    def __init__(self, dataset: LabeledDataset, n_way: int, k_shot: int, seed: int, domain: int = EVAL):
        self.dataset = dataset
        self.n_way = n_way
        self.k_shot = k_shot
        self.seed = seed
        self.domain = domain

    def __call__(self, i: int) -> TargetTask:
        return sample_target_task(self.dataset, self.n_way, self.k_shot, stream(self.seed, i, self.domain))


def _eval_one(args):
    theta, sampler, i, steps, lr, curve = args
    task = sampler(i)
    if curve:
        return target_train(theta, task, steps, lr)[1]
    return _final_accuracy(theta, task, steps, lr)


def evaluate(
    theta: ParamSet,
    task_sampler,
    n_tasks: int,
    adapt_steps: int,
    lr: float,
    curve: bool = False,
    workers: int = 1,
) -> EvalReport:
    """Target-train a copy of ``theta`` on ``n_tasks`` sampled tasks.

    ``task_sampler`` is a callable ``i -> TargetTask`` or a sequence of tasks.
    Work is spread over ``workers`` processes; results are gathered in task
    order, so the report does not depend on the worker count.
    """
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    if not callable(task_sampler):
        tasks = list(task_sampler)
        if len(tasks) < n_tasks:
            raise ValueError(f"task sampler exhausted: {len(tasks)} tasks for n_tasks={n_tasks}")
        task_sampler = _ListSampler(tasks)
    start = time.perf_counter()
    jobs = [(theta, task_sampler, i, adapt_steps, lr, curve) for i in range(n_tasks)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_eval_one, jobs, chunksize=max(1, n_tasks // (4 * workers))))
    else:
        results = [_eval_one(j) for j in jobs]
    wall = time.perf_counter() - start
    if curve:
        curves = np.array(results, dtype=np.float64)
        accs = curves[:, -1]
        return EvalReport(accs, float(accs.mean()), float(ci95(accs)), curves.mean(axis=0), ci95(curves), wall)
    accs = np.array(results, dtype=np.float64)
    return EvalReport(accs, float(accs.mean()), float(ci95(accs)), wall_time=wall)


class _ListSampler:
    def __init__(self, tasks):
        self.tasks = tasks

    def __call__(self, i):
        return self.tasks[i]


@dataclass
class SnapshotProtocol:
    dataset: LabeledDataset
    every: int = 200
    n_tasks: int = 100
    adapt_steps: int = 10
    lr: float = 0.05
    k_shot: int = 1


def meta_train(
    cfg: MetaConfig,
    source,
    spec: ModelSpec,
    snapshot: SnapshotProtocol | None = None,
    on_row: Callable[[dict], None] | None = None,
    on_checkpoint: Callable[[int, ParamSet], None] | None = None,
    checkpoint_every: int = 0,
    workers: int = 1,
):
    """Run ``cfg.meta_iterations`` meta-steps from a seeded initialization.

    ``source`` must be an :class:`UnlabeledDataset` in umtra mode and a
    :class:`LabeledDataset` in supervised mode (a labeled dataset passed in
    umtra mode is stripped first).  Returns the final ParamSet and the log rows.
    """
    theta = init_params(spec, cfg.seed)
    rows: list[dict] = []
    if cfg.mode == "scratch" or cfg.meta_iterations == 0:
        return theta, rows
    if cfg.mode == "umtra" and isinstance(source, LabeledDataset):
        source = strip_labels(source)
    if cfg.mode == "supervised" and not isinstance(source, LabeledDataset):
        raise ValueError("supervised meta-training needs a labeled dataset")
    sampler = None
    if snapshot is not None:
        sampler = TargetSampler(snapshot.dataset, cfg.n_way, snapshot.k_shot, cfg.seed, SNAPSHOT)
    for it in range(cfg.meta_iterations):
        t0 = time.perf_counter()
        try:
            tasks = [make_task(cfg, source, it, i) for i in range(cfg.meta_batch)]
            theta, loss = meta_step(theta, tasks, cfg, workers)
        except (ValueError, NumericError) as exc:
            raise type(exc)(f"meta-iteration {it}: {exc}") from exc
        row = {"iter": it, "meta_loss": loss, "eval_acc": None, "eval_ci": None}
        if sampler is not None and ((it + 1) % snapshot.every == 0 or it + 1 == cfg.meta_iterations):
            rep = evaluate(theta, sampler, snapshot.n_tasks, snapshot.adapt_steps, snapshot.lr)
            row["eval_acc"], row["eval_ci"] = rep.mean, rep.ci
            log.info("iter %d meta_loss %.4f eval %.4f +- %.4f", it, loss, rep.mean, rep.ci)
        row["wall_ms"] = (time.perf_counter() - t0) * 1000.0
        rows.append(row)
        if on_row is not None:
            on_row(row)
        if on_checkpoint is not None and checkpoint_every and (it + 1) % checkpoint_every == 0:
            on_checkpoint(it + 1, theta)
    return theta, rows
