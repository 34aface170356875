"""Training protocol: PK sampling, warmup/step LR schedule, SGD loop."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import save_checkpoint
from .model import ModelParams, model_forward, overall_loss
from .nn import horizontal_flip
from .synth import derive_seed
from .tensor import Graph, SgdConfig, backward_pass, sgd_step

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScheduleConfig:
    warmup_epochs: int = 10
    lr_start: float = 0.06
    lr_peak: float = 0.6
    decay: tuple[tuple[int, float], ...] = ((40, 0.06), (80, 0.006))
    total_epochs: int = 100
    P: int = 16
    K: int = 8

    def __post_init__(self):
        if not self.lr_start < self.lr_peak:
            raise ValueError("lr_start must be below lr_peak")
        epochs = [e for e, _ in self.decay]
        if epochs != sorted(epochs) or len(set(epochs)) != len(epochs):
            raise ValueError(f"decay epochs must be strictly ascending: {epochs}")
        if self.warmup_epochs < 0 or self.total_epochs < 1 or self.P < 1 or self.K < 1:
            raise ValueError("epochs and batch geometry must be positive")


PAPER_SCHEDULE = ScheduleConfig()
DESK_SCHEDULE = ScheduleConfig(warmup_epochs=4, decay=((16, 0.06), (32, 0.006)), total_epochs=40, P=4, K=4)


def lr_at_epoch(e: int, s: ScheduleConfig) -> float:
    """Linear warmup from lr_start to lr_peak, then the peak stepped down at each decay epoch."""
    if e < s.warmup_epochs:
        return s.lr_start + (s.lr_peak - s.lr_start) * e / s.warmup_epochs
    lr = s.lr_peak
    for epoch, value in s.decay:
        if e >= epoch:
            lr = value
    return lr


def pk_sampler(person_ids, camera_ids, P: int, K: int, seed: int) -> list[list[int]]:
    """One epoch of P-persons-by-K-images batches (indices into the label arrays).

    Each person's images are ordered round-robin over that person's cameras
    and cut into chunks of K; persons with fewer than K images are topped up
    by sampling with replacement. Batches draw P distinct persons that still
    have chunks left, until fewer than P such persons remain.
    """
    person_ids = np.asarray(person_ids)
    camera_ids = np.asarray(camera_ids)
    persons = np.unique(person_ids)
    if P > len(persons):
        raise ValueError(f"P={P} exceeds the {len(persons)} available persons")
    rng = np.random.default_rng(seed)
    chunks: dict[int, list[list[int]]] = {}
    for p in persons:
        idx = np.flatnonzero(person_ids == p)
        cams = np.unique(camera_ids[idx])
        rng.shuffle(cams)
        queues = [list(rng.permutation(idx[camera_ids[idx] == c])) for c in cams]
        order: list[int] = []
        while any(queues):
            for q in queues:
                if q:
                    order.append(int(q.pop(0)))
        if len(order) < K:
            order += [int(i) for i in rng.choice(order, K - len(order), replace=True)]
        chunks[int(p)] = [order[i * K : (i + 1) * K] for i in range(len(order) // K)]

    batches = []
    available = [p for p in chunks if chunks[p]]
    while len(available) >= P:
        chosen = rng.choice(available, P, replace=False)
        batches.append([i for p in chosen for i in chunks[int(p)].pop(0)])
        available = [p for p in available if chunks[p]]
    return batches


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, components: dict[str, float]):
        self.iteration = iteration
        self.components = components
        parts = ", ".join(f"{k}={v}" for k, v in components.items())
        super().__init__(f"non-finite loss at iteration {iteration}: {parts}")


@dataclass
class TrainResult:
    params: ModelParams
    trace: list[tuple[float, float, float, float]] = field(default_factory=list)
    seconds: float = 0.0

    def write_trace(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["iter", "L", "Lf", "Lb", "Lt"])
            for i, row in enumerate(self.trace):
                w.writerow([i, *(repr(v) for v in row)])


def train_loop(
    images: np.ndarray,
    person_labels: np.ndarray,
    camera_ids: np.ndarray,
    params: ModelParams,
    schedule: ScheduleConfig,
    sgd: SgdConfig | None = None,
    seed: int = 0,
    out_dir: str | os.PathLike | None = None,
    flip_prob: float = 0.5,
    max_iterations: int | None = None,
    on_epoch: Callable[[int, ModelParams], None] | None = None,
) -> TrainResult:
    """Optimize ``params`` in place on the given training images.

    ``person_labels`` must be classifier indices in [0, n_persons). A
    checkpoint is written to ``out_dir/checkpoint.fant`` after every epoch.
    """
    sgd = sgd or SgdConfig(base_lr=schedule.lr_start)
    cfg = params.config
    rng = np.random.default_rng(derive_seed(seed, 0xF11F))
    velocity: dict[str, np.ndarray] = {}
    trainable = params.trainable()
    result = TrainResult(params)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    it = 0
    for epoch in range(schedule.total_epochs):
        lr = lr_at_epoch(epoch, schedule)
        first = it
        for batch in pk_sampler(person_labels, camera_ids, schedule.P, schedule.K, derive_seed(seed, epoch)):
            x = images[batch].copy()
            flip = rng.random(len(batch)) < flip_prob
            x[flip] = horizontal_flip(x[flip])
            with Graph() as g:
                outputs = model_forward(x, params, training=True)
                L, Lf, Lb, Lt = overall_loss(outputs, person_labels[batch], camera_ids[batch], cfg)
                values = (L.item(), Lf.item(), Lb.item(), Lt.item())
                if not all(math.isfinite(v) for v in values):
                    raise TrainingDiverged(it, dict(zip(("L", "Lf", "Lb", "Lt"), values)))
                backward_pass(g, L)
            sgd_step(trainable, sgd, lr, velocity)
            params.zero_grad()
            result.trace.append(values)
            it += 1
            if max_iterations is not None and it >= max_iterations:
                break
        logger.info(
            "epoch %d lr %.4g L %.4f Lf %.4f Lb %.4f Lt %.4f (%.0fs)",
            epoch, lr, *np.mean(result.trace[first:] or [(0.0,) * 4], axis=0), time.perf_counter() - start,
        )
        if out is not None:
            save_checkpoint(out / "checkpoint.fant", params)
        if on_epoch is not None:
            on_epoch(epoch, params)
        if max_iterations is not None and it >= max_iterations:
            break
    result.seconds = time.perf_counter() - start
    if out is not None:
        result.write_trace(out / "loss_trace.csv")
    return result
