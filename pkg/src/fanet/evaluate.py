"""Retrieval metrics, camera prediction, mask quality and attention export."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageio import write_pgm
from .model import ModelParams, model_forward
from .nn import horizontal_flip


@dataclass
class EvalReport:
    cmc: np.ndarray
    mAP: float
    per_query_ap: list[float] = field(default_factory=list)
    n_valid_queries: int = 0
    n_excluded_queries: int = 0
    camera_accuracy: float | None = None
    mean_mask_iou: float | None = None

    def rank(self, r: int) -> float:
        if len(self.cmc) == 0:
            return 0.0
        return float(self.cmc[min(r, len(self.cmc)) - 1])

    def metrics(self) -> dict[str, float]:
        m = {f"rank{r}": self.rank(r) for r in (1, 5, 10)}
        m["mAP"] = self.mAP
        m["valid_queries"] = self.n_valid_queries
        m["excluded_queries"] = self.n_excluded_queries
        if self.camera_accuracy is not None:
            m["camera_accuracy"] = self.camera_accuracy
        if self.mean_mask_iou is not None:
            m["mean_mask_iou"] = self.mean_mask_iou
        return m

    def to_tsv(self) -> str:
        return "metric\tvalue\n" + "".join(f"{k}\t{v}\n" for k, v in self.metrics().items())

    def to_text(self) -> str:
        lines = [
            f"Rank-1  {100 * self.rank(1):6.2f}%",
            f"Rank-5  {100 * self.rank(5):6.2f}%",
            f"Rank-10 {100 * self.rank(10):6.2f}%",
            f"mAP     {100 * self.mAP:6.2f}%",
            f"queries {self.n_valid_queries} evaluated, {self.n_excluded_queries} without cross-camera match",
        ]
        if self.camera_accuracy is not None:
            lines.append(f"camera accuracy {100 * self.camera_accuracy:6.2f}%")
        if self.mean_mask_iou is not None:
            lines.append(f"mean mask IoU   {self.mean_mask_iou:.4f}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- ranking metrics


def average_precision(relevance) -> float:
    """Non-interpolated AP of a ranked 0/1 relevance list (0 if nothing is relevant)."""
    hits = 0
    total = 0.0
    for i, r in enumerate(relevance, start=1):
        if r:
            hits += 1
            total += hits / i
    return total / hits if hits else 0.0


def cmc_from_relevance(relevance, length: int | None = None) -> np.ndarray:
    rel = np.asarray(relevance, dtype=bool)
    length = len(rel) if length is None else length
    curve = np.zeros(length)
    hit = np.flatnonzero(rel)
    if hit.size and hit[0] < length:
        curve[hit[0] :] = 1.0
    return curve


def cosine_distance(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    gn = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
    return 1.0 - qn @ gn.T


def evaluate_reid(q_feats, q_pids, q_cams, g_feats, g_pids, g_cams) -> EvalReport:
    """Single-query CMC and mAP under cosine distance.

    Gallery entries sharing both person and camera with the query are dropped
    before ranking; queries left with no positive are excluded and counted.
    """
    q_pids, q_cams = np.asarray(q_pids), np.asarray(q_cams)
    g_pids, g_cams = np.asarray(g_pids), np.asarray(g_cams)
    dist = cosine_distance(q_feats, g_feats)
    n_gallery = len(g_pids)
    cmc = np.zeros(n_gallery)
    aps: list[float] = []
    excluded = 0
    for i in range(len(q_pids)):
        order = np.argsort(dist[i], kind="stable")
        same_pid = g_pids[order] == q_pids[i]
        junk = same_pid & (g_cams[order] == q_cams[i])
        rel = same_pid[~junk]
        if not rel.any():
            excluded += 1
            continue
        cmc += cmc_from_relevance(rel, n_gallery)
        aps.append(average_precision(rel))
    n = len(aps)
    if n:
        cmc /= n
    return EvalReport(cmc=cmc, mAP=float(np.mean(aps)) if n else 0.0, per_query_ap=aps, n_valid_queries=n, n_excluded_queries=excluded)


# ---------------------------------------------------------------- model-driven evaluation


def _batches(n: int, size: int):
    for s in range(0, n, size):
        yield slice(s, min(s + size, n))


def extract_descriptors(images: np.ndarray, params: ModelParams, batch_size: int = 64) -> np.ndarray:
    """Flip-averaged foreground descriptors, eval mode, background branch never run."""
    out = []
    for sl in _batches(len(images), batch_size):
        x = np.asarray(images[sl])
        d = model_forward(x, params, training=False, foreground_only=True).descriptor.data
        df = model_forward(horizontal_flip(x), params, training=False, foreground_only=True).descriptor.data
        out.append((d + df) / 2)
    return np.concatenate(out) if out else np.zeros((0, 0), np.float32)


def extract_descriptor(image: np.ndarray, params: ModelParams) -> np.ndarray:
    return extract_descriptors(np.asarray(image)[None], params)[0]


def average_camera_logits(stripe_logits: list[np.ndarray]) -> np.ndarray:
    return np.mean(np.stack(stripe_logits), axis=0)


def predict_camera(avg_logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest camera index on ties
    return np.argmax(avg_logits, axis=-1)


def camera_prediction_accuracy(images: np.ndarray, camera_ids, params: ModelParams, batch_size: int = 64) -> float:
    if not params.config.enable_background_branch:
        raise ValueError("camera prediction needs the background branch")
    camera_ids = np.asarray(camera_ids)
    correct = 0
    for sl in _batches(len(images), batch_size):
        out = model_forward(images[sl], params, training=False)
        pred = predict_camera(average_camera_logits([z.data for z in out.bg_logits]))
        correct += int(np.sum(pred == camera_ids[sl]))
    return correct / len(images) if len(images) else 1.0


def predict_attention(images: np.ndarray, params: ModelParams, batch_size: int = 64) -> np.ndarray:
    """Zf for every image, [N,1,h,w]."""
    if not params.config.enable_tem:
        raise ValueError("model has no attention module")
    maps = [model_forward(images[sl], params, training=False, foreground_only=True).Zf.data for sl in _batches(len(images), batch_size)]
    return np.concatenate(maps)


def upsample_nearest(m: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = m.shape[-2:]
    rows = (np.arange(height) * h) // height
    cols = (np.arange(width) * w) // width
    return m[..., rows[:, None], cols[None, :]]


def mask_iou(zf: np.ndarray, gt_mask: np.ndarray, threshold: float = 0.5) -> float:
    gt = np.asarray(gt_mask) > 0.5
    pred = upsample_nearest(np.asarray(zf), *gt.shape[-2:]) > threshold
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def centered_box_mask(height: int, width: int, fraction: float = 0.4) -> np.ndarray:
    """Centered box with the frame's aspect ratio covering ``fraction`` of its area."""
    s = np.sqrt(fraction)
    bh, bw = int(round(height * s)), int(round(width * s))
    m = np.zeros((1, height, width), dtype=np.float32)
    top, left = (height - bh) // 2, (width - bw) // 2
    m[:, top : top + bh, left : left + bw] = 1.0
    return m


def mean_mask_iou(zf: np.ndarray, gt_masks: np.ndarray, threshold: float = 0.5) -> float:
    return float(np.mean([mask_iou(z, g, threshold) for z, g in zip(zf, gt_masks)]))


def export_attention_maps(images: np.ndarray, stems: list[str], params: ModelParams, out_dir: str | os.PathLike) -> list[Path]:
    """Write ``<stem>_zf.pgm`` and ``<stem>_zb.pgm`` at input resolution."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    zf = predict_attention(images, params)
    h, w = images.shape[-2:]
    written = []
    for stem, z in zip(stems, zf):
        up = upsample_nearest(z, h, w)
        for suffix, m in (("zf", up), ("zb", 1.0 - up)):
            p = out / f"{stem}_{suffix}.pgm"
            write_pgm(p, m)
            written.append(p)
    return written
