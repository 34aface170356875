"""Train-then-evaluate runs over a generated benchmark."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .evaluate import (
    EvalReport,
    camera_prediction_accuracy,
    centered_box_mask,
    evaluate_reid,
    extract_descriptors,
    mask_iou,
    predict_attention,
    upsample_nearest,
)
from .model import DESK_BACKBONE, AblationConfig, BackboneConfig, ModelParams, init_params
from .synth import Dataset
from .tensor import SgdConfig
from .train import DESK_SCHEDULE, ScheduleConfig, TrainResult, train_loop

logger = logging.getLogger(__name__)


@dataclass
class RunResult:
    params: ModelParams
    train: TrainResult
    report: EvalReport
    box_iou: float | None = None
    zf_inside: float | None = None
    zf_outside: float | None = None
    bg_reads_at_inference: int = 0


def person_labels(pids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map arbitrary person ids to contiguous classifier labels."""
    uniq, labels = np.unique(pids, return_inverse=True)
    return labels.astype(np.int64), uniq


def build_params(ds: Dataset, ablation: AblationConfig, backbone: BackboneConfig = DESK_BACKBONE, seed: int = 0) -> ModelParams:
    train = ds.indices("train")
    n_persons = len(np.unique(ds.person_ids[train]))
    return init_params(n_persons, ds.n_cameras, ablation, backbone, seed)


def evaluate_model(ds: Dataset, params: ModelParams) -> tuple[EvalReport, dict]:
    """Re-ID metrics on query/gallery, camera accuracy on train, mask IoU on test."""
    q, g = ds.indices("query"), ds.indices("gallery")
    params.reads.clear()
    qf = extract_descriptors(ds.images[q], params)
    gf = extract_descriptors(ds.images[g], params)
    bg_reads = params.reads["bg_branch"] + params.reads["bg_heads"]
    report = evaluate_reid(qf, ds.person_ids[q], ds.camera_ids[q], gf, ds.person_ids[g], ds.camera_ids[g])
    extra: dict = {"bg_reads_at_inference": bg_reads}
    if params.config.enable_background_branch:
        train = ds.indices("train")
        report.camera_accuracy = camera_prediction_accuracy(ds.images[train], ds.camera_ids[train], params)
    if params.config.enable_tem:
        test = np.concatenate([q, g])
        zf = predict_attention(ds.images[test], params)
        masks = ds.masks[test]
        report.mean_mask_iou = float(np.mean([mask_iou(z, m) for z, m in zip(zf, masks)]))
        box = centered_box_mask(*masks.shape[-2:])
        extra["box_iou"] = float(np.mean([mask_iou(box, m) for m in masks]))
        up = upsample_nearest(zf, *masks.shape[-2:])
        inside = masks > 0.5
        extra["zf_inside"] = float(up[inside].mean())
        extra["zf_outside"] = float(up[~inside].mean())
    return report, extra


def write_eval(out_dir: str | os.PathLike, report: EvalReport, extra: dict) -> None:
    """eval.tsv (metric<TAB>value) and eval.txt, including the mask diagnostics."""
    tsv = report.to_tsv() + "".join(f"{k}\t{v}\n" for k, v in extra.items() if v is not None)
    text = report.to_text() + "".join(f"{k} {v}\n" for k, v in extra.items() if v is not None)
    Path(out_dir, "eval.tsv").write_text(tsv)
    Path(out_dir, "eval.txt").write_text(text)


def run_experiment(
    ds: Dataset,
    ablation: AblationConfig,
    schedule: ScheduleConfig = DESK_SCHEDULE,
    backbone: BackboneConfig = DESK_BACKBONE,
    seed: int = 0,
    sgd: SgdConfig | None = None,
    out_dir: str | os.PathLike | None = None,
    eval_every: int = 0,
    max_iterations: int | None = None,
) -> RunResult:
    """Train one configuration and evaluate it; ``eval_every`` > 0 also logs interim metrics."""
    train = ds.indices("train")
    labels, _ = person_labels(ds.person_ids[train])
    params = build_params(ds, ablation, backbone, seed)

    def on_epoch(epoch: int, p: ModelParams) -> None:
        if eval_every > 0 and (epoch + 1) % eval_every == 0 and epoch + 1 < schedule.total_epochs:
            rep, _ = evaluate_model(ds, p)
            logger.info("epoch %d eval: %s", epoch, rep.metrics())

    tr = train_loop(
        ds.images[train], labels, ds.camera_ids[train], params, schedule,
        sgd=sgd, seed=seed, out_dir=out_dir, max_iterations=max_iterations, on_epoch=on_epoch,
    )
    report, extra = evaluate_model(ds, params)
    if out_dir is not None:
        write_eval(out_dir, report, extra)
    logger.info("run finished in %.0fs: %s", tr.seconds, report.metrics())
    return RunResult(params, tr, report, extra.get("box_iou"), extra.get("zf_inside"), extra.get("zf_outside"), extra["bg_reads_at_inference"])
