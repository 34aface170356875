import math

import numpy as np
import pytest

from conftest import TINY_INPUT, tiny_params
from fanet.evaluate import (
    EvalReport,
    average_camera_logits,
    average_precision,
    camera_prediction_accuracy,
    centered_box_mask,
    cmc_from_relevance,
    evaluate_reid,
    export_attention_maps,
    extract_descriptor,
    extract_descriptors,
    mask_iou,
    predict_camera,
    upsample_nearest,
)
from fanet.imageio import read_image
from fanet.model import AblationConfig


# ---------------------------------------------------------------- AP / CMC examples


def test_ap_examples():
    assert average_precision([1, 0, 1, 0]) == pytest.approx((1 + 2 / 3) / 2, abs=1e-12)
    assert average_precision([0, 1]) == 0.5
    assert average_precision([1, 1, 1]) == 1.0
    np.testing.assert_array_equal(cmc_from_relevance([1, 0, 1, 0]), [1, 1, 1, 1])
    np.testing.assert_array_equal(cmc_from_relevance([0, 1]), [0, 1])
    np.testing.assert_array_equal(cmc_from_relevance([1, 1, 1]), [1, 1, 1])


def test_ap_without_positives():
    assert average_precision([0, 0]) == 0.0


# ---------------------------------------------------------------- brute-force oracle


def _oracle(qf, qp, qc, gf, gp, gc):
    """Plain-python re-implementation straight from the definitions."""
    aps, hits, excluded = [], [0] * len(gp), 0
    for i in range(len(qp)):
        def cos_dist(j):
            dot = sum(a * b for a, b in zip(qf[i], gf[j]))
            nq = math.sqrt(sum(a * a for a in qf[i]))
            ng = math.sqrt(sum(b * b for b in gf[j]))
            return 1.0 - dot / (max(nq, 1e-12) * max(ng, 1e-12))

        ranked = sorted(range(len(gp)), key=lambda j: (cos_dist(j), j))
        ranked = [j for j in ranked if not (gp[j] == qp[i] and gc[j] == qc[i])]
        rel = [gp[j] == qp[i] for j in ranked]
        n_pos = sum(rel)
        if n_pos == 0:
            excluded += 1
            continue
        precisions = [sum(rel[: k + 1]) / (k + 1) for k in range(len(rel)) if rel[k]]
        aps.append(sum(precisions) / n_pos)
        first = rel.index(True)
        for r in range(len(gp)):
            hits[r] += int(first <= r)
    n = len(aps)
    cmc = [h / n for h in hits] if n else [0.0] * len(gp)
    return cmc, (sum(aps) / n if n else 0.0), excluded


def test_matches_bruteforce_oracle():
    r = np.random.default_rng(2024)
    for _ in range(200):
        nq, ng, dim = r.integers(1, 6), r.integers(1, 13), r.integers(1, 5)
        qf = r.normal(size=(nq, dim))
        gf = r.normal(size=(ng, dim))
        qp, qc = r.integers(0, 3, nq), r.integers(0, 3, nq)
        gp, gc = r.integers(0, 3, ng), r.integers(0, 3, ng)
        rep = evaluate_reid(qf, qp, qc, gf, gp, gc)
        cmc, mAP, excluded = _oracle(qf.tolist(), qp.tolist(), qc.tolist(), gf.tolist(), gp.tolist(), gc.tolist())
        assert rep.n_excluded_queries == excluded
        assert rep.n_valid_queries + excluded == nq
        np.testing.assert_allclose(rep.cmc, cmc, atol=1e-9)
        assert abs(rep.mAP - mAP) <= 1e-9


def test_exact_ties_keep_gallery_order():
    # duplicated gallery vectors tie exactly; the earlier gallery item ranks first
    g = [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]
    rep = evaluate_reid([[1.0, 0.0]], [0], [0], g, [1, 0, 0], [1, 1, 1])
    assert rep.rank(1) == 0.0 and rep.rank(2) == 1.0
    assert rep.mAP == pytest.approx((1 / 2 + 2 / 3) / 2)


def test_cmc_monotone_and_bounded():
    r = np.random.default_rng(3)
    for _ in range(50):
        rep = evaluate_reid(r.normal(size=(5, 4)), r.integers(0, 3, 5), r.integers(0, 2, 5),
                            r.normal(size=(10, 4)), r.integers(0, 3, 10), r.integers(0, 2, 10))
        assert np.all(np.diff(rep.cmc) >= 0)
        assert np.all((rep.cmc >= 0) & (rep.cmc <= 1)) and 0 <= rep.mAP <= 1


def test_same_camera_positive_is_ignored():
    # the only same-person gallery item shares the camera, so the query has no valid match
    rep = evaluate_reid([[1.0, 0.0]], [0], [0], [[1.0, 0.0], [0.0, 1.0]], [0, 1], [0, 1])
    assert rep.n_excluded_queries == 1 and rep.n_valid_queries == 0


def test_report_serialization():
    rep = evaluate_reid([[1.0, 0.0]], [0], [0], [[1.0, 0.0], [0.0, 1.0]], [0, 1], [1, 1])
    rep.camera_accuracy = 1.0
    tsv = rep.to_tsv().splitlines()
    assert tsv[0] == "metric\tvalue"
    assert "rank1\t1.0" in tsv and "mAP\t1.0" in tsv and "camera_accuracy\t1.0" in tsv
    assert "Rank-1" in rep.to_text()
    assert EvalReport(cmc=np.zeros(0), mAP=0.0).rank(1) == 0.0


# ---------------------------------------------------------------- camera prediction


def test_camera_tie_breaks_to_lowest_index():
    logits = average_camera_logits([np.array([[1.0, 3.0, 3.0]]), np.array([[1.0, 1.0, 1.0]])])
    assert predict_camera(logits)[0] == 1
    assert predict_camera(np.array([[2.0, 2.0]]))[0] == 0


def test_camera_accuracy_requires_background():
    cfg = AblationConfig(enable_background_branch=False, enable_interaction=False, tal_variant="none", k=4, embed_dim=8)
    with pytest.raises(ValueError, match="background"):
        camera_prediction_accuracy(np.zeros((1,) + TINY_INPUT, np.float32), [0], tiny_params(cfg))


def test_single_camera_accuracy_is_one():
    p = tiny_params(n_cameras=1)
    x = np.random.default_rng(0).uniform(size=(3,) + TINY_INPUT).astype(np.float32)
    assert camera_prediction_accuracy(x, [0, 0, 0], p) == 1.0


# ---------------------------------------------------------------- masks


def test_mask_iou_examples():
    gt = np.zeros((1, 4, 4))
    gt[:, :2, :] = 1
    assert mask_iou(gt, gt) == 1.0
    assert mask_iou(1 - gt, gt) == 0.0
    half = np.zeros((1, 4, 4))
    half[:, 1:3, :] = 1
    assert mask_iou(half, gt) == pytest.approx(1 / 3)
    assert mask_iou(np.zeros((1, 4, 4)), np.zeros((1, 4, 4))) == 1.0


def test_mask_iou_upsamples_and_thresholds():
    zf = np.array([[[0.9], [0.2]]])  # 2x1 map -> top half foreground
    gt = np.zeros((1, 8, 4))
    gt[:, :4] = 1
    assert mask_iou(zf, gt) == 1.0
    assert mask_iou(np.full((1, 2, 1), 0.5), gt) == 0.0  # strictly above threshold


def test_upsample_nearest():
    m = np.arange(6).reshape(1, 2, 3)
    up = upsample_nearest(m, 4, 6)
    np.testing.assert_array_equal(up[0, ::2, ::2], m[0])
    assert up.shape == (1, 4, 6)


def test_centered_box_area():
    box = centered_box_mask(128, 48)
    assert box.mean() == pytest.approx(0.4, abs=0.01)
    ys, xs = np.nonzero(box[0])
    assert ys.min() + ys.max() == pytest.approx(127, abs=1) and xs.min() + xs.max() == pytest.approx(47, abs=1)


# ---------------------------------------------------------------- model-driven


def test_export_untrained_zero_head(tmp_path):
    p = tiny_params()
    p.tensors["tem.head.weight"].data[:] = 0
    p.tensors["tem.head.bias"].data[:] = 0
    x = np.random.default_rng(0).uniform(size=(2,) + TINY_INPUT).astype(np.float32)
    files = export_attention_maps(x, ["a", "b"], p, tmp_path)
    assert [f.name for f in files] == ["a_zf.pgm", "a_zb.pgm", "b_zf.pgm", "b_zb.pgm"]
    zf = np.round(read_image(tmp_path / "a_zf.pgm") * 255)
    zb = np.round(read_image(tmp_path / "a_zb.pgm") * 255)
    assert zf.shape == (1,) + TINY_INPUT[1:]
    assert set(np.unique(zf)) | set(np.unique(zb)) <= {127.0, 128.0}


def test_export_maps_are_complementary(tmp_path):
    p = tiny_params(seed=4)
    x = np.random.default_rng(1).uniform(size=(3,) + TINY_INPUT).astype(np.float32)
    export_attention_maps(x, ["s0", "s1", "s2"], p, tmp_path)
    for s in ("s0", "s1", "s2"):
        total = np.round(read_image(tmp_path / f"{s}_zf.pgm") * 255) + np.round(read_image(tmp_path / f"{s}_zb.pgm") * 255)
        assert np.all(np.abs(total - 255) <= 1)


def test_symmetric_image_descriptor():
    p = tiny_params(seed=2)
    half = np.random.default_rng(5).uniform(size=(3, 64, 12)).astype(np.float32)
    x = np.concatenate([half, half[..., ::-1]], axis=-1)
    from fanet.model import model_forward

    direct = model_forward(x[None], p, training=False, foreground_only=True).descriptor.data[0]
    assert np.array_equal(extract_descriptor(x, p), direct)


def test_descriptor_length_and_no_background_reads():
    p = tiny_params()
    p.reads.clear()
    x = np.random.default_rng(0).uniform(size=(5,) + TINY_INPUT).astype(np.float32)
    d = extract_descriptors(x, p, batch_size=2)
    assert d.shape == (5, 15 * 8)
    assert p.reads["bg_branch"] == 0 and p.reads["bg_heads"] == 0
    assert p.reads["fg_branch"] > 0 and p.reads["tem"] > 0


def test_inference_does_not_touch_running_stats():
    p = tiny_params()
    before = {k: t.data.copy() for k, t in p.tensors.items()}
    extract_descriptors(np.random.default_rng(0).uniform(size=(2,) + TINY_INPUT).astype(np.float32), p)
    assert all(np.array_equal(before[k], t.data) for k, t in p.tensors.items())
