import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import TINY_INPUT, tiny_params
from fanet.model import AblationConfig
from fanet.tensor import SgdConfig
from fanet.train import (
    DESK_SCHEDULE,
    PAPER_SCHEDULE,
    ScheduleConfig,
    TrainingDiverged,
    lr_at_epoch,
    pk_sampler,
    train_loop,
)


def test_lr_anchors():
    s = PAPER_SCHEDULE
    assert lr_at_epoch(10, s) == 0.6
    assert lr_at_epoch(40, s) == 0.06
    assert lr_at_epoch(80, s) == 0.006
    assert lr_at_epoch(0, s) == 0.06
    assert lr_at_epoch(5, s) == pytest.approx(0.33, abs=1e-12)
    assert lr_at_epoch(39, s) == 0.6 and lr_at_epoch(79, s) == 0.06 and lr_at_epoch(99, s) == 0.006


def test_lr_piecewise_shape():
    s = PAPER_SCHEDULE
    lrs = [lr_at_epoch(e, s) for e in range(s.total_epochs)]
    warm = np.diff(lrs[: s.warmup_epochs + 1])
    np.testing.assert_allclose(warm, warm[0])
    assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))
    assert [lr_at_epoch(e, DESK_SCHEDULE) for e in (4, 16, 32)] == [0.6, 0.06, 0.006]


def test_schedule_validation():
    with pytest.raises(ValueError):
        ScheduleConfig(lr_start=0.6, lr_peak=0.06)
    with pytest.raises(ValueError):
        ScheduleConfig(decay=((80, 0.006), (40, 0.06)))


def _labels(n_persons, per_person, n_cams):
    pids = np.repeat(np.arange(n_persons), per_person)
    cams = np.tile(np.arange(per_person) % n_cams, n_persons)
    return pids, cams


def test_pk_batch_size():
    pids, cams = _labels(20, 12, 6)
    batches = pk_sampler(pids, cams, 16, 8, seed=0)
    assert batches and all(len(b) == 128 for b in batches)


def test_pk_singletons():
    pids, cams = _labels(3, 2, 2)
    batches = pk_sampler(pids, cams, 1, 1, seed=0)
    assert all(len(b) == 1 for b in batches)
    assert sorted(i for b in batches for i in b) == list(range(6))


def test_pk_small_person_with_replacement():
    pids = np.array([0, 0, 0] + [1] * 8)
    cams = np.array([0, 1, 2] + [0, 1] * 4)
    batch = pk_sampler(pids, cams, 2, 8, seed=3)[0]
    small = [i for i in batch if pids[i] == 0]
    assert len(small) == 8 and set(small) == {0, 1, 2}


def test_pk_camera_round_robin():
    pids, cams = _labels(4, 8, 4)
    for b in pk_sampler(pids, cams, 4, 4, seed=1):
        for p in range(4):
            assert len({cams[i] for i in b if pids[i] == p}) == 4


def test_pk_deterministic_and_seed_sensitive():
    pids, cams = _labels(8, 6, 3)
    assert pk_sampler(pids, cams, 4, 3, 5) == pk_sampler(pids, cams, 4, 3, 5)
    assert pk_sampler(pids, cams, 4, 3, 5) != pk_sampler(pids, cams, 4, 3, 6)


def test_pk_too_many_persons():
    pids, cams = _labels(3, 4, 2)
    with pytest.raises(ValueError, match="exceeds"):
        pk_sampler(pids, cams, 4, 2, 0)


@settings(max_examples=50, deadline=None)
@given(
    n_persons=st.integers(1, 10),
    per_person=st.integers(1, 9),
    n_cams=st.integers(1, 4),
    P=st.integers(1, 10),
    K=st.integers(1, 6),
    seed=st.integers(0, 2**32),
)
def test_pk_exactly_p_distinct_persons(n_persons, per_person, n_cams, P, K, seed):
    pids, cams = _labels(n_persons, per_person, n_cams)
    if P > n_persons:
        return
    for b in pk_sampler(pids, cams, P, K, seed):
        assert len(b) == P * K
        assert len(set(pids[b])) == P


def _tiny_run(config=None, iterations=10, seed=0, n_persons=4, schedule=None, images=None, pids=None, cams=None, out_dir=None):
    r = np.random.default_rng(42)
    if images is None:
        pids, cams = _labels(n_persons, 4, 2)
        images = r.uniform(size=(len(pids),) + TINY_INPUT).astype(np.float32)
    params = tiny_params(config, seed=seed, n_persons=max(n_persons, int(pids.max()) + 1), n_cameras=2)
    schedule = schedule or ScheduleConfig(warmup_epochs=1, decay=(), total_epochs=100, P=2, K=4)
    return train_loop(images, pids, cams, params, schedule, seed=seed, max_iterations=iterations, out_dir=out_dir)


def test_deterministic_trace():
    a = _tiny_run(iterations=10).trace
    b = _tiny_run(iterations=10).trace
    assert len(a) == 10
    assert np.abs(np.array(a) - np.array(b)).max() <= 1e-6


def test_tal_none_reports_zero():
    cfg = AblationConfig(tal_variant="none", k=4, embed_dim=8)
    trace = np.array(_tiny_run(cfg, iterations=6).trace)
    np.testing.assert_array_equal(trace[:, 3], 0.0)


def test_overfit_single_person():
    r = np.random.default_rng(0)
    images = r.uniform(size=(4,) + TINY_INPUT).astype(np.float32)
    pids, cams = np.zeros(4, np.int64), np.array([0, 1, 0, 1])
    schedule = ScheduleConfig(warmup_epochs=0, lr_start=0.06, lr_peak=0.6, decay=(), total_epochs=200, P=1, K=4)
    trace = _tiny_run(iterations=200, images=images, pids=pids, cams=cams, n_persons=4, schedule=schedule).trace
    assert len(trace) == 200
    assert trace[-1][1] < 0.05
    assert trace[-1][1] < trace[0][1]


def test_outputs_written(tmp_path):
    res = _tiny_run(iterations=3, out_dir=tmp_path)
    lines = (tmp_path / "loss_trace.csv").read_text().splitlines()
    assert lines[0] == "iter,L,Lf,Lb,Lt" and len(lines) == 4
    assert (tmp_path / "checkpoint.fant").exists()
    assert res.trace[0][0] == pytest.approx(0.5 * (res.trace[0][1] + res.trace[0][2]) + res.trace[0][3], rel=1e-6)


def test_divergence_is_reported():
    r = np.random.default_rng(1)
    pids, cams = _labels(2, 4, 2)
    images = r.uniform(size=(8,) + TINY_INPUT).astype(np.float32)
    images[0, 0, 0, 0] = np.nan
    params = tiny_params(n_persons=2, n_cameras=2)
    schedule = ScheduleConfig(warmup_epochs=0, decay=(), total_epochs=1, P=2, K=4)
    with pytest.raises(TrainingDiverged) as e:
        train_loop(images, pids, cams, params, schedule)
    assert e.value.iteration == 0 and set(e.value.components) == {"L", "Lf", "Lb", "Lt"}
