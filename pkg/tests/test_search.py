import numpy as np
import pytest

import hwnas.latency as L
import hwnas.tensor as T
from hwnas import nn
from hwnas import synthdata as S
from hwnas.cells import ArchParams
from hwnas.qc import QcSupernet
from hwnas.search import (SearchConfig, SplitPlan, augment, load_history,
                          save_history, search, select_best, total_loss)
from hwnas.seg import SegSupernet, dice
from hwnas.tensor import Tensor


def test_total_loss_paper_constants_exact():
    cfg = SearchConfig(lambda1=1.0, lambda2=0.001)
    assert total_loss(0.5, 0.1, 49.0, cfg).item() == 0.649


def test_total_loss_zero_inputs():
    cfg = SearchConfig()
    assert total_loss(0.0, 0.0, 0.0, cfg).item() == 0.0


def test_total_loss_lambda2_zero_has_no_latency_grad_path():
    rng = np.random.default_rng(0)
    lut_vec = np.array([5.0, 9.0, 13.0])

    def alpha_grad(lambda2):
        alpha = Tensor(np.array([0.1, -0.2, 0.3]), requires_grad=True)
        lat = L.edge_latency(alpha, lut_vec, tau=1.0,
                             rng=np.random.default_rng(7))
        ce = T.tsum(T.softmax(alpha, 0) ** 2)  # stand-in ce depending on alpha
        loss = total_loss(ce, Tensor(0.0), lat,
                          SearchConfig(lambda2=lambda2))
        loss.backward()
        return alpha.grad.copy()

    with_term = alpha_grad(0.001)
    without = alpha_grad(0.0)
    ce_only = alpha_grad(0.0)
    assert np.array_equal(without, ce_only)  # bit-identical
    assert not np.array_equal(with_term, without)


def test_config_validation():
    with pytest.raises(ValueError, match="warmup"):
        SearchConfig(epochs=10, warmup_epochs=20).validate()
    with pytest.raises(ValueError, match="lambda2"):
        SearchConfig(lambda2=-1.0).validate()


def test_config_file_round_trip(tmp_path):
    cfg = SearchConfig(epochs=24, warmup_epochs=12, lambda2=0.0,
                       seeds=(3, 4), tau_anneal=True, dtype="float64")
    p = tmp_path / "cfg.txt"
    cfg.to_file(p)
    assert SearchConfig.from_file(p) == cfg


def test_split_plan_from_manifest_hygiene():
    ds = S.generate(seed=4, patients=10, frames_per_patient=2, h=16, w=16)
    plan = SplitPlan.from_manifest(ds.manifest)
    assert not set(plan.seg_train) & set(plan.seg_eval)
    assert not set(plan.train) & set(plan.test)
    assert sorted(plan.train + plan.test) == list(range(10))
    with pytest.raises(ValueError, match="overlap"):
        SplitPlan(seg_train=[0, 1], seg_eval=[1, 2], test=[3]).validate()


def test_augment_disabled_is_identity():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(3, 16, 16))
    mask = (rng.uniform(size=(16, 16)) > 0.5).astype(np.uint8)
    out_img, out_mask = augment(img, mask, False, False, False,
                                np.random.default_rng(1))
    np.testing.assert_array_equal(out_img, img)
    np.testing.assert_array_equal(out_mask, mask)


def test_augment_keeps_mask_binary_and_is_shared():
    ds = S.generate(seed=4, patients=2, frames_per_patient=2, h=32, w=32)
    s = ds.all_frames()[0]
    for trial in range(10):
        i1, m1 = augment(s.image, s.mask, True, True, True,
                         np.random.default_rng(trial))
        i2, m2 = augment(s.image, s.mask, True, True, True,
                         np.random.default_rng(trial))
        assert set(np.unique(m1)) <= {0, 1}
        # same rng seed -> same transform -> identical pair (Dice 1)
        assert dice(m1, m2) == 1.0
        np.testing.assert_array_equal(i1, i2)
        assert m1.shape == s.mask.shape and i1.shape == s.image.shape


def test_history_round_trip(tmp_path):
    from hwnas.search import EpochStats
    hist = [EpochStats(1, "warmup", 0.7, 0.01, 5.25, 0.715, 1.52),
            EpochStats(2, "search", 0.6, 0.02, 5.1, 0.625, 1.50)]
    p = tmp_path / "history.csv"
    save_history(hist, p)
    assert load_history(p) == hist


@pytest.fixture(scope="module")
def tiny_world():
    cfg = SearchConfig(epochs=2, warmup_epochs=1, depth=2, qc_pairs=2,
                       height=16, width=16, batch_size=8, retrain_epochs=2,
                       seeds=(0, 1))
    ds = S.generate(seed=1, patients=10, frames_per_patient=4, h=16, w=16)
    seg = SegSupernet(depth=2, filters=4, rng=np.random.default_rng(0),
                      dtype=np.float32)
    qc = QcSupernet(pairs=2, rng=np.random.default_rng(1), dtype=np.float32)
    lut = L.profile_supernets(seg, qc, n=1, h=16, w=16, samples=20, warmup=3)
    return cfg, ds, lut


def test_alpha_frozen_during_warmup(tiny_world):
    cfg, ds, lut = tiny_world
    import dataclasses
    warm_cfg = dataclasses.replace(cfg, epochs=1, warmup_epochs=1)
    res = search(warm_cfg, SplitPlan.from_manifest(ds.manifest), ds, lut, seed=0)
    for a in res.alphas.tensors():
        assert np.all(a.data == 0.0)


def test_search_updates_alpha_after_warmup(tiny_world):
    cfg, ds, lut = tiny_world
    res = search(cfg, SplitPlan.from_manifest(ds.manifest), ds, lut, seed=0)
    moved = max(np.abs(a.data).max() for a in res.alphas.tensors())
    assert moved > 0
    assert [h.phase for h in res.history] == ["warmup", "search"]


def test_search_bit_identical_across_runs(tiny_world):
    cfg, ds, lut = tiny_world
    plan = SplitPlan.from_manifest(ds.manifest)
    r1 = search(cfg, plan, ds, lut, seed=0)
    r2 = search(cfg, plan, ds, lut, seed=0)
    assert [dataclass_bits(h) for h in r1.history] == \
        [dataclass_bits(h) for h in r2.history]
    for a1, a2 in zip(r1.alphas.tensors(), r2.alphas.tensors()):
        np.testing.assert_array_equal(a1.data, a2.data)


def dataclass_bits(h):
    return (h.epoch, h.phase, h.ce.hex() if isinstance(h.ce, float) else h.ce,
            h.mse.hex(), h.lat_ms.hex(), h.loss.hex(), h.alpha_entropy.hex())


def test_distinct_seeds_distinct_trajectories(tiny_world):
    cfg, ds, lut = tiny_world
    plan = SplitPlan.from_manifest(ds.manifest)
    r0 = search(cfg, plan, ds, lut, seed=0)
    r1 = search(cfg, plan, ds, lut, seed=1)
    a0 = np.concatenate([a.data.ravel() for a in r0.alphas.tensors()])
    a1 = np.concatenate([a.data.ravel() for a in r1.alphas.tensors()])
    assert not np.array_equal(a0, a1)


def test_freezing_contract_alpha_step_changes_no_weights(tiny_world):
    # one full search epoch must leave weights bit-identical across the alpha
    # steps; verified by instrumenting a manual alpha step
    cfg, ds, lut = tiny_world
    from hwnas.search import _assemble, _freeze
    from hwnas.latency import LatencyPlan
    from hwnas.optim import Adam

    seg = SegSupernet(depth=2, filters=4, rng=np.random.default_rng(5),
                      dtype=np.float32)
    qc = QcSupernet(pairs=2, rng=np.random.default_rng(6), dtype=np.float32)
    alphas = ArchParams(seg.topologies() + qc.topologies(), dtype=np.float32)
    plan = LatencyPlan.from_nets(seg, qc, n=1, h=16, w=16)
    opt_alpha = Adam(alphas.tensors(), lr=3e-3)
    frames = ds.all_frames()[:8]
    images_t, masks = _assemble(frames, cfg, None)

    weights = seg.parameters() + qc.parameters()
    before = [p.data.copy() for p in weights]
    buffers = [arr.copy() for _, arr in list(seg.named_buffers())
               + list(qc.named_buffers())]
    alpha_before = [a.data.copy() for a in alphas.tensors()]

    _freeze(weights, True)
    with nn.mode(training=True, update_stats=False):
        logits, unc, pred_mask = seg.forward(images_t, alphas)
        probs = T.softmax(logits, axis=1)
        qpred = qc.predict(images_t, probs, unc, alphas)
        from hwnas.seg import dice_batch
        loss = T.cross_entropy_2d(logits, masks) + \
            T.mse(qpred, dice_batch(pred_mask, masks).astype(np.float32)) + \
            T.mul_scalar(plan.estimate(alphas, lut, 1.0,
                                       np.random.default_rng(3)), 0.001)
    loss.backward()
    opt_alpha.step()
    _freeze(weights, False)

    for p, b in zip(weights, before):
        assert np.array_equal(p.data, b)  # bit compare
    after_buffers = [arr for _, arr in list(seg.named_buffers())
                     + list(qc.named_buffers())]
    for arr, b in zip(after_buffers, buffers):
        assert np.array_equal(arr, b)
    assert any(not np.array_equal(a.data, b)
               for a, b in zip(alphas.tensors(), alpha_before))


def test_degrades_to_plain_seg_search_and_improves_ce(tiny_world):
    cfg, ds, lut = tiny_world
    import dataclasses
    cfg2 = dataclasses.replace(cfg, lambda1=0.0, lambda2=0.0, epochs=6,
                               warmup_epochs=2)
    res = search(cfg2, SplitPlan.from_manifest(ds.manifest), ds, lut, seed=0)
    ce_warm = res.history[cfg2.warmup_epochs - 1].ce
    ce_final = res.history[-1].ce
    assert ce_final < ce_warm


def test_select_best_reproducible():
    records = [{"objective": 0.4}, {"objective": 0.9}, {"objective": 0.9}]
    assert select_best(records) == 1
    assert select_best(records) == 1
