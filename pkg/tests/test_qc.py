import numpy as np
import pytest

import hwnas.tensor as T
from hwnas import nn
from hwnas.cells import ArchParams, QcCell, qc_cell_edges
from hwnas.qc import QcSupernet
from hwnas.tensor import Tensor


def test_qc_cell_edge_count():
    for m in (1, 2, 3, 4):
        assert len(qc_cell_edges(m, "Contracting")) == m + m * (m - 1) // 2
    assert len(qc_cell_edges(3, "NonScaling")) == 6


def test_contracting_input_edges_use_down_ops():
    edges = qc_cell_edges(3, "Contracting")
    assert all(e.set_name == "Down" for e in edges if e.src == 0)
    assert all(e.set_name == "Normal" for e in edges if e.src != 0)
    ns_edges = qc_cell_edges(3, "NonScaling")
    assert all(e.set_name == "Normal" for e in ns_edges)


def make_qc_cell(kind, cin, c, seed=0, dtype=np.float64):
    return QcCell(kind, 3, cin, c, rng=np.random.default_rng(seed), dtype=dtype)


def force_all_zero(alpha: ArchParams, kind: str):
    topo = alpha.topologies[kind]
    for e_idx, e in enumerate(topo.edges):
        if "zero" in e.candidates:
            alpha.set_one_hot(kind, e_idx, "zero")
    return all("zero" in e.candidates for e in topo.edges)


def test_nonscaling_all_zero_is_exact_identity():
    cell = make_qc_cell("NonScaling", 8, 8)
    alpha = ArchParams([cell.topology], dtype=np.float64)
    assert force_all_zero(alpha, "NonScaling")
    x = np.random.default_rng(1).normal(size=(2, 8, 8, 8))
    with nn.mode(training=True, update_stats=False):
        out = cell.forward(Tensor(x), alpha.tables["NonScaling"])
    np.testing.assert_array_equal(out.data, x)


def test_contracting_all_normal_zero_reduces_to_projection_plus_down_edges():
    # Down-set edges have no zero candidate; zeroing every Normal edge leaves
    # intermediates = pure functions of the input edge mixtures
    cell = make_qc_cell("Contracting", 8, 16)
    alpha = ArchParams([cell.topology], dtype=np.float64)
    for e_idx, e in enumerate(cell.topology.edges):
        if e.set_name == "Normal":
            alpha.set_one_hot("Contracting", e_idx, "zero")
    x = np.random.default_rng(2).normal(size=(1, 8, 16, 16))
    with nn.mode(training=True, update_stats=False):
        out = cell.forward(Tensor(x), alpha.tables["Contracting"])
        # oracle: sum of the three input-edge mixtures plus the residual
        acc = None
        for e_idx, e in enumerate(cell.topology.edges):
            if e.set_name != "Down":
                continue
            v = cell.prep(Tensor(x))
            w = np.full(len(e.candidates), 1.0 / len(e.candidates))
            contrib = sum(w[k] * cell.edge_ops[e_idx][k](v).data
                          for k in range(len(e.candidates)))
            acc = contrib if acc is None else acc + contrib
        ref = acc + cell.residual(Tensor(x)).data
    np.testing.assert_allclose(out.data, ref, atol=1e-5)


def test_contracting_halves_spatial():
    cell = make_qc_cell("Contracting", 8, 16)
    alpha = ArchParams([cell.topology], dtype=np.float64)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 8, 16, 16)))
    with nn.mode(training=True, update_stats=False):
        out = cell.forward(x, alpha.tables["Contracting"])
    assert out.shape == (2, 16, 8, 8)


def test_uniform_alpha_matches_enumeration_plus_residual():
    cell = make_qc_cell("NonScaling", 8, 8, seed=5)
    alpha = ArchParams([cell.topology], dtype=np.float64)
    x = Tensor(np.random.default_rng(3).normal(size=(2, 8, 8, 8)))
    with nn.mode(training=True, update_stats=False):
        out = cell.forward(x, alpha.tables["NonScaling"])
        v0 = cell.prep(x).data
        values = {0: v0}
        for j in range(1, 4):
            acc = None
            for e_idx, e in enumerate(cell.topology.edges):
                if e.dst != j:
                    continue
                w = 1.0 / len(e.candidates)
                contrib = sum(w * cell.edge_ops[e_idx][k](Tensor(values[e.src])).data
                              for k in range(len(e.candidates)))
                acc = contrib if acc is None else acc + contrib
            values[j] = acc
        ref = values[1] + values[2] + values[3] + x.data
    np.testing.assert_allclose(out.data, ref, atol=1e-5)


def make_supernet(dtype=np.float64, seed=0, pairs=3):
    net = QcSupernet(pairs=pairs, rng=np.random.default_rng(seed), dtype=dtype)
    alpha = ArchParams(net.topologies(), dtype=dtype)
    return net, alpha


def test_alternation_odd_positions_contract():
    net, _ = make_supernet()
    kinds = [c.kind for c in net.cells]
    assert kinds == ["Contracting", "NonScaling"] * 3


def test_predict_range_and_shape():
    net, alpha = make_supernet()
    rng = np.random.default_rng(1)
    img = Tensor(rng.normal(size=(4, 3, 16, 16)))
    mask = Tensor(rng.uniform(0, 1, size=(4, 2, 16, 16)))
    unc = Tensor(rng.uniform(0, 0.7, size=(4, 1, 16, 16)))
    with nn.mode(training=True, update_stats=False):
        out = net.predict(img, mask, unc, alpha)
    assert out.shape == (4,)
    assert np.all((out.data > 0) & (out.data < 1))


def test_predict_batch_permutation_equivariance():
    net, alpha = make_supernet()
    rng = np.random.default_rng(2)
    img = rng.normal(size=(4, 3, 16, 16))
    mask = rng.uniform(0, 1, size=(4, 2, 16, 16))
    unc = rng.uniform(0, 0.7, size=(4, 1, 16, 16))
    perm = np.array([2, 0, 3, 1])
    with nn.mode(training=False):
        a = net.predict(Tensor(img), Tensor(mask), Tensor(unc), alpha).data
        b = net.predict(Tensor(img[perm]), Tensor(mask[perm]), Tensor(unc[perm]),
                        alpha).data
    np.testing.assert_allclose(a[perm], b, atol=1e-12)


def test_predict_spatial_mismatch_raises():
    net, alpha = make_supernet()
    with pytest.raises(ValueError, match="spatial"):
        net.predict(Tensor(np.zeros((1, 3, 16, 16))),
                    Tensor(np.zeros((1, 2, 8, 8))),
                    Tensor(np.zeros((1, 1, 16, 16))), alpha)


def test_gradients_reach_seg_net_unless_frozen():
    from hwnas.cells import ArchParams as AP
    from hwnas.seg import SegSupernet

    rng = np.random.default_rng(0)
    seg = SegSupernet(rng=np.random.default_rng(1), dtype=np.float64)
    qc, _ = make_supernet(seed=2)
    # the head is zero-initialized; give it the nonzero weights it would have
    # after any training step so gradients can flow past it
    qc.head.w.data = rng.normal(size=qc.head.w.data.shape) * 0.1
    alpha = AP(seg.topologies() + qc.topologies(), dtype=np.float64)
    img = Tensor(rng.normal(size=(2, 3, 32, 32)))

    def qc_loss(frozen: bool):
        for p in seg.parameters():
            p.zero_grad()
        with nn.mode(training=True, update_stats=False):
            logits, unc, _ = seg.forward(img, alpha)
            probs = T.softmax(logits, axis=1)
            if frozen:
                probs, unc = probs.detach(), unc.detach()
            img16 = img  # same resolution
            pred = qc.predict(img16, probs, unc, alpha)
            loss = T.mse(pred, np.full(2, 0.7))
        loss.backward()

    qc_loss(frozen=False)
    reached = sum(np.abs(p.grad).sum() for p in seg.parameters())
    assert reached > 0
    qc_loss(frozen=True)
    reached = sum(np.abs(p.grad).sum() for p in seg.parameters())
    assert reached == 0.0
