import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointcra import gradcheck
from pointcra.diffnet import layers as L
from pointcra.diffnet import tensor as T
from pointcra.diffnet.checkpoint import load_module, save_module
from pointcra.diffnet.tensor import ShapeError, Tensor
from pointcra.geomcore import NeighborhoodIndex, knn


def rng(seed=0):
    return np.random.default_rng(seed)


class TestPrimitives:
    def test_backward_of_product(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = Tensor(np.array([3.0, -1.0]), requires_grad=True)
        (x * y).sum().backward()
        assert x.grad.tolist() == [3.0, -1.0]
        assert y.grad.tolist() == [1.0, 2.0]

    def test_broadcast_grad_is_reduced(self):
        x = Tensor(np.ones((4, 3)), requires_grad=True)
        b = Tensor(np.zeros(3), requires_grad=True)
        (x + b).sum().backward()
        assert b.grad.tolist() == [4.0, 4.0, 4.0]

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batch_norm_eval_identity(self):
        bn = L.BatchNorm(3)
        bn.scale.data[:] = [2.0, 0.5, -1.0]
        bn.shift.data[:] = [0.1, 0.2, 0.3]
        bn.eval()
        x = np.tile([1.0, -2.0, 4.0], (5, 1))
        y = bn(Tensor(x)).data
        expect = x / np.sqrt(1 + bn.eps) * bn.scale.data + bn.shift.data
        assert np.allclose(y, expect, rtol=0, atol=1e-15)

    def test_batch_norm_running_stats(self):
        bn = L.BatchNorm(2)
        x = rng().normal(size=(50, 2))
        bn(Tensor(x))
        assert np.allclose(bn._buffers["running_mean"], 0.1 * x.mean(0))
        assert np.allclose(bn._buffers["running_var"], 0.9 + 0.1 * x.var(0))

    def test_reduce_max_idempotent(self):
        row = rng().normal(size=(1, 1, 4))
        x = Tensor(np.repeat(row, 5, axis=1))
        assert np.array_equal(T.reduce_max(x, axis=1).data, row[:, 0])

    def test_reduce_max_grad_goes_to_lowest_tied_index(self):
        x = Tensor(np.array([[[1.0], [1.0], [0.0]]]), requires_grad=True)
        T.reduce_max(x, axis=1).sum().backward()
        assert x.grad[0, :, 0].tolist() == [1.0, 0.0, 0.0]

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_softplus_is_stable(self):
        y = T.softplus(Tensor(np.array([-800.0, 0.0, 800.0]))).data
        assert np.isfinite(y).all()
        assert y[1] == pytest.approx(np.log(2.0), abs=1e-15)
        assert y[2] == pytest.approx(800.0)


def _cloud(seed, n=20, c=4):
    r = rng(seed)
    pos = r.normal(size=(n, 3))
    return pos, r.normal(size=(n, c)), knn(pos, pos, 5)


class TestBlocks:
    def test_set_abstraction_neighbor_permutation(self):
        pos, feat, nb = _cloud(1)
        block = L.SetAbstraction(4, 8, rng(2))
        _, base = block(pos, feat, nb)
        perm = rng(3).permuted(nb.neighbors, axis=1)
        _, moved = block(pos, feat, NeighborhoodIndex(nb.centers, perm))
        assert np.array_equal(base.data, moved.data)

    def test_set_abstraction_self_neighbor(self):
        pos, feat, _ = _cloud(4)
        block = L.SetAbstraction(4, 6, rng(5)).eval()
        idx = NeighborhoodIndex(np.arange(20), np.arange(20)[:, None])
        _, out = block(pos, feat, idx)
        x = Tensor(np.concatenate([feat, np.zeros((20, 3))], axis=1))
        assert np.allclose(out.data, block.mlp(x).data, rtol=0, atol=1e-14)

    def test_zeroed_embed_annihilates(self):
        pos, feat, nb = _cloud(6)
        block = L.LABlock(4, rng(7))
        block.embed.fc.weight.data[:] = 0
        block.embed.fc.bias.data[:] = 0
        block.embed.bn.shift.data[:] = 0
        out = block(pos, feat, nb)
        assert np.array_equal(out.data, np.zeros((20, 4)))

    def test_la_stack_sequence_shapes(self):
        pos, feat, nb = _cloud(8)
        blocks = [L.LABlock(4, rng(9)) for _ in range(3)]
        seq, x = [], Tensor(feat)
        from pointcra.geomcore import PointCloud

        for b in blocks:
            x = L.la_block(PointCloud(pos, x.data), nb, b, seq)
        assert [s.shape for s in seq] == [(20, 4)] * 3

    def test_feature_propagation_coincident_and_constant(self):
        r = rng(10)
        coarse = r.normal(size=(6, 3))
        feats = r.normal(size=(6, 2))
        out = L.feature_propagation(coarse, feats, coarse[[2]]).data
        assert np.allclose(out[0], feats[2], atol=1e-6)
        const = np.full((6, 2), 1.7)
        fine = r.normal(size=(9, 3))
        assert np.allclose(L.feature_propagation(coarse, const, fine).data, 1.7, rtol=0, atol=1e-14)

    def test_feature_propagation_oracle(self):
        r = rng(11)
        coarse, fine = r.normal(size=(7, 3)), r.normal(size=(5, 3))
        feats = r.normal(size=(7, 3))
        out = L.feature_propagation(coarse, feats, fine).data
        for i, p in enumerate(fine):
            d2 = ((coarse - p) ** 2).sum(1)
            nearest = np.argsort(d2)[:3]
            w = 1.0 / (d2[nearest] + L.INTERP_EPS)
            assert np.allclose(out[i], (w[:, None] * feats[nearest]).sum(0) / w.sum(), rtol=1e-12, atol=1e-12)

    def test_heads(self):
        head = L.Head(5, 3, rng(12))
        head.fc.weight.data[:] = 0
        head.fc.bias.data[:] = 0
        assert np.array_equal(L.classification_head(Tensor(np.ones((2, 5))), head).data, np.zeros((2, 3)))
        assert L.segmentation_head(Tensor(np.ones((11, 5))), head).shape == (11, 3)
        with pytest.raises(ShapeError):
            L.segmentation_head(Tensor(np.ones((2, 2, 5))), head)

    def test_checkpoint_round_trip(self, tmp_path):
        a, b = L.LABlock(4, rng(13)), L.LABlock(4, rng(14))
        a(*_cloud(15)[:2], _cloud(15)[2])
        save_module(tmp_path / "m.bin", a)
        load_module(tmp_path / "m.bin", b)
        for (k, p), (_, q) in zip(a.named_parameters().items(), b.named_parameters().items()):
            assert np.array_equal(p.data, q.data), k
        for k, v in a.named_buffers().items():
            assert np.array_equal(v, b.named_buffers()[k]), k


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 12), st.integers(1, 6))
def test_forward_is_finite(seed, n, c):
    r = rng(seed)
    pos = r.normal(size=(n, 3)) * r.uniform(1e-3, 1e3)
    feat = r.normal(size=(n, c))
    nb = knn(pos, pos, min(3, n))
    _, out = L.SetAbstraction(c, 4, r)(pos, feat, nb)
    out2 = L.LABlock(4, r)(pos, out, nb)
    assert np.isfinite(out2.data).all()


@pytest.mark.parametrize("name", list(gradcheck.SUITES))
def test_gradient_suite_smoke(name):
    # reduced instance count; the acceptance suite runs the full 20
    res = gradcheck.run_suite(name, n=3, seed=7)
    assert res.max_rel_error <= gradcheck.TOL, res.errors


def test_gradcheck_detects_a_wrong_gradient():
    def bad_square(x):
        # forward x^2 with a backward of 3x instead of 2x
        return T._make(x.data**2, (x,), lambda g: T._accum(x, g * 3.0 * x.data))

    good = gradcheck.check_gradients(lambda x: x * x, [np.array([0.3, -0.7])])
    wrong = gradcheck.check_gradients(bad_square, [np.array([0.3, -0.7])])
    assert good < 1e-9
    assert wrong > 0.1
