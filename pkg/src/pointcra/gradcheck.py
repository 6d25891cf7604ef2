"""Central finite-difference checks for every differentiable piece.

Each registered suite draws randomized small instances and compares the
reverse-mode gradient of a random projection of the output against central
differences (step 1e-3, float64).  An instance is redrawn when any probe
changes the active set of a piecewise op (ReLU mask, max argument, sign),
since differences across a kink say nothing about the derivative.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import cra, losses
from .diffnet import layers as L
from .diffnet import tensor as T
from .diffnet.tensor import Tensor
from .geomcore import knn

STEP = 1e-3
TOL = 1e-4
GRAD_FLOOR = 1e-6
N_INSTANCES = 20

SUITES: dict = {}


def suite(name):
    def deco(fn):
        SUITES[name] = fn
        return fn

    return deco


# below these floors the curvature (~1/scale) is large enough that a 1e-3
# probe measures it rather than the slope: batch-norm variance, squared
# trend-group norm under a cosine, and the base of (pd + eps) ** gamma
SCALE_FLOORS = {"bn_var": 0.25, "trend_norm2": 0.25, "pd": 0.1}
# block suites draw inputs at this scale for the same reason
BLOCK_SCALE = 3.0


class KinkCrossed(RuntimeError):
    pass


class IllConditioned(KinkCrossed):
    pass


def _projected(fn, tensors, proj, base_sig=None):
    with T.track_kinks() as sig:
        out = fn(*tensors)
    if base_sig is not None and sig != base_sig:
        raise KinkCrossed
    if proj is None:
        return out
    return (out * proj).sum()


def check_gradients(fn, arrays, params=(), rng=None, step=STEP):
    """Relative error of the analytic gradient over all inputs and parameters.

    Raises :class:`KinkCrossed` if a probe leaves the base active set and
    :class:`IllConditioned` if a noted curvature scale is below its floor.

    ``fn(*tensors)`` may return any shape; a fixed random projection turns
    it into a scalar.  ``params`` are existing Tensors (module weights)
    checked in place.
    """
    rng = rng or np.random.default_rng(0)
    inputs = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    targets = inputs + list(params)
    for p in params:
        p.grad = None
    with T.track_kinks() as base_sig:
        out = fn(*inputs)
        scales = T.noted_scales()
    if any(v < SCALE_FLOORS[kind] for kind, v in scales):
        raise IllConditioned
    proj = None if out.size == 1 else rng.standard_normal(out.shape)
    loss = out if proj is None else (out * proj).sum()
    loss.backward()
    analytic_all, numeric_all = [], []
    for t in targets:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        numeric = np.zeros(t.shape)
        flat = t.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        with T.no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                try:
                    fp = float(_projected(fn, inputs, proj, base_sig).data)
                    flat[i] = orig - step
                    fm = float(_projected(fn, inputs, proj, base_sig).data)
                finally:
                    flat[i] = orig
                num_flat[i] = (fp - fm) / (2 * step)
        analytic_all.append(analytic.reshape(-1))
        numeric_all.append(numeric.reshape(-1))
    # one relative error over every checked entry: a tensor whose true
    # gradient is exactly zero (a bias ahead of batch-norm) must not turn
    # roundoff into an O(1) ratio; the floor keeps an identically-zero gradient (sign-valued
    # scalar-group cosines) from comparing roundoff against roundoff
    a, n = np.concatenate(analytic_all), np.concatenate(numeric_all)
    return np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), GRAD_FLOOR)


@dataclass
class SuiteResult:
    name: str
    instances: int
    max_rel_error: float
    redraws: int
    seconds: float
    errors: list = field(default_factory=list)

    @property
    def passed(self):
        return self.instances >= N_INSTANCES and self.max_rel_error <= TOL


def run_suite(name, n=N_INSTANCES, seed=0) -> SuiteResult:
    builder = SUITES[name]
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    t0 = time.perf_counter()
    errors, redraws = [], 0
    while len(errors) < n:
        fn, arrays, params = builder(rng)
        try:
            errors.append(check_gradients(fn, arrays, params, rng))
        except KinkCrossed:
            redraws += 1
            if redraws > 50 * n:
                raise RuntimeError(f"suite {name}: cannot draw kink-free instances")
    return SuiteResult(name, len(errors), max(errors), redraws, time.perf_counter() - t0, errors)


def run_all(names=None, n=N_INSTANCES, seed=0):
    return [run_suite(nm, n, seed) for nm in (names or SUITES)]


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _spread(modules, rng):
    """Redraw linear weights as N(0, 1) so batch statistics are O(1), and
    open residual gates so the gated branch is actually exercised."""
    for mod in modules:
        for name, p in mod.named_parameters().items():
            if name.endswith("weight") or name.endswith("bias"):
                p.data[...] = rng.standard_normal(p.shape)
            elif name.endswith("scale") or name.endswith("gate"):
                p.data[...] = rng.uniform(0.5, 1.5, p.shape)
    return modules


def _shape(rng, ndim=2, lo=2, hi=5):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=ndim))


def _cloud(rng, n, scale=1.0):
    return rng.uniform(-scale, scale, (n, 3))


# --------------------------------------------------------------------------
# primitive suites
# --------------------------------------------------------------------------

@suite("add")
def _s_add(rng):
    s = _shape(rng)
    return (lambda a, b: a + b), [rng.standard_normal(s), rng.standard_normal(s[1:])], ()


@suite("sub")
def _s_sub(rng):
    s = _shape(rng)
    return (lambda a, b: a - b), [rng.standard_normal(s), rng.standard_normal((s[0], 1))], ()


@suite("mul")
def _s_mul(rng):
    s = _shape(rng, 3)
    return (lambda a, b: a * b), [rng.standard_normal(s), rng.standard_normal(s)], ()


@suite("div")
def _s_div(rng):
    s = _shape(rng)
    return (lambda a, b: a / b), [rng.standard_normal(s), rng.uniform(0.5, 2.0, s)], ()


@suite("power")
def _s_power(rng):
    p = float(rng.uniform(-2, 3))
    return (lambda a: T.power(a, p)), [rng.uniform(0.3, 2.0, _shape(rng))], ()


@suite("pow_tensor")
def _s_pow_tensor(rng):
    s = _shape(rng)
    return T.pow_tensor, [rng.uniform(0.2, 1.5, s), rng.uniform(0.5, 3.0, (s[0], 1))], ()


@suite("exp")
def _s_exp(rng):
    return T.exp, [rng.standard_normal(_shape(rng))], ()


@suite("log")
def _s_log(rng):
    return T.log, [rng.uniform(0.2, 3.0, _shape(rng))], ()


@suite("sqrt")
def _s_sqrt(rng):
    return T.sqrt, [rng.uniform(0.2, 3.0, _shape(rng))], ()


@suite("abs")
def _s_abs(rng):
    return T.absolute, [_away_from_zero(rng, _shape(rng))], ()


@suite("relu")
def _s_relu(rng):
    return T.relu, [_away_from_zero(rng, _shape(rng, 3))], ()


@suite("sigmoid")
def _s_sigmoid(rng):
    return T.sigmoid, [3 * rng.standard_normal(_shape(rng))], ()


@suite("softplus")
def _s_softplus(rng):
    return T.softplus, [3 * rng.standard_normal(_shape(rng))], ()


@suite("matmul")
def _s_matmul(rng):
    n, k, m = _shape(rng, 3)
    lead = int(rng.integers(1, 4))
    return T.matmul, [rng.standard_normal((lead, n, k)), rng.standard_normal((k, m))], ()


@suite("bias_add")
def _s_bias(rng):
    n, c = _shape(rng)
    return (lambda x, b: x + b), [rng.standard_normal((n, c)), rng.standard_normal(c)], ()


@suite("transpose")
def _s_transpose(rng):
    return T.transpose, [rng.standard_normal(_shape(rng))], ()


@suite("reduce_sum")
def _s_sum(rng):
    ax = int(rng.integers(0, 3))
    return (lambda x: x.sum(axis=ax)), [rng.standard_normal(_shape(rng, 3))], ()


@suite("reduce_mean")
def _s_mean(rng):
    ax = int(rng.integers(0, 3))
    return (lambda x: x.mean(axis=ax, keepdims=True)), [rng.standard_normal(_shape(rng, 3))], ()


@suite("reduce_max")
def _s_max(rng):
    return (lambda x: T.reduce_max(x, axis=1)), [rng.standard_normal(_shape(rng, 3))], ()


@suite("neighbor_mean")
def _s_nmean(rng):
    return (lambda x: T.neighbor_mean(x, axis=1)), [rng.standard_normal(_shape(rng, 3))], ()


@suite("concat")
def _s_concat(rng):
    n, a, b = _shape(rng, 3)
    return (lambda x, y: T.concat([x, y], axis=-1)), [
        rng.standard_normal((n, a)),
        rng.standard_normal((n, b)),
    ], ()


@suite("gather_rows")
def _s_gather(rng):
    n, c = _shape(rng)
    idx = rng.integers(0, n, size=(int(rng.integers(2, 5)), 3))
    return (lambda x: T.gather_rows(x, idx)), [rng.standard_normal((n, c))], ()


@suite("reshape_getitem")
def _s_getitem(rng):
    s = _shape(rng, 3)
    return (lambda x: x.reshape(s[0], -1)[:, 1:]), [rng.standard_normal(s)], ()


@suite("repeat_groups")
def _s_repeat(rng):
    g = int(rng.integers(1, 4))
    c = int(rng.integers(1, 10))
    ng = -(-c // g)
    return (lambda x: T.repeat_groups(x, g, c)), [rng.standard_normal((3, 2, ng))], ()


@suite("log_softmax")
def _s_lsm(rng):
    return T.log_softmax, [2 * rng.standard_normal(_shape(rng))], ()


@suite("batch_norm_train")
def _s_bn_train(rng):
    n, c = int(rng.integers(4, 9)), int(rng.integers(2, 5))

    def fn(x, scale, shift):
        return T.batch_norm(x, scale, shift)[0]

    return fn, [rng.standard_normal((n, c)), rng.uniform(0.5, 2, c), rng.standard_normal(c)], ()


@suite("batch_norm_eval")
def _s_bn_eval(rng):
    c = int(rng.integers(2, 5))
    bn = L.BatchNorm(c)
    bn._buffers["running_mean"][...] = rng.standard_normal(c)
    bn._buffers["running_var"][...] = rng.uniform(0.5, 2, c)
    bn.scale.data[...] = rng.uniform(0.5, 2, c)
    bn.eval()
    return bn, [rng.standard_normal((5, c))], tuple(bn.parameters())


# --------------------------------------------------------------------------
# block suites
# --------------------------------------------------------------------------

def _sa_setup(rng, m=4, k=3, n=8, cin=3, cout=4):
    pos = _cloud(rng, n, BLOCK_SCALE)
    idx = knn(pos[:m], pos, k)
    idx = type(idx)(np.arange(m), idx.neighbors)
    return pos, idx, _spread([L.SetAbstraction(cin, cout, rng)], rng)[0]


@suite("set_abstraction")
def _s_sa(rng):
    pos, idx, block = _sa_setup(rng, cin=int(rng.integers(2, 4)))
    fn = lambda f: block(pos, f, idx)[1]
    return fn, [BLOCK_SCALE * rng.standard_normal((8, block.cin))], tuple(block.parameters())


@suite("la_block_x2")
def _s_la(rng):
    n, c, k = 6, 3, 3
    pos = _cloud(rng, n, BLOCK_SCALE)
    idx = knn(pos, pos, k)
    b1, b2 = _spread([L.LABlock(c, rng), L.LABlock(c, rng)], rng)
    fn = lambda f: b2(pos, b1(pos, f, idx), idx)
    return fn, [BLOCK_SCALE * rng.standard_normal((n, c))], tuple(b1.parameters() + b2.parameters())


@suite("feature_propagation")
def _s_fp(rng):
    coarse, fine = _cloud(rng, 5), _cloud(rng, 7)
    fn = lambda f: L.feature_propagation(coarse, f, fine)
    return fn, [rng.standard_normal((5, 3))], ()


@suite("fp_module")
def _s_fpm(rng):
    coarse, fine = _cloud(rng, 4), _cloud(rng, 6)
    idx, w = L.interpolation_weights(coarse, fine)
    mod = _spread([L.FPModule(3, 2, 3, rng)], rng)[0]
    fn = lambda fc, fs: mod(fc, fs, idx, w)
    return fn, [rng.standard_normal((4, 3)), rng.standard_normal((6, 2))], tuple(mod.parameters())


@suite("head_cross_entropy")
def _s_head(rng):
    n, c, k = int(rng.integers(3, 7)), 4, int(rng.integers(2, 5))
    head = L.Head(c, k, rng)
    labels = rng.integers(0, k, n)
    s = float(rng.uniform(0, 0.5))
    fn = lambda f: losses.cross_entropy(L.segmentation_head(f, head), labels, s)
    return fn, [rng.standard_normal((n, c))], tuple(head.parameters())


# --------------------------------------------------------------------------
# calibration suites
# --------------------------------------------------------------------------

def _seq_setup(rng, m=6, c=None, k=3, steps=2, group_size=1, min_norm=0.2, scale=1.0):
    """Random feature sequence whose normalized trend groups all have norm
    >= ``min_norm`` (cosine curvature grows like 1/norm^2)."""
    c = c or int(rng.integers(2, 7))
    pos = _cloud(rng, m)
    idx = knn(pos, pos, k)
    params = cra.CalibrationParams(group_size=group_size)
    ng = params.num_groups(c)
    while True:
        seq = [scale * rng.standard_normal((m, c)) for _ in range(steps + 1)]
        tr = cra.trend_vectors(seq, idx)
        pad = ng * group_size - c
        dn = np.pad(tr.deltas.data, ((0, 0), (0, 0), (0, pad), (0, 0)))
        dc = np.pad(tr.center.data, ((0, 0), (0, pad), (0, 0)))
        nn = np.sqrt((dn.reshape(m, k, ng, group_size, steps) ** 2).sum(3))
        nc = np.sqrt((dc.reshape(m, ng, group_size, steps) ** 2).sum(2))
        if min(nn.min(), nc.min()) >= min_norm:
            return pos, idx, seq, c


@suite("trend_similarity_full")
def _s_trend(rng):
    g = int(rng.integers(1, 4))
    # scalar groups reduce to a sign, whose flips the kink tracking catches
    _, idx, seq, c = _seq_setup(
        rng, group_size=g, min_norm=0.0 if g == 1 else 0.6, scale=BLOCK_SCALE
    )
    params = cra.CalibrationParams(group_size=g)
    fn = lambda *s: cra.trend_similarity(cra.trend_vectors(list(s), idx, detach=False), params)
    return fn, seq, ()


@suite("pd_homogeneity_calibrate")
def _s_pd(rng):
    m, k, ng = 4, 3, 2
    c = 2 * ng - int(rng.integers(0, 2))
    params = cra.CalibrationParams(group_size=2, alpha_n=float(rng.uniform(0.5, 2)))

    def fn(pc):
        pd = cra.pd_aggregate(pc, c, 2)
        return cra.calibrate_pd(pd, cra.homogeneity(pd), params)

    return fn, [rng.uniform(-0.9, 0.9, (m, k, ng))], ()


@suite("scale_pc")
def _s_scale(rng):
    ng, g = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    c = ng * g - int(rng.integers(0, g))
    fn = lambda pc, a, b, cc: cra.scale_pc(pc, a, b, cc, g, c)
    return fn, [
        rng.uniform(-1, 1, (3, 2, ng)),
        rng.uniform(0.5, 2, ng),
        rng.uniform(-0.5, 0.5, ng),
        np.array(rng.uniform(0.2, 0.8)),
    ], ()


@suite("cra_weight_chain")
def _s_chain(rng):
    """scale_pc -> final_weights -> weighted_aggregate."""
    m, k, g, ng = 3, 4, 2, 2
    c = 4 - int(rng.integers(0, 2))
    pd_cal = rng.uniform(0.1, 1, (m, k))

    def fn(pc, a, b, cc, grouped):
        w = cra.final_weights(pd_cal, cra.scale_pc(pc, a, b, cc, g, c))
        return cra.weighted_aggregate(grouped, w)

    return fn, [
        rng.uniform(-1, 1, (m, k, ng)),
        rng.uniform(0.5, 2, ng),
        rng.uniform(-0.5, 0.5, ng),
        np.array(0.5),
        rng.standard_normal((m, k, c)),
    ], ()


@suite("cra_block_detached")
def _s_block_det(rng):
    """Detached trend statistics: the sequence is a constant, so only the
    aggregated neighbor features and the block parameters vary."""
    _, idx, seq, c = _seq_setup(rng, c=4, min_norm=0.0)
    params = cra.CalibrationParams(group_size=2)
    block = _spread([cra.CRABlock(c, params, rng)], rng)[0]
    block.a.data[...] = rng.uniform(0.5, 2, block.a.shape)
    block.b.data[...] = rng.uniform(-0.5, 0.5, block.b.shape)
    const = [Tensor(s) for s in seq]
    fn = lambda grouped: block(const, idx, grouped)[0]
    # calibrated weights are ~0.1, so the features feeding the embedding
    # need a wider spread to keep its batch variance above its floor
    grouped = 4 * BLOCK_SCALE * rng.standard_normal(idx.neighbors.shape + (c,))
    return fn, [grouped], tuple(block.parameters())


@suite("cra_block_full")
def _s_block_full(rng):
    """Backbone (SA + 2 LA) + CRA, differentiated through the trend statistics."""
    n, m, k, c = 10, 6, 3, 4
    pos = _cloud(rng, n, BLOCK_SCALE)
    sa_idx = knn(pos[:m], pos, k)
    sa_idx = type(sa_idx)(np.arange(m), sa_idx.neighbors)
    la_idx = knn(pos[:m], pos[:m], k)
    params = cra.CalibrationParams(group_size=4, detach_trend=False)
    sa, block, *las = _spread(
        [L.SetAbstraction(2, c, rng), cra.CRABlock(c, params, rng), L.LABlock(c, rng), L.LABlock(c, rng)],
        rng,
    )
    # widen the LA outputs (trend norms, 6-row batch variances) and lift the
    # ~1e-2 calibrated aggregate to unit batch variance
    for la in las:
        la.embed.fc.weight.data *= 4.0
        la.embed.bn.scale.data *= 4.0
    block.embed.fc.weight.data *= 100.0

    def fn(f):
        centers, x = sa(pos, f, sa_idx)
        seq = [x]
        for la in las:
            seq.append(la(centers, seq[-1], la_idx))
        return block(seq, la_idx)[0]

    ps = sa.parameters() + [p for la in las for p in la.parameters()] + block.parameters()
    return fn, [BLOCK_SCALE * rng.standard_normal((n, 2))], tuple(ps)


# --------------------------------------------------------------------------
# loss suites
# --------------------------------------------------------------------------

@suite("cross_entropy")
def _s_ce(rng):
    n, k = _shape(rng)
    labels = rng.integers(0, k, n)
    s = float(rng.uniform(0, 0.5))
    return (lambda z: losses.cross_entropy(z, labels, s)), [2 * rng.standard_normal((n, k))], ()


@suite("reg_loss")
def _s_reg(rng):
    ng = int(rng.integers(1, 4))
    fn = lambda a, b, c: losses.reg_loss(a, b, c, 0.2, 0.8)
    return fn, [rng.uniform(-1, 3, ng), rng.uniform(-2, 2, ng), np.array(rng.uniform(-0.5, 1.5))], ()


@suite("orth_loss")
def _s_orth(rng):
    centered = bool(rng.integers(0, 2))
    return (lambda w: losses.orth_loss(w, centered)), [rng.standard_normal((3, 2, int(rng.integers(2, 5))))], ()


@suite("total_loss")
def _s_total(rng):
    """Total objective w.r.t. (a, b, c) and the weights feeding the orthogonality term."""
    lam1, lam2 = rng.uniform(0, 1, 2)
    labels = rng.integers(0, 3, 4)

    def fn(logits, a, b, c, w):
        task = losses.cross_entropy(logits, labels, 0.2)
        reg = losses.reg_loss(a, b, c, 0.2, 0.8)
        return losses.total_loss(task, reg, losses.orth_loss(w), lam1, lam2).total

    return fn, [
        rng.standard_normal((4, 3)),
        rng.uniform(0, 2, 2),
        rng.uniform(-1, 1, 2),
        np.array(rng.uniform(0, 1)),
        rng.standard_normal((3, 2, 3)),
    ], ()
