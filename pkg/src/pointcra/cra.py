"""Channel-level relation-attentive aggregation.

Neighbor weights are derived from how features *change* across a stage's
stacked aggregation blocks.  For every center/neighbor pair the
neighborhood-normalized change vectors are compared by cosine inside channel
groups, then calibrated at three levels:

* channel level ``pc``: grouped trend similarity in [-1, 1];
* point level ``pd``: channel mean of ``pc`` mapped to [0, 1];
* neighborhood level ``pn``: saturating spread of ``pd`` over the K
  neighbors, which sets the exponent sharpening ``pd``.

The final channel-resolved weight ``w = pd_cal * pc_scaled`` drives a
per-channel mean over the neighbors.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffnet import tensor as T
from .diffnet.layers import Embed, Module
from .diffnet.tensor import ShapeError, Tensor

ZERO_NORM = 1e-12
# maximum population variance of samples confined to [0, 1]
PD_MAX_VARIANCE = 0.25


class CRAError(ValueError):
    pass


@dataclass
class CalibrationParams:
    zeta: float = 0.7
    alpha_n: float = 1.0
    eps: float = 1e-6
    group_size: int = 4
    a: float = 1.0
    b: float = 0.0
    c: float = 0.5
    phi_l: float = 0.2
    phi_h: float = 0.8
    cosine: str = "group"  # "group" | "sign"
    detach_trend: bool = True
    # scale the block's residual branch by a learnable scalar starting at 0
    gate: bool = True

    def __post_init__(self):
        if not 0.0 < self.zeta < 1.0:
            raise CRAError(f"zeta must lie in (0, 1), got {self.zeta}")
        if self.alpha_n <= 0:
            raise CRAError("alpha_n must be positive")
        if not 0.0 < self.eps <= 1e-3:
            raise CRAError("eps must lie in (0, 1e-3]")
        if int(self.group_size) != self.group_size or self.group_size < 1:
            raise CRAError("group_size must be a positive integer")
        if not 0.0 < self.phi_l < self.phi_h:
            raise CRAError("need 0 < phi_l < phi_h")
        if self.cosine not in ("group", "sign"):
            raise CRAError(f"unknown cosine mode {self.cosine!r}")
        self.group_size = int(self.group_size)

    def num_groups(self, channels: int) -> int:
        return math.ceil(channels / self.group_size)

    def to_dict(self):
        return asdict(self)


def _group_counts(channels, group_size):
    """Real (unpadded) channel count of every group."""
    n_groups = math.ceil(channels / group_size)
    counts = np.full(n_groups, group_size, dtype=np.float64)
    counts[-1] = channels - group_size * (n_groups - 1)
    return counts


# --------------------------------------------------------------------------
# trend vectors
# --------------------------------------------------------------------------

@dataclass
class TrendTensor:
    """Raw per-point transitions and their neighborhood-normalized forms.

    ``raw``: M x C x (L-1); ``deltas``: M x K x C x (L-1) for neighbors;
    ``center``: M x C x (L-1) for the centers.  Both normalized forms remove
    the same per-(center, channel, step) neighbor mean.
    """

    raw: Tensor
    deltas: Tensor
    center: Tensor

    @property
    def channels(self):
        return self.deltas.shape[2]

    @property
    def steps(self):
        return self.deltas.shape[3]


def trend_vectors(seq, index, detach=True) -> TrendTensor:
    if len(seq) < 2:
        raise CRAError("a feature sequence needs at least two stages")
    seq = [T.as_tensor(f) for f in seq]
    if detach:
        seq = [f.detach() for f in seq]
    m, c = seq[0].shape
    if any(f.shape != (m, c) for f in seq):
        raise CRAError("all sequence stages must share the M x C shape")
    steps = len(seq) - 1
    t = T.concat([(seq[l + 1] - seq[l]).reshape(m, c, 1) for l in range(steps)], axis=-1)
    nbr = index.neighbors
    k = nbr.shape[1]
    gathered = T.gather_rows(t.reshape(m, c * steps), nbr).reshape(len(nbr), k, c, steps)
    mu = T.neighbor_mean(gathered, axis=1).reshape(len(nbr), 1, c, steps)
    deltas = gathered - mu
    center = T.gather_rows(t.reshape(m, c * steps), index.centers).reshape(len(nbr), c, steps)
    center = center - mu.reshape(len(nbr), c, steps)
    return TrendTensor(t, deltas, center)


# --------------------------------------------------------------------------
# channel-level similarity
# --------------------------------------------------------------------------

def _pad_channels(x, channels, padded, axis):
    if padded == channels:
        return x
    shape = list(x.shape)
    shape[axis] = padded - channels
    return T.concat([x, Tensor(np.zeros(shape))], axis=axis)


def trend_similarity(trend: TrendTensor, params: CalibrationParams) -> Tensor:
    """Grouped trend similarity, M x K x ceil(C/G); no softmax."""
    m, k, c, steps = trend.deltas.shape
    g = params.group_size
    n_groups = params.num_groups(c)
    if params.cosine == "sign":
        return _sign_similarity(trend, g, n_groups)
    dn = _pad_channels(trend.deltas, c, n_groups * g, 2).reshape(m, k, n_groups, g, steps)
    dc = _pad_channels(trend.center, c, n_groups * g, 1).reshape(m, 1, n_groups, g, steps)
    dot = (dn * dc).sum(axis=3)
    nn2 = (dn * dn).sum(axis=3)
    nc2 = (dc * dc).sum(axis=3)
    ok = (nn2.data >= ZERO_NORM**2) & (nc2.data >= ZERO_NORM**2)
    T.note_pattern(ok)
    if g == 1:
        # one-channel cosine is a sign product: discontinuous at zero
        T.note_pattern(np.sign(dot.data))
    elif dot.requires_grad and ok.any():
        # cosine curvature grows like 1/norm^2
        T.note_scale("trend_norm2", np.where(ok, np.minimum(nn2.data, nc2.data), np.inf).min())
    ok = np.broadcast_to(ok, dot.shape).astype(np.float64)
    # masked entries get a unit denominator so no inf/nan reaches backward
    den = T.sqrt(nn2 * nc2 + (1.0 - ok))
    cos = dot * ok / den
    # parallel vectors can land one ulp past +-1
    if np.abs(cos.data).max(initial=0.0) > 1.0:
        cos = cos + (np.clip(cos.data, -1.0, 1.0) - cos.data)
    return cos.mean(axis=-1)


def _sign_similarity(trend, g, n_groups):
    # per-channel scalar cosine == sign agreement, then group mean
    dn = trend.deltas.data
    dc = trend.center.data[:, None]
    sn = np.where(np.abs(dn) < ZERO_NORM, 0.0, np.sign(dn))
    sc = np.where(np.abs(dc) < ZERO_NORM, 0.0, np.sign(dc))
    per_channel = (sn * sc).mean(axis=-1)
    m, k, c = per_channel.shape
    padded = np.zeros((m, k, n_groups * g))
    padded[..., :c] = per_channel
    sums = padded.reshape(m, k, n_groups, g).sum(-1)
    return Tensor(sums / _group_counts(c, g))


def broadcast_groups(pc, params: CalibrationParams, channels: int) -> Tensor:
    """Group values -> C channels (each channel copies its group's value)."""
    return T.repeat_groups(pc, params.group_size, channels)


# --------------------------------------------------------------------------
# point- and neighborhood-level calibration
# --------------------------------------------------------------------------

def pd_aggregate(pc, channels: int, group_size: int) -> Tensor:
    """Channel mean of the C-resolved similarity, remapped to [0, 1]."""
    pc = T.as_tensor(pc)
    weights = _group_counts(channels, group_size) / channels
    if pc.shape[-1] != weights.shape[0]:
        raise ShapeError("pc has the wrong number of groups for this channel count")
    s = (pc * weights).sum(axis=-1)
    return (s + 1.0) * 0.5


def homogeneity(pd) -> Tensor:
    """``1 - exp(-v / 0.25)`` with v the population variance over neighbors."""
    pd = T.as_tensor(pd)
    # shift by the row minimum: constant rows give exactly zero variance, and
    # sorted sums keep the result independent of neighbor order
    low = pd.data.min(axis=1, keepdims=True)
    d = pd - low
    dev = d - T.neighbor_mean(d, axis=1).reshape(d.shape[0], 1)
    v = T.neighbor_mean(dev * dev, axis=1)
    return 1.0 - T.exp(v * (-1.0 / PD_MAX_VARIANCE))


def gamma(pn, params: CalibrationParams) -> Tensor:
    return T.exp((params.zeta - T.as_tensor(pn)) * params.alpha_n)


def calibrate_pd(pd, pn, params: CalibrationParams) -> Tensor:
    """``(pd + eps) ** gamma(pn)`` with gamma broadcast over the neighbors."""
    pd = T.as_tensor(pd)
    g = gamma(pn, params)
    if g.ndim == 1:
        g = g.reshape(g.shape[0], 1)
    if pd.requires_grad:
        # x ** gamma has curvature ~1/x^2 near zero
        T.note_scale("pd", pd.data.min() + params.eps)
    return T.pow_tensor(pd + params.eps, g)


def scale_pc(pc, a, b, c, group_size: int, channels: int) -> Tensor:
    """``c * (sigmoid(a * (pc - b)) - sigmoid(-a * b))`` broadcast to C channels.

    ``a`` and ``b`` are scalars or per-group vectors; ``c`` is a scalar.
    """
    pc = T.as_tensor(pc)
    a, b, c = T.as_tensor(a), T.as_tensor(b), T.as_tensor(c)
    shifted = T.sigmoid(a * (pc - b)) - T.sigmoid(-(a * b))
    return T.repeat_groups(shifted * c, group_size, channels)


def final_weights(pd_cal, pc_scaled) -> Tensor:
    pd_cal, pc_scaled = T.as_tensor(pd_cal), T.as_tensor(pc_scaled)
    if pd_cal.shape != pc_scaled.shape[:2]:
        raise ShapeError(f"pd {pd_cal.shape} does not match weights {pc_scaled.shape}")
    return pd_cal.reshape(pd_cal.shape + (1,)) * pc_scaled


def weighted_aggregate(grouped, w) -> Tensor:
    """Per-channel mean over the K neighbors of ``w * grouped`` (unnormalized)."""
    grouped, w = T.as_tensor(grouped), T.as_tensor(w)
    if grouped.shape != w.shape:
        raise ShapeError(f"grouped {grouped.shape} and weights {w.shape} differ")
    return T.neighbor_mean(grouped * w, axis=1)


# --------------------------------------------------------------------------
# block
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Variant:
    """Which calibration pieces are active."""

    use_pd: bool = True
    calibrate: bool = True
    learnable: bool = True

    @classmethod
    def full(cls):
        return cls()


@dataclass
class WeightTensor:
    pc: np.ndarray
    pc_full: np.ndarray
    pc_scaled: np.ndarray
    pd: np.ndarray
    pd_cal: np.ndarray
    pn: np.ndarray
    w: Tensor = field(repr=False)

    def arrays(self):
        return {
            "pc": self.pc,
            "pc_scaled": self.pc_scaled,
            "pd": self.pd,
            "pd_cal": self.pd_cal,
            "pn": self.pn,
            "w": self.w.data,
        }


def compute_weights(seq, index, params: CalibrationParams, variant: Variant, a=None, b=None, c=None):
    """Run the full weight pipeline; returns a WeightTensor."""
    trend = trend_vectors(seq, index, detach=params.detach_trend)
    channels = trend.channels
    pc = trend_similarity(trend, params)
    pc_full = broadcast_groups(pc, params, channels)
    pd = pd_aggregate(pc, channels, params.group_size)
    pn = homogeneity(pd)
    pd_cal = calibrate_pd(pd, pn, params)
    if variant.learnable:
        pc_scaled = scale_pc(pc, a, b, c, params.group_size, channels)
    else:
        pc_scaled = pc_full
    if variant.use_pd:
        w = final_weights(pd_cal if variant.calibrate else pd, pc_scaled)
    else:
        w = pc_scaled
    return WeightTensor(
        pc=pc.data,
        pc_full=pc_full.data,
        pc_scaled=pc_scaled.data,
        pd=pd.data,
        pd_cal=pd_cal.data,
        pn=pn.data,
        w=w,
    )


class CRABlock(Module):
    """Calibrated aggregation at the end of an encoder stage.

    ``out = f_L + g * embed(weighted_mean(w * f_L[neighbors]))`` where the
    scalar ``g`` is learned from 0, so a fresh block is the identity and the
    backbone is undisturbed at initialization.  Without ``params.gate`` the
    branch is added as is.
    """

    def __init__(self, channels, params: CalibrationParams, rng, variant: Variant | None = None):
        super().__init__()
        self.channels = channels
        self.params = params
        self.variant = variant or Variant.full()
        n_groups = params.num_groups(channels)
        if self.variant.learnable:
            self.a = self.add_param("a", np.full(n_groups, params.a))
            self.b = self.add_param("b", np.full(n_groups, params.b))
            self.c = self.add_param("c", np.array(params.c))
        else:
            self.a = self.b = self.c = None
        self.embed = self.add_module("embed", Embed(channels, channels, rng))
        self.gate = self.add_param("gate", 0.0) if params.gate else None

    def cra_parameter_count(self) -> int:
        return self.num_parameters()

    def __call__(self, seq, index, grouped=None):
        """Returns (features M x C, WeightTensor)."""
        last = T.as_tensor(seq[-1])
        if last.shape[1] != self.channels:
            raise ShapeError(f"CRABlock expects {self.channels} channels, got {last.shape[1]}")
        if grouped is None:
            grouped = T.gather_rows(last, index.neighbors)
        weights = compute_weights(seq, index, self.params, self.variant, self.a, self.b, self.c)
        branch = self.embed(weighted_aggregate(grouped, weights.w))
        if self.gate is not None:
            branch = branch * self.gate
        return last + branch, weights


def cra_block(seq, index, grouped, block: CRABlock):
    return block(seq, index, grouped)


def dump_intermediates(path, per_stage, meta=None):
    """Write ``{stage: WeightTensor}`` as manifest + flat float64 arrays."""
    from .diffnet.checkpoint import write_tensors

    tensors = {}
    for stage, wt in per_stage.items():
        for name, arr in wt.arrays().items():
            tensors[f"stage{stage}/{name}"] = arr
    write_tensors(path, tensors, meta)
