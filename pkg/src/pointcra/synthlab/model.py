"""Two-stage encoder with optional CRA blocks, plus the decoder and heads.

Neighborhoods depend only on point geometry, and both farthest point
sampling and nearest-neighbor ranks are invariant under rotation and
uniform scaling, so a scene's plan is built once and reused across epochs
even with augmentation.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..cra import CalibrationParams, CRABlock, Variant
from ..diffnet import layers as L
from ..diffnet import tensor as T
from ..geomcore import NeighborhoodIndex, ball_query, farthest_point_sample, knn


@dataclass
class ModelConfig:
    task: str = "seg"  # seg | cls
    num_classes: int = 3
    in_channels: int = 3
    widths: list = field(default_factory=lambda: [32, 64])
    la_blocks: int = 3
    k: int = 8
    ratio: int = 4
    grouper: str = "knn"  # knn | ball
    radius: list = field(default_factory=lambda: [0.25, 0.5])

    def __post_init__(self):
        if self.task not in ("seg", "cls"):
            raise ValueError(f"task must be 'seg' or 'cls', got {self.task!r}")
        if self.la_blocks < 2:
            raise ValueError("a stage needs at least two LA blocks to form trends")
        if self.grouper not in ("knn", "ball"):
            raise ValueError(f"grouper must be 'knn' or 'ball', got {self.grouper!r}")
        if len(self.radius) != len(self.widths):
            raise ValueError("need one ball radius per stage")
        if self.k < 2 or self.ratio < 1 or self.num_classes < 2:
            raise ValueError("need k >= 2, ratio >= 1 and at least two classes")

    def to_dict(self):
        return asdict(self)


# ablation stages: (CRA enabled, variant, auxiliary losses on)
STAGES = {
    "baseline": (False, None, False),
    "A": (True, Variant(use_pd=False, calibrate=False, learnable=False), False),
    "B": (True, Variant(use_pd=True, calibrate=True, learnable=False), False),
    "C": (True, Variant(use_pd=True, calibrate=True, learnable=True), False),
    "D": (True, Variant(use_pd=True, calibrate=True, learnable=True), True),
    # decomposition of the weighting itself
    "pc-only": (True, Variant(use_pd=False, calibrate=False, learnable=False), False),
    "pc-pd": (True, Variant(use_pd=True, calibrate=False, learnable=False), False),
    "pc-pd-cal": (True, Variant(use_pd=True, calibrate=True, learnable=False), False),
}


def stage_settings(stage):
    try:
        return STAGES[stage]
    except KeyError:
        raise ValueError(f"unknown ablation stage {stage!r}; choose from {sorted(STAGES)}") from None


# --------------------------------------------------------------------------
# neighborhood plans
# --------------------------------------------------------------------------

@dataclass
class StagePlan:
    down: NeighborhoodIndex  # centers into the previous level, neighbors too
    local: NeighborhoodIndex  # same-resolution neighborhoods
    up_idx: np.ndarray  # previous-level points -> this level, F x 3
    up_w: np.ndarray


@dataclass
class ScenePlan:
    n: int
    stages: list


def _group(cfg, query, ref, s):
    if cfg.grouper == "knn":
        return knn(query, ref, cfg.k)
    return ball_query(query, ref, cfg.radius[s], cfg.k)


def build_plan(positions, cfg: ModelConfig) -> ScenePlan:
    stages = []
    pos = positions
    for s in range(len(cfg.widths)):
        m = max(1, pos.shape[0] // cfg.ratio)
        centers = farthest_point_sample(pos, m)
        sub = pos[centers]
        nb = _group(cfg, sub, pos, s)
        down = NeighborhoodIndex(centers, nb.neighbors)
        local = _group(cfg, sub, sub, s)
        up_idx, up_w = L.interpolation_weights(sub, pos)
        stages.append(StagePlan(down, NeighborhoodIndex(local.centers, local.neighbors), up_idx, up_w))
        pos = sub
    return ScenePlan(positions.shape[0], stages)


def _offset(index: NeighborhoodIndex, center_off, nbr_off):
    return NeighborhoodIndex(index.centers + center_off, index.neighbors + nbr_off)


def batch_plans(plans):
    """Concatenate per-scene plans into one plan over the stacked points."""
    out = []
    sizes = [p.n for p in plans]
    for s in range(len(plans[0].stages)):
        new_sizes = [len(p.stages[s].down) for p in plans]
        prev_off = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        new_off = np.concatenate([[0], np.cumsum(new_sizes)[:-1]])
        downs, locals_, up_i, up_w = [], [], [], []
        for p, po, no in zip(plans, prev_off, new_off):
            st = p.stages[s]
            downs.append(_offset(st.down, po, po))
            locals_.append(_offset(st.local, no, no))
            up_i.append(st.up_idx + no)
            up_w.append(st.up_w)
        cat = lambda idxs: NeighborhoodIndex(
            np.concatenate([i.centers for i in idxs]), np.concatenate([i.neighbors for i in idxs])
        )
        out.append(StagePlan(cat(downs), cat(locals_), np.concatenate(up_i), np.concatenate(up_w)))
        sizes = new_sizes
    return ScenePlan(int(sum(p.n for p in plans)), out)


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------

@dataclass
class Forward:
    logits: T.Tensor
    weights: list  # WeightTensor per encoder stage with CRA
    stage_features: list


class PointCRANet(L.Module):
    """SA -> L x LA -> (CRA) per stage; decoder for per-point logits."""

    def __init__(self, cfg: ModelConfig, params: CalibrationParams, stage="D", seed=0):
        super().__init__()
        self.cfg, self.params, self.stage = cfg, params, stage
        use_cra, variant, self.aux_losses = stage_settings(stage)
        # backbone and CRA blocks draw from separate streams, so every
        # ablation stage shares the same backbone initialization
        rng = np.random.default_rng([seed, 1])
        cra_rng = np.random.default_rng([seed, 2])
        self.sa, self.la, self.cra = [], [], []
        cin = cfg.in_channels
        for s, w in enumerate(cfg.widths):
            self.sa.append(self.add_module(f"sa{s}", L.SetAbstraction(cin, w, rng)))
            self.la.append([self.add_module(f"la{s}_{i}", L.LABlock(w, rng)) for i in range(cfg.la_blocks)])
            if use_cra:
                self.cra.append(self.add_module(f"cra{s}", CRABlock(w, params, cra_rng, variant)))
            cin = w
        self.fp = []
        if cfg.task == "seg":
            skips = [cfg.in_channels] + list(cfg.widths[:-1])
            c_coarse = cfg.widths[-1]
            for s in reversed(range(len(cfg.widths))):
                out_c = cfg.widths[max(s - 1, 0)]
                self.fp.append(self.add_module(f"fp{s}", L.FPModule(c_coarse, skips[s], out_c, rng)))
                c_coarse = out_c
            self.head = self.add_module("head", L.Head(c_coarse, cfg.num_classes, rng))
        else:
            self.head = self.add_module("head", L.Head(cfg.widths[-1], cfg.num_classes, rng))

    def cra_parameter_count(self):
        return sum(b.num_parameters() for b in self.cra)

    def calibration_params(self):
        """(a, b, c) per CRA block with learnable scaling."""
        return [(b.a, b.b, b.c) for b in self.cra if b.a is not None]

    def __call__(self, positions, features, plan: ScenePlan, batch_size=1) -> Forward:
        pos = positions
        x = T.as_tensor(features)
        skips, weights, feats = [(pos, x)], [], []
        for s, st in enumerate(plan.stages):
            pos, x = self.sa[s](pos, x, st.down)
            seq = []
            for la in self.la[s]:
                x = la(pos, x, st.local)
                seq.append(x)
            if self.cra:
                x, wt = self.cra[s](seq, st.local)
                weights.append(wt)
            feats.append(x)
            skips.append((pos, x))
        if self.cfg.task == "cls":
            m = x.shape[0] // batch_size
            pooled = T.reduce_max(x.reshape(batch_size, m, x.shape[1]), axis=1)
            return Forward(L.classification_head(pooled, self.head), weights, feats)
        up = x
        for j, s in enumerate(reversed(range(len(plan.stages)))):
            st = plan.stages[s]
            up = self.fp[j](up, skips[s][1], st.up_idx, st.up_w)
        return Forward(L.segmentation_head(up, self.head), weights, feats)


def input_features(positions):
    return positions.copy()
