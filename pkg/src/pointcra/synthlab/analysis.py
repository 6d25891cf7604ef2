"""Calibration statistics, the ablation table and the group-size sweep."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from ..cra import CalibrationParams
from ..diffnet import tensor as T
from .model import ModelConfig, PointCRANet
from .train import Dataset, DataConfig, TrainConfig, _batches, make_datasets, train

STATS_HEADER = ["stage", "quantity", "phase", "mean", "std"]
ABLATION_HEADER = ["variant", "seed", "oa", "macc", "miou"]
SUMMARY_HEADER = ["variant", "n", "oa_mean", "oa_std", "macc_mean", "macc_std", "miou_mean", "miou_std"]
SWEEP_HEADER = ["group_size", "cra_params", "total_params", "oa", "macc", "miou"]

STAGE_VARIANTS = ("baseline", "A", "B", "C", "D")
WEIGHTING_VARIANTS = ("pc-only", "pc-pd", "pc-pd-cal")


# --------------------------------------------------------------------------
# calibration statistics
# --------------------------------------------------------------------------

@dataclass
class Moments:
    """Population mean/std over every collected value."""

    mean: float
    std: float

    @classmethod
    def of(cls, chunks):
        x = np.concatenate([np.asarray(c, dtype=np.float64).reshape(-1) for c in chunks])
        return cls(float(x.mean()), float(x.std()))


@dataclass
class StageStats:
    pd_pre: Moments
    pd_post: Moments
    pc_pre: Moments
    pc_post: Moments
    w_cos: Moments  # over distinct channel pairs of |cos|


@dataclass
class CalibStats:
    stages: list

    def rows(self):
        out = []
        for s, st in enumerate(self.stages):
            for quantity, phase, m in (
                ("pd", "pre", st.pd_pre),
                ("pd", "post", st.pd_post),
                ("pc", "pre", st.pc_pre),
                ("pc", "post", st.pc_post),
                ("w_cos", "final", st.w_cos),
            ):
                out.append([s, quantity, phase, m.mean, m.std])
        return out


def pairwise_abs_cos(gram):
    """|cos| for distinct channel pairs from a C x C Gram matrix."""
    n = np.sqrt(np.diag(gram))
    ok = n > 1e-12
    den = np.where(ok[:, None] & ok[None, :], np.outer(n, n), 1.0)
    cos = np.abs(gram / den) * (ok[:, None] & ok[None, :])
    c = gram.shape[0]
    return cos[~np.eye(c, dtype=bool)]


def collect_stats(model: PointCRANet, dataset: Dataset, batch_size=16, keep=False):
    """Statistics over all neighborhoods of ``dataset`` in inference mode.

    With ``keep=True`` also returns the concatenated per-stage intermediates
    (``pd``, ``pd_cal``, ``pc``, ``pc_scaled``, ``w``) the statistics came from.
    """
    if not model.cra:
        raise ValueError("model has no CRA block")
    was_training = model.training
    model.eval()
    n_stage = len(model.cra)
    chunks = {key: [[] for _ in range(n_stage)] for key in ("pd", "pd_cal", "pc", "pc_scaled", "w")}
    grams = [None] * n_stage
    try:
        with T.no_grad():
            for ids in _batches(len(dataset), batch_size):
                pos, feat, plan, _ = dataset.batch(ids, model.cfg)
                fwd = model(pos, feat, plan, len(ids))
                for s, wt in enumerate(fwd.weights):
                    chunks["pd"][s].append(wt.pd)
                    chunks["pd_cal"][s].append(wt.pd_cal)
                    chunks["pc"][s].append(wt.pc_full)
                    chunks["pc_scaled"][s].append(wt.pc_scaled)
                    if keep:
                        chunks["w"][s].append(wt.w.data)
                    flat = wt.w.data.reshape(-1, wt.w.shape[-1])
                    g = flat.T @ flat
                    grams[s] = g if grams[s] is None else grams[s] + g
    finally:
        model.train(was_training)
    stages = []
    for s in range(n_stage):
        cos = pairwise_abs_cos(grams[s])
        stages.append(
            StageStats(
                Moments.of(chunks["pd"][s]),
                Moments.of(chunks["pd_cal"][s]),
                Moments.of(chunks["pc"][s]),
                Moments.of(chunks["pc_scaled"][s]),
                Moments(float(cos.mean()), float(cos.std())),
            )
        )
    stats = CalibStats(stages)
    if not keep:
        return stats
    arrays = [
        {k: np.concatenate(chunks[k][s]) for k in ("pd", "pd_cal", "pc", "pc_scaled", "w")} for s in range(n_stage)
    ]
    return stats, arrays


# --------------------------------------------------------------------------
# ablation
# --------------------------------------------------------------------------

def _scores(result):
    sc = result.final_val if result.final_val is not None else result.final_train
    return sc.oa, sc.macc, sc.miou


def ablate(data: DataConfig, model_cfg: ModelConfig, cra_params: CalibrationParams, base: TrainConfig,
           variants=STAGE_VARIANTS, seeds=(0, 1, 2, 3, 4), log=None):
    """One row per (variant, seed); every variant sees the same data and
    backbone initialization for a given seed."""
    rows = []
    for seed in seeds:
        tr, va = make_datasets(data, model_cfg.task, seed)
        for variant in variants:
            tc = dataclasses.replace(base, stage=variant, seed=seed)
            res = train(model_cfg, cra_params, tc, tr, va)
            row = [variant, seed, *_scores(res)]
            rows.append(row)
            if log:
                log(row)
    return rows


def summarize(rows):
    out = []
    for variant in dict.fromkeys(r[0] for r in rows):
        vals = np.array([r[2:5] for r in rows if r[0] == variant], dtype=np.float64)
        mean, std = vals.mean(axis=0), vals.std(axis=0)
        out.append([variant, len(vals), mean[0], std[0], mean[1], std[1], mean[2], std[2]])
    return out


# --------------------------------------------------------------------------
# group-size sweep
# --------------------------------------------------------------------------

def group_size_sweep(group_sizes, data: DataConfig, model_cfg: ModelConfig, cra_params: CalibrationParams,
                     tc: TrainConfig, train_models=True, log=None):
    """Parameter census and final metric per group size."""
    if any(int(g) < 1 for g in group_sizes):
        raise ValueError("group sizes must be >= 1")
    tr = va = None
    if train_models:
        tr, va = make_datasets(data, model_cfg.task, tc.seed)
    rows = []
    for g in group_sizes:
        params = dataclasses.replace(cra_params, group_size=int(g))
        if train_models:
            res = train(model_cfg, params, tc, tr, va)
            model, metrics = res.model, _scores(res)
        else:
            model, metrics = PointCRANet(model_cfg, params, tc.stage, tc.seed), (float("nan"),) * 3
        row = [int(g), model.cra_parameter_count(), model.num_parameters(), *metrics]
        rows.append(row)
        if log:
            log(row)
    return rows
