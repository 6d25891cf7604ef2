"""Datasets, AdamW with cosine decay, the training loop and evaluation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import losses
from ..cra import CalibrationParams
from ..diffnet import tensor as T
from . import scenes as S
from .model import ModelConfig, PointCRANet, batch_plans, build_plan, input_features, stage_settings

METRIC_HEADER = ["epoch", "split", "oa", "macc", "miou", "task", "reg", "orth", "total", "lr"]
STEP_HEADER = ["step", "task", "reg", "orth", "total"]


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    lr: float = 0.005
    lr_final: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 0
    schedule: str = "cosine"
    stage: str = "D"
    lambda1: float = 0.1
    lambda2: float = 0.1
    smoothing: float = 0.2
    centered_orth: bool = False
    augment: bool = False
    target_oa: float = 0.0  # stop once training OA reaches this; 0 disables
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0 or self.lr_final < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.schedule != "cosine":
            raise ValueError(f"unsupported schedule {self.schedule!r}")
        stage_settings(self.stage)

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

class Dataset:
    """Scenes plus cached neighborhood plans for one model geometry."""

    def __init__(self, scenes, task):
        if not scenes:
            raise ValueError("dataset is empty")
        self.scenes = scenes
        self.task = task
        self._plans = {}

    def __len__(self):
        return len(self.scenes)

    def plan(self, i, cfg: ModelConfig):
        key = (i, cfg.grouper, cfg.k, cfg.ratio, len(cfg.widths), tuple(cfg.radius))
        if key not in self._plans:
            self._plans[key] = build_plan(self.scenes[i].cloud.positions, cfg)
        return self._plans[key]

    def labels(self, i):
        sc = self.scenes[i]
        return np.array([sc.label]) if self.task == "cls" else sc.cloud.labels

    def batch(self, ids, cfg: ModelConfig, positions=None):
        pos = positions if positions is not None else [self.scenes[i].cloud.positions for i in ids]
        pos = np.concatenate(pos)
        plan = batch_plans([self.plan(i, cfg) for i in ids])
        labels = np.concatenate([self.labels(i) for i in ids])
        return pos, input_features(pos), plan, labels


@dataclass
class DataConfig:
    kind: str = "composite"
    scenes: int = 32
    val_scenes: int = 32
    points: int = 512
    band: float = 0.08
    noise: float = 0.005
    contamination: float = 0.5
    workers: int = 1

    def to_dict(self):
        return asdict(self)


def make_datasets(data: DataConfig, task, seed):
    """(train, val) datasets; val is None when ``val_scenes`` is 0."""
    if task == "cls":
        specs = S.classification_specs(data.points, data.noise)
    else:
        spec = S.SceneSpec(data.kind, data.points, data.band, data.noise, data.contamination)
        specs = lambda i: spec
    train = Dataset(S.gen_dataset(specs, data.scenes, seed, "train", data.workers), task)
    val = None
    if data.val_scenes:
        val = Dataset(S.gen_dataset(specs, data.val_scenes, seed, "val", data.workers), task)
    return train, val


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

def cosine_lr(epoch, epochs, lr0, lr_final):
    return lr_final + 0.5 * (lr0 - lr_final) * (1.0 + math.cos(math.pi * epoch / epochs))


class AdamW:
    """Adaptive moments with decoupled weight decay on matrices only."""

    def __init__(self, params, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.wd, self.betas, self.eps = weight_decay, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.wd and p.ndim >= 2:
                p.data *= 1.0 - lr * self.wd
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def confusion_matrix(pred, labels, num_classes):
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if pred.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, pred), 1)
    return cm


def metrics_from_confusion(cm):
    """OA, mAcc, mIoU; rows are truth, columns predictions.

    Classes absent from both truth and predictions are left out of the
    means.  A class that is only predicted has accuracy 0.
    """
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total == 0:
        raise ValueError("cannot score an empty prediction set")
    tp = np.diag(cm)
    truth, predicted = cm.sum(axis=1), cm.sum(axis=0)
    present = (truth + predicted) > 0
    acc = tp[present] / np.maximum(truth[present], 1.0)
    iou = tp[present] / (truth + predicted - tp)[present]
    return float(tp.sum() / total), float(acc.mean()), float(iou.mean())


@dataclass
class Scores:
    oa: float
    macc: float
    miou: float
    task: float = 0.0
    reg: float = 0.0
    orth: float = 0.0
    total: float = 0.0
    confusion: np.ndarray = field(default=None, repr=False)


def _loss_terms(model, fwd, labels, tc: TrainConfig):
    task = losses.cross_entropy(fwd.logits, labels, tc.smoothing)
    params = model.params
    stages = model.calibration_params()
    reg = losses.reg_loss_stages(stages, params.phi_l, params.phi_h) if stages else T.Tensor(0.0)
    ws = [wt.w for wt in fwd.weights]
    orth = losses.orth_loss_stages(ws, tc.centered_orth) if ws else T.Tensor(0.0)
    if model.aux_losses:
        return losses.total_loss(task, reg, orth, tc.lambda1, tc.lambda2)
    return losses.total_loss(task, reg, orth, 0.0, 0.0)


def _batches(n, size, order=None):
    order = np.arange(n) if order is None else order
    return [order[i : i + size] for i in range(0, n, size)]


def evaluate(model, dataset: Dataset, task=None, tc: TrainConfig | None = None, batch_size=16):
    """Scores the model in inference mode over the whole dataset."""
    if dataset is None or len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    task = task or dataset.task
    tc = tc or TrainConfig()
    was_training = model.training
    model.eval()
    k = model.cfg.num_classes
    cm = np.zeros((k, k), dtype=np.int64)
    sums = np.zeros(4)
    n_items = 0
    try:
        with T.no_grad():
            for ids in _batches(len(dataset), batch_size):
                pos, feat, plan, labels = dataset.batch(ids, model.cfg)
                fwd = model(pos, feat, plan, len(ids))
                br = _loss_terms(model, fwd, labels, tc).values()
                sums += len(labels) * np.array([br["task"], br["reg"], br["orth"], br["total"]])
                n_items += len(labels)
                cm += confusion_matrix(fwd.logits.data.argmax(axis=1), labels, k)
    finally:
        model.train(was_training)
    oa, macc, miou = metrics_from_confusion(cm)
    return Scores(oa, macc, miou, *(sums / n_items), confusion=cm)


@dataclass
class TrainResult:
    model: PointCRANet
    metric_rows: list
    step_rows: list
    epochs_run: int
    final_train: Scores
    final_val: Scores | None


def _fmt(x):
    return f"{x:.10g}" if isinstance(x, float) else str(x)


def _row(epoch, split, sc: Scores, lr):
    return [epoch, split, sc.oa, sc.macc, sc.miou, sc.task, sc.reg, sc.orth, sc.total, lr]


def build_model(model_cfg: ModelConfig, cra_params: CalibrationParams, tc: TrainConfig):
    return PointCRANet(model_cfg, cra_params, tc.stage, tc.seed)


def train(model_cfg: ModelConfig, cra_params: CalibrationParams, tc: TrainConfig, dataset: Dataset,
          val: Dataset | None = None, log=None) -> TrainResult:
    """Fully deterministic for a fixed configuration.

    ``log(epoch, rows)`` is called after each evaluated epoch.
    """
    model = build_model(model_cfg, cra_params, tc)
    opt = AdamW(model.parameters(), tc.weight_decay)
    metric_rows, step_rows = [], []
    step = 0
    train_scores = val_scores = None
    epochs_run = 0
    for epoch in range(tc.epochs):
        lr = cosine_lr(epoch, tc.epochs, tc.lr, tc.lr_final)
        rng = np.random.default_rng([tc.seed, 3, epoch])
        order = rng.permutation(len(dataset))
        model.train()
        for ids in _batches(len(dataset), tc.batch_size, order):
            positions = None
            if tc.augment:
                positions = [
                    S.augment(dataset.scenes[i].cloud.positions, np.random.default_rng([tc.seed, 4, epoch, int(i)]))
                    for i in ids
                ]
            pos, feat, plan, labels = dataset.batch(ids, model_cfg, positions)
            model.zero_grad()
            fwd = model(pos, feat, plan, len(ids))
            br = _loss_terms(model, fwd, labels, tc)
            vals = br.values()
            if not all(math.isfinite(v) for v in vals.values()):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} step {step} (lr {lr:.3g}): "
                    + ", ".join(f"{k}={v}" for k, v in vals.items())
                )
            br.total.backward()
            opt.step(lr)
            step_rows.append([step, vals["task"], vals["reg"], vals["orth"], vals["total"]])
            step += 1
        epochs_run = epoch + 1
        last = epoch == tc.epochs - 1
        if (epoch + 1) % tc.eval_every and not last and not tc.target_oa:
            continue
        train_scores = evaluate(model, dataset, tc=tc, batch_size=max(tc.batch_size, 16))
        if not math.isfinite(train_scores.total):
            raise DivergenceError(f"non-finite evaluation loss after epoch {epoch} (lr {lr:.3g})")
        rows = [_row(epoch, "train", train_scores, lr)]
        if val is not None:
            val_scores = evaluate(model, val, tc=tc, batch_size=max(tc.batch_size, 16))
            rows.append(_row(epoch, "val", val_scores, lr))
        metric_rows.extend(rows)
        if log:
            log(epoch, rows)
        if tc.target_oa and train_scores.oa >= tc.target_oa:
            break
    return TrainResult(model, metric_rows, step_rows, epochs_run, train_scores, val_scores)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(v) for v in r) + "\n")
