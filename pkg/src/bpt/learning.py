"""Losses, optimizers, learning-rate schedules, quadruplet batches and the
training loops for classification and place recognition."""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import BinaryLinear, Module

CLASSIFICATION = "classification"
PLACE_RECOGNITION = "place_recognition"


# -- losses ---------------------------------------------------------------------


def smooth_labels(labels, num_classes: int, eps: float = 0.2) -> np.ndarray:
    """One-hot targets with ``eps`` of the mass spread over the other classes."""
    labels = np.asarray(labels, dtype=np.int64)
    one_hot = np.zeros((len(labels), num_classes))
    one_hot[np.arange(len(labels)), labels] = 1.0
    if eps == 0 or num_classes == 1:
        return one_hot
    return one_hot * (1.0 - eps) + (1.0 - one_hot) * eps / (num_classes - 1)


def soft_cross_entropy(logits, target) -> Tensor:
    """Mean over the batch of -sum(target * log_softmax(logits))."""
    logits = ad.as_tensor(logits)
    target = np.asarray(target, dtype=np.float64)
    if logits.shape != target.shape:
        raise ValueError(f"logits {logits.shape} and target {target.shape} differ")
    logp = ad.log_softmax(logits, axis=-1)
    per = ad.sum_(ad.mul(logp, -target), axis=-1)
    return ad.mean(per)


def _sq_dist(a: Tensor, b: Tensor) -> Tensor:
    return ad.sum_(ad.square(ad.sub(a, b)), axis=-1)


def lazy_quadruplet_loss(f_a, f_p, f_n, f_nstar, gamma: float = 0.5, theta: float = 0.2) -> Tensor:
    """Hardest-pair hinge on (anchor, positive, negative) plus a second hinge
    that pushes the negatives away from the extra negative.

    f_a, f_nstar: (D,); f_p: (Np, D); f_n: (Nn, D).
    """
    f_a, f_p, f_n, f_nstar = (ad.as_tensor(t) for t in (f_a, f_p, f_n, f_nstar))
    if f_p.ndim != 2 or f_n.ndim != 2 or f_p.shape[0] == 0 or f_n.shape[0] == 0:
        raise ValueError("need a non-empty positive set and a non-empty negative set")
    dims = {f_a.shape[-1], f_p.shape[-1], f_n.shape[-1], f_nstar.shape[-1]}
    if len(dims) != 1:
        raise ValueError(f"descriptor dimensions differ: {sorted(dims)}")
    n_p, n_n = f_p.shape[0], f_n.shape[0]
    d_pos = ad.reshape(_sq_dist(f_p, f_a), (n_p, 1))
    d_neg = ad.reshape(_sq_dist(f_n, f_a), (1, n_n))
    d_star = ad.reshape(_sq_dist(f_n, f_nstar), (1, n_n))
    first = ad.max_all(ad.relu(ad.add(ad.sub(d_pos, d_neg), gamma)))
    second = ad.max_all(ad.relu(ad.add(ad.sub(d_pos, d_star), theta)))
    return ad.add(first, second)


# -- optimizers -------------------------------------------------------------------


def sgd_step(param: np.ndarray, grad: np.ndarray, state: dict, lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0) -> np.ndarray:
    """v <- momentum * v + g;  w <- w - lr * v."""
    g = grad + weight_decay * param if weight_decay else grad
    v = state.get("v")
    v = g.copy() if v is None else momentum * v + g
    state["v"] = v
    return param - lr * v


def adam_step(param: np.ndarray, grad: np.ndarray, state: dict, lr: float, betas=(0.9, 0.999),
              eps: float = 1e-8, weight_decay: float = 0.0) -> np.ndarray:
    g = grad + weight_decay * param if weight_decay else grad
    b1, b2 = betas
    t = state.get("t", 0) + 1
    m = b1 * state.get("m", 0.0) + (1 - b1) * g
    v = b2 * state.get("v", 0.0) + (1 - b2) * g * g
    state.update(t=t, m=m, v=v)
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps)


class Optimizer:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr
        self.state: list[dict] = [{} for _ in self.params]

    def _update(self, p, g, state):
        raise NotImplementedError

    def step(self):
        for p, st in zip(self.params, self.state):
            if p.grad is not None:
                p.data = self._update(p.data, p.grad, st)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class SGD(Optimizer):
    def __init__(self, params, lr=0.01, momentum=0.9, weight_decay=0.0):
        super().__init__(params, lr)
        self.momentum, self.weight_decay = momentum, weight_decay

    def _update(self, p, g, st):
        return sgd_step(p, g, st, self.lr, self.momentum, self.weight_decay)


class Adam(Optimizer):
    def __init__(self, params, lr=5e-5, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        super().__init__(params, lr)
        self.betas, self.eps, self.weight_decay = betas, eps, weight_decay

    def _update(self, p, g, st):
        return adam_step(p, g, st, self.lr, self.betas, self.eps, self.weight_decay)


# -- schedules ---------------------------------------------------------------------


def cosine_schedule(step: int, total_steps: int, lr0: float, lr_min: float = 0.0) -> float:
    if total_steps <= 0:
        return lr0
    t = min(max(step, 0), total_steps) / total_steps
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t))


def linear_decay(step: int, total_steps: int, lr0: float, lr_end: float = 1e-5) -> float:
    if total_steps <= 0:
        return lr0
    t = min(max(step, 0), total_steps) / total_steps
    return lr0 + (lr_end - lr0) * t


# -- quadruplet batches -----------------------------------------------------------


@dataclass
class PlaceIndex:
    """Pose of every cloud plus the positive/negative distance thresholds."""

    poses: np.ndarray
    positive_radius: float = 0.5
    negative_radius: float = 2.0

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float64)
        if self.poses.ndim != 2:
            raise ValueError("poses must be (n, dims)")
        if not 0 <= self.positive_radius <= self.negative_radius:
            raise ValueError("need 0 <= positive_radius <= negative_radius")
        diff = self.poses[:, None, :] - self.poses[None, :, :]
        self._dist = np.sqrt((diff**2).sum(-1))

    def __len__(self):
        return len(self.poses)

    def distance(self, i, j):
        return self._dist[i, j]

    def positives(self, i: int) -> np.ndarray:
        d = self._dist[i]
        mask = d < self.positive_radius
        mask[i] = False
        return np.flatnonzero(mask)

    def negatives(self, i: int) -> np.ndarray:
        return np.flatnonzero(self._dist[i] > self.negative_radius)


@dataclass
class QuadrupletBatch:
    anchor: int
    positives: list[int]
    negatives: list[int]
    extra_negative: int

    def ids(self) -> list[int]:
        return [self.anchor, *self.positives, *self.negatives, self.extra_negative]


def build_quadruplet_batch(index: PlaceIndex, anchor_id: int, rng: np.random.Generator,
                           n_pos: int = 2, n_neg: int = 8) -> QuadrupletBatch | None:
    """Sample one training tuple for ``anchor_id``; None means skip this anchor.

    Positives are drawn without replacement when enough exist, otherwise with
    replacement.  The extra negative is drawn first, among negatives that have
    at least ``n_neg`` other negatives beyond the negative radius; the
    negatives then come from that far set, so a tuple is found whenever one
    exists.
    """
    pos = index.positives(anchor_id)
    neg = index.negatives(anchor_id)
    if len(pos) == 0 or len(neg) < n_neg + 1:
        return None
    far = index._dist[np.ix_(neg, neg)] > index.negative_radius
    eligible = np.flatnonzero(far.sum(axis=1) >= n_neg)
    if len(eligible) == 0:
        return None
    chosen_pos = rng.choice(pos, size=n_pos, replace=len(pos) < n_pos)
    e = int(rng.choice(eligible))
    extra = int(neg[e])
    chosen_neg = rng.choice(neg[far[e]], size=n_neg, replace=False)
    return QuadrupletBatch(int(anchor_id), [int(i) for i in chosen_pos], [int(i) for i in chosen_neg], extra)


# -- training -----------------------------------------------------------------------


@dataclass
class TrainConfig:
    task: str = CLASSIFICATION
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    schedule: str = "cosine"
    lr_min: float = 0.0
    epochs: int = 100
    batch_size: int = 32
    label_smoothing: float = 0.2
    gamma: float = 0.5
    theta: float = 0.2
    n_pos: int = 2
    n_neg: int = 8
    shadow_clip: float | None = 1.05
    # per-step augmentation (off by default): yaw in [-a, a] and gaussian jitter
    augment_yaw: float = 0.0
    augment_jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.task not in (CLASSIFICATION, PLACE_RECOGNITION):
            raise ValueError(f"unknown task {self.task!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("cosine", "linear", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.gamma < 0 or self.theta < 0:
            raise ValueError("loss margins must be non-negative")
        if self.augment_yaw < 0 or self.augment_jitter < 0:
            raise ValueError("augmentation strengths must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @classmethod
    def classification(cls, **kw) -> "TrainConfig":
        return cls(**{"task": CLASSIFICATION, "optimizer": "sgd", "lr": 0.01, "momentum": 0.9,
                      "schedule": "cosine", "batch_size": 32, **kw})

    @classmethod
    def place_recognition(cls, **kw) -> "TrainConfig":
        return cls(**{"task": PLACE_RECOGNITION, "optimizer": "adam", "lr": 5e-5, "schedule": "linear",
                      "lr_min": 1e-5, "epochs": 20, **kw})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def make_optimizer(model: Module, cfg: TrainConfig) -> Optimizer:
    if cfg.optimizer == "sgd":
        return SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    return Adam(model.parameters(), cfg.lr, weight_decay=cfg.weight_decay)


def lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.schedule == "cosine":
        return cosine_schedule(step, total, cfg.lr, cfg.lr_min)
    if cfg.schedule == "linear":
        return linear_decay(step, total, cfg.lr, cfg.lr_min)
    return cfg.lr


def clip_shadows(model: Module, bound: float | None):
    if bound is None:
        return
    for _, m in model.named_modules():
        if isinstance(m, BinaryLinear) and m.weight is not None:
            np.clip(m.weight.data, -bound, bound, out=m.weight.data)


@dataclass
class TrainResult:
    records: list[dict] = field(default_factory=list)
    epoch_records: list[dict] = field(default_factory=list)


LogFn = Callable[[dict], None]
EpochFn = Callable[[int, Module, dict], None]


def _slice_plans(plans, idx):
    return [(c[idx], n[idx]) for c, n in plans]


class _Augmenter:
    """Random yaw about z plus jitter, drawn from its own stream so batch
    sampling is unchanged.  Sampling plans are kept: rotation about z leaves
    every distance intact and the jitter is small."""

    def __init__(self, cfg: TrainConfig):
        self.yaw, self.jitter = cfg.augment_yaw, cfg.augment_jitter
        self.rng = np.random.default_rng([cfg.seed, 1]) if (self.yaw or self.jitter) else None

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        if self.rng is None:
            return pts
        out = pts.copy()
        if self.yaw:
            a = self.rng.uniform(-self.yaw, self.yaw, size=len(pts))
            c, s = np.cos(a)[:, None, None], np.sin(a)[:, None, None]
            xy = out[..., :2]
            out[..., :2] = np.concatenate([c * xy[..., :1] + s * xy[..., 1:], -s * xy[..., :1] + c * xy[..., 1:]], -1)
        if self.jitter:
            out += self.rng.normal(0, self.jitter, out.shape)
        return out


def train_classification(model, points: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
                         plans=None, log: LogFn | None = None, on_epoch: EpochFn | None = None) -> TrainResult:
    """Mini-batch training with soft cross-entropy; ``plans`` may be precomputed."""
    rng = np.random.default_rng(cfg.seed)
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if plans is None:
        plans = model.plan(points)
    n = len(points)
    steps_per_epoch = max(1, -(-n // cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    opt = make_optimizer(model, cfg)
    augment = _Augmenter(cfg)
    result = TrainResult()
    step = 0
    start = time.perf_counter()
    model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses, correct = [], 0
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            # a batch of one has no batch statistics
            if len(idx) < 2:
                continue
            opt.lr = lr_at(cfg, step, total)
            opt.zero_grad()
            logits = model(augment(points[idx]), _slice_plans(plans, idx))
            target = smooth_labels(labels[idx], logits.shape[-1], cfg.label_smoothing)
            loss = soft_cross_entropy(logits, target)
            loss.backward()
            opt.step()
            clip_shadows(model, cfg.shadow_clip)
            correct += int((logits.data.argmax(-1) == labels[idx]).sum())
            losses.append(float(loss.data))
            rec = {"epoch": epoch, "step": step, "loss": float(loss.data), "lr": opt.lr,
                   "wall_time": round(time.perf_counter() - start, 3)}
            result.records.append(rec)
            if log:
                log(rec)
            step += 1
        summary = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan"),
                   "train_acc": correct / n}
        result.epoch_records.append(summary)
        if on_epoch:
            on_epoch(epoch, model, summary)
    model.eval()
    return result


def train_place_recognition(model, points: np.ndarray, index: PlaceIndex, cfg: TrainConfig,
                            plans=None, log: LogFn | None = None, on_epoch: EpochFn | None = None) -> TrainResult:
    """One quadruplet tuple per step, every admissible anchor once per epoch."""
    rng = np.random.default_rng(cfg.seed)
    points = np.asarray(points, dtype=np.float64)
    if plans is None:
        plans = model.plan(points)
    n = len(points)
    total = cfg.epochs * n
    opt = make_optimizer(model, cfg)
    augment = _Augmenter(cfg)
    result = TrainResult()
    step = 0
    start = time.perf_counter()
    model.train()
    for epoch in range(cfg.epochs):
        losses = []
        for anchor in rng.permutation(n):
            batch = build_quadruplet_batch(index, int(anchor), rng, cfg.n_pos, cfg.n_neg)
            if batch is None:
                continue
            ids = np.array(batch.ids())
            opt.lr = lr_at(cfg, step, total)
            opt.zero_grad()
            desc = model(augment(points[ids]), _slice_plans(plans, ids))
            n_p, n_n = len(batch.positives), len(batch.negatives)
            f_a = ad.take(desc, 0)
            f_p = ad.take(desc, np.arange(1, 1 + n_p))
            f_n = ad.take(desc, np.arange(1 + n_p, 1 + n_p + n_n))
            f_star = ad.take(desc, 1 + n_p + n_n)
            loss = lazy_quadruplet_loss(f_a, f_p, f_n, f_star, cfg.gamma, cfg.theta)
            if loss.requires_grad:
                loss.backward()
                opt.step()
                clip_shadows(model, cfg.shadow_clip)
            losses.append(float(loss.data))
            rec = {"epoch": epoch, "step": step, "loss": float(loss.data), "lr": opt.lr,
                   "wall_time": round(time.perf_counter() - start, 3)}
            result.records.append(rec)
            if log:
                log(rec)
            step += 1
        summary = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan")}
        result.epoch_records.append(summary)
        if on_epoch:
            on_epoch(epoch, model, summary)
    model.eval()
    return result


def train(model, dataset, cfg: TrainConfig, **kw) -> TrainResult:
    """Dispatch on ``cfg.task``; ``dataset`` is (points, labels) or (points, PlaceIndex)."""
    points, target = dataset
    if cfg.task == CLASSIFICATION:
        return train_classification(model, points, target, cfg, **kw)
    return train_place_recognition(model, points, target, cfg, **kw)
