"""Retrieval and classification metrics, and the analytic cost model.

Cost conventions:
  * full-precision parameters are stored in 4 bytes (32-bit deployment);
  * a binary weight takes one bit, plus one 32-bit alpha per output row;
  * FLOPs of a dense product are 2 per multiply-accumulate;
  * a binary product costs 2 bit-ops (xnor + popcount) per multiply-accumulate,
    and ``lane`` bit-ops are counted as one effective FLOP (default 64);
  * the binary twin also pays full-precision FLOPs for beta (1 per input
    element) and for rescaling (1 per output element);
  * inference batch norm costs 2 FLOPs per element, softmax 4 and the
    L1 normalisation over queries 2.  Comparisons (ReLU, max-pool) are free.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import CLASSIFIER, ModelConfig

FP_BYTES = 4


# -- retrieval -------------------------------------------------------------------


@dataclass
class DescriptorDB:
    ids: np.ndarray
    poses: np.ndarray
    descriptors: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        self.poses = np.asarray(self.poses, dtype=np.float64)
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        if self.descriptors.ndim != 2:
            raise ValueError("descriptors must be (n, dim)")
        if not (len(self.ids) == len(self.poses) == len(self.descriptors)):
            raise ValueError("ids, poses and descriptors must have the same length")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("descriptor ids must be unique")

    def __len__(self):
        return len(self.ids)


def _ranked(db: DescriptorDB, queries: DescriptorDB) -> np.ndarray:
    """Database indices ordered by descriptor distance for each query (ties: lowest index)."""
    diff = queries.descriptors[:, None, :] - db.descriptors[None, :, :]
    d = np.einsum("qnd,qnd->qn", diff, diff)
    return np.argsort(d, axis=1, kind="stable")


def _true_positives(db: DescriptorDB, queries: DescriptorDB, positive_radius: float) -> np.ndarray:
    diff = queries.poses[:, None, :] - db.poses[None, :, :]
    return np.sqrt((diff**2).sum(-1)) <= positive_radius


def recall_curve(db: DescriptorDB, queries: DescriptorDB, max_n: int, positive_radius: float) -> np.ndarray:
    """Average recall for n = 1..max_n (entry n-1)."""
    if len(db) == 0:
        raise ValueError("empty database")
    if max_n < 1:
        raise ValueError("n must be >= 1")
    truth = _true_positives(db, queries, positive_radius)
    valid = truth.any(axis=1)
    if not valid.any():
        raise ValueError("no query has a ground-truth positive in the database")
    ranked = _ranked(db, _subset(queries, valid))
    hits = np.take_along_axis(truth[valid], ranked, axis=1)[:, :max_n]
    first = np.where(hits.any(axis=1), hits.argmax(axis=1), max_n)
    n = np.arange(1, max_n + 1)
    return (first[None, :] < n[:, None]).mean(axis=1)


def _subset(db: DescriptorDB, mask) -> DescriptorDB:
    return DescriptorDB(db.ids[mask], db.poses[mask], db.descriptors[mask])


def recall_at_n(db: DescriptorDB, queries: DescriptorDB, n: int, positive_radius: float) -> float:
    """Fraction of queries with a true positive among their top-n neighbours.

    Queries with no ground-truth positive are left out.
    """
    return float(recall_curve(db, queries, n, positive_radius)[-1])


def one_percent_n(db_size: int) -> int:
    """max(1, round-half-up(0.01 * db_size))."""
    return max(1, (db_size + 50) // 100)


def recall_at_1percent(db: DescriptorDB, queries: DescriptorDB, positive_radius: float) -> float:
    return recall_at_n(db, queries, one_percent_n(len(db)), positive_radius)


def classification_metrics(predictions, labels) -> tuple[float, float]:
    """(overall accuracy, mean per-class accuracy over classes present in labels)."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or labels.size == 0:
        raise ValueError("predictions and labels must be non-empty and the same shape")
    correct = predictions == labels
    oa = float(correct.mean())
    per_class = [correct[labels == c].mean() for c in np.unique(labels)]
    return oa, float(np.mean(per_class))


# -- cost model ---------------------------------------------------------------------


@dataclass
class CostRow:
    name: str
    binary: bool
    params: int
    bytes: float
    flops: int  # full-precision FLOPs executed in this twin
    bops: int  # binary ops executed in this twin
    effective_flops: float
    fp_bytes: int  # the same layer stored in 32-bit
    fp_flops: int  # the same layer executed in full precision


@dataclass
class CostReport:
    twin: str
    n_points: int
    lane: int
    rows: list[CostRow]
    totals: dict = field(default_factory=dict)
    fp_totals: dict = field(default_factory=dict)
    size_reduction_pct: float = 0.0
    flops_reduction_pct: float = 0.0

    def to_dict(self) -> dict:
        return {
            "twin": self.twin,
            "n_points": self.n_points,
            "lane": self.lane,
            "rows": [asdict(r) for r in self.rows],
            "totals": self.totals,
            "fp_totals": self.fp_totals,
            "size_reduction_pct": self.size_reduction_pct,
            "flops_reduction_pct": self.flops_reduction_pct,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        head = f"{'layer':44s} {'bin':>3s} {'params':>10s} {'bytes':>12s} {'FLOPs':>14s} {'BOPs':>14s} {'eff.FLOPs':>14s}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{r.name:44s} {'y' if r.binary else 'n':>3s} {r.params:10d} {r.bytes:12.0f} "
                f"{r.flops:14d} {r.bops:14d} {r.effective_flops:14.0f}"
            )
        t = self.totals
        lines.append("-" * len(head))
        lines.append(
            f"{'total':44s} {'':>3s} {t['params']:10d} {t['bytes']:12.0f} {t['flops']:14d} "
            f"{t['bops']:14d} {t['effective_flops']:14.0f}"
        )
        f = self.fp_totals
        lines.append(f"full-precision twin: {f['bytes']} bytes, {f['flops']} FLOPs")
        lines.append(
            f"size reduction {self.size_reduction_pct:.1f}%  FLOPs reduction {self.flops_reduction_pct:.1f}%"
        )
        return "\n".join(lines)


def _layer_specs(cfg: ModelConfig, n_points: int):
    """(name, kind, in, out, rows, binary) for every cost-bearing op.

    kind: 'linear' (rows x in x out MACs), 'bn' (out channels over rows),
    'matmul' (attention product: rows x in x out MACs, no parameters),
    'softmax' (rows x in elements, softmax then L1 normalisation).
    """
    specs = []
    binary = cfg.binary
    widths = (3,) + tuple(cfg.embed.point_widths)
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        specs.append((f"embed.point.{i}.linear", "linear", a, b, n_points, False))
        specs.append((f"embed.point.{i}.bn", "bn", b, b, n_points, False))
    c = widths[-1]
    m = n_points
    for s, ((m, k), st) in enumerate(zip(cfg.embed.stage_sizes(n_points), cfg.embed.stages)):
        dims = [2 * c] + [st.width] * cfg.embed.layers_per_stage
        for j, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            specs.append((f"embed.stage{s}.{j}.linear", "linear", a, b, m * k, False))
            specs.append((f"embed.stage{s}.{j}.bn", "bn", b, b, m * k, False))
        c = st.width
    d, dq = cfg.d_model, cfg.d_model // cfg.qk_ratio
    specs += [
        ("transformer.input.0.linear", "linear", c, d, m, binary),
        ("transformer.input.0.bn", "bn", d, d, m, False),
        ("transformer.input.1.linear", "linear", d, d, m, binary),
        ("transformer.input.1.bn", "bn", d, d, m, False),
    ]
    for b in range(cfg.n_blocks):
        p = f"transformer.block{b}"
        specs += [
            (f"{p}.q", "linear", d, dq, m, binary),
            (f"{p}.k", "linear", d, dq, m, binary),
            (f"{p}.v", "linear", d, d, m, binary),
            (f"{p}.energy", "matmul", dq, m, m, binary),
            (f"{p}.softmax", "softmax", m, m, m, False),
            (f"{p}.attn_v", "matmul", m, d, m, binary),
            (f"{p}.trans.linear", "linear", d, d, m, binary),
            (f"{p}.trans.bn", "bn", d, d, m, False),
        ]
    specs += [
        ("transformer.output.linear", "linear", cfg.n_blocks * d, cfg.out_dim, m, binary),
        ("transformer.output.bn", "bn", cfg.out_dim, cfg.out_dim, m, False),
    ]
    if cfg.head == CLASSIFIER:
        dims = (2 * cfg.out_dim,) + tuple(cfg.head_hidden)
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            specs.append((f"head.hidden.{i}.linear", "linear", a, b, 1, False))
            specs.append((f"head.hidden.{i}.bn", "bn", b, b, 1, False))
        specs.append(("head.out", "linear_bias", dims[-1], cfg.num_classes, 1, False))
    return specs


def cost_report(cfg: ModelConfig, n_points: int = 1024, lane: int = 64) -> CostReport:
    """Per-layer parameters, storage and operation counts for ``cfg``'s twin,
    with reductions relative to the same layout in full precision."""
    rows = []
    for name, kind, a, b, r, binary in _layer_specs(cfg, n_points):
        elementwise = 0
        if kind == "bn":
            params = 2 * a
            macs = 0
            elementwise = 2 * r * a
        elif kind == "softmax":
            params = 0
            macs = 0
            elementwise = 6 * r * a
        elif kind == "matmul":
            params = 0
            macs = r * a * b
        else:
            params = a * b + (b if kind == "linear_bias" else 0)
            macs = r * a * b
        fp_bytes = FP_BYTES * params
        fp_flops = 2 * macs + elementwise
        if binary:
            nbytes = 0 if kind == "matmul" else (a * b) / 8 + FP_BYTES * b
            # beta over the (r, a) input, alpha*beta over the (r, b) output
            flops, bops = r * a + r * b, 2 * macs
        else:
            nbytes, flops, bops = fp_bytes, fp_flops, 0
        rows.append(CostRow(name, binary, params, nbytes, flops, bops, flops + bops / lane, fp_bytes, fp_flops))
    totals = {
        "params": sum(r.params for r in rows),
        "bytes": sum(r.bytes for r in rows),
        "flops": sum(r.flops for r in rows),
        "bops": sum(r.bops for r in rows),
        "effective_flops": sum(r.effective_flops for r in rows),
    }
    fp_totals = {"bytes": sum(r.fp_bytes for r in rows), "flops": sum(r.fp_flops for r in rows)}
    size_red = 100.0 * (1 - totals["bytes"] / fp_totals["bytes"]) if fp_totals["bytes"] else 0.0
    flops_red = 100.0 * (1 - totals["effective_flops"] / fp_totals["flops"]) if fp_totals["flops"] else 0.0
    return CostReport(cfg.twin, n_points, lane, rows, totals, fp_totals, size_red, flops_red)
