"""Fast oracle checks shipped with the package (``bpt selftest``).

Each check compares an optimized routine against a slow independent
reference on random inputs and returns (name, passed, detail).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .binarize import activation_binarize, binary_linear, weight_binarize
from .bitops import bgemm, pack_binary01, pack_signs, unpack
from .evalkit import DescriptorDB, recall_at_n
from .learning import lazy_quadruplet_loss
from .pointops import farthest_point_sampling, knn_indices


def check_bgemm(rng, trials=200) -> tuple[bool, str]:
    for _ in range(trials):
        m, n, k = rng.integers(1, 33, 2).tolist() + [int(rng.integers(1, 200))]
        lane = int(rng.choice([32, 64]))
        a = rng.choice([-1, 1], size=(m, k)).astype(np.int8)
        b = rng.choice([-1, 1], size=(n, k)).astype(np.int8)
        if not np.array_equal(bgemm(pack_signs(a, lane), pack_signs(b, lane)), a.astype(np.int64) @ b.T):
            return False, f"pm1 mismatch at {m}x{n}x{k} lane {lane}"
        a01 = rng.integers(0, 2, size=(m, k)).astype(np.int8)
        if not np.array_equal(bgemm(pack_binary01(a01, lane), pack_signs(b, lane)), a01.astype(np.int64) @ b.T):
            return False, f"01 mismatch at {m}x{n}x{k} lane {lane}"
    return True, f"{trials} random shapes"


def check_pack_roundtrip(rng, trials=200) -> tuple[bool, str]:
    for _ in range(trials):
        r, c = int(rng.integers(0, 9)), int(rng.integers(0, 150))
        lane = int(rng.choice([32, 64]))
        a = rng.choice([-1, 1], size=(r, c)).astype(np.int8)
        if not np.array_equal(unpack(pack_signs(a, lane)), a):
            return False, f"roundtrip failed for {r}x{c}"
    return True, f"{trials} matrices"


def check_binary_linear(rng, trials=100) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(trials):
        out, k, rows = int(rng.integers(1, 20)), int(rng.integers(1, 130)), int(rng.integers(1, 10))
        w = rng.normal(size=(out, k))
        signed = bool(rng.integers(0, 2))
        a = rng.normal(size=(rows, k)) if signed else rng.uniform(0, 1, size=(rows, k))
        got = binary_linear(w, a, signed_act=signed)
        wb = weight_binarize(w).dense()
        ab = activation_binarize(a, signed=signed).dense()
        ref = ab @ wb.T
        # relative to the sum of absolute terms, so exact cancellations are fair
        scale = np.maximum(np.abs(ab) @ np.abs(wb).T, 1e-300)
        worst = max(worst, float(np.max(np.abs(got - ref) / scale)))
    return worst <= 1e-6, f"max relative error {worst:.2e}"


def _fd_check(f, x, eps=1e-4) -> float:
    x = ad.Tensor(x.copy(), requires_grad=True)
    ad.backward(f(x))
    num = np.zeros_like(x.data)
    for i in np.ndindex(x.shape):
        old = x.data[i]
        x.data[i] = old + eps
        hi = float(f(ad.Tensor(x.data.copy())).data)
        x.data[i] = old - eps
        lo = float(f(ad.Tensor(x.data.copy())).data)
        x.data[i] = old
        num[i] = (hi - lo) / (2 * eps)
    return float(np.abs(x.grad - num).max() / max(np.abs(num).max(), 1e-8))


def check_gradients(rng) -> tuple[bool, str]:
    w = rng.normal(size=(4, 5))
    cases = {
        "softmax": lambda t: ad.sum_(ad.square(ad.softmax(t, axis=-1))),
        "l1_normalize": lambda t: ad.sum_(ad.square(ad.l1_normalize(ad.abs_(t), axis=0))),
        "linear": lambda t: ad.sum_(ad.square(ad.linear(t, ad.Tensor(w)))),
        "l2_normalize": lambda t: ad.sum_(ad.mul(ad.l2_normalize(t, axis=-1), ad.Tensor(np.arange(5.0)))),
    }
    worst, name = 0.0, ""
    for k, f in cases.items():
        err = _fd_check(f, rng.normal(size=(3, 5)))
        if err > worst:
            worst, name = err, k
    return worst <= 1e-4, f"max relative error {worst:.2e} ({name or 'all'})"


def check_fps_knn(rng, trials=50) -> tuple[bool, str]:
    for _ in range(trials):
        n = int(rng.integers(2, 64))
        pts = rng.normal(size=(n, 3))
        m = int(rng.integers(1, n + 1))
        chosen = [0]
        for _ in range(m - 1):
            best, best_d = -1, -1.0
            for j in range(n):
                d = min(float(((pts[j] - pts[c]) ** 2).sum()) for c in chosen)
                if d > best_d:
                    best, best_d = j, d
            chosen.append(best)
        if not np.array_equal(farthest_point_sampling(pts, m), chosen):
            return False, f"FPS mismatch at n={n} m={m}"
        k = int(rng.integers(1, n + 1))
        got = knn_indices(pts, chosen, k)
        for row, c in zip(got, chosen):
            order = sorted(range(n), key=lambda j: (j != c, float(((pts[j] - pts[c]) ** 2).sum()), j))
            if list(row) != order[:k]:
                return False, f"kNN mismatch at n={n} k={k}"
    return True, f"{trials} clouds"


def check_quadruplet(rng, trials=100) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(trials):
        a, p, n, s = rng.normal(size=(8,)), rng.normal(size=(2, 8)), rng.normal(size=(8, 8)), rng.normal(size=(8,))
        got = float(lazy_quadruplet_loss(a, p, n, s, 0.5, 0.2).data)
        t1 = t2 = 0.0
        for i in range(2):
            dp = float(((a - p[i]) ** 2).sum())
            for j in range(8):
                t1 = max(t1, dp - float(((a - n[j]) ** 2).sum()) + 0.5)
                t2 = max(t2, dp - float(((s - n[j]) ** 2).sum()) + 0.2)
        worst = max(worst, abs(got - (t1 + t2)))
    return worst <= 1e-10, f"max abs error {worst:.2e}"


def check_recall(rng, trials=30) -> tuple[bool, str]:
    for _ in range(trials):
        n_db, n_q = int(rng.integers(1, 60)), int(rng.integers(1, 20))
        db = DescriptorDB(np.arange(n_db), rng.integers(0, 5, (n_db, 2)), rng.normal(size=(n_db, 4)))
        q = DescriptorDB(np.arange(n_q), rng.integers(0, 5, (n_q, 2)), rng.normal(size=(n_q, 4)))
        has = [(np.linalg.norm(db.poses - q.poses[i], axis=1) <= 0.5).any() for i in range(n_q)]
        if not any(has):
            continue
        n = int(rng.integers(1, n_db + 1))
        hits = 0
        for i in range(n_q):
            if not has[i]:
                continue
            d = [float(((q.descriptors[i] - db.descriptors[j]) ** 2).sum()) for j in range(n_db)]
            top = sorted(range(n_db), key=lambda j: (d[j], j))[:n]
            hits += any(np.linalg.norm(db.poses[j] - q.poses[i]) <= 0.5 for j in top)
        if abs(recall_at_n(db, q, n, 0.5) - hits / sum(has)) > 1e-12:
            return False, f"recall mismatch db={n_db} n={n}"
    return True, f"{trials} databases"


CHECKS = {
    "bgemm": check_bgemm,
    "pack_roundtrip": check_pack_roundtrip,
    "binary_linear": check_binary_linear,
    "gradients": check_gradients,
    "fps_knn": check_fps_knn,
    "quadruplet_loss": check_quadruplet,
    "recall": check_recall,
}


def run(seed: int = 0) -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn(np.random.default_rng([seed, len(results)]))
        except Exception as e:  # a crash counts as a failed oracle
            ok, detail = False, f"{type(e).__name__}: {e}"
        results.append((name, bool(ok), detail))
    return results
