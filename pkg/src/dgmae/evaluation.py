"""Downstream evaluation of frozen embeddings: linear probe, k-means clustering, edge similarity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .graphcore import Graph


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        parts = [np.asarray(p, dtype=np.int64) for p in (self.train, self.val, self.test)]
        allidx = np.concatenate(parts)
        if np.unique(allidx).size != allidx.size:
            raise ValueError("split parts must be disjoint")
        if allidx.size and allidx.min() < 0:
            raise ValueError("negative index in split")

    def check(self, n: int) -> None:
        for p in (self.train, self.val, self.test):
            if len(p) and np.max(p) >= n:
                raise ValueError("split index out of range")


def random_split(n: int, train: float = 0.48, val: float = 0.32, seed: int = 0) -> Split:
    """Random train/val/test split; the remainder after train and val is test."""
    if train <= 0 or val < 0 or train + val >= 1:
        raise ValueError("need 0 < train, 0 <= val, train + val < 1")
    perm = np.random.default_rng(seed).permutation(n)
    a = int(round(train * n))
    b = a + int(round(val * n))
    return Split(np.sort(perm[:a]), np.sort(perm[a:b]), np.sort(perm[b:]))


@dataclass
class LogisticModel:
    W: np.ndarray
    b: np.ndarray
    center: np.ndarray
    scale: float

    def logits(self, H) -> np.ndarray:
        return ((np.asarray(H) - self.center) / self.scale) @ self.W + self.b

    def predict(self, H) -> np.ndarray:
        return np.argmax(self.logits(H), axis=1)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def logistic_objective(W, b, H, y, l2: float) -> float:
    """Mean cross-entropy plus ``l2 / 2 * ||W||^2`` (bias unpenalized)."""
    z = H @ W + b
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean() + 0.5 * l2 * np.sum(W * W))


def fit_logistic(H, y, num_classes: int, l2: float = 1e-3, iters: int = 500,
                 H_val=None, y_val=None, eval_every: int = 10) -> LogisticModel:
    """Multinomial logistic regression by full-batch accelerated gradient descent.

    Inputs are centered and divided by their RMS row norm (both commute with
    rotations, so the probe is rotation invariant). Step size is the inverse
    of a Lipschitz bound on the gradient. With validation data the iterate
    with the best validation accuracy is returned.
    """
    H = np.asarray(H, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if np.unique(y).size < 2:
        raise ValueError("training labels contain a single class")
    center = H.mean(axis=0)
    Hc = H - center
    scale = float(np.sqrt(np.mean(np.sum(Hc * Hc, axis=1)))) or 1.0
    Hc = Hc / scale
    n, d = Hc.shape
    Y = np.zeros((n, num_classes))
    Y[np.arange(n), y] = 1.0
    # softmax CE Hessian is bounded by 1/2 * [H 1]^T [H 1] / n
    top = np.linalg.norm(np.hstack([Hc, np.ones((n, 1))]), 2) ** 2 / n
    step = 1.0 / (0.5 * top + l2)

    W = np.zeros((d, num_classes))
    b = np.zeros(num_classes)
    W_prev, b_prev = W, b
    best = (-1.0, W, b)
    use_val = H_val is not None and y_val is not None and len(y_val) > 0
    if use_val:
        Hv = (np.asarray(H_val, dtype=np.float64) - center) / scale
        yv = np.asarray(y_val, dtype=np.int64)
    for t in range(1, iters + 1):
        mom = (t - 1) / (t + 2)
        VW = W + mom * (W - W_prev)
        Vb = b + mom * (b - b_prev)
        R = _softmax(Hc @ VW + Vb) - Y
        gW = Hc.T @ R / n + l2 * VW
        gb = R.mean(axis=0)
        W_prev, b_prev = W, b
        W = VW - step * gW
        b = Vb - step * gb
        if use_val and (t % eval_every == 0 or t == iters):
            acc = float(np.mean(np.argmax(Hv @ W + b, axis=1) == yv))
            if acc > best[0]:
                best = (acc, W, b)
    if use_val:
        W, b = best[1], best[2]
    return LogisticModel(W, b, center, scale)


def linear_probe(H, y, split: Split, l2: float = 1e-3, iters: int = 500) -> float:
    """Test accuracy of a logistic-regression probe on frozen embeddings."""
    H = np.asarray(H, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if not np.all(np.isfinite(H)):
        raise ValueError("embeddings contain non-finite values")
    split.check(len(y))
    C = int(y.max()) + 1
    model = fit_logistic(H[split.train], y[split.train], C, l2, iters, H[split.val], y[split.val])
    return float(np.mean(model.predict(H[split.test]) == y[split.test]))


def contingency(a, b) -> np.ndarray:
    a = np.unique(np.asarray(a), return_inverse=True)[1]
    b = np.unique(np.asarray(b), return_inverse=True)[1]
    table = np.zeros((a.max(initial=-1) + 1, b.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (a, b), 1)
    return table


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(labels, pred) -> float:
    """Mutual information normalized by the arithmetic mean of the two entropies."""
    t = contingency(labels, pred)
    n = t.sum()
    ha, hb = _entropy(t.sum(axis=1)), _entropy(t.sum(axis=0))
    if ha == 0 and hb == 0:
        return 1.0
    nz = t > 0
    outer = np.outer(t.sum(axis=1), t.sum(axis=0))
    mi = float(np.sum(t[nz] / n * np.log(t[nz] * n / outer[nz])))
    return float(np.clip(mi / (0.5 * (ha + hb)), 0.0, 1.0))


def ari(labels, pred) -> float:
    t = contingency(labels, pred)
    n = t.sum()

    def comb2(x):
        x = np.asarray(x, dtype=np.float64)
        return float(np.sum(x * (x - 1) / 2))

    index = comb2(t)
    rows, cols = comb2(t.sum(axis=1)), comb2(t.sum(axis=0))
    total = n * (n - 1) / 2
    expected = rows * cols / total if total else 0.0
    max_index = 0.5 * (rows + cols)
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def hungarian_map(labels, pred) -> np.ndarray:
    """Relabel ``pred`` with the label assignment maximizing agreement."""
    labels = np.asarray(labels)
    pred = np.asarray(pred)
    lab_ids, lab_inv = np.unique(labels, return_inverse=True)
    pred_ids, pred_inv = np.unique(pred, return_inverse=True)
    k = max(lab_ids.size, pred_ids.size)
    table = np.zeros((k, k), dtype=np.int64)
    np.add.at(table, (pred_inv, lab_inv), 1)
    rows, cols = linear_sum_assignment(-table)
    mapping = np.full(k, -1, dtype=np.int64)
    for r, c in zip(rows, cols):
        if c < lab_ids.size:
            mapping[r] = lab_ids[c]
    # predicted clusters left unmatched map to a label id that never occurs
    unmatched = mapping < 0
    mapping[unmatched] = labels.max(initial=0) + 1 + np.arange(unmatched.sum())
    return mapping[pred_inv]


def cluster_acc(labels, pred) -> float:
    return float(np.mean(hungarian_map(labels, pred) == np.asarray(labels)))


def macro_f1(labels, pred_mapped) -> float:
    labels = np.asarray(labels)
    pred_mapped = np.asarray(pred_mapped)
    scores = []
    for c in np.unique(labels):
        tp = np.sum((pred_mapped == c) & (labels == c))
        fp = np.sum((pred_mapped == c) & (labels != c))
        fn = np.sum((pred_mapped != c) & (labels == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


@dataclass(frozen=True)
class ClusterReport:
    acc: float
    nmi: float
    ari: float
    f1: float
    acc_std: float = 0.0
    nmi_std: float = 0.0
    ari_std: float = 0.0
    f1_std: float = 0.0

    def rows(self) -> list[tuple[str, float, float]]:
        return [
            ("acc", self.acc, self.acc_std),
            ("nmi", self.nmi, self.nmi_std),
            ("ari", self.ari, self.ari_std),
            ("f1", self.f1, self.f1_std),
        ]


def cluster_scores(labels, pred) -> ClusterReport:
    mapped = hungarian_map(labels, pred)
    return ClusterReport(
        acc=float(np.mean(mapped == np.asarray(labels))),
        nmi=nmi(labels, pred),
        ari=ari(labels, pred),
        f1=macro_f1(labels, mapped),
    )


def kmeans(H, k: int, seed: int = 0, tol: float = 1e-6, max_iter: int = 300) -> np.ndarray:
    """k-means++ seeding followed by Lloyd iterations; returns cluster ids."""
    H = np.asarray(H, dtype=np.float64)
    n = H.shape[0]
    if k > n:
        raise ValueError("more clusters than points")
    rng = np.random.default_rng(seed)
    centers = np.empty((k, H.shape[1]))
    centers[0] = H[rng.integers(n)]
    d2 = np.sum((H - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers[j] = H[idx]
        d2 = np.minimum(d2, np.sum((H - centers[j]) ** 2, axis=1))
    sq = np.sum(H * H, axis=1)[:, None]
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dist = sq - 2 * H @ centers.T + np.sum(centers * centers, axis=1)[None, :]
        assign = np.argmin(dist, axis=1)
        new = centers.copy()
        for j in range(k):
            members = assign == j
            if members.any():
                new[j] = H[members].mean(axis=0)
        shift = float(np.sum((new - centers) ** 2))
        centers = new
        if shift <= tol:
            break
    return assign


def kmeans_cluster(H, y, C: int, seeds: int = 10) -> ClusterReport:
    """Run k-means ``seeds`` times; report mean and standard deviation of each metric."""
    if C < 2:
        raise ValueError("need at least two clusters")
    if C > len(H):
        raise ValueError("more clusters than nodes")
    reports = [cluster_scores(y, kmeans(H, C, seed=s)) for s in range(seeds)]
    arr = np.array([[r.acc, r.nmi, r.ari, r.f1] for r in reports])
    mu, sd = arr.mean(axis=0), arr.std(axis=0)
    return ClusterReport(*mu, *sd)


@dataclass(frozen=True)
class SimilarityHistogram:
    edges: np.ndarray  # bin boundaries, length bins + 1
    homo_count: np.ndarray
    hetero_count: np.ndarray
    homo_mean: float
    hetero_mean: float

    def to_csv(self) -> str:
        lines = ["bin_lo,bin_hi,homo_count,hetero_count"]
        for lo, hi, a, b in zip(self.edges[:-1], self.edges[1:], self.homo_count, self.hetero_count):
            lines.append(f"{lo:.4f},{hi:.4f},{int(a)},{int(b)}")
        return "\n".join(lines) + "\n"


def edge_cosines(H, g: Graph) -> tuple[np.ndarray, np.ndarray]:
    H = np.asarray(H, dtype=np.float64)
    e = g.edge_list()
    norms = np.linalg.norm(H, axis=1)
    a, b = e[:, 0], e[:, 1]
    denom = norms[a] * norms[b]
    dots = np.einsum("ij,ij->i", H[a], H[b])
    cos = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
    return e, np.clip(cos, -1.0, 1.0)


def pairwise_similarity_histogram(H, g: Graph, y, bins: int = 50) -> SimilarityHistogram:
    """Cosine similarity of embeddings across each edge, split by same/different label."""
    y = np.asarray(y)
    e, cos = edge_cosines(H, g)
    same = y[e[:, 0]] == y[e[:, 1]]
    edges = np.linspace(-1.0, 1.0, bins + 1)
    homo, _ = np.histogram(cos[same], bins=edges)
    hetero, _ = np.histogram(cos[~same], bins=edges)
    return SimilarityHistogram(
        edges,
        homo,
        hetero,
        float(cos[same].mean()) if same.any() else float("nan"),
        float(cos[~same].mean()) if (~same).any() else float("nan"),
    )
