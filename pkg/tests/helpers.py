import numpy as np
from dgmae.graphcore import Graph


def random_graph(n: int, p: float, rng: np.random.Generator) -> Graph:
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < p
    return Graph.from_edges(n, np.stack([iu[keep], ju[keep]], axis=1))


def dense_sym_norm(g: Graph) -> np.ndarray:
    A = g.dense_adjacency()
    deg = A.sum(axis=1)
    inv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    return inv[:, None] * A * inv[None, :]


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        hi = f()
        x[idx] = old - eps
        lo = f()
        x[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    """Remember one acceptance outcome for the end-of-run summary, then assert it."""
    ACCEPTANCE[criterion] = (bool(ok), detail)
    assert ok, f"criterion {criterion}: {detail}"
