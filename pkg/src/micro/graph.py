"""Modality-aware item-item graphs mined from feature matrices.

Pipeline per modality: cosine similarity -> suppress negatives -> keep the
top-k entries of each row -> symmetric degree normalization. The initial
graph runs this on raw features and is parameter-free; the learned graph
runs it on affinely transformed features and is differentiable in the
transform (the top-k selection itself is treated as constant). The two are
blended with a skip coefficient.
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DataError, NumericalError, ShapeError
from .numerics import SparseMatrix

log = logging.getLogger(__name__)

INITIAL, LEARNED, BLENDED = "initial", "learned", "blended"
_STAGE_BYTE = {INITIAL: 0, LEARNED: 1, BLENDED: 2}
GRAPH_MAGIC = b"MGR1"


@dataclass
class ModalityGraph:
    modality: str
    adjacency: SparseMatrix
    stage: str
    k: int
    lam: float = 0.0
    # backward bookkeeping; populated for learned and blended stages only
    tape: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]


def _row_norms(features: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", features, features))


def cosine_similarity_block(features: np.ndarray, row_range: range | slice | None = None) -> np.ndarray:
    """Rows ``row_range`` of the cosine-similarity matrix of ``features``."""
    features = np.asarray(features, dtype=np.float64)
    norms = _row_norms(features)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise NumericalError(f"zero-norm feature row at item {int(zero[0])}")
    unit = features / norms[:, None]
    rows = slice(None) if row_range is None else row_range
    if isinstance(rows, range):
        rows = slice(rows.start, rows.stop, rows.step)
    block = unit[rows] @ unit.T
    return np.clip(block, -1.0, 1.0)


def _topk_columns(block: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Local row ids and column ids of the kept entries of a similarity block.

    Negatives (and -inf masks) never survive; ties go to the lower column.
    """
    k = min(k, block.shape[1])
    order = np.argsort(-block, axis=1, kind="stable")[:, :k]
    vals = np.take_along_axis(block, order, axis=1)
    keep = vals > 0
    rows = np.broadcast_to(np.arange(block.shape[0])[:, None], order.shape)[keep]
    return rows, order[keep]


def sparsify_topk(similarity: np.ndarray, k: int) -> SparseMatrix:
    """Suppress negatives and keep the k largest entries per row (directed)."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    similarity = np.asarray(similarity, dtype=np.float64)
    rows, cols = _topk_columns(similarity, k)
    return SparseMatrix.from_coo(rows, cols, similarity[rows, cols], similarity.shape)


def _inv_sqrt_degree(rows: np.ndarray, values: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    deg = np.bincount(rows, weights=values, minlength=n)
    r = np.zeros(n)
    pos = deg > 0
    r[pos] = 1.0 / np.sqrt(deg[pos])
    return deg, r


def normalize_symmetric(adj: SparseMatrix) -> SparseMatrix:
    """``D^-1/2 A D^-1/2`` with D the row sums; zero-degree nodes get factor 0."""
    if adj.shape[0] != adj.shape[1]:
        raise ShapeError(f"adjacency must be square, got {adj.shape}")
    if np.any(adj.data < 0):
        raise NumericalError("normalize_symmetric needs nonnegative values")
    rows = adj.row_ids()
    _, r = _inv_sqrt_degree(rows, adj.data, adj.shape[0])
    return adj.with_data(adj.data * r[rows] * r[adj.indices])


def select_edges(features: np.ndarray, k: int, keep_self_loops: bool = True,
                 block_rows: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Edge list (rows, cols) of the top-k graph, built block by block.

    Rows with zero norm are masked out entirely (no edges in or out).
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    n = features.shape[0]
    norms = _row_norms(features)
    dead = norms == 0
    safe = np.where(dead, 1.0, norms)
    unit = features / safe[:, None]
    all_rows, all_cols = [], []
    for start in range(0, n, block_rows):
        stop = min(n, start + block_rows)
        block = np.clip(unit[start:stop] @ unit.T, -1.0, 1.0)
        if dead.any():
            block[:, dead] = -np.inf
            block[dead[start:stop]] = -np.inf
        if not keep_self_loops:
            local = np.arange(stop - start)
            block[local, local + start] = -np.inf
        r, c = _topk_columns(block, k)
        all_rows.append(r + start)
        all_cols.append(c)
    rows = np.concatenate(all_rows) if all_rows else np.zeros(0, dtype=np.int64)
    cols = np.concatenate(all_cols) if all_cols else np.zeros(0, dtype=np.int64)
    order = np.lexsort((cols, rows))
    return rows[order].astype(np.int64), cols[order].astype(np.int64)


def _edge_cosines(unit: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", unit[rows], unit[cols])


def _csr_from_sorted(rows: np.ndarray, cols: np.ndarray, values: np.ndarray, n: int) -> SparseMatrix:
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
    return SparseMatrix((n, n), indptr, cols, values)


def build_initial_graph(features: np.ndarray, k: int = 10, keep_self_loops: bool = True,
                        modality: str = "", block_rows: int = 1024) -> ModalityGraph:
    """Normalized top-k cosine graph of raw features."""
    features = np.asarray(features, dtype=np.float64)
    norms = _row_norms(features)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise NumericalError(f"zero-norm feature row at item {int(zero[0])}")
    rows, cols = select_edges(features, k, keep_self_loops, block_rows)
    s = _edge_cosines(features / norms[:, None], rows, cols)
    _, r = _inv_sqrt_degree(rows, s, features.shape[0])
    adj = _csr_from_sorted(rows, cols, s * r[rows] * r[cols], features.shape[0])
    return ModalityGraph(modality, adj, INITIAL, k)


def transform_features(features: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map of every row: ``features @ weight.T + bias``."""
    if weight.shape[1] != features.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError(f"transform {weight.shape}/{bias.shape} does not fit features {features.shape}")
    return features @ weight.T + bias


def transform_backward(features: np.ndarray, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the affine map w.r.t. (weight, bias)."""
    return grad_out.T @ features, grad_out.sum(axis=0)


def build_learned_graph(transformed: np.ndarray, k: int = 10, keep_self_loops: bool = True,
                        modality: str = "", edges: tuple[np.ndarray, np.ndarray] | None = None,
                        block_rows: int = 1024) -> ModalityGraph:
    """Top-k cosine graph of transformed features, with a tape for backward.

    ``edges`` fixes the selected (rows, cols) instead of recomputing top-k;
    values are always recomputed, and any that turn negative are clamped.
    """
    transformed = np.asarray(transformed)
    n = transformed.shape[0]
    norms = _row_norms(transformed)
    dead = norms == 0
    if dead.any():
        log.warning("%s: %d transformed rows have zero norm; they drop out this step", modality, int(dead.sum()))
    if edges is None:
        rows, cols = select_edges(transformed, k, keep_self_loops, block_rows)
    else:
        rows, cols = edges
        live = ~(dead[rows] | dead[cols])
        rows, cols = rows[live], cols[live]
    safe = np.where(dead, 1.0, norms)
    unit = transformed / safe[:, None]
    raw = _edge_cosines(unit, rows, cols)
    s = np.maximum(raw, 0.0)
    deg, r = _inv_sqrt_degree(rows, s, n)
    adj = _csr_from_sorted(rows, cols, s * r[rows] * r[cols], n)
    tape = {"rows": rows, "cols": cols, "s": s, "positive": raw > 0, "r": r,
            "unit": unit, "norms": safe, "dead": dead}
    return ModalityGraph(modality, adj, LEARNED, k, tape=tape)


def learned_graph_backward(graph: ModalityGraph, grad_values: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the transformed features given d(loss)/d(edge value)."""
    t = graph.tape
    rows, cols, s, r = t["rows"], t["cols"], t["s"], t["r"]
    n = graph.n
    g = grad_values
    ds = g * r[rows] * r[cols]
    dr = np.bincount(rows, weights=g * s * r[cols], minlength=n)
    dr += np.bincount(cols, weights=g * s * r[rows], minlength=n)
    ddeg = -0.5 * dr * r ** 3
    ds = (ds + ddeg[rows]) * t["positive"]
    unit = t["unit"]
    gs = sp.csr_matrix((ds, (rows, cols)), shape=(n, n))
    dunit = np.asarray(gs @ unit + gs.T @ unit)
    radial = np.einsum("ij,ij->i", unit, dunit)
    dfeat = (dunit - unit * radial[:, None]) / t["norms"][:, None]
    dfeat[t["dead"]] = 0.0
    return dfeat


def blend_graphs(initial: ModalityGraph, learned: ModalityGraph, lam: float = 0.7) -> ModalityGraph:
    """``lam * initial + (1 - lam) * learned`` over the union of both edge sets."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"skip coefficient must lie in [0, 1], got {lam}")
    if initial.adjacency.shape != learned.adjacency.shape:
        raise ShapeError("initial and learned graphs differ in size")
    n = initial.n
    a, b = initial.adjacency, learned.adjacency
    parts_keys, parts_vals = [], []
    if lam > 0:
        parts_keys.append(a.row_ids() * n + a.indices)
        parts_vals.append(lam * a.data)
    if lam < 1:
        parts_keys.append(b.row_ids() * n + b.indices)
        parts_vals.append((1.0 - lam) * b.data)
    keys = np.concatenate(parts_keys)
    vals = np.concatenate(parts_vals)
    uniq, inverse = np.unique(keys, return_inverse=True)
    data = np.zeros(uniq.size)
    np.add.at(data, inverse, vals)
    adj = _csr_from_sorted(uniq // n, uniq % n, data, n)
    learned_pos = inverse[-b.nnz:] if lam < 1 and b.nnz else np.zeros(0, dtype=np.int64)
    tape = {"learned": learned, "learned_pos": learned_pos, "lam": lam}
    return ModalityGraph(initial.modality or learned.modality, adj, BLENDED, initial.k, lam, tape)


def blended_backward(graph: ModalityGraph, grad_values: np.ndarray) -> np.ndarray:
    """Route d(loss)/d(blended values) to the transformed features of the learned graph."""
    t = graph.tape
    learned = t["learned"]
    if t["lam"] >= 1.0 or learned.adjacency.nnz == 0:
        return np.zeros_like(learned.tape["unit"])
    g_learned = (1.0 - t["lam"]) * grad_values[t["learned_pos"]]
    return learned_graph_backward(learned, g_learned)


# ---------------------------------------------------------------------------
# graph cache


def write_graph(path: str | Path, graph: ModalityGraph) -> None:
    adj = graph.adjacency
    with Path(path).open("wb") as fh:
        fh.write(GRAPH_MAGIC)
        fh.write(struct.pack("<IIdB", graph.n, graph.k, float(graph.lam), _STAGE_BYTE[graph.stage]))
        fh.write(adj.indptr.astype("<u8").tobytes())
        fh.write(adj.indices.astype("<u4").tobytes())
        fh.write(adj.data.astype("<f8").tobytes())


def read_graph(path: str | Path, modality: str = "") -> ModalityGraph:
    raw = Path(path).read_bytes()
    if raw[:4] != GRAPH_MAGIC:
        raise DataError(f"{path}: not an MGR1 graph file")
    n, k, lam, stage_byte = struct.unpack_from("<IIdB", raw, 4)
    off = 4 + struct.calcsize("<IIdB")
    indptr = np.frombuffer(raw, "<u8", n + 1, off).astype(np.int64)
    off += 8 * (n + 1)
    nnz = int(indptr[-1])
    indices = np.frombuffer(raw, "<u4", nnz, off).astype(np.int64)
    off += 4 * nnz
    data = np.frombuffer(raw, "<f8", nnz, off).copy()
    if off + 8 * nnz != len(raw):
        raise DataError(f"{path}: trailing or missing bytes")
    stage = {v: s for s, v in _STAGE_BYTE.items()}[stage_byte]
    return ModalityGraph(modality, SparseMatrix((n, n), indptr, indices, data), stage, k, lam)


def feature_digest(features: np.ndarray) -> str:
    arr = np.ascontiguousarray(features, dtype="<f8")
    h = hashlib.sha256()
    h.update(struct.pack("<II", *arr.shape))
    h.update(arr.tobytes())
    return h.hexdigest()[:32]


def cached_initial_graph(features: np.ndarray, k: int, keep_self_loops: bool = True,
                         modality: str = "", cache_dir: str | Path | None = None) -> ModalityGraph:
    """``build_initial_graph`` memoized on disk by (feature digest, k, self-loop flag).

    The directory defaults to ``$MICRO_CACHE_DIR``; without either, nothing is cached.
    """
    cache_dir = cache_dir or os.environ.get("MICRO_CACHE_DIR")
    if not cache_dir:
        return build_initial_graph(features, k, keep_self_loops, modality)
    from filelock import FileLock

    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    key = f"{feature_digest(features)}-k{k}-{'self' if keep_self_loops else 'noself'}"
    path = cache_dir / f"{key}.mgr"
    with FileLock(str(path) + ".lock"):
        if path.exists():
            graph = read_graph(path, modality)
            if graph.n == features.shape[0] and graph.k == k and graph.stage == INITIAL:
                return graph
        graph = build_initial_graph(features, k, keep_self_loops, modality)
        tmp = path.with_suffix(".tmp")
        write_graph(tmp, graph)
        os.replace(tmp, path)
    return graph
