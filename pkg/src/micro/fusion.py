"""Graph propagation over modality graphs, attention fusion, and the
modality-vs-fused contrastive objective.

Every forward function returns the quantities a matching ``*_backward``
needs; gradients are chained by hand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError
from .numerics import SparseMatrix, spmm, spmm_value_grad


@dataclass
class PropagationState:
    """``layers[m][l]`` is the layer-l embedding matrix of modality m."""

    layers: list[list[np.ndarray]]

    @property
    def n_layers(self) -> int:
        return len(self.layers[0]) - 1 if self.layers else 0

    def outputs(self) -> np.ndarray:
        """Final-layer embeddings stacked as (modalities, items, d)."""
        return np.stack([ls[-1] for ls in self.layers])


def propagate(adjacencies: list[SparseMatrix], inputs: list[np.ndarray] | np.ndarray,
              n_layers: int = 1) -> PropagationState:
    """Repeated sparse products ``H_l = A H_{l-1}``, one chain per modality.

    ``inputs`` is either one matrix shared by every modality or one per modality.
    """
    if n_layers < 0:
        raise ConfigError(f"layer count must be >= 0, got {n_layers}")
    if isinstance(inputs, np.ndarray) and inputs.ndim == 2:
        inputs = [inputs] * len(adjacencies)
    if len(inputs) != len(adjacencies):
        raise ShapeError("one input matrix per modality graph is required")
    layers = []
    for adj, h in zip(adjacencies, inputs):
        chain = [h]
        for _ in range(n_layers):
            chain.append(spmm(adj, chain[-1]))
        layers.append(chain)
    return PropagationState(layers)


def propagate_backward(adjacencies: list[SparseMatrix], state: PropagationState,
                       grad_outputs: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Gradients w.r.t. each modality's input matrix and each graph's stored values."""
    grad_inputs, grad_values = [], []
    for adj, chain, g in zip(adjacencies, state.layers, grad_outputs):
        dvals = np.zeros(adj.nnz)
        adj_t = adj.to_scipy().T.tocsr() if len(chain) > 1 else None
        for layer in range(len(chain) - 1, 0, -1):
            dvals += spmm_value_grad(adj, chain[layer - 1], g)
            g = np.asarray(adj_t @ g)
        grad_inputs.append(g)
        grad_values.append(dvals)
    return grad_inputs, grad_values


@dataclass
class FusedEmbeddings:
    per_modality: np.ndarray  # (M, N, d)
    logits: np.ndarray        # (M, N)
    weights: np.ndarray       # (M, N), softmax over modalities
    fused: np.ndarray         # (N, d)
    hidden: np.ndarray        # tanh activations, (M, N, d)


def softmax_modalities(logits: np.ndarray) -> np.ndarray:
    """Softmax over axis 0 (modalities), max-shifted for stability."""
    e = np.exp(logits - logits.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def attention_fuse(per_modality: np.ndarray, query: np.ndarray, weight: np.ndarray,
                   bias: np.ndarray) -> FusedEmbeddings:
    """Per-item softmax over modality scores ``q . tanh(W h + b)``."""
    h = np.asarray(per_modality)
    if h.ndim != 3 or h.shape[0] < 1:
        raise ShapeError("per-modality embeddings must have shape (M >= 1, N, d)")
    hidden = np.tanh(h @ weight.T + bias)
    logits = hidden @ query
    alpha = softmax_modalities(logits)
    fused = np.einsum("mn,mnd->nd", alpha, h)
    return FusedEmbeddings(h, logits, alpha, fused, hidden)


def attention_backward(f: FusedEmbeddings, grad_fused: np.ndarray, query: np.ndarray,
                       weight: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Returns (d/d per-modality embeddings, {"query", "weight", "bias"} grads)."""
    h, alpha, z = f.per_modality, f.weights, f.hidden
    grad_h = alpha[:, :, None] * grad_fused[None]
    dalpha = np.einsum("nd,mnd->mn", grad_fused, h)
    dlogit = alpha * (dalpha - (alpha * dalpha).sum(axis=0, keepdims=True))
    dz = dlogit[:, :, None] * query
    dpre = dz * (1.0 - z * z)
    grads = {
        "query": np.einsum("mn,mnd->d", dlogit, z),
        "weight": np.einsum("mni,mnj->ij", dpre, h),
        "bias": dpre.sum(axis=(0, 1)),
    }
    grad_h += dpre @ weight
    return grad_h, grads


def _unit_rows(x: np.ndarray, what: str, index: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        item = int(zero[0]) if index is None else int(index[zero[0]])
        raise NumericalError(f"zero-norm {what} embedding for item {item}")
    return x / norms[:, None], norms


def _unit_backward(unit: np.ndarray, norms: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    radial = np.einsum("ij,ij->i", unit, grad_unit)
    return (grad_unit - unit * radial[:, None]) / norms[:, None]


def _infonce_rows(pos: np.ndarray, neg_a: np.ndarray, neg_b: np.ndarray, tau: float):
    """Row-wise ``pos/tau - logsumexp([pos, neg_a(j!=i), neg_b(j!=i)] / tau)``.

    Returns the values and the softmax weights over (pos, neg_a, neg_b),
    with diagonals of the negative blocks carrying zero weight.
    """
    n = pos.size
    off = ~np.eye(n, dtype=bool)
    za = np.where(off, neg_a / tau, -np.inf)
    zb = np.where(off, neg_b / tau, -np.inf)
    zp = pos / tau
    top = np.maximum(zp, np.maximum(za.max(axis=1), zb.max(axis=1)))
    ep = np.exp(zp - top)
    ea = np.exp(za - top[:, None])
    eb = np.exp(zb - top[:, None])
    total = ep + ea.sum(axis=1) + eb.sum(axis=1)
    value = zp - (top + np.log(total))
    return value, ep / total, ea / total[:, None], eb / total[:, None]


def contrastive_loss(per_modality: np.ndarray, fused: np.ndarray, tau: float = 0.5,
                     symmetric_negatives: bool = False, item_index: np.ndarray | None = None):
    """InfoNCE between each modality view and the fused view.

    Both directions are averaged per (item, modality). In the modality->fused
    direction the negatives are ``(h_i^m, h_j)`` and ``(h_i^m, h_j^m)``. In
    the fused->modality direction they are ``(h_i^m, h_j)`` and
    ``(h_i, h_j)``; with ``symmetric_negatives`` they become ``(h_i, h_j^m)``
    and ``(h_i, h_j)``. The critic is cosine similarity.

    Returns ``(loss, grad_per_modality, grad_fused)``.
    """
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    n_mod, n, _ = per_modality.shape
    if n < 2:
        raise ConfigError("the contrastive loss needs at least two items")
    f_unit, f_norm = _unit_rows(fused, "fused", item_index)
    ff = f_unit @ f_unit.T
    scale = -1.0 / (2.0 * n * n_mod)
    loss = 0.0
    d_f_unit = np.zeros_like(f_unit)
    d_ff = np.zeros_like(ff)
    grad_mod = np.zeros_like(per_modality)
    for m in range(n_mod):
        p_unit, p_norm = _unit_rows(per_modality[m], "modality", item_index)
        pf = p_unit @ f_unit.T   # theta(h_i^m, h_j)
        pp = p_unit @ p_unit.T   # theta(h_i^m, h_j^m)
        pos = np.diag(pf).copy()
        v1, w1p, w1a, w1b = _infonce_rows(pos, pf, pp, tau)
        if symmetric_negatives:
            v2, w2p, w2a, w2b = _infonce_rows(pos, pf.T, ff, tau)
        else:
            v2, w2p, w2a, w2b = _infonce_rows(pos, pf, ff, tau)
        loss += scale * (v1.sum() + v2.sum())

        # d value / d logit = [1 - w_pos] on the positive, -w on negatives; logits are cos/tau
        c = scale / tau
        d_pf = -c * w1a
        d_pp = -c * w1b
        d_pos = c * ((1.0 - w1p) + (1.0 - w2p))
        if symmetric_negatives:
            d_pf = d_pf - c * w2a.T
        else:
            d_pf = d_pf - c * w2a
        d_ff += -c * w2b
        d_pf[np.diag_indices(n)] += d_pos

        d_p_unit = d_pf @ f_unit + (d_pp + d_pp.T) @ p_unit
        d_f_unit += d_pf.T @ p_unit
        grad_mod[m] = _unit_backward(p_unit, p_norm, d_p_unit)
    d_f_unit += (d_ff + d_ff.T) @ f_unit
    grad_fused = _unit_backward(f_unit, f_norm, d_f_unit)
    return float(loss), grad_mod, grad_fused
