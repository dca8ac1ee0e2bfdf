"""CF backbones enhanced with fused multimodal item embeddings, the joint
BPR + contrastive objective, and the training loop."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import evaluation
from .dataset import TRAIN, VALID, InteractionTable, TripleBatch, TripleSampler
from .errors import ConfigError, IncompatibleArtifactError, NumericalError, ShapeError
from .fusion import (
    attention_backward,
    attention_fuse,
    contrastive_loss,
    propagate,
    propagate_backward,
)
from .graph import (
    ModalityGraph,
    blend_graphs,
    blended_backward,
    build_learned_graph,
    cached_initial_graph,
    normalize_symmetric,
    select_edges,
    transform_backward,
    transform_features,
)
from .numerics import AdamState, SparseMatrix, adam_step, make_rng, scatter_rows, spmm, xavier_init

log = logging.getLogger(__name__)

BACKBONES = ("mf", "lightgcn")
VARIANTS = ("no_contrast", "cf_plus_feats", "micro_over_feats")


@dataclass(frozen=True)
class TrainerConfig:
    """Hyperparameters. Defaults follow the reference experimental setup."""

    d: int = 64
    lr: float = 5e-4
    l2: float = 1e-4
    batch: int = 1024
    k: int = 10
    lam: float = 0.7
    tau: float = 0.5
    beta: float = 0.03
    layers: int = 1
    patience: int = 10
    max_epochs: int = 1000
    seed: int = 0
    backbone: str = "lightgcn"
    lightgcn_layers: int = 2
    modalities: tuple[str, ...] = ()
    no_contrast: bool = False
    cf_plus_feats: bool = False
    micro_over_feats: bool = False
    keep_self_loops: bool = True
    symmetric_negatives: bool = False
    contrastive_scope: str = "batch"
    separate_item_table: bool = False
    graph_refresh: str = "auto"
    eval_k: int = 20
    dtype: str = "float64"
    epoch_steps: int = 0

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")
        for name in ("d", "batch", "patience", "eval_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr <= 0 or self.l2 < 0 or self.tau <= 0:
            raise ConfigError("lr and tau must be positive, l2 nonnegative")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must lie in [0, 1]")
        if self.epoch_steps < 0:
            raise ConfigError("epoch_steps must be >= 0 (0 means one pass over the training data)")
        if self.k < 0 or self.layers < 0 or self.lightgcn_layers < 0 or self.max_epochs < 0:
            raise ConfigError("k, layers, lightgcn_layers and max_epochs must be >= 0")
        if sum((self.no_contrast, self.cf_plus_feats, self.micro_over_feats)) > 1:
            raise ConfigError("at most one ablation variant flag may be set")
        if self.contrastive_scope not in ("batch", "full"):
            raise ConfigError("contrastive_scope must be 'batch' or 'full'")
        if self.graph_refresh not in ("auto", "step", "epoch"):
            raise ConfigError("graph_refresh must be 'auto', 'step' or 'epoch'")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")
        object.__setattr__(self, "modalities", tuple(self.modalities))

    @property
    def effective_beta(self) -> float:
        if self.no_contrast or self.cf_plus_feats:
            return 0.0
        return self.beta

    @property
    def variant(self) -> str:
        for name in VARIANTS:
            if getattr(self, name):
                return name
        return "micro" if self.k > 0 else "cf"

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["modalities"] = list(self.modalities)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainerConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown trainer options: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "TrainerConfig":
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.blake2b(blob.encode(), digest_size=8).hexdigest()


@dataclass
class CFOutput:
    users: np.ndarray           # backbone user embeddings
    items: np.ndarray           # backbone item embeddings
    enhanced: np.ndarray        # items plus unit-norm fused embedding (== items when not enhanced)

    def scores(self, users: np.ndarray | None = None) -> np.ndarray:
        u = self.users if users is None else self.users[users]
        return u @ self.enhanced.T


@dataclass
class LossReport:
    bpr: float
    contrastive: float
    beta: float
    total: float
    grad_norms: dict[str, float] = field(default_factory=dict)


def total_loss(bpr: float, contrastive: float, beta: float) -> LossReport:
    if beta < 0:
        raise ConfigError("beta must be >= 0")
    return LossReport(bpr, contrastive, beta, bpr + beta * contrastive)


def bpr_loss(pos_scores: np.ndarray, neg_scores: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean of ``-log sigmoid(pos - neg)``; returns the loss and d/d(pos - neg)."""
    if pos_scores.size == 0:
        raise ConfigError("BPR needs a nonempty batch")
    diff = pos_scores - neg_scores
    loss = np.logaddexp(0.0, -diff).mean()
    sig_neg = np.exp(-np.logaddexp(0.0, diff))  # sigmoid(-diff), stable
    return float(loss), -sig_neg / diff.size


def enhance_items(items: np.ndarray, fused: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``items + fused / ||fused||`` per row; also returns the unit rows and norms."""
    norms = np.sqrt(np.einsum("ij,ij->i", fused, fused))
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise NumericalError(f"zero-norm fused embedding for item {int(zero[0])}")
    unit = fused / norms[:, None]
    return items + unit, unit, norms


def score(cf: CFOutput, u, i) -> np.ndarray:
    return np.einsum("...d,...d->...", cf.users[u], cf.enhanced[i])


def bipartite_adjacency(table: InteractionTable) -> SparseMatrix:
    """Normalized (users + items) square adjacency of the training interactions."""
    train = table.tags == TRAIN
    u = table.users[train]
    i = table.items[train] + table.n_users
    n = table.n_users + table.n_items
    adj = SparseMatrix.from_coo(np.concatenate([u, i]), np.concatenate([i, u]),
                                np.ones(2 * u.size), (n, n))
    return normalize_symmetric(adj)


def param_shapes(config: TrainerConfig, n_users: int, n_items: int,
                 feature_dims: dict[str, int]) -> dict[str, tuple[int, ...]]:
    d = config.d
    shapes: dict[str, tuple[int, ...]] = {"user_emb": (n_users, d), "item_emb": (n_items, d)}
    if config.separate_item_table:
        shapes["graph_item_emb"] = (n_items, d)
    for m, dm in feature_dims.items():
        shapes[f"transform.{m}.weight"] = (d, dm)
        shapes[f"transform.{m}.bias"] = (d,)
    shapes["attention.query"] = (d,)
    shapes["attention.weight"] = (d, d)
    shapes["attention.bias"] = (d,)
    return shapes


class MicroModel:
    """Wires one dataset, its feature matrices and a config into a loss function.

    Parameters are passed in explicitly so the same model serves training,
    gradient checking and evaluation.
    """

    def __init__(self, config: TrainerConfig, table: InteractionTable,
                 features: dict[str, np.ndarray], cache_dir=None):
        names = config.modalities or tuple(features)
        missing = [m for m in names if m not in features]
        if missing:
            raise ConfigError(f"no features for modalities {missing}")
        if not names:
            raise ConfigError("at least one modality is required")
        self.config = config
        self.table = table
        self.dtype = np.dtype(config.dtype)
        self.modalities = tuple(names)
        self.features = {}
        for m in names:
            f = np.asarray(features[m], dtype=np.float64)
            if f.shape[0] != table.n_items:
                raise ShapeError(f"{m} features have {f.shape[0]} rows for {table.n_items} items")
            self.features[m] = f
        self.n_users, self.n_items = table.n_users, table.n_items
        self.enhanced = config.k > 0 or config.cf_plus_feats
        self.use_graphs = config.k > 0 and not config.cf_plus_feats
        self.initial: dict[str, ModalityGraph] = {}
        if self.use_graphs:
            for m in names:
                self.initial[m] = cached_initial_graph(self.features[m], config.k, config.keep_self_loops,
                                                       m, cache_dir)
        self.bipartite = bipartite_adjacency(table) if config.backbone == "lightgcn" else None
        refresh = config.graph_refresh
        if refresh == "auto":
            refresh = "step" if self.n_items <= 5000 else "epoch"
        self.refresh = refresh
        self._edges: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.features = {m: f.astype(self.dtype) for m, f in self.features.items()}

    # -- parameters --------------------------------------------------------

    def shapes(self) -> dict[str, tuple[int, ...]]:
        dims = {m: self.features[m].shape[1] for m in self.modalities}
        return param_shapes(self.config, self.n_users, self.n_items, dims)

    def init_params(self, seed: int | None = None) -> dict[str, np.ndarray]:
        seed = self.config.seed if seed is None else seed
        out = {}
        for name, shape in self.shapes().items():
            if name.endswith(".bias"):
                out[name] = np.zeros(shape, dtype=self.dtype)
            elif len(shape) == 1:
                out[name] = xavier_init(shape[0], 1, make_rng(seed, "init", name), self.dtype)[:, 0]
            else:
                out[name] = xavier_init(shape[0], shape[1], make_rng(seed, "init", name), self.dtype)
        return out

    def check_params(self, params: dict[str, np.ndarray]) -> None:
        shapes = self.shapes()
        if set(shapes) != set(params):
            raise IncompatibleArtifactError(
                f"parameter names differ: expected {sorted(shapes)}, got {sorted(params)}")
        for name, shape in shapes.items():
            if tuple(params[name].shape) != tuple(shape):
                raise IncompatibleArtifactError(f"{name}: expected shape {shape}, got {params[name].shape}")

    def refresh_edges(self, params: dict[str, np.ndarray]) -> None:
        """Recompute the learned graphs' top-k selection (epoch cadence only)."""
        if self.refresh != "epoch" or not self.use_graphs or self.config.lam >= 1.0:
            return
        for m in self.modalities:
            e = transform_features(self.features[m], params[f"transform.{m}.weight"],
                                   params[f"transform.{m}.bias"])
            self._edges[m] = select_edges(e, self.config.k, self.config.keep_self_loops)

    # -- forward -----------------------------------------------------------

    def _backbone(self, params):
        x_u, x_i = params["user_emb"], params["item_emb"]
        if self.config.backbone == "mf":
            return x_u, x_i, None
        e = np.concatenate([x_u, x_i])
        layers = [e]
        for _ in range(self.config.lightgcn_layers):
            layers.append(spmm(self.bipartite, layers[-1]))
        out = sum(layers) / len(layers)
        return out[: self.n_users], out[self.n_users:], layers

    def _backbone_backward(self, d_users, d_items):
        g = np.concatenate([d_users, d_items])
        if self.config.backbone == "mf":
            return d_users, d_items
        n_layers = self.config.lightgcn_layers
        g = g / (n_layers + 1)
        total = g.copy()
        adj_t = self.bipartite.to_scipy().T.tocsr()
        carry = g
        # out = mean_l A^l e  =>  d e = sum_l (A^T)^l g / (L + 1)
        for _ in range(n_layers):
            carry = np.asarray(adj_t @ carry)
            total += carry
        return total[: self.n_users], total[self.n_users:]

    def _item_branch(self, params, subset: np.ndarray | None, with_contrast: bool):
        """Fused multimodal item embeddings plus everything needed for backward."""
        cfg = self.config
        tape = {}
        transformed = {m: transform_features(self.features[m], params[f"transform.{m}.weight"],
                                             params[f"transform.{m}.bias"]) for m in self.modalities}
        tape["transformed"] = transformed
        if cfg.cf_plus_feats:
            per_mod = np.stack([transformed[m] for m in self.modalities])
        else:
            adjs, graphs = [], []
            for m in self.modalities:
                if cfg.lam >= 1.0:
                    g = self.initial[m]
                else:
                    learned = build_learned_graph(transformed[m], cfg.k, cfg.keep_self_loops, m,
                                                  edges=self._edges.get(m) if self.refresh == "epoch" else None)
                    g = blend_graphs(self.initial[m], learned, cfg.lam)
                graphs.append(g)
                adjs.append(g.adjacency)
            if cfg.micro_over_feats:
                inputs = [transformed[m] for m in self.modalities]
            else:
                table = params["graph_item_emb"] if cfg.separate_item_table else params["item_emb"]
                inputs = [table] * len(self.modalities)
            state = propagate(adjs, inputs, cfg.layers)
            per_mod = state.outputs()
            tape.update(graphs=graphs, adjs=adjs, state=state)
        fused = attention_fuse(per_mod, params["attention.query"], params["attention.weight"],
                               params["attention.bias"])
        tape["fused"] = fused
        lc = 0.0
        if with_contrast:
            idx = np.arange(self.n_items) if subset is None else subset
            lc, g_mod, g_fused = contrastive_loss(per_mod[:, idx], fused.fused[idx], cfg.tau,
                                                  cfg.symmetric_negatives, idx)
            tape["contrast"] = (idx, g_mod, g_fused)
        return fused, lc, tape

    def _item_branch_backward(self, params, tape, d_fused, beta, grads):
        cfg = self.config
        fused = tape["fused"]
        if "contrast" in tape:
            idx, g_mod, g_fused = tape["contrast"]
            d_fused = d_fused.copy()
            d_fused[idx] += beta * g_fused
        d_mod, att = attention_backward(fused, d_fused, params["attention.query"], params["attention.weight"])
        if "contrast" in tape:
            d_mod[:, idx] += beta * g_mod
        grads["attention.query"] += att["query"]
        grads["attention.weight"] += att["weight"]
        grads["attention.bias"] += att["bias"]
        d_transformed = {m: None for m in self.modalities}
        if cfg.cf_plus_feats:
            for mi, m in enumerate(self.modalities):
                d_transformed[m] = d_mod[mi]
        else:
            d_inputs, d_vals = propagate_backward(tape["adjs"], tape["state"], d_mod)
            for mi, m in enumerate(self.modalities):
                if cfg.micro_over_feats:
                    d_transformed[m] = d_inputs[mi]
                elif cfg.separate_item_table:
                    grads["graph_item_emb"] += d_inputs[mi]
                else:
                    grads["item_emb"] += d_inputs[mi]
                g = tape["graphs"][mi]
                if cfg.lam < 1.0:
                    d_learned = blended_backward(g, d_vals[mi])
                    d_transformed[m] = d_learned if d_transformed[m] is None else d_transformed[m] + d_learned
        for m in self.modalities:
            if d_transformed[m] is not None:
                dw, db = transform_backward(self.features[m], d_transformed[m])
                grads[f"transform.{m}.weight"] += dw
                grads[f"transform.{m}.bias"] += db

    def forward(self, params: dict[str, np.ndarray]) -> CFOutput:
        """Full user and (enhanced) item embeddings for ranking."""
        users, items, _ = self._backbone(params)
        if not self.enhanced:
            return CFOutput(users, items, items)
        fused, _, _ = self._item_branch(params, None, with_contrast=False)
        enhanced, _, _ = enhance_items(items, fused.fused)
        return CFOutput(users, items, enhanced)

    def loss_and_grads(self, params: dict[str, np.ndarray], batch: TripleBatch):
        """Joint objective on one batch and its exact gradients."""
        cfg = self.config
        beta = cfg.effective_beta
        users, items, _ = self._backbone(params)
        with_contrast = self.enhanced and beta > 0
        if self.enhanced:
            subset = None if cfg.contrastive_scope == "full" else batch.unique_items()
            fused, lc, tape = self._item_branch(params, subset, with_contrast)
            enhanced, unit, norms = enhance_items(items, fused.fused)
        else:
            lc, enhanced = 0.0, items
        u, i, j = batch.users, batch.pos, batch.neg
        xu = users[u]
        pos = np.einsum("bd,bd->b", xu, enhanced[i])
        neg = np.einsum("bd,bd->b", xu, enhanced[j])
        lb, d_diff = bpr_loss(pos, neg)
        report = total_loss(lb, lc, beta)

        grads = {name: np.zeros_like(p) for name, p in params.items()}
        d_users = scatter_rows(u, d_diff[:, None] * (enhanced[i] - enhanced[j]), self.n_users)
        g_items = d_diff[:, None] * xu
        d_enh = scatter_rows(np.concatenate([i, j]), np.concatenate([g_items, -g_items]), self.n_items)
        d_items = d_enh
        if self.enhanced:
            radial = np.einsum("ij,ij->i", unit, d_enh)
            d_fused = (d_enh - unit * radial[:, None]) / norms[:, None]
            self._item_branch_backward(params, tape, d_fused, beta, grads)
        du, di = self._backbone_backward(d_users, d_items)
        grads["user_emb"] += du
        grads["item_emb"] += di
        report.grad_norms = {name: float(np.linalg.norm(g)) for name, g in grads.items()}
        return report, grads


def ablation_variant(config: TrainerConfig, variant: str) -> TrainerConfig:
    """Config for a named variant: micro, no_contrast, cf_plus_feats, micro_over_feats or cf."""
    base = config.replace(no_contrast=False, cf_plus_feats=False, micro_over_feats=False)
    if variant == "micro":
        return base
    if variant == "cf":
        return base.replace(k=0)
    if variant in VARIANTS:
        return base.replace(**{variant: True})
    raise ConfigError(f"unknown variant {variant!r}")


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    config: TrainerConfig
    params: dict[str, np.ndarray]
    adam: AdamState
    best_epoch: int
    best_metric: float
    epochs_run: int
    log: list[dict]
    model: MicroModel


def train(config: TrainerConfig, table: InteractionTable, features: dict[str, np.ndarray],
          protocol: str = "warm", cache_dir=None,
          on_record: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam on the joint loss with early stopping on validation Recall@eval_k.

    By default one epoch visits every training interaction once, paired with
    one fresh negative. With ``epoch_steps > 0`` an epoch is that many
    batches of triples sampled with replacement instead. The parameters with the best validation metric are returned
    (ties keep the earlier epoch).
    """
    model = MicroModel(config, table, features, cache_dir)
    params = model.init_params()
    adam = AdamState(lr=config.lr, weight_decay=config.l2)
    sampler = TripleSampler(table, make_rng(config.seed, "sampler"))
    digest = config.digest()
    history: list[dict] = []

    def record(epoch: int, loss: dict | None) -> float:
        cf = model.forward(params)
        rep = evaluation.evaluate_scores(cf.scores(), table, protocol, config.eval_k, split=VALID)
        rec = {"epoch": epoch, "split": "valid", **rep.to_dict(), "config_hash": digest, "seed": config.seed}
        if loss is not None:
            rec.update(loss)
        history.append(rec)
        if on_record:
            on_record(rec)
        return rep.recall

    best = record(0, None)
    best_params = {k: v.copy() for k, v in params.items()}
    best_adam, best_epoch, stale, epoch = adam.copy(), 0, 0, 0
    for epoch in range(1, config.max_epochs + 1):
        model.refresh_edges(params)
        sums = np.zeros(3)
        n_batches = 0
        if config.epoch_steps:
            batches = (sampler.sample(config.batch) for _ in range(config.epoch_steps))
        else:
            batches = sampler.epoch(config.batch)
        for b, batch in enumerate(batches):
            report, grads = model.loss_and_grads(params, batch)
            try:
                if not np.isfinite(report.total):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}; "
                                         f"best epoch was {best_epoch}")
                params, adam = adam_step(params, grads, adam)
            except NumericalError as exc:
                # hand the last good state to the caller so it can still be saved
                exc.result = TrainResult(config, best_params, best_adam, best_epoch, best, epoch,
                                         history, model)
                raise
            sums += (report.bpr, report.contrastive, report.total)
            n_batches += 1
        means = sums / max(n_batches, 1)
        metric = record(epoch, {"loss_bpr": means[0], "loss_contrastive": means[1], "loss": means[2]})
        if metric > best:
            best, best_epoch, stale = metric, epoch, 0
            best_params = {k: v.copy() for k, v in params.items()}
            best_adam = adam.copy()
        else:
            stale += 1
            if stale >= config.patience:
                break
    return TrainResult(config, best_params, best_adam, best_epoch, best, epoch, history, model)
