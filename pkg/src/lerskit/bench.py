"""Experiment runner: train/compress/evaluate/profile pipelines, sparsity
orchestration, efficiency measurement, and report emission."""

from __future__ import annotations

import gc
import json
import math
import time
import tracemalloc
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbones import (DcnMix, DeepFM, LightGCN, NeuMF, build_normalized_adjacency)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (CtrRecordSet, DataError, InteractionSet, batch_negatives,
                   load_cf_dataset, load_ctr_dataset, split_per_user)
from .dimsearch import (GeometricDimDistribution, SearchConfig, SupernetSearch,
                        evolutionary_search, sample_dim_mask, solve_alpha)
from .embeddings import (CerpTable, CsrTable, DheEncoder, EmbeddingLayer,
                         EmbeddingSpec, FullTable, OffsetView, PairedEmbedding,
                         QrTable, Supernet, TtTable, UnreachableSparsityError,
                         cerp_rows_for_budget, dhe_width_for_budget,
                         layer_from_state, qr_rows_for_budget, tt_plan_for_budget)
from .metrics import MetricReport, auc, evaluate_topk, log_loss
from .optim import Adam
from .pruning import (MaskConstraint, MaskSnapshot, StrEmbedding, magnitude_prune_mask,
                      cerp_regularizer, pep_find_mask, retrain_with_mask)

CF_BACKBONES = ("neumf", "lightgcn")
CTR_BACKBONES = ("deepfm", "dcnmix")
COMPRESSORS = ("none", "qr", "tt", "dhe", "pep", "optembed", "cerp", "magprune")
PRUNING_FAMILY = ("magprune", "pep", "cerp")
COMPOSITIONAL_FAMILY = ("qr", "tt", "dhe")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    task: str = "cf"
    backbone: str = "lightgcn"
    compressor: str = "none"
    sparsity: float = 0.5
    data: str | None = None
    schema: str | None = None
    seed: int = 0
    epochs: int = 5
    batch_size: int = 1024
    lr: float = 5e-3
    l2: float = 1e-4
    tune: bool = False
    trials: int = 30
    out: str | None = None
    checkpoint: str | None = None
    profile_batch: int = 256
    profile_reps: int = 5
    valid_fraction: float = 1.0
    # backbone hyperparameters (defaults follow the benchmark's fixed values)
    dim: int | None = None         # 64 for lightgcn, 32 for neumf, 16 for ctr
    n_layers: int = 2
    gamma: float = 0.1
    tau: float = 0.2
    dropout: float = 0.0
    neg_count: int = 1
    # compressor hyperparameters
    n_min: int | None = None       # magprune; None = validation search (CF)
    dhe_k: int = 1024
    tt_cores: int = 3
    tt_cache: bool = True
    cerp_reg: float = 0.05
    min_freq: int = 10
    search_population: int = 20
    search_generations: int = 15

    def validate(self) -> None:
        if self.task not in ("cf", "ctr"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.task == "cf" and self.backbone not in CF_BACKBONES:
            raise ConfigError(f"backbone {self.backbone!r} is not a cf backbone")
        if self.task == "ctr" and self.backbone not in CTR_BACKBONES:
            raise ConfigError(f"backbone {self.backbone!r} is not a ctr backbone")
        if self.compressor not in COMPRESSORS:
            raise ConfigError(f"unknown compressor {self.compressor!r}")
        if self.compressor != "none" and not (0.0 < self.sparsity < 1.0):
            raise ConfigError("sparsity target must lie in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be positive")
        if not (0.0 < self.valid_fraction <= 1.0):
            raise ConfigError("valid fraction must lie in (0, 1]")

    def embedding_dim(self) -> int:
        if self.dim is not None:
            return self.dim
        if self.task == "ctr":
            return 16
        return 64 if self.backbone == "lightgcn" else 32


@dataclass
class ProfileResult:
    phase: str
    wall_ms_per_batch: float
    peak_bytes: int
    batch_size: int


@dataclass
class BenchReport:
    task: str
    backbone: str
    compressor: str
    target_sparsity: float
    seed: int
    metrics: MetricReport
    achieved_sparsity: float = 0.0
    param_count: int = 0
    base_param_count: int = 0
    retain_ratio: float | None = None
    profile: list[ProfileResult] = field(default_factory=list)
    phase_seconds: dict[str, float] = field(default_factory=dict)
    csr_index_overhead: int = 0
    flags: list[str] = field(default_factory=list)

    def metric_json(self) -> bytes:
        """Canonical metric section; byte-identical across reruns of the same
        (config, seed). Profiling figures deliberately live elsewhere."""
        payload = {
            "task": self.task, "backbone": self.backbone, "compressor": self.compressor,
            "target_sparsity": self.target_sparsity, "seed": self.seed,
            "metrics": dict(sorted(self.metrics.metrics.items())),
            "param_count": self.param_count, "base_param_count": self.base_param_count,
            "achieved_sparsity": self.achieved_sparsity,
            "retain_ratio": self.retain_ratio, "flags": sorted(self.flags),
        }
        return json.dumps(payload, sort_keys=True).encode("utf-8")


# ---------------------------------------------------------------------------
# parameter bookkeeping
# ---------------------------------------------------------------------------

def unique_params(params: list[Tensor]) -> list[Tensor]:
    seen: set[int] = set()
    out = []
    for p in params:
        if id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out


@dataclass
class ModelBundle:
    task: str
    model: object
    slots: dict[str, EmbeddingLayer]          # model-facing layers (may be views)
    physical: list[EmbeddingLayer]            # parameter-owning layers
    base_params: int
    extra: dict = field(default_factory=dict)

    def param_count(self) -> int:
        return sum(layer.param_count() for layer in self.physical)

    def achieved_sparsity(self) -> float:
        return 1.0 - self.param_count() / self.base_params

    def params(self) -> list[Tensor]:
        return unique_params(self.model.params())

    def index_overhead(self) -> int:
        return sum(layer.index_overhead() for layer in self.physical
                   if isinstance(layer, CsrTable)) + sum(
            t.index_overhead() for layer in self.physical if isinstance(layer, CerpTable)
            and layer.frozen for t in layer.frozen)


# ---------------------------------------------------------------------------
# layer builders
# ---------------------------------------------------------------------------

def _compressed_layer(kind: str, spec: EmbeddingSpec, target: float,
                      rng: np.random.Generator, cfg: ExperimentConfig) -> EmbeddingLayer:
    budget = int(round((1.0 - target) * spec.full_params))
    if kind == "qr":
        return QrTable(spec, qr_rows_for_budget(spec, budget), rng=rng)
    if kind == "tt":
        nf, df, ranks, cache_rows = tt_plan_for_budget(
            spec, budget, core_count=cfg.tt_cores, use_cache=cfg.tt_cache)
        layer = TtTable(spec, nf, df, ranks, rng=rng)
        layer._planned_cache_rows = cache_rows
        return layer
    if kind == "dhe":
        k = min(cfg.dhe_k, max(spec.d, cfg.dhe_k))
        k = max(k, spec.d)
        return DheEncoder(spec, k, dhe_width_for_budget(spec, k, budget), rng=rng)
    raise ConfigError(f"not a compositional compressor: {kind}")


def _slot_specs(cfg: ExperimentConfig, n_users: int, n_items: int,
                vocab_size: int | None) -> dict[str, EmbeddingSpec]:
    d = cfg.embedding_dim()
    if cfg.task == "ctr":
        return {"emb": EmbeddingSpec(vocab_size, d)}
    if cfg.backbone == "lightgcn":
        return {"emb": EmbeddingSpec(n_users + n_items, d)}
    return {name: EmbeddingSpec(n_users if "user" in name else n_items, d)
            for name in ("gmf_user", "gmf_item", "dnn_user", "dnn_item")}


def build_bundle(cfg: ExperimentConfig, rng: np.random.Generator,
                 n_users: int = 0, n_items: int = 0,
                 vocab_size: int | None = None, n_fields: int | None = None,
                 field_of_id: np.ndarray | None = None,
                 adjacency=None) -> ModelBundle:
    """Construct the backbone with the compressor-appropriate embedding
    layers (trainable form)."""
    specs = _slot_specs(cfg, n_users, n_items, vocab_size)
    base_params = sum(s.full_params for s in specs.values())
    comp, target = cfg.compressor, cfg.sparsity
    slots: dict[str, EmbeddingLayer] = {}
    physical: list[EmbeddingLayer] = []

    if comp in ("none", "magprune"):
        for name, spec in specs.items():
            layer = FullTable(spec, rng=rng)
            slots[name] = layer
            physical.append(layer)
    elif comp in COMPOSITIONAL_FAMILY:
        for name, spec in specs.items():
            if cfg.task == "cf" and cfg.backbone == "lightgcn":
                user = _compressed_layer(comp, EmbeddingSpec(n_users, spec.d), target, rng, cfg)
                item = _compressed_layer(comp, EmbeddingSpec(n_items, spec.d), target, rng, cfg)
                layer = PairedEmbedding(user, item)
                physical.extend([user, item])
            else:
                layer = _compressed_layer(comp, spec, target, rng, cfg)
                physical.append(layer)
            slots[name] = layer
    elif comp in ("pep", "cerp"):
        # prune user and item tables jointly: one physical table, offset views
        total_n = sum(s.full_params for s in specs.values()) // cfg.embedding_dim()
        joint_spec = EmbeddingSpec(total_n, cfg.embedding_dim())
        if comp == "pep":
            parent: EmbeddingLayer = StrEmbedding(joint_spec, rng=rng)
        else:
            budget = int(round((1.0 - target) * joint_spec.full_params))
            parent = CerpTable(joint_spec, cerp_rows_for_budget(joint_spec, budget), rng=rng)
        physical.append(parent)
        base = 0
        for name, spec in specs.items():
            slots[name] = (parent if len(specs) == 1
                           else OffsetView(parent, base, spec.n))
            base += spec.n
    elif comp == "optembed":
        for name, spec in specs.items():
            if cfg.task == "ctr":
                groups = field_of_id
            elif cfg.backbone == "lightgcn":
                groups = np.concatenate([np.zeros(n_users, dtype=np.int64),
                                         np.ones(n_items, dtype=np.int64)])
            else:
                groups = np.zeros(spec.n, dtype=np.int64)
            layer = Supernet(spec, groups, rng=rng)
            slots[name] = layer
            physical.append(layer)
    else:
        raise ConfigError(f"unknown compressor {comp!r}")

    model_rng = np.random.default_rng(cfg.seed + 1)
    if cfg.task == "ctr":
        if cfg.backbone == "deepfm":
            model = DeepFM(slots["emb"], n_fields, model_rng, dropout=cfg.dropout)
        else:
            f = n_fields * cfg.embedding_dim()
            model = DcnMix(slots["emb"], n_fields, model_rng, n_cross=3,
                           rank=min(64, max(2, f // 2)), n_experts=4, dropout=cfg.dropout)
    elif cfg.backbone == "lightgcn":
        model = LightGCN(slots["emb"], adjacency, n_users, n_items,
                         n_layers=cfg.n_layers, gamma=cfg.gamma, tau=cfg.tau)
    else:
        model = NeuMF(slots["gmf_user"], slots["gmf_item"], slots["dnn_user"],
                      slots["dnn_item"], model_rng, dropout=cfg.dropout)
    return ModelBundle(cfg.task, model, slots, physical, base_params)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

class Trainer:
    """Minibatch trainer usable one epoch at a time (mask-finding phases call
    `run_epoch` repeatedly against the same optimizer state)."""

    def __init__(self, bundle: ModelBundle, cfg: ExperimentConfig,
                 train_data, rng: np.random.Generator,
                 constraints: tuple[MaskConstraint, ...] = (),
                 per_batch=None, extra_loss=None, lr: float | None = None):
        self.bundle = bundle
        self.cfg = cfg
        self.data = train_data
        self.rng = rng
        self.constraints = constraints
        self.per_batch = per_batch
        self.extra_loss = extra_loss
        self.adam = Adam(bundle.params(), lr=lr if lr is not None else cfg.lr)
        self.step_count = 0

    def rebuild_optimizer(self) -> None:
        self.adam = Adam(self.bundle.params(), lr=self.adam.lr)

    def _step(self, loss: Tensor) -> None:
        self.adam.zero_grad()
        ad.backward(loss)
        for c in self.constraints:
            c.mask_grad()
        self.adam.step()
        for c in self.constraints:
            c.project()
        self.step_count += 1

    def run_epoch(self) -> float:
        model, cfg = self.bundle.model, self.cfg
        total, batches = 0.0, 0
        if self.bundle.task == "cf":
            pairs = self.data.pairs
            order = self.rng.permutation(len(pairs))
            for lo in range(0, len(order), cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                users = pairs[idx, 0]
                pos = pairs[idx, 1]
                negs = batch_negatives(self.data, users, cfg.neg_count
                                       if cfg.backbone == "neumf" else 1, self.rng)
                if self.per_batch:
                    self.per_batch()
                loss = model.loss(users, pos, negs, lam=cfg.l2)
                if self.extra_loss is not None:
                    node_ids = self._cf_node_ids(users, pos, negs)
                    loss = ad.add(loss, self.extra_loss(node_ids))
                self._step(loss)
                total += loss.item()
                batches += 1
        else:
            order = self.rng.permutation(len(self.data))
            for lo in range(0, len(order), cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                ids = self.data.feature_ids[idx]
                labels = self.data.labels[idx]
                if self.per_batch:
                    self.per_batch()
                loss = model.loss(ids, labels, lam=cfg.l2)
                if self.extra_loss is not None:
                    loss = ad.add(loss, self.extra_loss(ids.reshape(-1)))
                self._step(loss)
                total += loss.item()
                batches += 1
        return total / max(1, batches)

    def _cf_node_ids(self, users, pos, negs) -> np.ndarray:
        if self.cfg.backbone == "lightgcn":
            n_users = self.bundle.model.n_users
            return np.unique(np.concatenate([users, pos + n_users,
                                             negs.reshape(-1) + n_users]))
        # joint table for the latent-factor model: the four role offsets
        u, i = users, pos
        n_u = int(self.bundle.slots["gmf_user"].spec.n)
        n_i = int(self.bundle.slots["gmf_item"].spec.n)
        items = np.concatenate([i, negs.reshape(-1)])
        return np.unique(np.concatenate([
            u, items + n_u, u + n_u + n_i, items + 2 * n_u + n_i]))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def make_cf_scorer(model):
    if isinstance(model, LightGCN):
        finals = model.final_embeddings()
        users_part = finals[: model.n_users]
        items_part = finals[model.n_users:]
        return lambda users: users_part[users] @ items_part.T
    return lambda users: model.score_rows(users, model.gmf_item.spec.n)


def eval_cf(bundle: ModelBundle, observed: list[np.ndarray], test: InteractionSet,
            k: int = 20, user_fraction: float = 1.0,
            rng: np.random.Generator | None = None) -> dict[str, float]:
    test_lists = test.items_by_user()
    if user_fraction < 1.0:
        rng = rng or np.random.default_rng(0)
        keep = rng.random(len(test_lists)) < user_fraction
        test_lists = [t if keep[u] else np.empty(0, dtype=np.int64)
                      for u, t in enumerate(test_lists)]
        if not any(len(t) for t in test_lists):
            test_lists = test.items_by_user()
    ndcg, recall = evaluate_topk(make_cf_scorer(bundle.model), observed, test_lists, k=k)
    return {"NDCG@20": ndcg, "Recall@20": recall}


def eval_ctr(bundle: ModelBundle, records: CtrRecordSet, batch: int = 4096) -> dict[str, float]:
    probs = np.empty(len(records))
    for lo in range(0, len(records), batch):
        ids = records.feature_ids[lo:lo + batch]
        probs[lo:lo + batch] = bundle.model.predict(ids).data
    return {"AUC": auc(probs, records.labels), "LogLoss": log_loss(probs, records.labels)}


def popularity_scores(train: InteractionSet) -> np.ndarray:
    counts = np.zeros(train.item_count)
    np.add.at(counts, train.pairs[:, 1], 1.0)
    return counts


def eval_most_popular(train_observed: list[np.ndarray], test: InteractionSet,
                      counts: np.ndarray, k: int = 20) -> dict[str, float]:
    scorer = lambda users: np.tile(counts, (users.size, 1))
    ndcg, recall = evaluate_topk(scorer, train_observed, test.items_by_user(), k=k)
    return {"NDCG@20": ndcg, "Recall@20": recall}


# ---------------------------------------------------------------------------
# compression phases
# ---------------------------------------------------------------------------

def _stack_full_tables(layers: list[FullTable]) -> np.ndarray:
    return np.concatenate([l.table.data for l in layers], axis=0)


def _swap_in_csr(bundle: ModelBundle, dense_stack: np.ndarray, keep_mask: np.ndarray,
                 cfg: ExperimentConfig) -> None:
    """Replace the model's embedding slots by CSR tables holding the kept
    entries of the jointly pruned stack."""
    offset = 0
    new_physical = []
    for name, layer in bundle.slots.items():
        n = layer.spec.n
        spec = EmbeddingSpec(n, layer.spec.d)
        csr = CsrTable.from_dense_mask(spec, dense_stack[offset:offset + n],
                                       keep_mask[offset:offset + n])
        bundle.slots[name] = csr
        new_physical.append(csr)
        offset += n
    bundle.physical = new_physical
    model = bundle.model
    if isinstance(model, LightGCN):
        model.embedding = bundle.slots["emb"]
    elif isinstance(model, NeuMF):
        model.gmf_user = bundle.slots["gmf_user"]
        model.gmf_item = bundle.slots["gmf_item"]
        model.dnn_user = bundle.slots["dnn_user"]
        model.dnn_item = bundle.slots["dnn_item"]
    else:
        model.embedding = bundle.slots["emb"]


def _magprune_phase(bundle: ModelBundle, cfg: ExperimentConfig, valid_eval) -> dict:
    """Post-hoc magnitude pruning; for CF the row floor n_min is searched by
    validation metric unless pinned in the config."""
    tables = [l for l in bundle.physical]
    dense = _stack_full_tables(tables)
    if cfg.task == "ctr" or cfg.n_min is not None:
        candidates = [cfg.n_min if cfg.n_min is not None else 0]
    else:
        candidates = [0, 1, 2, 4, 8]
    d = dense.shape[1]
    best = None
    for n_min in candidates:
        if n_min > d or n_min * dense.shape[0] > dense.size - math.floor(dense.size * cfg.sparsity):
            continue
        keep = magnitude_prune_mask(dense, cfg.sparsity, n_min)
        if len(candidates) == 1:
            best = (0.0, n_min, keep)
            break
        score = valid_eval(dense * keep)
        if best is None or score > best[0]:
            best = (score, n_min, keep)
    if best is None:
        raise UnreachableSparsityError("magprune", cfg.sparsity,
                                       "no feasible n_min under the row constraint")
    _, n_min, keep = best
    _swap_in_csr(bundle, dense, keep, cfg)
    return {"n_min": n_min}


def _apply_dense_override(bundle: ModelBundle, dense_stack: np.ndarray):
    """Temporarily swap each slot's lookup to rows of `dense_stack` (used for
    the n_min search without rebuilding models)."""
    offset = 0
    overrides = []
    for name, layer in bundle.slots.items():
        n = layer.spec.n
        sub = FullTable(EmbeddingSpec(n, layer.spec.d),
                        weights=dense_stack[offset:offset + n])
        overrides.append((name, layer))
        bundle.slots[name] = sub
        offset += n
    model = bundle.model
    saved = {}
    if isinstance(model, LightGCN):
        saved["embedding"] = model.embedding
        model.embedding = bundle.slots["emb"]
    elif isinstance(model, NeuMF):
        for attr in ("gmf_user", "gmf_item", "dnn_user", "dnn_item"):
            saved[attr] = getattr(model, attr)
            setattr(model, attr, bundle.slots[attr])
    else:
        saved["embedding"] = model.embedding
        model.embedding = bundle.slots["emb"]

    def restore():
        for name, layer in overrides:
            bundle.slots[name] = layer
        for attr, layer in saved.items():
            setattr(model, attr, layer)
    return restore


# ---------------------------------------------------------------------------
# profiling
# ---------------------------------------------------------------------------

def _limit_threads():
    try:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=1)
    except Exception:  # pragma: no cover - fallback when the helper is absent
        import contextlib
        return contextlib.nullcontext()


def profile_callable(step, phase: str, batch_size: int, repetitions: int = 5,
                     warmup: int = 3) -> ProfileResult:
    """Median wall time over `repetitions` after warmup batches; peak memory
    is the allocator high-water mark (tracked arrays: activations, gradients,
    optimizer state, and any parameter arrays written while tracing)."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    with _limit_threads():
        started_here = not tracemalloc.is_tracing()
        if started_here:
            tracemalloc.start()
        for _ in range(warmup):
            step()
        gc.collect()
        tracemalloc.reset_peak()
        times = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            step()
            times.append((time.perf_counter() - t0) * 1000.0)
        _, peak = tracemalloc.get_traced_memory()
        if started_here:
            tracemalloc.stop()
    return ProfileResult(phase, float(np.median(times)), int(peak), batch_size)


def profile_lookup(layer: EmbeddingLayer, batch_size: int, repetitions: int = 5,
                   seed: int = 0) -> ProfileResult:
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, layer.spec.n, size=batch_size)
    return profile_callable(lambda: layer.lookup(ids), "inference", batch_size,
                            repetitions)


def profile_bundle(bundle: ModelBundle, cfg: ExperimentConfig, train_data,
                   rng: np.random.Generator) -> list[ProfileResult]:
    results = []
    # inference: embedding materialization dominates CF serving cost
    if bundle.task == "cf":
        n = sum(l.spec.n for l in bundle.slots.values())
        ids = rng.integers(0, min(l.spec.n for l in bundle.slots.values()),
                           size=cfg.profile_batch)

        def infer_step():
            for layer in bundle.slots.values():
                layer.lookup(ids % layer.spec.n)
    else:
        idx = rng.integers(0, len(train_data), size=cfg.profile_batch)
        batch_ids = train_data.feature_ids[idx]

        def infer_step():
            bundle.model.predict(batch_ids)

    results.append(profile_callable(infer_step, "inference", cfg.profile_batch,
                                    cfg.profile_reps))

    # training: snapshot weights, profile full optimizer steps, restore
    params = bundle.params()
    saved = [p.data for p in params]
    adam = Adam(params, lr=cfg.lr)
    if bundle.task == "cf":
        pairs = train_data.pairs
        idx = rng.integers(0, len(pairs), size=cfg.profile_batch)
        users, pos = pairs[idx, 0], pairs[idx, 1]
        negs = batch_negatives(train_data, users,
                               cfg.neg_count if cfg.backbone == "neumf" else 1, rng)

        def train_step():
            loss = bundle.model.loss(users, pos, negs, lam=cfg.l2)
            adam.zero_grad()
            ad.backward(loss)
            adam.step()
    else:
        idx = rng.integers(0, len(train_data), size=cfg.profile_batch)
        ids, labels = train_data.feature_ids[idx], train_data.labels[idx]

        def train_step():
            loss = bundle.model.loss(ids, labels, lam=cfg.l2)
            adam.zero_grad()
            ad.backward(loss)
            adam.step()

    results.append(profile_callable(train_step, "train", cfg.profile_batch,
                                    cfg.profile_reps))
    for p, data in zip(params, saved):
        p.assign(data)
    return results


# ---------------------------------------------------------------------------
# the pipeline
# ---------------------------------------------------------------------------

def _sparsity_tolerance(cfg: ExperimentConfig, base_params: int) -> float:
    if cfg.compressor in PRUNING_FAMILY:
        return 1.0 / base_params + 1e-12
    if cfg.compressor in COMPOSITIONAL_FAMILY:
        return 0.02
    return math.inf


def _load_cf(cfg: ExperimentConfig, rng: np.random.Generator):
    if cfg.data is None:
        from .datasets import bundled_cf_dir
        data_dir = bundled_cf_dir()
    else:
        data_dir = Path(cfg.data)
        if not data_dir.is_dir():
            raise DataError(f"{data_dir}: cf data must be a directory with train.tsv/test.tsv")
    full_train, test = load_cf_dataset(data_dir)
    train, valid = split_per_user(full_train, 0.9, rng)
    return full_train, train, valid, test


def run_pipeline(cfg: ExperimentConfig, baseline: BenchReport | None = None) -> BenchReport:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    phases: dict[str, float] = {}
    flags: list[str] = []
    details: dict = {}

    def timed(name):
        class _T:
            def __enter__(self_inner):
                self_inner.t0 = time.perf_counter()
            def __exit__(self_inner, *exc):
                phases[name] = phases.get(name, 0.0) + time.perf_counter() - self_inner.t0
        return _T()

    if cfg.task == "cf":
        with timed("load"):
            full_train, train, valid, test = _load_cf(cfg, rng)
            adjacency = build_normalized_adjacency(train)
        bundle = build_bundle(cfg, np.random.default_rng(cfg.seed + 2),
                              n_users=train.user_count, n_items=train.item_count,
                              adjacency=adjacency)
        observed = full_train.items_by_user()        # train + valid pairs masked at test
        train_observed = train.items_by_user()       # only train masked on valid eval

        def valid_metric() -> float:
            return eval_cf(bundle, train_observed, valid, user_fraction=cfg.valid_fraction,
                           rng=np.random.default_rng(cfg.seed + 9))["NDCG@20"]

        def valid_metric_with_dense(dense_stack) -> float:
            restore = _apply_dense_override(bundle, dense_stack)
            try:
                return valid_metric()
            finally:
                restore()

        _run_compression_phases(bundle, cfg, train, rng, timed, details,
                                valid_metric, valid_metric_with_dense)
        with timed("evaluate"):
            metric_values = eval_cf(bundle, observed, test)
        profile_data = train
    else:
        with timed("load"):
            if cfg.data is None or cfg.schema is None:
                raise DataError("ctr task needs --data and --schema")
            train, valid, test = load_ctr_dataset(cfg.data, cfg.schema,
                                                  min_freq=cfg.min_freq, seed=cfg.seed)
        vocab = train.vocab
        field_of_id = np.empty(vocab.total, dtype=np.int64)
        for f, (lo, size) in enumerate(vocab.field_offsets()):
            field_of_id[lo:lo + size] = f
        bundle = build_bundle(cfg, np.random.default_rng(cfg.seed + 2),
                              vocab_size=vocab.total, n_fields=train.n_fields,
                              field_of_id=field_of_id)

        def valid_metric() -> float:
            return eval_ctr(bundle, valid)["AUC"]

        def valid_metric_with_dense(dense_stack) -> float:
            restore = _apply_dense_override(bundle, dense_stack)
            try:
                return valid_metric()
            finally:
                restore()

        _run_compression_phases(bundle, cfg, train, rng, timed, details,
                                valid_metric, valid_metric_with_dense)
        with timed("evaluate"):
            metric_values = eval_ctr(bundle, test)
        profile_data = train

    achieved = bundle.achieved_sparsity()
    tol = _sparsity_tolerance(cfg, bundle.base_params)
    target = cfg.sparsity if cfg.compressor != "none" else 0.0
    if achieved < 0:
        flags.append("negative_sparsity")
    if cfg.compressor == "optembed":
        if achieved < target - 1e-9:
            flags.append("sparsity_below_target")
    elif cfg.compressor != "none" and abs(achieved - target) > tol:
        flags.append("sparsity_off_target")

    report = BenchReport(
        task=cfg.task, backbone=cfg.backbone, compressor=cfg.compressor,
        target_sparsity=target, seed=cfg.seed,
        metrics=MetricReport(cfg.task, metric_values, bundle.param_count(),
                             bundle.base_params, achieved, flags),
        achieved_sparsity=achieved, param_count=bundle.param_count(),
        base_param_count=bundle.base_params,
        csr_index_overhead=bundle.index_overhead(), flags=flags,
    )
    report.metrics.validate()

    with timed("profile"):
        report.profile = profile_bundle(bundle, cfg, profile_data,
                                        np.random.default_rng(cfg.seed + 17))
    report.phase_seconds = phases

    if baseline is not None:
        key = "NDCG@20" if cfg.task == "cf" else "AUC"
        base_value = baseline.metrics.metrics.get(key)
        if base_value:
            report.retain_ratio = metric_values[key] / base_value
    details["bundle"] = bundle
    report._details = details  # inspection hook; not serialized
    return report


def _run_compression_phases(bundle, cfg, train_data, rng, timed, details,
                            valid_metric, valid_metric_with_dense) -> None:
    comp = cfg.compressor
    trainer_rng = np.random.default_rng(cfg.seed + 3)

    if comp in ("none", "qr", "dhe"):
        trainer = Trainer(bundle, cfg, train_data, trainer_rng)
        with timed("train"):
            for _ in range(cfg.epochs):
                trainer.run_epoch()
        return

    if comp == "tt":
        trainer = Trainer(bundle, cfg, train_data, trainer_rng)
        tts = [l for l in bundle.physical if isinstance(l, TtTable)]
        planned = {id(l): getattr(l, "_planned_cache_rows", 0) for l in tts}
        warm = 1 if any(planned.values()) and cfg.epochs > 1 else 0
        with timed("train"):
            for _ in range(warm):
                trainer.run_epoch()
        if warm:
            with timed("build cache"):
                freqs = _tt_frequencies(bundle, cfg, train_data)
                for layer in tts:
                    layer.build_cache(freqs[id(layer)], planned[id(layer)])
                trainer.rebuild_optimizer()
        with timed("train"):
            for _ in range(cfg.epochs - warm):
                trainer.run_epoch()
        return

    if comp == "magprune":
        trainer = Trainer(bundle, cfg, train_data, trainer_rng)
        with timed("train"):
            for _ in range(cfg.epochs):
                trainer.run_epoch()
        with timed("prune"):
            details.update(_magprune_phase(bundle, cfg, valid_metric_with_dense))
        return

    if comp == "pep":
        layer = bundle.physical[0]
        assert isinstance(layer, StrEmbedding)
        theta_mask_trainer = Trainer(bundle, cfg, train_data, trainer_rng)
        with timed("find mask"):
            snapshot = pep_find_mask(layer, lambda _e: theta_mask_trainer.run_epoch(),
                                     cfg.sparsity, max_epochs=max(cfg.epochs, 4))
        with timed("retrain"):
            _lottery_retrain(bundle, cfg, train_data, snapshot)
        return

    if comp == "cerp":
        layer = bundle.physical[0]
        assert isinstance(layer, CerpTable)
        budget = int(round((1.0 - cfg.sparsity) * bundle.base_params))
        dense_capacity = 2 * layer.rows * layer.spec.d
        internal_target = max(0.0, 1.0 - budget / dense_capacity)

        def extra(ids):
            e1, e2 = layer.effective_tables()
            i1, i2 = layer.pair_indices(np.asarray(ids) % layer.spec.n)
            return cerp_regularizer(e1, e2, i1, i2, weight=cfg.cerp_reg)

        trainer = Trainer(bundle, cfg, train_data, trainer_rng, extra_loss=extra)
        with timed("train"):
            for epoch in range(cfg.epochs):
                ramp = internal_target * min(1.0, (epoch + 1) / max(1, cfg.epochs - 1))
                layer.raise_threshold_floor(ramp)
                trainer.run_epoch()
        with timed("freeze"):
            layer.freeze_to_budget(budget)
            bundle.slots = {k: (layer if v is layer else v) for k, v in bundle.slots.items()}
        return

    if comp == "optembed":
        supernets = [l for l in bundle.physical if isinstance(l, Supernet)]
        d = cfg.embedding_dim()
        target_width = (1.0 - cfg.sparsity) * d
        if target_width >= (d + 1) / 2.0:
            dist = GeometricDimDistribution(d, 1.0)
        else:
            dist = GeometricDimDistribution(d, solve_alpha(d, max(1.0 + 1e-6, target_width)))
        theta0 = {id(s): s.inner.table.data.copy() for s in supernets}
        sn_rng = np.random.default_rng(cfg.seed + 5)
        trainer = Trainer(
            bundle, cfg, train_data, trainer_rng,
            per_batch=lambda: [s.set_widths(sample_dim_mask(dist, sn_rng, s.n_groups))
                               for s in supernets])
        with timed("train supernet"):
            for _ in range(cfg.epochs):
                trainer.run_epoch()
        for s in supernets:
            s.set_widths(np.full(s.n_groups, s.spec.d, dtype=np.int64))
        with timed("search"):
            search = SupernetSearch(supernets, dist,
                                    search_row_keep=(cfg.task == "ctr"))
            sc = SearchConfig(population=cfg.search_population,
                              generations=cfg.search_generations,
                              target_sparsity=cfg.sparsity,
                              search_row_keep=(cfg.task == "ctr"))
            best, _fit = evolutionary_search(search, valid_metric, sc,
                                             np.random.default_rng(cfg.seed + 6))
            details["best_widths"] = best.widths.tolist()
        masks = [s.induced_mask() for s in supernets]
        stack_mask = np.concatenate(masks, axis=0)
        stack_theta0 = np.concatenate([theta0[id(s)] for s in supernets], axis=0)
        snapshot = MaskSnapshot(stack_mask, stack_theta0)
        with timed("retrain"):
            _lottery_retrain(bundle, cfg, train_data, snapshot)
        return

    raise ConfigError(f"unknown compressor {comp!r}")


def _tt_frequencies(bundle, cfg, train_data) -> dict[int, np.ndarray]:
    """Training-frequency per feature id, per tensor-train layer."""
    freqs: dict[int, np.ndarray] = {}
    if bundle.task == "ctr":
        counts = np.bincount(train_data.feature_ids.reshape(-1),
                             minlength=bundle.slots["emb"].spec.n).astype(np.float64)
        for layer in bundle.physical:
            if isinstance(layer, TtTable):
                freqs[id(layer)] = counts
        return freqs
    user_counts = np.bincount(train_data.pairs[:, 0], minlength=train_data.user_count)
    item_counts = np.bincount(train_data.pairs[:, 1], minlength=train_data.item_count)
    for name, slot in bundle.slots.items():
        parts = ([slot.first, slot.second] if isinstance(slot, PairedEmbedding) else [slot])
        side = 0
        for part in parts:
            if isinstance(part, TtTable):
                if isinstance(slot, PairedEmbedding):
                    freqs[id(part)] = (user_counts if side == 0 else item_counts).astype(float)
                else:
                    freqs[id(part)] = (user_counts if "user" in name else item_counts).astype(float)
            side += 1
    return freqs


def _lottery_retrain(bundle: ModelBundle, cfg: ExperimentConfig, train_data,
                     snapshot: MaskSnapshot) -> None:
    """Second phase shared by the mask-finding methods: fresh full tables at
    theta0 ⊙ M, training confined to the mask, final weights stored as CSR."""
    d = cfg.embedding_dim()
    joint_spec = EmbeddingSpec(snapshot.mask.shape[0], d)
    table = FullTable(joint_spec, weights=snapshot.theta0 * snapshot.mask)
    offset = 0
    new_physical = [table]
    for name, layer in bundle.slots.items():
        n = layer.spec.n
        view = OffsetView(table, offset, n) if len(bundle.slots) > 1 else table
        bundle.slots[name] = view
        offset += n
    bundle.physical = new_physical
    model = bundle.model
    if isinstance(model, LightGCN):
        model.embedding = bundle.slots["emb"]
    elif isinstance(model, NeuMF):
        for attr in ("gmf_user", "gmf_item", "dnn_user", "dnn_item"):
            setattr(model, attr, bundle.slots[attr])
    else:
        model.embedding = bundle.slots["emb"]

    def train_fn(constraint: MaskConstraint):
        trainer = Trainer(bundle, cfg, train_data, np.random.default_rng(cfg.seed + 7),
                          constraints=(constraint,))
        for _ in range(cfg.epochs):
            trainer.run_epoch()
            constraint.check()

    retrain_with_mask(snapshot, table.table, train_fn)
    _swap_in_csr(bundle, table.table.data, snapshot.mask, cfg)


# ---------------------------------------------------------------------------
# checkpointing whole models
# ---------------------------------------------------------------------------

def save_model(path, bundle: ModelBundle, cfg: ExperimentConfig,
               optimizer: Adam | None = None) -> None:
    manifest = {"task": bundle.task, "backbone": cfg.backbone,
                "compressor": cfg.compressor, "dim": str(cfg.embedding_dim()),
                "seed": str(cfg.seed), "slots": ",".join(bundle.slots.keys())}
    if isinstance(bundle.model, LightGCN):
        manifest["n_users"] = str(bundle.model.n_users)
        manifest["n_items"] = str(bundle.model.n_items)
        manifest["n_layers"] = str(bundle.model.n_layers)
        manifest["gamma"] = repr(bundle.model.gamma)
        manifest["tau"] = repr(bundle.model.tau)
    if hasattr(bundle.model, "n_fields"):
        manifest["n_fields"] = str(bundle.model.n_fields)
    arrays: dict[str, np.ndarray] = {}
    for pi, layer in enumerate(bundle.physical):
        m, a = layer.state()
        for k, v in m.items():
            manifest[f"phys{pi}.{k}"] = v
        for k, v in a.items():
            arrays[f"phys{pi}.{k}"] = v
    for si, (name, layer) in enumerate(bundle.slots.items()):
        if isinstance(layer, OffsetView):
            pi = bundle.physical.index(layer.parent)
            manifest[f"slot.{name}"] = f"view:{pi}:{layer.base}:{layer.spec.n}"
        else:
            manifest[f"slot.{name}"] = f"phys:{bundle.physical.index(layer)}"
    dense = bundle.model.dense_params()
    for i, p in enumerate(dense):
        arrays[f"net.{i}"] = p.data
    if optimizer is not None:
        for k, v in optimizer.state_arrays().items():
            arrays[k] = v
    save_checkpoint(path, manifest, arrays)


def load_model(path, cfg: ExperimentConfig, adjacency=None,
               train: InteractionSet | None = None) -> ModelBundle:
    manifest, arrays = load_checkpoint(path)
    slots_names = manifest["slots"].split(",")
    physical: list[EmbeddingLayer] = []
    pi = 0
    while f"phys{pi}.kind" in manifest:
        prefix = f"phys{pi}."
        sub_m = {k[len(prefix):]: v for k, v in manifest.items() if k.startswith(prefix)}
        sub_a = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        physical.append(layer_from_state(sub_m, sub_a))
        pi += 1
    slots: dict[str, EmbeddingLayer] = {}
    for name in slots_names:
        ref = manifest[f"slot.{name}"]
        kind, _, rest = ref.partition(":")
        if kind == "view":
            idx, base, count = (int(x) for x in rest.split(":"))
            slots[name] = OffsetView(physical[idx], base, count)
        else:
            slots[name] = physical[int(rest)]
    task = manifest["task"]
    backbone = manifest["backbone"]
    model_rng = np.random.default_rng(int(manifest["seed"]) + 1)
    if backbone == "lightgcn":
        n_users, n_items = int(manifest["n_users"]), int(manifest["n_items"])
        if adjacency is None and train is not None:
            adjacency = build_normalized_adjacency(train)
        if adjacency is None:
            raise DataError("lightgcn checkpoints need training data for the adjacency")
        model = LightGCN(slots["emb"], adjacency, n_users, n_items,
                         n_layers=int(manifest["n_layers"]),
                         gamma=float(manifest["gamma"]), tau=float(manifest["tau"]))
    elif backbone == "neumf":
        model = NeuMF(slots["gmf_user"], slots["gmf_item"], slots["dnn_user"],
                      slots["dnn_item"], model_rng, dropout=cfg.dropout)
    elif backbone == "deepfm":
        model = DeepFM(slots["emb"], int(manifest["n_fields"]), model_rng,
                       dropout=cfg.dropout)
    else:
        n_fields = int(manifest["n_fields"])
        d = int(manifest["dim"])
        model = DcnMix(slots["emb"], n_fields, model_rng, n_cross=3,
                       rank=min(64, max(2, n_fields * d // 2)), n_experts=4,
                       dropout=cfg.dropout)
    dense = model.dense_params()
    for i, p in enumerate(dense):
        if f"net.{i}" in arrays:
            p.assign(arrays[f"net.{i}"])
    base = sum(s.spec.n * s.spec.d for s in slots.values())
    return ModelBundle(task, model, slots, physical, base)


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

def format_param_count(x: int) -> str:
    if x >= 1_000_000:
        return f"{x / 1e6:.2f}M"
    if x >= 1_000:
        return f"{x / 1e3:.0f}K"
    return str(int(x))


def emit_report(reports: list[BenchReport], out_dir) -> dict[str, Path]:
    """CSV (one row per run) plus an aligned text table grouped by
    (sparsity, method), and one canonical metric-section file per run."""
    if not reports:
        raise ValueError("need at least one report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metric_names = sorted({m for r in reports for m in r.metrics.metrics})
    csv_path = out_dir / "bench.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        header = ["task", "backbone", "compressor", "target_sparsity",
                  "achieved_sparsity", "seed", "param_count", "params_fmt",
                  *metric_names, "retain_ratio",
                  "train_ms_per_batch", "infer_ms_per_batch",
                  "train_peak_bytes", "infer_peak_bytes", "csr_index_overhead", "flags"]
        fh.write(",".join(header) + "\n")
        for r in reports:
            prof = {p.phase: p for p in r.profile}
            row = [r.task, r.backbone, r.compressor, repr(r.target_sparsity),
                   repr(r.achieved_sparsity), str(r.seed), str(r.param_count),
                   format_param_count(r.param_count)]
            row += [repr(r.metrics.metrics.get(m, "")) for m in metric_names]
            row.append("" if r.retain_ratio is None else repr(r.retain_ratio))
            row.append(repr(prof["train"].wall_ms_per_batch) if "train" in prof else "")
            row.append(repr(prof["inference"].wall_ms_per_batch) if "inference" in prof else "")
            row.append(str(prof["train"].peak_bytes) if "train" in prof else "")
            row.append(str(prof["inference"].peak_bytes) if "inference" in prof else "")
            row.append(str(r.csr_index_overhead))
            row.append(";".join(r.flags))
            fh.write(",".join(row) + "\n")

    txt_path = out_dir / "bench.txt"
    with open(txt_path, "w", encoding="utf-8") as fh:
        cols = ["Sparsity", "Method", "Backbone", *metric_names, "#Para", "Retain"]
        rows = []
        for r in sorted(reports, key=lambda r: (r.target_sparsity, r.compressor, r.backbone)):
            rows.append([
                f"{r.target_sparsity:.0%}" if r.compressor != "none" else "0%",
                r.compressor, r.backbone,
                *(f"{r.metrics.metrics[m]:.4f}" if m in r.metrics.metrics else "-"
                  for m in metric_names),
                format_param_count(r.param_count),
                f"{r.retain_ratio:.4f}" if r.retain_ratio is not None else "-",
            ])
        widths = [max(len(c), *(len(row[i]) for row in rows)) for i, c in enumerate(cols)]
        fh.write("  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip() + "\n")
        last_group = None
        for r, row in zip(sorted(reports, key=lambda r: (r.target_sparsity, r.compressor,
                                                         r.backbone)), rows):
            group = (r.target_sparsity, r.compressor)
            if last_group is not None and group[0] != last_group[0]:
                fh.write("-" * (sum(widths) + 2 * (len(cols) - 1)) + "\n")
            last_group = group
            fh.write("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() + "\n")

    paths = {"csv": csv_path, "txt": txt_path}
    for r in reports:
        name = f"metrics-{r.task}-{r.backbone}-{r.compressor}-s{r.seed}.json"
        p = out_dir / name
        p.write_bytes(r.metric_json())
        paths[name] = p
    return paths
