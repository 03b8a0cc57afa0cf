"""Magnitude pruning, soft-threshold (STR) training with lottery-ticket
retraining, and the dual-table pruning glue."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .embeddings import CsrTable, EmbeddingLayer, EmbeddingSpec, FullTable


@dataclass(frozen=True)
class PruneConfig:
    target: float          # sparsity t in (0, 1]
    n_min: int = 0         # minimum surviving entries per row (CF only)

    def __post_init__(self):
        if not (0.0 < self.target <= 1.0):
            raise ValueError("target sparsity must lie in (0, 1]")
        if self.n_min < 0:
            raise ValueError("n_min must be non-negative")

    def validate_for(self, n: int, d: int) -> None:
        if self.n_min > d:
            raise ValueError(f"n_min={self.n_min} exceeds row width d={d}")
        kept = n * d - math.floor(n * d * self.target)
        if self.n_min * n > kept:
            raise ValueError(
                f"n_min={self.n_min} needs {self.n_min * n} survivors but the "
                f"target keeps only {kept}")


def magnitude_prune_mask(values: np.ndarray, t: float, n_min: int = 0) -> np.ndarray:
    """Keep mask for magnitude pruning: zero exactly floor(n*d*t) entries,
    never touching each row's n_min largest magnitudes; among the rest the
    smallest |value| go first, ties broken by (row, column) order."""
    values = np.asarray(values, dtype=np.float64)
    n, d = values.shape
    if t < 0.0 or t > 1.0:
        raise ValueError("target sparsity must lie in [0, 1]")
    num_prune = math.floor(n * d * t)
    if num_prune:
        PruneConfig(target=t, n_min=n_min).validate_for(n, d)
    mag = np.abs(values)
    if n_min > 0:
        # within-row ties resolved toward the lower column
        top = np.argsort(-mag, axis=1, kind="stable")[:, :n_min]
        protected = mag.copy()
        np.put_along_axis(protected, top, np.inf, axis=1)
        flat = protected.ravel()
    else:
        flat = mag.ravel()
    order = np.argsort(flat, kind="stable")  # stable = (row, col) lexicographic ties
    keep = np.ones(n * d, dtype=bool)
    keep[order[:num_prune]] = False
    return keep.reshape(n, d)


def magnitude_prune(table: FullTable | np.ndarray, t: float, n_min: int = 0,
                    spec: EmbeddingSpec | None = None) -> CsrTable:
    if isinstance(table, FullTable):
        dense, spec = table.table.data, table.spec
    else:
        dense = np.asarray(table, dtype=np.float64)
        spec = spec or EmbeddingSpec(*dense.shape)
    keep = magnitude_prune_mask(dense, t, n_min)
    return CsrTable.from_dense_mask(spec, dense, keep)


# ---------------------------------------------------------------------------
# soft-threshold reparameterization
# ---------------------------------------------------------------------------

def str_forward(w, s) -> Tensor:
    """Effective weight sign(w) * max(|w| - sigmoid(s), 0); differentiable
    almost everywhere in both the raw weight and the threshold."""
    w = w if isinstance(w, Tensor) else ad.constant(np.asarray(w, dtype=ad.default_dtype()))
    s = s if isinstance(s, Tensor) else ad.constant(np.asarray(s, dtype=ad.default_dtype()))
    return ad.mul(ad.sign(w), ad.relu(ad.sub(ad.absolute(w), ad.sigmoid(s))))


class StrEmbedding(EmbeddingLayer):
    """Full table trained through a soft threshold: lookups see the effective
    (thresholded) weights. Threshold granularity is one scalar per table by
    default, or one per row."""

    kind = "str"

    def __init__(self, spec: EmbeddingSpec, rng: np.random.Generator | None = None,
                 weights: np.ndarray | None = None, granularity: str = "table",
                 threshold_init: float = -8.0):
        super().__init__(spec)
        if granularity not in ("table", "row"):
            raise ValueError("granularity must be 'table' or 'row'")
        self.granularity = granularity
        rng = rng or np.random.default_rng(0)
        if weights is None:
            weights = rng.normal(0.0, 0.1, size=(spec.n, spec.d))
        dt = ad.default_dtype()
        self.raw = Tensor(np.asarray(weights, dtype=dt), requires_grad=True, name="str.raw")
        shape = (1,) if granularity == "table" else (spec.n, 1)
        self.threshold = Tensor(np.full(shape, threshold_init, dtype=dt),
                                requires_grad=True, name="str.threshold")

    def _row_thresholds(self, ids: np.ndarray) -> Tensor:
        if self.granularity == "table":
            return self.threshold
        return ad.gather_rows(self.threshold, ids)

    def lookup(self, ids) -> Tensor:
        ids = self._check_ids(ids)
        return str_forward(ad.gather_rows(self.raw, ids), self._row_thresholds(ids))

    def effective_dense(self) -> np.ndarray:
        return str_forward(self.raw.detach(), self.threshold.detach()).data

    def achieved_sparsity(self) -> float:
        eff = self.effective_dense()
        return 1.0 - np.count_nonzero(eff) / eff.size

    def raise_threshold_floor(self, fraction: float) -> None:
        """Lift the threshold so at least `fraction` of raw magnitudes fall
        below it; gradient updates may push it further but not back down past
        the floor. Keeps desk-scale mask finding on schedule."""
        fraction = min(max(fraction, 0.0), 1.0 - 1e-12)
        mag = np.abs(self.raw.data)
        if self.granularity == "table":
            q = np.quantile(mag, fraction)
            floor = _logit(min(max(q * 1.0001, 1e-9), 1 - 1e-9))
            self.threshold.assign(np.maximum(self.threshold.data, floor))
        else:
            q = np.quantile(mag, fraction, axis=1, keepdims=True)
            floor = _logit(np.clip(q * 1.0001, 1e-9, 1 - 1e-9))
            self.threshold.assign(np.maximum(self.threshold.data, floor))

    def params(self) -> list[Tensor]:
        return [self.raw, self.threshold]

    def param_count(self) -> int:
        return int(np.count_nonzero(self.effective_dense()))


def _logit(p):
    return np.log(p) - np.log1p(-p)


# ---------------------------------------------------------------------------
# mask finding and lottery-ticket retraining
# ---------------------------------------------------------------------------

@dataclass
class MaskSnapshot:
    mask: np.ndarray    # bool, table shape
    theta0: np.ndarray  # parameters captured before mask-finding training

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.theta0 = np.asarray(self.theta0, dtype=np.float64)
        if self.mask.shape != self.theta0.shape:
            raise ValueError("mask and initial parameters must share a shape")

    def to_arrays(self, prefix: str = "snapshot") -> dict[str, np.ndarray]:
        spec = EmbeddingSpec(*self.mask.shape)
        csr = CsrTable.from_dense_mask(spec, self.mask.astype(np.float64), self.mask)
        return {f"{prefix}.rowptr": csr.rowptr, f"{prefix}.indices": csr.indices,
                f"{prefix}.theta0": self.theta0}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], prefix: str = "snapshot") -> "MaskSnapshot":
        theta0 = arrays[f"{prefix}.theta0"]
        mask = np.zeros(theta0.shape, dtype=bool)
        rowptr = arrays[f"{prefix}.rowptr"]
        indices = arrays[f"{prefix}.indices"]
        for r in range(theta0.shape[0]):
            mask[r, indices[rowptr[r]:rowptr[r + 1]]] = True
        return cls(mask, theta0)


class StopTargetNotReached(RuntimeError):
    def __init__(self, target: float, best: float):
        self.target = target
        self.best = best
        super().__init__(f"sparsity target {target} not reached; best achieved {best:.4f}")


def pep_find_mask(layer: StrEmbedding, train_epoch, target: float,
                  max_epochs: int = 20, calibrate: bool = True,
                  schedule_floor: bool = True) -> MaskSnapshot:
    """Train with the soft threshold in the embedding path until the achieved
    sparsity crosses `target` (checked per epoch), then emit the nonzero
    pattern plus the pre-training parameters.

    `train_epoch(epoch)` runs one training pass over the data. With
    `schedule_floor` the threshold additionally ramps toward the target
    quantile, which keeps small budgets attainable without hand-tuning the
    threshold init. With `calibrate` the emitted mask is trimmed/extended by
    effective magnitude to the exact kept-entry count.
    """
    theta0 = layer.raw.data.copy()
    best = layer.achieved_sparsity()
    crossed = False
    for epoch in range(max_epochs):
        if schedule_floor:
            ramp = target * min(1.0, (epoch + 1) / max(1, max_epochs - 2))
            layer.raise_threshold_floor(ramp)
        train_epoch(epoch)
        achieved = layer.achieved_sparsity()
        best = max(best, achieved)
        if achieved >= target:
            crossed = True
            break
    if not crossed and best < target:
        raise StopTargetNotReached(target, best)
    eff = layer.effective_dense()
    mask = eff != 0.0
    if calibrate:
        mask = _calibrate_mask(eff, layer.raw.data, target)
    return MaskSnapshot(mask, theta0)


def _calibrate_mask(effective: np.ndarray, raw: np.ndarray, target: float) -> np.ndarray:
    """Adjust the found pattern to keep exactly n*d - floor(n*d*t) entries,
    ranking by |effective| and falling back to |raw| among the zeros."""
    n, d = effective.shape
    keep_count = n * d - math.floor(n * d * target)
    score = np.abs(effective).ravel()
    zeros = score == 0.0
    # revive order among pruned entries follows the raw magnitude
    score[zeros] = -1.0 / (1.0 + np.abs(raw).ravel()[zeros])
    order = np.argsort(-score, kind="stable")
    mask = np.zeros(n * d, dtype=bool)
    mask[order[:keep_count]] = True
    return mask.reshape(n, d)


class MaskConstraint:
    """Keeps a parameter confined to a fixed support during training: call
    `mask_grad` before the optimizer step and `project` after it."""

    def __init__(self, param: Tensor, mask: np.ndarray):
        if param.shape != mask.shape:
            raise ValueError("mask shape must match the parameter")
        self.param = param
        self.mask = np.asarray(mask, dtype=bool)

    def mask_grad(self) -> None:
        if self.param.grad is not None:
            self.param.grad = self.param.grad * self.mask

    def project(self) -> None:
        self.param.assign(self.param.data * self.mask)

    def check(self) -> None:
        if np.any(self.param.data[~self.mask] != 0.0):
            raise AssertionError("parameter left the mask support")


def retrain_with_mask(snapshot: MaskSnapshot, table: Tensor, train_fn) -> MaskConstraint:
    """Reset `table` to theta0 ⊙ M and train with updates confined to the
    mask support. `train_fn(constraint)` must call the constraint hooks
    around each optimizer step."""
    table.assign(snapshot.theta0 * snapshot.mask)
    constraint = MaskConstraint(table, snapshot.mask)
    train_fn(constraint)
    constraint.check()
    return constraint


# ---------------------------------------------------------------------------
# complementary-sparsity regularizer for the dual-table layer
# ---------------------------------------------------------------------------

def cerp_regularizer(e1: Tensor, e2: Tensor, i1, i2, weight: float = 1.0,
                     tau: float = 0.01) -> Tensor:
    """Penalty near zero when every composed coordinate has at least one
    nonzero contributor; grows smoothly with jointly-dead coordinates."""
    i1 = np.asarray(i1, dtype=np.int64)
    i2 = np.asarray(i2, dtype=np.int64)
    combined = ad.add(ad.absolute(ad.gather_rows(e1, i1)),
                      ad.absolute(ad.gather_rows(e2, i2)))
    per_pair = ad.tsum(ad.softplus(ad.mul(combined, -1.0 / tau)), axis=1)
    return ad.mul(ad.tmean(per_pair), weight)
