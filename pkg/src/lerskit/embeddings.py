"""Embedding representations behind one lookup / parameter-count contract.

Every layer maps feature ids in [0, n) to d-vectors through `lookup`, which
returns an autodiff Tensor differentiable in the layer's trainable arrays.
`param_count` reports the storage the layer needs for its table (the
accounting each compression technique is judged by), and `sparsity` relates
that to the uncompressed n*d baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class EmbeddingSpec:
    n: int  # feature count
    d: int  # embedding dimension

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ValueError("embedding spec requires n >= 1 and d >= 1")

    @property
    def full_params(self) -> int:
        return self.n * self.d


class UnreachableSparsityError(ValueError):
    """A method cannot realize the requested budget; names the attainable range."""

    def __init__(self, method: str, target: float, attainable: str):
        self.method = method
        self.target = target
        super().__init__(f"{method}: sparsity target {target} unreachable; attainable {attainable}")


def sparsity(layer: "EmbeddingLayer", base: EmbeddingSpec) -> float:
    """1 - M(compressed)/M(full). Can go negative (e.g. a generously sized
    hash encoder); callers flag that case rather than rejecting it."""
    if (layer.spec.n, layer.spec.d) != (base.n, base.d):
        raise ValueError("layer spec does not match the baseline spec")
    return 1.0 - layer.param_count() / base.full_params


class EmbeddingLayer:
    kind = "abstract"

    def __init__(self, spec: EmbeddingSpec):
        self.spec = spec

    def lookup(self, ids) -> Tensor:
        raise NotImplementedError

    def params(self) -> list[Tensor]:
        raise NotImplementedError

    def param_count(self) -> int:
        raise NotImplementedError

    def state(self) -> tuple[dict[str, str], dict[str, np.ndarray]]:
        raise NotImplementedError

    def _check_ids(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.spec.n):
            raise IndexError(f"{self.kind}: feature id out of range [0, {self.spec.n})")
        return ids

    def lookup_all(self) -> Tensor:
        return self.lookup(np.arange(self.spec.n))

    def dense_table(self) -> np.ndarray:
        """Materialized n x d table (no gradients); test/eval convenience."""
        return self.lookup_all().data


# ---------------------------------------------------------------------------
# full table
# ---------------------------------------------------------------------------

class FullTable(EmbeddingLayer):
    kind = "full"

    def __init__(self, spec: EmbeddingSpec, rng: np.random.Generator | None = None,
                 weights: np.ndarray | None = None, scale: float = 0.1):
        super().__init__(spec)
        if weights is None:
            rng = rng or np.random.default_rng(0)
            weights = rng.normal(0.0, scale, size=(spec.n, spec.d))
        self.table = Tensor(np.asarray(weights, dtype=ad.default_dtype()),
                            requires_grad=True, name="embedding.table")

    def lookup(self, ids) -> Tensor:
        return ad.gather_rows(self.table, self._check_ids(ids))

    def params(self) -> list[Tensor]:
        return [self.table]

    def param_count(self) -> int:
        return self.spec.full_params

    def state(self):
        return ({"kind": self.kind, "n": str(self.spec.n), "d": str(self.spec.d)},
                {"table": self.table.data})

    @classmethod
    def from_state(cls, manifest, arrays):
        spec = EmbeddingSpec(int(manifest["n"]), int(manifest["d"]))
        return cls(spec, weights=arrays["table"])


# ---------------------------------------------------------------------------
# quotient-remainder compositional table
# ---------------------------------------------------------------------------

def qr_indices(i: int, p: int) -> tuple[int, int]:
    """(i mod p, i div p); the two meta-table rows composing feature i."""
    if p < 1:
        raise ValueError("p must be >= 1")
    if i < 0:
        raise IndexError("feature id out of range")
    return i % p, i // p


class QrTable(EmbeddingLayer):
    """Two meta-tables combined by element-wise product: E1[i mod p] ⊙ E2[i div p]."""

    kind = "qr"

    def __init__(self, spec: EmbeddingSpec, p: int, rng: np.random.Generator | None = None,
                 e1: np.ndarray | None = None, e2: np.ndarray | None = None):
        super().__init__(spec)
        if p < 1:
            raise ValueError("p must be >= 1")
        self.p = p
        self.q = math.ceil(spec.n / p)
        rng = rng or np.random.default_rng(0)
        if e1 is None:
            # product composition: per-factor scale 0.1**0.5 keeps lookups ~0.1
            s = math.sqrt(0.1)
            e1 = rng.normal(0.0, s, size=(p, spec.d))
            e2 = rng.normal(0.0, s, size=(self.q, spec.d))
        self.e1 = Tensor(np.asarray(e1, dtype=ad.default_dtype()), requires_grad=True, name="qr.e1")
        self.e2 = Tensor(np.asarray(e2, dtype=ad.default_dtype()), requires_grad=True, name="qr.e2")

    def lookup(self, ids) -> Tensor:
        ids = self._check_ids(ids)
        return ad.mul(ad.gather_rows(self.e1, ids % self.p),
                      ad.gather_rows(self.e2, ids // self.p))

    def params(self) -> list[Tensor]:
        return [self.e1, self.e2]

    def param_count(self) -> int:
        return (self.p + self.q) * self.spec.d

    def state(self):
        return ({"kind": self.kind, "n": str(self.spec.n), "d": str(self.spec.d),
                 "p": str(self.p)},
                {"e1": self.e1.data, "e2": self.e2.data})

    @classmethod
    def from_state(cls, manifest, arrays):
        spec = EmbeddingSpec(int(manifest["n"]), int(manifest["d"]))
        return cls(spec, int(manifest["p"]), e1=arrays["e1"], e2=arrays["e2"])


def qr_rows_for_budget(spec: EmbeddingSpec, budget: int, tolerance_abs: float = 0.02) -> int:
    """Pick p so (p + ceil(n/p)) * d best approximates the parameter budget."""
    n, d = spec.n, spec.d
    ps = np.arange(1, n + 1, dtype=np.int64)
    totals = (ps + (n + ps - 1) // ps) * d
    achieved = 1.0 - totals / spec.full_params
    target = 1.0 - budget / spec.full_params
    best = int(np.argmin(np.abs(achieved - target)))
    if abs(achieved[best] - target) > tolerance_abs:
        lo, hi = 1.0 - totals.max() / spec.full_params, 1.0 - totals.min() / spec.full_params
        raise UnreachableSparsityError("qr", target, f"[{lo:.4f}, {hi:.4f}]")
    return int(ps[best])


# ---------------------------------------------------------------------------
# tensor-train table
# ---------------------------------------------------------------------------

def _mixed_radix_digits(ids: np.ndarray, radices: list[int]) -> list[np.ndarray]:
    """Row-major digits of each id over the given radices (most significant first)."""
    digits = []
    rem = ids
    for w in np.cumprod([1] + radices[::-1])[-2::-1]:
        digits.append(rem // w)
        rem = rem % w
    return digits


class TtTable(EmbeddingLayer):
    """Chain of cores G_k with shape (r_{k-1}, n_k, d_k, r_k); looking up row i
    contracts one slice per core. Optionally keeps the most frequent rows
    uncompressed in a directly trained cache."""

    kind = "tt"

    def __init__(self, spec: EmbeddingSpec, n_factors: list[int], d_factors: list[int],
                 ranks: list[int], rng: np.random.Generator | None = None,
                 cores: list[np.ndarray] | None = None,
                 cache_ids: np.ndarray | None = None,
                 cache_rows: np.ndarray | None = None):
        super().__init__(spec)
        t = len(n_factors)
        if len(d_factors) != t or len(ranks) != t + 1:
            raise ValueError("need one (n_k, d_k) pair per core and t+1 ranks")
        if ranks[0] != 1 or ranks[-1] != 1:
            raise ValueError("boundary ranks must be 1")
        if int(np.prod(n_factors)) < spec.n:
            raise ValueError("row factorization too small: prod(n_k) < n")
        if int(np.prod(d_factors)) != spec.d:
            raise ValueError("column factorization must satisfy prod(d_k) == d")
        self.n_factors = list(map(int, n_factors))
        self.d_factors = list(map(int, d_factors))
        self.ranks = list(map(int, ranks))
        rng = rng or np.random.default_rng(0)
        if cores is None:
            # entry variance ~ (0.1)^2 after contracting all rank paths
            paths = float(np.prod(self.ranks))
            std = (0.01 / paths) ** (1.0 / (2 * t))
            cores = [rng.normal(0.0, std, size=(ranks[k], n_factors[k], d_factors[k], ranks[k + 1]))
                     for k in range(t)]
        self.cores = [Tensor(np.asarray(c, dtype=ad.default_dtype()), requires_grad=True,
                             name=f"tt.core{k}") for k, c in enumerate(cores)]
        if cache_ids is None:
            cache_ids = np.empty(0, dtype=np.int64)
        self.cache_ids = np.sort(np.asarray(cache_ids, dtype=np.int64))
        if np.unique(self.cache_ids).size != self.cache_ids.size:
            raise ValueError("cache indices must be unique")
        if cache_rows is None:
            cache_rows = np.zeros((0, spec.d))
        self.cache_rows = Tensor(np.asarray(cache_rows, dtype=ad.default_dtype()),
                                 requires_grad=True, name="tt.cache")
        if self.cache_rows.shape[0] != self.cache_ids.size:
            raise ValueError("cache rows/ids length mismatch")

    @property
    def core_count(self) -> int:
        return len(self.cores)

    def _chain(self, ids: np.ndarray) -> Tensor:
        digits = _mixed_radix_digits(ids, self.n_factors)
        out = None
        for k, core in enumerate(self.cores):
            r0, nk, dk, r1 = core.shape
            flat = ad.reshape(ad.transpose(core, (1, 0, 2, 3)), (nk, r0 * dk * r1))
            sl = ad.reshape(ad.gather_rows(flat, digits[k]), (ids.size, r0, dk * r1))
            if out is None:
                out = ad.reshape(sl, (ids.size, dk, r1))
            else:
                prev_d = out.shape[1]
                out = ad.reshape(ad.bmm(out, sl), (ids.size, prev_d * dk, r1))
        return ad.reshape(out, (ids.size, self.spec.d))

    def lookup(self, ids) -> Tensor:
        ids = self._check_ids(ids)
        if self.cache_ids.size == 0:
            return self._chain(ids)
        pos = np.searchsorted(self.cache_ids, ids)
        pos_clip = np.minimum(pos, self.cache_ids.size - 1)
        cached = self.cache_ids[pos_clip] == ids
        if not cached.any():
            return self._chain(ids)
        cache_part = ad.gather_rows(self.cache_rows, pos_clip[cached])
        if cached.all():
            merged, order = cache_part, np.flatnonzero(cached)
        else:
            chain_part = self._chain(ids[~cached])
            merged = ad.concat([cache_part, chain_part], axis=0)
            order = np.concatenate([np.flatnonzero(cached), np.flatnonzero(~cached)])
        inverse = np.empty_like(order)
        inverse[order] = np.arange(order.size)
        return ad.gather_rows(merged, inverse)

    def params(self) -> list[Tensor]:
        ps = list(self.cores)
        if self.cache_ids.size:
            ps.append(self.cache_rows)
        return ps

    def param_count(self) -> int:
        total = sum(int(np.prod(c.shape)) for c in self.cores)
        return total + self.cache_ids.size * self.spec.d

    def build_cache(self, frequencies: np.ndarray, max_rows: int) -> None:
        """Promote the `max_rows` most frequent ids to directly trained dense
        rows, initialized from the current chain contraction."""
        if max_rows <= 0:
            return
        order = np.lexsort((np.arange(frequencies.size), -frequencies))
        ids = np.sort(order[:max_rows].astype(np.int64))
        rows = self._chain(ids).data
        self.cache_ids = ids
        self.cache_rows = Tensor(rows, requires_grad=True, name="tt.cache")

    def state(self):
        manifest = {"kind": self.kind, "n": str(self.spec.n), "d": str(self.spec.d),
                    "n_factors": ",".join(map(str, self.n_factors)),
                    "d_factors": ",".join(map(str, self.d_factors)),
                    "ranks": ",".join(map(str, self.ranks))}
        arrays = {f"core{k}": c.data for k, c in enumerate(self.cores)}
        arrays["cache_ids"] = self.cache_ids
        arrays["cache_rows"] = self.cache_rows.data
        return manifest, arrays

    @classmethod
    def from_state(cls, manifest, arrays):
        spec = EmbeddingSpec(int(manifest["n"]), int(manifest["d"]))
        nf = [int(x) for x in manifest["n_factors"].split(",")]
        df = [int(x) for x in manifest["d_factors"].split(",")]
        ranks = [int(x) for x in manifest["ranks"].split(",")]
        cores = [arrays[f"core{k}"] for k in range(len(nf))]
        return cls(spec, nf, df, ranks, cores=cores,
                   cache_ids=arrays["cache_ids"], cache_rows=arrays["cache_rows"])


def tt_reconstruct(table: TtTable, element_limit: int = 1 << 24) -> np.ndarray:
    """Contract the full core chain into an n x d matrix (test oracle)."""
    full_rows = int(np.prod(table.n_factors))
    if full_rows * table.spec.d > element_limit:
        raise MemoryError("tt_reconstruct limited to test-scale tables")
    out = None
    for core, dk in zip(table.cores, table.d_factors):
        c = core.data  # (r0, nk, dk, r1)
        if out is None:
            out = c.transpose(1, 2, 0, 3).reshape(c.shape[1], dk, c.shape[3])  # (N, D, r)
        else:
            n_prev, d_prev, r_prev = out.shape
            nk, r1 = c.shape[1], c.shape[3]
            merged = np.einsum("abr,rcds->acbds", out.reshape(n_prev, d_prev, r_prev), c)
            out = merged.reshape(n_prev * nk, d_prev * dk, r1)
    mat = out.reshape(full_rows, table.spec.d)[: table.spec.n]
    if table.cache_ids.size:
        mat = mat.copy()
        mat[table.cache_ids] = table.cache_rows.data
    return mat


def _near_balanced_row_factors(n: int, t: int) -> list[int]:
    factors = []
    rem = n
    for k in range(t, 0, -1):
        f = math.ceil(rem ** (1.0 / k))
        factors.append(f)
        rem = math.ceil(rem / f)
    return factors


def _exact_column_factors(d: int, t: int) -> list[int]:
    """Divisor t-tuple of d with the smallest spread (product exactly d)."""
    best = None
    def rec(remaining, parts):
        nonlocal best
        if len(parts) == t - 1:
            full = parts + [remaining]
            spread = max(full) - min(full)
            key = (spread, full)
            if best is None or key < best[0]:
                best = (key, full)
            return
        for a in range(1, remaining + 1):
            if remaining % a == 0:
                rec(remaining // a, parts + [a])
    rec(d, [])
    return sorted(best[1], reverse=True)


def tt_plan_for_budget(spec: EmbeddingSpec, budget: int, core_count: int = 3,
                       use_cache: bool = True, cache_fraction: float = 0.1,
                       tolerance_abs: float = 0.02):
    """Solve (factorizations, ranks, cache size) against a parameter budget.

    Ranks are searched on a grid (uniform plus neighbors); any remaining slack
    is filled with cached dense rows, capped at `cache_fraction` of the full
    table, which gives near-exact budget control.
    """
    n_factors = _near_balanced_row_factors(spec.n, core_count)
    d_factors = _exact_column_factors(spec.d, core_count)
    target = 1.0 - budget / spec.full_params

    def core_params(ranks):
        rs = [1] + list(ranks) + [1]
        return sum(rs[k] * n_factors[k] * d_factors[k] * rs[k + 1] for k in range(core_count))

    # ranks above this cannot fit the budget even with a single core term
    cheapest_term = min(n_factors[k] * d_factors[k] for k in range(core_count))
    max_rank = int(min(256, budget // max(1, cheapest_term) + 2))
    best = None
    if core_count == 2:
        grid = [(r,) for r in range(1, max_rank + 1)]
    else:
        grid = [(r1, r2) for r1 in range(1, max_rank + 1) for r2 in range(1, max_rank + 1)
                if max(r1, r2) <= 4 * min(r1, r2)]
    cache_cap = int(spec.n * cache_fraction) if use_cache else 0
    for ranks in grid:
        cp = core_params(ranks)
        if cp > budget * 1.05 + spec.d:
            continue
        cache_rows = min(cache_cap, max(0, (budget - cp) // spec.d))
        total = cp + cache_rows * spec.d
        err = abs((1.0 - total / spec.full_params) - target)
        if best is None or err < best[0]:
            best = (err, list(ranks), int(cache_rows))
    if best is None or best[0] > tolerance_abs:
        min_total = core_params([1] * (core_count - 1))
        hi = 1.0 - min_total / spec.full_params
        raise UnreachableSparsityError("tt", target, f"(-inf, {hi:.4f}]")
    ranks = [1] + best[1] + [1]
    return n_factors, d_factors, ranks, best[2]


# ---------------------------------------------------------------------------
# deterministic hash encoder
# ---------------------------------------------------------------------------

_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def dhe_encode(ids, seeds) -> np.ndarray:
    """Deterministic hash codes in [-1, 1): one avalanche-mixed value per
    (id, seed) pair. No learned state; identical across platforms and runs."""
    ids = np.atleast_1d(np.asarray(ids, dtype=np.uint64))
    seeds = np.asarray(seeds, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (ids[:, None] + np.uint64(1)) * _GOLDEN + seeds[None, :]
        z ^= z >> np.uint64(30)
        z *= _MIX1
        z ^= z >> np.uint64(27)
        z *= _MIX2
        z ^= z >> np.uint64(31)
    # top 53 bits -> uniform double in [0, 2), shifted to [-1, 1)
    return (z >> np.uint64(11)).astype(np.float64) / float(1 << 52) - 1.0


class DheEncoder(EmbeddingLayer):
    """Hash ids to dense pseudo-embeddings, then decode with a 2-layer MLP.
    Only the MLP is trainable; the hash stays fixed."""

    kind = "dhe"

    def __init__(self, spec: EmbeddingSpec, k: int, width: int,
                 rng: np.random.Generator | None = None,
                 seeds: np.ndarray | None = None,
                 weights: dict[str, np.ndarray] | None = None):
        super().__init__(spec)
        if k < spec.d:
            raise ValueError("code length k must be >= embedding dimension d")
        if width < 1:
            raise ValueError("mlp width must be >= 1")
        self.k = k
        self.width = width
        rng = rng or np.random.default_rng(0)
        if seeds is None:
            seeds = rng.integers(1, 2 ** 62, size=k, dtype=np.int64)
        self.seeds = np.asarray(seeds, dtype=np.int64)
        if weights is None:
            weights = {
                "w1": rng.normal(0.0, math.sqrt(2.0 / k), size=(k, width)),
                "b1": np.zeros(width),
                "w2": rng.normal(0.0, math.sqrt(1.0 / width) * 0.3, size=(width, spec.d)),
                "b2": np.zeros(spec.d),
            }
        dt = ad.default_dtype()
        self.w1 = Tensor(np.asarray(weights["w1"], dtype=dt), requires_grad=True, name="dhe.w1")
        self.b1 = Tensor(np.asarray(weights["b1"], dtype=dt), requires_grad=True, name="dhe.b1")
        self.w2 = Tensor(np.asarray(weights["w2"], dtype=dt), requires_grad=True, name="dhe.w2")
        self.b2 = Tensor(np.asarray(weights["b2"], dtype=dt), requires_grad=True, name="dhe.b2")

    def encode(self, ids) -> np.ndarray:
        return dhe_encode(ids, self.seeds)

    def lookup(self, ids) -> Tensor:
        ids = self._check_ids(ids)
        codes = ad.constant(self.encode(ids))
        h = ad.relu(ad.add(ad.matmul(codes, self.w1), self.b1))
        return ad.add(ad.matmul(h, self.w2), self.b2)

    def params(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def param_count(self) -> int:
        return self.k * self.width + self.width + self.width * self.spec.d + self.spec.d

    def state(self):
        return ({"kind": self.kind, "n": str(self.spec.n), "d": str(self.spec.d),
                 "k": str(self.k), "width": str(self.width)},
                {"seeds": self.seeds, "w1": self.w1.data, "b1": self.b1.data,
                 "w2": self.w2.data, "b2": self.b2.data})

    @classmethod
    def from_state(cls, manifest, arrays):
        spec = EmbeddingSpec(int(manifest["n"]), int(manifest["d"]))
        weights = {key: arrays[key] for key in ("w1", "b1", "w2", "b2")}
        return cls(spec, int(manifest["k"]), int(manifest["width"]),
                   seeds=arrays["seeds"], weights=weights)


def dhe_width_for_budget(spec: EmbeddingSpec, k: int, budget: int) -> int:
    """Depth is fixed at two layers; solve the hidden width against the
    budget. Widths below 1 are clamped, which can yield negative sparsity;
    that configuration is permitted and flagged downstream."""
    width = int(round((budget - spec.d) / (k + 1 + spec.d)))
    return max(1, width)


# ---------------------------------------------------------------------------
# CSR-backed pruned table
# ---------------------------------------------------------------------------

class CsrTable(EmbeddingLayer):
    kind = "csr"

    def __init__(self, spec: EmbeddingSpec, rowptr: np.ndarray, indices: np.ndarray,
                 values: np.ndarray):
        super().__init__(spec)
        rowptr = np.asarray(rowptr, dtype=np.int64)
        indices = np.asarray(indices, dtype=np.int64)
        if rowptr.shape != (spec.n + 1,) or rowptr[0] != 0 or rowptr[-1] != indices.size:
            raise ValueError("malformed CSR row pointers")
        if np.any(np.diff(rowptr) < 0):
            raise ValueError("CSR row pointers must be monotone")
        if indices.size and (indices.min() < 0 or indices.max() >= spec.d):
            raise ValueError("CSR column index out of range")
        for r in range(spec.n):
            row = indices[rowptr[r]:rowptr[r + 1]]
            if row.size > 1 and np.any(np.diff(row) <= 0):
                raise ValueError(f"CSR row {r} indices must increase strictly")
        self.rowptr = rowptr
        self.indices = indices
        self.values = Tensor(np.asarray(values, dtype=ad.default_dtype()),
                             requires_grad=True, name="csr.values")

    @classmethod
    def from_dense_mask(cls, spec: EmbeddingSpec, dense: np.ndarray, mask: np.ndarray) -> "CsrTable":
        """Store exactly the entries where mask is true (kept values may be 0)."""
        mask = np.asarray(mask, dtype=bool)
        counts = mask.sum(axis=1)
        rowptr = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
        rows, cols = np.nonzero(mask)
        return cls(spec, rowptr, cols.astype(np.int64), np.asarray(dense)[rows, cols])

    def lookup(self, ids) -> Tensor:
        ids = self._check_ids(ids)
        return ad.rows_from_csr(self.values, self.rowptr, self.indices, ids, self.spec.d)

    def params(self) -> list[Tensor]:
        return [self.values]

    def param_count(self) -> int:
        # stored values only; index arrays are reported as separate overhead
        return int(self.values.size)

    def index_overhead(self) -> int:
        return int(self.rowptr.size + self.indices.size)

    def state(self):
        return ({"kind": self.kind, "n": str(self.spec.n), "d": str(self.spec.d)},
                {"rowptr": self.rowptr, "indices": self.indices, "values": self.values.data})

    @classmethod
    def from_state(cls, manifest, arrays):
        spec = EmbeddingSpec(int(manifest["n"]), int(manifest["d"]))
        return cls(spec, arrays["rowptr"], arrays["indices"], arrays["values"])


# ---------------------------------------------------------------------------
# dual balanced soft-threshold tables
# ---------------------------------------------------------------------------

class CerpTable(EmbeddingLayer):
    """Two balanced meta-tables combined by vector sum, each soft-threshold
    pruned through a learnable threshold. Trains dense (raw weights plus
    thresholds); `freeze` converts the effective entries to a CSR pair."""

    kind = "cerp"

    def __init__(self, spec: EmbeddingSpec, rows: int,
                 rng: np.random.Generator | None = None,
                 w1: np.ndarray | None = None, w2: np.ndarray | None = None,
                 s1: np.ndarray | None = None, s2: np.ndarray | None = None,
                 frozen: tuple[CsrTable, CsrTable] | None = None):
        super().__init__(spec)
        min_rows = math.isqrt(spec.n - 1) + 1 if spec.n > 1 else 1
        if rows < min_rows:
            raise ValueError("rows must be >= ceil(sqrt(n)) so the index pair stays in range")
        self.rows = rows
        rng = rng or np.random.default_rng(0)
        dt = ad.default_dtype()
        if w1 is None:
            w1 = rng.normal(0.0, 0.1, size=(rows, spec.d))
            w2 = rng.normal(0.0, 0.1, size=(rows, spec.d))
        if s1 is None:
            s1 = np.full(1, -8.0)  # sigmoid(-8) ~ 3e-4: near-identity start
            s2 = np.full(1, -8.0)
        self.w1 = Tensor(np.asarray(w1, dtype=dt), requires_grad=True, name="cerp.w1")
        self.w2 = Tensor(np.asarray(w2, dtype=dt), requires_grad=True, name="cerp.w2")
        self.s1 = Tensor(np.asarray(s1, dtype=dt), requires_grad=True, name="cerp.s1")
        self.s2 = Tensor(np.asarray(s2, dtype=dt), requires_grad=True, name="cerp.s2")
        self.frozen = frozen

    def pair_indices(self, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return ids % self.rows, ids // self.rows

    def effective_tables(self) -> tuple[Tensor, Tensor]:
        from .pruning import str_forward
        return str_forward(self.w1, self.s1), str_forward(self.w2, self.s2)

    def lookup(self, ids) -> Tensor:
        ids = self._check_ids(ids)
        i1, i2 = self.pair_indices(ids)
        if self.frozen is not None:
            t1, t2 = self.frozen
            return ad.add(t1.lookup(i1), t2.lookup(i2))
        e1, e2 = self.effective_tables()
        return ad.add(ad.gather_rows(e1, i1), ad.gather_rows(e2, i2))

    def params(self) -> list[Tensor]:
        if self.frozen is not None:
            return [t.values for t in self.frozen]
        return [self.w1, self.w2, self.s1, self.s2]

    def param_count(self) -> int:
        if self.frozen is not None:
            return sum(t.param_count() for t in self.frozen)
        e1, e2 = self.effective_tables()
        return int(np.count_nonzero(e1.data) + np.count_nonzero(e2.data))

    def raise_threshold_floor(self, fraction: float) -> None:
        """Lift both thresholds so at least `fraction` of each table's raw
        magnitudes fall below them (scheduling aid during pruning)."""
        fraction = min(max(fraction, 0.0), 1.0 - 1e-12)
        for w, s in ((self.w1, self.s1), (self.w2, self.s2)):
            q = float(np.quantile(np.abs(w.data), fraction))
            q = min(max(q * 1.0001, 1e-9), 1 - 1e-9)
            floor = math.log(q) - math.log1p(-q)
            s.assign(np.maximum(s.data, floor))

    def freeze_to_budget(self, budget: int) -> None:
        """Keep exactly `budget` entries (largest effective magnitudes across
        both tables) and store them as a CSR pair."""
        e1, e2 = (t.data for t in self.effective_tables())
        mags = np.concatenate([np.abs(e1).ravel(), np.abs(e2).ravel()])
        budget = min(budget, mags.size)
        order = np.argsort(-mags, kind="stable")
        keep = np.zeros(mags.size, dtype=bool)
        keep[order[:budget]] = True
        m1 = keep[: e1.size].reshape(e1.shape)
        m2 = keep[e1.size:].reshape(e2.shape)
        sub = EmbeddingSpec(self.rows, self.spec.d)
        self.frozen = (CsrTable.from_dense_mask(sub, e1, m1),
                       CsrTable.from_dense_mask(sub, e2, m2))

    def state(self):
        manifest = {"kind": self.kind, "n": str(self.spec.n), "d": str(self.spec.d),
                    "rows": str(self.rows), "frozen": "1" if self.frozen else "0"}
        arrays = {"w1": self.w1.data, "w2": self.w2.data,
                  "s1": self.s1.data, "s2": self.s2.data}
        if self.frozen is not None:
            for tag, t in zip(("f1", "f2"), self.frozen):
                arrays[f"{tag}.rowptr"] = t.rowptr
                arrays[f"{tag}.indices"] = t.indices
                arrays[f"{tag}.values"] = t.values.data
        return manifest, arrays

    @classmethod
    def from_state(cls, manifest, arrays):
        spec = EmbeddingSpec(int(manifest["n"]), int(manifest["d"]))
        rows = int(manifest["rows"])
        frozen = None
        if manifest.get("frozen") == "1":
            sub = EmbeddingSpec(rows, spec.d)
            frozen = tuple(
                CsrTable(sub, arrays[f"{tag}.rowptr"], arrays[f"{tag}.indices"],
                         arrays[f"{tag}.values"]) for tag in ("f1", "f2"))
        return cls(spec, rows, w1=arrays["w1"], w2=arrays["w2"],
                   s1=arrays["s1"], s2=arrays["s2"], frozen=frozen)


def cerp_rows_for_budget(spec: EmbeddingSpec, budget: int, overprovision: float = 2.0) -> int:
    """Rows per meta-table: enough dense capacity for the threshold training
    to select `budget` survivors, but never above the full table."""
    lo = math.isqrt(max(spec.n - 1, 0)) + 1
    want = math.ceil(overprovision * budget / (2 * spec.d))
    return int(min(max(lo, want), spec.n))


# ---------------------------------------------------------------------------
# width-maskable supernet table
# ---------------------------------------------------------------------------

class Supernet(EmbeddingLayer):
    """Full-width table whose forward pass keeps only the first `width`
    coordinates per group (field or sub-table) and optionally drops whole
    rows. Serves as the search space for dimension-mask optimization."""

    kind = "supernet"

    def __init__(self, spec: EmbeddingSpec, group_of_id: np.ndarray,
                 rng: np.random.Generator | None = None,
                 weights: np.ndarray | None = None,
                 widths: np.ndarray | None = None,
                 row_keep: np.ndarray | None = None):
        super().__init__(spec)
        group_of_id = np.asarray(group_of_id, dtype=np.int64)
        if group_of_id.shape != (spec.n,):
            raise ValueError("group_of_id must assign every feature a group")
        self.group_of_id = group_of_id
        self.n_groups = int(group_of_id.max()) + 1 if spec.n else 0
        self.inner = FullTable(spec, rng=rng, weights=weights)
        self.widths = (np.full(self.n_groups, spec.d, dtype=np.int64)
                       if widths is None else np.asarray(widths, dtype=np.int64))
        self.row_keep = (np.ones(spec.n, dtype=bool)
                         if row_keep is None else np.asarray(row_keep, dtype=bool))
        self._check_masks()

    def _check_masks(self):
        if np.any(self.widths < 1) or np.any(self.widths > self.spec.d):
            raise ValueError("widths must lie in [1, d]")
        for g in range(self.n_groups):
            members = self.group_of_id == g
            if members.any() and not self.row_keep[members].any():
                raise ValueError(f"group {g} must keep at least one feature")

    def set_widths(self, widths) -> None:
        self.widths = np.asarray(widths, dtype=np.int64)
        self._check_masks()

    def set_row_keep(self, row_keep) -> None:
        self.row_keep = np.asarray(row_keep, dtype=bool)
        self._check_masks()

    def lookup(self, ids) -> Tensor:
        ids = self._check_ids(ids)
        rows = self.inner.lookup(ids)
        w = self.widths[self.group_of_id[ids]]
        mask = (np.arange(self.spec.d)[None, :] < w[:, None]).astype(rows.data.dtype)
        mask *= self.row_keep[ids][:, None]
        return ad.mul(rows, mask)

    def params(self) -> list[Tensor]:
        return self.inner.params()

    def param_count(self) -> int:
        # kept coordinates of kept rows only
        kept = self.row_keep
        return int(self.widths[self.group_of_id[kept]].sum())

    def induced_mask(self) -> np.ndarray:
        mask = np.arange(self.spec.d)[None, :] < self.widths[self.group_of_id][:, None]
        return mask & self.row_keep[:, None]

    def state(self):
        return ({"kind": self.kind, "n": str(self.spec.n), "d": str(self.spec.d)},
                {"table": self.inner.table.data, "group_of_id": self.group_of_id,
                 "widths": self.widths, "row_keep": self.row_keep.astype(np.int64)})

    @classmethod
    def from_state(cls, manifest, arrays):
        spec = EmbeddingSpec(int(manifest["n"]), int(manifest["d"]))
        return cls(spec, arrays["group_of_id"], weights=arrays["table"],
                   widths=arrays["widths"], row_keep=arrays["row_keep"].astype(bool))


# ---------------------------------------------------------------------------
# composition helpers
# ---------------------------------------------------------------------------

class PairedEmbedding(EmbeddingLayer):
    """Two independently compressed sub-layers behind one id space (ids below
    the boundary hit the first layer); used when a technique is applied to
    user and item tables separately."""

    kind = "paired"

    def __init__(self, first: EmbeddingLayer, second: EmbeddingLayer):
        if first.spec.d != second.spec.d:
            raise ValueError("paired layers must share the embedding dimension")
        super().__init__(EmbeddingSpec(first.spec.n + second.spec.n, first.spec.d))
        self.first = first
        self.second = second

    def lookup(self, ids) -> Tensor:
        ids = self._check_ids(ids)
        boundary = self.first.spec.n
        in_first = ids < boundary
        if in_first.all():
            return self.first.lookup(ids)
        if not in_first.any():
            return self.second.lookup(ids - boundary)
        a = self.first.lookup(ids[in_first])
        b = self.second.lookup(ids[~in_first] - boundary)
        merged = ad.concat([a, b], axis=0)
        order = np.concatenate([np.flatnonzero(in_first), np.flatnonzero(~in_first)])
        inverse = np.empty_like(order)
        inverse[order] = np.arange(order.size)
        return ad.gather_rows(merged, inverse)

    def params(self) -> list[Tensor]:
        return self.first.params() + self.second.params()

    def param_count(self) -> int:
        return self.first.param_count() + self.second.param_count()

    def state(self):
        m1, a1 = self.first.state()
        m2, a2 = self.second.state()
        manifest = {"kind": self.kind, "n": str(self.spec.n), "d": str(self.spec.d)}
        arrays: dict[str, np.ndarray] = {}
        for k, v in m1.items():
            manifest[f"first.{k}"] = v
        for k, v in m2.items():
            manifest[f"second.{k}"] = v
        for k, v in a1.items():
            arrays[f"first.{k}"] = v
        for k, v in a2.items():
            arrays[f"second.{k}"] = v
        return manifest, arrays

    @classmethod
    def from_state(cls, manifest, arrays):
        def sub(prefix):
            plen = len(prefix) + 1
            m = {k[plen:]: v for k, v in manifest.items() if k.startswith(prefix + ".")}
            a = {k[plen:]: v for k, v in arrays.items() if k.startswith(prefix + ".")}
            return layer_from_state(m, a)
        return cls(sub("first"), sub("second"))


class OffsetView(EmbeddingLayer):
    """A contiguous id range of a parent layer exposed as its own layer, so
    several model slots can share one jointly pruned table. The parent owns
    the parameters; `params` reports them (dedupe when collecting)."""

    kind = "offset"

    def __init__(self, parent: EmbeddingLayer, base: int, count: int):
        if base < 0 or base + count > parent.spec.n:
            raise ValueError("view range outside the parent table")
        super().__init__(EmbeddingSpec(count, parent.spec.d))
        self.parent = parent
        self.base = base

    def lookup(self, ids) -> Tensor:
        ids = self._check_ids(ids)
        return self.parent.lookup(ids + self.base)

    def params(self) -> list[Tensor]:
        return self.parent.params()

    def param_count(self) -> int:
        # storage belongs to the parent; a view adds none
        return 0

    def state(self):
        raise NotImplementedError("serialize the parent layer, not the view")


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

LAYER_KINDS: dict[str, type[EmbeddingLayer]] = {
    cls.kind: cls for cls in (FullTable, QrTable, TtTable, DheEncoder, CsrTable,
                              CerpTable, Supernet, PairedEmbedding)
}


def layer_from_state(manifest: dict[str, str], arrays: dict[str, np.ndarray]) -> EmbeddingLayer:
    kind = manifest["kind"]
    if kind not in LAYER_KINDS:
        raise ValueError(f"unknown embedding layer kind {kind!r}")
    return LAYER_KINDS[kind].from_state(manifest, arrays)
