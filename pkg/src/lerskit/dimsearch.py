"""Width-mask search: supernet training under sampled widths, the tilted
sampling distribution with closed-form expected width, and evolutionary
search over width (and optional row-keep) assignments."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .embeddings import Supernet


# ---------------------------------------------------------------------------
# tilted width distribution
# ---------------------------------------------------------------------------

def dim_probabilities(h: int, alpha: float) -> np.ndarray:
    """p_i proportional to alpha^(h-i) for widths i = 1..h; alpha = 1 is the
    uniform distribution. Computed with normalized weights so any positive
    alpha stays in range."""
    if h < 1:
        raise ValueError("h must be >= 1")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    i = np.arange(1, h + 1, dtype=np.float64)
    if alpha >= 1.0:
        w = alpha ** (1.0 - i)      # divided through by alpha^(h-1); all <= 1
    else:
        w = alpha ** (h - i)        # all <= 1 for alpha < 1
    return w / w.sum()


def dim_probability(h: int, alpha: float, i: int) -> float:
    if not (1 <= i <= h):
        raise ValueError("width index must lie in [1, h]")
    return float(dim_probabilities(h, alpha)[i - 1])


def expected_hidden_size(h: int, alpha: float) -> float:
    """Closed form alpha/(alpha-1) - h/(alpha^h - 1); (h+1)/2 at alpha = 1.
    Near alpha = 1 the two diverging terms cancel catastrophically, so a
    direct probability-weighted sum takes over there."""
    if h < 1:
        raise ValueError("h must be >= 1")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if alpha == 1.0:
        return (h + 1) / 2.0
    if abs(alpha - 1.0) < 1e-5:
        p = dim_probabilities(h, alpha)
        return float(np.dot(p, np.arange(1, h + 1)))
    log_a = math.log(alpha)
    if h * log_a > 700.0:  # alpha^h overflows; its reciprocal term vanishes
        return alpha / (alpha - 1.0)
    return alpha / (alpha - 1.0) - h / math.expm1(h * log_a)


def solve_alpha(h: int, target: float, tol: float = 1e-3) -> float:
    """Invert the expected width: gradient descent on the squared error with
    a bisection fallback. Only targets at or below the uniform mean are
    attainable (the tilt can only shrink the expectation)."""
    uniform_mean = (h + 1) / 2.0
    if target == uniform_mean:
        return 1.0
    if not (1.0 < target < uniform_mean):
        raise ValueError(
            f"target expected width {target} outside attainable range (1, {uniform_mean}]")

    # gradient descent on log(alpha), numerical derivative of the objective
    beta = math.log(2.0)
    lr = 0.5
    for _ in range(200):
        a = math.exp(beta)
        err = expected_hidden_size(h, a) - target
        if abs(err) < tol * 0.1:
            return a
        eps = 1e-6
        d_err = (expected_hidden_size(h, math.exp(beta + eps)) - expected_hidden_size(
            h, math.exp(beta - eps))) / (2 * eps)
        grad = 2.0 * err * d_err
        step = lr * grad
        beta -= max(-0.5, min(0.5, step))
    a = math.exp(beta)
    if abs(expected_hidden_size(h, a) - target) < tol:
        return a

    # bisection: the expectation is strictly decreasing in alpha above 1
    lo, hi = 1.0 + 1e-12, 2.0
    while expected_hidden_size(h, hi) > target:
        hi *= 2.0
        if hi > 1e12:
            raise RuntimeError("bisection bracket failed")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if expected_hidden_size(h, mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class GeometricDimDistribution:
    h: int
    alpha: float = 1.0

    def __post_init__(self):
        if self.h < 1 or self.alpha <= 0:
            raise ValueError("need h >= 1 and alpha > 0")

    def probabilities(self) -> np.ndarray:
        return dim_probabilities(self.h, self.alpha)

    def expected(self) -> float:
        return expected_hidden_size(self.h, self.alpha)

    def sample(self, rng: np.random.Generator, size: int | None = None):
        cdf = np.cumsum(self.probabilities())
        draws = np.searchsorted(cdf, rng.random(size if size is not None else 1),
                                side="right") + 1
        draws = np.minimum(draws, self.h)
        return int(draws[0]) if size is None else draws.astype(np.int64)


def sample_dim_mask(dist: GeometricDimDistribution, rng: np.random.Generator,
                    n_groups: int = 1) -> np.ndarray:
    """One width per group, drawn independently from the distribution."""
    return dist.sample(rng, size=n_groups)


# ---------------------------------------------------------------------------
# supernet training
# ---------------------------------------------------------------------------

def train_supernet(supernets: list[Supernet], dist: GeometricDimDistribution,
                   run_batch, n_batches: int, rng: np.random.Generator) -> None:
    """Run `run_batch(step)` for every step with freshly sampled widths set on
    each maskable table beforehand; full widths are restored afterwards."""
    for step in range(n_batches):
        for s in supernets:
            s.set_widths(sample_dim_mask(dist, rng, s.n_groups))
        run_batch(step)
    for s in supernets:
        s.set_widths(np.full(s.n_groups, s.spec.d, dtype=np.int64))


# ---------------------------------------------------------------------------
# evolutionary search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SearchConfig:
    population: int = 20
    generations: int = 15
    mutation_prob: float = 0.1
    crossover_prob: float = 0.9
    target_sparsity: float = 0.0
    search_row_keep: bool = False  # evolve per-group row budgets as well
    max_resample: int = 500

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be >= 2")


@dataclass
class Candidate:
    widths: np.ndarray                     # one width per group
    keep_fracs: np.ndarray | None = None   # one kept-row fraction per group

    def copy(self) -> "Candidate":
        return Candidate(self.widths.copy(),
                         None if self.keep_fracs is None else self.keep_fracs.copy())


class NoFeasibleCandidate(RuntimeError):
    pass


class SupernetSearch:
    """Search handle over the maskable tables of one model: candidate
    application, sparsity accounting (kept coordinates of kept rows), and
    the genetic operators."""

    KEEP_GRID = (0.25, 0.5, 0.75, 1.0)

    def __init__(self, supernets: list[Supernet], dist: GeometricDimDistribution,
                 search_row_keep: bool = False):
        self.supernets = supernets
        self.dist = dist
        self.search_row_keep = search_row_keep
        self.groups: list[tuple[int, int, np.ndarray]] = []
        for si, s in enumerate(supernets):
            norms = np.linalg.norm(s.inner.table.data, axis=1)
            for gi in range(s.n_groups):
                members = np.flatnonzero(s.group_of_id == gi)
                ranked = members[np.argsort(-norms[members], kind="stable")]
                self.groups.append((si, gi, ranked))
        self.base_params = sum(s.spec.full_params for s in supernets)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def random_candidate(self, rng: np.random.Generator) -> Candidate:
        widths = sample_dim_mask(self.dist, rng, self.n_groups)
        keep = None
        if self.search_row_keep:
            keep = rng.choice(self.KEEP_GRID, size=self.n_groups)
        return Candidate(widths, keep)

    def _keep_counts(self, cand: Candidate) -> list[int]:
        counts = []
        for g, (_, _, ranked) in enumerate(self.groups):
            frac = 1.0 if cand.keep_fracs is None else float(cand.keep_fracs[g])
            counts.append(max(1, int(round(frac * ranked.size))))
        return counts

    def sparsity(self, cand: Candidate) -> float:
        kept = sum(int(cand.widths[g]) * c for g, c in enumerate(self._keep_counts(cand)))
        return 1.0 - kept / self.base_params

    def apply(self, cand: Candidate) -> None:
        counts = self._keep_counts(cand)
        for si, s in enumerate(self.supernets):
            widths = np.full(s.n_groups, s.spec.d, dtype=np.int64)
            keep = np.zeros(s.spec.n, dtype=bool)
            for g, (gsi, gi, ranked) in enumerate(self.groups):
                if gsi != si:
                    continue
                widths[gi] = cand.widths[g]
                keep[ranked[: counts[g]]] = True
            s.set_widths(widths)
            s.set_row_keep(keep)

    def reset(self) -> None:
        for s in self.supernets:
            s.set_widths(np.full(s.n_groups, s.spec.d, dtype=np.int64))
            s.set_row_keep(np.ones(s.spec.n, dtype=bool))

    def mutate(self, cand: Candidate, prob: float, rng: np.random.Generator) -> Candidate:
        out = cand.copy()
        for g in range(self.n_groups):
            if rng.random() < prob:
                out.widths[g] = self.dist.sample(rng)
            if out.keep_fracs is not None and rng.random() < prob:
                out.keep_fracs[g] = rng.choice(self.KEEP_GRID)
        return out

    def crossover(self, a: Candidate, b: Candidate, rng: np.random.Generator) -> Candidate:
        cut = int(rng.integers(1, self.n_groups)) if self.n_groups > 1 else 0
        widths = np.concatenate([a.widths[:cut], b.widths[cut:]])
        keep = None
        if a.keep_fracs is not None:
            keep = np.concatenate([a.keep_fracs[:cut], b.keep_fracs[cut:]])
        return Candidate(widths, keep)


def evolutionary_search(search: SupernetSearch, fitness_fn, cfg: SearchConfig,
                        rng: np.random.Generator):
    """Best feasible (width, row-keep) assignment by fitness; candidates
    below the sparsity filter are discarded before evaluation. Returns
    (candidate, fitness). The supernets are left with the winner applied."""

    def feasible(cand: Candidate) -> bool:
        return search.sparsity(cand) >= cfg.target_sparsity

    def draw_feasible() -> Candidate:
        for _ in range(cfg.max_resample):
            cand = search.random_candidate(rng)
            if feasible(cand):
                return cand
        raise NoFeasibleCandidate(
            f"no candidate reached sparsity {cfg.target_sparsity} after "
            f"{cfg.max_resample} draws")

    def evaluate(cand: Candidate) -> float:
        search.apply(cand)
        return float(fitness_fn())

    population = [draw_feasible() for _ in range(cfg.population)]
    scored = [(evaluate(c), i, c) for i, c in enumerate(population)]
    best_fit, _, best = max(scored, key=lambda t: (t[0], -t[1]))
    counter = len(scored)
    for _ in range(cfg.generations):
        scored.sort(key=lambda t: (-t[0], t[1]))
        parents = [c for _, _, c in scored[: max(2, cfg.population // 2)]]
        children: list[Candidate] = []
        while len(children) < cfg.population - len(parents):
            child = None
            for _ in range(cfg.max_resample):
                i, j = rng.integers(0, len(parents), size=2)
                if rng.random() < cfg.crossover_prob:
                    cand = search.crossover(parents[i], parents[j], rng)
                else:
                    cand = parents[i].copy()
                cand = search.mutate(cand, cfg.mutation_prob, rng)
                if feasible(cand):
                    child = cand
                    break
            children.append(child if child is not None else draw_feasible())
        scored = [(f, i, c) for f, i, c in scored[: len(parents)]]
        for c in children:
            scored.append((evaluate(c), counter, c))
            counter += 1
        gen_best = max(scored, key=lambda t: (t[0], -t[1]))
        if gen_best[0] > best_fit:
            best_fit, _, best = gen_best
    search.apply(best)
    return best, best_fit
