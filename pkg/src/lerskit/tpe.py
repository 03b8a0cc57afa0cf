"""Sequential hyperparameter optimization with a tree-structured pair of
kernel density estimates: configurations are proposed per dimension by
sampling the "good" density and ranking by the good/bad density ratio."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SENTINEL_WORST = float("-inf")


@dataclass(frozen=True)
class Continuous:
    lo: float
    hi: float
    log: bool = False

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")
        if self.log and self.lo <= 0:
            raise ValueError("log-scaled dimensions need positive bounds")

    def to_working(self, x: float) -> float:
        return math.log(x) if self.log else x

    def from_working(self, z: float) -> float:
        x = math.exp(z) if self.log else z
        return min(max(x, self.lo), self.hi)

    @property
    def working_bounds(self) -> tuple[float, float]:
        if self.log:
            return math.log(self.lo), math.log(self.hi)
        return self.lo, self.hi


@dataclass(frozen=True)
class Categorical:
    choices: tuple

    def __post_init__(self):
        if len(self.choices) == 0:
            raise ValueError("categorical dimensions need at least one choice")


class SearchSpace:
    def __init__(self, dims: dict[str, Continuous | Categorical]):
        if not dims:
            raise ValueError("empty search space")
        self.dims = dict(dims)

    def sample_prior(self, rng: np.random.Generator) -> dict:
        config = {}
        for name, dim in self.dims.items():
            if isinstance(dim, Categorical):
                config[name] = dim.choices[rng.integers(0, len(dim.choices))]
            else:
                lo, hi = dim.working_bounds
                config[name] = dim.from_working(lo + (hi - lo) * rng.random())
        return config

    def validate(self, config: dict) -> None:
        for name, dim in self.dims.items():
            value = config[name]
            if isinstance(dim, Categorical):
                if value not in dim.choices:
                    raise ValueError(f"{name}: {value!r} not a valid choice")
            elif not (dim.lo <= value <= dim.hi):
                raise ValueError(f"{name}: {value} outside [{dim.lo}, {dim.hi}]")


@dataclass
class Trial:
    index: int
    config: dict
    value: float


def split_history(history: list[Trial], gamma_q: float = 0.25) -> tuple[list[Trial], list[Trial]]:
    """Good = trials strictly above the top-gamma_q quantile threshold.
    Degenerate cases: with all values equal the earliest best trial alone is
    good; a singleton history is all good (the bad density falls back to the
    prior)."""
    if not history:
        raise ValueError("empty history")
    if len(history) == 1:
        return list(history), []
    ys = np.array([t.value for t in history], dtype=np.float64)
    finite = ys[np.isfinite(ys)]
    if finite.size == 0 or np.all(finite == finite[0]) and finite.size == ys.size:
        best = min(range(len(history)), key=lambda i: (-ys[i], i))
        return [history[best]], [t for i, t in enumerate(history) if i != best]
    threshold = np.quantile(finite, 1.0 - gamma_q)
    good = [t for t in history if t.value > threshold]
    if not good:
        # ties at the maximum: nudge the threshold below it
        below = finite[finite < finite.max()]
        threshold = below.max() if below.size else -math.inf
        good = [t for t in history if t.value > threshold]
    bad = [t for t in history if t.value <= threshold]
    if not bad:
        best = min(range(len(history)), key=lambda i: (-ys[i], i))
        good = [history[best]]
        bad = [t for i, t in enumerate(history) if i != best]
    return good, bad


def _norm_pdf(z):
    return math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def _norm_cdf(z):
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


class ParzenDensity:
    """Mixture over the observed points (truncated Gaussians, nearest-neighbor
    bandwidth clamped to [1%, 100%] of the range) plus one uniform prior
    component spanning the range. Operates in the dimension's working scale."""

    def __init__(self, values: list[float], lo: float, hi: float):
        self.lo, self.hi = lo, hi
        self.mus = sorted(values)
        span = hi - lo
        self.sigmas = []
        for i, mu in enumerate(self.mus):
            gaps = []
            if i > 0:
                gaps.append(mu - self.mus[i - 1])
            if i + 1 < len(self.mus):
                gaps.append(self.mus[i + 1] - mu)
            bw = min(gaps) if gaps else span
            self.sigmas.append(min(max(bw, 0.01 * span), span))
        self.n_components = len(self.mus) + 1  # plus the uniform prior

    def pdf(self, x: float) -> float:
        if not (self.lo <= x <= self.hi):
            return 1e-300
        total = 1.0 / (self.hi - self.lo)  # prior component
        for mu, s in zip(self.mus, self.sigmas):
            mass = _norm_cdf((self.hi - mu) / s) - _norm_cdf((self.lo - mu) / s)
            if mass <= 0:
                continue
            total += _norm_pdf((x - mu) / s) / (s * mass)
        return total / self.n_components

    def sample(self, rng: np.random.Generator) -> float:
        pick = int(rng.integers(0, self.n_components))
        if pick == len(self.mus):
            return self.lo + (self.hi - self.lo) * rng.random()
        mu, s = self.mus[pick], self.sigmas[pick]
        for _ in range(100):
            x = rng.normal(mu, s)
            if self.lo <= x <= self.hi:
                return x
        return min(max(mu, self.lo), self.hi)


class CategoricalPmf:
    """Add-one smoothed empirical frequencies."""

    def __init__(self, values: list, choices: tuple):
        self.choices = choices
        counts = {c: 1 for c in choices}  # smoothing
        for v in values:
            counts[v] += 1
        total = sum(counts.values())
        self.probs = {c: counts[c] / total for c in choices}

    def pdf(self, x) -> float:
        return self.probs.get(x, 1e-300)

    def sample(self, rng: np.random.Generator):
        r = rng.random()
        acc = 0.0
        for c in self.choices:
            acc += self.probs[c]
            if r <= acc:
                return c
        return self.choices[-1]


def parzen_density(values: list, dim: Continuous | Categorical):
    if isinstance(dim, Categorical):
        return CategoricalPmf(values, dim.choices)
    lo, hi = dim.working_bounds
    working = [dim.to_working(v) for v in values]
    return ParzenDensity(working, lo, hi)


def suggest(space: SearchSpace, history: list[Trial], omega: int = 10,
            n_candidates: int = 24, rng: np.random.Generator | None = None,
            gamma_q: float = 0.25) -> dict:
    """Next configuration: a prior draw during the first omega trials, then
    per-dimension argmax of good-density/bad-density over candidates sampled
    from the good density (dimensions treated independently)."""
    rng = rng or np.random.default_rng(0)
    if len(history) < omega or not history:
        return space.sample_prior(rng)
    good, bad = split_history(history, gamma_q)
    config = {}
    for name, dim in space.dims.items():
        l_density = parzen_density([t.config[name] for t in good], dim)
        if bad:
            g_density = parzen_density([t.config[name] for t in bad], dim)
        else:
            g_density = None  # fall back to the prior: constant, so l decides
        best_x, best_score = None, -math.inf
        for _ in range(n_candidates):
            if isinstance(dim, Categorical):
                x = l_density.sample(rng)
                score = l_density.pdf(x) / (g_density.pdf(x) if g_density else 1.0)
            else:
                z = l_density.sample(rng)
                zpdf = l_density.pdf(z)
                gpdf = g_density.pdf(z) if g_density else 1.0
                score = zpdf / gpdf
                x = dim.from_working(z)
            if score > best_score:
                best_x, best_score = x, score
        config[name] = best_x
    return config


@dataclass
class StudyResult:
    best_config: dict
    best_value: float
    history: list[Trial]


def _format_config(config: dict) -> str:
    return ";".join(f"{k}={v!r}" for k, v in sorted(config.items()))


def _parse_config(text: str) -> dict:
    import ast
    config = {}
    for part in text.split(";"):
        if part:
            k, _, v = part.partition("=")
            config[k] = ast.literal_eval(v)
    return config


def load_study_log(path) -> list[Trial]:
    trials = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("trial\t"):
            raise ValueError(f"{path}: not a study log")
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            idx, config_s, value_s, _walltime = line.split("\t")
            trials.append(Trial(int(idx), _parse_config(config_s), float(value_s)))
    return trials


def run_study(objective, space: SearchSpace, max_trials: int = 30, omega: int = 10,
              seed: int = 0, n_candidates: int = 24, log_path=None,
              resume: bool = False, gamma_q: float = 0.25) -> StudyResult:
    """Exactly max_trials objective evaluations (omega prior draws, then
    guided suggestions); failures score the sentinel worst value and the
    study continues. Appends to / resumes from a tab-separated log."""
    history: list[Trial] = []
    if resume and log_path and Path(log_path).exists():
        history = load_study_log(log_path)
    rng = np.random.default_rng(seed if not history else seed * 1000003 + len(history))
    mode = "a" if history else "w"
    log_fh = open(log_path, mode, encoding="utf-8") if log_path else None
    try:
        if log_fh and not history:
            log_fh.write("trial\tconfig\tvalue\twall_time\n")
        while len(history) < max_trials:
            config = suggest(space, history, omega=omega, n_candidates=n_candidates,
                             rng=rng, gamma_q=gamma_q)
            space.validate(config)
            start = time.perf_counter()
            try:
                value = float(objective(config))
            except Exception:
                value = SENTINEL_WORST
            elapsed = time.perf_counter() - start
            trial = Trial(len(history), config, value)
            history.append(trial)
            if log_fh:
                log_fh.write(f"{trial.index}\t{_format_config(config)}\t{value!r}\t{elapsed:.6f}\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    best = max(history, key=lambda t: (t.value, -t.index))
    return StudyResult(best.config, best.value, history)
