"""Tree-structured Parzen Estimator search over hyperparameters.

After a startup phase of prior samples, completed trials are split at the
gamma-quantile of the objective into good and bad sets; per-dimension Parzen
mixtures l(x) and g(x) are fitted to each, candidates are drawn from l, and
the candidate maximizing l(x)/g(x) is suggested. Higher objective is better.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

GAMMA = 0.25
N_STARTUP = 10
N_CANDIDATES = 24


class SearchError(RuntimeError):
    pass


class AllTrialsFailedError(SearchError):
    """Every objective evaluation raised; no best trial exists."""

    def __init__(self, history):
        super().__init__("all trials failed; no successful objective evaluation")
        self.history = history


@dataclass(frozen=True)
class ContinuousDim:
    low: float
    high: float
    log: bool = False

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError(f"low must be < high, got [{self.low}, {self.high}]")
        if self.log and self.low <= 0:
            raise ValueError("log dimensions need a positive lower bound")


@dataclass(frozen=True)
class IntegerDim:
    low: int
    high: int

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError(f"low must be < high, got [{self.low}, {self.high}]")


@dataclass(frozen=True)
class CategoricalDim:
    choices: tuple

    def __post_init__(self):
        if len(self.choices) == 0:
            raise ValueError("categorical dimension needs at least one choice")


@dataclass
class TrialRecord:
    config: dict
    objective: float | None
    status: str  # "ok" | "failed"
    error: str | None = None

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "objective": self.objective,
            "status": self.status,
            "error": self.error,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TrialRecord":
        return cls(doc["config"], doc["objective"], doc["status"], doc.get("error"))


def _validate_space(space: dict) -> None:
    if not space:
        raise ValueError("search space is empty")
    for name, dim in space.items():
        if not isinstance(dim, (ContinuousDim, IntegerDim, CategoricalDim)):
            raise ValueError(f"dimension {name!r} has unsupported type {type(dim).__name__}")


def _sample_prior(space: dict, rng: np.random.Generator) -> dict:
    config = {}
    for name, dim in space.items():
        if isinstance(dim, ContinuousDim):
            if dim.log:
                draw = np.exp(rng.uniform(np.log(dim.low), np.log(dim.high)))
                config[name] = float(np.clip(draw, dim.low, dim.high))
            else:
                config[name] = float(rng.uniform(dim.low, dim.high))
        elif isinstance(dim, IntegerDim):
            config[name] = int(rng.integers(dim.low, dim.high + 1))
        else:
            config[name] = dim.choices[int(rng.integers(len(dim.choices)))]
    return config


class _Parzen:
    """One-dimensional Gaussian mixture over observed values plus one uniform
    prior component of weight 1/(n+1), following the original TPE estimator.

    Per-point bandwidth is the larger gap to the adjacent sorted neighbors,
    with the interval bounds acting as virtual neighbors at the ends, clamped
    below at (high - low) / 100. The prior component keeps candidate sampling
    exploratory even when repeated observations collapse their kernels.
    """

    def __init__(self, values: np.ndarray, low: float, high: float):
        self.low = low
        self.high = high
        pts = np.sort(np.asarray(values, dtype=np.float64))
        # gaps between adjacent distinct values, so repeated observations keep
        # a usable bandwidth instead of collapsing to the clamp floor
        unique, inverse = np.unique(pts, return_inverse=True)
        padded = np.concatenate(([low], unique, [high]))
        left = unique - padded[:-2]
        right = padded[2:] - unique
        bw_unique = np.maximum(np.maximum(left, right), (high - low) / 100.0)
        self.points = pts
        self.bw = bw_unique[inverse]
        self.prior_weight = 1.0 / (len(pts) + 1)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        from_prior = rng.random(n) < self.prior_weight
        idx = rng.integers(len(self.points), size=n)
        draws = np.where(
            from_prior,
            rng.uniform(self.low, self.high, size=n),
            rng.normal(self.points[idx], self.bw[idx]),
        )
        return np.clip(draws, self.low, self.high)

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        z = (x[:, None] - self.points[None, :]) / self.bw[None, :]
        comp = -0.5 * z * z - np.log(self.bw[None, :] * math.sqrt(2.0 * math.pi))
        peak = comp.max(axis=1, keepdims=True)
        kernel = np.exp(peak[:, 0] + np.log(np.exp(comp - peak).mean(axis=1)))
        prior = 1.0 / (self.high - self.low)
        return np.log(self.prior_weight * prior + (1.0 - self.prior_weight) * kernel)


def _dim_values(dim, configs: list[dict], name: str) -> np.ndarray:
    raw = [c[name] for c in configs]
    if isinstance(dim, ContinuousDim) and dim.log:
        return np.log(np.asarray(raw, dtype=np.float64))
    return np.asarray(raw, dtype=np.float64)


def suggest(space: dict, history: list[TrialRecord], seed: int) -> dict:
    """Propose the next configuration; a pure function of (space, history, seed)."""
    _validate_space(space)
    rng = np.random.default_rng(seed)
    ok = [t for t in history if t.status == "ok" and t.objective is not None]
    if len(ok) < N_STARTUP:
        return _sample_prior(space, rng)

    ok_sorted = sorted(range(len(ok)), key=lambda i: (-ok[i].objective, i))
    n_good = max(1, math.ceil(GAMMA * len(ok)))
    good = [ok[i].config for i in ok_sorted[:n_good]]
    bad = [ok[i].config for i in ok_sorted[n_good:]]

    candidates = [dict() for _ in range(N_CANDIDATES)]
    log_ratio = np.zeros(N_CANDIDATES)
    for name, dim in space.items():
        if isinstance(dim, CategoricalDim):
            k = len(dim.choices)
            index = {c: i for i, c in enumerate(dim.choices)}
            good_counts = np.ones(k)
            for c in good:
                good_counts[index[c[name]]] += 1
            bad_counts = np.ones(k)
            for c in bad:
                bad_counts[index[c[name]]] += 1
            l_probs = good_counts / good_counts.sum()
            g_probs = bad_counts / bad_counts.sum()
            picks = rng.choice(k, size=N_CANDIDATES, p=l_probs)
            for j, pick in enumerate(picks):
                candidates[j][name] = dim.choices[int(pick)]
            log_ratio += np.log(l_probs[picks]) - np.log(g_probs[picks])
            continue

        if isinstance(dim, ContinuousDim) and dim.log:
            low, high = np.log(dim.low), np.log(dim.high)
        else:
            low, high = float(dim.low), float(dim.high)
        l_model = _Parzen(_dim_values(dim, good, name), low, high)
        g_model = _Parzen(_dim_values(dim, bad, name), low, high)
        draws = l_model.sample(rng, N_CANDIDATES)
        log_ratio += l_model.logpdf(draws) - g_model.logpdf(draws)
        for j, x in enumerate(draws):
            if isinstance(dim, IntegerDim):
                candidates[j][name] = int(np.clip(round(x), dim.low, dim.high))
            elif dim.log:
                candidates[j][name] = float(np.clip(np.exp(x), dim.low, dim.high))
            else:
                candidates[j][name] = float(x)

    return candidates[int(np.argmax(log_ratio))]


def run_search(
    space: dict,
    objective,
    budget: int,
    seed: int,
    history: list[TrialRecord] | None = None,
    on_trial=None,
) -> tuple[TrialRecord, list[TrialRecord]]:
    """Run `budget` trials (resuming an existing history if given) and return
    (best trial, full history). Objective failures are recorded as failed
    trials; only an all-failed search raises."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    _validate_space(space)
    history = list(history) if history else []
    while len(history) < budget:
        trial_seed = int(np.random.SeedSequence((int(seed), len(history))).generate_state(1)[0])
        config = suggest(space, history, trial_seed)
        try:
            value = float(objective(config))
            record = TrialRecord(config=config, objective=value, status="ok")
        except Exception as exc:  # objective failures must not kill the search
            record = TrialRecord(config=config, objective=None, status="failed", error=str(exc))
        history.append(record)
        if on_trial is not None:
            on_trial(record)
    ok = [t for t in history if t.status == "ok"]
    if not ok:
        raise AllTrialsFailedError(history)
    best = max(ok, key=lambda t: t.objective)
    return best, history
