"""Differentially private gradient release and budget accounting.

A training step clips per-example gradients to an L2 bound C, averages a
lot of L examples sampled with replacement from the N local examples, and
adds per-coordinate Gaussian noise with standard deviation sigma * C / L,
where sigma = sqrt(2 * ln(1.25 / delta)) / epsilon. That calibration is
only valid for epsilon <= 1, which the parameter container enforces.

Budgets compose through pluggable strategies:

  basic            spent = (sum eps_i, sum delta_i)
  amplified-basic  each step first maps to (q * eps_i, q * delta_i) using
                   its sample ratio q = L / N, then sums

Both are conservative stand-ins for a tighter accountant; exhausting the
budget early only shortens training, never weakens the guarantee.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import Dataset, MlpModel, per_example_gradients


class BudgetExhaustedError(RuntimeError):
    """Raised when a release would overrun the remaining privacy budget."""


def calibrate_sigma(epsilon: float, delta: float) -> float:
    """Gaussian-mechanism noise multiplier sqrt(2*ln(1.25/delta)) / epsilon."""
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    if epsilon > 1.0:
        raise ValueError("calibration is only valid for epsilon <= 1")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    return math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


@dataclass(frozen=True)
class PrivacyParams:
    """Per-step DP-SGD parameters for one party's local training."""

    epsilon_per_step: float
    delta_per_step: float
    clip_norm: float
    lot_size: int
    dataset_size: int

    def __post_init__(self):
        if not 0.0 < self.epsilon_per_step <= 1.0:
            raise ValueError("epsilon_per_step must lie in (0, 1]")
        if not 0.0 < self.delta_per_step < 1.0:
            raise ValueError("delta_per_step must lie in (0, 1)")
        if self.clip_norm <= 0.0:
            raise ValueError("clip_norm must be positive")
        if self.lot_size < 1 or self.lot_size > self.dataset_size:
            raise ValueError("need 1 <= lot_size <= dataset_size")

    @property
    def sample_ratio(self) -> float:
        return self.lot_size / self.dataset_size

    @property
    def sigma(self) -> float:
        return calibrate_sigma(self.epsilon_per_step, self.delta_per_step)


def lot_size_for(dataset_size: int) -> int:
    """Default lot size: sqrt(N), at least 1."""
    return max(1, int(math.isqrt(dataset_size)))


@dataclass(frozen=True)
class StepRecord:
    epsilon: float
    delta: float
    q: float = 1.0


def _basic(record: StepRecord) -> tuple[float, float]:
    return record.epsilon, record.delta


def _amplified_basic(record: StepRecord) -> tuple[float, float]:
    return record.q * record.epsilon, record.q * record.delta


COMPOSITION_STRATEGIES = {
    "basic": _basic,
    "amplified-basic": _amplified_basic,
}


@dataclass
class PrivacyAccountant:
    """Per-party (epsilon, delta) ledger with a total budget.

    Records are appended by spend(); exhausted() flips to True once, when
    a spend attempt would overrun the budget or consumes the last of it.
    """

    epsilon_total: float
    delta_total: float
    strategy: str = "basic"
    records: list = field(default_factory=list)
    _exhausted: bool = False
    _spent_eps: float = 0.0
    _spent_delta: float = 0.0

    def __post_init__(self):
        if self.strategy not in COMPOSITION_STRATEGIES:
            raise ValueError(f"unknown composition strategy {self.strategy!r}")
        if self.epsilon_total <= 0.0 or self.delta_total <= 0.0:
            raise ValueError("budget totals must be positive")
        self._recompute()

    def _recompute(self) -> None:
        mapper = COMPOSITION_STRATEGIES[self.strategy]
        eps = 0.0
        delta = 0.0
        for record in self.records:
            e, d = mapper(record)
            eps += e
            delta += d
        self._spent_eps = eps
        self._spent_delta = delta

    def spent(self) -> tuple[float, float]:
        return self._spent_eps, self._spent_delta

    def exhausted(self) -> bool:
        return self._exhausted

    def can_spend(self, epsilon: float, delta: float, q: float = 1.0) -> bool:
        if self._exhausted:
            return False
        mapper = COMPOSITION_STRATEGIES[self.strategy]
        step_eps, step_delta = mapper(StepRecord(epsilon, delta, q))
        eps, d = self.spent()
        return eps + step_eps <= self.epsilon_total and d + step_delta <= self.delta_total

    def spend(self, epsilon: float, delta: float, q: float = 1.0) -> None:
        """Record one release, or raise BudgetExhaustedError without recording."""
        self.spend_many(epsilon, delta, q, count=1)

    def spend_many(self, epsilon: float, delta: float, q: float = 1.0, count: int = 1) -> None:
        """Atomically record `count` identical releases; refuse all if any
        would overrun the budget."""
        if count < 1:
            raise ValueError("count must be >= 1")
        mapper = COMPOSITION_STRATEGIES[self.strategy]
        step_eps, step_delta = mapper(StepRecord(epsilon, delta, q))
        if (self._exhausted
                or self._spent_eps + count * step_eps > self.epsilon_total
                or self._spent_delta + count * step_delta > self.delta_total):
            self._exhausted = True
            raise BudgetExhaustedError(
                f"spend {count} x ({epsilon}, {delta}) at q={q} would exceed "
                f"({self.epsilon_total}, {self.delta_total})")
        self.records.extend(StepRecord(epsilon, delta, q) for _ in range(count))
        self._spent_eps += count * step_eps
        self._spent_delta += count * step_delta
        if self._spent_eps >= self.epsilon_total or self._spent_delta >= self.delta_total:
            self._exhausted = True

    def to_json(self) -> str:
        return json.dumps({
            "epsilon_total": self.epsilon_total,
            "delta_total": self.delta_total,
            "strategy": self.strategy,
            "exhausted": self._exhausted,
            "records": [[r.epsilon, r.delta, r.q] for r in self.records],
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PrivacyAccountant":
        obj = json.loads(text)
        acct = cls(obj["epsilon_total"], obj["delta_total"], obj["strategy"])
        acct.records = [StepRecord(*rec) for rec in obj["records"]]
        acct._exhausted = bool(obj["exhausted"])
        acct._recompute()
        return acct


def compose_spent(accountant: PrivacyAccountant) -> tuple[float, float]:
    """Total (epsilon, delta) spent under the accountant's strategy."""
    return accountant.spent()


def allocate_budgets(stage: str, dataset_name: str) -> tuple[float, float]:
    """Stage budgets: initialisation (4, 1e-5), update (2, 1e-5); delta
    drops to 1e-6 for SVHN. The two stages compose to a (6, 2e-5) total."""
    delta = 1e-6 if dataset_name.lower() == "svhn" else 1e-5
    if stage == "initialisation":
        return 4.0, delta
    if stage == "update":
        return 2.0, delta
    raise ValueError(f"unknown stage {stage!r}")


def clip_per_example(gradients, clip_norm: float) -> list[np.ndarray]:
    """Rescale each gradient g to g / max(1, ||g|| / C)."""
    if clip_norm <= 0.0:
        raise ValueError("clip_norm must be positive")
    clipped = []
    for g in gradients:
        g = np.asarray(g, dtype=np.float64)
        norm = float(np.linalg.norm(g))
        if norm > clip_norm:
            g = g * (clip_norm / norm)
        clipped.append(g)
    return clipped


def _clip_rows(grads: np.ndarray, clip_norm: float) -> np.ndarray:
    norms = np.linalg.norm(grads, axis=1, keepdims=True)
    factors = np.minimum(1.0, clip_norm / np.maximum(norms, 1e-300))
    return grads * factors


def dp_sgd_step(model: MlpModel, data: Dataset, params: PrivacyParams,
                rng: np.random.Generator, accountant: PrivacyAccountant,
                sigma: float | None = None) -> np.ndarray:
    """One private gradient release.

    Samples a lot with replacement, clips per-example gradients, averages,
    and perturbs with Gaussian noise of std sigma * C / L per coordinate.
    The budget is debited before anything is computed; an exhausted
    accountant refuses the step. sigma=0.0 is a testing hook that skips
    the noise while still exercising the full pipeline.
    """
    if len(data) != params.dataset_size:
        raise ValueError("dataset size differs from the calibrated parameters")
    accountant.spend(params.epsilon_per_step, params.delta_per_step, params.sample_ratio)
    lot = data.subset(rng.integers(0, len(data), size=params.lot_size))
    grads = _clip_rows(per_example_gradients(model, lot), params.clip_norm)
    mean_grad = grads.mean(axis=0)
    if sigma is None:
        sigma = params.sigma
    noise_std = sigma * params.clip_norm / params.lot_size
    if noise_std > 0.0:
        mean_grad = mean_grad + rng.normal(0.0, noise_std, size=mean_grad.shape)
    return mean_grad
