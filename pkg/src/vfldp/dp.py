"""Differential-privacy mechanics: clipping, sensitivity, noise, accounting."""
import math
from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import BudgetExhausted, ConfigError, ShapeError

WEIGHTS = "weights"
GRADIENTS = "gradients"
EMBEDDINGS = "embeddings"
NONE = "none"
NOISE_POINTS = (WEIGHTS, GRADIENTS, EMBEDDINGS, NONE)

AS_PRINTED = "as_printed"
SUM_OF_SQUARES = "sum_of_squares"

# relative slack when comparing cumulative epsilon with the budget, so that
# T spends of epsilon/T do not trip the limit on rounding alone
BUDGET_RTOL = 1e-9


@dataclass(frozen=True)
class DpConfig:
    epsilon: float
    delta: float = 0.001
    iterations: int = 100
    sample_prob: float = 1.0
    c2: float = 1.0
    noise_point: str = WEIGHTS

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ConfigError(f"epsilon must be a positive finite number, got {self.epsilon}")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ConfigError(f"iterations must be an integer >= 1, got {self.iterations}")
        if not 0.0 < self.sample_prob <= 1.0:
            raise ConfigError(f"sample_prob must lie in (0, 1], got {self.sample_prob}")
        if not self.c2 > 0:
            raise ConfigError(f"c2 must be positive, got {self.c2}")
        if self.noise_point not in NOISE_POINTS:
            raise ConfigError(f"noise_point must be one of {NOISE_POINTS}, got {self.noise_point!r}")

    @property
    def step_epsilon(self):
        return self.epsilon / self.iterations

    @property
    def step_delta(self):
        return self.delta / self.iterations


@dataclass(frozen=True)
class ClipSpec:
    """Either a fixed limit ``s`` or a percentile of early gradient norms.

    ``mode`` is ``"fixed"`` (uses ``s``) or ``"warmup"`` (uses ``percentile``
    over the first ``window`` observed norms). ``per_layer_limits``, when
    given, replaces ``s`` with :func:`overall_limit` of those limits.
    """

    mode: str = "warmup"
    s: float = None
    percentile: float = 80.0
    window: int = 50
    per_layer_limits: tuple = None
    layer_limit_rule: str = AS_PRINTED

    def __post_init__(self):
        if self.per_layer_limits is not None:
            object.__setattr__(self, "per_layer_limits", tuple(float(v) for v in self.per_layer_limits))
            overall_limit(self.per_layer_limits, self.layer_limit_rule)
            object.__setattr__(self, "mode", "fixed")
        elif self.mode == "fixed":
            if self.s is None or not self.s > 0:
                raise ConfigError(f"fixed clipping needs s > 0, got {self.s}")
        elif self.mode == "warmup":
            if not 0.0 < self.percentile <= 100.0:
                raise ConfigError(f"percentile must lie in (0, 100], got {self.percentile}")
            if int(self.window) != self.window or self.window < 1:
                raise ConfigError(f"window must be an integer >= 1, got {self.window}")
        else:
            raise ConfigError(f"unknown clip mode {self.mode!r}")

    @classmethod
    def fixed(cls, s):
        return cls(mode="fixed", s=s)

    @classmethod
    def never(cls):
        """A limit that never binds."""
        return cls(mode="fixed", s=math.inf)

    @property
    def warmup_iterations(self):
        return int(self.window) if self.mode == "warmup" else 0

    def fixed_limit(self):
        if self.per_layer_limits is not None:
            return overall_limit(self.per_layer_limits, self.layer_limit_rule)
        return self.s


def clip(update, s):
    """Scale ``update`` down to L2 norm ``s`` if it is longer.

    Inputs with norm at most ``s`` are returned unchanged (same values).
    """
    if not s > 0:
        raise ConfigError(f"clip limit must be positive, got {s}")
    v = np.asarray(update, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm <= s:
        return v
    out = v * (s / norm)
    # rounding can leave the scaled norm an ulp above s
    while float(np.linalg.norm(out)) > s:
        out = out * (1.0 - 2.0 ** -52)
    return out


def overall_limit(per_layer_limits, rule=AS_PRINTED):
    """Combine per-layer limits into one overall clip limit.

    ``as_printed`` returns ``sqrt(sum(s_k))``; ``sum_of_squares`` returns
    ``sqrt(sum(s_k ** 2))``.
    """
    limits = [float(v) for v in per_layer_limits]
    if not limits:
        raise ConfigError("per-layer limits must be non-empty")
    if any(not v > 0 for v in limits):
        raise ConfigError("per-layer limits must all be positive")
    if rule == AS_PRINTED:
        return math.sqrt(math.fsum(limits))
    if rule == SUM_OF_SQUARES:
        return math.sqrt(math.fsum(v * v for v in limits))
    raise ConfigError(f"unknown layer limit rule {rule!r}")


def gradient_estimate(samples):
    """Weighted mean ``sum(m_j w_j) / sum(m_j)`` of ``(m_j, w_j)`` pairs."""
    samples = list(samples)
    if not samples:
        raise ShapeError("gradient estimate needs at least one sample")
    weights = np.array([float(m) for m, _ in samples])
    if np.any(weights <= 0):
        raise ShapeError("sample weights m_j must be positive")
    vectors = [np.asarray(w, dtype=np.float64) for _, w in samples]
    shape = vectors[0].shape
    if any(v.shape != shape for v in vectors):
        raise ShapeError("all sampled updates must share one shape")
    stacked = np.stack(vectors)
    return np.tensordot(weights, stacked, axes=1) / weights.sum()


def sensitivity_bound(s):
    """L2 sensitivity of the weighted gradient estimate over clipped updates."""
    if not s > 0:
        raise ConfigError(f"clip limit must be positive, got {s}")
    return 2.0 * s


def calibrate_sigma(cfg):
    """Noise multiplier ``c2 * p * sqrt(T ln(1/delta)) / epsilon``."""
    return cfg.c2 * cfg.sample_prob * math.sqrt(cfg.iterations * math.log(1.0 / cfg.delta)) / cfg.epsilon


@dataclass(frozen=True)
class NoiseDraw:
    """Noise scale plus the seed path ``(run_seed, party, round, tensor_id)``."""

    sigma: float
    seed_path: tuple


def add_gaussian_noise(tensor, sigma, d, draw):
    """Add i.i.d. ``N(0, (sigma d)^2)`` noise drawn from ``draw.seed_path``."""
    if sigma < 0:
        raise ConfigError(f"sigma must be non-negative, got {sigma}")
    if not d > 0:
        raise ConfigError(f"sensitivity d must be positive, got {d}")
    t = np.asarray(tensor, dtype=np.float64)
    if sigma == 0:
        return t
    return t + (sigma * d) * rng.normal(draw.seed_path, t.shape)


class PrivacyAccountant:
    """Sequential-composition ledger of (epsilon, delta) spent so far."""

    def __init__(self, budget):
        self.budget = budget
        self.spent_epsilon = 0.0
        self.spent_delta = 0.0
        self.step_count = 0
        self._eps_terms = []
        self._delta_terms = []

    def would_exceed(self, step_epsilon):
        total = math.fsum(self._eps_terms + [step_epsilon])
        return total > self.budget.epsilon * (1.0 + BUDGET_RTOL)

    def spend(self, step_epsilon, step_delta=0.0):
        if step_epsilon < 0 or step_delta < 0:
            raise ConfigError("spent epsilon and delta must be non-negative")
        if self.would_exceed(step_epsilon):
            raise BudgetExhausted(
                math.fsum(self._eps_terms + [step_epsilon]), self.budget.epsilon, self.step_count
            )
        self._eps_terms.append(step_epsilon)
        self._delta_terms.append(step_delta)
        self.spent_epsilon = math.fsum(self._eps_terms)
        self.spent_delta = math.fsum(self._delta_terms)
        self.step_count += 1
        return self

    def __repr__(self):
        return (
            f"PrivacyAccountant(spent_epsilon={self.spent_epsilon:.6g}, "
            f"spent_delta={self.spent_delta:.6g}, steps={self.step_count}, "
            f"budget_epsilon={self.budget.epsilon})"
        )


def warmup_threshold(norm_history, percentile, window):
    """Nearest-rank ``percentile`` of the first ``window`` norms.

    Returns ``None`` while fewer than ``window`` norms have been collected.
    """
    if not 0.0 < percentile <= 100.0:
        raise ConfigError(f"percentile must lie in (0, 100], got {percentile}")
    if window < 1:
        raise ConfigError("window must be >= 1")
    if len(norm_history) < window:
        return None
    ordered = sorted(float(v) for v in list(norm_history)[:window])
    rank = math.ceil(percentile / 100.0 * window)
    value = ordered[max(rank, 1) - 1]
    if not value > 0:
        # every early norm was zero; fall back to the smallest usable limit
        value = np.finfo(np.float64).tiny
    return value


class ClipController:
    """Tracks the clip limit for one party across iterations.

    During warm-up the limit is unknown: :meth:`observe` records norms and
    :attr:`active` stays False. Once ``window`` norms are in, the limit is
    frozen at the configured percentile.
    """

    def __init__(self, spec):
        self.spec = spec
        self.history = []
        self.limit = spec.fixed_limit() if spec.mode == "fixed" else None

    @property
    def active(self):
        return self.limit is not None

    def observe(self, norm):
        if self.active:
            return self.limit
        self.history.append(float(norm))
        self.limit = warmup_threshold(self.history, self.spec.percentile, self.spec.window)
        return self.limit
