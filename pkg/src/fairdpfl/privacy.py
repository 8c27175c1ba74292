"""Gaussian mechanism, clipping and Renyi-DP accounting.

Three noise streams are tracked separately: model training (``train``),
lambda updates (``lambda``) and statistics sharing (``stats``). Each stream
is converted to (eps, delta) on its own and the results are summed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import special

STREAMS = ("train", "lambda", "stats")


class CalibrationError(RuntimeError):
    pass


def default_orders() -> tuple[float, ...]:
    frac = np.arange(1.25, 63.0 + 1e-9, 0.25)
    ints = np.arange(2, 65, dtype=np.float64)
    return tuple(float(a) for a in np.unique(np.concatenate([frac, ints])))


DEFAULT_ORDERS = default_orders()


def clip(gradient, bound: float) -> np.ndarray:
    """Scale ``gradient`` down to l2 norm ``bound`` if it is longer."""
    if bound <= 0:
        raise ValueError("clip bound must be > 0")
    g = np.asarray(gradient, dtype=np.float64)
    norm = float(np.linalg.norm(g))
    if not math.isfinite(norm):
        raise FloatingPointError("cannot clip a non-finite gradient")
    return g / max(1.0, norm / bound)


def clip_rows(grads: np.ndarray, bound: float) -> np.ndarray:
    """Clip each leading-axis slice of ``grads`` independently."""
    if bound <= 0:
        raise ValueError("clip bound must be > 0")
    flat = grads.reshape(len(grads), -1)
    norms = np.linalg.norm(flat, axis=1)
    if not np.all(np.isfinite(norms)):
        raise FloatingPointError("cannot clip a non-finite gradient")
    scale = 1.0 / np.maximum(1.0, norms / bound)
    return grads * scale.reshape((-1,) + (1,) * (grads.ndim - 1))


def gaussianize(value, noise_scale: float, rng: np.random.Generator):
    if noise_scale < 0:
        raise ValueError("noise scale must be >= 0")
    if noise_scale == 0:
        return value
    arr = np.asarray(value, dtype=np.float64)
    noisy = arr + rng.normal(0.0, noise_scale, size=arr.shape)
    return float(noisy) if np.ndim(value) == 0 else noisy


# --- subsampled Gaussian RDP ------------------------------------------------


def _log_add(a: float, b: float) -> float:
    hi, lo = max(a, b), min(a, b)
    if hi == -math.inf:
        return -math.inf
    return hi + math.log1p(math.exp(lo - hi))


def _log_sub(a: float, b: float) -> float:
    if b == -math.inf:
        return a
    if a <= b:
        return -math.inf
    return a + math.log1p(-math.exp(b - a))


def _log_erfc(x: float) -> float:
    return math.log(2.0) + special.log_ndtr(-x * math.sqrt(2.0))


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    k = np.arange(alpha + 1, dtype=np.float64)
    log_terms = (
        special.gammaln(alpha + 1)
        - special.gammaln(k + 1)
        - special.gammaln(alpha - k + 1)
        + k * math.log(q)
        + (alpha - k) * math.log1p(-q)
        + (k * k - k) / (2.0 * sigma * sigma)
    )
    return float(special.logsumexp(log_terms))


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    # Two-sided series split at z0 where the mixture likelihood ratio crosses 1.
    log_a0, log_a1 = -math.inf, -math.inf
    z0 = sigma * sigma * math.log(1.0 / q - 1.0) + 0.5
    i = 0
    while True:
        coef = special.binom(alpha, i)
        log_coef = math.log(abs(coef))
        j = alpha - i
        log_t0 = log_coef + i * math.log(q) + j * math.log1p(-q)
        log_t1 = log_coef + j * math.log(q) + i * math.log1p(-q)
        log_e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2.0) * sigma))
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2.0) * sigma))
        log_s0 = log_t0 + (i * i - i) / (2.0 * sigma * sigma) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2.0 * sigma * sigma) + log_e1
        if coef > 0:
            log_a0 = _log_add(log_a0, log_s0)
            log_a1 = _log_add(log_a1, log_s1)
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)
        i += 1
        if max(log_s0, log_s1) < -30 or i > 10_000:
            break
    return _log_add(log_a0, log_a1)


@lru_cache(maxsize=65536)
def _rdp_step(q: float, sigma: float, alpha: float) -> float:
    if q == 1.0:
        return alpha / (2.0 * sigma * sigma)
    if float(alpha).is_integer():
        log_a = _log_a_int(q, sigma, int(alpha))
    else:
        log_a = _log_a_frac(q, sigma, alpha)
    return max(0.0, log_a / (alpha - 1.0))


def rdp_subsampled_gaussian(q: float, sigma: float, steps: int, alpha: float) -> float:
    """RDP at order ``alpha`` of ``steps`` Poisson-subsampled Gaussian releases.

    ``sigma`` is the noise multiplier (ratio of noise std to l2 sensitivity).
    """
    if alpha <= 1:
        raise ValueError(f"Renyi order must be > 1, got {alpha}")
    if not 0 < q <= 1:
        raise ValueError(f"sampling rate must be in (0, 1], got {q}")
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    if steps == 0 or q == 0:
        return 0.0
    return steps * _rdp_step(float(q), float(sigma), float(alpha))


def rdp_vector(q: float, sigma: float, steps: int, orders=DEFAULT_ORDERS) -> np.ndarray:
    return np.array([rdp_subsampled_gaussian(q, sigma, steps, a) for a in orders])


def eps_from_rdp(rdp, orders, delta: float) -> tuple[float, float]:
    """Classic RDP-to-DP bound ``min_a rdp(a) + log(1/delta)/(a-1)``.

    Returns ``(eps, best_order)``.
    """
    if not 0 < delta < 1:
        raise ValueError("delta must be in (0, 1)")
    rdp = np.asarray(rdp, dtype=np.float64)
    orders = np.asarray(orders, dtype=np.float64)
    if not np.any(rdp > 0):
        return 0.0, float(orders[0])
    eps = rdp + math.log(1.0 / delta) / (orders - 1.0)
    i = int(np.nanargmin(eps))
    return float(eps[i]), float(orders[i])


@dataclass
class AccountantState:
    """Per-stream RDP ledger.

    Steps are stored per (q, sigma) pair, so accumulated RDP is an exact
    multiple of a cached per-step vector and accounting is deterministic.
    """

    orders: tuple[float, ...] = DEFAULT_ORDERS
    ledger: dict = field(default_factory=lambda: {s: {} for s in STREAMS})

    def step(self, stream: str, q: float, sigma: float, n: int = 1) -> None:
        if stream not in self.ledger:
            raise KeyError(f"unknown stream {stream!r}")
        if n <= 0 or sigma == 0:
            return
        key = (float(q), float(sigma))
        self.ledger[stream][key] = self.ledger[stream].get(key, 0) + n

    def steps(self, stream: str) -> int:
        return sum(self.ledger[stream].values())

    def rdp(self, stream: str) -> np.ndarray:
        total = np.zeros(len(self.orders))
        for (q, sigma), n in sorted(self.ledger[stream].items()):
            total = total + rdp_vector(q, sigma, n, self.orders)
        return total

    def epsilon(self, stream: str, delta: float) -> float:
        return rdp_to_dp(self, stream, delta)[0]


def rdp_to_dp(state: AccountantState, stream: str, delta: float) -> tuple[float, float]:
    if state.steps(stream) == 0:
        return 0.0, float(state.orders[0])
    return eps_from_rdp(state.rdp(stream), state.orders, delta)


@dataclass(frozen=True)
class StreamReport:
    eps: float
    delta: float
    steps: int = 0
    worst_case_steps: int = 0


@dataclass(frozen=True)
class PrivacyReport:
    streams: dict  # name -> StreamReport
    eps: float
    delta: float

    def to_json(self) -> dict:
        return {
            "eps": self.eps,
            "delta": self.delta,
            "streams": {
                k: {"eps": v.eps, "delta": v.delta, "steps": v.steps, "worst_case_steps": v.worst_case_steps}
                for k, v in self.streams.items()
            },
        }


def compose(streams: dict) -> PrivacyReport:
    """Basic composition: eps and delta add up across streams."""
    eps = 0.0
    delta = 0.0
    for name in streams:
        eps += streams[name].eps
        delta += streams[name].delta
    return PrivacyReport(dict(streams), eps, delta)


def calibrate_sigma(
    eps_target: float,
    delta: float,
    q: float,
    steps: int,
    orders=DEFAULT_ORDERS,
    bracket: tuple[float, float] = (0.3, 100.0),
    rel_tol: float = 1e-3,
) -> float:
    """Smallest-noise sigma (to ``rel_tol``) whose accounted eps does not exceed the target.

    The result satisfies ``eps_target * (1 - rel_tol) <= eps(sigma) <= eps_target``.
    """
    if eps_target <= 0:
        raise ValueError("eps target must be > 0")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    lo, hi = bracket

    def eps_at(sigma):
        return eps_from_rdp(rdp_vector(q, sigma, steps, orders), orders, delta)[0]

    if eps_at(hi) > eps_target:
        raise CalibrationError(
            f"eps={eps_target} unreachable with sigma in [{lo}, {hi}] "
            f"(sigma={hi} gives eps={eps_at(hi):.4g}; q={q}, steps={steps}, delta={delta})"
        )
    if eps_at(lo) <= eps_target:
        return lo
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        e = eps_at(mid)
        if e > eps_target:
            lo = mid
        else:
            hi = mid
            if e >= eps_target * (1.0 - rel_tol):
                return mid
    e = eps_at(hi)
    if e < eps_target * (1.0 - rel_tol):
        raise CalibrationError(f"bisection did not converge for eps={eps_target} (got {e})")
    return hi


@dataclass(frozen=True)
class NoisePlan:
    sigma1: float = 0.0
    sigma2: float = 0.0
    sigma3: float = 0.0
    clip_bound: float | None = None
    sampling_rate: float = 1.0
    eps_targets: tuple[float, float, float] = (0.0, 0.0, 0.0)
    delta_split: tuple[float, float, float] = (0.0, 0.0, 0.0)
    worst_case_steps: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        if min(self.sigma1, self.sigma2, self.sigma3) < 0:
            raise ValueError("noise multipliers must be >= 0")
        if not 0 < self.sampling_rate <= 1:
            raise ValueError("sampling rate must be in (0, 1]")
        if self.clip_bound is not None and self.clip_bound <= 0:
            raise ValueError("clip bound must be > 0")

    @property
    def enabled(self) -> bool:
        return self.clip_bound is not None

    @property
    def delta(self) -> float:
        return float(sum(self.delta_split))

    def to_json(self) -> dict:
        return {
            "sigma1": self.sigma1,
            "sigma2": self.sigma2,
            "sigma3": self.sigma3,
            "clip_bound": self.clip_bound,
            "sampling_rate": self.sampling_rate,
            "eps_targets": list(self.eps_targets),
            "delta_split": list(self.delta_split),
            "worst_case_steps": list(self.worst_case_steps),
        }


def worst_case_steps(rounds: int, epochs: int, q: float) -> tuple[int, int, int]:
    """Releases per stream if a client were selected in every round.

    The statistics stream carries one extra release for the group totals
    shared before training.
    """
    per_round = epochs * math.ceil(1.0 / q)
    return rounds * per_round, rounds * per_round, rounds + 1


def plan_noise(
    eps: float,
    delta: float,
    q: float,
    rounds: int,
    epochs: int,
    clip_bound: float,
    eps_split=(0.8, 0.1, 0.1),
    delta_split=(1 / 3, 1 / 3, 1 / 3),
    use_lambda_stream: bool = True,
    orders=DEFAULT_ORDERS,
) -> NoisePlan:
    """Calibrate the three noise multipliers for a total (eps, delta) budget.

    With a fixed lambda there is no lambda release, and its share of the
    budget moves to model training.
    """
    eps_split = list(eps_split)
    delta_split = list(delta_split)
    if abs(sum(eps_split) - 1.0) > 1e-9 or abs(sum(delta_split) - 1.0) > 1e-9:
        raise ValueError("budget splits must sum to 1")
    if not use_lambda_stream:
        eps_split = [eps_split[0] + eps_split[1], 0.0, eps_split[2]]
        delta_split = [delta_split[0] + delta_split[1], 0.0, delta_split[2]]
    steps = worst_case_steps(rounds, epochs, q)
    eps_t = tuple(eps * s for s in eps_split)
    delta_t = tuple(delta * s for s in delta_split)
    sigma1 = calibrate_sigma(eps_t[0], delta_t[0], q, steps[0], orders)
    sigma2 = calibrate_sigma(eps_t[1], delta_t[1], q, steps[1], orders) if use_lambda_stream else 0.0
    sigma3 = calibrate_sigma(eps_t[2], delta_t[2], 1.0, steps[2], orders)
    return NoisePlan(sigma1, sigma2, sigma3, clip_bound, q, eps_t, delta_t, steps)


def privacy_report(state: AccountantState, plan: NoisePlan) -> PrivacyReport:
    streams = {}
    for i, name in enumerate(STREAMS):
        d = plan.delta_split[i]
        eps = rdp_to_dp(state, name, d)[0] if d > 0 else 0.0
        streams[name] = StreamReport(eps, d, state.steps(name), plan.worst_case_steps[i])
    return compose(streams)
