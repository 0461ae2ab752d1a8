"""Adaptive loss pooling over a batch of per-pixel losses.

The pooling operator replaces the usual mean over per-pixel losses with the
worst case over a family of weightings

    pool(l) = max { w . l  :  ||w||_p <= gamma,  ||w||_inf <= tau,  w >= 0 },

where the budget ``gamma = n ** (-1/q)`` (``q`` conjugate to ``p``) and the
cap ``tau = gamma * m ** (-1/p)`` are chosen so that the uniform weighting
``1/n`` is always feasible.  The pooled value is therefore an upper bound on
the plain mean, and the parameter ``m`` (between 1 and ``n``) controls how
concentrated the optimal weighting may get: at least ``ceil(m)`` pixels
receive positive weight whenever all losses are positive, and ``m = n``
recovers the mean exactly.

The maximiser has a water-filling structure.  There is a threshold
``alpha_star >= 0`` such that pixels with loss above the threshold sit at the
cap ``tau`` (the "support"), while the rest get the shrunk weight
``tau * (l / alpha_star) ** (q - 1)``.  :func:`solve_pool` finds the
threshold exactly in ``O(n log n)`` by sorting the losses and scanning a
running root function, see :func:`eta`.

Everything here is plain numpy on 1-D float64 arrays.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

__all__ = [
    "PoolingConfig",
    "ResolvedPooling",
    "SolveOutcome",
    "as_loss_vector",
    "derive_parameters",
    "eta",
    "solve_pool",
    "normalize_then_solve",
    "dual_objective",
    "gradient_wrt_losses",
    "stable_qnorm",
]

# q beyond this is numerically indistinguishable from the p = 1 limit, so the
# exact top-floor(m) path is used instead of the sort-and-scan loop.
Q_CAP = 1.0e4

# Below this p the loop still runs, but cumulative sums of l**q lose too much
# to underflow in float64; accumulate in extended precision and say so.
SMALL_P_WARNING = 1.0 + 1.0e-3

_EXTENDED_DTYPE = np.longdouble


def as_loss_vector(values) -> np.ndarray:
    """Validate and convert ``values`` to a 1-D float64 loss vector.

    Losses must be non-empty, finite and non-negative.  Raises ``ValueError``
    otherwise.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        arr = arr.reshape(-1) if arr.ndim == 0 else arr
    if arr.ndim != 1:
        raise ValueError(f"losses must be one-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError("losses must contain at least one entry")
    if not np.all(np.isfinite(arr)):
        raise ValueError("losses must be finite")
    if np.any(arr < 0):
        raise ValueError("losses must be non-negative")
    return arr


class ResolvedPooling(NamedTuple):
    """Pooling parameters resolved against a concrete batch size ``n``.

    ``q`` is the conjugate exponent ``p / (p - 1)`` (``inf`` when ``p = 1``,
    ``1.0`` when ``p = inf``), ``gamma`` the p-norm budget and ``tau`` the
    per-pixel weight cap.  ``m = (gamma / tau) ** p`` is the effective
    minimum support size.
    """

    p: float
    n: int
    m: float
    q: float
    gamma: float
    tau: float


def derive_parameters(
    p: float,
    n: int,
    m: float | None = None,
    m_fraction: float | None = None,
) -> ResolvedPooling:
    """Resolve ``(p, m)`` against a batch of ``n`` losses.

    Exactly one of ``m`` (absolute, must land in ``[1, n]``) or
    ``m_fraction`` (relative to ``n``, clamped into ``[1, n]`` after scaling)
    must be given.

    Parameters
    ----------
    p : norm exponent in ``[1, inf]``.
    n : number of pooled entries, ``n >= 1``.
    m : absolute minimum support size.
    m_fraction : support size as a fraction of ``n``, in ``[0, 1]``.

    Returns
    -------
    ResolvedPooling with ``q``, ``gamma``, ``tau`` filled in.
    """
    if not (isinstance(n, (int, np.integer)) and n >= 1):
        raise ValueError(f"n must be a positive integer, got {n!r}")
    n = int(n)
    if not (p >= 1.0):
        raise ValueError(f"p must satisfy p >= 1, got {p!r}")
    if (m is None) == (m_fraction is None):
        raise ValueError("exactly one of m and m_fraction must be given")
    if m_fraction is not None:
        if not (0.0 <= m_fraction <= 1.0):
            raise ValueError(f"m_fraction must lie in [0, 1], got {m_fraction!r}")
        m_res = min(max(m_fraction * n, 1.0), float(n))
    else:
        m_res = float(m)
        if not (1.0 <= m_res <= n):
            raise ValueError(f"m must lie in [1, n] = [1, {n}], got {m!r}")

    if math.isinf(p):
        # Dual exponent 1; cap and budget coincide, pooling is the plain mean.
        return ResolvedPooling(p=p, n=n, m=m_res, q=1.0, gamma=1.0 / n, tau=1.0 / n)
    if p == 1.0:
        return ResolvedPooling(p=p, n=n, m=m_res, q=math.inf, gamma=1.0, tau=1.0 / m_res)

    q = p / (p - 1.0)
    if q > Q_CAP:
        warnings.warn(
            f"p = {p:g} gives conjugate exponent q = {q:.3g} beyond {Q_CAP:g}; "
            "treating as p = 1 (hard top-m selection)",
            RuntimeWarning,
            stacklevel=2,
        )
        return ResolvedPooling(p=p, n=n, m=m_res, q=math.inf, gamma=1.0, tau=1.0 / m_res)
    if p < SMALL_P_WARNING:
        warnings.warn(
            f"p = {p:g} is close to 1 (q = {q:.3g}); accumulating the threshold "
            "scan in extended precision",
            RuntimeWarning,
            stacklevel=2,
        )
    gamma = float(n) ** (-1.0 / q)
    if m_res == n:
        # gamma * n ** (-1/p) == 1/n algebraically; write it exactly.
        tau = 1.0 / n
    else:
        tau = gamma * m_res ** (-1.0 / p)
    return ResolvedPooling(p=p, n=n, m=m_res, q=q, gamma=gamma, tau=tau)


@dataclass(frozen=True)
class PoolingConfig:
    """Pooling strength, valid for any batch size.

    ``m`` is the absolute support parameter; ``m_fraction`` expresses it as a
    fraction of the batch (resolved per call, which is what a trainer wants
    when crop sizes vary).  Exactly one of the two must be set.
    """

    p: float
    m: float | None = None
    m_fraction: float | None = None

    def __post_init__(self) -> None:
        if not (self.p >= 1.0):
            raise ValueError(f"p must satisfy p >= 1, got {self.p!r}")
        if (self.m is None) == (self.m_fraction is None):
            raise ValueError("exactly one of m and m_fraction must be given")
        if self.m is not None and not (self.m >= 1.0):
            raise ValueError(f"m must satisfy m >= 1, got {self.m!r}")
        if self.m_fraction is not None and not (0.0 <= self.m_fraction <= 1.0):
            raise ValueError(f"m_fraction must lie in [0, 1], got {self.m_fraction!r}")

    def resolve(self, n: int) -> ResolvedPooling:
        """Derive ``(q, gamma, tau, m)`` for a batch of ``n`` losses."""
        return derive_parameters(self.p, n, m=self.m, m_fraction=self.m_fraction)


@dataclass(frozen=True)
class SolveOutcome:
    """Result of one pooling solve.

    Attributes
    ----------
    pooled_loss : the maximised weighted loss (upper bound on the mean).
    alpha_star : threshold separating capped pixels from shrunk ones.
    support : original indices of pixels pooled at the cap ``tau``.
    weights : optimal weighting, same length and order as the input losses.
    dual : optimal dual vector ``max(l - alpha_star, 0)``.
    params : the resolved pooling parameters the solve ran with.
    """

    pooled_loss: float
    alpha_star: float
    support: np.ndarray
    weights: np.ndarray
    dual: np.ndarray
    params: ResolvedPooling


def eta(alpha: float, losses, q: float, m: float) -> float:
    """Root function of the pooling threshold.

    For ``J_alpha = {u : l(u) > alpha}`` this returns

        (m - |J_alpha|) * alpha**q - sum_{u not in J_alpha} l(u)**q.

    The optimal threshold is the largest root.  ``eta`` is negative below it
    and positive above it (once the prefix condition holds), which is what
    the solve loop scans for.  ``q`` must be finite and at least 1.
    """
    if not (alpha >= 0.0):
        raise ValueError(f"alpha must be non-negative, got {alpha!r}")
    if not (1.0 <= q < math.inf):
        raise ValueError(f"q must be finite and >= 1, got {q!r}")
    values = as_loss_vector(losses)
    above = values > alpha
    below = values[~above]
    return float((m - np.count_nonzero(above)) * alpha**q - np.sum(below**q))


def stable_qnorm(x: np.ndarray, q: float) -> float:
    """``||x||_q`` for finite ``q >= 1``, scaled to avoid overflow/underflow."""
    ax = np.abs(np.asarray(x, dtype=np.float64))
    top = float(ax.max(initial=0.0))
    if top == 0.0:
        return 0.0
    return top * float(np.sum((ax / top) ** q)) ** (1.0 / q)


def solve_pool(losses, config: PoolingConfig) -> SolveOutcome:
    """Maximise the weighted loss over the pooling family.

    Runs the sort-and-scan threshold search after dividing the losses by
    their maximum (see :func:`normalize_then_solve`, to which this
    delegates).  The returned weighting is feasible, its inner product with
    the losses equals ``pooled_loss``, and ``pooled_loss >= mean(losses)``.
    """
    return normalize_then_solve(losses, config)


def normalize_then_solve(losses, config: PoolingConfig) -> SolveOutcome:
    """Solve on losses divided by their maximum, then undo the scaling.

    Dividing by ``max(losses)`` keeps the powers ``l**q`` inside float64
    range for large ``q`` (small ``p``).  The pooled value, the threshold and
    the dual vector scale linearly with the losses, so they are multiplied
    back; the optimal weights are scale invariant and returned as computed.
    All-zero losses short-circuit to the all-zero outcome.
    """
    values = as_loss_vector(losses)
    params = config.resolve(values.size)
    n = values.size

    scale = float(values.max())
    if scale == 0.0:
        zero = np.zeros(n)
        return SolveOutcome(
            pooled_loss=0.0,
            alpha_star=0.0,
            support=np.empty(0, dtype=np.intp),
            weights=zero,
            dual=zero.copy(),
            params=params,
        )

    scaled = values / scale
    if math.isinf(params.q):
        alpha_s, support, weights = _solve_hard_top(scaled, params)
    else:
        alpha_s, support, weights = _solve_threshold_scan(scaled, params)

    uniform = math.isinf(params.p) or params.m == n
    if uniform:
        # The cap equals the uniform weight here, so the optimum is the plain
        # mean; computing it directly keeps the upper bound exact at the
        # boundary and the weights exactly uniform.
        weights = np.full(n, 1.0 / n)
        pooled = float(values.mean())
    else:
        in_support = np.zeros(n, dtype=bool)
        in_support[support] = True
        rest = params.m - support.size
        pooled = scale * params.tau * (
            float(scaled[in_support].sum()) + rest * alpha_s
        )

    alpha_star = scale * alpha_s
    dual = np.maximum(values - alpha_star, 0.0)
    return SolveOutcome(
        pooled_loss=pooled,
        alpha_star=alpha_star,
        support=support,
        weights=weights,
        dual=dual,
        params=params,
    )


def _solve_threshold_scan(scaled: np.ndarray, params: ResolvedPooling):
    """Largest root of :func:`eta` by an ascending scan, for finite q.

    ``scaled`` has maximum 1.  Returns ``(alpha, support_indices, weights)``
    in the scaled domain.
    """
    n, m, q, tau = params.n, params.m, params.q, params.tau
    work = _EXTENDED_DTYPE if params.p < SMALL_P_WARNING else np.float64

    order = np.argsort(scaled, kind="stable")
    s = scaled[order].astype(work)
    powers = s**work(q)
    prefix = np.cumsum(powers)
    counts = (work(m) - n) + np.arange(1, n + 1, dtype=work)
    eta_scan = counts * powers - prefix

    positive = np.flatnonzero(eta_scan > 0)
    stop = int(positive[0]) if positive.size else n
    # eta_1 = (m - n) * l_min**q is never positive, so a positive entry always
    # has a predecessor and the divisor below is strictly positive.
    assert stop >= 1
    a_prev = prefix[stop - 1]
    c_prev = (work(m) - n) + stop
    # Take the q-th root before leaving the working dtype: the prefix sum can
    # sit far below float64 range when q is large.
    alpha = float((a_prev / c_prev) ** (work(1.0) / work(q))) if a_prev > 0 else 0.0

    support = np.sort(order[stop:])
    weights = np.zeros(n)
    weights[support] = tau
    outside = order[:stop]
    if alpha > 0.0:
        weights[outside] = tau * (scaled[outside] / alpha) ** (q - 1.0)
    return alpha, support, weights


def _solve_hard_top(scaled: np.ndarray, params: ResolvedPooling):
    """p = 1 limit: cap the floor(m) largest losses, split the remainder.

    The fractional part of ``m`` spreads uniformly over the pixels tied at
    the threshold (none if the threshold is zero).
    """
    n, m, tau = params.n, params.m, params.tau
    k = int(math.floor(m))
    k = min(k, n)

    order = np.argsort(scaled, kind="stable")
    s = scaled[order]
    support = np.sort(order[n - k:])
    alpha = float(s[n - k - 1]) if n - k >= 1 else 0.0

    weights = np.zeros(n)
    weights[support] = tau
    frac = m - k
    if frac > 0.0 and alpha > 0.0:
        lo = int(np.searchsorted(s, alpha, side="left"))
        tied = order[lo: n - k]
        weights[tied] = tau * frac / tied.size
    return alpha, support, weights


def dual_objective(lam, losses, config: PoolingConfig) -> float:
    """Dual bound ``tau * sum(lam) + gamma * ||l - lam||_q``.

    Finite for any ``lam >= 0``; minimised (over the non-negative orthant) by
    ``max(l - alpha_star, 0)``, where it meets the pooled value.  Requires
    ``p > 1`` so that ``q`` is finite.
    """
    values = as_loss_vector(losses)
    params = config.resolve(values.size)
    if math.isinf(params.q):
        raise ValueError("dual_objective requires p > 1 (finite conjugate exponent)")
    lam_arr = np.asarray(lam, dtype=np.float64)
    if lam_arr.shape != values.shape:
        raise ValueError(
            f"lam has shape {lam_arr.shape}, losses have shape {values.shape}"
        )
    if not np.all(np.isfinite(lam_arr)) or np.any(lam_arr < 0):
        raise ValueError("lam must be finite and non-negative")
    return params.tau * float(lam_arr.sum()) + params.gamma * stable_qnorm(
        values - lam_arr, params.q
    )


def gradient_wrt_losses(outcome: SolveOutcome) -> np.ndarray:
    """Gradient of the pooled value with respect to the losses.

    The pooled value is a max of linear functions of the losses, so wherever
    the maximiser is locally stable the gradient is the optimal weighting
    itself; points of support change have measure zero and reuse the same
    expression.
    """
    return outcome.weights.copy()
