"""Invertible attribute Gaussianization via the two-parameter power transform.

The transform composes a shifted Box-Cox map with a fixed normalization:

    T(a) = (g(a; lambda1, lambda2) - mu) / sqrt(sigma^2 + epsilon)

``lambda2`` extends the domain to a > -lambda2; ``lambda1`` is fitted per
candidate shift by minimizing the profile negative log-likelihood with
Brent's method, and the winning (lambda1, lambda2) pair is the one whose
normalized transform has the lowest negentropy.  ``mu`` and ``sigma`` are
the mean and standard deviation of the transformed fitting sample, frozen
at fit time so the whole map is a deterministic isomorphism.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

DEFAULT_LAMBDA2_GRID = (0.0, 1e-3, 1e-2, 1e-1, 0.5, 1.0, 2.0, 5.0)
LAMBDA1_BRACKET = (-3.0, 3.0)
DEFAULT_EPSILON = 1e-8

# E[psi(nu)] for nu ~ N(0,1) and psi(u) = -exp(-u^2/2); closed form -1/sqrt(2).
_PSI_NORMAL_MEAN = -1.0 / math.sqrt(2.0)


class TransformDomainError(ValueError):
    """Input outside the domain of the (inverse) power transform."""


class DegenerateSampleError(ValueError):
    """Sample is constant or too small for the requested statistic."""


class FitError(ValueError):
    """Power-transform fitting could not produce a candidate."""


def box_cox(u, lambda1: float, lambda2: float = 0.0):
    """Two-parameter Box-Cox transform; strictly increasing in u.

    Requires u + lambda2 > 0.  Uses expm1/log to stay accurate for small
    lambda1, so the power branch meets the log branch continuously.
    """
    u = np.asarray(u, dtype=np.float64)
    shifted = u + lambda2
    if np.any(shifted <= 0.0):
        raise TransformDomainError(
            f"box_cox requires u + lambda2 > 0 (min shifted value {shifted.min():g})"
        )
    log_shifted = np.log(shifted)
    if lambda1 == 0.0:
        out = log_shifted
    else:
        out = np.expm1(lambda1 * log_shifted) / lambda1
    return out if out.ndim else float(out)


def inverse_box_cox(v, lambda1: float, lambda2: float = 0.0):
    """Inverse of :func:`box_cox`; requires lambda1*v + 1 > 0 when lambda1 != 0."""
    v = np.asarray(v, dtype=np.float64)
    if lambda1 == 0.0:
        out = np.exp(v) - lambda2
    else:
        arg = lambda1 * v
        if np.any(arg <= -1.0):
            raise TransformDomainError(
                f"inverse_box_cox requires lambda1*v > -1 (min {arg.min():g})"
            )
        out = np.exp(np.log1p(arg) / lambda1) - lambda2
    return out if out.ndim else float(out)


def yeo_johnson(u, lambda1: float):
    """Power transform defined on all reals (four-branch formulation).

    Coincides with ``box_cox(u, lambda1, 1)`` for u >= 0; strictly increasing.
    """
    u = np.asarray(u, dtype=np.float64)
    out = np.empty_like(u)
    pos = u >= 0
    if lambda1 == 0.0:
        out[pos] = np.log1p(u[pos])
    else:
        out[pos] = np.expm1(lambda1 * np.log1p(u[pos])) / lambda1
    if lambda1 == 2.0:
        out[~pos] = -np.log1p(-u[~pos])
    else:
        out[~pos] = -np.expm1((2.0 - lambda1) * np.log1p(-u[~pos])) / (2.0 - lambda1)
    return out if out.ndim else float(out)


def box_cox_nll(data, lambda1: float, lambda2: float = 0.0) -> float:
    """Profile negative log-likelihood of the Box-Cox model, constants dropped.

    (n/2) * ln(var(g(data))) - (lambda1 - 1) * sum(ln(data + lambda2)),
    with the maximum-likelihood (1/n) variance of the transformed sample.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.size < 2:
        raise DegenerateSampleError("need at least 2 observations")
    transformed = box_cox(data, lambda1, lambda2)
    variance = float(np.var(transformed))
    if variance <= 0.0 or not np.isfinite(variance):
        raise DegenerateSampleError(
            f"transformed sample is degenerate at lambda1={lambda1:g}"
        )
    n = data.size
    return float(0.5 * n * math.log(variance) - (lambda1 - 1.0) * np.log(data + lambda2).sum())


class BrentResult(NamedTuple):
    x: float
    fx: float
    iterations: int
    converged: bool


_GOLDEN = 0.3819660112501051  # (3 - sqrt(5)) / 2


def brent_minimize(
    f: Callable[[float], float],
    bracket: tuple[float, float],
    tol: float = 1e-8,
    max_iter: int = 500,
) -> BrentResult:
    """Scalar minimization combining golden-section steps with parabolic fits.

    Returns a local minimizer of ``f`` on [lo, hi] within ``tol``; if the
    iteration cap is hit first, the best point so far is returned with
    ``converged=False``.  Non-finite function values raise ValueError.
    """
    a, b = float(bracket[0]), float(bracket[1])
    if not a < b:
        raise ValueError(f"bracket must satisfy lo < hi, got ({a}, {b})")

    def eval_f(t: float) -> float:
        value = float(f(t))
        if not math.isfinite(value):
            raise ValueError(f"objective returned non-finite value {value} at {t}")
        return value

    x = w = v = a + _GOLDEN * (b - a)
    fx = fw = fv = eval_f(x)
    d = e = 0.0
    for iteration in range(max_iter):
        mid = 0.5 * (a + b)
        tol1 = tol * abs(x) + 1e-12
        tol2 = 2.0 * tol1
        if abs(x - mid) <= tol2 - 0.5 * (b - a):
            return BrentResult(x, fx, iteration, True)
        use_golden = True
        if abs(e) > tol1:
            # trial parabolic fit through (x, w, v)
            r = (x - w) * (fx - fv)
            q = (x - v) * (fx - fw)
            p = (x - v) * q - (x - w) * r
            q = 2.0 * (q - r)
            if q > 0.0:
                p = -p
            q = abs(q)
            e_prev, e = e, d
            if abs(p) < abs(0.5 * q * e_prev) and q * (a - x) < p < q * (b - x):
                d = p / q
                u = x + d
                if u - a < tol2 or b - u < tol2:
                    d = tol1 if x < mid else -tol1
                use_golden = False
        if use_golden:
            e = (b - x) if x < mid else (a - x)
            d = _GOLDEN * e
        u = x + d if abs(d) >= tol1 else x + (tol1 if d > 0 else -tol1)
        fu = eval_f(u)
        if fu <= fx:
            if u >= x:
                a = x
            else:
                b = x
            v, w, x = w, x, u
            fv, fw, fx = fw, fx, fu
        else:
            if u < x:
                a = u
            else:
                b = u
            if fu <= fw or w == x:
                v, w = w, u
                fv, fw = fw, fu
            elif fu <= fv or v == x or v == w:
                v, fv = u, fu
    return BrentResult(x, fx, max_iter, False)


def negentropy(samples) -> float:
    """Departure of a standardized sample from normality (>= 0).

    Approximated as the squared gap between the sample mean of
    psi(v) = -exp(-v^2/2) on the standardized sample and its standard
    normal expectation -1/sqrt(2); zero for exactly Gaussian data.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < 2:
        raise DegenerateSampleError("need at least 2 observations")
    std = float(samples.std())
    if std <= 0.0:
        raise DegenerateSampleError("constant sample has no negentropy")
    standardized = (samples - samples.mean()) / std
    psi_mean = float(np.mean(-np.exp(-0.5 * standardized**2)))
    return (psi_mean - _PSI_NORMAL_MEAN) ** 2


@dataclass(frozen=True)
class PowerTransformParams:
    """Fitted transform: Box-Cox powers plus frozen normalization statistics."""

    lambda1: float
    lambda2: float
    mu: float
    sigma: float
    epsilon: float = DEFAULT_EPSILON
    attribute_kind: str | None = None

    def __post_init__(self) -> None:
        if self.sigma <= 0.0:
            raise FitError(f"sigma must be positive, got {self.sigma}")
        if self.lambda2 < 0.0:
            raise FitError(f"lambda2 must be >= 0, got {self.lambda2}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PowerTransformParams":
        return cls(**json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "PowerTransformParams":
        return cls.from_json(Path(path).read_text())


def apply_transform(params: PowerTransformParams, a):
    """Full transform: Box-Cox then normalization with the frozen statistics."""
    transformed = box_cox(a, params.lambda1, params.lambda2)
    return (transformed - params.mu) / math.sqrt(params.sigma**2 + params.epsilon)


def invert_transform(params: PowerTransformParams, t):
    """Inverse of :func:`apply_transform`, back to the attribute domain."""
    t = np.asarray(t, dtype=np.float64)
    unscaled = t * math.sqrt(params.sigma**2 + params.epsilon) + params.mu
    return inverse_box_cox(unscaled, params.lambda1, params.lambda2)


def transform_with_batch_stats(params: PowerTransformParams, a):
    """Transform normalized by the statistics of this batch, not the frozen fit.

    Fidelity mode for experiments that want per-mini-batch normalization; it
    is not invertible sample-by-sample, so the default everywhere else is
    the frozen-statistics transform.
    """
    transformed = np.asarray(box_cox(a, params.lambda1, params.lambda2))
    if transformed.size < 2:
        raise DegenerateSampleError("batch statistics need at least 2 values")
    mu = float(transformed.mean())
    sigma = float(transformed.std())
    return (transformed - mu) / math.sqrt(sigma**2 + params.epsilon)


def fit_power_transform(
    samples,
    lambda2_grid: tuple[float, ...] = DEFAULT_LAMBDA2_GRID,
    tol: float = 1e-6,
    epsilon: float = DEFAULT_EPSILON,
    attribute_kind: str | None = None,
) -> PowerTransformParams:
    """Fit (lambda1, lambda2, mu, sigma) on a training sample.

    For every feasible shift in the grid, lambda1 minimizes the profile
    negative log-likelihood over [-3, 3]; among those candidates the pair
    with the lowest negentropy of the normalized transform wins.
    Deterministic given (samples, grid, tol).
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < 10:
        raise FitError(f"need at least 10 observations, got {samples.size}")
    if not np.all(np.isfinite(samples)):
        raise FitError("samples must be finite")
    sample_min = float(samples.min())
    feasible = [l2 for l2 in lambda2_grid if sample_min + l2 > 0.0]
    if not feasible:
        raise FitError(
            f"no feasible lambda2 in grid for sample minimum {sample_min:g}"
        )

    best: PowerTransformParams | None = None
    best_score = math.inf
    for lambda2 in feasible:
        result = brent_minimize(
            lambda l1: box_cox_nll(samples, l1, lambda2), LAMBDA1_BRACKET, tol
        )
        transformed = np.asarray(box_cox(samples, result.x, lambda2))
        mu = float(transformed.mean())
        sigma = float(transformed.std())
        if sigma <= 0.0:
            continue
        normalized = (transformed - mu) / math.sqrt(sigma**2 + epsilon)
        score = negentropy(normalized)
        if score < best_score:
            best_score = score
            best = PowerTransformParams(
                lambda1=result.x,
                lambda2=lambda2,
                mu=mu,
                sigma=sigma,
                epsilon=epsilon,
                attribute_kind=attribute_kind,
            )
    if best is None:
        raise FitError("all candidate transforms were degenerate")
    return best
