"""Per-step scores: cosine loss, discrete log-softmax and the vMF log-likelihood."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .errors import DegenerateHiddenStateError, InvalidArgumentError

DEGENERATE_NORM = 1e-12
DEFAULT_KAPPA = 1.0


def _norm_checked(h: np.ndarray) -> float:
    n = float(np.linalg.norm(h))
    if not n > DEGENERATE_NORM:
        raise DegenerateHiddenStateError(f"hidden state norm {n:.3g} is too small to define a direction")
    return n


def cosine(e, h) -> float:
    e = np.asarray(e, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    hn = _norm_checked(h)
    c = float(e @ h) / (float(np.linalg.norm(e)) * hn)
    return min(1.0, max(-1.0, c))


def cosine_loss(e, h) -> float:
    """``1 - cos(e, h)``; invariant to positive rescaling of either argument."""
    return 1.0 - cosine(e, h)


def cosine_loss_grad(e, h) -> np.ndarray:
    """Gradient of ``1 - cos(e, h)`` with respect to ``h``.

    The result is orthogonal to ``h``: only the direction of ``h`` matters.
    """
    e = np.asarray(e, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    hn = _norm_checked(h)
    en = float(np.linalg.norm(e))
    c = float(e @ h) / (en * hn)
    return -(e / (en * hn) - c * h / (hn * hn))


def discrete_log_probs(table, h) -> np.ndarray:
    """Log-softmax of the logits ``<E(t), h>`` over the whole vocabulary."""
    logits = table.unit @ np.asarray(h, dtype=np.float64)
    m = logits.max()
    return logits - (m + math.log(np.exp(logits - m).sum()))


def discrete_log_prob(table, h, t: int) -> float:
    if not 0 <= t < table.size:
        raise InvalidArgumentError(f"token {t} out of range for |V|={table.size}")
    return float(discrete_log_probs(table, h)[t])


def log_bessel_iv(nu: float, x: float) -> float:
    """``log I_nu(x)`` for ``nu >= 0``, ``x > 0`` by the ascending power series.

    Terms are accumulated relative to the leading one, so large orders do not
    overflow. Converges quickly while ``x`` is small compared to ``sqrt(nu + 1)``
    and remains accurate to ~1e-15 for x up to a few dozen.
    """
    if nu < 0 or x <= 0:
        raise InvalidArgumentError(f"need nu >= 0 and x > 0, got nu={nu}, x={x}")
    q = 0.25 * x * x
    term = 1.0
    total = 1.0
    k = 0
    while True:
        k += 1
        term *= q / (k * (k + nu))
        total += term
        if term < 1e-17 * total:
            break
        if k > 10_000:
            raise ArithmeticError(f"Bessel series did not converge for nu={nu}, x={x}")
    return nu * math.log(0.5 * x) - math.lgamma(nu + 1.0) + math.log(total)


@lru_cache(maxsize=None)
def log_c_d(d: int, kappa: float = DEFAULT_KAPPA) -> float:
    """Log normalizer of the vMF density on the sphere in R^d."""
    if d < 2:
        raise InvalidArgumentError(f"dimension must be >= 2, got {d}")
    if not kappa > 0:
        raise InvalidArgumentError(f"kappa must be positive, got {kappa}")
    nu = d / 2.0 - 1.0
    return nu * math.log(kappa) - (d / 2.0) * math.log(2.0 * math.pi) - log_bessel_iv(nu, kappa)


def _sign_value(sign) -> float:
    if sign in (1, "plus", "+"):
        return 1.0
    if sign in (-1, "minus", "-"):
        return -1.0
    raise InvalidArgumentError(f"score sign must be plus or minus, got {sign!r}")


def vmf_log_prob(e, h, kappa: float = DEFAULT_KAPPA, sign="plus") -> float:
    """``sign * kappa * cos(e, h) + log C_d(kappa)``.

    ``sign="minus"`` flips the cosine term, under which the search prefers
    distant embeddings.
    """
    e = np.asarray(e, dtype=np.float64)
    return _sign_value(sign) * kappa * cosine(e, h) + log_c_d(e.shape[0], kappa)


def vmf_log_probs(cosines, d: int, kappa: float = DEFAULT_KAPPA, sign="plus") -> np.ndarray:
    """Vectorized form over precomputed cosines."""
    return _sign_value(sign) * kappa * np.asarray(cosines, dtype=np.float64) + log_c_d(d, kappa)
