"""Count and Gaussian kernels for the variational models.

All log-densities accept either plain arrays or :class:`~stbac.tensor.Tensor`
inputs. When no argument is a tensor the result is returned as a numpy
array, otherwise as a tensor wired into the active tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln
from scipy.stats import nbinom

from .tensor import autograd as ag
from .tensor.autograd import Tensor

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
PI_EPS = 1e-8
_LOG_2PI = np.log(2.0 * np.pi)


def _any_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def _unwrap(out: Tensor, tensor_in: bool):
    return out if tensor_in else out.data


def _require_positive(name: str, x) -> None:
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if not np.all(data > 0):
        raise ValueError(f"{name} must be strictly positive")


@dataclass
class ZinbParams:
    """Per-spot, per-gene ZINB parameters; the mean is ``lib * rho``."""

    rho: object
    lib: object
    theta: object
    pi: object

    @property
    def mu(self):
        lib = self.lib
        if isinstance(lib, Tensor):
            return self.rho * lib.reshape(-1, 1)
        return self.rho * np.asarray(lib, dtype=np.float64).reshape(-1, 1)

    def validate(self, atol: float = 1e-9) -> None:
        rho = self.rho.data if isinstance(self.rho, Tensor) else np.asarray(self.rho)
        if not np.allclose(rho.sum(axis=-1), 1.0, atol=atol, rtol=0.0):
            raise ValueError("rho rows must sum to 1")
        _require_positive("theta", self.theta)
        pi = self.pi.data if isinstance(self.pi, Tensor) else np.asarray(self.pi)
        if np.any(pi < 0) or np.any(pi >= 1):
            raise ValueError("pi must lie in [0, 1)")


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian stored as (mean, log-variance)."""

    mu: object
    logvar: object

    @property
    def sigma(self):
        if isinstance(self.logvar, Tensor):
            return ag.exp(self.logvar * 0.5)
        return np.exp(0.5 * np.asarray(self.logvar))

    @classmethod
    def from_raw(cls, mu, raw_logvar) -> GaussianPosterior:
        """Clamp an unconstrained log-variance head into [-10, 10]."""
        if isinstance(raw_logvar, Tensor):
            return cls(mu, ag.clip(raw_logvar, LOGVAR_MIN, LOGVAR_MAX))
        return cls(mu, np.clip(raw_logvar, LOGVAR_MIN, LOGVAR_MAX))


def nb_log_pmf(y, mu, theta):
    """log NB(y; mean=mu, inverse dispersion=theta), computed through log-gamma."""
    tensor_in = _any_tensor(mu, theta)
    _require_positive("mu", mu)
    _require_positive("theta", theta)
    y_arr = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    mu, theta = ag.as_tensor(mu), ag.as_tensor(theta)
    log_theta_mu = ag.log(theta + mu)
    out = (
        ag.lgamma(theta + y_arr)
        - ag.lgamma(theta)
        - gammaln(y_arr + 1.0)
        + theta * (ag.log(theta) - log_theta_mu)
        + y_arr * (ag.log(mu) - log_theta_mu)
    )
    return _unwrap(out, tensor_in)


def zinb_log_pmf(y, mu, theta, pi):
    """log ZINB(y; mu, theta, pi).

    The zero branch is ``logaddexp(log pi, log(1-pi) + log NB(0))`` so it
    stays accurate when ``pi`` is tiny; ``pi == 0`` reduces exactly to NB.
    """
    tensor_in = _any_tensor(mu, theta, pi)
    _require_positive("mu", mu)
    _require_positive("theta", theta)
    pi_data = pi.data if isinstance(pi, Tensor) else np.asarray(pi, dtype=np.float64)
    if np.any(pi_data < 0) or np.any(pi_data >= 1):
        raise ValueError("pi must lie in [0, 1)")
    y_arr = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    mu, theta, pi = ag.as_tensor(mu), ag.as_tensor(theta), ag.as_tensor(pi)
    log_theta_mu = ag.log(theta + mu)
    nb = nb_log_pmf(y_arr, mu, theta)
    nb_zero = theta * (ag.log(theta) - log_theta_mu)
    log1m_pi = ag.log1p(-pi)
    zero_case = ag.logaddexp(ag.log(pi), log1m_pi + nb_zero)
    out = ag.where(y_arr == 0, zero_case, log1m_pi + nb)
    return _unwrap(out, tensor_in)


def zinb_log_pmf_params(y, params: ZinbParams):
    return zinb_log_pmf(y, params.mu, params.theta, params.pi)


def gaussian_kl_standard(post: GaussianPosterior, axis=-1):
    """KL(N(mu, sigma^2) || N(0, 1)) summed over ``axis``."""
    tensor_in = _any_tensor(post.mu, post.logvar)
    mu, logvar = ag.as_tensor(post.mu), ag.as_tensor(post.logvar)
    out = ((mu * mu + ag.exp(logvar) - 1.0 - logvar) * 0.5).sum(axis=axis)
    return _unwrap(out, tensor_in)


def gaussian_kl(q: GaussianPosterior, p: GaussianPosterior, axis=-1):
    """KL(q || p) between diagonal Gaussians, summed over ``axis``."""
    tensor_in = _any_tensor(q.mu, q.logvar, p.mu, p.logvar)
    qm, qv, pm, pv = (ag.as_tensor(t) for t in (q.mu, q.logvar, p.mu, p.logvar))
    diff = qm - pm
    out = ((pv - qv + (ag.exp(qv) + diff * diff) / ag.exp(pv) - 1.0) * 0.5).sum(axis=axis)
    return _unwrap(out, tensor_in)


def gaussian_log_pdf(x, mu, logvar, axis=-1):
    """Diagonal Gaussian log-density summed over ``axis``."""
    tensor_in = _any_tensor(x, mu, logvar)
    x, mu, logvar = ag.as_tensor(x), ag.as_tensor(mu), ag.as_tensor(logvar)
    diff = x - mu
    out = ((diff * diff / ag.exp(logvar) + logvar + _LOG_2PI) * -0.5).sum(axis=axis)
    return _unwrap(out, tensor_in)


def sample_reparam(post: GaussianPosterior, rng: np.random.Generator, eps: np.ndarray | None = None):
    """z = mu + sigma * eps with eps ~ N(0, 1); differentiable in (mu, logvar)."""
    tensor_in = _any_tensor(post.mu, post.logvar)
    mu = ag.as_tensor(post.mu)
    if eps is None:
        eps = rng.standard_normal(mu.shape)
    out = mu + ag.exp(ag.as_tensor(post.logvar) * 0.5) * eps
    return _unwrap(out, tensor_in)


def categorical_log_pmf(y, log_probs):
    """Pick ``log_probs[i, y_i]`` for each row."""
    y = np.asarray(y, dtype=np.int64)
    rows = np.arange(len(y))
    if isinstance(log_probs, Tensor):
        return log_probs[rows, y]
    return np.asarray(log_probs)[rows, y]


def categorical_entropy(log_probs, axis=-1):
    tensor_in = _any_tensor(log_probs)
    lp = ag.as_tensor(log_probs)
    out = -(ag.exp(lp) * lp).sum(axis=axis)
    return _unwrap(out, tensor_in)


def sample_zinb(mu, theta, pi, rng: np.random.Generator) -> np.ndarray:
    """Draw ZINB counts: zero with probability pi, else Poisson(Gamma(theta, mu/theta))."""
    mu = np.asarray(mu, dtype=np.float64)
    theta = np.broadcast_to(np.asarray(theta, dtype=np.float64), mu.shape)
    pi = np.broadcast_to(np.asarray(pi, dtype=np.float64), mu.shape)
    rate = rng.gamma(theta, mu / theta)
    counts = rng.poisson(rate)
    dropped = rng.random(mu.shape) < pi
    return np.where(dropped, 0, counts).astype(np.int64)


def nb_tail_bound(mu: float, theta: float, tail: float = 1e-9) -> int:
    """Smallest Y with NB survival P(y > Y) below ``tail``."""
    p = theta / (theta + mu)
    return int(nbinom.isf(tail, theta, p)) + 1
