"""VP noise schedules, the analytic Gaussian-mixture noise predictor, and the
first-order exponential-integrator (DPM-Solver-1) step."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ParameterError, ParseError, SingularityError

logger = logging.getLogger(__name__)

DEFAULT_T = 1000
DEFAULT_BETA_MIN = 8.5e-4
DEFAULT_BETA_MAX = 1.2e-2


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Discrete VP schedule on t = 0..T.

    ``lam[0]`` is +inf because sigma_0 = 0.
    """

    T: int
    alpha: np.ndarray
    sigma: np.ndarray
    lam: np.ndarray

    def check_step(self, t, name="t", low=0):
        if int(t) != t or not low <= t <= self.T:
            raise ParameterError(f"{name}={t} outside [{low}, {self.T}]")
        return int(t)

    def alpha_sigma(self, t):
        """(alpha, sigma) at a possibly fractional time, linear in lambda between indices."""
        if t == 0:
            return 1.0, 0.0
        if not 1 <= t <= self.T:
            raise ParameterError(f"continuous time {t} outside {{0}} U [1, {self.T}]")
        lo = min(int(math.floor(t)), self.T - 1)
        frac = t - lo
        if lo == 0:
            # lambda_0 is infinite; only exact integer t=1 reaches here with frac=1
            lam = self.lam[1]
        else:
            lam = (1 - frac) * self.lam[lo] + frac * self.lam[lo + 1]
        return _alpha_sigma_from_lambda(lam)


def _alpha_sigma_from_lambda(lam):
    alpha = math.sqrt(1.0 / (1.0 + math.exp(-2.0 * lam)))
    sigma = math.sqrt(1.0 / (1.0 + math.exp(2.0 * lam)))
    return alpha, sigma


def build_schedule(T=DEFAULT_T, beta_min=DEFAULT_BETA_MIN, beta_max=DEFAULT_BETA_MAX):
    """Scaled-linear beta schedule (linear in sqrt(beta)), the SD/LCM convention."""
    if int(T) != T or T < 2:
        raise ParameterError(f"T must be an integer >= 2, got {T}")
    if not 0 < beta_min < beta_max < 1:
        raise ParameterError(f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    T = int(T)
    betas = np.linspace(math.sqrt(beta_min), math.sqrt(beta_max), T) ** 2
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    alpha = np.sqrt(alpha_bar)
    sigma = np.sqrt(1.0 - alpha_bar)
    alpha[0], sigma[0] = 1.0, 0.0
    with np.errstate(divide="ignore"):
        lam = np.log(alpha) - np.log(sigma)
    for arr in (alpha, sigma, lam):
        arr.flags.writeable = False
    return DiffusionSchedule(T=T, alpha=alpha, sigma=sigma, lam=lam)


@dataclass(frozen=True)
class Condition:
    """Which mixture components the noise predictor is conditioned on.

    ``indices=None`` is the unconditional (empty-prompt) case; a tuple selects a
    sub-mixture, standing in for a text condition.
    """

    indices: tuple | None = None

    @classmethod
    def subset(cls, *indices):
        if not indices:
            raise ParameterError("subset condition needs at least one component index")
        return cls(tuple(sorted(set(int(i) for i in indices))))

    @property
    def unconditional(self):
        return self.indices is None

    def validate(self, n_components):
        if self.indices is None:
            return
        if not self.indices:
            raise ParameterError("subset condition is empty")
        if min(self.indices) < 0 or max(self.indices) >= n_components:
            raise ParameterError(f"condition {self.indices} outside 0..{n_components - 1}")


UNCOND = Condition()


class GaussianMixtureOracle:
    """Analytic diagonal-covariance mixture used as a frozen noise predictor.

    Variances of exactly zero are allowed and give point masses; every query is
    at sigma > 0 so the marginal covariance stays positive.
    """

    def __init__(self, weights, means, variances):
        weights = np.asarray(weights, dtype=float)
        means = np.atleast_2d(np.asarray(means, dtype=float))
        variances = np.asarray(variances, dtype=float)
        if variances.ndim == 0:
            variances = np.full_like(means, float(variances))
        elif variances.ndim == 1 and means.shape[1] != 1 and variances.shape[0] == means.shape[0]:
            variances = np.repeat(variances[:, None], means.shape[1], axis=1)
        variances = np.broadcast_to(variances, means.shape).astype(float)
        if weights.ndim != 1 or weights.shape[0] != means.shape[0]:
            raise ParameterError("weights and means disagree on component count")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ParameterError(f"weights must be non-negative and sum to 1 (sum={weights.sum()!r})")
        if np.any(variances < 0) or not np.all(np.isfinite(variances)):
            raise ParameterError("variances must be finite and non-negative")
        self.weights = weights
        self.means = means
        self.variances = np.ascontiguousarray(variances)
        self._sub = {}

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return self.means.shape[0]

    @classmethod
    def point_mass(cls, mu):
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        return cls([1.0], mu[None, :], np.zeros((1, mu.shape[0])))

    @classmethod
    def from_dict(cls, doc):
        try:
            dim = int(doc["dim"])
            comps = doc["components"]
            weights = [float(c["weight"]) for c in comps]
            means = [list(map(float, c["mean"])) for c in comps]
            variances = [list(map(float, c["var"])) for c in comps]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad oracle document: {exc}", "oracle") from exc
        for i, (m, v) in enumerate(zip(means, variances)):
            if len(m) != dim or len(v) != dim:
                raise ParseError(f"component {i} has wrong dimension", f"oracle.components[{i}]")
        return cls(weights, means, variances)

    @classmethod
    def from_json(cls, text_or_path):
        if isinstance(text_or_path, Path) or (isinstance(text_or_path, str) and not text_or_path.lstrip().startswith("{")):
            text_or_path = Path(text_or_path).read_text()
        return cls.from_dict(json.loads(text_or_path))

    def to_dict(self):
        return {
            "dim": self.dim,
            "components": [
                {"weight": float(w), "mean": m.tolist(), "var": v.tolist()}
                for w, m, v in zip(self.weights, self.means, self.variances)
            ],
        }

    def _parts(self, cond):
        if cond is None or cond.indices is None:
            return self.weights, self.means, self.variances
        if cond.indices not in self._sub:
            cond.validate(self.n_components)
            idx = np.array(cond.indices)
            w = self.weights[idx]
            if w.sum() <= 0:
                raise ParameterError(f"condition {cond.indices} selects zero-weight components")
            self._sub[cond.indices] = (w / w.sum(), self.means[idx].copy(), self.variances[idx].copy())
        return self._sub[cond.indices]

    def eps(self, x, alpha, sigma, cond=UNCOND):
        """Noise prediction -sigma * grad log p(x) at the (alpha, sigma) marginal."""
        if sigma <= 0:
            raise SingularityError("noise prediction is undefined at sigma = 0")
        w, mu, var = self._parts(cond)
        x = np.asarray(x, dtype=float)
        flat = np.ascontiguousarray(x.reshape(-1, self.dim))
        return kernels.gm_eps(flat, float(alpha), float(sigma), w, mu, var).reshape(x.shape)

    def log_density(self, x, alpha, sigma, cond=UNCOND):
        w, mu, var = self._parts(cond)
        x = np.asarray(x, dtype=float)
        flat = np.ascontiguousarray(x.reshape(-1, self.dim))
        out = kernels.gm_logpdf(flat, float(alpha), float(sigma), w, mu, var)
        return out[0] if x.ndim == 1 else out.reshape(x.shape[:-1])

    def nearest_mode_distance(self, x):
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        d = np.linalg.norm(x[:, None, :] - self.means[None, :, :], axis=2)
        return d.min(axis=1)


def add_noise(x0, t, eps, sched):
    t = sched.check_step(t)
    return sched.alpha[t] * np.asarray(x0, dtype=float) + sched.sigma[t] * np.asarray(eps, dtype=float)


def eps_oracle(gm, x, t, cond, sched, guidance=1.0):
    """eps_hat(x, t | cond) from the analytic oracle.

    With ``guidance != 1`` and a subset condition the classifier-free form
    eps_uncond + guidance * (eps_cond - eps_uncond) is returned.
    """
    t = sched.check_step(t)
    if t == 0:
        raise SingularityError("eps_oracle queried at t=0 where sigma_0 = 0")
    a, s = sched.alpha[t], sched.sigma[t]
    e = gm.eps(x, a, s, cond)
    if guidance != 1.0 and cond is not None and not cond.unconditional:
        e0 = gm.eps(x, a, s, UNCOND)
        e = e0 + guidance * (e - e0)
    return e


def gm_log_density(gm, x, t, cond, sched):
    t = sched.check_step(t, low=1)
    return gm.log_density(x, sched.alpha[t], sched.sigma[t], cond)


def dpm_step(x, s, t, cond, gm, sched, eps_s=None):
    """One first-order DPM-Solver step from s to t.

    Written as alpha_t * x0_hat + sigma_t * eps_hat, which equals
    (alpha_t/alpha_s) x - sigma_t * expm1(lambda_t - lambda_s) * eps_hat and stays
    finite at t = 0. Works in either time direction.
    """
    s = sched.check_step(s, "s", low=1)
    t = sched.check_step(t, "t")
    x = np.asarray(x, dtype=float)
    if s == t:
        return x.copy()
    if eps_s is None:
        eps_s = eps_oracle(gm, x, s, cond, sched)
    x0_hat = (x - sched.sigma[s] * eps_s) / sched.alpha[s]
    return sched.alpha[t] * x0_hat + sched.sigma[t] * eps_s


def data_predictor(x, s, cond, gm, sched):
    """D(x_s, s) = G(x_s, s, 0) = (x_s - sigma_s eps_hat) / alpha_s."""
    return dpm_step(x, s, 0, cond, gm, sched)


def pf_ode_solve(gm, x, s, t, sched, cond=UNCOND, n_sub=256):
    """High-resolution PF-ODE transport of x from step s to step t (both >= 1).

    Integrates dy/du = rho * eps_hat in u = log(sigma/alpha), y = x / alpha, with
    classical RK4. Used as the exact-trajectory reference.
    """
    s = sched.check_step(s, "s", low=1)
    t = sched.check_step(t, "t", low=1)
    x = np.asarray(x, dtype=float)
    if s == t:
        return x.copy()
    u0 = math.log(sched.sigma[s] / sched.alpha[s])
    u1 = math.log(sched.sigma[t] / sched.alpha[t])
    h = (u1 - u0) / n_sub

    def rhs(u, y):
        rho = math.exp(u)
        a = 1.0 / math.sqrt(1.0 + rho * rho)
        return rho * gm.eps(a * y, a, rho * a, cond)

    y = x / sched.alpha[s]
    u = u0
    for _ in range(n_sub):
        k1 = rhs(u, y)
        k2 = rhs(u + 0.5 * h, y + 0.5 * h * k1)
        k3 = rhs(u + 0.5 * h, y + 0.5 * h * k2)
        k4 = rhs(u + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        u += h
    return sched.alpha[t] * y


def sample(gm, sched, x_T, n_steps=200, cond=UNCOND):
    """Deterministic multi-step DPM-Solver-1 sampling from step T down to 0."""
    if n_steps < 1:
        raise ParameterError("n_steps must be >= 1")
    steps = np.unique(np.round(np.linspace(sched.T, 0, n_steps + 1)).astype(int))[::-1]
    x = np.asarray(x_T, dtype=float)
    for s, t in zip(steps[:-1], steps[1:]):
        x = dpm_step(x, int(s), int(t), cond, gm, sched)
    return x
