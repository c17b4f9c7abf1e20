"""Gaussian-process Bayesian optimization over :class:`HyperParams`.

The surrogate is a GP with a constant mean (the sample mean of the targets) and a
squared-exponential kernel with per-dimension lengthscales. Points are proposed by
maximising expected improvement over a scrambled Sobol candidate set.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import ndtr
from scipy.stats import qmc

from .errors import NumericalError
from .hyperparams import (
    DROPOUT_BOUNDS,
    LR_BOUNDS,
    MOMENTUM_BOUNDS,
    OPTIMIZERS,
    UNITS_CHOICES,
    HyperParams,
    validate,
)
from .seeding import derive_seed

log = logging.getLogger(__name__)

DIM = 6
LR_INDEX = 3
JITTERS = (0.0, 1e-12, 1e-10, 1e-8, 1e-6, 1e-4)
LENGTHSCALE_GRID = (0.05, 0.1, 0.2, 0.35, 0.5, 1.0, 2.0)
DEFAULT_XI = 0.01
N_CANDIDATES = 2048

_LOG2_LO, _LOG2_HI = math.log2(UNITS_CHOICES[0]), math.log2(UNITS_CHOICES[-1])
_LOG10_LR_LO, _LOG10_LR_HI = math.log10(LR_BOUNDS[0]), math.log10(LR_BOUNDS[1])


# ---------------------------------------------------------------- encoding


def encode(theta: HyperParams) -> np.ndarray:
    """Map theta to [0,1]^6: units, one-hot optimizer (2), log lr, momentum, dropout."""
    validate(theta)
    u = (math.log2(theta.units) - _LOG2_LO) / (_LOG2_HI - _LOG2_LO)
    lr = (math.log10(theta.learning_rate) - _LOG10_LR_LO) / (_LOG10_LR_HI - _LOG10_LR_LO)
    mom = (theta.momentum - MOMENTUM_BOUNDS[0]) / (MOMENTUM_BOUNDS[1] - MOMENTUM_BOUNDS[0])
    drop = (theta.dropout_rate - DROPOUT_BOUNDS[0]) / (DROPOUT_BOUNDS[1] - DROPOUT_BOUNDS[0])
    one_hot = [1.0 if theta.optimizer == o else 0.0 for o in OPTIMIZERS]
    v = np.array([u, *one_hot, lr, mom, drop], dtype=np.float64)
    return np.clip(v, 0.0, 1.0)


def decode(v) -> HyperParams:
    """Nearest valid HyperParams for an arbitrary point of the encoded cube."""
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    steps = len(UNITS_CHOICES) - 1
    units = UNITS_CHOICES[int(round(v[0] * steps))]
    optimizer = OPTIMIZERS[0] if v[1] >= v[2] else OPTIMIZERS[1]
    lr = 10.0 ** (_LOG10_LR_LO + v[3] * (_LOG10_LR_HI - _LOG10_LR_LO))
    lr = min(max(lr, LR_BOUNDS[0]), LR_BOUNDS[1])
    mom = MOMENTUM_BOUNDS[0] + v[4] * (MOMENTUM_BOUNDS[1] - MOMENTUM_BOUNDS[0])
    drop = DROPOUT_BOUNDS[0] + v[5] * (DROPOUT_BOUNDS[1] - DROPOUT_BOUNDS[0])
    return HyperParams(units=units, optimizer=optimizer, learning_rate=float(lr),
                       momentum=float(mom), dropout_rate=float(drop))


def project(v) -> np.ndarray:
    return encode(decode(v))


# ---------------------------------------------------------------- GP


@dataclass
class Observation:
    theta: HyperParams
    y: float
    encoded: np.ndarray = None

    def __post_init__(self):
        if self.encoded is None:
            self.encoded = encode(self.theta)


@dataclass
class KernelParams:
    variance: float = 1.0
    lengthscales: np.ndarray = field(default_factory=lambda: np.full(DIM, 0.5))
    noise: float = 0.0

    def to_dict(self) -> dict:
        return {"variance": float(self.variance),
                "lengthscales": [float(x) for x in np.broadcast_to(self.lengthscales, (DIM,))],
                "noise": float(self.noise)}


def se_kernel(A, B, kp: KernelParams) -> np.ndarray:
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    ls = np.broadcast_to(np.asarray(kp.lengthscales, dtype=np.float64), (A.shape[1],))
    d = (A[:, None, :] - B[None, :, :]) / ls
    return kp.variance * np.exp(-0.5 * np.einsum("ijk,ijk->ij", d, d))


@dataclass
class GPPosterior:
    kernel: KernelParams
    X: np.ndarray
    y: np.ndarray
    mean: float
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float

    def log_marginal_likelihood(self) -> float:
        n = len(self.y)
        r = self.y - self.mean
        return float(-0.5 * r @ self.alpha - np.log(np.diag(self.chol)).sum() - 0.5 * n * math.log(2 * math.pi))


def gp_fit(observations, kernel: KernelParams) -> GPPosterior:
    """Condition the GP on observations (a list of Observation or an (X, y) pair)."""
    if isinstance(observations, tuple):
        X, y = observations
    else:
        if not observations:
            raise ValueError("gp_fit needs at least one observation")
        X = np.stack([o.encoded for o in observations])
        y = np.array([o.y for o in observations], dtype=np.float64)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if len(y) < 1 or len(y) != len(X):
        raise ValueError("need matching, non-empty X and y")
    mean = float(y.mean())
    K = se_kernel(X, X, kernel)
    eye = np.eye(len(y))
    for jitter in JITTERS:
        try:
            L = np.linalg.cholesky(K + (kernel.noise + jitter) * eye)
        except np.linalg.LinAlgError:
            continue
        alpha = cho_solve((L, True), y - mean)
        return GPPosterior(kernel, X, y, mean, L, alpha, jitter)
    raise NumericalError(f"kernel matrix not positive definite even with jitter {JITTERS[-1]}")


def gp_predict_many(g: GPPosterior, Xs):
    Xs = np.atleast_2d(np.asarray(Xs, dtype=np.float64))
    Ks = se_kernel(Xs, g.X, g.kernel)
    mu = g.mean + Ks @ g.alpha
    v = solve_triangular(g.chol, Ks.T, lower=True)
    var = g.kernel.variance - np.einsum("ij,ij->j", v, v)
    return mu, np.maximum(var, 0.0)


def gp_predict(g: GPPosterior, x):
    mu, var = gp_predict_many(g, np.asarray(x, dtype=np.float64)[None, :])
    return float(mu[0]), float(var[0])


# ---------------------------------------------------------------- acquisition


def expected_improvement(mean, variance, best_y, xi=DEFAULT_XI):
    """EI for maximisation; vectorised over mean/variance."""
    mean = np.asarray(mean, dtype=np.float64)
    sigma = np.sqrt(np.maximum(np.asarray(variance, dtype=np.float64), 0.0))
    imp = mean - best_y - xi
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sigma > 0, imp / np.where(sigma > 0, sigma, 1.0), 0.0)
        pdf = np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
        ei = np.where(sigma > 0, imp * ndtr(z) + sigma * pdf, np.maximum(imp, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


def candidate_scan(g: GPPosterior, rng, xi=DEFAULT_XI, n_candidates=N_CANDIDATES):
    """Score ``n_candidates`` Sobol points, each snapped to the nearest valid configuration.

    Returns (projected candidates, EI per candidate).
    """
    seed = int(rng.integers(0, 2**63 - 1)) if isinstance(rng, np.random.Generator) else int(rng)
    raw = qmc.Sobol(d=DIM, scramble=True, seed=seed).random(n_candidates)
    cands = np.stack([project(c) for c in raw])
    mu, var = gp_predict_many(g, cands)
    return cands, expected_improvement(mu, var, float(g.y.max()), xi)


def propose_next(g: GPPosterior, rng, xi=DEFAULT_XI, n_candidates=N_CANDIDATES) -> HyperParams:
    cands, ei = candidate_scan(g, rng, xi, n_candidates)
    return decode(cands[int(np.argmax(ei))])  # argmax takes the lowest index on ties


# ---------------------------------------------------------------- kernel selection


def fit_kernel(X, y, noise=1e-6, grid=LENGTHSCALE_GRID, sweeps=2) -> GPPosterior:
    """Pick lengthscales from a small grid by log marginal likelihood.

    Starts from the best isotropic value, then refines one dimension at a time.
    The signal variance is the sample variance of y (floored).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    variance = max(float(y.var()), 1e-4)

    def fit(ls):
        return gp_fit((X, y), KernelParams(variance, np.array(ls, dtype=np.float64), noise))

    best = max((fit(np.full(DIM, l)) for l in grid), key=lambda g: g.log_marginal_likelihood())
    ls = np.array(best.kernel.lengthscales, dtype=np.float64)
    for _ in range(sweeps):
        for d in range(DIM):
            for l in grid:
                trial = ls.copy()
                trial[d] = l
                g = fit(trial)
                if g.log_marginal_likelihood() > best.log_marginal_likelihood() + 1e-12:
                    best, ls = g, trial
    return best


# ---------------------------------------------------------------- loop


@dataclass
class BoTrace:
    iterations: list = field(default_factory=list)
    best_theta: HyperParams = None
    best_y: float = -math.inf

    def incumbents(self) -> list:
        out, cur = [], -math.inf
        for it in self.iterations:
            cur = max(cur, it["y"])
            out.append(cur)
        return out

    def to_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.iterations:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @staticmethod
    def from_jsonl(path) -> "BoTrace":
        tr = BoTrace()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            rec = json.loads(line)
            tr.iterations.append(rec)
            if rec["y"] > tr.best_y:
                tr.best_y = rec["y"]
                tr.best_theta = HyperParams.from_dict(rec["theta"])
        return tr


def initial_design(k: int, seed: int) -> list:
    """Latin-hypercube sample over (units, optimizer, log lr, momentum, dropout)."""
    pts = qmc.LatinHypercube(d=5, seed=derive_seed(seed, "bo-init")).random(k)
    out = []
    for u, o, lr, m, d in pts:
        one_hot = (1.0, 0.0) if o < 0.5 else (0.0, 1.0)
        out.append(decode([u, *one_hot, lr, m, d]))
    return out


def bo_loop(objective, k_init=5, n_max=25, seed=0, xi=DEFAULT_XI, noise=1e-6,
            n_candidates=N_CANDIDATES, callback=None) -> BoTrace:
    """Evaluate ``objective`` at most ``n_max`` times: an LHS design, then EI proposals."""
    if not 1 <= k_init < n_max:
        raise ValueError("need 1 <= k_init < n_max")
    trace = BoTrace()
    rng = np.random.default_rng(derive_seed(seed, "bo-propose"))
    X, Y = [], []

    def record(i, theta, ei, kernel):
        failed = False
        try:
            y = float(objective(theta))
            if not math.isfinite(y):
                raise ValueError(f"objective returned {y}")
        except Exception as exc:  # noqa: BLE001 - a failed trial is data, not a crash
            log.warning("objective failed at iteration %d: %s", i, exc)
            y, failed = 0.0, True
        X.append(encode(theta))
        Y.append(y)
        rec = {"iter": i, "theta": theta.to_dict(), "y": y, "ei": ei, "kernel": kernel, "failed": failed}
        trace.iterations.append(rec)
        if y > trace.best_y:
            trace.best_y, trace.best_theta = y, theta
        if callback is not None:
            callback(rec, trace)

    for i, theta in enumerate(initial_design(k_init, seed)):
        record(i, theta, None, None)
    for i in range(k_init, n_max):
        g = fit_kernel(np.stack(X), np.array(Y), noise=noise)
        cands, ei = candidate_scan(g, rng, xi, n_candidates)
        j = int(np.argmax(ei))
        record(i, decode(cands[j]), float(ei[j]), g.kernel.to_dict())
    return trace
