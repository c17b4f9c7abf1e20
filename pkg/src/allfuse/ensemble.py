"""Deep Ensembles: M independently seeded members and their mixture statistics."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import models
from .errors import DecodeError, EnsembleError, MissingArtifactError, ShapeError, TrainingError
from .hyperparams import HyperParams
from .seeding import derive_seed

MANIFEST = "ensemble.json"


@dataclass(frozen=True)
class UncertainPrediction:
    mu_c: np.ndarray
    sigma2_c: np.ndarray
    disagreement: float
    member_scores: np.ndarray


def _entropy(p, axis=-1):
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=axis)


def aggregate_arrays(member_scores, member_vars=None):
    """Vectorised mixture statistics over the leading member axis.

    ``member_scores`` is [M, ..., K]. Returns ``(mu_c, sigma2_c, disagreement)`` where
    sigma2_c = mean(var_i) + mean(mu_i^2) - mu_c^2 (clamped at 0) and the
    disagreement is the mutual information H(mu_c) - mean_i H(mu_i).
    """
    s = np.asarray(member_scores, dtype=np.float64)
    if s.ndim < 2 or s.shape[0] < 1:
        raise ShapeError(f"member scores need shape [M, ..., K], got {s.shape}")
    v = np.zeros_like(s) if member_vars is None else np.asarray(member_vars, dtype=np.float64)
    if v.shape != s.shape:
        raise ShapeError(f"member variances {v.shape} do not match scores {s.shape}")
    mu = s.mean(axis=0)
    spread = (s * s).mean(axis=0) - mu * mu
    dis = np.maximum(_entropy(mu) - _entropy(s).mean(axis=0), 0.0)
    # identical members agree exactly; drop the rounding residue of the mean
    same = np.all(s == s[:1], axis=(0, -1))
    spread = np.where(same[..., None], 0.0, spread)
    dis = np.where(same, 0.0, dis)
    sigma2 = np.maximum(v.mean(axis=0) + spread, 0.0)
    return mu, sigma2, dis


def aggregate(member_scores, member_vars=None) -> UncertainPrediction:
    """Statistics for one input from its M member score vectors ([M, K])."""
    s = np.asarray(member_scores, dtype=np.float64)
    if s.ndim != 2:
        raise ShapeError(f"expected [M, K] member scores, got {s.shape}")
    mu, sigma2, dis = aggregate_arrays(s, member_vars)
    return UncertainPrediction(mu, sigma2, float(dis), s)


@dataclass
class Ensemble:
    members: list
    member_seeds: list
    base_seed: int

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        if len(set(self.member_seeds)) != len(self.member_seeds):
            raise ValueError("member seeds must be pairwise distinct")
        spec = self.members[0].spec
        hp = self.members[0].hyperparams
        if any(m.spec != spec or m.hyperparams != hp for m in self.members):
            raise ValueError("all members must share one spec and hyperparameter set")

    @property
    def M(self) -> int:
        return len(self.members)

    @property
    def spec(self) -> models.ModelSpec:
        return self.members[0].spec

    @property
    def hyperparams(self) -> HyperParams:
        return self.members[0].hyperparams


def member_seed(base_seed: int, index: int, attempt: int = 0) -> int:
    return derive_seed(base_seed, "member", index, attempt) % (2**31)


def train_ensemble(arch, h: HyperParams, train_set, val_set, M: int = 5, base_seed: int = 0,
                   epochs: int = 50, batch_size: int = 16, log=None, **build_kw) -> Ensemble:
    """Train M members that differ only in their init/shuffle seed.

    A member whose loss diverges is retrained once with a perturbed seed; a second
    divergence raises EnsembleError. ``build_kw`` goes to ``models.build_model``.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    members, seeds = [], []
    for m in range(M):
        for attempt in (0, 1):
            seed = member_seed(base_seed, m, attempt)
            try:
                model = models.build_model(arch, h, seed, **build_kw)
                model = models.train(model, train_set, val_set, epochs, batch_size, h, seed)
                break
            except TrainingError as e:
                if log is not None:
                    log(f"member {m} diverged (attempt {attempt + 1}): {e}")
                if attempt == 1:
                    raise EnsembleError(f"member {m} diverged twice; last error: {e}") from e
        members.append(model)
        seeds.append(seed)
        if log is not None:
            last = model.history[-1] if model.history else {}
            log(f"member {m} seed={seed} val_acc={last.get('val_acc', float('nan')):.4f}")
    return Ensemble(members, seeds, int(base_seed))


def member_predictions(e: Ensemble, images) -> np.ndarray:
    """[M, N, K] member probabilities."""
    return np.stack([models.predict_proba(m, images) for m in e.members])


def predict_arrays(e: Ensemble, images):
    """(mu_c [N,K], sigma2_c [N,K], disagreement [N], member scores [M,N,K])."""
    s = member_predictions(e, images)
    mu, sigma2, dis = aggregate_arrays(s)
    return mu, sigma2, dis, s


def predict_uncertain(e: Ensemble, images) -> list:
    mu, sigma2, dis, s = predict_arrays(e, images)
    return [UncertainPrediction(mu[i], sigma2[i], float(dis[i]), s[:, i]) for i in range(len(mu))]


def save_ensemble(e: Ensemble, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(e.members):
        models.save_model(m, d / f"member_{i}.afck")
    meta = {
        "M": e.M,
        "base_seed": e.base_seed,
        "member_seeds": list(e.member_seeds),
        "spec": e.spec.to_dict(),
        "hyperparams": e.hyperparams.to_dict(),
    }
    path = d / MANIFEST
    path.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8", newline="\n")
    return path


def load_ensemble(directory) -> Ensemble:
    d = Path(directory)
    path = d / MANIFEST
    if not path.is_file():
        raise MissingArtifactError(f"no {MANIFEST} in {d}")
    try:
        meta = json.loads(path.read_text(encoding="utf-8"))
        n = int(meta["M"])
    except (ValueError, KeyError) as e:
        raise DecodeError(f"{path}: malformed ensemble manifest ({e})") from e
    members = [models.load_model(d / f"member_{i}.afck") for i in range(n)]
    spec = models.ModelSpec.from_dict(meta["spec"])
    if any(m.spec != spec for m in members):
        raise DecodeError(f"{path}: member specs disagree with the manifest")
    return Ensemble(members, [int(s) for s in meta["member_seeds"]], int(meta["base_seed"]))
