"""Fréchet distance between Gaussian fits and the evaluation protocols built on it."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .encoder import encode
from .errors import UsageError
from .rng import make_rng

EIG_CLAMP = 1e-8
SYM_TOL = 1e-10


@dataclass(frozen=True)
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray
    n: int = 0


@dataclass
class EvalReport:
    metric: str
    value: float
    n_gen: int
    n_ref: int
    seed: int | None = None
    baseline: float | None = None
    reference: str | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self):
        rec = {"metric": self.metric, "value": self.value, "n_gen": self.n_gen,
               "n_ref": self.n_ref, "seed": self.seed, "baseline": self.baseline}
        if self.reference is not None:
            rec["reference"] = self.reference
        if self.extra:
            rec["extra"] = self.extra
        return json.dumps(rec, sort_keys=True)

    @classmethod
    def from_json(cls, line):
        rec = json.loads(line)
        return cls(**rec)


def append_report(path, report: EvalReport):
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")


def read_reports(path):
    with open(path, encoding="utf-8") as fh:
        return [EvalReport.from_json(line) for line in fh if line.strip()]


def gaussian_fit(samples) -> GaussianFit:
    """Sample mean and population (divide-by-n) covariance."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise UsageError("gaussian_fit needs at least 2 samples of shape [n, d]")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / x.shape[0]
    return GaussianFit(mu, (cov + cov.T) / 2.0, x.shape[0])


def _check_sym(c, which):
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise UsageError(f"covariance {which} must be square")
    scale = max(1.0, float(np.abs(c).max(initial=0.0)))
    if np.abs(c - c.T).max(initial=0.0) > SYM_TOL * scale:
        raise UsageError(f"covariance {which} is not symmetric")


def _psd_sqrt(c):
    w, v = np.linalg.eigh(c)
    w = np.where(w < EIG_CLAMP, 0.0, w)
    return (v * np.sqrt(w)) @ v.T


def trace_sqrt_product(ca, cb):
    """Tr((ca^1/2 cb ca^1/2)^1/2) via symmetric eigendecompositions."""
    sa = _psd_sqrt(ca)
    m = sa @ cb @ sa
    w = np.linalg.eigvalsh((m + m.T) / 2.0)
    return float(np.sqrt(np.where(w < EIG_CLAMP, 0.0, w)).sum())


def frechet_distance(a: GaussianFit, b: GaussianFit) -> float:
    ma, mb = np.asarray(a.mean, np.float64), np.asarray(b.mean, np.float64)
    ca, cb = np.atleast_2d(np.asarray(a.cov, np.float64)), np.atleast_2d(np.asarray(b.cov, np.float64))
    if ma.shape != mb.shape or ca.shape != cb.shape:
        raise UsageError("Gaussian fits have different dimensions")
    _check_sym(ca, "a")
    _check_sym(cb, "b")
    if np.array_equal(ma, mb) and np.array_equal(ca, cb):
        return 0.0
    diff = ma - mb
    value = float(diff @ diff) + float(np.trace(ca) + np.trace(cb)) - 2.0 * trace_sqrt_product(ca, cb)
    return max(value, 0.0)


def half_split_fd(reference, seed=0):
    """FD between two disjoint random halves of ``reference``."""
    ref = np.asarray(reference, dtype=np.float64)
    perm = make_rng(seed, "half-split").permutation(ref.shape[0])
    h = ref.shape[0] // 2
    return frechet_distance(gaussian_fit(ref[perm[:h]]), gaussian_fit(ref[perm[h:2 * h]]))


def rep_fd(generated_reps, reference_reps, seed=None, reference="", with_baseline=True) -> EvalReport:
    gen = np.asarray(generated_reps, dtype=np.float64)
    ref = np.asarray(reference_reps, dtype=np.float64)
    if gen.ndim != 2 or ref.ndim != 2 or gen.shape[1] != ref.shape[1]:
        raise UsageError("generated and reference representations differ in dimension")
    value = frechet_distance(gaussian_fit(gen), gaussian_fit(ref))
    baseline = half_split_fd(ref, seed or 0) if with_baseline and ref.shape[0] >= 4 else None
    return EvalReport("rep_fd", value, gen.shape[0], ref.shape[0], seed, baseline, reference)


def feature_fd(generated_images, reference_images, encoder, seed=None, reference="",
               with_baseline=True) -> EvalReport:
    """FD in the encoder's (unnormalized) projection space."""
    if not getattr(encoder, "trained", False):
        raise UsageError("feature_fd needs a trained encoder")
    gen = encode(generated_images, encoder).astype(np.float64)
    ref = encode(reference_images, encoder).astype(np.float64)
    report = rep_fd(gen, ref, seed, reference, with_baseline)
    report.metric = "feature_fd"
    return report


def class_centroids(reps, labels, num_classes):
    """Per-class means of normalized representations, [K, D]."""
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels)
    out = []
    for k in range(num_classes):
        rows = reps[labels == k]
        if rows.shape[0] == 0:
            raise UsageError(f"class {k} has no representations")
        out.append(rows.mean(axis=0))
    return np.stack(out)


def _cosine_rows(x, y):
    xn = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    yn = y / np.maximum(np.linalg.norm(y, axis=1, keepdims=True), 1e-12)
    return xn @ yn.T


def cluster_accuracy(generated_reps, target_class, class_centroids) -> float:
    """Fraction of generated reps whose nearest centroid (cosine) is target_class."""
    cents = np.asarray(class_centroids, dtype=np.float64)
    if not 0 <= target_class < cents.shape[0]:
        raise UsageError(f"class {target_class} has no centroid")
    gen = np.atleast_2d(np.asarray(generated_reps, dtype=np.float64))
    if gen.shape[0] == 0:
        raise UsageError("no generated representations")
    nearest = _cosine_rows(gen, cents).argmax(axis=1)
    return float((nearest == target_class).mean())
