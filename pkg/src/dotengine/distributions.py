"""Preserved feature distributions: per-class Gaussians and domain prototypes.

The semantic memory keeps one Gaussian per class over final-layer features
(full covariance or its diagonal); the domain memory keeps K retained
layer-stack prototypes per training domain. Both replace raw data replay.
"""

import json
from dataclasses import dataclass

import numpy as np

JITTER = 1e-6  # added to the covariance diagonal before any factorization


class DegenerateInputError(ValueError):
    pass


@dataclass
class ClassGaussian:
    class_id: int
    mean: np.ndarray
    mode: str  # "full" | "diagonal"
    cov: np.ndarray  # (m, m) in full mode, (m,) variances in diagonal mode
    sample_count: int

    def __post_init__(self):
        if self.mode not in ("full", "diagonal"):
            raise ValueError(f"unknown covariance mode {self.mode!r}")

    @property
    def dim(self):
        return self.mean.shape[0]

    def storage_floats(self):
        """Stored parameter count: m + m^2 (full) or 2m (diagonal)."""
        m = self.dim
        return m + (m * m if self.mode == "full" else m)


@dataclass
class DomainPrototypeSet:
    domain_id: int
    prototypes: list  # K arrays, each (L, m)
    selection_mode: str = "random"

    @property
    def k(self):
        return len(self.prototypes)


def fit_class_gaussian(features, class_id, mode="diagonal"):
    """Estimate mean and (co)variance of final-layer features of one class.

    Uses the unbiased n-1 covariance estimator. Full mode symmetrizes the
    matrix exactly; diagonal mode keeps only the per-coordinate variances.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected (n, m) features, got shape {x.shape}")
    n = x.shape[0]
    if mode == "full" and n < 2:
        raise DegenerateInputError(f"full covariance needs >=2 samples, got {n}")
    if n < 1:
        raise DegenerateInputError("no samples for class gaussian")
    mean = x.mean(axis=0)
    centered = x - mean
    if mode == "full":
        cov = centered.T @ centered / (n - 1)
        cov = (cov + cov.T) / 2.0
    elif mode == "diagonal":
        cov = (centered**2).sum(axis=0) / (n - 1) if n > 1 else np.zeros(x.shape[1])
    else:
        raise ValueError(f"unknown covariance mode {mode!r}")
    return ClassGaussian(class_id, mean, mode, cov, n)


def sample_class(gaussian, n, rng):
    """Draw n vectors from a fitted class Gaussian, deterministic given rng."""
    m = gaussian.dim
    z = rng.standard_normal((n, m))
    if gaussian.mode == "diagonal":
        std = np.sqrt(gaussian.cov + JITTER)
        return gaussian.mean + z * std
    cov = gaussian.cov + JITTER * np.eye(m)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as err:
        raise ArithmeticError("covariance not factorizable after jitter") from err
    return gaussian.mean + z @ chol.T


def select_prototypes(layer_stacks, domain_id, k, rng, mode="random"):
    """Keep K layer-stack prototypes for one domain.

    random: uniform without replacement (the default). knn: the K stacks whose
    flattened form is nearest (Euclidean) to the domain's mean stack.
    """
    stacks = [np.asarray(s, dtype=np.float64) for s in layer_stacks]
    if len(stacks) < k:
        raise DegenerateInputError(
            f"domain {domain_id}: {len(stacks)} candidates for K={k} prototypes"
        )
    if mode == "random":
        chosen = rng.choice(len(stacks), size=k, replace=False)
        picks = [stacks[i] for i in sorted(chosen)]
    elif mode == "knn":
        flat = np.stack([s.ravel() for s in stacks])
        dists = np.linalg.norm(flat - flat.mean(axis=0), axis=1)
        order = np.argsort(dists, kind="stable")[:k]
        picks = [stacks[i] for i in sorted(order)]
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    return DomainPrototypeSet(domain_id, picks, selection_mode=mode)


def sample_domain(prototype_set, rng):
    """Uniform draw of one stored prototype stack."""
    idx = int(rng.integers(prototype_set.k))
    return prototype_set.prototypes[idx]


def semantic_store_floats(gaussians):
    """Total float count of a semantic memory, for parameter-cost accounting."""
    return sum(g.storage_floats() for g in gaussians)


def domain_store_floats(prototype_sets):
    return sum(sum(p.size for p in ps.prototypes) for ps in prototype_sets)


# -- optional sidecar serialization (checkpoint/resume) ----------------------


def save_stores(path, gaussians, prototype_sets):
    """Write semantic and domain memories as a JSON sidecar."""
    doc = {
        "gaussians": [
            {
                "class_id": g.class_id,
                "mode": g.mode,
                "mean": g.mean.tolist(),
                "cov": g.cov.tolist(),
                "sample_count": g.sample_count,
            }
            for g in sorted(gaussians, key=lambda g: g.class_id)
        ],
        "prototype_sets": [
            {
                "domain_id": ps.domain_id,
                "selection_mode": ps.selection_mode,
                "prototypes": [p.tolist() for p in ps.prototypes],
            }
            for ps in sorted(prototype_sets, key=lambda p: p.domain_id)
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))


def load_stores(path):
    with open(path) as f:
        doc = json.load(f)
    gaussians = [
        ClassGaussian(
            entry["class_id"],
            np.asarray(entry["mean"], dtype=np.float64),
            entry["mode"],
            np.asarray(entry["cov"], dtype=np.float64),
            entry["sample_count"],
        )
        for entry in doc["gaussians"]
    ]
    prototype_sets = [
        DomainPrototypeSet(
            entry["domain_id"],
            [np.asarray(p, dtype=np.float64) for p in entry["prototypes"]],
            selection_mode=entry["selection_mode"],
        )
        for entry in doc["prototype_sets"]
    ]
    return gaussians, prototype_sets
