"""Synthetic feature banks with controllable semantic/domain factors.

Each class gets an anchor vector, each domain an orthogonal-transform-plus-
shift operator. A sample's layer-l feature mixes the class anchor with the
domain operator applied to a per-sample shared layer code:

    r^(l) = (1 - alpha_l) * z_c + alpha_l * (Q_d w + s_dom u_d) + noise

The mixing profile alpha peaks at mid depth and is clamped low at the final
layer, so intermediate layers carry the domain signal and the final layer
carries the semantic signal. Training records of a task use only its
assigned domain; test records cover every domain including an optional
held-out one that never trains.
"""

from dataclasses import dataclass

import numpy as np

from .featurebank import SPLIT_TEST, SPLIT_TRAIN, FeatureBank, FeatureRecord, TaskSpec, select


class SeparationInfeasibleError(RuntimeError):
    pass


def default_alpha_profile(num_layers, peak=0.8, final=0.1):
    """Mid-depth peaked mixing weights: peak * sin^2(pi l / L), final clamped."""
    l = np.arange(1, num_layers + 1)
    alpha = peak * np.sin(np.pi * l / num_layers) ** 2
    alpha[-1] = final
    return alpha


@dataclass
class SynthConfig:
    classes: int = 10
    domains: int = 4
    tasks: int = 5
    m: int = 64
    layers: int = 6
    train_per_class: int = 24
    test_per_class: int = 24  # per (class, domain)
    domain_shift: float = 70.0  # magnitude of the per-domain shift operator
    shift_jitter: float = 0.0  # per-sample relative spread of the shift strength
    semantic_separation: float = 14.0  # minimum pairwise anchor distance
    noise_scale: float = 0.5
    anchor_offset: float = 1.2  # baseline level of every anchor coordinate
    anchor_scale: float = 0.66  # per-coordinate spread of dense class anchors
    anchor_style: str = "sparse"  # "sparse" per-class coordinate groups or "dense" Gaussian
    block_size: int = 4  # coordinates carrying each domain's signature
    unseen_gain: float = 1.5  # intensity of the held-out style relative to seen ones
    alpha: np.ndarray | None = None
    unseen_domain: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.semantic_separation <= 0:
            raise ValueError("semantic separation must be positive")
        if self.domain_shift < 0 or self.noise_scale < 0:
            raise ValueError("domain shift and noise scale must be nonnegative")
        if self.block_size < 1:
            raise ValueError("block size must be at least 1")
        if self.tasks > self.classes:
            raise ValueError("cannot split fewer classes than tasks")
        if self.tasks < self.domains:
            raise ValueError(
                "need at least as many tasks as domains so every domain trains "
                "some task (flag extras via unseen_domain instead)"
            )
        if self.alpha is None:
            self.alpha = default_alpha_profile(self.layers)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.shape != (self.layers,):
            raise ValueError("alpha profile needs one weight per layer")

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["alpha"] = self.alpha.tolist()
        return d

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        if doc.get("alpha") is not None:
            doc["alpha"] = np.asarray(doc["alpha"], dtype=np.float64)
        return cls(**doc)


def _class_anchors(cfg, rng, max_attempts=1000):
    anchors = []
    for c in range(cfg.classes):
        for _ in range(max_attempts):
            if cfg.anchor_style == "sparse":
                # dedicated coordinate group per class, disjoint from the
                # domain signature blocks at the top of the vector
                free = cfg.m - cfg.domains * cfg.block_size
                group = free // cfg.classes if cfg.classes else 0
                z = np.full(cfg.m, cfg.anchor_offset)
                if group >= 1:
                    start = c * group
                    bump = 1.01 * cfg.semantic_separation / np.sqrt(2.0 * group)
                    z[start : start + group] += bump
                elif free >= 1:
                    # more classes than disjoint groups fit: distinct binary
                    # bump patterns over the free coordinates instead
                    bits = np.array([(c + 1) >> k & 1 for k in range(free)], float)
                    z[:free] += 1.01 * cfg.semantic_separation * bits
            else:
                z = cfg.anchor_offset + cfg.anchor_scale * rng.standard_normal(cfg.m)
            if all(np.linalg.norm(z - a) >= cfg.semantic_separation for a in anchors):
                anchors.append(z)
                break
        else:
            raise SeparationInfeasibleError(
                f"could not place anchor {c} with separation {cfg.semantic_separation}"
            )
    return anchors


def _domain_operators(cfg, rng, count):
    """Orthogonal transform plus shift per domain; norms stay stable.

    Each seen domain's shift concentrates on its own small block of
    coordinates, the way style statistics occupy dedicated channels in real
    backbones. Classes trained under one domain inherit that block as a
    spurious cue, which is exactly what breaks a head on out-of-domain data.
    Domains beyond the seen set (the held-out ones) reuse the first seen
    signature at amplified intensity with a fresh rotation: a familiar style
    factor pushed outside the range any training domain exhibits, so
    robustness to that factor can transfer while the raw head cannot.
    """
    block = max(1, min(cfg.block_size, cfg.m // cfg.domains))
    ops = []
    seen_shifts = []
    for d in range(count):
        q, r = np.linalg.qr(rng.standard_normal((cfg.m, cfg.m)))
        q = q * np.sign(np.diag(r))  # canonical sign, deterministic
        if d < cfg.domains:
            u = np.zeros(cfg.m)
            start = cfg.m - (d + 1) * block
            u[start : start + block] = 1.0 / np.sqrt(block)
            seen_shifts.append(u)
        else:
            u = cfg.unseen_gain * seen_shifts[0]
        ops.append((q, cfg.domain_shift * u))
    return ops


def _task_split(cfg, rng):
    """Disjoint class partition plus a training domain for each task."""
    classes = list(range(cfg.classes))
    base, extra = divmod(cfg.classes, cfg.tasks)
    assignment = {}
    perm = rng.permutation(cfg.domains)
    cursor = 0
    for t in range(1, cfg.tasks + 1):
        size = base + (1 if t <= extra else 0)
        task_classes = tuple(classes[cursor : cursor + size])
        cursor += size
        domain = int(perm[(t - 1) % cfg.domains])
        assignment[t] = TaskSpec(task_classes, domain)
    return assignment


def _sample(cfg, rng, anchor, op):
    q, shift = op
    code = rng.standard_normal(cfg.m)
    gain = 1.0 + cfg.shift_jitter * rng.standard_normal()
    domain_part = q @ code + gain * shift
    noise = cfg.noise_scale * rng.standard_normal((cfg.layers, cfg.m))
    a = cfg.alpha[:, None]
    return (1.0 - a) * anchor + a * domain_part + noise


def generate(cfg):
    """Build a feature bank for one synthetic episode; deterministic per seed."""
    rng = np.random.default_rng(cfg.seed)
    anchors = _class_anchors(cfg, rng)
    total_domains = cfg.domains + (1 if cfg.unseen_domain else 0)
    operators = _domain_operators(cfg, rng, total_domains)
    assignment = _task_split(cfg, rng)
    unseen = (cfg.domains,) if cfg.unseen_domain else ()

    records = []
    for t in sorted(assignment):
        spec = assignment[t]
        for c in spec.classes:
            for _ in range(cfg.train_per_class):
                layers = _sample(cfg, rng, anchors[c], operators[spec.domain])
                records.append(FeatureRecord(c, spec.domain, SPLIT_TRAIN, layers))
    for c in range(cfg.classes):
        for d in range(total_domains):
            for _ in range(cfg.test_per_class):
                layers = _sample(cfg, rng, anchors[c], operators[d])
                records.append(FeatureRecord(c, d, SPLIT_TEST, layers))

    bank = FeatureBank(
        m=cfg.m,
        num_layers=cfg.layers,
        records=records,
        task_assignment=assignment,
        class_names={c: f"class_{c}" for c in range(cfg.classes)},
        domain_names={d: f"domain_{d}" for d in range(total_domains)},
        unseen_domains=unseen,
        pooling="synthetic",
    )
    return bank.validate()


def describe(bank):
    """Per-task / per-domain / per-class record counts plus a stats block."""
    per_task = {}
    for t in sorted(bank.task_assignment):
        spec = bank.task_assignment[t]
        per_task[t] = {
            "classes": list(spec.classes),
            "train_domain": spec.domain,
            "train_records": len(select(bank, task=t, split=SPLIT_TRAIN)),
            "test_records": len(select(bank, task=t, split=SPLIT_TEST)),
        }
    per_domain = {
        d: {
            "train": len(select(bank, domain=d, split=SPLIT_TRAIN)),
            "test": len(select(bank, domain=d, split=SPLIT_TEST)),
        }
        for d in bank.domains()
    }
    classes = sorted({spec_c for s in bank.task_assignment.values() for spec_c in s.classes})
    summary = {
        "m": bank.m,
        "layers": bank.num_layers,
        "tasks": bank.num_tasks,
        "total_records": len(bank.records),
        "total_classes": len(classes),
        "total_domains": len(bank.domains()),
        "unseen_domains": list(bank.unseen_domains),
        "per_task": per_task,
        "per_domain": per_domain,
        "empty_test_split": len(select(bank, split=SPLIT_TEST)) == 0,
    }
    return summary
