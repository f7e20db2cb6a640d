"""Episode orchestration over a task stream.

Phase 1 trains the incremental output head on the current task's precomputed
features and accumulates the class Gaussians and domain prototypes. Phase 2
trains a freshly initialized transformation module against the accumulated
memories. Phase 3 re-aligns the head on sampled plus synthesized features,
after which the transformation parameters are discarded. By default phases
2-3 rerun after every task; a final-only schedule is available.

The episode state holds only distilled statistics and the head: raw features
of finished tasks are never retained.
"""

from dataclasses import dataclass, field, fields

import numpy as np

from . import diffmath as dm
from . import distributions as dist
from . import objectives as obj
from .dot_transform import DoTConfig, dot_forward, dot_forward_value, init_parameters
from .featurebank import SPLIT_TEST, SPLIT_TRAIN, select
from .metrics import AccuracyTensor


class TaskOrderError(RuntimeError):
    pass


class MissingRecordsError(RuntimeError):
    pass


@dataclass
class EpisodeConfig:
    """Hyperparameters for one episode; defaults follow the reference setup."""

    e_dot: int = 10
    e_oa: int = 3
    k_prototypes: int = 16
    lam: float = 0.5
    tau: float = 0.1
    heads: int = 4
    m_proj: int = 0
    cov_mode: str = "diagonal"
    seed: int = 0
    phase1_epochs: int = 20
    lr: float = 1e-3
    dot_lr: float = 1e-3  # phase-2 learning rate; 0 falls back to lr
    dot_weight_decay: float = 0.0
    no_dot: bool = False
    align_schedule: str = "per_task"  # or "final_only"
    scale: str = "per_head"
    activation: str = "relu"
    normalize_projections: bool = True
    mean_over_positives: bool = False
    prototype_selection: str = "knn"
    pool_per_class: int = 2
    anchors_per_pair: int = 1
    align_samples: int = 1  # per class per alignment step

    def __post_init__(self):
        if self.align_schedule not in ("per_task", "final_only"):
            raise ValueError(f"unknown align schedule {self.align_schedule!r}")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)


class OutputHead:
    """Linear head whose rows grow as tasks arrive; no placeholder logits."""

    def __init__(self, m):
        self.m = m
        self.weight = np.zeros((0, m))
        self.bias = np.zeros((0,))
        self.class_ids = []

    @property
    def num_classes(self):
        return len(self.class_ids)

    def row_of(self, class_id):
        return self.class_ids.index(class_id)

    def append_classes(self, class_ids):
        for c in class_ids:
            if c in self.class_ids:
                raise TaskOrderError(f"class {c} already has a head row")
            self.class_ids.append(c)
        n_new = len(class_ids)
        self.weight = np.vstack([self.weight, np.zeros((n_new, self.m))])
        self.bias = np.concatenate([self.bias, np.zeros(n_new)])

    def logits(self, features):
        return features @ self.weight.T + self.bias

    def predict(self, features):
        """Predicted global class ids for (n, m) features."""
        return np.asarray(self.class_ids)[np.argmax(self.logits(features), axis=1)]


@dataclass
class EpisodeState:
    config: EpisodeConfig
    m: int
    num_layers: int
    head: OutputHead
    gaussians: dict = field(default_factory=dict)  # class -> ClassGaussian
    prototypes: dict = field(default_factory=dict)  # domain -> DomainPrototypeSet
    class_domains: dict = field(default_factory=dict)  # class -> its task's domain
    cursor: int = 0
    rng: np.random.Generator = None

    @classmethod
    def fresh(cls, bank, config):
        return cls(
            config=config,
            m=bank.m,
            num_layers=bank.num_layers,
            head=OutputHead(bank.m),
            rng=np.random.default_rng(config.seed),
        )

    def memory_floats(self):
        """Retained historical information, in floats (the CL budget)."""
        return dist.semantic_store_floats(self.gaussians.values()) + dist.domain_store_floats(
            self.prototypes.values()
        )


def _train_linear(features, labels, n_classes, epochs, lr, init_w=None, init_b=None):
    """Full-batch cross-entropy training of a linear classifier with Adam."""
    m = features.shape[1]
    w = dm.parameter(init_w if init_w is not None else np.zeros((n_classes, m)), name="w")
    b = dm.parameter(init_b if init_b is not None else np.zeros(n_classes), name="b")
    state = obj.OptimizerState(lr_max=lr, epoch_span=epochs)
    for epoch in range(epochs):
        state.epoch = epoch
        dm.zero_grads([w, b])
        loss = obj.cross_entropy(obj.head_logits(w, b, features), labels)
        grads = dm.backward(loss)
        obj.step([w, b], grads, state)
    return w.data, b.data


def learn_task(state, bank, t):
    """Phase 1 for task t: head rows, class Gaussians, domain prototypes."""
    if t != state.cursor + 1:
        raise TaskOrderError(f"expected task {state.cursor + 1}, got {t}")
    if t not in bank.task_assignment:
        raise MissingRecordsError(f"bank defines no task {t}")
    spec = bank.task_assignment[t]
    train = select(bank, task=t, split=SPLIT_TRAIN)
    if len(train) == 0:
        raise MissingRecordsError(f"task {t} has no training records")

    cfg = state.config
    class_list = sorted(spec.classes)
    state.head.append_classes(class_list)

    # head training over this task's classes only (backbone frozen upstream)
    feats = train.final_layers()
    local_label = {c: i for i, c in enumerate(class_list)}
    labels = np.array([local_label[r.class_id] for r in train])
    w, b = _train_linear(feats, labels, len(class_list), cfg.phase1_epochs, cfg.lr)
    rows = [state.head.row_of(c) for c in class_list]
    state.head.weight[rows] = w
    state.head.bias[rows] = b

    for c in class_list:
        class_feats = select(bank, class_id=c, split=SPLIT_TRAIN).final_layers()
        state.gaussians[c] = dist.fit_class_gaussian(class_feats, c, mode=cfg.cov_mode)
        state.class_domains[c] = spec.domain

    candidates = train.layer_stacks()
    if spec.domain in state.prototypes:
        # revisited domain: re-select over retained prototypes plus new stacks
        candidates = state.prototypes[spec.domain].prototypes + candidates
    state.prototypes[spec.domain] = dist.select_prototypes(
        candidates, spec.domain, cfg.k_prototypes, state.rng, mode=cfg.prototype_selection
    )
    state.cursor = t
    return state


def _sample_pool(state, n_per_class):
    feats, classes, domains = [], [], []
    for c in sorted(state.gaussians):
        draws = dist.sample_class(state.gaussians[c], n_per_class, state.rng)
        feats.append(draws)
        classes.extend([c] * n_per_class)
        domains.extend([state.class_domains[c]] * n_per_class)
    return np.vstack(feats), np.array(classes), np.array(domains)


def _pairs(state):
    return [(d, c) for d in sorted(state.prototypes) for c in sorted(state.gaussians)]


def train_dot(state):
    """Phase 2: freshly initialized parameters trained with the combined loss.

    Returns the trained parameters and the per-epoch mean loss trace.
    """
    if len(state.gaussians) < 2:
        raise MissingRecordsError("domain transformation needs at least 2 classes")
    if not state.prototypes:
        raise MissingRecordsError("domain transformation needs at least 1 domain")
    cfg = state.config
    params = init_parameters(
        DoTConfig(
            state.m,
            heads=cfg.heads,
            m_proj=cfg.m_proj,
            activation=cfg.activation,
            scale=cfg.scale,
        ),
        state.rng,
    )
    opt = obj.OptimizerState(
        lr_max=cfg.dot_lr or cfg.lr,
        epoch_span=cfg.e_dot,
        weight_decay=cfg.dot_weight_decay,
    )
    trace = []
    pairs = _pairs(state)
    for epoch in range(cfg.e_dot):
        opt.epoch = epoch
        order = state.rng.permutation(len(pairs))
        losses = []
        for idx in order:
            d, c = pairs[idx]
            rs = dist.sample_class(state.gaussians[c], cfg.anchors_per_pair, state.rng)
            for r in rs:
                anchor = dot_forward(
                    params, r, dist.sample_domain(state.prototypes[d], state.rng)
                )
                pool, pool_c, pool_d = _sample_pool(state, cfg.pool_per_class)
                batch = obj.LossBatch(
                    anchors=[anchor],
                    anchor_classes=[c],
                    anchor_domains=[d],
                    pool=pool,
                    pool_classes=pool_c,
                    pool_domains=pool_d,
                    tau=cfg.tau,
                    lam=cfg.lam,
                )
                loss = obj.loss_dot(
                    batch, params, cfg.normalize_projections, cfg.mean_over_positives
                )
                dm.zero_grads(params.trainables())
                grads = dm.backward(loss)
                obj.step(params.trainables(), grads, opt)
                losses.append(float(loss.data))
        trace.append(float(np.mean(losses)))
    return params, trace


def align_head(state, dot_params=None):
    """Phase 3: retrain the head on sampled and (optionally) pseudo features.

    Every epoch walks all (domain, class) pairs in shuffled order. Each step
    draws fresh features for the pair's class and, when transformation
    parameters are given, maps them onto the pair's domain. Without them the
    loss keeps only its first cross-entropy term: pure class-Gaussian replay
    alignment.
    """
    cfg = state.config
    head = state.head
    w = dm.parameter(head.weight, name="head_w")
    b = dm.parameter(head.bias, name="head_b")
    opt = obj.OptimizerState(lr_max=cfg.lr, epoch_span=cfg.e_oa)
    row = {c: head.row_of(c) for c in state.gaussians}
    pairs = _pairs(state)
    for epoch in range(cfg.e_oa):
        opt.epoch = epoch
        for idx in state.rng.permutation(len(pairs)):
            d, c = pairs[idx]
            sampled = dist.sample_class(state.gaussians[c], cfg.align_samples, state.rng)
            labels = np.repeat(row[c], cfg.align_samples)
            dm.zero_grads([w, b])
            if dot_params is None:
                loss = obj.cross_entropy(obj.head_logits(w, b, sampled), labels)
            else:
                stack = dist.sample_domain(state.prototypes[d], state.rng)
                pseudo = np.stack(
                    [dot_forward_value(dot_params, r, stack) for r in sampled]
                )
                loss = obj.loss_oa(w, b, sampled, labels, pseudo, labels)
            grads = dm.backward(loss)
            obj.step([w, b], grads, opt)
    head.weight = w.data
    head.bias = b.data
    return head


def evaluate_checkpoint(state, bank, tensor, checkpoint):
    """Class-balanced accuracy of every seen task on every bank domain."""
    head = state.head
    for t in range(1, state.cursor + 1):
        spec = bank.task_assignment[t]
        for d in bank.domains():
            per_class = []
            for c in spec.classes:
                view = select(bank, class_id=c, domain=d, split=SPLIT_TEST)
                if len(view) == 0:
                    raise MissingRecordsError(
                        f"no test records for class {c} in domain {d}"
                    )
                pred = head.predict(view.final_layers())
                per_class.append(float(np.mean(pred == c)))
            tensor.record(t, d, checkpoint, float(np.mean(per_class)))
    return tensor


def run_episode(bank, config):
    """Run the full task stream and collect the accuracy tensor."""
    bank.validate()
    state = EpisodeState.fresh(bank, config)
    unseen = bank.unseen_domains[0] if bank.unseen_domains else None
    tensor = AccuracyTensor(
        num_tasks=bank.num_tasks,
        domains=bank.training_domains(),
        train_domains=[bank.task_assignment[t].domain for t in sorted(bank.task_assignment)],
        unseen_domain=unseen,
    )
    total = bank.num_tasks
    for t in range(1, total + 1):
        learn_task(state, bank, t)
        align_now = config.align_schedule == "per_task" or t == total
        if align_now:
            dot_params = None
            if not config.no_dot and len(state.gaussians) >= 2:
                dot_params, _ = train_dot(state)
            align_head(state, dot_params)
            # transformation parameters are discarded here by design
        evaluate_checkpoint(state, bank, tensor, t)
    return state, tensor
