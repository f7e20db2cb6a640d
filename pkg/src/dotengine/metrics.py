"""Evaluation metrics over the (task, domain, checkpoint) accuracy tensor.

Cells a[t, d, i] hold the accuracy of task t on domain d measured after
task i finished training; cells with i < t are undefined. Seen domains S
exclude the optional held-out domain, which feeds only the unseen-domain
metrics. Undefined metrics raise ProtocolError rather than returning
sentinels.
"""

import json

import numpy as np


class ProtocolError(ValueError):
    pass


class AccuracyTensor:
    """a_{t,d}^{(i)} values plus the task -> training-domain map.

    ``domains`` lists the seen domains S in storage order; the held-out
    domain, when present, is stored as the final extra column.
    """

    def __init__(self, num_tasks, domains, train_domains, unseen_domain=None):
        if len(train_domains) != num_tasks:
            raise ProtocolError("need one training domain per task")
        for d in train_domains:
            if d not in domains:
                raise ProtocolError(f"training domain {d} missing from domain set")
        if unseen_domain is not None and unseen_domain in domains:
            raise ProtocolError("held-out domain must not appear in the seen set")
        self.num_tasks = num_tasks
        self.domains = list(domains)
        self.train_domains = list(train_domains)
        self.unseen_domain = unseen_domain
        cols = len(self.domains) + (1 if unseen_domain is not None else 0)
        self.values = np.full((num_tasks, cols, num_tasks), np.nan)

    def _col(self, domain):
        if domain == self.unseen_domain:
            return len(self.domains)
        try:
            return self.domains.index(domain)
        except ValueError:
            raise ProtocolError(f"unknown domain {domain}") from None

    def record(self, task, domain, checkpoint, accuracy):
        """Store a_{task,domain}^{(checkpoint)}; 1-based task/checkpoint."""
        if not 1 <= task <= checkpoint <= self.num_tasks:
            raise ProtocolError(
                f"cell (task={task}, checkpoint={checkpoint}) is undefined"
            )
        if not 0.0 <= accuracy <= 1.0:
            raise ProtocolError(f"accuracy {accuracy} outside [0, 1]")
        self.values[task - 1, self._col(domain), checkpoint - 1] = accuracy

    def get(self, task, domain, checkpoint):
        v = self.values[task - 1, self._col(domain), checkpoint - 1]
        if np.isnan(v):
            raise ProtocolError(
                f"missing cell (task={task}, domain={domain}, checkpoint={checkpoint})"
            )
        return float(v)

    def _require_final(self, domains):
        for t in range(1, self.num_tasks + 1):
            for d in domains:
                self.get(t, d, self.num_tasks)

    def _require_history(self, domains):
        for t in range(1, self.num_tasks + 1):
            for d in domains:
                for i in range(t, self.num_tasks + 1):
                    self.get(t, d, i)

    def to_json(self, extra=None):
        doc = {
            "num_tasks": self.num_tasks,
            "domains": self.domains,
            "train_domains": self.train_domains,
            "unseen_domain": self.unseen_domain,
            "values": [
                [[None if np.isnan(v) else v for v in row] for row in task_block]
                for task_block in self.values.tolist()
            ],
        }
        if extra:
            doc.update(extra)
        return doc

    @classmethod
    def from_json(cls, doc):
        tensor = cls(
            doc["num_tasks"], doc["domains"], doc["train_domains"], doc["unseen_domain"]
        )
        arr = np.array(
            [
                [[np.nan if v is None else v for v in row] for row in task_block]
                for task_block in doc["values"]
            ],
            dtype=np.float64,
        )
        if arr.shape != tensor.values.shape:
            raise ProtocolError(f"values shape {arr.shape} != {tensor.values.shape}")
        tensor.values = arr
        return tensor


def a_all(tensor):
    """Mean final accuracy over all tasks and seen domains."""
    tensor._require_final(tensor.domains)
    T = tensor.num_tasks
    total = 0.0
    for t in range(1, T + 1):
        total += sum(tensor.get(t, d, T) for d in tensor.domains) / len(tensor.domains)
    return total / T


def a_in(tensor):
    """Mean final accuracy of each task on its own training domain."""
    T = tensor.num_tasks
    return sum(tensor.get(t, tensor.train_domains[t - 1], T) for t in range(1, T + 1)) / T


def _off_domains(tensor, t):
    others = [d for d in tensor.domains if d != tensor.train_domains[t - 1]]
    if not others:
        raise ProtocolError(f"task {t} has no off-training domains in the seen set")
    return others


def a_out(tensor):
    """Mean final accuracy of each task averaged over its other seen domains."""
    T = tensor.num_tasks
    total = 0.0
    for t in range(1, T + 1):
        others = _off_domains(tensor, t)
        total += sum(tensor.get(t, d, T) for d in others) / len(others)
    return total / T


def w_out(tensor):
    """Mean over tasks of the worst off-training-domain final accuracy."""
    T = tensor.num_tasks
    total = 0.0
    for t in range(1, T + 1):
        total += min(tensor.get(t, d, T) for d in _off_domains(tensor, t))
    return total / T


def a_un(tensor):
    """Mean final accuracy on the completely held-out domain."""
    if tensor.unseen_domain is None:
        raise ProtocolError("no held-out domain recorded")
    T = tensor.num_tasks
    return sum(tensor.get(t, tensor.unseen_domain, T) for t in range(1, T + 1)) / T


def _forgetting(tensor, t, d):
    T = tensor.num_tasks
    history = [tensor.get(t, d, i) for i in range(t, T + 1)]
    return max(history) - history[-1]


def f_all(tensor):
    """Mean over tasks and seen domains of (peak accuracy - final accuracy)."""
    tensor._require_history(tensor.domains)
    T = tensor.num_tasks
    total = 0.0
    for t in range(1, T + 1):
        total += sum(_forgetting(tensor, t, d) for d in tensor.domains) / len(tensor.domains)
    return total / T


def f_un(tensor):
    if tensor.unseen_domain is None:
        raise ProtocolError("no held-out domain recorded")
    tensor._require_history([tensor.unseen_domain])
    T = tensor.num_tasks
    return sum(_forgetting(tensor, t, tensor.unseen_domain) for t in range(1, T + 1)) / T


METRIC_FUNCS = {
    "a_all": a_all,
    "a_in": a_in,
    "a_out": a_out,
    "w_out": w_out,
    "a_un": a_un,
    "f_all": f_all,
    "f_un": f_un,
}


def compute_all(tensor):
    """Every metric that is defined for this tensor, as a plain dict."""
    out = {}
    for name, fn in METRIC_FUNCS.items():
        try:
            out[name] = fn(tensor)
        except ProtocolError:
            if name in ("a_un", "f_un") and tensor.unseen_domain is None:
                continue
            if name in ("a_out", "w_out") and len(tensor.domains) < 2:
                continue
            raise
    return out


def report_table(rows, headers):
    """Aligned-text table; rows are dicts keyed by the header names."""
    widths = [
        max(len(h), *(len(_fmt(r.get(h, ""))) for r in rows)) if rows else len(h)
        for h in headers
    ]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(headers, widths)),
        "  ".join("-" * w for w in widths),
    ]
    for r in rows:
        lines.append("  ".join(_fmt(r.get(h, "")).ljust(w) for h, w in zip(headers, widths)))
    return "\n".join(lines)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def save_tensor(tensor, path, extra=None):
    with open(path, "w") as f:
        json.dump(tensor.to_json(extra), f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def load_tensor(path):
    with open(path) as f:
        return AccuracyTensor.from_json(json.load(f))
