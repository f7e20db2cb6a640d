"""Layer-wise feature records and the DGFB binary bank format.

A bank is the engine's sole input: per-sample layer stacks (L rows of m
float features), each tagged with class, domain, and split, plus a task
assignment that fully determines one continual-learning episode. On disk the
format is bit-exact so identical banks serialize to identical bytes:

    magic   "DGFB" (4 bytes)
    header  version u16=1, m u32, L u32, record count u64   (18 bytes, LE)
    meta    u32 byte length + canonical UTF-8 JSON
    records class_id u32, domain_id u32, split u8, L*m float32 (LE)

Features are float32 on disk and widened to float64 in memory.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"DGFB"
VERSION = 1

SPLIT_TRAIN = "train"
SPLIT_TEST = "test"
_SPLIT_CODE = {SPLIT_TRAIN: 0, SPLIT_TEST: 1}
_SPLIT_NAME = {v: k for k, v in _SPLIT_CODE.items()}

_HEADER = struct.Struct("<HIIQ")
_REC_HEAD = struct.Struct("<IIB")


class BankError(ValueError):
    """Base class for bank format / invariant failures."""


class BadMagicError(BankError):
    pass


class VersionMismatchError(BankError):
    pass


class TruncatedBankError(BankError):
    pass


class InvariantError(BankError):
    """The bank violates a protocol invariant (disjoint tasks, domains, shapes)."""


@dataclass
class FeatureRecord:
    """One sample: an L x m stack of per-layer features with labels.

    Row l-1 holds the layer-l feature vector; the final row is the
    final-layer (semantic) feature.
    """

    class_id: int
    domain_id: int
    split: str
    layers: np.ndarray

    @property
    def final_layer(self):
        return self.layers[-1]


@dataclass
class TaskSpec:
    """Classes and the single training domain of one task."""

    classes: tuple
    domain: int


@dataclass
class FeatureBank:
    m: int
    num_layers: int
    records: list
    task_assignment: dict  # task index (1-based) -> TaskSpec
    class_names: dict = field(default_factory=dict)
    domain_names: dict = field(default_factory=dict)
    unseen_domains: tuple = ()
    pooling: str = ""

    @property
    def num_tasks(self):
        return len(self.task_assignment)

    def task_of_class(self, class_id):
        for t, spec in self.task_assignment.items():
            if class_id in spec.classes:
                return t
        raise InvariantError(f"class {class_id} belongs to no task")

    def domains(self):
        """All domains: training domains plus flagged held-out ones."""
        seen = {spec.domain for spec in self.task_assignment.values()}
        return sorted(seen | set(self.unseen_domains))

    def training_domains(self):
        return sorted({spec.domain for spec in self.task_assignment.values()})

    def validate(self):
        """Re-check every protocol invariant; raises InvariantError."""
        class_to_task = {}
        for t, spec in self.task_assignment.items():
            for c in spec.classes:
                if c in class_to_task:
                    raise InvariantError(
                        f"class {c} appears in tasks {class_to_task[c]} and {t}; "
                        "task label spaces must be disjoint"
                    )
                class_to_task[c] = t
        allowed_domains = set(self.domains())
        for i, rec in enumerate(self.records):
            if rec.layers.shape != (self.num_layers, self.m):
                raise InvariantError(
                    f"record {i} layer stack has shape {rec.layers.shape}, "
                    f"expected ({self.num_layers}, {self.m})"
                )
            if not np.all(np.isfinite(rec.layers)):
                raise InvariantError(f"record {i} contains non-finite entries")
            if rec.split not in _SPLIT_CODE:
                raise InvariantError(f"record {i} has unknown split {rec.split!r}")
            if rec.class_id not in class_to_task:
                raise InvariantError(f"record {i} class {rec.class_id} belongs to no task")
            if rec.domain_id not in allowed_domains:
                raise InvariantError(
                    f"record {i} domain {rec.domain_id} is neither a training "
                    "domain nor flagged held-out"
                )
            if rec.split == SPLIT_TRAIN:
                task = class_to_task[rec.class_id]
                expected = self.task_assignment[task].domain
                if rec.domain_id != expected:
                    raise InvariantError(
                        f"train record {i} of task {task} has domain "
                        f"{rec.domain_id}, expected {expected}"
                    )
                if rec.domain_id in self.unseen_domains:
                    raise InvariantError(
                        f"train record {i} uses held-out domain {rec.domain_id}"
                    )
        return self


class RecordView:
    """Non-copying, order-stable filtered view over a bank's records."""

    def __init__(self, bank, indices):
        self.bank = bank
        self.indices = list(indices)

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        for i in self.indices:
            yield self.bank.records[i]

    def __getitem__(self, k):
        return self.bank.records[self.indices[k]]

    def final_layers(self):
        """Stacked final-layer features of the view, shape (n, m)."""
        return np.stack([r.layers[-1] for r in self]) if self.indices else np.empty(
            (0, self.bank.m)
        )

    def layer_stacks(self):
        return [r.layers for r in self]


def select(bank, task=None, class_id=None, domain=None, split=None):
    """Filter records by task/class/domain/split; empty predicate keeps all."""
    task_classes = None
    if task is not None:
        task_classes = set(bank.task_assignment[task].classes)
    indices = []
    for i, rec in enumerate(bank.records):
        if task_classes is not None and rec.class_id not in task_classes:
            continue
        if class_id is not None and rec.class_id != class_id:
            continue
        if domain is not None and rec.domain_id != domain:
            continue
        if split is not None and rec.split != split:
            continue
        indices.append(i)
    return RecordView(bank, indices)


def _metadata_dict(bank):
    return {
        "class_names": {str(k): v for k, v in sorted(bank.class_names.items())},
        "domain_names": {str(k): v for k, v in sorted(bank.domain_names.items())},
        "task_assignment": [
            {"task": t, "classes": list(spec.classes), "domain": spec.domain}
            for t, spec in sorted(bank.task_assignment.items())
        ],
        "unseen_domains": list(bank.unseen_domains),
        "pooling": bank.pooling,
    }


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_bank(bank, path):
    """Serialize a bank; refuses to write if invariants fail.

    Output is byte-identical for identical input (canonical JSON metadata,
    fixed little-endian layout).
    """
    bank.validate()
    meta = _canonical_json(_metadata_dict(bank))
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_HEADER.pack(VERSION, bank.m, bank.num_layers, len(bank.records)))
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        for rec in bank.records:
            f.write(_REC_HEAD.pack(rec.class_id, rec.domain_id, _SPLIT_CODE[rec.split]))
            f.write(np.ascontiguousarray(rec.layers, dtype="<f4").tobytes())


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedBankError(f"file ends inside {what} ({len(buf)}/{n} bytes)")
    return buf


def read_bank(path):
    """Read and validate a DGFB bank, widening features to float64."""
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise BadMagicError(f"{path} is not a DGFB bank")
        version, m, num_layers, count = _HEADER.unpack(_read_exact(f, _HEADER.size, "header"))
        if version != VERSION:
            raise VersionMismatchError(f"unsupported DGFB version {version}")
        (meta_len,) = struct.unpack("<I", _read_exact(f, 4, "metadata length"))
        meta = json.loads(_read_exact(f, meta_len, "metadata").decode("utf-8"))
        records = []
        payload = num_layers * m * 4
        for i in range(count):
            class_id, domain_id, split_code = _REC_HEAD.unpack(
                _read_exact(f, _REC_HEAD.size, f"record {i} header")
            )
            raw = _read_exact(f, payload, f"record {i} payload")
            if split_code not in _SPLIT_NAME:
                raise InvariantError(f"record {i} has unknown split code {split_code}")
            layers = (
                np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(num_layers, m)
            )
            records.append(
                FeatureRecord(class_id, domain_id, _SPLIT_NAME[split_code], layers)
            )
        if f.read(1):
            raise InvariantError("trailing bytes after final record")
    bank = FeatureBank(
        m=m,
        num_layers=num_layers,
        records=records,
        task_assignment={
            entry["task"]: TaskSpec(tuple(entry["classes"]), entry["domain"])
            for entry in meta["task_assignment"]
        },
        class_names={int(k): v for k, v in meta.get("class_names", {}).items()},
        domain_names={int(k): v for k, v in meta.get("domain_names", {}).items()},
        unseen_domains=tuple(meta.get("unseen_domains", [])),
        pooling=meta.get("pooling", ""),
    )
    return bank.validate()
