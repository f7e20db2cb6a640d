"""The one-shot export pipeline: manifest in, DGFB bank out."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import backbone as bb
from .bankio import BankFormatError, read_bank_summary, write_bank
from .manifest import ManifestError, read_manifest


@dataclass
class ExportSpec:
    manifest: str
    out: str
    task_assignment: list  # [{"task": 1, "classes": [...], "domain": 0}, ...]
    model_id: str = "vit_b_16"
    weights: str = "pretrained"  # or "random" (seeded) for offline use
    pooling: str = "cls_token"
    image_size: int = 224
    batch_size: int = 8
    seed: int = 0
    unseen_domains: tuple = ()

    def __post_init__(self):
        if self.pooling not in bb.POOLINGS:
            raise ValueError(f"pooling must be one of {bb.POOLINGS}")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not self.task_assignment:
            raise ValueError("task assignment must not be empty")
        seen = set()
        for entry in self.task_assignment:
            for key in ("task", "classes", "domain"):
                if key not in entry:
                    raise ValueError(f"task entry missing {key!r}: {entry}")
            overlap = seen & set(entry["classes"])
            if overlap:
                raise ValueError(f"classes {sorted(overlap)} assigned to two tasks")
            seen |= set(entry["classes"])

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            doc = json.load(f)
        doc["unseen_domains"] = tuple(doc.get("unseen_domains", ()))
        return cls(**doc)


def _metadata(spec, rows):
    classes = sorted({r.class_id for r in rows})
    domains = sorted({r.domain_id for r in rows})
    return {
        "class_names": {str(c): f"class_{c}" for c in classes},
        "domain_names": {str(d): f"domain_{d}" for d in domains},
        "task_assignment": [
            {
                "task": entry["task"],
                "classes": list(entry["classes"]),
                "domain": entry["domain"],
            }
            for entry in sorted(spec.task_assignment, key=lambda e: e["task"])
        ],
        "unseen_domains": list(spec.unseen_domains),
        "pooling": spec.pooling,
    }


def export(spec):
    """Forward every manifest image once and write the feature bank.

    Deterministic for a fixed spec: no augmentation, eval-mode model, and
    a canonical serialization. Returns the written summary.
    """
    rows = read_manifest(spec.manifest)
    known = {c for entry in spec.task_assignment for c in entry["classes"]}
    for r in rows:
        if r.class_id not in known:
            raise ManifestError(f"class {r.class_id} appears in no task")
    model = bb.load_backbone(spec.model_id, weights=spec.weights, seed=spec.seed)
    num_layers, m = bb.backbone_dims(model)

    records = []
    for start in range(0, len(rows), spec.batch_size):
        chunk = rows[start : start + spec.batch_size]
        batch = torch.stack([bb.preprocess(r.path, spec.image_size) for r in chunk])
        feats = bb.extract_layers(model, batch, spec.pooling)
        if feats.shape[1:] != (num_layers, m):
            raise BankFormatError(
                f"captured shape {feats.shape[1:]} does not match "
                f"backbone dims ({num_layers}, {m})"
            )
        for r, stack in zip(chunk, feats):
            records.append((r.class_id, r.domain_id, r.split, stack))

    out = Path(spec.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_bank(out, m, num_layers, records, _metadata(spec, rows))
    return read_bank_summary(out)


def validate_bank(path):
    """Re-read a bank with the independent reader and report its contents."""
    summary = read_bank_summary(path)
    meta = summary["metadata"]
    report = {
        "path": str(path),
        "m": summary["m"],
        "num_layers": summary["num_layers"],
        "records": summary["records"],
        "records_per_class": {str(k): v for k, v in sorted(summary["by_class"].items())},
        "records_per_domain": {str(k): v for k, v in sorted(summary["by_domain"].items())},
        "records_per_split": summary["by_split"],
        "tasks": len(meta.get("task_assignment", [])),
        "pooling": meta.get("pooling", ""),
    }
    declared = {
        c for entry in meta.get("task_assignment", []) for c in entry["classes"]
    }
    undeclared = sorted(set(summary["by_class"]) - declared)
    if undeclared:
        raise BankFormatError(f"classes {undeclared} appear in no task")
    return report
