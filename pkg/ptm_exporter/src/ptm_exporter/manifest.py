"""Dataset manifests: one CSV row per image with its labels.

Required columns: path, class, domain, split. Paths are resolved relative
to the manifest's directory unless absolute.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

REQUIRED_COLUMNS = ("path", "class", "domain", "split")
VALID_SPLITS = ("train", "test")


class ManifestError(ValueError):
    pass


@dataclass
class ManifestRow:
    path: Path
    class_id: int
    domain_id: int
    split: str


def read_manifest(path):
    """Parse and validate a manifest CSV; returns rows in file order."""
    path = Path(path)
    root = path.parent
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise ManifestError(f"{path} is empty")
        missing = [c for c in REQUIRED_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ManifestError(f"{path} lacks required columns: {missing}")
        for lineno, row in enumerate(reader, start=2):
            try:
                class_id = int(row["class"])
                domain_id = int(row["domain"])
            except (TypeError, ValueError):
                raise ManifestError(
                    f"{path}:{lineno}: class and domain must be integers"
                ) from None
            split = (row["split"] or "").strip()
            if split not in VALID_SPLITS:
                raise ManifestError(
                    f"{path}:{lineno}: split must be one of {VALID_SPLITS}, got {split!r}"
                )
            img = Path(row["path"])
            if not img.is_absolute():
                img = root / img
            if not img.exists():
                raise ManifestError(f"{path}:{lineno}: image {img} does not exist")
            rows.append(ManifestRow(img, class_id, domain_id, split))
    if not rows:
        raise ManifestError(f"{path} has a header but no rows")
    return rows
