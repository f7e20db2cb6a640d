"""Offline feature export from pre-trained vision transformers to DGFB banks."""

from .bankio import read_bank_summary, write_bank
from .export import ExportSpec, export, validate_bank
from .manifest import ManifestError, ManifestRow, read_manifest

__all__ = [
    "ExportSpec",
    "ManifestError",
    "ManifestRow",
    "export",
    "read_bank_summary",
    "read_manifest",
    "validate_bank",
    "write_bank",
]
