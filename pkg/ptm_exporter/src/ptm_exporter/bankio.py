"""Standalone DGFB writer and reader.

The bank file is the only thing shared with the downstream engine, so this
module implements the format from scratch rather than importing the engine:

    magic   "DGFB" (4 bytes)
    header  version u16=1, m u32, L u32, record count u64   (LE)
    meta    u32 byte length + canonical UTF-8 JSON
    records class_id u32, domain_id u32, split u8, L*m float32 (LE)

Split codes: 0 = train, 1 = test. Metadata JSON is canonical (sorted keys,
no whitespace) so identical banks serialize to identical bytes.
"""

import json
import struct

import numpy as np

MAGIC = b"DGFB"
VERSION = 1
_HEADER = struct.Struct("<HIIQ")
_REC_HEAD = struct.Struct("<IIB")
_SPLIT_CODE = {"train": 0, "test": 1}
_SPLIT_NAME = {v: k for k, v in _SPLIT_CODE.items()}


class BankFormatError(ValueError):
    pass


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_bank(path, m, num_layers, records, metadata):
    """Write (class_id, domain_id, split, layers) tuples as a DGFB bank.

    ``layers`` must be (num_layers, m); values are stored as little-endian
    float32 exactly as given.
    """
    meta = _canonical(metadata)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_HEADER.pack(VERSION, m, num_layers, len(records)))
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        for class_id, domain_id, split, layers in records:
            arr = np.ascontiguousarray(layers, dtype="<f4")
            if arr.shape != (num_layers, m):
                raise BankFormatError(
                    f"record shape {arr.shape} does not match ({num_layers}, {m})"
                )
            if split not in _SPLIT_CODE:
                raise BankFormatError(f"unknown split {split!r}")
            f.write(_REC_HEAD.pack(class_id, domain_id, _SPLIT_CODE[split]))
            f.write(arr.tobytes())


def read_bank_summary(path):
    """Independent re-read: header, metadata, and per-label record counts.

    Walks every record so truncation and trailing garbage are caught; only
    counts are retained, not the feature payloads.
    """

    def need(f, n, what):
        buf = f.read(n)
        if len(buf) != n:
            raise BankFormatError(f"file ends inside {what} ({len(buf)}/{n} bytes)")
        return buf

    with open(path, "rb") as f:
        if need(f, 4, "magic") != MAGIC:
            raise BankFormatError(f"{path} is not a DGFB bank")
        version, m, num_layers, count = _HEADER.unpack(need(f, _HEADER.size, "header"))
        if version != VERSION:
            raise BankFormatError(f"unsupported DGFB version {version}")
        (meta_len,) = struct.unpack("<I", need(f, 4, "metadata length"))
        metadata = json.loads(need(f, meta_len, "metadata").decode("utf-8"))
        payload = num_layers * m * 4
        by_class, by_domain, by_split = {}, {}, {}
        for i in range(count):
            class_id, domain_id, split_code = _REC_HEAD.unpack(
                need(f, _REC_HEAD.size, f"record {i} header")
            )
            if split_code not in _SPLIT_NAME:
                raise BankFormatError(f"record {i} has unknown split code {split_code}")
            raw = need(f, payload, f"record {i} payload")
            if not np.all(np.isfinite(np.frombuffer(raw, dtype="<f4"))):
                raise BankFormatError(f"record {i} contains non-finite values")
            split = _SPLIT_NAME[split_code]
            by_class[class_id] = by_class.get(class_id, 0) + 1
            by_domain[domain_id] = by_domain.get(domain_id, 0) + 1
            by_split[split] = by_split.get(split, 0) + 1
        if f.read(1):
            raise BankFormatError("trailing bytes after final record")
    return {
        "m": m,
        "num_layers": num_layers,
        "records": count,
        "metadata": metadata,
        "by_class": by_class,
        "by_domain": by_domain,
        "by_split": by_split,
    }
