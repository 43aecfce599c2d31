"""Binary and CSV formats shared across pipeline stages.

Feature bags (.fbag): magic "MTFB", u32 version, u32 n_tokens, u32 dim,
then row-major little-endian f32. Weights (.mtw): magic "MTWT", u32
version, then length-prefixed named blocks (u16 name length + bytes,
u8 rank + u32 dims, f32 payload).
"""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np
import torch

FBAG_MAGIC = b"MTFB"
MTW_MAGIC = b"MTWT"
FORMAT_VERSION = 1


class FileFormatError(ValueError):
    """Bad magic, version, or structure in a binary artifact file."""


def write_fbag(path, features) -> None:
    arr = np.ascontiguousarray(
        features.numpy() if isinstance(features, torch.Tensor) else features,
        dtype="<f4")
    if arr.ndim != 2:
        raise FileFormatError("feature bag must be 2-D")
    with open(path, "wb") as fh:
        fh.write(FBAG_MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_fbag(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FBAG_MAGIC:
            raise FileFormatError(f"{path}: bad magic {magic!r}, expected {FBAG_MAGIC!r}")
        version, n_tokens, dim = struct.unpack("<III", fh.read(12))
        if version != FORMAT_VERSION:
            raise FileFormatError(f"{path}: unsupported version {version}")
        payload = fh.read(4 * n_tokens * dim)
        if len(payload) != 4 * n_tokens * dim:
            raise FileFormatError(f"{path}: truncated payload")
        return np.frombuffer(payload, dtype="<f4").reshape(n_tokens, dim).copy()


def write_mtw(path, named: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MTW_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        for name in sorted(named):
            arr = np.asarray(named[name], dtype="<f4")
            if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
                arr = np.ascontiguousarray(arr)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes())


def read_mtw(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MTW_MAGIC:
            raise FileFormatError(f"{path}: bad magic {magic!r}, expected {MTW_MAGIC!r}")
        version, = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise FileFormatError(f"{path}: unsupported version {version}")
        while True:
            head = fh.read(2)
            if not head:
                break
            name_len, = struct.unpack("<H", head)
            name = fh.read(name_len).decode("utf-8")
            rank, = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(rank))
            count = int(np.prod(shape)) if shape else 1
            payload = fh.read(4 * count)
            if len(payload) != 4 * count:
                raise FileFormatError(f"{path}: truncated block {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return out


def save_state_dict(path, state: dict[str, torch.Tensor]) -> None:
    write_mtw(path, {k: v.detach().numpy() for k, v in state.items()})
    manifest = Path(path).with_suffix(".names.json")
    manifest.write_text(json.dumps(sorted(state), indent=0) + "\n")


def load_state_dict(path) -> dict[str, torch.Tensor]:
    return {k: torch.from_numpy(v) for k, v in read_mtw(path).items()}


def write_metrics_csv(path, rows: list[dict]) -> None:
    """Rows of the standard metric schema: metric,task,site,split,value,seed."""
    fields = ["metric", "task", "site", "split", "value", "seed"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            out = dict(row)
            out["value"] = format_float(out["value"])
            writer.writerow(out)


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["metric", "task", "site", "split", "value", "seed"]
        if reader.fieldnames != expected:
            raise FileFormatError(f"{path}: metric header must be {expected}")
        return list(reader)


def format_float(x) -> str:
    """Stable decimal rendering used everywhere a float reaches a file."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.10g}"


def write_features_csv(path, feature_matrix) -> None:
    d = feature_matrix.x.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "split"] + [f"f{i:03d}" for i in range(d)])
        for pid, split, row in zip(feature_matrix.patient_ids,
                                   feature_matrix.splits, feature_matrix.x):
            writer.writerow([pid, split] + [format_float(v) for v in row])


def read_features_csv(path):
    from .evaluation import FeatureMatrix

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["patient_id", "split"]:
            raise FileFormatError(f"{path}: feature header must start patient_id,split")
        ids, splits, rows = [], [], []
        for rec in reader:
            ids.append(rec[0])
            splits.append(rec[1])
            rows.append([float(v) for v in rec[2:]])
    return FeatureMatrix(patient_ids=ids, x=np.array(rows), splits=splits)
