"""Model files, dataset ingestion (IDX, synthetic) and result emission.

Weights container (UTF-8 JSON, version 1)::

    {
      "digest": "sha256:<hex>",
      "format": "attrcert-weights",
      "layers": [
        {"activation": "relu", "bias": "<b64>", "in": 64, "out": 32, "weight": "<b64>"},
        ...
      ],
      "softplus_beta": 1.0,
      "version": 1
    }

``weight`` and ``bias`` are base64 of little-endian float64 values in
row-major (out, in) order. The digest is SHA-256 over the canonical JSON
(sorted keys, no whitespace) of the document without its ``digest`` key.
"""
from __future__ import annotations

import base64
import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import substream
from .model import ACTIVATIONS, Dataset, Layer, ModelWeights, StructureError

__all__ = [
    "FORMAT_NAME",
    "FORMAT_VERSION",
    "ModelLoadError",
    "IdxParseError",
    "ResultRow",
    "RESULT_FIELDS",
    "model_to_text",
    "model_from_text",
    "model_digest",
    "save_model",
    "load_model",
    "load_idx",
    "write_table",
    "parse_idx",
    "synth_dataset",
    "emit_results",
    "read_results",
    "format_float",
]

FORMAT_NAME = "attrcert-weights"
FORMAT_VERSION = 1
IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class ModelLoadError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class IdxParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _b64(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _canonical(body: dict) -> bytes:
    return json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")


def model_to_text(w: ModelWeights) -> str:
    body = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "softplus_beta": float(w.softplus_beta),
        "layers": [
            {
                "in": int(layer.weight.shape[1]),
                "out": int(layer.weight.shape[0]),
                "activation": layer.activation,
                "weight": _b64(layer.weight),
                "bias": _b64(layer.bias),
            }
            for layer in w.layers
        ],
    }
    doc = dict(body, digest="sha256:" + hashlib.sha256(_canonical(body)).hexdigest())
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def model_digest(w: ModelWeights) -> str:
    return json.loads(model_to_text(w))["digest"]


def _decode(field: str, text, count: int) -> np.ndarray:
    if not isinstance(text, str):
        raise ModelLoadError(field, "expected a base64 string")
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except (ValueError, UnicodeEncodeError) as exc:
        raise ModelLoadError(field, f"invalid base64 ({exc})") from None
    if len(raw) != 8 * count:
        raise ModelLoadError(field, f"expected {8 * count} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def model_from_text(text: str) -> ModelWeights:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelLoadError("container", f"malformed or truncated JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ModelLoadError("container", "top level must be an object")
    if doc.get("format") != FORMAT_NAME:
        raise ModelLoadError("format", f"expected {FORMAT_NAME!r}, found {doc.get('format')!r}")
    if doc.get("version") != FORMAT_VERSION:
        raise ModelLoadError("version", f"unsupported version {doc.get('version')!r}, expected {FORMAT_VERSION}")
    digest = doc.pop("digest", None)
    if not isinstance(digest, str):
        raise ModelLoadError("digest", "missing")
    expected = "sha256:" + hashlib.sha256(_canonical(doc)).hexdigest()
    if digest != expected:
        raise ModelLoadError("digest", f"digest mismatch (file says {digest}, content hashes to {expected})")
    beta = doc.get("softplus_beta")
    if not isinstance(beta, (int, float)) or not beta > 0:
        raise ModelLoadError("softplus_beta", f"must be a positive number, found {beta!r}")
    layers_doc = doc.get("layers")
    if not isinstance(layers_doc, list) or not layers_doc:
        raise ModelLoadError("layers", "must be a nonempty list")
    layers = []
    for k, spec in enumerate(layers_doc):
        prefix = f"layers[{k}]"
        if not isinstance(spec, dict):
            raise ModelLoadError(prefix, "must be an object")
        n_in, n_out = spec.get("in"), spec.get("out")
        if not (isinstance(n_in, int) and isinstance(n_out, int) and n_in > 0 and n_out > 0):
            raise ModelLoadError(f"{prefix}.in/out", "must be positive integers")
        act = spec.get("activation")
        if act not in ACTIVATIONS:
            raise ModelLoadError(f"{prefix}.activation", f"unknown activation {act!r}")
        weight = _decode(f"{prefix}.weight", spec.get("weight"), n_in * n_out).reshape(n_out, n_in)
        bias = _decode(f"{prefix}.bias", spec.get("bias"), n_out)
        try:
            layers.append(Layer(weight, bias, act))
        except StructureError as exc:
            raise ModelLoadError(prefix, str(exc)) from None
    try:
        return ModelWeights(layers, float(beta))
    except StructureError as exc:
        raise ModelLoadError("layers", str(exc)) from None


def save_model(w: ModelWeights, path) -> None:
    Path(path).write_text(model_to_text(w), encoding="utf-8")


def load_model(path) -> ModelWeights:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ModelLoadError("container", f"not UTF-8 text ({exc})") from None
    return model_from_text(text)


def _parse_idx_header(buf: bytes, magic: int, what: str) -> tuple[tuple[int, ...], int]:
    if len(buf) < 4:
        raise IdxParseError(f"truncated {what} header", len(buf))
    found = struct.unpack_from(">I", buf, 0)[0]
    if found != magic:
        raise IdxParseError(f"expected {what} magic 0x{magic:08x}, found 0x{found:08x}", 0)
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(buf) < end:
        raise IdxParseError(f"truncated {what} dimension sizes", len(buf))
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    return dims, end


def parse_idx(image_bytes: bytes, label_bytes: bytes, limit: int | None = None,
              classes: int = 10, provenance: dict | None = None) -> Dataset:
    """Parse IDX image (magic 0x00000803) and label (0x00000801) buffers."""
    (count, rows, cols), img_off = _parse_idx_header(image_bytes, IDX_IMAGE_MAGIC, "image")
    (lcount,), lab_off = _parse_idx_header(label_bytes, IDX_LABEL_MAGIC, "label")
    if count != lcount:
        raise IdxParseError(f"image count {count} does not match label count {lcount}", 4)
    pixels = rows * cols
    need_img = img_off + count * pixels
    if len(image_bytes) < need_img:
        raise IdxParseError(f"image data truncated: need {need_img} bytes, have {len(image_bytes)}",
                            len(image_bytes))
    need_lab = lab_off + count
    if len(label_bytes) < need_lab:
        raise IdxParseError(f"label data truncated: need {need_lab} bytes, have {len(label_bytes)}",
                            len(label_bytes))
    n = count if limit is None else max(0, min(int(limit), count))
    X = np.frombuffer(image_bytes, dtype=np.uint8, count=n * pixels, offset=img_off)
    y = np.frombuffer(label_bytes, dtype=np.uint8, count=n, offset=lab_off).astype(np.int64)
    if y.size and y.max() >= classes:
        bad = int(np.argmax(y >= classes))
        raise IdxParseError(f"label {int(y[bad])} outside [0, {classes})", lab_off + bad)
    X = X.reshape(n, pixels).astype(np.float64) / 255.0 if n else np.zeros((0, pixels))
    return Dataset(X, y, classes, provenance or {"source": "idx"})


def load_idx(images_path, labels_path, limit: int | None = None, classes: int = 10) -> Dataset:
    """Load the first ``limit`` items of an IDX image/label file pair."""
    img = Path(images_path).read_bytes()
    lab = Path(labels_path).read_bytes()
    return parse_idx(img, lab, limit, classes,
                     {"source": "idx", "images": str(images_path), "labels": str(labels_path),
                      "limit": limit})


def _bar_patterns(side: int, classes: int) -> np.ndarray:
    period = max(2, math.ceil(classes / 2))
    if period > side:
        raise ValueError(f"{classes} bar classes do not fit on a {side}x{side} grid")
    idx = np.arange(side)
    pats = np.zeros((classes, side, side))
    for k in range(classes):
        lines = (idx - k // 2) % period == 0
        if k % 2 == 0:
            pats[k, lines, :] = 1.0
        else:
            pats[k, :, lines] = 1.0
    return pats.reshape(classes, side * side)


def synth_dataset(kind: str, d: int, classes: int = 2, per_class: int = 100,
                  noise: float = 0.05, seed: int = 0) -> Dataset:
    """Deterministic balanced synthetic data in [0, 1]^d; labels cycle 0, 1, ..., c-1.

    blobs: Gaussian clouds around centres drawn uniformly from [0.2, 0.8]^d.
    bars: sqrt(d) x sqrt(d) images with class-specific horizontal or vertical
        stripes (0.8 on, 0.2 off) plus Gaussian pixel noise.
    """
    if d < 1 or classes < 2 or per_class < 0 or noise < 0:
        raise ValueError("need d >= 1, classes >= 2, per_class >= 0, noise >= 0")
    n = classes * per_class
    y = np.arange(n) % classes
    if kind == "blobs":
        centers = substream(seed, 0).uniform(0.2, 0.8, size=(classes, d))
    elif kind == "bars":
        side = math.isqrt(d)
        if side * side != d:
            raise ValueError(f"bars needs a square dimension, got d={d}")
        centers = 0.2 + 0.6 * _bar_patterns(side, classes)
    else:
        raise ValueError(f"unknown synthetic dataset {kind!r}")
    X = centers[y] + noise * substream(seed, 1).standard_normal((n, d))
    X = np.clip(X, 0.0, 1.0)
    return Dataset(X, y, classes, {"source": "synthetic", "kind": kind, "d": d, "classes": classes,
                                   "per_class": per_class, "noise": noise, "seed": seed})


@dataclass
class ResultRow:
    run_id: str
    sample_index: int | None = None
    repeat: int | None = None
    kind: str = ""
    r: float | None = None
    epsilon: float | None = None
    threshold_T: float | None = None
    value: float | None = None
    norm_h: float | None = None
    M: float | None = None
    m_strategy: str = ""
    feasible: bool = True
    vU_over_vS: float | None = None
    t1: float | None = None
    t2: float | None = None
    topk: float | None = None
    kendall: float | None = None
    cosine: float | None = None
    delta_norm: float | None = None
    prediction_preserved: bool | None = None
    n_samples: int | None = None
    smooth_seed: int | None = None
    attack_seed: int | None = None
    reason: str = ""


RESULT_FIELDS = tuple(f.name for f in dataclasses.fields(ResultRow))
_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ResultRow)}


def format_float(v: float) -> str:
    """Shortest decimal text that reads back to the same double."""
    return repr(float(v))


def _clean(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def _csv_cell(v) -> str:
    v = _clean(v)
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format_float(v)
    return str(v)


def emit_results(rows: Iterable[ResultRow], fmt: str, path) -> None:
    """Write rows as CSV (fixed RESULT_FIELDS header) or JSON lines."""
    rows = list(rows)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(RESULT_FIELDS)
        for row in rows:
            writer.writerow([_csv_cell(getattr(row, f)) for f in RESULT_FIELDS])
        text = buf.getvalue()
    elif fmt in ("json_lines", "jsonl"):
        text = "".join(
            json.dumps({f: _clean(getattr(row, f)) for f in RESULT_FIELDS}, allow_nan=False) + "\n"
            for row in rows
        )
    else:
        raise ValueError(f"unknown result format {fmt!r}")
    with open(os.fspath(path), "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _parse_cell(name: str, text: str):
    if text == "":
        return "" if _FIELD_TYPES[name] == "str" else None
    t = _FIELD_TYPES[name]
    if "bool" in t:
        return text == "true"
    if "int" in t:
        return int(text)
    if "float" in t:
        return float(text)
    return text


def read_results(path, fmt: str = "csv") -> list[ResultRow]:
    with open(os.fspath(path), encoding="utf-8", newline="") as fh:
        if fmt == "csv":
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != RESULT_FIELDS:
                raise ValueError("unexpected result header")
            return [ResultRow(**{k: _parse_cell(k, v) for k, v in zip(header, rec)}) for rec in reader]
        return [ResultRow(**json.loads(line)) for line in fh if line.strip()]


def write_table(path, row_label: str, row_keys: Sequence, col_keys: Sequence, cells: dict) -> None:
    """Pivot table: one row per ``row_keys`` entry, one column per ``col_keys`` entry."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([row_label] + [format_float(c) for c in col_keys])
    for rk in row_keys:
        writer.writerow([format_float(rk)] + [_csv_cell(cells.get((rk, ck))) for ck in col_keys])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
