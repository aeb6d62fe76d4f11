"""On-disk formats: binary checkpoints, JSON masks and records, CSV traces.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic  b"TKTLAB01"
    u32       length of the JSON header
    bytes     JSON header: {"config": {...}, "info": {...}, "config_hash": "..."}
    u32       number of parameter records
    per record:
        u16       name length, then the UTF-8 name
        u8        ndim, then ndim x u32 dimensions
        f64 x N   row-major little-endian payload

Mask files are JSON with a schema version, the producing model's config
hash (checked on load), and either ``xi``/``nu`` lists (s-pruning) or
run-length encoded per-parameter bitmaps (m-pruning).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .config import config_hash
from .encoder import ConfigurationError, ModelConfig, SubnetworkMask, is_embedding, param_shapes
from .experiments import ExperimentRecord
from .pruning import PruneTrace
from .training import Checkpoint

MAGIC = b"TKTLAB01"
MASK_SCHEMA_VERSION = 1
RECORD_SCHEMA_VERSION = 1


class FormatError(ValueError):
    """A file is corrupted or does not follow the expected layout."""


class ConfigMismatch(ConfigurationError):
    """An artifact was produced by a different model configuration."""


def dumps_json(obj) -> str:
    """Canonical JSON (sorted keys, fixed indentation) for byte-stable files."""
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


# -- checkpoints ---------------------------------------------------------------

def checkpoint_bytes(ck: Checkpoint) -> bytes:
    header = dumps_json({"config": ck.config.to_dict(), "info": ck.info,
                         "config_hash": config_hash(ck.config)}).encode()
    out = [MAGIC, struct.pack("<I", len(header)), header, struct.pack("<I", len(ck.params))]
    for name in sorted(ck.params):
        arr = np.ascontiguousarray(ck.params[name], dtype="<f8")
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def save_checkpoint(ck: Checkpoint, path) -> str:
    """Write ``ck``; returns the sha256 of the file contents."""
    data = checkpoint_bytes(ck)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen))
        config = ModelConfig.from_dict(header["config"])
    except (json.JSONDecodeError, KeyError, TypeError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: bad header: {e}") from None
    if header.get("config_hash") != config_hash(config):
        raise ConfigMismatch(f"{path}: header config hash does not match its config")
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: trailing bytes after last record")
    return Checkpoint(config, params, header.get("info", {}))


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- masks -----------------------------------------------------------------------

def rle_encode(bits: np.ndarray) -> list:
    """``[first_value, run_1, run_2, ...]`` over the flattened bitmap."""
    flat = np.asarray(bits, dtype=bool).reshape(-1)
    if flat.size == 0:
        return [0]
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    return [int(flat[0])] + np.diff(bounds).astype(int).tolist()


def rle_decode(runs: list, shape) -> np.ndarray:
    if not runs or runs[0] not in (0, 1):
        raise FormatError("run-length list must start with 0 or 1")
    value = bool(runs[0])
    parts = []
    for r in runs[1:]:
        if not isinstance(r, int) or r < 0:
            raise FormatError("run lengths must be non-negative integers")
        parts.append(np.full(r, value))
        value = not value
    flat = np.concatenate(parts) if parts else np.zeros(0, dtype=bool)
    if flat.size != int(np.prod(shape)):
        raise FormatError("run lengths do not add up to the declared shape")
    return flat.reshape(shape)


def weight_mask_to_json(mask: dict) -> dict:
    return {name: {"shape": list(mask[name].shape), "rle": rle_encode(mask[name])} for name in sorted(mask)}


def weight_mask_from_json(doc: dict) -> dict:
    return {name: rle_decode(v["rle"], tuple(v["shape"])) for name, v in sorted(doc.items())}


def mask_to_json(mask, config: ModelConfig, task: str | None = None, seed: int | None = None) -> dict:
    doc = {"schema_version": MASK_SCHEMA_VERSION, "config_hash": config_hash(config),
           "provenance": {"task": task, "seed": seed}}
    if isinstance(mask, SubnetworkMask):
        doc.update(method="s", shape={"num_layers": int(mask.xi.shape[0]), "num_heads": int(mask.xi.shape[1])},
                   xi=mask.xi.astype(int).tolist(), nu=mask.nu.astype(int).tolist())
    else:
        doc.update(method="m", weights=weight_mask_to_json(mask))
    return doc


def mask_from_json(doc: dict, config: ModelConfig | None = None):
    """Parse a mask document; with ``config`` given, the config hash must match."""
    if not isinstance(doc, dict):
        raise FormatError("mask document must be a JSON object")
    if doc.get("schema_version") != MASK_SCHEMA_VERSION:
        raise FormatError(f"unsupported mask schema version {doc.get('schema_version')!r}")
    if config is not None and doc.get("config_hash") != config_hash(config):
        raise ConfigMismatch("mask was produced for a different model configuration "
                             f"({doc.get('config_hash')} != {config_hash(config)})")
    try:
        if doc["method"] == "s":
            mask = SubnetworkMask(np.array(doc["xi"]), np.array(doc["nu"]))
            if config is not None:
                mask.check(config)
            return mask
        if doc["method"] == "m":
            mask = weight_mask_from_json(doc["weights"])
            if config is not None:
                _check_weight_mask(mask, config)
            return mask
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, (FormatError, ConfigurationError)):
            raise
        raise FormatError(f"malformed mask document: {e}") from None
    raise FormatError(f"unknown mask method {doc.get('method')!r}")


def _check_weight_mask(mask: dict, config: ModelConfig):
    shapes = param_shapes(config)
    for name, m in mask.items():
        if is_embedding(name) or tuple(shapes.get(name, ())) != m.shape:
            raise ConfigurationError(f"weight mask entry {name!r} does not fit the model")


def save_mask(mask, path, config: ModelConfig, task: str | None = None, seed: int | None = None):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dumps_json(mask_to_json(mask, config, task, seed)))


def load_mask(path, config: ModelConfig | None = None):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON: {e}") from None
    return mask_from_json(doc, config)


# -- records ------------------------------------------------------------------------

def _num(x):
    return None if x is None else float(x)


def record_to_json(rec: ExperimentRecord, config: ModelConfig, checkpoint_hash: str = "") -> dict:
    mask = rec.subnet_mask if rec.subnet_mask is not None else rec.weight_mask
    return {
        "schema_version": RECORD_SCHEMA_VERSION,
        "key": rec.key,
        "task": rec.task,
        "seed": rec.seed,
        "method": rec.method,
        "kind": rec.kind,
        "size_fraction": float(rec.size_fraction),
        "pruned_metric": _num(rec.pruned_metric),
        "retrained_metric": _num(rec.retrained_metric),
        "trace": rec.trace,
        "config_hash": config_hash(config),
        "checkpoint_sha256": checkpoint_hash,
        "mask": None if mask is None else mask_to_json(mask, config, rec.task, rec.seed),
    }


def record_from_json(doc: dict, config: ModelConfig | None = None) -> ExperimentRecord:
    mask = None if doc.get("mask") is None else mask_from_json(doc["mask"], config)
    is_s = isinstance(mask, SubnetworkMask)
    return ExperimentRecord(doc["task"], int(doc["seed"]), doc["method"], doc["kind"],
                            float(doc["size_fraction"]), doc.get("pruned_metric"),
                            doc.get("retrained_metric"), mask if is_s else None,
                            None if is_s or mask is None else mask, doc.get("trace"))


class RecordStore:
    """One directory per experiment: ``records/*.json``, ``traces/*.csv``,
    ``config.json`` and ``manifest.json``.  Writing an existing key replaces it."""

    def __init__(self, root):
        self.root = Path(root)

    @property
    def records_dir(self) -> Path:
        return self.root / "records"

    @property
    def traces_dir(self) -> Path:
        return self.root / "traces"

    def put(self, rec: ExperimentRecord, config: ModelConfig, checkpoint_hash: str = ""):
        self.records_dir.mkdir(parents=True, exist_ok=True)
        path = self.records_dir / f"{rec.key}.json"
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(dumps_json(record_to_json(rec, config, checkpoint_hash)))
        tmp.replace(path)

    def put_trace(self, name: str, trace: PruneTrace):
        self.traces_dir.mkdir(parents=True, exist_ok=True)
        (self.traces_dir / name).write_text(trace.to_csv())

    def write_json(self, name: str, obj):
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / name).write_text(dumps_json(obj))

    def read_json(self, name: str):
        return json.loads((self.root / name).read_text())

    def keys(self) -> list:
        if not self.records_dir.is_dir():
            return []
        return sorted(p.stem for p in self.records_dir.glob("*.json"))

    def get_doc(self, key: str) -> dict:
        return json.loads((self.records_dir / f"{key}.json").read_text())

    def load_all(self, config: ModelConfig | None = None) -> list:
        return [record_from_json(self.get_doc(k), config) for k in self.keys()]

    def trace(self, name: str) -> PruneTrace:
        return PruneTrace.from_csv((self.traces_dir / name).read_text())
