"""Checkpoint container, run configuration, and model (de)serialization.

Container layout (little-endian): magic ``DDIS``, u16 format version, u32
record count, a table of (name, kind, absolute offset, byte length, SHA-256),
then the record payloads. Payloads are 64-bit float arrays prefixed by shape
metadata, or UTF-8 text blobs for manifests and model metadata. Every record
hash is verified on load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"DDIS"
FORMAT_VERSION = 1
RECORD_KINDS = ("classifier", "denoiser", "codec", "token", "manifest")

_PAYLOAD_ARRAY = 0
_PAYLOAD_TEXT = 1


class CheckpointError(RuntimeError):
    """Container-level failure: corruption, bad version, missing record."""


class ConfigError(ValueError):
    """Unknown or malformed run-configuration entry."""


@dataclass
class Record:
    name: str
    kind: str
    payload: object  # np.ndarray (float64) or str

    def encode(self) -> bytes:
        if isinstance(self.payload, str):
            body = self.payload.encode("utf-8")
            head = struct.pack("<BI", _PAYLOAD_TEXT, 1) + struct.pack("<Q", len(body))
            return head + body
        arr = np.ascontiguousarray(self.payload, dtype=np.float64)
        head = struct.pack("<BI", _PAYLOAD_ARRAY, arr.ndim)
        head += b"".join(struct.pack("<Q", d) for d in arr.shape)
        return head + arr.tobytes()

    @staticmethod
    def decode(name: str, kind: str, blob: bytes) -> "Record":
        tag, ndim = struct.unpack_from("<BI", blob, 0)
        off = 5
        dims = []
        for _ in range(ndim):
            (d,) = struct.unpack_from("<Q", blob, off)
            dims.append(d)
            off += 8
        if tag == _PAYLOAD_TEXT:
            return Record(name, kind, blob[off : off + dims[0]].decode("utf-8"))
        if tag != _PAYLOAD_ARRAY:
            raise CheckpointError(f"record {name!r}: unknown payload tag {tag}")
        arr = np.frombuffer(blob[off:], dtype="<f8").reshape(dims).copy()
        return Record(name, kind, arr)


class CheckpointContainer:
    def __init__(self):
        self.records: dict[str, Record] = {}

    def add_array(self, name: str, kind: str, arr) -> None:
        self._check_kind(kind)
        self.records[name] = Record(name, kind, np.asarray(arr, dtype=np.float64))

    def add_text(self, name: str, kind: str, text: str) -> None:
        self._check_kind(kind)
        self.records[name] = Record(name, kind, str(text))

    @staticmethod
    def _check_kind(kind: str) -> None:
        if kind not in RECORD_KINDS:
            raise CheckpointError(f"unknown record kind {kind!r}, expected one of {RECORD_KINDS}")

    def array(self, name: str) -> np.ndarray:
        rec = self._get(name)
        if not isinstance(rec.payload, np.ndarray):
            raise CheckpointError(f"record {name!r} is not an array")
        return rec.payload

    def text(self, name: str) -> str:
        rec = self._get(name)
        if not isinstance(rec.payload, str):
            raise CheckpointError(f"record {name!r} is not text")
        return rec.payload

    def _get(self, name: str) -> Record:
        if name not in self.records:
            raise CheckpointError(f"record {name!r} not present in container")
        return self.records[name]

    def names(self, kind: str | None = None, prefix: str | None = None) -> list:
        out = []
        for name, rec in self.records.items():
            if kind is not None and rec.kind != kind:
                continue
            if prefix is not None and not name.startswith(prefix):
                continue
            out.append(name)
        return sorted(out)

    def save(self, path) -> None:
        ordered = [self.records[name] for name in sorted(self.records)]
        blobs = [rec.encode() for rec in ordered]
        table_size = sum(2 + len(rec.name.encode()) + 2 + len(rec.kind.encode()) + 8 + 8 + 32 for rec in ordered)
        offset = len(MAGIC) + 2 + 4 + table_size
        table = b""
        for rec, blob in zip(ordered, blobs):
            nb, kb = rec.name.encode(), rec.kind.encode()
            table += struct.pack("<H", len(nb)) + nb
            table += struct.pack("<H", len(kb)) + kb
            table += struct.pack("<QQ", offset, len(blob))
            table += hashlib.sha256(blob).digest()
            offset += len(blob)
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<H", FORMAT_VERSION))
            fh.write(struct.pack("<I", len(ordered)))
            fh.write(table)
            for blob in blobs:
                fh.write(blob)

    @classmethod
    def load(cls, path) -> "CheckpointContainer":
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:4] != MAGIC:
            raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint container")
        (version,) = struct.unpack_from("<H", data, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported container version {version}")
        (count,) = struct.unpack_from("<I", data, 6)
        off = 10
        container = cls()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + nlen].decode()
            off += nlen
            (klen,) = struct.unpack_from("<H", data, off)
            off += 2
            kind = data[off : off + klen].decode()
            off += klen
            rec_off, rec_len = struct.unpack_from("<QQ", data, off)
            off += 16
            digest = data[off : off + 32]
            off += 32
            blob = data[rec_off : rec_off + rec_len]
            if hashlib.sha256(blob).digest() != digest:
                raise CheckpointError(f"record {name!r}: stored hash does not match payload")
            container.records[name] = Record.decode(name, kind, blob)
        return container


# ---------------------------------------------------------------------------
# model records
# ---------------------------------------------------------------------------


def save_model(container: CheckpointContainer, name: str, model) -> None:
    meta = model.meta_dict()
    kind = meta["kind"]
    container.add_text(f"{name}/meta", kind, json.dumps(meta, sort_keys=True))
    for pname, arr in model.state_arrays():
        container.add_array(f"{name}/arr/{pname}", kind, arr)


def load_model(container: CheckpointContainer, name: str):
    from .nets import ClassifierModel, DenoiserModel, codec_from_meta

    meta = json.loads(container.text(f"{name}/meta"))
    prefix = f"{name}/arr/"
    arrays = {rec_name[len(prefix) :]: container.array(rec_name) for rec_name in container.names(prefix=prefix)}
    kind = meta["kind"]
    if kind == "classifier":
        return ClassifierModel.from_state(meta, arrays)
    if kind == "denoiser":
        return DenoiserModel.from_state(meta, arrays)
    if kind == "codec":
        return codec_from_meta(meta, arrays)
    raise CheckpointError(f"record {name!r} has unloadable kind {kind!r}")


def save_token(container: CheckpointContainer, token) -> None:
    name = f"token/class{token.class_id}"
    meta = {
        "class_id": token.class_id,
        "embed_dim": token.embed_dim,
        "n_tokens": token.n_tokens,
        "step": token.step,
        "log": token.log,
    }
    container.add_text(f"{name}/meta", "token", json.dumps(meta, sort_keys=True))
    container.add_array(f"{name}/vectors", "token", token.vectors.data)
    container.add_array(f"{name}/adam_m", "token", token.m)
    container.add_array(f"{name}/adam_v", "token", token.v)


def load_token(container: CheckpointContainer, class_id: int):
    from .cat import TokenEmbedding
    from .tensor import Tensor

    name = f"token/class{class_id}"
    meta = json.loads(container.text(f"{name}/meta"))
    return TokenEmbedding(
        class_id=meta["class_id"],
        vectors=Tensor(container.array(f"{name}/vectors"), requires_grad=True),
        m=container.array(f"{name}/adam_m"),
        v=container.array(f"{name}/adam_v"),
        step=meta["step"],
        log=meta["log"],
    )


def stored_token_classes(container: CheckpointContainer) -> list:
    out = []
    for name in container.names(kind="token"):
        if name.endswith("/meta"):
            out.append(json.loads(container.text(name))["class_id"])
    return sorted(out)


# ---------------------------------------------------------------------------
# manifests: plain-text key = value
# ---------------------------------------------------------------------------


def format_manifest(entries: dict) -> str:
    lines = [f"{key} = {_canon_value(entries[key])}" for key in sorted(entries)]
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"malformed manifest line: {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def _canon_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_canon_value(x) for x in v)
    return str(v)


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

CONFIG_DEFAULTS: dict = {
    "precision": "f64",
    "seed": 0,
    "schedule.t_train": 1000,
    "schedule.beta_start": 1e-4,
    "schedule.beta_end": 0.02,
    "schedule.t_sample": 30,
    "schedule.sigma_mode": "deterministic",
    "schedule.cfg_scale": 15.0,
    "schedule.x0_clip": "-1,1",
    "dag.lambda_bn": 0.01,
    "dag.s_g": 20.0,
    "dag.batch": 20,
    "dag.apply_range": "all",
    "dag.squared_norms": False,
    "cat.lr": 0.005,
    "cat.max_epochs": 30,
    "cat.accumulation": 20,
    "cat.early_stop": 0.7,
    "cat.gradient_skip": True,
    "cat.extra_token_count": 0,
    "cat.bn_loss_weight": 0.0,
    "cat.unfreeze_denoiser": False,
    "fixtures.domain": "filled",
    "fixtures.n_per_class": 400,
    "fixtures.heldout_per_class": 100,
    "fixtures.classifier_epochs": 6,
    "fixtures.denoiser_epochs": 60,
    "fixtures.codec_epochs": 25,
    "synth.per_class": 64,
    "sample.batch": 20,
    "eval.kd_temperature": 4.0,
    "eval.kd_epochs": 12,
    "eval.di_iterations": 300,
    "eval.di_lambda_bn": 0.01,
    "eval.di_lr": 0.05,
    "sweep.lambdas": "0.0001,0.001,0.01,0.1,1",
    "sweep.s_gs": "0.1,1,10,100",
    "sweep.batch": 8,
}


class RunConfig:
    """Flat key-value configuration; unknown keys are rejected."""

    def __init__(self, overrides: dict | None = None):
        self.values = dict(CONFIG_DEFAULTS)
        for key, value in (overrides or {}).items():
            self.set(key, value)

    def set(self, key: str, value) -> None:
        if key not in CONFIG_DEFAULTS:
            raise ConfigError(f"unknown configuration key {key!r}")
        default = CONFIG_DEFAULTS[key]
        self.values[key] = _coerce(key, value, default)

    def get(self, key: str):
        if key not in self.values:
            raise ConfigError(f"unknown configuration key {key!r}")
        return self.values[key]

    @classmethod
    def from_file(cls, path, extra_overrides: dict | None = None) -> "RunConfig":
        with open(path) as fh:
            entries = parse_manifest(fh.read())
        config = cls(entries)
        for key, value in (extra_overrides or {}).items():
            config.set(key, value)
        return config

    def canonical_text(self) -> str:
        return format_manifest(self.values)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.canonical_text())

    # typed sub-configurations ------------------------------------------------
    def schedule(self):
        from .diffusion import make_schedule

        raw_clip = str(self.get("schedule.x0_clip")).strip()
        clip = None
        if raw_clip and raw_clip.lower() not in ("none", "off"):
            lo, hi = (float(x) for x in raw_clip.split(","))
            clip = (lo, hi)
        return make_schedule(
            t_train=self.get("schedule.t_train"),
            beta_start=self.get("schedule.beta_start"),
            beta_end=self.get("schedule.beta_end"),
            t_sample=self.get("schedule.t_sample"),
            sigma_mode=self.get("schedule.sigma_mode"),
            cfg_scale=self.get("schedule.cfg_scale"),
            x0_clip=clip,
        )

    def dag_config(self):
        from .guidance import DagConfig

        raw_range = str(self.get("dag.apply_range")).strip()
        apply_range = None
        if raw_range and raw_range.lower() != "all":
            lo, hi = (int(x) for x in raw_range.split(","))
            apply_range = (lo, hi)
        return DagConfig(
            lambda_bn=self.get("dag.lambda_bn"),
            s_g=self.get("dag.s_g"),
            batch=self.get("dag.batch"),
            apply_range=apply_range,
            squared_norms=self.get("dag.squared_norms"),
        )

    def cat_config(self):
        from .cat import CatTrainConfig

        return CatTrainConfig(
            lr=self.get("cat.lr"),
            max_epochs=self.get("cat.max_epochs"),
            accumulation=self.get("cat.accumulation"),
            early_stop=self.get("cat.early_stop"),
            gradient_skip=self.get("cat.gradient_skip"),
            extra_token_count=self.get("cat.extra_token_count"),
            bn_loss_weight=self.get("cat.bn_loss_weight"),
            unfreeze_denoiser=self.get("cat.unfreeze_denoiser"),
        )


def _coerce(key: str, value, default):
    if isinstance(value, str):
        text = value.strip()
        if isinstance(default, bool):
            if text.lower() in ("true", "1", "yes", "on"):
                return True
            if text.lower() in ("false", "0", "no", "off"):
                return False
            raise ConfigError(f"key {key!r}: expected boolean, got {text!r}")
        if isinstance(default, int) and not isinstance(default, bool):
            try:
                return int(text)
            except ValueError:
                raise ConfigError(f"key {key!r}: expected integer, got {text!r}")
        if isinstance(default, float):
            try:
                return float(text)
            except ValueError:
                raise ConfigError(f"key {key!r}: expected number, got {text!r}")
        return text
    if isinstance(default, bool) and not isinstance(value, bool):
        raise ConfigError(f"key {key!r}: expected boolean")
    if isinstance(default, float) and isinstance(value, (int, float)):
        return float(value)
    if isinstance(default, int) and isinstance(value, int) and not isinstance(value, bool):
        return value
    if type(value) is not type(default):
        raise ConfigError(f"key {key!r}: expected {type(default).__name__}")
    return value
