"""Checkpoint container: parameters, config snapshot, RNG state and loss trace."""

from __future__ import annotations

import dataclasses
import importlib
import io
import json
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

FORMAT_VERSION = 1

KINDS = ("parsing", "generator", "disc-global", "disc-local", "face", "disc-face")
_NETWORKS = {
    "parsing": ("portrait_completion.parsing", "ParsingNet"),
    "generator": ("portrait_completion.completion", "Generator"),
    "disc-global": ("portrait_completion.completion", "Discriminator"),
    "disc-local": ("portrait_completion.completion", "Discriminator"),
    "disc-face": ("portrait_completion.completion", "Discriminator"),
    "face": ("portrait_completion.face", "FaceNet"),
}


@dataclass
class Checkpoint:
    kind: str
    params: dict
    config: dict
    rng_state: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION
    # discriminators trained alongside a generator; never serialized with it
    companions: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CheckpointError(f"unknown network kind {self.kind!r}")
        # canonical JSON form so that a save/load round trip compares equal
        self.config = _canonical(self.config)
        self.trace = _canonical(self.trace)
        self.meta = _canonical(self.meta)

    def expect(self, kind: str) -> "Checkpoint":
        if self.kind != kind:
            raise CheckpointError(f"expected a {kind!r} checkpoint, got {self.kind!r}")
        return self

    def param_digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()


def capture_rng_state(np_rng: np.random.Generator | None = None) -> dict:
    state = {"torch": torch.get_rng_state().numpy().copy()}
    if np_rng is not None:
        state["numpy"] = np_rng.bit_generator.state
    return state


def checkpoint_from_module(net: torch.nn.Module, kind: str, *, trace=None, meta=None,
                           rng_state=None) -> Checkpoint:
    params = {k: v.detach().cpu().numpy().copy() for k, v in net.state_dict().items()}
    return Checkpoint(
        kind=kind,
        params=params,
        config=dataclasses.asdict(net.config),
        rng_state=rng_state if rng_state is not None else capture_rng_state(),
        trace=list(trace or []),
        meta=dict(meta or {}),
    )


def module_from_checkpoint(ckpt: Checkpoint, kind: str | None = None) -> torch.nn.Module:
    if kind is not None:
        ckpt.expect(kind)
    module_name, cls_name = _NETWORKS[ckpt.kind]
    cls = getattr(importlib.import_module(module_name), cls_name)
    net = cls(cls.config_class(**ckpt.config))
    state = {k: torch.from_numpy(np.array(v)) for k, v in ckpt.params.items()}
    try:
        net.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{ckpt.kind} parameters do not match the stored config: {exc}") from exc
    return net.eval()


def as_module(obj, kind: str) -> torch.nn.Module:
    """Accept either a built network or a checkpoint of the given kind."""
    if isinstance(obj, Checkpoint):
        return module_from_checkpoint(obj, kind)
    return obj


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _canonical(obj):
    return json.loads(json.dumps(obj, default=_json_default))


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    rng = dict(ckpt.rng_state)
    torch_state = rng.pop("torch", None)
    header = {
        "format_version": ckpt.version,
        "kind": ckpt.kind,
        "config": ckpt.config,
        "rng_state": rng,
        "trace": ckpt.trace,
        "meta": ckpt.meta,
        "param_names": sorted(ckpt.params),
    }
    arrays = {f"param/{k}": np.asarray(v) for k, v in ckpt.params.items()}
    arrays["__header__"] = np.frombuffer(json.dumps(header, default=_json_default).encode(), dtype=np.uint8)
    if torch_state is not None:
        arrays["__rng_torch__"] = np.asarray(torch_state, dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def load_checkpoint(path, kind: str | None = None) -> Checkpoint:
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(bytes(data["__header__"]).decode())
            params = {name: data[f"param/{name}"] for name in header["param_names"]}
            rng = dict(header["rng_state"])
            if "__rng_torch__" in data.files:
                rng["torch"] = data["__rng_torch__"]
    except (OSError, ValueError, KeyError, EOFError, zipfile.BadZipFile, UnicodeDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}"
        )
    ckpt = Checkpoint(
        kind=header["kind"],
        params=params,
        config=header["config"],
        rng_state=rng,
        trace=header["trace"],
        meta=header["meta"],
    )
    if kind is not None:
        ckpt.expect(kind)
    return ckpt
