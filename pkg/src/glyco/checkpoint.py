"""Deterministic checkpoint serialisation.

Layout::

    glyco-checkpoint
    version = 1
    <key> = <value>            # config, normalisation, summary, ...
    tensor = <name> <shape> <byte offset>
    ...
    end
    <payload: little-endian float64 tensors, row-major, in manifest order>

Floats in the manifest are written with ``repr`` so they round-trip
exactly; shapes are ``x``-joined (``-`` for a scalar, ``0`` for empty).
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from .errors import CheckpointError, StructuralError
from .features import FeatureParams
from .nn import AdamState, ModelParams, parameter_shapes
from .train import Checkpoint, Normalizer, TrainConfig, TrainingHistory

MAGIC = "glyco-checkpoint"
FORMAT_VERSION = "1"
_LE_F8 = np.dtype("<f8")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def _floats(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",")], dtype=np.float64)


def _coerce(field: dataclasses.Field, text: str):
    kind = field.type if isinstance(field.type, str) else getattr(field.type, "__name__", "")
    if kind == "bool":
        return text == "true"
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind.startswith("tuple"):
        return tuple(int(v) for v in text.split(",")) if text else ()
    return text


def _shape_str(shape: tuple[int, ...]) -> str:
    return "x".join(str(d) for d in shape) if shape else "-"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "-" else tuple(int(d) for d in text.split("x"))


def dumps(ckpt: Checkpoint) -> bytes:
    lines = [MAGIC, f"version = {ckpt.version}"]
    for f in dataclasses.fields(ckpt.config):
        lines.append(f"train.{f.name} = {_fmt(getattr(ckpt.config, f.name))}")
    for f in dataclasses.fields(ckpt.features):
        lines.append(f"features.{f.name} = {_fmt(getattr(ckpt.features, f.name))}")
    lines.append(f"norm.mean = {_fmt(ckpt.normalizer.mean.tolist())}")
    lines.append(f"norm.std = {_fmt(ckpt.normalizer.std.tolist())}")
    h = ckpt.history
    lines.append(f"summary.initial_val_loss = {_fmt(float(h.initial_val_loss))}")
    lines.append(f"summary.best_epoch = {h.best_epoch}")
    lines.append(f"summary.epochs_run = {len(h.val_loss)}")
    lines.append(f"summary.stop_reason = {h.stop_reason}")
    a = ckpt.adam
    lines.append(f"adam.step = {a.step}")
    lines.append(f"adam.beta1 = {_fmt(a.beta1)}")
    lines.append(f"adam.beta2 = {_fmt(a.beta2)}")
    lines.append(f"adam.eps = {_fmt(a.eps)}")

    tensors: list[tuple[str, np.ndarray]] = []
    tensors += [(f"param.{k}", v) for k, v in ckpt.params.items()]
    tensors += [(f"adam.m.{k}", a.m[k]) for k in ckpt.params]
    tensors += [(f"adam.v.{k}", a.v[k]) for k in ckpt.params]
    tensors.append(("history.train_loss", np.asarray(h.train_loss, dtype=np.float64)))
    tensors.append(("history.val_loss", np.asarray(h.val_loss, dtype=np.float64)))

    payload = []
    offset = 0
    for name, arr in tensors:
        data = np.ascontiguousarray(arr, dtype=_LE_F8).tobytes()
        lines.append(f"tensor = {name} {_shape_str(arr.shape)} {offset}")
        payload.append(data)
        offset += len(data)
    lines.append("end")
    return ("\n".join(lines) + "\n").encode("utf-8") + b"".join(payload)


def loads(data: bytes) -> Checkpoint:
    """Inverse of :func:`dumps`; raises :class:`CheckpointError` on any mismatch."""
    marker = b"\nend\n"
    cut = data.find(marker)
    if not data.startswith(MAGIC.encode() + b"\n") or cut < 0:
        raise CheckpointError("not a glyco checkpoint")
    try:
        header = data[:cut].decode("utf-8").split("\n")[1:]
    except UnicodeDecodeError:
        raise CheckpointError("checkpoint manifest is not UTF-8") from None
    payload = memoryview(data)[cut + len(marker):]

    meta: dict[str, str] = {}
    tensor_dir: list[tuple[str, tuple[int, ...], int]] = []
    for line in header:
        key, sep, value = line.partition(" = ")
        if not sep:
            raise CheckpointError(f"malformed manifest line {line!r}")
        if key == "tensor":
            name, shape, off = value.split(" ")
            tensor_dir.append((name, _parse_shape(shape), int(off)))
        else:
            meta[key] = value
    if meta.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')!r}")

    try:
        cfg = TrainConfig(**{
            f.name: _coerce(f, meta[f"train.{f.name}"]) for f in dataclasses.fields(TrainConfig)
        })
        feats = FeatureParams(**{
            f.name: _coerce(f, meta[f"features.{f.name}"]) for f in dataclasses.fields(FeatureParams)
        })
        norm = Normalizer(_floats(meta["norm.mean"]), _floats(meta["norm.std"]))
        tensors: dict[str, np.ndarray] = {}
        for name, shape, off in tensor_dir:
            count = int(np.prod(shape)) if shape else 1
            end = off + 8 * count
            if end > len(payload):
                raise CheckpointError(f"tensor {name} extends past the end of the file")
            tensors[name] = np.frombuffer(payload[off:end], dtype=_LE_F8).astype(np.float64).reshape(shape)
        mcfg = cfg.model_config()
        names = list(parameter_shapes(mcfg))
        params = ModelParams(mcfg, {k: tensors[f"param.{k}"] for k in names})
        adam = AdamState(
            {k: tensors[f"adam.m.{k}"] for k in names},
            {k: tensors[f"adam.v.{k}"] for k in names},
            int(meta["adam.step"]), float(meta["adam.beta1"]),
            float(meta["adam.beta2"]), float(meta["adam.eps"]),
        )
        history = TrainingHistory(
            tensors["history.train_loss"].tolist(),
            tensors["history.val_loss"].tolist(),
            float(meta["summary.initial_val_loss"]),
            int(meta["summary.best_epoch"]),
            meta["summary.stop_reason"],
        )
    except CheckpointError:
        raise
    except (KeyError, ValueError, TypeError, StructuralError) as exc:
        raise CheckpointError(f"checkpoint does not match this toolkit: {exc}") from None
    if (norm.std <= 0).any():
        raise CheckpointError("normalizer has a non-positive std")
    return Checkpoint(params, adam, cfg, norm, feats, history, meta["version"])


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
