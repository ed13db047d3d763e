"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"PCFN"  uint32 version  uint32 meta_len  meta (UTF-8 JSON)
    uint32 n_tensors
    n_tensors x [ uint16 name_len  name  uint32 ndim  ndim x uint32  float32 data ]

The JSON block holds the model config, the training config, the step
counter, the data-order permutation and the bit-generator states.  Tensor
names carry a section prefix: ``param/``, ``buffer/``, ``head/``, ``optim/``.
Values are stored as float32, which is the training precision, so a
round trip is bit-exact.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError
from .model import ModelConfig, SpeakerModel
from .train import StepRecord, TrainConfig, Trainer

MAGIC = b"PCFN"
VERSION = 1


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def encode(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True, indent=1).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta,
             struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        key = name.encode("utf-8")
        parts.append(struct.pack(f"<H{len(key)}sI{a.ndim}I", len(key), key, a.ndim, *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def decode(data: bytes, path=None) -> Checkpoint:
    if data[:4] != MAGIC:
        raise ParseError("not a checkpoint (bad magic)", path)
    try:
        version, meta_len = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise ParseError(f"unsupported checkpoint version {version}", path)
        off = 12
        meta = json.loads(data[off:off + meta_len].decode("utf-8"))
        off += meta_len
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(n):
            (klen,) = struct.unpack_from("<H", data, off)
            name = data[off + 2:off + 2 + klen].decode("utf-8")
            off += 2 + klen
            (ndim,) = struct.unpack_from("<I", data, off)
            shape = struct.unpack_from(f"<{ndim}I", data, off + 4)
            off += 4 + 4 * ndim
            count = int(np.prod(shape)) if shape else 1
            if off + 4 * count > len(data):
                raise ParseError(f"tensor {name!r} runs past the end of the file", path)
            tensors[name] = np.frombuffer(data, "<f4", count, off).reshape(shape).astype(np.float32)
            off += 4 * count
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"corrupt checkpoint: {e}", path) from None
    if off != len(data):
        raise ParseError(f"{len(data) - off} trailing bytes", path)
    return Checkpoint(meta, tensors)


def save(path, ckpt: Checkpoint):
    Path(path).write_bytes(encode(ckpt))


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes(), path)


# ------------------------------------------------------------------ model/trainer glue

def _pack_model(model: SpeakerModel, tensors: dict):
    for name, p in model.named_parameters():
        tensors[f"param/{name}"] = p.data
    for name, b in model.named_buffers():
        tensors[f"buffer/{name}"] = b.data


def _unpack_model(model: SpeakerModel, ckpt: Checkpoint, path=None):
    for prefix, named in (("param", model.named_parameters()), ("buffer", model.named_buffers())):
        stored = ckpt.section(prefix)
        own = dict(named)
        if set(stored) != set(own):
            missing = sorted(set(own) - set(stored))[:3]
            extra = sorted(set(stored) - set(own))[:3]
            raise ParseError(f"{prefix} names do not match the config (missing {missing}, extra {extra})",
                             path)
        for name, t in own.items():
            if stored[name].shape != t.shape:
                raise ParseError(f"{prefix} {name}: shape {stored[name].shape} vs {t.shape}", path)
            t.data[...] = stored[name]


def model_checkpoint(model: SpeakerModel) -> Checkpoint:
    tensors: dict = {}
    _pack_model(model, tensors)
    meta = {"model_config": model.cfg.to_dict(), "model_rng": model.rng.bit_generator.state}
    return Checkpoint(meta, tensors)


def trainer_checkpoint(trainer: Trainer) -> Checkpoint:
    ckpt = model_checkpoint(trainer.model)
    for name, p in trainer.head.named_parameters():
        ckpt.tensors[f"head/{name}"] = p.data
    for i, v in enumerate(trainer.optimizer.velocity):
        ckpt.tensors[f"optim/velocity.{i}"] = v
    ckpt.meta.update({
        "train_config": trainer.cfg.to_dict(),
        "n_classes": trainer.head.n_classes,
        "step": trainer.step,
        "order": trainer._order.tolist(),
        "data_rng": trainer.rng.bit_generator.state,
        "log": [[r.step, r.lr, r.loss] for r in trainer.log],
    })
    return ckpt


def restore_model(ckpt: Checkpoint, path=None) -> SpeakerModel:
    model = SpeakerModel(ModelConfig.from_dict(ckpt.meta["model_config"]))
    _unpack_model(model, ckpt, path)
    model.rng.bit_generator.state = ckpt.meta["model_rng"]
    return model


def restore_trainer(ckpt: Checkpoint, path=None) -> Trainer:
    meta = ckpt.meta
    trainer = Trainer(ModelConfig.from_dict(meta["model_config"]),
                      TrainConfig.from_dict(meta["train_config"]), meta["n_classes"])
    _unpack_model(trainer.model, ckpt, path)
    trainer.model.rng.bit_generator.state = meta["model_rng"]
    head = dict(trainer.head.named_parameters())
    for name, arr in ckpt.section("head").items():
        head[name].data[...] = arr
    vel = ckpt.section("optim")
    for i, v in enumerate(trainer.optimizer.velocity):
        v[...] = vel[f"velocity.{i}"]
    trainer.step = meta["step"]
    trainer._order = np.array(meta["order"], dtype=np.int64)
    trainer.rng.bit_generator.state = meta["data_rng"]
    trainer.log = [StepRecord(s, lr, loss) for s, lr, loss in meta["log"]]
    return trainer


def save_model(path, model: SpeakerModel):
    save(path, model_checkpoint(model))


def load_model(path) -> SpeakerModel:
    return restore_model(load(path), path)
