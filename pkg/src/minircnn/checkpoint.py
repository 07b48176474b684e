"""Versioned binary checkpoints with bit-exact round trips.

Layout (all integers little-endian)::

    magic   4 bytes  b"FRCK"
    version u32      currently 1
    hlen    u64      header length in bytes
    header  JSON     configs, vocabulary, iteration and the tensor table
    payload          concatenated float64 buffers

The tensor table lists (name, shape, offset, nbytes) per tensor with
offsets relative to the payload start, in a fixed order: parameters,
momentum buffers, loss history. Saving a loaded checkpoint reproduces the
original file byte for byte.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .boxes import AnchorConfig
from .errors import FormatError
from .model import BackboneConfig, DetectorModel

MAGIC = b"FRCK"
VERSION = 1
_HISTORY_COLS = 5  # rpn_cls, rpn_reg, head_cls, head_reg, total


@dataclass
class Checkpoint:
    """Everything needed to resume training or run inference."""

    classes: tuple[str, ...]
    anchor_config: AnchorConfig
    backbone_config: BackboneConfig
    head_hidden: int
    roi_size: int
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    loss_history: np.ndarray = field(
        default_factory=lambda: np.zeros((0, _HISTORY_COLS)))
    image_size: int = 128  # the input side length the model was trained at
    version: int = VERSION

    @staticmethod
    def from_model(model: DetectorModel, classes, momentum=None, iteration=0,
                   loss_history=None, image_size=128) -> "Checkpoint":
        return Checkpoint(
            classes=tuple(classes),
            anchor_config=model.anchor_config,
            backbone_config=model.backbone_config,
            head_hidden=model.head_hidden,
            roi_size=model.roi_size,
            params={name: t.data.copy() for name, t in model.params.items()},
            momentum={k: v.copy() for k, v in (momentum or {}).items()},
            iteration=iteration,
            loss_history=(np.asarray(loss_history, dtype=np.float64).reshape(-1, _HISTORY_COLS)
                          if loss_history is not None and len(loss_history)
                          else np.zeros((0, _HISTORY_COLS))),
            image_size=image_size,
        )

    def build_model(self) -> DetectorModel:
        """Reconstruct the detector with these parameter values."""
        model = DetectorModel(
            n_classes=len(self.classes), backbone=self.backbone_config,
            anchors=self.anchor_config, head_hidden=self.head_hidden,
            roi_size=self.roi_size, seed=0)
        if set(model.params) != set(self.params):
            missing = set(model.params) ^ set(self.params)
            raise FormatError(f"checkpoint parameters do not match the "
                              f"architecture (mismatched: {sorted(missing)})")
        for name, tensor in model.params.items():
            arr = self.params[name]
            if arr.shape != tensor.data.shape:
                raise FormatError(f"parameter {name} has shape {arr.shape}, "
                                  f"expected {tensor.data.shape}")
            tensor.data[...] = arr
        return model


def _anchor_dict(cfg: AnchorConfig) -> dict:
    return {"stride": cfg.stride, "scales": list(cfg.scales),
            "ratios": list(cfg.ratios), "base_size": cfg.base_size}


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    table = []
    buffers = []
    offset = 0

    def put(name: str, arr: np.ndarray):
        nonlocal offset
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        table.append([name, list(arr.shape), offset, len(blob)])
        buffers.append(blob)
        offset += len(blob)

    for name, arr in ckpt.params.items():
        put(name, arr)
    for name, arr in ckpt.momentum.items():
        put(f"momentum:{name}", arr)
    put("loss_history", ckpt.loss_history)

    header = {
        "version": ckpt.version,
        "classes": list(ckpt.classes),
        "anchor": _anchor_dict(ckpt.anchor_config),
        "backbone": ckpt.backbone_config.to_dict(),
        "model": {"head_hidden": ckpt.head_hidden, "roi_size": ckpt.roi_size,
                  "image_size": ckpt.image_size},
        "iteration": ckpt.iteration,
        "tensors": table,
    }
    hblob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<Q", len(hblob)))
        fh.write(hblob)
        for blob in buffers:
            fh.write(blob)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise FormatError("file too short for a checkpoint header", offset=len(blob))
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", offset=0)
    version = struct.unpack("<I", blob[4:8])[0]
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    hlen = struct.unpack("<Q", blob[8:16])[0]
    if 16 + hlen > len(blob):
        raise FormatError(f"header length {hlen} exceeds file size", offset=8)
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}", offset=16) from None

    payload = blob[16 + hlen:]
    tensors: dict[str, np.ndarray] = {}
    expect_end = 0
    try:
        table = header["tensors"]
        classes = tuple(header["classes"])
        anchor = AnchorConfig(stride=header["anchor"]["stride"],
                              scales=tuple(header["anchor"]["scales"]),
                              ratios=tuple(header["anchor"]["ratios"]),
                              base_size=header["anchor"]["base_size"])
        backbone = BackboneConfig.from_dict(header["backbone"])
        head_hidden = int(header["model"]["head_hidden"])
        roi_size = int(header["model"]["roi_size"])
        image_size = int(header["model"]["image_size"])
        iteration = int(header["iteration"])
    except (KeyError, TypeError, IndexError) as exc:
        raise FormatError(f"incomplete header: {exc!r}", offset=16) from None

    for entry in table:
        name, shape, offset, nbytes = entry[0], tuple(entry[1]), entry[2], entry[3]
        if int(np.prod(shape, dtype=np.int64)) * 8 != nbytes:
            raise FormatError(f"tensor {name}: {nbytes} bytes for shape {shape}",
                              offset=16 + hlen + offset)
        if offset + nbytes > len(payload):
            raise FormatError(f"tensor {name} extends past end of file",
                              offset=16 + hlen + offset)
        tensors[name] = np.frombuffer(payload[offset:offset + nbytes],
                                      dtype="<f8").reshape(shape).copy()
        expect_end = max(expect_end, offset + nbytes)
    if expect_end != len(payload):
        raise FormatError(f"{len(payload) - expect_end} trailing bytes after payload",
                          offset=16 + hlen + expect_end)

    if "loss_history" not in tensors:
        raise FormatError("tensor table is missing loss_history", offset=16)
    history = tensors.pop("loss_history")
    params = {k: v for k, v in tensors.items() if not k.startswith("momentum:")}
    momentum = {k[len("momentum:"):]: v for k, v in tensors.items()
                if k.startswith("momentum:")}
    return Checkpoint(classes=classes, anchor_config=anchor,
                      backbone_config=backbone, head_hidden=head_hidden,
                      roi_size=roi_size, params=params, momentum=momentum,
                      iteration=iteration, loss_history=history,
                      image_size=image_size, version=version)
