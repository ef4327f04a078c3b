"""Binary checkpoint container.

Layout: magic ``SMSK``, little-endian u32 format version, u32 header
length, UTF-8 JSON header (model config, sorted tensor directory with byte
offsets, iteration, RNG state, optional optimizer directory), then the raw
little-endian float32 payload. Saving is canonical, so save -> load ->
save is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from semask.encoder import EncoderConfig
from semask.model import SegModel

MAGIC = b"SMSK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _jsonable(obj):
    """Recursively convert numpy scalars/arrays for JSON serialization."""
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


@dataclass
class Checkpoint:
    config: dict
    iteration: int
    rng_state: dict | None
    params: dict[str, np.ndarray]
    opt_step: int | None
    opt_m: dict[str, np.ndarray] | None
    opt_v: dict[str, np.ndarray] | None

    def encoder_config(self) -> EncoderConfig:
        enc = self.config["encoder"]
        return EncoderConfig(window=enc["window"], dims=tuple(enc["dims"]),
                             depths=tuple(enc["depths"]), heads=tuple(enc["heads"]),
                             num_classes=enc["num_classes"],
                             semantic_depths=tuple(enc["semantic_depths"]))


def model_config_dict(model: SegModel, extra: dict | None = None) -> dict:
    cfg = model.cfg
    doc = {
        "encoder": {
            "window": cfg.window,
            "dims": list(cfg.dims),
            "depths": list(cfg.depths),
            "heads": list(cfg.heads),
            "num_classes": cfg.num_classes,
            "semantic_depths": list(cfg.semantic_depths),
        },
        "decoder_width": model.decoder_width,
        "semantic": model.semantic,
    }
    if extra:
        doc.update(extra)
    return doc


def save_checkpoint(path, model: SegModel, iteration: int = 0,
                    optimizer=None, rng_state: dict | None = None,
                    extra_config: dict | None = None) -> None:
    named = model.named_parameters()
    directory = []
    blobs = []
    offset = 0
    for name, tensor in named.items():
        raw = np.ascontiguousarray(tensor.data, dtype="<f4")
        directory.append({"name": name, "shape": list(tensor.shape),
                          "offset": offset})
        blobs.append(raw.tobytes())
        offset += raw.nbytes
    header = {
        "config": model_config_dict(model, extra_config),
        "iteration": iteration,
        "rng_state": _jsonable(rng_state) if rng_state else None,
        "tensors": directory,
        "optimizer": None,
    }
    if optimizer is not None:
        opt_dir = {"step": optimizer.state.step, "m": [], "v": []}
        for slot in ("m", "v"):
            for name in sorted(getattr(optimizer.state, slot)):
                raw = np.ascontiguousarray(getattr(optimizer.state, slot)[name],
                                           dtype="<f4")
                opt_dir[slot].append({"name": name, "shape": list(raw.shape),
                                      "offset": offset})
                blobs.append(raw.tobytes())
                offset += raw.nbytes
        header["optimizer"] = opt_dir

    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(VERSION).tobytes())
        fh.write(np.uint32(len(head)).tobytes())
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def _read_tensor(payload: bytes, entry: dict) -> np.ndarray:
    shape = tuple(entry["shape"])
    count = int(np.prod(shape)) if shape else 1
    start = entry["offset"]
    end = start + 4 * count
    if end > len(payload):
        raise CheckpointError(f"truncated tensor payload for {entry['name']!r}")
    return np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).copy()


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic bytes {data[:4]!r}; not a checkpoint file")
    if len(data) < 12:
        raise CheckpointError("truncated checkpoint header")
    version = int(np.frombuffer(data[4:8], "<u4")[0])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    head_len = int(np.frombuffer(data[8:12], "<u4")[0])
    if 12 + head_len > len(data):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[12:12 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    payload = data[12 + head_len:]

    params = {e["name"]: _read_tensor(payload, e) for e in header["tensors"]}
    opt_step = opt_m = opt_v = None
    if header.get("optimizer"):
        opt = header["optimizer"]
        opt_step = opt["step"]
        opt_m = {e["name"]: _read_tensor(payload, e) for e in opt["m"]}
        opt_v = {e["name"]: _read_tensor(payload, e) for e in opt["v"]}
    return Checkpoint(config=header["config"], iteration=header["iteration"],
                      rng_state=header.get("rng_state"), params=params,
                      opt_step=opt_step, opt_m=opt_m, opt_v=opt_v)


def build_model(ck: Checkpoint, dtype=np.float32) -> SegModel:
    """Instantiate the checkpointed model and fill its parameters."""
    model = SegModel(ck.encoder_config(), ck.config["decoder_width"],
                     semantic=ck.config["semantic"], dtype=dtype, init="zeros")
    expected = model.named_parameters()
    missing = sorted(set(expected) - set(ck.params))
    surplus = sorted(set(ck.params) - set(expected))
    if missing or surplus:
        raise CheckpointError(
            f"checkpoint/config tensor directory mismatch; missing {missing[:3]}, "
            f"surplus {surplus[:3]}"
        )
    for name, tensor in expected.items():
        stored = ck.params[name]
        if stored.shape != tensor.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {stored.shape}, config expects {tensor.shape}"
            )
        tensor.data = stored.astype(dtype)
    return model
