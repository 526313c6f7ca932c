"""Checkpoint archive: named float32 arrays plus a versioned JSON header.

Binary layout (all integers little-endian):

    magic   b"SSCK"
    u32     format version (1)
    u32     header length, then UTF-8 JSON header
    u32     entry count
    entry   u16 name length | name UTF-8 | u8 ndim | u32 dims... | f32 data

Entries are written in sorted name order and the header JSON has sorted
keys, so identical contents serialize to identical bytes. Adapter factors
are stored as "<target>.lora.A" / "<target>.lora.B".
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
import warnings
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .encoder import ViTConfig
from .errors import DataError
from .lora import LoRAAdapter
from .segmenter import Segmenter

MAGIC = b"SSCK"
FORMAT_VERSION = 1


def serialize_archive(arrays: Mapping[str, np.ndarray], header: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(header_bytes)))
    buf.write(header_bytes)
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f4")  # tobytes() C-orders; keeps 0-d shape
        name_bytes = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr.tobytes())
    return buf.getvalue()


def deserialize_archive(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise DataError("not a checkpoint archive (bad magic)")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format version {version}")
    (header_len,) = struct.unpack("<I", buf.read(4))
    header = json.loads(buf.read(header_len).decode("utf-8"))
    (count,) = struct.unpack("<I", buf.read(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", buf.read(2))
        name = buf.read(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf.read(4 * n), dtype="<f4").reshape(shape)
        arrays[name] = arr.copy()
    return arrays, header


def save_archive(path: str | Path, arrays: Mapping[str, np.ndarray], header: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(serialize_archive(arrays, header))


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    return deserialize_archive(path.read_bytes())


def archive_sha256(arrays: Mapping[str, np.ndarray], header: dict) -> str:
    return hashlib.sha256(serialize_archive(arrays, header)).hexdigest()


def _module_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name, param in module.named_parameters():
        out[name] = param.detach().cpu().numpy().astype(np.float32)
    return out


def segmenter_arrays(seg: Segmenter) -> dict[str, np.ndarray]:
    """All parameters under archive names: torch names for the base model,
    "<target>.lora.{A,B}" for adapters."""
    arrays = {
        name: arr
        for name, arr in _module_arrays(seg).items()
        if not name.startswith("adapters.")
    }
    for adapter in seg.adapters.values():
        arrays[f"{adapter.target}.lora.A"] = adapter.A.detach().cpu().numpy().astype(np.float32)
        arrays[f"{adapter.target}.lora.B"] = adapter.B.detach().cpu().numpy().astype(np.float32)
    return arrays


def segmenter_header(seg: Segmenter) -> dict:
    cfg = seg.cfg
    lora = {
        adapter.target: {"rank": adapter.rank, "alpha": adapter.alpha}
        for adapter in seg.adapters.values()
    }
    first_layer = seg.decoder.layers[0]
    return {
        "format_version": FORMAT_VERSION,
        "kind": "segmenter",
        "vit": {
            "image_size": cfg.image_size,
            "patch_size": cfg.patch_size,
            "embed_dim": cfg.embed_dim,
            "depth": cfg.depth,
            "num_heads": cfg.num_heads,
            "mlp_ratio": cfg.mlp_ratio,
        },
        "decoder": {
            "num_heads": first_layer.self_attn.num_heads,
            "num_layers": len(seg.decoder.layers),
        },
        "lora": lora,
    }


def save_segmenter(path: str | Path, seg: Segmenter) -> str:
    """Write the segmenter archive; returns its sha256 (the checkpoint id)."""
    arrays, header = segmenter_arrays(seg), segmenter_header(seg)
    save_archive(path, arrays, header)
    return archive_sha256(arrays, header)


def load_segmenter(path: str | Path) -> Segmenter:
    arrays, header = load_archive(path)
    if header.get("kind") != "segmenter":
        raise DataError(f"expected a segmenter checkpoint, got kind={header.get('kind')!r}")
    cfg = ViTConfig(**header["vit"])
    seg = Segmenter(
        cfg,
        decoder_heads=header["decoder"]["num_heads"],
        decoder_layers=header["decoder"]["num_layers"],
    )
    consumed = set()
    with torch.no_grad():
        for name, param in seg.named_parameters():
            if name.startswith("adapters."):
                continue
            if name not in arrays:
                raise DataError(f"checkpoint missing parameter '{name}'")
            param.copy_(torch.from_numpy(arrays[name]))
            consumed.add(name)
        projections = seg.encoder.projections()
        for target, spec in header.get("lora", {}).items():
            if target not in projections:
                raise DataError(f"checkpoint adapter target '{target}' not in encoder")
            linear = projections[target]
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")  # rank warning already raised at injection
                adapter = LoRAAdapter(
                    target, linear.in_features, linear.out_features,
                    rank=int(spec["rank"]), alpha=float(spec["alpha"]),
                )
            for factor in ("A", "B"):
                key = f"{target}.lora.{factor}"
                if key not in arrays:
                    raise DataError(f"checkpoint missing adapter factor '{key}'")
                getattr(adapter, factor).copy_(torch.from_numpy(arrays[key]))
                consumed.add(key)
            seg.adapters[target.replace(".", "/")] = adapter
    unused = set(arrays) - consumed
    if unused:
        raise DataError(f"checkpoint has unknown entries: {sorted(unused)[:5]}")
    return seg
