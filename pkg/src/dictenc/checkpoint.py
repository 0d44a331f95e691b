"""Binary parameter checkpoints with a JSON config sidecar.

Binary layout (little-endian)::

    magic    8 bytes  b"DENCKPT\\0"
    version  uint32   1
    count    uint32   number of tensors
    count x  { name_len uint16, name utf-8, ndim uint8, dims uint32[ndim] }
    data     float32, row-major, tensors in table order

The sidecar ``<checkpoint>.json`` holds the mode, every config, the encoder
vocabulary and the text vocabulary.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DENCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for arr in tensors.values():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensors(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a dictenc checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    table = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        table.append((name, shape))
    out = {}
    for name, shape in table:
        size = int(np.prod(shape)) if shape else 1
        end = off + 4 * size
        if end > len(data):
            raise CheckpointError(f"{path}: truncated data for {name}")
        out[name] = np.frombuffer(data[off:end], dtype="<f4").reshape(shape).copy()
        off = end
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return out


def save_pipeline(pipeline, path) -> None:
    from .toy_lm import DiagnosisPipeline  # noqa: F401  (type only)

    path = Path(path)
    tensors = {k: v.detach().cpu().numpy() for k, v in pipeline.state_dict().items()}
    write_tensors(path, tensors)
    sidecar = {
        "format": "dictenc-checkpoint",
        "version": VERSION,
        "mode": pipeline.mode,
        "lm_config": pipeline.lm_config.to_dict(),
        "text_vocab": pipeline.text_vocab.to_list(),
    }
    if pipeline.mode == "dictllm":
        sidecar["encoder_config"] = pipeline.encoder_config.to_dict()
        sidecar["align_config"] = pipeline.align_config.to_dict()
        sidecar["vocab"] = pipeline.vocab.token_to_id
    with open(sidecar_path(path), "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=1, ensure_ascii=False)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_pipeline(path, dtype=torch.float32):
    from .dict_tokenizer import Vocabulary
    from .hier_encoder import EncoderConfig
    from .ot_align import AlignConfig
    from .textproc import TextVocab
    from .toy_lm import DiagnosisPipeline, LMConfig

    path = Path(path)
    try:
        with open(sidecar_path(path), encoding="utf-8") as f:
            meta = json.load(f)
    except FileNotFoundError:
        raise CheckpointError(f"missing config sidecar {sidecar_path(path)}") from None
    try:
        text_vocab = TextVocab.from_list(meta["text_vocab"])
        lm_config = LMConfig(**meta["lm_config"])
        if meta["mode"] == "dictllm":
            pipeline = DiagnosisPipeline(
                "dictllm", text_vocab, lm_config, Vocabulary(meta["vocab"]),
                EncoderConfig(**meta["encoder_config"]), AlignConfig(**meta["align_config"]),
            )
        else:
            pipeline = DiagnosisPipeline(meta["mode"], text_vocab, lm_config)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid checkpoint config: {exc}") from None

    tensors = read_tensors(path)
    expected = pipeline.state_dict()
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(f"checkpoint/config mismatch: missing={missing[:5]} unexpected={extra[:5]}")
    for name, arr in tensors.items():
        if tuple(arr.shape) != tuple(expected[name].shape):
            raise CheckpointError(
                f"checkpoint/config mismatch for {name}: {tuple(arr.shape)} vs {tuple(expected[name].shape)}"
            )
    pipeline.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    pipeline.eval()
    return pipeline.to(dtype)
