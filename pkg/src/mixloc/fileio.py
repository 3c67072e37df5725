"""Binary artifact formats: feature grids, audio embeddings, checkpoints, PGM.

All formats are little-endian with a 4-byte ASCII magic, a u32 version, u32
dimension fields, and an f32 payload in row-major order.  Readers reject
unknown magic bytes, unsupported versions, and truncated payloads.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FileFormatError
from .grids import AudioEmbedding, FeatureGrid

FGRID_MAGIC = b"FGRD"
AEMB_MAGIC = b"AEMB"
CHECKPOINT_MAGIC = b"PRJW"
FORMAT_VERSION = 1


def _read_header(raw: bytes, magic: bytes, n_dims: int, path) -> tuple[tuple[int, ...], bytes]:
    head = 4 + 4 * (1 + n_dims)
    if len(raw) < head:
        raise FileFormatError(f"{path}: truncated header")
    if raw[:4] != magic:
        raise FileFormatError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    fields = struct.unpack_from(f"<{1 + n_dims}I", raw, 4)
    if fields[0] != FORMAT_VERSION:
        raise FileFormatError(f"{path}: unsupported version {fields[0]}")
    return fields[1:], raw[head:]


def _read_payload(body: bytes, dims: tuple[int, ...], path) -> np.ndarray:
    count = int(np.prod(dims))
    if len(body) != 4 * count:
        raise FileFormatError(
            f"{path}: payload is {len(body)} bytes, expected {4 * count}"
        )
    flat = np.frombuffer(body, dtype="<f4", count=count)
    return flat.astype(np.float64).reshape(dims)


def write_feature_grid(path, grid: FeatureGrid) -> None:
    b, h, w, c = grid.data.shape
    header = FGRID_MAGIC + struct.pack("<5I", FORMAT_VERSION, b, h, w, c)
    Path(path).write_bytes(header + grid.data.astype("<f4").tobytes())


def read_feature_grid(path) -> FeatureGrid:
    dims, body = _read_header(Path(path).read_bytes(), FGRID_MAGIC, 4, path)
    return FeatureGrid(_read_payload(body, dims, path))


def write_audio_embedding(path, audio: AudioEmbedding) -> None:
    b, c = audio.data.shape
    header = AEMB_MAGIC + struct.pack("<3I", FORMAT_VERSION, b, c)
    Path(path).write_bytes(header + audio.data.astype("<f4").tobytes())


def read_audio_embedding(path) -> AudioEmbedding:
    dims, body = _read_header(Path(path).read_bytes(), AEMB_MAGIC, 2, path)
    return AudioEmbedding(_read_payload(body, dims, path))


def write_checkpoint(path, w_visual: np.ndarray, w_audio: np.ndarray) -> None:
    """Projection checkpoint: both matrices share the (c_raw, c) shape."""
    w_visual = np.asarray(w_visual, dtype=np.float64)
    w_audio = np.asarray(w_audio, dtype=np.float64)
    if w_visual.shape != w_audio.shape or w_visual.ndim != 2:
        raise FileFormatError(
            f"checkpoint matrices must share a 2-d shape, "
            f"got {w_visual.shape} and {w_audio.shape}"
        )
    c_raw, c = w_visual.shape
    header = CHECKPOINT_MAGIC + struct.pack("<3I", FORMAT_VERSION, c_raw, c)
    Path(path).write_bytes(
        header + w_visual.astype("<f4").tobytes() + w_audio.astype("<f4").tobytes()
    )


def read_checkpoint(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    dims, body = _read_header(raw, CHECKPOINT_MAGIC, 2, path)
    count = int(np.prod(dims))
    if len(body) != 8 * count:
        raise FileFormatError(f"{path}: payload is {len(body)} bytes, expected {8 * count}")
    w_visual = _read_payload(body[: 4 * count], dims, path)
    w_audio = _read_payload(body[4 * count :], dims, path)
    return w_visual, w_audio


def write_pgm(path, mask: np.ndarray, upsample: int = 1) -> None:
    """8-bit binary PGM (P5); 255 inside the mask, 0 outside.

    ``upsample`` repeats every cell into an upsample x upsample block
    (nearest-neighbor), keeping output bytes a pure function of the mask.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise FileFormatError(f"PGM mask must be 2-d, got shape {mask.shape}")
    if upsample < 1:
        raise FileFormatError(f"upsample factor must be >= 1, got {upsample}")
    pixels = (mask.astype(np.uint8) * 255).repeat(upsample, axis=0).repeat(upsample, axis=1)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
