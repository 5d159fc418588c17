"""Binary PGM (P5) and raw float32 slices.

Images live in memory as float64 arrays in [0, 1]; PGM samples are scaled
by the file's maxval.
"""

import logging
import re
from pathlib import Path

import numpy as np

from cipherdenoise.errors import ImageFormatError

logger = logging.getLogger(__name__)

PGM_MAXVAL = 65535
_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens = []
    offset = 0
    for _ in range(count):
        match = _TOKEN.match(data, offset)
        if match is None:
            raise ImageFormatError("truncated PGM header")
        tokens.append(match.group(1))
        offset = match.end()
    # exactly one whitespace byte separates the header from the raster
    return tokens, offset + 1


def parse_pgm(data: bytes) -> np.ndarray:
    tokens, offset = _header_tokens(data, 4)
    if tokens[0] != b"P5":
        raise ImageFormatError(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError(f"PGM header is not numeric: {exc}") from exc
    if width <= 0 or height <= 0 or not 0 < maxval <= PGM_MAXVAL:
        raise ImageFormatError(f"unsupported PGM geometry {width}x{height} maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    needed = width * height * dtype.itemsize
    raster = data[offset : offset + needed]
    if len(raster) != needed:
        raise ImageFormatError(f"PGM raster has {len(raster)} bytes, expected {needed}")
    samples = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    return samples.astype(np.float64) / maxval


def read_pgm(path: str | Path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"cannot read image {path}: {exc}") from exc
    return parse_pgm(data)


def encode_pgm(image: np.ndarray, maxval: int = PGM_MAXVAL) -> bytes:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ImageFormatError(f"PGM holds one 2-D slice, got shape {arr.shape}")
    samples = np.rint(np.clip(arr, 0.0, 1.0) * maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode("ascii")
    return header + samples.astype(dtype).tobytes()


def write_pgm(path: str | Path, image: np.ndarray, maxval: int = PGM_MAXVAL) -> None:
    try:
        Path(path).write_bytes(encode_pgm(image, maxval))
    except OSError as exc:
        raise ImageFormatError(f"cannot write image {path}: {exc}") from exc
    logger.debug("[cipherdenoise] Wrote %s", path)


def read_raw(path: str | Path, shape: tuple[int, int]) -> np.ndarray:
    """Little-endian float32 slice of the given (height, width)."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"cannot read image {path}: {exc}") from exc
    if len(data) != 4 * shape[0] * shape[1]:
        raise ImageFormatError(f"{path} holds {len(data)} bytes, not a {shape} float32 slice")
    return np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float64)


def write_raw(path: str | Path, image: np.ndarray) -> None:
    try:
        Path(path).write_bytes(np.asarray(image, dtype="<f4").tobytes())
    except OSError as exc:
        raise ImageFormatError(f"cannot write image {path}: {exc}") from exc


def load_image(path: str | Path, raw_shape: tuple[int, int] | None = None) -> np.ndarray:
    """PGM unless ``raw_shape`` says the file is a raw float32 slice."""
    if raw_shape is not None:
        return read_raw(path, raw_shape)
    return read_pgm(path)


def normalize_for_display(values: np.ndarray) -> np.ndarray:
    """Min-max scale any real array into [0, 1]."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return arr
    lo, hi = float(arr.min()), float(arr.max())
    if hi == lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def side_by_side(panels: list[np.ndarray], gap: int = 2) -> np.ndarray:
    """Concatenate equally tall 2-D panels horizontally with a blank gap."""
    height = panels[0].shape[0]
    spacer = np.zeros((height, gap))
    parts: list[np.ndarray] = []
    for index, panel in enumerate(panels):
        if panel.shape[0] != height:
            raise ImageFormatError("panels must share a height")
        if index:
            parts.append(spacer)
        parts.append(panel)
    return np.hstack(parts)
