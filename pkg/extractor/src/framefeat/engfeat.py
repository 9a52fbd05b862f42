"""Writer for the ENGFEAT1 frame-feature container.

Independent implementation of the wire format consumed by the engagement
pipeline, little-endian:

    8 bytes   magic ``ENGFEAT1``
    5 x u32   layout tag (1 = MAPS, 2 = VECTORS), frame count, C, H, W
    1 x f64   fps
    payload   row-major float32, frame count * C [* H * W] values

Files are written atomically (temp file + rename) so a crashed run never
leaves a truncated container behind.
"""

import os
import struct
import tempfile

import numpy as np

MAGIC = b"ENGFEAT1"
LAYOUT_MAPS = 1
LAYOUT_VECTORS = 2

_HEADER = struct.Struct("<IIIIId")


def write_engfeat(frames: np.ndarray, fps: float, path) -> None:
    """frames: (N, C) float32 for VECTORS or (N, C, H, W) float32 for MAPS."""
    frames = np.ascontiguousarray(frames, dtype=np.float32)
    if frames.ndim == 2:
        layout = LAYOUT_VECTORS
        n, c = frames.shape
        h = w = 1
    elif frames.ndim == 4:
        layout = LAYOUT_MAPS
        n, c, h, w = frames.shape
    else:
        raise ValueError(f"frames must be (N, C) or (N, C, H, W), got {frames.shape}")
    if fps <= 0:
        raise ValueError("fps must be positive")
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(_HEADER.pack(layout, n, c, h, w, float(fps)))
            f.write(frames.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
