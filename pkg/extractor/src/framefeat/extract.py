"""Frame feature extraction with a frozen pretrained image backbone.

A video (or a directory of frame images) is sampled at 3 fps by picking the
nearest decoded frame to each tick, resized to 224x224 RGB, normalized with
the standard ImageNet statistics (mean 0.485/0.456/0.406, std
0.229/0.224/0.225), and pushed through a ResNet18 trunk truncated before its
average pool, which yields 512 feature maps of 7x7 per frame. Output is
written as an ENGFEAT1 container in either layout:

    maps      the raw (N, 512, 7, 7) trunk output
    vectors   the spatial max over each 7x7 map, (N, 512)

so a MAPS file pooled downstream matches the VECTORS file exactly.

Backbones: ``resnet18-imagenet`` (frozen ImageNet weights, downloaded by
torchvision) or ``resnet18-random`` (frozen seeded random weights; useful for
format-level work and tests when no weights are available). Extraction runs
in inference mode and is deterministic for a fixed backbone and input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn as nn
from torchvision.models import ResNet18_Weights, resnet18

from .engfeat import write_engfeat

IMAGE_SIZE = 224
CHANNELS = 512
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class ExtractError(Exception):
    pass


@dataclass(frozen=True)
class ExtractorConfig:
    input_path: str
    output_path: str
    fps: float = 3.0
    layout: str = "vectors"            # "maps" | "vectors"
    backbone: str = "resnet18-imagenet"
    source_fps: float = None           # image dirs only; default: treat as fps
    batch_size: int = 16
    seed: int = 0                      # resnet18-random only

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if self.layout not in ("maps", "vectors"):
            raise ValueError(f"layout must be 'maps' or 'vectors', got {self.layout!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


def load_backbone(name: str, seed: int = 0) -> nn.Module:
    """ResNet18 trunk ending at the 512x7x7 feature maps, frozen."""
    if name == "resnet18-imagenet":
        model = resnet18(weights=ResNet18_Weights.IMAGENET1K_V1)
    elif name == "resnet18-random":
        torch.manual_seed(seed)
        model = resnet18(weights=None)
    else:
        raise ExtractError(f"unknown backbone {name!r}; expected "
                           "'resnet18-imagenet' or 'resnet18-random'")
    trunk = nn.Sequential(*list(model.children())[:-2])
    trunk.eval()
    for p in trunk.parameters():
        p.requires_grad_(False)
    return trunk


def _decode_video(path: Path):
    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise ExtractError(f"cannot decode video: {path}")
    src_fps = cap.get(cv2.CAP_PROP_FPS)
    if not src_fps or src_fps <= 0:
        cap.release()
        raise ExtractError(f"video reports no frame rate: {path}")
    frames = []
    while True:
        ok, frame = cap.read()
        if not ok:
            break
        frames.append(frame)
    cap.release()
    if not frames:
        raise ExtractError(f"video holds no decodable frames: {path}")
    return frames, float(src_fps)


def _load_image_dir(path: Path, source_fps: float):
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ExtractError(f"no frame images under {path}")
    frames = []
    for file in files:
        img = cv2.imread(str(file))
        if img is None:
            raise ExtractError(f"cannot decode image: {file}")
        frames.append(img)
    return frames, float(source_fps)


def sample_ticks(n_frames: int, src_fps: float, fps: float) -> np.ndarray:
    """Nearest decoded frame to each 1/fps tick over the source duration."""
    duration = n_frames / src_fps
    n_ticks = int(math.ceil(duration * fps - 1e-9))
    ticks = np.arange(n_ticks, dtype=np.float64) / fps
    idx = np.rint(ticks * src_fps).astype(np.int64)
    return np.clip(idx, 0, n_frames - 1)


def _preprocess(frames_bgr) -> torch.Tensor:
    batch = np.empty((len(frames_bgr), IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    for i, frame in enumerate(frames_bgr):
        resized = cv2.resize(frame, (IMAGE_SIZE, IMAGE_SIZE), interpolation=cv2.INTER_AREA)
        rgb = cv2.cvtColor(resized, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0
        batch[i] = (rgb - IMAGENET_MEAN) / IMAGENET_STD
    return torch.from_numpy(batch.transpose(0, 3, 1, 2))


def extract(config: ExtractorConfig) -> Path:
    """Run the extractor; returns the output path.

    The output file is one feature record per sampled frame and reads back
    through the pipeline's feature-file reader.
    """
    input_path = Path(config.input_path)
    if not input_path.exists():
        raise ExtractError(f"input not found: {input_path}")
    if input_path.is_dir():
        source_fps = config.source_fps if config.source_fps else config.fps
        frames, src_fps = _load_image_dir(input_path, source_fps)
    else:
        frames, src_fps = _decode_video(input_path)

    idx = sample_ticks(len(frames), src_fps, config.fps)
    sampled = [frames[i] for i in idx]
    trunk = load_backbone(config.backbone, config.seed)

    maps = np.empty((len(sampled), CHANNELS, 7, 7), dtype=np.float32)
    with torch.inference_mode():
        for lo in range(0, len(sampled), config.batch_size):
            chunk = sampled[lo:lo + config.batch_size]
            out = trunk(_preprocess(chunk))
            maps[lo:lo + len(chunk)] = out.numpy()

    if config.layout == "vectors":
        features = maps.max(axis=(2, 3))
    else:
        features = maps
    write_engfeat(features, config.fps, config.output_path)
    return Path(config.output_path)
