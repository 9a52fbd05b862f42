"""Session data model and on-disk formats.

A session directory is described by a manifest, a small ``key = value`` text
file with the keys ``participant_id``, ``gamepad``, ``features``, ``trace``,
``duration_s`` and ``annotation_speed``; file paths are relative to the
manifest's directory.

Gamepad log: one record per line, ``t<TAB>action1+action2+...``, with the
literal ``nokey`` for an empty poll tick. Timestamps are seconds from session
start and must be non-decreasing.

Engagement trace: two-column CSV ``t,v`` with a header row. Timestamps must
be strictly increasing; values are unbounded reals.

Frame-feature container (``ENGFEAT1``): little-endian binary.

    offset  size  field
    0       8     magic ``ENGFEAT1``
    8       4     u32 layout tag (1 = MAPS, 2 = VECTORS)
    12      4     u32 frame count
    16      4     u32 C
    20      4     u32 H   (1 for VECTORS)
    24      4     u32 W   (1 for VECTORS)
    28      8     f64 fps
    36      ...   row-major f32 payload, frame count * C [* H * W] values

All readers are pure; loaded arrays are marked read-only so parsed sessions
can be shared across workers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"ENGFEAT1"
LAYOUT_MAPS = 1
LAYOUT_VECTORS = 2

MANIFEST_KEYS = ("participant_id", "gamepad", "features", "trace",
                 "duration_s", "annotation_speed")

# Canonical XBOX-style action names; order defines feature indices 0-24.
DEFAULT_ACTIONS = (
    "btn_a", "btn_b", "btn_x", "btn_y",
    "btn_lb", "btn_rb", "btn_lt", "btn_rt",
    "btn_start", "btn_back", "btn_guide",
    "btn_lstick", "btn_rstick",
    "dpad_up", "dpad_down", "dpad_left", "dpad_right",
    "lstick_up", "lstick_down", "lstick_left", "lstick_right",
    "rstick_up", "rstick_down", "rstick_left", "rstick_right",
)

NOKEY = "nokey"
MAX_COMBO = 6

DURATION_RANGE_S = (53 * 60.0, 65 * 60.0)


class DataError(Exception):
    """Malformed or inconsistent corpus data (CLI exit code 2)."""


class ActionVocabulary:
    """Ordered set of the 25 canonical gamepad action names."""

    def __init__(self, actions=DEFAULT_ACTIONS):
        actions = tuple(actions)
        if len(actions) != 25:
            raise DataError(f"vocabulary must have exactly 25 actions, got {len(actions)}")
        if len(set(actions)) != len(actions):
            raise DataError("vocabulary contains duplicate action names")
        self.actions = actions
        self._index = {name: i for i, name in enumerate(actions)}

    def __len__(self):
        return len(self.actions)

    def __contains__(self, name):
        return name in self._index

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise DataError(f"action {name!r} not in vocabulary") from None


DEFAULT_VOCABULARY = ActionVocabulary()


@dataclass(frozen=True)
class GamepadEvent:
    """One poll tick: up to 6 co-occurring actions, empty set = no key."""
    t: float
    pressed: frozenset


@dataclass(frozen=True)
class EngagementTrace:
    """Raw, unbounded annotation trace in annotation time."""
    t: np.ndarray
    v: np.ndarray
    source_speed_factor: float = 2.0


@dataclass(frozen=True)
class FrameFeatureStream:
    """Time-ordered per-frame features; timestamps are implicit at i / fps."""
    layout: int
    frames: np.ndarray  # (N, C) float32 for VECTORS, (N, C, H, W) for MAPS
    fps: float = 3.0

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def channels(self) -> int:
        return int(self.frames.shape[1])


@dataclass(frozen=True)
class Session:
    participant_id: str
    duration_s: float
    events: tuple
    features: FrameFeatureStream
    trace: EngagementTrace
    warnings: tuple = field(default_factory=tuple)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


# ---------------------------------------------------------------------------
# gamepad log
# ---------------------------------------------------------------------------

def write_gamepad_log(events, path):
    with open(path, "w") as f:
        for ev in events:
            spec = NOKEY if not ev.pressed else "+".join(sorted(ev.pressed))
            f.write(f"{float(ev.t)!r}\t{spec}\n")


def read_gamepad_log(path, vocabulary: ActionVocabulary = DEFAULT_VOCABULARY):
    events = []
    prev_t = -np.inf
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 't<TAB>actions', got {line!r}")
            try:
                t = float(parts[0])
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad timestamp {parts[0]!r}") from None
            if not np.isfinite(t) or t < 0:
                raise DataError(f"{path}:{lineno}: timestamp must be a non-negative real")
            if t < prev_t:
                raise DataError(f"{path}:{lineno}: timestamps decrease ({t} after {prev_t})")
            prev_t = t
            names = parts[1].split("+")
            if names == [NOKEY]:
                pressed = frozenset()
            else:
                if NOKEY in names:
                    raise DataError(f"{path}:{lineno}: '{NOKEY}' cannot be combined with actions")
                if len(set(names)) != len(names):
                    raise DataError(f"{path}:{lineno}: duplicate action in combo")
                if len(names) > MAX_COMBO:
                    raise DataError(f"{path}:{lineno}: combo of {len(names)} exceeds {MAX_COMBO}")
                for name in names:
                    if name not in vocabulary:
                        raise DataError(f"{path}:{lineno}: action {name!r} not in vocabulary")
                pressed = frozenset(names)
            events.append(GamepadEvent(t=t, pressed=pressed))
    return events


# ---------------------------------------------------------------------------
# engagement trace
# ---------------------------------------------------------------------------

def write_trace(trace: EngagementTrace, path):
    with open(path, "w") as f:
        f.write("t,v\n")
        for t, v in zip(trace.t, trace.v):
            f.write(f"{float(t)!r},{float(v)!r}\n")


def read_trace(path, source_speed_factor: float = 2.0) -> EngagementTrace:
    ts, vs = [], []
    with open(path) as f:
        header = f.readline().strip()
        if header != "t,v":
            raise DataError(f"{path}:1: expected header 't,v', got {header!r}")
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != 2:
                raise DataError(f"{path}:{lineno}: expected two columns")
            try:
                t, v = float(cells[0]), float(cells[1])
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad number in {line!r}") from None
            if not (np.isfinite(t) and np.isfinite(v)):
                raise DataError(f"{path}:{lineno}: non-finite trace sample")
            if ts and t <= ts[-1]:
                raise DataError(f"{path}:{lineno}: trace timestamps must strictly increase")
            ts.append(t)
            vs.append(v)
    if len(ts) < 2:
        raise DataError(f"{path}: trace needs at least 2 samples, got {len(ts)}")
    if source_speed_factor <= 0:
        raise DataError("annotation speed factor must be positive")
    return EngagementTrace(t=_readonly(np.asarray(ts, dtype=np.float64)),
                           v=_readonly(np.asarray(vs, dtype=np.float64)),
                           source_speed_factor=source_speed_factor)


# ---------------------------------------------------------------------------
# frame-feature container
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<IIIIId")  # layout, count, C, H, W, fps


def write_feature_file(stream: FrameFeatureStream, path):
    frames = np.ascontiguousarray(stream.frames, dtype=np.float32)
    if stream.layout == LAYOUT_VECTORS:
        if frames.ndim != 2:
            raise DataError(f"VECTORS layout expects (N, C) frames, got shape {frames.shape}")
        n, c = frames.shape
        h = w = 1
    elif stream.layout == LAYOUT_MAPS:
        if frames.ndim != 4:
            raise DataError(f"MAPS layout expects (N, C, H, W) frames, got shape {frames.shape}")
        n, c, h, w = frames.shape
    else:
        raise DataError(f"unknown layout tag {stream.layout}")
    for dim in (n, c, h, w):
        if not 0 < dim < 2**32:
            raise DataError(f"dimension {dim} overflows the u32 header field")
    if stream.fps <= 0:
        raise DataError("fps must be positive")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(_HEADER.pack(stream.layout, n, c, h, w, float(stream.fps)))
        f.write(frames.tobytes())


def read_feature_file(path) -> FrameFeatureStream:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != FEATURE_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
        header = f.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise DataError(f"{path}: truncated header")
        layout, n, c, h, w, fps = _HEADER.unpack(header)
        if layout not in (LAYOUT_MAPS, LAYOUT_VECTORS):
            raise DataError(f"{path}: unknown layout tag {layout}")
        if layout == LAYOUT_VECTORS and (h, w) != (1, 1):
            raise DataError(f"{path}: VECTORS layout must store H = W = 1")
        if fps <= 0 or not np.isfinite(fps):
            raise DataError(f"{path}: bad fps {fps}")
        expected = n * c * h * w * 4
        payload = f.read()
    if len(payload) != expected:
        got = len(payload) // (c * h * w * 4) if c * h * w else 0
        raise DataError(f"{path}: truncated payload, header promises {n} frames "
                        f"({expected} bytes) but file holds {got} ({len(payload)} bytes)")
    frames = np.frombuffer(payload, dtype="<f4").astype(np.float32, copy=True)
    shape = (n, c) if layout == LAYOUT_VECTORS else (n, c, h, w)
    return FrameFeatureStream(layout=layout, frames=_readonly(frames.reshape(shape)),
                              fps=float(fps))


# ---------------------------------------------------------------------------
# manifest and whole sessions
# ---------------------------------------------------------------------------

def read_keyvalue_file(path) -> dict:
    """Parse a ``key = value`` file; '#' starts a comment line."""
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def write_keyvalue_file(mapping: dict, path):
    with open(path, "w") as f:
        for key, value in mapping.items():
            f.write(f"{key} = {value}\n")


def write_session(session: Session, directory) -> Path:
    """Write all four session files; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_gamepad_log(session.events, directory / "gamepad.log")
    write_feature_file(session.features, directory / "features.bin")
    write_trace(session.trace, directory / "trace.csv")
    manifest = directory / "session.manifest"
    write_keyvalue_file({
        "participant_id": session.participant_id,
        "gamepad": "gamepad.log",
        "features": "features.bin",
        "trace": "trace.csv",
        "duration_s": repr(float(session.duration_s)),
        "annotation_speed": repr(float(session.trace.source_speed_factor)),
    }, manifest)
    return manifest


def read_session(manifest_path, vocabulary: ActionVocabulary = DEFAULT_VOCABULARY) -> Session:
    """Parse a session directory. The trace is returned raw (not normalized)."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    manifest = read_keyvalue_file(manifest_path)
    missing = [k for k in MANIFEST_KEYS if k not in manifest]
    if missing:
        raise DataError(f"{manifest_path}: missing manifest keys {missing}")
    base = manifest_path.parent
    for key in ("gamepad", "features", "trace"):
        if not (base / manifest[key]).exists():
            raise DataError(f"{manifest_path}: referenced file missing: {manifest[key]}")
    try:
        duration_s = float(manifest["duration_s"])
        speed = float(manifest["annotation_speed"])
    except ValueError:
        raise DataError(f"{manifest_path}: duration_s and annotation_speed must be numbers") from None
    if duration_s <= 0:
        raise DataError(f"{manifest_path}: duration_s must be positive")

    events = read_gamepad_log(base / manifest["gamepad"], vocabulary)
    features = read_feature_file(base / manifest["features"])
    trace = read_trace(base / manifest["trace"], source_speed_factor=speed)

    warnings = []
    if events and events[-1].t > duration_s:
        raise DataError(f"{manifest_path}: gamepad log runs past duration_s "
                        f"({events[-1].t} > {duration_s})")
    lo, hi = DURATION_RANGE_S
    if not lo <= duration_s <= hi:
        warnings.append(f"duration {duration_s:.1f} s outside the corpus range "
                        f"[{lo:.0f}, {hi:.0f}] s")
    expected_frames = features.fps * duration_s
    if abs(features.n_frames - expected_frames) > 1:
        warnings.append(f"frame count {features.n_frames} deviates from "
                        f"fps * duration = {expected_frames:.1f} by more than 1")
    return Session(participant_id=manifest["participant_id"], duration_s=duration_s,
                   events=tuple(events), features=features, trace=trace,
                   warnings=tuple(warnings))
