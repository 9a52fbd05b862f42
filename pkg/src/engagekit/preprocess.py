"""Turn sessions into labeled 10-second windows.

Each session is split into overlapping windows. The annotation window
[t, t + 10) supplies the label from the normalized engagement trace; the
stimulus window [t - 1, t + 9), shifted 1 s earlier to absorb reaction
latency, supplies the gamepad and frame features. A window whose mean
engagement falls inside the ambiguity band ``mu +- epsilon`` around the
participant's whole-trace mean is dropped.

The emitted windows file is a CSV (one row per labeled window: participant,
annotation start, coarse time level, label, audit mean, frame offset, and the
31 gamepad frequencies) plus a JSON sidecar with the window spec, per-session
means and counts, and feature-file references.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from enum import Enum
from pathlib import Path

import numpy as np

from .corpus import (ActionVocabulary, DEFAULT_VOCABULARY, DataError,
                     FrameFeatureStream, Session)

N_GAMEPAD_FEATURES = 31
NOKEY_INDEX = 25
COMBO_BASE_INDEX = 26  # combos of size 2..6 occupy indices 26..30

T_LEVEL_BLOCK_S = 1200.0  # 20-minute coarse time blocks


class FlatTraceError(DataError):
    """Trace with zero value range carries no engagement signal."""


class Label(Enum):
    LOW = 0
    HIGH = 1
    AMBIGUOUS = 2


@dataclass(frozen=True)
class WindowSpec:
    window_s: float = 10.0
    stride_s: float = 1.5
    stimulus_shift_s: float = 1.0
    frame_fps: float = 3.0
    trace_hz: float = 30.0
    epsilon: float = 0.05

    def __post_init__(self):
        for name in ("window_s", "stride_s", "stimulus_shift_s", "frame_fps", "trace_hz"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.stimulus_shift_s >= self.window_s:
            raise ValueError("stimulus_shift_s must be smaller than window_s")
        if not 0 <= self.epsilon < 0.5:
            raise ValueError("epsilon must lie in [0, 0.5)")

    @property
    def frames_per_window(self) -> int:
        return int(round(self.frame_fps * self.window_s))


@dataclass(frozen=True)
class Window:
    """One window pair: annotation [t, t+w) and stimulus [t-shift, t-shift+w)."""
    t_start: float           # annotation window start
    stimulus_start: float


@dataclass(frozen=True)
class NormalizedTrace:
    """Trace resampled on a uniform grid over [0, duration], min 0 and max 1."""
    values: np.ndarray
    hz: float


@dataclass(frozen=True)
class LabeledWindow:
    participant_id: str
    t_start: float
    gamepad: np.ndarray      # (31,) frequencies in Hz
    frame_offset: int        # index of the window's first frame record
    label: Label
    t_level: int
    e_mean: float


@dataclass
class SessionWindows:
    """All labeled windows of one session plus bookkeeping for the files."""
    participant_id: str
    mu: float
    windows: list
    n_ambiguous: int
    features_path: str = ""  # relative to the corpus root, filled by the CLI
    fps: float = 3.0
    layout: int = 0
    n_frames: int = 0
    duration_s: float = 0.0
    warnings: list = field(default_factory=list)


def normalize_and_rescale_trace(trace, duration_s: float, trace_hz: float = 30.0) -> NormalizedTrace:
    """Rescale the trace time axis onto [0, duration_s], resample it uniformly
    at trace_hz by linear interpolation, then min-max normalize to [0, 1]."""
    if duration_s <= 0:
        raise DataError("duration_s must be positive")
    t = np.asarray(trace.t, dtype=np.float64)
    v = np.asarray(trace.v, dtype=np.float64)
    if t.size < 2:
        raise DataError("trace needs at least 2 samples")
    span = t[-1] - t[0]
    rescaled_t = (t - t[0]) * (duration_s / span)
    n = int(math.floor(duration_s * trace_hz)) + 1
    grid = np.arange(n, dtype=np.float64) / trace_hz
    resampled = np.interp(grid, rescaled_t, v)
    vmin = resampled.min()
    vmax = resampled.max()
    if vmax == vmin:
        raise FlatTraceError(f"flat trace (constant value {vmin}); no engagement signal")
    values = (resampled - vmin) / (vmax - vmin)
    values.flags.writeable = False
    return NormalizedTrace(values=values, hz=float(trace_hz))


def segment_windows(duration_s: float, spec: WindowSpec) -> list:
    """Annotation windows start at shift, shift + stride, ...; the last window
    must fit fully inside the session for both the annotation and stimulus
    ranges. Returns [] when the session is too short."""
    usable = duration_s - spec.window_s - spec.stimulus_shift_s
    if usable < 0:
        return []
    count = int(math.floor(usable / spec.stride_s)) + 1
    return [Window(t_start=spec.stimulus_shift_s + k * spec.stride_s,
                   stimulus_start=k * spec.stride_s)
            for k in range(count)]


def _count_gamepad(events, window_s: float, vocabulary: ActionVocabulary) -> np.ndarray:
    counts = np.zeros(N_GAMEPAD_FEATURES, dtype=np.float64)
    for ev in events:
        n = len(ev.pressed)
        if n == 0:
            counts[NOKEY_INDEX] += 1.0
            continue
        for name in ev.pressed:
            counts[vocabulary.index(name)] += 1.0
        if n >= 2:
            counts[COMBO_BASE_INDEX + n - 2] += 1.0
    return counts / window_s


def gamepad_features(events, stimulus_start: float, spec: WindowSpec,
                     vocabulary: ActionVocabulary = DEFAULT_VOCABULARY) -> np.ndarray:
    """31 per-window frequencies: 25 per-action press rates, one no-key rate,
    and 5 combo rates for combo sizes 2..6, each count / window_s."""
    end = stimulus_start + spec.window_s
    in_window = [ev for ev in events if stimulus_start <= ev.t < end]
    return _count_gamepad(in_window, spec.window_s, vocabulary)


def _grid_index(t: float, rate: float) -> int:
    # first grid index k with k / rate >= t, guarded against fp dust
    return int(math.ceil(t * rate - 1e-9))


def frame_indices(stream: FrameFeatureStream, stimulus_start: float, spec: WindowSpec) -> np.ndarray:
    """Indices of the frame records for one stimulus window, padded or
    truncated to exactly spec.frames_per_window entries. Records short of the
    target repeat the last in-window record."""
    target = spec.frames_per_window
    i0 = max(_grid_index(stimulus_start, stream.fps), 0)
    i1 = min(_grid_index(stimulus_start + spec.window_s, stream.fps), stream.n_frames)
    if i1 <= i0:
        raise DataError(f"feature stream does not overlap window starting at {stimulus_start}")
    idx = np.arange(i0, i1, dtype=np.int64)
    if idx.size > target:
        idx = idx[:target]
    elif idx.size < target:
        idx = np.concatenate([idx, np.full(target - idx.size, idx[-1], dtype=np.int64)])
    return idx


def frame_window(stream: FrameFeatureStream, stimulus_start: float, spec: WindowSpec) -> np.ndarray:
    """Materialize the window's frame tensor, shape (30, C) or (30, C, H, W)."""
    return stream.frames[frame_indices(stream, stimulus_start, spec)]


def label_window(norm: NormalizedTrace, t_start: float, window_s: float,
                 mu: float, epsilon: float):
    """Label one annotation window by the mu +- epsilon rule. Returns
    (label, e_mean) where e_mean is the window's mean normalized engagement."""
    i0 = _grid_index(t_start, norm.hz)
    i1 = _grid_index(t_start + window_s, norm.hz)
    if i0 < 0 or i1 > norm.values.size or i1 <= i0:
        raise DataError(f"annotation window [{t_start}, {t_start + window_s}) "
                        "outside trace support")
    e_mean = float(norm.values[i0:i1].mean())
    if e_mean > mu + epsilon:
        return Label.HIGH, e_mean
    if e_mean < mu - epsilon:
        return Label.LOW, e_mean
    return Label.AMBIGUOUS, e_mean


def t_level(t_start: float) -> int:
    """Coarse session timestep: 1, 2 or 3 by 20-minute block of the window start."""
    if t_start < 0:
        raise ValueError("t_start must be non-negative")
    return min(int(t_start // T_LEVEL_BLOCK_S), 2) + 1


def build_windows(session: Session, spec: WindowSpec = WindowSpec(),
                  vocabulary: ActionVocabulary = DEFAULT_VOCABULARY) -> SessionWindows:
    """Run the full per-session pipeline; ambiguous windows are dropped."""
    norm = normalize_and_rescale_trace(session.trace, session.duration_s, spec.trace_hz)
    mu = float(norm.values.mean())
    windows = segment_windows(session.duration_s, spec)
    result = SessionWindows(participant_id=session.participant_id, mu=mu, windows=[],
                            n_ambiguous=0, fps=session.features.fps,
                            layout=session.features.layout,
                            n_frames=session.features.n_frames,
                            duration_s=session.duration_s,
                            warnings=list(session.warnings))
    if not windows:
        result.warnings.append(f"session shorter than one window "
                               f"({session.duration_s} s); no windows emitted")
        return result

    event_times = np.array([ev.t for ev in session.events], dtype=np.float64)
    for win in windows:
        label, e_mean = label_window(norm, win.t_start, spec.window_s, mu, spec.epsilon)
        if label is Label.AMBIGUOUS:
            result.n_ambiguous += 1
            continue
        lo = int(np.searchsorted(event_times, win.stimulus_start, side="left"))
        hi = int(np.searchsorted(event_times, win.stimulus_start + spec.window_s, side="left"))
        feats = _count_gamepad(session.events[lo:hi], spec.window_s, vocabulary)
        offset = int(frame_indices(session.features, win.stimulus_start, spec)[0])
        result.windows.append(LabeledWindow(
            participant_id=session.participant_id, t_start=win.t_start,
            gamepad=feats, frame_offset=offset, label=label,
            t_level=t_level(win.t_start), e_mean=e_mean))
    return result


# ---------------------------------------------------------------------------
# windows file
# ---------------------------------------------------------------------------

WINDOWS_CSV = "windows.csv"
WINDOWS_META = "windows_meta.json"


def write_windows_file(results, spec: WindowSpec, vocabulary: ActionVocabulary, out_dir):
    """Write windows.csv and windows_meta.json into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = ["participant_id", "t_start", "t_level", "label", "e_mean", "frame_offset"]
    header += [f"g{i:02d}" for i in range(N_GAMEPAD_FEATURES)]
    with open(out_dir / WINDOWS_CSV, "w") as f:
        f.write(",".join(header) + "\n")
        for res in results:
            for w in res.windows:
                row = [w.participant_id, repr(float(w.t_start)), str(w.t_level),
                       w.label.name, repr(float(w.e_mean)), str(w.frame_offset)]
                row += [repr(float(x)) for x in w.gamepad]
                f.write(",".join(row) + "\n")
    meta = {
        "spec": asdict(spec),
        "vocabulary": list(vocabulary.actions),
        "sessions": {
            res.participant_id: {
                "mu": res.mu,
                "n_high": sum(1 for w in res.windows if w.label is Label.HIGH),
                "n_low": sum(1 for w in res.windows if w.label is Label.LOW),
                "n_ambiguous": res.n_ambiguous,
                "features_path": res.features_path,
                "fps": res.fps,
                "layout": res.layout,
                "n_frames": res.n_frames,
                "duration_s": res.duration_s,
                "warnings": list(res.warnings),
            }
            for res in results
        },
    }
    with open(out_dir / WINDOWS_META, "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def read_windows_file(windows_dir):
    """Load windows.csv + windows_meta.json; returns (meta, columns) where
    columns is a dict of numpy arrays over all windows."""
    windows_dir = Path(windows_dir)
    csv_path = windows_dir / WINDOWS_CSV
    meta_path = windows_dir / WINDOWS_META
    for p in (csv_path, meta_path):
        if not p.exists():
            raise DataError(f"missing windows file: {p}")
    with open(meta_path) as f:
        meta = json.load(f)
    pids, t_starts, t_levels, labels, e_means, offsets, feats = [], [], [], [], [], [], []
    with open(csv_path) as f:
        header = f.readline().rstrip("\n").split(",")
        if len(header) != 6 + N_GAMEPAD_FEATURES or header[0] != "participant_id":
            raise DataError(f"{csv_path}: unexpected header")
        for lineno, line in enumerate(f, start=2):
            cells = line.rstrip("\n").split(",")
            if len(cells) != len(header):
                raise DataError(f"{csv_path}:{lineno}: expected {len(header)} columns")
            pids.append(cells[0])
            t_starts.append(float(cells[1]))
            t_levels.append(int(cells[2]))
            if cells[3] not in ("LOW", "HIGH"):
                raise DataError(f"{csv_path}:{lineno}: bad label {cells[3]!r}")
            labels.append(Label[cells[3]].value)
            e_means.append(float(cells[4]))
            offsets.append(int(cells[5]))
            feats.append([float(x) for x in cells[6:]])
    columns = {
        "participant_id": np.array(pids),
        "t_start": np.array(t_starts, dtype=np.float64),
        "t_level": np.array(t_levels, dtype=np.int64),
        "label": np.array(labels, dtype=np.int64),
        "e_mean": np.array(e_means, dtype=np.float64),
        "frame_offset": np.array(offsets, dtype=np.int64),
        "gamepad": np.array(feats, dtype=np.float64).reshape(len(pids), N_GAMEPAD_FEATURES),
    }
    return meta, columns
