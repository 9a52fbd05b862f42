"""Synthetic sessions with a planted stimulus-to-engagement relationship.

A latent binary state (combat vs exploration) alternates in random-length
segments. The engagement trace follows a 5-second moving average of the
state plus smoothed noise and a per-participant affine disguise (min-max
normalization strips the latter). Gamepad polls draw actions from a
state-dependent profile and frame features get a state-dependent mean shift
along a planted unit direction; both separations scale with
``effect_strength``, so zero effect makes every feature independent of the
labels.

``time_drift`` interpolates a reversal of the planted mapping inside the
middle 20-minute block (multiplier 1 - 2*drift, i.e. full sign flip at 1.0).
A plain model then sees contradictory mappings across blocks, while a
time-conditioned model can undo the flip with a per-block scale.

``modality_dropout`` gates each modality's signal off per segment with the
given probability, independently per modality, making the two modalities
complementary: a unimodal model is blind in its gated segments while the
fused model rarely loses both signals at once.

The planted directions are corpus-global; per-participant generators only
drive segment timing, noise and the affine disguise, so the signal
generalizes across held-out participants.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import corpus, nn
from .corpus import (DEFAULT_VOCABULARY, EngagementTrace, FrameFeatureStream,
                     GamepadEvent, LAYOUT_VECTORS, Session)
from .preprocess import t_level

_KEY_SYNTH_GLOBAL = 303
_KEY_SYNTH_PARTICIPANT = 304

_COMBO_SIZES = np.array([2, 3, 4, 5, 6])
_COMBO_PROBS = np.array([0.50, 0.25, 0.15, 0.07, 0.03])

# scales the action-profile tilt per unit of effect_strength
_GAMEPAD_EFFECT_SCALE = 2.0
_TRACE_SMOOTH_S = 5.0
_TRACE_NOISE_SMOOTH_S = 2.0

CONFIG_ECHO = "synth_config.json"


@dataclass(frozen=True)
class SynthConfig:
    n_participants: int = 20
    duration_s: float = 3600.0
    combat_segment_s: float = 45.0
    effect_strength: float = 1.0
    time_drift: float = 0.0
    noise_sd: float = 1.0
    modality_dropout: float = 0.0
    seed: int = 0
    poll_hz: float = 4.0
    press_prob: float = 0.65
    combo_prob: float = 0.15
    frame_fps: float = 3.0
    channels: int = 512
    trace_raw_hz: float = 10.0
    annotation_speed: float = 2.0
    trace_noise: float = 0.08

    def __post_init__(self):
        if self.n_participants < 1:
            raise ValueError("n_participants must be at least 1")
        for name in ("duration_s", "combat_segment_s", "poll_hz", "frame_fps",
                     "trace_raw_hz", "annotation_speed"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.effect_strength < 0:
            raise ValueError("effect_strength must be non-negative")
        if self.noise_sd < 0 or self.trace_noise < 0:
            raise ValueError("noise levels must be non-negative")
        if not 0.0 <= self.press_prob <= 1.0 or not 0.0 <= self.combo_prob <= 1.0:
            raise ValueError("press_prob and combo_prob must lie in [0, 1]")
        if not 0.0 <= self.modality_dropout < 1.0:
            raise ValueError("modality_dropout must lie in [0, 1)")
        if self.channels < 1:
            raise ValueError("channels must be positive")
        if self.duration_s < 4 * self.combat_segment_s:
            raise ValueError("duration must cover at least a few segments "
                             "(duration_s >= 4 * combat_segment_s)")


def participant_id(index: int) -> str:
    return f"p{index:02d}"


def _planted_directions(config: SynthConfig):
    rng = nn.make_rng(config.seed, _KEY_SYNTH_GLOBAL)
    delta = rng.normal(size=len(DEFAULT_VOCABULARY.actions))
    delta -= delta.mean()
    delta /= np.linalg.norm(delta)
    u = rng.normal(size=config.channels)
    u /= np.linalg.norm(u)
    return delta, u


def _block_multipliers(times, drift: float) -> np.ndarray:
    """Mapping multiplier per timestamp: 1 in blocks 1 and 3, 1 - 2*drift in
    block 2 (a full reversal at drift = 1)."""
    levels = np.fromiter((t_level(float(t)) for t in np.asarray(times).ravel()),
                         dtype=np.int64)
    out = np.ones(levels.size, dtype=np.float64)
    out[levels == 2] = 1.0 - 2.0 * drift
    return out


def _segment_states(rng, duration_s: float, mean_segment_s: float):
    """Alternating latent states in segments of length U(0.5, 1.5) * mean."""
    starts, states = [0.0], [int(rng.integers(0, 2))]
    t = 0.0
    while True:
        t += float(rng.uniform(0.5, 1.5) * mean_segment_s)
        if t >= duration_s:
            break
        starts.append(t)
        states.append(1 - states[-1])
    return np.asarray(starts), np.asarray(states, dtype=np.int64)


def _segment_index_at(starts, times) -> np.ndarray:
    pos = np.searchsorted(starts, np.asarray(times, dtype=np.float64), side="right") - 1
    return np.clip(pos, 0, starts.size - 1)


def _state_at(starts, states, times) -> np.ndarray:
    return states[_segment_index_at(starts, times)]


def _edge_safe_moving_average(x: np.ndarray, half: int) -> np.ndarray:
    """Centered moving average whose window shrinks at the edges."""
    n = x.size
    csum = np.concatenate([[0.0], np.cumsum(x)])
    lo = np.maximum(np.arange(n) - half, 0)
    hi = np.minimum(np.arange(n) + half + 1, n)
    return (csum[hi] - csum[lo]) / (hi - lo)


def _profiles(delta: np.ndarray, effect: float, multiplier: float):
    """Action distributions (combat, explore) for one block multiplier."""
    tilt = _GAMEPAD_EFFECT_SCALE * effect * multiplier * delta
    combat = np.exp(tilt)
    explore = np.exp(-tilt)
    return combat / combat.sum(), explore / explore.sum()


def _generate_events(config: SynthConfig, rng, starts, states, delta, gate):
    n_polls = int(np.ceil(config.duration_s * config.poll_hz))
    times = np.arange(n_polls, dtype=np.float64) / config.poll_hz
    poll_states = _state_at(starts, states, times)
    multipliers = _block_multipliers(times, config.time_drift)
    multipliers = multipliers * gate[_segment_index_at(starts, times)]
    pressed = rng.random(n_polls) < config.press_prob
    combo = rng.random(n_polls) < config.combo_prob
    sizes = rng.choice(_COMBO_SIZES, size=n_polls, p=_COMBO_PROBS)
    actions = DEFAULT_VOCABULARY.actions
    profile_cache = {}
    events = []
    for j in range(n_polls):
        if not pressed[j]:
            events.append(GamepadEvent(t=times[j], pressed=frozenset()))
            continue
        key = (int(poll_states[j]), float(multipliers[j]))
        if key not in profile_cache:
            combat_p, explore_p = _profiles(delta, config.effect_strength, key[1])
            profile_cache[(1, key[1])] = combat_p
            profile_cache[(0, key[1])] = explore_p
        profile = profile_cache[key]
        n = int(sizes[j]) if combo[j] else 1
        chosen = rng.choice(len(actions), size=n, replace=False, p=profile)
        events.append(GamepadEvent(t=times[j],
                                   pressed=frozenset(actions[i] for i in chosen)))
    return events


def _generate_frames(config: SynthConfig, rng, starts, states, u, gate) -> FrameFeatureStream:
    n_frames = int(np.ceil(config.duration_s * config.frame_fps))
    times = np.arange(n_frames, dtype=np.float64) / config.frame_fps
    frame_states = _state_at(starts, states, times).astype(np.float64)
    multipliers = _block_multipliers(times, config.time_drift)
    multipliers = multipliers * gate[_segment_index_at(starts, times)]
    shift = config.effect_strength * multipliers * (frame_states - 0.5)
    features = rng.normal(0.0, config.noise_sd, size=(n_frames, config.channels))
    features += np.outer(shift, u)
    return FrameFeatureStream(layout=LAYOUT_VECTORS,
                              frames=features.astype(np.float32), fps=config.frame_fps)


def _generate_trace(config: SynthConfig, rng, starts, states) -> EngagementTrace:
    hz = config.trace_raw_hz
    n = int(np.floor(config.duration_s * hz)) + 1
    video_t = np.arange(n, dtype=np.float64) / hz
    state_series = _state_at(starts, states, video_t).astype(np.float64)
    smooth = _edge_safe_moving_average(state_series, int(round(_TRACE_SMOOTH_S * hz / 2)))
    white = rng.normal(size=n)
    m = max(int(round(_TRACE_NOISE_SMOOTH_S * hz)), 1)
    noise = _edge_safe_moving_average(white, m // 2) * np.sqrt(m) * config.trace_noise
    offset = rng.uniform(0.0, 10.0)
    gain = rng.uniform(5.0, 15.0)
    values = offset + gain * (smooth + noise)
    annotation_t = video_t / config.annotation_speed
    return EngagementTrace(t=annotation_t, v=values,
                           source_speed_factor=config.annotation_speed)


def generate_session(config: SynthConfig, index: int, delta=None, u=None) -> Session:
    if delta is None or u is None:
        delta, u = _planted_directions(config)
    rng = nn.make_rng(config.seed, _KEY_SYNTH_PARTICIPANT, index)
    starts, states = _segment_states(rng, config.duration_s, config.combat_segment_s)
    # per-segment signal gates, one column per modality (gamepad, frames)
    gates = (rng.random((starts.size, 2)) >= config.modality_dropout).astype(np.float64)
    events = _generate_events(config, rng, starts, states, delta, gates[:, 0])
    features = _generate_frames(config, rng, starts, states, u, gates[:, 1])
    trace = _generate_trace(config, rng, starts, states)
    return Session(participant_id=participant_id(index), duration_s=config.duration_s,
                   events=tuple(events), features=features, trace=trace)


def generate(config: SynthConfig):
    """All sessions of a synthetic corpus; same seed, same corpus."""
    delta, u = _planted_directions(config)
    return [generate_session(config, i, delta, u)
            for i in range(config.n_participants)]


def write_corpus(config: SynthConfig, out_dir) -> list:
    """Generate and serialize a corpus through the real file formats.

    Returns the manifest paths. The resolved config is echoed next to the
    sessions for provenance.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifests = []
    for session in generate(config):
        manifests.append(corpus.write_session(session, out_dir / session.participant_id))
    with open(out_dir / CONFIG_ECHO, "w") as f:
        json.dump(asdict(config), f, indent=2, sort_keys=True)
        f.write("\n")
    return manifests
