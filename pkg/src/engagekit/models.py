"""The three engagement classifiers: gamepad, frames, and late fusion.

Widths are fixed per modality:

    gamepad  31 -> 30 (gelu) -> 2 (softmax)
    frames   pool -> 512 -> 128 (gelu, dropout .1) -> 30 (gelu, dropout .1) -> 2
    fusion   gamepad 30-latent (+) frames 30-latent -> 60 -> 32 (gelu) -> 2

Conditioning sites:

    sll/ssll  the input of the last hidden layer (gamepad: the 31 input,
              frames: the 128 vector, fusion: the 60 concat)
    ssal      the input of every dense layer plus the pre-softmax logits
              (gamepad: 31/30/2, frames: 512/128/30/2,
               fusion: 31/512/128 in the branches and 60/32/2 in the head)

Conditioning nodes draw nothing from the generator, so models built from the
same seed share dense weights across strategies.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import nn, timecond
from .nn import Chain, Context, Dense, Dropout, FramePool, Gelu, Network
from .timecond import SCALE_SHIFT, SHIFT, Strategy

GAMEPAD_IN = 31
GAMEPAD_HIDDEN = 30
FRAMES_IN = 512
FRAMES_HIDDEN = (128, 30)
FUSION_CONCAT = 60
FUSION_HIDDEN = 32
N_CLASSES = 2

MODALITIES = ("gamepad", "frames", "fusion")


@dataclass(frozen=True)
class ModelConfig:
    modality: str
    conditioning: str = "none"
    seed: int = 0
    dropout_p: float = 0.1
    embed_dim: int = timecond.DEFAULT_EMBED_DIM
    embed_base: float = timecond.DEFAULT_EMBED_BASE

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}; expected one of {MODALITIES}")
        Strategy.parse(self.conditioning)

    def to_dict(self) -> dict:
        return asdict(self)


class _Sites:
    """Conditioning-node factory for one build."""

    def __init__(self, config: ModelConfig):
        self.strategy = Strategy.parse(config.conditioning)
        self.dim = config.embed_dim

    def ssal(self, n: int):
        if self.strategy is Strategy.SSAL:
            return timecond.Condition(n, SCALE_SHIFT, self.dim)
        return None

    def last_hidden(self, n: int):
        if self.strategy is Strategy.SLL:
            return timecond.Condition(n, SHIFT, self.dim)
        if self.strategy is Strategy.SSLL:
            return timecond.Condition(n, SCALE_SHIFT, self.dim)
        return None


def _chain(*nodes) -> Chain:
    return Chain([node for node in nodes if node is not None])


def build_gamepad_model(config: ModelConfig, rng=None) -> Network:
    rng = rng or nn.make_rng(config.seed)
    sites = _Sites(config)
    head = _chain(
        sites.last_hidden(GAMEPAD_IN),
        sites.ssal(GAMEPAD_IN),
        Dense(GAMEPAD_IN, GAMEPAD_HIDDEN, rng),
        Gelu(),
        sites.ssal(GAMEPAD_HIDDEN),
        Dense(GAMEPAD_HIDDEN, N_CLASSES, rng),
        sites.ssal(N_CLASSES),
    )
    return Network({"gamepad": Chain([])}, head, config.to_dict())


def build_frames_model(config: ModelConfig, rng=None) -> Network:
    rng = rng or nn.make_rng(config.seed)
    sites = _Sites(config)
    head = _chain(
        FramePool(),
        sites.ssal(FRAMES_IN),
        Dense(FRAMES_IN, FRAMES_HIDDEN[0], rng),
        Gelu(),
        Dropout(config.dropout_p),
        sites.last_hidden(FRAMES_HIDDEN[0]),
        sites.ssal(FRAMES_HIDDEN[0]),
        Dense(FRAMES_HIDDEN[0], FRAMES_HIDDEN[1], rng),
        Gelu(),
        Dropout(config.dropout_p),
        sites.ssal(FRAMES_HIDDEN[1]),
        Dense(FRAMES_HIDDEN[1], N_CLASSES, rng),
        sites.ssal(N_CLASSES),
    )
    return Network({"frames": Chain([])}, head, config.to_dict())


def build_fusion_model(config: ModelConfig, rng=None) -> Network:
    rng = rng or nn.make_rng(config.seed)
    sites = _Sites(config)
    gamepad = _chain(
        sites.ssal(GAMEPAD_IN),
        Dense(GAMEPAD_IN, GAMEPAD_HIDDEN, rng),
        Gelu(),
    )
    frames = _chain(
        FramePool(),
        sites.ssal(FRAMES_IN),
        Dense(FRAMES_IN, FRAMES_HIDDEN[0], rng),
        Gelu(),
        Dropout(config.dropout_p),
        sites.ssal(FRAMES_HIDDEN[0]),
        Dense(FRAMES_HIDDEN[0], FRAMES_HIDDEN[1], rng),
        Gelu(),
        Dropout(config.dropout_p),
    )
    head = _chain(
        sites.last_hidden(FUSION_CONCAT),
        sites.ssal(FUSION_CONCAT),
        Dense(FUSION_CONCAT, FUSION_HIDDEN, rng),
        Gelu(),
        sites.ssal(FUSION_HIDDEN),
        Dense(FUSION_HIDDEN, N_CLASSES, rng),
        sites.ssal(N_CLASSES),
    )
    return Network({"gamepad": gamepad, "frames": frames}, head, config.to_dict())


_BUILDERS = {"gamepad": build_gamepad_model,
             "frames": build_frames_model,
             "fusion": build_fusion_model}


def build_model(config: ModelConfig, rng=None) -> Network:
    return _BUILDERS[config.modality](config, rng)


def model_inputs(config_or_modality) -> tuple:
    """Input keys a modality consumes, in branch order."""
    modality = getattr(config_or_modality, "modality", config_or_modality)
    return ("gamepad", "frames") if modality == "fusion" else (modality,)


def make_context(config: ModelConfig, t_levels=None, mode="eval", rng=None,
                 zero_branches=()) -> Context:
    """Build the forward context, embedding the batch's unique time levels."""
    if Strategy.parse(config.conditioning) is Strategy.NONE or t_levels is None:
        return Context(mode=mode, rng=rng, zero_branches=zero_branches)
    levels = np.asarray(t_levels, dtype=np.int64)
    unique, inverse = np.unique(levels, return_inverse=True)
    embed = timecond.embedding_matrix(unique, config.embed_dim, config.embed_base)
    return Context(mode=mode, rng=rng, embed_unique=embed, embed_inverse=inverse,
                   zero_branches=zero_branches)


def load_model(path) -> Network:
    """Rebuild a network from a checkpoint written with nn.save_checkpoint."""
    config_dict, params = nn.read_checkpoint(path)
    config = ModelConfig(**config_dict)
    net = build_model(config)
    net.load_state(params)
    return net
