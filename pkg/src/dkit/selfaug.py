"""Self-Augmentation: speaker-permuted conversions mixed into training batches."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidProportion
from .synthdata import Batch, pad_sequences

AUG_MODES = ("GT", "ENC", "BOTH")


@dataclass
class AugConfig:
    mode: str = "ENC"
    proportion: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.mode not in AUG_MODES:
            raise ValueError(f"unknown self-augmentation mode {self.mode!r}")
        if not 0.0 <= self.proportion <= 1.0:
            raise InvalidProportion(f"proportion must be in [0, 1], got {self.proportion}")


@dataclass
class SyntheticBatch:
    features: list[np.ndarray]
    speaker_ids: np.ndarray  # assigned target speakers
    emotion_ids: np.ndarray  # preserved source emotions
    reference_index: np.ndarray  # batch position whose audio supplied the target voice


@dataclass
class MixedBatch:
    ground_truth_targets: list[np.ndarray]
    emotion_reference_inputs: list[np.ndarray]
    speaker_reference_inputs: list[np.ndarray]
    emotion_labels: np.ndarray
    speaker_labels: np.ndarray  # speaker of the ground-truth target / speaker reference stream
    reference_speakers: np.ndarray  # speaker heard in each emotion reference input
    synthetic_mask: np.ndarray
    content_tokens: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.ground_truth_targets)

    @classmethod
    def plain(cls, batch: Batch) -> "MixedBatch":
        return cls(
            ground_truth_targets=list(batch.features),
            emotion_reference_inputs=list(batch.features),
            speaker_reference_inputs=list(batch.features),
            emotion_labels=batch.emotion_ids.copy(),
            speaker_labels=batch.speaker_ids.copy(),
            reference_speakers=batch.speaker_ids.copy(),
            synthetic_mask=np.zeros(len(batch), dtype=bool),
            content_tokens=list(batch.content_tokens),
        )


def masked_count(proportion: float, batch_size: int) -> int:
    # floor, guarding against 0.29 * 100 = 28.999...
    return int(math.floor(proportion * batch_size + 1e-9))


def permute_speakers(batch: Batch, rng: np.random.Generator) -> np.ndarray:
    """Batch position whose speaker each item is converted to."""
    return rng.permutation(len(batch))


@torch.no_grad()
def generate_synthetic(model, batch: Batch, assignment: np.ndarray, rng: np.random.Generator) -> SyntheticBatch:
    """Convert every item to its assigned speaker while keeping its own emotion embedding."""
    from .model import to_channels_first

    x, m = pad_sequences(batch.features)
    xt, mask = to_channels_first(x), torch.as_tensor(m)
    g = model.speaker_encoder(xt, mask)
    e = model.emotion_encoder(_emotion_view(model, xt), mask)
    noise = torch.as_tensor(rng.standard_normal((len(batch), model.cfg.latent_dim, xt.shape[-1])))
    idx = torch.as_tensor(np.asarray(assignment))
    out = model.voice_convert(xt, mask, g, e, g[idx], e, noise)
    out = out.transpose(1, 2).numpy()
    feats = [out[i, : f.shape[0]].copy() for i, f in enumerate(batch.features)]
    return SyntheticBatch(
        features=feats,
        speaker_ids=batch.speaker_ids[assignment].copy(),
        emotion_ids=batch.emotion_ids.copy(),
        reference_index=np.asarray(assignment).copy(),
    )


def _emotion_view(model, xt):
    # band-limited emotion encoders only see the low channels; generation uses no random transform
    d = model.cfg.emotion_in_dim
    return xt[:, :d] if d != xt.shape[1] else xt


def mix_batch(batch: Batch, synthetic: SyntheticBatch, config: AugConfig, rng: np.random.Generator) -> MixedBatch:
    """Replace ``floor(rho * B)`` uniformly chosen items according to the mode.

    ENC swaps only the emotion-reference stream; GT swaps the reconstruction
    target together with its speaker reference; BOTH does both.
    """
    if not 0.0 <= config.proportion <= 1.0:
        raise InvalidProportion(f"proportion must be in [0, 1], got {config.proportion}")
    B = len(batch)
    if len(synthetic.features) != B:
        raise ValueError("synthetic batch is not aligned with the batch")
    mixed = MixedBatch.plain(batch)
    k = masked_count(config.proportion, B)
    if k == 0:
        return mixed
    chosen = np.sort(rng.choice(B, size=k, replace=False))
    mixed.synthetic_mask[chosen] = True
    for i in chosen:
        if config.mode in ("ENC", "BOTH"):
            mixed.emotion_reference_inputs[i] = synthetic.features[i]
            mixed.reference_speakers[i] = synthetic.speaker_ids[i]
        if config.mode in ("GT", "BOTH"):
            mixed.ground_truth_targets[i] = synthetic.features[i]
            mixed.speaker_reference_inputs[i] = batch.features[synthetic.reference_index[i]]
            mixed.speaker_labels[i] = synthetic.speaker_ids[i]
            if config.mode == "GT":
                # the emotion encoder keeps listening to the real source utterance
                mixed.reference_speakers[i] = batch.speaker_ids[i]
    return mixed
