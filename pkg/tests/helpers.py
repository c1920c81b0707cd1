"""Tiny model instances for finite-difference checks."""
import numpy as np
import torch

from dkit.config import RunConfig
from dkit.model import Model, to_channels_first
from dkit.synthdata import pad_sequences
from dkit.trainer import StepInputs

TINY_T = 6


def tiny_run_config(lam: float = 1.0, encoder_loss: str = "mpcl", grl_mode: str = "cosine",
                    conditioning: str = "shift", flow_scale: str = "channel") -> RunConfig:
    """T=6, d_z=4, d_emb=4: small enough for coordinate-wise finite differences."""
    return RunConfig.from_dict({
        "dataset": {"n_speakers": 2, "n_emotions": 2, "feature_dim": 6, "speaker_factor_dim": 2,
                    "neutral_only_speakers": [], "n_tokens": 3, "samples_per_cell": 2},
        "model": {"latent_dim": 4, "emb_dim": 4, "hidden": 4, "ref_channels": [4] * 6, "ref_gru": 4,
                  "conditioning": conditioning, "flow_scale": flow_scale},
        "train": {"grl_lambda": lam},
        "ablation": {"encoder_loss": encoder_loss, "grl_mode": grl_mode},
    })


def randomize(model: torch.nn.Module, rng: np.random.Generator, scale: float = 0.1) -> None:
    """Move every parameter off its initialization, zero-initialized layers included."""
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.as_tensor(rng.normal(0.0, scale, tuple(p.shape))))


def tiny_model(cfg: RunConfig, rng: np.random.Generator) -> Model:
    torch.manual_seed(int(rng.integers(2**31)))
    model = Model(cfg.model_config())
    randomize(model, rng)
    # stride-2 ReLU stacks shrink the signal layer by layer; rescale so the
    # first layers still get gradients well above finite-difference noise
    with torch.no_grad():
        for enc in (model.speaker_encoder, model.emotion_encoder):
            for conv in enc.convs:
                conv.weight.mul_(3.0)
    return model


def tiny_inputs(rng: np.random.Generator, cfg: RunConfig, batch: int = 4, T: int = TINY_T) -> StepInputs:
    mc = cfg.model_config()
    x = rng.standard_normal((batch, T, mc.feature_dim))
    ref = rng.standard_normal((batch, T, mc.feature_dim))
    ones = torch.ones(batch, T, dtype=torch.float64)
    return StepInputs(
        x=to_channels_first(x), mask=ones,
        tokens=torch.as_tensor(rng.integers(0, mc.n_tokens, (batch, T))),
        spk_ref=to_channels_first(ref), spk_mask=ones.clone(),
        emo_ref=to_channels_first(ref[..., : mc.emotion_in_dim]), emo_mask=ones.clone(),
        noise=torch.as_tensor(rng.standard_normal((batch, mc.latent_dim, T))),
        speaker_labels=np.array([0, 0, 1, 1][:batch]), emotion_labels=np.array([0, 1, 0, 1][:batch]),
    )


def padded(features):
    x, m = pad_sequences(features)
    return to_channels_first(x), torch.as_tensor(m)


def smooth_instance(cfg: RunConfig, rng: np.random.Generator, margin: float = 1e-3):
    """A random (model, inputs) pair whose ReLU pre-activations all clear ``margin``.

    Finite differences are only meaningful where the objective is differentiable
    in a neighbourhood of the point, so points next to a ReLU kink are redrawn.
    """
    from oracles import relu_margin

    for _ in range(100):
        model = tiny_model(cfg, rng)
        inp = tiny_inputs(rng, cfg)
        if relu_margin(model, inp, cfg) >= margin:
            return model, inp
    raise RuntimeError("no smooth instance found")
