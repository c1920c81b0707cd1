"""Miniature conditional VAE with a conditional affine-coupling flow.

All sequence tensors are channels-first, ``(B, C, T)``, with a ``(B, T)`` float
mask. Every layer re-applies the mask, so a padded batch computes exactly what
each sample would compute on its own.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import EmptyInput, NonFinite, ShapeMismatch
from .losses import grl

FLOW_CLAMP = 5.0
CONDITIONING_MODES = ("shift", "output", "hidden")
FLOW_SCALES = ("channel", "input")
N_FLOW_BLOCKS = 4


@dataclass
class ModelConfig:
    feature_dim: int = 16
    latent_dim: int = 8
    emb_dim: int = 8
    hidden: int = 32
    ref_channels: tuple[int, ...] = (16, 16, 32, 32, 32, 32)
    ref_gru: int = 32
    n_tokens: int = 12
    n_speakers: int = 10
    n_emotions: int = 5
    flow_blocks: int = N_FLOW_BLOCKS
    # extra heads for the ablations: encoder_loss="ce" and grl_mode="ce"
    encoder_loss: str = "mpcl"
    grl_mode: str = "cosine"
    # band-limited emotion references keep only ceil(D/4) channels
    reference_transform: str = "none"
    conditioning: str = "shift"
    flow_scale: str = "channel"

    def __post_init__(self):
        self.ref_channels = tuple(self.ref_channels)
        if self.latent_dim % 2:
            raise ShapeMismatch("latent_dim must be even")
        if len(self.ref_channels) != 6:
            raise ShapeMismatch("reference encoder needs exactly 6 conv layers")
        if self.conditioning not in CONDITIONING_MODES:
            raise ValueError(f"conditioning must be one of {CONDITIONING_MODES}")
        if self.flow_scale not in FLOW_SCALES:
            raise ValueError(f"flow_scale must be one of {FLOW_SCALES}")

    @property
    def emotion_in_dim(self) -> int:
        if self.reference_transform in ("band_limit", "both"):
            return math.ceil(self.feature_dim / 4)
        return self.feature_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ref_channels"] = list(self.ref_channels)
        return d


def _conv_lengths(lengths: torch.Tensor) -> torch.Tensor:
    # kernel 3, stride 2, padding 1
    return torch.div(lengths + 1, 2, rounding_mode="floor")


def lengths_to_mask(lengths: torch.Tensor, t_max: int) -> torch.Tensor:
    return (torch.arange(t_max)[None, :] < lengths[:, None]).to(torch.float64)


class ReferenceEncoder(nn.Module):
    """Six stride-2 convolutions, a GRU summary and a linear projection."""

    def __init__(self, in_dim: int, channels, gru_hidden: int, emb_dim: int):
        super().__init__()
        widths = [in_dim, *channels]
        self.convs = nn.ModuleList(
            nn.Conv1d(widths[i], widths[i + 1], 3, stride=2, padding=1) for i in range(len(channels))
        )
        self.gru = nn.GRU(widths[-1], gru_hidden, batch_first=True)
        self.proj = nn.Linear(gru_hidden, emb_dim, bias=False)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        lengths = mask.sum(dim=1).long()
        if bool((lengths < 1).any()):
            raise EmptyInput("reference slice of length 0")
        h = x * mask[:, None, :]
        for conv in self.convs:
            h = torch.relu(conv(h))
            lengths = _conv_lengths(lengths)
            h = h * lengths_to_mask(lengths, h.shape[-1])[:, None, :]
        out, _ = self.gru(h.transpose(1, 2))
        last = out[torch.arange(out.shape[0]), lengths - 1]
        return self.proj(last)


class LinearProcessor(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, out_dim)
        )

    def forward(self, x):
        return self.net(x)


class ConvProcessor(nn.Module):
    """Three 1-D convolutions followed by masked mean pooling over time."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.c1 = nn.Conv1d(in_dim, hidden, 3, padding=1)
        self.c2 = nn.Conv1d(hidden, hidden, 3, padding=1)
        self.c3 = nn.Conv1d(hidden, out_dim, 3, padding=1)

    def forward(self, x, mask):
        m = mask[:, None, :]
        h = torch.relu(self.c1(x * m)) * m
        h = torch.relu(self.c2(h)) * m
        h = self.c3(h) * m
        return h.sum(dim=2) / mask.sum(dim=1, keepdim=True)


class _CondConvNet(nn.Module):
    """1x1 in, ``depth`` k=3 convolutions, 1x1 out, with an additive conditioning bias.

    ``cond_at="hidden"`` adds the projected condition before the first ReLU;
    ``"output"`` adds it to the result, so the input-to-output map is shared by
    every condition.
    """

    def __init__(self, in_dim, cond_dim, hidden, out_dim, depth=2, zero_out=False, cond_at="hidden"):
        super().__init__()
        self.pre = nn.Conv1d(in_dim, hidden, 1)
        self.cond_at = cond_at
        width = hidden if cond_at == "hidden" else out_dim
        self.cond = nn.Linear(cond_dim, width) if cond_dim else None
        self.mid = nn.ModuleList(nn.Conv1d(hidden, hidden, 3, padding=1) for _ in range(depth))
        self.post = nn.Conv1d(hidden, out_dim, 1)
        if zero_out:
            nn.init.zeros_(self.post.weight)
            nn.init.zeros_(self.post.bias)
            if self.cond is not None and cond_at == "output":
                nn.init.zeros_(self.cond.weight)
                nn.init.zeros_(self.cond.bias)

    def forward(self, x, mask, cond=None):
        m = mask[:, None, :]
        h = self.pre(x * m)
        if self.cond is not None and self.cond_at == "hidden":
            h = h + self.cond(cond)[:, :, None]
        h = torch.relu(h) * m
        for conv in self.mid:
            h = torch.relu(conv(h)) * m
        out = self.post(h)
        if self.cond is not None and self.cond_at == "output":
            out = out + self.cond(cond)[:, :, None]
        return out * m


class CouplingBlock(nn.Module):
    """Affine coupling on one half of the latent channels.

    ``parity`` picks which half is transformed, so consecutive blocks alternate
    without an explicit channel flip.
    """

    def __init__(self, latent_dim, cond_dim, hidden, parity, clamp=FLOW_CLAMP, cond_at="hidden", scale="input"):
        super().__init__()
        self.half = latent_dim // 2
        self.parity = parity
        self.clamp = clamp
        shift_only = cond_at == "shift"
        net_cond = 0 if shift_only else cond_dim
        # scale="channel": one learned log-scale per moved channel, shared by every input
        self.log_scale = nn.Parameter(torch.zeros(self.half)) if scale == "channel" else None
        n_out = self.half if self.log_scale is not None else 2 * self.half
        self.net = _CondConvNet(self.half, net_cond, hidden, n_out, depth=1, zero_out=True, cond_at=cond_at)
        self.cond_shift = nn.Linear(cond_dim, self.half) if shift_only else None
        if shift_only:
            nn.init.zeros_(self.cond_shift.weight)
            nn.init.zeros_(self.cond_shift.bias)

    def _split(self, z):
        a, b = z[:, : self.half], z[:, self.half :]
        return (a, b) if self.parity == 0 else (b, a)

    def _join(self, fixed, moved):
        return torch.cat([fixed, moved], 1) if self.parity == 0 else torch.cat([moved, fixed], 1)

    def _scale_shift(self, fixed, mask, cond):
        if self.log_scale is None:
            raw_s, t = self.net(fixed, mask, cond).chunk(2, dim=1)
        else:
            t = self.net(fixed, mask, cond)
            raw_s = self.log_scale[None, :, None].expand_as(t)
        if self.cond_shift is not None:
            t = t + self.cond_shift(cond)[:, :, None] * mask[:, None, :]
        log_s = self.clamp * torch.tanh(raw_s / self.clamp) * mask[:, None, :]
        return log_s, t

    def forward(self, z, mask, cond):
        fixed, moved = self._split(z)
        log_s, t = self._scale_shift(fixed, mask, cond)
        moved = (moved * torch.exp(log_s) + t) * mask[:, None, :]
        return self._join(fixed, moved), log_s.sum(dim=(1, 2))

    def inverse(self, z, mask, cond):
        fixed, moved = self._split(z)
        log_s, t = self._scale_shift(fixed, mask, cond)
        moved = ((moved - t) * torch.exp(-log_s)) * mask[:, None, :]
        return self._join(fixed, moved), -log_s.sum(dim=(1, 2))


class Model(nn.Module):
    """Speaker/emotion reference encoders, processors, posterior, flow, prior, decoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D, dz, de, h = cfg.feature_dim, cfg.latent_dim, cfg.emb_dim, cfg.hidden
        cond = 2 * de
        self.speaker_encoder = ReferenceEncoder(D, cfg.ref_channels, cfg.ref_gru, de)
        self.emotion_encoder = ReferenceEncoder(cfg.emotion_in_dim, cfg.ref_channels, cfg.ref_gru, de)
        # phi_linear_g reads g and predicts e; phi_conv_e reads z_p and predicts e
        self.phi_linear_g = LinearProcessor(de, h, de)
        self.phi_linear_e = LinearProcessor(de, h, de)
        self.phi_conv_g = ConvProcessor(dz, h, de)
        self.phi_conv_e = ConvProcessor(dz, h, de)
        # "shift": posterior and decoder add the condition at their output, the flow only through its shift
        pd_at = "hidden" if cfg.conditioning == "hidden" else "output"
        fl_at = cfg.conditioning
        self.posterior = _CondConvNet(D, cond, h, 2 * dz, depth=2, cond_at=pd_at)
        self.flow = nn.ModuleList(CouplingBlock(dz, cond, h, parity=i % 2, cond_at=fl_at, scale=cfg.flow_scale) for i in range(cfg.flow_blocks))
        self.prior_embed = nn.Embedding(cfg.n_tokens, h)
        self.prior = _CondConvNet(h, 0, h, 2 * dz, depth=1)
        self.decoder = _CondConvNet(dz, cond, h, D, depth=2, cond_at=pd_at)
        if cfg.encoder_loss == "ce":
            self.speaker_head = nn.Linear(de, cfg.n_speakers)
            self.emotion_head = nn.Linear(de, cfg.n_emotions)
        if cfg.grl_mode == "ce":
            # adversarial classifiers: speaker from e / z_p, emotion from g / z_p
            self.adv_emb_speaker = LinearProcessor(de, h, cfg.n_speakers)
            self.adv_emb_emotion = LinearProcessor(de, h, cfg.n_emotions)
            self.adv_content_speaker = ConvProcessor(dz, h, cfg.n_speakers)
            self.adv_content_emotion = ConvProcessor(dz, h, cfg.n_emotions)
        self.double()

    # ------------------------------------------------------------ components

    @staticmethod
    def condition(g, e):
        return torch.cat([g, e], dim=1)

    def posterior_encode(self, x, mask, g, e, noise):
        """``x`` is ``(B, D, T)``; ``noise`` is ``(B, dz, T)`` standard normal (or zeros)."""
        stats = self.posterior(x, mask, self.condition(g, e))
        mean, logstd = stats.chunk(2, dim=1)
        z = (mean + torch.exp(logstd) * noise) * mask[:, None, :]
        return z, mean, logstd

    def prior_params(self, tokens, mask):
        h = self.prior_embed(tokens).transpose(1, 2)
        mean, logstd = self.prior(h, mask).chunk(2, dim=1)
        return mean, logstd

    def flow_forward(self, z, mask, g, e, return_steps=False):
        cond = self.condition(g, e)
        logdet = torch.zeros(z.shape[0], dtype=z.dtype)
        steps = []
        for block in self.flow:
            z, ld = block(z, mask, cond)
            logdet = logdet + ld
            steps.append((z, ld))
        _check_finite(z, logdet)
        return (z, logdet, steps) if return_steps else (z, logdet)

    def flow_inverse(self, z_p, mask, g, e, return_steps=False):
        cond = self.condition(g, e)
        logdet = torch.zeros(z_p.shape[0], dtype=z_p.dtype)
        steps = []
        for block in reversed(self.flow):
            z_p, ld = block.inverse(z_p, mask, cond)
            logdet = logdet + ld
            steps.append((z_p, ld))
        _check_finite(z_p, logdet)
        return (z_p, logdet, steps) if return_steps else (z_p, logdet)

    def decode(self, z, mask, g, e):
        return self.decoder(z, mask, self.condition(g, e))

    def voice_convert(self, x, mask, g_src, e_src, g_tgt, e_tgt, noise):
        z, _, _ = self.posterior_encode(x, mask, g_src, e_src, noise)
        z_p, _ = self.flow_forward(z, mask, g_src, e_src)
        z_hat, _ = self.flow_inverse(z_p, mask, g_tgt, e_tgt)
        # unchanged conditioning makes the round trip the identity; pass z through exactly
        same = ((g_src == g_tgt).all(dim=1) & (e_src == e_tgt).all(dim=1))[:, None, None]
        z_hat = torch.where(same, z, z_hat)
        return self.decode(z_hat, mask, g_tgt, e_tgt)

    def reconstruct(self, x, mask, g, e, noise):
        z, _, _ = self.posterior_encode(x, mask, g, e, noise)
        return self.decode(z, mask, g, e)

    # ---------------------------------------------------- adversarial heads

    def emb_processors(self, g, e, lam):
        """(phi_linear(GRL(g)), phi_linear(GRL(e))): predictions of e from g and g from e."""
        return self.phi_linear_g(grl(g, lam)), self.phi_linear_e(grl(e, lam))

    def content_processors(self, z_p, mask, lam):
        """(prediction of e from z_p, prediction of g from z_p), both behind GRL."""
        r = grl(z_p, lam)
        return self.phi_conv_e(r, mask), self.phi_conv_g(r, mask)


def _check_finite(z, logdet):
    if not (torch.isfinite(z).all() and torch.isfinite(logdet).all()):
        raise NonFinite("flow produced non-finite values")


def build_model(cfg: ModelConfig, seed: int) -> Model:
    """Deterministic initialization: fan-in scaled uniform, zero-initialized coupling outputs."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Model(cfg)


# ---------------------------------------------------------------- helpers


def to_channels_first(padded: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(padded, dtype=torch.float64).transpose(1, 2).contiguous()


def slice_reference(features: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random contiguous window of length in ``[ceil(T/2), T]``."""
    T = features.shape[0]
    if T == 0:
        raise EmptyInput("cannot slice an empty sequence")
    length = int(rng.integers(math.ceil(T / 2), T + 1))
    start = int(rng.integers(0, T - length + 1))
    return features[start : start + length]


TRANSFORM_MODES = ("none", "band_limit", "timbre_perturb", "both")


def transform_reference(features: np.ndarray, mode: str, rng: np.random.Generator,
                        speaker_basis: np.ndarray | None = None) -> np.ndarray:
    """Reference input perturbations: keep the low quarter of channels and/or rescale the speaker component.

    ``timbre_perturb`` needs the generator's orthonormal speaker basis (``D x S``).
    """
    if mode not in TRANSFORM_MODES:
        raise ValueError(f"unknown transform {mode!r}")
    D = features.shape[1]
    if D < 4:
        raise ShapeMismatch("transforms need at least 4 feature channels")
    out = features
    if mode in ("timbre_perturb", "both"):
        if speaker_basis is None:
            raise ValueError("timbre_perturb requires the speaker basis")
        scale = float(np.exp(rng.uniform(np.log(0.8), np.log(1.25))))
        proj = (out @ speaker_basis) @ speaker_basis.T
        out = out + (scale - 1.0) * proj
    if mode in ("band_limit", "both"):
        out = out[:, : math.ceil(D / 4)]
    return out
