"""Training objectives with hand-derived backward passes.

The contrastive, cosine and gradient-reversal pieces are ``torch.autograd.Function``
subclasses whose ``backward`` is written out explicitly; the numpy entry points
(``mpcl_loss``, ``cosine_disentangle_loss``, ``grl_backward``) run the same code and
hand back plain arrays so they can be fed to ``numerics.grad_check``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Mapping

import numpy as np
import torch

from .errors import NoPositive, NonFiniteTerm, NonPositiveTemperature, ShapeMismatch, ZeroNorm

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_TEMPERATURE = 0.1
DEFAULT_GRL_LAMBDA = 1.0
_NORM_EPS = 1e-12


# --------------------------------------------------------------------------- MPCL


@dataclass
class MPCLBatch:
    anchors: np.ndarray
    candidates: np.ndarray
    anchor_labels: np.ndarray
    candidate_labels: np.ndarray
    temperature: float = DEFAULT_TEMPERATURE
    # anchor i and candidate i are the same item and must not score against each other
    exclude_self: bool = False


def _unit_rows(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    n = x.norm(dim=1, keepdim=True)
    if bool((n < _NORM_EPS).any()):
        raise ZeroNorm("embedding row with zero norm")
    return x / n, n


def _unit_rows_backward(grad: torch.Tensor, unit: torch.Tensor, norm: torch.Tensor) -> torch.Tensor:
    return (grad - (grad * unit).sum(dim=1, keepdim=True) * unit) / norm


class _MPCL(torch.autograd.Function):
    @staticmethod
    def forward(ctx, anchors, candidates, target, valid, tau):
        a_hat, a_norm = _unit_rows(anchors)
        b_hat, b_norm = _unit_rows(candidates)
        logits = (a_hat @ b_hat.T) / tau
        logits = logits.masked_fill(~valid, float("-inf"))
        log_q = torch.log_softmax(logits, dim=1)
        # c_i log q_i with c_i = 0 must not turn -inf into nan
        per_anchor = -(target * log_q.masked_fill(~valid, 0.0)).sum(dim=1)
        ctx.save_for_backward(a_hat, a_norm, b_hat, b_norm, target, log_q.exp())
        ctx.tau = tau
        return per_anchor.mean()

    @staticmethod
    def backward(ctx, grad_out):
        a_hat, a_norm, b_hat, b_norm, target, q = ctx.saved_tensors
        d_logits = grad_out * (q - target) / q.shape[0]
        d_a_hat = d_logits @ b_hat / ctx.tau
        d_b_hat = d_logits.T @ a_hat / ctx.tau
        return (
            _unit_rows_backward(d_a_hat, a_hat, a_norm),
            _unit_rows_backward(d_b_hat, b_hat, b_norm),
            None,
            None,
            None,
        )


def mpcl_targets(anchor_labels, candidate_labels, exclude_self: bool = False, allow_unmatched: bool = False):
    """Uniform target distribution over matching candidates and the validity mask."""
    al = torch.as_tensor(np.asarray(anchor_labels)).reshape(-1, 1)
    cl = torch.as_tensor(np.asarray(candidate_labels)).reshape(1, -1)
    valid = torch.ones(al.shape[0], cl.shape[1], dtype=torch.bool)
    if exclude_self:
        if al.shape[0] != cl.shape[1]:
            raise ShapeMismatch("exclude_self needs as many anchors as candidates")
        valid.fill_diagonal_(False)
    match = (al == cl) & valid
    counts = match.sum(dim=1, keepdim=True)
    if allow_unmatched:
        return match.double() / counts.clamp(min=1).double(), valid
    if bool((counts == 0).any()):
        bad = int(torch.nonzero(counts.reshape(-1) == 0)[0])
        raise NoPositive(f"anchor {bad} has no matching candidate")
    return match.double() / counts.double(), valid


def mpcl(anchors: torch.Tensor, candidates: torch.Tensor, anchor_labels, candidate_labels,
         temperature: float = DEFAULT_TEMPERATURE, exclude_self: bool = False) -> torch.Tensor:
    """Multi-positive contrastive loss, averaged over anchors (differentiable)."""
    if not temperature > 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {temperature}")
    if anchors.shape[1] != candidates.shape[1]:
        raise ShapeMismatch("anchors and candidates differ in dimension")
    target, valid = mpcl_targets(anchor_labels, candidate_labels, exclude_self)
    return _MPCL.apply(anchors, candidates, target.to(anchors.dtype), valid, float(temperature))


def mpcl_in_batch(embeddings: torch.Tensor, labels, temperature: float = DEFAULT_TEMPERATURE,
                  skip_unmatched: bool = True) -> torch.Tensor:
    """Every batch member is an anchor scored against all the others.

    With ``skip_unmatched`` an anchor whose label occurs only once in the batch
    is left out of the average instead of raising ``NoPositive``.
    """
    if not temperature > 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {temperature}")
    labels = np.asarray(labels)
    target, valid = mpcl_targets(labels, labels, exclude_self=True, allow_unmatched=skip_unmatched)
    keep = torch.as_tensor(np.flatnonzero(target.sum(dim=1).numpy() > 0))
    if keep.numel() == 0:
        return embeddings.sum() * 0.0
    return _MPCL.apply(embeddings[keep], embeddings, target[keep].to(embeddings.dtype), valid[keep], float(temperature))


def mpcl_loss(batch: MPCLBatch) -> tuple[float, np.ndarray, np.ndarray]:
    """Value and gradients w.r.t. anchors and candidates (numpy interface)."""
    a = torch.tensor(np.asarray(batch.anchors, dtype=np.float64), requires_grad=True)
    b = torch.tensor(np.asarray(batch.candidates, dtype=np.float64), requires_grad=True)
    loss = mpcl(a, b, batch.anchor_labels, batch.candidate_labels, batch.temperature, batch.exclude_self)
    loss.backward()
    return float(loss.detach()), a.grad.numpy(), b.grad.numpy()


# --------------------------------------------------------------------- cosine / GRL


class _DetachedCosine(torch.autograd.Function):
    @staticmethod
    def forward(ctx, predicted, target):
        p_hat, p_norm = _unit_rows(predicted)
        t_hat, _ = _unit_rows(target)
        cos = (p_hat * t_hat).sum(dim=1)
        ctx.save_for_backward(p_hat, p_norm, t_hat, cos)
        return cos

    @staticmethod
    def backward(ctx, grad_out):
        p_hat, p_norm, t_hat, cos = ctx.saved_tensors
        d_pred = grad_out[:, None] * (t_hat - cos[:, None] * p_hat) / p_norm
        return d_pred, None


def cosine_detached(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarity; the target is treated as a constant."""
    squeeze = predicted.dim() == 1
    if squeeze:
        predicted, target = predicted[None], target[None]
    if predicted.shape != target.shape:
        raise ShapeMismatch(f"{tuple(predicted.shape)} vs {tuple(target.shape)}")
    out = _DetachedCosine.apply(predicted, target.detach())
    return out[0] if squeeze else out


def cosine_disentangle_loss(predicted, target) -> tuple[float, np.ndarray]:
    p = torch.tensor(np.asarray(predicted, dtype=np.float64), requires_grad=True)
    t = torch.tensor(np.asarray(target, dtype=np.float64))
    value = cosine_detached(p, t)
    value.backward()
    return float(value.detach()), p.grad.numpy()


@dataclass(frozen=True)
class GrlSpec:
    lam: float = DEFAULT_GRL_LAMBDA

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"GRL lambda must be > 0, got {self.lam}")


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_out):
        return grad_out.neg() * ctx.lam, None


def grl(x: torch.Tensor, lam: float = DEFAULT_GRL_LAMBDA) -> torch.Tensor:
    return _GradReverse.apply(x, float(lam))


def grl_backward(upstream_gradient, spec: GrlSpec) -> np.ndarray:
    return -spec.lam * np.asarray(upstream_gradient, dtype=np.float64)


# -------------------------------------------------------------------- KL / recon


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.array(x, dtype=np.float64))


def gaussian_log_density(x, mean, logstd) -> torch.Tensor:
    """Element-wise log N(x; mean, exp(logstd)^2)."""
    x, mean, logstd = _as_tensor(x), _as_tensor(mean), _as_tensor(logstd)
    return -0.5 * LOG_2PI - logstd - 0.5 * ((x - mean) * torch.exp(-logstd)) ** 2


def kl_term(z, post_mean, post_logstd, z_p, flow_logdet, prior_mean, prior_logstd, mask=None):
    """Single-sample KL estimate, averaged over valid frames and latent dims.

    Latents are ``(..., T, d)``; ``mask`` (``(..., T)``) marks valid frames and
    ``flow_logdet`` is the total log-determinant over everything masked in.
    """
    z, z_p = _as_tensor(z), _as_tensor(z_p)
    shapes = {tuple(_as_tensor(t).shape) for t in (z, post_mean, post_logstd, z_p, prior_mean, prior_logstd)}
    if len(shapes) != 1:
        raise ShapeMismatch(f"latent shapes disagree: {sorted(shapes)}")
    log_q = gaussian_log_density(z, post_mean, post_logstd)
    log_p = gaussian_log_density(z_p, prior_mean, prior_logstd)
    diff = log_q - log_p
    if mask is None:
        count = diff.numel()
        total = diff.sum()
    else:
        mask = _as_tensor(mask).to(diff.dtype)
        if tuple(mask.shape) != tuple(diff.shape[:-1]):
            raise ShapeMismatch("mask must match latent frames")
        count = mask.sum() * diff.shape[-1]
        total = (diff * mask[..., None]).sum()
    return (total - _as_tensor(flow_logdet).sum()) / count


def reconstruction_loss(predicted, target, mask=None):
    predicted, target = _as_tensor(predicted), _as_tensor(target)
    if predicted.shape != target.shape:
        raise ShapeMismatch(f"{tuple(predicted.shape)} vs {tuple(target.shape)}")
    sq = (predicted - target) ** 2
    if mask is None:
        return sq.mean()
    mask = _as_tensor(mask).to(sq.dtype)
    return (sq * mask[..., None]).sum() / (mask.sum() * sq.shape[-1])


# ------------------------------------------------------------------------ totals


@dataclass
class LossReport:
    """Named terms of the training objective.

    Under the cross-entropy ablations the ``mpcl_*`` slots hold the encoder
    classification losses and the ``cos_*`` slots hold the adversarial
    classifier losses that take their place.
    """

    recon: float = 0.0
    kl: float = 0.0
    mpcl_emotion: float = 0.0
    mpcl_speaker: float = 0.0
    cos_emb_ge: float = 0.0
    cos_emb_eg: float = 0.0
    cos_content_e: float = 0.0
    cos_content_g: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


TERMS = tuple(f.name for f in fields(LossReport) if f.name != "total")


def combine(parts: Mapping, weights: Mapping[str, float] | None = None):
    """Weighted sum of the named terms; returns ``(total, LossReport)``.

    Works on floats or on tensors (the returned total keeps the graph).
    """
    weights = dict(weights or {})
    unknown = (set(parts) | set(weights)) - set(TERMS)
    if unknown:
        raise KeyError(f"unknown loss terms: {sorted(unknown)}")
    values = {}
    total = 0.0
    for name in TERMS:
        if name not in parts:
            values[name] = 0.0
            continue
        v = parts[name]
        fv = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(fv):
            raise NonFiniteTerm(name, fv)
        values[name] = fv
        total = total + weights.get(name, 1.0) * v
    report = LossReport(**values, total=float(total.detach()) if isinstance(total, torch.Tensor) else float(total))
    return total, report


def total_loss(parts: Mapping[str, float], weights: Mapping[str, float] | None = None) -> LossReport:
    return combine(parts, weights)[1]
