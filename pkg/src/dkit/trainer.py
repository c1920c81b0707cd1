"""Two-stage deterministic training: pretraining, then Self-Augmentation refinement.

All randomness is a pure function of ``(seed, stage, step)``, so a run resumed
from a checkpoint replays exactly what the uninterrupted run would have done.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import RunConfig
from .errors import FormatError, NonFiniteLoss, NonFiniteTerm, ShapeMismatch
from .losses import combine, cosine_detached, grl, kl_term, mpcl_in_batch, reconstruction_loss
from .metrics import Readouts, evaluate
from .model import Model, build_model, slice_reference, to_channels_first, transform_reference
from .selfaug import MixedBatch, generate_synthetic, mix_batch, permute_speakers
from .synthdata import Batch, Dataset, decode_tensor, encode_tensor, pad_sequences

log = logging.getLogger(__name__)

CKPT_MAGIC = b"DKC1"
CKPT_VERSION = 1
PARAM_MAGIC = b"DKD1"  # DKT1 framing with a float64 payload


# ----------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimizerState":
        return cls(
            {k: _zeros(v) for k, v in params.items()},
            {k: _zeros(v) for k, v in params.items()},
            0,
        )


def _zeros(v):
    return torch.zeros_like(v) if isinstance(v, torch.Tensor) else np.zeros_like(np.asarray(v, dtype=np.float64))


def optimizer_step(params: dict, grads: dict, state: OptimizerState, lr: float,
                   betas=(0.8, 0.99), eps: float = 1e-8, weight_decay: float = 0.01):
    """One AdamW update; returns ``(new_params, new_state)`` without mutating inputs.

    The bias-corrected moment step and the decoupled decay ``lr * wd * theta``
    are both taken from the pre-update parameters.
    """
    b1, b2 = betas
    t = state.step + 1
    c1, c2 = 1 - b1**t, 1 - b2**t
    new_p, m_out, v_out = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if tuple(np.shape(g)) != tuple(np.shape(p)):
            raise ShapeMismatch(f"gradient for {name} has shape {tuple(np.shape(g))}, expected {tuple(np.shape(p))}")
        m = b1 * state.exp_avg[name] + (1 - b1) * g
        v = b2 * state.exp_avg_sq[name] + (1 - b2) * g * g
        denom = (v / c2) ** 0.5 + eps
        new_p[name] = p - lr * (m / c1) / denom - lr * weight_decay * p
        m_out[name], v_out[name] = m, v
    return new_p, OptimizerState(m_out, v_out, t)


def lr_at_epoch(lr_initial: float, decay_per_epoch: float, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr_initial * decay_per_epoch**epoch


def clip_grad_norm(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    """Rescale in place to a global L2 norm of at most ``max_norm``; returns the pre-clip norm."""
    total = float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads.values()])))
    if not math.isfinite(total):
        raise NonFiniteTerm("gradient", total)
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


# -------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, torch.Tensor]
    optimizer: OptimizerState
    step: int
    stage: int
    rng_state: dict

    def build_model(self) -> Model:
        model = Model(self.config.model_config())
        model.load_state_dict(self.params)
        return model


def _section(payload: bytes) -> bytes:
    return struct.pack("<Q", len(payload)) + payload


def _tensor_blob(tensors: list[torch.Tensor]) -> bytes:
    return b"".join(encode_tensor(t.detach().numpy(), PARAM_MAGIC, "<f8") for t in tensors)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    names = list(ckpt.params)
    header = {
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "stage": ckpt.stage,
        "param_names": names,
        "optimizer_step": ckpt.optimizer.step,
    }
    opt = [ckpt.optimizer.exp_avg[n] for n in names] + [ckpt.optimizer.exp_avg_sq[n] for n in names]
    return (
        CKPT_MAGIC
        + struct.pack("<I", CKPT_VERSION)
        + _section(json.dumps(header, sort_keys=True).encode())
        + _section(_tensor_blob([ckpt.params[n] for n in names]))
        + _section(_tensor_blob(opt))
        + _section(json.dumps(ckpt.rng_state, sort_keys=True).encode())
    )


def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


def _read_sections(buf: bytes, n: int) -> list[bytes]:
    out, off = [], 8
    for i in range(n):
        if len(buf) < off + 8:
            raise FormatError(f"truncated checkpoint (section {i} header)")
        (length,) = struct.unpack_from("<Q", buf, off)
        off += 8
        if len(buf) < off + length:
            raise FormatError(f"truncated checkpoint (section {i} payload)")
        out.append(buf[off : off + length])
        off += length
    if off != len(buf):
        raise FormatError("trailing bytes after checkpoint sections")
    return out


def _read_tensors(blob: bytes, count: int) -> list[torch.Tensor]:
    out, off = [], 0
    for _ in range(count):
        arr, used = decode_tensor(blob[off:], PARAM_MAGIC, "<f8")
        out.append(torch.from_numpy(arr))
        off += used
    if off != len(blob):
        raise FormatError("unexpected bytes in tensor section")
    return out


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < 8 or buf[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"checkpoint version {version} is not supported (expected {CKPT_VERSION})")
    head, params_blob, opt_blob, rng_blob = _read_sections(buf, 4)
    try:
        header = json.loads(head)
        rng_state = json.loads(rng_blob)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint metadata: {exc}") from exc
    names = header["param_names"]
    params = dict(zip(names, _read_tensors(params_blob, len(names))))
    opt = _read_tensors(opt_blob, 2 * len(names))
    state = OptimizerState(dict(zip(names, opt[: len(names)])), dict(zip(names, opt[len(names) :])), header["optimizer_step"])
    return Checkpoint(RunConfig.from_dict(header["config"]), params, state, header["step"], header["stage"], rng_state)


def load_checkpoint(path: Path | str) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


# ------------------------------------------------------------ batch assembly


@dataclass
class StepInputs:
    x: torch.Tensor
    mask: torch.Tensor
    tokens: torch.Tensor
    spk_ref: torch.Tensor
    spk_mask: torch.Tensor
    emo_ref: torch.Tensor
    emo_mask: torch.Tensor
    noise: torch.Tensor
    speaker_labels: np.ndarray
    emotion_labels: np.ndarray


def step_rng(seed: int, stage: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage, step, 17])


def batch_for_step(dataset: Dataset, batch_size: int, seed: int, stage: int, step: int) -> Batch:
    """Epoch-wise shuffled batch for a stage-local step; the short tail batch is kept."""
    train = dataset.train
    per_epoch = math.ceil(len(train) / batch_size)
    epoch, pos = divmod(step, per_epoch)
    order = np.random.default_rng([seed, stage, epoch, 3]).permutation(len(train))
    return Batch.from_samples([train[i] for i in order[pos * batch_size : (pos + 1) * batch_size]])


def prepare_inputs(mixed: MixedBatch, rng: np.random.Generator, latent_dim: int,
                   reference_transform: str = "none", speaker_basis=None) -> StepInputs:
    spk_slices = [slice_reference(f, rng) for f in mixed.speaker_reference_inputs]
    emo_slices = [slice_reference(f, rng) for f in mixed.emotion_reference_inputs]
    if reference_transform != "none":
        emo_slices = [transform_reference(f, reference_transform, rng, speaker_basis) for f in emo_slices]
    x, m = pad_sequences(mixed.ground_truth_targets)
    tok, _ = pad_sequences([t[:, None] for t in mixed.content_tokens])
    s, sm = pad_sequences(spk_slices)
    e, em = pad_sequences(emo_slices)
    noise = rng.standard_normal((len(mixed), latent_dim, x.shape[1]))
    return StepInputs(
        x=to_channels_first(x),
        mask=torch.as_tensor(m),
        tokens=torch.as_tensor(tok[:, :, 0]),
        spk_ref=to_channels_first(s),
        spk_mask=torch.as_tensor(sm),
        emo_ref=to_channels_first(e),
        emo_mask=torch.as_tensor(em),
        noise=torch.as_tensor(noise),
        speaker_labels=mixed.speaker_labels,
        emotion_labels=mixed.emotion_labels,
    )


def forward_losses(model: Model, inp: StepInputs, cfg: RunConfig):
    """Every term of the training objective for one batch; returns ``(total, report, aux)``."""
    tc, ab = cfg.train, cfg.ablation
    lam = tc.grl_lambda
    g = model.speaker_encoder(inp.spk_ref, inp.spk_mask)
    e = model.emotion_encoder(inp.emo_ref, inp.emo_mask)
    z, mean, logstd = model.posterior_encode(inp.x, inp.mask, g, e, inp.noise)
    z_p, logdet = model.flow_forward(z, inp.mask, g, e)
    p_mean, p_logstd = model.prior_params(inp.tokens, inp.mask)
    y = model.decode(z, inp.mask, g, e)
    parts = {
        "recon": reconstruction_loss(y.transpose(1, 2), inp.x.transpose(1, 2), inp.mask),
        "kl": kl_term(
            z.transpose(1, 2), mean.transpose(1, 2), logstd.transpose(1, 2),
            z_p.transpose(1, 2), logdet, p_mean.transpose(1, 2), p_logstd.transpose(1, 2), inp.mask,
        ),
    }
    spk = torch.as_tensor(inp.speaker_labels)
    emo = torch.as_tensor(inp.emotion_labels)
    if ab.encoder_loss == "mpcl":
        parts["mpcl_emotion"] = mpcl_in_batch(e, inp.emotion_labels, tc.mpcl_temperature)
        parts["mpcl_speaker"] = mpcl_in_batch(g, inp.speaker_labels, tc.mpcl_temperature)
    else:
        parts["mpcl_emotion"] = F.cross_entropy(model.emotion_head(e), emo)
        parts["mpcl_speaker"] = F.cross_entropy(model.speaker_head(g), spk)
    if ab.grl_mode == "cosine":
        e_from_g, g_from_e = model.emb_processors(g, e, lam)
        e_from_zp, g_from_zp = model.content_processors(z_p, inp.mask, lam)
        parts["cos_emb_ge"] = cosine_detached(e_from_g, e).mean()
        parts["cos_emb_eg"] = cosine_detached(g_from_e, g).mean()
        parts["cos_content_e"] = cosine_detached(e_from_zp, e).mean()
        parts["cos_content_g"] = cosine_detached(g_from_zp, g).mean()
    elif ab.grl_mode == "ce":
        parts["cos_emb_ge"] = F.cross_entropy(model.adv_emb_emotion(grl(g, lam)), emo)
        parts["cos_emb_eg"] = F.cross_entropy(model.adv_emb_speaker(grl(e, lam)), spk)
        r = grl(z_p, lam)
        parts["cos_content_e"] = F.cross_entropy(model.adv_content_emotion(r, inp.mask), emo)
        parts["cos_content_g"] = F.cross_entropy(model.adv_content_speaker(r, inp.mask), spk)
    total, report = combine(parts, tc.loss_weights)
    return total, report, {"g": g, "e": e, "z": z, "z_p": z_p}


# --------------------------------------------------------------------- loop


@dataclass
class MetricRecord:
    step: int
    stage: int
    metric: str
    value: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[MetricRecord]
    best: Checkpoint | None = None
    mask_counts: list[tuple[int, int, int]] = field(default_factory=list)  # (step, stage, synthetic count)


def _params(model: Model) -> dict[str, torch.Tensor]:
    return {k: v for k, v in model.named_parameters()}


def snapshot(model: Model, opt: OptimizerState, cfg: RunConfig, step: int, stage: int) -> Checkpoint:
    return Checkpoint(
        config=copy.deepcopy(cfg),
        params={k: v.detach().clone() for k, v in model.state_dict().items()},
        optimizer=OptimizerState(
            {k: v.clone() for k, v in opt.exp_avg.items()},
            {k: v.clone() for k, v in opt.exp_avg_sq.items()},
            opt.step,
        ),
        step=step,
        stage=stage,
        rng_state={"scheme": "step-indexed", "seed": cfg.train.seed, "next_step": step},
    )


def initial_checkpoint(cfg: RunConfig) -> Checkpoint:
    model = build_model(cfg.model_config(), cfg.train.seed)
    return snapshot(model, OptimizerState.zeros_like(_params(model)), cfg, 0, 1)


def stage_of(cfg: RunConfig, step: int) -> tuple[int, int]:
    """(stage, stage-local step) for a global step index."""
    s1 = cfg.train.stage1_steps
    return (1, step) if step < s1 else (2, step - s1)


def train_step(model: Model, opt: OptimizerState, cfg: RunConfig, dataset: Dataset, step: int):
    """One optimization step at global index ``step``; returns (opt, report, synthetic count)."""
    tc = cfg.train
    stage, local = stage_of(cfg, step)
    rng = step_rng(tc.seed, stage, local)
    batch = batch_for_step(dataset, tc.batch_size, tc.seed, stage, local)
    aug = cfg.self_augmentation
    if stage == 2 and aug.proportion > 0:
        assignment = permute_speakers(batch, rng)
        synthetic = generate_synthetic(model, batch, assignment, rng)
        mixed = mix_batch(batch, synthetic, aug, rng)
    else:
        mixed = MixedBatch.plain(batch)
    inputs = prepare_inputs(mixed, rng, model.cfg.latent_dim, cfg.ablation.reference_transform, dataset.speaker_basis)
    total, report, _ = forward_losses(model, inputs, cfg)
    params = _params(model)
    grads = torch.autograd.grad(total, list(params.values()), allow_unused=True)
    grads = {k: (g if g is not None else torch.zeros_like(params[k])) for k, g in zip(params, grads)}
    clip_grad_norm(grads, tc.grad_clip)
    per_epoch = math.ceil(len(dataset.splits["train"]) / tc.batch_size)
    base = tc.lr_initial if stage == 1 else tc.stage2_lr
    lr = lr_at_epoch(base, tc.lr_decay_per_epoch, local // per_epoch)
    with torch.no_grad():
        new_p, opt = optimizer_step(
            {k: p.detach() for k, p in params.items()}, grads, opt, lr, tc.betas, tc.eps, tc.weight_decay
        )
        for k, p in params.items():
            p.copy_(new_p[k])
    return opt, report, int(mixed.synthetic_mask.sum())


def train(cfg: RunConfig, dataset: Dataset, resume: Checkpoint | None = None,
          evaluate_stages: bool = True, on_log=None) -> TrainResult:
    """Run stage 1 then stage 2 up to ``stage1_steps + stage2_steps`` global steps.

    ``resume`` continues from a saved checkpoint; the optimizer moments restart
    (and the learning rate resets to ``stage2_lr``) when stage 2 begins.
    """
    cfg.validate()
    tc = cfg.train
    start = initial_checkpoint(cfg) if resume is None else resume
    model = Model(cfg.model_config())
    model.load_state_dict(start.params)
    opt = start.optimizer
    history: list[MetricRecord] = []
    mask_counts = []
    readouts = Readouts.fit(dataset) if (evaluate_stages and dataset.heldout) else None
    total_steps = tc.stage1_steps + tc.stage2_steps
    last_good = start
    best, best_loss = None, math.inf
    step = start.step

    def record(step, stage, metrics: dict):
        for k, v in metrics.items():
            history.append(MetricRecord(step, stage, k, float(v)))
        if on_log is not None:
            on_log(step, stage, metrics)

    while step < total_steps:
        stage, local = stage_of(cfg, step)
        if stage == 2 and local == 0 and step > 0:
            opt = OptimizerState.zeros_like({k: v.detach() for k, v in model.named_parameters()})
        try:
            opt, report, n_syn = train_step(model, opt, cfg, dataset, step)
        except (NonFiniteTerm, ArithmeticError) as exc:
            log.error("aborting at step %d: %s", step, exc)
            raise NonFiniteLoss(step, last_good) from exc
        step += 1
        mask_counts.append((step, stage, n_syn))
        if step % tc.log_every == 0 or step == total_steps:
            record(step, stage, report.as_dict())
            last_good = snapshot(model, opt, cfg, step, stage_of(cfg, step)[0] if step < total_steps else stage)
            if report.total < best_loss:
                best_loss, best = report.total, last_good
        stage_end = step == tc.stage1_steps or step == total_steps
        periodic = tc.eval_every and step % tc.eval_every == 0
        if evaluate_stages and (stage_end or periodic):
            model.eval()
            record(step, stage, evaluate(model, dataset, tc.seed, readouts, cfg.ablation.reference_transform))
    final_stage = stage_of(cfg, step - 1)[0] if step > 0 else 1
    final = snapshot(model, opt, cfg, step, final_stage)
    return TrainResult(final, history, best or final, mask_counts)


def write_history(history: list[MetricRecord], path: Path | str) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "stage", "metric", "value"])
        for r in history:
            w.writerow([r.step, r.stage, r.metric, repr(r.value)])
