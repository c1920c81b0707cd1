"""Run configuration: one JSON document with dataset/model/train/self_augmentation/ablation sections."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError, InvalidSpec
from .model import TRANSFORM_MODES, ModelConfig
from .selfaug import AugConfig
from .synthdata import DatasetSpec

ENCODER_LOSSES = ("mpcl", "ce")
GRL_MODES = ("none", "ce", "cosine")


@dataclass
class ModelDims:
    latent_dim: int = 8
    emb_dim: int = 8
    hidden: int = 32
    ref_channels: tuple[int, ...] = (16, 16, 32, 32, 32, 32)
    ref_gru: int = 32
    conditioning: str = "shift"
    flow_scale: str = "channel"


@dataclass
class TrainConfig:
    lr_initial: float = 2e-4
    betas: tuple[float, float] = (0.8, 0.99)
    eps: float = 1e-8
    weight_decay: float = 0.01
    lr_decay_per_epoch: float = 0.999 ** (1 / 8)
    batch_size: int = 32
    stage1_steps: int = 5000
    stage2_steps: int = 1000
    stage2_lr: float = 2e-5
    grl_lambda: float = 1.0
    mpcl_temperature: float = 0.1
    loss_weights: dict[str, float] = field(default_factory=dict)
    grad_clip: float = 5.0
    log_every: int = 100
    eval_every: int = 0  # 0: evaluate only at the end of each stage
    seed: int = 0

    def validate(self) -> None:
        for name in ("lr_initial", "stage2_lr", "lr_decay_per_epoch", "mpcl_temperature", "grl_lambda", "grad_clip"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"train.{name} must be > 0")
        if self.stage2_lr > self.lr_initial:
            raise ConfigError("train.stage2_lr must not exceed train.lr_initial")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ConfigError("step counts must be >= 0")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay must be >= 0")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError("train.betas must lie in [0, 1)")


@dataclass
class Ablation:
    encoder_loss: str = "mpcl"
    grl_mode: str = "cosine"
    reference_transform: str = "none"

    def validate(self) -> None:
        if self.encoder_loss not in ENCODER_LOSSES:
            raise ConfigError(f"ablation.encoder_loss must be one of {ENCODER_LOSSES}")
        if self.grl_mode not in GRL_MODES:
            raise ConfigError(f"ablation.grl_mode must be one of {GRL_MODES}")
        if self.reference_transform not in TRANSFORM_MODES:
            raise ConfigError(f"ablation.reference_transform must be one of {TRANSFORM_MODES}")


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelDims = field(default_factory=ModelDims)
    train: TrainConfig = field(default_factory=TrainConfig)
    self_augmentation: AugConfig = field(default_factory=AugConfig)
    ablation: Ablation = field(default_factory=Ablation)

    def validate(self) -> "RunConfig":
        try:
            self.dataset.validate()
        except InvalidSpec as exc:
            raise ConfigError(f"dataset: {exc}") from exc
        self.train.validate()
        self.ablation.validate()
        self.model_config()
        return self

    def model_config(self) -> ModelConfig:
        m = self.model
        try:
            return ModelConfig(
                feature_dim=self.dataset.feature_dim,
                latent_dim=m.latent_dim,
                emb_dim=m.emb_dim,
                hidden=m.hidden,
                ref_channels=tuple(m.ref_channels),
                ref_gru=m.ref_gru,
                conditioning=m.conditioning,
                flow_scale=m.flow_scale,
                n_tokens=self.dataset.n_tokens,
                n_speakers=self.dataset.n_speakers,
                n_emotions=self.dataset.n_emotions,
                encoder_loss=self.ablation.encoder_loss,
                grl_mode=self.ablation.grl_mode,
                reference_transform=self.ablation.reference_transform,
            )
        except Exception as exc:
            raise ConfigError(f"model: {exc}") from exc

    def to_dict(self) -> dict:
        d = {
            "dataset": self.dataset.to_dict(),
            "model": asdict(self.model),
            "train": asdict(self.train),
            "self_augmentation": asdict(self.self_augmentation),
            "ablation": asdict(self.ablation),
        }
        d["model"]["ref_channels"] = list(self.model.ref_channels)
        d["train"]["betas"] = list(self.train.betas)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        sections = {f.name for f in fields(cls)}
        unknown = set(d) - sections
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            dataset = DatasetSpec.from_dict(d.get("dataset", {}))
        except InvalidSpec as exc:
            raise ConfigError(f"dataset: {exc}") from exc
        model = _build(ModelDims, d.get("model", {}), "model")
        model.ref_channels = tuple(model.ref_channels)
        train = _build(TrainConfig, d.get("train", {}), "train")
        train.betas = tuple(train.betas)
        train.loss_weights = dict(train.loss_weights)
        from .losses import TERMS

        bad = set(train.loss_weights) - set(TERMS)
        if bad:
            raise ConfigError(f"train.loss_weights: unknown terms {sorted(bad)}")
        try:
            aug = _build(AugConfig, d.get("self_augmentation", {}), "self_augmentation")
        except ValueError as exc:
            raise ConfigError(f"self_augmentation: {exc}") from exc
        ablation = _build(Ablation, d.get("ablation", {}), "ablation")
        return cls(dataset, model, train, aug, ablation).validate()

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
        return cls.from_dict(d)

    @classmethod
    def load(cls, path: Path | str) -> "RunConfig":
        return cls.from_json(Path(path).read_text())


def _build(kind, d, section):
    if not isinstance(d, dict):
        raise ConfigError(f"{section} must be an object")
    known = {f.name for f in fields(kind)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")
    try:
        return kind(**d)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from exc
