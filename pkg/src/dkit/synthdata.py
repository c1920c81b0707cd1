"""Synthetic speaker/emotion/content factor corpus.

Each utterance is a ``T x D`` feature sequence built frame by frame as

    x_t = W_s s + offset_k u_off + amp_k sin(2 pi f_k t + phase) u_osc + C[token_t] + noise

with ``W_s``, ``u_off``, ``u_osc`` and the content embeddings ``C`` living in
mutually orthogonal subspaces, so every factor is linearly recoverable.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import EmptyDataset, FormatError, InvalidSpec

TENSOR_MAGIC = b"DKT1"


@dataclass
class DatasetSpec:
    n_speakers: int = 10
    n_emotions: int = 5
    samples_per_cell: int = 20
    feature_dim: int = 16
    speaker_factor_dim: int = 4
    seq_len: tuple[int, int] = (24, 48)
    noise_std: float = 0.1
    neutral_only_speakers: list[int] = field(default_factory=lambda: [8, 9])
    corpus_bias: bool = False
    n_tokens: int = 12
    speaker_scale: float = 1.5
    content_scale: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_speakers < 1:
            raise InvalidSpec("n_speakers must be >= 1")
        if self.n_emotions < 2:
            raise InvalidSpec("n_emotions must be >= 2")
        if self.samples_per_cell < 1:
            raise InvalidSpec("samples_per_cell must be >= 1")
        lo, hi = self.seq_len
        if lo < 8:
            raise InvalidSpec("seq_len minimum must be >= 8")
        if hi < lo:
            raise InvalidSpec("seq_len range is empty")
        bad = [s for s in self.neutral_only_speakers if not 0 <= s < self.n_speakers]
        if bad:
            raise InvalidSpec(f"neutral-only speakers {bad} are not speaker ids")
        if len(set(self.neutral_only_speakers)) != len(self.neutral_only_speakers):
            raise InvalidSpec("duplicate neutral-only speaker ids")
        if self.speaker_factor_dim < 1 or self.feature_dim < self.speaker_factor_dim + 3:
            raise InvalidSpec("feature_dim must leave room for emotion and content subspaces")
        if self.noise_std < 0:
            raise InvalidSpec("noise_std must be >= 0")
        if self.n_tokens < 1:
            raise InvalidSpec("n_tokens must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"unknown dataset keys: {sorted(unknown)}")
        d = dict(d)
        if "seq_len" in d:
            d["seq_len"] = tuple(d["seq_len"])
        if "neutral_only_speakers" in d:
            d["neutral_only_speakers"] = list(d["neutral_only_speakers"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seq_len"] = list(self.seq_len)
        return d


@dataclass
class FactorSample:
    features: np.ndarray  # T x D
    speaker_id: int
    emotion_id: int
    content_tokens: np.ndarray
    speaker_factor: np.ndarray
    emotion_params: tuple[float, float, float]  # frequency (cycles/frame), amplitude, offset
    corpus_id: int | None = None
    index: int = 0

    @property
    def length(self) -> int:
        return self.features.shape[0]


@dataclass
class Dataset:
    samples: list[FactorSample]
    spec: DatasetSpec
    splits: dict[str, list[int]]
    speaker_factors: np.ndarray  # n_speakers x speaker_factor_dim
    emotion_table: np.ndarray  # n_emotions x 3
    speaker_basis: np.ndarray  # D x speaker_factor_dim, orthonormal columns
    emotion_basis: np.ndarray  # D x 2 (offset direction, oscillation direction)

    def split(self, name: str) -> list[FactorSample]:
        return [self.samples[i] for i in self.splits[name]]

    @property
    def train(self) -> list[FactorSample]:
        return self.split("train")

    @property
    def heldout(self) -> list[FactorSample]:
        return self.split("eval_heldout")

    def emotion_factor(self, emotion_id: int) -> np.ndarray:
        """Standardized (frequency, amplitude, offset) vector of an emotion."""
        return standardize_emotion_table(self.emotion_table)[emotion_id]


def standardize_emotion_table(table: np.ndarray) -> np.ndarray:
    mu = table.mean(axis=0)
    sd = table.std(axis=0)
    sd[sd == 0] = 1.0
    return (table - mu) / sd


def _params_distinct(table: np.ndarray, rel: float = 0.2) -> bool:
    n = table.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            a, b = table[i], table[j]
            scale = np.maximum(np.abs(a), np.abs(b))
            scale[scale == 0] = 1.0
            if not np.any(np.abs(a - b) / scale >= rel):
                return False
    return True


def _emotion_table(rng: np.random.Generator, n: int) -> np.ndarray:
    # neutral (index 0) is a low, slow, flat contour; the rest are drawn until
    # every pair differs by >= 20% in at least one parameter
    for _ in range(10_000):
        freq = rng.uniform(0.03, 0.12, n)
        amp = rng.uniform(0.4, 1.2, n)
        offset = rng.permutation(np.linspace(-1.0, 1.0, n)) + rng.uniform(-0.1, 0.1, n)
        freq[0], amp[0] = 0.03, 0.2
        offset[0] = 0.0
        table = np.stack([freq, amp, offset], axis=1)
        if _params_distinct(table):
            return table
    raise InvalidSpec("could not draw distinct emotion parameters")


def _content_tokens(rng: np.random.Generator, length: int, n_tokens: int) -> np.ndarray:
    out = np.empty(length, dtype=np.int64)
    t = 0
    while t < length:
        run = int(rng.integers(2, 5))
        out[t : t + run] = rng.integers(0, n_tokens)
        t += run
    return out


def _sample_seed(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 7919, index])


def make_dataset(spec: DatasetSpec) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    D, S = spec.feature_dim, spec.speaker_factor_dim
    basis, _ = np.linalg.qr(rng.standard_normal((D, D)))
    speaker_basis = basis[:, :S]
    emotion_basis = basis[:, S : S + 2]
    content_basis = basis[:, S + 2 :]
    token_emb = (content_basis @ rng.standard_normal((content_basis.shape[1], spec.n_tokens))).T
    token_emb *= spec.content_scale / np.sqrt(content_basis.shape[1])
    speaker_factors = rng.standard_normal((spec.n_speakers, S))
    emotion_table = _emotion_table(rng, spec.n_emotions)
    corpus_offset = rng.standard_normal(D) * 0.5 if spec.corpus_bias else None

    samples: list[FactorSample] = []
    train, heldout = [], []
    neutral_only = set(spec.neutral_only_speakers)
    idx = 0
    for spk in range(spec.n_speakers):
        spk_part = spec.speaker_scale * speaker_basis @ speaker_factors[spk]
        for emo in range(spec.n_emotions):
            freq, amp, offset = emotion_table[emo]
            for _ in range(spec.samples_per_cell):
                r = _sample_seed(spec.seed, idx)
                T = int(r.integers(spec.seq_len[0], spec.seq_len[1] + 1))
                phase = r.uniform(0.0, 2.0 * math.pi)
                tokens = _content_tokens(r, T, spec.n_tokens)
                t = np.arange(T)
                osc = amp * np.sin(2.0 * math.pi * freq * t + phase)
                x = (
                    spk_part[None, :]
                    + offset * emotion_basis[:, 0][None, :]
                    + osc[:, None] * emotion_basis[:, 1][None, :]
                    + token_emb[tokens]
                    + spec.noise_std * r.standard_normal((T, D))
                )
                corpus_id = None
                if corpus_offset is not None:
                    corpus_id = 0
                    x = x + corpus_offset[None, :]
                # round through float32 so in-memory and on-disk datasets agree bit for bit
                x = x.astype(np.float32).astype(np.float64)
                samples.append(
                    FactorSample(
                        features=x,
                        speaker_id=spk,
                        emotion_id=emo,
                        content_tokens=tokens,
                        speaker_factor=speaker_factors[spk].copy(),
                        emotion_params=(float(freq), float(amp), float(offset)),
                        corpus_id=corpus_id,
                        index=idx,
                    )
                )
                (heldout if spk in neutral_only and emo != 0 else train).append(idx)
                idx += 1
    return Dataset(
        samples=samples,
        spec=spec,
        splits={"train": train, "eval_heldout": heldout},
        speaker_factors=speaker_factors,
        emotion_table=emotion_table,
        speaker_basis=speaker_basis,
        emotion_basis=emotion_basis,
    )


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    indices: list[int]
    features: list[np.ndarray]
    speaker_ids: np.ndarray
    emotion_ids: np.ndarray
    content_tokens: list[np.ndarray]
    speaker_factors: np.ndarray
    emotion_params: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    @classmethod
    def from_samples(cls, samples: list[FactorSample]) -> "Batch":
        return cls(
            indices=[s.index for s in samples],
            features=[s.features for s in samples],
            speaker_ids=np.array([s.speaker_id for s in samples], dtype=np.int64),
            emotion_ids=np.array([s.emotion_id for s in samples], dtype=np.int64),
            content_tokens=[s.content_tokens for s in samples],
            speaker_factors=np.stack([s.speaker_factor for s in samples]),
            emotion_params=np.array([s.emotion_params for s in samples], dtype=np.float64),
        )


def batch_iter(dataset: Dataset, batch_size: int, rng: np.random.Generator, epochs: int = 1) -> Iterator[Batch]:
    """Shuffled batches over the train split; the last batch of an epoch may be short."""
    train = dataset.train
    if not train:
        raise EmptyDataset("train split is empty")
    if not 1 <= batch_size <= len(train):
        raise ValueError(f"batch_size must be in [1, {len(train)}]")
    for _ in range(epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(train), batch_size):
            yield Batch.from_samples([train[i] for i in order[start : start + batch_size]])


def pad_sequences(seqs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack ``T_i x D`` arrays into ``B x T_max x D`` plus a ``B x T_max`` mask."""
    t_max = max(s.shape[0] for s in seqs)
    trailing = seqs[0].shape[1:]
    out = np.zeros((len(seqs), t_max, *trailing), dtype=seqs[0].dtype)
    mask = np.zeros((len(seqs), t_max), dtype=np.float64)
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = s
        mask[i, : s.shape[0]] = 1.0
    return out, mask


# ------------------------------------------------------------------- storage


def write_tensor(path: Path | str, array: np.ndarray) -> None:
    a = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(encode_tensor(a))


def encode_tensor(array: np.ndarray, magic: bytes = TENSOR_MAGIC, dtype: str = "<f4") -> bytes:
    a = np.ascontiguousarray(array, dtype=dtype)
    head = magic + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def decode_tensor(buf: bytes, magic: bytes = TENSOR_MAGIC, dtype: str = "<f4") -> tuple[np.ndarray, int]:
    """Parse one tensor from the front of ``buf``; returns (array, bytes consumed)."""
    if len(buf) < 8 or buf[:4] != magic:
        raise FormatError(f"bad tensor magic (expected {magic!r})")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 4 * rank
    if len(buf) < off:
        raise FormatError("truncated tensor header")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    n = int(np.prod(dims)) if rank else 1
    end = off + n * np.dtype(dtype).itemsize
    if len(buf) < end:
        raise FormatError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype=dtype, count=n, offset=off).reshape(dims)
    return arr.copy(), end


def read_tensor(path: Path | str) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{path}: trailing bytes after tensor")
    return arr


def save_dataset(dataset: Dataset, out_dir: Path | str) -> None:
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    records = []
    for s in dataset.samples:
        name = f"samples/{s.index:06d}.dkt"
        write_tensor(out / name, s.features)
        records.append(
            {
                "index": s.index,
                "file": name,
                "speaker_id": s.speaker_id,
                "emotion_id": s.emotion_id,
                "content_tokens": s.content_tokens.tolist(),
                "speaker_factor": s.speaker_factor.tolist(),
                "emotion_params": list(s.emotion_params),
                "corpus_id": s.corpus_id,
            }
        )
    manifest = {
        "format": "dkit-dataset",
        "version": 1,
        "spec": dataset.spec.to_dict(),
        "splits": dataset.splits,
        "labels": {
            "speakers": list(range(dataset.spec.n_speakers)),
            "emotions": list(range(dataset.spec.n_emotions)),
            "neutral_emotion": 0,
        },
        "speaker_factors": dataset.speaker_factors.tolist(),
        "emotion_table": dataset.emotion_table.tolist(),
        "speaker_basis": dataset.speaker_basis.tolist(),
        "emotion_basis": dataset.emotion_basis.tolist(),
        "samples": records,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_dataset(data_dir: Path | str) -> Dataset:
    root = Path(data_dir)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest.json: {exc}") from exc
    if manifest.get("format") != "dkit-dataset":
        raise FormatError("not a dataset manifest")
    samples = []
    for r in manifest["samples"]:
        samples.append(
            FactorSample(
                features=read_tensor(root / r["file"]).astype(np.float64),
                speaker_id=r["speaker_id"],
                emotion_id=r["emotion_id"],
                content_tokens=np.array(r["content_tokens"], dtype=np.int64),
                speaker_factor=np.array(r["speaker_factor"], dtype=np.float64),
                emotion_params=tuple(r["emotion_params"]),
                corpus_id=r["corpus_id"],
                index=r["index"],
            )
        )
    return Dataset(
        samples=samples,
        spec=DatasetSpec.from_dict(manifest["spec"]),
        splits={k: list(v) for k, v in manifest["splits"].items()},
        speaker_factors=np.array(manifest["speaker_factors"]),
        emotion_table=np.array(manifest["emotion_table"]),
        speaker_basis=np.array(manifest["speaker_basis"]),
        emotion_basis=np.array(manifest["emotion_basis"]),
    )
