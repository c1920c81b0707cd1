"""Representation analysis (CKA, label-kernel CKA, probes) and transfer scoring."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DegenerateInput, ShapeMismatch, TooFewSamples, ZeroNorm
from .numerics import cosine_similarity
from .synthdata import Dataset, FactorSample, pad_sequences

RIDGE_ALPHA = 1e-3


# ----------------------------------------------------------------------- CKA


def center_gram(K: np.ndarray) -> np.ndarray:
    """H K H with H = I - 11^T / n."""
    K = np.asarray(K, dtype=np.float64)
    return K - K.mean(axis=0, keepdims=True) - K.mean(axis=1, keepdims=True) + K.mean()


def kernel_cka(K: np.ndarray, L: np.ndarray) -> float:
    if K.shape != L.shape or K.shape[0] != K.shape[1]:
        raise ShapeMismatch(f"gram shapes {K.shape} and {L.shape}")
    Kc, Lc = center_gram(K), center_gram(L)
    nk, nl = np.linalg.norm(Kc), np.linalg.norm(Lc)
    scale_k = max(1.0, np.abs(K).max())
    scale_l = max(1.0, np.abs(L).max())
    if nk <= 1e-12 * scale_k or nl <= 1e-12 * scale_l:
        raise DegenerateInput("centered Gram matrix is zero")
    return float(np.clip(np.sum(Kc * Lc) / (nk * nl), 0.0, 1.0))


def linear_cka(X, Y) -> float:
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ShapeMismatch("X and Y need the same number of rows")
    return kernel_cka(X @ X.T, Y @ Y.T)


def label_kernel(labels) -> np.ndarray:
    labels = np.asarray(labels)
    return (labels[:, None] == labels[None, :]).astype(np.float64)


def lk_cka(X, labels) -> float:
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    if X.shape[0] != labels.shape[0]:
        raise ShapeMismatch("one label per row required")
    if len(np.unique(labels)) < 2:
        raise DegenerateInput("label kernel needs at least two distinct labels")
    return kernel_cka(X @ X.T, label_kernel(labels))


# ---------------------------------------------------------------- prototypes


@dataclass
class PrototypeSet:
    centroids: dict[int, np.ndarray]
    counts: dict[int, int]

    def __getitem__(self, label: int) -> np.ndarray:
        return self.centroids[label]

    def labels(self) -> list[int]:
        return sorted(self.centroids)

    def matrix(self) -> np.ndarray:
        return np.stack([self.centroids[k] for k in self.labels()])


def centroid_prototypes(embeddings, labels) -> PrototypeSet:
    E = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    centroids, counts = {}, {}
    for lab in np.unique(labels):
        sel = labels == lab
        # sort the rows so the mean does not depend on input order
        rows = E[sel]
        rows = rows[np.lexsort(rows.T[::-1])]
        centroids[int(lab)] = rows.mean(axis=0)
        counts[int(lab)] = int(sel.sum())
    return PrototypeSet(centroids, counts)


# ------------------------------------------------------------------- readouts


def summary_stats(features: np.ndarray) -> np.ndarray:
    """Frame mean plus lag-1 and lag-2 autocovariance, per channel.

    Autocovariances at non-zero lag are unbiased under white frame noise, so a
    denoised rendering of an utterance reads out like the noisy original.
    """
    f = np.asarray(features, dtype=np.float64)
    mu = f.mean(axis=0)
    c = f - mu
    out = [mu]
    for k in (1, 2):
        out.append((c[k:] * c[:-k]).mean(axis=0) if f.shape[0] > k else np.zeros_like(mu))
    return np.concatenate(out)


@dataclass
class FactorReadout:
    """Closed-form ridge regression from utterance summary statistics to a factor vector."""

    weights: np.ndarray
    bias: np.ndarray
    x_mean: np.ndarray

    @classmethod
    def fit(cls, features: list[np.ndarray], targets, alpha: float = RIDGE_ALPHA) -> "FactorReadout":
        X = np.stack([summary_stats(f) for f in features])
        Y = np.asarray(targets, dtype=np.float64)
        x_mean, y_mean = X.mean(axis=0), Y.mean(axis=0)
        Xc = X - x_mean
        A = Xc.T @ Xc + alpha * np.eye(X.shape[1])
        W = np.linalg.solve(A, Xc.T @ (Y - y_mean))
        return cls(W, y_mean, x_mean)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return (summary_stats(features) - self.x_mean) @ self.weights + self.bias

    def predict_many(self, features: list[np.ndarray]) -> np.ndarray:
        return np.stack([self.predict(f) for f in features])


def speaker_readout(dataset: Dataset) -> FactorReadout:
    train = dataset.train
    return FactorReadout.fit([s.features for s in train], [s.speaker_factor for s in train])


def emotion_readout(dataset: Dataset) -> FactorReadout:
    from .synthdata import standardize_emotion_table

    table = standardize_emotion_table(dataset.emotion_table)
    train = dataset.train
    return FactorReadout.fit([s.features for s in train], [table[s.emotion_id] for s in train])


def factor_similarity(generated: np.ndarray, target_prototype_factor, readout: FactorReadout) -> float:
    return cosine_similarity(readout.predict(generated), target_prototype_factor)


# --------------------------------------------------------------------- probes


def _softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def _fit_logreg(X, y, n_classes, iters=300, lr=0.5, l2=1e-3):
    W = np.zeros((X.shape[1], n_classes))
    b = np.zeros(n_classes)
    Y = np.eye(n_classes)[y]
    for _ in range(iters):
        P = _softmax_rows(X @ W + b)
        G = (P - Y) / X.shape[0]
        W -= lr * (X.T @ G + l2 * W)
        b -= lr * G.sum(axis=0)
    return W, b


def probe_accuracy(embeddings, labels, rng: np.random.Generator, folds: int = 5) -> float:
    """Stratified k-fold accuracy of a softmax-regression probe fit by gradient descent."""
    X = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes, y = np.unique(labels, return_inverse=True)
    if len(classes) < 2:
        raise TooFewSamples("probe needs at least two labels")
    if np.bincount(y).min() < 4:
        raise TooFewSamples("probe needs at least 4 samples per label")
    fold_of = np.empty(len(y), dtype=np.int64)
    for c in range(len(classes)):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        fold_of[idx] = np.arange(len(idx)) % folds
    correct = 0
    for k in range(folds):
        tr, te = fold_of != k, fold_of == k
        if not te.any():
            continue
        mu = X[tr].mean(axis=0)
        sd = X[tr].std(axis=0)
        sd[sd < 1e-12] = 1.0
        W, b = _fit_logreg((X[tr] - mu) / sd, y[tr], len(classes))
        pred = np.argmax(((X[te] - mu) / sd) @ W + b, axis=1)
        correct += int((pred == y[te]).sum())
    return correct / len(y)


# ---------------------------------------------------------------- projection


def pca_2d(X) -> np.ndarray:
    """Exact PCA onto the two leading components, with a fixed sign convention."""
    X = np.asarray(X, dtype=np.float64)
    Xc = X - X.mean(axis=0)
    _, _, Vt = np.linalg.svd(Xc, full_matrices=False)
    comps = Vt[:2].copy()
    for c in comps:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1
    out = Xc @ comps.T
    if out.shape[1] < 2:
        out = np.pad(out, ((0, 0), (0, 2 - out.shape[1])))
    return out


# ---------------------------------------------------- model-based evaluations


@torch.no_grad()
def encode_references(model, samples: list[FactorSample], reference_transform: str = "none",
                      speaker_basis=None, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Speaker and emotion embeddings from full-length references."""
    from .model import to_channels_first, transform_reference

    gs, es = [], []
    rng = np.random.default_rng(0)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        feats = [s.features for s in chunk]
        x, m = pad_sequences(feats)
        mask = torch.as_tensor(m)
        gs.append(model.speaker_encoder(to_channels_first(x), mask).numpy())
        if reference_transform != "none":
            feats = [transform_reference(f, reference_transform, rng, speaker_basis) for f in feats]
            x, _ = pad_sequences(feats)
        es.append(model.emotion_encoder(to_channels_first(x), mask).numpy())
    return np.concatenate(gs), np.concatenate(es)


@dataclass
class FlowProbeRow:
    flow_step: int
    reverse: bool
    lk_cka_speaker: float
    lk_cka_emotion: float


@dataclass
class FlowProbeTable:
    rows: list[FlowProbeRow] = field(default_factory=list)

    def speaker(self, step: int) -> float:
        return self.rows[step - 1].lk_cka_speaker

    def emotion(self, step: int) -> float:
        return self.rows[step - 1].lk_cka_emotion


@torch.no_grad()
def flow_probe(model, dataset: Dataset, split: str = "train", inverse_condition: str = "same",
               reference_transform: str = "none") -> FlowProbeTable:
    """Label-kernel CKA of time-mean latents after every forward and inverse flow block.

    ``inverse_condition="same"`` re-enters the inverse pass with each sample's own
    embeddings; ``"prototype"`` uses the speaker/emotion centroid prototypes of its labels.
    """
    from .model import to_channels_first

    samples = dataset.split(split)
    g_all, e_all = encode_references(model, samples, reference_transform, dataset.speaker_basis)
    spk = np.array([s.speaker_id for s in samples])
    emo = np.array([s.emotion_id for s in samples])
    if inverse_condition == "prototype":
        gp, ep = centroid_prototypes(g_all, spk), centroid_prototypes(e_all, emo)
        g_inv = np.stack([gp[k] for k in spk])
        e_inv = np.stack([ep[k] for k in emo])
    elif inverse_condition == "same":
        g_inv, e_inv = g_all, e_all
    else:
        raise ValueError(f"unknown inverse_condition {inverse_condition!r}")
    n_blocks = len(model.flow)
    means = [[] for _ in range(2 * n_blocks)]
    for start in range(0, len(samples), 256):
        chunk = samples[start : start + 256]
        x, m = pad_sequences([s.features for s in chunk])
        x, mask = to_channels_first(x), torch.as_tensor(m)
        sl = slice(start, start + len(chunk))
        g, e = torch.as_tensor(g_all[sl]), torch.as_tensor(e_all[sl])
        z, _, _ = model.posterior_encode(x, mask, g, e, torch.zeros(len(chunk), model.cfg.latent_dim, x.shape[-1]))
        z_p, _, fwd = model.flow_forward(z, mask, g, e, return_steps=True)
        _, _, inv = model.flow_inverse(z_p, mask, torch.as_tensor(g_inv[sl]), torch.as_tensor(e_inv[sl]), return_steps=True)
        denom = mask.sum(dim=1, keepdim=True)
        for i, (lat, _) in enumerate(fwd + inv):
            means[i].append((lat.sum(dim=2) / denom).numpy())
    table = FlowProbeTable()
    for i, chunks in enumerate(means):
        M = np.concatenate(chunks)
        table.rows.append(
            FlowProbeRow(i + 1, i >= n_blocks, _safe_lk_cka(M, spk), _safe_lk_cka(M, emo))
        )
    return table


def _safe_lk_cka(X, labels) -> float:
    try:
        return lk_cka(X, labels)
    except DegenerateInput:
        return 0.0


def conversion_pairs(dataset: Dataset) -> list[tuple[FactorSample, FactorSample]]:
    """(source, held-out reference) pairs for cross-speaker transfer.

    Each held-out emotional utterance of a neutral-only speaker is paired with the
    same-emotion, same-position utterance of a rotating training speaker.
    """
    spec = dataset.spec
    targets = set(spec.neutral_only_speakers)
    sources = [s for s in range(spec.n_speakers) if s not in targets]
    if not sources:
        return []
    by_cell = {}
    for s in dataset.train:
        by_cell.setdefault((s.speaker_id, s.emotion_id), []).append(s)
    pairs = []
    for j, h in enumerate(dataset.heldout):
        within = h.index % spec.samples_per_cell
        src_spk = sources[(j + h.speaker_id) % len(sources)]
        cell = by_cell[(src_spk, h.emotion_id)]
        pairs.append((cell[within % len(cell)], h))
    return pairs


@dataclass
class TransferScores:
    secs: np.ndarray  # cosine(readout, target speaker centroid)
    secs_source: np.ndarray  # cosine(readout, source speaker centroid)
    eecs: np.ndarray  # cosine(readout, source emotion centroid)
    emotion_match: np.ndarray  # source emotion's centroid is the closest (Euclidean) to the readout

    def summary(self) -> dict[str, float]:
        return {
            "secs": float(self.secs.mean()),
            "eecs": float(self.eecs.mean()),
            "speaker_target_win_rate": float((self.secs > self.secs_source).mean()),
            "emotion_match_rate": float(self.emotion_match.mean()),
        }


@dataclass
class Readouts:
    speaker: FactorReadout
    emotion: FactorReadout
    speaker_centroids: PrototypeSet
    emotion_centroids: PrototypeSet

    @classmethod
    def fit(cls, dataset: Dataset) -> "Readouts":
        sp, em = speaker_readout(dataset), emotion_readout(dataset)
        train = dataset.train
        feats = [s.features for s in train]
        return cls(
            sp,
            em,
            centroid_prototypes(sp.predict_many(feats), [s.speaker_id for s in train]),
            centroid_prototypes(em.predict_many(feats), [s.emotion_id for s in train]),
        )


@torch.no_grad()
def transfer_scores(model, dataset: Dataset, readouts: Readouts | None = None,
                    reference_transform: str = "none") -> TransferScores:
    """Centroid-conditioned cross-speaker conversions of held-out emotional content."""
    from .model import to_channels_first

    readouts = readouts or Readouts.fit(dataset)
    pairs = conversion_pairs(dataset)
    if not pairs:
        raise TooFewSamples("dataset has no held-out conversions")
    train = dataset.train
    g_tr, e_tr = encode_references(model, train, reference_transform, dataset.speaker_basis)
    g_proto = centroid_prototypes(g_tr, [s.speaker_id for s in train])
    e_proto = centroid_prototypes(e_tr, [s.emotion_id for s in train])
    sources = [p[0] for p in pairs]
    g_src, e_src = encode_references(model, sources, reference_transform, dataset.speaker_basis)
    x, m = pad_sequences([s.features for s in sources])
    mask = torch.as_tensor(m)
    g_tgt = torch.as_tensor(np.stack([g_proto[h.speaker_id] for _, h in pairs]))
    e_tgt = torch.as_tensor(np.stack([e_proto[h.emotion_id] for _, h in pairs]))
    noise = torch.zeros(len(pairs), model.cfg.latent_dim, x.shape[1])
    out = model.voice_convert(to_channels_first(x), mask, torch.as_tensor(g_src), torch.as_tensor(e_src),
                              g_tgt, e_tgt, noise)
    out = out.transpose(1, 2).numpy()
    secs, secs_src, eecs, match = [], [], [], []
    emo_mat = readouts.emotion_centroids.matrix()
    emo_labels = readouts.emotion_centroids.labels()
    for i, (src, h) in enumerate(pairs):
        y = out[i, : src.length]
        sp = readouts.speaker.predict(y)
        em = readouts.emotion.predict(y)
        secs.append(cosine_similarity(sp, readouts.speaker_centroids[h.speaker_id]))
        secs_src.append(cosine_similarity(sp, readouts.speaker_centroids[src.speaker_id]))
        eecs.append(cosine_similarity(em, readouts.emotion_centroids[h.emotion_id]))
        # distance, not cosine: a centroid near the origin has no stable direction
        dist = np.linalg.norm(emo_mat - em, axis=1)
        match.append(emo_labels[int(np.argmin(dist))] == h.emotion_id)
    return TransferScores(np.array(secs), np.array(secs_src), np.array(eecs), np.array(match))


@torch.no_grad()
def heldout_reconstruction_error(model, dataset: Dataset, reference_transform: str = "none") -> float:
    """MSE of the zero-noise reconstruction path on held-out utterances, own references."""
    from .model import to_channels_first

    samples = dataset.heldout
    g, e = encode_references(model, samples, reference_transform, dataset.speaker_basis)
    x, m = pad_sequences([s.features for s in samples])
    mask = torch.as_tensor(m)
    xt = to_channels_first(x)
    noise = torch.zeros(len(samples), model.cfg.latent_dim, xt.shape[-1])
    y = model.reconstruct(xt, mask, torch.as_tensor(g), torch.as_tensor(e), noise)
    sq = ((y - xt) ** 2) * mask[:, None, :]
    return float(sq.sum() / (mask.sum() * xt.shape[1]))


def evaluate(model, dataset: Dataset, seed: int = 0, readouts: Readouts | None = None,
             reference_transform: str = "none") -> dict[str, float]:
    """Full metric suite on a model snapshot."""
    train = dataset.train
    G, E = encode_references(model, train, reference_transform, dataset.speaker_basis)
    spk = np.array([s.speaker_id for s in train])
    emo = np.array([s.emotion_id for s in train])
    out = {
        "cka_emb": linear_cka(G, E),
        "lk_cka_speaker": lk_cka(G, spk),
        "lk_cka_emotion": lk_cka(E, emo),
        "probe_speaker_from_g": probe_accuracy(G, spk, np.random.default_rng([seed, 1])),
        "probe_emotion_from_e": probe_accuracy(E, emo, np.random.default_rng([seed, 2])),
        "probe_speaker_from_e": probe_accuracy(E, spk, np.random.default_rng([seed, 3])),
        "probe_emotion_from_g": probe_accuracy(G, emo, np.random.default_rng([seed, 4])),
    }
    if dataset.heldout:
        ts = transfer_scores(model, dataset, readouts, reference_transform)
        out.update(ts.summary())
        out["heldout_recon"] = heldout_reconstruction_error(model, dataset, reference_transform)
    return out


# -------------------------------------------------------------------- reports

REPORT_HEADER = ["metric", "config", "value", "seed"]
FLOW_PROBE_HEADER = ["flow_step", "reverse", "lk_cka_speaker", "lk_cka_emotion"]


def write_report(rows: list[dict], csv_path: Path | str, json_path: Path | str | None = None,
                 meta: dict | None = None) -> None:
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_HEADER)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in REPORT_HEADER})
    if json_path is not None:
        Path(json_path).write_text(json.dumps({"meta": meta or {}, "rows": rows}, indent=1))


def read_report(csv_path: Path | str) -> list[dict]:
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["value"] = float(r["value"])
        r["seed"] = int(r["seed"])
    return rows


def write_flow_probe(table: FlowProbeTable, path: Path | str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FLOW_PROBE_HEADER)
        for r in table.rows:
            w.writerow([r.flow_step, "true" if r.reverse else "false", repr(r.lk_cka_speaker), repr(r.lk_cka_emotion)])
