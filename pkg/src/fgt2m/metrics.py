"""Retrieval and distribution metrics over a learned text/motion embedding."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import FormatError, InputError, StatsError, TrainingFailure
from .ling_graph import GatStack, RelationVocab
from .model import TextBatch, encode_parses
from .text_frontend import EmbeddingProvider
from .toy_dataset import atomic_write_bytes

log = logging.getLogger(__name__)

MIN_EMBEDDER_RECORDS = 512


# --------------------------------------------------------------------------
# joint embedding


class JointEmbedder(nn.Module):
    """Text encoder: one graph-attention layer, mean over words, MLP.
    Motion encoder: per-frame MLP, temporal mean and std, MLP."""

    def __init__(self, provider: EmbeddingProvider, vocab: RelationVocab, n_channels: int,
                 embed_dim: int = 32, hidden: int = 128, n_max: int = 16):
        super().__init__()
        self.provider = provider
        self.vocab = vocab
        self.n_max = n_max
        width = provider.dim
        self.gat = GatStack(vocab, width, num_layers=1, use_upos_gains=False)
        self.text_head = nn.Sequential(nn.Linear(width, hidden), nn.ReLU(), nn.Linear(hidden, embed_dim))
        self.frame = nn.Sequential(nn.Linear(n_channels, hidden), nn.ReLU())
        self.motion_head = nn.Sequential(nn.Linear(2 * hidden, hidden), nn.ReLU(), nn.Linear(hidden, embed_dim))
        self.register_buffer("motion_mean", torch.zeros(n_channels))
        self.register_buffer("motion_std", torch.ones(n_channels))

    def text_batch(self, parses) -> TextBatch:
        return encode_parses(parses, self.provider, self.vocab, self.n_max)

    def encode_text(self, text: TextBatch) -> torch.Tensor:
        mask = text.graph.mask
        m = mask.unsqueeze(-1).float()
        words = self.provider(text.token_ids) * m
        layer1 = self.gat(text.graph.with_features(words)).layer_features[0]
        bag = layer1.sum(1) / m.sum(1)
        return self.text_head(bag)

    def encode_motion(self, motion: torch.Tensor) -> torch.Tensor:
        h = self.frame((motion - self.motion_mean) / self.motion_std)
        return self.motion_head(torch.cat([h.mean(1), h.std(1, unbiased=False)], dim=-1))

    @torch.no_grad()
    def embed(self, parses=None, motions=None):
        self.eval()
        out = []
        if parses is not None:
            out.append(self.encode_text(self.text_batch(parses)).numpy().astype(np.float64))
        if motions is not None:
            out.append(self.encode_motion(torch.as_tensor(np.asarray(motions), dtype=torch.float32))
                       .numpy().astype(np.float64))
        return out[0] if len(out) == 1 else tuple(out)


def _contrastive_loss(t_emb, m_emb, same):
    """Symmetric cross-entropy over negative squared distances, soft targets over same-caption pairs."""
    logits = -torch.cdist(t_emb, m_emb).pow(2)
    targets = same / same.sum(1, keepdim=True)
    return 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets.T))


def pair_separation(text_feats, motion_feats, groups=None) -> tuple[float, float]:
    """Median matched-pair distance and median mismatched-pair distance."""
    d = np.linalg.norm(text_feats[:, None] - motion_feats[None], axis=-1)
    matched = np.diag(d)
    off = ~np.eye(len(d), dtype=bool)
    if groups is not None:
        g = np.asarray(groups)
        off &= g[:, None] != g[None]
    return float(np.median(matched)), float(np.median(d[off]))


def train_joint_embedder(records, seed: int = 0, embed_dim: int = 32, epochs: int = 60,
                         lr: float = 2e-3, batch: int = 128, n_max: int = 16, dim: int = 64,
                         holdout=None, vocab: RelationVocab | None = None) -> JointEmbedder:
    if len(records) < MIN_EMBEDDER_RECORDS:
        raise InputError(f"need at least {MIN_EMBEDDER_RECORDS} records, got {len(records)}")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    vocab = vocab or RelationVocab.default()
    provider = EmbeddingProvider.from_token_lists([r.parse.forms for r in records], dim)
    motions = torch.tensor(np.stack([r.motion for r in records]))
    model = JointEmbedder(provider, vocab, motions.shape[-1], embed_dim, n_max=n_max)
    flat = motions.reshape(-1, motions.shape[-1])
    model.motion_mean.copy_(flat.mean(0))
    model.motion_std.copy_(flat.std(0).clamp_min(1e-6))
    text = model.text_batch([r.parse for r in records])
    captions = {c: i for i, c in enumerate(sorted({r.caption for r in records}))}
    cap_ids = torch.tensor([captions[r.caption] for r in records])
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    for epoch in range(epochs):
        order = torch.randperm(len(records), generator=gen)
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            t_emb = model.encode_text(text.index_select(idx))
            m_emb = model.encode_motion(motions[idx])
            same = (cap_ids[idx, None] == cap_ids[None, idx]).float()
            loss = _contrastive_loss(t_emb, m_emb, same)
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()

    check = holdout if holdout is not None else records
    t_feat, m_feat = model.embed([r.parse for r in check], [r.motion for r in check])
    matched, mismatched = pair_separation(t_feat, m_feat, [r.caption for r in check])
    log.info("embedder separation: matched %.4f mismatched %.4f", matched, mismatched)
    if not matched < mismatched:
        raise TrainingFailure(
            f"embedder failed to separate pairs after {epochs} epochs: "
            f"matched median {matched:.4f} >= mismatched median {mismatched:.4f}"
        )
    return model


# --------------------------------------------------------------------------
# metrics


def r_precision(text_feats, motion_feats, ks=(1, 2, 3), seed: int = 0, pool_size: int = 32,
                groups=None) -> dict[int, float]:
    """Top-k retrieval rate of each motion's own caption among ``pool_size - 1`` mismatched ones.

    ``groups`` (e.g. caption ids) keeps records sharing the true caption out
    of the distractor pool. The truth's rank is one plus the number of
    distractors strictly closer than it.
    """
    text_feats, motion_feats = np.asarray(text_feats), np.asarray(motion_feats)
    b = len(text_feats)
    if len(motion_feats) != b:
        raise InputError("text and motion feature counts differ")
    if b < pool_size:
        raise InputError(f"need at least {pool_size} pairs, got {b}")
    rng = np.random.default_rng(seed)
    groups = np.arange(b) if groups is None else np.asarray(groups)
    ranks = np.empty(b, dtype=np.int64)
    for i in range(b):
        candidates = np.flatnonzero(groups != groups[i])
        if len(candidates) < pool_size - 1:
            raise InputError(f"only {len(candidates)} mismatched descriptions for pair {i}")
        pool = rng.choice(candidates, size=pool_size - 1, replace=False)
        d_true = np.linalg.norm(motion_feats[i] - text_feats[i])
        d_other = np.linalg.norm(text_feats[pool] - motion_feats[i], axis=1)
        ranks[i] = 1 + int((d_other < d_true).sum())
    return {k: float((ranks <= k).mean()) for k in ks}


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray

    @classmethod
    def from_features(cls, feats) -> "GaussianStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or len(feats) < 2:
            raise StatsError("need a 2-D feature array with at least two rows")
        return cls(feats.mean(0), np.atleast_2d(np.cov(feats, rowvar=False)))

    def validate(self) -> None:
        c = self.covariance
        if c.shape != (len(self.mean), len(self.mean)):
            raise StatsError(f"covariance shape {c.shape} does not match mean width {len(self.mean)}")
        if not np.allclose(c, c.T, atol=1e-8, rtol=0):
            raise StatsError("covariance is not symmetric")


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    tol = 1e-8 * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol:
        raise StatsError(f"matrix is not positive semidefinite (eigenvalue {vals.min():.3g})")
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def fid(real: GaussianStats, gen: GaussianStats) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    The trace of (S1 S2)^(1/2) is taken as the trace of the PSD square root
    of S1^(1/2) S2 S1^(1/2), which has the same eigenvalues.
    """
    real.validate()
    gen.validate()
    root1 = _psd_sqrt(real.covariance)
    middle = root1 @ gen.covariance @ root1
    vals = np.linalg.eigvalsh((middle + middle.T) / 2)
    tol = 1e-8 * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol:
        raise StatsError("covariance product is not positive semidefinite")
    tr_sqrt = np.sqrt(np.clip(vals, 0, None)).sum()
    diff = real.mean - gen.mean
    value = diff @ diff + np.trace(real.covariance) + np.trace(gen.covariance) - 2.0 * tr_sqrt
    return float(max(value, 0.0))


def mm_dist(text_feats, motion_feats) -> float:
    text_feats, motion_feats = np.asarray(text_feats), np.asarray(motion_feats)
    if text_feats.shape != motion_feats.shape:
        raise InputError(f"feature shapes differ: {text_feats.shape} vs {motion_feats.shape}")
    return float(np.linalg.norm(text_feats - motion_feats, axis=-1).mean())


def diversity(motion_feats, subset_size: int = 50, seed: int = 0) -> float:
    motion_feats = np.asarray(motion_feats)
    if len(motion_feats) < 2 * subset_size:
        raise InputError(f"need {2 * subset_size} features for diversity, got {len(motion_feats)}")
    idx = np.random.default_rng(seed).permutation(len(motion_feats))
    a = motion_feats[idx[:subset_size]]
    b = motion_feats[idx[subset_size:2 * subset_size]]
    return float(np.linalg.norm(a - b, axis=-1).mean())


def multimodality(per_text_feats, pairs_per_text: int = 10, seed: int = 0) -> float:
    """Mean distance between random pairs of generations for the same caption, averaged over captions."""
    rng = np.random.default_rng(seed)
    scores = []
    for k, feats in enumerate(per_text_feats):
        feats = np.asarray(feats)
        n = len(feats)
        if n < 2:
            raise InputError(f"caption {k} has {n} generations, need at least 2")
        i = rng.integers(n, size=pairs_per_text)
        j = (i + rng.integers(1, n, size=pairs_per_text)) % n  # j != i
        scores.append(np.linalg.norm(feats[i] - feats[j], axis=-1).mean())
    return float(np.mean(scores))


# --------------------------------------------------------------------------
# feature dumps: u32 ndim, ndim x u32 shape, float32 payload (little endian)


def write_features(path, feats) -> None:
    arr = np.ascontiguousarray(feats, dtype="<f4")
    header = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    atomic_write_bytes(path, header + arr.tobytes())


def read_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError("truncated feature header", offset=0)
    (ndim,) = struct.unpack_from("<I", data)
    if len(data) < 4 + 4 * ndim:
        raise FormatError("truncated feature shape", offset=4)
    shape = struct.unpack_from(f"<{ndim}I", data, 4)
    start = 4 + 4 * ndim
    need = 4 * int(np.prod(shape))
    if len(data) - start != need:
        raise FormatError(f"payload has {len(data) - start} bytes, expected {need}", offset=start)
    return np.frombuffer(data, dtype="<f4", offset=start).reshape(shape).copy()
