"""Training, sampling and checkpointing for the full model."""

from __future__ import annotations

import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .diffusion import make_linear_schedule, sample_loop, training_loss
from .errors import FormatError
from .ling_graph import RelationVocab
from .model import FgT2M, TextBatch, encode_parses
from .text_frontend import EmbeddingProvider
from .toy_dataset import DatasetRecord, atomic_write_bytes

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def split_records(records: list[DatasetRecord], holdout: float, seed: int):
    """Deterministic train/held-out split."""
    order = np.random.default_rng(seed).permutation(len(records))
    n_test = int(round(holdout * len(records)))
    test = [records[i] for i in sorted(order[:n_test])]
    train = [records[i] for i in sorted(order[n_test:])]
    return train, test


def make_provider(cfg: RunConfig, records) -> EmbeddingProvider:
    t = cfg.text
    if t.mode == "external":
        provider = EmbeddingProvider.from_file(t.embedding_file)
        if provider.dim != t.dim:
            raise ValueError(f"embedding file width {provider.dim} != text.dim {t.dim}")
        return provider
    if t.mode == "hashed":
        return EmbeddingProvider("hashed", t.dim, n_buckets=t.hash_buckets)
    return EmbeddingProvider.from_token_lists([r.parse.forms for r in records], t.dim)


def build_model(cfg: RunConfig, train_records, vocab: RelationVocab | None = None) -> FgT2M:
    torch.manual_seed(cfg.train.seed)
    vocab = vocab or RelationVocab.default()
    motions = np.stack([r.motion for r in train_records]).astype(np.float64)
    model = FgT2M(cfg, make_provider(cfg, train_records), vocab, motions.shape[-1])
    flat = motions.reshape(-1, motions.shape[-1])
    model.set_normalization(torch.tensor(flat.mean(0), dtype=torch.float32),
                            torch.tensor(flat.std(0), dtype=torch.float32))
    return model


def text_batch_for(model: FgT2M, records) -> TextBatch:
    return encode_parses([r.parse for r in records], model.provider, model.vocab, model.cfg.text.n_max)


@dataclass
class TrainResult:
    model: FgT2M
    history: list[dict] = field(default_factory=list)
    iterations: int = 0
    seconds: float = 0.0


def train(cfg: RunConfig, train_records, on_log=None, model: FgT2M | None = None) -> TrainResult:
    """Adam on the x0 reconstruction loss with uniformly drawn steps.

    ``on_log(iteration, mean_loss, model)`` runs every ``train.log_every``
    iterations and may return a dict of extra metrics to record.
    """
    tc = cfg.train
    model = model or build_model(cfg, train_records)
    sched = make_linear_schedule(cfg.diffusion.steps, cfg.diffusion.beta_start, cfg.diffusion.beta_end)
    gen = torch.Generator().manual_seed(tc.seed)
    motions = model.normalize(torch.tensor(np.stack([r.motion for r in train_records])))
    text = text_batch_for(model, train_records)
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr)
    denoise = lambda x, t, c: model(x, t, c)  # noqa: E731

    result = TrainResult(model)
    best, stale, running = math.inf, 0, []
    start = time.perf_counter()
    model.train()
    for it in range(1, tc.iters + 1):
        idx = torch.randint(len(train_records), (min(tc.batch, len(train_records)),), generator=gen)
        x0 = motions[idx]
        t = torch.randint(1, sched.num_steps + 1, (len(idx),), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        feats = model.encode_text(text.index_select(idx))
        loss = training_loss(denoise, x0, t, feats, eps, sched)
        opt.zero_grad()
        loss.backward()
        if tc.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
        opt.step()
        running.append(loss.item())
        if it % tc.log_every == 0 or it == tc.iters:
            mean_loss = float(np.mean(running))
            running = []
            row = {"iteration": it, "loss": mean_loss}
            if on_log is not None:
                model.eval()
                row.update(on_log(it, mean_loss, model) or {})
                model.train()
            result.history.append(row)
            log.info("iter %d loss %.5f", it, mean_loss)
            if tc.patience:
                if mean_loss < best - 1e-4:
                    best, stale = mean_loss, 0
                else:
                    stale += 1
                    if stale >= tc.patience:
                        log.info("early stop at iteration %d", it)
                        result.iterations = it
                        break
        result.iterations = it
    model.eval()
    result.seconds = time.perf_counter() - start
    return result


@torch.no_grad()
def generate(model: FgT2M, text: TextBatch, n_frames: int, seed: int, chunk: int = 256) -> torch.Tensor:
    """Sample one motion per caption; returns denormalized ``[B, n_frames, D]``."""
    cfg = model.cfg
    sched = make_linear_schedule(cfg.diffusion.steps, cfg.diffusion.beta_start, cfg.diffusion.beta_end)
    clip = None if cfg.diffusion.clip_x0 is None else (-cfg.diffusion.clip_x0, cfg.diffusion.clip_x0)
    gen = torch.Generator().manual_seed(seed)
    model.eval()
    n_channels = model.motion_mean.shape[0]
    out = []
    for start in range(0, len(text), chunk):
        idx = torch.arange(start, min(start + chunk, len(text)))
        feats = model.encode_text(text.index_select(idx))
        x = sample_loop(model, feats, n_frames, n_channels, sched, gen, batch_size=len(idx), clip_x0=clip)
        out.append(model.denormalize(x))
    return torch.cat(out)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: FgT2M, extra: dict | None = None) -> None:
    state = model.state_dict()
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.cfg.flat(),
        "provider": model.provider.config(),
        "vocab": {"relations": list(model.vocab.relations), "upos": list(model.vocab.upos_tags)},
        "manifest": {k: list(v.shape) for k, v in state.items()},
        "state_dict": state,
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path) -> tuple[FgT2M, dict]:
    from .config import RunConfig

    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:  # torch raises a variety of types for bad archives
        raise FormatError(f"cannot read checkpoint {path}: {e}") from None
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {payload.get('format_version')}")
    cfg = RunConfig()
    for key, value in payload["config"].items():
        cfg.set(key, value)
    p = payload["provider"]
    provider = EmbeddingProvider(p["mode"], p["dim"], vocab=p["vocab"][1:], n_buckets=p["n_buckets"])
    vocab = RelationVocab(tuple(payload["vocab"]["relations"]), tuple(payload["vocab"]["upos"]))
    n_channels = payload["manifest"]["motion_mean"][0]
    model = FgT2M(cfg, provider, vocab, n_channels)
    state = payload["state_dict"]
    for k, shape in payload["manifest"].items():
        if list(state[k].shape) != shape:
            raise FormatError(f"checkpoint tensor {k} has shape {list(state[k].shape)}, manifest says {shape}")
    model.load_state_dict(state)
    model.eval()
    return model, payload.get("extra", {})
