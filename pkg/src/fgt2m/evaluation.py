"""Score a trained model against held-out records with the joint embedder."""

from __future__ import annotations

import csv
import io
import logging

import numpy as np
import torch

from .config import RunConfig
from .metrics import (GaussianStats, JointEmbedder, diversity, fid, mm_dist, multimodality,
                      r_precision, train_joint_embedder)
from .model import FgT2M
from .toy_dataset import atomic_write_bytes
from .training import generate, text_batch_for

log = logging.getLogger(__name__)


def fit_evaluator(cfg: RunConfig, train_records, test_records) -> JointEmbedder:
    e = cfg.eval
    return train_joint_embedder(train_records, seed=e.seed, embed_dim=e.embed_dim, epochs=e.embed_epochs,
                                lr=e.embed_lr, n_max=cfg.text.n_max, holdout=test_records)


def noise_motions(model: FgT2M, n: int, n_frames: int, seed: int) -> np.ndarray:
    """Denormalized N(0, I) draws: what the sampler starts from."""
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn((n, n_frames, model.motion_mean.shape[0]), generator=gen)
    return model.denormalize(x).numpy()


def _summary(values) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return float(values.mean()), 0.0
    return float(values.mean()), float(1.96 * values.std(ddof=1) / np.sqrt(len(values)))


def evaluate(model: FgT2M, embedder: JointEmbedder, test_records, cfg: RunConfig,
             repeats: int | None = None, multimodal: bool = True) -> dict[str, float]:
    """Flat metric report: ``<metric>`` is the mean over repeats, ``<metric>_ci95`` its interval."""
    e = cfg.eval
    repeats = e.repeats if repeats is None else repeats
    if e.max_test:
        test_records = test_records[: e.max_test]
    n_frames = test_records[0].motion.shape[0]
    captions = [r.caption for r in test_records]
    parses = [r.parse for r in test_records]
    text_feats, real_feats = embedder.embed(parses, [r.motion for r in test_records])
    real_stats = GaussianStats.from_features(real_feats)
    subset = min(e.diversity_subset, len(test_records) // 2)
    text = text_batch_for(model, test_records)

    report: dict[str, float] = {"records": float(len(test_records)), "repeats": float(repeats)}
    real_rp = r_precision(text_feats, real_feats, seed=e.seed, pool_size=e.pool_size, groups=captions)
    for k, v in real_rp.items():
        report[f"real_r_top{k}"] = v
    report["real_mm_dist"] = mm_dist(text_feats, real_feats)
    report["real_diversity"] = diversity(real_feats, subset, e.seed)
    noise_feats = embedder.embed(motions=noise_motions(model, len(test_records), n_frames, e.seed))
    report["fid_noise"] = fid(real_stats, GaussianStats.from_features(noise_feats))

    runs: dict[str, list[float]] = {}
    for r in range(repeats):
        seed = e.seed + 1000 * r
        gen_feats = embedder.embed(motions=generate(model, text, n_frames, seed).numpy())
        rp = r_precision(text_feats, gen_feats, seed=seed, pool_size=e.pool_size, groups=captions)
        row = {f"r_top{k}": v for k, v in rp.items()}
        row["fid"] = fid(real_stats, GaussianStats.from_features(gen_feats))
        row["mm_dist"] = mm_dist(text_feats, gen_feats)
        row["diversity"] = diversity(gen_feats, subset, seed)
        if multimodal and e.mm_texts and e.mm_generations >= 2:
            row["multimodality"] = _multimodality(model, embedder, test_records, cfg, seed)
        for k, v in row.items():
            runs.setdefault(k, []).append(v)
        log.info("repeat %d: %s", r, row)
    for k, values in runs.items():
        report[k], report[f"{k}_ci95"] = _summary(values)
    return report


def _multimodality(model, embedder, test_records, cfg: RunConfig, seed: int) -> float:
    e = cfg.eval
    by_caption = {}
    for rec in test_records:
        by_caption.setdefault(rec.caption, rec)
    chosen = sorted(by_caption)[: e.mm_texts]
    recs = [by_caption[c] for c in chosen for _ in range(e.mm_generations)]
    gen = generate(model, text_batch_for(model, recs), recs[0].motion.shape[0], seed + 1).numpy()
    feats = embedder.embed(motions=gen).reshape(len(chosen), e.mm_generations, -1)
    return multimodality(list(feats), e.mm_pairs, seed)


def format_report(report: dict[str, float]) -> str:
    return "".join(f"{k}={v:.6f}\n" for k, v in sorted(report.items()))


def format_report_csv(report: dict[str, float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    keys = sorted(report)
    w.writerow(keys)
    w.writerow([f"{report[k]:.6f}" for k in keys])
    return buf.getvalue()


def write_report(report: dict[str, float], txt_path, csv_path=None) -> None:
    atomic_write_bytes(txt_path, format_report(report).encode())
    if csv_path is not None:
        atomic_write_bytes(csv_path, format_report_csv(report).encode())
