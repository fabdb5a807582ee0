"""Full text-to-motion model: embeddings -> graph encoder -> denoiser."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .capr import MotionDenoiser
from .config import RunConfig
from .ling_graph import (DependencyParse, GatStack, GraphBatch, HierarchicalTextFeatures,
                         RelationVocab, collate_structures, graph_structure)
from .text_frontend import EmbeddingProvider


@dataclass
class TextBatch:
    token_ids: torch.Tensor  # long [B, N]
    graph: GraphBatch

    def __len__(self):
        return self.token_ids.shape[0]

    def index_select(self, idx) -> "TextBatch":
        g = self.graph
        return TextBatch(self.token_ids[idx], GraphBatch(None, g.adjacency[idx], g.relations[idx],
                                                         g.upos_ids[idx], g.mask[idx]))


def encode_parses(parses: list[DependencyParse], provider: EmbeddingProvider,
                  vocab: RelationVocab, n_max: int) -> TextBatch:
    """Token ids and graph structure for a list of parses, truncated to ``n_max`` words."""
    structures, ids = [], torch.zeros(len(parses), n_max, dtype=torch.long)
    for k, parse in enumerate(parses):
        if len(parse) > n_max:
            raise ValueError(f"parse with {len(parse)} tokens exceeds n_max={n_max}")
        structures.append(graph_structure(parse, vocab))
        ids[k, : len(parse)] = provider.token_ids(parse.forms)
    return TextBatch(ids, collate_structures(structures, vocab.self_id, n_max))


def sentence_only_features(words: torch.Tensor, mask: torch.Tensor, depth: int) -> HierarchicalTextFeatures:
    """Text path without the graph encoder: the mean word vector at every position and layer."""
    m = mask.unsqueeze(-1).to(words.dtype)
    sentence = (words * m).sum(1, keepdim=True) / m.sum(1, keepdim=True)
    layer = sentence.expand_as(words) * m
    return HierarchicalTextFeatures([layer] * depth, mask)


class FgT2M(nn.Module):
    def __init__(self, cfg: RunConfig, provider: EmbeddingProvider, vocab: RelationVocab,
                 n_channels: int):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.provider = provider
        self.lsam_off = cfg.ablation.lsam_off
        self.gat = GatStack(vocab, cfg.text.dim, cfg.lsam.gat_layers, cfg.lsam.edge_dim,
                            cfg.lsam.heads, cfg.lsam.leaky_slope, cfg.lsam.upos_gains)
        self.denoiser = MotionDenoiser(
            n_channels, cfg.text.dim, cfg.model.width, cfg.model.heads, cfg.model.capr_blocks,
            cfg.model.lam, cfg.block_layer_order, use_fusion=not cfg.ablation.capr1_off,
            use_cross=not cfg.ablation.capr2_off, ff_mult=cfg.model.ff_mult,
        )
        self.register_buffer("motion_mean", torch.zeros(n_channels))
        self.register_buffer("motion_std", torch.ones(n_channels))

    def set_normalization(self, mean, std) -> None:
        self.motion_mean.copy_(torch.as_tensor(mean))
        self.motion_std.copy_(torch.as_tensor(std).clamp_min(1e-6))

    def normalize(self, motion: torch.Tensor) -> torch.Tensor:
        return (motion - self.motion_mean) / self.motion_std

    def denormalize(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.motion_std + self.motion_mean

    def encode_text(self, text: TextBatch) -> HierarchicalTextFeatures:
        mask = text.graph.mask
        words = self.provider(text.token_ids) * mask.unsqueeze(-1).to(self.motion_mean.dtype)
        if self.lsam_off:
            return sentence_only_features(words, mask, len(self.denoiser.blocks))
        return self.gat(text.graph.with_features(words))

    def forward(self, x_t, t, feats: HierarchicalTextFeatures):
        return self.denoiser(x_t, t, feats)
