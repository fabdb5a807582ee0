"""Motion denoiser built from progressive text-conditioned blocks.

Each block b reads one word-feature layer W from the graph encoder and runs

    S   = Linear(masked_mean(CircularConv1d(W)))      sentence feature
    X'  = X + lam * X * sigmoid(X S^T)                  sentence fusion
    X'  = X' + MHSA(LN(X'))                             frame self-attention
    X^  = X' + MHA(LN(X'), W, W)                        word cross-attention
    X^  = X^ + MLP(LN(X^))

By default the block nearest the input consumes the deepest graph layer.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractError, NumericDivergenceError
from .ling_graph import HierarchicalTextFeatures

BLOCK_ORDERS = ("deep_first", "shallow_first")


def sinusoidal_encoding(t, width: int) -> torch.Tensor:
    """Interleaved [sin(t w_0), cos(t w_0), sin(t w_1), ...] with w_i = 10000^(-2i/width)."""
    if width % 2:
        raise ContractError("timestep encoding width must be even")
    t = torch.as_tensor(t, dtype=torch.float64)
    freqs = torch.exp(-math.log(10000.0) * torch.arange(0, width, 2, dtype=torch.float64) / width)
    angles = t.unsqueeze(-1) * freqs
    out = torch.stack([angles.sin(), angles.cos()], dim=-1)
    return out.flatten(-2)


class TimestepEmbedder(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.width = width
        self.mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))

    def forward(self, t) -> torch.Tensor:
        dtype = self.mlp[0].weight.dtype
        return self.mlp(sinusoidal_encoding(t, self.width).to(dtype))


def timestep_embedding(t, width: int, embedder: TimestepEmbedder) -> torch.Tensor:
    if torch.as_tensor(t).lt(1).any():
        raise ContractError("diffusion steps start at 1")
    if embedder.width != width:
        raise ContractError(f"embedder width {embedder.width} != requested {width}")
    return embedder(t)


# --------------------------------------------------------------------------
# sentence-level fusion


class SentenceProjector(nn.Module):
    def __init__(self, text_dim: int, width: int, kernel_size: int = 3):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        self.kernel_size = kernel_size
        self.conv = nn.Conv1d(text_dim, text_dim, kernel_size)
        self.proj = nn.Linear(text_dim, width)


def _check_prefix_mask(mask: torch.Tensor) -> torch.Tensor:
    lengths = mask.sum(-1)
    if (lengths == 0).any():
        raise ContractError("every sentence needs at least one unmasked word")
    prefix = torch.arange(mask.shape[-1], device=mask.device) < lengths.unsqueeze(-1)
    if not torch.equal(prefix, mask):
        raise ContractError("word mask must mark a prefix of positions")
    return lengths


def sentence_feature(words: torch.Tensor, mask: torch.Tensor, proj: SentenceProjector) -> torch.Tensor:
    """[B, N, D_w] words -> [B, width] sentence feature.

    The convolution wraps around within each sentence's real words, so
    padding never enters and the masked mean equals the conv applied to the
    mean word.
    """
    lengths = _check_prefix_mask(mask)
    b, n, _ = words.shape
    pos = torch.arange(n, device=words.device)
    half = proj.kernel_size // 2
    weight = proj.conv.weight  # [out, in, k]
    y = proj.conv.bias.expand(b, n, -1)
    for k in range(proj.kernel_size):
        idx = (pos.unsqueeze(0) + (k - half)) % lengths.unsqueeze(-1)  # [B, N]
        shifted = torch.gather(words, 1, idx.unsqueeze(-1).expand(-1, -1, words.shape[-1]))
        y = y + shifted @ weight[:, :, k].T
    m = mask.unsqueeze(-1).to(y.dtype)
    pooled = (y * m).sum(1) / lengths.unsqueeze(-1).to(y.dtype)
    return proj.proj(pooled)


def sentence_fusion(x: torch.Tensor, s: torch.Tensor, lam: float) -> torch.Tensor:
    """x: [B, T, D], s: [B, D]. Gate each frame by sigmoid(x_t . s)."""
    if x.shape[-1] != s.shape[-1] or x.shape[0] != s.shape[0]:
        raise ContractError(f"frame features {tuple(x.shape)} and sentence {tuple(s.shape)} do not match")
    relevance = torch.einsum("btd,bd->bt", x, s).unsqueeze(-1)
    return x + lam * (x * torch.sigmoid(relevance))


# --------------------------------------------------------------------------
# attention


class MultiHeadAttention(nn.Module):
    def __init__(self, query_dim: int, kv_dim: int, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise ConfigurationError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = width // heads
        self.w_q = nn.Linear(query_dim, width)
        self.w_k = nn.Linear(kv_dim, width)
        self.w_v = nn.Linear(kv_dim, width)
        # no output bias: a zero value map must give a zero update
        self.out = nn.Linear(width, query_dim, bias=False)

    def split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, query, context, key_mask=None, return_weights: bool = False):
        q, k, v = self.split(self.w_q(query)), self.split(self.w_k(context)), self.split(self.w_v(context))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)  # [B, H, Tq, Tk]
        if not torch.isfinite(logits.sum()) and not torch.isfinite(logits).all():
            raise NumericDivergenceError("non-finite attention logits")
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(query.shape[0], query.shape[1], -1)
        out = self.out(out)
        return (out, weights) if return_weights else out


class CaprBlock(nn.Module):
    def __init__(self, width: int, text_dim: int, heads: int = 4, lam: float = 0.1,
                 ff_mult: int = 2, use_fusion: bool = True, use_cross: bool = True):
        super().__init__()
        if lam < 0:
            raise ConfigurationError("fusion gain must be non-negative")
        self.lam = lam
        self.use_fusion = use_fusion
        self.use_cross = use_cross
        self.sentence = SentenceProjector(text_dim, width)
        self.ln_self = nn.LayerNorm(width)
        self.self_attn = MultiHeadAttention(width, width, width, heads)
        self.ln_cross = nn.LayerNorm(width)
        self.cross_attn = MultiHeadAttention(width, text_dim, width, heads)
        self.ln_ff = nn.LayerNorm(width)
        self.ff = nn.Sequential(nn.Linear(width, ff_mult * width), nn.GELU(), nn.Linear(ff_mult * width, width))

    def forward(self, x, words, mask, emb_motion=None, emb_text=None):
        if emb_motion is not None:
            x = x + emb_motion.unsqueeze(1)
        if emb_text is not None:
            words = (words + emb_text.unsqueeze(1)) * mask.unsqueeze(-1).to(words.dtype)
        if self.use_fusion:
            x = sentence_fusion(x, sentence_feature(words, mask, self.sentence), self.lam)
        x = fused_self_attention(x, self)
        if self.use_cross:
            x = word_cross_attention(x, words, mask, self)
        return x + self.ff(self.ln_ff(x))


def fused_self_attention(x: torch.Tensor, block: CaprBlock) -> torch.Tensor:
    h = block.ln_self(x)
    return x + block.self_attn(h, h)


def word_cross_attention(x: torch.Tensor, words: torch.Tensor, mask: torch.Tensor,
                         block: CaprBlock) -> torch.Tensor:
    if not mask.any(-1).all():
        raise ContractError("cross-attention needs at least one unmasked word per sentence")
    return x + block.cross_attn(block.ln_cross(x), words, key_mask=mask)


class MotionDenoiser(nn.Module):
    """Predicts x0 from (x_t, t, hierarchical word features)."""

    def __init__(self, n_channels: int, text_dim: int, width: int = 64, heads: int = 4,
                 n_blocks: int = 3, lam: float = 0.1, block_layer_order: str = "deep_first",
                 use_fusion: bool = True, use_cross: bool = True, ff_mult: int = 2):
        super().__init__()
        if block_layer_order not in BLOCK_ORDERS:
            raise ConfigurationError(f"block_layer_order must be one of {BLOCK_ORDERS}")
        self.n_channels = n_channels
        self.width = width
        self.block_layer_order = block_layer_order
        self.in_proj = nn.Linear(n_channels, width)
        self.time = TimestepEmbedder(width)
        self.time_to_text = nn.Identity() if text_dim == width else nn.Linear(width, text_dim)
        self.blocks = nn.ModuleList(
            CaprBlock(width, text_dim, heads, lam, ff_mult, use_fusion, use_cross) for _ in range(n_blocks)
        )
        self.out = nn.Sequential(nn.LayerNorm(width), nn.Linear(width, n_channels))

    def layer_for_block(self, b: int) -> int:
        """0-based graph layer consumed by 0-based block ``b``."""
        n = len(self.blocks)
        return n - 1 - b if self.block_layer_order == "deep_first" else b

    def forward(self, x_t: torch.Tensor, t, feats: HierarchicalTextFeatures) -> torch.Tensor:
        if feats.depth != len(self.blocks):
            raise ConfigurationError(
                f"{len(self.blocks)} blocks need {len(self.blocks)} text layers, got {feats.depth}"
            )
        unbatched = x_t.ndim == 2
        layers, mask = feats.layer_features, feats.word_mask
        if unbatched:
            x_t = x_t.unsqueeze(0)
            layers, mask = [f.unsqueeze(0) for f in layers], mask.unsqueeze(0)
        t = torch.as_tensor(t).reshape(-1).expand(x_t.shape[0])
        emb = timestep_embedding(t, self.width, self.time)
        emb_text = self.time_to_text(emb)
        h = self.in_proj(x_t)
        for b, block in enumerate(self.blocks):
            h = block(h, layers[self.layer_for_block(b)], mask, emb, emb_text)
        out = self.out(h)
        return out[0] if unbatched else out


def denoiser_forward(x_t, t, feats: HierarchicalTextFeatures, model: MotionDenoiser) -> torch.Tensor:
    return model(x_t, t, feats)
