"""Tokenization, word-embedding providers and the toy caption grammar."""

from __future__ import annotations

import re
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .errors import FormatError, InputError, UnparseableCaptionError
from .ling_graph import ROOT, DependencyParse, Token

_TOKEN_RE = re.compile(r"[a-z0-9']+")
UNK_TOKEN = "<unk>"


def tokenize(caption: str) -> list[str]:
    return _TOKEN_RE.findall(caption.lower())


class EmbeddingProvider(nn.Module):
    """Maps tokens to vectors.

    ``trainable``: a learned table over a fixed vocabulary, row 0 for unknown
    tokens. ``hashed``: a learned table of hash buckets (no vocabulary).
    ``external``: a frozen table read from disk, unknown tokens get zeros.
    """

    MODES = ("trainable", "hashed", "external")

    def __init__(self, mode: str, dim: int, vocab=None, n_buckets: int = 512, table=None):
        super().__init__()
        if mode not in self.MODES:
            raise ValueError(f"unknown embedding mode {mode!r}")
        self.mode = mode
        self.dim = dim
        self.n_buckets = n_buckets
        if mode == "hashed":
            self.vocab = []
            self.table = nn.Embedding(n_buckets, dim)
        else:
            self.vocab = [UNK_TOKEN] + [t for t in (vocab or []) if t != UNK_TOKEN]
            if mode == "trainable":
                self.table = nn.Embedding(len(self.vocab), dim)
                nn.init.normal_(self.table.weight, std=dim ** -0.5)
            else:
                weights = torch.zeros(len(self.vocab), dim)
                if table is not None:
                    weights[1:] = torch.as_tensor(table, dtype=torch.float32)
                self.register_buffer("frozen_table", weights)
        self._index = {t: i for i, t in enumerate(self.vocab)}

    @classmethod
    def from_token_lists(cls, token_lists, dim: int) -> "EmbeddingProvider":
        vocab = sorted({t for toks in token_lists for t in toks})
        return cls("trainable", dim, vocab)

    @classmethod
    def from_file(cls, path) -> "EmbeddingProvider":
        """Read a text table: header line ``<n_tokens> <dim>``, then ``token v1 .. v_dim``."""
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise FormatError(f"{path}: empty embedding file")
        header = lines[0].split()
        try:
            dim = int(header[-1])
        except (IndexError, ValueError):
            raise FormatError(f"{path}: header must end with the vector width") from None
        tokens, rows = [], []
        for lineno, line in enumerate(lines[1:], start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise FormatError(f"{path}:{lineno}: expected token + {dim} floats")
            tokens.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
        return cls("external", dim, tokens, table=rows)

    def config(self) -> dict:
        return {"mode": self.mode, "dim": self.dim, "n_buckets": self.n_buckets, "vocab": list(self.vocab)}

    def token_id(self, token: str) -> int:
        if self.mode == "hashed":
            return zlib.crc32(token.encode("utf-8")) % self.n_buckets
        return self._index.get(token, 0)

    def token_ids(self, tokens) -> torch.Tensor:
        return torch.tensor([self.token_id(t) for t in tokens], dtype=torch.long)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if self.mode == "external":
            return self.frozen_table[ids]
        return self.table(ids)

    def embed(self, tokens) -> torch.Tensor:
        return self(self.token_ids(tokens))


def tokenize_and_embed(caption: str, provider: EmbeddingProvider, n_max: int | None = None):
    """Return ``(embeddings [N, dim], tokens)`` for a caption."""
    tokens = tokenize(caption)
    if not tokens:
        raise InputError("caption is empty after tokenization")
    if n_max is not None and len(tokens) > n_max:
        warnings.warn(f"caption has {len(tokens)} tokens, truncating to {n_max}", stacklevel=2)
        tokens = tokens[:n_max]
    return provider.embed(tokens), tokens


# --------------------------------------------------------------------------
# toy grammar

ACTIONS = ("walk", "wave", "jump", "turn")
VERB_3S = {"walk": "walks", "wave": "waves", "jump": "jumps", "turn": "turns"}
GERUND = {"walk": "walking", "wave": "waving", "jump": "jumping", "turn": "turning"}
COUNT_WORDS = {2: "two", 3: "three", 4: "four"}

# clause frames: (form or {slot}, upos, head index within frame or ROOT, deprel)
_FRAMES = {
    "dir": [("a", "DET", 1, "det"), ("person", "NOUN", 2, "nsubj"), ("{verb}", "VERB", ROOT, "root"),
            ("{direction}", "ADV", 2, "advmod")],
    "bare": [("a", "DET", 1, "det"), ("person", "NOUN", 2, "nsubj"), ("{verb}", "VERB", ROOT, "root")],
    "hand": [("a", "DET", 1, "det"), ("person", "NOUN", 2, "nsubj"), ("{verb}", "VERB", ROOT, "root"),
             ("the", "DET", 5, "det"), ("{side}", "ADJ", 5, "amod"), ("hand", "NOUN", 2, "obj")],
    "turn": [("a", "DET", 1, "det"), ("person", "NOUN", 2, "nsubj"), ("{verb}", "VERB", ROOT, "root"),
             ("{side}", "ADV", 2, "advmod")],
}
_FRAME_ACTIONS = {"dir": ("walk", "jump"), "bare": ("walk", "jump"), "hand": ("wave",), "turn": ("turn",)}
_VERB_POS = 2
# extensions: head index relative to the extension start, or "verb" for the main verb
_COUNT_EXT = [("{count}", "NUM", 1, "nummod"), ("times", "NOUN", "verb", "obl")]
_CONNECTIVE_EXT = {
    "then": [("then", "ADV", 1, "advmod"), ("{verb2}", "VERB", "verb", "conj")],
    "while": [("while", "SCONJ", 1, "mark"), ("{gerund2}", "VERB", "verb", "advcl")],
}

SLOT_LEXICON = {
    "verb": {VERB_3S[a]: a for a in ACTIONS},
    "direction": {"forward": "forward", "backward": "backward"},
    "side": {"left": "left", "right": "right"},
    "count": {w: c for c, w in COUNT_WORDS.items()},
    "verb2": {VERB_3S[a]: a for a in ACTIONS},
    "gerund2": {GERUND[a]: a for a in ACTIONS},
}


@dataclass(frozen=True)
class Template:
    name: str
    frame: str
    counted: bool
    connective: str  # "none", "then" or "while"
    forms: tuple[str, ...]  # literal word or "{slot}"
    upos: tuple[str, ...]
    heads: tuple[int, ...]
    deprels: tuple[str, ...]

    def slot_names(self) -> list[str]:
        return [f[1:-1] for f in self.forms if f.startswith("{")]

    def render(self, slots: dict) -> str:
        return " ".join(f.format(**slots) if f.startswith("{") else f for f in self.forms)

    def match(self, tokens: list[str]) -> dict | None:
        if len(tokens) != len(self.forms):
            return None
        slots = {}
        for form, tok in zip(self.forms, tokens):
            if form.startswith("{"):
                name = form[1:-1]
                if tok not in SLOT_LEXICON[name]:
                    return None
                if name == "verb" and SLOT_LEXICON[name][tok] not in _FRAME_ACTIONS[self.frame]:
                    return None
                slots[name] = tok
            elif form != tok:
                return None
        return slots

    def parse(self, tokens: list[str]) -> DependencyParse:
        return DependencyParse(tuple(
            Token(tok, u, h, d) for tok, u, h, d in zip(tokens, self.upos, self.heads, self.deprels)
        ))


def _build_template(frame: str, counted: bool, connective: str) -> Template:
    rows = list(_FRAMES[frame])
    for ext in ([_COUNT_EXT] if counted else []) + (
            [_CONNECTIVE_EXT[connective]] if connective != "none" else []):
        start = len(rows)
        for form, upos, head, deprel in ext:
            rows.append((form, upos, _VERB_POS if head == "verb" else start + head, deprel))
    name = f"{frame}{'+count' if counted else ''}{'+' + connective if connective != 'none' else ''}"
    forms, upos, heads, deprels = zip(*rows)
    return Template(name, frame, counted, connective, forms, upos, heads, deprels)


@dataclass(frozen=True)
class ToyGrammar:
    templates: tuple[Template, ...]

    @classmethod
    def default(cls) -> "ToyGrammar":
        return cls(tuple(
            _build_template(frame, counted, conn)
            for frame in _FRAMES for counted in (False, True) for conn in ("none", "then", "while")
        ))

    def template_for(self, frame: str, counted: bool, connective: str) -> Template:
        for t in self.templates:
            if (t.frame, t.counted, t.connective) == (frame, counted, connective):
                return t
        raise KeyError((frame, counted, connective))

    def match(self, caption: str) -> tuple[Template, dict]:
        tokens = tokenize(caption)
        for t in self.templates:
            slots = t.match(tokens)
            if slots is not None:
                return t, slots
        raise UnparseableCaptionError(f"caption matches no template: {caption!r}")


def toy_parse(caption: str, grammar: ToyGrammar) -> DependencyParse:
    template, _ = grammar.match(caption)
    return template.parse(tokenize(caption))
