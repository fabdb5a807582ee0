"""Dependency-parse graphs and the stacked edge-featured graph attention encoder.

A parse becomes an undirected graph over its words: every head/dependent
link is stored in both directions with the link's relation label, and every
word gets a self-loop labelled ``SELF``. Each attention layer scores the
closed neighbourhood of a word with

    logit_ij = LeakyReLU(w^T [Theta x_i || Theta x_j || Theta_e e_ij])
    e_ij     = gain[r_ij] * table[r_ij]

and returns the softmax-weighted sum of ``Theta x_j``. The encoder keeps
every layer's output: layer 1 sees 1-hop context, layer l sees l hops.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError, FormatError, MalformedParseError, NumericDivergenceError

UD_RELATIONS = (
    "acl", "advcl", "advmod", "amod", "appos", "aux", "case", "cc", "ccomp",
    "clf", "compound", "conj", "cop", "csubj", "dep", "det", "discourse",
    "dislocated", "expl", "fixed", "flat", "goeswith", "iobj", "list", "mark",
    "nmod", "nsubj", "nummod", "obj", "obl", "orphan", "parataxis", "punct",
    "reparandum", "root", "vocative", "xcomp",
)
UPOS_TAGS = (
    "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM", "PART",
    "PRON", "PROPN", "PUNCT", "SCONJ", "SYM", "VERB", "X",
)
SELF = "SELF"
UNK = "UNK"
ROOT = -1


@dataclass(frozen=True)
class RelationVocab:
    relations: tuple[str, ...]
    upos_tags: tuple[str, ...]

    def __post_init__(self):
        for name, labels in (("relations", self.relations), ("upos_tags", self.upos_tags)):
            if len(set(labels)) != len(labels):
                raise ValueError(f"duplicate labels in {name}")
        if SELF not in self.relations or UNK not in self.relations:
            raise ValueError("relation vocabulary must contain SELF and UNK")
        if UNK not in self.upos_tags:
            raise ValueError("UPOS vocabulary must contain UNK")
        object.__setattr__(self, "_rel_index", {r: i for i, r in enumerate(self.relations)})
        object.__setattr__(self, "_upos_index", {u: i for i, u in enumerate(self.upos_tags)})

    @classmethod
    def default(cls) -> "RelationVocab":
        return cls(UD_RELATIONS + (SELF, UNK), UPOS_TAGS + (UNK,))

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    @property
    def num_upos(self) -> int:
        return len(self.upos_tags)

    @property
    def self_id(self) -> int:
        return self._rel_index[SELF]

    def canonical_relation(self, label: str) -> str:
        label = label.strip()
        if label in self._rel_index:
            return label
        base = label.split(":", 1)[0].lower()
        return base if base in self._rel_index else UNK

    def relation_id(self, label: str) -> int:
        return self._rel_index[self.canonical_relation(label)]

    def canonical_upos(self, tag: str) -> str:
        tag = tag.strip().upper()
        return tag if tag in self._upos_index else UNK

    def upos_id(self, tag: str) -> int:
        return self._upos_index[self.canonical_upos(tag)]

    def save(self, relations_path, upos_path) -> None:
        Path(relations_path).write_text("\n".join(self.relations) + "\n", encoding="utf-8")
        Path(upos_path).write_text("\n".join(self.upos_tags) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, relations_path, upos_path) -> "RelationVocab":
        def read(p):
            return tuple(l.strip() for l in Path(p).read_text(encoding="utf-8").splitlines() if l.strip())
        return cls(read(relations_path), read(upos_path))


@dataclass(frozen=True)
class Token:
    form: str
    upos: str
    head: int  # 0-based index of the governing token, ROOT for the root
    deprel: str


@dataclass(frozen=True)
class DependencyParse:
    tokens: tuple[Token, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        validate_tree([tok.head for tok in self.tokens])

    def __len__(self):
        return len(self.tokens)

    @property
    def forms(self) -> list[str]:
        return [tok.form for tok in self.tokens]

    @property
    def root(self) -> int:
        return next(i for i, tok in enumerate(self.tokens) if tok.head == ROOT)

    def depth(self) -> int:
        """Number of edges on the longest root-to-leaf path."""
        best = 0
        for i in range(len(self.tokens)):
            d, j = 0, i
            while self.tokens[j].head != ROOT:
                j = self.tokens[j].head
                d += 1
            best = max(best, d)
        return best

    def to_conllu(self) -> str:
        rows = [
            f"{i + 1}\t{tok.form}\t{tok.upos}\t{tok.head + 1}\t{tok.deprel}"
            for i, tok in enumerate(self.tokens)
        ]
        return "\n".join(rows) + "\n\n"


def validate_tree(heads: list[int]) -> None:
    n = len(heads)
    if n == 0:
        raise MalformedParseError("parse has no tokens")
    roots = [i for i, h in enumerate(heads) if h == ROOT]
    if len(roots) != 1:
        raise MalformedParseError(f"expected exactly one root, found {len(roots)}")
    for i, h in enumerate(heads):
        if h != ROOT and not 0 <= h < n:
            raise MalformedParseError(f"token {i + 1} has head {h + 1} outside the sentence")
        if h == i:
            raise MalformedParseError(f"token {i + 1} is its own head")
    for i in range(n):
        seen, j = set(), i
        while heads[j] != ROOT:
            if j in seen:
                raise MalformedParseError(f"head links starting at token {i + 1} form a cycle")
            seen.add(j)
            j = heads[j]


def _conllu_sentences(text: str):
    block: list[tuple[int, str]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            if block:
                yield block
                block = []
            continue
        if line.startswith("#"):
            continue
        block.append((lineno, line))
    if block:
        yield block


def _parse_block(block, vocab: RelationVocab) -> DependencyParse:
    rows = []
    for lineno, line in block:
        cols = line.rstrip("\n").split("\t")
        if len(cols) >= 10:
            # full CoNLL-U row; skip multiword ranges and empty nodes
            if "-" in cols[0] or "." in cols[0]:
                continue
            cols = [cols[0], cols[1], cols[3], cols[6], cols[7]]
        if len(cols) < 5:
            raise FormatError(f"line {lineno}: expected 5 tab-separated columns, got {len(cols)}")
        try:
            idx, head = int(cols[0]), int(cols[3])
        except ValueError:
            raise FormatError(f"line {lineno}: ID and HEAD must be integers") from None
        rows.append((lineno, idx, cols[1], cols[2], head, cols[4]))
    for k, (lineno, idx, *_rest) in enumerate(rows):
        if idx != k + 1:
            raise FormatError(f"line {lineno}: token IDs must run 1..N, got {idx} at position {k + 1}")
    tokens = [
        Token(form, vocab.canonical_upos(upos), head - 1 if head > 0 else ROOT,
              vocab.canonical_relation(deprel))
        for _, _, form, upos, head, deprel in rows
    ]
    return DependencyParse(tuple(tokens))


def load_conllu(text: str, vocab: RelationVocab) -> DependencyParse:
    """Read the first sentence of a CoNLL-U (or ID/FORM/UPOS/HEAD/DEPREL) block."""
    for block in _conllu_sentences(text):
        return _parse_block(block, vocab)
    raise FormatError("no sentence found in CoNLL-U input")


def read_conllu_sentences(text: str, vocab: RelationVocab) -> list[DependencyParse]:
    return [_parse_block(block, vocab) for block in _conllu_sentences(text)]


# --------------------------------------------------------------------------
# graphs


@dataclass
class ParseGraph:
    n_nodes: int
    node_features: torch.Tensor  # [N, L]
    adjacency: torch.Tensor  # bool [N, N], adjacency[i, j]: j is in i's neighbourhood
    edge_index: torch.Tensor  # long [2, E], rows (receiver, sender)
    edge_relation_ids: torch.Tensor  # long [E]
    upos_ids: torch.Tensor  # long [N]

    @property
    def relation_matrix(self) -> torch.Tensor:
        rel = torch.full((self.n_nodes, self.n_nodes), -1, dtype=torch.long)
        rel[self.edge_index[0], self.edge_index[1]] = self.edge_relation_ids
        return rel

    def permute(self, perm) -> "ParseGraph":
        """Relabel nodes so that new node k is old node perm[k]."""
        perm = torch.as_tensor(perm, dtype=torch.long)
        inv = torch.empty_like(perm)
        inv[perm] = torch.arange(len(perm))
        ei = inv[self.edge_index]
        order = torch.argsort(ei[0] * self.n_nodes + ei[1])
        return ParseGraph(
            self.n_nodes, self.node_features[perm], self.adjacency[perm][:, perm],
            ei[:, order], self.edge_relation_ids[order], self.upos_ids[perm],
        )


def graph_structure(parse: DependencyParse, vocab: RelationVocab):
    """(edge_index, relation ids, upos ids) for a parse, edges sorted row-major."""
    n = len(parse)
    edges = {(i, i): vocab.self_id for i in range(n)}
    for i, tok in enumerate(parse.tokens):
        if tok.head != ROOT:
            rid = vocab.relation_id(tok.deprel)
            edges[(i, tok.head)] = rid
            edges[(tok.head, i)] = rid
    keys = sorted(edges)
    edge_index = torch.tensor(keys, dtype=torch.long).T.contiguous()
    rel = torch.tensor([edges[k] for k in keys], dtype=torch.long)
    upos = torch.tensor([vocab.upos_id(tok.upos) for tok in parse.tokens], dtype=torch.long)
    return edge_index, rel, upos


def build_graph(parse: DependencyParse, word_embeddings: torch.Tensor,
                vocab: RelationVocab) -> ParseGraph:
    n = len(parse)
    if word_embeddings.ndim != 2 or word_embeddings.shape[0] != n:
        raise ContractError(
            f"expected {n} embedding rows for {n} tokens, got shape {tuple(word_embeddings.shape)}"
        )
    edge_index, rel, upos = graph_structure(parse, vocab)
    adj = torch.zeros(n, n, dtype=torch.bool)
    adj[edge_index[0], edge_index[1]] = True
    return ParseGraph(n, word_embeddings, adj, edge_index, rel, upos)


@dataclass
class GraphBatch:
    """Dense, padded batch of graphs. Padding nodes carry only a self-loop."""

    node_features: torch.Tensor | None  # [B, N, L]
    adjacency: torch.Tensor  # bool [B, N, N]
    relations: torch.Tensor  # long [B, N, N], SELF-id on padding
    upos_ids: torch.Tensor  # long [B, N]
    mask: torch.Tensor  # bool [B, N]

    def with_features(self, x: torch.Tensor) -> "GraphBatch":
        return GraphBatch(x, self.adjacency, self.relations, self.upos_ids, self.mask)


def collate_structures(structures, self_id: int, n_max: int | None = None) -> GraphBatch:
    """Batch ``(edge_index, relation_ids, upos_ids)`` triples into dense tensors."""
    sizes = [len(s[2]) for s in structures]
    n_max = n_max or max(sizes)
    if max(sizes) > n_max:
        raise ContractError(f"graph with {max(sizes)} nodes exceeds n_max={n_max}")
    b = len(structures)
    eye = torch.eye(n_max, dtype=torch.bool).expand(b, n_max, n_max)
    adj = eye.clone()
    rel = torch.full((b, n_max, n_max), self_id, dtype=torch.long)
    upos = torch.zeros(b, n_max, dtype=torch.long)
    mask = torch.zeros(b, n_max, dtype=torch.bool)
    for k, (edge_index, rel_ids, upos_ids) in enumerate(structures):
        n = len(upos_ids)
        adj[k, edge_index[0], edge_index[1]] = True
        rel[k, edge_index[0], edge_index[1]] = rel_ids
        upos[k, :n] = upos_ids
        mask[k, :n] = True
    return GraphBatch(None, adj, rel, upos, mask)


def collate_graphs(graphs: list[ParseGraph], self_id: int, n_max: int | None = None) -> GraphBatch:
    batch = collate_structures(
        [(g.edge_index, g.edge_relation_ids, g.upos_ids) for g in graphs], self_id, n_max
    )
    n = batch.mask.shape[1]
    feats = graphs[0].node_features.new_zeros(len(graphs), n, graphs[0].node_features.shape[1])
    for k, g in enumerate(graphs):
        feats[k, : g.n_nodes] = g.node_features
    return batch.with_features(feats)


# --------------------------------------------------------------------------
# attention layers


@dataclass
class HierarchicalTextFeatures:
    """One word-feature tensor per GAT layer, shallow (index 0) to deep."""

    layer_features: list[torch.Tensor]  # each [B, N, L] (or [N, L])
    word_mask: torch.Tensor  # bool [B, N] (or [N])

    @property
    def depth(self) -> int:
        return len(self.layer_features)

    def index_select(self, idx) -> "HierarchicalTextFeatures":
        return HierarchicalTextFeatures([f[idx] for f in self.layer_features], self.word_mask[idx])

    def repeat(self, n: int) -> "HierarchicalTextFeatures":
        return HierarchicalTextFeatures(
            [f.repeat_interleave(n, dim=0) for f in self.layer_features],
            self.word_mask.repeat_interleave(n, dim=0),
        )


class GatLayer(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, edge_dim: int, heads: int = 1,
                 negative_slope: float = 0.2):
        super().__init__()
        if out_dim % heads:
            raise ValueError(f"out_dim {out_dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = out_dim // heads
        self.negative_slope = negative_slope
        self.theta = nn.Linear(in_dim, out_dim, bias=False)
        self.theta_e = nn.Linear(edge_dim, out_dim, bias=False)
        # per head: [w_receiver | w_sender | w_edge]
        self.omega = nn.Parameter(torch.randn(heads, 3 * self.head_dim) * (1.0 / self.head_dim) ** 0.5)

    def forward(self, x, adjacency, edge_feats, return_attention: bool = False):
        """x: [B, N, F]; adjacency: bool [B, N, N]; edge_feats: [B, N, N, D_e]."""
        b, n, _ = x.shape
        h = self.theta(x).view(b, n, self.heads, self.head_dim)
        he = self.theta_e(edge_feats).view(b, n, n, self.heads, self.head_dim)
        w_i, w_j, w_e = self.omega.split(self.head_dim, dim=-1)
        logits = (
            (h * w_i).sum(-1).unsqueeze(2)  # receiver term  [B, N, 1, H]
            + (h * w_j).sum(-1).unsqueeze(1)  # sender term  [B, 1, N, H]
            + (he * w_e).sum(-1)  # edge term  [B, N, N, H]
        )
        logits = F.leaky_relu(logits, self.negative_slope)
        adj = adjacency.unsqueeze(-1)
        if not torch.isfinite(logits.sum()) and (bad := adj & ~torch.isfinite(logits)).any():
            node = int(bad.nonzero()[0, 1])
            raise NumericDivergenceError(f"non-finite attention logits at node {node}")
        alpha = torch.softmax(logits.masked_fill(~adj, float("-inf")), dim=2)
        out = torch.einsum("bijh,bjhd->bihd", alpha, h).reshape(b, n, -1)
        return (out, alpha) if return_attention else out


class GatStack(nn.Module):
    """Learnable parameters of the whole linguistic-structure encoder."""

    def __init__(self, vocab: RelationVocab, width: int, num_layers: int = 3, edge_dim: int = 16,
                 heads: int = 1, negative_slope: float = 0.2, use_upos_gains: bool = True):
        super().__init__()
        self.vocab = vocab
        self.num_layers = num_layers
        self.use_upos_gains = use_upos_gains
        self.edge_table = nn.Embedding(vocab.num_relations, edge_dim)
        self.relation_gains = nn.Parameter(torch.ones(vocab.num_relations))
        self.upos_gains = nn.Parameter(torch.ones(vocab.num_upos))
        self.layers = nn.ModuleList(
            GatLayer(width, width, edge_dim, heads, negative_slope) for _ in range(num_layers)
        )
        for layer in self.layers:
            nn.init.xavier_uniform_(layer.theta.weight)

    def relation_features(self) -> torch.Tensor:
        """[R, D_e]: each relation's embedding row scaled by its learned gain."""
        onehot = torch.eye(self.vocab.num_relations, dtype=self.edge_table.weight.dtype)
        return self.relation_gains.unsqueeze(1) * (onehot @ self.edge_table.weight)

    def dense_edge_features(self, relations: torch.Tensor) -> torch.Tensor:
        return self.relation_features()[relations]

    def scale_inputs(self, x, upos_ids):
        if not self.use_upos_gains:
            return x
        return x * self.upos_gains[upos_ids].unsqueeze(-1)

    def forward(self, batch: GraphBatch, return_attention: bool = False):
        x = self.scale_inputs(batch.node_features, batch.upos_ids)
        edge = self.dense_edge_features(batch.relations)
        keep = batch.mask.unsqueeze(-1).to(x.dtype)
        feats, attn = [], []
        for layer in self.layers:
            x, alpha = layer(x, batch.adjacency, edge, return_attention=True)
            x = x * keep
            feats.append(x)
            attn.append(alpha)
        out = HierarchicalTextFeatures(feats, batch.mask)
        return (out, attn) if return_attention else out


# single-graph functional surface ---------------------------------------------


def edge_features(graph: ParseGraph, params: GatStack) -> torch.Tensor:
    """Per-edge features [E, D_e], in ``graph.edge_index`` order."""
    ids = graph.edge_relation_ids
    if ids.numel() and (ids.min() < 0 or ids.max() >= params.vocab.num_relations):
        raise ContractError("edge relation id outside the relation table")
    return params.relation_features()[ids]


def gat_layer(node_feats: torch.Tensor, graph: ParseGraph, edge_feats: torch.Tensor,
              layer: GatLayer, return_attention: bool = False):
    n = graph.n_nodes
    dense = edge_feats.new_zeros(n, n, edge_feats.shape[-1])
    dense = dense.index_put((graph.edge_index[0], graph.edge_index[1]), edge_feats)
    out = layer(node_feats.unsqueeze(0), graph.adjacency.unsqueeze(0), dense.unsqueeze(0),
                return_attention=return_attention)
    if return_attention:
        return out[0][0], out[1][0]
    return out[0]


def gat_stack(graph: ParseGraph, params: GatStack, n_max: int | None = None) -> HierarchicalTextFeatures:
    batch = collate_graphs([graph], params.vocab.self_id, n_max)
    out = params(batch)
    return HierarchicalTextFeatures([f[0] for f in out.layer_features], out.word_mask[0])
