import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fgt2m.errors import ContractError, FormatError, MalformedParseError, NumericDivergenceError
from fgt2m.ling_graph import (ROOT, SELF, UNK, DependencyParse, GatLayer, GatStack, RelationVocab, Token,
                              build_graph, collate_graphs, edge_features, gat_layer, gat_stack,
                              load_conllu, read_conllu_sentences)

from fd_oracle import relative_error

VOCAB = RelationVocab.default()
THREE = "1\ta\tDET\t3\tdet\n2\tperson\tNOUN\t3\tnsubj\n3\twalks\tVERB\t0\troot\n\n"


def random_parse(rng, n):
    order = rng.permutation(n)
    heads = [ROOT] * n
    for k in range(1, n):
        heads[order[k]] = int(order[rng.integers(k)])
    rels = ["det", "nsubj", "obj", "advmod", "amod", "conj"]
    upos = ["DET", "NOUN", "VERB", "ADV", "ADJ"]
    return DependencyParse([
        Token(f"w{i}", upos[rng.integers(len(upos))], h, "root" if h == ROOT else rels[rng.integers(len(rels))])
        for i, h in enumerate(heads)
    ])


def chain_parse(n):
    return DependencyParse([Token(f"w{i}", "NOUN", i + 1 if i + 1 < n else ROOT, "dep" if i + 1 < n else "root")
                            for i in range(n)])


def stack(width=4, layers=2, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    params = GatStack(VOCAB, width, num_layers=layers, edge_dim=3).to(dtype)
    with torch.no_grad():
        params.relation_gains.uniform_(0.5, 1.5)
        params.upos_gains.uniform_(0.5, 1.5)
    return params


# --- vocab / parsing ---------------------------------------------------------

def test_vocab_reserved_labels():
    assert SELF in VOCAB.relations and UNK in VOCAB.relations
    assert UNK in VOCAB.upos_tags
    assert len(set(VOCAB.relations)) == len(VOCAB.relations)
    assert VOCAB.relation_id("nsubj:pass") == VOCAB.relation_id("nsubj")


def test_vocab_rejects_duplicates():
    with pytest.raises(ValueError):
        RelationVocab(("det", "det", SELF, UNK), ("NOUN", UNK))


def test_vocab_roundtrip(tmp_path):
    VOCAB.save(tmp_path / "rel.txt", tmp_path / "upos.txt")
    assert RelationVocab.load(tmp_path / "rel.txt", tmp_path / "upos.txt") == VOCAB


def test_load_conllu_three_tokens():
    p = load_conllu(THREE, VOCAB)
    assert p.forms == ["a", "person", "walks"]
    assert p.root == 2
    assert [t.head for t in p.tokens] == [2, 2, ROOT]
    assert [t.deprel for t in p.tokens] == ["det", "nsubj", "root"]


def test_load_conllu_ten_columns_and_comments():
    text = "# text = a person walks\n" + "".join(
        "\t".join([i, f, "_", u, "_", "_", h, d, "_", "_"]) + "\n"
        for i, f, u, h, d in [("1", "a", "DET", "3", "det"), ("2", "person", "NOUN", "3", "nsubj"),
                              ("3", "walks", "VERB", "0", "root")])
    assert load_conllu(text, VOCAB).forms == ["a", "person", "walks"]


def test_load_conllu_cycle():
    with pytest.raises(MalformedParseError):
        load_conllu("1\ta\tDET\t2\tdet\n2\tb\tNOUN\t1\tnsubj\n3\tc\tVERB\t0\troot\n", VOCAB)


def test_load_conllu_two_roots():
    with pytest.raises(MalformedParseError):
        load_conllu("1\ta\tDET\t0\troot\n2\tb\tNOUN\t0\troot\n", VOCAB)


def test_load_conllu_missing_columns():
    with pytest.raises(FormatError):
        load_conllu("1\ta\tDET\t0\n", VOCAB)


def test_unknown_deprel_maps_to_unk():
    p = load_conllu("1\ta\tDET\t2\tzzz\n2\tb\tNOUN\t0\troot\n", VOCAB)
    g = build_graph(p, torch.zeros(2, 1), VOCAB)
    assert g.relation_matrix[0, 1] == VOCAB.relation_id(UNK)
    assert g.edge_index.shape[1] == 4


def test_conllu_roundtrip():
    p = random_parse(np.random.default_rng(3), 7)
    assert load_conllu(p.to_conllu(), VOCAB) == p


def test_read_all_sentences():
    assert len(read_conllu_sentences(THREE + THREE, VOCAB)) == 2


# --- graph construction ------------------------------------------------------

def test_build_graph_counts():
    g = build_graph(load_conllu(THREE, VOCAB), torch.randn(3, 4), VOCAB)
    assert int(g.adjacency.sum()) == 7
    assert torch.equal(g.adjacency, g.adjacency.T)
    assert torch.all(g.adjacency.diagonal())
    assert torch.all(g.relation_matrix.diagonal() == VOCAB.self_id)


def test_single_token_graph():
    g = build_graph(DependencyParse([Token("walk", "VERB", ROOT, "root")]), torch.ones(1, 2), VOCAB)
    assert g.adjacency.tolist() == [[True]]
    assert g.relation_matrix.tolist() == [[VOCAB.self_id]]


def test_build_graph_row_mismatch():
    with pytest.raises(ContractError):
        build_graph(load_conllu(THREE, VOCAB), torch.zeros(2, 4), VOCAB)


def test_token_permutation_gives_isomorphic_graph():
    rng = np.random.default_rng(0)
    p = random_parse(rng, 6)
    x = torch.randn(6, 3)
    perm = rng.permutation(6)
    inv = np.argsort(perm)
    q = DependencyParse([Token(p.tokens[o].form, p.tokens[o].upos,
                               ROOT if p.tokens[o].head == ROOT else int(inv[p.tokens[o].head]), p.tokens[o].deprel)
                         for o in perm])
    g = build_graph(p, x, VOCAB).permute(perm)
    h = build_graph(q, x[perm], VOCAB)
    assert torch.equal(g.adjacency, h.adjacency)
    assert torch.equal(g.relation_matrix, h.relation_matrix)
    assert torch.equal(g.upos_ids, h.upos_ids)


# --- edge features -----------------------------------------------------------

def test_edge_feature_is_gained_table_row():
    params = stack()
    g = build_graph(load_conllu(THREE, VOCAB), torch.zeros(3, 4), VOCAB)
    ef = edge_features(g, params)
    for k, r in enumerate(g.edge_relation_ids.tolist()):
        torch.testing.assert_close(ef[k], params.relation_gains[r] * params.edge_table.weight[r])


def test_edge_feature_gain_zero_and_two():
    params = stack()
    det = VOCAB.relation_id("det")
    with torch.no_grad():
        params.relation_gains[det] = 0.0
        params.relation_gains[VOCAB.relation_id("nsubj")] = 2.0
    g = build_graph(load_conllu(THREE, VOCAB), torch.zeros(3, 4), VOCAB)
    ef = edge_features(g, params)
    assert torch.all(ef[g.edge_relation_ids == det] == 0)
    nsubj = VOCAB.relation_id("nsubj")
    torch.testing.assert_close(ef[g.edge_relation_ids == nsubj][0], 2 * params.edge_table.weight[nsubj])


def test_edge_feature_onehot_selects_row():
    params = stack()
    feats = params.relation_features()
    with torch.no_grad():
        params.relation_gains.fill_(1.0)
    torch.testing.assert_close(params.relation_features()[2], params.edge_table.weight[2])
    assert feats.shape == (VOCAB.num_relations, 3)


def test_edge_feature_range_check():
    params = stack()
    g = build_graph(load_conllu(THREE, VOCAB), torch.zeros(3, 4), VOCAB)
    g.edge_relation_ids[0] = VOCAB.num_relations
    with pytest.raises(ContractError):
        edge_features(g, params)


# --- layer -------------------------------------------------------------------

def test_isolated_node_attends_to_itself():
    params = stack()
    g = build_graph(DependencyParse([Token("walk", "VERB", ROOT, "root")]), torch.randn(1, 4, dtype=torch.float64), VOCAB)
    layer = params.layers[0]
    out, alpha = gat_layer(g.node_features, g, edge_features(g, params), layer, return_attention=True)
    assert alpha[0, 0, 0].item() == 1.0
    torch.testing.assert_close(out, layer.theta(g.node_features))


def test_symmetric_pair_equal_weights():
    params = stack()
    p = DependencyParse([Token("a", "NOUN", 1, "dep"), Token("b", "NOUN", ROOT, "root")])
    g = build_graph(p, torch.ones(2, 4, dtype=torch.float64), VOCAB)
    g.edge_relation_ids[:] = VOCAB.relation_id("dep")
    _, alpha = gat_layer(g.node_features, g, edge_features(g, params), params.layers[0], return_attention=True)
    torch.testing.assert_close(alpha[..., 0], torch.full((2, 2), 0.5, dtype=torch.float64))


@given(st.integers(1, 12), st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_attention_rows_are_stochastic(n, seed):
    rng = np.random.default_rng(seed)
    params = stack(seed=seed % 7, layers=3)
    g = build_graph(random_parse(rng, n), torch.randn(n, 4, dtype=torch.float64), VOCAB)
    batch = collate_graphs([g], VOCAB.self_id, n_max=n + 3)
    _, attn = params(batch, return_attention=True)
    for alpha in attn:
        assert torch.all(alpha >= 0)
        assert torch.all((alpha.sum(2) - 1).abs() < 1e-6)
        assert torch.all(alpha[~batch.adjacency] == 0)


def test_non_finite_logits_name_node():
    layer = GatLayer(2, 2, 3).double()
    x = torch.zeros(1, 3, 2, dtype=torch.float64)
    x[0, 1, 0] = float("inf")
    adj = torch.eye(3, dtype=torch.bool).unsqueeze(0)
    with pytest.raises(NumericDivergenceError, match="node"):
        layer(x, adj, torch.zeros(1, 3, 3, 3, dtype=torch.float64))


def test_gat_layer_gradients_match_finite_differences():
    params = stack(width=4, layers=1)
    g = build_graph(random_parse(np.random.default_rng(1), 6), torch.randn(6, 4, dtype=torch.float64), VOCAB)
    layer = params.layers[0]
    w = torch.randn(6, 4, dtype=torch.float64)
    _, alpha = gat_layer(g.node_features, g, edge_features(g, params), layer, return_attention=True)
    assert torch.all((alpha.sum(1) - 1).abs() < 1e-6)

    def loss():
        return (gat_layer(g.node_features, g, edge_features(g, params), layer) * w).sum()

    assert relative_error(loss, [layer.omega, layer.theta.weight, layer.theta_e.weight]) < 1e-4


def test_gat_stack_gradients_match_finite_differences():
    params = stack(width=3, layers=2)
    g = build_graph(random_parse(np.random.default_rng(2), 8), torch.randn(8, 3, dtype=torch.float64), VOCAB)
    ws = [torch.randn(8, 3, dtype=torch.float64) for _ in range(2)]

    def loss():
        feats = gat_stack(g, params)
        return sum((f * w).sum() for f, w in zip(feats.layer_features, ws))

    named = [params.upos_gains, params.relation_gains, params.edge_table.weight]
    for layer in params.layers:
        named += [layer.omega, layer.theta.weight, layer.theta_e.weight]
    assert relative_error(loss, named) < 1e-4


# --- stack -------------------------------------------------------------------

def test_single_layer_stack_equals_layer():
    params = stack(layers=1)
    params.use_upos_gains = False
    g = build_graph(load_conllu(THREE, VOCAB), torch.randn(3, 4, dtype=torch.float64), VOCAB)
    feats = gat_stack(g, params)
    assert feats.depth == 1
    torch.testing.assert_close(feats.layer_features[0],
                               gat_layer(g.node_features, g, edge_features(g, params), params.layers[0]))


def test_padding_rows_are_zero():
    params = stack(layers=3)
    g = build_graph(load_conllu(THREE, VOCAB), torch.randn(3, 4, dtype=torch.float64), VOCAB)
    feats = gat_stack(g, params, n_max=6)
    assert feats.word_mask.tolist() == [True] * 3 + [False] * 3
    for f in feats.layer_features:
        assert torch.all(f[3:] == 0)
    unpadded = gat_stack(g, params)
    for a, b in zip(feats.layer_features, unpadded.layer_features):
        torch.testing.assert_close(a[:3], b, rtol=0, atol=1e-12)


@given(st.integers(2, 10), st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_permutation_equivariance(n, seed):
    rng = np.random.default_rng(seed)
    params = stack(layers=3, seed=seed % 5)
    g = build_graph(random_parse(rng, n), torch.randn(n, 4, dtype=torch.float64), VOCAB)
    perm = torch.as_tensor(rng.permutation(n))
    a = gat_stack(g.permute(perm), params)
    b = gat_stack(g, params)
    for fa, fb in zip(a.layer_features, b.layer_features):
        assert (fa - fb[perm]).abs().max() < 1e-5


def _chain_outputs(x, params, n):
    g = build_graph(chain_parse(n), x, VOCAB)
    return gat_stack(g, params).layer_features


@given(st.integers(3, 8), st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_receptive_field_on_chains(n, seed):
    params = stack(layers=3, seed=seed % 5)
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(n, 4, dtype=torch.float64, generator=gen)
    far = n - 1
    y = x.clone()
    y[far] += torch.randn(4, dtype=torch.float64, generator=gen) + 1.0
    before, after = _chain_outputs(x, params, n), _chain_outputs(y, params, n)
    for layer in range(3):
        # node 0 is at distance n-1 from the perturbed node
        if layer + 1 < far:
            assert torch.equal(before[layer][0], after[layer][0])
        else:
            assert not torch.allclose(before[layer][0], after[layer][0])


def test_chain_layer_one_and_two():
    params = stack(layers=2)
    x = torch.randn(3, 4, dtype=torch.float64)
    y = x.clone()
    y[2] += 1.0
    a, b = _chain_outputs(x, params, 3), _chain_outputs(y, params, 3)
    assert torch.equal(a[0][0], b[0][0])
    assert (a[1][0] - b[1][0]).abs().max() > 1e-8


def test_upos_gains_toggle():
    params = stack(layers=1)
    g = build_graph(load_conllu(THREE, VOCAB), torch.randn(3, 4, dtype=torch.float64), VOCAB)
    with torch.no_grad():
        params.upos_gains[VOCAB.upos_id("DET")] = 0.0
    gained = gat_stack(g, params).layer_features[0]
    params.use_upos_gains = False
    plain = gat_stack(g, params).layer_features[0]
    assert not torch.allclose(gained, plain)
