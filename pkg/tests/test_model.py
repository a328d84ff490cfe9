import hashlib
import itertools
import json
import logging
import math

import numpy as np
import pytest
import torch

from _helpers import make_dialogue
from tcda.config import PipelineConfig
from tcda.dialogue import build_token_index, decompose_threads
from tcda.model import (
    CKEncoder,
    CrossAttention,
    ExternalAdjacency,
    TCDAModel,
    ThreadEncoder,
    Vocab,
    ck_encode,
    global_local_interact,
    normalized_adjacency,
    prepare,
    semantic_adjacency,
    syntactic_adjacency,
    topk_aggregate,
    topk_count,
)
from tcda.tensor import DTYPE, ShapeError, init_parameters

SMALL = PipelineConfig(d=8, encoder_layers=1, encoder_heads=2, gcn_layers=2, dag_layers=1, dropout=0.0)


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=DTYPE)


def np_ln(x, eps=1e-5):
    return (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + eps)


def np_gelu(x):
    return 0.5 * x * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))


def two_thread_dialogue():
    return make_dialogue([1, 1, 2], speakers=["a", "b", "c", "a"], tokens=[["r1", "r2"], ["x", "y"], ["p"], ["z", "q", "x"]])


def test_encoder_contract():
    enc = ThreadEncoder(12, 8, 2, 2)
    init_parameters(enc, 0)
    enc.eval()
    ids = torch.tensor([0, 3, 4, 5, 1], dtype=torch.long)
    a, b = enc(ids), enc(ids)
    assert torch.equal(a, b) and a.shape == (5, 8)
    swapped = torch.tensor([0, 4, 3, 5, 1], dtype=torch.long)
    assert not torch.allclose(enc(swapped)[1:3], a[1:3].flip(0))


def test_unknown_word_maps_to_unk():
    vocab = Vocab(["a", "b"])
    assert vocab["zzz"] == vocab["also-unknown"]
    assert vocab["a"] != vocab["zzz"]
    assert Vocab.from_json(vocab.to_json())["b"] == vocab["b"]


def test_ck_encode_zero_adjacency_closed_form():
    ck = CKEncoder(4, layers=2)
    with torch.no_grad():
        for gcn in (ck.syn, ck.sem):
            for w in gcn.weights:
                w.weight.copy_(torch.eye(4, dtype=DTYPE))
    ck.norm.gain.data.fill_(1.0)
    h = rand(5, 4)
    adj = normalized_adjacency(np.zeros((5, 5)))
    assert torch.equal(adj, torch.eye(5, dtype=DTYPE))
    h_tok, out = ck_encode(ck, [h], [adj], [adj], torch.eye(5, dtype=DTYPE))
    assert torch.equal(h_tok, h)
    x = h.numpy()
    expected = np_ln(x + 2 * np_gelu(np_gelu(x)))
    assert np.allclose(out.detach().numpy(), expected, atol=1e-12, rtol=0)


def test_root_tokens_are_averaged_across_threads():
    d = two_thread_dialogue()
    ex = prepare(d, Vocab.build([d]), SMALL)
    assert len(ex.thread_members) == 2
    root = [p for p in range(ex.n_tokens) if ex.index.utterance_id[p] == 1]
    copies = [rand(len(m), 4, seed=k) for k, m in enumerate(ex.thread_members)]
    merged = ex.assemble @ torch.cat(copies)
    for p in root:
        a, b = (ex.thread_members[k].index(p) for k in (0, 1))
        assert torch.allclose(merged[p], (copies[0][a] + copies[1][b]) / 2, atol=1e-15)
    single = make_dialogue([1, 2])
    ex1 = prepare(single, Vocab.build([single]), SMALL)
    assert torch.equal(ex1.assemble, torch.eye(ex1.n_tokens, dtype=DTYPE))


def test_syntactic_and_semantic_adjacency():
    d = make_dialogue([1], tokens=[["only"], ["a", "b"]])
    index = build_token_index(d, decompose_threads(d))
    members = list(range(len(index)))
    adj = syntactic_adjacency(index, members)
    root = [p for p in members if index.utterance_id[p] == 1]
    content = [p for p in root if index.kind[p] == 1]
    assert len(content) == 1
    (c,) = content
    linked = set(np.nonzero(adj[c])[0])
    assert linked and all(index.kind[p] != 1 and index.utterance_id[p] == 1 for p in linked)
    same = torch.ones(5, 3, dtype=DTYPE)
    sem = semantic_adjacency(same, k=2)
    assert np.array_equal(sem, semantic_adjacency(same, k=2))
    assert list(np.nonzero(sem[4])[0]) == [0, 1]
    assert np.array_equal(sem, sem.T)


def test_external_adjacency_used_verbatim(tmp_path, caplog):
    d = two_thread_dialogue()
    plain = prepare(d, Vocab.build([d]), SMALL)
    threads = []
    for k, m in enumerate(plain.thread_members):
        n = len(m)
        syn = np.eye(n, k=1) + np.eye(n, k=-1)
        sem = np.zeros((n, n))
        sem[0, n - 1] = sem[n - 1, 0] = 1.0
        threads.append({"syn": syn.tolist(), "sem": sem.tolist()})
    path = tmp_path / "adj.jsonl"
    path.write_text(json.dumps({"doc_id": d.doc_id, "threads": threads}) + "\n")
    with caplog.at_level(logging.INFO, logger="tcda"):
        ext = ExternalAdjacency(path)
    assert ext.checksum == hashlib.sha256(path.read_bytes()).hexdigest()
    assert ext.checksum in caplog.text
    ex = prepare(d, Vocab.build([d]), SMALL, adjacency=ext)
    for k, t in enumerate(threads):
        assert torch.equal(ex.syn[k], normalized_adjacency(np.asarray(t["syn"])))
        assert torch.equal(ex.sem_override[k], normalized_adjacency(np.asarray(t["sem"])))
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({"doc_id": d.doc_id, "threads": [{"syn": [[0]], "sem": [[0]]}] * 2}) + "\n")
    with pytest.raises(ShapeError):
        prepare(d, Vocab.build([d]), SMALL, adjacency=ExternalAdjacency(bad))


def fixed_gate(scores):
    table = torch.as_tensor(scores, dtype=DTYPE)
    return lambda rows: table[: rows.shape[0], None]


def test_topk_examples():
    h = rand(6, 3)
    assert torch.allclose(topk_aggregate(h, [[0, 1, 2], [3, 4, 5]], 1.0, fixed_gate([1, 2, 3]))[1], h[3:].mean(0))
    for ratio in (0.1, 0.5, 1.0):
        assert torch.equal(topk_aggregate(h, [[4]], ratio, fixed_gate([0.0]))[0], h[4])
    scores = [0.3, -1.0, 2.0, 0.3]
    best = max(itertools.combinations(range(4), 2), key=lambda c: (sum(scores[i] for i in c), [-i for i in c]))
    got = topk_aggregate(h, [[1, 2, 3, 4]], 0.5, fixed_gate(scores))[0]
    assert torch.allclose(got, h[[1 + i for i in best]].mean(0), atol=1e-15)
    assert best == (0, 2)  # the tie at 0.3 goes to the lower index
    assert [topk_count(m, 0.8) for m in (1, 2, 4, 5, 10)] == [1, 2, 4, 4, 8]
    with pytest.raises(ValueError):
        topk_aggregate(h, [[0]], 0.0, fixed_gate([1.0]))


def test_cross_attention_examples():
    cross = CrossAttention(4)
    init_parameters(cross, 1)
    h_tok, h_utt = rand(5, 4, seed=2), rand(3, 4, seed=3)
    attn = cross.attention(h_tok, h_utt)
    assert torch.allclose(attn.sum(-1), torch.ones(5, dtype=DTYPE), atol=1e-9)
    one = rand(1, 4, seed=4)
    out = global_local_interact(h_tok, one, cross)
    assert torch.allclose(out, cross.norm(h_tok + cross.v(one)), atol=1e-12)
    Wq, Wk, Wv = (m.weight.detach().numpy() for m in (cross.q, cross.k, cross.v))
    x, u = h_tok.numpy(), h_utt.numpy()
    s = (x @ Wq.T) @ (u @ Wk.T).T / 2.0
    p = np.exp(s - s.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    expected = np_ln(x + p @ (u @ Wv.T))
    assert np.allclose(global_local_interact(h_tok, h_utt, cross).detach().numpy(), expected, atol=1e-12, rtol=0)
    with pytest.raises(ShapeError):
        cross.attention(h_tok, rand(3, 5))


def test_thread_isolation_before_root_averaging():
    d = two_thread_dialogue()
    vocab = Vocab.build([d])
    model = TCDAModel(SMALL, len(vocab))
    init_parameters(model, 0)
    model.eval()
    ex = prepare(d, vocab, SMALL)
    base = model.features(ex)["threads"]
    # perturb a content token of utterance 3, which only the second thread contains
    p = next(i for i in range(ex.n_tokens) if ex.index.utterance_id[i] == 3 and ex.index.kind[i] == 1)
    ex.ids = ex.ids.clone()
    ex.ids[p] = vocab["r1"]
    after = model.features(ex)["threads"]
    owner = [k for k, m in enumerate(ex.thread_members) if p in m]
    assert owner == [1]
    assert torch.equal(base[0], after[0])
    assert not torch.equal(base[1], after[1])


def test_model_forward_shapes_and_determinism():
    d = two_thread_dialogue()
    vocab = Vocab.build([d])
    ex = prepare(d, vocab, SMALL)
    outs = []
    for _ in range(2):
        model = TCDAModel(SMALL, len(vocab))
        init_parameters(model, 5)
        model.eval()
        outs.append(model(ex))
    for g, c in (("ent", 4), ("pair", 3), ("pol", 4)):
        assert outs[0][g].shape == (ex.n_tokens, ex.n_tokens, c)
        assert torch.equal(outs[0][g], outs[1][g])
