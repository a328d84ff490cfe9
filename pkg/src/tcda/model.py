"""End-to-end quadruple model.

Threads are encoded independently by a small self-attention stack, refined
by parallel syntactic/semantic GCNs, re-assembled globally (root tokens
averaged across threads), pooled into utterance vectors, propagated over the
utterance graph, fused back into tokens by cross-attention and scored on the
three label grids with rotary heads.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .config import PipelineConfig
from .dag import TcDag, build_graph
from .dag_gnn import DagGnn, ReplyGcn
from .dialogue import CLS, CONTENT, Dialogue, ThreadDecomposition, TokenIndexMap, build_token_index, decompose_threads
from .drope import Positions
from .grid import LabelGrids, TaskHeads, content_mask, encode_grids, score_grids
from .tensor import DTYPE, LayerNorm, Linear, ShapeError, Tensor, dropout, gelu, softmax

logger = logging.getLogger(__name__)

UNK, CLS_TOKEN = "[UNK]", "[CLS]"


class Vocab:
    """Token ids: [UNK], [CLS], speaker slots, then words in first-seen order."""

    def __init__(self, words: Sequence[str] = (), max_speakers: int = 8):
        self.max_speakers = max_speakers
        self.itos = [UNK, CLS_TOKEN] + [f"[SPK{k}]" for k in range(max_speakers)]
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if word not in self.stoi:
            self.stoi[word] = len(self.itos)
            self.itos.append(word)
        return self.stoi[word]

    def __len__(self) -> int:
        return len(self.itos)

    def __getitem__(self, word: str) -> int:
        return self.stoi.get(word, 0)

    def speaker(self, slot: int) -> int:
        return 2 + slot % self.max_speakers

    @classmethod
    def build(cls, dialogues: Sequence[Dialogue], max_speakers: int = 8) -> "Vocab":
        return cls([t for d in dialogues for u in d.utterances for t in u.tokens], max_speakers)

    def to_json(self) -> str:
        return json.dumps({"max_speakers": self.max_speakers, "words": self.itos[2 + self.max_speakers :]})

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        data = json.loads(text)
        return cls(data["words"], data["max_speakers"])


def token_ids(d: Dialogue, index: TokenIndexMap, vocab: Vocab) -> list[int]:
    slots: dict[str, int] = {}
    for u in d.utterances:
        slots.setdefault(u.speaker, len(slots))
    ids = []
    for utt, off, kind in zip(index.utterance_id, index.offset_in_utterance, index.kind):
        u = d.utterance(utt)
        if kind == CLS:
            ids.append(vocab[CLS_TOKEN])
        elif kind == CONTENT:
            ids.append(vocab[u.tokens[off - 1 if index.wrapped else off]])
        else:
            ids.append(vocab.speaker(slots[u.speaker]))
    return ids


def syntactic_adjacency(index: TokenIndexMap, members: Sequence[int]) -> np.ndarray:
    """Parser-free stand-in: neighbouring content tokens plus wrapper-to-content links."""
    n = len(members)
    adj = np.zeros((n, n))
    by_utt: dict[int, list[int]] = {}
    for local, p in enumerate(members):
        by_utt.setdefault(index.utterance_id[p], []).append(local)
    for locs in by_utt.values():
        content = [k for k in locs if index.kind[members[k]] == CONTENT]
        wrappers = [k for k in locs if index.kind[members[k]] != CONTENT]
        for a, b in zip(content, content[1:]):
            adj[a, b] = adj[b, a] = 1.0
        for w in wrappers:
            for c in content:
                adj[w, c] = adj[c, w] = 1.0
    return adj


def semantic_adjacency(features: Tensor, k: int = 3) -> np.ndarray:
    """Symmetrised binary top-k cosine graph; ties go to the lower index."""
    x = features.detach().cpu().numpy()
    n = x.shape[0]
    adj = np.zeros((n, n))
    if n < 2:
        return adj
    norms = np.linalg.norm(x, axis=1)
    norms[norms == 0] = 1.0
    unit = x / norms[:, None]
    sim = unit @ unit.T
    np.fill_diagonal(sim, -np.inf)
    order = np.argsort(-sim, axis=1, kind="stable")[:, : min(k, n - 1)]
    for i, row in enumerate(order):
        adj[i, row] = 1.0
    return np.maximum(adj, adj.T)


def default_adjacency(index: TokenIndexMap, members: Sequence[int], features: Tensor, k: int = 3):
    return syntactic_adjacency(index, members), semantic_adjacency(features, k)


class ExternalAdjacency:
    """Adjacency supplied per dialogue/thread in a JSON-lines file:
    ``{"doc_id": ..., "threads": [{"syn": [[...]], "sem": [[...]]}, ...]}``."""

    def __init__(self, path):
        raw = Path(path).read_bytes()
        self.checksum = hashlib.sha256(raw).hexdigest()
        logger.info("external adjacency %s sha256=%s", path, self.checksum)
        self.table = {}
        for line in raw.decode("utf-8").splitlines():
            if line.strip():
                rec = json.loads(line)
                self.table[rec["doc_id"]] = [
                    (np.asarray(t["syn"], dtype=np.float64), np.asarray(t["sem"], dtype=np.float64))
                    for t in rec["threads"]
                ]

    def __call__(self, doc_id: str, thread: int):
        return self.table[doc_id][thread]


def normalized_adjacency(adj: np.ndarray) -> Tensor:
    a = torch.as_tensor(adj, dtype=DTYPE) + torch.eye(adj.shape[0], dtype=DTYPE)
    inv = a.sum(-1).rsqrt()
    return inv[:, None] * a * inv[None, :]


@dataclass
class Example:
    """A dialogue with everything the model needs precomputed."""

    dialogue: Dialogue
    threads: ThreadDecomposition
    index: TokenIndexMap
    graph: TcDag
    ids: Tensor
    thread_members: list[list[int]]
    syn: list[Tensor]
    sem_override: list[Tensor] | None
    assemble: Tensor
    utterance_content: list[list[int]]
    token_utterance: Tensor
    positions: Positions
    grids: LabelGrids | None

    @property
    def n_tokens(self) -> int:
        return len(self.index)


def prepare(
    d: Dialogue,
    vocab: Vocab,
    config: PipelineConfig,
    adjacency: ExternalAdjacency | None = None,
    with_gold: bool = True,
) -> Example:
    td = decompose_threads(d)
    index = build_token_index(d, td)
    graph = build_graph(d, td, config.window, config.graph)
    ranges = index.utterance_ranges()
    members = [[p for u in thread for p in range(*ranges[u])] for thread in td.threads]
    n = len(index)
    counts = np.zeros(n)
    for m in members:
        counts[m] += 1
    assemble = np.zeros((n, sum(len(m) for m in members)))
    col = 0
    for m in members:
        for p in m:
            assemble[p, col] = 1.0 / counts[p]
            col += 1
    if adjacency is not None:
        pairs = [adjacency(d.doc_id, k) for k in range(len(members))]
        for (syn, sem), m in zip(pairs, members):
            if syn.shape != (len(m), len(m)) or sem.shape != (len(m), len(m)):
                raise ShapeError(f"{d.doc_id}: adjacency must be {len(m)}x{len(m)}")
        syn = [normalized_adjacency(s) for s, _ in pairs]
        sem = [normalized_adjacency(s) for _, s in pairs]
    else:
        syn = [normalized_adjacency(syntactic_adjacency(index, m)) for m in members]
        sem = None
    utterance_content = [
        [p for p in range(*ranges[u.id]) if index.kind[p] == CONTENT] for u in d.utterances
    ]
    grids = encode_grids(d, index=index) if with_gold else None
    return Example(
        dialogue=d,
        threads=td,
        index=index,
        graph=graph,
        ids=torch.tensor(token_ids(d, index, vocab), dtype=torch.long),
        thread_members=members,
        syn=syn,
        sem_override=sem,
        assemble=torch.as_tensor(assemble, dtype=DTYPE),
        utterance_content=utterance_content,
        token_utterance=torch.tensor([u - 1 for u in index.utterance_id], dtype=torch.long),
        positions=Positions.from_index(index),
        grids=grids,
    )


def sinusoid(n: int, d: int) -> Tensor:
    pos = torch.arange(n, dtype=DTYPE)[:, None]
    k = torch.arange(0, d, 2, dtype=DTYPE)
    angle = pos / 10000 ** (k / d)
    out = torch.zeros(n, d, dtype=DTYPE)
    out[:, 0::2] = torch.sin(angle)
    out[:, 1::2] = torch.cos(angle[:, : d // 2])
    return out


class SelfAttentionBlock(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = Linear(d, d)
        self.k = Linear(d, d, bias=False)  # a key bias only shifts each softmax row
        self.v = Linear(d, d)
        self.out = Linear(d, d)
        self.norm1 = LayerNorm(d)
        self.ff1 = Linear(d, 2 * d)
        self.ff2 = Linear(2 * d, d)
        self.norm2 = LayerNorm(d)

    def forward(self, x: Tensor, rate: float = 0.0, gen: torch.Generator | None = None) -> Tensor:
        n, d = x.shape
        h = self.heads
        q, k, v = (proj(x).reshape(n, h, d // h).transpose(0, 1) for proj in (self.q, self.k, self.v))
        attn = softmax(q @ k.transpose(-1, -2) / math.sqrt(d // h), axis=-1)
        attn = dropout(attn, rate, self.training, gen)
        ctx = (attn @ v).permute(1, 0, 2).reshape(n, d)
        x = self.norm1(x + dropout(self.out(ctx), rate, self.training, gen))
        return self.norm2(x + dropout(self.ff2(gelu(self.ff1(x))), rate, self.training, gen))


class ThreadEncoder(nn.Module):
    """Trainable stand-in for the pretrained encoder: one thread at a time."""

    def __init__(self, vocab_size: int, d: int, layers: int, heads: int, dropout_rate: float = 0.0):
        super().__init__()
        self.embed = nn.Parameter(torch.zeros(vocab_size, d, dtype=DTYPE))
        self.blocks = nn.ModuleList(SelfAttentionBlock(d, heads) for _ in range(layers))
        self.dropout_rate = dropout_rate
        self.generator: torch.Generator | None = None

    def forward(self, ids: Tensor) -> Tensor:
        x = self.embed[ids] + sinusoid(len(ids), self.embed.shape[1])
        x = dropout(x, self.dropout_rate, self.training, self.generator)
        for block in self.blocks:
            x = block(x, self.dropout_rate, self.generator)
        return x


class GCN(nn.Module):
    def __init__(self, d: int, layers: int):
        super().__init__()
        self.weights = nn.ModuleList(Linear(d, d, bias=False) for _ in range(layers))

    def forward(self, adj: Tensor, h: Tensor) -> Tensor:
        if adj.shape != (h.shape[0], h.shape[0]):
            raise ShapeError(f"adjacency {tuple(adj.shape)} does not match {h.shape[0]} tokens")
        for w in self.weights:
            h = gelu(adj @ w(h))
        return h


class CKEncoder(nn.Module):
    def __init__(self, d: int, layers: int):
        super().__init__()
        self.syn = GCN(d, layers)
        self.sem = GCN(d, layers)
        self.norm = LayerNorm(d)


def ck_encode(ck: CKEncoder, thread_states: Sequence[Tensor], syn: Sequence[Tensor], sem: Sequence[Tensor], assemble: Tensor):
    """(H_tok, H'_tok): re-assembled thread features and their knowledge-enhanced version."""
    knowledge = [ck.syn(a_syn, h) + ck.sem(a_sem, h) for h, a_syn, a_sem in zip(thread_states, syn, sem)]
    h_tok = assemble @ torch.cat(list(thread_states))
    h_knw = assemble @ torch.cat(knowledge)
    return h_tok, ck.norm(h_tok + h_knw)


class TopKAggregator(nn.Module):
    def __init__(self, d: int, ratio: float):
        super().__init__()
        self.gate = Linear(d, 1)
        self.ratio = ratio

    def forward(self, h: Tensor, utterance_content: Sequence[Sequence[int]]) -> Tensor:
        return topk_aggregate(h, utterance_content, self.ratio, self.gate)


def topk_count(m: int, ratio: float) -> int:
    return max(1, min(m, math.ceil(ratio * m - 1e-9)))


def topk_aggregate(h: Tensor, utterance_content, ratio: float, gate: Callable[[Tensor], Tensor]) -> Tensor:
    """Mean of the ``ceil(ratio * m)`` best-gated content tokens of each utterance."""
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    pooled = []
    for positions in utterance_content:
        if not positions:
            raise ValueError("utterance without content tokens")
        rows = h[list(positions)]
        scores = gate(rows).reshape(-1).detach().cpu().numpy()
        keep = np.sort(np.argsort(-scores, kind="stable")[: topk_count(len(positions), ratio)])
        pooled.append(rows[torch.as_tensor(keep)].mean(0))
    return torch.stack(pooled)


class CrossAttention(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.q = Linear(d, d, bias=False)
        self.k = Linear(d, d, bias=False)
        self.v = Linear(d, d, bias=False)
        self.norm = LayerNorm(d)

    def attention(self, h_tok: Tensor, h_utt: Tensor) -> Tensor:
        if h_tok.shape[-1] != h_utt.shape[-1]:
            raise ShapeError("token and utterance widths differ")
        return softmax(self.q(h_tok) @ self.k(h_utt).T / math.sqrt(h_tok.shape[-1]), axis=-1)

    def forward(self, h_tok: Tensor, h_utt: Tensor) -> Tensor:
        return global_local_interact(h_tok, h_utt, self)


def global_local_interact(h_tok: Tensor, h_utt: Tensor, cross: CrossAttention) -> Tensor:
    return cross.norm(h_tok + cross.attention(h_tok, h_utt) @ cross.v(h_utt))


class TCDAModel(nn.Module):
    def __init__(self, config: PipelineConfig, vocab_size: int):
        super().__init__()
        c = config
        self.config = c
        self.encoder = ThreadEncoder(vocab_size, c.d, c.encoder_layers, c.encoder_heads, c.dropout)
        self.ck = CKEncoder(c.d, c.gcn_layers)
        self.topk = TopKAggregator(c.d, c.topk_ratio)
        if c.graph == "reply":
            self.graph = ReplyGcn(c.d, c.dag_layers, c.dropout)
        else:
            self.graph = DagGnn(c.d, c.dag_layers, c.dropout)
        self.cross = CrossAttention(c.d)
        self.heads = TaskHeads(c.d, c.resolved_head_dim, c.resolved_rotary_dim, c.theta_mic, c.theta_mac, c.position)
        self.generator = torch.Generator().manual_seed(c.seed)
        self.encoder.generator = self.generator
        self.graph.generator = self.generator

    def features(self, ex: Example) -> dict[str, Tensor]:
        thread_states = [self.encoder(ex.ids[m]) for m in ex.thread_members]
        if ex.sem_override is not None:
            sem = ex.sem_override
        else:
            sem = [normalized_adjacency(semantic_adjacency(h, self.config.sem_topk)) for h in thread_states]
        h_tok, h_tok2 = ck_encode(self.ck, thread_states, ex.syn, sem, ex.assemble)
        h_utt = self.topk(h_tok, ex.utterance_content)
        h_utt2 = self.graph(ex.graph, h_utt)
        h_final = self.cross(h_tok2, h_utt2)
        return {
            "threads": thread_states,
            "h_tok": h_tok,
            "h_tok_ck": h_tok2,
            "h_utt": h_utt,
            "h_utt_graph": h_utt2,
            "h_final": h_final,
        }

    def forward(self, ex: Example) -> dict[str, Tensor]:
        f = self.features(ex)
        return score_grids(f["h_final"], f["h_utt_graph"][ex.token_utterance], ex.positions, self.heads)


__all__ = [
    "CKEncoder",
    "CrossAttention",
    "Example",
    "ExternalAdjacency",
    "TCDAModel",
    "ThreadEncoder",
    "TopKAggregator",
    "Vocab",
    "ck_encode",
    "content_mask",
    "default_adjacency",
    "global_local_interact",
    "prepare",
    "semantic_adjacency",
    "syntactic_adjacency",
    "topk_aggregate",
]
