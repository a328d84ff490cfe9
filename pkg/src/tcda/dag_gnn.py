"""Relational propagation over a TC-DAG with a dual-GRU node update.

Nodes are updated in chronological order inside each layer, so a node
attends over the *current-layer* states of its predecessors and its own
previous-layer state. The root has no predecessors and passes through.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .dag import TcDag
from .tensor import DTYPE, GRUCell, LayerNorm, Linear, ShapeError, Tensor, dropout, gelu, softmax


class DagLayer(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.d = d
        self.attn = Linear(2 * d, 1, bias=False)
        self.rel = nn.Parameter(torch.zeros(2, d, d, dtype=DTYPE))
        self.gru_h = GRUCell(d, d)
        self.gru_c = GRUCell(d, d)


def relational_attention(layer: DagLayer, h_i_prev: Tensor, neighbors: Tensor) -> Tensor:
    """Softmax over neighbours of ``W_alpha [h_j || h_i_prev]``; ``neighbors`` is (k, d)."""
    if neighbors.dim() != 2 or neighbors.shape[0] == 0:
        raise ValueError("relational_attention needs at least one neighbour")
    w = layer.attn.weight[0]
    scores = neighbors @ w[: layer.d] + h_i_prev @ w[layer.d :]
    return softmax(scores, axis=0)


def aggregate_context(layer: DagLayer, alpha: Tensor, neighbors: Tensor, relations) -> Tensor:
    """Sum of ``alpha_j * W_{r_j} h_j``."""
    rel = torch.as_tensor(list(relations), dtype=torch.long)
    if rel.numel() != neighbors.shape[0] or alpha.shape[0] != neighbors.shape[0]:
        raise ShapeError("weights, neighbours and relations must align")
    if ((rel != 0) & (rel != 1)).any():
        raise ValueError(f"unknown relation value in {rel.tolist()}")
    projected = torch.einsum("kde,ke->kd", layer.rel[rel], neighbors)
    return alpha @ projected


def dual_gru_update(layer: DagLayer, h_prev: Tensor, m: Tensor) -> Tensor:
    if h_prev.shape != m.shape:
        raise ShapeError(f"state {tuple(h_prev.shape)} vs context {tuple(m.shape)}")
    h_node = layer.gru_h(h_prev, m)
    h_ctx = layer.gru_c(m, h_prev)
    return h_node + h_ctx


class DagGnn(nn.Module):
    """Stack of relational DAG layers followed by ``LN(H + H^(L))``."""

    def __init__(self, d: int, layers: int = 2, dropout_rate: float = 0.0):
        super().__init__()
        if layers < 1:
            raise ValueError("the DAG encoder needs at least one layer")
        self.layers = nn.ModuleList(DagLayer(d) for _ in range(layers))
        self.norm = LayerNorm(d)
        self.dropout_rate = dropout_rate
        self.generator: torch.Generator | None = None

    def forward(self, g: TcDag, H: Tensor) -> Tensor:
        return dag_forward(g, H, self)


def dag_forward(g: TcDag, H: Tensor, gnn: DagGnn) -> Tensor:
    if H.dim() != 2 or H.shape[0] != g.n:
        raise ShapeError(f"graph has {g.n} nodes but features are {tuple(H.shape)}")
    preds = [g.predecessors(i) for i in range(1, g.n + 1)]
    training, rate, gen = gnn.training, gnn.dropout_rate, gnn.generator
    prev = H
    for layer in gnn.layers:
        states: list[Tensor] = []
        for i in range(g.n):
            h_prev = prev[i]
            if not preds[i]:
                states.append(h_prev)
                continue
            src = [j - 1 for j, _ in preds[i]]
            neigh = torch.stack([states[j] for j in src])
            alpha = dropout(relational_attention(layer, h_prev, neigh), rate, training, gen)
            m = aggregate_context(layer, alpha, neigh, [r for _, r in preds[i]])
            m_in = dropout(m, rate, training, gen)
            h_in = dropout(h_prev, rate, training, gen)
            states.append(layer.gru_h(h_prev, m_in) + layer.gru_c(m, h_in))
        prev = torch.stack(states)
    return gnn.norm(H + prev)


class ReplyGcn(nn.Module):
    """Undirected reply-graph GCN used when the TC-DAG is ablated."""

    def __init__(self, d: int, layers: int = 2, dropout_rate: float = 0.0):
        super().__init__()
        if layers < 1:
            raise ValueError("the reply GCN needs at least one layer")
        self.weights = nn.ModuleList(Linear(d, d, bias=False) for _ in range(layers))
        self.norm = LayerNorm(d)
        self.dropout_rate = dropout_rate
        self.generator: torch.Generator | None = None

    def forward(self, g: TcDag, H: Tensor) -> Tensor:
        if H.shape[0] != g.n:
            raise ShapeError(f"graph has {g.n} nodes but features are {tuple(H.shape)}")
        adj = torch.eye(g.n, dtype=DTYPE)
        for e in g.edges:
            adj[e.src - 1, e.dst - 1] = 1.0
            adj[e.dst - 1, e.src - 1] = 1.0
        norm = adj.sum(-1).rsqrt()
        adj = norm[:, None] * adj * norm[None, :]
        out = H
        for w in self.weights:
            out = gelu(adj @ w(dropout(out, self.dropout_rate, self.training, self.generator)))
        return self.norm(H + out)
