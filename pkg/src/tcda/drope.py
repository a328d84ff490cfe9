"""Discourse-aware rotary scoring.

Two rotary subspaces are fused by concatenation: a micro stream rotated by
token positions and a macro stream rotated by utterance depths, each with
its own base frequency. For a query/key pair in divergent threads the key
position is negated, so the rotary difference becomes the additive path
length ``p_i + p_j``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .dialogue import ROOT_THREAD, TokenIndexMap
from .tensor import DTYPE, ShapeError, Tensor

THETA_MIC = 10000.0
THETA_MAC = 100.0


def inverse_frequencies(width: int, theta: float) -> Tensor:
    k = torch.arange(width // 2, dtype=DTYPE)
    return theta ** (-2.0 * k / width)


def rotary_rotate(x: Tensor, p, theta: float) -> Tensor:
    """Rotate consecutive coordinate pairs of ``x`` by ``p * theta^(-2k/width)``.

    ``p`` is a scalar or a tensor broadcastable against ``x.shape[:-1]``.
    """
    width = x.shape[-1]
    if width % 2:
        raise ShapeError(f"rotary width must be even, got {width}")
    p = torch.as_tensor(p, dtype=DTYPE)
    angle = p[..., None] * inverse_frequencies(width, theta)
    cos, sin = torch.cos(angle), torch.sin(angle)
    pairs = x.reshape(*x.shape[:-1], width // 2, 2)
    x0, x1 = pairs[..., 0], pairs[..., 1]
    out = torch.stack((x0 * cos - x1 * sin, x0 * sin + x1 * cos), dim=-1)
    return out.reshape(*out.shape[:-2], width)


def adapt_position(p, same_thread: bool):
    return p if same_thread else -p


def is_same_thread(a: int, b: int) -> bool:
    return a == b or a == ROOT_THREAD or b == ROOT_THREAD


def dual_scale_project(h_tok: Tensor, h_utt: Tensor, w_mic: Tensor, w_mac: Tensor):
    """(q_mic, q_mac, k_mic, k_mac); queries and keys share the projections."""
    if h_tok.shape[-1] != w_mic.shape[-1] or h_utt.shape[-1] != w_mac.shape[-1]:
        raise ShapeError("stream width does not match projection input width")
    q_mic = h_tok @ w_mic.transpose(-1, -2)
    q_mac = h_utt @ w_mac.transpose(-1, -2)
    return q_mic, q_mac, q_mic, q_mac


@dataclass(frozen=True)
class TokenPosition:
    p_tok: float
    p_utt: float
    thread_id: int


def drope_score(
    q_mic: Tensor,
    q_mac: Tensor,
    k_mic: Tensor,
    k_mac: Tensor,
    query: TokenPosition,
    key: TokenPosition,
    theta_mic: float = THETA_MIC,
    theta_mac: float = THETA_MAC,
) -> Tensor:
    """Score of one query/key pair; the key position is sign-flipped across threads."""
    if q_mic.shape != k_mic.shape or q_mac.shape != k_mac.shape:
        raise ShapeError("query and key widths differ")
    same = is_same_thread(query.thread_id, key.thread_id)
    q = torch.cat(
        (rotary_rotate(q_mic, query.p_tok, theta_mic), rotary_rotate(q_mac, query.p_utt, theta_mac))
    )
    k = torch.cat(
        (
            rotary_rotate(k_mic, adapt_position(key.p_tok, same), theta_mic),
            rotary_rotate(k_mac, adapt_position(key.p_utt, same), theta_mac),
        )
    )
    return q @ k


@dataclass(frozen=True)
class Positions:
    """Tensor view of a token index map used by the batched scorers."""

    p_tok: Tensor
    p_utt: Tensor
    flat: Tensor
    same_thread: Tensor

    @classmethod
    def from_index(cls, index: TokenIndexMap) -> "Positions":
        tid = np.asarray(index.thread_id)
        same = (tid[:, None] == tid[None, :]) | (tid[:, None] == ROOT_THREAD) | (tid[None, :] == ROOT_THREAD)
        return cls(
            torch.tensor(index.p_tok, dtype=DTYPE),
            torch.tensor(index.p_utt, dtype=DTYPE),
            torch.arange(len(index), dtype=DTYPE),
            torch.as_tensor(same),
        )

    def select(self, rows) -> "Positions":
        rows = torch.as_tensor(rows, dtype=torch.long)
        return Positions(self.p_tok[rows], self.p_utt[rows], self.flat[rows], self.same_thread[rows][:, rows])


def drope_scores(
    q_mic: Tensor,
    q_mac: Tensor,
    k_mic: Tensor,
    k_mac: Tensor,
    pos: Positions,
    theta_mic: float = THETA_MIC,
    theta_mac: float = THETA_MAC,
) -> Tensor:
    """All-pairs scores ``S[..., i, j]`` for streams shaped (..., n, width)."""
    q = torch.cat((rotary_rotate(q_mic, pos.p_tok, theta_mic), rotary_rotate(q_mac, pos.p_utt, theta_mac)), -1)
    k_same = torch.cat((rotary_rotate(k_mic, pos.p_tok, theta_mic), rotary_rotate(k_mac, pos.p_utt, theta_mac)), -1)
    k_div = torch.cat((rotary_rotate(k_mic, -pos.p_tok, theta_mic), rotary_rotate(k_mac, -pos.p_utt, theta_mac)), -1)
    same = q @ k_same.transpose(-1, -2)
    divergent = q @ k_div.transpose(-1, -2)
    return torch.where(pos.same_thread, same, divergent)


def rope_scores(q: Tensor, k: Tensor, positions: Tensor, theta: float = THETA_MIC) -> Tensor:
    """Single-scale rotary scores over flat positions."""
    return rotary_rotate(q, positions, theta) @ rotary_rotate(k, positions, theta).transpose(-1, -2)


class DualScaleHeads(nn.Module):
    """``classes`` independent dual-scale rotary bilinear heads."""

    def __init__(self, d_in: int, rotary_dim: int, classes: int, theta_mic=THETA_MIC, theta_mac=THETA_MAC):
        super().__init__()
        if rotary_dim % 4:
            raise ValueError("rotary_dim must split into two even halves")
        if not theta_mic > theta_mac > 1:
            raise ValueError("need theta_mic > theta_mac > 1")
        half = rotary_dim // 2
        self.w_mic = nn.Parameter(torch.zeros(classes, half, d_in, dtype=DTYPE))
        self.w_mac = nn.Parameter(torch.zeros(classes, half, d_in, dtype=DTYPE))
        self.theta_mic, self.theta_mac = theta_mic, theta_mac

    def forward(self, h_tok: Tensor, h_utt: Tensor, pos: Positions) -> Tensor:
        q_mic, q_mac, k_mic, k_mac = dual_scale_project(h_tok, h_utt, self.w_mic, self.w_mac)
        scores = drope_scores(q_mic, q_mac, k_mic, k_mac, pos, self.theta_mic, self.theta_mac)
        return scores.permute(1, 2, 0)


class RopeHeads(nn.Module):
    """Standard-RoPE counterpart: token stream only, flat positions, one base."""

    def __init__(self, d_in: int, rotary_dim: int, classes: int, theta: float = THETA_MIC):
        super().__init__()
        if rotary_dim % 2:
            raise ValueError("rotary_dim must be even")
        self.w = nn.Parameter(torch.zeros(classes, rotary_dim, d_in, dtype=DTYPE))
        self.theta = theta

    def forward(self, h_tok: Tensor, h_utt: Tensor, pos: Positions) -> Tensor:
        q = h_tok @ self.w.transpose(-1, -2)
        return rope_scores(q, q, pos.flat, self.theta).permute(1, 2, 0)


def decay_curve(
    distances,
    theta_mic: float = THETA_MIC,
    theta_mac: float = THETA_MAC,
    rotary_dim: int = 64,
    trials: int = 2000,
    seed: int = 0,
) -> list[dict[str, float]]:
    """Mean normalised self-score ``q^T R(delta) q / |q|^2`` under random features.

    Columns: standard RoPE over the full width, and the two D-RoPE halves.
    """
    gen = torch.Generator().manual_seed(seed)
    half = rotary_dim // 2
    q_full = torch.randn(trials, rotary_dim, generator=gen, dtype=DTYPE)
    q_half = torch.randn(trials, half, generator=gen, dtype=DTYPE)

    def corr(q: Tensor, delta: float, theta: float) -> float:
        rotated = rotary_rotate(q, torch.full((q.shape[0],), float(delta), dtype=DTYPE), theta)
        return ((rotated * q).sum(-1) / (q * q).sum(-1)).mean().item()

    rows = []
    for delta in distances:
        rows.append(
            {
                "distance": float(delta),
                "standard_rope": corr(q_full, delta, theta_mic),
                "drope_micro": corr(q_half, delta, theta_mic),
                "drope_macro": corr(q_half, delta, theta_mac),
            }
        )
    return rows


def format_decay_table(rows: list[dict[str, float]]) -> str:
    cols = ["distance", "standard_rope", "drope_micro", "drope_macro"]
    lines = ["\t".join(cols)]
    for row in rows:
        lines.append("\t".join(f"{row[c]:.0f}" if c == "distance" else f"{row[c]:.6f}" for c in cols))
    return "\n".join(lines) + "\n"
