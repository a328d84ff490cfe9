"""Grid tagging: label grids, per-class rotary heads, weighted loss, decoding, metrics.

Grids are indexed by positions in the wrapped token sequence; only
content-token pairs are unmasked. Label 0 is ``other`` in every grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from .dialogue import CONTENT, Dialogue, Quadruple, Sentiment, Span, TokenIndexMap, build_token_index, decompose_threads
from .drope import DualScaleHeads, Positions, RopeHeads
from .tensor import DTYPE, Linear, ShapeError, Tensor

ENT_LABELS = ("other", "TGT", "ASP", "OPI")
PAIR_LABELS = ("other", "H2H", "T2T")
POL_LABELS = ("other", "POS", "NEG", "NEU")
GRIDS = {"ent": ENT_LABELS, "pair": PAIR_LABELS, "pol": POL_LABELS}

OTHER = 0
TGT, ASP, OPI = 1, 2, 3
H2H, T2T = 1, 2
POL_OF = {Sentiment.POS: 1, Sentiment.NEG: 2, Sentiment.NEU: 3}
SENTIMENT_OF = {v: k for k, v in POL_OF.items()}

DEFAULT_WEIGHTS = {
    "ent": (0.25, 1.0, 1.0, 1.0),
    "pair": (0.25, 1.0, 1.0),
    "pol": (0.25, 1.0, 1.0, 1.0),
}

ROLE_PAIRS = ((0, 1), (0, 2), (1, 2))


class AnnotationConflict(ValueError):
    def __init__(self, grid: str, cell: tuple[int, int], old: int, new: int):
        labels = GRIDS[grid]
        super().__init__(f"{grid} cell {cell}: {labels[old]} conflicts with {labels[new]}")
        self.grid, self.cell = grid, cell


@dataclass
class LabelGrids:
    ent: np.ndarray
    pair: np.ndarray
    pol: np.ndarray
    mask: np.ndarray

    @classmethod
    def empty(cls, n: int, mask: np.ndarray | None = None) -> "LabelGrids":
        z = lambda: np.zeros((n, n), dtype=np.int64)  # noqa: E731
        return cls(z(), z(), z(), np.ones((n, n), dtype=bool) if mask is None else mask)

    def __getitem__(self, grid: str) -> np.ndarray:
        return getattr(self, grid)

    def __eq__(self, other) -> bool:
        return all(np.array_equal(self[g], other[g]) for g in (*GRIDS, "mask"))


def content_mask(index: TokenIndexMap) -> np.ndarray:
    content = np.asarray(index.kind) == CONTENT
    return content[:, None] & content[None, :]


def grid_mask(grids: LabelGrids, g: str) -> np.ndarray:
    """Cells that carry a label for grid ``g``; spans live on the upper triangle."""
    if g == "ent":
        return np.triu(grids.mask)
    return grids.mask


def _write(grid: np.ndarray, name: str, cell: tuple[int, int], label: int) -> None:
    old = grid[cell]
    if old != OTHER and old != label:
        raise AnnotationConflict(name, cell, int(old), label)
    grid[cell] = label


def _positions(q: Quadruple, where: dict[int, int]) -> list[tuple[int, int] | None]:
    return [None if s is None else (where[s[0]], where[s[1]]) for s in q.triple]


def encode_grids(
    d: Dialogue, quads: Iterable[Quadruple] | None = None, index: TokenIndexMap | None = None
) -> LabelGrids:
    """Label grids for ``quads`` (defaults to the dialogue's gold set).

    Raises AnnotationConflict when two quadruples need different labels on one cell.
    Elements left empty by permissive parsing contribute nothing.
    """
    if index is None:
        index = build_token_index(d, decompose_threads(d))
    quads = d.quadruples if quads is None else tuple(quads)
    grids = LabelGrids.empty(len(index), content_mask(index))
    where = index.position_of_content()
    for q in quads:
        spans = _positions(q, where)
        for role, span in zip((TGT, ASP, OPI), spans):
            if span is not None:
                _write(grids.ent, "ent", span, role)
        for x, y in ROLE_PAIRS:
            a, b = spans[x], spans[y]
            if a is None or b is None:
                continue
            for cell in ((a[0], b[0]), (b[0], a[0])):
                _write(grids.pair, "pair", cell, H2H)
            if (a[1], b[1]) != (a[0], b[0]):
                for cell in ((a[1], b[1]), (b[1], a[1])):
                    _write(grids.pair, "pair", cell, T2T)
        t, o = spans[0], spans[2]
        if t is not None and o is not None:
            for cell in ((t[0], o[0]), (o[0], t[0])):
                _write(grids.pol, "pol", cell, POL_OF[q.sentiment])
    return grids


def pairing_ambiguities(quads: Iterable[Quadruple]) -> list[tuple[Span, Span, Span]]:
    """Unannotated triples whose three role pairs would all read as linked.

    Links are derived the way the grid stores them: an H2H cell on the heads
    and a T2T cell on the tails, where a pair of single-token spans only has
    the head cell. Head cells are shared by every role pair, so a single-token
    pair can be linked by an unrelated pair that starts on the same tokens.
    Such sets cannot survive a grid round trip.
    """
    quads = [q for q in quads if q.complete]
    heads: set[tuple[int, int]] = set()
    tails: set[tuple[int, int]] = set()
    for q in quads:
        for x, y in ROLE_PAIRS:
            a, b = q.triple[x], q.triple[y]
            heads.update({(a[0], b[0]), (b[0], a[0])})
            if (a[1], b[1]) != (a[0], b[0]):
                tails.update({(a[1], b[1]), (b[1], a[1])})

    def linked(a: Span, b: Span) -> bool:
        if (a[0], b[0]) not in heads:
            return False
        return (a[1], b[1]) in tails or (a[0] == a[1] and b[0] == b[1])

    targets = sorted({q.target for q in quads})
    aspects = sorted({q.aspect for q in quads})
    opinions = sorted({q.opinion for q in quads})
    known = {q.triple for q in quads}
    out = []
    for t, a, o in product(targets, aspects, opinions):
        if (t, a, o) not in known and linked(t, a) and linked(t, o) and linked(a, o):
            out.append((t, a, o))
    return out


def find_conflicts(d: Dialogue, quads: Iterable[Quadruple], index: TokenIndexMap | None = None) -> list[str]:
    quads = tuple(quads)
    problems = []
    try:
        encode_grids(d, quads, index)
    except AnnotationConflict as exc:
        problems.append(str(exc))
    problems.extend(f"ambiguous triple {t}" for t in pairing_ambiguities(quads))
    return problems


@dataclass
class DecodeReport:
    spans: int = 0
    orphan_spans: int = 0
    invalid_spans: int = 0
    truncated: bool = False
    details: list[str] = field(default_factory=list)


def decode_quadruples(
    grids: LabelGrids, index: TokenIndexMap, max_spans: int = 2000, max_quads: int = 5000
) -> tuple[list[Quadruple], DecodeReport]:
    """Spans from the entity grid, pairs from H2H+T2T links, triples whose three
    role pairs all link; sentiment from the polarity cell at (target head,
    opinion head), NEU when that cell is ``other``."""
    report = DecodeReport()
    utt = np.asarray(index.utterance_id)
    content = np.asarray(index.content_index)
    ent = np.where(grids.mask, grids.ent, OTHER)
    rows, cols = np.nonzero(np.triu(ent != OTHER))
    spans: dict[int, list[tuple[int, int]]] = {TGT: [], ASP: [], OPI: []}
    for s, e in zip(rows.tolist(), cols.tolist()):
        if utt[s] != utt[e]:
            report.invalid_spans += 1
            continue
        spans[int(ent[s, e])].append((s, e))
    report.spans = sum(len(v) for v in spans.values())
    for role in spans:
        if len(spans[role]) > max_spans:
            spans[role] = spans[role][:max_spans]
            report.truncated = True

    pair = np.where(grids.mask, grids.pair, OTHER)
    hh = (pair == H2H) | (pair.T == H2H)
    tt = (pair == T2T) | (pair.T == T2T)

    def links(xs, ys) -> np.ndarray:
        if not xs or not ys:
            return np.zeros((len(xs), len(ys)), dtype=bool)
        hx, tx = np.array(xs).T
        hy, ty = np.array(ys).T
        coincide = (hx[:, None] == tx[:, None]) & (hy[None, :] == ty[None, :])
        tail = tt[np.ix_(tx, ty)] | (coincide & hh[np.ix_(hx, hy)])
        return hh[np.ix_(hx, hy)] & tail

    T, A, O = spans[TGT], spans[ASP], spans[OPI]
    ta, to, ao = links(T, A), links(T, O), links(A, O)
    used: set[tuple[int, int]] = set()
    quads = []
    for ti in range(len(T)):
        for ai in np.nonzero(ta[ti])[0]:
            for oi in np.nonzero(to[ti] & ao[ai])[0]:
                t, a, o = T[ti], A[ai], O[oi]
                label = int(grids.pol[t[0], o[0]]) if grids.mask[t[0], o[0]] else OTHER
                sentiment = SENTIMENT_OF.get(label, Sentiment.NEU)
                quads.append(
                    Quadruple(
                        (int(content[t[0]]), int(content[t[1]])),
                        (int(content[a[0]]), int(content[a[1]])),
                        (int(content[o[0]]), int(content[o[1]])),
                        sentiment,
                    )
                )
                used.update((t, a, o))
                if len(quads) >= max_quads:
                    report.truncated = True
                    break
            if report.truncated and len(quads) >= max_quads:
                break
        if report.truncated and len(quads) >= max_quads:
            break
    report.orphan_spans = sum(1 for v in spans.values() for s in v if s not in used)
    quads = sorted(set(quads), key=Quadruple.sort_key)
    return quads, report


class TaskHeads(nn.Module):
    """Per-grid task space followed by one rotary bilinear head per class."""

    def __init__(
        self,
        d: int,
        head_dim: int | None = None,
        rotary_dim: int | None = None,
        theta_mic: float = 10000.0,
        theta_mac: float = 100.0,
        position: str = "drope",
    ):
        super().__init__()
        head_dim = head_dim or d
        rotary_dim = rotary_dim or head_dim
        self.position = position
        self.spaces = nn.ModuleDict({g: Linear(d, head_dim) for g in GRIDS})
        if position == "drope":
            heads = {g: DualScaleHeads(head_dim, rotary_dim, len(labels), theta_mic, theta_mac) for g, labels in GRIDS.items()}
        elif position == "rope":
            heads = {g: RopeHeads(head_dim, rotary_dim, len(labels), theta_mic) for g, labels in GRIDS.items()}
        else:
            raise ValueError(f"unknown position scheme {position!r}")
        self.heads = nn.ModuleDict(heads)
        # rotary scores grow with the width; temper them and give each class an offset
        self.scale = rotary_dim ** -0.5
        self.bias = nn.ParameterDict({g: nn.Parameter(torch.zeros(len(labels), dtype=DTYPE)) for g, labels in GRIDS.items()})

    def forward(self, h_tok: Tensor, h_utt: Tensor, pos: Positions) -> dict[str, Tensor]:
        return score_grids(h_tok, h_utt, pos, self)


def score_grids(h_tok: Tensor, h_utt: Tensor, pos: Positions, heads: TaskHeads) -> dict[str, Tensor]:
    """Per-grid logits shaped (n, n, C_g): tempered rotary scores plus a class bias."""
    if h_tok.shape != h_utt.shape:
        raise ShapeError(f"token stream {tuple(h_tok.shape)} vs utterance stream {tuple(h_utt.shape)}")
    out = {}
    for g in GRIDS:
        space = heads.spaces[g]
        out[g] = heads.heads[g](space(h_tok), space(h_utt), pos) * heads.scale + heads.bias[g]
    return out


def grid_probabilities(logits: Mapping[str, Tensor]) -> dict[str, Tensor]:
    return {g: torch.softmax(v, dim=-1) for g, v in logits.items()}


def weighted_ce_loss(
    logits: Mapping[str, Tensor],
    gold: LabelGrids,
    weights: Mapping[str, Sequence[float]] = DEFAULT_WEIGHTS,
) -> Tensor:
    """Sum over grids and unmasked cells of ``-w[gold] * log P(gold)``."""
    total = None
    for g, labels in GRIDS.items():
        mask = torch.as_tensor(grid_mask(gold, g))
        target = torch.as_tensor(gold[g], dtype=torch.long)
        if int(target.min()) < 0 or int(target.max()) >= len(labels):
            raise ValueError(f"{g}: gold class out of range")
        if logits[g].shape[:2] != target.shape:
            raise ShapeError(f"{g}: logits {tuple(logits[g].shape)} vs gold {tuple(target.shape)}")
        logp = torch.log_softmax(logits[g], dim=-1).gather(-1, target[..., None])[..., 0]
        w = torch.as_tensor(weights[g], dtype=logp.dtype)[target]
        term = -(w * logp)[mask].sum()
        total = term if total is None else total + term
    return total


def predict_grids(logits: Mapping[str, Tensor], mask: np.ndarray) -> LabelGrids:
    arg = {g: v.argmax(-1).detach().cpu().numpy().astype(np.int64) for g, v in logits.items()}
    return LabelGrids(arg["ent"], arg["pair"], arg["pol"], mask)


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    tp: int
    n_pred: int
    n_gold: int


def prf(pred: set, gold: set) -> PRF:
    tp = len(pred & gold)
    p = tp / len(pred) if pred else 0.0
    r = tp / len(gold) if gold else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return PRF(p, r, f, tp, len(pred), len(gold))


def evaluate(
    pred: Mapping[str, Iterable[Quadruple]], gold: Mapping[str, Iterable[Quadruple]]
) -> dict[str, float]:
    """Micro-averaged exact-match scores over a corpus keyed by doc id."""
    sets: dict[str, tuple[set, set]] = {k: (set(), set()) for k in ("micro", "ident", "ta", "to", "ao")}
    for side, corpus in enumerate((pred, gold)):
        for doc, quads in corpus.items():
            for q in quads:
                sets["micro"][side].add((doc, q.target, q.aspect, q.opinion, q.sentiment))
                sets["ident"][side].add((doc, q.target, q.aspect, q.opinion))
                for key, (x, y) in zip(("ta", "to", "ao"), ROLE_PAIRS):
                    a, b = q.triple[x], q.triple[y]
                    if a is not None and b is not None:
                        sets[key][side].add((doc, a, b))
    metrics: dict[str, float] = {}
    for key, (p, g) in sets.items():
        score = prf(p, g)
        metrics[f"{key}_p"], metrics[f"{key}_r"], metrics[f"{key}_f1"] = score.precision, score.recall, score.f1
    return metrics


def format_metrics(metrics: Mapping[str, float]) -> str:
    return "".join(f"{k} = {v:.6f}\n" for k, v in sorted(metrics.items()))
