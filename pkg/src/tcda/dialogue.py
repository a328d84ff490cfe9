"""Threaded dialogues: parsing, validation, thread decomposition and positions.

Utterance ids are 1-based and ``reply_to == 0`` marks the root. On disk the
record uses 0-based reply indices with ``-1`` (or null) for the root, and
quadruple spans are 0-based inclusive indices into the concatenated content
tokens of the dialogue.
"""

from __future__ import annotations

import json
import logging
from bisect import bisect_right
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Iterator

logger = logging.getLogger(__name__)

ROOT_THREAD = -1

# token kinds inside the wrapped sequence [CLS] w_1 .. w_m [SPK]
CLS, CONTENT, SPEAKER = 0, 1, 2


class DialogueParseError(ValueError):
    """Malformed record; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class DialogueStructureError(ValueError):
    pass


class Sentiment(str, Enum):
    POS = "pos"
    NEG = "neg"
    NEU = "neu"


Span = tuple[int, int]


@dataclass(frozen=True, slots=True)
class Quadruple:
    """(target, aspect, opinion, sentiment) with inclusive content-token spans.

    A span is ``None`` only for quadruples parsed in permissive mode.
    """

    target: Span | None
    aspect: Span | None
    opinion: Span | None
    sentiment: Sentiment

    def __post_init__(self) -> None:
        spans = [s for s in (self.target, self.aspect, self.opinion) if s is not None]
        for s, e in spans:
            if s < 0 or e < s:
                raise ValueError(f"invalid span {(s, e)}")
        if len(set(spans)) != len(spans):
            raise ValueError("quadruple spans must be role-distinct")

    @property
    def triple(self) -> tuple[Span | None, Span | None, Span | None]:
        return (self.target, self.aspect, self.opinion)

    @property
    def complete(self) -> bool:
        return None not in self.triple

    def sort_key(self) -> tuple:
        return tuple((-1, -1) if s is None else s for s in self.triple) + (self.sentiment.value,)

    def to_record(self) -> dict[str, Any]:
        return {
            "target": None if self.target is None else list(self.target),
            "aspect": None if self.aspect is None else list(self.aspect),
            "opinion": None if self.opinion is None else list(self.opinion),
            "sentiment": self.sentiment.value,
        }


@dataclass(frozen=True, slots=True)
class Utterance:
    id: int
    speaker: str
    reply_to: int
    tokens: tuple[str, ...]

    @property
    def is_root(self) -> bool:
        return self.reply_to == 0


@dataclass(frozen=True)
class Dialogue:
    doc_id: str
    utterances: tuple[Utterance, ...]
    quadruples: tuple[Quadruple, ...] = ()
    dropped_quadruples: int = 0

    def __post_init__(self) -> None:
        check_dialogue(self)

    def __len__(self) -> int:
        return len(self.utterances)

    def utterance(self, i: int) -> Utterance:
        return self.utterances[i - 1]

    def speaker(self, i: int) -> str:
        return self.utterances[i - 1].speaker

    def parent(self, i: int) -> int:
        return self.utterances[i - 1].reply_to

    def children(self, i: int) -> list[int]:
        return [u.id for u in self.utterances if u.reply_to == i]

    @property
    def edges(self) -> list[tuple[int, int]]:
        """Reply edges as (child, parent)."""
        return [(u.id, u.reply_to) for u in self.utterances if not u.is_root]

    def depth(self, i: int) -> int:
        depth = 0
        while i != 1:
            i = self.parent(i)
            depth += 1
        return depth

    def content_offsets(self) -> list[int]:
        """Global content index of the first token of each utterance."""
        offsets, total = [], 0
        for u in self.utterances:
            offsets.append(total)
            total += len(u.tokens)
        return offsets

    @property
    def n_content(self) -> int:
        return sum(len(u.tokens) for u in self.utterances)

    def content_tokens(self) -> list[str]:
        return [t for u in self.utterances for t in u.tokens]

    def utterance_of_content(self, index: int) -> int:
        if not 0 <= index < self.n_content:
            raise IndexError(index)
        return bisect_right(self.content_offsets(), index)

    def to_record(self) -> dict[str, Any]:
        return {
            "doc_id": self.doc_id,
            "sentences": [
                {"speaker": u.speaker, "tokens": list(u.tokens), "reply": u.reply_to - 1}
                for u in self.utterances
            ],
            "quadruples": [q.to_record() for q in self.quadruples],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), ensure_ascii=False, sort_keys=True)


def check_dialogue(d: Dialogue) -> None:
    if not d.utterances:
        raise DialogueStructureError(f"{d.doc_id}: empty dialogue")
    for pos, u in enumerate(d.utterances, start=1):
        if u.id != pos:
            raise DialogueStructureError(f"{d.doc_id}: utterance {pos} carries id {u.id}")
        if not u.tokens:
            raise DialogueStructureError(f"{d.doc_id}: utterance {pos} has no tokens")
        if pos == 1:
            if not u.is_root:
                raise DialogueStructureError(f"{d.doc_id}: first utterance must be the root")
            continue
        if u.is_root:
            raise DialogueStructureError(f"{d.doc_id}: utterance {pos} is a second root")
        if u.reply_to == pos:
            raise DialogueStructureError(f"{d.doc_id}: utterance {pos} replies to itself (cycle)")
        if u.reply_to > pos:
            raise DialogueStructureError(
                f"{d.doc_id}: forward reply from utterance {pos} to {u.reply_to}"
            )
        if u.reply_to < 0:
            raise DialogueStructureError(f"{d.doc_id}: utterance {pos} has negative reply index")
    n_content = d.n_content
    offsets = d.content_offsets()
    for q in d.quadruples:
        for span in q.triple:
            if span is None:
                continue
            s, e = span
            if e >= n_content:
                raise DialogueStructureError(f"{d.doc_id}: span {span} out of range")
            if bisect_right(offsets, s) != bisect_right(offsets, e):
                raise DialogueStructureError(f"{d.doc_id}: span {span} crosses utterances")


def _require(record: Any, key: str, kind: type | tuple[type, ...], path: str) -> Any:
    if not isinstance(record, dict):
        raise DialogueParseError(path, "expected an object")
    if key not in record:
        raise DialogueParseError(f"{path}.{key}", "missing field")
    value = record[key]
    if not isinstance(value, kind) or isinstance(value, bool) and kind is int:
        raise DialogueParseError(f"{path}.{key}", f"expected {kind}, got {type(value).__name__}")
    return value


def _parse_span(value: Any, path: str) -> Span | None:
    if value is None:
        return None
    if (
        not isinstance(value, (list, tuple))
        or len(value) != 2
        or not all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    ):
        raise DialogueParseError(path, "span must be [start, end] integers or null")
    s, e = value
    if s < 0 or e < s:
        raise DialogueParseError(path, f"invalid span {value}")
    return (s, e)


def parse_dialogue(raw: str | bytes | dict, permissive: bool = False) -> Dialogue:
    """Parse one dialogue record (JSON text or an already-decoded dict).

    Quadruples with a null element are dropped (and counted) unless
    ``permissive`` is set, in which case the missing span stays ``None``.
    """
    if isinstance(raw, (str, bytes)):
        try:
            record = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DialogueParseError("$", f"invalid JSON: {exc}") from exc
    else:
        record = raw
    doc_id = _require(record, "doc_id", str, "$")
    sentences = _require(record, "sentences", list, "$")
    utterances = []
    for k, sent in enumerate(sentences):
        path = f"$.sentences[{k}]"
        speaker = _require(sent, "speaker", (str, int), path)
        tokens = _require(sent, "tokens", list, path)
        if not all(isinstance(t, str) for t in tokens):
            raise DialogueParseError(f"{path}.tokens", "tokens must be strings")
        reply = sent.get("reply", -1)
        if reply is None:
            reply = -1
        if not isinstance(reply, int) or isinstance(reply, bool):
            raise DialogueParseError(f"{path}.reply", "expected an integer or null")
        utterances.append(Utterance(k + 1, str(speaker), reply + 1, tuple(tokens)))

    quads, dropped = [], 0
    for k, q in enumerate(record.get("quadruples") or []):
        path = f"$.quadruples[{k}]"
        if not isinstance(q, dict):
            raise DialogueParseError(path, "expected an object")
        spans = [_parse_span(q.get(role), f"{path}.{role}") for role in ("target", "aspect", "opinion")]
        label = q.get("sentiment")
        try:
            sentiment = Sentiment(str(label).lower())
        except ValueError:
            raise DialogueParseError(f"{path}.sentiment", f"unknown sentiment {label!r}") from None
        if None in spans and not permissive:
            dropped += 1
            continue
        try:
            quads.append(Quadruple(*spans, sentiment))
        except ValueError as exc:
            raise DialogueParseError(path, str(exc)) from None
    if dropped:
        logger.warning("%s: dropped %d quadruple(s) with null elements", doc_id, dropped)
    return Dialogue(doc_id, tuple(utterances), tuple(quads), dropped)


def load_dialogues(path, permissive: bool = False) -> list[Dialogue]:
    """Read a JSON-lines file, a JSON array file, or a directory of ``*.json`` files."""
    from pathlib import Path

    path = Path(path)
    if path.is_dir():
        return [parse_dialogue(p.read_text(encoding="utf-8"), permissive) for p in sorted(path.glob("*.json"))]
    text = path.read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("["):
        return [parse_dialogue(r, permissive) for r in json.loads(text)]
    return [parse_dialogue(line, permissive) for line in text.splitlines() if line.strip()]


def dump_dialogues(dialogues: Iterable[Dialogue], path) -> None:
    from pathlib import Path

    Path(path).write_text("".join(d.to_json() + "\n" for d in dialogues), encoding="utf-8")


@dataclass(frozen=True)
class ThreadDecomposition:
    threads: tuple[tuple[int, ...], ...]
    thread_of: dict[int, int] = field(hash=False)

    def start(self, k: int) -> int:
        """First utterance of thread ``k`` after the shared root (1 for a root-only dialogue)."""
        thread = self.threads[k]
        return thread[1] if len(thread) > 1 else 1

    def thread_start(self, i: int) -> int:
        """Start index S_i used by the DAG walk for utterance ``i``.

        The thread opened by u_2 is contiguous with the root, so its walk
        floor is the root itself.
        """
        k = self.thread_of[i]
        if k == ROOT_THREAD:
            return 1
        s = self.start(k)
        return 1 if s == 2 else s

    def members(self, k: int) -> tuple[int, ...]:
        return self.threads[k]


def decompose_threads(d: Dialogue) -> ThreadDecomposition:
    children: dict[int, list[int]] = {u.id: [] for u in d.utterances}
    for child, parent in d.edges:
        children[parent].append(child)
    threads = []
    thread_of = {1: ROOT_THREAD}
    for k, head in enumerate(sorted(children[1])):
        stack, members = [head], []
        while stack:
            node = stack.pop()
            members.append(node)
            stack.extend(children[node])
        for node in members:
            thread_of[node] = k
        threads.append((1, *sorted(members)))
    if not threads:
        threads.append((1,))
    return ThreadDecomposition(tuple(threads), thread_of)


@dataclass(frozen=True)
class TokenIndexMap:
    """Per-token coordinates of the flattened (optionally wrapped) dialogue.

    With wrappers each utterance contributes ``[CLS] w_1 .. w_m [SPK]`` and
    ``offset_in_utterance`` counts the wrapper; ``content_index`` is -1 for
    wrapper tokens.
    """

    p_tok: tuple[int, ...]
    p_utt: tuple[int, ...]
    thread_id: tuple[int, ...]
    utterance_id: tuple[int, ...]
    offset_in_utterance: tuple[int, ...]
    kind: tuple[int, ...]
    content_index: tuple[int, ...]
    wrapped: bool = True

    def __len__(self) -> int:
        return len(self.p_tok)

    @property
    def flat_position(self) -> tuple[int, ...]:
        return tuple(range(len(self.p_tok)))

    def position_of_content(self) -> dict[int, int]:
        return {c: i for i, c in enumerate(self.content_index) if c >= 0}

    def utterance_ranges(self) -> dict[int, tuple[int, int]]:
        """Half-open [start, stop) token ranges per utterance."""
        ranges: dict[int, tuple[int, int]] = {}
        for i, u in enumerate(self.utterance_id):
            lo, _ = ranges.get(u, (i, i))
            ranges[u] = (lo, i + 1)
        return ranges


def build_token_index(d: Dialogue, td: ThreadDecomposition, wrappers: bool = True) -> TokenIndexMap:
    pad = 2 if wrappers else 0
    first: dict[int, int] = {}
    depth: dict[int, int] = {}
    cols: dict[str, list[int]] = {k: [] for k in ("p_tok", "p_utt", "thread", "utt", "off", "kind", "content")}
    content = 0
    for u in d.utterances:
        width = len(u.tokens) + pad
        if u.is_root:
            first[u.id], depth[u.id] = 0, 0
        else:
            parent = u.reply_to
            first[u.id] = first[parent] + len(d.utterance(parent).tokens) + pad
            depth[u.id] = depth[parent] + 1
        for off in range(width):
            if wrappers and off == 0:
                kind, ci = CLS, -1
            elif wrappers and off == width - 1:
                kind, ci = SPEAKER, -1
            else:
                kind, ci = CONTENT, content
                content += 1
            cols["p_tok"].append(first[u.id] + off)
            cols["p_utt"].append(depth[u.id])
            cols["thread"].append(td.thread_of[u.id])
            cols["utt"].append(u.id)
            cols["off"].append(off)
            cols["kind"].append(kind)
            cols["content"].append(ci)
    return TokenIndexMap(
        tuple(cols["p_tok"]),
        tuple(cols["p_utt"]),
        tuple(cols["thread"]),
        tuple(cols["utt"]),
        tuple(cols["off"]),
        tuple(cols["kind"]),
        tuple(cols["content"]),
        wrappers,
    )


def same_thread(a: int, b: int) -> bool:
    """Thread predicate; the root lies on every thread."""
    return a == b or a == ROOT_THREAD or b == ROOT_THREAD


def thread_tokens(d: Dialogue, td: ThreadDecomposition, index: TokenIndexMap) -> Iterator[list[int]]:
    """Global token positions making up each thread's sequence, in thread order."""
    ranges = index.utterance_ranges()
    for thread in td.threads:
        yield [p for u in thread for p in range(*ranges[u])]
