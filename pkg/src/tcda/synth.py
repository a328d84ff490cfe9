"""Synthetic threaded dialogues with planted quadruples.

Each dialogue has a root and ``branching`` threads, contiguous unless
``interleave`` shuffles them in time. A thread that
hosts quadruples either discusses the target mentioned in the root or
introduces its own target in its first utterance; aspects and opinions live
in later utterances of the same thread. Own-target threads act as
cross-thread distractors for root-target threads: their target is usually
closer in flat order but must not be paired across threads. Sentiment is
fixed by the opinion word.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .config import SyntheticSpec
from .dialogue import Dialogue, Quadruple, Sentiment, Utterance
from .grid import find_conflicts


class InfeasibleSpec(ValueError):
    pass


@dataclass(frozen=True)
class Lexicon:
    targets: tuple[str, ...]
    target_suffixes: tuple[str, ...]
    aspects: tuple[str, ...]
    aspect_suffixes: tuple[str, ...]
    opinions: dict[Sentiment, tuple[str, ...]]
    filler: tuple[str, ...]

    @classmethod
    def sized(cls, vocab_size: int) -> "Lexicon":
        n_ent = max(2, vocab_size // 6)
        n_pol = max(1, vocab_size // 12)
        n_fill = max(1, vocab_size - 2 * n_ent - 3 * n_pol - 4)
        return cls(
            targets=tuple(f"tgt{k}" for k in range(n_ent)),
            target_suffixes=("pro", "max"),
            aspects=tuple(f"asp{k}" for k in range(n_ent)),
            aspect_suffixes=("life", "rate"),
            opinions={
                Sentiment.POS: tuple(f"good{k}" for k in range(n_pol)),
                Sentiment.NEG: tuple(f"bad{k}" for k in range(n_pol)),
                Sentiment.NEU: tuple(f"meh{k}" for k in range(n_pol)),
            },
            filler=tuple(f"w{k}" for k in range(n_fill)),
        )


def _composition(rng: random.Random, total: int, parts: int) -> list[int]:
    cuts = sorted(rng.sample(range(1, total), parts - 1)) if parts > 1 else []
    edges = [0, *cuts, total]
    return [b - a for a, b in zip(edges, edges[1:])]


class _Builder:
    """Accumulates tokens of one utterance and records span positions."""

    def __init__(self, rng: random.Random, lex: Lexicon, spec: SyntheticSpec):
        self.rng, self.lex, self.spec = rng, lex, spec
        self.tokens: list[str] = []

    def filler(self) -> None:
        n = self.rng.randint(self.spec.filler_min, self.spec.filler_max)
        self.tokens.extend(self.rng.choice(self.lex.filler) for _ in range(n))

    def span(self, words: list[str]) -> tuple[int, int]:
        start = len(self.tokens)
        self.tokens.extend(words)
        return (start, len(self.tokens) - 1)

    def done(self) -> tuple[str, ...]:
        if not self.tokens:
            self.tokens.append(self.rng.choice(self.lex.filler))
        return tuple(self.tokens)


def _phrase(rng: random.Random, heads: tuple[str, ...], suffixes: tuple[str, ...], head: str | None = None) -> list[str]:
    words = [head or rng.choice(heads)]
    if rng.random() < 0.3:
        words.append(rng.choice(suffixes))
    return words


def generate_dialogue(rng: random.Random, spec: SyntheticSpec, lex: Lexicon, doc_id: str) -> Dialogue:
    n = rng.randint(spec.min_utterances, spec.max_utterances)
    q = spec.quads_per_dialogue
    if q > n - 1:
        raise InfeasibleSpec(f"{q} quadruples need at least {q + 1} utterances, got {n}")
    n_threads = min(spec.branching, n - 1)
    sizes = _composition(rng, n - 1, n_threads)

    # chronological order of thread slots; contiguous blocks unless interleaved
    slots = [k for k, size in enumerate(sizes) for _ in range(size)]
    if spec.interleave:
        rng.shuffle(slots)
    thread_of: dict[int, int] = {}
    reply: dict[int, int] = {1: 0}
    threads: list[list[int]] = [[] for _ in sizes]
    for u, k in enumerate(slots, start=2):
        members = threads[k]
        reply[u] = 1 if not members else rng.choice(members)
        members.append(u)
        thread_of[u] = k

    hosts = sorted(rng.sample(range(2, n + 1), q))
    hosting = sorted({thread_of[u] for u in hosts})
    own = {k: rng.random() >= spec.root_target_rate for k in hosting}
    if spec.distractors and len(hosting) >= 2:
        if all(own.values()):
            own[rng.choice(hosting)] = False
        if not any(own.values()):
            own[rng.choice(hosting)] = True

    names = rng.sample(lex.targets, len(hosting) + 1)
    root_target = names[0] if not all(own.values()) or not hosting else None
    thread_target = {k: (names[i + 1] if own[k] else root_target) for i, k in enumerate(hosting)}

    speakers = {1: "spk0"}
    for u in range(2, n + 1):
        speakers[u] = f"spk{rng.randrange(spec.speakers)}"

    built: dict[int, tuple[str, ...]] = {}
    target_span: dict[int, tuple[int, int]] = {}
    local_quads: list[tuple[int, tuple[int, int], int, tuple[int, int], int, tuple[int, int], Sentiment]] = []

    root = _Builder(rng, lex, spec)
    root.filler()
    if root_target is not None:
        target_span[1] = root.span(_phrase(rng, lex.targets, lex.target_suffixes, root_target))
        root.filler()
    built[1] = root.done()

    for u in range(2, n + 1):
        k = thread_of[u]
        b = _Builder(rng, lex, spec)
        b.filler()
        head = threads[k][0] == u
        if head and k in own and own[k]:
            target_span[u] = b.span(_phrase(rng, lex.targets, lex.target_suffixes, thread_target[k]))
            b.filler()
        if u in hosts:
            sentiment = rng.choice(list(Sentiment))
            a = b.span(_phrase(rng, lex.aspects, lex.aspect_suffixes))
            b.filler()
            o = b.span([rng.choice(lex.opinions[sentiment])])
            b.filler()
            t_utt = threads[k][0] if own[k] else 1
            local_quads.append((t_utt, (0, 0), u, a, u, o, sentiment))
        built[u] = b.done()

    utterances = tuple(Utterance(u, speakers[u], reply[u], built[u]) for u in range(1, n + 1))
    offsets, total = {}, 0
    for u in range(1, n + 1):
        offsets[u] = total
        total += len(built[u])

    def shift(utt: int, span: tuple[int, int]) -> tuple[int, int]:
        return (offsets[utt] + span[0], offsets[utt] + span[1])

    quads = tuple(
        sorted(
            (
                Quadruple(shift(t_utt, target_span[t_utt]), shift(a_utt, a), shift(o_utt, o), s)
                for t_utt, _, a_utt, a, o_utt, o, s in local_quads
            ),
            key=Quadruple.sort_key,
        )
    )
    d = Dialogue(doc_id, utterances, quads)
    problems = find_conflicts(d, quads)
    if problems:
        raise AssertionError(f"{doc_id}: generator produced conflicting labels: {problems}")
    return d


def gen_synthetic(spec: SyntheticSpec) -> list[Dialogue]:
    rng = random.Random(spec.seed)
    lex = Lexicon.sized(spec.vocab_size)
    return [generate_dialogue(rng, spec, lex, f"synth-{spec.seed}-{k:04d}") for k in range(spec.n_dialogues)]


def split_dev(dialogues: list[Dialogue], dev_fraction: float) -> tuple[list[Dialogue], list[Dialogue]]:
    n_dev = int(round(len(dialogues) * dev_fraction))
    if n_dev == 0:
        return list(dialogues), []
    return list(dialogues[:-n_dev]), list(dialogues[-n_dev:])
