"""Thread-constrained DAG over utterances, plus the comparison graph variants."""

from __future__ import annotations

from dataclasses import dataclass

from .dialogue import ROOT_THREAD, Dialogue, ThreadDecomposition

VARIANTS = ("tc", "standard", "reply")


class GraphParameterError(ValueError):
    pass


class GraphStructureError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class Edge:
    src: int
    dst: int
    rel: int


@dataclass(frozen=True)
class TcDag:
    n: int
    edges: tuple[Edge, ...]
    window: int
    variant: str = "tc"

    def predecessors(self, i: int) -> list[tuple[int, int]]:
        """(source, relation) pairs feeding node ``i``, ascending by source."""
        return sorted((e.src, e.rel) for e in self.edges if e.dst == i)

    def edge_set(self) -> set[tuple[int, int, int]]:
        return {(e.src, e.dst, e.rel) for e in self.edges}

    @property
    def directed(self) -> bool:
        return self.variant != "reply"

    def descendants(self, k: int) -> set[int]:
        """Nodes reachable from ``k`` (excluding ``k``) along edge direction."""
        out: dict[int, list[int]] = {}
        for e in self.edges:
            out.setdefault(e.src, []).append(e.dst)
            if not self.directed:
                out.setdefault(e.dst, []).append(e.src)
        seen, stack = set(), [k]
        while stack:
            for nxt in out.get(stack.pop(), []):
                if nxt not in seen and nxt != k:
                    seen.add(nxt)
                    stack.append(nxt)
        return seen


def _rel(d: Dialogue, a: int, b: int) -> int:
    return int(d.speaker(a) == d.speaker(b))


def _check(d: Dialogue, td: ThreadDecomposition, window: int) -> None:
    if not isinstance(window, int) or window < 1:
        raise GraphParameterError(f"window must be a positive integer, got {window!r}")
    if set(td.thread_of) != {u.id for u in d.utterances}:
        raise GraphStructureError("thread map does not cover the dialogue")
    for k, thread in enumerate(td.threads):
        if thread[0] != 1:
            raise GraphStructureError(f"thread {k} does not begin at the root")
        for u in thread[1:]:
            if td.thread_of.get(u) != k:
                raise GraphStructureError(f"utterance {u} listed in thread {k} but mapped elsewhere")


def build_tc_dag(d: Dialogue, td: ThreadDecomposition, window: int) -> TcDag:
    """Retrospective same-speaker window walk confined to the node's thread.

    Utterances of other threads interleaved between ``S_i`` and ``i`` are
    skipped; the root belongs to every thread. When the walk ends short of
    ``window`` same-speaker edges and the thread starts after the root, the
    node is anchored to u_1.
    """
    _check(d, td, window)
    edges = []
    for i in range(2, len(d) + 1):
        k = td.thread_of[i]
        floor = td.thread_start(i)
        c, tau = 0, i - 1
        while tau >= floor and c < window:
            if tau == 1 or td.thread_of[tau] == k:
                r = _rel(d, tau, i)
                edges.append(Edge(tau, i, r))
                c += r
            tau -= 1
        if c < window and floor > 1:
            edges.append(Edge(1, i, _rel(d, 1, i)))
    return TcDag(len(d), tuple(edges), window, "tc")


def build_standard_dag(d: Dialogue, td: ThreadDecomposition, window: int) -> TcDag:
    """Same walk over the whole history, ignoring threads."""
    _check(d, td, window)
    edges = []
    for i in range(2, len(d) + 1):
        c, tau = 0, i - 1
        while tau >= 1 and c < window:
            r = _rel(d, tau, i)
            edges.append(Edge(tau, i, r))
            c += r
            tau -= 1
    return TcDag(len(d), tuple(edges), window, "standard")


def build_reply_graph(d: Dialogue, td: ThreadDecomposition, window: int = 1) -> TcDag:
    """Undirected reply edges stored parent -> child; relations are ignored (0)."""
    _check(d, td, window)
    edges = tuple(Edge(parent, child, 0) for child, parent in d.edges)
    return TcDag(len(d), edges, window, "reply")


def build_graph(d: Dialogue, td: ThreadDecomposition, window: int, variant: str = "tc") -> TcDag:
    builders = {"tc": build_tc_dag, "standard": build_standard_dag, "reply": build_reply_graph}
    try:
        builder = builders[variant]
    except KeyError:
        raise GraphParameterError(f"unknown graph variant {variant!r}") from None
    return builder(d, td, window)


def validate_dag(g: TcDag, d: Dialogue, td: ThreadDecomposition) -> list[str]:
    """Invariant report for a graph of any variant; empty means valid.

    All variants must point forward and avoid the root as a target. TC and
    standard graphs must respect the window and carry correct speaker
    relations; TC graphs must also stay inside threads and anchor to the
    root; reply graphs must consist of reply edges only.
    """
    report = []
    if g.n != len(d):
        report.append(f"size mismatch: graph has {g.n} nodes, dialogue {len(d)}")
    seen = set()
    reply_edges = {(parent, child) for child, parent in d.edges}
    for e in g.edges:
        if (e.src, e.dst) in seen:
            report.append(f"duplicate edge u{e.src}->u{e.dst}")
        seen.add((e.src, e.dst))
        if not (1 <= e.src <= g.n and 1 <= e.dst <= g.n):
            report.append(f"dangling edge u{e.src}->u{e.dst}")
            continue
        if e.src >= e.dst:
            report.append(f"backward edge u{e.src}->u{e.dst}")
        if e.dst == 1:
            report.append(f"root has incoming edge from u{e.src}")
        if g.variant == "reply":
            if (e.src, e.dst) not in reply_edges:
                report.append(f"non-reply edge u{e.src}->u{e.dst}")
            continue
        if e.rel not in (0, 1):
            report.append(f"unknown relation {e.rel} on u{e.src}->u{e.dst}")
        elif e.rel != _rel(d, e.src, e.dst):
            report.append(f"relation mismatch on u{e.src}->u{e.dst}")
        if g.variant == "tc" and e.src != 1 and td.thread_of.get(e.src) != td.thread_of.get(e.dst):
            report.append(f"cross-thread edge u{e.src}->u{e.dst}")
    if g.variant == "reply":
        missing = reply_edges - seen
        report.extend(f"missing reply edge u{a}->u{b}" for a, b in sorted(missing))
        return report
    for i in range(2, g.n + 1):
        preds = [(j, r) for j, r in g.predecessors(i) if j < i]
        same = sum(r for _, r in preds)
        if same > g.window:
            report.append(f"window violation at u{i}: {same} same-speaker predecessors > {g.window}")
        if g.variant == "tc":
            from_root = sum(1 for j, _ in preds if j == 1)
            in_thread_same = sum(r for j, r in preds if j != 1)
            if in_thread_same < g.window and from_root != 1:
                report.append(f"missing root anchor at u{i}")
    return report


def export_dot(g: TcDag, d: Dialogue) -> str:
    """Graphviz text; same-speaker edges dashed, others solid."""
    kind = "digraph" if g.directed else "graph"
    arrow = "->" if g.directed else "--"
    lines = [f'{kind} "{_escape(d.doc_id)}" {{', "  rankdir=LR;"]
    for u in d.utterances:
        lines.append(f'  u{u.id} [label="u{u.id}\\n{_escape(u.speaker)}"];')
    for e in sorted(g.edges, key=lambda e: (e.dst, e.src)):
        style = "dashed" if e.rel == 1 else "solid"
        lines.append(f"  u{e.src} {arrow} u{e.dst} [style={style}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"')


def thread_first_nodes(td: ThreadDecomposition) -> list[int]:
    return [t[1] for t in td.threads if len(t) > 1]


__all__ = [
    "Edge",
    "GraphParameterError",
    "GraphStructureError",
    "ROOT_THREAD",
    "TcDag",
    "VARIANTS",
    "build_graph",
    "build_reply_graph",
    "build_standard_dag",
    "build_tc_dag",
    "export_dot",
    "thread_first_nodes",
    "validate_dag",
]
