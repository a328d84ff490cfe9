"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The training criteria (8, 9) are slow: roughly a few minutes per seed for
the overfit check and well over an hour for the ablation trend.
"""

import json
import random
import time

import torch

from _helpers import walk_oracle, make_dialogue, random_dialogue, record
from tcda.cli import main
from tcda.config import PipelineConfig, SyntheticSpec
from tcda.dag import build_tc_dag, thread_first_nodes, validate_dag
from tcda.dialogue import Dialogue, Utterance, build_token_index, decompose_threads
from tcda.drope import THETA_MAC, THETA_MIC, TokenPosition, adapt_position, drope_score, is_same_thread, rotary_rotate
from tcda.grid import decode_quadruples, encode_grids, find_conflicts
from tcda.synth import gen_synthetic, split_dev
from tcda.train import TABLE3, end_to_end_grad_check, format_table, run_ablation, summarize, train

from test_grid import dialogue as grid_dialogue, random_quads, setup as grid_setup


def gen(seed):
    return torch.Generator().manual_seed(seed)


# 1 -------------------------------------------------------------------------
def test_criterion_1_tc_dag_matches_oracle():
    rng = random.Random(2024)
    t0 = time.perf_counter()
    mismatches = 0
    for k in range(1000):
        d = random_dialogue(rng, rng.randint(1, 30), n_speakers=rng.randint(1, 5))
        w = rng.randint(1, 4)
        got = {(e.src, e.dst, e.rel) for e in build_tc_dag(d, decompose_threads(d), w).edges}
        mismatches += got != walk_oracle(d, w)
    seconds = time.perf_counter() - t0
    ok = record("1", mismatches == 0 and seconds < 30, f"{mismatches} mismatches over 1000 dialogues in {seconds:.1f}s")
    assert ok


# 2 -------------------------------------------------------------------------
def _acyclic(g) -> bool:
    succ = {i: [] for i in range(1, g.n + 1)}
    indeg = {i: 0 for i in range(1, g.n + 1)}
    for e in g.edges:
        succ[e.src].append(e.dst)
        indeg[e.dst] += 1
    ready = [i for i, k in indeg.items() if k == 0]
    seen = 0
    while ready:
        i = ready.pop()
        seen += 1
        for j in succ[i]:
            indeg[j] -= 1
            if indeg[j] == 0:
                ready.append(j)
    return seen == g.n


def test_criterion_2_dag_structure():
    rng = random.Random(7)
    violations = []
    for k in range(500):
        d = random_dialogue(rng, rng.randint(2, 30), n_speakers=rng.randint(1, 4))
        td = decompose_threads(d)
        w = rng.randint(1, 4)
        g = build_tc_dag(d, td, w)
        violations += validate_dag(g, d, td)
        if not _acyclic(g):
            violations.append(f"cycle in dialogue {k}")
        g1 = build_tc_dag(d, td, 1)
        for first in thread_first_nodes(td)[1:]:
            if (1, first) not in {(e.src, e.dst) for e in g1.edges}:
                violations.append(f"dialogue {k}: thread opener u{first} not anchored at w=1")
    # three threads with a recurring speaker; later thread openers need the root edge
    d = make_dialogue([1, 2, 1, 4, 1, 6], speakers=["a", "b", "a", "c", "b", "a", "c"])
    g = build_tc_dag(d, decompose_threads(d), 1)
    edges = {(e.src, e.dst) for e in g.edges}
    violations += [f"u{u} not anchored" for u in (4, 6) if (1, u) not in edges]
    ok = record("2", not violations, f"{len(violations)} violations over 500 random dialogues + fixed layout")
    assert ok, violations[:5]


# 3 -------------------------------------------------------------------------
def test_criterion_3_rotary_identities():
    g = gen(3)
    problems = []
    for width in (2, 8, 32, 64):
        x = torch.randn(2500, width, generator=g, dtype=torch.float64)
        if not torch.equal(rotary_rotate(x, torch.zeros(2500, dtype=torch.float64), THETA_MIC), x):
            problems.append(f"zero rotation not exact at width {width}")
        p = (torch.rand(2500, generator=g, dtype=torch.float64) - 0.5) * 2000
        err = (rotary_rotate(x, p, THETA_MAC).norm(dim=-1) - x.norm(dim=-1)).abs().max().item()
        if err > 1e-9:
            problems.append(f"norm error {err:.2e} at width {width}")
    worst_shift = 0.0
    rng = random.Random(3)
    for _ in range(1000):
        s = [torch.randn(16, generator=g, dtype=torch.float64) for _ in range(4)]
        tid = rng.randint(0, 3)
        qp, kp = (rng.randint(0, 300), rng.randint(0, 30)), (rng.randint(0, 300), rng.randint(0, 30))
        delta = rng.randint(-500, 500)
        a = drope_score(*s, TokenPosition(*qp, tid), TokenPosition(*kp, tid)).item()
        b = drope_score(*s, TokenPosition(qp[0] + delta, qp[1] + delta, tid),
                        TokenPosition(kp[0] + delta, kp[1] + delta, tid)).item()
        worst_shift = max(worst_shift, abs(a - b))
    if worst_shift > 1e-9:
        problems.append(f"shift invariance error {worst_shift:.2e}")
    ok = record("3", not problems, "; ".join(problems) or f"10^4 norms checked, max shift error {worst_shift:.1e}")
    assert ok


# 4 -------------------------------------------------------------------------
def test_criterion_4_sign_inversion():
    g = gen(4)
    rng = random.Random(4)
    worst = 0.0
    for _ in range(1000):
        half = rng.choice((2, 4, 8, 16, 32))
        s = [torch.randn(half, generator=g, dtype=torch.float64) for _ in range(4)]
        pi, pj = (rng.randint(0, 400), rng.randint(0, 40)), (rng.randint(0, 400), rng.randint(0, 40))
        ti, tj = rng.sample(range(5), 2)
        divergent = drope_score(*s, TokenPosition(*pi, ti), TokenPosition(*pj, tj)).item()
        # a same-thread pair whose key sits at -(p_i + p_j) relative to a query at 0
        synthetic = drope_score(*s, TokenPosition(0, 0, 9), TokenPosition(-(pi[0] + pj[0]), -(pi[1] + pj[1]), 9)).item()
        worst = max(worst, abs(divergent - synthetic))
    ok = record("4", worst <= 1e-9, f"max deviation {worst:.1e} over 1000 divergent pairs")
    assert ok


# 5 -------------------------------------------------------------------------
def _verbose_dialogue(middle_tokens: int) -> Dialogue:
    utts = (
        Utterance(1, "a", 0, ("root", "x")),
        Utterance(2, "b", 1, ("reply", "target")),
        Utterance(3, "c", 2, tuple(f"f{k}" for k in range(middle_tokens))),
        Utterance(4, "a", 3, ("query", "y")),
        Utterance(5, "d", 1, ("other", "z")),
    )
    return Dialogue("verbose", utts, ())


def _parts(s, i, j, index):
    """(micro, macro) sub-scores of the pair (i, j) under the library's position map."""
    q_mic, q_mac, k_mic, k_mac = s
    same = is_same_thread(index.thread_id[i], index.thread_id[j])
    micro = rotary_rotate(q_mic, index.p_tok[i], THETA_MIC) @ rotary_rotate(
        k_mic, adapt_position(index.p_tok[j], same), THETA_MIC)
    macro = rotary_rotate(q_mac, index.p_utt[i], THETA_MAC) @ rotary_rotate(
        k_mac, adapt_position(index.p_utt[j], same), THETA_MAC)
    return micro, macro


def test_criterion_5a_macro_stream_ignores_verbosity():
    g = gen(5)
    s = [torch.randn(16, generator=g, dtype=torch.float64) for _ in range(4)]
    problems = []
    base = None
    for factor in (1, 2, 10, 100):
        d = _verbose_dialogue(3 * factor)
        index = build_token_index(d, decompose_threads(d))
        pos = {(u, off): k for k, (u, off) in enumerate(zip(index.utterance_id, index.offset_in_utterance))}
        last = max(off for (u, off) in pos if u == 4)
        pairs = [(pos[(4, last)], pos[(2, 1)]), (pos[(4, last)], pos[(5, 1)]), (pos[(5, 1)], pos[(1, 1)])]
        parts = []
        for i, j in pairs:
            micro, macro = _parts(s, i, j, index)
            qp = TokenPosition(index.p_tok[i], index.p_utt[i], index.thread_id[i])
            kp = TokenPosition(index.p_tok[j], index.p_utt[j], index.thread_id[j])
            total = drope_score(*s, qp, kp)
            if abs((total - micro - macro).item()) > 1e-12:
                problems.append(f"x{factor}: total is not micro + macro")
            parts.append((micro.item(), macro.item()))
        if base is None:
            base = parts
            continue
        for (m0, a0), (m1, a1) in zip(base, parts):
            if a1 != a0:
                problems.append(f"x{factor}: macro changed by {a1 - a0:.3e}")
        if all(m1 == m0 for (m0, _), (m1, _) in zip(base, parts)):
            problems.append(f"x{factor}: micro term unexpectedly constant")
    ok = record("5a", not problems, "; ".join(problems) or "macro sub-score bit-identical under 1x..100x filler")
    assert ok


def test_criterion_5b_macro_correlation_at_distance_five(tmp_path, capsys):
    out = tmp_path / "decay.tsv"
    assert main(["decay-curve", "--max-distance", "8", "--out", str(out)]) == 0
    capsys.readouterr()
    header, *rows = [line.split("\t") for line in out.read_text().splitlines()]
    row = dict(zip(header, next(r for r in rows if r[0] == "5")))
    micro, macro = float(row["drope_micro"]), float(row["drope_macro"])
    ok = record("5b", macro >= micro, f"distance 5: macro (theta 100) {macro:.4f} vs micro (theta 10000) {micro:.4f}")
    assert ok


# 6 -------------------------------------------------------------------------
def test_criterion_6_end_to_end_gradient_check():
    t0 = time.perf_counter()
    report = {}
    worst = end_to_end_grad_check(report=report)
    seconds = time.perf_counter() - t0
    ok = record("6", worst <= 1e-4 and seconds < 120,
                f"max relative error {worst:.2e} over {len(report)} parameter groups in {seconds:.0f}s")
    assert ok


# 7 -------------------------------------------------------------------------
def test_criterion_7_grid_round_trip():
    rng = random.Random(77)
    d = grid_dialogue(n_utt=5, n_tok=5)
    index, _ = grid_setup(d)
    exact = total = 0
    while total < 500:
        quads = random_quads(rng, d, index)
        if not quads or find_conflicts(d, quads, index):
            continue
        decoded, _ = decode_quadruples(encode_grids(d, quads, index), index)
        exact += set(decoded) == quads
        total += 1
    ok = record("7", exact == total, f"{exact}/{total} exact round trips")
    assert ok


# 8 -------------------------------------------------------------------------
OVERFIT_SPEC = SyntheticSpec(n_dialogues=20, min_utterances=6, max_utterances=12, branching=3,
                             quads_per_dialogue=3, distractors=True, seed=11)
OVERFIT_CONFIG = PipelineConfig(d=64, lr=1e-3, lr_encoder=1e-3, dropout=0.0, epochs=300,
                                target_train_f1=0.95, eval_every=5, patience=1000)


def test_criterion_8_overfit():
    data = gen_synthetic(OVERFIT_SPEC)
    outcomes = []
    for seed in range(5):
        t0 = time.perf_counter()
        result = train(OVERFIT_CONFIG.replace(seed=seed), data, log=lambda s: None)
        seconds = time.perf_counter() - t0
        f1 = max(h.get("train_micro_f1", 0.0) for h in result.history)
        outcomes.append((seed, f1, result.state.epoch, seconds))
        print(f"seed {seed}: train micro F1 {f1:.3f} after {result.state.epoch} epochs, {seconds:.0f}s")
    passed = [f1 >= 0.95 and s < 600 for _, f1, _, s in outcomes]
    detail = ", ".join(f"s{seed}: {f1:.3f}@{ep}ep/{sec:.0f}s" for seed, f1, ep, sec in outcomes)
    ok = record("8", all(passed), f"{sum(passed)}/5 seeds reach 0.95 within 300 epochs and 10 min ({detail})")
    assert ok


# 9 -------------------------------------------------------------------------
STRESS_SPEC = SyntheticSpec(n_dialogues=200, filler_min=3, filler_max=8, min_utterances=6, max_utterances=10,
                            branching=4, quads_per_dialogue=4, root_target_rate=0.3, distractors=True,
                            interleave=True, seed=7, dev_fraction=0.2)
STRESS_CONFIG = PipelineConfig(lr=2e-3, lr_encoder=2e-3, dropout=0.1, epochs=25, patience=100)


def test_criterion_9_ablation_trend(tmp_path):
    train_set, dev_set = split_dev(gen_synthetic(STRESS_SPEC), STRESS_SPEC.dev_fraction)
    rows = run_ablation(STRESS_CONFIG, train_set, dev_set, list(TABLE3), seeds=range(5), out_dir=tmp_path,
                        log=print)
    print(format_table(rows))
    s = {k: v["micro_f1"] for k, v in summarize(rows).items()}
    checks = {
        "full >= w/o TC-DAG": s["full"] >= s["w/o TC-DAG"],
        "full >= w/o D-RoPE": s["full"] >= s["w/o D-RoPE"],
        "w/o TC-DAG >= w/o Both": s["w/o TC-DAG"] >= s["w/o Both"],
        "w/o D-RoPE >= w/o Both": s["w/o D-RoPE"] >= s["w/o Both"],
    }
    means = ", ".join(f"{k} {v:.3f}" for k, v in s.items())
    failed = [k for k, v in checks.items() if not v]
    ok = record("9", not failed, f"mean dev micro F1: {means}" + (f"; violated: {failed}" if failed else ""))
    assert ok


# 10 ------------------------------------------------------------------------
SWEEP_SPEC = """\
n_dialogues = 4
min_utterances = 3
max_utterances = 5
quads_per_dialogue = 1
branching = 2
dev_fraction = 0.25
seed = 3
"""
SWEEP_CONFIG = """\
d = 8
encoder_layers = 1
encoder_heads = 2
gcn_layers = 1
epochs = 1
dropout = 0.1
"""


def test_criterion_10_parameter_sweep_harness(tmp_path, capsys):
    (tmp_path / "spec.txt").write_text(SWEEP_SPEC)
    (tmp_path / "config.txt").write_text(SWEEP_CONFIG)
    runs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["ablate", "--config", str(tmp_path / "config.txt"), "--spec", str(tmp_path / "spec.txt"),
                     "--variants", "table5", "--seeds", "0", "--out", str(out)]) == 0
        rows = [json.loads(line) for line in (out / "rows.jsonl").read_text().splitlines()]
        runs.append([{k: v for k, v in r.items() if k != "seconds"} for r in rows])
    capsys.readouterr()
    table = (tmp_path / "run0" / "table.txt").read_text()
    names = [r["variant"] for r in runs[0]]
    shape_ok = names == [f"L={k}" for k in range(1, 5)] + [f"w={k}" for k in range(1, 5)]
    blocks_ok = "# sweep L" in table and "# sweep w" in table
    ok = record("10", shape_ok and blocks_ok and runs[0] == runs[1],
                f"{len(runs[0])} rows ({'4+4' if shape_ok else names}), deterministic={runs[0] == runs[1]}")
    assert ok
