"""Training loop, evaluation, checkpointing and the ablation harness."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .config import PipelineConfig
from .dialogue import Dialogue, Quadruple
from .grid import content_mask, decode_quadruples, evaluate, predict_grids, weighted_ce_loss
from .model import Example, ExternalAdjacency, TCDAModel, Vocab, prepare
from .tensor import NonFiniteError, ParamStore, read_checkpoint

logger = logging.getLogger(__name__)


def build(config: PipelineConfig, vocab: Vocab) -> tuple[TCDAModel, ParamStore]:
    model = TCDAModel(config, len(vocab))
    store = ParamStore(
        model,
        seed=config.seed,
        lr=config.lr,
        lr_encoder=config.lr_encoder,
        weight_decay=config.weight_decay,
    )
    store.initialize(config.seed)
    return model, store


def predict_example(model: TCDAModel, ex: Example) -> list[Quadruple]:
    model.eval()
    with torch.no_grad():
        logits = model(ex)
    grids = predict_grids(logits, content_mask(ex.index))
    quads, _ = decode_quadruples(grids, ex.index)
    return quads


def evaluate_examples(model: TCDAModel, examples: Sequence[Example]) -> dict[str, float]:
    pred = {ex.dialogue.doc_id: predict_example(model, ex) for ex in examples}
    gold = {ex.dialogue.doc_id: ex.dialogue.quadruples for ex in examples}
    return evaluate(pred, gold)


@dataclass
class TrainState:
    epoch: int = 0
    steps: int = 0
    best_f1: float = -1.0
    best_epoch: int = 0
    bad_evals: int = 0
    history: list[dict] = field(default_factory=list)
    stop_reason: str = ""


@dataclass
class TrainResult:
    model: TCDAModel
    store: ParamStore
    vocab: Vocab
    state: TrainState
    best: dict[str, np.ndarray] | None = None

    @property
    def history(self) -> list[dict]:
        return self.state.history


def _rng_arrays(order_rng: random.Random, gen: torch.Generator) -> dict[str, np.ndarray]:
    version, internal, gauss = order_rng.getstate()
    return {
        "rng/order": np.asarray(internal, dtype=np.int64),
        "rng/order_meta": np.asarray([version, -1 if gauss is None else 1], dtype=np.int64),
        "rng/order_gauss": np.asarray(0.0 if gauss is None else gauss, dtype=np.float64),
        "rng/torch": gen.get_state().numpy().copy(),
    }


def _restore_rngs(arrays: dict[str, np.ndarray], order_rng: random.Random, gen: torch.Generator) -> None:
    version, has_gauss = (int(v) for v in arrays["rng/order_meta"])
    gauss = float(arrays["rng/order_gauss"]) if has_gauss > 0 else None
    order_rng.setstate((version, tuple(int(v) for v in arrays["rng/order"]), gauss))
    gen.set_state(torch.as_tensor(arrays["rng/torch"], dtype=torch.uint8))


def save_checkpoint(path, result: TrainResult, order_rng: random.Random) -> None:
    state = result.state
    meta = {
        "config": result.model.config.to_text(),
        "vocab": result.vocab.to_json(),
        "state": {k: getattr(state, k) for k in ("epoch", "steps", "best_f1", "best_epoch", "bad_evals", "stop_reason")},
        "history": state.history,
    }
    extra = _rng_arrays(order_rng, result.model.generator)
    if result.best is not None:
        extra.update({f"best/{k}": v for k, v in result.best.items() if k.startswith("param/")})
    result.store.save(path, meta, extra)


def load_model(path) -> tuple[TCDAModel, Vocab, dict]:
    arrays, meta = read_checkpoint(path)
    config = PipelineConfig.from_text(meta["config"], env=False)
    vocab = Vocab.from_json(meta["vocab"])
    model, store = build(config, vocab)
    store.load_arrays(arrays)
    return model, vocab, meta


def train(
    config: PipelineConfig,
    train_set: Sequence[Dialogue],
    dev_set: Sequence[Dialogue] = (),
    out_dir=None,
    resume=None,
    adjacency: ExternalAdjacency | None = None,
    log: Callable[[str], None] | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Mini-batch training with gradient averaging inside each batch.

    Model selection uses dev Micro F1 when a dev set is given, else training
    Micro F1. ``target_train_f1 > 0`` stops as soon as training Micro F1
    reaches it. When resuming, the checkpoint's config is used except for
    the stopping fields (epochs, patience, target_train_f1) of ``config``.
    """
    if not train_set:
        raise ValueError("empty training set")
    log = log or logger.info
    if resume is not None:
        arrays, meta = read_checkpoint(resume)
        config = PipelineConfig.from_text(meta["config"], env=False).replace(
            epochs=config.epochs, patience=config.patience, target_train_f1=config.target_train_f1
        )
        vocab = Vocab.from_json(meta["vocab"])
    else:
        vocab = Vocab.build(train_set, config.max_speakers)
    model, store = build(config, vocab)
    train_ex = [prepare(d, vocab, config, adjacency) for d in train_set]
    dev_ex = [prepare(d, vocab, config, adjacency) for d in dev_set]
    order_rng = random.Random(config.seed)
    state = TrainState()
    result = TrainResult(model, store, vocab, state)
    if resume is not None:
        store.load_arrays(arrays)
        _restore_rngs(arrays, order_rng, model.generator)
        for k, v in meta["state"].items():
            setattr(state, k, v)
        state.stop_reason = ""
        state.history = list(meta["history"])
        best = {k[5:]: v for k, v in arrays.items() if k.startswith("best/")}
        result.best = best or None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    weights = config.class_weights
    while state.epoch < config.epochs and not state.stop_reason:
        t0 = time.perf_counter()
        model.train()
        order = list(range(len(train_ex)))
        order_rng.shuffle(order)
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [train_ex[i] for i in order[start : start + config.batch_size]]
            store.zero_grad()
            batch_loss = 0.0
            for ex in batch:
                loss = weighted_ce_loss(model(ex), ex.grids, weights) / len(batch)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteError(
                        f"non-finite loss {value} on {ex.dialogue.doc_id} "
                        f"(epoch {state.epoch + 1}, step {state.steps + 1}, lr {config.lr})"
                    )
                loss.backward()
                batch_loss += value
            bad = [n for n, p in store if p.grad is not None and not torch.isfinite(p.grad).all()]
            if bad:
                raise NonFiniteError(f"non-finite gradient in {bad[:5]} at step {state.steps + 1}")
            store.step()
            state.steps += 1
            epoch_loss += batch_loss
            if on_step is not None:
                on_step(state.steps, batch_loss)
        state.epoch += 1
        record = {"epoch": state.epoch, "loss": epoch_loss, "seconds": round(time.perf_counter() - t0, 3)}
        if state.epoch % config.eval_every == 0 or state.epoch == config.epochs:
            if config.target_train_f1 > 0 or not dev_ex:
                record["train_micro_f1"] = evaluate_examples(model, train_ex)["micro_f1"]
            if dev_ex:
                record["dev_micro_f1"] = evaluate_examples(model, dev_ex)["micro_f1"]
            score = record.get("dev_micro_f1", record.get("train_micro_f1"))
            if score > state.best_f1:
                state.best_f1, state.best_epoch, state.bad_evals = score, state.epoch, 0
                result.best = store.arrays()
            else:
                state.bad_evals += 1
            if config.target_train_f1 > 0 and record["train_micro_f1"] >= config.target_train_f1:
                state.stop_reason = "target_reached"
            elif state.bad_evals >= config.patience:
                state.stop_reason = "early_stop"
        state.history.append(record)
        log(json.dumps(record))
        if out is not None:
            save_checkpoint(out / "last.npz", result, order_rng)
    if not state.stop_reason:
        state.stop_reason = "max_epochs"
    if dev_ex and result.best is not None:
        store.load_arrays(result.best)
    if out is not None:
        save_checkpoint(out / "model.npz", result, order_rng)
        (out / "history.jsonl").write_text("".join(json.dumps(r) + "\n" for r in state.history))
        config.save(out / "config.txt")
        final = {"best_epoch": state.best_epoch, "best_f1": state.best_f1, "stop_reason": state.stop_reason,
                 "epochs": state.epoch, "steps": state.steps}
        if dev_ex:
            final.update({f"dev_{k}": v for k, v in evaluate_examples(model, dev_ex).items()})
        (out / "metrics.json").write_text(json.dumps(final, indent=2, sort_keys=True) + "\n")
        write_manifest(out, config)
    return result


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(run_dir, config: PipelineConfig | None = None) -> dict:
    """Record the config hash and a git-style hash of every file in the run directory."""
    run_dir = Path(run_dir)
    files = {
        str(p.relative_to(run_dir)): git_blob_hash(p.read_bytes())
        for p in sorted(run_dir.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }
    tree = hashlib.sha1("".join(f"{h} {n}\n" for n, h in files.items()).encode()).hexdigest()
    manifest = {"files": files, "content_hash": tree}
    if config is not None:
        manifest["config_sha256"] = config.digest()
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# ablation harness

TABLE3 = ("full", "w/o TC-DAG", "w/o D-RoPE", "w/o Both")
TABLE5 = tuple(f"L={k}" for k in range(1, 5)) + tuple(f"w={k}" for k in range(1, 5))
TABLE6 = ("graph:tc", "graph:standard", "graph:reply")
PRESETS = {"table3": TABLE3, "table5": TABLE5, "table6": TABLE6}
ALIASES = {"wo-tcdag": "w/o TC-DAG", "wo-drope": "w/o D-RoPE", "wo-both": "w/o Both"}

_FIXED = {
    "full": {},
    "w/o TC-DAG": {"graph": "reply"},
    "w/o D-RoPE": {"position": "rope"},
    "graph:tc": {"graph": "tc"},
    "graph:standard": {"graph": "standard"},
    "graph:reply": {"graph": "reply"},
}


class UnknownVariant(ValueError):
    pass


def variant_overrides(name: str) -> dict:
    name = ALIASES.get(name, name)
    if name == "w/o Both":
        return {**variant_overrides("w/o TC-DAG"), **variant_overrides("w/o D-RoPE")}
    if name in _FIXED:
        return dict(_FIXED[name])
    for prefix, key in (("L=", "dag_layers"), ("w=", "window")):
        if name.startswith(prefix) and name[2:].isdigit() and int(name[2:]) >= 1:
            return {key: int(name[2:])}
    raise UnknownVariant(f"unknown variant {name!r}")


def expand_variants(names: Iterable[str]) -> list[str]:
    out: list[str] = []
    for name in names:
        if name in PRESETS:
            out.extend(PRESETS[name])
        else:
            variant_overrides(name)
            out.append(ALIASES.get(name, name))
    if not out:
        raise UnknownVariant("no variants given")
    return out


def variant_config(config: PipelineConfig, name: str, seed: int) -> PipelineConfig:
    return config.replace(seed=seed, **variant_overrides(name))


def run_ablation(
    config: PipelineConfig,
    train_set: Sequence[Dialogue],
    dev_set: Sequence[Dialogue],
    variants: Sequence[str],
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    out_dir=None,
    log: Callable[[str], None] | None = None,
) -> list[dict]:
    """One row per (variant, seed) with dev metrics of the selected checkpoint."""
    log = log or logger.info
    names = expand_variants(variants)
    eval_set = dev_set or train_set
    rows = []
    for name in names:
        for seed in seeds:
            cfg = variant_config(config, name, seed)
            t0 = time.perf_counter()
            result = train(cfg, train_set, dev_set, log=lambda s: None)
            examples = [prepare(d, result.vocab, cfg) for d in eval_set]
            metrics = evaluate_examples(result.model, examples)
            row = {
                "variant": name,
                "seed": seed,
                "micro_f1": metrics["micro_f1"],
                "ident_f1": metrics["ident_f1"],
                "best_epoch": result.state.best_epoch,
                "seconds": round(time.perf_counter() - t0, 1),
            }
            rows.append(row)
            log(json.dumps(row))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "rows.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
        (out / "table.txt").write_text(format_table(rows))
        config.save(out / "config.txt")
        write_manifest(out, config)
    return rows


def summarize(rows: Sequence[dict]) -> dict[str, dict[str, float]]:
    by: dict[str, list[dict]] = {}
    for r in rows:
        by.setdefault(r["variant"], []).append(r)
    out = {}
    for name, rs in by.items():
        micro = [r["micro_f1"] for r in rs]
        out[name] = {
            "micro_f1": statistics.fmean(micro),
            "micro_std": statistics.pstdev(micro),
            "ident_f1": statistics.fmean(r["ident_f1"] for r in rs),
            "runs": len(rs),
        }
    return out


def format_table(rows: Sequence[dict]) -> str:
    """Plain-text table: per-variant means with deltas against ``full``, then sweep blocks."""
    summary = summarize(rows)
    lines = [f"{'variant':<16}{'Micro F1':>10}{'std':>8}{'Iden F1':>10}{'delta':>9}{'runs':>6}"]
    base = summary.get("full", {}).get("micro_f1")
    groups: dict[str, list[str]] = {}
    for name in summary:
        key = name.split("=")[0] if "=" in name else ""
        groups.setdefault(key, []).append(name)
    for key, names in groups.items():
        if key:
            lines.append(f"# sweep {key}")
        for name in names:
            s = summary[name]
            delta = "" if base is None or name == "full" else f"{100 * (s['micro_f1'] - base):+.2f}"
            lines.append(
                f"{name:<16}{100 * s['micro_f1']:>10.2f}{100 * s['micro_std']:>8.2f}"
                f"{100 * s['ident_f1']:>10.2f}{delta:>9}{s['runs']:>6}"
            )
    return "\n".join(lines) + "\n"


__all__ = [
    "TABLE3",
    "TABLE5",
    "TABLE6",
    "TrainResult",
    "UnknownVariant",
    "build",
    "evaluate_examples",
    "expand_variants",
    "format_table",
    "git_blob_hash",
    "load_model",
    "predict_example",
    "run_ablation",
    "save_checkpoint",
    "summarize",
    "train",
    "variant_config",
    "variant_overrides",
    "write_manifest",
]


def grad_check_dialogue() -> Dialogue:
    """Two utterances, one quadruple inside the root and one crossing into the reply."""
    from .dialogue import Sentiment, Utterance

    utts = (
        Utterance(1, "a", 0, ("tgt0", "w1", "asp0", "good0")),
        Utterance(2, "b", 1, ("asp1", "pro", "w2", "bad0")),
    )
    quads = (
        Quadruple((0, 0), (2, 2), (3, 3), Sentiment.POS),
        Quadruple((0, 0), (4, 5), (7, 7), Sentiment.NEG),
    )
    return Dialogue("gradcheck", utts, quads)


GRAD_CHECK_CONFIG = PipelineConfig(
    d=8, encoder_layers=1, encoder_heads=2, gcn_layers=2, dag_layers=2, head_dim=8, rotary_dim=8, dropout=0.0
)


def end_to_end_grad_check(
    config: PipelineConfig = GRAD_CHECK_CONFIG, dialogue: Dialogue | None = None, report: dict | None = None
) -> float:
    """Finite-difference check of the full training loss w.r.t. every parameter (eval mode)."""
    from .tensor import grad_check

    dialogue = dialogue or grad_check_dialogue()
    vocab = Vocab.build([dialogue], config.max_speakers)
    model, store = build(config, vocab)
    model.eval()
    ex = prepare(dialogue, vocab, config)
    return grad_check(lambda: weighted_ce_loss(model(ex), ex.grids, config.class_weights), list(store), report=report)
