"""End-to-end prediction loop and experiment runner.

A run is a grid of (method, shot count, seed) cells over a fixed train/test
split.  Methods: ``random`` (uniform demos), ``knn`` (cosine neighbors) and
``marginsel`` (hard-example selection at a given alpha).  Each cell predicts
every test example, scores macro-F1, and persists per-example records so an
interrupted run resumes without recomputing finished cells.  Reports carry
per-cell scores, per-(method, shot) mean/stdev over seeds, and a paired
t-test marker against the baseline method.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import random
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from scipy import stats as scipy_stats

from .core import CandidateSet, Example, LabelSpace, MarginSelError, canonical_label
from .dataset import Dataset, LabelFrequency, label_frequency
from .knn import EmbeddingStore, knn_retrieve
from .llm_client import Backend, ChatExchange, chat
from .llm_client import map_concurrently
from .prompting import (
    Ambiguous,
    EmptySet,
    NoTag,
    PromptTemplate,
    parse_label_tags,
    render_candidate_prompt,
    render_final_prompt,
)
from .selection import (
    EmptySelection,
    LookupEntry,
    SelectionConfig,
    select_demos,
)

log = logging.getLogger(__name__)

INVALID = "__invalid__"

RANDOM = "random"
KNN_METHOD = "knn"
MARGINSEL = "marginsel"

FALLBACK_KNN = "knn"
FALLBACK_RANDOM = "random"


class EmptyInput(MarginSelError):
    pass


def macro_f1(
    pairs: Sequence[tuple[str, str]], space: LabelSpace, average: str = "macro"
) -> float:
    """Mean per-class F1 over every class of the space.

    A class scores 2TP/(2TP+FP+FN), or 0 when that denominator is 0.
    Predictions outside the space (including the reserved INVALID token)
    count as wrong for every class: a false negative for the gold class, a
    false positive for none.  average='weighted' weights classes by gold
    support instead of uniformly.
    """
    if not pairs:
        raise EmptyInput("no (gold, predicted) pairs to score")
    if average not in ("macro", "weighted"):
        raise ValueError(f"unknown average {average!r}")
    tp: dict[str, int] = {c: 0 for c in space.labels}
    fp: dict[str, int] = {c: 0 for c in space.labels}
    fn: dict[str, int] = {c: 0 for c in space.labels}
    support: dict[str, int] = {c: 0 for c in space.labels}
    for gold, predicted in pairs:
        gold = canonical_label(gold)
        if gold not in tp:
            raise MarginSelError(f"gold label {gold!r} outside the label space")
        support[gold] += 1
        pred = canonical_label(predicted)
        if pred == gold:
            tp[gold] += 1
        else:
            fn[gold] += 1
            if pred in fp:
                fp[pred] += 1
    scores = {}
    for c in space.labels:
        denom = 2 * tp[c] + fp[c] + fn[c]
        scores[c] = 2 * tp[c] / denom if denom else 0.0
    if average == "macro":
        return sum(scores.values()) / len(space)
    total = sum(support.values())
    return sum(scores[c] * support[c] for c in space.labels) / total


@dataclass(frozen=True)
class MethodSpec:
    name: str
    alpha: float | None = None

    def __post_init__(self):
        if self.name not in (RANDOM, KNN_METHOD, MARGINSEL):
            raise ValueError(f"unknown method {self.name!r}")
        if self.name == MARGINSEL and self.alpha is None:
            raise ValueError("marginsel needs an alpha")

    def label(self) -> str:
        if self.name == MARGINSEL:
            return f"marginsel(alpha={self.alpha:g})"
        return self.name


@dataclass
class RunConfig:
    methods: list[MethodSpec]
    shots: list[int] = field(default_factory=lambda: [2, 4, 6, 8, 10])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    fallback: str = FALLBACK_KNN
    average: str = "macro"
    baseline: str = RANDOM
    out_dir: str | Path | None = None

    def __post_init__(self):
        if not self.methods:
            raise ValueError("at least one method required")
        if not self.seeds:
            raise ValueError("at least one seed required")
        if any(s < 1 for s in self.shots):
            raise ValueError("shot counts must be positive")
        if self.fallback not in (FALLBACK_KNN, FALLBACK_RANDOM):
            raise ValueError(f"unknown fallback policy {self.fallback!r}")


@dataclass
class ExperimentContext:
    space: LabelSpace
    train: Dataset
    test: Dataset
    backend: Backend
    candidate_template: PromptTemplate | None = None
    final_template: PromptTemplate | None = None
    lookup: list[LookupEntry] | None = None
    store: EmbeddingStore | None = None
    max_in_flight: int = 4
    rho: LabelFrequency | None = None  # derived from train when not given

    def __post_init__(self):
        if self.rho is None:
            self.rho = label_frequency(self.train)


@dataclass
class RunReport:
    cells: list[dict]
    summary: list[dict]
    records: list[dict]

    @property
    def failed_cells(self) -> list[dict]:
        return [c for c in self.cells if c.get("error")]


def derive_seed(base_seed: int, *parts: str) -> int:
    """Stable per-example seed derivation (never the built-in hash, which is
    randomized per process)."""
    digest = hashlib.blake2b(
        "|".join([str(base_seed), *parts]).encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "big")


def _train_ids(ctx: ExperimentContext) -> list[str]:
    return [ex.id for ex in ctx.train.examples]


def _step1_candidates(ctx: ExperimentContext, test: Example) -> CandidateSet | None:
    system, user = render_candidate_prompt(ctx.candidate_template, test.text, ctx.space)
    exchange = chat(ctx.backend, ChatExchange(system=system, user=user))
    try:
        return parse_label_tags(exchange.reply, ctx.space, multi=True)
    except (NoTag, EmptySet) as exc:
        log.warning("test-example candidate parse failed for %s: %s", test.id, exc)
        return None


def _fallback_demos(
    ctx: ExperimentContext, policy: str, shots: int, test: Example, seed: int
) -> list[tuple[Example, str]]:
    if policy == FALLBACK_KNN:
        if ctx.store is None:
            raise MarginSelError("knn fallback needs an embedding store")
        ids = knn_retrieve(ctx.store, test.id, shots, _train_ids(ctx))
        return [(ctx.train.by_id(i), "knn") for i in ids]
    rng = random.Random(derive_seed(seed, "fallback", test.id))
    picked = rng.sample(list(ctx.train.examples), min(shots, len(ctx.train)))
    return [(ex, "random") for ex in picked]


def _choose_demos(
    ctx: ExperimentContext,
    method: MethodSpec,
    shots: int,
    test: Example,
    seed: int,
    fallback_policy: str,
) -> tuple[list[tuple[Example, str]], CandidateSet | None, bool]:
    """Demos as (example, source) pairs, the test's assignment-step candidate
    set (marginsel only), and whether the fallback policy fired."""
    if method.name == RANDOM:
        rng = random.Random(derive_seed(seed, "random", test.id))
        picked = rng.sample(list(ctx.train.examples), min(shots, len(ctx.train)))
        return [(ex, "random") for ex in picked], None, False
    if method.name == KNN_METHOD:
        if ctx.store is None:
            raise MarginSelError("knn method needs an embedding store")
        ids = knn_retrieve(ctx.store, test.id, shots, _train_ids(ctx))
        return [(ctx.train.by_id(i), "knn") for i in ids], None, False

    step1 = _step1_candidates(ctx, test)
    selection_cfg = SelectionConfig(
        alpha=method.alpha,
        shots=shots,
        seed=derive_seed(seed, "marginsel", test.id),
    )
    knn_index = (ctx.store, test.id) if method.alpha < 1.0 else None
    try:
        demo_set = select_demos(ctx.lookup, step1, knn_index, ctx.rho, selection_cfg)
        return [(e.example, e.source) for e in demo_set], step1, False
    except EmptySelection:
        return _fallback_demos(ctx, fallback_policy, shots, test, seed), step1, True


def predict_one(
    ctx: ExperimentContext,
    method: MethodSpec,
    shots: int,
    test: Example,
    seed: int,
    fallback_policy: str = FALLBACK_KNN,
) -> tuple[str, dict]:
    """Predict one test example: select demos per method, render the final
    prompt, parse the single-label reply.  One deterministic retry on a
    malformed reply, then the INVALID token."""
    demos, step1, fell_back = _choose_demos(
        ctx, method, shots, test, seed, fallback_policy
    )
    pairs = [(ex.text, ex.gold) for ex, _ in demos]
    system, user = render_final_prompt(ctx.final_template, pairs, test.text, ctx.space)
    predicted = INVALID
    for _ in range(2):
        exchange = chat(ctx.backend, ChatExchange(system=system, user=user))
        try:
            predicted = parse_label_tags(exchange.reply, ctx.space, multi=False)
            break
        except (NoTag, EmptySet, Ambiguous) as exc:
            log.warning("final parse failed for %s: %s", test.id, exc)
    record = {
        "method": method.label(),
        "shot": shots,
        "seed": seed,
        "id": test.id,
        "gold": test.gold,
        "predicted": predicted,
        "demo_ids": [ex.id for ex, _ in demos],
        "demo_sources": [src for _, src in demos],
        "step1": sorted(step1.labels_in(ctx.space)) if step1 is not None else None,
        "fallback": fell_back,
    }
    return predicted, record


def _cell_key(record: dict) -> tuple:
    return (record["method"], record["shot"], record["seed"])


def _load_records(path: Path) -> dict[tuple, dict[str, dict]]:
    cells: dict[tuple, dict[str, dict]] = {}
    if not path.exists():
        return cells
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            cells.setdefault(_cell_key(record), {})[record["id"]] = record
    return cells


def run_experiment(ctx: ExperimentContext, cfg: RunConfig) -> RunReport:
    """Execute the full grid.  Already-recorded cells are skipped; per-cell
    failures are annotated rather than aborting the run."""
    out_dir = Path(cfg.out_dir) if cfg.out_dir is not None else None
    records_path = out_dir / "records.jsonl" if out_dir else None
    existing = _load_records(records_path) if records_path else {}
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    test_order = {ex.id: i for i, ex in enumerate(ctx.test.examples)}
    all_records: list[dict] = []
    cells: list[dict] = []
    for method in cfg.methods:
        for shot in cfg.shots:
            for seed in cfg.seeds:
                key = (method.label(), shot, seed)
                cached = existing.get(key, {})
                cell = {
                    "method": method.label(),
                    "alpha": method.alpha,
                    "shot": shot,
                    "seed": seed,
                }
                try:
                    pending = [
                        ex for ex in ctx.test.examples if ex.id not in cached
                    ]
                    fresh = map_concurrently(
                        lambda ex: predict_one(
                            ctx, method, shot, ex, seed, cfg.fallback
                        )[1],
                        pending,
                        ctx.max_in_flight,
                    )
                    if fresh and records_path:
                        # flushed as soon as a cell finishes so an
                        # interrupted run resumes without recomputation
                        with open(records_path, "a", encoding="utf-8") as fh:
                            for record in fresh:
                                fh.write(
                                    json.dumps(record, ensure_ascii=False, sort_keys=True)
                                    + "\n"
                                )
                    cell_records = list(cached.values()) + list(fresh)
                    cell_records.sort(key=lambda r: test_order[r["id"]])
                    pairs = [(r["gold"], r["predicted"]) for r in cell_records]
                    cell["macro_f1"] = macro_f1(pairs, ctx.space, cfg.average)
                    all_records.extend(cell_records)
                except MarginSelError as exc:
                    log.error("cell %s failed: %s", key, exc)
                    cell["error"] = str(exc)
                cells.append(cell)

    summary = _summarize(cells, cfg)
    report = RunReport(cells=cells, summary=summary, records=all_records)
    if out_dir:
        _persist(report, out_dir)
    return report


def _summarize(cells: list[dict], cfg: RunConfig) -> list[dict]:
    by_group: dict[tuple, dict[int, float]] = {}
    for cell in cells:
        if "macro_f1" not in cell:
            continue
        by_group.setdefault((cell["method"], cell["shot"]), {})[cell["seed"]] = cell[
            "macro_f1"
        ]
    baseline_scores = {
        (method, shot): scores
        for (method, shot), scores in by_group.items()
        if method == cfg.baseline
    }
    summary = []
    for (method, shot), scores in sorted(by_group.items()):
        values = [scores[s] for s in sorted(scores)]
        row = {
            "method": method,
            "shot": shot,
            "mean_macro_f1": statistics.mean(values),
            "stdev_macro_f1": statistics.stdev(values) if len(values) > 1 else 0.0,
        }
        base = baseline_scores.get((cfg.baseline, shot))
        if base is not None and method != cfg.baseline and len(values) > 1:
            paired = [
                (scores[s], base[s]) for s in sorted(scores) if s in base
            ]
            if len(paired) > 1:
                a = [x for x, _ in paired]
                b = [y for _, y in paired]
                _, pvalue = scipy_stats.ttest_rel(a, b)
                significant = bool(pvalue < 0.05) if pvalue == pvalue else False
                row["p_vs_baseline"] = None if pvalue != pvalue else float(pvalue)
                row["significant_vs_baseline"] = significant
        summary.append(row)
    return summary


def _persist(report: RunReport, out_dir: Path) -> None:
    records_sorted = sorted(
        report.records, key=lambda r: (r["method"], r["shot"], r["seed"])
    )
    with open(out_dir / "records.jsonl", "w", encoding="utf-8") as fh:
        for record in records_sorted:
            fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
    (out_dir / "report.json").write_text(
        json.dumps(
            {"cells": report.cells, "summary": report.summary},
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "alpha", "shot", "seed", "macro_f1"])
    for cell in report.cells:
        writer.writerow(
            [
                cell["method"],
                "" if cell.get("alpha") is None else repr(cell["alpha"]),
                cell["shot"],
                cell["seed"],
                repr(cell["macro_f1"]) if "macro_f1" in cell else "error",
            ]
        )
    (out_dir / "report.csv").write_text(buf.getvalue(), encoding="utf-8")


def alpha_sweep(
    ctx: ExperimentContext, cfg: RunConfig, alphas: Sequence[float]
) -> list[dict]:
    """One marginsel run per alpha value, aggregated into a table of
    per-alpha mean macro-F1 (over all shots and seeds)."""
    rows = []
    for alpha in alphas:
        sub = RunConfig(
            methods=[MethodSpec(MARGINSEL, alpha=alpha)],
            shots=cfg.shots,
            seeds=cfg.seeds,
            fallback=cfg.fallback,
            average=cfg.average,
            baseline=cfg.baseline,
            out_dir=(Path(cfg.out_dir) / f"alpha_{alpha:g}") if cfg.out_dir else None,
        )
        report = run_experiment(ctx, sub)
        scored = [c for c in report.cells if "macro_f1" in c]
        row = {
            "alpha": alpha,
            "cells": report.cells,
            "mean_macro_f1": (
                statistics.mean(c["macro_f1"] for c in scored) if scored else None
            ),
        }
        rows.append(row)
    if cfg.out_dir:
        out_dir = Path(cfg.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "sweep.json").write_text(
            json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["alpha", "mean_macro_f1"])
        for row in rows:
            writer.writerow([repr(row["alpha"]), repr(row["mean_macro_f1"])])
        (out_dir / "sweep.csv").write_text(buf.getvalue(), encoding="utf-8")
    return rows
