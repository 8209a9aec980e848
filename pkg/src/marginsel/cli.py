"""Command-line surface for the pipeline.

One JSON config file drives every subcommand; ``--set key.path=value``
overrides individual keys (values parsed as JSON, falling back to raw
strings).  Unknown keys are rejected, listing the valid ones.

Subcommands: assign, select, predict, eval, sweep, analyze, theory-check.
Exit codes: 0 ok, 2 config error, 3 backend failure, 4 empty hard selection
(select only).
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

from . import analysis, theory
from .core import (
    Example,
    LabelSpace,
    MarginSelError,
    candidate_key,
    candidate_set_from_labels,
)
from .dataset import Dataset, label_frequency, load_dataset, stratified_split
from .evalharness import (
    ExperimentContext,
    MethodSpec,
    RunConfig,
    alpha_sweep,
    predict_one,
    run_experiment,
)
from .knn import load_embeddings
from .llm_client import (
    AuthMissing,
    BackendConfig,
    CachedBackend,
    ChatExchange,
    HttpBackend,
    MockBackend,
    MockRule,
    Timeout,
    Transport,
    backend_calls,
    chat,
)
from .prompting import (
    BUILTIN_SPACES,
    BUILTIN_TEMPLATES,
    CANDIDATE_ASSIGNMENT,
    FINAL_PREDICTION,
    load_template_dir,
    parse_label_tags,
    render_candidate_prompt,
)
from .selection import (
    EmptySelection,
    SelectionConfig,
    build_lookup,
    load_lookup,
    save_lookup,
    select_demos,
)


class ConfigError(MarginSelError):
    pass


DEFAULT_CONFIG: dict = {
    "labels": [],
    "dataset": {
        "path": None,
        "train_path": None,
        "test_path": None,
        "test_fraction": 0.5,
        "split_seed": 0,
    },
    "embeddings": {"path": None},
    "templates": {"builtin": None, "dir": None},
    "lookup": {"path": "lookup.jsonl"},
    "backend": {
        "type": "mock",
        "base_url": "",
        "model": "",
        "temperature": 0.0,
        "max_retries": 3,
        "timeout": 60.0,
        "api_key_env": None,
        "max_output_tokens": 256,
        "backoff_base": 0.5,
        "cache_dir": None,
        "max_in_flight": 4,
        "mock_rules": {},
        "mock_default": None,
    },
    "select": {"alpha": 1.0, "shots": 4, "seed": 0},
    "eval": {
        "methods": [],
        "shots": [2, 4, 6, 8, 10],
        "seeds": [0, 1, 2],
        "fallback": "knn",
        "average": "macro",
        "baseline": "random",
        "out_dir": "runs/default",
    },
    "sweep": {"alphas": [0.0, 0.5, 0.9, 1.0]},
    "analyze": {
        "vectors_path": None,
        "metric": "euclidean",
        "records_path": None,
        "out_dir": "analysis",
    },
    "theory": {
        "seed": 0,
        "identity_instances": 1000,
        "margin_instances": 100,
        "out_path": "theory_report.json",
    },
}

# Keys whose values are free-form mappings/lists rather than fixed sub-schemas.
_OPAQUE_KEYS = {
    ("backend", "mock_rules"),
    ("eval", "methods"),
    ("sweep", "alphas"),
    ("labels",),
}


def _merge(base: dict, override: dict, path: tuple = ()) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        here = path + (key,)
        if key not in base:
            valid = ", ".join(sorted(base))
            raise ConfigError(
                f"unknown config key {'.'.join(here)!r}; valid keys here: {valid}"
            )
        if isinstance(base[key], dict) and here not in _OPAQUE_KEYS:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {'.'.join(here)!r} must be an object")
            merged[key] = _merge(base[key], value, here)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _apply_override(config: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    dotted, raw = assignment.split("=", 1)
    keys = dotted.split(".")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    schema = DEFAULT_CONFIG
    for key in keys[:-1]:
        if not isinstance(schema, dict) or key not in schema:
            raise ConfigError(f"unknown config key {dotted!r}")
        schema = schema[key]
        node = node.setdefault(key, {})
    leaf = keys[-1]
    if not isinstance(schema, dict) or leaf not in schema:
        valid = ", ".join(sorted(schema)) if isinstance(schema, dict) else "(none)"
        raise ConfigError(f"unknown config key {dotted!r}; valid keys here: {valid}")
    node[leaf] = value


def load_config(path: str | None, overrides: list[str]) -> dict:
    user: dict = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}")
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
    config = _merge(DEFAULT_CONFIG, user)
    for assignment in overrides:
        _apply_override(config, assignment)
    return config


# --------------------------------------------------------------------------
# Config -> pipeline objects
# --------------------------------------------------------------------------


def _space(config: dict) -> LabelSpace:
    if config["labels"]:
        return LabelSpace(config["labels"])
    builtin = config["templates"]["builtin"]
    if builtin and builtin in BUILTIN_SPACES:
        return BUILTIN_SPACES[builtin]
    raise ConfigError("config needs 'labels' (or a builtin template set)")


def _templates(config: dict):
    tpl = config["templates"]
    if tpl["dir"]:
        loaded = load_template_dir(tpl["dir"])
    elif tpl["builtin"]:
        if tpl["builtin"] not in BUILTIN_TEMPLATES:
            raise ConfigError(
                f"unknown builtin template set {tpl['builtin']!r}; "
                f"have: {', '.join(sorted(BUILTIN_TEMPLATES))}"
            )
        loaded = BUILTIN_TEMPLATES[tpl["builtin"]]
    else:
        raise ConfigError("config needs templates.builtin or templates.dir")
    return loaded[CANDIDATE_ASSIGNMENT], loaded[FINAL_PREDICTION]


def _backend(config: dict, space: LabelSpace):
    b = config["backend"]
    if b["type"] == "mock":
        if b["mock_default"] is None:
            raise ConfigError("mock backend needs backend.mock_default")
        rule = MockRule(
            keywords={k: frozenset(v) for k, v in b["mock_rules"].items()},
            default=b["mock_default"],
        )
        backend = MockBackend(rule, space)
    elif b["type"] == "http":
        if not b["base_url"]:
            raise ConfigError("http backend needs backend.base_url")
        backend = HttpBackend(
            BackendConfig(
                base_url=b["base_url"],
                model_name=b["model"],
                temperature=b["temperature"],
                max_retries=b["max_retries"],
                timeout=b["timeout"],
                api_key_env=b["api_key_env"],
                max_output_tokens=b["max_output_tokens"],
                backoff_base=b["backoff_base"],
            )
        )
    else:
        raise ConfigError(f"unknown backend.type {b['type']!r} (mock or http)")
    if b["cache_dir"]:
        backend = CachedBackend(backend, b["cache_dir"])
    return backend


def _datasets(config: dict, space: LabelSpace) -> tuple[Dataset, Dataset]:
    d = config["dataset"]
    if d["train_path"] and d["test_path"]:
        return load_dataset(d["train_path"], space), load_dataset(d["test_path"], space)
    if d["path"]:
        full = load_dataset(d["path"], space)
        return stratified_split(full, d["test_fraction"], d["split_seed"])
    raise ConfigError("config needs dataset.path or dataset.train_path/test_path")


def _train_dataset(config: dict, space: LabelSpace) -> Dataset:
    d = config["dataset"]
    if d["train_path"]:
        return load_dataset(d["train_path"], space)
    return _datasets(config, space)[0]


def _store(config: dict, required: bool):
    path = config["embeddings"]["path"]
    if not path:
        if required:
            raise ConfigError("this command needs embeddings.path")
        return None
    return load_embeddings(path)


def _lookup(config: dict, space: LabelSpace):
    path = Path(config["lookup"]["path"])
    if not path.exists():
        raise ConfigError(f"lookup table {path} not found; run 'assign' first")
    return load_lookup(path, space)


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_assign(config: dict, args) -> int:
    space = _space(config)
    candidate_template, _ = _templates(config)
    backend = _backend(config, space)
    train = _train_dataset(config, space)
    entries = build_lookup(
        train, backend, candidate_template, config["backend"]["max_in_flight"]
    )
    save_lookup(entries, config["lookup"]["path"], space)
    hist = analysis.candidate_histogram(entries)
    print(f"lookup table: {len(entries)} entries -> {config['lookup']['path']}")
    print(
        "candidate-count histogram: "
        + ", ".join(f"{k}: {v:.3f}" for k, v in hist.items())
    )
    print(f"backend calls: {backend_calls(backend)}")
    return 0


def _resolve_test_input(config, args, space) -> tuple[str, str, str | None]:
    """(id, text, gold) for the requested test input; gold None for ad-hoc text."""
    if args.test_text is not None:
        return "adhoc", args.test_text, None
    if args.test_id is None:
        raise ConfigError("provide --test-id or --test-text")
    train, test = _datasets(config, space)
    for ds in (test, train):
        try:
            ex = ds.by_id(args.test_id)
            return ex.id, ex.text, ex.gold
        except KeyError:
            continue
    raise ConfigError(f"test id {args.test_id!r} not found in the dataset")


def cmd_select(config: dict, args) -> int:
    space = _space(config)
    candidate_template, _ = _templates(config)
    backend = _backend(config, space)
    lookup = _lookup(config, space)
    sel = config["select"]
    alpha = sel["alpha"] if args.alpha is None else args.alpha
    shots = sel["shots"] if args.shots is None else args.shots
    seed = sel["seed"] if args.seed is None else args.seed

    test_id, test_text, _ = _resolve_test_input(config, args, space)
    system, user = render_candidate_prompt(candidate_template, test_text, space)
    exchange = chat(backend, ChatExchange(system=system, user=user))
    try:
        candidates = parse_label_tags(exchange.reply, space, multi=True)
    except MarginSelError as exc:
        raise ConfigError(f"candidate assignment failed for the test input: {exc}")

    knn_index = None
    if alpha < 1.0:
        store = _store(config, required=True)
        if test_id not in store:
            raise ConfigError(
                f"alpha < 1 needs an embedding for {test_id!r} in embeddings.path"
            )
        knn_index = (store, test_id)
    rho = label_frequency(
        Dataset(space, tuple(e.example for e in lookup))
    )
    try:
        demos = select_demos(
            lookup, candidates, knn_index, rho, SelectionConfig(alpha, shots, seed)
        )
    except EmptySelection:
        print(
            json.dumps(
                {
                    "test_id": test_id,
                    "candidate_key": candidate_key(candidates),
                    "error": "no hard match at alpha=1; rerun with alpha<1 "
                    "or rely on the eval fallback policy",
                },
                indent=2,
            )
        )
        return 4
    print(
        json.dumps(
            {
                "test_id": test_id,
                "candidate_key": candidate_key(candidates),
                "demos": [
                    {"id": e.example.id, "gold": e.example.gold, "source": e.source}
                    for e in demos
                ],
            },
            indent=2,
        )
    )
    return 0


def _context(config: dict, space, need_lookup: bool, need_store: bool) -> ExperimentContext:
    candidate_template, final_template = _templates(config)
    backend = _backend(config, space)
    train, test = _datasets(config, space)
    return ExperimentContext(
        space=space,
        train=train,
        test=test,
        backend=backend,
        candidate_template=candidate_template,
        final_template=final_template,
        lookup=_lookup(config, space) if need_lookup else None,
        store=_store(config, required=need_store),
        max_in_flight=config["backend"]["max_in_flight"],
    )


def _parse_methods(raw: list) -> list[MethodSpec]:
    if not raw:
        raise ConfigError("eval.methods must list at least one method")
    methods = []
    for item in raw:
        if not isinstance(item, dict) or "name" not in item:
            raise ConfigError(f"eval.methods entries need a 'name': {item!r}")
        extra = set(item) - {"name", "alpha"}
        if extra:
            raise ConfigError(f"unknown method keys {sorted(extra)}; valid: name, alpha")
        try:
            methods.append(MethodSpec(item["name"], item.get("alpha")))
        except ValueError as exc:
            raise ConfigError(str(exc))
    return methods


def _run_config(config: dict, methods: list[MethodSpec]) -> RunConfig:
    e = config["eval"]
    try:
        return RunConfig(
            methods=methods,
            shots=e["shots"],
            seeds=e["seeds"],
            fallback=e["fallback"],
            average=e["average"],
            baseline=e["baseline"],
            out_dir=e["out_dir"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc))


def cmd_eval(config: dict, args) -> int:
    space = _space(config)
    methods = _parse_methods(config["eval"]["methods"])
    need_lookup = any(m.name == "marginsel" for m in methods)
    need_store = any(
        m.name == "knn" or (m.name == "marginsel" and m.alpha < 1.0) for m in methods
    ) or (need_lookup and config["eval"]["fallback"] == "knn")
    ctx = _context(config, space, need_lookup, need_store)
    report = run_experiment(ctx, _run_config(config, methods))
    for row in report.summary:
        marker = " *" if row.get("significant_vs_baseline") else ""
        print(
            f"{row['method']:>24}  shot={row['shot']:<3} "
            f"macro_f1={row['mean_macro_f1']:.4f} +- {row['stdev_macro_f1']:.4f}{marker}"
        )
    for cell in report.failed_cells:
        print(f"FAILED cell {cell['method']} shot={cell['shot']} seed={cell['seed']}: "
              f"{cell['error']}")
    print(f"report: {config['eval']['out_dir']}/report.json")
    print(f"backend calls: {backend_calls(ctx.backend)}")
    return 3 if report.failed_cells else 0


def cmd_sweep(config: dict, args) -> int:
    space = _space(config)
    alphas = config["sweep"]["alphas"]
    need_store = any(a < 1.0 for a in alphas) or config["eval"]["fallback"] == "knn"
    ctx = _context(config, space, need_lookup=True, need_store=need_store)
    placeholder = [MethodSpec("marginsel", alpha=1.0)]
    rows = alpha_sweep(ctx, _run_config(config, placeholder), alphas)
    for row in rows:
        mean = row["mean_macro_f1"]
        shown = "error" if mean is None else f"{mean:.4f}"
        print(f"alpha={row['alpha']:<5} mean_macro_f1={shown}")
    print(f"backend calls: {backend_calls(ctx.backend)}")
    return 3 if any(r["mean_macro_f1"] is None for r in rows) else 0


def cmd_predict(config: dict, args) -> int:
    space = _space(config)
    method_name = args.method or "marginsel"
    alpha = config["select"]["alpha"] if args.alpha is None else args.alpha
    try:
        method = MethodSpec(method_name, alpha if method_name == "marginsel" else None)
    except ValueError as exc:
        raise ConfigError(str(exc))
    shots = config["select"]["shots"] if args.shots is None else args.shots
    seed = config["select"]["seed"] if args.seed is None else args.seed
    need_store = (
        method.name == "knn"
        or (method.name == "marginsel" and method.alpha < 1.0)
        or (method.name == "marginsel" and config["eval"]["fallback"] == "knn")
    )
    ctx = _context(config, space, need_lookup=method.name == "marginsel", need_store=need_store)
    test_id, test_text, gold = _resolve_test_input(config, args, space)
    example = Example(id=test_id, text=test_text, gold=gold or space.labels[0])
    predicted, record = predict_one(
        ctx, method, shots, example, seed, config["eval"]["fallback"]
    )
    if gold is None:
        record.pop("gold")
    print(json.dumps(record, indent=2, sort_keys=True))
    return 0


def cmd_analyze(config: dict, args) -> int:
    space = _space(config)
    a = config["analyze"]
    out_dir = Path(a["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    wrote = []

    if a["vectors_path"]:
        store = load_embeddings(a["vectors_path"])
        train, test = _datasets(config, space)
        golds = {ex.id: ex.gold for ds in (train, test) for ex in ds.examples}
        vectors = {i: v for i, v in store.vectors.items()}
        missing = sorted(set(vectors) - set(golds))
        if missing:
            raise ConfigError(f"vectors with no gold label: {missing[:5]}")
        cm = analysis.centroid_distances(vectors, golds, space, a["metric"])
        analysis.write_centroid_outputs(
            cm, out_dir / "centroids.json", out_dir / "centroids.csv"
        )
        analysis.dump_projection_input(
            vectors, {i: golds[i] for i in vectors}, out_dir / "projection.jsonl"
        )
        wrote += ["centroids.json", "centroids.csv", "projection.jsonl"]

    lookup_path = Path(config["lookup"]["path"])
    if lookup_path.exists():
        lookup = load_lookup(lookup_path, space)
        hist = analysis.candidate_histogram(lookup)
        analysis.write_histogram_outputs(
            hist, out_dir / "histogram.json", out_dir / "histogram.csv"
        )
        wrote += ["histogram.json", "histogram.csv"]

    records_path = a["records_path"] or (
        Path(config["eval"]["out_dir"]) / "records.jsonl"
    )
    records_path = Path(records_path)
    if records_path.exists():
        records = []
        with open(records_path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                raw = json.loads(line)
                if raw.get("step1") is None:
                    candidates = None
                else:
                    candidates = candidate_set_from_labels(raw["step1"], space)
                records.append(
                    analysis.Step1Record(
                        gold=raw["gold"],
                        predicted=raw["predicted"],
                        candidates=candidates,
                    )
                )
        if records:
            recall = analysis.step1_recall(records, space)
            analysis.write_recall_outputs(
                recall, out_dir / "step1_recall.json", out_dir / "step1_recall.csv"
            )
            wrote += ["step1_recall.json", "step1_recall.csv"]

    if not wrote:
        raise ConfigError(
            "nothing to analyze: provide analyze.vectors_path, a lookup table, "
            "or a finished run's records"
        )
    print(f"analysis artifacts in {out_dir}: {', '.join(wrote)}")
    return 0


def cmd_theory_check(config: dict, args) -> int:
    t = config["theory"]
    report = theory.run_theory_checks(
        seed=t["seed"],
        identity_instances=t["identity_instances"],
        margin_instances=t["margin_instances"],
    )
    out_path = Path(t["out_path"])
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"decomposition max error: {report['decomposition']['max_abs_error']:.3e}")
    print(f"affine update max error: {report['affine_update']['max_abs_error']:.3e}")
    print(f"kkt worst stationarity:  {report['kkt']['stationarity']:.3e}")
    print(
        "support restriction max change: "
        f"{report['support_restriction']['max_abs_change']:.3e}"
    )
    print(f"report: {out_path}")
    return 0


COMMANDS = {
    "assign": cmd_assign,
    "select": cmd_select,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "analyze": cmd_analyze,
    "theory-check": cmd_theory_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="marginsel",
        description="Hard-example demonstration selection pipeline",
    )
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key (dotted path; value parsed as JSON)",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        if name in ("select", "predict"):
            cmd.add_argument("--test-id")
            cmd.add_argument("--test-text")
            cmd.add_argument("--alpha", type=float)
            cmd.add_argument("--shots", type=int)
            cmd.add_argument("--seed", type=int)
        if name == "predict":
            cmd.add_argument("--method", choices=["random", "knn", "marginsel"])
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args.overrides)
        return COMMANDS[args.command](config, args)
    except (Transport, Timeout, AuthMissing) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, FileNotFoundError, MarginSelError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
