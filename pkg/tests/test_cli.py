import json
from pathlib import Path

from marginsel.cli import main

from conftest import write_jsonl


def make_workspace(tmp_path: Path) -> Path:
    labels = ["red", "green", "blue"]
    records = []
    for i in range(24):
        sig = "sigone" if i % 2 == 0 else "sigtwo"
        records.append(
            {"id": f"e{i:02d}", "text": f"{sig} word{i}", "label": labels[i % 3]}
        )
    write_jsonl(tmp_path / "data.jsonl", records)

    import random

    rng = random.Random(12)
    write_jsonl(
        tmp_path / "emb.jsonl",
        [
            {"id": r["id"], "vector": [rng.uniform(-1, 1) for _ in range(4)]}
            for r in records
        ],
    )

    tdir = tmp_path / "templates"
    tdir.mkdir()
    (tdir / "candidate.system.txt").write_text("You sort items into bins.")
    (tdir / "candidate.user.txt").write_text(
        "Given the text: '{text}', list every plausible bin.\n{labels}\n"
        "Return ALL relevant labels in comma-separated format within the "
        "<label></label> tags."
    )
    (tdir / "final.system.txt").write_text("You sort items into bins.")
    (tdir / "final.user.txt").write_text(
        "Given the text: '{text}', pick the single best bin.\n{labels}\n"
        "Provide the label exactly as follows: <label>label</label>."
    )

    config = {
        "labels": labels,
        "dataset": {
            "path": str(tmp_path / "data.jsonl"),
            "test_fraction": 0.25,
            "split_seed": 3,
        },
        "embeddings": {"path": str(tmp_path / "emb.jsonl")},
        "templates": {"dir": str(tdir)},
        "lookup": {"path": str(tmp_path / "lookup.jsonl")},
        "backend": {
            "type": "mock",
            "cache_dir": str(tmp_path / "cache"),
            "mock_rules": {"sigone": ["red", "green"], "sigtwo": ["green", "blue"]},
            "mock_default": "red",
        },
        "eval": {
            "methods": [
                {"name": "random"},
                {"name": "knn"},
                {"name": "marginsel", "alpha": 1.0},
            ],
            "shots": [2],
            "seeds": [1, 2],
            "fallback": "random",
            "out_dir": str(tmp_path / "runs"),
        },
        "sweep": {"alphas": [0.0, 1.0]},
        "analyze": {
            "vectors_path": str(tmp_path / "emb.jsonl"),
            "out_dir": str(tmp_path / "analysis"),
        },
        "theory": {
            "identity_instances": 50,
            "margin_instances": 10,
            "out_path": str(tmp_path / "theory.json"),
        },
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config, indent=2))
    return config_path


def test_unknown_config_key_is_rejected(tmp_path, capsys):
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps({"labels": ["a", "b"], "daataset": {}}))
    code = main(["--config", str(config_path), "assign"])
    assert code == 2
    err = capsys.readouterr().err
    assert "daataset" in err and "dataset" in err  # lists the valid keys


def test_unknown_override_key_is_rejected(tmp_path, capsys):
    config_path = make_workspace(tmp_path)
    code = main(["--config", str(config_path), "--set", "eval.shoots=[2]", "assign"])
    assert code == 2
    assert "shots" in capsys.readouterr().err


def test_bad_dataset_path_exits_2(tmp_path, capsys):
    config_path = make_workspace(tmp_path)
    code = main(
        ["--config", str(config_path), "--set", 'dataset.path="/nope/missing.jsonl"',
         "assign"]
    )
    assert code == 2


def test_assign_is_deterministic_and_cached(tmp_path, capsys):
    config_path = make_workspace(tmp_path)
    assert main(["--config", str(config_path), "assign"]) == 0
    first_out = capsys.readouterr().out
    assert "lookup table: 18 entries" in first_out
    assert "candidate-count histogram" in first_out
    lookup_bytes = (tmp_path / "lookup.jsonl").read_bytes()

    assert main(["--config", str(config_path), "assign"]) == 0
    second_out = capsys.readouterr().out
    assert "backend calls: 0" in second_out
    assert (tmp_path / "lookup.jsonl").read_bytes() == lookup_bytes


def test_select_prints_demoset(tmp_path, capsys):
    config_path = make_workspace(tmp_path)
    main(["--config", str(config_path), "assign"])
    capsys.readouterr()
    code = main(
        [
            "--config", str(config_path),
            "select", "--test-text", "sigone fresh thing",
            "--alpha", "1.0", "--shots", "3", "--seed", "5",
        ]
    )
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert out["candidate_key"] == "110"
    assert len(out["demos"]) == 3
    assert all(d["source"] == "hard" for d in out["demos"])


def test_select_empty_selection_exits_4(tmp_path, capsys):
    config_path = make_workspace(tmp_path)
    main(["--config", str(config_path), "assign"])
    capsys.readouterr()
    code = main(
        [
            "--config", str(config_path),
            "select", "--test-text", "sigone sigtwo both",
            "--alpha", "1.0",
        ]
    )
    assert code == 4
    out = json.loads(capsys.readouterr().out)
    assert out["candidate_key"] == "111"
    assert "alpha" in out["error"]


def test_select_mixed_alpha_quota(tmp_path, capsys):
    config_path = make_workspace(tmp_path)
    main(["--config", str(config_path), "assign"])
    capsys.readouterr()
    code = main(
        [
            "--config", str(config_path),
            "select", "--test-id", "e00",
            "--alpha", "0.5", "--shots", "4",
        ]
    )
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    sources = [d["source"] for d in out["demos"]]
    assert sources == ["hard", "hard", "knn", "knn"]


def test_predict_single_example(tmp_path, capsys):
    config_path = make_workspace(tmp_path)
    main(["--config", str(config_path), "assign"])
    capsys.readouterr()
    code = main(
        [
            "--config", str(config_path),
            "predict", "--test-id", "e01", "--method", "marginsel",
            "--alpha", "1.0", "--shots", "2",
        ]
    )
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert out["predicted"] in {"red", "green", "blue"}
    assert len(out["demo_ids"]) == 2


def test_eval_writes_reports_and_is_idempotent(tmp_path, capsys):
    config_path = make_workspace(tmp_path)
    main(["--config", str(config_path), "assign"])
    capsys.readouterr()
    assert main(["--config", str(config_path), "eval"]) == 0
    out = capsys.readouterr().out
    assert "macro_f1=" in out
    report = json.loads((tmp_path / "runs" / "report.json").read_text())
    assert len(report["cells"]) == 6  # 3 methods x 1 shot x 2 seeds
    report_bytes = (tmp_path / "runs" / "report.json").read_bytes()

    assert main(["--config", str(config_path), "eval"]) == 0
    second = capsys.readouterr().out
    assert "backend calls: 0" in second
    assert (tmp_path / "runs" / "report.json").read_bytes() == report_bytes


def test_sweep_runs_over_alphas(tmp_path, capsys):
    config_path = make_workspace(tmp_path)
    main(["--config", str(config_path), "assign"])
    capsys.readouterr()
    code = main(
        ["--config", str(config_path), "--set", "eval.seeds=[1]", "sweep"]
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "alpha=0.0" in out and "alpha=1.0" in out
    sweep = json.loads((tmp_path / "runs" / "sweep.json").read_text())
    assert [row["alpha"] for row in sweep] == [0.0, 1.0]


def test_analyze_emits_artifacts(tmp_path, capsys):
    config_path = make_workspace(tmp_path)
    main(["--config", str(config_path), "assign"])
    main(["--config", str(config_path), "eval"])
    capsys.readouterr()
    assert main(["--config", str(config_path), "analyze"]) == 0
    adir = tmp_path / "analysis"
    for name in (
        "centroids.json",
        "centroids.csv",
        "histogram.json",
        "histogram.csv",
        "step1_recall.json",
        "step1_recall.csv",
        "projection.jsonl",
    ):
        assert (adir / name).exists(), name
    centroids = json.loads((adir / "centroids.json").read_text())
    assert centroids["labels"] == ["red", "green", "blue"]
    hist = json.loads((adir / "histogram.json").read_text())
    assert hist == {"2": 1.0}  # every mock candidate set has two labels


def test_theory_check_reports_tiny_errors(tmp_path, capsys):
    config_path = make_workspace(tmp_path)
    assert main(["--config", str(config_path), "theory-check"]) == 0
    report = json.loads((tmp_path / "theory.json").read_text())
    assert report["decomposition"]["max_abs_error"] < 1e-10
    assert report["affine_update"]["max_abs_error"] < 1e-10
    assert report["kkt"]["stationarity"] < 1e-8
    assert report["support_restriction"]["max_abs_change"] < 1e-12


def test_missing_config_inputs_exit_2(tmp_path, capsys):
    config_path = tmp_path / "c.json"
    config_path.write_text(json.dumps({"labels": ["a", "b"]}))
    assert main(["--config", str(config_path), "eval"]) == 2
    # select before assign: missing lookup
    ws = make_workspace(tmp_path)
    assert main(["--config", str(ws), "select", "--test-text", "x"]) == 2


def test_unreachable_backend_exits_3(tmp_path, capsys):
    config_path = make_workspace(tmp_path)
    code = main(
        [
            "--config", str(config_path),
            "--set", 'backend.type="http"',
            "--set", 'backend.base_url="http://127.0.0.1:1"',
            "--set", "backend.max_retries=0",
            "--set", "backend.timeout=0.2",
            "--set", "backend.cache_dir=null",
            "assign",
        ]
    )
    assert code == 3
    assert "backend error" in capsys.readouterr().err
