import json
import subprocess
import sys

import pytest

from zoomeye.cli import main
from conftest import gradient_image


@pytest.fixture()
def demo_image(tmp_path):
    path = tmp_path / "scene.png"
    gradient_image(672, 672).save(path)
    return str(path)


def _ask_args(demo_image, out_dir, *extra):
    return [
        "ask",
        "--image", demo_image,
        "--question", "Where is the target?",
        "--backend", "scripted",
        "--target", "336,0,336,336",
        "--rho", "1.0",
        "--epsilon-floor", "0.0",
        "--seed", "7",
        "--out", str(out_dir),
        *extra,
    ]


def test_ask_scripted_demo(demo_image, tmp_path, capsys):
    out_dir = tmp_path / "out"
    code = main(_ask_args(demo_image, out_dir))
    assert code == 0
    stdout = capsys.readouterr().out
    assert "The target occupies the region" in stdout
    trace = json.loads((out_dir / "trace.json").read_text())
    assert trace["version"] == 1
    assert trace["result_node_ids"] == [2]
    assert trace["union_bbox"] == [336, 0, 336, 336]
    assert (out_dir / "answer.txt").read_text().strip() == stdout.strip()


def test_ask_is_byte_identical_across_runs(demo_image, tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(_ask_args(demo_image, out_a)) == 0
    assert main(_ask_args(demo_image, out_b)) == 0
    assert (out_a / "trace.json").read_bytes() == (out_b / "trace.json").read_bytes()
    assert (out_a / "answer.txt").read_bytes() == (out_b / "answer.txt").read_bytes()


def test_ask_annotate_writes_png(demo_image, tmp_path):
    out_dir = tmp_path / "out"
    code = main(_ask_args(demo_image, out_dir, "--annotate"))
    assert code == 0
    from PIL import Image

    with Image.open(out_dir / "annotated.png") as annotated:
        assert annotated.size == (672, 672)
        with Image.open(demo_image) as source:
            assert annotated.convert("RGB").tobytes() != source.convert("RGB").tobytes()


def test_ask_missing_image_exits_3(tmp_path, capsys):
    code = main(_ask_args(str(tmp_path / "nope.png"), tmp_path / "out"))
    assert code == 3
    assert "cannot open image" in capsys.readouterr().err


def test_ask_undecodable_image_exits_3(tmp_path, capsys):
    bogus = tmp_path / "bogus.png"
    bogus.write_text("not an image")
    code = main(_ask_args(str(bogus), tmp_path / "out"))
    assert code == 3


def test_ask_unknown_config_key_exits_1(demo_image, tmp_path, capsys):
    config = tmp_path / "conf.json"
    config.write_text(json.dumps({"taus": 0.7}))
    code = main(_ask_args(demo_image, tmp_path / "out", "--config", str(config)))
    assert code == 1
    assert "taus" in capsys.readouterr().err


def test_ask_config_file_applies_and_flags_win(demo_image, tmp_path):
    config = tmp_path / "conf.json"
    config.write_text(json.dumps({"tau": 0.55, "bias": 0.3}))
    out_dir = tmp_path / "out"
    code = main(_ask_args(demo_image, out_dir, "--config", str(config)))
    assert code == 0
    trace = json.loads((out_dir / "trace.json").read_text())
    assert trace["config"]["tau"] == 0.55
    assert trace["config"]["bias_b"] == 0.3

    out_dir2 = tmp_path / "out2"
    code = main(_ask_args(demo_image, out_dir2, "--config", str(config), "--tau", "0.7"))
    assert code == 0
    trace = json.loads((out_dir2 / "trace.json").read_text())
    assert trace["config"]["tau"] == 0.7


def test_ask_invalid_config_value_exits_1(demo_image, tmp_path, capsys):
    code = main(_ask_args(demo_image, tmp_path / "out", "--tau", "1.5"))
    assert code == 1
    assert "tau" in capsys.readouterr().err


def test_ask_unknown_flag_exits_1(demo_image, tmp_path):
    code = main(_ask_args(demo_image, tmp_path / "out", "--frobnicate"))
    assert code == 1


def test_ask_empty_question_exits_1(demo_image, tmp_path, capsys):
    code = main(
        [
            "ask",
            "--image", demo_image,
            "--question", "  ",
            "--backend", "scripted",
            "--out", str(tmp_path / "out"),
        ]
    )
    assert code == 1
    assert "question" in capsys.readouterr().err


def test_ask_transport_failure_exits_2(demo_image, tmp_path, capsys):
    # Point the http backend at a port nothing listens on.
    code = main(
        [
            "ask",
            "--image", demo_image,
            "--question", "Q?",
            "--backend", "http",
            "--api-base", "http://127.0.0.1:1",
            "--model", "m",
            "--out", str(tmp_path / "out"),
        ]
    )
    assert code == 2
    assert "transport error" in capsys.readouterr().err


def test_ask_http_backend_without_base_exits_1(demo_image, tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("ZOOMEYE_API_BASE", raising=False)
    monkeypatch.delenv("ZOOMEYE_MODEL", raising=False)
    code = main(
        [
            "ask",
            "--image", demo_image,
            "--question", "Q?",
            "--backend", "http",
            "--out", str(tmp_path / "out"),
        ]
    )
    assert code == 1
    assert "api-base" in capsys.readouterr().err


def test_ask_global_local_mode(demo_image, tmp_path):
    out_dir = tmp_path / "out"
    code = main(_ask_args(demo_image, out_dir, "--mode", "global-local"))
    assert code == 0
    trace = json.loads((out_dir / "trace.json").read_text())
    assert trace["config"]["mode"] == "global_local"
    assert trace["config"]["tau"] == 0.6
    assert trace["config"]["bias_b"] == 0.6


def _bench_dataset(tmp_path, demo_image, items=3):
    lines = []
    for i in range(items):
        lines.append(
            json.dumps(
                {
                    "image": demo_image,
                    "question": f"Where is the target {i}?",
                    "options": ["a dog", "target occupies the region"],
                    "answer": "B",
                }
            )
        )
    path = tmp_path / "bench.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def test_bench_scripted_fixture(demo_image, tmp_path, capsys):
    dataset = _bench_dataset(tmp_path, demo_image)
    out_dir = tmp_path / "out"
    code = main(
        [
            "bench",
            "--dataset", dataset,
            "--backend", "scripted",
            "--target", "336,0,336,336",
            "--rho", "1.0",
            "--out", str(out_dir),
        ]
    )
    assert code == 0
    stdout = capsys.readouterr().out
    assert "zoom accuracy: 1.0000 (3/3)" in stdout
    report = json.loads((out_dir / "bench_report.json").read_text())
    assert report["summary"]["accuracy"] == 1.0
    assert len(report["items"]) == 3


def test_ask_reads_jpeg(tmp_path, capsys):
    path = tmp_path / "scene.jpg"
    gradient_image(672, 672).save(path, quality=90)
    code = main(_ask_args(str(path), tmp_path / "out"))
    assert code == 0
    assert "The target occupies the region" in capsys.readouterr().out


def test_bench_honors_jobs_flag(demo_image, tmp_path, capsys):
    dataset = _bench_dataset(tmp_path, demo_image)
    code = main(
        [
            "bench",
            "--dataset", dataset,
            "--backend", "scripted",
            "--target", "336,0,336,336",
            "--jobs", "3",
            "--out", str(tmp_path / "out"),
        ]
    )
    assert code == 0
    assert "zoom accuracy: 1.0000 (3/3)" in capsys.readouterr().out


def test_bench_report_carries_per_item_traces(demo_image, tmp_path):
    dataset = _bench_dataset(tmp_path, demo_image, items=2)
    out_dir = tmp_path / "out"
    code = main(
        [
            "bench",
            "--dataset", dataset,
            "--backend", "scripted",
            "--target", "336,0,336,336",
            "--out", str(out_dir),
        ]
    )
    assert code == 0
    report = json.loads((out_dir / "bench_report.json").read_text())
    for item in report["items"]:
        assert item["trace"]["version"] == 1
        assert item["trace"]["searches"]


def test_bench_baseline_prints_both_columns(demo_image, tmp_path, capsys):
    dataset = _bench_dataset(tmp_path, demo_image, items=2)
    code = main(
        [
            "bench",
            "--dataset", dataset,
            "--backend", "scripted",
            "--target", "336,0,336,336",
            "--baseline",
            "--out", str(tmp_path / "out"),
        ]
    )
    assert code == 0
    stdout = capsys.readouterr().out
    assert "zoom accuracy:" in stdout
    assert "baseline accuracy:" in stdout
    assert "delta:" in stdout


def test_bench_empty_dataset_exits_1(tmp_path, capsys):
    dataset = tmp_path / "empty.jsonl"
    dataset.write_text("")
    code = main(["bench", "--dataset", str(dataset), "--backend", "scripted"])
    assert code == 1


def test_bench_missing_dataset_exits_1(tmp_path):
    code = main(["bench", "--dataset", str(tmp_path / "absent.jsonl"), "--backend", "scripted"])
    assert code == 1


def test_simulate_deterministic_and_sweeps(tmp_path, capsys):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    args = [
        "simulate",
        "--trials", "50",
        "--seed", "7",
        "--sweep-tau", "0.6,0.8",
        "--csv", str(tmp_path / "sweep.csv"),
    ]
    assert main(args + ["--out", str(out_a)]) == 0
    assert main(args + ["--out", str(out_b)]) == 0
    assert (out_a / "sim_report.json").read_bytes() == (out_b / "sim_report.json").read_bytes()
    report = json.loads((out_a / "sim_report.json").read_text())
    assert len(report["rows"]) == 2
    assert [row["tau"] for row in report["rows"]] == [0.6, 0.8]
    csv_lines = (tmp_path / "sweep.csv").read_text().strip().splitlines()
    assert len(csv_lines) == 3
    stdout = capsys.readouterr().out
    assert stdout.count("success=") == 4  # two rows, printed twice


def test_simulate_invalid_target_size_exits_1(tmp_path, capsys):
    code = main(
        [
            "simulate",
            "--target-size", "400",
            "--min-node-size", "336",
            "--out", str(tmp_path / "out"),
        ]
    )
    assert code == 1
    assert "target_size" in capsys.readouterr().err


def test_help_enumerates_flags(capsys):
    for command, extra_flags in (
        ("ask", ["--image", "--question", "--annotate", "--backend", "--api-base", "--model"]),
        ("bench", ["--dataset", "--baseline", "--jobs"]),
        ("simulate", ["--trials", "--sweep-tau", "--sweep-bias", "--sweep-delta", "--csv"]),
    ):
        with pytest.raises(SystemExit) as excinfo:
            main([command, "--help"])
        assert excinfo.value.code == 0
        help_text = capsys.readouterr().out
        for flag in ["--mode", "--tau", "--tau2", "--tau-min", "--delta", "--bias",
                     "--seed", "--config", "--out", *extra_flags]:
            assert flag in help_text, (command, flag)


def test_module_entry_point_subprocess(demo_image, tmp_path):
    out_dir = tmp_path / "out"
    result = subprocess.run(
        [
            sys.executable, "-m", "zoomeye",
            *_ask_args(demo_image, out_dir),
        ],
        capture_output=True,
        text=True,
        timeout=60,
    )
    assert result.returncode == 0, result.stderr
    assert "The target occupies the region" in result.stdout
    assert (out_dir / "trace.json").exists()
