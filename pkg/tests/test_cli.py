import hashlib
import json

import pytest

from perspective_retrieval import cli
from perspective_retrieval.backbone import gen_corpus, load_features
from perspective_retrieval.trainer import load_checkpoint

FAST = ["--epochs", "2", "--embed-dim", "16", "--bottleneck", "2", "--batch-size", "8"]


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    code = cli.run(["gen-data", "--classes", "4", "--images", "20", "--k", "2", "--dim", "16",
                    "--tokens", "4", "--noise", "0.5", "--seed", "1", "--out", str(out)])  # fmt: skip
    assert code == 0
    return out / "corpus.mpsf"


@pytest.fixture(scope="module")
def train_run(tmp_path_factory, small_data):
    out = tmp_path_factory.mktemp("train")
    assert cli.run(["train", "--data", str(small_data), "--out", str(out), "--seed", "2", *FAST]) == 0
    return out


def test_gen_data_is_reproducible(tmp_path):
    args = ["gen-data", "--classes", "4", "--images", "80", "--k", "4", "--seed", "1"]
    assert cli.run(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.run(args + ["--out", str(tmp_path / "b")]) == 0
    assert sha(tmp_path / "a" / "corpus.mpsf") == sha(tmp_path / "b" / "corpus.mpsf")
    bank = load_features(tmp_path / "a" / "corpus.mpsf")
    assert bank["sub_perspectives"].shape[:2] == (80, 4)


def test_manifest_records_hashes_and_config(train_run):
    m = json.loads((train_run / "manifest.json").read_text())
    assert m["command"] == "train" and m["seed"] == 2
    assert m["config"]["epochs"] == 2 and m["config"]["seed"] == 2
    for name, digest in m["artifacts"].items():
        assert sha(train_run / name) == digest
    assert set(m["artifacts"]) == {"checkpoint.mpsf", "history.csv", "val_report.csv", "val_report.md"}


def test_manifest_alone_reproduces_the_run(train_run, tmp_path):
    m = json.loads((train_run / "manifest.json").read_text())
    argv = list(m["argv"])
    argv[argv.index("--out") + 1] = str(tmp_path)
    assert cli.run(argv) == 0
    for name in ("checkpoint.mpsf", "history.csv", "val_report.csv"):
        assert sha(tmp_path / name) == m["artifacts"][name]


def test_eval_matches_recorded_history(train_run, small_data, tmp_path):
    assert cli.run(["eval", str(train_run / "checkpoint.mpsf"), "--data", str(small_data), "--out", str(tmp_path)]) == 0
    ck = load_checkpoint(train_run / "checkpoint.mpsf")
    text = (tmp_path / "eval_report.csv").read_text()
    recorded = [f"{v:.2f}" for v in ck.final_val_report().values()]
    assert text.splitlines()[1].endswith(",".join(recorded))


def test_config_file_precedence(tmp_path, small_data, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 1, "lr": 0.01, "seed": 4, "embed_dim": 16, "bottleneck": 2}))
    monkeypatch.setenv("MPS_SEED", "9")
    out = tmp_path / "run"
    assert cli.run(["train", "--config", str(cfg), "--lr", "0.02", "--data", str(small_data), "--out", str(out)]) == 0
    m = json.loads((out / "manifest.json").read_text())
    assert m["config"]["lr"] == 0.02 and m["config"]["epochs"] == 1 and m["seed"] == 4


def test_seed_falls_back_to_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MPS_SEED", "7")
    assert cli.run(["gen-data", "--images", "8", "--classes", "2", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["seed"] == 7
    expected = gen_corpus(7, 2, 8, 4, 32, 8, 1.0)
    assert (load_features(tmp_path / "corpus.mpsf")["images"] == expected.images).all()


def test_usage_errors_exit_1(tmp_path, capsys):
    assert cli.run([]) == 1
    assert cli.run(["frobnicate"]) == 1
    assert cli.run(["train", "--no-such-flag"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text('{"epochs": 1, "learning_rate": 3}')
    assert cli.run(["train", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert "learning_rate" in capsys.readouterr().err
    assert cli.run(["train", "--lr", "-1", "--out", str(tmp_path)]) == 1
    assert cli.run(["eval", str(tmp_path / "missing.mpsf"), "--out", str(tmp_path)]) == 2


def test_corrupt_input_file_exit_1(tmp_path):
    p = tmp_path / "junk.mpsf"
    p.write_bytes(b"JUNKJUNKJUNK")
    assert cli.run(["train", "--data", str(p), "--out", str(tmp_path)]) == 1


def test_gradcheck_command(tmp_path, capsys):
    code = cli.run(["gradcheck", "--seed", "7", "--n-seeds", "2", "--out", str(tmp_path)])
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 10 and lines[0].startswith("g2a_forward")
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert code == (0 if all(v < 1e-4 for v in m["worst_relative_error"].values()) else 2)


def test_ablate_losses_table(tmp_path, small_data):
    out = tmp_path / "abl"
    args = ["ablate", "--grid", "losses", "--data", str(small_data), "--split", "val", "--out", str(out)]
    assert cli.run(args + ["--epochs", "1", "--embed-dim", "16", "--bottleneck", "2", "--jobs", "2"]) == 0
    md = (out / "ablation_losses.md").read_text().splitlines()
    assert md[0].startswith("| L_Base | L_MPC | L_MPT |")
    body = md[2:]
    assert [r.split(" | ")[1:3] for r in body] == [["×", "×"], ["✓", "×"], ["×", "✓"], ["✓", "✓"]]


def test_report_renders_markdown_and_svg(train_run, tmp_path):
    assert cli.run(["report", str(train_run / "history.csv"), str(train_run / "val_report.csv"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "history.md").read_text().startswith("| epoch | loss_total |")
    svg = (tmp_path / "history_loss.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<polyline") == 5
    assert (tmp_path / "history_recall.svg").read_text().count("<polyline") == 7
    assert (tmp_path / "val_report.md").exists()


def test_svg_handles_constant_series():
    svg = cli.svg_line_plot({"flat": [1.0, 1.0]}, [0, 1], "a < b")
    assert "a &lt; b" in svg and "nan" not in svg
