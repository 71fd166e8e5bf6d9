import json
import subprocess
import sys

import pytest

from stfusion import cli
from stfusion.core import TARGET_UNLABELED, Dataset, Observation, read_observations, write_observations
from stfusion.embedder import read_model
from stfusion.stpattern import read_histogram


def run(*argv):
    return cli.main([str(a) for a in argv])


def jsonl(path):
    return [json.loads(x) for x in path.read_text().splitlines()]


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    d = tmp_path_factory.mktemp("world")
    assert run("simulate", "--scenario", "source", "--persons", 40, "--seed", 1,
               "--split", "source-labeled", "--out", d / "src.obs") == 0
    assert run("simulate", "--scenario", "campus", "--persons", 50, "--seed", 2,
               "--split", "target-unlabeled", "--out", d / "tgt.obs") == 0
    assert run("simulate", "--scenario", "campus", "--persons", 40, "--seed", 3, "--out", d / "eval.obs",
               "--emit-truth", d / "truth.hist", "--dump-config", d / "sim.yaml") == 0
    assert run("train", "--source", d / "src.obs", "--epochs", 2, "--loss-log", d / "loss.jsonl",
               "--out", d / "m.ckpt") == 0
    assert run("learn-patterns", "--dataset", d / "tgt.obs", "--model", d / "m.ckpt", "--bin-width", 40,
               "--delta-min", -2000, "--delta-max", 2000, "--correct", 0.1, 0.05,
               "--emit-plot-data", d / "plot.csv", "--out", d / "pat") == 0
    return d


def test_simulate_outputs(world):
    ds = read_observations(world / "eval.obs")
    assert len(ds) == 40 * 3 and ds.split == "target-eval"
    assert read_histogram(world / "truth.hist").total == pytest.approx(1.0)
    # The dumped config regenerates the same file.
    assert run("simulate", "--config", world / "sim.yaml", "--out", world / "again.obs") == 0
    assert (world / "again.obs").read_bytes().split(b"\n", 1)[1] == (world / "eval.obs").read_bytes().split(b"\n", 1)[1]


def test_train_outputs(world):
    m = read_model(world / "m.ckpt")
    assert m.arch == "linear" and m.num_classes == 40
    assert len(jsonl(world / "loss.jsonl")) == 3


def test_learn_patterns_outputs(world):
    hists = [read_histogram(world / f"pat.{k}.hist") for k in ("pos", "neg", "marginal")]
    n = 150
    assert hists[2].total == n * (n - 1)
    assert hists[0].total + hists[1].total == hists[2].total
    assert read_histogram(world / "pat.corrected.hist").total == pytest.approx(hists[0].total)
    assert (world / "plot.csv").read_text().startswith("cam_i,cam_j,delta_lo,delta_hi,probability\n")


def test_learn_patterns_threads_identical(world, tmp_path):
    assert run("learn-patterns", "--dataset", world / "tgt.obs", "--model", world / "m.ckpt",
               "--bin-width", 40, "--delta-min", -2000, "--delta-max", 2000,
               "--threads", 3, "--out", tmp_path / "p") == 0
    for k in ("pos", "neg", "marginal"):
        assert (tmp_path / f"p.{k}.hist").read_bytes() == (world / f"pat.{k}.hist").read_bytes()


def test_rank(world, tmp_path):
    out = tmp_path / "r.jsonl"
    ds = read_observations(world / "tgt.obs")
    q = ds.obs_ids[0]
    assert run("rank", "--gallery", world / "tgt.obs", "--model", world / "m.ckpt", "--patterns", world / "pat",
               "--query", q, "--top", 5, "--out", out) == 0
    (rec,) = jsonl(out)
    assert rec["query"] == q and len(rec["gallery"]) == 5 and q not in rec["gallery"]
    assert rec["scores"] == sorted(rec["scores"], reverse=True)
    assert run("rank", "--gallery", world / "tgt.obs", "--model", world / "m.ckpt", "--patterns", world / "pat",
               "--all-queries", "--visual-only", "--out", out) == 0
    assert len(jsonl(out)) == len(ds)


def test_eval_and_sweep(world, tmp_path):
    out = tmp_path / "e.jsonl"
    assert run("eval", "--dataset", world / "eval.obs", "--model", world / "m.ckpt", "--patterns", world / "pat",
               "--max-rank", 5, "--error-sums", "--pair-budget", 3000, "--out", out) == 0
    recs = jsonl(out)
    kinds = [r["kind"] for r in recs]
    assert kinds.count("cmc") == 10 and kinds.count("error-sums") == 27 and kinds[-1] == "error-sums-summary"
    acc = [r["accuracy"] for r in recs if r.get("classifier") == "visual"]
    assert acc == sorted(acc)
    out = tmp_path / "s.jsonl"
    assert run("sweep", "--dataset", world / "eval.obs", "--model", world / "m.ckpt",
               "--patterns-from", world / "tgt.obs", "--out", out) == 0
    cells = [(r["alpha"], r["beta"]) for r in jsonl(out) if r["classifier"] == "fusion"]
    assert len(cells) == 8 and (0.5, 0.5) not in cells


def test_promote(world, tmp_path):
    args = ["promote", "--dataset", world / "tgt.obs", "--model", world / "m.ckpt", "--iters", 2,
            "--epochs", 1, "--eval", world / "eval.obs", "--bin-width", 40, "--delta-min", -2000,
            "--delta-max", 2000, "--history", tmp_path / "h.jsonl", "--checkpoint-dir", tmp_path / "ck",
            "--patterns-out", tmp_path / "fin", "--out", tmp_path / "final.ckpt"]
    assert run(*args) == 0
    hist = jsonl(tmp_path / "h.jsonl")
    assert [h["iteration"] for h in hist] == [1, 2]
    assert {"rank1_visual", "rank1_fusion", "loss_before", "loss_after"} <= set(hist[0])
    assert read_model(tmp_path / "ck" / "model_iter2.ckpt").equals(read_model(tmp_path / "final.ckpt"))
    assert (tmp_path / "fin.pos.hist").is_file()


def _poison(src, dst, labelled):
    ds = read_observations(src, split="target-eval") if labelled else None
    base = read_observations(src, split=TARGET_UNLABELED)
    obs = [Observation(o.obs_id, o.camera, o.frame, o.features, (10**9 + i) if labelled else None)
           for i, o in enumerate(base.observations)]
    write_observations(Dataset(obs, base.num_cameras, TARGET_UNLABELED), dst)
    return ds


def test_unlabeled_tripwire(world, tmp_path):
    # Subcommands on target-unlabeled data give identical output whether the
    # file carries garbage labels or none at all.
    _poison(world / "eval.obs", tmp_path / "poison.obs", True)
    _poison(world / "eval.obs", tmp_path / "clean.obs", False)
    outs = {}
    for tag in ("poison", "clean"):
        d = tmp_path / tag
        d.mkdir()
        data = tmp_path / f"{tag}.obs"
        assert run("learn-patterns", "--dataset", data, "--model", world / "m.ckpt", "--out", d / "p") == 0
        assert run("rank", "--gallery", data, "--model", world / "m.ckpt", "--patterns", d / "p",
                   "--all-queries", "--out", d / "r.jsonl") == 0
        assert run("promote", "--dataset", data, "--model", world / "m.ckpt", "--iters", 1, "--epochs", 1,
                   "--out", d / "f.ckpt") == 0
        outs[tag] = [(d / n).read_bytes() for n in ("p.pos.hist", "p.neg.hist", "r.jsonl", "f.ckpt")]
    assert outs["poison"] == outs["clean"]


def test_exit_codes(world, tmp_path, monkeypatch, capsys):
    # 1: input / configuration problems
    assert run("train", "--source", tmp_path / "missing.obs", "--out", tmp_path / "x") == 1
    (tmp_path / "bad.obs").write_text("garbage\n")
    assert run("train", "--source", tmp_path / "bad.obs", "--out", tmp_path / "x") == 1
    assert run("learn-patterns", "--dataset", world / "tgt.obs", "--model", world / "m.ckpt",
               "--threads", 0, "--out", tmp_path / "p") == 1
    assert run("pipeline", "--set", "fusion.alpha=0.6", "--set", "fusion.beta=0.5",
               "--set", "scenarios.target={name: campus, persons: 5}") == 1
    assert run("pipeline", "--set", "nonsense=1") == 1
    assert run("rank", "--gallery", world / "tgt.obs", "--model", world / "m.ckpt", "--patterns",
               tmp_path / "nope", "--all-queries") == 1
    # 2: numeric / domain problems
    assert run("rank", "--gallery", world / "tgt.obs", "--model", world / "m.ckpt", "--patterns", world / "pat",
               "--alpha", 0.6, "--beta", 0.5, "--all-queries") == 2
    assert run("learn-patterns", "--dataset", world / "tgt.obs", "--model", world / "m.ckpt",
               "--correct", 0.6, 0.5, "--out", tmp_path / "p") == 2
    # 3: internal failures
    def boom(*a, **k):
        raise RuntimeError("broken invariant")

    monkeypatch.setattr(cli, "count_patterns", boom)
    assert run("learn-patterns", "--dataset", world / "tgt.obs", "--model", world / "m.ckpt",
               "--out", tmp_path / "p") == 3
    assert "internal error" in capsys.readouterr().err


PIPE = ["--set", "scenarios.source={name: source, persons: 40}",
        "--set", "scenarios.target={name: promotion, persons: 60}",
        "--set", "scenarios.eval={name: promotion, persons: 60}",
        "--set", "train.epochs=2", "--set", "loop.max_iterations=2", "--set", "loop.train.epochs=2"]


def _report(d):
    r = json.loads((d / "report.json").read_text())
    r.pop("timings")
    return r


def test_pipeline_deterministic(tmp_path):
    out = tmp_path / "run"
    assert run("pipeline", *PIPE, "--out-dir", out, "--seed", 7) == 0
    first = _report(out)
    files = {p.name: p.read_bytes() for p in out.iterdir() if p.name != "report.json"}
    assert run("pipeline", *PIPE, "--out-dir", out, "--seed", 7) == 0
    assert _report(out) == first
    assert {p.name: p.read_bytes() for p in out.iterdir() if p.name != "report.json"} == files
    assert set(first["stages"]) == {"train", "patterns", "fusion", "promote"}
    assert first["stages"]["promote"]["iterations"] == 2
    assert {"model_step1.ckpt", "patterns_step2.pos.hist", "history.jsonl", "model_final.ckpt",
            "model_iter1.ckpt", "patterns_final.pos.hist"} <= set(files)
    assert run("pipeline", *PIPE, "--out-dir", out, "--seed", 8) == 0
    assert _report(out) != first


def test_pipeline_steps_one_to_three(tmp_path):
    out = tmp_path / "run"
    assert run("pipeline", *PIPE, "--set", "loop.max_iterations=0", "--out-dir", out) == 0
    rep = _report(out)
    assert set(rep["stages"]) == {"train", "patterns", "fusion"}
    assert not (out / "history.jsonl").exists()


def test_pipeline_resume(tmp_path):
    out = tmp_path / "run"
    assert run("pipeline", *PIPE, "--set", "loop.max_iterations=0", "--out-dir", out) == 0
    ck = (out / "model_step1.ckpt").read_bytes()
    assert run("pipeline", *PIPE, "--set", "resume=true", "--out-dir", out) == 0
    rep = _report(out)
    assert rep["stages"]["train"]["resumed"] is True
    assert (out / "model_step1.ckpt").read_bytes() == ck
    assert rep["stages"]["promote"]["iterations"] == 2


def test_pipeline_stage_failure_keeps_artifacts(tmp_path, capsys):
    out = tmp_path / "run"
    # n larger than any gallery: the promotion stage cannot sample triplets.
    assert run("pipeline", *PIPE, "--set", "loop.n=1000", "--out-dir", out) == 2
    assert "promote" in capsys.readouterr().err
    assert (out / "model_step1.ckpt").is_file() and (out / "report.json").is_file()


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "stfusion.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for name in ("simulate", "train", "learn-patterns", "rank", "promote", "eval", "sweep", "pipeline"):
        assert name in r.stdout
