"""End-to-end run: supervised pre-training, pattern learning, fusion and the
promotion loop, with every intermediate artifact persisted."""

from __future__ import annotations

import copy
import json
import logging
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .core import (
    SOURCE_LABELED,
    TARGET_EVAL,
    TARGET_UNLABELED,
    ConfigError,
    StFusionError,
    read_observations,
    write_observations,
)
from .embedder import TrainConfig, init_model, read_model, train_supervised, write_model
from .evaluation import fusion_cmc, visual_cmc
from .fusion import FusionParams
from .rankopt import LoopConfig, mutual_promote
from .scenarios import get_scenario
from .simulator import simulate
from .stpattern import BinSpec, count_patterns, read_histogram, write_histogram, write_plot_data

log = logging.getLogger(__name__)

REPORT_VERSION = 1

DEFAULTS: dict = {
    "seed": 0,
    "threads": 1,
    "output_dir": "run",
    "resume": False,
    "data": {"source": None, "target": None, "eval": None},
    # Optional: datasets drawn from named simulator worlds when no path is given.
    "scenarios": {"source": None, "target": None, "eval": None},
    "model": {
        "checkpoint": None,
        "arch": "linear",
        "embed_dim": None,
        "hidden_dim": 0,
        "tau": 0.6,
        "init": "identity",
    },
    "train": {"lr": 0.05, "epochs": 10, "batch_size": 64, "pairs_per_epoch": 2048},
    "bins": {"width": 40, "delta_min": -2000, "delta_max": 2000, "window": 0, "eps": 1.0},
    "patterns": {"budget": None},
    "fusion": {"alpha": 0.0, "beta": 0.0},
    "loop": {
        "n": 3,
        "triplets_per_query": 2,
        "max_iterations": 5,
        "delta": 1e-4,
        "orientation": "verbatim",
        "queries_per_iteration": None,
        "train": {"lr": 0.1, "epochs": 5, "batch_size": 64},
    },
    "eval": {"max_rank": 20},
}


def substream_seed(master: int, name: str) -> int:
    """Seed for the named sub-stream of a master seed; stable across platforms."""
    ss = np.random.SeedSequence([int(master), zlib.crc32(name.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise ConfigError(f"unknown config key {where + k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def parse_override(item: str) -> tuple:
    """``a.b.c=value`` with the value parsed as YAML."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    try:
        value = yaml.safe_load(raw) if raw != "" else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {item!r}: {exc}") from None
    return key.strip(), value


def _nest(key: str, value) -> dict:
    out: dict = {}
    cur = out
    parts = key.split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


@dataclass
class PipelineConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[list] = None) -> "PipelineConfig":
        data: dict = {}
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    data = yaml.safe_load(fh) or {}
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: {exc}") from None
            if not isinstance(data, dict):
                raise ConfigError(f"{path}: expected a mapping")
        raw = _merge(DEFAULTS, data)
        for item in overrides or []:
            raw = _merge(raw, _nest(*parse_override(item)))
        cfg = cls(raw)
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output_dir"])

    def bins(self) -> BinSpec:
        try:
            return BinSpec(**self.raw["bins"])
        except TypeError as exc:
            raise ConfigError(f"bins: {exc}") from None

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=substream_seed(self.raw["seed"], "train"), **self.raw["train"])

    def loop_config(self) -> LoopConfig:
        loop = dict(self.raw["loop"])
        inner = TrainConfig(seed=substream_seed(self.raw["seed"], "promote.train"), **loop.pop("train"))
        return LoopConfig(
            train=inner, seed=substream_seed(self.raw["seed"], "promote"),
            pair_budget=self.raw["patterns"]["budget"], **loop,
        )

    def validate(self) -> None:
        a, b = self.raw["fusion"]["alpha"], self.raw["fusion"]["beta"]
        if not (0 <= a < 1 and 0 <= b < 1 and a + b < 1):
            raise ConfigError(f"fusion needs 0 <= alpha, beta and alpha + beta < 1, got {a}, {b}")
        if int(self.raw["threads"]) < 1:
            raise ConfigError("threads must be >= 1")
        for role in ("target",):
            if not self.raw["data"][role] and not self.raw["scenarios"][role]:
                raise ConfigError(f"no {role} dataset: set data.{role} or scenarios.{role}")
        for role, p in self.raw["data"].items():
            if p and not Path(p).is_file():
                raise ConfigError(f"data.{role}: {p} does not exist")
        ck = self.raw["model"]["checkpoint"]
        if ck and not Path(ck).is_file():
            raise ConfigError(f"model.checkpoint: {ck} does not exist")
        # Surface malformed sections before any stage runs.
        self.bins()
        try:
            self.train_config()
            self.loop_config()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


class StageError(StFusionError):
    """A pipeline stage failed; carries the stage name and the cause's exit code."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.exit_code = getattr(cause, "exit_code", 3)


ROLE_SPLITS = {"source": SOURCE_LABELED, "target": TARGET_UNLABELED, "eval": TARGET_EVAL}


def _dataset(cfg: PipelineConfig, role: str, out: Path, artifacts: dict):
    path = cfg["data"][role]
    split = ROLE_SPLITS[role]
    if path:
        return read_observations(path, split=split)
    spec = cfg["scenarios"][role]
    if not spec:
        return None
    spec = dict(spec)
    name = spec.pop("name")
    seed = spec.pop("seed", substream_seed(cfg["seed"], f"simulate.{role}"))
    sc = get_scenario(name, seed, **spec)
    ds = simulate(sc.sim, split)
    dest = out / f"{role}.obs"
    write_observations(ds, dest)
    artifacts[f"{role}_dataset"] = dest.name
    return ds


def _round(x, nd=10):
    return None if x is None else float(round(float(x), nd))


def _cmc_dict(curve, ranks=(1, 5, 10, 20)) -> dict:
    return {f"rank{k}": _round(curve.rank(k)) for k in ranks}


class _Timer:
    def __init__(self, timings: dict, name: str):
        self.timings, self.name = timings, name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.timings[self.name] = round(time.perf_counter() - self.t0, 3)
        return False


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Run the four stages and return the report (also written to ``report.json``).

    Timings are kept under their own key so reports of identical runs match
    exactly once that key is dropped.
    """
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    threads = int(cfg["threads"])
    resume = bool(cfg["resume"])
    timings: dict = {}
    artifacts: dict = {}
    report: dict = {"version": REPORT_VERSION, "config": cfg.raw, "stages": {}, "artifacts": artifacts}

    def stage(name):
        return _Timer(timings, name)

    def run(name, fn):
        with stage(name):
            try:
                return fn()
            except StageError:
                raise
            except (StFusionError, OSError, ValueError) as exc:
                _write_report(out, report, timings)
                raise StageError(name, exc) from exc

    data = run("load", lambda: {r: _dataset(cfg, r, out, artifacts) for r in ("source", "target", "eval")})
    source, target, evalset = data["source"], data["target"], data["eval"]
    bins = cfg.bins()

    # (1) supervised pre-training
    def step1():
        ck = out / "model_step1.ckpt"
        if resume and ck.is_file():
            return read_model(ck), None
        mc = cfg["model"]
        dim = (source or target).dim
        if mc["checkpoint"]:
            model = read_model(mc["checkpoint"])
        else:
            model = init_model(mc["arch"], dim, mc["embed_dim"], mc["hidden_dim"], tau=mc["tau"],
                               seed=substream_seed(cfg["seed"], "init"), init=mc["init"])
        losses: list = []
        if source is not None:
            model = train_supervised(model, source, cfg.train_config(), log=losses)
        write_model(model, ck)
        return model, losses

    model, losses = run("train", step1)
    artifacts["model_step1"] = "model_step1.ckpt"
    s1: dict = {"resumed": losses is None}
    if losses is not None:
        s1["loss"] = [_round(v) for v in losses]
    if evalset is not None:
        s1["cmc_visual"] = _cmc_dict(visual_cmc(model, evalset, cfg["eval"]["max_rank"]))
    report["stages"]["train"] = s1

    # (2) spatio-temporal patterns on the unlabeled target
    def step2():
        names = [out / f"patterns_step2.{k}.hist" for k in ("pos", "neg", "marginal")]
        if resume and all(p.is_file() for p in names):
            return tuple(read_histogram(p) for p in names)
        hists = count_patterns(model, target, bins, cfg["patterns"]["budget"],
                               substream_seed(cfg["seed"], "patterns"), workers=threads)
        for h, p in zip(hists, names):
            write_histogram(h, p)
        write_plot_data(hists[0], out / "patterns_step2.pos.csv")
        return hists

    hp, hn, hm = run("patterns", step2)
    artifacts["patterns_step2"] = "patterns_step2.{pos,neg,marginal}.hist"
    report["stages"]["patterns"] = {"judged_same_pairs": _round(hp.total), "pairs": _round(hm.total)}

    # (3) fusion
    def step3():
        fp = FusionParams(cfg["fusion"]["alpha"], cfg["fusion"]["beta"], hp, hn, hm, model)
        s3 = {"alpha": fp.alpha, "beta": fp.beta}
        if evalset is not None:
            s3["cmc_fusion"] = _cmc_dict(fusion_cmc(fp, evalset, cfg["eval"]["max_rank"]))
        return fp, s3

    fparams, s3 = run("fusion", step3)
    report["stages"]["fusion"] = s3

    # (4) learning-to-rank promotion
    loop = cfg.loop_config()
    history_path = out / "history.jsonl"

    def hook(m, fp):
        if evalset is None:
            return {}
        return {"rank1_visual": _round(visual_cmc(m, evalset).rank(1)),
                "rank1_fusion": _round(fusion_cmc(fp, evalset).rank(1))}

    def on_iteration(rec, m, fp):
        write_model(m, out / f"model_iter{rec.iteration}.ckpt")
        with history_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(_jsonable(rec.to_dict()), sort_keys=True) + "\n")

    def step4():
        history_path.write_text("", encoding="utf-8")
        return mutual_promote(model, target, bins, fparams.alpha, fparams.beta, loop,
                              eval_hook=hook, workers=threads, on_iteration=on_iteration)

    if loop.max_iterations > 0:
        final_model, final_params, history = run("promote", step4)
        write_model(final_model, out / "model_final.ckpt")
        for h, k in zip((final_params.hist_pos, final_params.hist_neg, final_params.hist_marginal),
                        ("pos", "neg", "marginal")):
            write_histogram(h, out / f"patterns_final.{k}.hist")
        artifacts.update(history="history.jsonl", model_final="model_final.ckpt",
                         patterns_final="patterns_final.{pos,neg,marginal}.hist")
        s4: dict = {"iterations": len(history), "history": [_jsonable(r.to_dict()) for r in history]}
        if evalset is not None:
            s4["cmc_visual"] = _cmc_dict(visual_cmc(final_model, evalset, cfg["eval"]["max_rank"]))
            s4["cmc_fusion"] = _cmc_dict(fusion_cmc(final_params, evalset, cfg["eval"]["max_rank"]))
        report["stages"]["promote"] = s4

    _write_report(out, report, timings)
    report["timings"] = timings
    return report


def _jsonable(d: dict) -> dict:
    return {k: (_round(v) if isinstance(v, (float, np.floating)) else v) for k, v in d.items()}


def _write_report(out: Path, report: dict, timings: dict) -> None:
    body = dict(report)
    body["timings"] = timings
    with (out / "report.json").open("w", encoding="utf-8") as fh:
        json.dump(body, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o: Any):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serialisable: {type(o).__name__}")
