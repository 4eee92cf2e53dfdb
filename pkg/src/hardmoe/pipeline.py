"""Stage runner: each stage reads artifacts from the work directory, writes
its own, and leaves a JSON record with the content hashes of what it read
and wrote. A stage whose record still matches its inputs, outputs, seed and
config is skipped unless forced."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .analysis import (ClusterStats, sparsity_accuracy_table, write_plot_data,
                       write_sparsity_csv, write_tag_hist_csv, write_utilization_csv)
from .config import PipelineConfig
from .data import (TagDictionary, generate_single_label_task, generate_synthetic, load_dataset,
                   save_dataset)
from .errors import ConfigError, DependencyError
from .evaluation import EvalReport, Ensemble, ProbeConfig, evaluate, oracle_eval, transfer_probe
from .gater import build_gater, assign_dataset, load_gater, load_manifest, save_gater, save_manifest
from .moe import (INDEPENDENT, SHARED, load_bundle, save_bundle, train_base, train_ensemble,
                  train_independent, train_shared_decoder)
from .neuralcore import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train-trunk", "fit-gater", "train-experts", "train-shared",
          "train-ensemble", "eval", "oracle-eval", "transfer", "analyze")


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


class Workspace:
    """Artifact paths for one run."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.root = Path(cfg.workdir)

    def data(self, split: str) -> Path:
        given = getattr(self.cfg.dataset, split)
        return Path(given) if given else self.root / "data" / f"{split}.hmoe"

    @property
    def tags(self) -> Path:
        return self.root / "data" / "tags.txt"

    @property
    def trunk(self) -> Path:
        return self.root / "trunk" / "trunk.ckpt"

    @property
    def gater(self) -> Path:
        return self.root / "gater" / "gater.bin"

    @property
    def manifest(self) -> Path:
        return self.root / "gater" / "manifest.bin"

    def bundle_dir(self, mode: str) -> Path:
        return self.root / ("shared" if mode == SHARED else "experts")

    def bundle_files(self, mode: str) -> list[Path]:
        d = self.bundle_dir(mode)
        files = [d / "bundle.json", d / "gater.bin", d / "manifest.bin", d / "trunk.ckpt"]
        files += [d / f"expert_{i}.ckpt" for i in range(self.cfg.K)]
        if mode == SHARED:
            files.append(d / "decoder.ckpt")
        return files

    def members(self) -> list[Path]:
        return [self.root / "ensemble" / f"member_{i}.ckpt" for i in range(self.cfg.n_ensemble or 0)]

    def report(self, name: str) -> Path:
        return self.root / "reports" / name

    def analysis(self, name: str) -> Path:
        return self.root / "analysis" / name

    def record(self, stage: str) -> Path:
        return self.root / "records" / f"{stage}.json"


@dataclass
class StageContext:
    cfg: PipelineConfig
    ws: Workspace
    seed: int
    workers: int

    def load(self, split: str):
        return load_dataset(self.ws.data(split), split=split)

    def load_optional(self, split: str):
        p = self.ws.data(split)
        return load_dataset(p, split=split) if p.exists() else None


@dataclass
class Stage:
    name: str
    inputs: Callable[[Workspace], list]
    outputs: Callable[[Workspace], list]
    run: Callable[[StageContext], dict]
    sections: tuple = ()
    seed_stage: str | None = None     # borrow another stage's seed (shared eval stream)
    optional_inputs: Callable[[Workspace], list] = lambda ws: []


# ---------------------------------------------------------------------------
# stage bodies

def _has_transfer(cfg: PipelineConfig) -> bool:
    return bool(cfg.synthetic and cfg.synthetic.transfer) or bool(
        cfg.dataset.transfer_train and cfg.dataset.transfer_test)


def _gen_data_outputs(ws: Workspace) -> list:
    cfg = ws.cfg
    if cfg.synthetic is None:
        return []
    out = [ws.data("train"), ws.data("valid"), ws.data("test"), ws.tags]
    if cfg.synthetic.transfer is not None:
        out += [ws.data("transfer_train"), ws.data("transfer_test")]
    return out


def _gen_data_inputs(ws: Workspace) -> list:
    if ws.cfg.synthetic is not None:
        return []
    return [ws.data("train"), ws.data("test")]


def _gen_data(ctx: StageContext) -> dict:
    cfg, ws = ctx.cfg, ctx.ws
    if cfg.synthetic is None:
        # external data: validate what is there
        sizes = {s: ctx.load(s).n_examples for s in ("train", "test")}
        return {"external": True, "sizes": sizes}
    syn = cfg.synthetic
    spec = syn.spec()
    ws.data("train").parent.mkdir(parents=True, exist_ok=True)
    per_mode = {"train": syn.examples_per_mode, "valid": syn.valid_per_mode, "test": syn.test_per_mode}
    sizes = {}
    for split, n in per_mode.items():
        ds = generate_synthetic(spec, ctx.seed, split, n)
        save_dataset(ds, ws.data(split))
        sizes[split] = ds.n_examples
    TagDictionary.synthetic(spec.n_tags).save(ws.tags)
    if syn.transfer is not None:
        t = syn.transfer
        for split, n in (("train", t.train_per_mode), ("test", t.test_per_mode)):
            ds = generate_single_label_task(spec, ctx.seed, t.task_seed, t.classes_per_mode,
                                            split=split, n_per_mode=n)
            save_dataset(ds, ws.data(f"transfer_{split}"))
            sizes[f"transfer_{split}"] = ds.n_examples
    return {"sizes": sizes}


def _train_trunk(ctx: StageContext) -> dict:
    train_ds, valid_ds = ctx.load("train"), ctx.load_optional("valid")
    model, tlog = train_base(ctx.cfg.trunk.layer_dims, train_ds, ctx.cfg.trunk_sgd(), ctx.seed, valid_ds)
    ctx.ws.trunk.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, ctx.ws.trunk)
    _dump_json(tlog.to_dict(), ctx.ws.trunk.parent / "trainlog.json")
    return {"best_epoch": tlog.best_epoch, "best_valid_loss": tlog.best_valid_loss}


def _fit_gater(ctx: StageContext) -> dict:
    cfg, ws = ctx.cfg, ctx.ws
    trunk = load_checkpoint(ws.trunk)
    train_ds = ctx.load("train")
    gater, km = build_gater(trunk, train_ds, K=cfg.K, pca_dim=cfg.pca_dim, seed=ctx.seed,
                            pca_subsample=cfg.pca_subsample, n_init=cfg.kmeans_restarts)
    ws.gater.parent.mkdir(parents=True, exist_ok=True)
    save_gater(gater, ws.gater)
    # route with the gater as stored on disk so later stages agree exactly
    manifest = assign_dataset(load_gater(ws.gater), trunk, train_ds)
    save_manifest(manifest, ws.manifest)
    summary = {"K": cfg.K, "objective": km.objective, "history": km.history,
               "n_iter": km.n_iter, "converged": km.converged, "n_reseeded": km.n_reseeded,
               "sizes": manifest.counts.tolist()}
    _dump_json(summary, ws.gater.parent / "kmeans.json")
    return {"objective": km.objective, "n_iter": km.n_iter}


def _logs(logs) -> list:
    return [t.to_dict() for t in logs]


def _train_experts(ctx: StageContext) -> dict:
    cfg, ws = ctx.cfg, ctx.ws
    bundle = train_independent(load_checkpoint(ws.trunk), load_gater(ws.gater), ctx.load("train"),
                               cfg.expert_sgd(), ctx.seed, ctx.load_optional("valid"),
                               expert_dims=cfg.experts.layer_dims, workers=ctx.workers)
    d = ws.bundle_dir(INDEPENDENT)
    save_bundle(bundle, d)
    _dump_json(_logs(bundle.logs), d / "trainlogs.json")
    return {"empty_shards": bundle.empty_shards}


def _train_shared(ctx: StageContext) -> dict:
    cfg, ws = ctx.cfg, ctx.ws
    dims = cfg.experts.layer_dims[:-1] if cfg.experts.layer_dims else None
    bundle = train_shared_decoder(load_checkpoint(ws.trunk), load_gater(ws.gater), ctx.load("train"),
                                  cfg.expert_sgd(), ctx.seed, ctx.load_optional("valid"),
                                  expert_dims=dims, workers=ctx.workers)
    d = ws.bundle_dir(SHARED)
    save_bundle(bundle, d)
    _dump_json(_logs(bundle.logs), d / "trainlogs.json")
    return {"empty_shards": bundle.empty_shards, "workers": ctx.workers}


def _train_ensemble(ctx: StageContext) -> dict:
    cfg, ws = ctx.cfg, ctx.ws
    if not cfg.n_ensemble:
        raise ConfigError("n_ensemble: train-ensemble needs n_ensemble >= 1")
    members = train_ensemble(cfg.trunk.layer_dims, ctx.load("train"), cfg.trunk_sgd(),
                             cfg.n_ensemble, ctx.seed, ctx.load_optional("valid"), ctx.workers)
    for m, path in zip(members, ws.members()):
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(m, path)
    return {"n_members": len(members)}


def _eval(ctx: StageContext) -> dict:
    cfg, ws = ctx.cfg, ctx.ws
    test_ds, train_ds = ctx.load("test"), ctx.load("train")
    models = {"trunk": load_checkpoint(ws.trunk), "moe": load_bundle(ws.bundle_dir(cfg.moe_mode))}
    if cfg.n_ensemble:
        models["ensemble"] = Ensemble([load_checkpoint(p) for p in ws.members()])
    ws.report("x").parent.mkdir(parents=True, exist_ok=True)
    summary = {}
    for name, model in models.items():
        desc = f"{name}:{cfg.moe_mode}:K={cfg.K}" if name == "moe" else name
        rep = evaluate(model, test_ds, train_ds, S=cfg.eval.S, seed=ctx.seed, ms=cfg.eval.ms,
                       descriptor=desc)
        rep.save_json(ws.report(f"eval_{name}.json"))
        rep.save_per_tag_csv(ws.report(f"per_tag_{name}.csv"))
        summary[name] = {"test_loss": rep.test_loss, "q_at": {str(k): v for k, v in rep.q_at.items()}}
    return summary


def _oracle_eval(ctx: StageContext) -> dict:
    cfg, ws = ctx.cfg, ctx.ws
    res = oracle_eval(load_bundle(ws.bundle_dir(cfg.moe_mode)), ctx.load("test"), ms=cfg.eval.ms,
                      S=cfg.eval.S, seed=ctx.seed)
    out = {"q_at": {str(k): v for k, v in res.q_at.items()}, "test_loss": res.test_loss,
           "gated_q_at": {str(k): v for k, v in res.gated_q_at.items()},
           "gated_test_loss": res.gated_test_loss, "S": res.S}
    ws.report("x").parent.mkdir(parents=True, exist_ok=True)
    _dump_json(out, ws.report("oracle.json"))
    return {"q_at": out["q_at"], "gated_q_at": out["gated_q_at"]}


def _transfer(ctx: StageContext) -> dict:
    cfg, ws = ctx.cfg, ctx.ws
    if not _has_transfer(cfg):
        raise ConfigError("synthetic.transfer or dataset.transfer_train/transfer_test is required "
                          "for the transfer stage")
    tr = load_dataset(ws.data("transfer_train"), split="train")
    te = load_dataset(ws.data("transfer_test"), split="test")
    pcfg = ProbeConfig(l2=cfg.probe_l2)
    out = {"base": transfer_probe(load_checkpoint(ws.trunk), tr, te, pcfg),
           "shared": transfer_probe(load_bundle(ws.bundle_dir(SHARED)), tr, te, pcfg)}
    ws.report("x").parent.mkdir(parents=True, exist_ok=True)
    _dump_json(out, ws.report("transfer.json"))
    return out


def _analyze(ctx: StageContext) -> dict:
    cfg, ws = ctx.cfg, ctx.ws
    stats = ClusterStats.compute(ctx.load("train"), load_manifest(ws.manifest, cfg.K))
    table = sparsity_accuracy_table(stats, EvalReport.load_json(ws.report("eval_moe.json")))
    ws.analysis("x").parent.mkdir(parents=True, exist_ok=True)
    write_utilization_csv(stats.sizes, ws.analysis("utilization.csv"))
    write_tag_hist_csv(stats.tag_histograms, ws.analysis("tag_hist.csv"))
    write_sparsity_csv(table, ws.analysis("sparsity.csv"))
    write_plot_data(table, ws.analysis("sparsity.dat"))
    summary = {"spearman": table.spearman, "n_tags": len(table.rows), "excluded": table.excluded}
    _dump_json(summary, ws.analysis("summary.json"))
    return summary


def _data_inputs(*splits):
    return lambda ws: [ws.data(s) for s in splits]


STAGE_TABLE = {
    "gen-data": Stage("gen-data", _gen_data_inputs, _gen_data_outputs, _gen_data,
                      ("dataset", "synthetic")),
    "train-trunk": Stage("train-trunk", _data_inputs("train"),
                         lambda ws: [ws.trunk, ws.trunk.parent / "trainlog.json"], _train_trunk,
                         ("trunk",), optional_inputs=_data_inputs("valid")),
    "fit-gater": Stage("fit-gater", lambda ws: [ws.trunk, ws.data("train")],
                       lambda ws: [ws.gater, ws.manifest, ws.gater.parent / "kmeans.json"],
                       _fit_gater, ("K", "pca_dim", "pca_subsample", "kmeans_restarts")),
    "train-experts": Stage("train-experts", lambda ws: [ws.trunk, ws.gater, ws.data("train")],
                           lambda ws: ws.bundle_files(INDEPENDENT)
                           + [ws.bundle_dir(INDEPENDENT) / "trainlogs.json"],
                           _train_experts, ("experts",), optional_inputs=_data_inputs("valid")),
    "train-shared": Stage("train-shared", lambda ws: [ws.trunk, ws.gater, ws.data("train")],
                          lambda ws: ws.bundle_files(SHARED)
                          + [ws.bundle_dir(SHARED) / "trainlogs.json"],
                          _train_shared, ("experts",), optional_inputs=_data_inputs("valid")),
    "train-ensemble": Stage("train-ensemble", _data_inputs("train"), Workspace.members,
                            _train_ensemble, ("trunk", "n_ensemble"),
                            optional_inputs=_data_inputs("valid")),
    "eval": Stage("eval",
                  lambda ws: [ws.trunk, ws.data("test"), ws.data("train")]
                  + ws.bundle_files(ws.cfg.moe_mode) + ws.members(),
                  lambda ws: [ws.report(f"{kind}_{n}.{ext}")
                              for n in ["trunk", "moe"] + (["ensemble"] if ws.cfg.n_ensemble else [])
                              for kind, ext in (("eval", "json"), ("per_tag", "csv"))],
                  _eval, ("eval", "mode", "n_ensemble")),
    "oracle-eval": Stage("oracle-eval",
                         lambda ws: [ws.data("test")] + ws.bundle_files(ws.cfg.moe_mode),
                         lambda ws: [ws.report("oracle.json")], _oracle_eval, ("eval", "mode"),
                         seed_stage="eval"),
    "transfer": Stage("transfer",
                      lambda ws: [ws.trunk, ws.data("transfer_train"), ws.data("transfer_test")]
                      + ws.bundle_files(SHARED),
                      lambda ws: [ws.report("transfer.json")], _transfer, ("probe_l2",)),
    "analyze": Stage("analyze", lambda ws: [ws.data("train"), ws.manifest, ws.report("eval_moe.json")],
                     lambda ws: [ws.analysis(n) for n in ("utilization.csv", "tag_hist.csv",
                                                         "sparsity.csv", "sparsity.dat",
                                                         "summary.json")],
                     _analyze, ("K",)),
}


def default_sequence(cfg: PipelineConfig) -> list[str]:
    """Stages that make up a full run of ``cfg``."""
    seq = ["gen-data", "train-trunk", "fit-gater",
           "train-shared" if cfg.moe_mode == SHARED else "train-experts"]
    if cfg.n_ensemble:
        seq.append("train-ensemble")
    seq += ["eval", "oracle-eval"]
    if cfg.moe_mode == SHARED and _has_transfer(cfg):
        seq.append("transfer")
    seq.append("analyze")
    return seq


# ---------------------------------------------------------------------------
# records

@dataclass
class StageResult:
    stage: str
    skipped: bool
    record: dict


def _rel(ws: Workspace, p: Path) -> str:
    try:
        return str(Path(p).relative_to(ws.root))
    except ValueError:
        return str(p)


def _hashes(ws: Workspace, paths) -> dict:
    return {_rel(ws, p): file_hash(p) for p in paths if Path(p).exists()}


def _up_to_date(ws: Workspace, stage: Stage, seed: int, fingerprint: str, inputs: dict) -> dict | None:
    rp = ws.record(stage.name)
    if not rp.exists():
        return None
    try:
        rec = json.loads(rp.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        return None
    if rec.get("seed") != seed or rec.get("config") != fingerprint or rec.get("inputs") != inputs:
        return None
    outputs = stage.outputs(ws)
    if not all(Path(p).exists() for p in outputs):
        return None
    if rec.get("outputs") != _hashes(ws, outputs):
        return None
    return rec


def default_workers(cfg: PipelineConfig) -> int:
    return max(1, min(cfg.K, os.cpu_count() or 1))


def run_stage(name: str, cfg: PipelineConfig, force: bool = False,
              workers: int | None = None) -> StageResult:
    """Run one stage; raises :class:`DependencyError` naming the first
    missing input artifact."""
    if name not in STAGE_TABLE:
        raise ConfigError(f"unknown stage {name!r}; expected one of {', '.join(STAGES)}")
    stage = STAGE_TABLE[name]
    ws = Workspace(cfg)
    if name == "gen-data" and cfg.synthetic is None and not cfg.dataset.train:
        raise ConfigError("gen-data needs either a synthetic section or dataset.train/test paths")
    for p in stage.inputs(ws):
        if not Path(p).exists():
            raise DependencyError(f"stage {name} needs {p}, which does not exist")
    if name == "transfer" and not _has_transfer(cfg):
        raise ConfigError("synthetic.transfer or dataset.transfer_train/transfer_test is required "
                          "for the transfer stage")
    workers = default_workers(cfg) if workers is None else max(1, int(workers))
    seed = cfg.stage_seed(stage.seed_stage or name)
    fingerprint = cfg.fingerprint(*stage.sections) if stage.sections else cfg.fingerprint()
    all_inputs = list(stage.inputs(ws)) + [p for p in stage.optional_inputs(ws) if Path(p).exists()]
    inputs = _hashes(ws, all_inputs)
    if not force:
        rec = _up_to_date(ws, stage, seed, fingerprint, inputs)
        if rec is not None:
            log.info("%s: up to date, skipping", name)
            return StageResult(name, True, rec)
    log.info("%s: running (seed %d, workers %d)", name, seed, workers)
    ws.root.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    summary = stage.run(StageContext(cfg, ws, seed, workers))
    rec = {
        "stage": name,
        "seed": seed,
        "master_seed": cfg.seed,
        "config": fingerprint,
        "inputs": inputs,
        "outputs": _hashes(ws, stage.outputs(ws)),
        "wall_time_s": time.perf_counter() - t0,
        "summary": summary,
    }
    ws.record(name).parent.mkdir(parents=True, exist_ok=True)
    _dump_json(rec, ws.record(name))
    return StageResult(name, False, rec)


def verify_provenance(cfg: PipelineConfig) -> list[str]:
    """Stage records whose recorded hashes no longer match the files on disk."""
    ws = Workspace(cfg)
    stale = []
    for name in STAGES:
        rp = ws.record(name)
        if not rp.exists():
            continue
        rec = json.loads(rp.read_text(encoding="utf-8"))
        for group in ("inputs", "outputs"):
            for rel, digest in rec[group].items():
                p = Path(rel) if Path(rel).is_absolute() else ws.root / rel
                if not p.exists() or file_hash(p) != digest:
                    stale.append(f"{name}:{group}:{rel}")
    return stale
