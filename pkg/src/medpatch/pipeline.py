"""Stage runner: data, pretraining, confidence, calibration, fusion, evaluation.

Each stage reads its prerequisites from the output directory, writes its
artifacts there and records their SHA-256 digests in ``manifest.json``.  A
stage refuses to run if a prerequisite entry is absent or its files no longer
match the recorded digests.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import metrics as mt
from .config import ExperimentConfig
from .confidence import (ConfidenceHead, TemperatureParams, calibrate_temperatures, logit_ece,
                         token_logits, token_table, train_confidence_head)
from .data import Dataset, DatasetSplit, generate_dataset, load_embeddings, split_dataset
from .errors import ConfigError, DataFormatError, PrerequisiteError
from .fusion import (HIGH, LOW, MISS, FusionConfig, FusionInputs, MedPatchFusion, late_baseline,
                     train_medpatch)
from .numeric import ParameterStore, atomic_write_bytes, load_checkpoint, save_checkpoint
from .patching import patch_features
from .unimodal import EncoderStub, UnimodalHead, predict_all, pretrain_unimodal

log = logging.getLogger(__name__)

STAGES = ("gen-data", "pretrain", "train-confidence", "calibrate", "train-fusion", "evaluate",
          "ablate", "report-weights")
PIPELINE = ("gen-data", "pretrain", "train-confidence", "calibrate", "train-fusion", "evaluate",
            "report-weights")
REQUIRES = {
    "gen-data": (),
    "pretrain": ("gen-data",),
    "train-confidence": ("gen-data", "pretrain"),
    "calibrate": ("gen-data", "pretrain", "train-confidence"),
    "train-fusion": ("gen-data", "pretrain", "train-confidence", "calibrate"),
    "evaluate": ("gen-data", "pretrain", "train-confidence", "calibrate", "train-fusion"),
    "ablate": ("gen-data", "pretrain", "train-confidence", "calibrate"),
    "report-weights": ("train-fusion",),
}
_STAGE_CODES = {s: k + 1 for k, s in enumerate(STAGES)}
METRIC_COLUMNS = ("metric", "point", "lo", "hi", "n_replicates", "seed")
REPORT_NAMES = {MISS: "Missingness", LOW: "Low", HIGH: "High"}


def stage_seed(seed: int, stage: str, k: int = 0) -> int:
    """Independent 32-bit seed per (experiment seed, stage, member)."""
    return int(np.random.SeedSequence([seed, _STAGE_CODES[stage], k]).generate_state(1)[0])


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def dataset_digest(dataset: Dataset) -> str:
    h = hashlib.sha256()
    for s in dataset:
        h.update(s.id.encode() + b"\0")
        h.update(np.ascontiguousarray(s.y, dtype="<f8").tobytes())
        for m in dataset.modalities:
            mt_ = s.modalities[m]
            h.update(m.encode() + (b"\1" if mt_.present else b"\0"))
            h.update(np.asarray(mt_.tokens.shape, dtype="<u4").tobytes())
            h.update(np.ascontiguousarray(mt_.tokens, dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Learning-rate sweep
# ---------------------------------------------------------------------------


def sample_learning_rates(bounds=(1e-5, 1e-3), sweeps=10, seed=0) -> list[float]:
    lo, hi = bounds
    if sweeps < 1:
        raise ConfigError("sweeps must be >= 1")
    if not (0 < lo < hi):
        raise ConfigError("learning-rate bounds must satisfy 0 < lo < hi")
    rng = np.random.default_rng(seed)
    return [float(v) for v in np.exp(rng.uniform(math.log(lo), math.log(hi), size=sweeps))]


@dataclass
class SweepResult:
    model: object
    lr: float
    score: float
    record: object
    trials: list  # (lr, score)


def lr_sweep(trainer: Callable, bounds=(1e-5, 1e-3), sweeps=10, seed=0) -> SweepResult:
    """Run ``trainer(lr, k) -> (model, val_score, record)`` per sampled lr; keep the best.

    NaN scores never win unless every trial is NaN, in which case the first
    trial is returned.  Ties keep the earlier trial.
    """
    best = None
    trials = []
    for k, lr in enumerate(sample_learning_rates(bounds, sweeps, seed)):
        model, score, record = trainer(lr, k)
        trials.append((lr, score))
        if best is None or (not math.isnan(score) and (math.isnan(best.score) or score > best.score)):
            best = SweepResult(model, lr, score, record, trials)
    best.trials = trials
    return best


# ---------------------------------------------------------------------------
# In-memory experiment (used by the stages and by the benchmark harness)
# ---------------------------------------------------------------------------


@dataclass
class Frozen:
    """Everything fixed before fusion training."""

    modalities: tuple
    n_classes: int
    stubs: dict
    heads: dict
    conf_heads: dict
    temps: TemperatureParams


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.data_path():
        ds = load_embeddings(cfg.data_path(), cfg.modalities)
        if not len(ds):
            raise DataFormatError("ingestion file contains no samples")
        return ds
    return generate_dataset(cfg.generator())


def make_stubs(cfg: ExperimentConfig, dataset: Dataset) -> dict:
    stubs = {}
    for k, m in enumerate(dataset.modalities):
        dims = {s.tokens(m).shape[1] for s in dataset if s.present(m)}
        if len(dims) != 1:
            raise DataFormatError(f"modality {m} has no samples or inconsistent widths {sorted(dims)}")
        stubs[m] = EncoderStub(m, dims.pop(), int(cfg["encoder_dim"]), seed=stage_seed(cfg.seed, "pretrain", 100 + k))
    return stubs


def _sweep_bounds(cfg):
    s = cfg["lr_search"]
    return (float(s["lo"]), float(s["hi"])), int(s["sweeps"])


def fit_unimodal(cfg, dataset, split, stubs):
    tr, va = dataset.subset(split.train).samples, dataset.subset(split.validation).samples
    t = cfg["training"]
    bounds, sweeps = _sweep_bounds(cfg)
    heads, lrs = {}, {}
    for k, m in enumerate(dataset.modalities):
        def trainer(lr, j, m=m, k=k):
            head, rec = pretrain_unimodal(m, stubs[m], tr, va, lr, dataset.n_classes, t["max_epochs"],
                                          t["patience"], t["batch_size"], stage_seed(cfg.seed, "pretrain", 10 * k + j))
            return head, rec.best_score, rec
        res = lr_sweep(trainer, bounds, sweeps, stage_seed(cfg.seed, "pretrain", 1000 + k))
        heads[m], lrs[m] = res.model, res.lr
    return heads, lrs


def fit_confidence(cfg, dataset, split, stubs):
    tr, va = dataset.subset(split.train).samples, dataset.subset(split.validation).samples
    t = cfg["training"]
    bounds, sweeps = _sweep_bounds(cfg)
    heads, lrs = {}, {}
    for k, m in enumerate(dataset.modalities):
        va_table = token_table(va, m, stubs[m])

        def trainer(lr, j, m=m, k=k, va_table=va_table):
            head, rec = train_confidence_head(m, stubs[m], tr, va, lr, t["confidence_epochs"], t["patience"],
                                              t["batch_size"], stage_seed(cfg.seed, "train-confidence", 10 * k + j))
            score = (mt.safe_macro_auroc(token_logits(va_table.tokens, head), va_table.labels)
                     if va_table.n_samples else float("nan"))
            return head, score, rec
        res = lr_sweep(trainer, bounds, sweeps, stage_seed(cfg.seed, "train-confidence", 1000 + k))
        heads[m], lrs[m] = res.model, res.lr
    return heads, lrs


def fit_temperatures(cfg, dataset, split, stubs, conf_heads):
    va = dataset.subset(split.validation).samples
    c = cfg["calibration"]
    tables = {m: token_table(va, m, stubs[m]) for m in dataset.modalities}
    temps, results = calibrate_temperatures(tables, conf_heads, int(c["epochs"]), float(c["lr"]),
                                            int(c["ece_bins"]), stage_seed(cfg.seed, "calibrate"))
    report = {}
    for m, table in tables.items():
        if table.n_samples == 0:
            continue
        l = token_logits(table.tokens, conf_heads[m])
        report[m] = {str(cl): {"tau": float(temps[m][cl]),
                               "ece_uncalibrated": logit_ece(l[:, cl], table.labels[:, cl], 1.0, int(c["ece_bins"])),
                               "ece_calibrated": logit_ece(l[:, cl], table.labels[:, cl], temps[m][cl],
                                                           int(c["ece_bins"]))}
                     for cl in range(l.shape[1])}
    return temps, report


def fusion_inputs(cfg, samples, frozen: Frozen, calibrated=True) -> FusionInputs:
    temps = frozen.temps if calibrated else TemperatureParams.ones(frozen.modalities, frozen.n_classes)
    high, low = patch_features(samples, frozen.modalities, frozen.stubs, frozen.conf_heads, temps,
                               frozen.n_classes, float(cfg["theta"]), cfg["patching"], cfg["theta_entropy"])
    y = np.stack([s.y for s in samples])
    a = np.stack([s.a for s in samples])
    uni = predict_all(samples, frozen.modalities, frozen.stubs, frozen.heads, frozen.n_classes)
    return FusionInputs(y, a, uni, high, low)


def fusion_config(cfg, frozen: Frozen, ablation=None) -> FusionConfig:
    return FusionConfig(frozen.modalities, frozen.n_classes, {m: s.d_out for m, s in frozen.stubs.items()},
                        int(cfg["d_proj"]), cfg["ablation"] if ablation is None else ablation,
                        cfg["loss"]["low_target"], bool(cfg["joint"]["per_class_heads"]))


def fit_fusion(cfg, train_in, val_in, fcfg: FusionConfig, stage="train-fusion"):
    t = cfg["training"]
    bounds, sweeps = _sweep_bounds(cfg)

    def trainer(lr, j):
        model, rec = train_medpatch(train_in, val_in, fcfg, lr, t["max_epochs"], t["patience"], t["batch_size"],
                                    stage_seed(cfg.seed, stage, 10 * fcfg.ablation + j))
        return model, rec.best_score, rec
    return lr_sweep(trainer, bounds, sweeps, stage_seed(cfg.seed, stage, 1000 + fcfg.ablation))


def prediction_table(model: MedPatchFusion, inputs: FusionInputs, modalities) -> dict:
    """Named (n, C) prediction arrays for evaluation."""
    out = model.predict(inputs)
    preds = {k: out[k] for k in ("late", "combined", "reduced", HIGH, LOW, MISS) if k in out}
    for j, m in enumerate(modalities):
        preds[f"uni.{m}"] = inputs.unimodal[:, j, :]
    preds["baseline.late"] = late_baseline(inputs.unimodal)
    return preds


def evaluate_predictions(preds: dict, y, replicates=1000, seed=0):
    """Bootstrap reports for every prediction and paired t-tests of MedPatch's late output."""
    indices = mt.bootstrap_indices(y, replicates, seed)
    reports, reps = [], {}
    for name, p in preds.items():
        for metric_name, fn in (("auroc", mt.macro_auroc), ("auprc", mt.macro_auprc)):
            report, values = mt.bootstrap_ci(fn, p, y, replicates, seed, f"{name}.{metric_name}", indices)
            reports.append(report)
            reps[report.metric] = values
    tests = []
    comparators = [k for k in preds if k != "late" and k.startswith(("baseline.", "uni."))]
    for metric_name in ("auroc", "auprc"):
        for comp in comparators:
            a, b = reps[f"late.{metric_name}"], reps[f"{comp}.{metric_name}"]
            if a.shape != b.shape:
                continue
            res = mt.paired_t_test(b, a)
            tests.append({"comparator": comp, "metric": metric_name, "t": res.t, "p": res.p,
                          "log10_p": res.log10_p,
                          "p_bonferroni": mt.bonferroni(res.p, len(comparators) * 2), "n": res.n})
    return reports, tests


def metrics_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in reports:
        w.writerow([r.metric, repr(r.point), repr(r.lo), repr(r.hi), r.n_replicates, r.seed])
    return buf.getvalue()


def weights_csv(model: MedPatchFusion) -> str:
    """alpha per class (softmax over predictors) plus a beta row."""
    cfg = model.config
    alpha = model.alpha_weights()
    names = cfg.predictors
    ordered = [m for m in cfg.modalities if m in names] + [k for k in (MISS, LOW, HIGH) if k in names]
    header = ["row"] + [REPORT_NAMES.get(k, k) for k in ordered] + ["beta_late", "beta_high", "beta_low"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for c in range(cfg.n_classes):
        w.writerow([f"class_{c}"] + [repr(float(alpha[names.index(k), c])) for k in ordered] + ["", "", ""])
    beta = model.beta_weights()
    if beta is not None:
        w.writerow(["beta"] + [""] * len(ordered) + [repr(float(v)) for v in beta])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Output directory workspace
# ---------------------------------------------------------------------------


class Workspace:
    def __init__(self, out_dir):
        self.root = Path(out_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / "manifest.json"

    def path(self, name) -> Path:
        return self.root / name

    @contextmanager
    def lock(self):
        lock = self.root / ".medpatch.lock"
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"output directory {self.root} is locked by another pipeline") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            lock.unlink(missing_ok=True)

    def manifest(self) -> dict:
        if not self.manifest_path.exists():
            return {"schema_version": 1, "config": None, "stages": {}}
        return json.loads(self.manifest_path.read_text())

    def write_manifest(self, manifest):
        atomic_write_bytes(self.manifest_path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())

    def write_text(self, name, text):
        atomic_write_bytes(self.path(name), text.encode("utf-8"))
        return name

    def write_json(self, name, obj):
        return self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def read_json(self, name):
        return json.loads(self.path(name).read_text())

    def check_prerequisites(self, stage):
        manifest = self.manifest()
        for req in REQUIRES[stage]:
            entry = manifest["stages"].get(req)
            if entry is None:
                raise PrerequisiteError(req, f"stage '{stage}' needs '{req}' to run first")
            for name, digest in entry["outputs"].items():
                p = self.path(name)
                if not p.exists() or sha256_file(p) != digest:
                    raise PrerequisiteError(req, f"artifact {name} of stage '{req}' is missing or changed; "
                                                 f"rerun '{req}'")
        return manifest

    def record(self, stage, outputs, wall_time, extra=None, cfg=None):
        manifest = self.manifest()
        if stage in PIPELINE:
            # upstream reruns invalidate everything that depended on them
            for later in STAGES:
                if stage in REQUIRES[later] and later in manifest["stages"]:
                    del manifest["stages"][later]
        if cfg is not None:
            snapshot = cfg.to_dict()
            snapshot.pop("out_dir", None)
            manifest["config"] = snapshot
        entry = {"outputs": {n: sha256_file(self.path(n)) for n in outputs}, "wall_time": wall_time}
        entry.update(extra or {})
        manifest["stages"][stage] = entry
        self.write_manifest(manifest)

    # -- loaders -------------------------------------------------------------

    def dataset(self, cfg) -> tuple[Dataset, DatasetSplit]:
        desc = self.read_json("dataset.json")
        ds = load_embeddings(desc["path"], cfg.modalities) if desc["source"] == "file" else generate_dataset(
            cfg.generator())
        if dataset_digest(ds) != desc["digest"]:
            raise PrerequisiteError("gen-data", "dataset no longer matches the recorded digest; rerun 'gen-data'")
        return ds, DatasetSplit.from_dict(self.read_json("split.json"))

    def stubs(self, modalities) -> dict:
        out = {}
        for m in modalities:
            t = load_checkpoint(self.path(f"encoder_{m}.mpck"))
            w, b = t[f"{m}.W"], t[f"{m}.b"]
            out[m] = EncoderStub(m, w.shape[1], w.shape[0], weight=w, bias=b)
        return out

    def frozen(self, cfg, dataset) -> Frozen:
        mods = dataset.modalities
        heads = {m: UnimodalHead(m, ParameterStore.load(self.path(f"unimodal_{m}.mpck")), trained=True) for m in mods}
        conf = {m: ConfidenceHead(m, ParameterStore.load(self.path(f"confidence_{m}.mpck"))) for m in mods}
        temps = TemperatureParams.from_json(self.path("temperatures.json").read_text())
        return Frozen(mods, dataset.n_classes, self.stubs(mods), heads, conf, temps)

    def fusion(self) -> MedPatchFusion:
        meta = self.read_json("fusion.json")
        return MedPatchFusion(FusionConfig.from_dict(meta["config"]), store=ParameterStore.load(self.path("fusion.mpck")))


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def _stage_gen_data(ws: Workspace, cfg):
    ds = build_dataset(cfg)
    split = split_dataset(ds, cfg["split"], stage_seed(cfg.seed, "gen-data"))
    if cfg.data_path():
        desc = {"source": "file", "path": str(Path(cfg.data_path()).resolve()),
                "file_sha256": sha256_file(cfg.data_path())}
    else:
        desc = {"source": "synth", "generator": cfg.generator().to_dict()}
    desc.update({"digest": dataset_digest(ds), "n_samples": len(ds), "modalities": list(ds.modalities),
                 "n_classes": ds.n_classes})
    outs = [ws.write_json("dataset.json", desc), ws.write_json("split.json", split.to_dict())]
    return outs, {"sizes": [len(split.train), len(split.validation), len(split.test)]}


def _stage_pretrain(ws, cfg):
    ds, split = ws.dataset(cfg)
    stubs = make_stubs(cfg, ds)
    heads, lrs = fit_unimodal(cfg, ds, split, stubs)
    outs = []
    for m in ds.modalities:
        save_checkpoint(ws.path(f"encoder_{m}.mpck"), stubs[m].tensors())
        heads[m].store.save(ws.path(f"unimodal_{m}.mpck"))
        outs += [f"encoder_{m}.mpck", f"unimodal_{m}.mpck"]
    return outs, {"lr": lrs}


def _stage_train_confidence(ws, cfg):
    ds, split = ws.dataset(cfg)
    stubs = ws.stubs(ds.modalities)
    heads, lrs = fit_confidence(cfg, ds, split, stubs)
    outs = []
    for m in ds.modalities:
        heads[m].store.save(ws.path(f"confidence_{m}.mpck"))
        outs.append(f"confidence_{m}.mpck")
    return outs, {"lr": lrs}


def _stage_calibrate(ws, cfg):
    ds, split = ws.dataset(cfg)
    stubs = ws.stubs(ds.modalities)
    conf = {m: ConfidenceHead(m, ParameterStore.load(ws.path(f"confidence_{m}.mpck"))) for m in ds.modalities}
    temps, report = fit_temperatures(cfg, ds, split, stubs, conf)
    outs = [ws.write_text("temperatures.json", temps.to_json() + "\n"), ws.write_json("calibration.json", report)]
    return outs, {}


def _prepared(ws, cfg, ablation=None):
    ds, split = ws.dataset(cfg)
    frozen = ws.frozen(cfg, ds)
    return ds, split, frozen


def _stage_train_fusion(ws, cfg):
    ds, split, frozen = _prepared(ws, cfg)
    fcfg = fusion_config(cfg, frozen)
    tr = fusion_inputs(cfg, ds.subset(split.train).samples, frozen, fcfg.calibrated)
    va = fusion_inputs(cfg, ds.subset(split.validation).samples, frozen, fcfg.calibrated)
    res = fit_fusion(cfg, tr, va, fcfg)
    res.model.store.save(ws.path("fusion.mpck"))
    meta = {"config": fcfg.to_dict(), "lr": res.lr, "val_auroc": res.score, "trials": res.trials,
            "epoch_log": res.record.to_dict()}
    return ["fusion.mpck", ws.write_json("fusion.json", meta)], {"lr": res.lr}


def _stage_evaluate(ws, cfg):
    ds, split, frozen = _prepared(ws, cfg)
    model = ws.fusion()
    te = fusion_inputs(cfg, ds.subset(split.test).samples, frozen, model.config.calibrated)
    preds = prediction_table(model, te, frozen.modalities)
    m = cfg["metrics"]
    reports, tests = evaluate_predictions(preds, te.y, int(m["replicates"]), int(m["seed"]))
    outs = [ws.write_text("metrics.csv", metrics_csv(reports)),
            ws.write_json("metrics.json", {"reports": [r.to_dict() for r in reports]}),
            ws.write_json("ttests.json", {"tests": tests})]
    summary = {r.metric: r.point for r in reports if r.metric.startswith(("late.", "combined.", "reduced."))}
    return outs, {"metrics": summary}


def _stage_ablate(ws, cfg):
    ds, split, frozen = _prepared(ws, cfg)
    settings = [cfg["ablation"]] if cfg["ablation"] else [0, 1, 2, 3, 4]
    te_samples = ds.subset(split.test).samples
    rows = []
    for setting in settings:
        fcfg = fusion_config(cfg, frozen, setting)
        tr = fusion_inputs(cfg, ds.subset(split.train).samples, frozen, fcfg.calibrated)
        va = fusion_inputs(cfg, ds.subset(split.validation).samples, frozen, fcfg.calibrated)
        te = fusion_inputs(cfg, te_samples, frozen, fcfg.calibrated)
        res = fit_fusion(cfg, tr, va, fcfg, stage="ablate")
        late = res.model.predict(te)["late"]
        rows.append([setting, repr(mt.macro_auroc(late, te.y)), repr(mt.macro_auprc(late, te.y)), repr(res.lr)])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["setting", "auroc", "auprc", "lr"])
    w.writerows(rows)
    return [ws.write_text("ablation.csv", buf.getvalue())], {}


def _stage_report_weights(ws, cfg):
    if not ws.path("fusion.mpck").exists():
        raise PrerequisiteError("train-fusion", "no fusion checkpoint; run 'train-fusion' first")
    return [ws.write_text("weights.csv", weights_csv(ws.fusion()))], {}


_RUNNERS = {
    "gen-data": _stage_gen_data,
    "pretrain": _stage_pretrain,
    "train-confidence": _stage_train_confidence,
    "calibrate": _stage_calibrate,
    "train-fusion": _stage_train_fusion,
    "evaluate": _stage_evaluate,
    "ablate": _stage_ablate,
    "report-weights": _stage_report_weights,
}


def run_stage(stage: str, cfg: ExperimentConfig, out_dir) -> dict:
    """Run one stage under the output-directory lock and update the manifest."""
    if stage not in _RUNNERS:
        raise ConfigError(f"unknown stage {stage!r}; choose from {STAGES}")
    ws = Workspace(out_dir)
    with ws.lock():
        ws.check_prerequisites(stage)
        start = time.perf_counter()
        outputs, extra = _RUNNERS[stage](ws, cfg)
        wall = time.perf_counter() - start
        ws.record(stage, outputs, wall, extra, cfg)
        log.info("stage %s finished in %.1fs", stage, wall)
        return ws.manifest()["stages"][stage]


def run_pipeline(cfg: ExperimentConfig, out_dir, stages=PIPELINE) -> dict:
    for stage in stages:
        run_stage(stage, cfg, out_dir)
    return Workspace(out_dir).manifest()


def report_weights(out_dir) -> str:
    ws = Workspace(out_dir)
    if not ws.path("fusion.mpck").exists():
        raise PrerequisiteError("train-fusion", "no fusion checkpoint; run 'train-fusion' first")
    return weights_csv(ws.fusion())
