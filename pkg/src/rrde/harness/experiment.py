"""End-to-end pipeline: data, ensembles, fusion, face and group regressors, metrics.

A *cell* is one seed.  Ensemble sizes are prefixes of one ensemble trained
to the largest requested size, so the n=1 and n=5 models of a seed share
their first member.  Every model a result row depends on is written under
``out/seed_<s>/`` and :func:`evaluate` recomputes the rows from those files
alone.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import dataset as ds
from ..aggregator import LstmAggregator, train_aggregator
from ..extractor import (Ensemble, ResidualNetConfig, TrainedExtractor, train_ensemble, train_extractor,
                         vote_probabilities)
from ..gem import FaceRecord, group_representation
from ..nn import SgdConfig
from ..nn.losses import softmax
from ..svr import GridSearchSpec, SvrConfig, SvrModel, fit, grid_search_cv
from .config import ExperimentConfig

log = logging.getLogger(__name__)

ROW_FIELDS = ("model", "ensemble_size", "gem", "metric", "split", "seed", "value")
FAILURE_FIELDS = ("seed", "model", "ensemble_size", "stage", "message")
RRDE = "rrde"
BASELINE = "resnet_all"
FACE = "face"  # gem column for face-level rows
VOTE = "vote"  # gem column for majority-vote accuracy rows


def rmse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.size == 0 or pred.shape != truth.shape:
        raise ValueError(f"rmse needs equal non-zero lengths, got {pred.size} and {truth.size}")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


@dataclass(frozen=True)
class ResultRow:
    model: str
    ensemble_size: int
    gem: str
    metric: str
    split: str
    seed: int
    value: float

    def __post_init__(self):
        if self.metric == "rmse" and not self.value >= 0:
            raise ValueError(f"rmse must be >= 0, got {self.value}")
        if self.metric == "accuracy" and not 0 <= self.value <= 1:
            raise ValueError(f"accuracy must be in [0, 1], got {self.value}")


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)  # (seed, model, ensemble_size, stage, message)

    def extend(self, other: "ResultTable"):
        self.rows.extend(other.rows)
        self.failures.extend(other.failures)

    def select(self, **match) -> list:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]

    def mean(self, **match) -> float:
        vals = [r.value for r in self.select(**match)]
        if not vals:
            raise KeyError(f"no rows match {match}")
        return float(np.mean(vals))

    def cells(self) -> list:
        """Per-cell ``(model, ensemble_size, gem, metric, split, mean, sd, count)``, sd with ddof=1."""
        groups: dict = {}
        for r in self.rows:
            groups.setdefault((r.model, r.ensemble_size, r.gem, r.metric, r.split), []).append(r.value)
        out = []
        for key in sorted(groups):
            v = np.array(groups[key])
            sd = float(v.std(ddof=1)) if len(v) > 1 else 0.0
            out.append((*key, float(v.mean()), sd, len(v)))
        return out

    def sorted(self) -> "ResultTable":
        key = lambda r: (r.seed, r.model, r.ensemble_size, r.metric, r.gem, r.split)
        return ResultTable(sorted(self.rows, key=key), sorted(self.failures, key=lambda f: tuple(map(str, f))))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ROW_FIELDS)
        for r in self.rows:
            w.writerow([r.model, r.ensemble_size, r.gem, r.metric, r.split, r.seed, repr(r.value)])
        return buf.getvalue()

    def failures_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(FAILURE_FIELDS)
        w.writerows(self.failures)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, failures_text: str = "") -> "ResultTable":
        rows = [ResultRow(r["model"], int(r["ensemble_size"]), r["gem"], r["metric"], r["split"],
                          int(r["seed"]), float(r["value"]))
                for r in csv.DictReader(io.StringIO(text))]
        failures = []
        if failures_text:
            failures = [(int(f["seed"]), f["model"], int(f["ensemble_size"]), f["stage"], f["message"])
                        for f in csv.DictReader(io.StringIO(failures_text))]
        return cls(rows, failures)


# --------------------------------------------------------------------------
# configuration persistence

def config_to_dict(config: ExperimentConfig) -> dict:
    return asdict(config)


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    d["extractor_sgd"] = SgdConfig(**d["extractor_sgd"])
    d["aggregator_sgd"] = SgdConfig(**d["aggregator_sgd"])
    d["svr"] = SvrConfig(**d["svr"])
    grid = dict(d["grid"])
    d["grid"] = GridSearchSpec(tuple(grid["C_grid"]), tuple(grid["epsilon_grid"]), grid["folds"], grid["seed"])
    for k in ("seeds", "ensemble_sizes", "gems", "faces_per_group"):
        d[k] = tuple(d[k])
    return ExperimentConfig(**d)


def save_config(config: ExperimentConfig, out_dir) -> Path:
    path = Path(out_dir) / "config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config_to_dict(config), indent=2, sort_keys=True) + "\n")
    return path


def load_saved_config(out_dir) -> ExperimentConfig:
    return config_from_dict(json.loads((Path(out_dir) / "config.json").read_text()))


# --------------------------------------------------------------------------
# data

def load_data(config: ExperimentConfig):
    """``(train, validation)`` manifests: read from disk when configured, else generated."""
    if config.train_manifest or config.validation_manifest:
        if not (config.train_manifest and config.validation_manifest):
            raise ValueError("set both train_manifest and validation_manifest, or neither")
        train = ds.read_manifest(config.train_manifest)
        val = ds.read_manifest(config.validation_manifest)
    else:
        train = ds.synth_generate(config.synth_spec("train"))
        val = ds.synth_generate(config.synth_spec("validation"))
    audit_manifests(train, val)
    return train, val


def face_key(split: str, face) -> str:
    return f"{split}:{face.group_id}:{face.path}"


def audit_manifests(train, val):
    """Reject any group id shared by the two splits."""
    shared = {g.group_id for g in train.groups} & {g.group_id for g in val.groups}
    if shared:
        raise ValueError(f"groups present in both splits: {sorted(shared)[:5]}")


def audit_split_isolation(out_dir, val) -> list:
    """Validation faces that appear in any seed's training log (empty when isolated)."""
    val_keys = {face_key(val.split, f) for f in val.faces()}
    leaks = []
    for log_path in sorted(Path(out_dir).glob("seed_*/training_faces.txt")):
        used = set(log_path.read_text().split())
        leaks.extend(sorted(used & val_keys))
        # keys carry their split, so also guard against a mislabelled split
        leaks.extend(sorted(k for k in used if k.split(":", 1)[0] == val.split))
    return sorted(set(leaks))


# --------------------------------------------------------------------------
# one cell

def _cell_dir(out_dir, seed) -> Path:
    return Path(out_dir) / f"seed_{seed}"


def _model_dir(cell: Path, model: str, n: int) -> Path:
    return cell / (BASELINE if model == BASELINE else f"rrde_n{n}")


def _member_outputs(members, images):
    """``(probs (M, N, 6) or None, feats (N, M, 64))`` from one forward pass per member."""
    probs, feats = [], []
    for m in members:
        out, f = m.forward(images)
        feats.append(f)
        if m.loss == "xent":
            probs.append(softmax(out))
    return (np.stack(probs) if probs else None), np.stack(feats, axis=1)


def _group_inputs(gem, groups, estimates, encodings, offset_of):
    """Group features (rows) for ``gem``; ``offset_of`` maps group index to its face slice."""
    rows = []
    for gi, g in enumerate(groups):
        sl = offset_of[gi]
        recs = [FaceRecord(float(estimates[k]), encodings[k], f.bbox_area_px, f.centroid)
                for k, f in zip(range(sl.start, sl.stop), g.faces)]
        rep = group_representation(gem, recs)
        rows.append(np.atleast_1d(np.asarray(rep, dtype=np.float64)))
    return np.stack(rows)


def _slices(groups):
    out, pos = [], 0
    for g in groups:
        out.append(slice(pos, pos + len(g.faces)))
        pos += len(g.faces)
    return out


def train_cell(config: ExperimentConfig, seed: int, out_dir, data=None) -> list:
    """Train and persist every model of one seed; returns stage failures."""
    train, val = data if data is not None else load_data(config)
    cell = _cell_dir(out_dir, seed)
    cell.mkdir(parents=True, exist_ok=True)
    failures = []
    dtype = np.dtype(config.dtype)
    train_faces = train.faces()
    x_train = ds.prepare_batch(train_faces)
    y_train = np.array([f.label for f in train_faces], dtype=np.float64)
    g_train = np.array([g.group_label for g in train.groups], dtype=np.float64)
    slices = _slices(train.groups)
    used = set()

    def fail(model, n, stage, exc):
        log.error("seed %d %s n=%d %s failed: %s", seed, model, n, stage, exc)
        log.debug("%s", traceback.format_exc())
        failures.append((seed, model, n, stage, f"{type(exc).__name__}: {exc}"))

    sizes = sorted(set(config.ensemble_sizes))
    jobs = []
    try:
        t0 = time.perf_counter()
        balanced = ds.balance_subset(train_faces, config.per_class, seed)
        used.update(face_key(train.split, f) for f in balanced)
        ens = train_ensemble(balanced, max(sizes), seed * 1000, config.extractor_sgd, workers=1,
                             config=ResidualNetConfig(), augment=config.augment, dtype=dtype)
        ens.save(cell / "ensemble")
        log.info("seed %d: ensemble of %d trained in %.0fs", seed, len(ens), time.perf_counter() - t0)
        _, feats = _member_outputs(ens.members, x_train)
        jobs.extend((RRDE, n, feats[:, :n], config.hidden_dim) for n in sizes)
    except Exception as exc:  # noqa: BLE001 - recorded, run continues
        for n in sizes:
            fail(RRDE, n, "ensemble", exc)

    if config.baseline:
        try:
            t0 = time.perf_counter()
            iters = int(round(config.extractor_sgd.total_iters * config.baseline_iters_factor))
            sgd = replace(config.extractor_sgd, total_iters=iters)
            used.update(face_key(train.split, f) for f in train_faces)
            base = train_extractor(train_faces, sgd, seed * 1000 + 999, config=ResidualNetConfig(),
                                   augment=config.augment, loss="l2", dtype=dtype)
            bdir = _model_dir(cell, BASELINE, 1)
            bdir.mkdir(parents=True, exist_ok=True)
            base.save(bdir / "extractor.ckpt")
            log.info("seed %d: baseline trained in %.0fs", seed, time.perf_counter() - t0)
            _, feats = _member_outputs([base], x_train)
            jobs.append((BASELINE, 1, feats, config.baseline_hidden_dim))
        except Exception as exc:  # noqa: BLE001
            fail(BASELINE, 1, "extractor", exc)

    (cell / "training_faces.txt").write_text("".join(k + "\n" for k in sorted(used)))

    for model, n, feats, hidden in jobs:
        mdir = _model_dir(cell, model, n)
        mdir.mkdir(parents=True, exist_ok=True)
        try:
            agg, losses = train_aggregator(feats, y_train, config.aggregator_sgd, hidden_dim=hidden,
                                           num_layers=config.num_layers, seed=seed * 1000 + n)
            agg.save(mdir / "aggregator.ckpt", losses[::50])
            enc = agg.scan(feats)
            face_svr = _fit_svr(enc, y_train, config, mdir / "face_svr.ckpt")
            est = face_svr.predict(enc)
        except Exception as exc:  # noqa: BLE001
            fail(model, n, "face", exc)
            continue
        for gem in config.gems:
            try:
                X = _group_inputs(gem, train.groups, est, enc, slices)
                _fit_svr(X, g_train, config, mdir / f"group_svr_{gem}.ckpt")
            except Exception as exc:  # noqa: BLE001
                fail(model, n, f"group:{gem}", exc)
    return failures


def _fit_svr(X, y, config: ExperimentConfig, path: Path) -> SvrModel:
    """Fit with the configured (C, epsilon), or with this regressor's own CV grid search."""
    svr_cfg = config.svr
    if config.grid_search:
        result = grid_search_cv(X, y, config.grid)
        result.write_csv(path.with_suffix(".cv.csv"))
        svr_cfg = result.best
        log.info("%s: grid search picked C=%s epsilon=%s (cv rmse %.4f)", path.name, svr_cfg.C,
                 svr_cfg.epsilon, result.best_rmse)
    model = fit(X, y, svr_cfg)
    model.save(path)
    return model


def evaluate_cell(config: ExperimentConfig, seed: int, out_dir, data=None) -> ResultTable:
    """Validation metrics of one seed recomputed from its checkpoints."""
    train, val = data if data is not None else load_data(config)
    cell = _cell_dir(out_dir, seed)
    table = ResultTable()
    val_faces = val.faces()
    x_val = ds.prepare_batch(val_faces)
    y_val = np.array([f.label for f in val_faces], dtype=np.float64)
    g_val = np.array([g.group_label for g in val.groups], dtype=np.float64)
    slices = _slices(val.groups)
    sizes = sorted(set(config.ensemble_sizes))

    def fail(model, n, stage, exc):
        table.failures.append((seed, model, n, stage, f"{type(exc).__name__}: {exc}"))

    jobs = []
    try:
        ens = Ensemble.load(cell / "ensemble")
        probs, feats = _member_outputs(ens.members, x_val)
        for n in sizes:
            acc = float(np.mean(vote_probabilities(probs[:n]) == y_val))
            table.rows.append(ResultRow(RRDE, n, VOTE, "accuracy", val.split, seed, acc))
            jobs.append((RRDE, n, feats[:, :n]))
    except Exception as exc:  # noqa: BLE001
        for n in sizes:
            fail(RRDE, n, "evaluate:ensemble", exc)
    if config.baseline:
        try:
            base = TrainedExtractor.load(_model_dir(cell, BASELINE, 1) / "extractor.ckpt")
            _, feats = _member_outputs([base], x_val)
            jobs.append((BASELINE, 1, feats))
        except Exception as exc:  # noqa: BLE001
            fail(BASELINE, 1, "evaluate:extractor", exc)

    for model, n, feats in jobs:
        mdir = _model_dir(cell, model, n)
        try:
            agg = LstmAggregator.load(mdir / "aggregator.ckpt")
            enc = agg.scan(feats)
            est = SvrModel.load(mdir / "face_svr.ckpt").predict(enc)
        except Exception as exc:  # noqa: BLE001
            fail(model, n, "evaluate:face", exc)
            continue
        table.rows.append(ResultRow(model, n, FACE, "rmse", val.split, seed, rmse(est, y_val)))
        for gem in config.gems:
            try:
                svr = SvrModel.load(mdir / f"group_svr_{gem}.ckpt")
                X = _group_inputs(gem, val.groups, est, enc, slices)
                table.rows.append(ResultRow(model, n, gem, "rmse", val.split, seed,
                                            rmse(svr.predict(X), g_val)))
            except Exception as exc:  # noqa: BLE001
                fail(model, n, f"evaluate:{gem}", exc)
    return table


def _run_cell(config, seed, out_dir, data):
    failures = train_cell(config, seed, out_dir, data)
    table = evaluate_cell(config, seed, out_dir, data)
    table.failures = failures + table.failures
    return table


def run_experiment(config: ExperimentConfig, out_dir, data=None) -> ResultTable:
    """Train and evaluate every seed; writes checkpoints, results.csv and failures.csv."""
    out_dir = Path(out_dir)
    save_config(config, out_dir)
    data = data if data is not None else load_data(config)
    table = ResultTable()
    seeds = list(config.seeds)
    if config.workers > 1 and len(seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(min(config.workers, len(seeds))) as pool:
            futures = [pool.submit(_run_cell, config, s, out_dir, data) for s in seeds]
            for f in futures:
                table.extend(f.result())
    else:
        for s in seeds:
            table.extend(_run_cell(config, s, out_dir, data))
    table = table.sorted()
    write_table(table, out_dir)
    return table


def train(config: ExperimentConfig, out_dir, data=None) -> list:
    out_dir = Path(out_dir)
    save_config(config, out_dir)
    data = data if data is not None else load_data(config)
    failures = []
    for s in config.seeds:
        failures.extend(train_cell(config, s, out_dir, data))
    return failures


def evaluate(out_dir, config: ExperimentConfig | None = None, data=None) -> ResultTable:
    """Recompute the result table from checkpoints under ``out_dir`` without retraining."""
    config = config or load_saved_config(out_dir)
    data = data if data is not None else load_data(config)
    table = ResultTable()
    for s in config.seeds:
        table.extend(evaluate_cell(config, s, out_dir, data))
    table = table.sorted()
    write_table(table, out_dir)
    return table


def write_table(table: ResultTable, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "results.csv").write_text(table.to_csv())
    (out_dir / "failures.csv").write_text(table.failures_csv())


def read_table(out_dir) -> ResultTable:
    out_dir = Path(out_dir)
    fpath = out_dir / "failures.csv"
    return ResultTable.from_csv((out_dir / "results.csv").read_text(),
                                fpath.read_text() if fpath.exists() else "")
