"""
Config-driven pipeline stages.

Every stage reads its inputs from files and writes its outputs, once and
atomically, under the configured output directory. ``run_pipeline`` simply
calls the stages in order, so chaining the individual subcommands by hand
produces byte-identical files.

Stage outputs (``<out>/``)::

    synth         synth.{json,bin} synth_sites.csv synth_conventional.{json,bin}
                  (+ synth_test* when a test seed is configured)
    transform     transform.{json,bin} (+ transform_test.{json,bin})
    extract       extract.csv extract_sites.csv (+ extract_test*.csv)
    train         train.json train_loocv.csv train_meta.json
    predict       predict.csv
    combine       combine_<split>.csv combine_<split>_gamma.csv
    evaluate      evaluate_<split>_roc_<score>.csv evaluate_<split>_roc.svg
                  evaluate_<split>_gamma.svg report.json
    compare-bands compare-bands.csv compare-bands.svg
"""

from __future__ import annotations

import copy
import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .annuli import RadiiTable, default_radii, extract_features, load_features, load_radii, save_features
from .bands import build_band_configuration, load_ktt
from .cv import CVSettings, nested_loocv, train_full
from .errors import ApmkitError, BandError, EmptyAnnulusError, SiteTableError
from .evaluate import (
    DEFAULT_FNR_LEVELS, ScorePairs, _fmt, _write_csv, default_gamma_grid, plot_gamma, plot_roc,
    roc_curve, sample_conventional, select_gamma, snap_conventional, tnr_at_fnr, convex_combine,
    write_gamma_csv, write_roc_csv, write_scores_csv, read_scores_csv,
)
from .model import TrainedApm
from .raster_io import _atomic_write, load_raster, load_sites, sample_background, save_raster, save_sites
from .synth import SynthConfig, generate_conventional, generate_labeled_dataset

logger = logging.getLogger(__name__)

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "output_dir": "out",
    "n_jobs": 1,
    "band_configuration": "BDR36",
    "radii": None,
    "ktt_coefficients": None,
    "paths": {
        "train_raster": None,
        "train_sites": None,
        "test_raster": None,
        "test_sites": None,
        "conventional_train": None,
        "conventional_test": None,
        "conventional_column": "conventional",
    },
    "background": {"n": 0, "min_dist_m": 200.0},
    "classifier": {
        "name": "lda",
        "shrinkage": 0.1,
        "priors": "equal",
        "k": 5,
        "l": None,
        "d_max": None,
        "standardize": False,
        "pca_strategy": "cv",
        "variance_threshold": 0.95,
    },
    "gamma_grid": None,
    "fnr_levels": list(DEFAULT_FNR_LEVELS),
    "compare_band_sets": ["BDR15", "BDR36", "BDR66", "BDR78"],
    "synth": None,
}

SYNTH_EXTRA_KEYS = ("n_background", "test_seed")


class StageError(ApmkitError):
    """A pipeline stage failed; carries the stage name and offending site ids."""

    def __init__(self, stage: str, message: str, site_ids=()):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.message = message
        self.site_ids = list(site_ids)

    def to_json(self) -> dict:
        return {"error": "StageError", "stage": self.stage, "message": self.message,
                "site_ids": self.site_ids}


def _merge(base: dict, over: dict, where="config") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ValueError(f"unknown {where} key {k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{where}.{k}")
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_dotted(doc: dict, key: str, value):
    """Set ``doc['a']['b'] = value`` for ``key = 'a.b'``; the path must exist.

    Keys under ``synth`` are free-form (they are checked by SynthConfig).
    """
    parts = key.split(".")
    if parts[0] == "synth" and len(parts) == 2:
        if doc.get("synth") is None:
            doc["synth"] = {}
        doc["synth"][parts[1]] = value
        return
    node = doc
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ValueError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ValueError(f"unknown config key {key!r}")
    node[parts[-1]] = value


@dataclass(frozen=True)
class PipelineConfig:
    """Resolved configuration; relative paths are taken from ``base_dir``."""

    doc: dict
    base_dir: Path

    @classmethod
    def from_json(cls, doc: dict | None = None, base_dir=".") -> "PipelineConfig":
        cfg = cls(_merge(DEFAULT_CONFIG, doc or {}), Path(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "PipelineConfig":
        path = Path(path)
        doc = _merge(DEFAULT_CONFIG, json.loads(path.read_text()))
        for k, v in (overrides or {}).items():
            set_dotted(doc, k, v)
        return cls.from_json(doc, path.parent)

    def with_overrides(self, overrides: dict) -> "PipelineConfig":
        doc = copy.deepcopy(self.doc)
        for k, v in overrides.items():
            set_dotted(doc, k, v)
        return PipelineConfig.from_json(doc, self.base_dir)

    def validate(self):
        d = self.doc
        c = d["classifier"]
        self.cv_settings()
        if c["d_max"] is not None and int(c["d_max"]) < 1:
            raise ValueError("classifier.d_max must be >= 1")
        if d["gamma_grid"] is not None:
            g = np.asarray(d["gamma_grid"], dtype=float)
            if g.size == 0 or ((g < 0) | (g > 1)).any():
                raise ValueError("gamma_grid must be a non-empty list within [0, 1]")
        if int(d["n_jobs"]) == 0:
            raise ValueError("n_jobs must be nonzero")
        if int(d["background"]["n"]) < 0:
            raise ValueError("background.n must be >= 0")
        if d["synth"] is not None:
            self.synth_config()
        for key in ("train_raster", "train_sites"):
            if d["paths"][key] is None and d["synth"] is None:
                raise ValueError(f"paths.{key} is required unless a synth section is given")
        return self

    # accessors

    def path(self, p) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out(self) -> Path:
        return self.path(self.doc["output_dir"])

    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    @property
    def n_jobs(self) -> int:
        return int(self.doc["n_jobs"])

    def cv_settings(self) -> CVSettings:
        c = self.doc["classifier"]
        return CVSettings(
            classifier=c["name"], shrinkage=float(c["shrinkage"]), priors=c["priors"],
            k=int(c["k"]), l=None if c["l"] is None else int(c["l"]),
            d_max=None if c["d_max"] is None else int(c["d_max"]),
            standardize=bool(c["standardize"]), strategy=c["pca_strategy"],
            variance_threshold=float(c["variance_threshold"]),
        )

    def synth_config(self, test: bool = False) -> SynthConfig:
        s = dict(self.doc["synth"] or {})
        test_seed = s.get("test_seed")
        for k in SYNTH_EXTRA_KEYS:
            s.pop(k, None)
        s.setdefault("seed", self.seed)
        if test:
            s["seed"] = int(test_seed)
        return SynthConfig.from_json(s)

    def radii(self) -> RadiiTable:
        r = self.doc["radii"]
        if r is None:
            return default_radii()
        if isinstance(r, str):
            return load_radii(self.path(r))
        return RadiiTable(tuple(r["inner"]), tuple(r["outer"]))

    def ktt(self):
        k = self.doc["ktt_coefficients"]
        return load_ktt(None if k is None else self.path(k))

    def gamma_grid(self) -> np.ndarray:
        g = self.doc["gamma_grid"]
        return default_gamma_grid() if g is None else np.asarray(g, dtype=np.float64)

    def has_test(self) -> bool:
        p = self.doc["paths"]
        if p["test_raster"] is not None:
            return True
        return self.doc["synth"] is not None and self.doc["synth"].get("test_seed") is not None

    # input resolution: explicit paths win, otherwise the synth stage outputs

    def input_raster(self, split: str) -> Path:
        p = self.doc["paths"][f"{split}_raster"]
        if p is not None:
            return self.path(p)
        return self.out / ("synth.json" if split == "train" else "synth_test.json")

    def input_sites(self, split: str) -> Path:
        p = self.doc["paths"][f"{split}_sites"]
        if p is not None:
            return self.path(p)
        return self.out / ("synth_sites.csv" if split == "train" else "synth_test_sites.csv")

    def conventional_source(self, split: str) -> Path | None:
        p = self.doc["paths"][f"conventional_{split}"]
        if p is not None:
            return self.path(p)
        if self.doc["synth"] is not None and self.doc["paths"][f"{split}_raster"] is None:
            return self.out / ("synth_conventional.json" if split == "train"
                               else "synth_test_conventional.json")
        return None


def _stage(name):
    """Wrap a stage so that failures surface as StageError with site ids."""

    def deco(fn):
        def wrapper(cfg, *a, **kw):
            try:
                return fn(cfg, *a, **kw)
            except StageError:
                raise
            except EmptyAnnulusError as e:
                raise StageError(name, str(e), [] if e.site_id is None else [e.site_id]) from e
            except (ApmkitError, ValueError, KeyError, OSError) as e:
                ids = getattr(e, "site_ids", ())
                msg = str(e) if not isinstance(e, FileNotFoundError) else \
                    f"missing file {e.filename}"
                raise StageError(name, msg, ids) from e

        wrapper.__name__ = fn.__name__
        wrapper.__doc__ = fn.__doc__
        wrapper.stage = name
        return wrapper

    return deco


def _splits(cfg: PipelineConfig):
    return ("train", "test") if cfg.has_test() else ("train",)


def _suffix(split):
    return "" if split == "train" else "_test"


def _write_json(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, (json.dumps(doc, indent=1) + "\n").encode())
    return path


# -- stages ------------------------------------------------------------------------------


@_stage("synth")
def stage_synth(cfg: PipelineConfig) -> list[Path]:
    """Generate the synthetic training (and optional test) swath."""
    if cfg.doc["synth"] is None:
        raise ValueError("config has no synth section")
    n_bg = int(cfg.doc["synth"].get("n_background", 100))
    written = []
    for split in _splits(cfg) if cfg.doc["paths"]["test_raster"] is None else ("train",):
        scfg = cfg.synth_config(test=split == "test")
        img, sites = generate_labeled_dataset(scfg, n_bg)
        stem = "synth" + _suffix(split)
        written.append(save_raster(img, cfg.out / f"{stem}.json"))
        written.append(save_sites(sites, cfg.out / f"{stem}_sites.csv"))
        written.append(save_raster(generate_conventional(scfg, sites),
                                   cfg.out / f"{stem}_conventional.json"))
    return written


def _training_sites(cfg: PipelineConfig, img, split):
    sites = load_sites(cfg.input_sites(split))
    bg = cfg.doc["background"]
    if split == "train" and int(bg["n"]) > 0:
        extra = sample_background(img, sites, int(bg["n"]), float(bg["min_dist_m"]),
                                  np.random.SeedSequence([cfg.seed, 3]).generate_state(1)[0])
        sites = sites.concat(extra)
    return sites


@_stage("transform")
def stage_transform(cfg: PipelineConfig) -> list[Path]:
    """Band configuration of each input raster."""
    written = []
    for split in _splits(cfg):
        img = load_raster(cfg.input_raster(split))
        out = build_band_configuration(img, cfg.doc["band_configuration"], cfg.ktt())
        written.append(save_raster(out, cfg.out / f"transform{_suffix(split)}.json"))
    return written


@_stage("extract")
def stage_extract(cfg: PipelineConfig) -> list[Path]:
    """Annuli features at the site locations of each split."""
    written = []
    table = cfg.radii()
    for split in _splits(cfg):
        img = load_raster(cfg.out / f"transform{_suffix(split)}.json")
        sites = _training_sites(cfg, img, split)
        fm = extract_features(img, sites, table, n_jobs=cfg.n_jobs)
        written.append(save_features(fm, cfg.out / f"extract{_suffix(split)}.csv"))
        written.append(save_sites(sites, cfg.out / f"extract{_suffix(split)}_sites.csv"))
    return written


@_stage("train")
def stage_train(cfg: PipelineConfig) -> list[Path]:
    """Nested LOOCV assessment and the full-data model."""
    fm = load_features(cfg.out / "extract.csv")
    if fm.labels is None:
        raise ValueError("training features need labels")
    settings = cfg.cv_settings()
    res = nested_loocv(fm.values, fm.labels, settings=settings, n_jobs=cfg.n_jobs)
    rows = ([i, str(int(y)), _fmt(s), str(int(d))]
            for i, y, s, d in zip(fm.ids, fm.labels, res.scores, res.d_stars))
    loocv = _write_csv(cfg.out / "train_loocv.csv", ("id", "label", "score", "d_star"), rows)
    model = train_full(fm.values, fm.labels, settings=settings, columns=fm.columns)
    meta = {"d_max": res.d_max, "warnings": res.warnings}
    return [loocv, model.save(cfg.out / "train.json"),
            _write_json(cfg.out / "train_meta.json", meta)]


@_stage("predict")
def stage_predict(cfg: PipelineConfig) -> list[Path]:
    """Score the test sites with the full-data model."""
    if not cfg.has_test():
        logger.info("no test data configured; predict skipped")
        return []
    model = TrainedApm.load(cfg.out / "train.json")
    fm = load_features(cfg.out / "extract_test.csv")
    if model.columns and tuple(model.columns) != fm.columns:
        raise ValueError("test feature columns differ from the training columns")
    scores = model.score(fm.values)
    labels = fm.labels if fm.labels is not None else np.full(len(fm.ids), -1)
    rows = ([i, "" if y < 0 else str(int(y)), _fmt(s)] for i, y, s in zip(fm.ids, labels, scores))
    return [_write_csv(cfg.out / "predict.csv", ("id", "label", "enhanced"), rows)]


def _read_table(path: Path, score_col: str):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    ids = tuple(r["id"] for r in rows)
    labels = np.array([int(r["label"]) if r["label"] != "" else -1 for r in rows])
    return ids, labels, np.array([float(r[score_col]) for r in rows])


def _conventional_scores(cfg: PipelineConfig, split: str, ids) -> np.ndarray | None:
    src = cfg.conventional_source(split)
    if src is None:
        return None
    if src.suffix == ".json":
        sites = load_sites(cfg.out / f"extract{_suffix(split)}_sites.csv")
        vals = sample_conventional(load_raster(src), sites)
        by_id = dict(zip(sites.ids, vals))
    else:
        col = cfg.doc["paths"]["conventional_column"]
        with open(src, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or "id" not in reader.fieldnames or col not in reader.fieldnames:
                raise ValueError(f"{src}: needs columns 'id' and {col!r}")
            by_id = {r["id"]: float(r[col]) for r in reader}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise SiteTableError(f"no conventional score for site(s) {missing}", missing)
    vals = np.array([by_id[i] for i in ids], dtype=np.float64)
    return vals if src.suffix == ".json" else snap_conventional(vals)


def _enhanced(cfg: PipelineConfig, split: str):
    if split == "train":
        return _read_table(cfg.out / "train_loocv.csv", "score")
    return _read_table(cfg.out / "predict.csv", "enhanced")


@_stage("combine")
def stage_combine(cfg: PipelineConfig, gamma: float | None = None) -> list[Path]:
    """Convex combination with the conventional scores.

    With ``gamma=None`` the gamma grid is searched on each split's own
    scores and the combination is written at gamma*.
    """
    written = []
    for split in _splits(cfg):
        ids, labels, enh = _enhanced(cfg, split)
        conv = _conventional_scores(cfg, split, ids)
        if conv is None:
            logger.info("no conventional scores for %s; combine skipped", split)
            continue
        if (labels < 0).any():
            raise ValueError(f"{split} scores lack labels")
        pairs = ScorePairs(ids, conv, enh, labels)
        if gamma is None:
            grid = cfg.gamma_grid()
            gstar, aucs = select_gamma(_scored(pairs), grid)
            written.append(write_gamma_csv(grid, aucs, cfg.out / f"combine_{split}_gamma.csv"))
        else:
            gstar = float(gamma)
        written.append(write_scores_csv(pairs, convex_combine(pairs, gstar),
                                        cfg.out / f"combine_{split}.csv"))
    return written


def _scored(pairs: ScorePairs) -> ScorePairs:
    """Drop rejected (NaN) enhanced scores before ranking."""
    keep = ~np.isnan(pairs.enhanced)
    if keep.all():
        return pairs
    idx = np.flatnonzero(keep)
    return ScorePairs(tuple(pairs.ids[i] for i in idx), pairs.conventional[idx],
                      pairs.enhanced[idx], pairs.labels[idx])


def _read_gamma_csv(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["gamma"]) for r in rows]), np.array([float(r["auc"]) for r in rows])


def _fold_d_counts(path: Path) -> dict:
    with open(path, newline="") as fh:
        ds = [int(r["d_star"]) for r in csv.DictReader(fh)]
    return {str(k): v for k, v in sorted(Counter(ds).items())}


def _roc_summary(curve, levels):
    return {"auc": curve.auc, "n_pos": curve.n_pos, "n_neg": curve.n_neg,
            "tnr_at_fnr": {_fmt(k): v for k, v in tnr_at_fnr(curve, levels).items()}}


@_stage("evaluate")
def stage_evaluate(cfg: PipelineConfig) -> list[Path]:
    """ROC curves, plots and the JSON report."""
    levels = [float(v) for v in cfg.doc["fnr_levels"]]
    written = []
    model = TrainedApm.load(cfg.out / "train.json")
    meta = json.loads((cfg.out / "train_meta.json").read_text())
    report = {
        "band_configuration": cfg.doc["band_configuration"],
        "classifier": cfg.doc["classifier"],
        "seed": cfg.seed,
        "d_max": meta["d_max"],
        "d_star": model.d_star,
        "cv_record": [None if np.isnan(v) else float(v) for v in model.cv_record],
        "fold_d_star_counts": _fold_d_counts(cfg.out / "train_loocv.csv"),
        "splits": {},
        "warnings": meta["warnings"],
    }
    for split in _splits(cfg):
        ids, labels, enh = _enhanced(cfg, split)
        entry: dict = {"n": len(ids), "n_rejected": int(np.isnan(enh).sum())}
        entry["rejection_rate"] = entry["n_rejected"] / max(len(ids), 1)
        if (labels < 0).any():
            entry["note"] = "unlabeled; no ROC"
            report["splits"][split] = entry
            continue
        curves = {"enhanced": roc_curve(enh, labels)}
        comb_path = cfg.out / f"combine_{split}.csv"
        if comb_path.exists():
            pairs, combined = read_scores_csv(comb_path)
            curves["conventional"] = roc_curve(pairs.conventional[~np.isnan(pairs.enhanced)],
                                               pairs.labels[~np.isnan(pairs.enhanced)])
            curves["combined"] = roc_curve(combined, pairs.labels)
            gpath = cfg.out / f"combine_{split}_gamma.csv"
            if gpath.exists():
                grid, aucs = _read_gamma_csv(gpath)
                gstar = float(grid[aucs == aucs.max()].min())
                entry["gamma_star"] = gstar
                written.append(plot_gamma(grid, aucs, cfg.out / f"evaluate_{split}_gamma.svg", gstar))
        for name, c in curves.items():
            entry[name] = _roc_summary(c, levels)
            written.append(write_roc_csv(c, cfg.out / f"evaluate_{split}_roc_{name}.csv"))
        written.append(plot_roc(curves, cfg.out / f"evaluate_{split}_roc.svg",
                                f"ROC ({split})"))
        report["splits"][split] = entry
    written.append(_write_json(cfg.out / "report.json", report))
    return written


STAGES = {
    "synth": stage_synth,
    "transform": stage_transform,
    "extract": stage_extract,
    "train": stage_train,
    "predict": stage_predict,
    "combine": stage_combine,
    "evaluate": stage_evaluate,
}


def run_pipeline(cfg: PipelineConfig) -> dict:
    """All stages in order; returns the report.

    The synth stage runs only when the training raster is not given
    explicitly and the config has a synth section.
    """
    if cfg.doc["paths"]["train_raster"] is None:
        stage_synth(cfg)
    for name in ("transform", "extract", "train", "predict", "combine", "evaluate"):
        STAGES[name](cfg)
    return json.loads((cfg.out / "report.json").read_text())


# -- band-set comparison -----------------------------------------------------------------


def _mode(values) -> int:
    counts = Counter(int(v) for v in values)
    top = max(counts.values())
    return min(k for k, c in counts.items() if c == top)


@_stage("compare-bands")
def compare_band_sets(cfg: PipelineConfig, set_names=None) -> list[dict]:
    """Training-assessment AUC and d* per band configuration."""
    names = list(cfg.doc["compare_band_sets"] if set_names is None else set_names)
    if not names:
        raise ValueError("no band sets to compare")
    unique = []
    for n in names:
        if n.upper() in [u.upper() for u in unique]:
            logger.warning("duplicate band set %r ignored", n)
            continue
        unique.append(n)
    if cfg.doc["paths"]["train_raster"] is None and not cfg.input_raster("train").exists():
        stage_synth(cfg)
    img = load_raster(cfg.input_raster("train"))
    sites = _training_sites(cfg, img, "train")
    settings = cfg.cv_settings()
    rows, curves = [], {}
    for name in unique:
        try:
            bdr = build_band_configuration(img, name, cfg.ktt())
        except BandError as e:
            raise StageError("compare-bands", f"band set {name}: {e}") from e
        fm = extract_features(bdr, sites, cfg.radii(), n_jobs=cfg.n_jobs)
        res = nested_loocv(fm.values, fm.labels, settings=settings, n_jobs=cfg.n_jobs)
        curve = roc_curve(res.scores, res.labels)
        curves[name] = curve
        rows.append({"name": name, "bdr_count": bdr.header.band_count, "auc": curve.auc,
                     "d_star": _mode(res.d_stars)})
    _write_csv(cfg.out / "compare-bands.csv", ("name", "bdr_count", "auc", "d_star"),
               ([r["name"], str(r["bdr_count"]), _fmt(r["auc"]), str(r["d_star"])] for r in rows))
    plot_roc(curves, cfg.out / "compare-bands.svg", "Band configurations")
    return rows
