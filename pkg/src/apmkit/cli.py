"""
Command-line entry point: ``apmkit <subcommand> --config c.json [overrides]``.

Exit status is 0 on success. Failures print one JSON object on stderr
(``error``, ``stage``, ``message``, ``site_ids``) and exit with status 1;
argument errors print usage and exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import ApmkitError
from .pipeline import (
    DEFAULT_CONFIG, STAGES, PipelineConfig, StageError, _merge, compare_band_sets, run_pipeline,
    set_dotted,
)

logger = logging.getLogger("apmkit")

# flag -> dotted config key
_OVERRIDES = {
    "output_dir": "output_dir",
    "seed": "seed",
    "n_jobs": "n_jobs",
    "band_config": "band_configuration",
    "radii": "radii",
    "classifier": "classifier.name",
    "shrinkage": "classifier.shrinkage",
    "priors": "classifier.priors",
    "k": "classifier.k",
    "l": "classifier.l",
    "d_max": "classifier.d_max",
    "pca_strategy": "classifier.pca_strategy",
    "variance_threshold": "classifier.variance_threshold",
    "train_raster": "paths.train_raster",
    "train_sites": "paths.train_sites",
    "test_raster": "paths.test_raster",
    "test_sites": "paths.test_sites",
    "conventional_train": "paths.conventional_train",
    "conventional_test": "paths.conventional_test",
}


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON pipeline config (default: built-in defaults)")
    p.add_argument("--output-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-jobs", type=int)
    p.add_argument("--band-config", help="BDR15, BDR36, BDR66, BDR78 or IDENTITY")
    p.add_argument("--radii", help="radii table CSV (index,r_in,r_out)")
    p.add_argument("--classifier", choices=("lda", "knn"))
    p.add_argument("--shrinkage", type=float)
    p.add_argument("--priors", choices=("equal", "empirical"))
    p.add_argument("--k", type=int)
    p.add_argument("--l", type=int)
    p.add_argument("--d-max", type=int)
    p.add_argument("--pca-strategy", choices=("cv", "variance_threshold"))
    p.add_argument("--variance-threshold", type=float)
    p.add_argument("--standardize", action="store_true", default=None)
    p.add_argument("--train-raster")
    p.add_argument("--train-sites")
    p.add_argument("--test-raster")
    p.add_argument("--test-sites")
    p.add_argument("--conventional-train")
    p.add_argument("--conventional-test")
    p.add_argument("--gamma-grid", help="comma-separated gamma values")
    p.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                   help="override any config key, e.g. classifier.k=7")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apmkit", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")
    common = _common()
    helps = {
        "synth": "generate a synthetic swath, site table and conventional score raster",
        "transform": "apply the band configuration to the input raster(s)",
        "extract": "annuli median/MAD features at the sites",
        "train": "nested LOOCV assessment and full-data model",
        "predict": "score the test sites with the trained model",
        "combine": "convex combination with conventional scores",
        "evaluate": "ROC/AUC, plots and the JSON report",
        "run": "the full pipeline",
        "compare-bands": "training assessment per band configuration",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, parents=[common], help=text, description=text)
        if name == "combine":
            sp.add_argument("--gamma", type=float, help="fixed gamma (default: grid search)")
        if name == "compare-bands":
            sp.add_argument("--sets", help="comma-separated band configuration names")
    return parser


def _overrides(args) -> dict:
    out = {}
    for flag, key in _OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = v
    if args.standardize:
        out["classifier.standardize"] = True
    if args.gamma_grid is not None:
        out["gamma_grid"] = [float(g) for g in args.gamma_grid.split(",") if g.strip()]
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=JSON, got {item!r}")
        try:
            out[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            out[key.strip()] = raw
    return out


def _config(args) -> PipelineConfig:
    ov = _overrides(args)
    if args.config:
        return PipelineConfig.load(args.config, ov)
    doc = _merge(DEFAULT_CONFIG, {})
    for k, v in ov.items():
        set_dotted(doc, k, v)
    return PipelineConfig.from_json(doc)


def _dispatch(args) -> dict:
    cfg = _config(args)
    cmd = args.command
    if cmd == "run":
        report = run_pipeline(cfg)
        return {"command": cmd, "report": str(cfg.out / "report.json"),
                "auc": {k: v.get("enhanced", {}).get("auc") for k, v in report["splits"].items()}}
    if cmd == "compare-bands":
        sets = None if args.sets is None else [s.strip() for s in args.sets.split(",") if s.strip()]
        rows = compare_band_sets(cfg, sets)
        return {"command": cmd, "table": rows}
    if cmd == "combine":
        written = STAGES[cmd](cfg, args.gamma)
    else:
        written = STAGES[cmd](cfg)
    return {"command": cmd, "written": [str(p) for p in written]}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        summary = _dispatch(args)
    except StageError as e:
        print(json.dumps(e.to_json()), file=sys.stderr)
        return 1
    except (ApmkitError, ValueError, KeyError, OSError) as e:
        err = {"error": type(e).__name__, "stage": None, "message": str(e),
               "site_ids": list(getattr(e, "site_ids", []))}
        print(json.dumps(err), file=sys.stderr)
        return 1
    print(json.dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
