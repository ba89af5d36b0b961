"""``feta`` command line: extract, account, train, synth, eval, sweep.

Every command reads one JSON run config (``--config``). Flags override the
config; ``--seed`` replaces the master seed everywhere. Outputs carry no
timestamps, so identical inputs give byte-identical files.

Exit codes: 0 ok, 2 config error, 3 data error, 4 infeasible budget,
5 missing artifact, 6 training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from pathlib import Path

from .accountant import budget_ratios, format_ledger_table, ledger_for
from .data_eval import EvalReport, LabeledDataset, downscale, evaluate, load_idx, load_toy_digits, save_idx
from .errors import ConfigError, DataError, FetaError, MissingArtifactError
from .features import extract_features, load_features, save_features
from .models import DiffusionModel, load_checkpoint, save_checkpoint
from .pipeline import (CurriculumConfig, allocation_sweep, evaluation_projection, format_sweep_table, plan_budget,
                       run_curriculum, synthesize, feature_config, _jsonable)

SCHEMA_VERSION = 1

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
SYNTH_FILES = ("synth-images-idx3-ubyte", "synth-labels-idx1-ubyte")

# keys of the run config that are not curriculum knobs
RUN_KEYS = {
    "schema_version": None,
    "data_dir": None,
    "features_dir": "features",
    "checkpoint": "model.ckpt",
    "out_dir": "out",
    "downscale": 1,
    "classes": None,
    "synth_count": 1000,
    "sweep_sigma_t": [],
    "sweep_sigma_f": [],
}
PATH_KEYS = ("data_dir", "features_dir", "checkpoint", "out_dir")


@dataclasses.dataclass
class RunConfig:
    curriculum: CurriculumConfig
    data_dir: Path | None
    features_dir: Path
    checkpoint: Path
    out_dir: Path
    downscale: int = 1
    classes: list | None = None
    synth_count: int = 1000
    sweep_sigma_t: list = dataclasses.field(default_factory=list)
    sweep_sigma_f: list = dataclasses.field(default_factory=list)

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path = Path(".")) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("run config must be a JSON object")
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
        run = {k: doc.get(k, v) for k, v in RUN_KEYS.items() if k != "schema_version"}
        curriculum = CurriculumConfig.from_dict({k: v for k, v in doc.items() if k not in RUN_KEYS})
        for key in PATH_KEYS:
            if run[key] is not None:
                run[key] = (base_dir / run[key]).resolve()
        if not isinstance(run["downscale"], int) or run["downscale"] < 1:
            raise ConfigError("downscale must be a positive integer")
        if not isinstance(run["synth_count"], int) or run["synth_count"] < 1:
            raise ConfigError("synth_count must be a positive integer")
        return cls(curriculum, **run)

    def to_dict(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION, **self.curriculum.to_dict()}
        for key in RUN_KEYS:
            if key == "schema_version":
                continue
            v = getattr(self, key)
            out[key] = str(v) if isinstance(v, Path) else v
        return out


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if isinstance(doc, dict):
        doc.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig.from_dict(doc, path.parent)


def _load_split(data_dir: Path, files, rc: RunConfig, required: bool = True) -> LabeledDataset | None:
    paths = [_find(data_dir / f) for f in files]
    if not all(p.exists() for p in paths):
        if not required:
            return None
        missing = [str(p) for p in paths if not p.exists()]
        raise DataError(f"missing data files: {missing}")
    ds = load_idx(*paths)
    if rc.classes is not None:
        keep = [int(c) for c in rc.classes]
        mask = [int(y) in keep for y in ds.labels]
        remap = {c: i for i, c in enumerate(keep)}
        ds = LabeledDataset(ds.images[mask], [remap[int(y)] for y in ds.labels[mask]], ds.shape, len(keep))
    if rc.downscale > 1:
        ds = downscale(ds, rc.downscale)
    return ds


def _find(path: Path) -> Path:
    gz = path.with_name(path.name + ".gz")
    return gz if not path.exists() and gz.exists() else path


def _data_dir(rc: RunConfig) -> Path:
    if rc.data_dir is None:
        raise ConfigError("no data directory: pass --data or set data_dir")
    if not rc.data_dir.is_dir():
        raise DataError(f"data directory {rc.data_dir} does not exist")
    return rc.data_dir


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n")


def _json_default(x):
    if isinstance(x, Path):
        return str(x)
    raise TypeError(f"cannot serialise {type(x).__name__}")


def _finite(x):
    return x if not isinstance(x, float) or math.isfinite(x) else ("inf" if x > 0 else "nan")


# ---------------------------------------------------------------------------
# commands


def cmd_extract(args, rc: RunConfig) -> int:
    cfg = rc.curriculum
    train = _load_split(_data_dir(rc), TRAIN_FILES, rc)
    if not (cfg.uses_spatial or cfg.uses_frequency):
        raise ConfigError(f"order {cfg.order!r} uses no features; nothing to extract")
    central, freq = extract_features(train, feature_config(cfg), spatial=cfg.uses_spatial,
                                     frequency=cfg.uses_frequency)
    out = Path(args.out).resolve() if args.out else rc.features_dir
    save_features(out, central, freq, train.shape)
    specs = [s for s in (central and central.sgm_spec(), freq and freq.sgm_spec()) if s is not None]
    if specs:
        ledger = ledger_for(specs)
        shares = budget_ratios({s.label: s for s in specs}, cfg.delta)["shares"]
        print(format_ledger_table(ledger, cfg.delta, shares))
    else:
        print("feature queries ran without noise: no finite privacy guarantee")
    print(f"wrote {out / 'features.json'}")
    return 0


def cmd_account(args, rc: RunConfig) -> int:
    cfg = rc.curriculum
    plan = plan_budget(cfg)
    specs = plan["specs"]
    if not specs:
        doc = {"epsilon": "inf", "delta": cfg.delta, "sigma_d": 0.0, "t_d": plan["t_d"], "shares": None,
               "specs": []}
        print(json.dumps(doc, indent=2, sort_keys=True) if args.json else "non-private run: epsilon = inf")
        return 0
    ledger = ledger_for(specs)
    ratios = budget_ratios({s.label: s for s in specs}, cfg.delta)
    if args.json:
        doc = {"ledger": ledger.to_dict(cfg.delta), "sigma_d": plan["sigma_d"], "t_d": plan["t_d"],
               "shares": ratios["shares"], "alpha": ratios["alpha"], "epsilon": ratios["epsilon"],
               "delta": cfg.delta, "target_eps": _finite(cfg.target_eps)}
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        print(format_ledger_table(ledger, cfg.delta, ratios["shares"]))
        print(f"sigma_d = {plan['sigma_d']:.6g}   t_d = {plan['t_d']}")
    return 0


def cmd_train(args, rc: RunConfig) -> int:
    cfg = rc.curriculum
    data_dir = _data_dir(rc)
    features = None
    if cfg.uses_spatial or cfg.uses_frequency:
        features = load_features(Path(args.features).resolve() if args.features else rc.features_dir)
    train = _load_split(data_dir, TRAIN_FILES, rc)
    test = _load_split(data_dir, TEST_FILES, rc, required=False)
    out = Path(args.out).resolve() if args.out else rc.out_dir
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "dpsgd.jsonl", "w") as log:
        model, report = run_curriculum(cfg, train, test, log=log, features=features)
    ckpt = Path(args.checkpoint).resolve() if args.checkpoint else rc.checkpoint
    save_checkpoint(ckpt, model, cfg.seed)
    (out / "report.json").write_text(report.to_json())
    timing = "  ".join(f"{k}={v:.1f}s" for k, v in report.wall_clock.items())
    print(f"epsilon = {report.epsilon:.6g}  sigma_d = {report.sigma_d:.6g}  t_d = {report.t_d}")
    print(f"wall clock: {timing}", file=sys.stderr)
    print(f"wrote {ckpt} and {out / 'report.json'}")
    return 0


def cmd_synth(args, rc: RunConfig) -> int:
    ckpt = Path(args.checkpoint).resolve() if args.checkpoint else rc.checkpoint
    model = load_checkpoint(ckpt)
    if not isinstance(model, DiffusionModel):
        raise DataError(f"{ckpt} holds a generator, not a diffusion model")
    count = args.count or rc.synth_count
    synth = synthesize(model, count, rc.curriculum.seed)
    out = Path(args.out).resolve() if args.out else rc.out_dir
    save_idx(synth, out / SYNTH_FILES[0], out / SYNTH_FILES[1])
    print(f"wrote {count} images to {out}")
    return 0


def cmd_eval(args, rc: RunConfig) -> int:
    cfg = rc.curriculum
    synth_dir = Path(args.synth).resolve() if args.synth else rc.out_dir
    paths = [_find(synth_dir / f) for f in SYNTH_FILES]
    if not all(p.exists() for p in paths):
        raise MissingArtifactError(f"no synthetic IDX files in {synth_dir}")
    synth = load_idx(*paths)
    test = _load_split(_data_dir(rc), TEST_FILES, rc)
    if synth.d != test.d:
        raise DataError(f"synthetic images have d={synth.d}, test images d={test.d}")
    synth = LabeledDataset(synth.images, synth.labels, test.shape, max(test.n_classes, synth.n_classes))
    report: EvalReport = evaluate(synth, test, evaluation_projection(cfg, test.d), cfg.seed, cfg.classifier_steps)
    doc = report.to_dict()
    if args.out:
        _write_json(Path(args.out), doc)
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def cmd_sweep(args, rc: RunConfig) -> int:
    cfg = rc.curriculum
    st = args.sigma_t or rc.sweep_sigma_t
    sf = args.sigma_f or rc.sweep_sigma_f
    if not st or not sf:
        raise ConfigError("a sweep needs sigma_t and sigma_f grids (--sigma-t / --sigma-f)")
    train = test = None
    if not args.no_train:
        data_dir = _data_dir(rc)
        train = _load_split(data_dir, TRAIN_FILES, rc)
        test = _load_split(data_dir, TEST_FILES, rc, required=False)
    cells = allocation_sweep(cfg, st, sf, train, test, train=not args.no_train)
    print("budget shares (%): spatial / frequency / DP-SGD")
    print(format_sweep_table(cells, "shares"))
    print("\nsigma_d")
    print(format_sweep_table(cells, "sigma_d"))
    if not args.no_train and test is not None:
        for value in ("accuracy", "rff_mmd"):
            print(f"\n{value}")
            print(format_sweep_table(cells, value))
    out = Path(args.out).resolve() if args.out else rc.out_dir / "sweep.json"
    _write_json(out, _jsonable(cells))
    return 0


def cmd_prepare_toy(args) -> int:
    """Write the bundled 8x8 digits (classes 0 and 1) as IDX train/test files."""
    train, test = load_toy_digits(seed=args.seed or 0)
    out = Path(args.out)
    save_idx(train, out / TRAIN_FILES[0], out / TRAIN_FILES[1])
    save_idx(test, out / TEST_FILES[0], out / TEST_FILES[1])
    print(f"wrote {len(train)} training and {len(test)} test images to {out}")
    return 0


COMMANDS = {
    "extract": cmd_extract,
    "account": cmd_account,
    "train": cmd_train,
    "synth": cmd_synth,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feta", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--seed", type=int, help="override the master seed")
        if data:
            p.add_argument("--data", help="directory with IDX files (overrides data_dir)")
        return p

    p = common(sub.add_parser("extract", help="privatise central images and frequency features"))
    p.add_argument("--out", help="feature directory (overrides features_dir)")
    p = common(sub.add_parser("account", help="print the privacy ledger of a config"), data=False)
    p.add_argument("--json", action="store_true", help="emit JSON instead of a table")
    p = common(sub.add_parser("train", help="warm up and fine-tune the diffusion model"))
    p.add_argument("--features", help="feature directory (overrides features_dir)")
    p.add_argument("--checkpoint", help="checkpoint path (overrides checkpoint)")
    p.add_argument("--out", help="report directory (overrides out_dir)")
    p = common(sub.add_parser("synth", help="sample labelled images from a checkpoint"), data=False)
    p.add_argument("--checkpoint", help="checkpoint path (overrides checkpoint)")
    p.add_argument("--count", type=int, help="number of images (overrides synth_count)")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p = common(sub.add_parser("eval", help="score synthetic images against real test data"))
    p.add_argument("--synth", help="directory with synthetic IDX files (default out_dir)")
    p.add_argument("--out", help="also write the report to this JSON file")
    p = common(sub.add_parser("sweep", help="grid over sigma_t x sigma_f at fixed total epsilon"))
    p.add_argument("--sigma-t", type=float, nargs="+", help="sigma_t grid")
    p.add_argument("--sigma-f", type=float, nargs="+", help="sigma_f grid")
    p.add_argument("--no-train", action="store_true", help="only calibrate; skip training")
    p.add_argument("--out", help="sweep JSON path (default out_dir/sweep.json)")
    p = sub.add_parser("prepare-toy", help="export the bundled 2-class 8x8 digits as IDX files")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        if args.command == "prepare-toy":
            return cmd_prepare_toy(args)
        overrides = {"seed": args.seed, "data_dir": getattr(args, "data", None)}
        if overrides["data_dir"] is not None:
            overrides["data_dir"] = str(Path(overrides["data_dir"]).resolve())
        rc = load_run_config(args.config, overrides)
        return COMMANDS[args.command](args, rc)
    except FetaError as exc:
        print(f"feta {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"feta {args.command}: ConfigError: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
