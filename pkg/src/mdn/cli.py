"""Command-line front door: ``mdn gen-data | train | gradcheck | compare``.

Experiment specs are flat ``key = value`` text. ``[section]`` headers prefix
the keys that follow (``[train]`` then ``beta = 5`` gives ``train.beta``);
``#`` starts a comment. Any key may be overridden on the command line as
``section.key=value``.

Exit codes: 0 ok, 1 configuration, 2 data, 3 numeric.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import platform
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataBundle, DatasetConfig, load_bundle, make_bundle, save_bundle, summarize
from .errors import ConfigError, DataError, MDNError
from .gradcheck import run_all
from .meta import TrainConfig, TrainResult, config_dict, train

log = logging.getLogger("mdn")

METRIC_KEYS = ("unbiased_acc", "worst_group_acc", "bias_conflict_acc", "eod")


# ------------------------------------------------------------------ spec

@dataclass
class ExperimentSpec:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output: str = "runs/default"
    repetitions: int = 1
    seed: int = 0
    bundle: str | None = None

    def validate(self):
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        self.dataset.validate()
        self.train.validate(self.dataset.n_classes, self.dataset.n_bias)
        return self

    def seeds(self):
        return [self.seed + r for r in range(self.repetitions)]


def _coerce(raw: str, like, key: str):
    raw = raw.strip()
    if raw.lower() == "none":
        return None
    try:
        if isinstance(like, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    return raw or None


_INT_OPTIONAL = {"n_val"}


def parse_kv(text: str) -> dict:
    out, section = {}, ""
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        key = key.strip()
        out[f"{section}.{key}" if section else key] = value.strip()
    return out


def build_spec(values: dict) -> ExperimentSpec:
    spec = ExperimentSpec()
    targets = {"dataset": spec.dataset, "train": spec.train}
    for key, raw in values.items():
        section, _, name = key.rpartition(".")
        if section in ("", "run"):
            obj = spec
        elif section in targets:
            obj = targets[section]
        else:
            raise ConfigError(f"unknown section in key {key!r}")
        names = {f.name for f in fields(obj)}
        if name not in names or (obj is spec and name in ("dataset", "train")):
            raise ConfigError(f"unknown key {key!r}")
        cur = getattr(obj, name)
        if cur is None and name in _INT_OPTIONAL:
            cur = 0
        setattr(obj, name, _coerce(raw, cur if cur is not None else "", key))
    return spec


def load_spec(path: str | None, overrides=()) -> ExperimentSpec:
    values = {}
    if path:
        try:
            values.update(parse_kv(Path(path).read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        values[k.strip()] = v
    return build_spec(values)


def dump_spec(spec: ExperimentSpec) -> str:
    def fmt(v):
        if isinstance(v, (tuple, list)):
            return ",".join(str(x) for x in v)
        return "none" if v is None else repr(v) if isinstance(v, float) else str(v)

    lines = ["[run]"]
    for k in ("output", "repetitions", "seed", "bundle"):
        lines.append(f"{k} = {fmt(getattr(spec, k))}")
    for section, obj in (("dataset", spec.dataset), ("train", spec.train)):
        lines.append(f"\n[{section}]")
        for f in fields(obj):
            lines.append(f"{f.name} = {fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ run artifacts

def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(type(x))


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, default=_jsonable) + "\n"


def _epoch_row(rec):
    row = {"epoch": rec.epoch}
    for name, rep in (("val", rec.val), ("test", rec.test)):
        for k in METRIC_KEYS:
            row[f"{name}_{k}"] = getattr(rep, k)
    return row


def write_csv(path, rows, header):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(["" if r[h] is None else repr(r[h]) if isinstance(r[h], float) else r[h]
                        for h in header])


def run_one(spec: ExperimentSpec, seed: int, bundle: DataBundle, outdir: Path) -> dict:
    outdir.mkdir(parents=True, exist_ok=True)
    cfg = TrainConfig(**{**config_dict(spec.train), "seed": seed})
    C, B = bundle.n_classes, bundle.n_bias
    cells = [f"m_{y}_{b}" for y in range(C) for b in range(B)]

    log_fh = open(outdir / "log.jsonl", "w")
    margins_fh = open(outdir / "margins.csv", "w")
    margins_fh.write("iteration," + ",".join(cells) + "\n")
    margins_fh.write("0," + ",".join(["0.0"] * len(cells)) + "\n")

    def on_iteration(state):
        rec = state.history[-1]
        log_fh.write(json.dumps({k: (v.tolist() if isinstance(v, np.ndarray) else v)
                                 for k, v in rec.items()}) + "\n")
        margins_fh.write(f"{state.t}," + ",".join(repr(float(v)) for v in state.margins.ravel()) + "\n")
        # history is persisted, keep memory flat
        state.history.clear()

    epoch_rows = []

    def on_epoch(rec):
        epoch_rows.append(_epoch_row(rec))
        log_fh.flush()
        margins_fh.flush()

    try:
        result: TrainResult = train(cfg, bundle, on_iteration, on_epoch)
    finally:
        log_fh.close()
        margins_fh.close()
    write_csv(outdir / "epochs.csv", epoch_rows, list(epoch_rows[0]))
    result.best_predictions.save(outdir / "predictions.csv")
    report = {
        "mode": cfg.mode,
        "seed": seed,
        "rho": spec.dataset.rho,
        "dataset": spec.dataset.kind,
        "best_epoch": result.best_epoch,
        "iterations": result.state.t,
        "margins": result.best_margins,
        "test": result.best_test.to_dict(),
    }
    (outdir / "report.json").write_text(dumps(report))
    return report


def _bundle_for(spec: ExperimentSpec, seed: int) -> DataBundle:
    if spec.bundle:
        return load_bundle(spec.bundle)
    ds = DatasetConfig(**{**asdict(spec.dataset), "seed": seed})
    return make_bundle(ds)


def aggregate_reports(reports: list[dict]) -> dict:
    mean, std = {}, {}
    for k in METRIC_KEYS:
        vals = [r["test"][k] for r in reports if r["test"][k] is not None]
        mean[k] = float(np.mean(vals)) if vals else None
        std[k] = float(np.std(vals)) if vals else None
    return {"mode": reports[0]["mode"], "rho": reports[0]["rho"],
            "dataset": reports[0]["dataset"], "runs": reports, "mean": mean, "std": std}


def cmd_train(spec: ExperimentSpec) -> dict:
    spec.validate()
    out = Path(spec.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.cfg").write_text(dump_spec(spec))
    (out / "meta.json").write_text(dumps({
        "package": __version__, "numpy": np.__version__,
        "python": platform.python_version(), "seeds": spec.seeds()}))
    reports = []
    for seed in spec.seeds():
        bundle = _bundle_for(spec, seed)
        reports.append(run_one(spec, seed, bundle, out / f"seed_{seed}"))
    summary = aggregate_reports(reports)
    (out / "report.json").write_text(dumps(summary))
    return summary


def cmd_gen_data(spec: ExperimentSpec, path: str | None = None) -> Path:
    spec.dataset.validate()
    ds = DatasetConfig(**{**asdict(spec.dataset), "seed": spec.seed})
    bundle = make_bundle(ds)
    target = Path(path) if path else Path(spec.output) / "bundle.mdnb"
    target.parent.mkdir(parents=True, exist_ok=True)
    save_bundle(bundle, target)
    text = summarize(bundle, ds.rho)
    target.with_suffix(".summary.txt").write_text(text + "\n")
    print(text)
    return target


def cmd_gradcheck(seed=0, instances=50, meta_instances=20, corrupt=None, out=None) -> bool:
    out = out or sys.stdout
    results = run_all(seed, instances, meta_instances, corrupt)
    ok = True
    for r in results:
        ok &= r.passed
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:16s} max_rel_err={r.max_rel_error:.3e} "
              f"tol={r.tolerance:.0e} instances={r.instances}", file=out)
    return ok


# ------------------------------------------------------------------ compare

COMPARE_HEADER = ["mode", "rho", "runs"] + [f"{k}_{s}" for k in METRIC_KEYS for s in ("mean", "std")]


def cmd_compare(run_dirs, out_dir) -> list[dict]:
    groups: dict = {}
    for d in run_dirs:
        path = Path(d) / "report.json"
        if not path.exists():
            raise DataError(f"run directory {d} has no report.json")
        rep = json.loads(path.read_text())
        for run in rep["runs"]:
            groups.setdefault((run["mode"], run["rho"]), []).append(run)
    if sum(len(v) for v in groups.values()) < 2:
        raise ConfigError("compare needs at least two completed runs")
    rows = []
    for (mode, rho), runs in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        row = {"mode": mode, "rho": rho, "runs": len(runs)}
        for k in METRIC_KEYS:
            vals = [r["test"][k] for r in runs if r["test"][k] is not None]
            row[f"{k}_mean"] = float(np.mean(vals)) if vals else None
            row[f"{k}_std"] = float(np.std(vals)) if vals else None
        rows.append(row)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "compare.csv", rows, COMPARE_HEADER)
    modes = sorted({r["mode"] for r in rows})
    rhos = sorted({r["rho"] for r in rows})
    plot_rows = []
    for rho in rhos:
        pr = {"rho": rho}
        for m in modes:
            hit = [r for r in rows if r["mode"] == m and r["rho"] == rho]
            pr[m] = hit[0]["unbiased_acc_mean"] if hit else None
        plot_rows.append(pr)
    write_csv(out / "compare_plot.csv", plot_rows, ["rho", *modes])
    return rows


def read_compare_table(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            row = {"mode": r["mode"], "rho": float(r["rho"]), "runs": int(r["runs"])}
            for h in COMPARE_HEADER[3:]:
                row[h] = float(r[h]) if r[h] != "" else None
            rows.append(row)
    return rows


def format_compare(rows) -> str:
    buf = io.StringIO()
    buf.write(f"{'mode':12s} {'rho':>7s} {'unbiased':>16s} {'worst':>16s} {'conflict':>16s} {'eod':>16s}\n")
    for r in rows:
        cells = []
        for k in METRIC_KEYS:
            m, s = r[f"{k}_mean"], r[f"{k}_std"]
            cells.append("n/a".rjust(16) if m is None else f"{m:9.4f}±{s:6.4f}")
        buf.write(f"{r['mode']:12s} {r['rho']:7.4g} " + " ".join(cells) + "\n")
    return buf.getvalue()


# ------------------------------------------------------------------ entry point

def build_parser():
    p = argparse.ArgumentParser(prog="mdn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a dataset bundle")
    g.add_argument("config", nargs="?")
    g.add_argument("overrides", nargs="*", help="section.key=value")
    g.add_argument("-o", "--out", help="bundle path (default <output>/bundle.mdnb)")

    t = sub.add_parser("train", help="train one mode over the configured seeds")
    t.add_argument("config", nargs="?")
    t.add_argument("overrides", nargs="*")

    c = sub.add_parser("gradcheck", help="finite-difference verification suites")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--instances", type=int, default=50)
    c.add_argument("--meta-instances", type=int, default=20)
    c.add_argument("--corrupt", choices=["logits", "backprop", "meta"], help=argparse.SUPPRESS)

    m = sub.add_parser("compare", help="merge finished runs into a comparison table")
    m.add_argument("runs", nargs="+")
    m.add_argument("-o", "--out", default="compare")
    return p


def _split_config(args):
    # a lone override given without a config file lands in ``config``
    if args.config and "=" in args.config:
        return None, [args.config, *args.overrides]
    return args.config, args.overrides


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-data":
            cmd_gen_data(load_spec(*_split_config(args)), args.out)
        elif args.command == "train":
            summary = cmd_train(load_spec(*_split_config(args)))
            print(dumps({k: summary[k] for k in ("mode", "rho", "mean", "std")}), end="")
        elif args.command == "gradcheck":
            if not cmd_gradcheck(args.seed, args.instances, args.meta_instances, args.corrupt):
                return 3
        elif args.command == "compare":
            rows = cmd_compare(args.runs, args.out)
            print(format_compare(rows), end="")
    except MDNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
