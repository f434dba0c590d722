"""Command-line entry point.

Every subcommand reads an optional JSON config of flat dotted keys and
accepts ``key=value`` overrides (values parsed as JSON when possible,
otherwise taken as strings).  ``data.*`` keys describe the synthetic
dataset; all other keys are training settings.  The whole config is
validated before anything is written.

Exit codes: 0 success, 2 config error, 3 data/format/io/checkpoint error,
4 diverged training.  Failures print one ``error=<code> <message>`` line
to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import phantom, spectral
from . import train as tr
from .errors import CacpsError

log = logging.getLogger("cacps")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
DATA_KEYS = ("n_per_domain", "labeled_fraction", "val_fraction", "test_fraction", "H", "W")
DICE_COLUMNS = ("dice_LV", "dice_MYO", "dice_RV", "dice_avg")
METHOD_ORDER = ("supervised", "single", "double")


def exit_code(err: CacpsError) -> int:
    if err.code == "config":
        return EXIT_CONFIG
    if err.code == "diverged":
        return EXIT_DIVERGED
    return EXIT_DATA


# --- config -----------------------------------------------------------------


def parse_override(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise CacpsError("config", f"override {text!r} is not key=value")
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return key.strip(), value


def load_config(path, overrides) -> dict:
    flat: dict = {}
    if path:
        try:
            flat = json.loads(Path(path).read_text())
        except OSError as exc:
            raise CacpsError("config", f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise CacpsError("config", f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(flat, dict):
            raise CacpsError("config", "config must be a JSON object of flat dotted keys")
    for item in overrides:
        k, v = parse_override(item)
        flat[k] = v
    return flat


class RunConfig:
    """Validated dataset and training settings from one flat dict."""

    def __init__(self, flat: dict):
        data = {k.split(".", 1)[1]: v for k, v in flat.items() if k.startswith("data.")}
        rest = {k: v for k, v in flat.items() if not k.startswith("data.")}
        unknown = sorted(f"data.{k}" for k in set(data) - set(DATA_KEYS))
        unknown += sorted(set(rest) - tr.TrainConfig.flat_keys())
        if unknown:
            raise CacpsError("config", f"unknown config keys: {unknown}")
        self.train = tr.TrainConfig.from_flat(rest)
        for k, v in data.items():
            ok = all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in (v if isinstance(v, list) else [v]))
            if not ok or (k in ("H", "W") and not isinstance(v, int)):
                raise CacpsError("config", f"bad value for data.{k}: {v!r}")
        self.data = phantom.DatasetConfig(**data, seed=self.train.seeds.data)


def _mkdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CacpsError("io", f"cannot create {path}: {exc}") from exc
    return path


def _data_dir(args, cfg: RunConfig) -> Path:
    return Path(args.data if args.data else cfg.train.data_dir)


# --- subcommands --------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig) -> None:
    manifest = phantom.build_dataset(cfg.data, Path(args.out))
    print(json.dumps({"samples": len(manifest.entries), "counts": manifest.counts()}, sort_keys=True))


def cmd_train(args, cfg: RunConfig) -> None:
    manifest = phantom.load_manifest(_data_dir(args, cfg))
    out = _mkdir(Path(args.out))
    results = tr.train(manifest, cfg.train, out)
    for m, r in sorted(results.items()):
        last = r.rows[-1]
        print(f"model {m}: L_total={last['L_total']:.6f} val_dice_avg={last.get('val_dice_avg', float('nan')):.4f}")


def cmd_augment(args, cfg: RunConfig) -> None:
    manifest = phantom.load_manifest(_data_dir(args, cfg))
    by_id = {e.sample_id: e for e in manifest.entries}
    wanted = [s for s in args.samples.split(",") if s]
    if not wanted:
        raise CacpsError("config", "no sample ids given")
    missing = [s for s in wanted + ([args.partner] if args.partner else []) if s not in by_id]
    if missing:
        raise CacpsError("data", f"unknown sample ids: {missing}")
    try:
        lambdas = [float(x) for x in args.lambdas.split(",")]
    except ValueError as exc:
        raise CacpsError("config", f"bad lambda list {args.lambdas!r}") from exc
    mixes = [spectral.MixConfig(lam, cfg.train.mask_ratio, cfg.train.mix_mode) for lam in lambdas]
    out = _mkdir(Path(args.out))
    rng = np.random.default_rng([cfg.train.seeds.shuffle, 99])
    ids = [e.sample_id for e in manifest.entries]
    items = []
    for sid in wanted:
        if args.partner:
            pid = args.partner
        else:
            others = [i for i in ids if i != sid]
            pid = others[int(rng.integers(len(others)))] if others else sid
        img = manifest.load(by_id[sid]).image
        partner = manifest.load(by_id[pid]).image
        for lam, mix in zip(lambdas, mixes):
            aug = spectral.fourier_augment(img, partner, mix)
            stem = f"{sid}_lam{lam:g}"
            files = {}
            for role, grid in (("original", img), ("partner", partner), ("augmented", aug)):
                files[role] = f"{stem}_{role}.phi"
                phantom.save_image(out / files[role], grid)
            items.append(
                {
                    "sample_id": sid,
                    "partner_id": pid,
                    "lambda": lam,
                    "max_abs_diff": float(np.max(np.abs(aug - img))),
                    "files": files,
                }
            )
    summary = {"mode": cfg.train.mix_mode, "mask_ratio": cfg.train.mask_ratio, "items": items}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for it in items:
        print(f"{it['sample_id']} lambda={it['lambda']:g} max|X-I|={it['max_abs_diff']:.6g}")


def _entries_for_split(manifest, split):
    entries = manifest.entries if split == "all" else manifest.select(split)
    if not entries:
        raise CacpsError("data", f"split {split!r} is empty")
    return entries


def cmd_infer(args, cfg: RunConfig) -> None:
    manifest = phantom.load_manifest(_data_dir(args, cfg))
    run = Path(args.run)
    ids = [int(m) for m in args.models.split(",")] if args.models else [m for m in (1, 2) if tr.checkpoint_paths(run, m)[0].exists()]
    if not ids or len(ids) > 2 or any(m not in (1, 2) for m in ids):
        raise CacpsError("checkpoint", f"no usable models in {run}")
    models = [tr.load_model(run, m) for m in ids]
    entries = _entries_for_split(manifest, args.split)
    images = np.stack([manifest.load(e).image for e in entries])
    _, pred = tr.ensemble_predict(models[0], models[1] if len(models) > 1 else None, images)
    out = _mkdir(Path(args.out))
    for e, mask in zip(entries, pred):
        phantom.save_mask(out / "masks" / f"{e.sample_id}.phm", mask)
    (out / "predictions.json").write_text(
        json.dumps({"run": str(run), "models": ids, "split": args.split, "samples": [e.sample_id for e in entries]}, indent=2)
        + "\n"
    )
    print(f"wrote {len(entries)} masks to {out / 'masks'}")


def cmd_eval(args, cfg: RunConfig) -> None:
    manifest = phantom.load_manifest(_data_dir(args, cfg))
    entries = _entries_for_split(manifest, args.split)
    unlabeled = [e.sample_id for e in entries if not e.labeled]
    if unlabeled:
        raise CacpsError("data", f"split {args.split!r} has samples without masks: {unlabeled[:3]}")
    pred_dir = Path(args.pred)
    preds = [phantom.load_mask(pred_dir / "masks" / f"{e.sample_id}.phm") for e in entries]
    truths = [manifest.load(e).mask for e in entries]
    res = tr.evaluate_dice(preds, truths, [e.sample_id for e in entries])
    out = _mkdir(Path(args.out))
    with open(out / "per_sample.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "method", *DICE_COLUMNS])
        for r in res.per_sample:
            w.writerow([r["sample_id"], args.method, *(repr(r[c]) for c in DICE_COLUMNS)])
    summary = res.summary_row()
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", *DICE_COLUMNS])
        w.writerow([args.method, *(repr(summary[c]) for c in DICE_COLUMNS)])
    print(" ".join(f"{c}={summary[c]:.4f}" for c in DICE_COLUMNS))


def read_summary_rows(paths) -> list[dict]:
    rows = []
    for p in paths:
        try:
            with open(p, newline="") as fh:
                reader = csv.DictReader(fh)
                cols = reader.fieldnames or []
                missing = [c for c in ("method", *DICE_COLUMNS) if c not in cols]
                if missing:
                    raise CacpsError("format", f"{p}: missing column(s) {', '.join(missing)}")
                for i, r in enumerate(reader, start=2):
                    if None in r or any(r.get(c) is None for c in cols):
                        raise CacpsError("format", f"{p}: line {i} has the wrong number of fields")
                    for c in DICE_COLUMNS:
                        try:
                            float(r[c])
                        except ValueError:
                            raise CacpsError("format", f"{p}: line {i}: {c}={r[c]!r} is not a number") from None
                    rows.append(r)
        except OSError as exc:
            raise CacpsError("io", f"cannot read {p}: {exc}") from exc
        except csv.Error as exc:
            raise CacpsError("format", f"{p}: {exc}") from exc
    if not rows:
        raise CacpsError("data", "no result rows to report")
    return rows


def summarize(rows: list[dict]) -> list[dict]:
    """One row per method: verbatim values for a single run, ``mean ± range`` otherwise."""
    groups: dict[str, list[dict]] = {}
    for r in rows:
        groups.setdefault(r["method"], []).append(r)
    order = [m for m in METHOD_ORDER if m in groups] + sorted(set(groups) - set(METHOD_ORDER))
    table = []
    for m in order:
        rs = groups[m]
        row = {"method": m, "runs": str(len(rs))}
        for c in DICE_COLUMNS:
            if len(rs) == 1:
                row[c] = rs[0][c]
            else:
                vals = np.array([float(r[c]) for r in rs])
                row[c] = f"{vals.mean():.4f} ± {vals.max() - vals.min():.4f}"
        table.append(row)
    return table


def cmd_report(args, cfg: RunConfig) -> None:
    table = summarize(read_summary_rows(args.csv))
    cols = ["method", "runs", *DICE_COLUMNS]
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    lines += ["| " + " | ".join(r[c] for c in cols) + " |" for r in table]
    text = "\n".join(lines) + "\n"
    if args.out:
        out = _mkdir(Path(args.out))
        with open(out / "report.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, cols, lineterminator="\n")
            w.writeheader()
            w.writerows(table)
        (out / "report.md").write_text(text)
    sys.stdout.write(text)


# --- wiring -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cacps", description="CACPS semi-supervised segmentation on synthetic phantoms")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, out_required=True, overrides=True):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON file of flat dotted keys")
        sp.add_argument("--out", required=out_required, help="output directory")
        if overrides:
            sp.add_argument("overrides", nargs="*", metavar="key=value")
        sp.set_defaults(func=func)
        return sp

    add("gen-data", cmd_gen_data, "generate a synthetic phantom dataset")
    sp = add("train", cmd_train, "train CACPS models")
    sp.add_argument("--data", help="dataset directory (default: data_dir key)")
    sp = add("augment", cmd_augment, "preview Fourier amplitude-mix augmentation")
    sp.add_argument("--data")
    sp.add_argument("--samples", required=True, help="comma-separated sample ids")
    sp.add_argument("--partner", help="partner sample id (default: random other sample)")
    sp.add_argument("--lambdas", default="0,0.25,0.5,1.0")
    sp = add("infer", cmd_infer, "predict masks with a trained run")
    sp.add_argument("--data")
    sp.add_argument("--run", required=True, help="training output directory")
    sp.add_argument("--models", help="comma-separated model ids (default: all found)")
    sp.add_argument("--split", default="val", choices=("train", "val", "test", "all"))
    sp = add("eval", cmd_eval, "score predicted masks against ground truth")
    sp.add_argument("--data")
    sp.add_argument("--pred", required=True, help="directory holding masks/<sample_id>.phm")
    sp.add_argument("--split", default="val", choices=("train", "val", "test", "all"))
    sp.add_argument("--method", default="model")
    sp = add("report", cmd_report, "aggregate eval summaries per method", out_required=False, overrides=False)
    sp.add_argument("csv", nargs="+", help="summary CSV files (method + dice columns)")
    return p


def run(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "report":
        args.overrides = [c for c in args.csv if "=" in c]
        args.csv = [c for c in args.csv if "=" not in c]
    try:
        cfg = RunConfig(load_config(args.config, args.overrides))
        args.func(args, cfg)
    except CacpsError as err:
        print(f"error={err.code} {err.message}", file=sys.stderr)
        return exit_code(err)
    return EXIT_OK


def main() -> None:
    sys.exit(run())
