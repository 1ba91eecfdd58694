"""Command line: synth / train / predict / eval / ablate-m."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import config as cfgmod
from .data import ManifestError, load_dataset, write_synthetic_dataset
from .evaluation import evaluate_dataset, load_prediction_file, write_prediction_file
from .inference import sliding_window_predict
from .training import CheckpointError, load_checkpoint, train

log = logging.getLogger("acformer")

ABLATION_VALUES = (1, 2, 3, 4, 5)


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat section.key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acformer", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic nuclei dataset")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=200, help="training images")
    p.add_argument("--test-count", type=int, default=0, help="held-out images")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train from a manifest")
    _common(p)
    p.add_argument("--train", required=True, help="training manifest")
    p.add_argument("--out", required=True, help="directory for checkpoint.pt and train_log.jsonl")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("predict", help="sliding-window inference with the global network")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True, help="manifest listing the images to predict")
    p.add_argument("--out", required=True, help="prediction JSON file")
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    _common(p)
    p.add_argument("--pred", required=True, help="prediction file or manifest")
    p.add_argument("--gt", required=True, help="manifest or prediction file")
    p.add_argument("--radius", type=float)
    p.add_argument("--json", help="write the report JSON here")
    p.add_argument("--csv", help="write per-image counts here")

    p = sub.add_parser("ablate-m", help="train and evaluate over the number of warps M")
    _common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--values", default=",".join(map(str, ABLATION_VALUES)))
    return parser


def _resolve(args, flag_map: dict[str, object]) -> cfgmod.ResolvedConfig:
    overrides = cfgmod.parse_overrides(args.overrides)
    flags = {k: v for k, v in flag_map.items() if v is not None}
    overrides.update(cfgmod.validate(flags))
    return cfgmod.resolve(args.config, overrides)


def _centroid_file(path) -> tuple[dict[str, list[dict]], list[str] | None]:
    """Read a manifest or a prediction file into ``id -> [{"x", "y", "category"}]``."""
    doc = json.loads(Path(path).read_text())
    if "categories" in doc:
        ds = load_dataset(path)
        return {
            r.id: [{"x": c.x, "y": c.y, "category": c.category} for c in r.centroids] for r in ds.records
        }, ds.categories
    return load_prediction_file(path), None


def cmd_synth(args) -> int:
    rc = _resolve(args, {"synth.seed": args.seed})
    synth = rc.section("synth")
    splits = {"train": args.count}
    if args.test_count:
        splits["test"] = args.test_count
    paths = write_synthetic_dataset(args.out, synth, splits)
    for split, path in paths.items():
        print(f"{split}: {path}")
    return 0


def _train_from_manifest(rc: cfgmod.ResolvedConfig, manifest, out_dir, resume=None):
    ds = load_dataset(manifest)
    images, points, cats = ds.training_arrays()
    det = replace(rc.section("detector"), num_classes=len(ds.categories))
    aat = rc.section("aat")
    tcfg = rc.section("train")
    state = load_checkpoint(resume) if resume else None
    state, losses = train(images, points, cats, det, aat, tcfg, rc.section("loss"), out_dir=out_dir, state=state)
    return state, losses, ds.categories


def cmd_train(args) -> int:
    rc = _resolve(args, {"train.total_steps": args.steps, "train.seed": args.seed})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(cfgmod.dump(rc))
    state, losses, _ = _train_from_manifest(rc, args.train, out, args.resume)
    print(f"trained {state.step} steps, final loss {losses[-1] if losses else float('nan'):.4f}; "
          f"checkpoint {out / 'checkpoint.pt'}")
    return 0


def predict_manifest(model, manifest, spec) -> dict[str, list[dict]]:
    ds = load_dataset(manifest)
    out = {}
    for i, rec in enumerate(ds.records):
        dets = sliding_window_predict(ds.image(i), model, spec)
        out[rec.id] = [d.to_json() for d in dets]
    return out


def cmd_predict(args) -> int:
    rc = _resolve(args, {"window.score_threshold": args.threshold})
    state = load_checkpoint(args.checkpoint)
    preds = predict_manifest(state.global_, args.manifest, rc.section("window"))
    write_prediction_file(args.out, preds)
    print(f"wrote {sum(map(len, preds.values()))} detections for {len(preds)} images to {args.out}")
    return 0


def cmd_eval(args) -> int:
    rc = _resolve(args, {"eval.radius": args.radius})
    ev = rc.section("eval")
    preds, pred_cats = _centroid_file(args.pred)
    gts, gt_cats = _centroid_file(args.gt)
    categories = gt_cats or pred_cats
    if categories is None:
        k = 1 + max((d["category"] for v in [*preds.values(), *gts.values()] for d in v), default=0)
        categories = [f"class{i}" for i in range(k)]
    report = evaluate_dataset(preds, gts, categories, ev.radius, ev.averaging)
    print(report.table())
    if args.json:
        Path(args.json).write_text(json.dumps(report.to_json(), indent=1))
    if args.csv:
        report.write_csv(args.csv)
    return 0


def run_ablation(rc, train_manifest, test_manifest, out_dir, values) -> list[dict]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds_test = load_dataset(test_manifest)
    gts = {r.id: [{"x": c.x, "y": c.y, "category": c.category} for c in r.centroids] for r in ds_test.records}
    rows = []
    for M in values:
        run_rc = cfgmod.ResolvedConfig({**rc.values, "aat.num_matrices": M})
        state, _, categories = _train_from_manifest(run_rc, train_manifest, out_dir / f"M{M}")
        preds = predict_manifest(state.global_, test_manifest, run_rc.section("window"))
        report = evaluate_dataset(preds, gts, categories, *_eval_args(run_rc))
        rows.append({"M": M, "F_d": report.f_d if report.f_d is not None else 0.0, "mean_Fc": report.mean_fc})
        log.info("M=%d F_d=%.4f mean_Fc=%.4f", M, rows[-1]["F_d"], rows[-1]["mean_Fc"])
    with open(out_dir / "ablation_m.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["M", "F_d", "mean_Fc"])
        writer.writeheader()
        writer.writerows(rows)
    best_fd = max(rows, key=lambda r: r["F_d"])["M"]
    best_fc = max(rows, key=lambda r: r["mean_Fc"])["M"]
    summary = {
        "rows": rows,
        "best_M_by_F_d": best_fd,
        "best_M_by_mean_Fc": best_fc,
        "M4_best_observed": 4 in [r["M"] for r in rows] and best_fd == 4 and best_fc == 4,
    }
    (out_dir / "ablation_m.json").write_text(json.dumps(summary, indent=1))
    return rows


def _eval_args(rc):
    ev = rc.section("eval")
    return ev.radius, ev.averaging


def cmd_ablate(args) -> int:
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values must be comma-separated integers, got {args.values!r}") from None
    if not values or min(values) < 1:
        raise UsageError("--values needs at least one M >= 1")
    rc = _resolve(args, {"train.total_steps": args.steps, "train.seed": args.seed})
    rows = run_ablation(rc, args.train, args.test, args.out, values)
    for r in rows:
        print(f"M={r['M']}  F_d={r['F_d']:.4f}  mean_Fc={r['mean_Fc']:.4f}")
    print(f"wrote {Path(args.out) / 'ablation_m.csv'}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval, "ablate-m": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, cfgmod.ConfigFileError) as exc:
        print(f"acformer {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ManifestError, CheckpointError, OSError, ValueError, RuntimeError) as exc:
        print(f"acformer {args.command}: {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}",
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
