"""Command-line entry point: ``pulmovessel <subcommand> ...``.

Exit codes: 0 success, 1 invalid input (bad flags, missing files, geometry
mismatch, malformed volumes), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

from . import io, metrics, postprocess, preprocess, skeleton, synthgen, vlsom
from .errors import ValidationError
from .volume import LabelVolume, ScalarVolume


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _triple(text):
    parts = [float(v) for v in text.replace("x", ",").split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    return tuple(parts)


def _dims(text):
    parts = _triple(text)
    if any(p != int(p) for p in parts):
        raise argparse.ArgumentTypeError(f"dims must be integers, got {text!r}")
    return tuple(int(p) for p in parts)


def _existing(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input file not found: {p}")
    return p


def _print_config(command, cfg: dict, out):
    for key, value in cfg.items():
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        print(f"config {command}.{key}={value}", file=out)


# ---------------------------------------------------------------------------
# subcommands


def cmd_preprocess(args, out):
    cfg = preprocess.PreprocessConfig(args.spacing, args.margin, args.p_lo, args.p_hi)
    _print_config("preprocess", asdict(cfg), out)
    ct = io.read_volume(_existing(args.ct))
    lung = io.read_labels(_existing(args.lung))
    result = preprocess.preprocess_case(ct, lung, cfg)
    io.write_volume(result.volume, io.output_path(args.out_dir, "ct_preprocessed.nii"))
    io.write_volume(result.lung_mask, io.output_path(args.out_dir, "lung_preprocessed.nii"))
    for line in result.report_lines():
        print(line, file=out)
    return 0


def cmd_skeletonize(args, out):
    _print_config("skeletonize", {"class": args.cls}, out)
    labels = io.read_labels(_existing(args.input))
    if args.cls == "all":
        data = labels.data * 0
        for cls, sk in skeleton.class_skeletons(labels).items():
            data[sk.data != 0] = cls
        result = LabelVolume(data, labels.geometry)
    elif args.cls == "binary":
        result = skeleton.skeletonize(LabelVolume(labels.data != 0, labels.geometry))
    else:
        result = skeleton.skeleton_of_class(labels, int(args.cls))
    io.write_volume(result, args.out)
    print(f"skeleton_voxels={int((result.data != 0).sum())}", file=out)
    return 0


def _weight_config(args):
    return vlsom.WeightConfig(args.w_class, args.w_cl, args.lambda_cldice, args.soft_skel_iters)


def cmd_weights(args, out):
    cfg = _weight_config(args)
    _print_config("weights", {**asdict(cfg), "kind": args.kind}, out)
    gt = io.read_labels(_existing(args.gt))
    lung = io.read_labels(_existing(args.lung))
    w = vlsom.build_weight_map(gt, skeleton.class_skeletons(gt), lung, cfg, args.kind)
    io.write_volume(ScalarVolume(w.data, w.geometry), args.out)
    for value in sorted(set(w.data.ravel().tolist())):
        print(f"weight={value!r} voxels={int((w.data == value).sum())}", file=out)
    return 0


def cmd_loss(args, out):
    cfg = _weight_config(args)
    _print_config("loss", asdict(cfg), out)
    pred = io.read_volume(_existing(args.pred))
    gt = io.read_labels(_existing(args.gt))
    lung = io.read_labels(_existing(args.lung))
    if not hasattr(pred, "argmax"):
        raise ValidationError(f"{args.pred}: prediction must be a 3-channel probability volume")
    _, _, breakdown = vlsom.composite_loss(pred, gt, skeleton.class_skeletons(gt), lung, cfg)
    for key in ("ce", "dice", "cldice", "lambda_cldice", "total"):
        print(f"{key}={float(breakdown[key])!r}", file=out)
    return 0


def _read_manifest(path):
    path = _existing(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: manifest is not valid JSON ({exc})") from exc
    base = path.parent
    cases = doc.get("cases") if isinstance(doc, dict) else None
    if not isinstance(cases, list) or not cases:
        raise ValidationError(f"{path}: manifest needs a non-empty 'cases' list")
    seen, resolved = set(), []
    for i, case in enumerate(cases):
        try:
            cid = str(case["case_id"])
            entry = {"case_id": cid, "pred": base / case["pred"], "gt": base / case["gt"]}
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{path}: case {i} needs case_id, pred and gt") from exc
        if case.get("lung") is not None:
            entry["lung"] = base / case["lung"]
        if cid in seen:
            raise ValidationError(f"{path}: duplicate case id {cid!r}")
        seen.add(cid)
        for key in ("pred", "gt", "lung"):
            if key in entry:
                _existing(entry[key])
        resolved.append(entry)
    return resolved, doc.get("output_dir"), doc.get("config", {})


def _metric_case(case):
    pred = io.read_labels(case["pred"])
    gt = io.read_labels(case["gt"])
    return metrics.evaluate(pred, gt, case["case_id"])


def _write_lines(lines, path, out):
    text = "\n".join(lines) + "\n"
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    else:
        out.write(text)


def cmd_metrics(args, out):
    _print_config("metrics", {"workers": args.workers}, out)
    if args.manifest:
        cases, _, _ = _read_manifest(args.manifest)
    elif args.pred and args.gt:
        cases = [{"case_id": args.case_id, "pred": _existing(args.pred), "gt": _existing(args.gt)}]
    else:
        raise UsageError("metrics: give --pred and --gt, or --manifest")
    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        reports = list(pool.map(_metric_case, cases))
    lines = [metrics.CSV_HEADER] + [row for r in reports for row in r.rows()]
    _write_lines(lines, args.out, out)
    return 0


def _repair_config(args, overrides=None):
    values = {
        "size_threshold": args.threshold,
        "max_iterations": args.max_iterations,
        "keep_unmerged_small": not args.drop_unmerged,
    }
    values.update(overrides or {})
    return postprocess.RepairConfig(**values)


def cmd_repair(args, out):
    cfg = _repair_config(args)
    _print_config("repair", asdict(cfg), out)
    labels = io.read_labels(_existing(args.input))
    lung = io.read_labels(_existing(args.lung))
    repaired, log = postprocess.repair(labels, lung, cfg)
    io.write_volume(repaired, args.out)
    _write_lines(log.lines(), args.log, out)
    return 0


def cmd_synth(args, out):
    if args.spec:
        spec = synthgen.PhantomSpec.load(_existing(args.spec))
    else:
        spec = synthgen.default_spec(args.seed, args.dims, args.generations)
    _print_config("synth", {"seed": spec.seed, "dims": spec.dims, "generations": spec.generations,
                            "branches": len(spec.branches), "prediction": args.prediction}, out)
    phantom = synthgen.generate_tree(spec)
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    io.write_volume(phantom.labels, d / "labels.nii")
    io.write_volume(phantom.centerlines[1], d / "centerline_artery.nii")
    io.write_volume(phantom.centerlines[2], d / "centerline_vein.nii")
    io.write_volume(phantom.lung_mask, d / "lung.nii")
    (d / "spec.json").write_text(spec.to_json() + "\n", encoding="utf-8")
    if args.prediction:
        io.write_volume(synthgen.perturb_labels(phantom, spec.seed), d / "prediction.nii")
    print(f"tubes={len(phantom.tubes)}", file=out)
    for cls in (1, 2):
        print(f"class{cls}_voxels={int((phantom.labels.data == cls).sum())}", file=out)
    return 0


def _pipeline_case(case, cfg, out_dir):
    if "lung" not in case:
        raise ValidationError(f"case {case['case_id']}: pipeline needs a lung mask")
    pred = io.read_labels(case["pred"])
    gt = io.read_labels(case["gt"])
    lung = io.read_labels(case["lung"])
    repaired, log = postprocess.repair(pred, lung, cfg)
    io.write_volume(repaired, out_dir / f"{case['case_id']}_repaired.nii")
    (out_dir / f"{case['case_id']}_repair.log").write_text("\n".join(log.lines()) + "\n", encoding="utf-8")
    return metrics.evaluate(repaired, gt, case["case_id"])


def cmd_pipeline(args, out):
    cases, manifest_out, overrides = _read_manifest(args.manifest)
    cfg = _repair_config(args, overrides.get("repair"))
    out_dir = Path(args.out_dir or manifest_out or ".")
    _print_config("pipeline", {**asdict(cfg), "workers": args.workers, "out_dir": out_dir}, out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        reports = list(pool.map(lambda c: _pipeline_case(c, cfg, out_dir), cases))
    lines = [metrics.CSV_HEADER] + [row for r in reports for row in r.rows()]
    _write_lines(lines, out_dir / "metrics.csv", out)
    print(f"cases={len(reports)} metrics={out_dir / 'metrics.csv'}", file=out)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_weight_flags(p):
    p.add_argument("--w-class", type=float, default=3.0, help="weight of vessel voxels off the centerline")
    p.add_argument("--w-cl", type=float, default=15.0, help="weight of centerline voxels")
    p.add_argument("--lambda-cldice", type=float, default=0.5)
    p.add_argument("--soft-skel-iters", type=int, default=10)


def _add_repair_flags(p):
    p.add_argument("--threshold", type=int, default=800, help="components below this size may be relabeled")
    p.add_argument("--max-iterations", type=int, default=64)
    p.add_argument("--drop-unmerged", action="store_true", help="discard small components that were never merged")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pulmovessel", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", help="normalize a CT volume to the lung box and target grid")
    p.add_argument("--ct", required=True)
    p.add_argument("--lung", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--spacing", type=_triple, default=preprocess.DEFAULT_SPACING)
    p.add_argument("--margin", type=int, default=0)
    p.add_argument("--p-lo", type=float, default=0.5)
    p.add_argument("--p-hi", type=float, default=99.5)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("skeletonize", help="thin a label volume to its centerlines")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--class", dest="cls", choices=["1", "2", "all", "binary"], default="all")
    p.set_defaults(func=cmd_skeletonize)

    p = sub.add_parser("weights", help="write a centerline weight map")
    p.add_argument("--gt", required=True)
    p.add_argument("--lung", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=[k.value for k in vlsom.WeightKind], default="ce")
    _add_weight_flags(p)
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("loss", help="evaluate the composite loss of a probability volume")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--lung", required=True)
    _add_weight_flags(p)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("metrics", help="dice, recall, cl_dice and cl_recall per class")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--case-id", default="case")
    p.add_argument("--manifest")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("repair", help="remove outliers and merge stray artery/vein components")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--lung", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="repair log path (default: stdout)")
    _add_repair_flags(p)
    p.set_defaults(func=cmd_repair)

    p = sub.add_parser("synth", help="generate a synthetic vessel phantom")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spec", help="JSON phantom spec (overrides --seed/--dims/--generations)")
    p.add_argument("--dims", type=_dims, default=(64, 64, 64))
    p.add_argument("--generations", type=int, default=2)
    p.add_argument("--prediction", action="store_true", help="also write a perturbed prediction surrogate")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pipeline", help="repair then evaluate every case of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir")
    p.add_argument("--workers", type=int, default=1)
    _add_repair_flags(p)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be >= 1")
        return args.func(args, out)
    except (ValidationError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=err)
        return 1
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=err)
        return 2


if __name__ == "__main__":
    sys.exit(main())
