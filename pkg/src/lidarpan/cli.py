"""Single executable dispatching the toolkit's subcommands.

Exit codes: 0 success, 1 validation error (arguments, shapes, configs),
2 data error (missing or malformed files). Failures print one line of
JSON to stderr. One global --seed drives every randomized initialization
through a named deterministic generator, so identical inputs and seed
produce byte-identical outputs.
"""

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .errors import DataError, InfeasibleError, LidarpanError, ValidationError
from .fusion import (
    FusionConfig,
    canonical_panoptic,
    load_instances_json,
    prepare_instance_logits,
)
from .heads import SemanticPipeline, train_toy
from .metrics import (
    border_confusion,
    iou_from_confusion,
    match_segments,
    merge_matches,
    panoptic_scores,
)
from .params_io import assign_params, load_params, save_params
from .pcl_io import ClassMap, LabelSet, read_labels, read_scan, write_labels
from .projection import ProjectionConfig, RangeImage, backproject_knn, project
from .pseudo_label import (
    PLGConfig,
    expand_grid,
    generate_pseudo_labels,
    grid_search_control,
)
from .runner import SemanticRunner
from .synthetic import make_scene

ARTIFACT_VERSION = 1


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit(ValidationError(message))
        raise SystemExit(1)


def _emit(err):
    payload = err.payload() if isinstance(err, LidarpanError) else {
        "error": type(err).__name__, "message": str(err)}
    print(json.dumps(payload), file=sys.stderr)


# ---------------------------------------------------------------------------
# Shared config
# ---------------------------------------------------------------------------

_CONFIG_SCHEMA = {
    "class_map": str,
    "seed": int,
    "projection": {"width": int, "rows": int, "threshold_deg": (int, float)},
    "fusion": {"confidence_threshold": (int, float),
               "overlap_threshold": (int, float),
               "min_stuff_area": int},
    "metrics": {"border_width": int},
}


def _check_schema(obj, schema, path=""):
    for key, val in obj.items():
        here = f"{path}{key}"
        if key not in schema:
            raise ValidationError(f"{here}: unknown config key", key=here)
        expect = schema[key]
        if isinstance(expect, dict):
            if not isinstance(val, dict):
                raise ValidationError(f"{here}: expected an object", key=here)
            _check_schema(val, expect, here + ".")
        elif not isinstance(val, expect) or isinstance(val, bool):
            raise ValidationError(f"{here}: expected {getattr(expect, '__name__', expect)}",
                                  key=here, found=type(val).__name__)


def load_run_config(path):
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as err:
        raise DataError(f"cannot read config: {err}", path=str(path)) from err
    except json.JSONDecodeError as err:
        raise ValidationError(f"config is not valid JSON: {err}", path=str(path)) from err
    if not isinstance(obj, dict):
        raise ValidationError("config root must be an object", path=str(path))
    _check_schema(obj, _CONFIG_SCHEMA)
    return obj


def _cfg_get(cfg, keys, fallback):
    node = cfg
    for k in keys:
        if not isinstance(node, dict) or k not in node:
            return fallback
        node = node[k]
    return node


def _load_class_map(args, cfg):
    source = getattr(args, "class_map", None) or _cfg_get(cfg, ["class_map"], None)
    if source is None:
        raise ValidationError("a class map is required (--class-map or config)")
    if source in ("dense-19", "sparse-16"):
        return ClassMap.preset(source)
    return ClassMap.from_file(source)


def _read_file(path, what):
    try:
        return Path(path).read_bytes()
    except OSError as err:
        raise DataError(f"cannot read {what}: {err}", path=str(path)) from err


# ---------------------------------------------------------------------------
# Range image sidecar
# ---------------------------------------------------------------------------

def save_range_image(img: RangeImage, base, labels2d=None):
    base = Path(base)
    f32_path = base.with_suffix(".f32")
    np.ascontiguousarray(img.channels, dtype="<f4").tofile(f32_path)
    side = {
        "version": ARTIFACT_VERSION,
        "kind": "range-image",
        "shape": [5, int(img.shape[0]), int(img.shape[1])],
        "channels_file": f32_path.name,
        "valid": img.valid.reshape(-1).astype(int).tolist(),
        "pixel_of_point": img.pixel_of_point.tolist(),
        "point_of_pixel": img.point_of_pixel.reshape(-1).tolist(),
    }
    if labels2d is not None:
        sem2d, inst2d = labels2d
        lbl_path = base.with_suffix(".label2d")
        lbl_path.write_bytes(write_labels(
            LabelSet(sem2d.reshape(-1), inst2d.reshape(-1))))
        side["labels2d_file"] = lbl_path.name
    base.with_suffix(".json").write_text(json.dumps(side, sort_keys=True),
                                         encoding="utf-8")


def load_range_image(sidecar_path):
    path = Path(sidecar_path)
    try:
        side = json.loads(path.read_text(encoding="utf-8"))
    except OSError as err:
        raise DataError(f"cannot read sidecar: {err}", path=str(path)) from err
    except json.JSONDecodeError as err:
        raise DataError(f"sidecar is not valid JSON: {err}", path=str(path)) from err
    if side.get("version") != ARTIFACT_VERSION or side.get("kind") != "range-image":
        raise DataError("unsupported sidecar header", path=str(path),
                        version=side.get("version"), kind=side.get("kind"))
    _, h, w = side["shape"]
    raw = np.fromfile(path.parent / side["channels_file"], dtype="<f4")
    if raw.size != 5 * h * w:
        raise DataError("channel file size mismatch", expected=5 * h * w, found=raw.size)
    img = RangeImage(
        channels=raw.reshape(5, h, w).copy(),
        valid=np.asarray(side["valid"], dtype=bool).reshape(h, w),
        pixel_of_point=np.asarray(side["pixel_of_point"], dtype=np.int64).reshape(-1, 2),
        point_of_pixel=np.asarray(side["point_of_pixel"], dtype=np.int64).reshape(h, w),
    )
    return img, side


def _read_label2d(path, shape):
    labels = read_labels(_read_file(path, "2-D labels"))
    h, w = shape
    if len(labels) != h * w:
        raise DataError("2-D label count does not match extent",
                        path=str(path), expected=h * w, found=len(labels))
    return labels.semantic.reshape(h, w), labels.instance.reshape(h, w)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_project(args, cfg):
    pconf = ProjectionConfig(
        width=args.width or _cfg_get(cfg, ["projection", "width"], 2048),
        rows=args.rows or _cfg_get(cfg, ["projection", "rows"], 64),
        yaw_jump_threshold_deg=args.threshold_deg
        or _cfg_get(cfg, ["projection", "threshold_deg"], 310.0))
    cloud = read_scan(_read_file(args.scan, "scan"))
    labels = None
    if args.labels:
        labels = read_labels(_read_file(args.labels, "labels"))
    img, maps = project(cloud, pconf, labels, ignore_id=args.ignore_id)
    save_range_image(img, args.out, maps)
    print(json.dumps({"points": len(cloud), "valid_pixels": int(img.valid.sum()),
                      "out": str(Path(args.out).with_suffix('.json'))}))
    return 0


def cmd_backproject(args, cfg):
    img, side = load_range_image(args.image)
    pred2d = _read_label2d(args.pred2d, img.shape)
    cloud = read_scan(_read_file(args.scan, "scan"))
    if len(cloud) != img.pixel_of_point.shape[0]:
        raise DataError("scan does not match the projected image",
                        points=len(cloud), projected=img.pixel_of_point.shape[0])
    wh, ww = args.window
    out = backproject_knn(pred2d, img, cloud, k=args.k, window=(wh, ww),
                          ignore_id=args.ignore_id)
    Path(args.out).write_bytes(write_labels(out))
    print(json.dumps({"points": len(out), "out": str(args.out)}))
    return 0


def cmd_fuse(args, cfg):
    cmap = _load_class_map(args, cfg)
    fconf = FusionConfig(
        confidence_threshold=args.confidence_threshold
        if args.confidence_threshold is not None
        else _cfg_get(cfg, ["fusion", "confidence_threshold"], 0.5),
        overlap_threshold=args.overlap_threshold
        if args.overlap_threshold is not None
        else _cfg_get(cfg, ["fusion", "overlap_threshold"], 0.5),
        min_stuff_area=args.min_stuff_area
        if args.min_stuff_area is not None
        else _cfg_get(cfg, ["fusion", "min_stuff_area"], 128))
    c, h, w = args.logits_shape
    raw = np.fromfile(args.semantic_logits, dtype="<f4")
    if raw.size != c * h * w:
        raise DataError("semantic logits size mismatch", expected=c * h * w,
                        found=raw.size)
    logits = raw.reshape(c, h, w)
    if c != cmap.num_classes:
        raise ValidationError("logit channels do not match the class map",
                              channels=c, classes=cmap.num_classes)
    instances = load_instances_json(args.instances)
    kept = prepare_instance_logits(instances, (h, w), fconf)
    label = canonical_panoptic(logits, kept, fconf, cmap)
    base = Path(args.out)
    base.with_suffix(".label2d").write_bytes(write_labels(
        LabelSet(label.semantic.reshape(-1), label.instance.reshape(-1))))
    base.with_suffix(".json").write_text(json.dumps(
        {"version": ARTIFACT_VERSION, "kind": "panoptic-2d",
         "shape": [h, w], "instances_kept": len(kept)}, sort_keys=True),
        encoding="utf-8")
    print(json.dumps({"instances_in": len(instances), "instances_kept": len(kept),
                      "out": str(base.with_suffix('.label2d'))}))
    return 0


def _eval_one(pred_path, gt_path, map_source, shape, border_width):
    cmap = ClassMap.preset(map_source) if map_source in ("dense-19", "sparse-16") \
        else ClassMap.from_file(map_source)
    pred = read_labels(Path(pred_path).read_bytes())
    gt = read_labels(Path(gt_path).read_bytes())
    match = match_segments(pred, gt, cmap)
    conf = None
    if shape is not None and border_width > 0:
        h, w = shape
        if len(pred) != h * w:
            raise DataError("2-D evaluation needs H*W elements per file",
                            path=str(pred_path), expected=h * w, found=len(pred))
        conf = border_confusion(
            (pred.semantic.reshape(h, w), pred.instance.reshape(h, w)),
            (gt.semantic.reshape(h, w), gt.instance.reshape(h, w)),
            cmap.ignore_id, border_width, num_classes=cmap.num_classes)
    return match, conf


def cmd_eval(args, cfg):
    cmap = _load_class_map(args, cfg)
    map_source = args.class_map or _cfg_get(cfg, ["class_map"], None)
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    preds = sorted(pred_dir.glob("*.label"))
    if not preds:
        raise DataError("no .label files in prediction directory", path=str(pred_dir))
    pairs = []
    for p in preds:
        g = gt_dir / p.name
        if not g.exists():
            raise DataError("missing ground-truth file", path=str(g))
        pairs.append((str(p), str(g)))
    border_width = args.border_width if args.border_width is not None \
        else _cfg_get(cfg, ["metrics", "border_width"], 0)
    shape = tuple(args.shape) if args.shape else None
    if border_width > 0 and shape is None:
        raise ValidationError("--border-width needs --shape H W to form 2-D maps")

    work = [(p, g, map_source, shape, border_width) for p, g in pairs]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_eval_one_star, work))
    else:
        results = [_eval_one(*w) for w in work]

    report = panoptic_scores(merge_matches([m for m, _ in results]), cmap)
    out = report.as_dict()
    confs = [c for _, c in results if c is not None]
    if confs:
        total = confs[0].copy()
        for c in confs[1:]:
            total += c
        out["border_iou"] = {str(k): v for k, v in
                             sorted(iou_from_confusion(total, cmap.ignore_id).items())}
        out["border_width"] = border_width
    out["scans"] = len(pairs)

    _print_eval_table(report, cmap, args.split)
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


def _eval_one_star(w):
    return _eval_one(*w)


def _print_eval_table(report, cmap, split):
    cols = ["PQ", "PQd", "SQ", "RQ", "PQth", "SQth", "RQth", "PQst", "SQst",
            "RQst", "mIoU"]
    vals = [report.pq, report.pq_dagger, report.sq, report.rq,
            report.pq_things, report.sq_things, report.rq_things,
            report.pq_stuff, report.sq_stuff, report.rq_stuff, report.miou]
    print(" ".join(f"{c:>7}" for c in ["metric"] + cols))
    print(" ".join([f"{'all':>7}"] + [f"{100 * v:7.1f}" for v in vals]))
    names = {c.learning_id: c.name for c in cmap.classes}
    thing = set(cmap.thing_ids())
    print(f"{'class':>14} {'PQ':>7} {'SQ':>7} {'RQ':>7} {'IoU':>7}")
    for cls, row in sorted(report.per_class.items()):
        if split == "thing" and cls not in thing:
            continue
        if split == "stuff" and cls in thing:
            continue
        print(f"{names.get(cls, str(cls)):>14} {100 * row['pq']:7.1f} "
              f"{100 * row['sq']:7.1f} {100 * row['rq']:7.1f} {100 * row['iou']:7.1f}")


def _build_pipeline_from_checkpoint(path, seed):
    loaded = load_params(path)
    if "head.classifier.w" not in loaded:
        raise DataError("checkpoint lacks the classifier record", path=str(path))
    n_classes = loaded["head.classifier.w"].shape[0]
    pipeline = SemanticPipeline(n_classes=int(n_classes), seed=seed)
    assign_params(pipeline.params(), loaded)
    return pipeline


def cmd_pseudo_label(args, cfg):
    cmap = _load_class_map(args, cfg)
    pipeline = _build_pipeline_from_checkpoint(args.checkpoint, args.seed)
    pconf = ProjectionConfig(width=args.width, rows=args.rows,
                             yaw_jump_threshold_deg=args.threshold_deg)
    runner = SemanticRunner(pipeline, cmap, pconf)

    try:
        grid_spec = json.loads(Path(args.grid).read_text(encoding="utf-8"))
    except OSError as err:
        raise DataError(f"cannot read grid: {err}", path=str(args.grid)) from err
    except json.JSONDecodeError as err:
        raise ValidationError(f"grid is not valid JSON: {err}") from err
    grid = expand_grid(grid_spec)
    plg = PLGConfig(pq_cutoff=args.pq_cutoff, p_limit=args.p_limit)

    val_dir = Path(args.val_gt)
    val_pairs = []
    for scan in sorted(val_dir.glob("*.bin")):
        gt = scan.with_suffix(".label")
        if not gt.exists():
            raise DataError("validation scan lacks a ground-truth label file",
                            path=str(gt))
        val_pairs.append((scan, gt))
    if not val_pairs:
        raise DataError("no validation scans found", path=str(val_dir))
    thing_ids = set(cmap.thing_ids())

    def evaluate(params):
        matches = []
        for scan_path, gt_path in val_pairs:
            cloud = read_scan(scan_path.read_bytes())
            gt = read_labels(gt_path.read_bytes())
            pred = runner(cloud, params)
            matches.append(match_segments(pred, gt, cmap))
        report = panoptic_scores(merge_matches(matches), cmap)
        tp = sum(v["tp"] for c, v in report.per_class.items() if c in thing_ids)
        fp = sum(v["fp"] for c, v in report.per_class.items() if c in thing_ids)
        return tp, fp, report.pq

    best = grid_search_control(evaluate, grid, plg)
    scans = sorted(Path(args.scans).glob("*.bin"))
    manifest = generate_pseudo_labels(
        lambda cloud, params: runner(cloud, params), scans, best, plg,
        args.out_dir, ignore_id=cmap.ignore_id)
    print(json.dumps({"best_params": best.__dict__,
                      "fingerprint": best.fingerprint(),
                      "labeled": sum(1 for e in manifest["entries"] if "label" in e),
                      "errors": sum(1 for e in manifest["entries"] if "error" in e),
                      "out_dir": str(args.out_dir)}, sort_keys=True))
    return 0


def cmd_train_toy(args, cfg):
    seed = args.seed
    scenes = [make_scene(seed + i, height=args.rows, width=args.width)
              for i in range(args.scenes)]
    pipeline = SemanticPipeline(n_classes=args.classes, seed=seed)

    print("step,loss")

    def on_step(step, loss):
        print(f"{step},{loss:.6f}")

    if args.pseudo_manifest:
        # two-phase schedule: pseudo-labeled scans first, labeled scenes after
        manifest = json.loads(Path(args.pseudo_manifest).read_text(encoding="utf-8"))
        pconf = ProjectionConfig(width=args.width, rows=args.rows,
                                 yaw_jump_threshold_deg=310.0)
        pseudo_scenes = []
        for entry in manifest["entries"]:
            if "label" not in entry:
                continue
            cloud = read_scan(_read_file(entry["scan"], "scan"))
            labels = read_labels(_read_file(entry["label"], "labels"))
            img, maps = project(cloud, pconf, labels, ignore_id=args.ignore_id)
            pseudo_scenes.append((img.channels, maps[0]))
        if pseudo_scenes:
            train_toy(pipeline, pseudo_scenes, args.pseudo_steps, lr=args.lr,
                      ignore_id=args.ignore_id, on_step=on_step)

    train_toy(pipeline, scenes, args.steps, lr=args.lr,
              ignore_id=args.ignore_id, on_step=on_step)
    if args.checkpoint_out:
        save_params(pipeline.params(), args.checkpoint_out)
    return 0


def cmd_gradcheck(args, cfg):
    from .opchecks import run_operator_checks

    results = run_operator_checks(args.seeds, base_seed=args.seed)
    failed = []
    for name, err in results.items():
        status = "ok" if err < 1e-3 else "FAIL"
        print(f"{name:24s} max_rel_err={err:.3e} [{status}]")
        if err >= 1e-3:
            failed.append(name)
    if failed:
        raise ValidationError("gradient check failed", operators=failed,
                              worst=max(results.values()))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = CliParser(prog="lidarpan",
                       description="Range-image LiDAR panoptic segmentation toolkit")
    parser.add_argument("--config", help="shared JSON run configuration")
    parser.add_argument("--seed", type=int, default=0,
                        help="seed for all randomized initialization")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("project", help="project a scan into a range image")
    p.add_argument("--scan", required=True)
    p.add_argument("--labels")
    p.add_argument("--width", type=int)
    p.add_argument("--rows", type=int)
    p.add_argument("--threshold-deg", type=float, dest="threshold_deg")
    p.add_argument("--ignore-id", type=int, default=0, dest="ignore_id")
    p.add_argument("--out", required=True, help="output basename")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("backproject", help="vote 2-D labels back onto points")
    p.add_argument("--pred2d", required=True, help=".label2d prediction file")
    p.add_argument("--image", required=True, help="range-image sidecar JSON")
    p.add_argument("--scan", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--window", type=int, nargs=2, default=(5, 5), metavar=("H", "W"))
    p.add_argument("--ignore-id", type=int, default=0, dest="ignore_id")
    p.add_argument("--out", required=True, help="output .label path")
    p.set_defaults(func=cmd_backproject)

    p = sub.add_parser("fuse", help="fuse semantic logits with instances")
    p.add_argument("--semantic-logits", required=True, dest="semantic_logits")
    p.add_argument("--logits-shape", type=int, nargs=3, required=True,
                   dest="logits_shape", metavar=("C", "H", "W"))
    p.add_argument("--instances", required=True, help="instance JSON")
    p.add_argument("--class-map", dest="class_map")
    p.add_argument("--confidence-threshold", type=float, dest="confidence_threshold")
    p.add_argument("--overlap-threshold", type=float, dest="overlap_threshold")
    p.add_argument("--min-stuff-area", type=int, dest="min_stuff_area")
    p.add_argument("--out", required=True, help="output basename")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="panoptic evaluation over label pairs")
    p.add_argument("--pred-dir", required=True, dest="pred_dir")
    p.add_argument("--gt-dir", required=True, dest="gt_dir")
    p.add_argument("--class-map", dest="class_map")
    p.add_argument("--split", choices=["all", "stuff", "thing"], default="all")
    p.add_argument("--border-width", type=int, dest="border_width")
    p.add_argument("--shape", type=int, nargs=2, metavar=("H", "W"),
                   help="treat labels as 2-D maps of this extent")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pseudo-label", help="grid-searched pseudo-label generation")
    p.add_argument("--scans", required=True, help="directory of unlabeled .bin scans")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grid", required=True, help="JSON of per-parameter value lists")
    p.add_argument("--pq-cutoff", type=float, required=True, dest="pq_cutoff")
    p.add_argument("--p-limit", type=int, required=True, dest="p_limit")
    p.add_argument("--val-gt", required=True, dest="val_gt",
                   help="directory of paired .bin/.label validation data")
    p.add_argument("--class-map", dest="class_map")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--rows", type=int, default=32)
    p.add_argument("--threshold-deg", type=float, default=310.0, dest="threshold_deg")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("train-toy", help="overfit the toy pipeline on synthetic scenes")
    p.add_argument("--scenes", type=int, default=5)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--rows", type=int, default=32)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--ignore-id", type=int, default=255, dest="ignore_id")
    p.add_argument("--checkpoint-out", dest="checkpoint_out")
    p.add_argument("--pseudo-manifest", dest="pseudo_manifest",
                   help="train on these pseudo labels first (two-phase schedule)")
    p.add_argument("--pseudo-steps", type=int, default=100, dest="pseudo_steps")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("gradcheck", help="finite-difference operator verification")
    p.add_argument("--seeds", type=int, default=3)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        _emit(ValidationError("a subcommand is required"))
        return 1
    try:
        cfg = load_run_config(args.config)
        return args.func(args, cfg)
    except ValidationError as err:
        _emit(err)
        return 1
    except (DataError, InfeasibleError) as err:
        _emit(err)
        return 2
    except LidarpanError as err:
        _emit(err)
        return 1
    except OSError as err:
        _emit(DataError(str(err)))
        return 2


if __name__ == "__main__":
    sys.exit(main())
