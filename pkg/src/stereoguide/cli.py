"""Command line entry point.

Subcommands: ``convert``, ``losses``, ``gradcheck``, ``train-demo``, ``eval``
and ``heatmap``. Exit codes: 0 success, 2 usage or configuration error,
3 data error, 4 gradient check failure. Messages go to standard error;
results go to standard output and are byte-identical across runs with the
same arguments and inputs.

Numeric modules are imported inside the handlers so that ``SGM3D_THREADS``
can cap the BLAS thread pools before numpy loads.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from importlib import resources
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_GRADCHECK = 0, 2, 3, 4
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

WEIGHT_KEYS = ("lambda_feature", "lambda_anchor", "lambda_fg", "lambda_bg", "lambda_object", "lambda_cls",
               "lambda_box", "lambda_dir", "lambda_depth", "alpha", "gamma")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


def _positive(kind):
    def parse(text: str):
        v = kind(text)
        if v <= 0:
            raise ValueError("must be positive")
        return v
    return parse


def _unit(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise ValueError("must lie in [0, 1]")
    return v


def _nonneg(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise ValueError("must be nonnegative")
    return v


SCHEMA = {
    **{k: _nonneg for k in WEIGHT_KEYS},
    "bg_normalizer": _choice("fg", "bg"),
    "feature_normalize": _bool,
    "scenes": _positive(int),
    "epochs": _positive(int),
    "lr": _positive(float),
    "batch_size": _positive(int),
    "seed": int,
    "score_thresh": _unit,
    "min_iou": _unit,
    "max_matched": _positive(int),
    "eval_scenes": _positive(int),
    "eval_every": int,
    "eval_iou": _unit,
    "joint": _bool,
    "gradcheck_instances": _positive(int),
    "gradcheck_step": _positive(float),
    "gradcheck_tol": _positive(float),
}


class UsageError(Exception):
    """Bad arguments or configuration (exit 2)."""


def parse_config(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines with ``#`` comments, validated against SCHEMA."""
    out = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise UsageError(f"{source}:{no}: expected key = value")
        if key not in SCHEMA:
            raise UsageError(f"{source}:{no}: unknown key {key!r}")
        try:
            out[key] = SCHEMA[key](value)
        except ValueError as exc:
            raise UsageError(f"{source}:{no}: bad value for {key}: {exc}") from None
    return out


def default_config() -> dict:
    text = resources.files("stereoguide").joinpath("defaults.cfg").read_text(encoding="utf-8")
    cfg = parse_config(text, "defaults.cfg")
    missing = set(SCHEMA) - set(cfg)
    if missing:
        raise UsageError(f"defaults.cfg lacks {sorted(missing)}")
    return cfg


def parse_weight_overrides(text: str) -> dict:
    """``"λ_object=0.01,lambda_anchor=1"`` -> ``{"lambda_object": 0.01, ...}``."""
    out = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        key, sep, value = item.partition("=")
        key = key.strip().replace("λ", "lambda")
        if not sep or key not in WEIGHT_KEYS:
            raise UsageError(f"bad weight override {item!r}; known: {', '.join(WEIGHT_KEYS)}")
        try:
            out[key] = _nonneg(value)
        except ValueError as exc:
            raise UsageError(f"bad value in {item!r}: {exc}") from None
    return out


def load_settings(args) -> dict:
    cfg = default_config()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        cfg.update(parse_config(path.read_text(encoding="utf-8"), str(path)))
    if getattr(args, "weights", None):
        cfg.update(parse_weight_overrides(args.weights))
    return cfg


def loss_weights(cfg: dict):
    from .losses import LossWeights

    return LossWeights(**{k: cfg[k] for k in WEIGHT_KEYS}, bg_normalizer=cfg["bg_normalizer"],
                       feature_normalize=cfg["feature_normalize"])


def train_config(cfg: dict, **overrides):
    from .trainer import TrainConfig

    keys = ("epochs", "lr", "batch_size", "seed", "score_thresh", "min_iou", "max_matched", "eval_scenes",
            "eval_every", "eval_iou", "joint")
    values = {k: cfg[k] for k in keys}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(weights=loss_weights(cfg), **values)


def apply_thread_cap(environ=os.environ) -> None:
    value = environ.get("SGM3D_THREADS")
    if value is None:
        return
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"SGM3D_THREADS must be a positive integer, got {value!r}") from None
    for var in THREAD_VARS:
        environ[var] = str(n)


def fmt(v: float) -> str:
    return f"{v:.10g}"


# ---------------------------------------------------------------------------
# convert

def cmd_convert(args, cfg, out) -> int:
    from .data_io import (DEPTH_MAGIC, DepthRaster, load_depth_raster, parse_kitti_calib, read_point_cloud_text,
                          save_depth_raster, write_point_cloud_text)
    from .geometry import CameraIntrinsics, rasterize_depth, unproject_depth

    src = Path(args.input)
    cam = CameraIntrinsics.from_calibration(parse_kitti_calib(Path(args.calib).read_text()))
    if src.read_bytes()[:4] == DEPTH_MAGIC:
        points = unproject_depth(load_depth_raster(src), cam)
        Path(args.output).write_text(write_point_cloud_text(points))
        print(f"wrote {len(points)} points to {args.output}", file=out)
        return EXIT_OK
    if not args.size:
        raise UsageError("converting a point cloud to depth needs --size WIDTHxHEIGHT")
    try:
        w, h = (int(v) for v in args.size.lower().split("x"))
    except ValueError:
        raise UsageError(f"bad --size {args.size!r}; expected WIDTHxHEIGHT") from None
    points = read_point_cloud_text(src.read_text())
    save_depth_raster(DepthRaster(w, h, rasterize_depth(points, cam, h, w)), args.output)
    print(f"wrote {w}x{h} depth raster to {args.output}", file=out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# losses

BRANCH_KEYS = ("F_M", "F_S", "mask", "cls_logits_M", "cls_logits_S", "fg", "bg", "pairs", "scores_S", "res_S",
               "res_M", "dir_logits_M", "labels", "target_res", "target_dir", "depth_logits", "depth_target",
               "depth_valid")


def sample_branch_outputs(seed: int) -> dict:
    """Outputs of freshly initialized branches on one synthetic scene.

    The stereo outputs stand in for a teacher; the object-level pairs come
    from matching the top predictions of both branches by BEV IoU.
    """
    import numpy as np

    from .boxes import encode_folded
    from .losses import score_logits
    from .matcher import match_by_iou
    from .trainer import Batch, Model, _top_predictions, generate_scenes, init_branch, init_mono, prepare
    from .encoders import PILLAR_CHANNELS

    model = Model()
    ps = prepare(generate_scenes(seed, 1, model.setup), model)[0]
    batch = Batch.of([ps])
    rng = np.random.default_rng([seed, 5])
    s = model.stereo_forward(batch.pillars, init_branch(rng, len(PILLAR_CHANNELS), model.k))
    m = model.mono_forward(batch.feats, init_mono(rng, model.setup, model.k))
    si = _top_predictions(s.heads.scores, 0.0, 32)
    mi = _top_predictions(m.heads.scores, 0.0, 32)
    s_boxes = model.decode(s.heads, si)
    pairs = match_by_iou(model.decode(m.heads, mi), s_boxes, 0.25)
    mono = mi[pairs.mono_idx]
    a = batch.assignment
    return {
        "F_M": m.F[0], "F_S": s.F[0], "mask": ps.mask,
        "cls_logits_M": m.heads.cls, "cls_logits_S": s.heads.cls, "fg": a.fg, "bg": a.bg,
        "pairs": np.stack([mono, np.arange(len(mono))], axis=1).reshape(-1, 2),
        "scores_S": score_logits(s.heads.cls[si[pairs.stereo_idx]]).reshape(-1),
        "res_S": encode_folded(s_boxes[pairs.stereo_idx], model.grid.anchors[mono]).reshape(-1, 7),
        "res_M": m.heads.res, "dir_logits_M": m.heads.dir,
        "labels": a.labels, "target_res": a.target_res, "target_dir": a.target_dir,
        "depth_logits": m.depth_logits[0], "depth_target": ps.depth_target, "depth_valid": ps.depth_valid,
    }


def load_branch_outputs(path) -> dict:
    import numpy as np

    from .errors import DataError

    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read branch outputs from {path}: {exc}") from None
    missing = [k for k in BRANCH_KEYS if k not in data]
    if missing:
        raise DataError(f"{path} lacks arrays: {', '.join(missing)}")
    return data


def loss_table(data: dict, w) -> list[tuple[str, float]]:
    """Labeled component and composed loss values for one set of branch outputs."""
    from .anchors import Assignment
    from .errors import DataError
    from .losses import (anchor_da_loss, chain_scores, compose_total, depth_focal_loss, detection_task_loss,
                         feature_da_loss, object_box_loss, object_cls_loss, score_logits)

    labels = data["labels"].astype(int)
    assign = Assignment(labels, data["target_res"], data["target_dir"].astype(int), (labels > 0).astype(int) - 1)
    pairs = data["pairs"].astype(int).reshape(-1, 2)
    if len(pairs) and (pairs[:, 1].max() >= len(data["scores_S"]) or pairs[:, 1].max() >= len(data["res_S"])):
        raise DataError("pair indices exceed the stored teacher rows")
    feature = feature_da_loss(data["F_M"], data["F_S"], data["mask"], normalize=w.feature_normalize)
    anchor = anchor_da_loss(data["cls_logits_M"], data["cls_logits_S"], data["fg"], data["bg"], w)
    ocls = chain_scores(object_cls_loss(pairs, score_logits(data["cls_logits_M"]), data["scores_S"]),
                        data["cls_logits_M"].shape[1])
    obox = object_box_loss(pairs, data["res_M"], data["res_S"])
    depth = depth_focal_loss(data["depth_logits"], data["depth_target"], w, valid=data["depth_valid"])
    det = detection_task_loss(data["cls_logits_M"], assign, data["res_M"], data["dir_logits_M"], depth, w)
    comp = compose_total({"feature": feature, "anchor": anchor, "object_cls": ocls, "object_box": obox,
                          "detection": det}, w)
    return [
        ("L_feature", feature.value), ("L_anchor", anchor.value), ("L_MG-DA", comp["mg_da"].value),
        ("L_object_cls", ocls.value), ("L_object_box", obox.value), ("L_IoU-MA", comp["iou_ma"].value),
        ("L_SGM", comp["sgm"].value), ("L_depth", depth.value), ("L_3Ddet", det.value),
        ("L_total", comp["total"].value),
    ]


def cmd_losses(args, cfg, out) -> int:
    import numpy as np

    if args.save_sample:
        np.savez(args.save_sample, **sample_branch_outputs(args.seed))
        print(f"wrote sample branch outputs to {args.save_sample}", file=sys.stderr)
    data = load_branch_outputs(args.input) if args.input else sample_branch_outputs(args.seed)
    for name, value in loss_table(data, loss_weights(cfg)):
        print(f"{name:<14} {fmt(value)}", file=out)
    print(f"{'pairs':<14} {len(data['pairs'])}", file=out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck

def cmd_gradcheck(args, cfg, out) -> int:
    from .gradcheck import SUITE, run_suite

    names = args.only.split(",") if args.only else list(SUITE)
    unknown = [n for n in names if n not in SUITE]
    if unknown:
        raise UsageError(f"unknown losses {unknown}; known: {', '.join(SUITE)}")
    n = args.instances or cfg["gradcheck_instances"]
    tol = cfg["gradcheck_tol"]
    worst = run_suite(n, args.seed, cfg["gradcheck_step"], names)
    failed = [k for k, v in worst.items() if not v < tol]
    for k, v in worst.items():
        print(f"{k:<12} max_rel_err={v:.3e} {'FAIL' if k in failed else 'ok'}", file=out)
    print(f"{len(worst) - len(failed)}/{len(worst)} losses within {tol:g} over {n} instances", file=out)
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


# ---------------------------------------------------------------------------
# train-demo

def ablation_table(results: dict, teacher: dict | None = None) -> str:
    from .trainer import ABLATION_GROUPS

    head = "| group | feature | anchor | object | AP_BEV@0.5 | feature gap | L_3Ddet |"
    lines = [head, "|---|---|---|---|---|---|---|"]
    mark = lambda b: "x" if b else "-"  # noqa: E731
    for g, r in results.items():
        f, a, o = ABLATION_GROUPS[g]
        m = r.metrics
        lines.append(f"| {g} | {mark(f)} | {mark(a)} | {mark(o)} | {m['ap_bev']:.4f} | "
                     f"{m['feature_gap']:.4f} | {m['L_3Ddet']:.4f} |")
    if teacher is not None:
        lines.append(f"| stereo teacher | | | | {teacher['ap_bev']:.4f} | 0.0000 | |")
    return "\n".join(lines) + "\n"


def cmd_train_demo(args, cfg, out) -> int:
    from .trainer import ABLATION_GROUPS, Workbench, generate_scenes

    groups = args.groups
    bad = [g for g in groups if g not in ABLATION_GROUPS]
    if bad or not groups:
        raise UsageError(f"groups must be letters from {''.join(ABLATION_GROUPS)}")
    tc = train_config(cfg, epochs=args.epochs, seed=args.seed)
    scenes = generate_scenes(tc.seed, args.scenes or cfg["scenes"])
    bench = Workbench(scenes, tc)
    log = open(args.log, "w") if args.log else None
    try:
        results = {}
        for g in groups:
            print(f"training group {g}", file=sys.stderr)
            if log is not None:
                log.write(json.dumps({"group": g}) + "\n")
            results[g] = bench.run(tc.group(g), log)
    finally:
        if log is not None:
            log.close()
    table = ablation_table(results, bench.teacher_metrics())
    out.write(table)
    if args.out:
        Path(args.out).write_text(table)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args, cfg, out) -> int:
    from .data_io import Category
    from .errors import DataError
    from .evaluator import evaluate, load_folders

    for d in (args.pred, args.labels):
        if not Path(d).is_dir():
            raise DataError(f"not a directory: {d}")
    preds, gts = load_folders(args.pred, args.labels)
    if not gts:
        raise DataError(f"no label files in {args.labels}")
    res = evaluate(preds, gts, Category(args.category))
    print(f"{'criterion':<8} {'Easy':>8} {'Moderate':>9} {'Hard':>8}", file=out)
    for crit in ("AP_3D", "AP_BEV"):
        vals = [res[(crit, b)] * 100 for b in ("Easy", "Moderate", "Hard")]
        print(f"{crit:<9}{vals[0]:>8.2f} {vals[1]:>9.2f} {vals[2]:>8.2f}", file=out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# heatmap

def _grid(text: str | None):
    from .trainer import SceneSetup

    if not text:
        return SceneSetup().spec
    from .geometry import BevGridSpec

    try:
        x0, x1, y0, y1, cell = (float(v) for v in text.split(","))
        return BevGridSpec((x0, x1), (y0, y1), (-3.0, 1.0), cell)
    except ValueError as exc:
        raise UsageError(f"bad --grid {text!r}: {exc}") from None


def cmd_heatmap(args, cfg, out) -> int:
    if bool(args.input) == bool(args.demo):
        raise UsageError("heatmap needs exactly one of --input or --demo")
    if args.demo:
        return _heatmap_demo(args, cfg, out)
    import numpy as np

    from .data_io import parse_kitti_label
    from .errors import DataError
    from .heatmap_export import render_heatmap, write_pgm

    if not args.output:
        raise UsageError("--input needs --output")
    try:
        arr = np.load(args.input, allow_pickle=False)
        if hasattr(arr, "files"):
            key = args.key or arr.files[0]
            if key not in arr.files:
                raise DataError(f"{args.input} has no array {key!r}")
            arr = arr[key]
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {args.input}: {exc}") from None
    boxes = []
    if args.labels:
        boxes = [g.to_box3d() for g in parse_kitti_label(Path(args.labels).read_text()) if not g.is_dontcare]
    spec = _grid(args.grid) if boxes else None
    try:
        img = render_heatmap(arr, boxes, spec)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    write_pgm(args.output, img)
    print(f"wrote {img.shape[1]}x{img.shape[0]} heatmap to {args.output}", file=out)
    return EXIT_OK


def _heatmap_demo(args, cfg, out) -> int:
    """Teacher map next to mono maps trained without and with alignment."""
    from .heatmap_export import render_heatmap, write_pgm
    from .trainer import Batch, Workbench, foreground_margin, generate_scenes

    tc = train_config(cfg, epochs=args.epochs, seed=args.seed, eval_every=0)
    bench = Workbench(generate_scenes(tc.seed, args.scenes), tc)
    target = bench.held_out[0]
    dest = Path(args.demo)
    dest.mkdir(parents=True, exist_ok=True)
    maps = {"stereo": bench.model.stereo_forward(Batch.of([target]).pillars, bench.stereo).F}
    for name, group in (("mono_baseline", "a"), ("mono_aligned", "f")):
        r = bench.run(tc.group(group))
        maps[name] = bench.model.mono_forward(Batch.of([target]).feats, r.mono).F
    for name, F in maps.items():
        write_pgm(dest / f"{name}.pgm", render_heatmap(F[0], target.scene.boxes, bench.model.setup.spec))
        print(f"{name:<14} fg_margin={foreground_margin([target], [F[0]]):.4f} -> {name}.pgm", file=out)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stereoguide", description=__doc__.split("\n\n")[0])
    p.add_argument("--config", help="key = value file overriding the packaged defaults")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    c = sub.add_parser("convert", help="depth raster <-> camera-frame point cloud")
    c.add_argument("--input", required=True, help="SGMD depth raster or x y z text cloud")
    c.add_argument("--output", required=True)
    c.add_argument("--calib", required=True, help="KITTI calibration file (P2/P3)")
    c.add_argument("--size", help="WIDTHxHEIGHT of the raster when converting a cloud")

    c = sub.add_parser("losses", help="print every loss component for a set of branch outputs")
    c.add_argument("--input", help=".npz of branch outputs (default: a synthetic sample)")
    c.add_argument("--weights", help='overrides such as "λ_object=0.01,λ_anchor=1"')
    c.add_argument("--seed", type=int, default=0, help="seed of the synthetic sample")
    c.add_argument("--save-sample", help="also write the synthetic sample to this .npz")

    c = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    c.add_argument("--instances", type=int, help="random instances per loss")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--only", help="comma-separated subset of losses")

    c = sub.add_parser("train-demo", help="ablation matrix on synthetic scenes")
    c.add_argument("--groups", default="abcdef")
    c.add_argument("--scenes", type=int)
    c.add_argument("--epochs", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--weights", help='loss weight overrides such as "λ_object=0.01"')
    c.add_argument("--out", help="also write the comparison table here")
    c.add_argument("--log", help="JSON-lines training log")

    c = sub.add_parser("eval", help="AP_3D and AP_BEV per difficulty from result folders")
    c.add_argument("--pred", required=True, help="folder of <frame>.txt predictions")
    c.add_argument("--labels", required=True, help="folder of <frame>.txt labels")
    c.add_argument("--category", default="Car", choices=["Car", "Pedestrian", "Cyclist"])

    c = sub.add_parser("heatmap", help="render BEV response heatmaps as PGM")
    c.add_argument("--input", help=".npy or .npz BEV map, (C, H, W) or (H, W)")
    c.add_argument("--key", help="array name inside an .npz")
    c.add_argument("--output", help="PGM file to write")
    c.add_argument("--labels", help="KITTI label file whose boxes are outlined")
    c.add_argument("--grid", help="x0,x1,y0,y1,cell of the map (default: the synthetic grid)")
    c.add_argument("--demo", metavar="DIR", help="train briefly on synthetic scenes and render into DIR")
    c.add_argument("--scenes", type=int, default=40)
    c.add_argument("--epochs", type=int, default=10)
    c.add_argument("--seed", type=int, default=7)
    return p


HANDLERS = {"convert": cmd_convert, "losses": cmd_losses, "gradcheck": cmd_gradcheck,
            "train-demo": cmd_train_demo, "eval": cmd_eval, "heatmap": cmd_heatmap}


def run(argv=None, out=None) -> int:
    """Run one command; returns the process exit code."""
    from .errors import DataError, StereoGuideError

    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        apply_thread_cap()
        cfg = load_settings(args)
        return HANDLERS[args.command](args, cfg, out)
    except UsageError as exc:
        print(f"stereoguide: error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except (DataError, StereoGuideError, FileNotFoundError, IsADirectoryError, UnicodeDecodeError) as exc:
        print(f"stereoguide: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
