"""Batch command-line front end.

Subcommands: gen, select, train, purify, eval. Every command is
deterministic given config + seed. Exit codes: 0 ok, 2 config error,
3 selection error, 4 training-input error, 5 file-integrity error,
6 evaluation-input error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import gpff
from .config import RunConfig, load_config, override_seed
from .distill import TeacherField, train
from .errors import DataError, IntegrityError, ParameterError
from .geometry import PointCloud
from .lifting import CameraView, FeatureField, lift_multiview
from .ply import read_ply, write_ply
from .pooling import PoolingConfig, purify
from .selection import filter_median, scene_stats, select_subset
from .student import init_student, load_student, save_student
from .synth import (
    STRUCTURAL_CLASSES,
    SceneSpec,
    assign_labels,
    corrupt_features,
    evaluate,
    generate_scene,
    make_prototypes,
    teacher_oracle,
)
from .geometry import build_neighbor_index

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SELECTION = 3
EXIT_TRAIN_INPUT = 4
EXIT_INTEGRITY = 5
EXIT_EVAL_INPUT = 6


def _say(quiet: bool, *parts) -> None:
    if not quiet:
        print(*parts)


def _dump_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_field(path, field: FeatureField) -> None:
    """Feature fields persist as GPFF values; a row is covered iff nonzero."""
    gpff.write_gpff(path, field.values.astype(np.float32))


def read_field(path, granularity: str = "point") -> FeatureField:
    vals = gpff.read_gpff(path).astype(np.float64)
    if vals.ndim != 2:
        raise IntegrityError(f"{path}: expected a rank-2 feature tensor")
    coverage = np.abs(vals).sum(axis=1) > 0
    return FeatureField(vals, granularity, coverage)


def _views_to_json(scene_id: str, views: list[CameraView], out_dir: Path) -> dict:
    entries = []
    for i, v in enumerate(views):
        feat_name = f"{scene_id}.view{i}.feat.gpff"
        depth_name = f"{scene_id}.view{i}.depth.gpff"
        gpff.write_gpff(out_dir / feat_name, v.feature_map.astype(np.float32))
        gpff.write_gpff(out_dir / depth_name, v.depth_map.astype(np.float32))
        entries.append(
            {
                "fx": v.fx, "fy": v.fy, "cx": v.cx, "cy": v.cy,
                "width": v.width, "height": v.height,
                "extrinsics": [float(x) for x in v.extrinsics.reshape(-1)],
                "feature_map": feat_name,
                "depth_map": depth_name,
            }
        )
    return {"views": entries}


def load_views(path) -> list[CameraView]:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    views = []
    for entry in doc["views"]:
        feat = gpff.read_gpff(path.parent / entry["feature_map"]).astype(np.float64)
        depth = gpff.read_gpff(path.parent / entry["depth_map"]).astype(np.float64)
        views.append(
            CameraView(
                fx=entry["fx"], fy=entry["fy"], cx=entry["cx"], cy=entry["cy"],
                extrinsics=np.array(entry["extrinsics"], dtype=np.float64).reshape(4, 4),
                width=entry["width"], height=entry["height"],
                feature_map=feat, depth_map=depth,
            )
        )
    return views


def _scene_spec(cfg: RunConfig, scene_idx: int, prototypes, class_names) -> SceneSpec:
    s = cfg.synth
    return SceneSpec(
        seed=int(np.random.default_rng((s.seed, 100 + scene_idx)).integers(2**31)),
        extents=s.extents,
        object_count=s.object_count,
        shape_palette=tuple(s.shape_palette),
        points_per_object=s.points_per_object,
        noise_sigma=s.noise_sigma,
        class_names=class_names,
        feature_dim=s.feature_dim,
        feature_noise=s.feature_noise,
        num_views=s.num_views,
        image_size=s.image_size,
        focal=s.focal,
        scene_id=f"scene_{scene_idx:04d}",
        prototypes=prototypes,
    )


def cmd_gen(cfg: RunConfig, out_dir: Path, quiet: bool) -> int:
    s = cfg.synth
    out_dir.mkdir(parents=True, exist_ok=True)
    class_names = STRUCTURAL_CLASSES + tuple(s.shape_palette)
    prototypes = make_prototypes(len(class_names), s.feature_dim, s.seed)
    scene_ids = []
    files = {}
    for i in range(s.scenes):
        spec = _scene_spec(cfg, i, prototypes, class_names)
        scene = generate_scene(spec)
        sid = spec.scene_id
        scene_ids.append(sid)
        write_ply(out_dir / f"{sid}.ply", scene.cloud)
        views_doc = _views_to_json(sid, scene.views, out_dir)
        _dump_json(out_dir / f"{sid}.views.json", views_doc)
        teacher = teacher_oracle(
            scene.instances, s.teacher_dim, s.teacher_sigma, (s.seed, 200 + i)
        )
        gpff.write_gpff(out_dir / f"{sid}.teacher.gpff",
                        teacher.values.astype(np.float32))
        gpff.write_gpff(out_dir / f"{sid}.inst.gpff",
                        scene.instances.astype(np.float32))
        sem = lift_multiview(scene.cloud, scene.views, cfg.lifting.depth_tol)
        if s.corrupt_flip_rate > 0 or s.corrupt_sigma > 0:
            index = build_neighbor_index(scene.cloud.positions)
            sem = corrupt_features(
                sem, scene.cloud.labels, prototypes,
                s.corrupt_flip_rate, s.corrupt_sigma, s.corrupt_boundary_bias,
                index, (s.seed, 300 + i),
            )
        write_field(out_dir / f"{sid}.sem.gpff", sem)
        files[sid] = {
            "ply": f"{sid}.ply",
            "views": f"{sid}.views.json",
            "teacher": f"{sid}.teacher.gpff",
            "instances": f"{sid}.inst.gpff",
            "sem": f"{sid}.sem.gpff",
        }
        _say(quiet, f"gen: {sid} ({len(scene.cloud)} points, {len(scene.views)} views)")
    excluded = [class_names.index(c) for c in STRUCTURAL_CLASSES if c in class_names]
    manifest = {
        "scene_ids": scene_ids,
        "files": files,
        "class_names": list(class_names),
        "prototypes": [[float(x) for x in row] for row in prototypes],
        "feature_dim": s.feature_dim,
        "teacher_dim": s.teacher_dim,
        "excluded_classes": excluded,
        "seed": s.seed,
    }
    _dump_json(out_dir / "manifest.json", manifest)
    _say(quiet, f"gen: wrote manifest with {len(scene_ids)} scenes to {out_dir}")
    return EXIT_OK


def _load_manifest(path) -> tuple[dict, Path]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh), path.parent


def cmd_select(cfg: RunConfig, manifest_path, out_dir: Path, quiet: bool) -> int:
    manifest, root = _load_manifest(manifest_path)
    class_count = len(manifest["class_names"])
    stats = []
    for sid in manifest["scene_ids"]:
        cloud = read_ply(root / manifest["files"][sid]["ply"])
        stats.append(scene_stats(cloud, class_count))
    kept = filter_median(stats)
    sel = cfg.selection
    if len(kept) < sel.k_subset:
        print(
            f"select: only {len(kept)} of {len(stats)} scenes survive the median "
            f"filter; cannot pick {sel.k_subset}",
            file=sys.stderr,
        )
        return EXIT_SELECTION
    if len(kept) < sel.k_clusters:
        print(
            f"select: {len(kept)} filtered scenes cannot fill {sel.k_clusters} "
            "clusters", file=sys.stderr,
        )
        return EXIT_SELECTION
    chosen = select_subset(kept, sel.k_subset, sel.k_clusters, sel.gamma, sel.seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "selected": chosen,
        "stats": {
            s.scene_id: {
                "n_classes": s.n_classes,
                "entropy_bits": s.entropy_bits,
                "cluster": s.cluster,
                "score": s.score,
            }
            for s in kept
        },
        "k_subset": sel.k_subset,
        "k_clusters": sel.k_clusters,
        "gamma": sel.gamma,
        "seed": sel.seed,
    }
    _dump_json(out_dir / "selection.json", doc)
    _say(quiet, f"select: kept {len(kept)}/{len(stats)}, picked {chosen}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, manifest_path, selection_path, out_dir: Path,
              quiet: bool) -> int:
    manifest, root = _load_manifest(manifest_path)
    if selection_path is None:
        scene_ids = manifest["scene_ids"]
    else:
        with open(selection_path, "r", encoding="utf-8") as fh:
            scene_ids = json.load(fh)["selected"]
    scenes = []
    sem_fields = [] if cfg.student.concat_mode else None
    for sid in scene_ids:
        entry = manifest["files"].get(sid)
        if entry is None:
            print(f"train: scene {sid!r} missing from manifest", file=sys.stderr)
            return EXIT_TRAIN_INPUT
        teacher_path = root / entry["teacher"]
        if not teacher_path.exists():
            print(f"train: missing teacher file for scene {sid!r}: {teacher_path}",
                  file=sys.stderr)
            return EXIT_TRAIN_INPUT
        cloud = read_ply(root / entry["ply"])
        tvals = gpff.read_gpff(teacher_path).astype(np.float64)
        tvals /= np.linalg.norm(tvals, axis=1, keepdims=True)
        scenes.append((cloud, TeacherField(tvals, source="file")))
        if sem_fields is not None:
            sem_fields.append(read_field(root / entry["sem"]))
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.distill.epochs == 0:
        net = init_student(cfg.student.widths, cfg.student.seed)
        save_student(out_dir / "checkpoint.gpck", net)
        (out_dir / "train_log.csv").write_text(
            "epoch,scene_id,mean_loss,lr_input,lr_middle,lr_output,wall_ms\n"
        )
        _say(quiet, "train: 0 epochs, checkpoint equals fresh init")
        return EXIT_OK
    net, log = train(
        scenes, cfg.distill,
        widths=cfg.student.widths,
        student_seed=cfg.student.seed,
        k_ctx=cfg.geometry.k_ctx,
        semantic_fields=sem_fields,
    )
    save_student(out_dir / "checkpoint.gpck", net)
    log.write_csv(out_dir / "train_log.csv")
    for w in log.warnings:
        _say(quiet, f"train: warning: {w}")
    _say(
        quiet,
        f"train: {cfg.distill.epochs} epochs over {len(scenes)} scenes; "
        f"first/last epoch mean loss "
        f"{log.epoch_mean_loss[0]:.4f} -> {log.epoch_mean_loss[-1]:.4f}",
    )
    return EXIT_OK


def cmd_purify(cfg: RunConfig, checkpoint_path, scene_path, sem_path,
               views_path, out_path: Path, quiet: bool) -> int:
    net = load_student(checkpoint_path)
    cloud = read_ply(scene_path)
    if sem_path is None:
        default_sem = Path(str(scene_path)).with_suffix(".sem.gpff")
        sem_path = default_sem if default_sem.exists() else None
    if sem_path is not None:
        sem = read_field(sem_path)
        if len(sem) != len(cloud):
            raise IntegrityError(
                f"semantic field rows ({len(sem)}) != scene points ({len(cloud)})"
            )
    else:
        if views_path is None:
            views_path = Path(str(scene_path)).with_suffix(".views.json")
        views = load_views(views_path)
        sem = lift_multiview(cloud, views, cfg.lifting.depth_tol)
    pcfg = PoolingConfig(
        voxel_size=cfg.geometry.voxel_size, k=cfg.pooling.k,
        alpha=cfg.pooling.alpha, t=cfg.pooling.t, k_ctx=cfg.geometry.k_ctx,
    )
    refined = purify(cloud, sem, net, pcfg)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_field(out_path, refined)
    _say(quiet, f"purify: wrote {out_path} ({len(refined)} x {refined.dim})")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, pred_path, scene_path, manifest_path,
             out_dir: Path, quiet: bool) -> int:
    cloud = read_ply(scene_path)
    if cloud.labels is None:
        print(f"eval: scene {scene_path} carries no labels", file=sys.stderr)
        return EXIT_EVAL_INPUT
    pred_arr = gpff.read_gpff(pred_path)
    flagged = 0
    if manifest_path is not None:
        manifest, _ = _load_manifest(manifest_path)
        class_names = manifest["class_names"]
        prototypes = np.asarray(manifest["prototypes"], dtype=np.float64)
        excluded = manifest["excluded_classes"]
    else:
        class_names = list(STRUCTURAL_CLASSES + tuple(cfg.synth.shape_palette))
        prototypes = make_prototypes(
            len(class_names), cfg.synth.feature_dim, cfg.synth.seed
        )
        excluded = [class_names.index(c) for c in STRUCTURAL_CLASSES]
    if pred_arr.ndim == 2:
        field = read_field(pred_path)
        pred, flagged = assign_labels(field, prototypes)
    elif pred_arr.ndim == 1:
        pred = pred_arr.astype(np.int64)
    else:
        print("eval: prediction tensor must be rank 1 (labels) or 2 (features)",
              file=sys.stderr)
        return EXIT_EVAL_INPUT
    if pred.shape[0] != len(cloud):
        print(
            f"eval: prediction rows ({pred.shape[0]}) != scene points "
            f"({len(cloud)})", file=sys.stderr,
        )
        return EXIT_EVAL_INPUT
    try:
        report = evaluate(pred, cloud.labels, len(class_names), excluded)
    except (DataError, ParameterError) as exc:
        print(f"eval: {exc}", file=sys.stderr)
        return EXIT_EVAL_INPUT
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = report.to_json_dict()
    doc["class_names"] = class_names
    doc["zero_feature_rows"] = flagged
    _dump_json(out_dir / "report.json", doc)
    with open(out_dir / "report.csv", "w", encoding="utf-8") as fh:
        fh.write("scene,miou,macc,f_miou,f_macc\n")
        fh.write(
            f"{cloud.scene_id},{report.miou!r},{report.macc!r},"
            f"{report.f_miou!r},{report.f_macc!r}\n"
        )
    _say(quiet, f"eval: mIoU {report.miou:.4f} mAcc {report.macc:.4f} "
                f"f-mIoU {report.f_miou:.4f} f-mAcc {report.f_macc:.4f}")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointpurify",
        description="Geometry-guided purification of per-point semantic features",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", default="out", help="output directory (or file)")
        p.add_argument("--seed", type=int, default=None,
                       help="override every section seed from this master seed")
        p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("gen", help="generate the synthetic dataset")
    common(p)

    p = sub.add_parser("select", help="entropy/richness scene subset selection")
    common(p)
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("train", help="contrastive distillation training")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--selection", default=None, help="selection.json (default: all scenes)")

    p = sub.add_parser("purify", help="pool a semantic field over learned affinities")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True, help="scene PLY path")
    p.add_argument("--sem", default=None, help="semantic-field GPFF (default: <scene>.sem.gpff)")
    p.add_argument("--views", default=None, help="views JSON for lifting when no GPFF exists")

    p = sub.add_parser("eval", help="segmentation metrics against scene labels")
    common(p)
    p.add_argument("--pred", required=True, help="GPFF: rank-2 features or rank-1 labels")
    p.add_argument("--scene", required=True, help="ground-truth scene PLY")
    p.add_argument("--manifest", default=None, help="manifest for prototypes/classes")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            override_seed(cfg, args.seed)
    except ParameterError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(args.out)
    try:
        if args.command == "gen":
            return cmd_gen(cfg, out, args.quiet)
        if args.command == "select":
            return cmd_select(cfg, args.manifest, out, args.quiet)
        if args.command == "train":
            return cmd_train(cfg, args.manifest, args.selection, out, args.quiet)
        if args.command == "purify":
            out_file = out if out.suffix else out / "purified.gpff"
            return cmd_purify(cfg, args.checkpoint, args.scene, args.sem,
                              args.views, out_file, args.quiet)
        if args.command == "eval":
            return cmd_eval(cfg, args.pred, args.scene, args.manifest, out,
                            args.quiet)
        raise AssertionError(f"unhandled command {args.command}")
    except IntegrityError as exc:
        print(f"file integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except ParameterError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        if args.command == "train":
            print(f"training input error: {exc}", file=sys.stderr)
            return EXIT_TRAIN_INPUT
        if args.command == "eval":
            print(f"evaluation input error: {exc}", file=sys.stderr)
            return EXIT_EVAL_INPUT
        if args.command == "select":
            print(f"selection error: {exc}", file=sys.stderr)
            return EXIT_SELECTION
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
