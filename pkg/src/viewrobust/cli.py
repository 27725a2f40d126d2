"""Command-line driver for the pipeline.

Subcommands: attack (search an adversarial viewpoint distribution for
one scene), train (distribution-aware adversarial training over a scene
set), certify (randomized-smoothing certification report), landscape
(2-axis loss grid for heatmaps), and make-toy-suite (emit the bundled
benchmark scenes).

Every run takes an optional JSON config file plus flag overrides; the
effective config, tool version, and master seed are stamped into a
header on every output artifact, and identical configs produce
byte-identical output trees.  Exit codes: 0 success, 1 runtime failure,
2 config or validation failure.
"""

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig, attack_success_rate, run_attack, scene_loss_fn
from .classifier import TinyImageClassifier, load_classifier, pretrain_clean
from .geometry import ViewBounds, Viewpoint
from .landscape import (
    BumpLandscape,
    four_bump_landscape,
    grid_sweep,
    single_bump_landscape,
)
from .mixture import sample_mixture, save_mixture
from .rendering import RenderConfig, RenderedImage, render_views, tile_images, write_ppm
from .scenes import NaturalViewpointSampler, load_scene, save_scene, toy_suite
from .serialization import (
    make_meta,
    meta_comment,
    read_array_container,
    write_csv,
    write_json,
)
from .smoothing import ABSTAIN, SmoothingConfig, aggregate_acr_ca, certify
from .training import TrainConfig, save_checkpoint, viat_train
from .validation import ValidationError

AXIS_NAMES = ("psi", "theta", "phi", "dx", "dy", "dz")
BUILTIN_LANDSCAPES = {
    "four-bump": four_bump_landscape,
    "single-bump": single_bump_landscape,
}


# --------------------------------------------------------------------------
# Shared plumbing: config merging, path checks, thread pool.
# --------------------------------------------------------------------------


def thread_count():
    """Worker count from VIEWROBUST_THREADS (default 1)."""
    raw = os.environ.get("VIEWROBUST_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"VIEWROBUST_THREADS: expected an integer, got {raw!r}")
    if n < 1:
        raise ValidationError(f"VIEWROBUST_THREADS: must be >= 1, got {n}")
    return n


def _thread_map(fn, items):
    """Order-preserving map, threaded when VIEWROBUST_THREADS > 1.

    Tasks must be pure (all randomness from per-item seeds), so the
    result does not depend on the worker count.
    """
    workers = thread_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _require_file(path, what):
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{what}: no such file: {path}")
    return p


def _outdir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_config_file(path):
    if path is None:
        return {}
    p = _require_file(path, "config")
    with open(p, "r", encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path}: invalid JSON ({exc})")
    if not isinstance(cfg, dict):
        raise ValidationError(f"config {path}: expected a JSON object at top level")
    return cfg


def _build_config(cls, section, overrides, where):
    """Dataclass from file section + CLI overrides; overrides win.

    Returns (instance, sorted override keys) so headers can record what
    was changed on the command line.
    """
    if not isinstance(section, dict):
        raise ValidationError(f"config section {where}: expected a JSON object")
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - fields)
    if unknown:
        raise ValidationError(f"config section {where}: unknown keys {unknown}")
    merged = {**section, **overrides}
    if "v0" in merged and not isinstance(merged["v0"], Viewpoint):
        merged["v0"] = Viewpoint.from_array(np.asarray(merged["v0"], dtype=float))
    for name in ("hidden", "input_shape", "adam_betas", "base_position"):
        if name in merged and isinstance(merged[name], list):
            merged[name] = tuple(merged[name])
    return cls(**merged), sorted(overrides)


def _collect(args, names):
    """CLI override dict: flags the user actually set (non-None)."""
    out = {}
    for name in names:
        val = getattr(args, name.replace("-", "_"), None)
        if val is not None:
            out[name] = val
    return out


def _bounds_from_config(file_cfg):
    section = file_cfg.get("bounds")
    if section is None:
        return ViewBounds.default()
    return ViewBounds.from_dict(section)


def _render_config(args, file_cfg):
    overrides = _collect(args, ["width", "height", "m_samples"])
    return _build_config(RenderConfig, file_cfg.get("render", {}), overrides, "render")


def _load_classifier(path):
    # attack/certify/landscape accept a training checkpoint directly, so
    # a train run's final.ckpt feeds the rest of the pipeline
    return load_classifier(_require_file(path, "classifier"))


def _load_scene_file(path):
    return load_scene(_require_file(path, "scene"))


def _manifest_scenes(manifest_path):
    manifest_path = Path(manifest_path)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"manifest {manifest_path}: invalid JSON ({exc})")
    if "scenes" not in manifest:
        raise ValidationError(f"manifest {manifest_path}: missing 'scenes' list")
    base = manifest_path.parent
    return [load_scene(_require_file(base / e["file"], "scene")) for e in manifest["scenes"]]


def load_scene_set(path):
    """Scenes from a manifest file, a directory holding one, or a single
    scene file."""
    p = Path(path)
    if p.is_dir():
        manifest = p / "manifest.json"
        if not manifest.is_file():
            raise ValidationError(f"scenes: no manifest.json in directory: {path}")
        return _manifest_scenes(manifest)
    p = _require_file(p, "scenes")
    if p.name == "manifest.json":
        return _manifest_scenes(p)
    with open(p, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"scenes {path}: invalid JSON ({exc})")
    if "scenes" in payload:
        return _manifest_scenes(p)
    return [load_scene(p)]


def _parse_axes(text):
    parts = [t.strip() for t in str(text).split(",")]
    if len(parts) != 2:
        raise ValidationError(f"axes: expected two comma-separated axes, got {text!r}")
    axes = []
    for part in parts:
        if part in AXIS_NAMES:
            axes.append(AXIS_NAMES.index(part))
        elif part.isdigit() and int(part) < 6:
            axes.append(int(part))
        else:
            raise ValidationError(f"axes: unknown axis {part!r} (use {AXIS_NAMES})")
    if axes[0] == axes[1]:
        raise ValidationError("axes: the two sweep axes must differ")
    return tuple(axes)


def _parse_floats(text, n, what):
    parts = [t.strip() for t in str(text).split(",")]
    if len(parts) != n:
        raise ValidationError(f"{what}: expected {n} comma-separated values")
    try:
        return [float(t) for t in parts]
    except ValueError:
        raise ValidationError(f"{what}: non-numeric entry in {text!r}")


# --------------------------------------------------------------------------
# attack
# --------------------------------------------------------------------------


def cmd_attack(args):
    file_cfg = _load_config_file(args.config)
    overrides = _collect(
        args, ["k", "iters", "q", "eta", "lam", "seed", "baseline", "antithetic"]
    )
    attack_cfg, over = _build_config(
        AttackConfig, file_cfg.get("attack", {}), overrides, "attack"
    )
    render_cfg, rover = _render_config(args, file_cfg)
    bounds = _bounds_from_config(file_cfg)
    scene = _load_scene_file(args.scene)
    classifier = _load_classifier(args.classifier)
    out = _outdir(args.out)

    result = run_attack(classifier, scene, bounds, attack_cfg, render_cfg)
    success = attack_success_rate(
        classifier,
        scene,
        result.params,
        bounds,
        args.eval_n,
        np.random.default_rng([attack_cfg.seed, 71]),
        render_cfg,
    )
    summary = {
        "label": scene.label,
        "success_rate": success,
        "eval_draws": args.eval_n,
        "final_loss_mean": result.final_loss_mean,
        "final_entropy": result.final_entropy,
    }
    meta = make_meta(
        attack_cfg.seed,
        config={"attack": attack_cfg, "render": render_cfg},
        command="attack",
        overrides=over + rover,
        scene=str(args.scene),
        classifier=str(args.classifier),
    )

    save_mixture(out / "mixture.json", result.params, bounds, meta={**meta, "summary": summary})
    write_csv(
        out / "trace.csv",
        ["iteration", "loss_mean", "entropy", "max_omega"],
        [dataclasses.asdict(row) for row in result.trace],
        meta=meta,
    )
    draws = sample_mixture(
        result.params, bounds, args.grid, np.random.default_rng([attack_cfg.seed, 73])
    )
    frames = render_views(scene, draws.v, render_cfg)
    tiles = [
        RenderedImage(width=render_cfg.width, height=render_cfg.height, pixels=f)
        for f in frames
    ]
    grid = tile_images(tiles, columns=min(args.grid, 4))
    write_ppm(grid, out / "renders.ppm", comment=meta_comment(meta))

    print(
        f"attack: scene={scene.name or args.scene} label={scene.label} "
        f"success_rate={success:.3f} final_loss={result.final_loss_mean:.4f} "
        f"entropy={result.final_entropy:.3f} -> {out}"
    )
    return 0


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def _template_from_checkpoint(path):
    header, _ = read_array_container(_require_file(path, "checkpoint"))
    if header.get("kind") != "viat-checkpoint":
        raise ValidationError(f"{path}: not a training checkpoint")
    return TinyImageClassifier(
        hidden=tuple(header["hidden"]),
        n_classes=header["n_classes"],
        input_shape=tuple(header["input_shape"]),
    )


def cmd_train(args):
    file_cfg = _load_config_file(args.config)
    train_over = _collect(
        args,
        [
            "epochs", "t0", "t_prime", "update_fraction", "pi", "adv_per_batch",
            "clean_per_batch", "steps_per_epoch", "eta_w", "seed",
        ],
    )
    train_cfg, tover = _build_config(
        TrainConfig, file_cfg.get("train", {}), train_over, "train"
    )
    attack_section = dict(file_cfg.get("attack", {}))
    attack_over = {
        key[len("attack_"):]: val
        for key, val in _collect(
            args, ["attack_k", "attack_q", "attack_eta", "attack_lam"]
        ).items()
    }
    attack_section.setdefault("seed", train_cfg.seed)
    attack_cfg, aover = _build_config(AttackConfig, attack_section, attack_over, "attack")
    render_cfg, rover = _render_config(args, file_cfg)
    bounds = _bounds_from_config(file_cfg)
    scenes = load_scene_set(args.scenes)
    out = _outdir(args.out)
    meta = make_meta(
        train_cfg.seed,
        config={"train": train_cfg, "attack": attack_cfg, "render": render_cfg},
        command="train",
        overrides=tover + [f"attack_{k}" for k in aover] + rover,
        scenes=str(args.scenes),
    )

    if args.resume is not None:
        classifier = _template_from_checkpoint(args.resume)
    elif args.pretrained is not None:
        classifier = _load_classifier(args.pretrained)
    else:
        sampler = NaturalViewpointSampler(bounds)
        classifier, holdout = pretrain_clean(
            scenes, sampler, render_cfg, seed=train_cfg.seed
        )
        print(f"pretrain: holdout accuracy {holdout:.3f}")

    classifier, pool, metrics = viat_train(
        scenes,
        classifier,
        bounds,
        train_cfg,
        attack_cfg,
        render_config=render_cfg,
        checkpoint_dir=out,
        resume_from=args.resume,
    )

    write_csv(
        out / "metrics.csv",
        ["epoch", "clean_acc", "adv_acc", "mean_pool_entropy"],
        [dataclasses.asdict(m) for m in metrics],
        meta=meta,
    )
    save_checkpoint(out / "final.ckpt", classifier, pool, metrics, metrics[-1].epoch, meta=meta)
    last = metrics[-1]
    print(
        f"train: epochs={last.epoch} clean_acc={last.clean_acc:.3f} "
        f"adv_acc={last.adv_acc:.3f} pool_entropy={last.mean_pool_entropy:.3f} -> {out}"
    )
    return 0


# --------------------------------------------------------------------------
# certify
# --------------------------------------------------------------------------


def cmd_certify(args):
    file_cfg = _load_config_file(args.config)
    overrides = _collect(args, ["sigma_tilde", "n", "n0", "alpha", "seed"])
    if args.v0 is not None:
        overrides["v0"] = Viewpoint(*_parse_floats(args.v0, 6, "v0"))
    smooth_cfg, sover = _build_config(
        SmoothingConfig, file_cfg.get("smoothing", {}), overrides, "smoothing"
    )
    render_cfg, rover = _render_config(args, file_cfg)
    bounds = _bounds_from_config(file_cfg)
    scenes = load_scene_set(args.scenes)
    classifier = _load_classifier(args.classifier)
    out = _outdir(args.out)
    meta = make_meta(
        smooth_cfg.seed,
        config={"smoothing": smooth_cfg, "render": render_cfg},
        command="certify",
        overrides=sover + rover,
        scenes=str(args.scenes),
        classifier=str(args.classifier),
    )

    def one(item):
        index, scene = item
        cfg = smooth_cfg.with_overrides(seed=[smooth_cfg.seed, 61, index])
        return certify(classifier, scene, scene.label, cfg, bounds, render_cfg)

    records = _thread_map(one, list(enumerate(scenes)))
    rows = [
        {
            "object_id": scene.name or f"object{idx}",
            "class": scene.label,
            "predicted": rec.predicted_class,
            "pA_lower": rec.pa_lower,
            "radius": rec.radius,
            "correct": int(rec.correct),
            "clip_fraction": rec.clip_fraction,
        }
        for (idx, scene), rec in zip(enumerate(scenes), records)
    ]
    acr, ca = aggregate_acr_ca(records)
    write_csv(
        out / "certification.csv",
        ["object_id", "class", "predicted", "pA_lower", "radius", "correct", "clip_fraction"],
        rows,
        meta=meta,
    )
    write_json(
        out / "summary.json",
        {
            "meta": meta,
            "acr": acr,
            "certified_accuracy": ca,
            "n_objects": len(records),
            "abstentions": sum(1 for r in records if r.predicted_class == ABSTAIN),
        },
    )
    print(f"certify: objects={len(records)} ACR={acr:.4f} CA={ca:.3f} -> {out}")
    return 0


# --------------------------------------------------------------------------
# landscape
# --------------------------------------------------------------------------


def cmd_landscape(args):
    file_cfg = _load_config_file(args.config)
    render_cfg, rover = _render_config(args, file_cfg)
    bounds = _bounds_from_config(file_cfg)
    axes = _parse_axes(args.axes)
    shape = tuple(int(x) for x in _parse_floats(args.shape, 2, "shape"))
    if min(shape) < 2:
        raise ValidationError(f"shape: each grid side must be >= 2, got {shape}")
    fixed = (
        np.zeros(6) if args.fixed is None else np.asarray(_parse_floats(args.fixed, 6, "fixed"))
    )

    if args.builtin is not None:
        if args.scene or args.classifier:
            raise ValidationError("landscape: pass either --builtin or --scene/--classifier")
        surface = BUILTIN_LANDSCAPES[args.builtin](bounds=bounds)
        loss_fn = surface
        source = f"builtin:{args.builtin}"
    else:
        if not (args.scene and args.classifier):
            raise ValidationError("landscape: need --scene and --classifier (or --builtin)")
        scene = _load_scene_file(args.scene)
        classifier = _load_classifier(args.classifier)
        loss_fn = scene_loss_fn(classifier, scene, scene.label, render_cfg)
        source = str(args.scene)

    vals0, vals1, grid = grid_sweep(loss_fn, bounds, axes=axes, shape=shape, fixed=fixed)
    out = _outdir(args.out)
    name0, name1 = AXIS_NAMES[axes[0]], AXIS_NAMES[axes[1]]
    meta = make_meta(
        args.seed if args.seed is not None else 0,
        config={"render": render_cfg, "axes": [name0, name1], "shape": list(shape),
                "fixed": fixed.tolist()},
        command="landscape",
        overrides=rover,
        source=source,
    )
    rows = [
        {
            "i": i,
            "j": j,
            name0: float(vals0[i]),
            name1: float(vals1[j]),
            "loss": float(grid[i, j]),
        }
        for i in range(shape[0])
        for j in range(shape[1])
    ]
    write_csv(out / "landscape.csv", ["i", "j", name0, name1, "loss"], rows, meta=meta)
    peak = np.unravel_index(int(np.argmax(grid)), grid.shape)
    print(
        f"landscape: {shape[0]}x{shape[1]} grid over ({name0}, {name1}), "
        f"max loss {grid[peak]:.4f} at ({vals0[peak[0]]:.2f}, {vals1[peak[1]]:.2f}) -> {out}"
    )
    return 0


# --------------------------------------------------------------------------
# make-toy-suite
# --------------------------------------------------------------------------


def cmd_make_toy_suite(args):
    out = _outdir(args.out)
    scenes = toy_suite()
    entries = []
    for scene in scenes:
        fname = f"scene_{scene.name}.json"
        save_scene(scene, out / fname)
        entries.append({"file": fname, "label": scene.label, "name": scene.name})
    fixture = four_bump_landscape()
    fixture.save(out / "four_bump_landscape.json")
    meta = make_meta(0, command="make-toy-suite")
    write_json(
        out / "manifest.json",
        {
            "meta": meta,
            "scenes": entries,
            "landscape": "four_bump_landscape.json",
        },
    )
    print(f"make-toy-suite: wrote {len(scenes)} scenes + landscape fixture -> {out}")
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _add_common(sub):
    sub.add_argument("--config", help="JSON config file; flags override its fields")
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--seed", type=int, help="master seed recorded in every artifact")


def _add_render_flags(sub):
    sub.add_argument("--width", type=int, help="render width in pixels")
    sub.add_argument("--height", type=int, help="render height in pixels")
    sub.add_argument("--m-samples", type=int, help="volume samples per ray")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="viewrobust",
        description="Adversarial viewpoint distributions, robust training, "
        "and certified viewpoint robustness.",
    )
    parser.add_argument("--version", action="version", version=f"viewrobust {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("attack", help="search an adversarial viewpoint distribution")
    _add_common(p)
    _add_render_flags(p)
    p.add_argument("--scene", required=True, help="scene JSON file")
    p.add_argument("--classifier", required=True, help="classifier checkpoint")
    p.add_argument("--k", type=int, help="mixture components")
    p.add_argument("--iters", type=int, help="optimization iterations")
    p.add_argument("--q", type=int, help="Monte Carlo samples per step")
    p.add_argument("--eta", type=float, help="step size")
    p.add_argument("--lam", type=float, help="entropy weight")
    p.add_argument("--baseline", choices=["none", "batch", "loo", "regress"],
                   help="variance-reduction baseline")
    p.add_argument("--antithetic", action=argparse.BooleanOptionalAction, default=None,
                   help="antithetic sampling")
    p.add_argument("--eval-n", type=int, default=200,
                   help="fresh draws for the success-rate summary")
    p.add_argument("--grid", type=int, default=8,
                   help="adversarial renders in the PPM grid")
    p.set_defaults(func=cmd_attack)

    p = subs.add_parser("train", help="distribution-aware adversarial training")
    _add_common(p)
    _add_render_flags(p)
    p.add_argument("--scenes", required=True, help="scene manifest or directory")
    p.add_argument("--pretrained", help="classifier checkpoint to start from")
    p.add_argument("--resume", help="resume from a training checkpoint")
    p.add_argument("--epochs", type=int, help="outer epochs")
    p.add_argument("--t0", type=int, help="initial attack iterations per object")
    p.add_argument("--t-prime", type=int, help="warm-start iterations per selected object")
    p.add_argument("--update-fraction", type=float,
                   help="fraction of each class's pool updated per epoch")
    p.add_argument("--pi", type=float, help="probability of keeping one's own distribution")
    p.add_argument("--adv-per-batch", type=int, help="adversarial views per batch")
    p.add_argument("--clean-per-batch", type=int, help="natural views per batch")
    p.add_argument("--steps-per-epoch", type=int, help="SGD steps per epoch")
    p.add_argument("--eta-w", type=float, help="classifier step size (summed batch loss)")
    p.add_argument("--attack-k", type=int, help="inner attack mixture components")
    p.add_argument("--attack-q", type=int, help="inner attack samples per step")
    p.add_argument("--attack-eta", type=float, help="inner attack step size")
    p.add_argument("--attack-lam", type=float, help="inner attack entropy weight")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("certify", help="randomized-smoothing certification report")
    _add_common(p)
    _add_render_flags(p)
    p.add_argument("--scenes", required=True, help="scene manifest, directory, or file")
    p.add_argument("--classifier", required=True, help="classifier checkpoint")
    p.add_argument("--sigma-tilde", type=float, help="noise stddev in normalized units")
    p.add_argument("--n", type=int, help="estimation samples")
    p.add_argument("--n0", type=int, help="selection samples")
    p.add_argument("--alpha", type=float, help="certification failure probability")
    p.add_argument("--v0", help="base viewpoint, six comma-separated values")
    p.set_defaults(func=cmd_certify)

    p = subs.add_parser("landscape", help="loss grid over two viewpoint axes")
    _add_common(p)
    _add_render_flags(p)
    p.add_argument("--scene", help="scene JSON file")
    p.add_argument("--classifier", help="classifier checkpoint")
    p.add_argument("--builtin", choices=sorted(BUILTIN_LANDSCAPES),
                   help="planted synthetic surface instead of a scene")
    p.add_argument("--axes", default="psi,phi", help="the two sweep axes")
    p.add_argument("--shape", default="10,10", help="grid shape, e.g. 40,40")
    p.add_argument("--fixed", help="six comma-separated values for the non-swept axes "
                   "(default all zero)")
    p.set_defaults(func=cmd_landscape)

    p = subs.add_parser("make-toy-suite", help="emit the bundled benchmark scenes")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_make_toy_suite)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure, distinct from bad config
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
