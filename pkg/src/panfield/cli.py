"""Command-line entry point: dataset generation, training, meta
initialization, rendering, evaluation, scripted editing, and the edit
service.

Conventions shared by every subcommand: diagnostics go to stderr, machine
output goes to files or stdout, exit code 0 means the operation completed,
and anything seeded is fully reproducible. Commands that produce a run
directory echo their effective configuration into it as config.json; config
files and --set use the same keys, with dot paths for nesting.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import fields as fl
from . import metainit as mi
from . import renderer as rd
from . import scene as sc
from . import synth
from . import trainer as tr


class CliError(Exception):
    """User-facing failure; message printed to stderr, exit code 1."""


SCENES = {"kitti-micro": synth.kitti_micro}


def info(msg: str) -> None:
    print(msg, file=sys.stderr)


def thread_cap(args) -> int:
    n = getattr(args, "threads", None)
    if n is None:
        n = os.environ.get("PANFIELD_THREADS", "1")
    try:
        n = int(n)
    except ValueError:
        raise CliError(f"thread cap must be an integer, got {n!r}")
    return max(1, n)


# ---------------------------------------------------------------------------
# Run configuration: defaults dict <- config file <- --set overrides


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _merge_into(cfg: dict, updates: dict, prefix: str = "") -> None:
    for key, val in updates.items():
        if key not in cfg:
            raise CliError(f"unknown config key {prefix + key!r}")
        if isinstance(cfg[key], dict) and isinstance(val, dict):
            _merge_into(cfg[key], val, prefix + key + ".")
        else:
            cfg[key] = val


def _apply_set(cfg: dict, assignment: str) -> None:
    dotted, eq, raw = assignment.partition("=")
    if not eq:
        raise CliError(f"--set expects key=value, got {assignment!r}")
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise CliError(f"unknown config key {dotted!r}")
        node = node[p]
    if parts[-1] not in node:
        raise CliError(f"unknown config key {dotted!r}")
    node[parts[-1]] = _parse_value(raw)


def run_config(defaults: dict, config_path, sets) -> dict:
    cfg = copy.deepcopy(defaults)
    if config_path:
        try:
            with open(config_path) as f:
                loaded = json.load(f)
        except json.JSONDecodeError as e:
            raise CliError(f"config file {config_path}: {e}")
        if not isinstance(loaded, dict):
            raise CliError("config file must hold a JSON object")
        _merge_into(cfg, loaded)
    for assignment in sets or []:
        _apply_set(cfg, assignment)
    return cfg


def echo_config(cfg: dict, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> None:
    if args.scene not in SCENES:
        known = ", ".join(sorted(SCENES))
        raise CliError(f"unknown scene {args.scene!r}; known scenes: {known}")
    if os.path.exists(args.out) and os.listdir(args.out) and not args.force:
        raise CliError(f"output directory {args.out} is not empty; "
                       "pass --force to overwrite")
    world, cameras = SCENES[args.scene]()
    ds = synth.generate_dataset(world, cameras, seed=args.seed,
                                corrupt_rho=args.corrupt_rho)
    synth.write_dataset(ds, args.out)
    info(f"wrote {len(ds.frames)} frames to {args.out}")


# ---------------------------------------------------------------------------
# train


TRAIN_DEFAULTS = {
    "steps": 3000,
    "rays_per_batch": 1024,
    "learning_rate": 5e-4,
    "adam_beta1": 0.9,
    "adam_beta2": 0.999,
    "adam_epsilon": 1e-8,
    "semantic_loss_scale": 0.05,
    "samples_per_ray": None,    # None: profile default
    "track_lr_scale": 0.1,
    "warmup_fraction": 0.5,
    "report_every": 50,
    "checkpoint_every": 0,
}


def _model_from_dataset(ds, profile: str, seed: int) -> sc.SceneModel:
    if not ds.scene_json:
        raise CliError("dataset carries no scene description; "
                       "object tracks cannot be derived")
    world = synth.AnalyticScene.from_json(ds.scene_json)
    stuff = fl.init_biased(fl.stuff_config(profile, len(ds.class_table)),
                           fl.STUFF, seed)
    tcfg = fl.thing_config(profile)
    things = [sc.Thing(p.track.copy(),
                       fl.init_biased(tcfg, fl.THING, seed + p.instance_id))
              for p in world.primitives if p.instance_id > 0]
    return sc.SceneModel(stuff, things, list(ds.class_table), ds.bounds,
                         background=ds.background)


def _apply_meta_init(model: sc.SceneModel, ckpt_path) -> int:
    ck = mi.load_checkpoint(ckpt_path)
    if ck.category not in model.class_table:
        raise CliError(f"meta checkpoint category {ck.category!r} "
                       "is not in the scene class table")
    cat = model.class_table.index(ck.category)
    hits = 0
    for i, th in enumerate(model.things):
        if th.track.category != cat:
            continue
        if th.field.config != ck.config:
            raise CliError("meta checkpoint field config does not match "
                           "the profile's thing config")
        model.things[i] = sc.Thing(th.track, ck.field())
        hits += 1
    return hits


def cmd_train(args) -> None:
    cfg = run_config(TRAIN_DEFAULTS, args.config, args.set)
    if args.steps is not None:
        cfg["steps"] = args.steps
    ds = synth.load_dataset(args.data)
    sup = tr.supervision_from_dataset(ds)
    model = _model_from_dataset(ds, args.profile, args.seed)
    if args.meta_init:
        hits = _apply_meta_init(model, args.meta_init)
        info(f"meta-init applied to {hits} thing(s)")

    spr = cfg["samples_per_ray"] or fl.samples_per_ray(args.profile)
    train_cfg = tr.TrainConfig(
        steps=cfg["steps"], rays_per_batch=cfg["rays_per_batch"],
        learning_rate=cfg["learning_rate"], adam_beta1=cfg["adam_beta1"],
        adam_beta2=cfg["adam_beta2"], adam_epsilon=cfg["adam_epsilon"],
        semantic_loss_scale=cfg["semantic_loss_scale"],
        optimize_tracks=not args.no_track_opt,
        schedule=fl.EncodingSchedule(max(cfg["steps"], 1),
                                     cfg["warmup_fraction"]),
        seed=args.seed, samples_per_ray=spr,
        track_lr_scale=cfg["track_lr_scale"],
        report_every=cfg["report_every"],
        checkpoint_every=cfg["checkpoint_every"])

    os.makedirs(args.out, exist_ok=True)
    echo_config({**cfg, "profile": args.profile, "seed": args.seed,
                 "optimize_tracks": train_cfg.optimize_tracks,
                 "samples_per_ray": spr, "data": args.data}, args.out)
    ckpt_dir = os.path.join(args.out, "checkpoints") \
        if cfg["checkpoint_every"] else None
    trained, reports = tr.train(model, sup, train_cfg,
                                log_path=os.path.join(args.out, "train_log.jsonl"),
                                checkpoint_dir=ckpt_dir)
    scene_dir = os.path.join(args.out, "scene")
    sc.save_scene(trained, scene_dir)
    if reports:
        info(f"trained {len(reports)} steps; final loss "
             f"{reports[-1].total:.6f}; scene saved to {scene_dir}")
    else:
        info(f"no steps requested; scene saved to {scene_dir}")


# ---------------------------------------------------------------------------
# meta-train


META_DEFAULTS = {
    "outer_epochs": 20,
    "clients": 8,
    "inner_epochs": 1,
    "inner_batch": 256,
    "inner_lr": 5.0,
    "samples_per_ray": 24,
    "category": "car",
    "corpus": {"views": 10, "width": 24, "height": 24, "fx": 26.0},
    "benchmark": {"heldout_seeds": [100, 101, 102], "threshold": 25.0,
                  "fit_eta": 5.0, "max_steps": 1500, "check_every": 50,
                  "views": 8},
}


def cmd_meta_train(args) -> None:
    cfg = run_config(META_DEFAULTS, args.config, args.set)
    corpus_cfg = cfg["corpus"]
    meta_cfg = mi.MetaConfig(
        outer_epochs=cfg["outer_epochs"], clients=cfg["clients"],
        inner_epochs=cfg["inner_epochs"], inner_batch=cfg["inner_batch"],
        inner_lr=cfg["inner_lr"], field_config=fl.thing_config(args.profile),
        seed=args.seed, samples_per_ray=cfg["samples_per_ray"])
    corpus = [mi.vehicle_client(s, views=corpus_cfg["views"],
                                width=corpus_cfg["width"],
                                height=corpus_cfg["height"],
                                fx=corpus_cfg["fx"])
              for s in range(meta_cfg.clients)]
    os.makedirs(args.out, exist_ok=True)
    echo_config({**cfg, "profile": args.profile, "seed": args.seed}, args.out)

    def log(t, _theta):
        info(f"outer epoch {t + 1}/{meta_cfg.outer_epochs}")

    ck = mi.server_update(meta_cfg, corpus, category=cfg["category"],
                          log=log, workers=thread_cap(args))
    ckpt_path = os.path.join(args.out, "meta.pfck")
    ck.save(ckpt_path)
    info(f"meta checkpoint saved to {ckpt_path}")

    if args.benchmark:
        b = cfg["benchmark"]
        records = mi.convergence_benchmark(
            ck, b["heldout_seeds"], threshold=b["threshold"],
            fit_eta=b["fit_eta"], max_steps=b["max_steps"],
            check_every=b["check_every"], views=b["views"],
            width=corpus_cfg["width"], height=corpus_cfg["height"],
            fx=corpus_cfg["fx"], seed=args.seed)
        bench_path = os.path.join(args.out, "benchmark.jsonl")
        with open(bench_path, "w") as f:
            for rec in records:
                line = json.dumps(rec)
                f.write(line + "\n")
                print(line)
        ratios = [r["ratio"] for r in records if r["ratio"] is not None]
        if ratios:
            info(f"median steps ratio {np.median(ratios):.3f} "
                 f"over {len(ratios)} held-out shapes")


# ---------------------------------------------------------------------------
# render


def _load_camera_file(path):
    with open(path) as f:
        doc = json.load(f)
    if isinstance(doc, dict):
        doc = [doc]
    if not isinstance(doc, list) or not doc:
        raise CliError("camera file must hold a camera object or a "
                       "non-empty list of them")
    return [rd.Camera.from_json(d) for d in doc]


def _render_cameras(args):
    if args.camera:
        return _load_camera_file(args.camera)
    if args.data is None or args.camera_index is None:
        raise CliError("pass --camera FILE, or --data DIR with --camera-index")
    ds = synth.load_dataset(args.data)
    try:
        frame = ds.frames[args.camera_index]
    except IndexError:
        raise CliError(f"camera index {args.camera_index} out of range; "
                       f"dataset has {len(ds.frames)} frames")
    return [frame.camera]


def cmd_render(args) -> None:
    if not os.path.exists(args.ckpt):
        raise CliError(f"checkpoint {args.ckpt} does not exist")
    model = sc.load_scene(args.ckpt)
    cameras = _render_cameras(args)
    os.makedirs(args.out, exist_ok=True)
    for i, cam in enumerate(cameras):
        time = args.time if args.time is not None else cam.shutter_time
        img = rd.render_image(model, cam, time=time, n=args.n, seed=args.seed)
        stem = f"view{i:03d}"
        paths = rd.save_channels(img, args.out, stem,
                                 class_table=model.class_table)
        info(f"{stem}: t={time:g} -> {paths['color']}")


# ---------------------------------------------------------------------------
# eval


def _mean_metrics(rows):
    keys = ("psnr", "miou", "pq", "sq", "rq")
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


def cmd_eval(args) -> None:
    model = sc.load_scene(args.ckpt)
    ds = synth.load_dataset(args.data)
    if len(ds.class_table) != len(model.class_table):
        raise CliError("dataset and checkpoint class tables differ")
    thing_classes = sorted({th.track.category for th in model.things})
    rows = []
    for i, frame in enumerate(ds.frames):
        pred = rd.render_image(model, frame.camera, time=frame.time,
                               n=args.n, seed=args.seed)
        rep = synth.evaluate_channels(pred, frame.images, thing_classes,
                                      len(model.class_table))
        rows.append({"view": i, **asdict(rep)})
        info(f"view {i}: psnr {rep.psnr:.2f} miou {rep.miou:.3f} "
             f"pq {rep.pq:.3f}")
    doc = {"views": rows, "mean": _mean_metrics(rows)}
    out = json.dumps(doc, indent=2)
    if args.out:
        with open(args.out, "w") as f:
            f.write(out + "\n")
        info(f"report written to {args.out}")
    else:
        print(out)


# ---------------------------------------------------------------------------
# edit


def cmd_edit(args) -> None:
    from . import editsvc

    model = sc.load_scene(args.ckpt)
    with open(args.script) as f:
        ops = editsvc.parse_edit_script(f.read(),
                                        base_dir=os.path.dirname(args.script))
    for i, op in enumerate(ops):
        try:
            model = editsvc.apply_edit(model, op)
        except (KeyError, ValueError) as e:
            raise CliError(f"script line {op.get('line', i + 1)}: {e}")
    scene_dir = os.path.join(args.out, "scene")
    sc.save_scene(model, scene_dir)
    info(f"{len(ops)} edit(s) applied; scene saved to {scene_dir}")
    if args.camera or (args.data is not None and args.camera_index is not None):
        render_dir = os.path.join(args.out, "renders")
        for i, cam in enumerate(_render_cameras(args)):
            time = args.time if args.time is not None else cam.shutter_time
            img = rd.render_image(model, cam, time=time, n=args.n,
                                  seed=args.seed)
            rd.save_channels(img, render_dir, f"view{i:03d}",
                             class_table=model.class_table)
        info(f"renders written to {render_dir}")


# ---------------------------------------------------------------------------
# serve


def cmd_serve(args) -> None:
    from . import editsvc

    editsvc.serve(args.ckpt, host=args.host, port=args.port,
                  workers=thread_cap(args))


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="panfield",
        description="Panoptic radiance field toolkit: synthetic datasets, "
                    "training, meta initialization, rendering, evaluation "
                    "and interactive editing.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=False):
        p.add_argument("--seed", type=int, default=0,
                       help="RNG seed; seeded runs are reproducible")
        if config:
            p.add_argument("--config", help="JSON config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override a config key (dot path)")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--scene", required=True,
                   help="scene name (" + ", ".join(sorted(SCENES)) + ")")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--corrupt-rho", type=float, default=0.0,
                   help="label corruption probability")
    p.add_argument("--force", action="store_true",
                   help="overwrite a non-empty output directory")
    add_common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a scene on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--profile", choices=("paper", "toy"), default="toy")
    p.add_argument("--steps", type=int, help="override config steps")
    p.add_argument("--meta-init", help="metainit checkpoint applied to all "
                                       "things of its category")
    p.add_argument("--no-track-opt", action="store_true",
                   help="freeze object poses at their initial values")
    add_common(p, config=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("meta-train",
                       help="train a category-level field initialization")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--profile", choices=("paper", "toy"), default="toy")
    p.add_argument("--benchmark", action="store_true",
                   help="run the convergence benchmark and emit JSON lines")
    p.add_argument("--threads", type=int,
                   help="client worker cap (default $PANFIELD_THREADS or 1)")
    add_common(p, config=True)
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("render", help="render channel images from a scene")
    p.add_argument("--ckpt", required=True, help="scene checkpoint directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--camera", help="JSON camera (or camera path) file")
    p.add_argument("--data", help="dataset directory for --camera-index")
    p.add_argument("--camera-index", type=int,
                   help="camera index into --data frames")
    p.add_argument("--time", type=float, help="scene time override")
    p.add_argument("--n", type=int, default=128, help="samples per ray")
    add_common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="evaluate a scene against a dataset")
    p.add_argument("--ckpt", required=True, help="scene checkpoint directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", help="report JSON path (default stdout)")
    p.add_argument("--n", type=int, default=128, help="samples per ray")
    add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("edit", help="apply a script of scene edits")
    p.add_argument("--ckpt", required=True, help="scene checkpoint directory")
    p.add_argument("--script", required=True, help="edit script file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--camera", help="JSON camera file for post-edit renders")
    p.add_argument("--data", help="dataset directory for --camera-index")
    p.add_argument("--camera-index", type=int,
                   help="camera index into --data frames")
    p.add_argument("--time", type=float, help="scene time override")
    p.add_argument("--n", type=int, default=128, help="samples per ray")
    add_common(p)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("serve", help="serve the interactive edit API")
    p.add_argument("--ckpt", required=True, help="scene checkpoint directory")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)
    p.add_argument("--threads", type=int,
                   help="render worker cap (default $PANFIELD_THREADS or 1)")
    add_common(p)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except CliError as e:
        info(f"error: {e}")
        return 1
    except (OSError, ValueError, KeyError) as e:
        info(f"error: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
