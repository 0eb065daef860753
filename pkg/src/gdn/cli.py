"""Command line: gen-data, train, sample, eval, ablate, export-gt.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
Wall-clock timings are printed and written to ``*.timing.*`` sidecars only, so
every other output file is byte-reproducible under a fixed seed.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .diffusion import SamplerConfig
from .evaluation import aggregate, evaluate_scene, sample_scene, score_samples
from .guidance import GripperModel
from .metrics import EVAL_COLUMNS
from .model import AdamState, Denoiser, init_params
from .persistence import (
    DataError,
    atomic_write,
    read_checkpoint,
    read_dataset,
    read_grasps_csv,
    validate_params,
    write_checkpoint,
    write_dataset,
    write_grasps_csv,
)
from .scene import SceneError, denormalize, generate_dataset, resample_positive_grasps
from .schedule import cosine_schedule
from .training import NumericError, TrainState, cosine_lr, positive_pool, train

log = logging.getLogger("gdn")

# named sub-streams of the root seed
DATA, TRAIN, SAMPLE, EVAL = 0, 1, 2, 3

TEMP_GRID = (0.5, 0.75, 1.0)
DDIM_GRID = (5, 10, 25, 100)
GUIDE_K = (0, 1, 3)
GUIDE_M = (1, 2, 3)


def _stream(seed, name, *extra):
    return np.random.default_rng([int(seed), name, *extra])


def _csv_text(rows, columns):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items() if k in columns})
    return buf.getvalue()


def _json_bytes(obj):
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode()


def _load_cfg(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _data_dir(args, cfg):
    return Path(args.data) if getattr(args, "data", None) else cfg.data_dir()


def _scene(scenes, idx):
    if not 0 <= idx < len(scenes):
        raise DataError(f"scene index {idx} out of range (dataset has {len(scenes)} scenes)")
    return scenes[idx]


def _load_model(path):
    params, mcfg, _, meta = read_checkpoint(path)
    validate_params(params, mcfg)
    sched = meta.get("schedule", {"N": 100, "s": 0.008})
    return Denoiser(params, mcfg), cosine_schedule(sched["N"], sched["s"]), meta


def _gripper(cfg):
    g = cfg.guidance
    if g.gripper_file:
        p = Path(g.gripper_file)
        if not p.is_absolute() and cfg.base_dir:
            p = Path(cfg.base_dir) / p
        if not p.exists():
            raise ConfigError(f"guidance.gripper_file not found: {p}")
        return GripperModel.load(p)
    return GripperModel.parallel_jaw(cfg.data.scene.gripper_opening)


# commands -------------------------------------------------------------------


def cmd_gen_data(args):
    cfg = _load_cfg(args)
    out = Path(args.out) if args.out else cfg.data_dir()
    n = args.scenes or cfg.data.n_scenes
    start = time.perf_counter()
    scenes = generate_dataset(cfg.data.scene, n, _stream(cfg.seed, DATA))
    write_dataset(out, scenes, asdict(cfg.data.scene))
    pos = sum(int(s.labels.sum()) for s in scenes) / sum(len(s.labels) for s in scenes)
    print(f"scenes={len(scenes)} positive_fraction={pos:.4f} wall_time_s={time.perf_counter() - start:.2f}")
    return 0


def cmd_train(args):
    cfg = _load_cfg(args)
    tc = cfg.train
    scenes, _ = read_dataset(_data_dir(args, cfg))
    clouds, pos = positive_pool(scenes)
    schedule = cosine_schedule(cfg.schedule.N, cfg.schedule.s)
    steps = tc.steps if args.steps is None else args.steps
    if tc.max_epochs:
        per_epoch = math.ceil(len(clouds) / tc.scenes_per_batch)
        steps = min(steps, tc.max_epochs * per_epoch)
    lr = args.lr or tc.lr
    if tc.lr_schedule == "cosine":
        lr = cosine_lr(lr, tc.lr_final, steps)
    out = Path(args.out)

    if args.resume:
        params, mcfg, adam, meta = read_checkpoint(args.resume)
        validate_params(params, mcfg)
        if adam is None:
            raise DataError("checkpoint has no optimizer state; cannot resume")
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng_state"]
        state = TrainState(params, adam, int(meta["step"]), rng)
        steps = max(steps - state.step, 0)
    else:
        mcfg = cfg.model
        params = init_params(mcfg, _stream(cfg.seed, TRAIN, 0))
        state = TrainState(params, AdamState.zeros_like(params), 0, _stream(cfg.seed, TRAIN, 1))

    def save():
        meta = {
            "step": state.step,
            "rng_state": state.rng.bit_generator.state,
            "schedule": {"N": cfg.schedule.N, "s": cfg.schedule.s},
            "seed": cfg.seed,
        }
        write_checkpoint(out, state.params, mcfg, state.adam, meta)

    def on_step(st, loss):
        if st.step % tc.log_every == 0:
            log.info("step %d loss %.5f", st.step, loss)
        if st.step % tc.checkpoint_every == 0:
            save()

    first = state.step
    start = time.perf_counter()
    try:
        train(state, mcfg, clouds, pos, schedule, steps, lr, tc.scenes_per_batch, tc.grasps_per_scene,
              args.wall_budget if args.wall_budget is not None else tc.wall_budget_s, on_step)
    finally:
        save()
        rows = [{"step": first + i + 1, "loss": float(v)} for i, v in enumerate(state.losses)]
        loss_csv = out.with_suffix(".loss.csv")
        atomic_write(loss_csv, _csv_text(rows, ["step", "loss"]).encode())
        if rows:
            from .plotting import plot_loss

            plot_loss([r["step"] for r in rows], [r["loss"] for r in rows], out.with_suffix(".loss.png"))
    done = len(state.losses)
    msg = f"steps={state.step} trained_now={done}"
    if done:
        msg += f" first_loss={state.losses[0]:.5f} final_loss={np.mean(state.losses[-min(done, 50):]):.5f}"
    print(msg + f" wall_time_s={time.perf_counter() - start:.2f}")
    return 0


def _sampler_from(args, cfg):
    s = cfg.sampler
    kw = {}
    if args.sampler:
        kw["kind"] = args.sampler
    if args.steps is not None:
        kw["steps"] = args.steps
    if args.temp is not None:
        kw["temp_alpha"] = args.temp
    return replace(s, **kw)


def _guidance_from(args, cfg):
    g = cfg.guidance
    kw = {"enabled": bool(args.guided or g.enabled)}
    if args.guide_k is not None:
        kw["K"] = args.guide_k
    if args.guide_m is not None:
        kw["M"] = args.guide_m
    return replace(g, **kw)


def cmd_sample(args):
    cfg = _load_cfg(args)
    denoiser, schedule, _ = _load_model(args.ckpt)
    scenes, _ = read_dataset(_data_dir(args, cfg))
    scene = _scene(scenes, args.scene)
    sampler = _sampler_from(args, cfg)
    guidance = _guidance_from(args, cfg)
    if args.n < 1:
        raise ValueError("--n must be >= 1")
    t, R, ms = sample_scene(denoiser, scene, schedule, sampler, args.n, [cfg.seed, SAMPLE, args.scene],
                            guidance if guidance.enabled else None, _gripper(cfg))
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(R))):
        raise NumericError("sampler produced non-finite poses")
    out = Path(args.out)
    write_grasps_csv(out, denormalize(t, scene.center, scene.scale), R)
    summary = {
        "n": args.n,
        "scene": args.scene,
        "seed": cfg.seed,
        "sampler": asdict(sampler),
        "guidance": asdict(guidance) if guidance.enabled else None,
        "frame": "world",
    }
    atomic_write(out.with_suffix(".json"), _json_bytes(summary))
    atomic_write(out.with_suffix(".timing.json"), _json_bytes({"wall_time_ms": ms}))
    print(f"wrote {args.n} grasps to {out} wall_time_ms={ms:.1f}")
    return 0


def cmd_eval(args):
    cfg = _load_cfg(args)
    scenes, _ = read_dataset(_data_dir(args, cfg))
    scene = _scene(scenes, args.scene)
    t_w, R = read_grasps_csv(args.grasps)
    summary = Path(args.grasps).with_suffix(".json")
    if summary.exists():
        meta = json.loads(summary.read_text())
        if meta.get("frame") != "world" or meta.get("scene") != args.scene:
            raise DataError(f"{args.grasps} was sampled for scene {meta.get('scene')!r}, not scene {args.scene}")
    if not np.all(np.isfinite(t_w)):
        raise DataError(f"{args.grasps}: non-finite translations")
    t_n = (t_w - scene.center) / scene.scale
    gt = scene.positives()
    if len(gt[0]) == 0:
        raise DataError(f"scene {args.scene} has no success-labeled grasps to compare against")
    w = cfg.eval.rotation_weight if args.w is None else args.w
    sr, d, cr, _ = score_samples(scene, t_n, R, gt, w, _gripper(cfg), cfg.guidance.cloud_radius, seed=cfg.seed)
    timing = Path(args.grasps).with_suffix(".timing.json")
    ms = json.loads(timing.read_text())["wall_time_ms"] if timing.exists() else 0.0
    row = {"scene_id": str(args.scene), "method": args.method, "success_rate": sr, "emd": d, "collision_rate": cr,
           "wall_time_ms": float(ms)}
    text = _csv_text([row], list(EVAL_COLUMNS))
    if args.out:
        # the measured time goes to the sidecar so the results file stays reproducible
        out = Path(args.out)
        cols = [c for c in EVAL_COLUMNS if c != "wall_time_ms"]
        atomic_write(out, _csv_text([row], cols).encode())
        atomic_write(out.with_suffix(".timing.csv"), _csv_text([row], ["scene_id", "method", "wall_time_ms"]).encode())
    sys.stdout.write(text)
    return 0


def _study_rows(study, denoiser, schedule, scenes, cfg, gripper, n):
    """Evaluate the study grid; returns (rows, timing_rows)."""
    seeds = [[cfg.seed, SAMPLE, i] for i in range(len(scenes))]
    gts = [resample_positive_grasps(s, cfg.eval.gt_samples, _stream(cfg.seed, EVAL, i), cfg.data.scene)
           for i, s in enumerate(scenes)]
    w = cfg.eval.rotation_weight

    def run(sampler, guidance=None):
        res = [evaluate_scene(denoiser, s, schedule, sampler, n, seeds[i], gts[i], w, guidance, gripper)
               for i, s in enumerate(scenes)]
        return aggregate(res)

    rows, timing = [], []
    if study == "temp":
        for a in TEMP_GRID:
            m = run(replace(cfg.sampler, kind="ddpm", temp_alpha=a))
            rows.append({"alpha": a, "success_rate": m["success_rate"], "emd": m["emd"]})
            timing.append({"alpha": a, "wall_time_ms": m["wall_time_ms"]})
        return rows, timing, ["alpha", "success_rate", "emd"]
    if study == "ddim":
        grid = [("ddpm", schedule.N)] + [("ddim", k) for k in DDIM_GRID if k <= schedule.N]
        for kind, steps in grid:
            m = run(replace(cfg.sampler, kind=kind, steps=steps))
            rows.append({"sampler": kind, "steps": steps, "success_rate": m["success_rate"], "emd": m["emd"]})
            timing.append({"sampler": kind, "steps": steps, "wall_time_ms": m["wall_time_ms"]})
        return rows, timing, ["sampler", "steps", "success_rate", "emd"]
    base = replace(cfg.sampler, kind="ddpm")
    m = run(base)
    rows.append({"method": "unguided", "K": 0, "M": 0, "success_rate": m["success_rate"],
                 "collision_rate": m["collision_rate"]})
    timing.append({"method": "unguided", "K": 0, "M": 0, "wall_time_ms": m["wall_time_ms"]})
    for K in GUIDE_K:
        for M in GUIDE_M:
            g = replace(cfg.guidance, enabled=True, K=K, M=M)
            m = run(base, g)
            rows.append({"method": "guided", "K": K, "M": M, "success_rate": m["success_rate"],
                         "collision_rate": m["collision_rate"]})
            timing.append({"method": "guided", "K": K, "M": M, "wall_time_ms": m["wall_time_ms"]})
    return rows, timing, ["method", "K", "M", "success_rate", "collision_rate"]


def cmd_ablate(args):
    cfg = _load_cfg(args)
    denoiser, schedule, _ = _load_model(args.ckpt)
    scenes, _ = read_dataset(_data_dir(args, cfg))
    n_scenes = args.scenes or cfg.eval.n_scenes
    scenes = scenes[:n_scenes]
    n = args.n or cfg.eval.n_samples
    rows, timing, cols = _study_rows(args.study, denoiser, schedule, scenes, cfg, _gripper(cfg), n)
    out = Path(args.out) if args.out else Path(f"ablate_{args.study}.csv")
    atomic_write(out, _csv_text(rows, cols).encode())
    tcols = [c for c in timing[0] if c != "wall_time_ms"] + ["wall_time_ms"]
    atomic_write(out.with_suffix(".timing.csv"), _csv_text(timing, tcols).encode())
    from .plotting import plot_study

    plot_study(args.study, rows, out.with_suffix(".png"))
    sys.stdout.write(_csv_text(rows, cols))
    return 0


def cmd_export_gt(args):
    cfg = _load_cfg(args)
    scenes, _ = read_dataset(_data_dir(args, cfg))
    scene = _scene(scenes, args.scene)
    t, R = scene.positives()
    write_grasps_csv(args.out, denormalize(t, scene.center, scene.scale), R)
    print(f"wrote {len(t)} success-labeled grasps to {args.out}")
    return 0


# parser ---------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="gdn", description="Grasp pose diffusion on SO(3) x R^3")
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON run config (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="override the config's root seed")
        if data:
            sp.add_argument("--data", help="dataset directory (default: config data.dir or $GDN_DATA_DIR)")

    sp = sub.add_parser("gen-data", help="synthesize scenes with labeled grasps")
    common(sp, data=False)
    sp.add_argument("--out", help="output dataset directory")
    sp.add_argument("--scenes", type=int, help="override data.n_scenes")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="fit the denoiser on success-labeled grasps")
    common(sp)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--steps", type=int, help="total optimizer steps (overrides train.steps)")
    sp.add_argument("--lr", type=float, help="override train.lr")
    sp.add_argument("--resume", help="continue from this checkpoint")
    sp.add_argument("--wall-budget", type=float, help="stop after this many seconds")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="draw grasps for one scene")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--scene", type=int, required=True, help="scene index in the dataset")
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--sampler", choices=["ddpm", "ddim"])
    sp.add_argument("--steps", type=int, help="DDIM steps")
    sp.add_argument("--temp", type=float, help="temperature alpha in [0, 1]")
    sp.add_argument("--guided", action="store_true", help="collision-cost guidance")
    sp.add_argument("--guide-k", type=int, help="extra guided steps at index 0")
    sp.add_argument("--guide-m", type=int, help="gradient steps per guided update")
    sp.add_argument("--out", required=True, help="grasp CSV (world frame)")
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("eval", help="score a grasp CSV against a scene")
    common(sp)
    sp.add_argument("--grasps", required=True)
    sp.add_argument("--scene", type=int, required=True)
    sp.add_argument("--w", type=float, help="rotation weight of the EMD ground metric (m/rad)")
    sp.add_argument("--method", default="gdn", help="label for the method column")
    sp.add_argument("--out", help="also write the CSV row here, with wall time in a .timing.csv sidecar")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="temperature, DDIM or guidance study")
    common(sp)
    sp.add_argument("--study", choices=["temp", "ddim", "guidance"], required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--scenes", type=int, help="number of scenes (overrides eval.n_scenes)")
    sp.add_argument("--n", type=int, help="samples per scene (overrides eval.n_samples)")
    sp.add_argument("--out", help="results CSV; a PNG and a timing CSV are written alongside")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("export-gt", help="write a scene's success-labeled grasps as a world-frame CSV")
    common(sp)
    sp.add_argument("--scene", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export_gt)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, SceneError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
