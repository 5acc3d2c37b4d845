"""``actiontx`` command line: gen-data, train, eval, ablate, dump-attention.

Exit status is 0 on success, 2 for configuration errors and 3 for runtime
failures (missing or mismatched checkpoints, I/O errors, divergence).
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import pipeline
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .synthdata import CLASS_NAMES, class_frequency, generate_dataset
from .training import TrainingDivergedError

OUTPUT_ENV = "ACTIONTX_OUTPUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

MODES = {
    "standard": {},
    "gt-boxes": {"gt_boxes": True},
    "action-agnostic": {"action_agnostic": True},
}


def _out_dir(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ENV, "actiontx_out")) / command


def _config(args) -> RunConfig:
    path = args.config
    if path is None and getattr(args, "checkpoint", None):
        sibling = Path(args.checkpoint).parent / "config.ini"
        if sibling.exists():
            path = sibling
    run = load_config(path, args.overrides)
    mode = getattr(args, "mode", None)
    if mode:
        run = replace(run, train=replace(run.train, **MODES[mode]))
    return run


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _parse_frames(text: str, base: int) -> int:
    t = text.strip().upper()
    try:
        n = int(t[:-1] or 1) * base if t.endswith("T") else int(t)
    except ValueError:
        raise ConfigError("eval-frames", f"expected an integer or kT, got {text!r}") from None
    if n < 4 or n % 4:
        raise ConfigError("eval-frames", f"{n} frames is not a positive multiple of 4")
    return n


def _class_names(run: RunConfig) -> list[str]:
    return ["person"] if run.train.action_agnostic else list(CLASS_NAMES[:run.model.num_classes])


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    run = _config(args)
    out = _out_dir(args, "gen-data")
    spec = run.data.scene_spec(args.frames)
    n = args.n or run.data.train_clips
    m = generate_dataset(spec, n, out, start=args.start)
    pipeline.write_record(run, out, "gen-data", {"n": n, "start": args.start, "digest": m.digest})
    print(f"wrote {m.n} clips to {out} (digest {m.digest[:16]})")
    return EXIT_OK


def cmd_train(args) -> int:
    run = _config(args)
    out = _out_dir(args, "train")
    samples = pipeline.train_samples(run)
    tr = pipeline.build_trainer(run, samples, out / "train_log.ndjson")
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        tr.load(args.resume)
        _log(f"resumed at step {tr.step}")
    else:
        tr.log_path.unlink(missing_ok=True)
    pipeline.write_record(run, out, "train")
    every = max(1, args.save_every) if args.save_every else 0

    def cb(step, losses):
        if step % 100 == 0 or step == run.train.steps:
            _log(f"step {step} total {losses.total:.4f} lr {losses.lr:.4g}")
        if every and step % every == 0:
            tr.save(out / f"checkpoint_{step:06d}.bin")

    tr.run(until=args.until, callback=cb)
    tr.save(out / "checkpoint.bin")
    print(f"checkpoint {out / 'checkpoint.bin'} at step {tr.step}")
    return EXIT_OK


def _write_metrics(path, rep: ev.EvalReport, names) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["class_id", "class_name", f"ap@{rep.iou_threshold:g}",
                     f"ap@{rep.strict_threshold:g}" if rep.strict_threshold else "ap_strict"])
        for c, name in enumerate(names):
            wr.writerow([c, name, _fmt(rep.per_class_ap[c]), _fmt(rep.per_class_ap_strict.get(c, math.nan))])
        wr.writerow(["", "mAP", _fmt(rep.map), _fmt(rep.map_strict if rep.map_strict is not None else math.nan)])


def _write_bins(path, rep: ev.EvalReport) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["mode", "bin", "lo", "hi", "n_gt", "map"])
        for mode, bins in (("area", rep.area_bins), ("count", rep.count_bins)):
            for i, b in enumerate(bins):
                wr.writerow([mode, i, b.lo, b.hi, b.n_gt, _fmt(b.map)])


def _fmt(v) -> str:
    return "nan" if v is None or math.isnan(v) else f"{v:.6f}"


def cmd_eval(args) -> int:
    run = _config(args)
    if args.eval_frames:
        run = replace(run, eval=replace(run.eval, eval_frames=_parse_frames(args.eval_frames, run.data.frames)))
    if args.no_strict:
        run = replace(run, eval=replace(run.eval, strict_threshold=None))
    model, step = pipeline.load_model(run, args.checkpoint)
    test = pipeline.test_samples(run)
    rep, rows = pipeline.evaluate(model, test, run)
    out = _out_dir(args, "eval")
    out.mkdir(parents=True, exist_ok=True)
    names = _class_names(run)
    ev.write_detections(out / "detections.csv", rows)
    _write_metrics(out / "metrics.csv", rep, names)
    _write_bins(out / "bins.csv", rep)
    (out / "report.json").write_text(rep.to_json())
    freq = class_frequency(test) if not run.train.action_agnostic else [sum(len(s.boxes) for s in test)]
    from . import plotting

    plotting.report_figures(rep, names, freq, out)
    pipeline.write_record(run, out, "eval", {"checkpoint": str(args.checkpoint), "step": step,
                                             "frames": int(test[0].video.shape[0]) if test else 0})
    strict = "" if rep.map_strict is None else f" mAP@{rep.strict_threshold:g} {rep.map_strict:.4f}"
    print(f"mAP@{rep.iou_threshold:g} {rep.map:.4f}{strict} ({len(test)} clips, step {step})")
    return EXIT_OK


def cmd_ablate(args) -> int:
    run = _config(args)
    out = _out_dir(args, "ablate")
    out.mkdir(parents=True, exist_ok=True)
    names = [n for n in (args.only or "").split(",") if n] or None
    if args.list:
        for ab in pipeline.ablation_grid():
            print(ab.name)
        return EXIT_OK
    rows = pipeline.run_ablations(run, names, out if args.keep else None, log=_log)
    pipeline.write_table(out / "ablation.csv", rows)
    pipeline.write_record(run, out, "ablate", {"ablations": [r["name"] for r in rows]})
    print(f"wrote {len(rows)} rows to {out / 'ablation.csv'}")
    return EXIT_OK


def write_pgm(path, grid: np.ndarray, vmax: float) -> None:
    """8-bit binary PGM scaled so ``vmax`` maps to 255."""
    img = np.clip(np.rint(grid / (vmax or 1.0) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def cmd_dump_attention(args) -> int:
    run = _config(args)
    if not run.model.uses_tx:
        raise ConfigError("model.head", "attention export needs a Tx head")
    model, _ = pipeline.load_model(run, args.checkpoint)
    test = pipeline.test_samples(run)
    if args.clip_ids:
        wanted = args.clip_ids.split(",")
        by_id = {s.clip_id: s for s in test}
        missing = [c for c in wanted if c not in by_id]
        if missing:
            raise ConfigError("clip-ids", f"not in the test set: {missing}")
        chosen = [by_id[c] for c in wanted]
    else:
        chosen = test[:args.clips]
    out = _out_dir(args, "attention")
    maps = out / "maps"
    maps.mkdir(parents=True, exist_ok=True)
    _, sets = pipeline.predict(model, chosen, run)
    from . import plotting

    n_rec = 0
    with open(out / "attention.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        header = False
        for s, d in zip(chosen, sets):
            if d.trace is None:
                continue
            grid = d.trace.grid
            if not header:
                cells = int(np.prod(grid))
                wr.writerow(["clip_id", "proposal", "layer", "head", "x1", "y1", "x2", "y2"]
                            + [f"w{i}" for i in range(cells)])
                header = True
            top = min(len(d.proposals), args.proposals)
            for clip_id, r, layer, head, w in d.trace.records(s.clip_id):
                if r >= top:
                    continue
                wr.writerow([clip_id, r, layer, head, *map(float, d.proposals[r])] + [repr(float(x)) for x in w])
                g = w.reshape(grid)
                vmax = float(g.max())
                for t in range(grid[0]):
                    write_pgm(maps / f"{clip_id}_p{r}_l{layer}_h{head}_t{t}.pgm", g[t], vmax)
                n_rec += 1
            last = max(k[0] for k in d.trace.weights)
            heads = [d.trace.weights[k] for k in sorted(d.trace.weights) if k[0] == last]
            mean = np.mean(heads, axis=0)
            for r in range(top):
                plotting.attention_maps(mean[r].reshape(grid), out / f"{s.clip_id}_p{r}.png",
                                        f"{s.clip_id} proposal {r}, layer {last}, mean over heads")
    pipeline.write_record(run, out, "dump-attention", {"checkpoint": str(args.checkpoint),
                                                       "clips": [s.clip_id for s in chosen]})
    print(f"wrote {n_rec} attention records to {out / 'attention.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="actiontx", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI file with [model] [train] [data] [eval] sections")
        sp.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV}/<command>)")
        sp.add_argument("overrides", nargs="*", metavar="section.key=value")

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(g)
    g.add_argument("--n", type=int, help="number of clips (default data.train_clips)")
    g.add_argument("--start", type=int, default=0, help="first clip index")
    g.add_argument("--frames", type=int, help="clip length (default data.frames)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a detector")
    common(t)
    t.add_argument("--mode", choices=sorted(MODES), help="gt-boxes or action-agnostic setups")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--until", type=int, help="stop after this step")
    t.add_argument("--save-every", type=int, default=0, help="extra checkpoints every N steps")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="frame-AP of a checkpoint on the test set")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--mode", choices=sorted(MODES))
    e.add_argument("--eval-frames", help="test clip length, e.g. 16 or 2T")
    e.add_argument("--no-strict", action="store_true", help="skip the stricter IoU threshold")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate the ablation grid")
    common(a)
    a.add_argument("--only", help="comma-separated ablation names")
    a.add_argument("--list", action="store_true", help="print ablation names and exit")
    a.add_argument("--keep", action="store_true", help="keep per-ablation checkpoints and logs")
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("dump-attention", help="export attention weights for test clips")
    common(d)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--mode", choices=sorted(MODES))
    d.add_argument("--clips", type=int, default=2, help="number of leading test clips")
    d.add_argument("--clip-ids", help="comma-separated clip ids instead of --clips")
    d.add_argument("--proposals", type=int, default=4, help="leading proposals per clip (by objectness)")
    d.set_defaults(func=cmd_dump_attention)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if getattr(args, "checkpoint", None) and not Path(args.checkpoint).exists():
            _log(f"error: checkpoint not found: {args.checkpoint}")
            return EXIT_RUNTIME
        return args.func(args)
    except ConfigError as e:
        _log(f"config error: {e}")
        return EXIT_CONFIG
    except (CheckpointError, TrainingDivergedError, OSError, KeyError, ValueError) as e:
        _log(f"error: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
