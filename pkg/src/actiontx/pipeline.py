"""Train/eval orchestration, ablation grid and reproducibility records."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import __version__
from . import evaluation as ev
from .config import RunConfig
from .synthdata import CONTEXT_CLASSES, LOCAL_CLASSES, ClipSample, generate_samples, load_dataset
from .training import Trainer


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def write_record(run: RunConfig, out_dir, command: str, extra: Optional[dict] = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(run.to_ini())
    rec = {"command": command, "seed": run.train.seed, "code_version": code_version(),
           "python": platform.python_version(), "numpy": np.__version__,
           "config": run.as_dict(), **(extra or {})}
    path = out / "record.json"
    path.write_text(json.dumps(rec, indent=1, sort_keys=True, default=list))
    return path


# ---------------------------------------------------------------- data

def train_samples(run: RunConfig) -> list[ClipSample]:
    if run.data.data_dir:
        return load_dataset(run.data.data_dir)
    return generate_samples(run.data.scene_spec(), run.data.train_clips)


def test_samples(run: RunConfig, frames: Optional[int] = None) -> list[ClipSample]:
    frames = frames or run.eval.eval_frames or None
    if run.data.test_dir:
        samples = load_dataset(run.data.test_dir)
        if frames and samples and samples[0].video.shape[0] != frames:
            raise ValueError(f"{run.data.test_dir}: clips have {samples[0].video.shape[0]} frames, "
                             f"eval_frames asks for {frames}")
        return samples
    return generate_samples(run.data.scene_spec(frames), run.data.test_clips, start=run.data.test_start)


# ---------------------------------------------------------------- train / eval

def hash_extra(run: RunConfig) -> dict:
    """Data settings that shape training; test-set fields are left out."""
    return {k: v for k, v in run.as_dict()["data"].items() if not k.startswith("test_")}


def build_trainer(run: RunConfig, samples: Sequence[ClipSample], log_path=None) -> Trainer:
    return Trainer(run.model, run.train, samples, log_path=log_path, hash_extra=hash_extra(run))


def train(run: RunConfig, samples: Optional[Sequence[ClipSample]] = None, out_dir=None,
          callback: Optional[Callable] = None) -> Trainer:
    samples = train_samples(run) if samples is None else samples
    log = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        log = Path(out_dir) / "train_log.ndjson"
        log.unlink(missing_ok=True)
    tr = build_trainer(run, samples, log)
    tr.run(callback=callback)
    if out_dir is not None:
        tr.save(Path(out_dir) / "checkpoint.bin")
    return tr


def predict(model, samples: Sequence[ClipSample], run: RunConfig) -> tuple[list, list]:
    """Detection rows and per-clip DetectionSets over ``samples``."""
    rows, sets = [], []
    gt_mode = run.train.gt_boxes
    nms = None if gt_mode else run.model.det_nms
    bs = run.eval.batch_size
    for i in range(0, len(samples), bs):
        chunk = samples[i:i + bs]
        clips = np.stack([s.video for s in chunk])
        dets = model.detect(clips, gt_boxes=[s.boxes for s in chunk] if gt_mode else None)
        for s, d in zip(chunk, dets):
            rows.extend(d.records(s.clip_id, nms, run.eval.background_threshold))
            sets.append(d)
    return rows, sets


def evaluate(model, samples: Sequence[ClipSample], run: RunConfig) -> tuple[ev.EvalReport, list]:
    rows, _ = predict(model, samples, run)
    gt = ev.gt_rows_from_samples(samples, action_agnostic=run.train.action_agnostic)
    n_cls = 1 if run.train.action_agnostic else run.model.num_classes
    rep = ev.evaluate(rows, gt, n_cls, run.eval.iou_threshold, run.eval.strict_threshold, run.eval.bins)
    return rep, rows


def summary_row(name: str, run: RunConfig, rep: ev.EvalReport) -> dict:
    m, t = run.model, run.train
    agn = t.action_agnostic
    return {
        "name": name, "head": m.head, "qpr": m.qpr, "heads": m.heads, "layers": m.layers,
        "proposals": m.proposals, "gt_boxes": t.gt_boxes, "action_agnostic": agn, "augment": t.augment,
        "class_agnostic_reg": m.class_agnostic_reg, "seed": t.seed, "steps": t.steps,
        "map50": rep.map, "map75": rep.map_strict,
        "context_map50": float("nan") if agn else rep.class_subset_map(CONTEXT_CLASSES),
        "local_map50": float("nan") if agn else rep.class_subset_map(LOCAL_CLASSES),
    }


# ---------------------------------------------------------------- ablations

@dataclass(frozen=True)
class Ablation:
    name: str
    model: dict
    train: dict


def ablation_grid(small_r: int = 16, large_r: int = 300) -> list[Ablation]:
    grid = [Ablation("baseline", {}, {})]
    grid += [Ablation(f"head_{h}", {"head": h}, {}) for h in ("i3d", "tx+i3d")]
    grid.append(Ablation("qpr_lowres", {"qpr": "lowres"}, {}))
    for heads in (2, 3, 6):
        for layers in (2, 3, 6):
            grid.append(Ablation(f"h{heads}_l{layers}", {"heads": heads, "layers": layers}, {}))
    grid.append(Ablation(f"r_small_{small_r}", {"proposals": small_r}, {}))
    grid.append(Ablation(f"r_large_{large_r}", {"proposals": large_r}, {}))
    grid.append(Ablation("gt_boxes", {}, {"gt_boxes": True}))
    grid.append(Ablation("action_agnostic", {}, {"action_agnostic": True}))
    grid.append(Ablation("no_augment", {}, {"augment": False}))
    grid.append(Ablation("class_specific_reg", {"class_agnostic_reg": False}, {}))
    return grid


def apply_ablation(run: RunConfig, ab: Ablation) -> RunConfig:
    return replace(run, model=replace(run.model, **ab.model), train=replace(run.train, **ab.train))


def run_ablations(run: RunConfig, names: Optional[Iterable[str]] = None, out_dir=None,
                  log: Optional[Callable[[str], None]] = None) -> list[dict]:
    grid = ablation_grid()
    if names:
        wanted = set(names)
        unknown = wanted - {a.name for a in grid}
        if unknown:
            raise ValueError(f"unknown ablations: {sorted(unknown)}")
        grid = [a for a in grid if a.name in wanted]
    train_set = train_samples(run)
    test_set = test_samples(run)
    rows = []
    for ab in grid:
        sub = apply_ablation(run, ab)
        if log:
            log(f"ablation {ab.name}")
        tr = train(sub, train_set, None if out_dir is None else Path(out_dir) / ab.name)
        rep, _ = evaluate(tr.model, test_set, sub)
        rows.append(summary_row(ab.name, sub, rep))
    return rows


def write_table(path, rows: Sequence[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (f"{v:.6f}" if isinstance(v, float) and not math.isnan(v) else v)
                         for k, v in r.items()})


def load_model(run: RunConfig, checkpoint) -> tuple["Detector", int]:
    """Rebuild the detector for ``run`` and load weights; the config hash must match."""
    from .checkpoint import load_checkpoint
    from .model import Detector
    from .training import config_hash

    n_cls = 1 if run.train.action_agnostic else run.model.num_classes
    dtype = np.float32 if run.train.precision == "float32" else np.float64
    model = Detector(run.model, n_cls, seed=run.train.seed, dtype=dtype)
    step, tensors = load_checkpoint(checkpoint, config_hash(run.model, run.train, hash_extra(run)))
    model.params.load_state({k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")})
    return model, step
