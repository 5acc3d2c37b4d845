"""Deterministic synthetic clips whose labels need spatiotemporal context.

A scene holds upright rectangular actors, small static objects and an
optional flashing alarm. Three classes are decidable from an actor's own tube
(walking, jumping, blinking); three need other entities, some of them only
visible away from the keyframe (facing_other, color_match, hears_alarm).
"""
from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

CLASS_NAMES = ("walking", "jumping", "blinking", "facing_other", "color_match", "hears_alarm")
LOCAL_CLASSES = (0, 1, 2)
CONTEXT_CLASSES = (3, 4, 5)

PALETTE = np.array([[220, 40, 40], [40, 200, 40], [50, 80, 230]], dtype=np.uint8)
BACKGROUND = (90, 90, 90)
MARKER = (255, 255, 255)
ALARM = (240, 220, 40)

CLIP_MAGIC = b"ATXCLIP\x00"
CLIP_VERSION = 1
_CLIP_HEADER = struct.Struct("<8sHHHH")

# jitter and motion tables cover keyframe offsets in [-MAX_HALF, MAX_HALF]
MAX_HALF = 64
JUMP_AMPLITUDE = 5.0
FACING_MIN_DX = 4.0
ALARM_OFFSETS = (-4, -3, -2)


class UnsatisfiableSceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    height: int = 64
    width: int = 64
    frames: int = 8
    min_actors: int = 1
    max_actors: int = 4
    min_objects: int = 1
    max_objects: int = 2
    actor_width: tuple = (8, 12)
    actor_height: tuple = (16, 24)
    object_size: int = 10
    alarm_size: int = 12
    jitter: int = 1
    p_walking: float = 0.4
    p_jumping: float = 0.35
    p_blinking: float = 0.35
    p_alarm: float = 0.3

    @property
    def keyframe(self) -> int:
        return self.frames // 2

    @property
    def num_classes(self) -> int:
        return len(CLASS_NAMES)


@dataclass
class Actor:
    box: tuple            # keyframe box (x1, y1, x2, y2)
    color: int
    facing: int           # -1 left, +1 right
    vx: float
    jumping: bool
    blinking: bool
    jitter: np.ndarray = field(repr=False, default=None)  # (2*MAX_HALF+1, 2) int offsets


@dataclass
class Scene:
    actors: list
    objects: list          # [(x1, y1, x2, y2, color)]
    alarm: Optional[tuple]  # (x1, y1, x2, y2) or None

    def to_meta(self) -> dict:
        return {
            "actors": [
                {"box": list(map(float, a.box)), "color": int(a.color), "facing": int(a.facing),
                 "vx": float(a.vx), "jumping": bool(a.jumping), "blinking": bool(a.blinking)}
                for a in self.actors
            ],
            "objects": [list(map(int, o)) for o in self.objects],
            "alarm": None if self.alarm is None else list(map(int, self.alarm)),
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "Scene":
        actors = [Actor(tuple(a["box"]), a["color"], a["facing"], a["vx"], a["jumping"], a["blinking"])
                  for a in meta["actors"]]
        return cls(actors, [tuple(o) for o in meta["objects"]],
                   None if meta["alarm"] is None else tuple(meta["alarm"]))


@dataclass
class ClipSample:
    video: np.ndarray      # (T, H, W, 3) uint8
    boxes: np.ndarray      # (G, 4) float64, keyframe pixels
    labels: np.ndarray     # (G, C) uint8 multi-hot
    meta: dict
    clip_id: str = ""


def _overlaps(a, b, gap: float = 1.0) -> bool:
    return not (a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1])


def _check_satisfiable(spec: SceneSpec) -> None:
    min_area = spec.max_actors * spec.actor_width[0] * spec.actor_height[0]
    min_area += spec.max_objects * spec.object_size ** 2 + spec.alarm_size ** 2
    if spec.actor_height[1] > spec.height or spec.actor_width[1] > spec.width:
        raise UnsatisfiableSceneError("actor size exceeds frame")
    if min_area > 0.5 * spec.height * spec.width:
        raise UnsatisfiableSceneError(
            f"{spec.max_actors} actors and {spec.max_objects} objects cannot fit in "
            f"{spec.width}x{spec.height} frame")
    if spec.frames < 1 or spec.min_actors < 1 or spec.min_actors > spec.max_actors:
        raise UnsatisfiableSceneError("invalid frame or actor counts")


def _place(rng, spec, w, h, taken, tries=200):
    for _ in range(tries):
        x1 = int(rng.integers(0, spec.width - w + 1))
        y1 = int(rng.integers(0, spec.height - h + 1))
        box = (x1, y1, x1 + w, y1 + h)
        if not any(_overlaps(box, t) for t in taken):
            return box
    return None


def sample_scene(spec: SceneSpec, index: int) -> Scene:
    """Draw scene geometry; depends only on (spec.seed, index) and spec sizes."""
    _check_satisfiable(spec)
    rng = np.random.default_rng([spec.seed, index])
    for _attempt in range(50):
        n_actors = int(rng.integers(spec.min_actors, spec.max_actors + 1))
        n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
        taken: list = []
        actors = []
        ok = True
        for _ in range(n_actors):
            w = int(rng.integers(spec.actor_width[0], spec.actor_width[1] + 1))
            h = int(rng.integers(spec.actor_height[0], spec.actor_height[1] + 1))
            box = _place(rng, spec, w, h, taken)
            if box is None:
                ok = False
                break
            taken.append(box)
            walking = rng.random() < spec.p_walking
            speed = float(rng.uniform(1.5, 2.5)) * (1 if rng.random() < 0.5 else -1)
            actors.append(Actor(
                box=tuple(float(v) for v in box),
                color=int(rng.integers(len(PALETTE))),
                facing=1 if rng.random() < 0.5 else -1,
                vx=speed if walking else 0.0,
                jumping=bool(rng.random() < spec.p_jumping),
                blinking=bool(rng.random() < spec.p_blinking),
            ))
        objects = []
        for _ in range(n_objects if ok else 0):
            s = spec.object_size
            box = _place(rng, spec, s, s, taken)
            if box is None:
                ok = False
                break
            taken.append(box)
            objects.append(box + (int(rng.integers(len(PALETTE))),))
        alarm = None
        if ok and rng.random() < spec.p_alarm:
            alarm = _place(rng, spec, spec.alarm_size, spec.alarm_size, taken)
            ok = alarm is not None
        if ok:
            jit = rng.integers(-spec.jitter, spec.jitter + 1, size=(len(actors), 2 * MAX_HALF + 1, 2))
            jit[:, MAX_HALF] = 0
            for a, j in zip(actors, jit):
                a.jitter = j
            return Scene(actors, objects, alarm)
    raise UnsatisfiableSceneError(f"could not place scene {index} after 50 attempts")


def derive_labels(scene: Scene) -> np.ndarray:
    """Multi-hot labels, a pure function of scene geometry."""
    n = len(scene.actors)
    labels = np.zeros((n, len(CLASS_NAMES)), dtype=np.uint8)
    centers = [0.5 * (a.box[0] + a.box[2]) for a in scene.actors]
    object_colors = {o[4] for o in scene.objects}
    for i, a in enumerate(scene.actors):
        labels[i, 0] = a.vx != 0
        labels[i, 1] = a.jumping
        labels[i, 2] = a.blinking
        labels[i, 3] = any(
            j != i and (centers[j] - centers[i]) * a.facing > FACING_MIN_DX for j in range(n))
        labels[i, 4] = a.color in object_colors
        labels[i, 5] = scene.alarm is not None
    return labels


def _fill(frame, box, color):
    h, w = frame.shape[:2]
    x1, y1, x2, y2 = (int(round(v)) for v in box)
    x1, x2 = max(x1, 0), min(x2, w)
    y1, y2 = max(y1, 0), min(y2, h)
    if x2 > x1 and y2 > y1:
        frame[y1:y2, x1:x2] = color


def actor_box_at(actor: Actor, offset: int) -> tuple:
    dx = actor.vx * offset
    dy = -JUMP_AMPLITUDE * abs(np.sin(np.pi * offset / 4.0)) if actor.jumping else 0.0
    if actor.jitter is not None:
        jx, jy = actor.jitter[MAX_HALF + offset]
        dx, dy = dx + jx, dy + jy
    x1, y1, x2, y2 = actor.box
    return (x1 + dx, y1 + dy, x2 + dx, y2 + dy)


def render_scene(scene: Scene, spec: SceneSpec) -> np.ndarray:
    k = spec.keyframe
    if spec.frames // 2 > MAX_HALF:
        raise ValueError(f"clips longer than {2 * MAX_HALF} frames are not supported")
    video = np.empty((spec.frames, spec.height, spec.width, 3), dtype=np.uint8)
    video[:] = BACKGROUND
    for t in range(spec.frames):
        off = t - k
        frame = video[t]
        for o in scene.objects:
            _fill(frame, o[:4], PALETTE[o[4]])
        if scene.alarm is not None and off in ALARM_OFFSETS:
            _fill(frame, scene.alarm, ALARM)
        for a in scene.actors:
            box = actor_box_at(a, off)
            color = PALETTE[a.color].astype(np.float64)
            if a.blinking and off % 2:
                color = color * 0.45
            _fill(frame, box, color.astype(np.uint8))
            mx = box[0] if a.facing < 0 else box[2] - 3
            _fill(frame, (mx, box[1], mx + 3, box[1] + 3), MARKER)
    return video


def generate_clip(spec: SceneSpec, index: int) -> ClipSample:
    scene = sample_scene(spec, index)
    boxes = np.array([a.box for a in scene.actors], dtype=np.float64).reshape(-1, 4)
    return ClipSample(render_scene(scene, spec), boxes, derive_labels(scene), scene.to_meta(),
                      clip_id=f"clip_{index:06d}")


def generate_samples(spec: SceneSpec, n: int, start: int = 0, workers: int = 1) -> list[ClipSample]:
    """Clips ``start .. start+n-1``. Each index is independent, so ``workers`` > 1 gives the same bytes."""
    idx = range(start, start + n)
    if workers <= 1 or n < 2:
        return [generate_clip(spec, i) for i in idx]
    from concurrent.futures import ProcessPoolExecutor
    from functools import partial

    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(partial(generate_clip, spec), idx, chunksize=max(1, n // (4 * workers))))


# ---------------------------------------------------------------- raw clip I/O

def write_clip(path, video: np.ndarray) -> None:
    video = np.ascontiguousarray(video, dtype=np.uint8)
    t, h, w, c = video.shape
    if c != 3:
        raise ValueError("video must be RGB")
    with open(path, "wb") as f:
        f.write(_CLIP_HEADER.pack(CLIP_MAGIC, CLIP_VERSION, t, h, w))
        f.write(video.tobytes())


def read_clip(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _CLIP_HEADER.size:
        raise ValueError(f"{path}: truncated clip header")
    magic, version, t, h, w = _CLIP_HEADER.unpack_from(raw)
    if magic != CLIP_MAGIC:
        raise ValueError(f"{path}: not a clip file")
    if version != CLIP_VERSION:
        raise ValueError(f"{path}: unsupported clip version {version}")
    body = raw[_CLIP_HEADER.size:]
    if len(body) != t * h * w * 3:
        raise ValueError(f"{path}: expected {t * h * w * 3} bytes of frames, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(t, h, w, 3).copy()


# ---------------------------------------------------------------- dataset I/O

def write_annotations(path, samples: Sequence[ClipSample]) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        for s in samples:
            for pid, (box, lab) in enumerate(zip(s.boxes, s.labels)):
                wr.writerow([s.clip_id, pid, *(f"{v:.2f}" for v in box), *np.flatnonzero(lab).tolist()])


def read_annotations(path) -> dict[str, list[tuple[int, tuple, list[int]]]]:
    out: dict[str, list] = {}
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if not row:
                continue
            clip, pid = row[0], int(row[1])
            box = tuple(float(v) for v in row[2:6])
            labels = [int(v) for v in row[6:] if v != ""]
            out.setdefault(clip, []).append((pid, box, labels))
    return out


def class_frequency(samples: Sequence[ClipSample]) -> np.ndarray:
    if not samples:
        return np.zeros(len(CLASS_NAMES), dtype=np.int64)
    return np.sum([s.labels.sum(axis=0) for s in samples], axis=0).astype(np.int64)


@dataclass
class Manifest:
    spec: dict
    clips: list
    digest: str

    @property
    def n(self) -> int:
        return len(self.clips)


def generate_dataset(spec: SceneSpec, n: int, out_dir, start: int = 0) -> Manifest:
    """Write ``n`` clips, annotations, scene metadata and class frequencies."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    try:
        (out / "clips").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create {out / 'clips'}: {e}") from e
    samples = generate_samples(spec, n, start)
    entries = []
    for s in samples:
        rel = f"clips/{s.clip_id}.bin"
        try:
            write_clip(out / rel, s.video)
        except OSError as e:
            raise OSError(f"failed writing {out / rel}: {e}") from e
        entries.append({"id": s.clip_id, "file": rel,
                        "sha256": hashlib.sha256((out / rel).read_bytes()).hexdigest()})
    write_annotations(out / "annotations.csv", samples)
    with open(out / "meta.jsonl", "w") as f:
        for s in samples:
            f.write(json.dumps({"id": s.clip_id, **s.meta}, sort_keys=True) + "\n")
    freq = class_frequency(samples)
    with open(out / "class_frequency.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["class_id", "class_name", "count"])
        for c, name in enumerate(CLASS_NAMES):
            wr.writerow([c, name, int(freq[c])])
    spec_d = asdict(spec)
    body = json.dumps({"spec": spec_d, "start": start, "clips": entries}, sort_keys=True)
    digest = hashlib.sha256(body.encode()).hexdigest()
    (out / "manifest.json").write_text(json.dumps(
        {"spec": spec_d, "start": start, "clips": entries, "digest": digest}, indent=1, sort_keys=True))
    return Manifest(spec_d, entries, digest)


def load_dataset(data_dir) -> list[ClipSample]:
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    ann = read_annotations(root / "annotations.csv")
    metas = {}
    with open(root / "meta.jsonl") as f:
        for line in f:
            m = json.loads(line)
            metas[m.pop("id")] = m
    n_cls = len(CLASS_NAMES)
    samples = []
    for entry in manifest["clips"]:
        cid = entry["id"]
        rows = sorted(ann.get(cid, []))
        boxes = np.array([r[1] for r in rows], dtype=np.float64).reshape(-1, 4)
        labels = np.zeros((len(rows), n_cls), dtype=np.uint8)
        for i, r in enumerate(rows):
            labels[i, r[2]] = 1
        samples.append(ClipSample(read_clip(root / entry["file"]), boxes, labels, metas.get(cid, {}), cid))
    return samples
