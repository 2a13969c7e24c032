"""
Tiling
------
Turns large source frames into

  * the unlabeled pretraining patch set (random crops, plus an overlapping grid
    on frames that contain animals), and
  * the image-level labeled long-tail downstream set (foreground crops around
    boxes, verified box-free background crops, frame-level 8:1:1 split).

Manifests are plain CSV tables (``manifest.csv``) with a small JSON sidecar.
"""

import json
import math
import os
from dataclasses import dataclass, field, replace
from multiprocessing import Pool
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from PIL import Image
from tqdm import tqdm

from wildmoco.config import number_proc
from wildmoco.dir_helper import ensure_dir
from wildmoco.log_helper import write_log

LABELS = ("foreground", "background", "unlabeled")
SPLITS = ("train", "val", "test", "pretrain")
LABEL_INDEX = {"background": 0, "foreground": 1}
MANIFEST_COLUMNS = ["patch_id", "frame_id", "off_x", "off_y", "w", "h", "label", "split"]
ANNOTATION_COLUMNS = ["frame_id", "x", "y", "w", "h"]


@dataclass(frozen=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box must have positive size, got {self.w}x{self.h}")

    def intersects(self, other):
        return (self.x < other.x + other.w and other.x < self.x + self.w
                and self.y < other.y + other.h and other.y < self.y + self.h)

    def contains(self, other):
        return (self.x <= other.x and self.y <= other.y
                and other.x + other.w <= self.x + self.w
                and other.y + other.h <= self.y + self.h)

    def inside(self, width, height):
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= width and self.y + self.h <= height


@dataclass
class SourceFrame:
    frame_id: str
    pixels: np.ndarray
    annotations: List[BoundingBox] = field(default_factory=list)

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"frame {self.frame_id}: expected HxWx3 pixels, got {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            raise ValueError(f"frame {self.frame_id}: expected uint8 pixels, got {self.pixels.dtype}")
        for box in self.annotations:
            if not box.inside(self.width, self.height):
                raise ValueError(f"frame {self.frame_id}: box {box} outside {self.width}x{self.height}")

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]


@dataclass(frozen=True)
class PatchRecord:
    patch_id: str
    frame_id: str
    off_x: int
    off_y: int
    w: int
    h: int
    label: str = "unlabeled"
    split: str = "pretrain"

    @property
    def rect(self):
        return BoundingBox(self.off_x, self.off_y, self.w, self.h)


@dataclass
class DatasetManifest:
    records: List[PatchRecord]
    split_ratios: Tuple[int, ...] = ()
    fg_bg_ratio: Optional[float] = None
    seed: Optional[int] = None
    split_seeds: Tuple[int, ...] = ()
    skipped: List[dict] = field(default_factory=list)

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def counts(self):
        out = {}
        for r in self.records:
            out[(r.split, r.label)] = out.get((r.split, r.label), 0) + 1
        return out

    def to_frame(self):
        rows = [[r.patch_id, r.frame_id, r.off_x, r.off_y, r.w, r.h, r.label, r.split] for r in self.records]
        return pd.DataFrame(rows, columns=MANIFEST_COLUMNS)

    def meta(self):
        meta = {"seed": self.seed, "num_records": len(self.records)}
        if self.split_ratios:
            meta["split_ratios"] = list(self.split_ratios)
            meta["split_seeds"] = list(self.split_seeds)
        if self.fg_bg_ratio is not None:
            meta["fg_bg_ratio"] = self.fg_bg_ratio
        return meta

    def save(self, directory):
        ensure_dir(directory)
        self.to_frame().to_csv(os.path.join(directory, "manifest.csv"), index=False)
        with open(os.path.join(directory, "manifest_meta.json"), "w", encoding="utf-8") as fout:
            json.dump(self.meta(), fout, indent=2, sort_keys=True)
        if self.skipped:
            pd.DataFrame(self.skipped).to_csv(os.path.join(directory, "skipped.csv"), index=False)
        return os.path.join(directory, "manifest.csv")

    @classmethod
    def load(cls, path):
        """Load from ``manifest.csv`` or the directory containing it."""
        directory = path if os.path.isdir(path) else os.path.dirname(path)
        csv_path = os.path.join(directory, "manifest.csv") if os.path.isdir(path) else path
        if not os.path.exists(csv_path):
            raise FileNotFoundError(f"manifest not found: {csv_path}")
        df = pd.read_csv(csv_path, dtype={"patch_id": str, "frame_id": str})
        records = [PatchRecord(str(row.patch_id), str(row.frame_id), int(row.off_x), int(row.off_y),
                               int(row.w), int(row.h), str(row.label), str(row.split))
                   for row in df.itertuples(index=False)]
        meta = {}
        meta_path = os.path.join(directory, "manifest_meta.json")
        if os.path.exists(meta_path):
            with open(meta_path, "r", encoding="utf-8") as fin:
                meta = json.load(fin)
        return cls(records=records,
                   split_ratios=tuple(meta.get("split_ratios", ())),
                   fg_bg_ratio=meta.get("fg_bg_ratio"),
                   seed=meta.get("seed"),
                   split_seeds=tuple(meta.get("split_seeds", ())))


def _check_fits(frame, size, what="patch"):
    if size > min(frame.width, frame.height):
        raise ValueError(f"{what} size {size} does not fit frame {frame.frame_id} "
                         f"({frame.width}x{frame.height})")


def random_crop_patches(frame, n, size, rng, split="pretrain", label="unlabeled", id_prefix=None):
    if n < 1:
        raise ValueError(f"number of patches must be >= 1, got {n}")
    _check_fits(frame, size)
    prefix = id_prefix or f"{frame.frame_id}_r"
    xs = rng.integers(0, frame.width - size + 1, size=n)
    ys = rng.integers(0, frame.height - size + 1, size=n)
    return [PatchRecord(f"{prefix}{i:03d}", frame.frame_id, int(x), int(y), size, size, label, split)
            for i, (x, y) in enumerate(zip(xs, ys))]


def grid_stride(size, overlap_fraction):
    if not 0 <= overlap_fraction < 1:
        raise ValueError(f"overlap fraction must lie in [0, 1), got {overlap_fraction}")
    stride = int(math.floor(size * (1 - overlap_fraction) + 1e-9))
    if stride <= 0:
        raise ValueError(f"stride computes to 0 for size {size} and overlap {overlap_fraction}")
    return stride


def grid_count(length, size, stride):
    if size > length:
        return 0
    return (length - size) // stride + 1


def overlap_crop_patches(frame, size, overlap_fraction, split="pretrain", label="unlabeled"):
    """Row-major grid, left to right then top to bottom; partial placements are dropped."""
    _check_fits(frame, size)
    stride = grid_stride(size, overlap_fraction)
    records = []
    for row, y in enumerate(range(0, frame.height - size + 1, stride)):
        for col, x in enumerate(range(0, frame.width - size + 1, stride)):
            records.append(PatchRecord(f"{frame.frame_id}_g{row:03d}_{col:03d}", frame.frame_id,
                                       x, y, size, size, label, split))
    return records


def _pretrain_frame_records(job):
    frame, index, patches_per_frame, size, overlap_on_animal_frames, overlap_fraction, seed = job
    rng = np.random.default_rng([seed, index])
    records = random_crop_patches(frame, patches_per_frame, size, rng)
    if overlap_on_animal_frames and frame.annotations:
        records += overlap_crop_patches(frame, size, overlap_fraction)
    return records


def build_pretrain_set(frames, patches_per_frame, size, overlap_on_animal_frames=True,
                       overlap_fraction=0.5, seed=0, workers=None):
    """Unlabeled pretraining patches. Annotations only decide *where* to crop; nothing
    about labels or boxes survives into the manifest."""
    if not frames:
        raise ValueError("no frames given")
    workers = number_proc if workers is None else workers
    jobs = [(frame, i, patches_per_frame, size, overlap_on_animal_frames, overlap_fraction, seed)
            for i, frame in enumerate(frames)]
    if workers > 1:
        with Pool(workers) as pool:
            results = pool.map(_pretrain_frame_records, jobs)
    else:
        results = [_pretrain_frame_records(job) for job in jobs]

    records = [r for frame_records in results for r in frame_records]
    write_log(f"pretrain set: {len(records)} patches from {len(frames)} frames")
    return DatasetManifest(records=records, seed=seed)


def _split_counts(n, ratios):
    total = float(sum(ratios))
    n_val = int(round(n * ratios[1] / total))
    n_test = int(round(n * ratios[2] / total))
    if n >= 3:
        n_val, n_test = max(n_val, 1), max(n_test, 1)
    return n - n_val - n_test, n_val, n_test


def split_frames(frames, ratios=(8, 1, 1), seed=0):
    """Frame-level split; annotated and empty frames are split separately so every
    split receives annotated frames."""
    rng = np.random.default_rng(seed)
    assignment = {}
    annotated = [f.frame_id for f in frames if f.annotations]
    empty = [f.frame_id for f in frames if not f.annotations]
    for group in (annotated, empty):
        order = [group[i] for i in rng.permutation(len(group))]
        n_train, n_val, _ = _split_counts(len(order), ratios)
        for j, frame_id in enumerate(order):
            if j < n_train:
                assignment[frame_id] = "train"
            elif j < n_train + n_val:
                assignment[frame_id] = "val"
            else:
                assignment[frame_id] = "test"
    return assignment


def _foreground_records(split, split_frames_, fg_size, rng):
    records, skipped = [], []
    for frame in split_frames_:
        for box in frame.annotations:
            if fg_size > min(frame.width, frame.height):
                reason = f"foreground crop {fg_size} larger than frame {frame.width}x{frame.height}"
            elif box.w > fg_size or box.h > fg_size:
                reason = f"box {box.w}x{box.h} larger than foreground crop {fg_size}"
            else:
                reason = None
            if reason:
                skipped.append({"frame_id": frame.frame_id, "x": box.x, "y": box.y,
                                "w": box.w, "h": box.h, "split": split, "reason": reason})
                continue
            x_lo, x_hi = max(0, box.x + box.w - fg_size), min(box.x, frame.width - fg_size)
            y_lo, y_hi = max(0, box.y + box.h - fg_size), min(box.y, frame.height - fg_size)
            x = int(rng.integers(x_lo, x_hi + 1))
            y = int(rng.integers(y_lo, y_hi + 1))
            records.append(PatchRecord(f"{split}_fg{len(records):05d}", frame.frame_id,
                                       x, y, fg_size, fg_size, "foreground", split))
    return records, skipped


def _background_records(split, split_frames_, bg_size, n_needed, rng, max_attempts):
    candidates = [f for f in split_frames_ if f.width >= bg_size and f.height >= bg_size]
    if n_needed and not candidates:
        raise ValueError(f"insufficient background area in {split}: no frame holds a "
                         f"{bg_size}x{bg_size} crop")
    records = []
    attempts = 0
    while len(records) < n_needed:
        attempts += 1
        if attempts > max_attempts * n_needed:
            raise ValueError(f"insufficient background area in {split}: found {len(records)} of "
                             f"{n_needed} box-free {bg_size}x{bg_size} crops after {attempts - 1} draws")
        frame = candidates[int(rng.integers(len(candidates)))]
        x = int(rng.integers(0, frame.width - bg_size + 1))
        y = int(rng.integers(0, frame.height - bg_size + 1))
        rect = BoundingBox(x, y, bg_size, bg_size)
        if any(rect.intersects(box) for box in frame.annotations):
            continue
        records.append(PatchRecord(f"{split}_bg{len(records):05d}", frame.frame_id,
                                   x, y, bg_size, bg_size, "background", split))
    return records


def build_downstream_set(frames, fg_size=224, bg_size=512, ratio_fg_bg=1 / 18,
                         split_seeds=(1, 2, 3), split_ratios=(8, 1, 1), split_seed=0,
                         max_attempts=1000):
    if len(split_seeds) != 3 or len(set(split_seeds)) != 3:
        raise ValueError(f"need three distinct split seeds, got {split_seeds}")
    if ratio_fg_bg <= 0:
        raise ValueError(f"foreground:background ratio must be > 0, got {ratio_fg_bg}")

    assignment = split_frames(frames, split_ratios, split_seed)
    by_split = {s: [f for f in frames if assignment[f.frame_id] == s] for s in ("train", "val", "test")}
    missing = [s for s, fs in by_split.items() if not any(f.annotations for f in fs)]
    if missing:
        raise ValueError(f"splits without any annotated frame: {missing}")

    records, skipped = [], []
    for split, seed in zip(("train", "val", "test"), split_seeds):
        rng = np.random.default_rng(seed)
        fg, fg_skipped = _foreground_records(split, by_split[split], fg_size, rng)
        if split == "train":
            n_bg = int(round(len(fg) / ratio_fg_bg))
        else:
            n_bg = len(fg)
        bg = _background_records(split, by_split[split], bg_size, n_bg, rng, max_attempts)
        records += fg + bg
        skipped += fg_skipped
        write_log(f"{split}: {len(fg)} foreground / {len(bg)} background from {len(by_split[split])} frames")

    for item in skipped:
        write_log(f"skipped box in {item['frame_id']}: {item['reason']}", level="WARNING")
    return DatasetManifest(records=records, split_ratios=tuple(split_ratios), fg_bg_ratio=ratio_fg_bg,
                           seed=split_seed, split_seeds=tuple(split_seeds), skipped=skipped)


def subsample_labels(manifest, fraction, rng=0):
    """Stratified label-fraction subsampling of the train split; val/test untouched."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    train = [i for i, r in enumerate(manifest.records) if r.split == "train" and r.label in LABEL_INDEX]
    if not train:
        raise ValueError("manifest has no labeled train split")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)

    keep = set(i for i, r in enumerate(manifest.records) if r.split != "train")
    kept_per_class = {}
    for label in ("foreground", "background"):
        idx = [i for i in train if manifest.records[i].label == label]
        n_keep = min(len(idx), math.ceil(fraction * len(idx) - 1e-9))
        chosen = rng.choice(idx, size=n_keep, replace=False) if n_keep else []
        keep.update(int(i) for i in chosen)
        kept_per_class[label] = n_keep
    if kept_per_class["foreground"] == 0:
        raise ValueError(f"fraction {fraction} keeps no foreground train records")

    records = [r for i, r in enumerate(manifest.records) if i in keep]
    return replace(manifest, records=records, skipped=list(manifest.skipped))


def crop_patch(frame, record):
    return frame.pixels[record.off_y:record.off_y + record.h, record.off_x:record.off_x + record.w]


def load_frames(directory):
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"frame directory not found: {directory}")
    boxes = {}
    ann_path = os.path.join(directory, "annotations.csv")
    if os.path.exists(ann_path):
        df = pd.read_csv(ann_path, dtype={"frame_id": str})
        for row in df.itertuples(index=False):
            boxes.setdefault(str(row.frame_id), []).append(
                BoundingBox(int(row.x), int(row.y), int(row.w), int(row.h)))

    frames = []
    for fname in sorted(os.listdir(directory)):
        if not fname.lower().endswith(".png"):
            continue
        frame_id = os.path.splitext(fname)[0]
        with Image.open(os.path.join(directory, fname)) as img:
            pixels = np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
        frames.append(SourceFrame(frame_id, pixels, boxes.get(frame_id, [])))
    if not frames:
        raise FileNotFoundError(f"no PNG frames in {directory}")
    return frames


def save_frames(frames, directory):
    ensure_dir(directory)
    rows = []
    for frame in frames:
        Image.fromarray(frame.pixels).save(os.path.join(directory, f"{frame.frame_id}.png"))
        rows += [[frame.frame_id, b.x, b.y, b.w, b.h] for b in frame.annotations]
    pd.DataFrame(rows, columns=ANNOTATION_COLUMNS).to_csv(os.path.join(directory, "annotations.csv"),
                                                          index=False)
    return directory


def write_patches(manifest, frames, directory):
    ensure_dir(directory)
    by_id = {f.frame_id: f for f in frames}
    for record in tqdm(manifest.records, desc="patches", disable=len(manifest.records) < 500):
        Image.fromarray(np.ascontiguousarray(crop_patch(by_id[record.frame_id], record))).save(
            os.path.join(directory, f"{record.patch_id}.png"))
    return directory
