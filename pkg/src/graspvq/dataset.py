"""Cornell-format loading, augmentation, splitting and a synthetic bar dataset."""

from __future__ import annotations

import json
import logging
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import GraspRectangle, InvalidRectangleError, parse_rectangle, rect_mask

log = logging.getLogger(__name__)

DEFAULT_IMAGE_SIZE = 128
DATA_ENV = "GRASPVQ_DATA"


class DatasetError(RuntimeError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # C x H x W float32 in [0, 1]
    positive_rects: list = field(default_factory=list)
    source_id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.image.shape[-1]


@dataclass
class DatasetSplit:
    labelled: list
    unlabelled: list
    test: list
    seed: int
    labelled_ratio: float
    test_fraction: float

    @property
    def train(self) -> list:
        return list(self.labelled) + list(self.unlabelled)


# --- Cornell ---------------------------------------------------------------

_CORNELL_IMAGE = re.compile(r"pcd(\d+)r\.png$")


def read_rectangle_file(path) -> tuple[list[GraspRectangle], int]:
    """Parse a Cornell ``cpos`` file; returns (rectangles, number skipped for NaN)."""
    rows = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if parts:
                rows.append([float(v) for v in parts[:2]])
    if len(rows) % 4:
        raise DatasetError(f"{path}: {len(rows)} coordinate lines is not a multiple of 4")
    rects, skipped = [], 0
    for i in range(0, len(rows), 4):
        try:
            rects.append(parse_rectangle(rows[i:i + 4]))
        except InvalidRectangleError:
            skipped += 1
    return rects, skipped


def _crop_resize(img: Image.Image, image_size: int):
    w, h = img.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    img = img.crop((left, top, left + side, top + side))
    img = img.resize((image_size, image_size), Image.BILINEAR)
    return img, left, top, image_size / side


def transform_corners(corners: np.ndarray, left: float, top: float, scale: float) -> np.ndarray:
    """Map (x, y) corners through a crop offset and a resize.

    Pixel centres sit at integer coordinates, so the resize maps
    ``p -> (p + 0.5) * scale - 0.5``.
    """
    out = np.asarray(corners, dtype=float).copy()
    out[:, 0] = (out[:, 0] - left + 0.5) * scale - 0.5
    out[:, 1] = (out[:, 1] - top + 0.5) * scale - 0.5
    return out


def load_cornell(directory, image_size: int = DEFAULT_IMAGE_SIZE) -> list[Sample]:
    """One sample per ``pcdNNNNr.png``, with positives from ``pcdNNNNcpos.txt``.

    Images are centre-cropped to a square and resized; depth and negative
    rectangles are ignored.
    """
    directory = Path(directory)
    images = sorted(p for p in directory.rglob("pcd*r.png") if _CORNELL_IMAGE.search(p.name))
    if not images:
        raise DatasetError(f"no pcdNNNNr.png images under {directory}")
    samples, total_skipped = [], 0
    for path in images:
        sid = _CORNELL_IMAGE.search(path.name).group(1)
        rect_path = path.with_name(f"pcd{sid}cpos.txt")
        if not rect_path.exists():
            raise DatasetError(f"missing rectangle file {rect_path}")
        rects, skipped = read_rectangle_file(rect_path)
        total_skipped += skipped
        try:
            img = Image.open(path).convert("RGB")
        except OSError as exc:
            raise DatasetError(f"unreadable image {path}: {exc}") from exc
        img, left, top, scale = _crop_resize(img, image_size)
        moved = [parse_rectangle(transform_corners(r.corners(), left, top, scale)) for r in rects]
        arr = np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0
        samples.append(Sample(arr, moved, sid, {"nan_skipped": skipped, "path": str(path)}))
    if total_skipped:
        log.warning("skipped %d rectangles with NaN coordinates", total_skipped)
    return samples


# --- splitting -------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split(samples, test_fraction: float = 0.1, labelled_ratio: float = 0.1,
          seed: int = 0, group_key=None) -> DatasetSplit:
    """Shuffle by ``seed``, take the test set, then the labelled share of the rest.

    ``labelled_ratio`` is a fraction of the training pool, not of the whole
    dataset. ``group_key`` (sample -> hashable) keeps every group on one side
    of each cut; sizes are then met as closely as whole groups allow.
    """
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    if not 0 < labelled_ratio <= 1:
        raise ValueError("labelled_ratio must be in (0, 1]")
    samples = list(samples)
    N = len(samples)
    n_test = _round_half_up(test_fraction * N)
    n_lab = _round_half_up(labelled_ratio * (N - n_test))
    rng = np.random.default_rng(seed)
    if group_key is None:
        order = [samples[i] for i in rng.permutation(N)]
        test, rest = order[:n_test], order[n_test:]
        labelled, unlabelled = rest[:n_lab], rest[n_lab:]
    else:
        groups: dict = {}
        for s in samples:
            groups.setdefault(group_key(s), []).append(s)
        keys = sorted(groups, key=str)
        keys = [keys[i] for i in rng.permutation(len(keys))]
        test, labelled, unlabelled = [], [], []
        for k in keys:
            if len(test) < n_test:
                test += groups[k]
            elif len(labelled) < n_lab:
                labelled += groups[k]
            else:
                unlabelled += groups[k]
    if not test or not labelled or (not unlabelled and labelled_ratio < 1):
        raise ValueError(
            f"split of {N} samples with test_fraction={test_fraction}, "
            f"labelled_ratio={labelled_ratio} leaves an empty partition")
    return DatasetSplit(labelled, unlabelled, test, seed, labelled_ratio, test_fraction)


# --- augmentation ----------------------------------------------------------

def quarter_turns(rotation: float) -> int:
    k = rotation / (math.pi / 2)
    if abs(k - round(k)) > 1e-9:
        raise ValueError(f"only right-angle rotations are supported, got {rotation}")
    return int(round(k)) % 4


def augment_image(image: np.ndarray, k: int, flip: bool) -> np.ndarray:
    out = np.rot90(image, k, axes=(1, 2))
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment_corners(corners: np.ndarray, k: int, flip: bool, H: int, W: int) -> np.ndarray:
    """Apply ``k`` counter-clockwise quarter turns then an optional mirror to (x, y) corners."""
    pts = np.asarray(corners, dtype=float).copy()
    for _ in range(k):
        x, y = pts[:, 0].copy(), pts[:, 1].copy()
        pts[:, 0], pts[:, 1] = y, (W - 1) - x
        H, W = W, H
    if flip:
        pts[:, 0] = (W - 1) - pts[:, 0]
    return pts


def augment(sample: Sample, rotation: float = 0.0, flip: bool = False, seed: int = 0) -> Sample:
    """Rotate (multiples of pi/2, counter-clockwise) and optionally mirror a sample.

    Right-angle transforms are exact, so no interpolation happens. ``seed`` is
    recorded only; the transform itself is deterministic.
    """
    k = quarter_turns(rotation)
    C, H, W = sample.image.shape
    image = augment_image(sample.image, k, flip)
    Ho, Wo = image.shape[1:]
    rects = []
    for r in sample.positive_rects:
        moved = parse_rectangle(augment_corners(r.corners(), k, flip, H, W))
        if -0.5 <= moved.center_row < Ho - 0.5 and -0.5 <= moved.center_col < Wo - 0.5:
            rects.append(moved)
    meta = dict(sample.meta, augment={"quarter_turns": k, "flip": bool(flip), "seed": seed})
    return Sample(image, rects, sample.source_id, meta)


# --- synthetic bars --------------------------------------------------------

def synth_generate(n: int, image_size: int = 64, seed: int = 0) -> list[Sample]:
    """Grayscale images with one bright rotated bar; the grasp pinches across it.

    The grasp is centred on the bar, perpendicular to its axis, opens a little
    wider than the bar is thick, and has a jaw span of half its width.
    Intensities are stored on the 8-bit grid so the PNG export is lossless.
    """
    if n <= 0 or image_size < 32:
        raise ValueError("need n > 0 and image_size >= 32")
    rng = np.random.default_rng(seed)
    S = image_size
    samples = []
    for i in range(n):
        theta = rng.uniform(-math.pi / 2, math.pi / 2)
        length = rng.uniform(0.25, 0.45) * S
        thickness = rng.uniform(0.08, 0.14) * S
        margin = length / 2 + 2
        cr, cc = rng.uniform(margin, S - 1 - margin, size=2)
        fg = rng.uniform(0.7, 1.0)
        bg = rng.uniform(0.0, 0.2)
        bar = GraspRectangle(cr, cc, theta, length, thickness)
        img = np.full((S, S), bg)
        img[rect_mask(bar, (S, S))] = fg
        img = np.clip(img + rng.normal(0, 0.03, size=(S, S)), 0, 1)
        img = (np.round(img * 255) / 255).astype(np.float32)[None]
        width = thickness + max(2.0, 0.06 * S)
        grasp = GraspRectangle(cr, cc, theta + math.pi / 2, width, width / 2)
        params = {"center_row": cr, "center_col": cc, "bar_angle": bar.angle,
                  "bar_length": length, "bar_thickness": thickness,
                  "foreground": fg, "background": bg}
        samples.append(Sample(img, [grasp], f"synth{seed}_{i:05d}", {"generator": params}))
    return samples


def write_synthetic(directory, samples) -> Path:
    """Write PNGs plus an ``index.jsonl`` with corners and generator parameters."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "index.jsonl", "w") as fh:
        for s in samples:
            name = f"{s.source_id}.png"
            pixels = np.round(s.image[0] * 255).astype(np.uint8)
            Image.fromarray(pixels, mode="L").save(directory / name)
            record = {"source_id": s.source_id, "image": name,
                      "corners": [r.corners().tolist() for r in s.positive_rects],
                      "generator": s.meta.get("generator", {})}
            fh.write(json.dumps(record) + "\n")
    return directory


def read_synthetic(directory) -> list[Sample]:
    directory = Path(directory)
    samples = []
    with open(directory / "index.jsonl") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            pixels = np.asarray(Image.open(directory / rec["image"]).convert("L"), dtype=np.float32)
            rects = [parse_rectangle(c) for c in rec["corners"]]
            samples.append(Sample((pixels / 255.0)[None].astype(np.float32), rects,
                                  rec["source_id"], {"generator": rec.get("generator", {})}))
    return samples


def load_image(path, channels: int, image_size: int) -> np.ndarray:
    """Read any image file as a C x S x S array in [0, 1] (centre crop + resize)."""
    try:
        img = Image.open(path)
        img = img.convert("L" if channels == 1 else "RGB")
    except OSError as exc:
        raise DatasetError(f"unreadable image {path}: {exc}") from exc
    img, *_ = _crop_resize(img, image_size)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return arr[None] if channels == 1 else arr.transpose(2, 0, 1)


def load_dataset(source: dict) -> list[Sample]:
    """Build samples from a dataset description (``kind``: synthetic / synthetic_dir / cornell)."""
    kind = source.get("kind", "synthetic")
    if kind == "synthetic":
        return synth_generate(source.get("n", 300), source.get("image_size", 64), source.get("seed", 0))
    path = source.get("path") or os.environ.get(DATA_ENV)
    if not path:
        raise DatasetError(f"dataset kind {kind!r} needs a path (or ${DATA_ENV})")
    if kind == "synthetic_dir":
        return read_synthetic(path)
    if kind == "cornell":
        return load_cornell(path, source.get("image_size", DEFAULT_IMAGE_SIZE))
    raise DatasetError(f"unknown dataset kind {kind!r}")
