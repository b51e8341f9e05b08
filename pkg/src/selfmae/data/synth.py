"""Synthetic stand-in datasets and the manifest that indexes them.

Manifest JSON::

    {"version": 1, "task": "cls" | "seg",
     "items": [{"file": ..., "labels": [...] | "label_file": ..., "split": "train" | "test"}],
     "synth": {...generation parameters...}}
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .container import load_array, save_array
from .transforms import clip_rescale, hist_equalize

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1

# HU-like intensities; the loader applies clip_rescale(-175, 250).
BACKGROUND_HU = -100.0
ORGAN_HU = (30.0, 110.0, 190.0, 240.0, 70.0, 150.0, 10.0)

SHAPES = ("disk", "square", "ring", "cross", "hbar", "vbar", "triangle", "diamond")


class DataError(RuntimeError):
    pass


@dataclass
class SynthSpec:
    task: str = "seg"
    count: int = 64
    size: int = 48
    channels: int = 1
    num_classes: int = 4
    noise: float = 0.1
    seed: int = 0
    prevalence: float = 0.5
    test_fraction: float = 0.25
    patch: int = 16

    def __post_init__(self):
        if self.task not in ("cls", "seg"):
            raise ValueError(f"task must be cls or seg, got {self.task!r}")
        if self.size % self.patch:
            raise ValueError(f"size {self.size} is not divisible by patch {self.patch}")
        if self.task == "seg" and self.num_classes < 2:
            raise ValueError("seg data needs at least 2 classes")
        if self.task == "seg" and self.num_classes - 1 > len(ORGAN_HU):
            raise ValueError(f"at most {len(ORGAN_HU) + 1} seg classes are supported")
        if self.task == "cls" and not 1 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"cls data supports 1..{len(SHAPES)} labels")
        if self.count < 1:
            raise ValueError("count must be positive")


def ellipsoid_volume(rng: np.random.Generator, spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """One ``[C, S, S, S]`` HU-like volume and its ``[S, S, S]`` label map.

    Voxels inside several ellipsoids take the label whose normalised radius is smallest.
    """
    s = spec.size
    k = spec.num_classes
    zz, yy, xx = np.meshgrid(*(np.arange(s, dtype=np.float64) + 0.5,) * 3, indexing="ij")
    best_q = np.full((s, s, s), np.inf)
    labels = np.zeros((s, s, s), dtype=np.int64)
    for cls in range(1, k):
        radii = rng.uniform(s / 8, s / 4, size=3)
        center = np.array([rng.uniform(r, s - r) for r in radii])
        q = ((zz - center[0]) / radii[0]) ** 2 + ((yy - center[1]) / radii[1]) ** 2 + ((xx - center[2]) / radii[2]) ** 2
        inside = (q <= 1.0) & (q < best_q)
        labels[inside] = cls
        best_q = np.where(inside, q, best_q)
    base = np.full((s, s, s), BACKGROUND_HU)
    for cls in range(1, k):
        base[labels == cls] = ORGAN_HU[cls - 1]
    span = 425.0
    vols = [base + rng.normal(0.0, spec.noise * span, size=base.shape) for _ in range(spec.channels)]
    return np.stack(vols).astype(np.float32), labels


def _shape_mask(kind: str, s: int, rng: np.random.Generator) -> np.ndarray:
    r = rng.uniform(s / 10, s / 6)
    cy, cx = rng.uniform(r + 1, s - r - 1, size=2)
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy**2 + dx**2 <= r**2
    if kind == "square":
        return (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
    if kind == "ring":
        d = np.sqrt(dy**2 + dx**2)
        return (d <= r) & (d >= 0.6 * r)
    if kind == "cross":
        w = r * 0.3
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    if kind == "hbar":
        return (np.abs(dy) <= r * 0.25) & (np.abs(dx) <= r)
    if kind == "vbar":
        return (np.abs(dx) <= r * 0.25) & (np.abs(dy) <= r)
    if kind == "triangle":
        return (dy <= r * 0.7) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.55)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    raise ValueError(kind)


def shapes_image(rng: np.random.Generator, spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """One ``uint8`` ``[S, S]`` image and its multi-hot label vector."""
    s = spec.size
    labels = (rng.random(spec.num_classes) < spec.prevalence).astype(np.int64)
    img = np.full((s, s), 60.0)
    for k in np.flatnonzero(labels):
        img[_shape_mask(SHAPES[k], s, rng)] = rng.uniform(150, 230)
    img += rng.normal(0.0, spec.noise * 255, size=img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8), labels


def _split(i: int, spec: SynthSpec) -> str:
    n_test = int(round(spec.count * spec.test_fraction))
    return "test" if i >= spec.count - n_test else "train"


def synth_generate(spec: SynthSpec, out_dir: str | os.PathLike) -> Path:
    """Write containers plus ``manifest.json`` into ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    items = []
    for i in range(spec.count):
        name = f"img_{i:04d}.ntc"
        if spec.task == "seg":
            vol, lab = ellipsoid_volume(rng, spec)
            save_array(out / name, vol)
            lname = f"lbl_{i:04d}.ntc"
            save_array(out / lname, lab.astype(np.uint8))
            items.append({"file": name, "label_file": lname, "split": _split(i, spec)})
        else:
            img, lab = shapes_image(rng, spec)
            save_array(out / name, img)
            items.append({"file": name, "labels": [int(v) for v in lab], "split": _split(i, spec)})
    manifest = {"version": MANIFEST_VERSION, "task": spec.task, "items": items, "synth": asdict(spec)}
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


@dataclass
class Dataset:
    """Preprocessed arrays for one split.

    ``images`` is ``[n, C, *spatial]`` float32; ``labels`` is ``[n, L]`` (cls)
    or ``[n, *spatial]`` int64 (seg).
    """

    task: str
    images: np.ndarray
    labels: np.ndarray
    files: list[str]
    num_classes: int

    def __len__(self) -> int:
        return len(self.files)


def read_manifest(path: str | os.PathLike) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    try:
        m = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"manifest {path} is not valid JSON: {e}") from None
    for key in ("version", "task", "items"):
        if key not in m:
            raise DataError(f"manifest {path} lacks '{key}'")
    if m["task"] not in ("cls", "seg"):
        raise DataError(f"manifest task must be cls or seg, got {m['task']!r}")
    m["_root"] = str(path.parent)
    return m


def preprocess(task: str, raw: np.ndarray) -> np.ndarray:
    if task == "cls":
        img = raw if raw.ndim == 2 else raw[0]
        return (hist_equalize(img.astype(np.uint8)).astype(np.float32) / 255.0)[None]
    return clip_rescale(raw.astype(np.float32))


def load_dataset(manifest_path: str | os.PathLike, split: str | None = "train") -> Dataset:
    """Load and preprocess every item of ``split`` (``None`` for all), in manifest order."""
    m = read_manifest(manifest_path)
    root = Path(m["_root"])
    task = m["task"]
    images, labels, files = [], [], []
    for item in m["items"]:
        if split is not None and item.get("split") != split:
            continue
        try:
            raw = load_array(root / item["file"])
            images.append(preprocess(task, raw))
            if task == "seg":
                labels.append(load_array(root / item["label_file"]).astype(np.int64))
            else:
                labels.append(np.asarray(item["labels"], dtype=np.int64))
        except (OSError, KeyError, ValueError) as e:
            raise DataError(f"cannot load item {item}: {e}") from None
        files.append(item["file"])
    if not files:
        raise DataError(f"manifest has no items in split {split!r}")
    if task == "seg":
        k = m.get("synth", {}).get("num_classes") or int(max(l.max() for l in labels)) + 1
    else:
        k = len(labels[0])
    return Dataset(task, np.stack(images), np.stack(labels), files, int(k))
