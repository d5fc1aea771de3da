"""Synthetic RGB + auxiliary-modality scenes with controllable degradation, and dataset I/O.

On disk a dataset is a directory of ``sample_XXXXX/`` folders, each holding
``rgb.ppm`` (P6), ``aux.ppm`` (P6), ``gt.pgm`` (P5, 0/255) and ``meta.json``,
plus an ``index.json`` at the root listing the sample folders.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

SHAPES = ("ellipse", "polygon", "blob")


class SceneError(ValueError):
    pass


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    min_objects: int = 1
    max_objects: int = 2
    shapes: tuple = SHAPES
    texture: float = 0.06
    background_gradient: float = 0.3
    # "depth": per-object disparity over a background ramp; "thermal": per-object temperature, blurred
    aux_mode: str = "depth"

    def validate(self) -> None:
        if self.height % 32 or self.width % 32:
            raise SceneError("scene extents must be divisible by 32")
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise SceneError("object count range must satisfy 1 <= min <= max")
        if set(self.shapes) - set(SHAPES) or not self.shapes:
            raise SceneError(f"shapes must be a non-empty subset of {SHAPES}")
        if self.aux_mode not in ("depth", "thermal"):
            raise SceneError("aux_mode must be 'depth' or 'thermal'")


@dataclass
class DegradationSpec:
    noise_sigma: float = 0.0
    speckle_sigma: float = 0.0
    dx: float = 0.0
    dy: float = 0.0
    rotation: float = 0.0
    scale: float = 1.0
    # replace the auxiliary image by uniform noise (no scene information at all)
    pure_noise: bool = False

    @property
    def affine(self) -> tuple:
        return (self.dx, self.dy, self.rotation, self.scale)

    @property
    def is_identity_affine(self) -> bool:
        return self.affine == (0.0, 0.0, 0.0, 1.0)

    def validate(self) -> None:
        if self.noise_sigma < 0 or self.speckle_sigma < 0 or self.scale <= 0:
            raise SceneError("noise levels must be >= 0 and scale > 0")


@dataclass
class Sample:
    rgb: np.ndarray          # 3xHxW in [0, 1]
    aux: np.ndarray          # 3xHxW in [0, 1]
    gt: np.ndarray           # 1xHxW binary
    degradation: DegradationSpec = field(default_factory=DegradationSpec)
    seed: int = 0
    aux_clean: np.ndarray | None = None


def _object_mask(rng, shape_kind, h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
    r = rng.uniform(0.12, 0.3) * min(h, w)
    ang = np.arctan2(yy - cy, xx - cx)
    dist = np.hypot(yy - cy, xx - cx)
    if shape_kind == "ellipse":
        ry, rx = r * rng.uniform(0.6, 1.0), r * rng.uniform(0.6, 1.0)
        th = rng.uniform(0, np.pi)
        u = (xx - cx) * np.cos(th) + (yy - cy) * np.sin(th)
        v = -(xx - cx) * np.sin(th) + (yy - cy) * np.cos(th)
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    if shape_kind == "polygon":
        k = int(rng.integers(3, 7))
        phase = rng.uniform(0, 2 * np.pi)
        # regular k-gon: inside iff distance below the edge-support radius
        sector = np.mod(ang - phase, 2 * np.pi / k) - np.pi / k
        return dist * np.cos(sector) <= r * np.cos(np.pi / k)
    harmonics = rng.uniform(-0.25, 0.25, size=3)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    radius = r * (1 + sum(a * np.cos((i + 2) * ang + p) for i, (a, p) in enumerate(zip(harmonics, phases))))
    return dist <= radius


def _smooth_noise(rng, shape, sigma=2.0):
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    return n / (n.std() + 1e-12)


def render_scene(rng: np.random.Generator, scene: SceneSpec):
    """Return (rgb 3xHxW, aux single channel HxW, gt HxW) before degradation."""
    h, w = scene.height, scene.width
    for _ in range(100):
        labels = np.zeros((h, w), dtype=np.int32)
        n_obj = int(rng.integers(scene.min_objects, scene.max_objects + 1))
        for k in range(n_obj):
            kind = scene.shapes[int(rng.integers(len(scene.shapes)))]
            labels[_object_mask(rng, kind, h, w)] = k + 1
        frac = (labels > 0).mean()
        if 0.01 <= frac <= 0.6:
            break
    else:
        raise SceneError("could not satisfy the 1%-60% foreground bounds in 100 attempts")
    gt = (labels > 0).astype(np.float64)

    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w])[:, None, None]
    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    ramp = (ramp - ramp.min()) / (np.ptp(ramp) + 1e-12)
    bg_color = rng.uniform(0.15, 0.85, size=3)
    rgb = bg_color[:, None, None] + scene.background_gradient * (ramp - 0.5)[None]
    rgb = rgb + scene.texture * _smooth_noise(rng, (3, h, w))
    for k in range(1, labels.max() + 1):
        # object colour kept at least 0.35 away from the background in some channel
        while True:
            col = rng.uniform(0.0, 1.0, size=3)
            if np.abs(col - bg_color).max() >= 0.35:
                break
        sel = labels == k
        rgb[:, sel] = col[:, None] + scene.texture * _smooth_noise(rng, (3, h, w), 1.0)[:, sel]

    if scene.aux_mode == "depth":
        aux = 0.1 + 0.35 * ramp
        for k in range(1, labels.max() + 1):
            aux[labels == k] = rng.uniform(0.6, 0.95)
    else:
        aux = 0.15 + 0.1 * ramp
        for k in range(1, labels.max() + 1):
            aux[labels == k] = rng.uniform(0.65, 0.95)
        aux = ndimage.gaussian_filter(aux, 1.0, mode="nearest")
    return np.clip(rgb, 0, 1), np.clip(aux, 0, 1), gt


def misalign(aux: np.ndarray, dx=0.0, dy=0.0, rotation=0.0, scale=1.0) -> np.ndarray:
    """Affine-warp ``aux`` (HxW or CxHxW) about the image centre.

    Inverse warping with bilinear sampling and border replication; positive
    ``dx`` / ``dy`` move content right / down, ``rotation`` is in degrees.
    """
    if aux.ndim == 3:
        return np.stack([misalign(ch, dx, dy, rotation, scale) for ch in aux])
    if (dx, dy, rotation, scale) == (0, 0, 0, 1):
        return aux.copy()
    h, w = aux.shape
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    t = np.deg2rad(rotation)
    fwd = scale * np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    inv = np.linalg.inv(fwd)
    offset = c - inv @ (c + np.array([dy, dx]))
    return ndimage.affine_transform(aux, inv, offset=offset, order=1, mode="nearest")


def degrade(rng: np.random.Generator, aux: np.ndarray, degr: DegradationSpec) -> np.ndarray:
    if degr.pure_noise:
        return rng.uniform(0.0, 1.0, size=aux.shape)
    out = misalign(aux, *degr.affine)
    if degr.noise_sigma > 0:
        out = out + rng.normal(0.0, degr.noise_sigma, size=out.shape)
    if degr.speckle_sigma > 0:
        out = out * (1.0 + rng.normal(0.0, degr.speckle_sigma, size=out.shape))
    return np.clip(out, 0.0, 1.0)


def generate_sample(seed: int, scene: SceneSpec | None = None, degr: DegradationSpec | None = None) -> Sample:
    """Deterministic in (seed, scene, degr)."""
    scene = scene or SceneSpec()
    degr = degr or DegradationSpec()
    scene.validate()
    degr.validate()
    rng = np.random.default_rng(seed)
    rgb, aux, gt = render_scene(rng, scene)
    noisy = degrade(rng, aux, degr)
    return Sample(
        rgb=rgb.astype(np.float32),
        aux=np.repeat(noisy[None], 3, axis=0).astype(np.float32),
        gt=gt[None].astype(np.float32),
        degradation=degr,
        seed=seed,
        aux_clean=np.repeat(aux[None], 3, axis=0).astype(np.float32),
    )


def psnr(ref: np.ndarray, x: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(ref, np.float64) - x) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)


# ---------------------------------------------------------------- dataset I/O


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def save_sample(sample: Sample, directory: Path, scene: SceneSpec | None = None, cell: str | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_u8(sample.rgb.transpose(1, 2, 0)), mode="RGB").save(directory / "rgb.ppm")
    Image.fromarray(_to_u8(sample.aux.transpose(1, 2, 0)), mode="RGB").save(directory / "aux.ppm")
    Image.fromarray(_to_u8(sample.gt[0]), mode="L").save(directory / "gt.pgm")
    meta = {"seed": sample.seed, "degradation": dataclasses.asdict(sample.degradation), "cell": cell}
    if scene is not None:
        meta["scene"] = dataclasses.asdict(scene)
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_sample(directory: Path) -> Sample:
    directory = Path(directory)
    rgb = np.asarray(Image.open(directory / "rgb.ppm").convert("RGB"), dtype=np.float32) / 255.0
    aux = np.asarray(Image.open(directory / "aux.ppm").convert("RGB"), dtype=np.float32) / 255.0
    gt = np.asarray(Image.open(directory / "gt.pgm").convert("L")) > 127
    meta = json.loads((directory / "meta.json").read_text())
    return Sample(rgb=rgb.transpose(2, 0, 1).copy(), aux=aux.transpose(2, 0, 1).copy(),
                  gt=gt[None].astype(np.float32), degradation=DegradationSpec(**meta["degradation"]),
                  seed=int(meta["seed"]))


def write_index(root: Path, entries: list[dict], cells: list[dict]) -> None:
    index = {"samples": entries, "cells": cells}
    (Path(root) / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))


def read_index(root: Path) -> dict:
    path = Path(root) / "index.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset index at {path}")
    return json.loads(path.read_text())


def load_dataset(root: Path, cell: str | None = None) -> list[Sample]:
    root = Path(root)
    index = read_index(root)
    return [load_sample(root / e["dir"]) for e in index["samples"] if cell is None or e.get("cell") == cell]


def stack(samples: list[Sample]):
    """Batch arrays (rgb, aux, gt) with a leading sample axis."""
    return (np.stack([s.rgb for s in samples]), np.stack([s.aux for s in samples]),
            np.stack([s.gt for s in samples]))
