"""Procedural two-modality scenes for training and evaluation.

Each scene is a textured background with a few bright geometric objects;
ground truth is the union of every object mask, whether or not a given
rendering shows it. Independent corruption knobs hide a fraction of the
objects from the RGB image or from the supplementary channel, which is
how complementarity between the streams is exercised: a corrupted-RGB
scene still carries the hidden objects in depth/heat/focus.

Everything is driven by one PCG64 stream per scene, so a spec with the
same seed reproduces bit-identical arrays.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy import ndimage

MODALITIES = ("depth", "thermal", "focal_stack")
FOCAL_SLICES = 4          # rendered slices; packed block always holds 12
PACKED_FOCAL_CHANNELS = 36


@dataclasses.dataclass(frozen=True)
class SyntheticSceneSpec:
    seed: int = 0
    image_hw: tuple = (64, 64)
    n_objects: int = 3
    modality: str = "depth"
    noise_level: float = 0.05
    supp_corruption: float = 0.0      # fraction of objects absent from supp
    primary_corruption: float = 0.0   # fraction of objects absent from RGB

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.n_objects < 0:
            raise ValueError("n_objects must be >= 0")
        for frac in (self.supp_corruption, self.primary_corruption):
            if not (0.0 <= frac <= 1.0):
                raise ValueError("corruption fractions must lie in [0, 1]")

    def supp_channels(self):
        return PACKED_FOCAL_CHANNELS if self.modality == "focal_stack" else 1


def _object_mask(rng, h, w):
    """One random filled shape as a boolean mask."""
    yy, xx = np.mgrid[0:h, 0:w]
    kind = rng.integers(0, 3)
    cy = rng.uniform(0.2 * h, 0.8 * h)
    cx = rng.uniform(0.2 * w, 0.8 * w)
    if kind == 0:                                   # circle
        r = rng.uniform(0.08, 0.18) * min(h, w)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == 1:                                   # axis-aligned rectangle
        rh = rng.uniform(0.08, 0.2) * h
        rw = rng.uniform(0.08, 0.2) * w
        return (np.abs(yy - cy) <= rh) & (np.abs(xx - cx) <= rw)
    ra = rng.uniform(0.1, 0.2) * h                  # ellipse
    rb = rng.uniform(0.06, 0.14) * w
    return ((yy - cy) / ra) ** 2 + ((xx - cx) / rb) ** 2 <= 1.0


def _background(rng, h, w):
    """Smooth gradient plus low-frequency ripple, per channel."""
    yy, xx = np.mgrid[0:h, 0:w]
    base = np.empty((3, h, w))
    for c in range(3):
        gy, gx = rng.uniform(-0.15, 0.15, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        freq = rng.uniform(1.5, 3.5)
        level = rng.uniform(0.25, 0.45)
        ripple = 0.05 * np.sin(2 * np.pi * freq * (yy / h + xx / w) + phase)
        base[c] = level + gy * (yy / h - 0.5) + gx * (xx / w - 0.5) + ripple
    return base


def _n_corrupted(frac, n):
    return int(round(frac * n))


def generate_scene(spec):
    """Returns dict with image (3,H,W), supp (C,H,W), gt (H,W), all float64.

    image and supp lie in [0,1]; gt is exactly {0,1}.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    h, w = spec.image_hw

    masks = [_object_mask(rng, h, w) for _ in range(spec.n_objects)]
    colors = rng.uniform(0.6, 0.95, size=(spec.n_objects, 3))
    depths = rng.uniform(0.35, 0.95, size=spec.n_objects)

    # which objects each stream actually shows
    order = rng.permutation(spec.n_objects)
    hidden_rgb = set(order[:_n_corrupted(spec.primary_corruption, spec.n_objects)])
    order2 = rng.permutation(spec.n_objects)
    hidden_supp = set(order2[:_n_corrupted(spec.supp_corruption, spec.n_objects)])

    image = _background(rng, h, w)
    for i, m in enumerate(masks):
        if i in hidden_rgb:
            continue
        image[:, m] = colors[i][:, None]
    image += rng.normal(0.0, spec.noise_level, size=image.shape)
    image = np.clip(image, 0.0, 1.0)

    gt = np.zeros((h, w))
    for m in masks:
        gt[m] = 1.0

    yy, xx = np.mgrid[0:h, 0:w]
    depth = 0.15 + 0.1 * (yy / h)                       # receding floor
    for i, m in enumerate(masks):
        if i in hidden_supp:
            continue
        depth[m] = depths[i] - 0.1 * (yy[m] / h)        # slanted facets

    if spec.modality == "depth":
        supp = depth[None]
    elif spec.modality == "thermal":
        heat = np.full((h, w), 0.2)
        for i, m in enumerate(masks):
            if i in hidden_supp:
                continue
            ys, xs = np.nonzero(m)
            cy, cx = ys.mean(), xs.mean()
            sigma = max(2.0, 0.35 * np.sqrt(len(ys)))
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
            heat = np.maximum(heat, 0.25 + 0.65 * blob * m.astype(float))
        supp = heat[None]
    else:                                               # focal_stack
        sharp = _background(rng, h, w)
        for i, m in enumerate(masks):
            if i in hidden_supp:
                continue
            sharp[:, m] = colors[i][:, None]
        planes = np.linspace(0.2, 0.9, FOCAL_SLICES)
        slices = []
        for f in planes:
            blur_map = np.abs(depth - f)
            sl = np.stack([
                ndimage.gaussian_filter(sharp[c], sigma=1.0 + 6.0 * float(blur_map.mean()))
                for c in range(3)
            ])
            # re-sharpen the in-focus band so each slice prefers its plane
            band = (blur_map < 0.12).astype(float)
            sl = sl * (1 - band[None]) + sharp * band[None]
            slices.append(sl)
        supp = np.zeros((PACKED_FOCAL_CHANNELS, h, w))
        supp[:3 * FOCAL_SLICES] = np.concatenate(slices, axis=0)

    supp = supp + rng.normal(0.0, spec.noise_level, size=supp.shape)
    supp = np.clip(supp, 0.0, 1.0)
    if spec.modality == "focal_stack":
        supp[3 * FOCAL_SLICES:] = 0.0                   # absent slices stay zero

    return {"image": image, "supp": supp, "gt": gt}


def generate_dataset(base_spec, n, seed_offset=0):
    """n scenes with consecutive seeds; returns stacked (images, supps, gts)."""
    images, supps, gts = [], [], []
    for i in range(n):
        spec = dataclasses.replace(base_spec, seed=base_spec.seed + seed_offset + i)
        scene = generate_scene(spec)
        images.append(scene["image"])
        supps.append(scene["supp"])
        gts.append(scene["gt"][None])
    return (np.stack(images), np.stack(supps), np.stack(gts))
