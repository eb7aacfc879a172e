"""Procedural grayscale scenes with exact per-pixel labels.

Each sample is a 32x32 (configurable) image in [-1, 1] containing a few
non-overlapping shapes (disk, square, triangle, ring) over a textured
background.  Class identity is carried by geometry, while intensities are
drawn from overlapping ranges, so a per-pixel classifier has real work to do.
Instances are recovered from the class mask by 4-connected component
labeling, which also guarantees image/mask consistency for anything loaded
from disk.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .diffusion import ControlCondition

SHAPE_KINDS = ("disk", "square", "triangle", "ring")


@dataclass
class SceneConfig:
    num_classes: int = 5  # background plus up to four shape classes
    size: int = 32
    min_objects: int = 1
    max_objects: int = 3
    min_radius: int = 3
    max_radius: int = 6
    contrast_margin: float = 0.25
    background_noise: float = 0.05
    object_noise: float = 0.04
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need at least background plus one shape class")
        if self.num_classes > 1 + len(SHAPE_KINDS):
            raise ValueError(f"at most {1 + len(SHAPE_KINDS)} classes supported")
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError("object count range invalid")
        if self.min_radius < 3 or self.max_radius < self.min_radius:
            raise ValueError("radius range invalid (min 3 keeps shapes non-degenerate)")
        if self.size < 2 * self.max_radius + 5:
            raise ValueError("image too small for the configured shapes")


@dataclass
class Instance:
    class_id: int
    mask: np.ndarray  # bool (h, w)
    pixel_count: int
    anchor: tuple[int, int]  # top-left-most pixel, row-major

    def sort_key(self):
        return (-self.pixel_count, self.anchor[0], self.anchor[1])


@dataclass
class SceneSample:
    image: np.ndarray  # float64 (h, w) in [-1, 1]
    class_mask: np.ndarray  # int (h, w), 0 = background
    instances: list[Instance] = field(default_factory=list)


# -- rasterization ------------------------------------------------------------


def raster_shape(kind: str, center: tuple[float, float], radius: float, size: int,
                 orient: int = 0) -> np.ndarray:
    """Boolean mask of one shape; centers may be subpixel."""
    cy, cx = center
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    if kind == "square":
        return (np.abs(yy - cy) <= radius * 0.82) & (np.abs(xx - cx) <= radius * 0.82)
    if kind == "ring":
        outer = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
        inner = (yy - cy) ** 2 + (xx - cx) ** 2 <= max(1.0, radius - 2.4) ** 2
        return outer & ~inner
    if kind == "triangle":
        # isoceles triangle, apex rotated by orient quarter-turns
        pts = np.array([(-radius, 0.0), (radius, -radius), (radius, radius)])
        for _ in range(orient % 4):
            pts = pts @ np.array([[0.0, -1.0], [1.0, 0.0]])
        v = pts + np.array([cy, cx])

        def cross(a, b):
            return (b[0] - a[0]) * (xx - a[1]) - (b[1] - a[1]) * (yy - a[0])

        c0, c1, c2 = cross(v[0], v[1]), cross(v[1], v[2]), cross(v[2], v[0])
        return ((c0 >= 0) & (c1 >= 0) & (c2 >= 0)) | ((c0 <= 0) & (c1 <= 0) & (c2 <= 0))
    raise ValueError(f"unknown shape kind {kind!r}")


def binary_dilate(mask: np.ndarray, radius: int = 1, diagonal: bool = False) -> np.ndarray:
    """Grow a boolean mask by ``radius`` steps.

    4-neighborhood by default (Manhattan ball); ``diagonal=True`` grows the
    full 8-neighborhood (Chebyshev ball), which matches conv receptive fields.
    """
    out = mask.astype(bool).copy()
    for _ in range(radius):
        grown = out.copy()
        grown[1:, :] |= out[:-1, :]
        grown[:-1, :] |= out[1:, :]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        if diagonal:
            grown[1:, 1:] |= out[:-1, :-1]
            grown[1:, :-1] |= out[:-1, 1:]
            grown[:-1, 1:] |= out[1:, :-1]
            grown[:-1, :-1] |= out[1:, 1:]
        out = grown
    return out


# -- generation ---------------------------------------------------------------


def _render_sample(cfg: SceneConfig, rng: np.random.Generator) -> SceneSample:
    n = cfg.size
    yy, xx = np.mgrid[0:n, 0:n]
    base = rng.uniform(-0.7, -0.25)
    gy, gx = rng.uniform(-0.3, 0.3, size=2)
    image = base + (gy * yy + gx * xx) / n + cfg.background_noise * rng.standard_normal((n, n))
    class_mask = np.zeros((n, n), dtype=np.int64)
    occupied = np.zeros((n, n), dtype=bool)

    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    kinds = SHAPE_KINDS[: cfg.num_classes - 1]
    placed = 0
    for _ in range(count):
        mask = None
        for attempt in range(40):
            kind = kinds[int(rng.integers(len(kinds)))]
            r = float(rng.uniform(cfg.min_radius, cfg.max_radius))
            if attempt >= 20:
                r = float(cfg.min_radius)
            cy = rng.uniform(r + 1.5, n - r - 2.5)
            cx = rng.uniform(r + 1.5, n - r - 2.5)
            orient = int(rng.integers(4))
            cand = raster_shape(kind, (cy, cx), r, n, orient)
            if cand.sum() < 9:
                continue
            # demand one clear background pixel between objects so same-class
            # neighbors never merge into a single component
            if not (binary_dilate(cand, 1) & occupied).any():
                mask = cand
                break
        if mask is None:
            continue
        local_bg = float(image[binary_dilate(mask, 2) & ~mask].mean())
        level = None
        for _ in range(50):
            v = rng.uniform(-0.85, 0.9)
            if abs(v - local_bg) >= cfg.contrast_margin + 0.1:
                level = v
                break
        if level is None:
            level = np.clip(local_bg + cfg.contrast_margin + 0.15, -0.85, 0.9)
        image[mask] = level + cfg.object_noise * rng.standard_normal(int(mask.sum()))
        class_mask[mask] = kinds.index(kind) + 1
        occupied |= mask
        placed += 1

    if placed < cfg.min_objects:
        raise RuntimeError("could not place the configured minimum object count")
    image = np.clip(image, -0.95, 0.95)
    return SceneSample(image=image, class_mask=class_mask,
                       instances=connected_components(class_mask))


def gen_dataset(cfg: SceneConfig, n: int) -> list[SceneSample]:
    """Deterministic dataset: sample i is a pure function of (cfg.seed, i)."""
    if n < 1:
        raise ValueError("need at least one sample")
    out = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, i]))
        out.append(_render_sample(cfg, rng))
    return out


# -- instance machinery ---------------------------------------------------------


def connected_components(class_mask: np.ndarray) -> list[Instance]:
    """4-connected components per class, largest first.

    Ties break on the top-left-most member pixel in row-major order.
    """
    class_mask = np.asarray(class_mask)
    h, w = class_mask.shape
    visited = np.zeros((h, w), dtype=bool)
    out: list[Instance] = []
    for i in range(h):
        for j in range(w):
            c = class_mask[i, j]
            if c == 0 or visited[i, j]:
                continue
            mask = np.zeros((h, w), dtype=bool)
            stack = [(i, j)]
            visited[i, j] = True
            while stack:
                y, x = stack.pop()
                mask[y, x] = True
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and not visited[ny, nx] \
                            and class_mask[ny, nx] == c:
                        visited[ny, nx] = True
                        stack.append((ny, nx))
            out.append(Instance(class_id=int(c), mask=mask,
                                pixel_count=int(mask.sum()), anchor=(i, j)))
    out.sort(key=Instance.sort_key)
    return out


def select_instances(sample: SceneSample, strategy: str, k: int,
                     probs: np.ndarray | None = None) -> list[Instance]:
    """Pick up to k instances to redraw.

    ``largest`` ranks by pixel count.  ``most_certain`` ranks by LOWEST mean
    per-pixel prediction entropy over the instance and needs ``probs``, the
    scorer's (C, h, w) probability map for this image; ties fall back to
    pixel count and then top-left order.
    """
    if not sample.instances:
        raise ValueError("sample has no instances")
    if k < 1:
        raise ValueError("k must be positive")
    if strategy == "largest":
        ranked = sorted(sample.instances, key=Instance.sort_key)
    elif strategy == "most_certain":
        if probs is None:
            raise ValueError("most_certain selection needs scorer probabilities")
        p = np.clip(probs, 1e-12, 1.0)
        entropy = -(p * np.log(p)).sum(axis=0)

        def key(inst: Instance):
            return (float(entropy[inst.mask].mean()),) + inst.sort_key()

        ranked = sorted(sample.instances, key=key)
    else:
        raise ValueError(f"unknown selection strategy {strategy!r}")
    return ranked[: min(k, len(ranked))]


def sobel_edges(image: np.ndarray) -> np.ndarray:
    """Normalized Sobel gradient magnitude in [0, 1] (edge-replicated border)."""
    p = np.pad(image, 1, mode="edge")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) \
        - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) \
        - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    mag = np.hypot(gx, gy)
    peak = mag.max()
    return mag / peak if peak > 0 else mag


def make_condition(sample: SceneSample, instance: Instance, num_classes: int) -> ControlCondition:
    """Conditioning channels for redrawing one instance of a sample."""
    return ControlCondition(
        edge_map=sobel_edges(sample.image),
        instance_mask=instance.mask.astype(np.float64),
        class_id=instance.class_id,
        num_classes=num_classes,
    )


def composite(real: np.ndarray, generated: np.ndarray, instance_mask: np.ndarray) -> np.ndarray:
    """Splice generated content into the real image inside the mask only.

    The class mask of the augmented sample is untouched by construction,
    which is the label-alignment guarantee downstream training relies on.
    """
    real = np.asarray(real, dtype=np.float64)
    generated = np.asarray(generated, dtype=np.float64)
    m = np.asarray(instance_mask, dtype=np.float64)
    if real.shape != generated.shape or real.shape != m.shape:
        raise ValueError("composite operands must share a shape")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("instance mask must be binary")
    return m * generated + (1.0 - m) * real


# -- persistence ----------------------------------------------------------------


def save_dataset(path, samples: list[SceneSample], cfg: SceneConfig) -> None:
    os.makedirs(path, exist_ok=True)
    lines = [f"count = {len(samples)}"]
    for key, val in vars(cfg).items():
        lines.append(f"scene.{key} = {val}")
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    for i, s in enumerate(samples):
        checkpoint.save_tensors(
            os.path.join(path, f"sample_{i:06d}.glab"),
            {"image": s.image, "class_mask": s.class_mask.astype(np.float64)},
        )


def load_dataset(path) -> list[SceneSample]:
    with open(os.path.join(path, "manifest.txt")) as fh:
        first = fh.readline().split("=")
        count = int(first[1])
    out = []
    for i in range(count):
        named = checkpoint.load_tensors(os.path.join(path, f"sample_{i:06d}.glab"))
        mask = named["class_mask"].astype(np.int64)
        out.append(SceneSample(image=named["image"], class_mask=mask,
                               instances=connected_components(mask)))
    return out
