"""Saccade world: saliency-weighted fixation sampling over sprite scenes.

Fixations are drawn from a saliency map (per-pixel cells), with an
inhibition-of-return disc zeroed around each previous fixation. Views are
fixed-size patches around fixation centers; actions are normalized
relative center displacements.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .actions import Action, compose_actions, relative_action
from .episodes import Episode
from .saliency_io import SaliencyFormatError, load_grid, save_grid
from .sprites import SpriteLatents, render_sprite, sample_base_latents, NUM_CLASSES

DEFAULT_RESOLUTION = 96
DEFAULT_PATCH = 32
DEFAULT_IOR_RADIUS = 16.0
UNIFORM_FLOOR = 0.25


class SaliencySamplingError(RuntimeError):
    """All sampling mass removed (exhausted saliency)."""


@dataclass
class SaliencyMap:
    grid: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=np.float64)
        if grid.ndim != 2:
            raise ValueError(f"saliency grid must be 2-d, got {grid.shape}")
        if not np.all(np.isfinite(grid)):
            raise SaliencyFormatError("saliency grid has non-finite entries")
        if np.any(grid < 0):
            raise SaliencyFormatError("saliency grid has negative entries")
        self.grid = grid

    def normalize(self) -> "SaliencyMap":
        total = self.grid.sum()
        if total <= 0:
            raise SaliencySamplingError("cannot normalize an all-zero map")
        return SaliencyMap(self.grid / total, normalized=True)


@dataclass(frozen=True)
class FixationLatents:
    """Fixation center in pixel coordinates plus the normalization extent."""

    cx: float
    cy: float
    extent: float
    class_id: int = -1


def load_saliency(path: str | Path) -> SaliencyMap:
    return SaliencyMap(load_grid(path)).normalize()


def save_saliency(path: str | Path, sal: SaliencyMap) -> None:
    save_grid(path, sal.grid)


def saliency_sample_fixation(sal: SaliencyMap, rng: np.random.Generator) -> tuple[int, int]:
    """Draw one cell ~ saliency; returns (x, y) = (col, row) of its center."""
    if not sal.normalized:
        sal = sal.normalize()
    h, w = sal.grid.shape
    p = sal.grid.ravel()
    total = p.sum()
    if total <= 0:
        raise SaliencySamplingError("all-zero saliency map")
    idx = int(rng.choice(h * w, p=p / total))
    return idx % w, idx // w


def apply_ior(sal: SaliencyMap, fixations: list[tuple[float, float]], radius: float) -> SaliencyMap:
    """Zero a disc of the given radius around each fixation, renormalize."""
    if radius <= 0:
        raise ValueError("IoR radius must be positive")
    grid = sal.grid.copy()
    h, w = grid.shape
    if fixations:
        ys, xs = np.mgrid[0:h, 0:w]
        mask = np.zeros((h, w), dtype=bool)
        for fx, fy in fixations:
            mask |= (xs - fx) ** 2 + (ys - fy) ** 2 <= radius**2
        grid[mask] = 0.0
        if grid.sum() <= 0:
            if mask.all():
                raise SaliencySamplingError(
                    "inhibition of return removed the whole grid"
                )
            # saliency happened to vanish outside the discs: fall back to
            # uniform over the untouched complement
            grid[~mask] = 1.0
    return SaliencyMap(grid).normalize()


def synthetic_saliency(
    silhouette: np.ndarray,
    rng: np.random.Generator,
    n_components: int = 3,
    floor: float = UNIFORM_FLOOR,
) -> SaliencyMap:
    """Mixture of isotropic Gaussians centered on object mass + uniform floor."""
    h, w = silhouette.shape
    sigma = w / 8.0
    ys, xs = np.nonzero(silhouette > 0.5)
    grid = np.zeros((h, w))
    gy, gx = np.mgrid[0:h, 0:w]
    if len(xs) == 0:
        centers = [(w / 2, h / 2)] * n_components
    else:
        picks = rng.integers(len(xs), size=n_components)
        centers = [(float(xs[i]), float(ys[i])) for i in picks]
    for cx, cy in centers:
        grid += np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2 * sigma**2))
    grid /= grid.sum()
    grid = (1 - floor) * grid + floor / (h * w)
    return SaliencyMap(grid).normalize()


def sample_fixation_sequence(
    sal: SaliencyMap,
    rng: np.random.Generator,
    n: int,
    ior_radius: float | None = DEFAULT_IOR_RADIUS,
    margin: int = 0,
) -> list[tuple[int, int]]:
    """Draw n fixations with IoR between draws, restricted to the margin."""
    grid = sal.grid.copy()
    h, w = grid.shape
    excluded = np.zeros((h, w), dtype=bool)
    if margin > 0:
        excluded[:] = True
        excluded[margin : h - margin, margin : w - margin] = False
    ys, xs = np.mgrid[0:h, 0:w]
    fixations: list[tuple[int, int]] = []
    for _ in range(n):
        eligible = grid.copy()
        eligible[excluded] = 0.0
        if eligible.sum() <= 0:
            if excluded.all():
                raise SaliencySamplingError(
                    "inhibition of return removed the whole grid"
                )
            eligible[~excluded] = 1.0
        fx, fy = saliency_sample_fixation(SaliencyMap(eligible).normalize(), rng)
        fixations.append((fx, fy))
        if ior_radius is not None:
            excluded |= (xs - fx) ** 2 + (ys - fy) ** 2 <= ior_radius**2
    return fixations


class SaccadeWorld:
    """Patch-sequence episodes over rendered sprite scenes."""

    conditioning_kind = "saccade"

    def __init__(
        self,
        resolution: int = DEFAULT_RESOLUTION,
        patch_size: int = DEFAULT_PATCH,
        ior_radius: float | None = DEFAULT_IOR_RADIUS,
        max_retries: int = 8,
    ):
        if patch_size >= resolution:
            raise ValueError("patch must be smaller than the scene")
        self.resolution = resolution
        self.patch_size = patch_size
        self.ior_radius = ior_radius
        self.max_retries = max_retries
        self.num_classes = NUM_CLASSES
        self._counter = 0

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (3, self.patch_size, self.patch_size)

    @property
    def action_dim(self) -> int:
        return 2

    @property
    def extent(self) -> int:
        return self.resolution - self.patch_size

    def describe(self) -> dict:
        return {
            "kind": "saccade",
            "resolution": self.resolution,
            "patch_size": self.patch_size,
            "ior_radius": self.ior_radius,
        }

    def _scene(self, rng: np.random.Generator) -> tuple[SpriteLatents, np.ndarray, SaliencyMap]:
        base = sample_base_latents(rng)
        # scenes are clean renders; appearance jitter stays at defaults
        lat = SpriteLatents(
            class_id=base.class_id,
            angle=base.angle,
            hue=base.hue,
            position=base.position,
            scale=base.scale,
        )
        img = render_sprite(lat, self.resolution)
        # dim uniform backdrop: off-object fixations never produce an
        # empty (all-zero) patch, yet carry no location information, so
        # path integration cannot shortcut through vision
        backdrop = np.array([0.10, 0.08, 0.12], dtype=np.float32)[
            :, None, None
        ] * np.ones((1, self.resolution, self.resolution), dtype=np.float32)
        coverage = img.max(axis=0, keepdims=True)
        img = np.clip(img + backdrop * (1.0 - coverage), 0.0, 1.0)
        sal = synthetic_saliency(img.max(axis=0), rng)
        return lat, img, sal

    def sample_episode(self, rng: np.random.Generator, M: int, source_id: int | None = None) -> Episode:
        ep, _, _ = self.sample_episode_debug(rng, M, source_id)
        return ep

    def sample_episode_debug(
        self, rng: np.random.Generator, M: int, source_id: int | None = None
    ) -> tuple[Episode, np.ndarray, SaliencyMap]:
        """Episode plus the underlying scene image and saliency map."""
        if M < 1:
            raise ValueError("M must be >= 1")
        lat, img, sal = self._scene(rng)
        half = self.patch_size // 2
        for attempt in range(self.max_retries + 1):
            try:
                fixations = sample_fixation_sequence(
                    sal, rng, M + 1, self.ior_radius, margin=half
                )
                break
            except SaliencySamplingError:
                if attempt == self.max_retries:
                    raise
        views = np.stack(
            [
                img[:, fy - half : fy + half, fx - half : fx + half]
                for fx, fy in fixations
            ]
        )
        latents = [
            FixationLatents(float(fx), float(fy), float(self.extent), lat.class_id)
            for fx, fy in fixations
        ]
        acts = [
            relative_action(latents[i], latents[i + 1], "saccade")
            for i in range(M)
        ]
        if source_id is None:
            source_id = self._counter
            self._counter += 1
        episode = Episode(
            views=views,
            actions=acts,
            latents=latents,
            cumulative_action=compose_actions(acts),
            source_id=source_id,
            class_id=lat.class_id,
        )
        return episode, img, sal
