"""Sprite world: convex polygon sprites under parameterized transformations.

Each class is a regular k-gon (k = class_id + 3). Views are anti-aliased
rasterizations at a configurable resolution; all transformation factors
are recorded exactly, so relative actions between views are known in
closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .actions import Action, compose_actions, relative_action, split_kind
from .episodes import Episode

NUM_CLASSES = 10
BASE_COLOR = np.array([0.70, 0.45, 0.35])
GRAY_AXIS = np.ones(3) / np.sqrt(3.0)

ANGLE_RANGE = (-np.pi / 2, np.pi / 2)
POSITION_RANGE = (-0.25, 0.25)
SCALE_RANGE = (0.8, 1.2)
ASPECT_RANGE = (0.9, 1.1)
BRIGHTNESS_RANGE = (0.7, 1.3)
CONTRAST_RANGE = (0.7, 1.3)
SATURATION_RANGE = (0.5, 1.5)
BLUR_RANGE = (0.0, 2.0)

# latent fields redrawn per view when the kind is conditioned
FACTORS_BY_KIND = {
    "rotation_quat": ("angle",),
    "hue_delta": ("hue",),
    "position_delta": ("position",),
    "crop_params": ("position", "scale", "aspect"),
    "jitter_params": ("brightness", "contrast", "saturation", "hue"),
    "blur_param": ("blur_sigma",),
}


@dataclass(frozen=True)
class SpriteLatents:
    class_id: int
    angle: float
    hue: float
    position: tuple[float, float]
    scale: float
    aspect: float = 1.0
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    blur_sigma: float = 0.0


def hue_rotation_matrix(hue: float) -> np.ndarray:
    """Rotation of RGB space about the gray axis by 2*pi*hue."""
    theta = 2.0 * np.pi * hue
    k = GRAY_AXIS
    kx = np.array(
        [[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]]
    )
    return np.eye(3) * np.cos(theta) + np.sin(theta) * kx + (
        1 - np.cos(theta)
    ) * np.outer(k, k)


from functools import lru_cache


@lru_cache(maxsize=8)
def _pixel_grid(resolution: int) -> tuple[np.ndarray, np.ndarray]:
    coords = ((np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0).astype(
        np.float32
    )
    px, py = np.meshgrid(coords, coords)  # py indexes rows
    return px, py


def _group_vertices(lats: list[SpriteLatents], k: int) -> np.ndarray:
    """Vertices for a group of same-class sprites; (n, k, 2)."""
    angle = np.array([l.angle for l in lats])[:, None]
    phi = angle + 2.0 * np.pi * np.arange(k)[None, :] / k
    r = 0.45 * np.array([l.scale for l in lats])[:, None]
    aspect = np.array([l.aspect for l in lats])[:, None]
    cx = POSITION_GAIN * np.array([l.position[0] for l in lats])[:, None]
    cy = POSITION_GAIN * np.array([l.position[1] for l in lats])[:, None]
    xs = cx + r * aspect * np.cos(phi)
    ys = cy + r / aspect * np.sin(phi)
    return np.stack([xs, ys], axis=2)


def _group_silhouettes(verts: np.ndarray, resolution: int) -> np.ndarray:
    """Anti-aliased coverage via convex signed distance; (n, H, W)."""
    px, py = _pixel_grid(resolution)
    verts = verts.astype(np.float32)
    centroid = verts.mean(axis=1, keepdims=True)
    edges = np.concatenate([verts[:, 1:], verts[:, :1]], axis=1) - verts
    normals = np.stack([edges[..., 1], -edges[..., 0]], axis=2)
    normals /= np.sqrt((normals**2).sum(axis=2, keepdims=True))
    inward = ((centroid - verts) * normals).sum(axis=2) > 0
    normals[inward] *= -1.0
    # signed distance of a convex polygon: max over edge half-planes
    d = (
        (px[None, None] - verts[..., 0, None, None]) * normals[..., 0, None, None]
        + (py[None, None] - verts[..., 1, None, None]) * normals[..., 1, None, None]
    )
    dist = d.max(axis=1)
    pixel = 2.0 / resolution
    return np.clip(0.5 - dist / pixel, 0.0, 1.0).astype(np.float32)


def _group_shading(lats: list[SpriteLatents], resolution: int) -> np.ndarray:
    """Orientation-locked brightness gradient across each sprite; (n, H, W).

    The gradient runs along the sprite's rotated local axis, so the full
    image identifies the angle even where the silhouette alone is
    rotationally symmetric. Scalar per pixel: it commutes with every
    color-space operation applied later.
    """
    px, py = _pixel_grid(resolution)
    theta = np.array([l.angle for l in lats], dtype=np.float32)[:, None, None]
    cx = POSITION_GAIN * np.array([l.position[0] for l in lats], dtype=np.float32)[:, None, None]
    cy = POSITION_GAIN * np.array([l.position[1] for l in lats], dtype=np.float32)[:, None, None]
    r = 0.45 * np.array([l.scale for l in lats], dtype=np.float32)[:, None, None]
    u = ((px[None] - cx) * np.cos(theta) + (py[None] - cy) * np.sin(theta)) / r
    return (0.25 + 0.75 * np.clip((u + 1.0) * 0.5, 0.0, 1.0)).astype(np.float32)


# Class marking: two darkened wedges at class-specific angles in the
# sprite's local frame, out of 8 angular slots. Codes share slots between
# neighboring classes, so a single visible wedge is ambiguous; resolving
# the class generally takes the pair.
WEDGE_SLOTS = 8
WEDGE_CODES = (
    (0, 1, 2, 3), (1, 2, 3, 4), (2, 3, 4, 5), (3, 4, 5, 6), (4, 5, 6, 7),
    (5, 6, 7, 0), (6, 7, 0, 1), (7, 0, 1, 2), (0, 1, 4, 5), (2, 3, 6, 7),
)
POSITION_GAIN = 1.0  # image units of offset per unit of normalized position
WEDGE_HALF_WIDTH = np.pi / WEDGE_SLOTS
LIGHT_FLOOR = 0.06


def _group_markings(lats: list[SpriteLatents], resolution: int) -> np.ndarray:
    """Class-coded wedge mask in the sprite's local frame; (n, H, W) in [0, 1]."""
    px, py = _pixel_grid(resolution)
    theta = np.array([l.angle for l in lats], dtype=np.float32)[:, None, None]
    cx = POSITION_GAIN * np.array([l.position[0] for l in lats], dtype=np.float32)[:, None, None]
    cy = POSITION_GAIN * np.array([l.position[1] for l in lats], dtype=np.float32)[:, None, None]
    psi = np.arctan2(py[None] - cy, px[None] - cx) - theta
    mask = np.zeros((len(lats), resolution, resolution), dtype=np.float32)
    slots = np.stack(
        [WEDGE_CODES[l.class_id % NUM_CLASSES] for l in lats]
    )  # (n, 4)
    for col in range(slots.shape[1]):
        # half-slot offset keeps every wedge clear of the orientation bar
        phi = (
            2.0 * np.pi * (slots[:, col] + 0.5) / WEDGE_SLOTS
        ).astype(np.float32)
        delta = np.abs(
            np.mod(psi - phi[:, None, None] + np.pi, 2.0 * np.pi) - np.pi
        )
        inside = np.clip(
            (WEDGE_HALF_WIDTH - delta) / (0.25 * WEDGE_HALF_WIDTH), 0.0, 1.0
        )
        mask = np.maximum(mask, inside)
    return mask.astype(np.float32)


MARKER_LENGTH = 0.95
MARKER_WIDTH = 0.4


def _group_marker(lats: list[SpriteLatents], resolution: int) -> np.ndarray:
    """Emissive orientation bar along the local +x axis; (n, H, W).

    A clock-hand stripe from the center toward the sprite's forward
    direction. It ignores shading and lighting, so the orientation stays
    readable even when most of the body sits in shadow.
    """
    px, py = _pixel_grid(resolution)
    theta = np.array([l.angle for l in lats], dtype=np.float32)[:, None, None]
    cx = POSITION_GAIN * np.array([l.position[0] for l in lats], dtype=np.float32)[:, None, None]
    cy = POSITION_GAIN * np.array([l.position[1] for l in lats], dtype=np.float32)[:, None, None]
    r = 0.45 * np.array([l.scale for l in lats], dtype=np.float32)[:, None, None]
    u = ((px[None] - cx) * np.cos(theta) + (py[None] - cy) * np.sin(theta)) / r
    v = (-(px[None] - cx) * np.sin(theta) + (py[None] - cy) * np.cos(theta)) / r
    aa = 2.0 / resolution
    along = np.minimum(u, MARKER_LENGTH - u) * r / aa + 0.5
    across = (MARKER_WIDTH - np.abs(v)) * r / aa + 0.5
    return np.clip(np.minimum(along, across), 0.0, 1.0).astype(np.float32)


def _group_lighting(lats: list[SpriteLatents], resolution: int) -> np.ndarray:
    """World-frame side lighting; (n, H, W).

    The light direction is fixed in the image frame, so which part of a
    sprite is visible depends on its current rotation. A single view only
    exposes the lit side's markings; views at other angles expose the
    rest.
    """
    px, _ = _pixel_grid(resolution)
    cx = POSITION_GAIN * np.array([l.position[0] for l in lats], dtype=np.float32)[:, None, None]
    r = 0.45 * np.array([l.scale for l in lats], dtype=np.float32)[:, None, None]
    u = (px[None] - cx) / r
    lit = np.clip((u + 1.0) * 0.5, 0.0, 1.0)
    body = (LIGHT_FLOOR + (1.0 - LIGHT_FLOOR) * lit).astype(np.float32)
    # narrow full-brightness window for the class wedges: a single view
    # exposes only the slots currently facing the light
    window = np.clip((u - (-0.25)) / 0.25, 0.0, 1.0).astype(np.float32)
    return body, window


_LUMA = np.array([0.299, 0.587, 0.114])
_CROSS_KC = np.cross(GRAY_AXIS, BASE_COLOR)
_K_KDOTC = GRAY_AXIS * float(GRAY_AXIS @ BASE_COLOR)


def _group_colors(lats: list[SpriteLatents]) -> np.ndarray:
    """Hue-rotated, jittered sprite colors; (n, 3)."""
    theta = 2.0 * np.pi * np.array([l.hue for l in lats])[:, None]
    color = (
        BASE_COLOR[None] * np.cos(theta)
        + _CROSS_KC[None] * np.sin(theta)
        + _K_KDOTC[None] * (1.0 - np.cos(theta))
    )
    luma = color @ _LUMA
    sat = np.array([l.saturation for l in lats])[:, None]
    color = luma[:, None] + sat * (color - luma[:, None])
    return color * np.array([l.brightness for l in lats])[:, None]


def render_batch(lats: list[SpriteLatents], resolution: int = 64) -> np.ndarray:
    """Rasterize many sprites at once; (n, 3, H, W) float32 in [0, 1]."""
    n = len(lats)
    out = np.empty((n, 3, resolution, resolution), dtype=np.float32)
    by_k: dict[int, list[int]] = {}
    for i, lat in enumerate(lats):
        by_k.setdefault(3 + (lat.class_id % NUM_CLASSES), []).append(i)
    for k, idxs in by_k.items():
        group = [lats[i] for i in idxs]
        sil = _group_silhouettes(_group_vertices(group, k), resolution)
        light, window = _group_lighting(group, resolution)
        body = _group_shading(group, resolution) * light
        colors = _group_colors(group).astype(np.float32)
        # class wedges flip the body to the complementary hue (reflection
        # through the gray axis, so it commutes with global hue rotation);
        # they render at full brightness but only inside the lit window,
        # so which slots are readable depends on the rotation
        wedge = _group_markings(group, resolution)[:, None] * window[:, None]
        axis = GRAY_AXIS.astype(np.float32)
        flipped = 2.0 * axis[None, :] * (colors * axis).sum(1, keepdims=True) - colors
        field = (
            body[:, None] * (1.0 - wedge) * colors[:, :, None, None]
            + wedge * flipped[:, :, None, None]
        )
        marker = _group_marker(group, resolution)[:, None]
        imgs = sil[:, None] * (
            (1.0 - marker) * field + marker * colors[:, :, None, None]
        )
        contrast = np.array([l.contrast for l in group], dtype=np.float32)
        if np.any(contrast != 1.0):
            imgs = contrast[:, None, None, None] * (imgs - 0.5) + np.float32(0.5)
        for j, lat in zip(range(len(group)), group):
            if lat.blur_sigma > 0.0:
                imgs[j] = gaussian_filter(
                    imgs[j], sigma=(0.0, lat.blur_sigma, lat.blur_sigma)
                )
        out[idxs] = imgs
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def render_sprite(lat: SpriteLatents, resolution: int = 64) -> np.ndarray:
    """Rasterize to a (3, H, W) float32 image with channels in [0, 1]."""
    return render_batch([lat], resolution)[0]


def sample_base_latents(
    rng: np.random.Generator,
    class_id: int | None = None,
    with_appearance: bool = False,
) -> SpriteLatents:
    """Base draw. Appearance factors (jitter, blur) stay at their neutral
    defaults unless requested; rendering them is only worth the cost when
    a codec conditions on them."""
    cid = int(rng.integers(NUM_CLASSES)) if class_id is None else class_id
    lat = SpriteLatents(
        class_id=cid,
        angle=float(rng.uniform(*ANGLE_RANGE)),
        hue=float(rng.uniform(0.0, 1.0)),
        position=(
            float(rng.uniform(*POSITION_RANGE)),
            float(rng.uniform(*POSITION_RANGE)),
        ),
        scale=float(rng.uniform(*SCALE_RANGE)),
        aspect=float(rng.uniform(*ASPECT_RANGE)),
    )
    if with_appearance:
        lat = replace(
            lat,
            brightness=float(rng.uniform(*BRIGHTNESS_RANGE)),
            contrast=float(rng.uniform(*CONTRAST_RANGE)),
            saturation=float(rng.uniform(*SATURATION_RANGE)),
            blur_sigma=float(rng.uniform(*BLUR_RANGE)),
        )
    return lat


def _redraw_factors(lat: SpriteLatents, kinds: list[str], rng: np.random.Generator) -> SpriteLatents:
    fields: dict = {}
    touched = set()
    for kind in kinds:
        touched.update(FACTORS_BY_KIND[kind])
    if "angle" in touched:
        fields["angle"] = float(rng.uniform(*ANGLE_RANGE))
    if "hue" in touched:
        fields["hue"] = float(rng.uniform(0.0, 1.0))
    if "position" in touched:
        fields["position"] = (
            float(rng.uniform(*POSITION_RANGE)),
            float(rng.uniform(*POSITION_RANGE)),
        )
    if "scale" in touched:
        fields["scale"] = float(rng.uniform(*SCALE_RANGE))
    if "aspect" in touched:
        fields["aspect"] = float(rng.uniform(*ASPECT_RANGE))
    if "brightness" in touched:
        fields["brightness"] = float(rng.uniform(*BRIGHTNESS_RANGE))
    if "contrast" in touched:
        fields["contrast"] = float(rng.uniform(*CONTRAST_RANGE))
    if "saturation" in touched:
        fields["saturation"] = float(rng.uniform(*SATURATION_RANGE))
    if "blur_sigma" in touched:
        fields["blur_sigma"] = float(rng.uniform(*BLUR_RANGE))
    return replace(lat, **fields)


class SpriteWorld:
    """Episode source over rendered sprites.

    Only factors named by ``conditioning_kind`` vary within an episode;
    everything else is frozen at the episode's base draw. The composite
    form "a+b" conditions several factors at once.
    """

    def __init__(self, conditioning_kind: str = "rotation_quat", resolution: int = 64):
        self.conditioning_kind = conditioning_kind
        self.kinds = split_kind(conditioning_kind)
        bad = [k for k in self.kinds if k == "saccade"]
        if bad:
            raise ValueError("saccade actions belong to the saccade world")
        self.resolution = resolution
        self.num_classes = NUM_CLASSES
        self._counter = 0

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (3, self.resolution, self.resolution)

    @property
    def action_dim(self) -> int:
        from .actions import action_dim

        return action_dim(self.conditioning_kind)

    def describe(self) -> dict:
        return {
            "kind": "sprite",
            "conditioning": self.conditioning_kind,
            "resolution": self.resolution,
        }

    def sample_episode(self, rng: np.random.Generator, M: int, source_id: int | None = None) -> Episode:
        if M < 1:
            raise ValueError("M must be >= 1")
        # base draw fixes the non-conditioned factors; redrawing the
        # conditioned ones per view makes them independent across views
        needs_appearance = bool(
            {"jitter_params", "blur_param"} & set(self.kinds)
        )
        base = sample_base_latents(rng, with_appearance=needs_appearance)
        latents = [
            _redraw_factors(base, self.kinds, rng) for _ in range(M + 1)
        ]
        views = render_batch(latents, self.resolution)
        acts = [
            relative_action(latents[i], latents[i + 1], self.conditioning_kind)
            for i in range(M)
        ]
        if source_id is None:
            source_id = self._counter
            self._counter += 1
        return Episode(
            views=views,
            actions=acts,
            latents=latents,
            cumulative_action=compose_actions(acts),
            source_id=source_id,
            class_id=base.class_id,
        )

    def sample_episode_batch(
        self, rngs: list[np.random.Generator], M: int
    ) -> list[Episode]:
        """Batch of episodes with all views rasterized in one pass.

        Produces exactly the episodes that per-episode sample_episode
        calls with the same generators would.
        """
        needs_appearance = bool(
            {"jitter_params", "blur_param"} & set(self.kinds)
        )
        all_latents: list[list[SpriteLatents]] = []
        for rng in rngs:
            base = sample_base_latents(rng, with_appearance=needs_appearance)
            all_latents.append(
                [_redraw_factors(base, self.kinds, rng) for _ in range(M + 1)]
            )
        flat = [lat for lats in all_latents for lat in lats]
        views = render_batch(flat, self.resolution)
        episodes = []
        for b, latents in enumerate(all_latents):
            acts = [
                relative_action(
                    latents[i], latents[i + 1], self.conditioning_kind
                )
                for i in range(M)
            ]
            episodes.append(
                Episode(
                    views=views[b * (M + 1) : (b + 1) * (M + 1)],
                    actions=acts,
                    latents=latents,
                    cumulative_action=compose_actions(acts),
                    source_id=self._counter + b,
                    class_id=latents[0].class_id,
                )
            )
        self._counter += len(rngs)
        return episodes

    def resample_view(self, lat: SpriteLatents, rng: np.random.Generator) -> tuple[SpriteLatents, np.ndarray]:
        """Fresh conditioned factors on the same base sample (distractors)."""
        new = _redraw_factors(lat, self.kinds, rng)
        return new, render_sprite(new, self.resolution)

    def render(self, lat: SpriteLatents) -> np.ndarray:
        return render_sprite(lat, self.resolution)
