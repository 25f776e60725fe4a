"""Procedural "toy face" source domain.

A scene is a flat background plus an anti-aliased ellipse face with two disc
eyes and a mouth bar. Scenes are parameterized in a fixed base canvas of
32x32 pixel units; rendering at 16/64 scales all geometry proportionally.
Anti-aliasing is 2x supersampled rasterization followed by a box downsample,
so shapes have smooth-enough edges for gradient-based inversion.

Entities (hat, eye patch) are pasted after stylization with hard pixel
edges, which keeps the entity mask exact and lets entity pixels carry the
entity's own colors rather than the reference style.
"""

from __future__ import annotations

import colorsys
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .rng import np_gen

BASE_RES = 32
VALID_RESOLUTIONS = (16, 32, 64)

STYLE_PRESETS = ("identity", "sepia", "posterize", "cool")
ENTITY_PRESETS = ("hat", "patch")

_EYE_COLOR = np.array([0.10, 0.10, 0.16])
_MOUTH_COLOR = np.array([0.55, 0.16, 0.18])
_FACE_LIGHT = np.array([0.95, 0.82, 0.70])
_FACE_DARK = np.array([0.60, 0.42, 0.30])
_HAT_CROWN = np.array([0.16, 0.20, 0.55])
_HAT_BAND = np.array([0.70, 0.15, 0.15])
_PATCH_COLOR = np.array([0.06, 0.06, 0.07])


@dataclass
class SceneParams:
    """Geometry and palette of one scene, in base-canvas (32px) units."""

    background_hue: float
    face_center: tuple[float, float]
    face_axes: tuple[float, float]
    eye_offset: tuple[float, float]
    eye_radius: float
    mouth_offset_y: float
    mouth_width: float
    palette_id: float

    def validate(self) -> None:
        cx, cy = self.face_center
        ax, ay = self.face_axes
        if not (ax >= 4.0 and ay >= 4.0):
            raise ValueError(f"face_axes must be >= 4 px, got {self.face_axes}")
        if self.eye_radius <= 0:
            raise ValueError("eye_radius must be positive")
        if cx - ax < 0 or cx + ax > BASE_RES or cy - ay < 0 or cy + ay > BASE_RES:
            raise ValueError("face ellipse leaves the canvas")
        for v in (self.background_hue, self.palette_id):
            if not 0.0 <= v <= 1.0:
                raise ValueError("background_hue and palette_id must lie in [0,1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneParams":
        return cls(
            background_hue=float(d["background_hue"]),
            face_center=tuple(d["face_center"]),
            face_axes=tuple(d["face_axes"]),
            eye_offset=tuple(d["eye_offset"]),
            eye_radius=float(d["eye_radius"]),
            mouth_offset_y=float(d["mouth_offset_y"]),
            mouth_width=float(d["mouth_width"]),
            palette_id=float(d["palette_id"]),
        )


@dataclass
class Landmarks:
    """Left eye, right eye, mouth center, face center (rows), base-px units."""

    points: np.ndarray  # (4, 2) float64, (x, y)


@dataclass
class Reference:
    """One-shot reference: image in [0,1] plus binary entity mask."""

    image: np.ndarray  # (H, W, 3) float32 in [0,1]
    mask: np.ndarray  # (H, W) float32, exactly 0 or 1

    def __post_init__(self) -> None:
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError("image and mask resolutions differ")
        vals = np.unique(self.mask)
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise ValueError("mask values must be exactly 0 or 1")

    @property
    def has_entity(self) -> bool:
        return bool(self.mask.sum() > 0)


def _unit_to_range(u: np.ndarray | float, lo, hi):
    """Map u in [0,1] (or [-1,1] already squashed to [0,1]) into [lo, hi]."""
    return lo + (hi - lo) * u


N_SCENE_COORDS = 11


def _params_from_unit(u: np.ndarray) -> SceneParams:
    """Build valid SceneParams from 11 coordinates in [0,1].

    Axes are drawn first; the center range is then chosen so the ellipse
    always stays inside the canvas, which keeps every draw valid by
    construction.
    """
    ax = _unit_to_range(u[0], 7.0, 11.0)
    ay = _unit_to_range(u[1], 8.0, 12.0)
    cx = _unit_to_range(u[2], max(ax + 1.0, 13.0), min(BASE_RES - ax - 1.0, 19.0))
    cy = _unit_to_range(u[3], max(ay + 1.0, 13.0), min(BASE_RES - ay - 1.0, 19.0))
    ox = _unit_to_range(u[4], 0.38 * ax, 0.58 * ax)
    oy = _unit_to_range(u[5], -0.42 * ay, -0.18 * ay)
    r_hi = min(2.3, 0.85 * ax - ox)
    eye_r = _unit_to_range(u[6], 1.3, r_hi)
    mouth_dy = _unit_to_range(u[7], 0.30 * ay, 0.55 * ay)
    mouth_w = _unit_to_range(u[8], 0.70 * ax, 1.20 * ax)
    return SceneParams(
        background_hue=float(u[9]),
        face_center=(float(cx), float(cy)),
        face_axes=(float(ax), float(ay)),
        eye_offset=(float(ox), float(oy)),
        eye_radius=float(eye_r),
        mouth_offset_y=float(mouth_dy),
        mouth_width=float(mouth_w),
        palette_id=float(u[10]),
    )


def sample_params(seed: int) -> SceneParams:
    """Uniform draw over the valid parameter box, deterministic per seed."""
    u = np_gen(seed, "scene").uniform(0.0, 1.0, size=N_SCENE_COORDS)
    p = _params_from_unit(u)
    p.validate()
    return p


class ParamMap:
    """Fixed smooth map from noise vectors to scene parameters.

    A seeded linear map squashed by tanh drives the same range construction
    as sample_params, so generator pretraining has a differentiable-in-z,
    deterministic ground truth for every noise draw.
    """

    def __init__(self, noise_dim: int, seed: int):
        self.noise_dim = noise_dim
        rng = np_gen(seed, "param-map")
        self._w = rng.normal(0.0, 1.0, size=(N_SCENE_COORDS, noise_dim)) / np.sqrt(noise_dim)
        self._b = rng.normal(0.0, 0.3, size=N_SCENE_COORDS)

    def __call__(self, z: np.ndarray) -> SceneParams:
        z = np.asarray(z, dtype=np.float64).reshape(-1)
        if z.shape[0] != self.noise_dim:
            raise ValueError(f"expected {self.noise_dim}-dim noise, got {z.shape[0]}")
        u = 0.5 * (np.tanh(self._w @ z + self._b) + 1.0)
        p = _params_from_unit(u)
        p.validate()
        return p

    def mixed(self, z_geom: np.ndarray, z_color: np.ndarray) -> SceneParams:
        """Geometry from one noise vector, palette/background from another."""
        geom = self(z_geom)
        color = self(z_color)
        return dataclasses.replace(
            geom, background_hue=color.background_hue, palette_id=color.palette_id
        )


def landmarks_of(params: SceneParams) -> Landmarks:
    cx, cy = params.face_center
    ox, oy = params.eye_offset
    pts = np.array(
        [
            [cx - ox, cy + oy],
            [cx + ox, cy + oy],
            [cx, cy + params.mouth_offset_y],
            [cx, cy],
        ],
        dtype=np.float64,
    )
    return Landmarks(points=pts)


def _face_color(palette_id: float) -> np.ndarray:
    return _FACE_LIGHT + (_FACE_DARK - _FACE_LIGHT) * palette_id


def _background_color(hue: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(hue % 1.0, 0.35, 0.82))


def render(params: SceneParams, resolution: int = BASE_RES) -> np.ndarray:
    """Rasterize a scene to (H, W, 3) float32 in [0,1]."""
    if resolution not in VALID_RESOLUTIONS:
        raise ValueError(f"resolution must be one of {VALID_RESOLUTIONS}")
    params.validate()
    s = resolution / BASE_RES
    ss = 2 * resolution
    # subsample centers, in render-pixel units
    coords = (np.arange(ss) + 0.5) / 2.0
    X, Y = np.meshgrid(coords, coords)

    cx, cy = params.face_center[0] * s, params.face_center[1] * s
    ax, ay = params.face_axes[0] * s, params.face_axes[1] * s
    ox, oy = params.eye_offset[0] * s, params.eye_offset[1] * s
    eye_r = params.eye_radius * s
    mouth_y = cy + params.mouth_offset_y * s
    mouth_hw = 0.5 * params.mouth_width * s
    mouth_hh = 0.8 * s

    canvas = np.empty((ss, ss, 3), dtype=np.float64)
    canvas[:] = _background_color(params.background_hue)

    face = ((X - cx) / ax) ** 2 + ((Y - cy) / ay) ** 2 <= 1.0
    canvas[face] = _face_color(params.palette_id)

    for ex in (cx - ox, cx + ox):
        eye = (X - ex) ** 2 + (Y - (cy + oy)) ** 2 <= eye_r**2
        canvas[eye] = _EYE_COLOR

    mouth = (np.abs(X - cx) <= mouth_hw) & (np.abs(Y - mouth_y) <= mouth_hh)
    canvas[mouth] = _MOUTH_COLOR

    # 2x2 box downsample
    img = canvas.reshape(resolution, 2, resolution, 2, 3).mean(axis=(1, 3))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _apply_style(img: np.ndarray, style: str) -> np.ndarray:
    if style == "identity":
        return img.copy()
    if style == "sepia":
        lum = img @ np.array([0.299, 0.587, 0.114])
        return np.clip(lum[..., None] * np.array([1.25, 1.02, 0.65]), 0.0, 1.0)
    if style == "posterize":
        return np.clip(np.floor(img * 4.0) / 3.0, 0.0, 1.0)
    if style == "cool":
        m = np.array(
            [
                [0.55, 0.05, 0.25],
                [0.05, 0.70, 0.30],
                [0.10, 0.20, 0.75],
            ]
        )
        return np.clip(img @ m.T, 0.0, 1.0)
    raise ValueError(f"unknown style preset {style!r}; choose from {STYLE_PRESETS}")


def _entity_pixels(params: SceneParams, entity: str, resolution: int):
    """Hard pixel mask plus colors for an entity, at render resolution."""
    s = resolution / BASE_RES
    grid = np.arange(resolution) + 0.5  # pixel centers, render units
    X, Y = np.meshgrid(grid, grid)
    cx, cy = params.face_center[0] * s, params.face_center[1] * s
    ax, ay = params.face_axes[0] * s, params.face_axes[1] * s

    colors = np.zeros((resolution, resolution, 3), dtype=np.float64)
    if entity == "hat":
        top = cy - ay
        y_lo = max(0.5, top - 6.5 * s)
        y_hi = top - 0.5 * s
        half_w = 0.80 * ax
        inside = (np.abs(X - cx) <= half_w) & (Y >= y_lo) & (Y <= y_hi)
        band = inside & (Y >= y_hi - 2.0 * s)
        colors[inside] = _HAT_CROWN
        colors[band] = _HAT_BAND
        return inside, colors
    if entity == "patch":
        ox, oy = params.eye_offset[0] * s, params.eye_offset[1] * s
        r = params.eye_radius * 1.9 * s + 0.8 * s
        inside = (X - (cx - ox)) ** 2 + (Y - (cy + oy)) ** 2 <= r**2
        colors[inside] = _PATCH_COLOR
        return inside, colors
    raise ValueError(f"unknown entity preset {entity!r}; choose from {ENTITY_PRESETS}")


def make_reference(
    params: SceneParams,
    style: str = "identity",
    entity: str | None = None,
    resolution: int = BASE_RES,
) -> Reference:
    """Styled render plus exact entity mask; entity=None gives an all-zero mask."""
    img = _apply_style(render(params, resolution), style)
    mask = np.zeros((resolution, resolution), dtype=np.float32)
    if entity is not None:
        inside, colors = _entity_pixels(params, entity, resolution)
        img = np.where(inside[..., None], colors, img)
        mask[inside] = 1.0
    return Reference(image=img.astype(np.float32), mask=mask)


# ---------------------------------------------------------------------------
# File I/O: 8-bit PNGs plus JSON sidecars
# ---------------------------------------------------------------------------


def write_image_png(path: str | Path, img: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(str(path), format="PNG")


def read_image_png(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(str(path)).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def write_mask_png(path: str | Path, mask: np.ndarray) -> None:
    arr = (np.asarray(mask) > 0.5).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(str(path), format="PNG")


def read_mask_png(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(str(path)).convert("L"), dtype=np.float32)
    return (arr > 127.5).astype(np.float32)


def write_scene_sidecar(path: str | Path, params: SceneParams) -> None:
    payload = {
        "params": params.to_dict(),
        "landmarks": landmarks_of(params).points.tolist(),
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
