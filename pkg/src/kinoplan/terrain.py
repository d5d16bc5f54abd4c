"""1-D terrain profiles and the synthetic forward depth scan.

A profile is a piecewise-linear floor polyline over horizontal position s
(near-vertical risers encoded as double breakpoints), optionally with a
ceiling slab for crawl sections. Difficulty levels 0..8 scale the defining
parameter of each kind linearly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

TERRAIN_KINDS = ("flat", "slope", "stairs", "gap", "crawl")
MAX_LEVEL = 8

X_MIN = -3.0
X_MAX = 12.0
_RISER = 1e-9   # horizontal extent of a "vertical" riser segment
_SKY = 1e9


def slope_angle_deg(level: int) -> float:
    return 5.0 + level * 25.0 / MAX_LEVEL


def step_rise(level: int) -> float:
    return 0.05 + level * 0.20 / MAX_LEVEL


def gap_width(level: int) -> float:
    return 0.10 + level * 0.70 / MAX_LEVEL


def crawl_clearance(level: int, standing_top: float = 0.6) -> float:
    return standing_top * (1.0 - 0.4 * level / MAX_LEVEL)


def difficulty_parameter(kind: str, level: int) -> float:
    """The level-defining scalar, oriented so harder is larger."""
    if kind == "flat":
        return 0.0
    if kind == "slope":
        return slope_angle_deg(level)
    if kind == "stairs":
        return step_rise(level)
    if kind == "gap":
        return gap_width(level)
    if kind == "crawl":
        return -crawl_clearance(level)  # lower clearance is harder
    raise ConfigError("terrain_kind", f"unknown kind '{kind}'")


@dataclass
class TerrainProfile:
    kind: str
    level: int
    floor_x: np.ndarray
    floor_z: np.ndarray
    ceiling_x: np.ndarray | None = None
    ceiling_z: np.ndarray | None = None
    discontinuities: np.ndarray = field(default_factory=lambda: np.zeros(0))
    goal_x: float = 8.0
    fall_z: float = -0.3

    def floor_height(self, s):
        return np.interp(s, self.floor_x, self.floor_z)

    def ceiling_height(self, s):
        if self.ceiling_x is None:
            return np.full_like(np.asarray(s, dtype=np.float64), _SKY)
        return np.interp(s, self.ceiling_x, self.ceiling_z, left=_SKY, right=_SKY)

    def segments(self) -> np.ndarray:
        """All surfaces as (S, 4) rows (x0, z0, x1, z1) for ray casting."""
        segs = []
        for i in range(len(self.floor_x) - 1):
            segs.append((self.floor_x[i], self.floor_z[i],
                         self.floor_x[i + 1], self.floor_z[i + 1]))
        if self.ceiling_x is not None:
            cx, cz = self.ceiling_x, self.ceiling_z
            for i in range(len(cx) - 1):
                segs.append((cx[i], cz[i], cx[i + 1], cz[i + 1]))
            # slab side walls so forward rays see the obstacle face
            wall = 2.5
            segs.append((cx[0], cz[0], cx[0], cz[0] + wall))
            segs.append((cx[-1], cz[-1], cx[-1], cz[-1] + wall))
        return np.asarray(segs, dtype=np.float64)

    def export_csv(self, path, ds: float = 0.05):
        s = np.arange(X_MIN, X_MAX + ds, ds)
        floor = self.floor_height(s)
        ceil = self.ceiling_height(s)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["s", "floor", "ceiling"])
            for si, fi, ci in zip(s, floor, ceil):
                w.writerow([f"{si:.6f}", f"{fi:.6f}", "" if ci >= _SKY else f"{ci:.6f}"])


def _flat_points() -> tuple[list, list]:
    return [X_MIN, X_MAX], [0.0, 0.0]


def build_terrain(kind: str, level: int, rng: np.random.Generator | None = None,
                  jitter: bool = False) -> TerrainProfile:
    if kind not in TERRAIN_KINDS:
        raise ConfigError("terrain_kind", f"unknown kind '{kind}' (choose from {TERRAIN_KINDS})")
    if not 0 <= level <= MAX_LEVEL:
        raise ConfigError("terrain_level", f"level {level} outside 0..{MAX_LEVEL}")
    jit = (lambda a: float(rng.uniform(-a, a))) if (jitter and rng is not None) else (lambda a: 0.0)

    if kind == "flat":
        xs, zs = _flat_points()
        return TerrainProfile(kind, level, np.array(xs), np.array(zs))

    if kind == "slope":
        angle = np.deg2rad(slope_angle_deg(level))
        peak_x = 4.0 + jit(0.2)
        peak_z = peak_x * np.tan(angle)
        xs = [X_MIN, 0.0, peak_x, 8.0, X_MAX]
        zs = [0.0, 0.0, peak_z, 0.0, 0.0]
        return TerrainProfile(kind, level, np.array(xs), np.array(zs))

    if kind == "stairs":
        rise, run, n_steps = step_rise(level), 0.4, 5
        x0 = 1.0 + jit(0.2)
        xs, zs = [X_MIN], [0.0]
        disc = []
        z = 0.0
        x = x0
        for _ in range(n_steps):          # ascend
            xs += [x, x + _RISER]
            zs += [z, z + rise]
            disc.append(x)
            z += rise
            x += run
        x += 1.0                          # plateau
        for _ in range(n_steps):          # descend
            xs += [x, x + _RISER]
            zs += [z, z - rise]
            disc.append(x)
            z -= rise
            x += run
        xs += [X_MAX]
        zs += [0.0]
        return TerrainProfile(kind, level, np.array(xs), np.array(zs),
                              discontinuities=np.array(disc))

    if kind == "gap":
        width, depth = gap_width(level), -1.0
        centers = [2.5 + jit(0.3), 5.5 + jit(0.3)]
        xs, zs = [X_MIN], [0.0]
        disc = []
        for c in centers:
            gs, ge = c - width / 2.0, c + width / 2.0
            xs += [gs, gs + _RISER, ge, ge + _RISER]
            zs += [0.0, depth, depth, 0.0]
            disc += [gs, ge]
        xs += [X_MAX]
        zs += [0.0]
        return TerrainProfile(kind, level, np.array(xs), np.array(zs),
                              discontinuities=np.array(disc), fall_z=-0.3)

    # crawl: flat floor with a low slab over the middle section
    clearance = crawl_clearance(level)
    xs, zs = _flat_points()
    start = 3.0 + jit(0.3)
    end = start + 2.0
    return TerrainProfile(kind, level, np.array(xs), np.array(zs),
                          ceiling_x=np.array([start, end]),
                          ceiling_z=np.array([clearance, clearance]))


def raycast(origin, angles, segments: np.ndarray, max_range: float) -> np.ndarray:
    """Distance along each ray to the first segment hit, clamped to max_range.

    origin: (2,); angles: (K,) absolute ray angles; segments: (S, 4).
    """
    origin = np.asarray(origin, dtype=np.float64)
    angles = np.asarray(angles, dtype=np.float64)
    if segments.size == 0:
        return np.full(angles.shape, max_range)
    d = np.stack([np.cos(angles), np.sin(angles)], axis=-1)        # (K, 2)
    p = segments[:, 0:2]                                           # (S, 2)
    e = segments[:, 2:4] - p                                       # (S, 2)
    rel = p - origin                                               # (S, 2)

    denom = d[:, None, 0] * e[None, :, 1] - d[:, None, 1] * e[None, :, 0]   # (K, S)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (rel[None, :, 0] * e[None, :, 1] - rel[None, :, 1] * e[None, :, 0]) / denom
        u = (rel[None, :, 0] * d[:, None, 1] - rel[None, :, 1] * d[:, None, 0]) / denom
    valid = (np.abs(denom) > 1e-12) & (t > 1e-9) & (u >= 0.0) & (u <= 1.0)
    t = np.where(valid, t, np.inf)
    return np.minimum(t.min(axis=1), max_range)


def render_depth_scan(x_state, terrain: TerrainProfile, k: int, max_range: float,
                      fan_lo_deg: float = -80.0, fan_hi_deg: float = 30.0) -> np.ndarray:
    """Cast a forward fan of k rays from the body center, pitched with the body."""
    x_state = np.asarray(x_state, dtype=np.float64)
    origin = x_state[0:2]
    pitch = x_state[2]
    angles = pitch + np.deg2rad(np.linspace(fan_lo_deg, fan_hi_deg, k))
    return raycast(origin, angles, terrain.segments(), max_range)
