"""Polarization events from a rotating linear polarizer in front of an event camera.

Scenes are analytic (planes, sphere caps, ramps) so that ground-truth normals
are exact.  Radiance follows the diffuse polarization model: the intensity seen
through a polarizer at angle ``phi`` is

    I(phi) = I_un / 2 * (1 + rho(theta, n) * cos(2 phi - 2 alpha))

and the camera fires an event every time the log intensity drifts one contrast
threshold away from its per-pixel reference level.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SimulationError",
    "Event",
    "EventStream",
    "Scene",
    "SimulatorConfig",
    "normal_from_angles",
    "normals_from_angles",
    "degree_of_polarization",
    "polarized_intensity",
    "log_intensity_to_events",
    "simulate_events",
    "plane_scene",
    "sphere_cap_scene",
    "ramp_scene",
    "composite_scene",
    "random_composite_scene",
]

DEFAULT_LIGHT = (0.35, -0.25, 1.0)


class SimulationError(RuntimeError):
    """Raised when a scene cannot be simulated (e.g. non-positive radiance)."""


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    t: int
    p: int

    def __post_init__(self):
        if self.p not in (-1, 1):
            raise ValueError(f"polarity must be -1 or +1, got {self.p}")
        if self.x < 0 or self.y < 0 or self.t < 0:
            raise ValueError("event coordinates and timestamp must be non-negative")


@dataclass
class EventStream:
    """Time-sorted events stored column-wise.

    ``t`` is in microseconds; the window is ``[t0, t0 + duration]``.
    """

    width: int
    height: int
    duration: int
    x: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint16))
    y: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint16))
    t: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    p: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int8))
    t0: int = 0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.uint16)
        self.y = np.asarray(self.y, dtype=np.uint16)
        self.t = np.asarray(self.t, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.int8)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event columns must have equal length")
        if n:
            if np.any(np.diff(self.t) < 0):
                raise ValueError("events must be sorted by timestamp")
            if self.x.max() >= self.width or self.y.max() >= self.height:
                raise ValueError("event outside the sensor")
            if not np.all(np.abs(self.p) == 1):
                raise ValueError("polarity must be -1 or +1")
            if self.t[0] < self.t0 or self.t[-1] > self.t0 + self.duration:
                raise ValueError("event timestamp outside the stream window")

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self):
        for x, y, t, p in zip(self.x, self.y, self.t, self.p):
            yield Event(int(x), int(y), int(t), int(p))

    @classmethod
    def from_events(cls, events, width: int, height: int, duration: int, t0: int = 0) -> "EventStream":
        events = sorted(events, key=lambda e: e.t)
        cols = np.array([(e.x, e.y, e.t, e.p) for e in events], dtype=np.int64).reshape(-1, 4)
        return cls(width, height, duration, cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3], t0=t0)

    def counts(self) -> np.ndarray:
        """Per-pixel event count as an ``(H, W)`` integer image."""
        out = np.zeros((self.height, self.width), dtype=np.int64)
        np.add.at(out, (self.y.astype(np.intp), self.x.astype(np.intp)), 1)
        return out


@dataclass
class Scene:
    """Per-pixel ground truth for one analytic scene.

    ``azimuth`` in [0, 2 pi), ``zenith`` in [0, pi/2], ``intensity`` is the
    unpolarized radiance (strictly positive).  ``mask`` marks pixels whose
    normal is meaningful.
    """

    kind: str
    azimuth: np.ndarray
    zenith: np.ndarray
    intensity: np.ndarray
    refractive_index: float = 1.5
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.azimuth = np.mod(np.asarray(self.azimuth, dtype=np.float64), 2 * np.pi)
        self.zenith = np.asarray(self.zenith, dtype=np.float64)
        self.intensity = np.asarray(self.intensity, dtype=np.float64)
        if self.mask is None:
            self.mask = np.ones(self.zenith.shape, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if not (self.azimuth.shape == self.zenith.shape == self.intensity.shape == self.mask.shape):
            raise ValueError("scene layers must share one (H, W) shape")
        if np.any(self.zenith < 0) or np.any(self.zenith > np.pi / 2 + 1e-12):
            raise ValueError("zenith must lie in [0, pi/2]")
        if np.any(self.intensity <= 0):
            raise ValueError("unpolarized intensity must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.zenith.shape

    def normals(self) -> np.ndarray:
        """Ground-truth normals ``(3, H, W)``; invalid pixels are zeroed."""
        n = normals_from_angles(self.azimuth, self.zenith)
        return n * self.mask

    def intensity_at(self, polarizer_angle: float) -> np.ndarray:
        return polarized_intensity(self.intensity, self.azimuth, self.zenith,
                                   polarizer_angle, self.refractive_index)


@dataclass
class SimulatorConfig:
    contrast_threshold: float = 0.05
    angular_speed: float = math.pi / 10_000.0  # rad/us: half a turn in 10 ms
    total_rotation: float = math.pi
    step: float = math.pi / 180.0
    noise_seed: int | None = None
    threshold_jitter: float = 0.0  # relative std of per-crossing threshold

    def __post_init__(self):
        if self.contrast_threshold <= 0:
            raise ValueError("contrast threshold must be positive")
        if self.step <= 0 or self.step > self.total_rotation:
            raise ValueError("sampling step must be in (0, total_rotation]")
        if self.angular_speed <= 0:
            raise ValueError("angular speed must be positive")
        if self.threshold_jitter < 0:
            raise ValueError("threshold jitter must be non-negative")

    @property
    def duration(self) -> int:
        return int(round(self.total_rotation / self.angular_speed))


def normal_from_angles(azimuth: float, zenith: float) -> tuple[float, float, float]:
    if not 0.0 <= zenith <= math.pi / 2:
        raise ValueError(f"zenith {zenith} outside [0, pi/2]")
    s = math.sin(zenith)
    return (s * math.cos(azimuth), s * math.sin(azimuth), math.cos(zenith))


def normals_from_angles(azimuth, zenith) -> np.ndarray:
    """Vectorized :func:`normal_from_angles`; returns ``(3, ...)``."""
    azimuth = np.asarray(azimuth, dtype=np.float64)
    zenith = np.asarray(zenith, dtype=np.float64)
    if np.any(zenith < 0) or np.any(zenith > np.pi / 2 + 1e-12):
        raise ValueError("zenith outside [0, pi/2]")
    s = np.sin(zenith)
    return np.stack([s * np.cos(azimuth), s * np.sin(azimuth), np.cos(zenith)])


def degree_of_polarization(zenith, refractive_index: float = 1.5):
    """Diffuse degree of linear polarization for a dielectric of index ``n``."""
    n = refractive_index
    s2 = np.sin(zenith) ** 2
    num = (n - 1.0 / n) ** 2 * s2
    den = 2.0 + 2.0 * n * n - (n + 1.0 / n) ** 2 * s2 + 4.0 * np.cos(zenith) * np.sqrt(n * n - s2)
    return num / den


def polarized_intensity(unpolarized, azimuth, zenith, polarizer_angle, refractive_index: float = 1.5):
    rho = degree_of_polarization(zenith, refractive_index)
    return 0.5 * np.asarray(unpolarized) * (1.0 + rho * np.cos(2.0 * polarizer_angle - 2.0 * np.asarray(azimuth)))


def log_intensity_to_events(log_intensity: np.ndarray, times: np.ndarray, threshold: float,
                            rng: np.random.Generator | None = None, jitter: float = 0.0):
    """Threshold-crossing event generation on sampled log-intensity traces.

    ``log_intensity`` is ``(K, H, W)`` sampled at ``times`` (``K`` samples).
    Between samples the trace is linear; each time it moves ``threshold``
    away from the pixel's reference level an event fires at the interpolated
    crossing time and the reference moves by one threshold.

    Returns ``(t, y, x, p)`` arrays in generation order (float times).
    """
    L = np.asarray(log_intensity, dtype=np.float64)
    if L.ndim != 3 or L.shape[0] != len(times):
        raise ValueError("log_intensity must be (K, H, W) matching times")
    ref = L[0].copy()
    h, w = ref.shape
    yy, xx = np.mgrid[0:h, 0:w]
    tol = 1e-9 * threshold

    def draw(shape):
        if jitter and rng is not None:
            return threshold * np.maximum(1.0 + jitter * rng.standard_normal(shape), 0.1)
        return np.full(shape, threshold)

    level = draw((h, w))
    out_t, out_y, out_x, out_p = [], [], [], []
    for k in range(1, L.shape[0]):
        a, b = L[k - 1], L[k]
        ta, tb = times[k - 1], times[k]
        slope = b - a
        while True:
            diff = b - ref
            fire = np.abs(diff) >= level - tol
            if not fire.any():
                break
            sign = np.sign(diff[fire])
            target = ref[fire] + sign * level[fire]
            dl = slope[fire]
            with np.errstate(divide="ignore", invalid="ignore"):
                frac = np.where(dl != 0, (target - a[fire]) / dl, 1.0)
            frac = np.clip(frac, 0.0, 1.0)
            out_t.append(ta + frac * (tb - ta))
            out_y.append(yy[fire])
            out_x.append(xx[fire])
            out_p.append(sign.astype(np.int8))
            ref[fire] = target
            level[fire] = draw(int(fire.sum()))
    if not out_t:
        empty = np.zeros(0)
        return empty, empty.astype(np.intp), empty.astype(np.intp), empty.astype(np.int8)
    return (np.concatenate(out_t), np.concatenate(out_y), np.concatenate(out_x),
            np.concatenate(out_p))


def simulate_events(scene: Scene, config: SimulatorConfig | None = None):
    """Sweep the polarizer across the scene and record the events.

    Returns ``(stream, normals, i0)``: the event stream, ground-truth normals
    ``(3, H, W)`` (invalid pixels zeroed) and the radiance image at polarizer
    angle 0.
    """
    config = config or SimulatorConfig()
    n_steps = int(math.floor(config.total_rotation / config.step + 1e-9))
    angles = np.arange(n_steps + 1) * config.step
    if angles[-1] < config.total_rotation - 1e-12:
        angles = np.append(angles, config.total_rotation)
    times = angles / config.angular_speed
    frames = np.stack([scene.intensity_at(a) for a in angles])
    if np.any(frames <= 0) or not np.all(np.isfinite(frames)):
        raise SimulationError("non-positive radiance; log intensity undefined")
    rng = np.random.default_rng(config.noise_seed) if config.noise_seed is not None else None
    t, y, x, p = log_intensity_to_events(np.log(frames), times, config.contrast_threshold,
                                         rng=rng, jitter=config.threshold_jitter)
    t_us = np.clip(np.rint(t).astype(np.int64), 0, config.duration)
    order = np.lexsort((x, y, t_us))
    h, w = scene.shape
    stream = EventStream(w, h, config.duration, x[order], y[order], t_us[order], p[order])
    return stream, scene.normals(), frames[0]


# --- analytic scenes -----------------------------------------------------------


def _shade(normals: np.ndarray, albedo: float, light=DEFAULT_LIGHT, ambient: float = 0.25) -> np.ndarray:
    light = np.asarray(light, dtype=np.float64)
    light = light / np.linalg.norm(light)
    lambert = np.clip(np.tensordot(light, normals, axes=1), 0.0, None)
    return albedo * (ambient + (1.0 - ambient) * lambert)


def plane_scene(height: int, width: int, azimuth: float, zenith: float,
                albedo: float = 0.8, refractive_index: float = 1.5) -> Scene:
    az = np.full((height, width), azimuth)
    ze = np.full((height, width), zenith)
    return Scene("plane", az, ze, _shade(normals_from_angles(az, ze), albedo), refractive_index)


def sphere_cap_scene(height: int, width: int, center=None, radius: float | None = None,
                     max_zenith: float = math.radians(80), albedo: float = 0.8,
                     refractive_index: float = 1.5, background_albedo: float = 0.3) -> Scene:
    """A spherical bump seen from above; pixels off the cap are masked out."""
    cy, cx = center if center is not None else ((height - 1) / 2, (width - 1) / 2)
    radius = radius if radius is not None else 0.45 * min(height, width)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    dx, dy = (xx - cx) / radius, (yy - cy) / radius
    d = np.hypot(dx, dy)
    on = d <= math.sin(max_zenith)
    ze = np.where(on, np.arcsin(np.clip(d, 0, 1)), 0.0)
    az = np.where(on, np.arctan2(dy, dx), 0.0)
    shade = _shade(normals_from_angles(np.mod(az, 2 * np.pi), ze), albedo)
    intensity = np.where(on, shade, background_albedo)
    return Scene("sphere-cap", az, ze, intensity, refractive_index, mask=on)


def ramp_scene(height: int, width: int, azimuth: float = 0.0, max_zenith: float = math.radians(70),
               albedo: float = 0.8, refractive_index: float = 1.5) -> Scene:
    """Zenith rising linearly across the columns at a fixed azimuth."""
    ze = np.tile(np.linspace(0.0, max_zenith, width), (height, 1))
    az = np.full((height, width), azimuth)
    return Scene("ramp", az, ze, _shade(normals_from_angles(az, ze), albedo), refractive_index)


def composite_scene(background: Scene, foreground: Scene) -> Scene:
    """Paste the valid pixels of ``foreground`` over ``background``."""
    m = foreground.mask
    return Scene(
        "composite",
        np.where(m, foreground.azimuth, background.azimuth),
        np.where(m, foreground.zenith, background.zenith),
        np.where(m, foreground.intensity, background.intensity),
        foreground.refractive_index,
        mask=m | background.mask,
    )


def random_composite_scene(rng: np.random.Generator, height: int = 64, width: int = 64) -> Scene:
    """Tilted plane with a sphere cap at a random position and size."""
    plane = plane_scene(height, width, azimuth=rng.uniform(0, 2 * np.pi),
                        zenith=rng.uniform(0.0, math.radians(50)),
                        albedo=rng.uniform(0.5, 0.9))
    radius = rng.uniform(0.25, 0.45) * min(height, width)
    margin = 0.6 * radius
    center = (rng.uniform(margin, height - 1 - margin), rng.uniform(margin, width - 1 - margin))
    cap = sphere_cap_scene(height, width, center=center, radius=radius,
                           max_zenith=rng.uniform(math.radians(60), math.radians(85)),
                           albedo=rng.uniform(0.6, 0.95))
    return composite_scene(plane, cap)
