"""Simulated training samples: scene -> events -> CVGR-I plus ground truth."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .encoding import DEFAULT_BINS, encode_stream
from .events import EventStream, Scene, SimulatorConfig, random_composite_scene, simulate_events

__all__ = ["Sample", "make_sample", "sample_from_recording", "synthetic_dataset", "load_dataset"]


@dataclass
class Sample:
    cvgri: np.ndarray  # (B, H, W) float32
    normals: np.ndarray  # (3, H, W)
    mask: np.ndarray  # (H, W) bool
    name: str = ""


def sample_from_recording(stream: EventStream, normals: np.ndarray, i0: np.ndarray,
                          contrast_threshold: float, bins: int = DEFAULT_BINS,
                          name: str = "", normalize: bool = False) -> Sample:
    cvgri = encode_stream(stream, i0, contrast_threshold, bins, normalize)
    normals = np.asarray(normals, dtype=np.float32)
    mask = np.linalg.norm(normals, axis=0) > 0.5
    return Sample(cvgri.values.astype(np.float32), normals, mask, name)


def make_sample(scene: Scene, sim: SimulatorConfig | None = None, bins: int = DEFAULT_BINS,
                name: str = "") -> Sample:
    sim = sim or SimulatorConfig()
    stream, normals, i0 = simulate_events(scene, sim)
    return sample_from_recording(stream, normals, i0, sim.contrast_threshold, bins, name)


def synthetic_dataset(count: int, seed: int = 0, height: int = 64, width: int = 64,
                      sim: SimulatorConfig | None = None, bins: int = DEFAULT_BINS) -> list[Sample]:
    """``count`` random plane + sphere-cap composites, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    return [make_sample(random_composite_scene(rng, height, width), sim, bins, f"scene_{i:03d}")
            for i in range(count)]


def load_dataset(directory, bins: int = DEFAULT_BINS, normalize: bool = False) -> list[Sample]:
    """Read a simulated dataset directory (``manifest.json`` plus per-scene files)."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
        scenes = manifest["scenes"]
        threshold = float(manifest["simulator"]["contrast_threshold"])
    except (OSError, ValueError, KeyError) as exc:
        raise io.FormatError(f"{directory}: unreadable dataset manifest ({exc})") from exc
    samples = []
    for entry in scenes:
        name = entry["name"]
        stream = io.read_events(directory / f"{name}.pevt", duration=int(entry["duration_us"]))
        normals = io.read_normals(directory / f"{name}.pnrm")
        i0 = io.read_image(directory / f"{name}.pimg")
        if normals.shape[1:] != i0.shape or i0.shape != (stream.height, stream.width):
            raise io.FormatError(f"{name}: event, normal and image extents disagree")
        samples.append(sample_from_recording(stream, normals, i0, threshold, bins, name, normalize))
    return samples
