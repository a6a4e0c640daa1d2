"""Synthetic scene datasets with cached BEV rasters."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .formats import load_bits, save_bits
from .scene import DIFFICULTY, Labels, Scene, generate_scene, load_scene, rasterize, rasterize_labels, save_scene

SPLIT_OFFSET = {"train": 0, "eval": 500_000}


def scene_seed(base_seed: int, split: str, k: int) -> int:
    if split not in SPLIT_OFFSET:
        raise ValueError(f"unknown split {split!r}")
    return base_seed * 1_000_000 + SPLIT_OFFSET[split] + k


@dataclass
class Sample:
    scene: Scene
    bev: np.ndarray  # C×H×W float32
    labels: Labels


class SceneDataset:
    """Scenes plus bit-packed BEV grids; labels are rebuilt on access."""

    def __init__(self, scenes: list[Scene], bevs: list[np.ndarray]):
        if len(scenes) != len(bevs):
            raise ValueError("scenes and BEV grids differ in count")
        self.scenes = scenes
        self._bits = [np.packbits(b.astype(bool), axis=None) for b in bevs]
        self._shape = bevs[0].shape if bevs else None

    @classmethod
    def generate(cls, n: int, seed: int = 0, split: str = "train") -> "SceneDataset":
        scenes, bevs = [], []
        for k in range(n):
            s = generate_scene(scene_seed(seed, split, k), DIFFICULTY[k % len(DIFFICULTY)])
            scenes.append(s)
            bevs.append(rasterize(s).grid)
        return cls(scenes, bevs)

    def __len__(self) -> int:
        return len(self.scenes)

    def bev(self, k: int) -> np.ndarray:
        n = int(np.prod(self._shape))
        return np.unpackbits(self._bits[k], count=n).reshape(self._shape).astype(np.float32)

    def __getitem__(self, k: int) -> Sample:
        s = self.scenes[k]
        return Sample(s, self.bev(k), rasterize_labels(s))

    def batch(self, idx) -> tuple[np.ndarray, list[Sample]]:
        samples = [self[int(k)] for k in idx]
        return np.stack([s.bev for s in samples]), samples

    def subset(self, idx) -> "SceneDataset":
        out = SceneDataset([], [])
        out.scenes = [self.scenes[int(k)] for k in idx]
        out._bits = [self._bits[int(k)] for k in idx]
        out._shape = self._shape
        return out

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for k, s in enumerate(self.scenes):
            save_scene(d / f"{k:06d}.scene", s)
            save_bits(d / f"{k:06d}.bev", self.bev(k))

    @classmethod
    def load(cls, directory, limit: int | None = None) -> "SceneDataset":
        d = Path(directory)
        files = sorted(d.glob("*.scene"))
        if not files:
            raise FileNotFoundError(f"no scenes found in {d}")
        files = files[:limit] if limit is not None else files
        return cls([load_scene(f) for f in files], [load_bits(f.with_suffix(".bev")) for f in files])
