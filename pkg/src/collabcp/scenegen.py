"""Synthetic multi-agent scenes on the unit square.

Each scene holds axis-aligned boxes and ``N`` agents; agent ``n`` sees a
circular sector of the world rasterized onto a ``G x G`` occupancy grid with
bounded uniform noise. Agent 0 is the ego agent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np

from .config import DatasetConfig, ConfigError

# seed-stream offsets keep train / val / test scenes disjoint
SPLIT_OFFSETS = {"train": 0, "val": 1_000_000, "test": 2_000_000}


@dataclass(frozen=True)
class AgentPose:
    x: float
    y: float
    heading: float
    radius: float
    half_angle: float


@dataclass
class Scene:
    boxes: np.ndarray  # (H, 4): x_min, y_min, x_max, y_max
    agents: List[AgentPose]
    seed: int

    @property
    def n_objects(self) -> int:
        return len(self.boxes)

    @property
    def n_agents(self) -> int:
        return len(self.agents)


@dataclass
class Observation:
    grid: np.ndarray
    visibility_mask: np.ndarray
    agent_index: int


@dataclass
class Split:
    """One dataset split: stacked observations plus per-scene box arrays."""

    name: str
    observations: np.ndarray  # (n_scenes, N, G, G)
    boxes: List[np.ndarray]
    seeds: np.ndarray

    def __len__(self) -> int:
        return len(self.boxes)

    def subset(self, idx) -> "Split":
        idx = np.atleast_1d(idx)
        return Split(self.name, self.observations[idx], [self.boxes[i] for i in idx], self.seeds[idx])


@dataclass
class DatasetSplit:
    train: Split
    val: Split
    test: Split
    config: DatasetConfig = field(default_factory=DatasetConfig)

    @property
    def sizes(self):
        return len(self.train), len(self.val), len(self.test)

    @property
    def n_cal_scenes(self) -> int:
        return len(self.val)


def cell_centers(grid_size: int) -> np.ndarray:
    return (np.arange(grid_size) + 0.5) / grid_size


def generate_scene(seed: int, cfg: DatasetConfig) -> Scene:
    cfg.validate()
    rng = np.random.default_rng(seed)
    n_objects = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    sizes = rng.uniform(cfg.min_box_size, cfg.max_box_size, size=(n_objects, 2))
    lower = rng.uniform(0.0, 1.0 - sizes)
    boxes = np.concatenate([lower, lower + sizes], axis=1)
    agents = [
        AgentPose(
            x=float(rng.uniform()),
            y=float(rng.uniform()),
            heading=float(rng.uniform(-np.pi, np.pi)),
            radius=cfg.fov_radius,
            half_angle=np.deg2rad(cfg.fov_angle_deg) / 2.0,
        )
        for _ in range(cfg.n_agents)
    ]
    return Scene(boxes=boxes.reshape(-1, 4), agents=agents, seed=int(seed))


def visibility_mask(pose: AgentPose, grid_size: int) -> np.ndarray:
    c = cell_centers(grid_size)
    # grid[row, col] <-> (y = c[row], x = c[col])
    dx = c[None, :] - pose.x
    dy = c[:, None] - pose.y
    dist = np.hypot(dx, dy)
    bearing = np.arctan2(dy, dx) - pose.heading
    bearing = (bearing + np.pi) % (2 * np.pi) - np.pi
    return ((dist <= pose.radius) & (np.abs(bearing) <= pose.half_angle)).astype(np.float64)


def rasterize(boxes: np.ndarray, grid_size: int) -> np.ndarray:
    """1 where a cell center lies inside any box (closed intervals)."""
    c = cell_centers(grid_size)
    occ = np.zeros((grid_size, grid_size))
    for x0, y0, x1, y1 in np.asarray(boxes).reshape(-1, 4):
        rows = (c >= y0) & (c <= y1)
        cols = (c >= x0) & (c <= x1)
        occ[np.ix_(rows, cols)] = 1.0
    return occ


def render_observation(
    scene: Scene, agent_index: int, noise_seed: int, cfg: DatasetConfig
) -> Observation:
    if not 0 <= agent_index < scene.n_agents:
        raise IndexError(f"agent_index {agent_index} out of range for {scene.n_agents} agents")
    g = cfg.grid_size
    mask = visibility_mask(scene.agents[agent_index], g)
    grid = rasterize(scene.boxes, g) * mask
    if cfg.noise_amplitude > 0:
        rng = np.random.default_rng([scene.seed, agent_index, noise_seed])
        noise = rng.uniform(-cfg.noise_amplitude, cfg.noise_amplitude, size=(g, g))
        grid = np.clip(grid + noise * mask, 0.0, 1.0)
    return Observation(grid=grid, visibility_mask=mask, agent_index=agent_index)


def render_scene(scene: Scene, cfg: DatasetConfig, noise_seed: int = 0) -> np.ndarray:
    return np.stack(
        [render_observation(scene, n, noise_seed, cfg).grid for n in range(scene.n_agents)]
    )


def make_split(name: str, n_scenes: int, cfg: DatasetConfig) -> Split:
    if n_scenes < 1:
        raise ConfigError(f"split {name!r} needs at least one scene")
    base = cfg.seed * 10_000_000 + SPLIT_OFFSETS[name]
    seeds = base + np.arange(n_scenes)
    scenes = [generate_scene(int(s), cfg) for s in seeds]
    obs = np.stack([render_scene(s, cfg) for s in scenes])
    return Split(name, obs, [s.boxes for s in scenes], seeds.astype(np.int64))


def make_splits(cfg: DatasetConfig) -> DatasetSplit:
    cfg.validate()
    return DatasetSplit(
        train=make_split("train", cfg.n_train, cfg),
        val=make_split("val", cfg.n_val, cfg),
        test=make_split("test", cfg.n_test, cfg),
        config=cfg,
    )
