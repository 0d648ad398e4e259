"""Frame graph: keyframe selection, edge construction and BA weights.

Motion maps hold the probability that a pixel is *static* (1 = static,
0 = moving), so multiplying them into the flow confidence removes movers
from the reprojection cost.

Distances are mean induced-flow magnitudes measured on the low-resolution
grid and reported in full-resolution pixels (multiplied by the low-res
factor), which is the unit of the keyframe and proximity thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NoValidPixels, ShapeMismatch
from .geometry import DisparityGrid, induced_flow, pixel_grid, relative_pose

KEYFRAME_THRESHOLD_PX = 16.0
WINDOW_RADIUS = 3
PROXIMITY_PX = 24.0


@dataclass
class EdgeObservation:
    target: np.ndarray          # (h, w, 2) target coordinates in frame j
    confidence: np.ndarray      # (h, w) in [0, 1]
    weight: np.ndarray          # (h, w) combined weight in [0, 1]

    def __post_init__(self):
        if self.target.shape[:2] != self.confidence.shape or self.confidence.shape != self.weight.shape:
            raise ShapeMismatch("edge rasters must share the low-res grid shape")

    @classmethod
    def from_flow(cls, flow, confidence, motion=None):
        h, w = confidence.shape
        target = pixel_grid(h, w) + np.asarray(flow, dtype=np.float64)
        conf = np.clip(np.asarray(confidence, dtype=np.float64), 0.0, 1.0)
        weight = conf if motion is None else combine_weights(conf, motion)
        return cls(target, conf, weight)


@dataclass
class FrameGraph:
    nodes: list = field(default_factory=list)        # ordered frame indices
    keyframe: dict = field(default_factory=dict)     # frame -> bool
    edges: dict = field(default_factory=dict)        # (i, j) -> EdgeObservation

    def add_node(self, frame, is_keyframe=False):
        if frame not in self.keyframe:
            self.nodes.append(frame)
        self.keyframe[frame] = self.keyframe.get(frame, False) or is_keyframe

    def add_edge(self, i, j, obs: EdgeObservation):
        if i == j:
            raise ValueError("self-edges are not allowed")
        if i not in self.keyframe or j not in self.keyframe:
            raise ValueError(f"edge ({i}, {j}) references an unregistered node")
        self.edges[(i, j)] = obs

    @property
    def keyframes(self):
        return [n for n in self.nodes if self.keyframe[n]]


def combine_weights(confidence, motion):
    """Final BA weight: flow confidence times static probability, clipped to [0, 1]."""
    c = np.asarray(confidence, dtype=np.float64)
    m = np.asarray(motion, dtype=np.float64)
    if c.shape != m.shape:
        raise ShapeMismatch(f"confidence {c.shape} vs motion map {m.shape}")
    return np.clip(c * m, 0.0, 1.0)


def mean_flow_distance(i, j, poses, disparities, K, scale=1.0):
    """Mean ||u_ij(p) - p|| over valid pixels, times ``scale``."""
    if i == j:
        return 0.0
    d = disparities[i]
    grid = d if isinstance(d, DisparityGrid) else DisparityGrid(d)
    uv, valid = induced_flow(relative_pose(poses[i], poses[j]), grid, K)
    if not np.any(valid):
        raise NoValidPixels(f"no valid pixels between frames {i} and {j}")
    h, w = grid.shape
    disp = np.linalg.norm(uv[valid] - pixel_grid(h, w)[valid], axis=-1)
    return float(disp.mean()) * scale


def should_add_keyframe(candidate, last_keyframe, poses, disparities, K, threshold_px=KEYFRAME_THRESHOLD_PX,
                        scale=1.0):
    """True iff the candidate moved at least ``threshold_px`` (>= convention)."""
    if candidate == last_keyframe:
        return False
    return mean_flow_distance(last_keyframe, candidate, poses, disparities, K, scale) >= threshold_px


def build_edges(keyframes, poses=None, disparities=None, K=None, window_radius=WINDOW_RADIUS,
                proximity_px=PROXIMITY_PX, scale=1.0, available=None):
    """Temporal-window edges plus flow-proximity edges, always in both directions.

    ``keyframes`` is an ordered list of frame ids; the temporal rule uses
    positions in that list.  ``available`` optionally restricts the result to
    pairs for which observations exist.
    """
    kfs = list(keyframes)
    pairs = set()
    for a in range(len(kfs)):
        for b in range(a + 1, min(len(kfs), a + window_radius + 1)):
            pairs.add((kfs[a], kfs[b]))
            pairs.add((kfs[b], kfs[a]))
    if poses is not None and disparities is not None and proximity_px is not None:
        for a in range(len(kfs)):
            for b in range(a + window_radius + 1, len(kfs)):
                i, j = kfs[a], kfs[b]
                try:
                    dist = mean_flow_distance(i, j, poses, disparities, K, scale)
                except NoValidPixels:
                    continue
                if dist < proximity_px:
                    pairs.add((i, j))
                    pairs.add((j, i))
    if available is not None:
        pairs = {p for p in pairs if p in available and (p[1], p[0]) in available}
    return sorted(pairs)
