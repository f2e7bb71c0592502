"""Lane-center polyline map model.

Maps are unordered collections of fixed-length (10-point) polylines with
padding flags. Longer centerlines are split into approximately equal
segments; shorter ones are padded with zeros.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

POLYLINE_LEN = 10


@dataclass
class Polyline:
    """Fixed-length lane-center segment: 10 points + per-point pad flags."""

    points: np.ndarray  # (10, 2)
    pad: np.ndarray  # (10,) bool, True where the slot is padding
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.pad = np.asarray(self.pad, dtype=bool)
        if self.points.shape != (POLYLINE_LEN, 2):
            raise ValueError(f"points must be ({POLYLINE_LEN}, 2), got {self.points.shape}")
        if self.pad.shape != (POLYLINE_LEN,):
            raise ValueError(f"pad must be ({POLYLINE_LEN},), got {self.pad.shape}")
        if not np.all(np.isfinite(self.points[~self.pad])):
            raise ValueError("non-pad points must be finite")
        if np.any(self.points[self.pad] != 0.0):
            raise ValueError("pad slots must hold (0, 0)")

    @property
    def real_points(self):
        return self.points[~self.pad]

    @property
    def real_count(self):
        return int((~self.pad).sum())


@dataclass
class RoadGraph:
    """Unordered set of lane-center polylines sharing the agents' frame."""

    polylines: list

    def __post_init__(self):
        for p in self.polylines:
            if not isinstance(p, Polyline):
                raise TypeError("RoadGraph holds Polyline entries")

    def __len__(self):
        return len(self.polylines)

    def to_arrays(self):
        """Stack into (L, 10, 2) points and (L, 10) pad flags."""
        if not self.polylines:
            return np.zeros((0, POLYLINE_LEN, 2)), np.ones((0, POLYLINE_LEN), dtype=bool)
        pts = np.stack([p.points for p in self.polylines])
        pad = np.stack([p.pad for p in self.polylines])
        return pts, pad

    @classmethod
    def from_arrays(cls, points, pad):
        return cls([Polyline(points[i], pad[i]) for i in range(points.shape[0])])

    def transformed(self, frame):
        """Apply an EgoFrame to all real points (pads stay zero)."""
        pts, pad = self.to_arrays()
        out = np.zeros_like(pts)
        if pts.size:
            moved = frame.apply_positions(pts.reshape(-1, 2)).reshape(pts.shape)
            out = np.where(pad[..., None], 0.0, moved)
        return RoadGraph.from_arrays(out, pad)


def split_and_pad(raw_polyline):
    """Split a centerline into 10-point polylines, padding the remainder.

    Segments of a long polyline differ in real-point count by at most one,
    and concatenating the real points reproduces the input order exactly.
    """
    pts = np.asarray(raw_polyline, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"raw polyline must be (n, 2), got {pts.shape}")
    n = pts.shape[0]
    if n == 0:
        raise ValueError("raw polyline is empty")
    n_seg = -(-n // POLYLINE_LEN)  # ceil
    base, rem = divmod(n, n_seg)
    out = []
    start = 0
    for i in range(n_seg):
        size = base + (1 if i < rem else 0)
        seg = pts[start : start + size]
        start += size
        buf = np.zeros((POLYLINE_LEN, 2))
        buf[:size] = seg
        pad = np.ones(POLYLINE_LEN, dtype=bool)
        pad[:size] = False
        out.append(Polyline(buf, pad))
    return out


def build_roadgraph(centerlines, spacing=2.5):
    """Resample dense centerlines at ~spacing meters and split into polylines."""
    polys = []
    for line in centerlines:
        resampled = resample_polyline(np.asarray(line, dtype=np.float64), spacing)
        polys.extend(split_and_pad(resampled))
    return RoadGraph(polys)


def resample_polyline(points, spacing):
    """Resample a dense polyline at fixed arc-length spacing (ends kept)."""
    if points.shape[0] < 2:
        return points.copy()
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    n = max(int(np.floor(total / spacing)) + 1, 2)
    targets = np.linspace(0.0, total, n)
    x = np.interp(targets, s, points[:, 0])
    y = np.interp(targets, s, points[:, 1])
    return np.stack([x, y], axis=1)
