"""Axis-aligned image regions in normalized coordinates."""

from dataclasses import dataclass, field


@dataclass(frozen=True)
class PartRegion:
    """Rectangle (x0, y0, x1, y1) in normalized [0, 1] image coordinates.

    `role` is "part_m" for model-discriminative regions, "part_i" for
    identity-discriminative ones, or "" for plain rectangles (cue regions,
    crops). `provenance` lists the seed image ids the region was mined from.
    """

    rect: tuple
    role: str = ""
    provenance: tuple = field(default=())

    def __post_init__(self):
        x0, y0, x1, y1 = self.rect
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise ValueError(f"invalid region rect {self.rect}")
        object.__setattr__(self, "rect", tuple(float(v) for v in self.rect))
        object.__setattr__(self, "provenance", tuple(self.provenance))

    @property
    def area(self):
        x0, y0, x1, y1 = self.rect
        return (x1 - x0) * (y1 - y0)

    def intersects(self, other):
        ax0, ay0, ax1, ay1 = self.rect
        bx0, by0, bx1, by1 = other.rect
        return ax0 < bx1 and bx0 < ax1 and ay0 < by1 and by0 < ay1

    def iou(self, other):
        ax0, ay0, ax1, ay1 = self.rect
        bx0, by0, bx1, by1 = other.rect
        iw = min(ax1, bx1) - max(ax0, bx0)
        ih = min(ay1, by1) - max(ay0, by0)
        if iw <= 0.0 or ih <= 0.0:
            return 0.0
        inter = iw * ih
        return inter / (self.area + other.area - inter)

    def contains_point(self, x, y):
        x0, y0, x1, y1 = self.rect
        return x0 <= x <= x1 and y0 <= y <= y1
