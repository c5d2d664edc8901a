"""Model-output artifacts shared by the analysis applications."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .wire import PIXEL_U16, ImageFrame, ImageHeader

LABEL_BACKGROUND = 0
LABEL_LV_BLOOD = 1
LABEL_LV_MYO = 2
LABEL_RV_BLOOD = 3

VALID_LABELS = (LABEL_BACKGROUND, LABEL_LV_BLOOD, LABEL_LV_MYO, LABEL_RV_BLOOD)


class ArtifactError(Exception):
    pass


@dataclass
class SegmentationMask:
    """Label image: 0 background, 1 LV blood, 2 LV myocardium, 3 RV blood."""

    labels: np.ndarray
    header: ImageHeader

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint16)
        if self.labels.ndim != 2:
            raise ArtifactError("labels must be a 2D array")
        if self.labels.max(initial=0) > max(VALID_LABELS):
            raise ArtifactError(
                f"labels contain codes outside {VALID_LABELS}")

    def count(self, label):
        return int(np.count_nonzero(self.labels == label))

    def to_frame(self, extra_meta=()):
        header = ImageHeader.unpack(self.header.pack())
        header.rows, header.cols = self.labels.shape
        header.data_type = PIXEL_U16
        meta = [("role", "mask")] + list(extra_meta)
        return ImageFrame(header, meta, self.labels.astype("<u2"))


@dataclass
class LandmarkSet:
    """Named 2D landmark points (row, col) on one image frame.

    Long-axis views use mv1, mv2 and apex; CH4 may add tv_lat for the
    tricuspid annulus.
    """

    view: str
    phase_idx: int
    trigger_time_ms: float
    points: dict = field(default_factory=dict)
    header: ImageHeader = None

    REQUIRED = ("mv1", "mv2", "apex")

    def require(self, name):
        point = self.points.get(name)
        if point is None:
            raise ArtifactError(f"landmark {name!r} is missing")
        return point

    def validate_bounds(self):
        if self.header is None:
            return
        for name, (row, col) in self.points.items():
            if not (0 <= row < self.header.rows and 0 <= col < self.header.cols):
                raise ArtifactError(
                    f"landmark {name!r} at ({row}, {col}) is outside the "
                    f"{self.header.rows}x{self.header.cols} image")
