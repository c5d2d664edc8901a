"""Generic streaming stages: k-space buffering with dimension triggering,
reference-data separation, and image-group buffering.

Triggering is what lets computation overlap acquisition: a bucket for
group key k is emitted as soon as the first item with key k' > k arrives,
so downstream reconstruction of slice k runs while slice k+1 is still
being acquired. Group keys must be non-decreasing; a decreasing key is a
stream error that tears the chain down.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .wire import FLAG_CALIBRATION, ImageFrame, KSpaceReadout

TRIGGER_DIMENSIONS = ("slice", "phase", "repetition", "none")
GROUP_BY_MODES = ("slice", "series", "all")


class StreamError(Exception):
    """Stream ordering violated; the chain cannot continue."""


class EndOfStream:
    """Sentinel flowing through stages when the input side is done."""

    def __repr__(self):
        return "EndOfStream"


END_OF_STREAM = EndOfStream()


def parse_trigger_dimension(text):
    value = (text or "none").strip().lower()
    if value not in TRIGGER_DIMENSIONS:
        raise StreamError(f"unknown trigger_dimension {text!r}")
    return value


@dataclass
class KSpaceBucket:
    """All readouts sharing one trigger-group key, in arrival order."""

    key: int
    readouts: list = field(default_factory=list)

    @property
    def num_klines(self):
        return max(r.header.kline_idx for r in self.readouts) + 1

    @property
    def num_phases(self):
        return max(r.header.phase_idx for r in self.readouts) + 1

    @property
    def num_coils(self):
        return self.readouts[0].header.num_coils

    @property
    def num_samples(self):
        return self.readouts[0].header.num_samples

    def __len__(self):
        return len(self.readouts)


def _readout_key(readout, dimension):
    if dimension == "slice":
        return readout.header.slice_idx
    if dimension == "phase":
        return readout.header.phase_idx
    if dimension == "repetition":
        return readout.header.repetition_idx
    return 0


class TriggerState:
    """Open-group accumulator for trigger_ingest."""

    def __init__(self, dimension):
        self.dimension = parse_trigger_dimension(dimension)
        self.open_key = None
        self.items = []
        self.ingested = 0
        self.emitted = 0


def trigger_ingest(item, state):
    """Feed one readout (or END_OF_STREAM); returns list of 0..1 buckets.

    A bucket for key k is emitted exactly when the first readout with
    key k' > k arrives, or at end of stream. With dimension "none" all
    readouts form a single bucket emitted at end of stream.
    """
    if isinstance(item, EndOfStream):
        if not state.items:
            return []
        bucket = KSpaceBucket(state.open_key, state.items)
        state.items = []
        state.open_key = None
        state.emitted += len(bucket.readouts)
        return [bucket]

    key = _readout_key(item, state.dimension)
    state.ingested += 1
    if state.open_key is None:
        state.open_key = key
        state.items = [item]
        return []
    if key == state.open_key:
        state.items.append(item)
        return []
    if key < state.open_key:
        raise StreamError(
            f"{state.dimension} index decreased from {state.open_key} to {key}")
    bucket = KSpaceBucket(state.open_key, state.items)
    state.open_key = key
    state.items = [item]
    state.emitted += len(bucket.readouts)
    return [bucket]


def prepare_ref(bucket):
    """Partition a bucket into (imaging, calibration) by the CALIBRATION flag.

    Both halves preserve arrival order; either may be empty. Concatenating
    them in original order reproduces the input exactly.
    """
    imaging = KSpaceBucket(bucket.key)
    calibration = KSpaceBucket(bucket.key)
    for readout in bucket.readouts:
        if readout.header.flags & FLAG_CALIBRATION:
            calibration.readouts.append(readout)
        else:
            imaging.readouts.append(readout)
    return imaging, calibration


@dataclass
class ImageGroup:
    """Image frames sharing one group key (slice, series, or the whole stream)."""

    key: int
    frames: list = field(default_factory=list)
    complete: bool = True

    def __len__(self):
        return len(self.frames)


def _frame_key(frame, group_by):
    if group_by == "slice":
        return frame.header.slice_idx
    if group_by == "series":
        return frame.header.series_idx
    return 0


class GroupState:
    def __init__(self, group_by):
        group_by = (group_by or "slice").strip().lower()
        if group_by not in GROUP_BY_MODES:
            raise StreamError(f"unknown group_by {group_by!r}")
        self.group_by = group_by
        self.open_key = None
        self.frames = []
        self.ingested = 0
        self.emitted = 0


def image_group_ingest(item, state):
    """Feed one ImageFrame (or END_OF_STREAM); returns list of 0..1 groups."""
    if isinstance(item, EndOfStream):
        if not state.frames:
            return []
        group = ImageGroup(state.open_key, state.frames)
        state.frames = []
        state.open_key = None
        state.emitted += len(group.frames)
        return [group]

    key = _frame_key(item, state.group_by)
    state.ingested += 1
    if state.open_key is None:
        state.open_key = key
        state.frames = [item]
        return []
    if key == state.open_key:
        state.frames.append(item)
        return []
    if key < state.open_key:
        raise StreamError(
            f"{state.group_by} index decreased from {state.open_key} to {key}")
    group = ImageGroup(state.open_key, state.frames)
    state.open_key = key
    state.frames = [item]
    state.emitted += len(group.frames)
    return [group]
