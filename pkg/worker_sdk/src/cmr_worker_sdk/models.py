"""Built-in stub models.

identity             echo every input tensor
oracle_segmenter     echo the simulator's ground-truth masks ("gt_masks")
threshold_segmenter  classical intensity segmentation: per-frame threshold
                     at 75% of the intensity range, largest connected
                     bright component is LV blood, a one-iteration
                     dilation ring around it is myocardium
lax_landmark_stub    principal-axis heuristic for mitral/apex points
perf_stub            pass flow frames through, echo ground-truth masks

All stubs load on CPU only; they exist to exercise the serving plumbing,
not to match trained-model quality.
"""

from __future__ import annotations

import numpy as np

from .registry import ModelRegistry

LABEL_BLOOD = 1
LABEL_MYO = 2


def largest_component(bright):
    """Largest 4-connected True component of a boolean image."""
    visited = np.zeros_like(bright)
    best = None
    best_size = 0
    rows, cols = bright.shape
    for seed in zip(*np.nonzero(bright & ~visited)):
        if visited[seed]:
            continue
        stack = [seed]
        visited[seed] = True
        member = []
        while stack:
            r, c = stack.pop()
            member.append((r, c))
            for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if (0 <= rr < rows and 0 <= cc < cols and bright[rr, cc]
                        and not visited[rr, cc]):
                    visited[rr, cc] = True
                    stack.append((rr, cc))
        if len(member) > best_size:
            best_size = len(member)
            best = member
    out = np.zeros_like(bright)
    if best:
        idx = np.array(best)
        out[idx[:, 0], idx[:, 1]] = True
    return out


def dilate_once(region):
    padded = np.pad(region, 1, mode="constant")
    return (padded[:-2, 1:-1] | padded[2:, 1:-1]
            | padded[1:-1, :-2] | padded[1:-1, 2:])


def threshold_segment(frames):
    """Per-frame mask tensor from intensity alone.

    Threshold sits at 75% of each frame's intensity range; the largest
    connected bright component becomes LV blood and its one-iteration
    dilation ring is reclassified as myocardium. An empty bright set
    yields an all-background frame.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3:
        raise ValueError("frames tensor must be [N, rows, cols]")
    masks = np.zeros(frames.shape, dtype=np.uint8)
    for i, frame in enumerate(frames):
        lo, hi = float(frame.min()), float(frame.max())
        if hi <= lo:
            continue
        bright = frame > lo + 0.75 * (hi - lo)
        if not bright.any():
            continue
        blood = largest_component(bright)
        ring = dilate_once(blood) & ~blood
        masks[i][ring] = LABEL_MYO
        masks[i][blood] = LABEL_BLOOD
    return masks


def landmark_stub(frames):
    """Heuristic landmarks from the bright cavity of a long-axis frame.

    The cavity's principal axis gives base and apex ends (apex is the end
    at the larger image row); the mitral points sit at the base end,
    offset along the minor axis by the cavity's half width.
    """
    frames = np.asarray(frames, dtype=np.float64)
    points = np.zeros((frames.shape[0], 3, 2), dtype=np.float32)
    for i, frame in enumerate(frames):
        hi = frame.max()
        bright = frame > 0.5 * hi if hi > 0 else np.zeros_like(frame, bool)
        pix = np.argwhere(bright).astype(np.float64)
        if len(pix) < 8:
            continue
        center = pix.mean(axis=0)
        centered = pix - center
        cov = centered.T @ centered / len(pix)
        values, vectors = np.linalg.eigh(cov)
        major = vectors[:, int(np.argmax(values))]
        minor = vectors[:, int(np.argmin(values))]
        span = centered @ major
        lo_end = center + major * span.min()
        hi_end = center + major * span.max()
        apex, base = ((hi_end, lo_end) if hi_end[0] >= lo_end[0]
                      else (lo_end, hi_end))
        width = float(np.abs(centered @ minor).max())
        points[i, 0] = base - minor * width    # mv1
        points[i, 1] = base + minor * width    # mv2
        points[i, 2] = apex
    return points


def build_catalog():
    registry = ModelRegistry()

    registry.register(
        "identity",
        load_fn=lambda params, device: None,
        infer_fn=lambda state, tensors: dict(tensors))

    def oracle_infer(state, tensors):
        if "gt_masks" not in tensors:
            raise ValueError("oracle_segmenter needs a gt_masks input tensor")
        return {"mask": np.asarray(tensors["gt_masks"], dtype=np.uint8)}

    registry.register("oracle_segmenter",
                      load_fn=lambda params, device: None,
                      infer_fn=oracle_infer)
    registry.register("perf_stub",
                      load_fn=lambda params, device: None,
                      infer_fn=oracle_infer)

    def threshold_load(params, device):
        return float(params.get("fraction", 0.75))

    def threshold_infer(fraction, tensors):
        return {"mask": threshold_segment(tensors["frames"])}

    registry.register("threshold_segmenter",
                      load_fn=threshold_load, infer_fn=threshold_infer)

    def landmark_infer(state, tensors):
        return {
            "landmarks": landmark_stub(tensors["frames"]),
            "landmark_names": np.frombuffer(b"mv1,mv2,apex",
                                            dtype=np.uint8).copy(),
        }

    registry.register("lax_landmark_stub",
                      load_fn=lambda params, device: None,
                      infer_fn=landmark_infer)
    return registry
