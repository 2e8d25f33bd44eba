"""Scan-unfolding projection between point clouds and range images.

A scan in native sensor order is unfolded into rows by detecting yaw
wrap-arounds, columns come from the yaw bin formula, and each pixel keeps
exact point<->pixel bookkeeping. Back-projection votes per point among
the k range-nearest valid pixels inside a window.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError
from .pcl_io import LabelSet, PointCloud


@dataclass
class ProjectionConfig:
    width: int = 2048
    rows: int = 64
    yaw_jump_threshold_deg: float = 310.0
    occlusion_policy: str = "nearest-wins"

    def __post_init__(self):
        if self.width < 1:
            raise ValidationError("projection width must be >= 1", width=self.width)
        if not 0.0 < self.yaw_jump_threshold_deg < 360.0:
            raise ValidationError("yaw jump threshold must lie in (0, 360)",
                                  threshold_deg=self.yaw_jump_threshold_deg)
        if self.occlusion_policy != "nearest-wins":
            raise ValidationError("unsupported occlusion policy",
                                  policy=self.occlusion_policy)


@dataclass
class RangeImage:
    """Five-channel projection (range, intensity, x, y, z) with bookkeeping.

    ``pixel_of_point`` holds the (row, col) of every input point even when
    it lost a collision; ``point_of_pixel`` holds the winning point index
    per pixel (-1 where invalid).
    """

    channels: np.ndarray
    valid: np.ndarray
    pixel_of_point: np.ndarray
    point_of_pixel: np.ndarray

    @property
    def shape(self):
        return self.valid.shape

    @property
    def range(self):
        return self.channels[0]


def yaw_angles(xyz):
    """Yaw per point: atan2(y, x), in radians within [-pi, pi]."""
    return np.arctan2(xyz[:, 1].astype(np.float64), xyz[:, 0].astype(np.float64))


def unfold_rows(cloud, threshold_deg=310.0, max_rows=None):
    """Recover per-point row indices from a scan in native order.

    Rows start at 0 and increment wherever the yaw difference between
    consecutive points exceeds ``threshold_deg`` (the 360->0 wrap between
    sensor rings). Raises when a row index would reach ``max_rows``.
    """
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else np.asarray(cloud)
    if xyz.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    yaw_deg = np.degrees(yaw_angles(xyz)) % 360.0
    jumps = np.abs(np.diff(yaw_deg)) > threshold_deg
    rows = np.concatenate([[0], np.cumsum(jumps)]).astype(np.int64)
    if max_rows is not None and rows[-1] >= max_rows:
        offending = int(np.argmax(rows >= max_rows))
        raise ValidationError("scan unfolds into more rows than configured",
                              configured_rows=int(max_rows), point_index=offending)
    return rows


def column_index(phi, width):
    """floor(0.5 * (1 - phi/pi) * W), clamped into [0, W-1]."""
    col = np.floor(0.5 * (1.0 - np.asarray(phi, dtype=np.float64) / np.pi) * width)
    return np.clip(col, 0, width - 1).astype(np.int64)


def project(cloud: PointCloud, config: ProjectionConfig, labels: LabelSet = None,
            ignore_id: int = 0):
    """Project a scan into a RangeImage; optionally project labels alongside.

    On pixel collisions the nearer point wins all five channels and the
    label. Returns ``(image, (sem2d, inst2d))``; the label pair is None
    when no labels are given. Invalid pixels carry channel value 0 and,
    in the label maps, the ignore id.
    """
    h, w = config.rows, config.width
    n = len(cloud)
    channels = np.zeros((5, h, w), dtype=np.float32)
    valid = np.zeros((h, w), dtype=bool)
    point_of_pixel = np.full((h, w), -1, dtype=np.int64)
    if n == 0:
        empty = (np.full((h, w), ignore_id, dtype=np.int64),
                 np.zeros((h, w), dtype=np.int64)) if labels is not None else None
        return RangeImage(channels, valid, np.zeros((0, 2), dtype=np.int64),
                          point_of_pixel), empty
    if labels is not None and len(labels) != n:
        raise ValidationError("label count does not match point count",
                              points=n, labels=len(labels))

    rows = unfold_rows(cloud, config.yaw_jump_threshold_deg, max_rows=h)
    cols = column_index(yaw_angles(cloud.xyz), w)
    ranges = cloud.ranges
    flat = rows * w + cols

    # Nearest point wins each pixel; stable ascending sort makes ties
    # deterministic (lowest point index among equal ranges).
    order = np.argsort(ranges, kind="stable")
    uniq, first = np.unique(flat[order], return_index=True)
    winners = order[first]

    valid.reshape(-1)[uniq] = True
    point_of_pixel.reshape(-1)[uniq] = winners
    values = np.stack([ranges, cloud.points[:, 3],
                       cloud.points[:, 0], cloud.points[:, 1], cloud.points[:, 2]])
    channels.reshape(5, -1)[:, uniq] = values[:, winners]

    label_maps = None
    if labels is not None:
        sem2d = np.full((h, w), ignore_id, dtype=np.int64)
        inst2d = np.zeros((h, w), dtype=np.int64)
        sem2d.reshape(-1)[uniq] = labels.semantic[winners]
        inst2d.reshape(-1)[uniq] = labels.instance[winners]
        label_maps = (sem2d, inst2d)

    return RangeImage(channels, valid, np.stack([rows, cols], axis=1), point_of_pixel), label_maps


def _nearest_indices(n_in, n_out):
    return np.clip(np.floor((np.arange(n_out) + 0.5) * n_in / n_out), 0, n_in - 1).astype(np.int64)


def _bilinear_axis(n_in, n_out):
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_image(arr, target_h, target_w):
    """Bilinear resize of a (C, H, W) or (H, W) float array, half-pixel centers."""
    squeeze = arr.ndim == 2
    x = arr[None] if squeeze else arr
    _, h, w = x.shape
    r0, r1, fr = _bilinear_axis(h, target_h)
    c0, c1, fc = _bilinear_axis(w, target_w)
    fr = fr[None, :, None]
    fc = fc[None, None, :]
    out = (x[:, r0][:, :, c0] * (1 - fr) * (1 - fc)
           + x[:, r0][:, :, c1] * (1 - fr) * fc
           + x[:, r1][:, :, c0] * fr * (1 - fc)
           + x[:, r1][:, :, c1] * fr * fc).astype(arr.dtype)
    return out[0] if squeeze else out


def resize_nearest(arr, target_h, target_w):
    """Nearest-neighbor resize of an (H, W) array."""
    ri = _nearest_indices(arr.shape[0], target_h)
    ci = _nearest_indices(arr.shape[1], target_w)
    return arr[ri][:, ci]


def resize_for_network(img: RangeImage, target_h, target_w, labels2d=None):
    """Resize channels bilinearly and validity/labels by nearest neighbor.

    Point<->pixel bookkeeping is carried over through the same nearest
    mapping. Returns ``(image, labels2d)``.
    """
    if target_h < 1 or target_w < 1:
        raise ShapeError("resize target extents must be positive",
                         target=[int(target_h), int(target_w)])
    h, w = img.shape
    channels = resize_image(img.channels, target_h, target_w)
    channels[0] = np.maximum(channels[0], 0.0)
    valid = resize_nearest(img.valid, target_h, target_w)
    point_of_pixel = resize_nearest(img.point_of_pixel, target_h, target_w)
    pop = img.pixel_of_point
    if pop.shape[0]:
        scaled_r = np.clip(((pop[:, 0] + 0.5) * target_h / h).astype(np.int64), 0, target_h - 1)
        scaled_c = np.clip(((pop[:, 1] + 0.5) * target_w / w).astype(np.int64), 0, target_w - 1)
        pop = np.stack([scaled_r, scaled_c], axis=1)
    out_labels = None
    if labels2d is not None:
        out_labels = tuple(resize_nearest(m, target_h, target_w) for m in labels2d)
    return RangeImage(channels, valid, pop, point_of_pixel), out_labels


def backproject_knn(pred2d, img: RangeImage, cloud: PointCloud,
                    k: int = 5, window=(5, 5), ignore_id: int = 0) -> LabelSet:
    """Vote per 3D point among the k range-nearest valid pixels in a window.

    ``pred2d`` is the (sem2d, inst2d) pair at the image's native
    resolution. Candidates are ranked by absolute range difference to the
    point (ties by row-major window order); the majority (semantic,
    instance) pair wins, ties going to the pair holding the closest
    candidate. Points with no valid candidate get the ignore id.
    """
    sem2d, inst2d = pred2d
    h, w = img.shape
    if sem2d.shape != (h, w) or inst2d.shape != (h, w):
        raise ShapeError("prediction maps must match the image extent",
                         image=[h, w], semantic=list(sem2d.shape),
                         instance=list(inst2d.shape))
    wh, ww = window
    if wh < 1 or ww < 1 or wh % 2 == 0 or ww % 2 == 0:
        raise ValidationError("window extents must be odd and positive", window=[wh, ww])
    if k < 1 or k > wh * ww:
        raise ValidationError("k must satisfy 1 <= k <= window area",
                              k=k, window_area=wh * ww)

    n = len(cloud)
    if n == 0:
        return LabelSet(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))

    offs_r, offs_c = np.meshgrid(np.arange(-(wh // 2), wh // 2 + 1),
                                 np.arange(-(ww // 2), ww // 2 + 1), indexing="ij")
    offs_r = offs_r.reshape(-1)
    offs_c = offs_c.reshape(-1)

    pr = img.pixel_of_point[:, 0][:, None] + offs_r[None, :]
    pc = img.pixel_of_point[:, 1][:, None] + offs_c[None, :]
    inside = (pr >= 0) & (pr < h) & (pc >= 0) & (pc < w)
    prc = np.clip(pr, 0, h - 1)
    pcc = np.clip(pc, 0, w - 1)
    usable = inside & img.valid[prc, pcc]

    diff = np.abs(img.range[prc, pcc] - cloud.ranges[:, None])
    diff[~usable] = np.inf
    order = np.argsort(diff, axis=1, kind="stable")[:, :k]

    rows_k = np.take_along_axis(prc, order, axis=1)
    cols_k = np.take_along_axis(pcc, order, axis=1)
    ok = np.take_along_axis(usable, order, axis=1)
    sem_k = sem2d[rows_k, cols_k]
    inst_k = inst2d[rows_k, cols_k]

    out_sem = np.full(n, ignore_id, dtype=np.int64)
    out_inst = np.zeros(n, dtype=np.int64)
    if k == 1:
        got = ok[:, 0]
        out_sem[got] = sem_k[got, 0]
        out_inst[got] = inst_k[got, 0]
        return LabelSet(out_sem, out_inst)

    for i in range(n):
        counts = {}
        for j in range(k):
            if not ok[i, j]:
                break  # invalid candidates sort last; nothing usable beyond
            key = (sem_k[i, j], inst_k[i, j])
            if key in counts:
                counts[key][0] += 1
            else:
                counts[key] = [1, j]  # count, best rank
        if not counts:
            continue
        best = min(counts.items(), key=lambda kv: (-kv[1][0], kv[1][1]))
        out_sem[i], out_inst[i] = best[0]
    return LabelSet(out_sem, out_inst)
