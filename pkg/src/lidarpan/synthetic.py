"""Deterministic synthetic clouds and scenes for tests and the toy trainer."""

import numpy as np

from .pcl_io import LabelSet, PointCloud


def _bin_center_phi(col, width):
    return np.pi * (1.0 - (2.0 * col + 1.0) / width)


def ring_cloud(num_rings=8, width=64, points_per_ring=12, seed=0,
               band=4, num_classes=5, thing_classes=(3, 4), range_jitter=0.4):
    """Collision-free cloud of sensor rings with banded labels.

    Each ring carries points at distinct column-bin centers, always
    including the extreme yaw bins so consecutive in-ring yaw gaps stay
    far below the unfold threshold while the ring boundary jump exceeds
    it. Rings are grouped into label bands at well-separated base ranges,
    making range-difference voting unambiguous away from band borders.

    Returns (cloud, labels, rows, cols).
    """
    rng = np.random.default_rng(seed)
    all_yaw = np.degrees(_bin_center_phi(np.arange(width, dtype=np.float64), width)) % 360.0
    # keep a margin to the 0/360 cut: a bin center sitting on the cut (odd
    # widths) flips its mod-360 yaw under float32 coordinate rounding
    usable = np.nonzero((all_yaw >= 1.0) & (all_yaw <= 359.0))[0]
    anchor_cols = [int(usable[np.argmax(all_yaw[usable])]),
                   int(usable[np.argmin(np.abs(all_yaw[usable] - 180.0))]),
                   int(usable[np.argmin(all_yaw[usable])])]
    pts = []
    sems = []
    insts = []
    rows = []
    cols_out = []
    for ring in range(num_rings):
        extra = max(points_per_ring - len(anchor_cols), 0)
        pool = np.setdiff1d(usable, np.array(anchor_cols))
        chosen = rng.choice(pool, size=min(extra, pool.size), replace=False)
        ring_cols = np.concatenate([np.array(anchor_cols), chosen])
        phi = _bin_center_phi(ring_cols.astype(np.float64), width)
        yaw_deg = np.degrees(phi) % 360.0
        order = np.argsort(-yaw_deg, kind="stable")  # sensor sweep: high to low
        ring_cols = ring_cols[order]
        phi = phi[order]

        band_id = ring // band
        base_range = 5.0 + 7.0 * band_id
        r = base_range + rng.uniform(-range_jitter, range_jitter, size=phi.size)
        theta = np.radians(2.0 - 26.0 * ring / max(num_rings - 1, 1))
        x = r * np.cos(theta) * np.cos(phi)
        y = r * np.cos(theta) * np.sin(phi)
        z = r * np.sin(theta) * np.ones_like(phi)
        intensity = rng.uniform(0.0, 1.0, size=phi.size)
        pts.append(np.stack([x, y, z, intensity], axis=1))

        cls = band_id % num_classes
        sems.append(np.full(phi.size, cls, dtype=np.int64))
        inst = band_id + 1 if cls in thing_classes else 0
        insts.append(np.full(phi.size, inst, dtype=np.int64))
        rows.append(np.full(phi.size, ring, dtype=np.int64))
        cols_out.append(ring_cols.astype(np.int64))

    cloud = PointCloud(np.concatenate(pts).astype(np.float32))
    labels = LabelSet(np.concatenate(sems), np.concatenate(insts))
    return cloud, labels, np.concatenate(rows), np.concatenate(cols_out)


def inject_occlusions(cloud, labels, count, seed=0, range_offset=3.0,
                      occluded_class=1, occluded_instance=500):
    """Insert duplicate points behind randomly chosen ones.

    Each duplicate sits at the same yaw (same pixel) with a larger range
    and a distinct label, so it is guaranteed to lose the projection
    collision and can only recover its label by luck.
    """
    rng = np.random.default_rng(seed)
    n = len(cloud)
    picked = np.sort(rng.choice(n, size=min(count, n), replace=False))
    pts = cloud.points
    new_pts = []
    new_sem = []
    new_inst = []
    occluded_flags = []
    pick_set = set(int(i) for i in picked)
    for i in range(n):
        new_pts.append(pts[i])
        new_sem.append(labels.semantic[i])
        new_inst.append(labels.instance[i])
        occluded_flags.append(False)
        if i in pick_set:
            r = float(np.sqrt((pts[i, :3].astype(np.float64) ** 2).sum()))
            scale = (r + range_offset) / r
            dup = pts[i].copy()
            dup[:3] *= scale
            new_pts.append(dup)
            new_sem.append(occluded_class)
            new_inst.append(occluded_instance)
            occluded_flags.append(True)
    cloud2 = PointCloud(np.asarray(new_pts, dtype=np.float32))
    labels2 = LabelSet(np.asarray(new_sem), np.asarray(new_inst))
    return cloud2, labels2, np.asarray(occluded_flags)


def make_scene(seed, height=32, width=64, stuff_classes=3, thing_classes=2):
    """Synthetic 5-channel scene with a per-pixel class map.

    Stuff classes form horizontal bands at increasing ranges; thing
    classes appear as rectangles at nearer ranges. Channels follow the
    projection layout (range, intensity, x, y, z) with geometry consistent
    with a spinning sensor, so range equals the Euclidean norm.
    """
    rng = np.random.default_rng(seed)
    labels = np.zeros((height, width), dtype=np.int64)
    rng_map = np.zeros((height, width), dtype=np.float64)
    # region geometry snaps to 4-pixel blocks: the classifier predicts at
    # x4 resolution, so block-aligned boundaries are representable exactly
    edges = (np.linspace(0, height, stuff_classes + 1) // 4).astype(int) * 4
    edges[-1] = height
    for c in range(stuff_classes):
        labels[edges[c]:edges[c + 1]] = c
        rng_map[edges[c]:edges[c + 1]] = 20.0 + 10.0 * c

    def snap(v):
        return int(v) // 4 * 4

    for t in range(thing_classes):
        cls = stuff_classes + t
        bh = max(snap(rng.integers(height // 5, height // 2)), 4)
        bw = max(snap(rng.integers(width // 6, width // 3)), 4)
        r0 = snap(rng.integers(0, height - bh))
        c0 = snap(rng.integers(0, width - bw))
        labels[r0:r0 + bh, c0:c0 + bw] = cls
        rng_map[r0:r0 + bh, c0:c0 + bw] = 6.0 + 4.0 * t

    rng_map += rng.uniform(-0.3, 0.3, size=rng_map.shape)
    phi = _bin_center_phi(np.arange(width, dtype=np.float64), width)[None, :]
    theta = np.radians(np.linspace(2.0, -24.0, height))[:, None]
    x = rng_map * np.cos(theta) * np.cos(phi)
    y = rng_map * np.cos(theta) * np.sin(phi)
    z = rng_map * np.sin(theta) * np.ones_like(phi)
    intensity = rng.uniform(0.0, 1.0, size=(height, width))
    channels = np.stack([rng_map, intensity, x, y, z]).astype(np.float32)
    return channels, labels
