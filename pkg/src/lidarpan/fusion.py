"""Panoptic fusion of semantic logits with external instance predictions.

Instances arrive as (class, score, bbox, mask logits) tuples; their mask
logits are thresholded, sorted, pasted onto the canvas, overlap-filtered,
adaptively fused with the matching semantic channel, and combined with
the stuff logits into the per-pixel (semantic, instance) canvas. The
periphery loss scores instance boundaries by the squared range gap to
neighboring background pixels.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError, ValidationError
from .projection import resize_image
from .tensor import Tensor, add, hadamard, sigmoid

SUPPRESS_LOGIT = -1.0e4

INSTANCE_SCHEMA_VERSION = 1


@dataclass
class InstancePrediction:
    """One predicted object: thing class, confidence, bbox, mask logits.

    ``bbox`` is (row0, col0, row1, col1) with exclusive ends. Mask logits
    may cover the bbox extent, the full canvas, or any resolution that
    resizes onto the bbox.
    """

    class_id: int
    score: float
    bbox: tuple
    mask_logits: np.ndarray

    def __post_init__(self):
        self.mask_logits = np.asarray(self.mask_logits, dtype=np.float32)
        if self.mask_logits.ndim != 2:
            raise ValidationError("mask logits must be 2-D",
                                  shape=list(self.mask_logits.shape))
        r0, c0, r1, c1 = self.bbox
        if not (r0 < r1 and c0 < c1):
            raise ValidationError("bbox must have positive extent", bbox=list(self.bbox))
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError("score must lie in [0, 1]", score=self.score)


@dataclass
class FusionConfig:
    confidence_threshold: float = 0.5   # c_t
    overlap_threshold: float = 0.5      # o_t
    min_stuff_area: int = 128           # min_sa

    def __post_init__(self):
        for name in ("confidence_threshold", "overlap_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]", value=v)
        if self.min_stuff_area < 0:
            raise ValidationError("min_stuff_area must be >= 0",
                                  value=self.min_stuff_area)


@dataclass
class PanopticLabel2D:
    """Per-pixel semantic class and instance id (0 for stuff)."""

    semantic: np.ndarray
    instance: np.ndarray

    def __post_init__(self):
        self.semantic = np.asarray(self.semantic, dtype=np.int64)
        self.instance = np.asarray(self.instance, dtype=np.int64)
        if self.semantic.shape != self.instance.shape or self.semantic.ndim != 2:
            raise ValidationError("semantic/instance canvases must be equal 2-D",
                                  semantic=list(self.semantic.shape),
                                  instance=list(self.instance.shape))

    @property
    def shape(self):
        return self.semantic.shape


def prepare_instance_logits(instances, canvas_shape, cfg: FusionConfig):
    """Threshold, sort, paste, and overlap-filter instance masks.

    Returns the kept instances paired with full-canvas logit maps, in
    descending score order (stable for equal scores). An instance is
    dropped when its binarized mask overlaps the union of already-kept
    masks by more than the overlap threshold of its own area.
    """
    h, w = canvas_shape
    scored = [inst for inst in instances if inst.score >= cfg.confidence_threshold]
    scored.sort(key=lambda inst: -inst.score)
    kept = []
    union = np.zeros((h, w), dtype=bool)
    for inst in scored:
        r0, c0, r1, c1 = inst.bbox
        if r0 < 0 or c0 < 0 or r1 > h or c1 > w:
            raise ValidationError("bbox exceeds canvas", bbox=list(inst.bbox),
                                  canvas=[h, w])
        canvas = np.zeros((h, w), dtype=np.float32)
        patch = inst.mask_logits
        if patch.shape == (h, w):
            patch = patch[r0:r1, c0:c1]
        elif patch.shape != (r1 - r0, c1 - c0):
            patch = resize_image(patch, r1 - r0, c1 - c0)
        canvas[r0:r1, c0:c1] = patch
        mask = canvas > 0.0
        area = int(mask.sum())
        overlap = int((mask & union).sum())
        if area > 0 and overlap / area > cfg.overlap_threshold:
            continue
        union |= mask
        kept.append((inst, canvas))
    return kept


def prepare_semantic_logits(sem_logits, instance: InstancePrediction):
    """Select the instance's class channel, suppressed outside its bbox."""
    logits = sem_logits.data if isinstance(sem_logits, Tensor) else np.asarray(sem_logits)
    c = logits.shape[0]
    if not 0 <= instance.class_id < c:
        raise ShapeError("semantic logits have no channel for the instance class",
                         class_id=int(instance.class_id), channels=c)
    out = np.full(logits.shape[1:], SUPPRESS_LOGIT, dtype=np.float32)
    r0, c0, r1, c1 = instance.bbox
    out[r0:r1, c0:c1] = logits[instance.class_id, r0:r1, c0:c1]
    return out


def fuse_logits(instance_logits, semantic_logits) -> Tensor:
    """(sigmoid(a) + sigmoid(b)) * (a + b), elementwise and differentiable."""
    a = instance_logits if isinstance(instance_logits, Tensor) else Tensor(instance_logits)
    b = semantic_logits if isinstance(semantic_logits, Tensor) else Tensor(semantic_logits)
    if a.shape != b.shape:
        raise ShapeError("fused logit operands must share shape",
                         lhs=list(a.shape), rhs=list(b.shape))
    return hadamard(add(sigmoid(a), sigmoid(b)), add(a, b))


def canonical_panoptic(sem_logits, instances, cfg: FusionConfig, class_map,
                       return_soft=False):
    """Fuse stuff logits with per-instance fused logits into one canvas.

    ``instances`` is the ``prepare_instance_logits`` output. Channels are
    the stuff classes followed by one fused channel per kept instance;
    softmax+argmax assigns each pixel, instance ids run contiguously from
    1 in kept order, and any stuff class whose final area falls below the
    configured threshold is relabeled to the ignore id.
    """
    logits = sem_logits.data if isinstance(sem_logits, Tensor) else np.asarray(sem_logits)
    h, w = logits.shape[1:]
    stuff_ids = class_map.stuff_ids()
    channels = [logits[c] for c in stuff_ids]
    fused_tensors = []
    for inst, canvas in instances:
        fl = fuse_logits(Tensor(canvas), Tensor(prepare_semantic_logits(logits, inst)))
        fused_tensors.append(fl)
        channels.append(fl.data)
    stacked = np.stack(channels) if channels else np.zeros((0, h, w), dtype=np.float32)
    if stacked.shape[0] == 0:
        raise ValidationError("no stuff classes and no instances to fuse")

    shifted = stacked - stacked.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=0, keepdims=True)
    winner = np.argmax(probs, axis=0)

    semantic = np.zeros((h, w), dtype=np.int64)
    instance = np.zeros((h, w), dtype=np.int64)
    n_stuff = len(stuff_ids)
    stuff_lut = np.asarray(stuff_ids, dtype=np.int64)
    stuff_px = winner < n_stuff
    semantic[stuff_px] = stuff_lut[winner[stuff_px]]
    for idx, (inst, _) in enumerate(instances):
        won = winner == n_stuff + idx
        semantic[won] = inst.class_id
        instance[won] = idx + 1

    ignore = class_map.ignore_id
    for c in stuff_ids:
        area = int((semantic[stuff_px] == c).sum())
        if 0 < area < cfg.min_stuff_area:
            semantic[stuff_px & (semantic == c)] = ignore

    label = PanopticLabel2D(semantic, instance)
    if return_soft:
        return label, fused_tensors, winner
    return label


def periphery_loss(panoptic: PanopticLabel2D, range_img) -> float:
    """Negated mean over instance boundary pixels of the best squared
    range gap to a background four-neighbor.

    Boundary pixels are instance pixels with a four-neighbor outside
    their instance; only background neighbors (pixels belonging to no
    instance) are eligible for the max. Pixels without any background
    neighbor contribute nothing and do not count toward the mean.
    """
    rng_img = np.asarray(range_img, dtype=np.float64)
    if rng_img.shape != panoptic.shape:
        raise ShapeError("range image extent mismatch",
                         range=list(rng_img.shape), panoptic=list(panoptic.shape))
    inst = panoptic.instance
    if not (inst > 0).any():
        return 0.0
    background = inst == 0
    best = np.full(inst.shape, -np.inf)
    differs = np.zeros(inst.shape, dtype=bool)
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ns = _shift(inst, dr, dc, fill=-1)
        nb = _shift(background, dr, dc, fill=False)
        nr = _shift(rng_img, dr, dc, fill=0.0)
        in_canvas = ns != -1
        differs |= in_canvas & (ns != inst)
        gap = np.where(nb, (rng_img - nr) ** 2, -np.inf)
        best = np.maximum(best, gap)
    boundary = (inst > 0) & differs
    counted = boundary & np.isfinite(best)
    if not counted.any():
        return 0.0
    return float(-best[counted].mean())


def periphery_loss_soft(fused_tensors, panoptic: PanopticLabel2D, range_img) -> Tensor:
    """Differentiable periphery term for training-time refinement.

    Boundary membership and range gaps come from the hard canvas; each
    boundary pixel's contribution is weighted by the sigmoid of its
    winning instance's fused logit, so gradients reach the fusion inputs
    (straight-through on the soft masks).
    """
    from .tensor import affine, dot_const

    rng_img = np.asarray(range_img, dtype=np.float64)
    inst = panoptic.instance
    background = inst == 0
    best = np.full(inst.shape, -np.inf)
    differs = np.zeros(inst.shape, dtype=bool)
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ns = _shift(inst, dr, dc, fill=-1)
        nb = _shift(background, dr, dc, fill=False)
        nr = _shift(rng_img, dr, dc, fill=0.0)
        differs |= (ns != -1) & (ns != inst)
        gap = np.where(nb, (rng_img - nr) ** 2, -np.inf)
        best = np.maximum(best, gap)
    counted = (inst > 0) & differs & np.isfinite(best)
    if not counted.any() or not fused_tensors:
        return Tensor(np.zeros(()))
    n = int(counted.sum())
    terms = []
    for idx, fl in enumerate(fused_tensors):
        mine = counted & (inst == idx + 1)
        if not mine.any():
            continue
        weights = np.where(mine, -best / n, 0.0).reshape(-1)
        terms.append(dot_const(sigmoid(fl), weights.astype(fl.data.dtype)))
    if not terms:
        return Tensor(np.zeros(()))
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


def _shift(arr, dr, dc, fill):
    out = np.full_like(arr, fill)
    src_r = slice(max(dr, 0), arr.shape[0] + min(dr, 0))
    dst_r = slice(max(-dr, 0), arr.shape[0] + min(-dr, 0))
    src_c = slice(max(dc, 0), arr.shape[1] + min(dc, 0))
    dst_c = slice(max(-dc, 0), arr.shape[1] + min(-dc, 0))
    out[dst_r, dst_c] = arr[src_r, src_c]
    return out


# ---------------------------------------------------------------------------
# Instance JSON interface
# ---------------------------------------------------------------------------

def load_instances_json(path):
    """Read the versioned instance-prediction JSON next to its mask files.

    Schema (version 1)::

        {"version": 1,
         "instances": [{"class_id": 1, "score": 0.9,
                        "bbox": [r0, c0, r1, c1],
                        "mask_shape": [h, w],
                        "mask_file": "inst0.f32"}]}

    Mask files hold row-major little-endian float32 logits.
    """
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise DataError(f"cannot read instance JSON: {err}", path=str(path)) from err
    if obj.get("version") != INSTANCE_SCHEMA_VERSION:
        raise DataError("unsupported instance schema version",
                        version=obj.get("version"),
                        expected=INSTANCE_SCHEMA_VERSION)
    out = []
    for i, e in enumerate(obj.get("instances", [])):
        try:
            mh, mw = (int(v) for v in e["mask_shape"])
            mask_path = path.parent / e["mask_file"]
            raw = np.fromfile(mask_path, dtype="<f4")
            if raw.size != mh * mw:
                raise DataError("mask file size does not match mask_shape",
                                path=str(mask_path), expected=mh * mw, found=raw.size)
            out.append(InstancePrediction(
                class_id=int(e["class_id"]), score=float(e["score"]),
                bbox=tuple(int(v) for v in e["bbox"]),
                mask_logits=raw.reshape(mh, mw)))
        except KeyError as err:
            raise DataError(f"instance entry {i} missing key {err}", index=i) from err
    return out


def save_instances_json(path, instances):
    """Write instances plus sibling mask files in the versioned schema."""
    path = Path(path)
    entries = []
    for i, inst in enumerate(instances):
        mask_name = f"{path.stem}_mask{i}.f32"
        inst.mask_logits.astype("<f4").tofile(path.parent / mask_name)
        entries.append({"class_id": int(inst.class_id), "score": float(inst.score),
                        "bbox": [int(v) for v in inst.bbox],
                        "mask_shape": list(inst.mask_logits.shape),
                        "mask_file": mask_name})
    path.write_text(json.dumps({"version": INSTANCE_SCHEMA_VERSION,
                                "instances": entries}, indent=2),
                    encoding="utf-8")
