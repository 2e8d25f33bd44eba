"""Readers and writers for LiDAR scans and packed panoptic labels.

Scans are ``.bin`` files of little-endian float32 quadruples
(x, y, z, intensity). Labels are ``.label`` files of little-endian u32
values packing the semantic id in the low 16 bits and the instance id in
the high 16 bits. Class maps arrive as JSON and drive remapping to
contiguous learning ids plus small-instance filtering.
"""

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import DataError, ValidationError

SCAN_RECORD_BYTES = 16
LABEL_RECORD_BYTES = 4


@dataclass
class PointCloud:
    """N x 4 array of (x, y, z, intensity)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValidationError("point cloud must be N x 4", shape=list(pts.shape))
        self.points = pts

    def __len__(self):
        return self.points.shape[0]

    @property
    def xyz(self):
        return self.points[:, :3]

    @property
    def ranges(self):
        return np.sqrt((self.points[:, :3].astype(np.float64) ** 2).sum(axis=1)).astype(np.float32)


@dataclass
class LabelSet:
    """Per-point semantic and instance ids (instance 0 = no instance)."""

    semantic: np.ndarray
    instance: np.ndarray

    def __post_init__(self):
        self.semantic = np.asarray(self.semantic, dtype=np.int64)
        self.instance = np.asarray(self.instance, dtype=np.int64)
        if self.semantic.shape != self.instance.shape or self.semantic.ndim != 1:
            raise ValidationError("semantic/instance arrays must be equal-length 1-D",
                                  semantic=list(self.semantic.shape),
                                  instance=list(self.instance.shape))

    def __len__(self):
        return self.semantic.shape[0]


@dataclass
class ClassDef:
    name: str
    raw_ids: list
    learning_id: int
    thing: bool = False
    ignore: bool = False


@dataclass
class ClassMap:
    classes: list
    min_instance_points: int = 50
    raw_to_learning: dict = field(init=False)

    def __post_init__(self):
        ids = sorted(c.learning_id for c in self.classes)
        if ids != list(range(len(ids))):
            raise ValidationError("learning ids must be contiguous from 0", ids=ids)
        ignores = [c.learning_id for c in self.classes if c.ignore]
        if len(ignores) != 1:
            raise ValidationError("class map needs exactly one ignore class", ignores=ignores)
        self.raw_to_learning = {}
        for c in self.classes:
            for raw in c.raw_ids:
                if raw in self.raw_to_learning:
                    raise ValidationError("raw id mapped twice", raw_id=raw)
                self.raw_to_learning[raw] = c.learning_id

    @property
    def ignore_id(self):
        return next(c.learning_id for c in self.classes if c.ignore)

    @property
    def num_classes(self):
        return len(self.classes)

    def thing_ids(self):
        return sorted(c.learning_id for c in self.classes if c.thing)

    def stuff_ids(self):
        """Stuff learning ids, ignore class excluded."""
        return sorted(c.learning_id for c in self.classes
                      if not c.thing and not c.ignore)

    def is_thing(self, learning_id):
        return learning_id in set(self.thing_ids())

    @classmethod
    def from_json(cls, obj):
        try:
            classes = [ClassDef(name=e["name"], raw_ids=list(e["raw_ids"]),
                                learning_id=int(e["learning_id"]),
                                thing=bool(e.get("thing", False)),
                                ignore=bool(e.get("ignore", False)))
                       for e in obj["classes"]]
            return cls(classes=classes,
                       min_instance_points=int(obj.get("min_instance_points", 50)))
        except (KeyError, TypeError) as err:
            raise ValidationError(f"malformed class map: {err}") from err

    @classmethod
    def from_file(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    @classmethod
    def preset(cls, name):
        """Load a bundled preset: 'dense-19' or 'sparse-16'."""
        fname = {"dense-19": "dense_19.json", "sparse-16": "sparse_16.json"}.get(name)
        if fname is None:
            raise ValidationError("unknown class-map preset", preset=name)
        ref = resources.files("lidarpan.data.class_maps").joinpath(fname)
        return cls.from_json(json.loads(ref.read_text(encoding="utf-8")))


def read_scan(data: bytes) -> PointCloud:
    """Decode packed float32 quadruples into a point cloud."""
    if len(data) % SCAN_RECORD_BYTES:
        raise DataError("truncated scan record",
                        offset=len(data) - len(data) % SCAN_RECORD_BYTES,
                        length=len(data))
    pts = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    if pts.size and not np.isfinite(pts).all():
        bad = int(np.argwhere(~np.isfinite(pts))[0, 0])
        raise DataError("non-finite value in scan", offset=bad * SCAN_RECORD_BYTES)
    return PointCloud(pts.copy())


def write_scan(cloud: PointCloud) -> bytes:
    return np.ascontiguousarray(cloud.points, dtype="<f4").tobytes()


def read_labels(data: bytes) -> LabelSet:
    """Decode packed u32 labels: low 16 bits semantic, high 16 instance."""
    if len(data) % LABEL_RECORD_BYTES:
        raise DataError("truncated label record",
                        offset=len(data) - len(data) % LABEL_RECORD_BYTES,
                        length=len(data))
    packed = np.frombuffer(data, dtype="<u4")
    return LabelSet(semantic=(packed & 0xFFFF).astype(np.int64),
                    instance=(packed >> 16).astype(np.int64))


def write_labels(labels: LabelSet) -> bytes:
    sem = labels.semantic
    inst = labels.instance
    if sem.size and (sem.min() < 0 or sem.max() > 0xFFFF):
        raise DataError("semantic id out of u16 range",
                        min=int(sem.min()), max=int(sem.max()))
    if inst.size and (inst.min() < 0 or inst.max() > 0xFFFF):
        raise DataError("instance id out of u16 range",
                        min=int(inst.min()), max=int(inst.max()))
    packed = (inst.astype(np.uint32) << 16) | sem.astype(np.uint32)
    return packed.astype("<u4").tobytes()


def remap_and_filter(labels: LabelSet, cmap: ClassMap,
                     filtered_to_ignore: bool = False) -> LabelSet:
    """Remap raw semantic ids to learning ids and drop tiny instances.

    Instances with strictly fewer than ``min_instance_points`` points lose
    their instance id (set to 0) but keep their class; with
    ``filtered_to_ignore`` they are relabeled to the ignore class instead.
    Stuff-class points always carry instance id 0.
    """
    raw = labels.semantic
    unknown = sorted(set(int(v) for v in np.unique(raw)) - set(cmap.raw_to_learning))
    if unknown:
        raise DataError("raw semantic id not in class map", raw_ids=unknown)
    lut_size = max(cmap.raw_to_learning) + 1 if cmap.raw_to_learning else 1
    lut = np.zeros(lut_size, dtype=np.int64)
    for k, v in cmap.raw_to_learning.items():
        lut[k] = v
    sem = lut[raw]
    inst = labels.instance.copy()

    thing = np.isin(sem, cmap.thing_ids())
    inst[~thing] = 0

    ids, counts = np.unique(inst[inst != 0], return_counts=True)
    small = set(int(i) for i, c in zip(ids, counts) if c < cmap.min_instance_points)
    if small:
        mask = np.isin(inst, list(small))
        inst[mask] = 0
        if filtered_to_ignore:
            sem[mask] = cmap.ignore_id
    return LabelSet(semantic=sem, instance=inst)
