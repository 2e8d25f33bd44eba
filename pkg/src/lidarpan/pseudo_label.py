"""Regularized pseudo-label generation.

A grid search over inference-time control parameters picks the setting
that maximizes (TP - FP) / TP subject to a PQ floor on validation data;
labels generated with the winning setting are then cleaned by dropping
instances below a point-count limit.
"""

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import DataError, InfeasibleError, ValidationError
from .pcl_io import LabelSet, read_scan, write_labels


@dataclass(frozen=True)
class ControlParams:
    """Inference-time knobs exposed by the label generator."""

    overlap_threshold: float = 0.5
    min_stuff_area: int = 128
    confidence_threshold: float = 0.5
    softmax_threshold: float = 0.0
    nms_iou: float = 0.5
    score_threshold: float = 0.05
    proposal_count: int = 100

    def __post_init__(self):
        for name in ("overlap_threshold", "confidence_threshold",
                     "softmax_threshold", "nms_iou", "score_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]", value=v)
        if self.proposal_count < 1:
            raise ValidationError("proposal_count must be >= 1",
                                  value=self.proposal_count)
        if self.min_stuff_area < 0:
            raise ValidationError("min_stuff_area must be >= 0",
                                  value=self.min_stuff_area)

    def fingerprint(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass
class PLGConfig:
    pq_cutoff: float = 0.45
    p_limit: int = 30

    def __post_init__(self):
        if not 0.0 <= self.pq_cutoff <= 1.0:
            raise ValidationError("pq_cutoff must lie in [0, 1]", value=self.pq_cutoff)
        if self.p_limit < 0:
            raise ValidationError("p_limit must be >= 0", value=self.p_limit)


def expand_grid(spec):
    """Cartesian product of per-parameter value lists, in field order.

    ``spec`` maps ControlParams field names to value lists; omitted
    fields keep their defaults. Expansion order is deterministic: fields
    in declaration order, values in listed order.
    """
    names = [f.name for f in fields(ControlParams)]
    unknown = sorted(set(spec) - set(names))
    if unknown:
        raise ValidationError("unknown control parameter in grid", names=unknown)
    axes = [(n, list(spec[n])) for n in names if n in spec]
    if not axes:
        return [ControlParams()]
    out = []
    for combo in itertools.product(*(vals for _, vals in axes)):
        out.append(ControlParams(**dict(zip((n for n, _ in axes), combo))))
    return out


def grid_search_control(evaluate, grid, cfg: PLGConfig) -> ControlParams:
    """Pick the grid point maximizing (TP - FP) / TP with PQ >= cutoff.

    ``evaluate`` maps ControlParams to (TP, FP, PQ) on the validation
    set. Ties break toward higher PQ, then earlier grid order. Raises a
    structured infeasible error naming the best infeasible PQ when no
    point clears the cutoff with TP > 0.
    """
    grid = list(grid)
    if not grid:
        raise ValidationError("grid must be nonempty")
    best = None
    best_key = None
    best_infeasible_pq = None
    for idx, params in enumerate(grid):
        tp, fp, pq = evaluate(params)
        if pq < cfg.pq_cutoff or tp <= 0:
            if best_infeasible_pq is None or pq > best_infeasible_pq:
                best_infeasible_pq = pq
            continue
        key = (-(tp - fp) / tp, -pq, idx)
        if best_key is None or key < best_key:
            best_key = key
            best = params
    if best is None:
        raise InfeasibleError("no grid point satisfies the PQ cutoff",
                              pq_cutoff=cfg.pq_cutoff,
                              best_infeasible_pq=best_infeasible_pq,
                              grid_size=len(grid))
    return best


def filter_small_instances(labels: LabelSet, p_limit: int,
                           ignore_id: int = 0) -> LabelSet:
    """Relabel instances with fewer than ``p_limit`` points as unlabeled.

    Both ids are cleared: semantic becomes the ignore id, instance 0.
    Idempotent; instances holding exactly ``p_limit`` points survive.
    """
    sem = labels.semantic.copy()
    inst = labels.instance.copy()
    ids, counts = np.unique(inst[inst != 0], return_counts=True)
    small = [int(i) for i, c in zip(ids, counts) if c < p_limit]
    if small:
        mask = np.isin(inst, small)
        sem[mask] = ignore_id
        inst[mask] = 0
    return LabelSet(sem, inst)


def count_instances(labels: LabelSet) -> int:
    return int(np.unique(labels.instance[labels.instance != 0]).size)


def generate_pseudo_labels(runner, scan_paths, params: ControlParams,
                           cfg: PLGConfig, out_dir, ignore_id: int = 0):
    """Run inference per scan, filter tiny instances, write labels + manifest.

    ``runner(cloud, params) -> LabelSet`` is the label-generator
    interface. Unreadable scans are recorded in the manifest and skipped.
    Returns the manifest dict (also written to ``out_dir/manifest.json``).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for scan_path in scan_paths:
        scan_path = Path(scan_path)
        try:
            cloud = read_scan(scan_path.read_bytes())
        except (OSError, DataError) as err:
            entries.append({"scan": str(scan_path), "error": str(err)})
            continue
        raw = runner(cloud, params)
        filtered = filter_small_instances(raw, cfg.p_limit, ignore_id)
        label_path = out_dir / (scan_path.stem + ".label")
        label_path.write_bytes(write_labels(filtered))
        entries.append({
            "scan": str(scan_path),
            "label": str(label_path),
            "instances_before": count_instances(raw),
            "instances_after": count_instances(filtered),
        })
    manifest = {
        "version": 1,
        "parameter_fingerprint": params.fingerprint(),
        "p_limit": cfg.p_limit,
        "entries": entries,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return manifest
