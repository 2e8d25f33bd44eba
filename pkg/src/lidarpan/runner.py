"""Desk-scale label generator: semantic pipeline plus connected-component
instance ids.

The full-scale design pairs the semantic head with a detection head; at
desk scale that head is an external interface, so pseudo-label
generation derives instance ids from connected components of thing-class
pixels. Control parameters the detection head would consume (NMS IoU,
score threshold, proposal count) are accepted and ignored here.
"""

import numpy as np

from .heads import SemanticPipeline
from .pcl_io import LabelSet
from .projection import ProjectionConfig, backproject_knn, project
from .pseudo_label import ControlParams
from .tensor import softmax_channelwise


def label_components(mask):
    """4-connected component labels (1..n) of a boolean mask."""
    h, w = mask.shape
    out = np.zeros((h, w), dtype=np.int64)
    nxt = 1
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or out[r, c]:
                continue
            stack = [(r, c)]
            out[r, c] = nxt
            while stack:
                rr, cc = stack.pop()
                for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                    nr, nc = rr + dr, cc + dc
                    if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not out[nr, nc]:
                        out[nr, nc] = nxt
                        stack.append((nr, nc))
            nxt += 1
    return out, nxt - 1


class SemanticRunner:
    """Callable (cloud, params) -> LabelSet over the toy pipeline."""

    def __init__(self, pipeline: SemanticPipeline, class_map,
                 proj_config: ProjectionConfig, knn_k=5, knn_window=(5, 5)):
        self.pipeline = pipeline
        self.class_map = class_map
        self.proj_config = proj_config
        self.knn_k = knn_k
        self.knn_window = knn_window

    def __call__(self, cloud, params: ControlParams) -> LabelSet:
        ignore = self.class_map.ignore_id
        if len(cloud) == 0:
            return LabelSet(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
        img, _ = project(cloud, self.proj_config, ignore_id=ignore)
        logits = self.pipeline(img.channels, valid=img.valid)
        probs = softmax_channelwise(logits).data
        sem2d = np.argmax(probs, axis=0).astype(np.int64)
        confident = probs.max(axis=0) >= params.softmax_threshold
        sem2d[~(confident & img.valid)] = ignore

        for cls in self.class_map.stuff_ids():
            area = int((sem2d == cls).sum())
            if 0 < area < params.min_stuff_area:
                sem2d[sem2d == cls] = ignore

        inst2d = np.zeros_like(sem2d)
        next_id = 1
        for cls in self.class_map.thing_ids():
            comp, n = label_components(sem2d == cls)
            inst2d[comp > 0] = comp[comp > 0] + (next_id - 1)
            next_id += n

        labels = backproject_knn((sem2d, inst2d), img, cloud,
                                 k=self.knn_k, window=self.knn_window,
                                 ignore_id=ignore)
        return labels
