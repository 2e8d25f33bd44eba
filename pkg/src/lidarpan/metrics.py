"""Panoptic quality family, mIoU, and border-IoU.

Segments are (class, instance) groups; stuff classes form one segment
per class. Ground-truth ignore positions are removed from both sides
before matching, predictions labeled ignore go to a void pool that
creates no false positives, and matching accepts pairs above 0.5 IoU
(provably unique). A brute-force oracle recomputes everything through an
independent dict-based path for testing.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

# instance ids are u16 by format; class ids stay far below 512, so a
# segment code fits 26 bits and a (pred, gt) pair fits comfortably in i64
_CODE_BASE = 1 << 17
_PAIR_BASE = 1 << 26
_VOID = -1


@dataclass
class SegmentMatch:
    """Per-class matching outcome plus the semantic confusion matrix.

    ``tp`` maps class id to a list of (pred_key, gt_key, iou) with keys
    being instance ids for things and 0 for stuff; ``fp``/``fn`` list the
    unmatched keys. ``confusion[pred, gt]`` counts void-filtered elements.
    """

    tp: dict = field(default_factory=dict)
    fp: dict = field(default_factory=dict)
    fn: dict = field(default_factory=dict)
    confusion: np.ndarray = None


@dataclass
class EvalReport:
    per_class: dict
    pq: float
    pq_dagger: float
    sq: float
    rq: float
    miou: float
    pq_things: float
    sq_things: float
    rq_things: float
    pq_stuff: float
    sq_stuff: float
    rq_stuff: float
    tp: int
    fp: int
    fn: int

    def as_dict(self):
        return {
            "per_class": {str(k): dict(v) for k, v in sorted(self.per_class.items())},
            "aggregates": {"PQ": self.pq, "PQ_dagger": self.pq_dagger,
                           "SQ": self.sq, "RQ": self.rq, "mIoU": self.miou},
            "things": {"PQ": self.pq_things, "SQ": self.sq_things, "RQ": self.rq_things},
            "stuff": {"PQ": self.pq_stuff, "SQ": self.sq_stuff, "RQ": self.rq_stuff},
            "counts": {"TP": self.tp, "FP": self.fp, "FN": self.fn},
        }


def _encode(sem, inst, thing_ids, ignore_id):
    """Segment code per element; void (-1) for ignore and unsegmented things."""
    sem = np.asarray(sem, dtype=np.int64)
    inst = np.asarray(inst, dtype=np.int64)
    thing = np.isin(sem, thing_ids)
    code = sem * _CODE_BASE + np.where(thing, inst, 0)
    code[thing & (inst == 0)] = _VOID
    code[sem == ignore_id] = _VOID
    return code


def match_segments(pred, gt, class_map) -> SegmentMatch:
    """Unique IoU>0.5 matching of predicted against ground-truth segments.

    ``pred``/``gt`` expose ``semantic`` and ``instance`` arrays of equal
    length (3D label sets or flattened 2D maps).
    """
    if len(pred.semantic) != len(gt.semantic):
        raise ValidationError("prediction and ground truth lengths differ",
                              pred=len(pred.semantic), gt=len(gt.semantic))
    ignore = class_map.ignore_id
    keep = np.asarray(gt.semantic) != ignore
    p_sem = np.asarray(pred.semantic)[keep]
    p_inst = np.asarray(pred.instance)[keep]
    g_sem = np.asarray(gt.semantic)[keep]
    g_inst = np.asarray(gt.instance)[keep]

    n_cls = class_map.num_classes
    confusion = np.zeros((n_cls, n_cls), dtype=np.int64)
    in_range = (p_sem >= 0) & (p_sem < n_cls)
    np.add.at(confusion, (p_sem[in_range], g_sem[in_range]), 1)

    thing_ids = class_map.thing_ids()
    p_code = _encode(p_sem, p_inst, thing_ids, ignore)
    g_code = _encode(g_sem, g_inst, thing_ids, ignore)

    def areas(codes):
        vals, counts = np.unique(codes[codes != _VOID], return_counts=True)
        return dict(zip(vals.tolist(), counts.tolist()))

    p_area = areas(p_code)
    g_area = areas(g_code)

    both = (p_code != _VOID) & (g_code != _VOID)
    pair = p_code[both] * _PAIR_BASE + g_code[both]
    pvals, pcounts = np.unique(pair, return_counts=True)

    match = SegmentMatch(confusion=confusion)
    matched_p = set()
    matched_g = set()
    for val, inter in sorted(zip(pvals.tolist(), pcounts.tolist())):
        pc = val // _PAIR_BASE
        gc = val % _PAIR_BASE
        cls_p, cls_g = pc // _CODE_BASE, gc // _CODE_BASE
        if cls_p != cls_g:
            continue
        iou = inter / (p_area[pc] + g_area[gc] - inter)
        if iou > 0.5:
            match.tp.setdefault(int(cls_p), []).append(
                (int(pc % _CODE_BASE), int(gc % _CODE_BASE), float(iou)))
            matched_p.add(pc)
            matched_g.add(gc)
    for code in sorted(p_area):
        if code not in matched_p:
            match.fp.setdefault(int(code // _CODE_BASE), []).append(int(code % _CODE_BASE))
    for code in sorted(g_area):
        if code not in matched_g:
            match.fn.setdefault(int(code // _CODE_BASE), []).append(int(code % _CODE_BASE))
    return match


def _confusion_iou(confusion, ignore_id):
    """Per-class IoU from a confusion matrix; pred-ignore makes no FP."""
    conf = confusion.astype(np.float64).copy()
    tp = conf.diagonal().copy()
    fp = conf.sum(axis=1) - tp
    fn = conf.sum(axis=0) - tp
    union = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / np.maximum(union, 1), 0.0)
    return iou, union, conf.sum(axis=0)


def panoptic_scores(match: SegmentMatch, class_map) -> EvalReport:
    """Score a match: per-class PQ/SQ/RQ/IoU plus paper-ordered aggregates.

    Classes absent from both prediction and ground truth are excluded
    from every average; the dagger variant replaces stuff-class PQ by the
    class's semantic IoU.
    """
    ignore = class_map.ignore_id
    thing_ids = set(class_map.thing_ids())
    iou_per_class, union, gt_count = _confusion_iou(match.confusion, ignore)

    per_class = {}
    classes = [c.learning_id for c in class_map.classes if not c.ignore]
    for cls in classes:
        tps = sorted(match.tp.get(cls, []), key=lambda t: t[1])
        n_tp = len(tps)
        n_fp = len(match.fp.get(cls, []))
        n_fn = len(match.fn.get(cls, []))
        if n_tp + n_fp + n_fn == 0:
            continue
        iou_sum = 0.0
        for _, _, v in tps:
            iou_sum += v
        denom = n_tp + 0.5 * n_fp + 0.5 * n_fn
        pq = iou_sum / denom
        sq = iou_sum / n_tp if n_tp else 0.0
        rq = n_tp / denom
        per_class[cls] = {"pq": pq, "sq": sq, "rq": rq,
                          "iou": float(iou_per_class[cls]),
                          "tp": n_tp, "fp": n_fp, "fn": n_fn}

    def mean(vals):
        vals = list(vals)
        return sum(vals) / len(vals) if vals else 0.0

    all_cls = sorted(per_class)
    things = [c for c in all_cls if c in thing_ids]
    stuff = [c for c in all_cls if c not in thing_ids]
    dagger = [per_class[c]["iou"] if c in stuff else per_class[c]["pq"] for c in all_cls]

    miou_classes = [c for c in classes if gt_count[c] > 0]
    miou = mean(float(iou_per_class[c]) for c in miou_classes)

    return EvalReport(
        per_class=per_class,
        pq=mean(per_class[c]["pq"] for c in all_cls),
        pq_dagger=mean(dagger),
        sq=mean(per_class[c]["sq"] for c in all_cls),
        rq=mean(per_class[c]["rq"] for c in all_cls),
        miou=miou,
        pq_things=mean(per_class[c]["pq"] for c in things),
        sq_things=mean(per_class[c]["sq"] for c in things),
        rq_things=mean(per_class[c]["rq"] for c in things),
        pq_stuff=mean(per_class[c]["pq"] for c in stuff),
        sq_stuff=mean(per_class[c]["sq"] for c in stuff),
        rq_stuff=mean(per_class[c]["rq"] for c in stuff),
        tp=sum(v["tp"] for v in per_class.values()),
        fp=sum(v["fp"] for v in per_class.values()),
        fn=sum(v["fn"] for v in per_class.values()),
    )


def merge_matches(matches) -> SegmentMatch:
    """Deterministic ordered reduction of per-scan matches.

    Keys lose their per-scan meaning; only counts and IoU sums feed the
    scores, which is what aggregate evaluation needs.
    """
    out = SegmentMatch(confusion=None)
    for m in matches:
        for cls, lst in sorted(m.tp.items()):
            out.tp.setdefault(cls, []).extend(lst)
        for cls, lst in sorted(m.fp.items()):
            out.fp.setdefault(cls, []).extend(lst)
        for cls, lst in sorted(m.fn.items()):
            out.fn.setdefault(cls, []).extend(lst)
        if m.confusion is not None:
            out.confusion = m.confusion.copy() if out.confusion is None \
                else out.confusion + m.confusion
    return out


def miou(pred_sem, gt_sem, ignore_id, num_classes=None):
    """Confusion-matrix IoU per class and its mean over classes in GT."""
    pred_sem = np.asarray(pred_sem).reshape(-1)
    gt_sem = np.asarray(gt_sem).reshape(-1)
    if pred_sem.shape != gt_sem.shape:
        raise ValidationError("semantic arrays must have equal length",
                              pred=pred_sem.shape[0], gt=gt_sem.shape[0])
    keep = gt_sem != ignore_id
    pred_sem = pred_sem[keep]
    gt_sem = gt_sem[keep]
    n = num_classes if num_classes is not None else int(max(pred_sem.max(initial=0),
                                                            gt_sem.max(initial=0))) + 1
    conf = np.zeros((n, n), dtype=np.int64)
    ok = (pred_sem >= 0) & (pred_sem < n)
    np.add.at(conf, (pred_sem[ok], gt_sem[ok]), 1)
    iou, union, gt_count = _confusion_iou(conf, ignore_id)
    present = [c for c in range(n) if gt_count[c] > 0 and c != ignore_id]
    per_class = {c: float(iou[c]) for c in present}
    mean = sum(per_class.values()) / len(per_class) if per_class else 0.0
    return per_class, mean


def border_confusion(pred2d, gt2d, ignore_id, width=2, num_classes=None):
    """Confusion matrix over the ground-truth border band only."""
    p_sem, p_inst = (np.asarray(a) for a in pred2d)
    g_sem, g_inst = (np.asarray(a) for a in gt2d)
    if p_sem.shape != g_sem.shape or p_sem.ndim != 2:
        raise ValidationError("2-D label maps must share extent",
                              pred=list(p_sem.shape), gt=list(g_sem.shape))
    band = border_band(g_sem, g_inst, width)
    keep = band & (g_sem != ignore_id)
    n = num_classes if num_classes is not None else \
        int(max(p_sem.max(initial=0), g_sem.max(initial=0))) + 1
    conf = np.zeros((n, n), dtype=np.int64)
    ok = keep & (p_sem >= 0) & (p_sem < n)
    np.add.at(conf, (p_sem[ok], g_sem[ok]), 1)
    return conf


def iou_from_confusion(conf, ignore_id):
    """Per-class IoU dict for classes present in the confusion's GT side."""
    iou, union, gt_count = _confusion_iou(conf, ignore_id)
    return {c: float(iou[c]) for c in range(conf.shape[0])
            if gt_count[c] > 0 and c != ignore_id}


def border_iou(pred2d, gt2d, ignore_id, width=2, class_subset=None):
    """Per-class IoU restricted to the ground-truth segment border band.

    The band holds every pixel within Chebyshev distance ``width`` of a
    pixel carrying a different ground-truth segment. ``pred2d``/``gt2d``
    are (semantic, instance) map pairs of equal extent; classes absent
    from the band are excluded.
    """
    conf = border_confusion(pred2d, gt2d, ignore_id, width)
    per_class = iou_from_confusion(conf, ignore_id)
    if class_subset is not None:
        per_class = {c: v for c, v in per_class.items() if c in set(class_subset)}
    return per_class


def border_band(gt_sem, gt_inst, width):
    """Pixels with a differing ground-truth segment within Chebyshev ``width``."""
    code = np.asarray(gt_sem) * _CODE_BASE + np.asarray(gt_inst)
    h, w = code.shape
    band = np.zeros((h, w), dtype=bool)
    for dr in range(-width, width + 1):
        for dc in range(-width, width + 1):
            if dr == 0 and dc == 0:
                continue
            shifted = np.full((h, w), -1, dtype=np.int64)
            src_r = slice(max(dr, 0), h + min(dr, 0))
            dst_r = slice(max(-dr, 0), h + min(-dr, 0))
            src_c = slice(max(dc, 0), w + min(dc, 0))
            dst_c = slice(max(-dc, 0), w + min(-dc, 0))
            shifted[dst_r, dst_c] = code[src_r, src_c]
            band |= (shifted != -1) & (shifted != code)
    return band


# ---------------------------------------------------------------------------
# Brute-force oracle
# ---------------------------------------------------------------------------

def pq_oracle(pred, gt, class_map) -> EvalReport:
    """Exhaustive dict-based recomputation of the panoptic scores.

    Builds the full intersection table by iterating elements one by one,
    matches greedily over the >0.5 threshold, and recomputes every score
    through plain Python arithmetic. Must agree exactly with
    ``panoptic_scores(match_segments(...))`` on small instances.
    """
    ignore = class_map.ignore_id
    thing_ids = set(class_map.thing_ids())

    def key_of(sem, inst):
        if sem == ignore:
            return None
        if sem in thing_ids:
            return (sem, inst) if inst != 0 else None
        return (sem, 0)

    inter = {}
    p_area = {}
    g_area = {}
    n_cls = class_map.num_classes
    confusion = [[0] * n_cls for _ in range(n_cls)]
    for ps, pi, gs, gi in zip(np.asarray(pred.semantic).tolist(),
                              np.asarray(pred.instance).tolist(),
                              np.asarray(gt.semantic).tolist(),
                              np.asarray(gt.instance).tolist()):
        if gs == ignore:
            continue
        if 0 <= ps < n_cls:
            confusion[ps][gs] += 1
        pk = key_of(ps, pi)
        gk = key_of(gs, gi)
        if pk is not None:
            p_area[pk] = p_area.get(pk, 0) + 1
        if gk is not None:
            g_area[gk] = g_area.get(gk, 0) + 1
        if pk is not None and gk is not None:
            inter[(pk, gk)] = inter.get((pk, gk), 0) + 1

    tps = {}
    matched_p = set()
    matched_g = set()
    for (pk, gk), cnt in sorted(inter.items()):
        if pk[0] != gk[0]:
            continue
        iou = cnt / (p_area[pk] + g_area[gk] - cnt)
        if iou > 0.5:
            tps.setdefault(pk[0], []).append((pk[1], gk[1], iou))
            matched_p.add(pk)
            matched_g.add(gk)

    per_class = {}
    classes = [c.learning_id for c in class_map.classes if not c.ignore]
    for cls in classes:
        tp_list = sorted(tps.get(cls, []), key=lambda t: t[1])
        n_tp = len(tp_list)
        n_fp = sum(1 for k in p_area if k[0] == cls and k not in matched_p)
        n_fn = sum(1 for k in g_area if k[0] == cls and k not in matched_g)
        if n_tp + n_fp + n_fn == 0:
            continue
        iou_sum = 0.0
        for _, _, v in tp_list:
            iou_sum += v
        col = sum(confusion[r][cls] for r in range(n_cls))
        row = sum(confusion[cls][g] for g in range(n_cls))
        u = col + row - confusion[cls][cls]
        sem_iou = confusion[cls][cls] / u if u > 0 else 0.0
        denom = n_tp + 0.5 * n_fp + 0.5 * n_fn
        per_class[cls] = {"pq": iou_sum / denom,
                          "sq": iou_sum / n_tp if n_tp else 0.0,
                          "rq": n_tp / denom,
                          "iou": sem_iou,
                          "tp": n_tp, "fp": n_fp, "fn": n_fn}

    def mean(vals):
        vals = list(vals)
        return sum(vals) / len(vals) if vals else 0.0

    all_cls = sorted(per_class)
    things = [c for c in all_cls if c in thing_ids]
    stuff = [c for c in all_cls if c not in thing_ids]
    gt_present = [c for c in classes
                  if sum(confusion[r][c] for r in range(n_cls)) > 0]
    iou_of = {}
    for c in gt_present:
        col = sum(confusion[r][c] for r in range(n_cls))
        row = sum(confusion[c][g] for g in range(n_cls))
        u = col + row - confusion[c][c]
        iou_of[c] = confusion[c][c] / u if u > 0 else 0.0

    return EvalReport(
        per_class=per_class,
        pq=mean(per_class[c]["pq"] for c in all_cls),
        pq_dagger=mean(per_class[c]["iou"] if c in stuff else per_class[c]["pq"]
                       for c in all_cls),
        sq=mean(per_class[c]["sq"] for c in all_cls),
        rq=mean(per_class[c]["rq"] for c in all_cls),
        miou=mean(iou_of[c] for c in gt_present),
        pq_things=mean(per_class[c]["pq"] for c in things),
        sq_things=mean(per_class[c]["sq"] for c in things),
        rq_things=mean(per_class[c]["rq"] for c in things),
        pq_stuff=mean(per_class[c]["pq"] for c in stuff),
        sq_stuff=mean(per_class[c]["sq"] for c in stuff),
        rq_stuff=mean(per_class[c]["rq"] for c in stuff),
        tp=sum(v["tp"] for v in per_class.values()),
        fp=sum(v["fp"] for v in per_class.values()),
        fn=sum(v["fn"] for v in per_class.values()),
    )
