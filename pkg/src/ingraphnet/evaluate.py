"""Role mAP over detected <human, verb, object> triplets.

A detection is a true positive when an unmatched ground-truth pair with the same
verb in the same image overlaps it with IoU >= 0.5 on both the human and the
object box. AP is the all-point area under the precision envelope.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction

from .dataset import Annotation, Detection
from .features import BoxPx

IOU_THRESHOLD = 0.5

REPORT_SCHEMA = {
    "type": "object",
    "required": ["role_map", "per_category_ap", "gt_count", "num_detections", "iou_threshold"],
    "additionalProperties": False,
    "properties": {
        "role_map": {"type": "number", "minimum": 0, "maximum": 1},
        "per_category_ap": {
            "type": "object",
            "patternProperties": {"^[0-9]+$": {"type": "number", "minimum": 0, "maximum": 1}},
            "additionalProperties": False,
        },
        "gt_count": {
            "type": "object",
            "patternProperties": {"^[0-9]+$": {"type": "integer", "minimum": 0}},
            "additionalProperties": False,
        },
        "num_detections": {"type": "integer", "minimum": 0},
        "iou_threshold": {"type": "number"},
    },
}


@dataclass(frozen=True)
class GTPair:
    image_id: str
    human_box: BoxPx
    object_box: BoxPx
    verb: int


@dataclass
class MatchResult:
    is_tp: list[bool]  # aligned with the input detection order
    gt_count: dict[int, int]
    matched_gt: list[int | None] = field(default_factory=list)  # index into the GT list, or None


@dataclass
class EvalReport:
    per_category_ap: dict[int, float]
    role_map: float
    gt_count: dict[int, int]
    num_detections: int

    def to_json(self) -> dict:
        return {
            "role_map": self.role_map,
            "per_category_ap": {str(k): v for k, v in sorted(self.per_category_ap.items())},
            "gt_count": {str(k): v for k, v in sorted(self.gt_count.items())},
            "num_detections": self.num_detections,
            "iou_threshold": IOU_THRESHOLD,
        }

    def table(self) -> str:
        lines = [f"{'verb':>6}  {'#gt':>5}  {'AP':>8}"]
        for k in sorted(self.per_category_ap):
            lines.append(f"{k:>6}  {self.gt_count.get(k, 0):>5}  {self.per_category_ap[k]:>8.4f}")
        lines.append(f"{'mAP':>6}  {sum(self.gt_count.values()):>5}  {self.role_map:>8.4f}")
        return "\n".join(lines)


def iou(a: BoxPx, b: BoxPx) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def gt_pairs(anns: list[Annotation]) -> list[GTPair]:
    return [
        GTPair(a.image_id, a.humans[h], a.objects[o][0], v)
        for a in anns
        for h, o, v in a.hois
    ]


def score_order(dets: list[Detection]) -> list[int]:
    """Indices by descending score; ties by image id, then input order."""
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].image_id, i))


def match_detections(dets: list[Detection], gts: list[GTPair], iou_thresh: float = IOU_THRESHOLD) -> MatchResult:
    by_group: dict[tuple[str, int], list[int]] = defaultdict(list)
    for j, g in enumerate(gts):
        by_group[(g.image_id, g.verb)].append(j)
    gt_count: dict[int, int] = defaultdict(int)
    for g in gts:
        gt_count[g.verb] += 1

    used = [False] * len(gts)
    is_tp = [False] * len(dets)
    matched: list[int | None] = [None] * len(dets)
    for i in score_order(dets):
        d = dets[i]
        best, best_q = None, -1.0
        for j in by_group.get((d.image_id, d.verb), ()):
            if used[j]:
                continue
            q = min(iou(d.human_box, gts[j].human_box), iou(d.object_box, gts[j].object_box))
            if q >= iou_thresh and q > best_q:
                best, best_q = j, q
        if best is not None:
            used[best] = True
            is_tp[i] = True
            matched[i] = best
    return MatchResult(is_tp=is_tp, gt_count=dict(gt_count), matched_gt=matched)


def _exact_ap(flags, scores, gt_count: int, tie_keys=None) -> Fraction:
    if gt_count <= 0 or len(flags) == 0:
        return Fraction(0)
    n = len(flags)
    keys = list(tie_keys) if tie_keys is not None else list(range(n))
    order = sorted(range(n), key=lambda i: (-scores[i], keys[i]))
    hits = [bool(flags[i]) for i in order]
    precision, tp = [], 0
    for rank, hit in enumerate(hits, start=1):
        tp += hit
        precision.append(Fraction(tp, rank))
    # precision envelope: best precision at this rank or any later one
    total, best = Fraction(0), Fraction(0)
    for rank in range(n - 1, -1, -1):
        best = max(best, precision[rank])
        if hits[rank]:
            total += best
    return total / gt_count


def average_precision(flags, scores, gt_count: int, tie_keys=None) -> float:
    """All-point AP for one category.

    ``flags`` are TP booleans aligned with ``scores``; ``tie_keys`` (default:
    input position) order equal scores. Computed in rational arithmetic and
    rounded once, so the value does not depend on summation order.
    """
    return float(_exact_ap(flags, scores, gt_count, tie_keys))


def role_map(dets: list[Detection], gts: list[GTPair], iou_thresh: float = IOU_THRESHOLD) -> EvalReport:
    match = match_detections(dets, gts, iou_thresh)
    per_verb: dict[int, list[int]] = defaultdict(list)
    for i, d in enumerate(dets):
        per_verb[d.verb].append(i)
    exact = {}
    for verb, count in sorted(match.gt_count.items()):
        idx = per_verb.get(verb, [])
        exact[verb] = _exact_ap(
            [match.is_tp[i] for i in idx],
            [dets[i].score for i in idx],
            count,
            tie_keys=[(dets[i].image_id, i) for i in idx],
        )
    mean = float(sum(exact.values()) / len(exact)) if exact else 0.0
    aps = {k: float(v) for k, v in exact.items()}
    return EvalReport(per_category_ap=aps, role_map=mean, gt_count=dict(match.gt_count), num_detections=len(dets))
