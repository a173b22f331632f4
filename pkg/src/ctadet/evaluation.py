"""Lesion- and volume-level evaluation: FROC, ROC/AUC, fixed-threshold
confusion metrics, stratified breakdowns, bootstrap CIs, and Fisher's
exact test.

A lesion counts as found when at least one candidate has its center
inside the lesion box; a candidate whose center lies in no lesion is a
false positive.  FROC sweeps the distinct candidate probabilities as
thresholds (a candidate is active at threshold t when its probability is
>= t) and reports false positives per volume against lesion sensitivity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .anchors import BoundingBox, Lesion
from .postproc import CandidateDetection

DEFAULT_FPPV_GRID = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
DEFAULT_OPERATING_FPPVS = (0.25, 1.0)
DEFAULT_BOOTSTRAP_RESAMPLES = 1000
DEFAULT_BOOTSTRAP_LEVEL = 0.95


class StatisticUndefined(ValueError):
    """Raised when a statistic has no value on the given data (e.g. FROC
    with zero lesions, AUC with a single class).  Bootstrap resampling
    redraws on this error."""


def _as_boxes(lesions: Sequence) -> list[BoundingBox]:
    return [l.box if isinstance(l, Lesion) else l for l in lesions]


@dataclass(frozen=True)
class MatchResult:
    """Candidate/lesion matching for one volume.

    ``lesion_hit_probs[j]`` is the highest probability of any candidate
    centered inside lesion j (-inf when none), so lesion j is found at
    threshold t iff ``lesion_hit_probs[j] >= t``.  A candidate inside two
    overlapping lesions counts for both lesions' hit status but is
    assigned to at most one of them.
    """

    n_lesions: int
    lesion_hit_probs: tuple[float, ...]
    candidate_probs: tuple[float, ...]
    candidate_is_tp: tuple[bool, ...]
    candidate_lesion: tuple[Optional[int], ...]

    @property
    def fp_probs(self) -> tuple[float, ...]:
        return tuple(
            p for p, tp in zip(self.candidate_probs, self.candidate_is_tp) if not tp
        )


def match_lesions(
    cands: Sequence[CandidateDetection], lesions: Sequence
) -> MatchResult:
    """Match candidates to lesions by closed-interval center containment."""
    boxes = _as_boxes(lesions)
    inside = [
        [j for j, box in enumerate(boxes) if box.contains(c.box.center)]
        for c in cands
    ]
    hit_probs = [-math.inf] * len(boxes)
    for c, lesion_ids in zip(cands, inside):
        for j in lesion_ids:
            hit_probs[j] = max(hit_probs[j], c.probability)
    # assignment: highest-probability candidates claim lesions first
    order = sorted(range(len(cands)), key=lambda i: (-cands[i].probability, i))
    assigned: list[Optional[int]] = [None] * len(cands)
    claimed = set()
    for i in order:
        for j in inside[i]:
            if j not in claimed:
                assigned[i] = j
                claimed.add(j)
                break
    return MatchResult(
        n_lesions=len(boxes),
        lesion_hit_probs=tuple(hit_probs),
        candidate_probs=tuple(c.probability for c in cands),
        candidate_is_tp=tuple(bool(ids) for ids in inside),
        candidate_lesion=tuple(assigned),
    )


@dataclass(frozen=True)
class FrocCurve:
    """One point per distinct candidate probability, descending."""

    thresholds: tuple[float, ...]
    points: tuple[tuple[float, float], ...]  # (fppv, sensitivity)
    n_volumes: int
    n_lesions: int


def _curve_from_matches(matches: Sequence[MatchResult], n_volumes: int) -> FrocCurve:
    n_lesions = sum(m.n_lesions for m in matches)
    if n_lesions == 0:
        raise StatisticUndefined("FROC requires at least one lesion")
    all_probs = sorted(
        {p for m in matches for p in m.candidate_probs}, reverse=True
    )
    hit_sorted = np.sort(
        [p for m in matches for p in m.lesion_hit_probs if p > -math.inf]
    )
    fp_sorted = np.sort([p for m in matches for p in m.fp_probs])
    thresholds = np.asarray(all_probs)
    # counts of values >= t via right-side search on the ascending arrays
    hits = hit_sorted.size - np.searchsorted(hit_sorted, thresholds, side="left")
    fps = fp_sorted.size - np.searchsorted(fp_sorted, thresholds, side="left")
    points = tuple(
        (float(f) / n_volumes, float(h) / n_lesions) for f, h in zip(fps, hits)
    )
    return FrocCurve(tuple(all_probs), points, n_volumes, n_lesions)


def froc(dataset: Sequence[tuple[Sequence, Sequence[CandidateDetection]]]) -> FrocCurve:
    """FROC over a dataset of (lesions, candidates) pairs, one per volume.

    Volumes without lesions still count in the false-positive-per-volume
    denominator.
    """
    matches = [match_lesions(cands, lesions) for lesions, cands in dataset]
    return _curve_from_matches(matches, len(dataset))


def sensitivity_at_fppv(curve: FrocCurve, fppv: float) -> float:
    """Step-function reading: the best sensitivity at or below the queried
    false-positive rate; 0 when no curve point qualifies."""
    if fppv < 0:
        raise ValueError(f"fppv must be >= 0, got {fppv}")
    best = 0.0
    for f, s in curve.points:
        if f <= fppv and s > best:
            best = s
    return best


def avg_sensitivity(
    curve: FrocCurve, fppvs: Sequence[float] = DEFAULT_FPPV_GRID
) -> float:
    """Mean sensitivity over the reference FPPV grid."""
    return float(sum(sensitivity_at_fppv(curve, f) for f in fppvs) / len(fppvs))


def threshold_for_operating_point(curve: FrocCurve, target_fppv: float) -> float:
    """Smallest candidate-probability threshold whose FPPV stays within the
    target (i.e. the highest-sensitivity operating point at that budget).

    Returns +inf when even the strictest threshold exceeds the target.
    """
    if target_fppv < 0:
        raise ValueError(f"target_fppv must be >= 0, got {target_fppv}")
    chosen = math.inf
    for t, (f, _) in zip(curve.thresholds, curve.points):
        if f <= target_fppv:
            chosen = t
        else:
            break  # fppv is non-decreasing as thresholds descend
    return chosen


def volume_score(cands: Sequence[CandidateDetection]) -> float:
    """Volume-level score: the maximum candidate probability, 0 when empty."""
    return max((c.probability for c in cands), default=0.0)


@dataclass(frozen=True)
class RocCurve:
    thresholds: tuple[float, ...]
    points: tuple[tuple[float, float], ...]  # (fpr, tpr), score >= threshold


def roc_auc(scores: Sequence[tuple[float, bool]]) -> tuple[RocCurve, float]:
    """Volume-level ROC and AUC.

    AUC is the rank statistic (fraction of positive/negative pairs ordered
    correctly, ties counted one-half), equivalent to trapezoidal
    integration of the ROC curve.
    """
    pos = np.sort([s for s, flag in scores if flag])
    neg = np.sort([s for s, flag in scores if not flag])
    if pos.size == 0 or neg.size == 0:
        raise StatisticUndefined("AUC requires both positive and negative volumes")
    below = np.searchsorted(neg, pos, side="left")
    equal = np.searchsorted(neg, pos, side="right") - below
    auc = float((below.sum() + 0.5 * equal.sum()) / (pos.size * neg.size))
    thresholds = sorted({s for s, _ in scores}, reverse=True)
    points = tuple(
        (
            float(neg.size - np.searchsorted(neg, t, side="left")) / neg.size,
            float(pos.size - np.searchsorted(pos, t, side="left")) / pos.size,
        )
        for t in thresholds
    )
    return RocCurve(tuple(thresholds), points), auc


@dataclass(frozen=True)
class ConfusionMetrics:
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    sensitivity: float
    specificity: float
    f1: float


def _ratio(num: int, den: int) -> float:
    return num / den if den else math.nan


def confusion_at_threshold(
    scores: Sequence[tuple[float, bool]],
    threshold: float,
    inclusive: bool = False,
) -> ConfusionMetrics:
    """Volume-level confusion counts: positive when score > threshold
    (or >= with ``inclusive``, used to realize FPPV operating points where
    the threshold is itself an attained candidate probability)."""
    tp = fp = tn = fn = 0
    for score, has_lesion in scores:
        predicted = score >= threshold if inclusive else score > threshold
        if has_lesion:
            tp += predicted
            fn += not predicted
        else:
            fp += predicted
            tn += not predicted
    n = tp + fp + tn + fn
    return ConfusionMetrics(
        threshold=float(threshold),
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        accuracy=_ratio(tp + tn, n),
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        f1=_ratio(2 * tp, 2 * tp + fp + fn),
    )


def best_f1_threshold(
    scores: Sequence[tuple[float, bool]],
) -> tuple[float, ConfusionMetrics]:
    """Exhaustive sweep of distinct scores (plus an accept-all threshold);
    ties broken toward the higher threshold."""
    if not any(flag for _, flag in scores):
        raise ValueError("best F1 threshold requires at least one positive volume")
    distinct = sorted({s for s, _ in scores})
    candidates = [distinct[0] - 1.0] + distinct
    best: Optional[tuple[float, ConfusionMetrics]] = None
    for t in candidates:
        m = confusion_at_threshold(scores, t)
        if math.isnan(m.f1):
            continue
        if best is None or m.f1 >= best[1].f1:
            best = (t, m)
    return best


def bootstrap_ci(
    statistic: Callable[[list], float],
    dataset: Sequence,
    n_resamples: int = DEFAULT_BOOTSTRAP_RESAMPLES,
    level: float = DEFAULT_BOOTSTRAP_LEVEL,
    seed: int = 0,
    max_retries: int = 100,
) -> tuple[float, float]:
    """Percentile bootstrap over dataset items (volumes, not lesions).

    Resample i, attempt a, draws indices with
    ``default_rng([seed, i, a]).integers(0, n, n)``; a resample on which
    the statistic raises :class:`StatisticUndefined` is redrawn with the
    next attempt number, up to ``max_retries``.  The counter-derived seeds
    make results independent of execution order or parallelism.
    """
    items = list(dataset)
    if not items:
        raise ValueError("bootstrap requires a nonempty dataset")
    n = len(items)
    values = np.empty(n_resamples)
    for i in range(n_resamples):
        for attempt in range(max_retries):
            rng = np.random.default_rng([seed, i, attempt])
            idx = rng.integers(0, n, n)
            try:
                values[i] = float(statistic([items[j] for j in idx]))
                break
            except StatisticUndefined:
                continue
        else:
            raise RuntimeError(
                f"statistic undefined on {max_retries} consecutive redraws "
                f"of resample {i}"
            )
    alpha = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [alpha, 100.0 - alpha])
    return float(lo), float(hi)


def fisher_exact(table: Sequence[Sequence[int]]) -> float:
    """Two-sided Fisher's exact test by the minimum-likelihood rule.

    Sums the hypergeometric probabilities (same margins) of every table at
    most as probable as the observed one, with a 1e-12 slack absorbing
    float ties; probabilities come from log-space factorials.
    """
    (a, b), (c, d) = table
    counts = (a, b, c, d)
    if any(x < 0 or x != int(x) for x in counts):
        raise ValueError(f"table entries must be non-negative integers, got {table}")
    a, b, c, d = (int(x) for x in counts)
    n = a + b + c + d
    if n == 0:
        raise ValueError("Fisher's exact test is undefined for an all-zero table")
    r1, r2, c1 = a + b, c + d, a + c
    if 0 in (r1, r2, c1, b + d):
        return 1.0  # a zero margin admits a single table

    lf = np.cumsum(np.concatenate(([0.0], np.log(np.arange(1, n + 1)))))
    const = lf[c1] + lf[n - c1] - lf[n] + lf[r1] + lf[r2]

    def prob(k: int) -> float:
        return math.exp(const - lf[k] - lf[r1 - k] - lf[c1 - k] - lf[r2 - c1 + k])

    k_lo = max(0, c1 - r2)
    k_hi = min(r1, c1)
    p_obs = prob(a)
    total = 0.0
    excluded = 0
    for k in range(k_lo, k_hi + 1):
        p = prob(k)
        if p <= p_obs + 1e-12:
            total += p
        else:
            excluded += 1
    if excluded == 0:
        return 1.0  # the whole support is included; its exact sum is 1
    return min(total, 1.0)


# ---------------------------------------------------------------------------
# Dataset-level report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalVolume:
    """One volume's ground truth and candidates, as fed to the report."""

    volume_id: str
    lesions: tuple[Lesion, ...]
    candidates: tuple[CandidateDetection, ...]

    @property
    def has_lesion(self) -> bool:
        return len(self.lesions) > 0


@dataclass(frozen=True)
class OperatingPoint:
    name: str
    threshold: float
    score_rule: str  # "ge" for FPPV points, "gt" for score sweeps
    lesion_sensitivity: Optional[float]
    metrics: ConfusionMetrics


@dataclass(frozen=True)
class EvaluationReport:
    froc: FrocCurve
    avg_sensitivity: float
    avg_sensitivity_ci: tuple[float, float]
    auc: Optional[float]
    auc_ci: Optional[tuple[float, float]]
    roc: Optional[RocCurve]
    operating_points: tuple[OperatingPoint, ...]
    strata: Mapping[str, Mapping[str, dict]]
    volume_scores: tuple[tuple[str, float, bool], ...]
    fppv_grid: tuple[float, ...]
    provenance: Mapping[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        def clean(x):
            return None if isinstance(x, float) and math.isnan(x) else x

        def metrics_dict(m: ConfusionMetrics) -> dict:
            return {
                "threshold": m.threshold,
                "tp": m.tp,
                "fp": m.fp,
                "tn": m.tn,
                "fn": m.fn,
                "accuracy": clean(m.accuracy),
                "sensitivity": clean(m.sensitivity),
                "specificity": clean(m.specificity),
                "f1": clean(m.f1),
            }

        return {
            "froc": {
                "n_volumes": self.froc.n_volumes,
                "n_lesions": self.froc.n_lesions,
                "points": [
                    {"threshold": t, "fppv": f, "sensitivity": s}
                    for t, (f, s) in zip(self.froc.thresholds, self.froc.points)
                ],
            },
            "avg_sensitivity": {
                "value": self.avg_sensitivity,
                "ci": list(self.avg_sensitivity_ci),
                "fppv_grid": list(self.fppv_grid),
            },
            "auc": None
            if self.auc is None
            else {"value": self.auc, "ci": list(self.auc_ci)},
            "roc": None
            if self.roc is None
            else [
                {"threshold": t, "fpr": f, "tpr": s}
                for t, (f, s) in zip(self.roc.thresholds, self.roc.points)
            ],
            "operating_points": [
                {
                    "name": op.name,
                    "threshold": op.threshold,
                    "score_rule": op.score_rule,
                    "lesion_sensitivity": op.lesion_sensitivity,
                    "metrics": metrics_dict(op.metrics),
                }
                for op in self.operating_points
            ],
            "strata": {k: dict(v) for k, v in self.strata.items()},
            "volume_scores": [
                {"volume_id": vid, "score": score, "has_lesion": flag}
                for vid, score, flag in self.volume_scores
            ],
            "provenance": dict(self.provenance),
        }


def stratified_sensitivities(
    volumes: Sequence[EvalVolume],
    matches: Sequence[MatchResult],
    curve: FrocCurve,
    strata_keys: Sequence[str],
    operating_fppvs: Sequence[float] = DEFAULT_OPERATING_FPPVS,
) -> dict[str, dict[str, dict]]:
    """Per-stratum lesion sensitivity at thresholds fixed from the global
    FROC curve.  Every lesion must carry every requested label key."""
    thresholds = {
        fppv: threshold_for_operating_point(curve, fppv) for fppv in operating_fppvs
    }
    out: dict[str, dict[str, dict]] = {}
    for key in strata_keys:
        buckets: dict[str, list[float]] = {}
        for vol, match in zip(volumes, matches):
            for lesion, hit_prob in zip(vol.lesions, match.lesion_hit_probs):
                if key not in lesion.labels:
                    raise ValueError(
                        f"lesion in volume {vol.volume_id!r} lacks label {key!r}"
                    )
                buckets.setdefault(lesion.labels[key], []).append(hit_prob)
        out[key] = {
            value: {
                "n_lesions": len(probs),
                "sensitivity_at_fppv": {
                    _fppv_key(fppv): sum(p >= t for p in probs) / len(probs)
                    for fppv, t in thresholds.items()
                },
            }
            for value, probs in sorted(buckets.items())
        }
    return out


def _fppv_key(fppv: float) -> str:
    return f"{fppv:g}"


def build_report(
    volumes: Sequence[EvalVolume],
    fppv_grid: Sequence[float] = DEFAULT_FPPV_GRID,
    operating_fppvs: Sequence[float] = DEFAULT_OPERATING_FPPVS,
    strata_keys: Sequence[str] = (),
    n_resamples: int = DEFAULT_BOOTSTRAP_RESAMPLES,
    level: float = DEFAULT_BOOTSTRAP_LEVEL,
    seed: int = 0,
    provenance: Optional[Mapping[str, object]] = None,
) -> EvaluationReport:
    """Assemble the full evaluation report for one candidate set."""
    matches = [match_lesions(v.candidates, v.lesions) for v in volumes]
    curve = _curve_from_matches(matches, len(volumes))
    fppv_grid = tuple(fppv_grid)

    def avg_sens_stat(ms: list) -> float:
        return avg_sensitivity(_curve_from_matches(ms, len(ms)), fppv_grid)

    avg = avg_sens_stat(matches)
    avg_ci = bootstrap_ci(
        avg_sens_stat, matches, n_resamples=n_resamples, level=level, seed=seed
    )

    scores = [(volume_score(v.candidates), v.has_lesion) for v in volumes]
    try:
        roc, auc = roc_auc(scores)
        auc_ci = bootstrap_ci(
            lambda s: roc_auc(s)[1],
            scores,
            n_resamples=n_resamples,
            level=level,
            seed=seed,
        )
    except StatisticUndefined:
        roc, auc, auc_ci = None, None, None

    ops = []
    for fppv in operating_fppvs:
        t = threshold_for_operating_point(curve, fppv)
        ops.append(
            OperatingPoint(
                name=f"fppv_{_fppv_key(fppv)}",
                threshold=t,
                score_rule="ge",
                lesion_sensitivity=sensitivity_at_fppv(curve, fppv),
                metrics=confusion_at_threshold(scores, t, inclusive=True),
            )
        )
    if any(flag for _, flag in scores):
        t_f1, m_f1 = best_f1_threshold(scores)
        ops.append(
            OperatingPoint(
                name="best_f1",
                threshold=t_f1,
                score_rule="gt",
                lesion_sensitivity=None,
                metrics=m_f1,
            )
        )

    strata = stratified_sensitivities(
        volumes, matches, curve, strata_keys, operating_fppvs
    )
    return EvaluationReport(
        froc=curve,
        avg_sensitivity=avg,
        avg_sensitivity_ci=avg_ci,
        auc=auc,
        auc_ci=auc_ci,
        roc=roc,
        operating_points=tuple(ops),
        strata=strata,
        volume_scores=tuple(
            (v.volume_id, s, flag) for v, (s, flag) in zip(volumes, scores)
        ),
        fppv_grid=fppv_grid,
        provenance=dict(provenance or {}),
    )


REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": [
        "froc",
        "avg_sensitivity",
        "auc",
        "roc",
        "operating_points",
        "strata",
        "volume_scores",
        "provenance",
    ],
    "properties": {
        "froc": {
            "type": "object",
            "required": ["n_volumes", "n_lesions", "points"],
            "properties": {
                "n_volumes": {"type": "integer", "minimum": 0},
                "n_lesions": {"type": "integer", "minimum": 0},
                "points": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["threshold", "fppv", "sensitivity"],
                        "properties": {
                            "threshold": {"type": "number"},
                            "fppv": {"type": "number", "minimum": 0},
                            "sensitivity": {
                                "type": "number",
                                "minimum": 0,
                                "maximum": 1,
                            },
                        },
                    },
                },
            },
        },
        "avg_sensitivity": {
            "type": "object",
            "required": ["value", "ci", "fppv_grid"],
            "properties": {
                "value": {"type": "number", "minimum": 0, "maximum": 1},
                "ci": {
                    "type": "array",
                    "items": {"type": "number"},
                    "minItems": 2,
                    "maxItems": 2,
                },
                "fppv_grid": {"type": "array", "items": {"type": "number"}},
            },
        },
        "auc": {
            "oneOf": [
                {"type": "null"},
                {
                    "type": "object",
                    "required": ["value", "ci"],
                    "properties": {
                        "value": {"type": "number", "minimum": 0, "maximum": 1},
                        "ci": {
                            "type": "array",
                            "items": {"type": "number"},
                            "minItems": 2,
                            "maxItems": 2,
                        },
                    },
                },
            ]
        },
        "roc": {
            "oneOf": [
                {"type": "null"},
                {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["threshold", "fpr", "tpr"],
                    },
                },
            ]
        },
        "operating_points": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "threshold", "score_rule", "metrics"],
                "properties": {
                    "name": {"type": "string"},
                    "score_rule": {"enum": ["ge", "gt"]},
                    "metrics": {
                        "type": "object",
                        "required": ["tp", "fp", "tn", "fn"],
                    },
                },
            },
        },
        "strata": {"type": "object"},
        "volume_scores": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["volume_id", "score", "has_lesion"],
                "properties": {
                    "volume_id": {"type": "string"},
                    "score": {"type": "number"},
                    "has_lesion": {"type": "boolean"},
                },
            },
        },
        "provenance": {"type": "object"},
    },
}
