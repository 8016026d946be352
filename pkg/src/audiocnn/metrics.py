"""Clip-level scoring and the per-class metric suite."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from audiocnn.dataset import ClipFeatures, LabelVocabulary, label_matrix
from audiocnn.frontend import PATCH_SECONDS

DPRIME_EPS = 1e-12
DEFAULT_PER_CLASS = 33
DEFAULT_TIMELINE_K = 16


class MetricError(ValueError):
    pass


# -- inverse normal CDF (Wichura, AS241 PPND16) ---------------------------

_A = (3.3871328727963666080e0, 1.3314166789178437745e2, 1.9715909503065514427e3,
      1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
      3.3430575583588128105e4, 2.5090809287301226727e3)
_B = (1.0, 4.2313330701600911252e1, 6.8718700749205790830e2, 5.3941960214247511077e3,
      2.1213794301586595867e4, 3.9307895800092710610e4, 2.8729085735721942674e4,
      5.2264952788528545610e3)
_C = (1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
      3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
      2.27238449892691845833e-2, 7.74545014278341407640e-4)
_D = (1.0, 2.05319162663775882187e0, 1.67638483018380384940e0, 6.89767334985100004550e-1,
      1.48103976427480074590e-1, 1.51986665636164571966e-2, 5.47593808499534494600e-4,
      1.05075007164441684324e-9)
_E = (6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
      2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
      2.71155556874348757815e-5, 2.01033439929228813265e-7)
_F = (1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1, 1.48753612908506148525e-2,
      7.86869131145613259100e-4, 1.84631831751005468180e-5, 1.42151175831644588870e-7,
      2.04426310338993978564e-15)


def _poly(coeffs, x: float) -> float:
    acc = 0.0
    for c in reversed(coeffs):
        acc = acc * x + c
    return acc


def probit(p: float) -> float:
    """Inverse standard normal CDF for ``0 < p < 1``."""
    if not 0.0 < p < 1.0:
        raise MetricError(f"probit needs 0 < p < 1, got {p}")
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * _poly(_A, r) / _poly(_B, r)
    r = math.sqrt(-math.log(min(p, 1.0 - p)))
    if r <= 5.0:
        r -= 1.6
        x = _poly(_C, r) / _poly(_D, r)
    else:
        r -= 5.0
        x = _poly(_E, r) / _poly(_F, r)
    return -x if q < 0 else x


def d_prime(auc: float) -> float:
    a = min(max(float(auc), DPRIME_EPS), 1.0 - DPRIME_EPS)
    return math.sqrt(2.0) * probit(a)


def dprime_clamped(auc: float) -> bool:
    return not DPRIME_EPS <= auc <= 1.0 - DPRIME_EPS


# -- per-class statistics -------------------------------------------------


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with half credit for ties."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise MetricError("scores and labels must be equal-length vectors")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("undefined AUC")
    ranks = rankdata(s)  # average ranks for ties
    # rank sums are multiples of 0.5, so this is exact in float64 for any realistic size
    u = math.fsum(ranks[pos]) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def average_precision(scores, labels, ids=None) -> float:
    """Mean over positives of precision at that positive's rank.

    Ranking is by descending score; equal scores are ordered by ``ids``
    (default: input position).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise MetricError("scores and labels must be equal-length vectors")
    if not (y == 1).any():
        raise MetricError("no positives")
    if ids is None:
        keys = np.arange(len(s))
    else:
        # rank ids so string ids sort too
        _, keys = np.unique(np.asarray(ids), return_inverse=True)
    order = np.lexsort((keys, -s))
    hits = y[order] == 1
    ranks = np.flatnonzero(hits) + 1
    # exact rational sum, rounded once
    total = sum((Fraction(i + 1, int(r)) for i, r in enumerate(ranks)), Fraction(0))
    return float(total / len(ranks))


def aggregate_clip(patch_scores) -> np.ndarray:
    m = np.asarray(patch_scores, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.shape[0] == 0:
        raise MetricError("no patches")
    return m.mean(axis=0)


# -- evaluation sets and reports -----------------------------------------


@dataclass
class EvalSet:
    clips: list[ClipFeatures]
    per_class: int
    seed: int
    realized: dict[str, int]

    @property
    def clip_ids(self) -> list[str]:
        return [c.clip_id for c in self.clips]

    def descriptor(self) -> dict:
        return {
            "clips": len(self.clips),
            "per_class": self.per_class,
            "seed": self.seed,
            "realized_per_class": dict(sorted(self.realized.items())),
        }


def build_balanced_eval(
    clips: Sequence[ClipFeatures], vocab: LabelVocabulary, per_class: int = DEFAULT_PER_CLASS, seed: int = 0
) -> EvalSet:
    """Pick up to ``per_class`` positive clips for each label.

    A clip picked for one label also counts as a positive for its other
    labels and as a negative for the rest. Realized positive counts are
    recorded per label.
    """
    if per_class < 1:
        raise MetricError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    chosen: set[int] = set()
    for entry in sorted(vocab.entries, key=lambda e: e.label_id):
        positives = [i for i, c in enumerate(clips) if entry.name in c.labels]
        if len(positives) <= per_class:
            chosen.update(positives)
        else:
            picks = rng.choice(len(positives), size=per_class, replace=False)
            chosen.update(positives[int(k)] for k in picks)
    selected = [clips[i] for i in sorted(chosen)]
    realized = {e.name: sum(e.name in c.labels for c in selected) for e in vocab.entries}
    return EvalSet(selected, per_class, seed, realized)


@dataclass
class ClipScores:
    clip_id: str
    scores: np.ndarray  # [C]
    patch_scores: np.ndarray | None = None  # [P, C]


@dataclass
class ClassMetrics:
    label_id: int
    name: str
    prior: float
    positives: int
    auc: float
    d_prime: float
    average_precision: float
    dprime_clamped: bool = False


@dataclass
class MetricsReport:
    classes: list[ClassMetrics]
    balanced_auc: float
    balanced_dprime: float
    balanced_map: float
    vocab_size: int
    eval_descriptor: dict = field(default_factory=dict)
    excluded: dict[str, str] = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "balanced_auc": self.balanced_auc,
            "balanced_dprime": self.balanced_dprime,
            "balanced_map": self.balanced_map,
            "vocab_size": self.vocab_size,
            "evaluated_classes": len(self.classes),
            "excluded": dict(sorted(self.excluded.items())),
            "eval_set": self.eval_descriptor,
        }

    def to_dict(self) -> dict:
        d = self.summary()
        d["classes"] = [asdict(c) for c in self.classes]
        return d

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label", "prior", "positives", "auc", "dprime", "ap"])
            for c in self.classes:
                w.writerow([c.name, _g(c.prior), c.positives, _g(c.auc), _g(c.d_prime), _g(c.average_precision)])

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def _g(x: float) -> str:
    return f"{x:.9g}"


def score_clips(
    predict: Callable[[np.ndarray], np.ndarray], clips: Sequence[ClipFeatures], keep_patches: bool = False
) -> list[ClipScores]:
    out = []
    for c in clips:
        ps = np.asarray(predict(c.patches), dtype=np.float64)
        out.append(ClipScores(c.clip_id, aggregate_clip(ps), ps if keep_patches else None))
    return out


def report_from_scores(
    scores: np.ndarray,
    targets: np.ndarray,
    vocab: LabelVocabulary,
    clip_ids: Sequence[str] | None = None,
    descriptor: dict | None = None,
) -> MetricsReport:
    """Per-class metrics from a clip score matrix ``[N, C]`` and 0/1 targets.

    Classes with no positives (or no negatives) are left out of the means
    and listed in ``excluded``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    if scores.shape != targets.shape or scores.shape[1] != len(vocab):
        raise MetricError("score/target shape mismatch")
    n = scores.shape[0]
    classes, excluded = [], {}
    for j, entry in enumerate(vocab.entries):
        y = targets[:, j]
        pos = int(y.sum())
        if pos == 0:
            excluded[entry.name] = "no positives"
            continue
        if pos == n:
            excluded[entry.name] = "no negatives"
            continue
        auc = roc_auc(scores[:, j], y)
        classes.append(
            ClassMetrics(
                label_id=entry.label_id,
                name=entry.name,
                prior=pos / n,
                positives=pos,
                auc=auc,
                d_prime=d_prime(auc),
                average_precision=average_precision(scores[:, j], y, clip_ids),
                dprime_clamped=dprime_clamped(auc),
            )
        )
    classes.sort(key=lambda c: c.label_id)
    if not classes:
        raise MetricError("no class has both positives and negatives")
    mean = lambda xs: math.fsum(xs) / len(xs)  # noqa: E731
    return MetricsReport(
        classes=classes,
        balanced_auc=mean([c.auc for c in classes]),
        balanced_dprime=mean([c.d_prime for c in classes]),
        balanced_map=mean([c.average_precision for c in classes]),
        vocab_size=len(vocab),
        eval_descriptor=descriptor or {},
        excluded=excluded,
    )


def evaluate(model, eval_set: EvalSet | Sequence[ClipFeatures], vocab: LabelVocabulary) -> MetricsReport:
    """Score every eval clip by patch averaging and compute the report.

    ``model`` is anything with ``predict(patches) -> [P, C]`` or a callable.
    """
    predict = model.predict if hasattr(model, "predict") else model
    if isinstance(eval_set, EvalSet):
        clips, descriptor = eval_set.clips, eval_set.descriptor()
    else:
        clips, descriptor = list(eval_set), {"clips": len(eval_set)}
    clip_scores = score_clips(predict, clips)
    scores = np.stack([c.scores for c in clip_scores])
    targets = label_matrix(clips, vocab)
    return report_from_scores(scores, targets, vocab, [c.clip_id for c in clips], descriptor)


# -- figure data ----------------------------------------------------------


def scatter_prior_dprime(report: MetricsReport) -> list[dict]:
    return [
        {"label": c.name, "prior": c.prior, "d_prime": c.d_prime, "ap": c.average_precision}
        for c in report.classes
    ]


def write_scatter_csv(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "prior", "d_prime", "ap"])
        for r in rows:
            w.writerow([r["label"], _g(r["prior"]), _g(r["d_prime"]), _g(r["ap"])])


def read_scatter_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"label": r["label"], "prior": float(r["prior"]), "d_prime": float(r["d_prime"]), "ap": float(r["ap"])}
            for r in csv.DictReader(fh)
        ]


@dataclass
class Timeline:
    classes: list[int]  # column indices, by descending peak
    times_s: np.ndarray  # [P]
    series: np.ndarray  # [P, k]

    def rows(self, names: Sequence[str] | None = None):
        for i, t in enumerate(self.times_s):
            for j, c in enumerate(self.classes):
                yield float(t), (names[c] if names else c), float(self.series[i, j])

    def write_csv(self, path: str | Path, names: Sequence[str] | None = None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time_s", "class", "score"])
            for t, c, s in self.rows(names):
                w.writerow([_g(t), c, _g(s)])


def top_peak_timeline(patch_scores, k: int = DEFAULT_TIMELINE_K) -> Timeline:
    """Keep the ``k`` classes with the highest single-patch score."""
    m = np.asarray(patch_scores, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] == 0:
        raise MetricError("no patches")
    peaks = m.max(axis=0)
    order = np.lexsort((np.arange(m.shape[1]), -peaks))[: min(k, m.shape[1])]
    classes = [int(c) for c in order]
    times = np.arange(m.shape[0]) * PATCH_SECONDS
    return Timeline(classes, times, m[:, classes])
