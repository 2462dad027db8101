"""ISO/IEC 30107-3 presentation attack metrics.

Scores are probabilities of *bonafide*. A sample is accepted as bonafide iff
``score > threshold``. Labels use 1 = bonafide, 0 = attack.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, MissingClassError

BONAFIDE, ATTACK = 1, 0


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray
    categories: list[str] | None = None
    ids: list[str] | None = None
    splits: list[str] | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels differ in length")
        if not np.isin(self.labels, (ATTACK, BONAFIDE)).all():
            raise ValueError("labels must be 0 (attack) or 1 (bonafide)")

    def require_both(self) -> None:
        if not (self.labels == BONAFIDE).any() or not (self.labels == ATTACK).any():
            raise MissingClassError("score set needs at least one bonafide and one attack sample")


def error_rates(s: ScoreSet, threshold: float) -> tuple[float, float, float]:
    """(APCER, BPCER, ACER) at ``threshold``."""
    s.require_both()
    accept = s.scores > threshold
    attack = s.labels == ATTACK
    fp = np.count_nonzero(accept & attack)
    tn = np.count_nonzero(~accept & attack)
    fn = np.count_nonzero(~accept & ~attack)
    tp = np.count_nonzero(accept & ~attack)
    apcer = fp / (fp + tn)
    bpcer = fn / (fn + tp)
    return apcer, bpcer, (apcer + bpcer) / 2


def threshold_grid(scores: np.ndarray) -> np.ndarray:
    """Midpoints between sorted unique scores, plus -inf and +inf."""
    u = np.unique(scores)
    return np.concatenate([[-np.inf], (u[:-1] + u[1:]) / 2, [np.inf]])


def sweep(s: ScoreSet, thresholds: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized APCER/BPCER over a threshold grid, in grid order."""
    s.require_both()
    if thresholds is None:
        thresholds = threshold_grid(s.scores)
    att = np.sort(s.scores[s.labels == ATTACK])
    bon = np.sort(s.scores[s.labels == BONAFIDE])
    # number of scores <= threshold
    apcer = (len(att) - np.searchsorted(att, thresholds, side="right")) / len(att)
    bpcer = np.searchsorted(bon, thresholds, side="right") / len(bon)
    return thresholds, apcer, bpcer


def bpcer_at_apcer(s: ScoreSet, alpha: float) -> tuple[float, float]:
    """Lowest BPCER over thresholds with APCER <= alpha; returns (BPCER, threshold)."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    thr, apcer, bpcer = sweep(s)
    ok = apcer <= alpha
    if not ok.any():
        return 1.0, float("inf")
    cand = np.where(ok, bpcer, np.inf)
    i = int(np.argmin(cand))
    return float(bpcer[i]), float(thr[i])


def roc_auc(s: ScoreSet) -> float:
    """Probability that a random bonafide outscores a random attack (ties count 1/2)."""
    s.require_both()
    att = np.sort(s.scores[s.labels == ATTACK])
    bon = s.scores[s.labels == BONAFIDE]
    below = np.searchsorted(att, bon, side="left")
    ties = np.searchsorted(att, bon, side="right") - below
    return float((below.sum() + 0.5 * ties.sum()) / (len(att) * len(bon)))


def roc_auc_trapezoid(s: ScoreSet) -> float:
    """AUC by trapezoidal integration of the (APCER, 1 - BPCER) curve."""
    _, apcer, bpcer = sweep(s)
    x, y = apcer[::-1], (1.0 - bpcer)[::-1]
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2))


@dataclass
class MetricReport:
    apcer: float
    bpcer: float
    acer: float
    threshold: float
    bpcer_at_1: float
    bpcer_at_5: float
    auc: float
    n_bonafide: int
    n_attack: int
    sweep: dict = field(default_factory=dict, repr=False)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("sweep")
        return d


def metric_report(s: ScoreSet, threshold: float = 0.5, with_sweep: bool = False) -> MetricReport:
    apcer, bpcer, acer = error_rates(s, threshold)
    sw = {}
    if with_sweep:
        thr, a, b = sweep(s)
        sw = {"threshold": thr.tolist(), "apcer": a.tolist(), "bpcer": b.tolist(), "acer": ((a + b) / 2).tolist()}
    return MetricReport(apcer, bpcer, acer, threshold,
                        bpcer_at_apcer(s, 0.01)[0], bpcer_at_apcer(s, 0.05)[0], roc_auc(s),
                        int((s.labels == BONAFIDE).sum()), int((s.labels == ATTACK).sum()), sw)


def calibrated_threshold(dev: ScoreSet, alpha: float) -> float:
    """Threshold chosen on a dev set to meet APCER <= alpha (for dev-calibrated reporting)."""
    return bpcer_at_apcer(dev, alpha)[1]


def aggregate(values) -> tuple[float, float]:
    """Mean and population standard deviation over seeds."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("nothing to aggregate")
    return float(v.mean()), float(v.std())


# --------------------------------------------------------------------------
# score files: "id<TAB>score<TAB>label<TAB>category<TAB>split" per line

_LABEL_NAMES = {BONAFIDE: "bonafide", ATTACK: "attack"}


def write_scores(path: str | Path, s: ScoreSet) -> None:
    n = len(s.scores)
    ids = s.ids or [str(i) for i in range(n)]
    cats = s.categories or ["-"] * n
    splits = s.splits or ["-"] * n
    lines = ["#id\tscore\tlabel\tcategory\tsplit"]
    for i in range(n):
        lines.append(f"{ids[i]}\t{float(s.scores[i])!r}\t{_LABEL_NAMES[int(s.labels[i])]}\t{cats[i]}\t{splits[i]}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_scores(path: str | Path) -> ScoreSet:
    ids, scores, labels, cats, splits = [], [], [], [], []
    names = {v: k for k, v in _LABEL_NAMES.items()}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5 or parts[2] not in names:
            raise FormatError(f"{path}:{lineno}: malformed score record")
        try:
            scores.append(float(parts[1]))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: bad score {parts[1]!r}") from exc
        ids.append(parts[0])
        labels.append(names[parts[2]])
        cats.append(parts[3])
        splits.append(parts[4])
    return ScoreSet(np.array(scores), np.array(labels, dtype=np.int64), cats, ids, splits)


def write_report(path: str | Path, report: MetricReport) -> None:
    Path(path).write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
