"""Open-set verification: enrollment, trials, cosine scoring, EER and
pairwise significance testing of EER differences."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

logger = logging.getLogger(__name__)

N_ENROLL = 5
N_TARGET = 20
N_NONTARGET = 20


class ProtocolError(ValueError):
    pass


class ScoreError(ValueError):
    pass


# --------------------------------------------------------------------------
# Scoring


def enroll(embeddings) -> np.ndarray:
    """Instrument model: arithmetic mean of the enrollment embeddings."""
    embs = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if embs.shape[0] == 0 or embs.size == 0:
        raise ProtocolError("enrollment needs at least one embedding")
    model = embs.mean(axis=0)
    if not np.any(model):
        logger.warning("enrollment mean is the zero vector; cosine scores will be undefined")
    return model


def cosine_score(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ScoreError("cosine score undefined for a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class ScoreSet:
    target_scores: np.ndarray
    nontarget_scores: np.ndarray

    def __post_init__(self):
        self.target_scores = np.asarray(self.target_scores, dtype=np.float64).reshape(-1)
        self.nontarget_scores = np.asarray(self.nontarget_scores, dtype=np.float64).reshape(-1)

    @property
    def n_target(self) -> int:
        return self.target_scores.size

    @property
    def n_nontarget(self) -> int:
        return self.nontarget_scores.size

    @classmethod
    def from_labels(cls, scores, is_target) -> "ScoreSet":
        scores = np.asarray(scores, dtype=np.float64)
        mask = np.asarray(is_target, dtype=bool)
        return cls(scores[mask], scores[~mask])


# --------------------------------------------------------------------------
# EER


def det_points(target, nontarget):
    """Miss and false-alarm rates at every distinct threshold, ascending.

    A trial is accepted when its score is >= the threshold; the last point
    uses a threshold above every score.
    """
    target = np.sort(np.asarray(target, dtype=np.float64))
    nontarget = np.sort(np.asarray(nontarget, dtype=np.float64))
    thresholds = np.unique(np.concatenate([target, nontarget]))
    p_miss = np.searchsorted(target, thresholds, side="left") / target.size
    p_fa = 1.0 - np.searchsorted(nontarget, thresholds, side="left") / nontarget.size
    thresholds = np.append(thresholds, np.inf)
    return np.append(p_miss, 1.0), np.append(p_fa, 0.0), thresholds


def _crossing(p_miss, p_fa, thresholds):
    diff = p_fa - p_miss  # non-increasing
    i = int(np.flatnonzero(diff >= 0)[-1])
    if diff[i] == 0 or i == diff.size - 1:
        return p_miss[i], thresholds[i]
    a = diff[i] / (diff[i] - diff[i + 1])
    eer = p_miss[i] + a * (p_miss[i + 1] - p_miss[i])
    t_next = thresholds[i + 1]
    thr = thresholds[i] if not np.isfinite(t_next) else thresholds[i] + a * (t_next - thresholds[i])
    return eer, thr


def interpolated_eer(target, nontarget) -> tuple[float, float]:
    """EER by linear interpolation between the two DET points that bracket
    the miss = false-alarm crossing; returns (eer, threshold)."""
    if len(target) == 0 or len(nontarget) == 0:
        raise ProtocolError("EER needs both target and non-target scores")
    eer, thr = _crossing(*det_points(target, nontarget))
    return float(eer), float(thr)


def _pav(y: np.ndarray):
    """Pool-adjacent-violators: non-decreasing fit; returns (values, widths)."""
    values, widths = [], []
    for v in y:
        values.append(float(v))
        widths.append(1)
        while len(values) > 1 and values[-2] > values[-1]:
            w = widths[-2] + widths[-1]
            values[-2] = (values[-2] * widths[-2] + values[-1] * widths[-1]) / w
            widths[-2] = w
            values.pop()
            widths.pop()
    return np.array(values), np.array(widths, dtype=np.int64)


def rocch(target, nontarget):
    """Vertices (p_miss, p_fa) of the ROC convex hull."""
    target = np.asarray(target, dtype=np.float64)
    nontarget = np.asarray(nontarget, dtype=np.float64)
    n_t, n_n = target.size, nontarget.size
    scores = np.concatenate([target, nontarget])
    ideal = np.concatenate([np.ones(n_t), np.zeros(n_n)])
    # stable sort: tied scores keep targets first (pessimistic ordering)
    ideal = ideal[np.argsort(scores, kind="mergesort")]
    _, widths = _pav(ideal)
    edges = np.concatenate([[0], np.cumsum(widths)])
    cum_tar = np.concatenate([[0.0], np.cumsum(ideal)])
    miss = cum_tar[edges]
    left = edges
    fa = (n_t + n_n - left) - (n_t - miss)
    return miss / n_t, fa / n_n


def rocch_eer(target, nontarget) -> float:
    """EER of the ROC convex hull (BOSARIS convention)."""
    if len(target) == 0 or len(nontarget) == 0:
        raise ProtocolError("EER needs both target and non-target scores")
    p_miss, p_fa = rocch(target, nontarget)
    eer = 0.0
    for i in range(p_fa.size - 1):
        xx, yy = p_fa[i:i + 2], p_miss[i:i + 2]
        xy = np.column_stack([xx, yy])
        # axis-parallel hull segments cannot cross the diagonal in their interior
        if np.min(np.abs(xy[0] - xy[1])) == 0:
            seg_eer = 0.0
        else:
            seg = np.linalg.solve(xy, np.ones(2))
            seg_eer = 1.0 / seg.sum()
        eer = max(eer, seg_eer)
    return float(eer)


@dataclass
class EERResult:
    eer: float  # ROCCH, headline value
    eer_interpolated: float
    threshold: float
    n_target: int
    n_nontarget: int


def compute_eer(scores: ScoreSet) -> EERResult:
    if scores.n_target == 0 or scores.n_nontarget == 0:
        raise ProtocolError("EER needs both target and non-target scores")
    interp, thr = interpolated_eer(scores.target_scores, scores.nontarget_scores)
    hull = rocch_eer(scores.target_scores, scores.nontarget_scores)
    return EERResult(hull, interp, thr, scores.n_target, scores.n_nontarget)


# --------------------------------------------------------------------------
# Significance


def normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def critical_z(alpha: float) -> float:
    """Two-sided critical value Z_{alpha/2}."""
    return float(norm.isf(alpha / 2.0))


@dataclass
class ZTest:
    z: float
    p: float

    @property
    def defined(self) -> bool:
        return not math.isnan(self.z)


def z_test(eer_a: float, eer_b: float, n_target: int, n_nontarget: int) -> ZTest:
    """Two-sided test for a difference between two EERs measured on
    ``n_target`` target and ``n_nontarget`` non-target trials."""
    for e in (eer_a, eer_b):
        if not 0.0 <= e <= 1.0:
            raise ValueError(f"EER must lie in [0, 1], got {e}")
    if n_target <= 0 or n_nontarget <= 0:
        raise ValueError("trial counts must be positive")
    var = eer_a * (1 - eer_a) + eer_b * (1 - eer_b)
    if var == 0:
        if eer_a == eer_b:
            return ZTest(0.0, 1.0)
        logger.warning("z-test undefined: both EERs are 0 or 1 (%s, %s)", eer_a, eer_b)
        return ZTest(math.nan, math.nan)
    scale = (n_target + n_nontarget) / (n_target * n_nontarget)
    z = 2.0 * abs(eer_a - eer_b) / math.sqrt(var * scale)
    return ZTest(z, 2.0 * normal_sf(z))


def holm_bonferroni(p_values, alpha: float = 0.05) -> np.ndarray:
    """Step-down Holm rejections, returned in input order."""
    p = np.asarray(p_values, dtype=np.float64).reshape(-1)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    reject = np.zeros(m, dtype=bool)
    for rank, i in enumerate(np.argsort(p, kind="mergesort")):
        if p[i] > alpha / (m - rank):
            break
        reject[i] = True
    return reject


@dataclass
class PairResult:
    system_a: str
    system_b: str
    z: float
    p: float
    reject: bool


def pairwise_significance(systems: dict, alpha: float = 0.05) -> list:
    """All-pairs z-tests with Holm correction.

    ``systems`` maps name -> (eer, n_target, n_nontarget).  Pairs share the
    trial counts of the first system of each pair when they differ.
    """
    pairs = list(itertools.combinations(systems, 2))
    tests = []
    for a, b in pairs:
        eer_a, nt, nn = systems[a]
        eer_b, nt_b, nn_b = systems[b]
        if (nt, nn) != (nt_b, nn_b):
            logger.warning("systems %s and %s were scored on different trial counts", a, b)
        tests.append(z_test(eer_a, eer_b, nt, nn))
    p = np.array([t.p if t.defined else 1.0 for t in tests])
    reject = holm_bonferroni(p, alpha) if pairs else np.zeros(0, bool)
    return [PairResult(a, b, t.z, t.p, bool(r) and t.defined)
            for (a, b), t, r in zip(pairs, tests, reject)]


# --------------------------------------------------------------------------
# Trials


@dataclass
class Trial:
    trial_id: str
    model: str
    sample_id: str
    is_target: bool


@dataclass
class TrialSet:
    enrollment: dict
    trials: list
    seed: int
    excluded: list = field(default_factory=list)

    @property
    def n_target(self) -> int:
        return sum(t.is_target for t in self.trials)

    @property
    def n_nontarget(self) -> int:
        return sum(not t.is_target for t in self.trials)

    def trial_ids(self) -> set:
        return {t.sample_id for t in self.trials}

    def to_rows(self) -> list:
        rows = [{"kind": "enroll", "trial_id": "", "model": m, "sample_id": s, "is_target": ""}
                for m, ids in self.enrollment.items() for s in ids]
        rows += [{"kind": "trial", "trial_id": t.trial_id, "model": t.model,
                  "sample_id": t.sample_id, "is_target": int(t.is_target)} for t in self.trials]
        return rows

    @classmethod
    def from_rows(cls, rows, seed: int = -1) -> "TrialSet":
        enrollment, trials = {}, []
        for r in rows:
            if r["kind"] == "enroll":
                enrollment.setdefault(r["model"], []).append(r["sample_id"])
            else:
                trials.append(Trial(r["trial_id"], r["model"], r["sample_id"],
                                    bool(int(r["is_target"]))))
        return cls(enrollment, trials, seed)


def build_trials(sample_ids, instruments, seed: int, n_enroll: int = N_ENROLL,
                 n_target: int = N_TARGET, n_nontarget: int = N_NONTARGET) -> TrialSet:
    """Per unseen instrument: ``n_enroll`` enrollment notes, then ``n_target``
    same-instrument and ``n_nontarget`` other-instrument trial notes.

    Enrollment notes of every instrument are withheld from all trial pools.
    """
    sample_ids = list(sample_ids)
    instruments = list(instruments)
    if len(sample_ids) != len(instruments):
        raise ValueError("sample_ids and instruments differ in length")
    rng = np.random.default_rng(seed)
    groups: dict = {}
    for sid, inst in sorted(zip(sample_ids, instruments)):
        groups.setdefault(inst, []).append(sid)
    excluded = [i for i in sorted(groups) if len(groups[i]) < n_enroll + 1]
    for inst in excluded:
        logger.warning("instrument %s has %d samples (< %d); excluded",
                       inst, len(groups[inst]), n_enroll + 1)
    kept = [i for i in sorted(groups) if i not in excluded]
    if len(kept) < 2:
        raise ProtocolError("need at least two test instruments with enough samples")

    enrollment, remaining = {}, {}
    for inst in kept:
        ids = list(rng.permutation(groups[inst]))
        enrollment[inst] = [str(s) for s in ids[:n_enroll]]
        remaining[inst] = [str(s) for s in ids[n_enroll:]]

    trials = []
    for inst in kept:
        nt = min(n_target, len(remaining[inst]))
        nn = n_nontarget
        if nt < n_target:
            nn = max(1, round(n_nontarget * nt / n_target))
            logger.warning("instrument %s: only %d target trials available; using %d/%d",
                           inst, nt, nt, nn)
        targets = list(rng.choice(remaining[inst], size=nt, replace=False))
        others = sorted(s for o in kept if o != inst for s in remaining[o])
        nn = min(nn, len(others))
        nontargets = list(rng.choice(others, size=nn, replace=False))
        for s in targets:
            trials.append(Trial(f"{inst}:{len(trials):05d}", inst, str(s), True))
        for s in nontargets:
            trials.append(Trial(f"{inst}:{len(trials):05d}", inst, str(s), False))
    return TrialSet(enrollment, trials, seed, excluded)


@dataclass
class ScoredTrial:
    trial_id: str
    is_target: bool
    score: float


def score_trials(trials: TrialSet, embeddings: dict) -> tuple[ScoreSet, list]:
    """Cosine-score every trial against its enrolled model (scores pooled
    across instruments). Trials with undefined scores are dropped."""
    models = {m: enroll([embeddings[s] for s in ids]) for m, ids in trials.enrollment.items()}
    rows = []
    for t in trials.trials:
        try:
            s = cosine_score(models[t.model], embeddings[t.sample_id])
        except ScoreError:
            logger.warning("dropping trial %s: zero-norm embedding", t.trial_id)
            continue
        rows.append(ScoredTrial(t.trial_id, t.is_target, s))
    scores = ScoreSet.from_labels([r.score for r in rows], [r.is_target for r in rows])
    return scores, rows


def mean_instrument_eer(trials: TrialSet, rows: list) -> float:
    """Alternative to pooling: average of per-instrument ROCCH EERs."""
    by_model: dict = {}
    index = {t.trial_id: t.model for t in trials.trials}
    for r in rows:
        by_model.setdefault(index[r.trial_id], []).append(r)
    eers = []
    for rs in by_model.values():
        ss = ScoreSet.from_labels([r.score for r in rs], [r.is_target for r in rs])
        if ss.n_target and ss.n_nontarget:
            eers.append(rocch_eer(ss.target_scores, ss.nontarget_scores))
    return float(np.mean(eers))
