"""Agreement statistics between objective predictions and subjective scores."""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .errors import DegenerateInputError, UsageError

ALPHA = 0.05
MAX_ITER = 500
REL_TOL = 1e-10


def _vectors(pred, subj, minimum: int) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    subj = np.asarray(subj, dtype=np.float64).ravel()
    if pred.shape != subj.shape:
        raise UsageError(f"length mismatch: {pred.size} predictions vs {subj.size} scores")
    if pred.size < minimum:
        raise UsageError(f"need at least {minimum} points, got {pred.size}")
    if not (np.isfinite(pred).all() and np.isfinite(subj).all()):
        raise UsageError("inputs must be finite")
    return pred, subj


def pearson(x, y) -> float:
    x, y = _vectors(x, y, 2)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInputError("correlation is undefined for a constant vector")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def srocc(pred, subj) -> float:
    """Spearman rank correlation with mean ranks for ties."""
    pred, subj = _vectors(pred, subj, 3)
    return pearson(stats.rankdata(pred), stats.rankdata(subj))


def rmse_raw(pred, subj) -> float:
    pred, subj = _vectors(pred, subj, 1)
    return float(np.sqrt(np.mean((pred - subj) ** 2)))


# ----------------------------------------------------------------------------
# Five-parameter logistic mapping
# ----------------------------------------------------------------------------


def logistic5(x, beta) -> np.ndarray:
    """b1 * (1/2 - 1/(1 + exp(b2 (x - b3)))) + b4 x + b5."""
    b1, b2, b3, b4, b5 = beta
    x = np.asarray(x, dtype=np.float64)
    z = b2 * (x - b3)
    # 1/2 - 1/(1+e^z) == tanh(z/2)/2, which never overflows.
    return b1 * 0.5 * np.tanh(0.5 * z) + b4 * x + b5


def _jacobian(x: np.ndarray, beta: np.ndarray) -> np.ndarray:
    b1, b2, b3, _, _ = beta
    t = np.tanh(0.5 * b2 * (x - b3))
    dt = 0.25 * (1.0 - t * t)  # d/dz of tanh(z/2)/2
    return np.stack([
        0.5 * t,
        b1 * dt * (x - b3),
        -b1 * dt * b2,
        x,
        np.ones_like(x),
    ], axis=1)


@dataclass
class LogisticFit:
    beta: np.ndarray
    sse: float
    iterations: int
    converged: bool

    @property
    def warning(self) -> bool:
        return not self.converged

    def __call__(self, x) -> np.ndarray:
        return logistic5(x, self.beta)


def _levenberg_marquardt(x, y, beta0) -> LogisticFit:
    beta = np.asarray(beta0, dtype=np.float64).copy()
    resid = y - logistic5(x, beta)
    sse = float(resid @ resid)
    lam = 1e-3
    for it in range(1, MAX_ITER + 1):
        J = _jacobian(x, beta)
        JtJ = J.T @ J
        g = J.T @ resid
        accepted = False
        while lam < 1e16:
            A = JtJ + lam * np.diag(np.diag(JtJ) + 1e-12)
            try:
                step = np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = beta + step
            r_new = y - logistic5(x, cand)
            sse_new = float(r_new @ r_new)
            if np.isfinite(sse_new) and sse_new <= sse:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            # No descent direction left: we are at a (local) minimum.
            return LogisticFit(beta, sse, it, True)
        change = (sse - sse_new) / max(sse, np.finfo(float).tiny)
        beta, resid, sse = cand, r_new, sse_new
        lam = max(lam / 10.0, 1e-12)
        if sse == 0.0 or change < REL_TOL:
            return LogisticFit(beta, sse, it, True)
    return LogisticFit(beta, sse, MAX_ITER, False)


def fit_logistic5(pred, subj) -> LogisticFit:
    """Least-squares five-parameter logistic fit by Levenberg-Marquardt.

    Starts from the conventional initialisation (amplitude = subjective range,
    slope = 1/std(pred), centre = mean(pred), linear terms from ordinary
    regression) and also from the purely linear submodel; the better fit wins.
    """
    x, y = _vectors(pred, subj, 5)
    sd = x.std()
    if sd == 0.0:
        raise DegenerateInputError("cannot fit a mapping to constant predictions")
    slope, intercept = np.polyfit(x, y, 1)
    starts = [
        (np.ptp(y), 1.0 / sd, x.mean(), slope, intercept),
        (0.0, 1.0 / sd, x.mean(), slope, intercept),
    ]
    fits = [_levenberg_marquardt(x, y, b) for b in starts]
    return min(fits, key=lambda f: f.sse)


def plcc_rmse(pred, subj) -> Tuple[float, float, LogisticFit]:
    """Pearson correlation and RMSE after logistic mapping of the predictions."""
    x, y = _vectors(pred, subj, 5)
    fit = fit_logistic5(x, y)
    mapped = fit(x)
    if np.ptp(mapped) == 0.0:
        # The fit collapsed to a constant; correlation is undefined there.
        raise DegenerateInputError("logistic mapping is constant")
    return pearson(mapped, y), rmse_raw(mapped, y), fit


# ----------------------------------------------------------------------------
# Pairwise significance analysis
# ----------------------------------------------------------------------------


def auc_rank_sum(positives, negatives) -> float:
    """Mann-Whitney AUC: P(pos > neg) + 0.5 P(pos == neg)."""
    pos = np.asarray(positives, dtype=np.float64).ravel()
    neg = np.asarray(negatives, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise DegenerateInputError("AUC needs both classes")
    ranks = stats.rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def welch_pvalue(a, b) -> float:
    """Two-sided Welch p-value; 1.0 when both samples are constant and equal."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.ptp(a) == 0.0 and np.ptp(b) == 0.0:
        return 1.0 if a.mean() == b.mean() else 0.0
    return float(stats.ttest_ind(a, b, equal_var=False).pvalue)


@dataclass
class PairJudgment:
    i: int
    j: int
    different: bool
    sign: int  # +1 if stimulus i is subjectively better, -1 if worse, 0 when similar
    delta: float  # pred[i] - pred[j]


@dataclass
class KrasulaResult:
    auc_ds: Optional[float]
    auc_bw: Optional[float]
    cc: Optional[float]
    n_different: int
    n_similar: int


def judge_pairs(pred, observers: Sequence[Sequence[float]], alpha: float = ALPHA,
                higher_is_better: bool = True) -> list:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    if len(observers) != pred.size:
        raise UsageError(f"{pred.size} predictions but {len(observers)} observer sets")
    if pred.size < 2:
        raise UsageError("need at least 2 stimuli")
    obs = [np.asarray(o, dtype=np.float64) for o in observers]
    if any(o.size < 2 for o in obs):
        raise UsageError("every stimulus needs at least 2 observer scores")
    orient = 1 if higher_is_better else -1
    pairs = []
    for i, j in itertools.combinations(range(pred.size), 2):
        different = welch_pvalue(obs[i], obs[j]) < alpha
        sign = int(np.sign(obs[i].mean() - obs[j].mean())) * orient if different else 0
        pairs.append(PairJudgment(i, j, different, sign, float(pred[i] - pred[j])))
    return pairs


def krasula_analysis(pred, observers: Sequence[Sequence[float]], alpha: float = ALPHA,
                     higher_is_better: bool = True) -> KrasulaResult:
    """Different-vs-similar AUC, better-vs-worse AUC and correct-classification rate.

    ``higher_is_better`` states whether larger observer scores mean better
    quality (MOS) or worse (DMOS). Predictions are assumed to share the
    subjective orientation after any sign flip; AUC-BW is reported in the
    orientation that scores informative predictors above 0.5.
    """
    pairs = judge_pairs(pred, observers, alpha, higher_is_better)
    diff = [p for p in pairs if p.different]
    sim = [p for p in pairs if not p.different]
    auc_ds = None
    if diff and sim:
        auc_ds = auc_rank_sum([abs(p.delta) for p in diff], [abs(p.delta) for p in sim])
    auc_bw = cc = None
    if diff:
        # Express every different pair as (better - worse) in prediction space.
        oriented = np.array([p.delta * p.sign for p in diff]) * (1 if higher_is_better else -1)
        # AUC of "better-minus-worse" against its mirror: ranks oriented deltas
        # against their negations, i.e. P(d > -d') over all pair combinations.
        auc_bw = auc_rank_sum(oriented, -oriented)
        cc = float(np.mean(oriented > 0))
    return KrasulaResult(auc_ds, auc_bw, cc, len(diff), len(sim))


def ttest_runs(a, b, alpha: float = ALPHA) -> int:
    """+1 if ``a`` is significantly greater than ``b`` (Welch), -1 if less, else 0."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise UsageError("each sample needs at least 2 values")
    if a.size != b.size:
        raise UsageError("samples must have equal length")
    if welch_pvalue(a, b) < alpha:
        return 1 if a.mean() > b.mean() else -1
    return 0


# ----------------------------------------------------------------------------
# Report
# ----------------------------------------------------------------------------


@dataclass
class EvalReport:
    srocc: float
    plcc: float
    rmse: float
    beta: Tuple[float, ...]
    n: int
    fit_warning: bool = False
    auc_ds: Optional[float] = None
    auc_bw: Optional[float] = None
    cc: Optional[float] = None

    def as_dict(self) -> dict:
        d = asdict(self)
        d["beta"] = [float(b) for b in self.beta]
        return d

    def to_text(self) -> str:
        lines = []
        for key, value in self.as_dict().items():
            if value is None:
                continue
            if isinstance(value, list):
                value = " ".join(f"{v:.10g}" for v in value)
            elif isinstance(value, float):
                value = f"{value:.6f}"
            lines.append(f"{key}: {value}")
        return "\n".join(lines)


def evaluate_scores(pred, subj, observers: Optional[Sequence[Sequence[float]]] = None,
                    higher_is_better: bool = True) -> EvalReport:
    pred, subj = _vectors(pred, subj, 5)
    plcc, rmse, fit = plcc_rmse(pred, subj)
    report = EvalReport(srocc(pred, subj), plcc, rmse, tuple(fit.beta), pred.size, fit.warning)
    if observers is not None:
        k = krasula_analysis(pred, observers, higher_is_better=higher_is_better)
        report.auc_ds, report.auc_bw, report.cc = k.auc_ds, k.auc_bw, k.cc
    return report
