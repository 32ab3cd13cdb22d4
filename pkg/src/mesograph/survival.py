"""Survival stratification: Kaplan-Meier curves, the two-group log-rank
test, and a Cox proportional-hazards fit with Efron tie handling.

Patients are split into high/low groups at the median of their mean bag
score; the high group is the one predicted sarcomatoid-leaning. All
estimators here work on plain record lists and stay library-free so the
arithmetic is auditable against hand computations.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, NumericalError

log = logging.getLogger(__name__)

GROUP_HIGH = "high"
GROUP_LOW = "low"

MAX_NEWTON_ITERS = 100
NEWTON_TOL = 1e-9
# exp(30) ~ 1e13 as a hazard ratio: by then the likelihood is monotone
# in that coefficient and the MLE does not exist.
SEPARATION_BETA = 30.0

_SEX_CODES = {
    "m": 1.0,
    "male": 1.0,
    "1": 1.0,
    "f": 0.0,
    "female": 0.0,
    "0": 0.0,
}


@dataclass(frozen=True)
class SurvivalRecord:
    patient_id: str
    time_days: float
    event: bool
    group: str = GROUP_LOW
    sex: Optional[float] = None  # 1 = male, 0 = female
    age: Optional[float] = None

    def __post_init__(self):
        if not (self.time_days > 0):
            raise DataError(
                f"patient {self.patient_id}: time_days must be > 0, "
                f"got {self.time_days}"
            )
        if self.group not in (GROUP_HIGH, GROUP_LOW):
            raise DataError(f"unknown group {self.group!r}")


@dataclass
class KMCurve:
    """Product-limit estimate: survival[k] is S(t) on [times[k], times[k+1])."""

    times: np.ndarray      # distinct event times, ascending
    survival: np.ndarray   # S just after each event time
    at_risk: np.ndarray    # n_i at each event time
    events: np.ndarray     # d_i at each event time
    median: Optional[float]

    def at(self, t: float) -> float:
        """Right-continuous step evaluation; S(t) = 1 before the first event."""
        idx = np.searchsorted(self.times, t, side="right")
        return 1.0 if idx == 0 else float(self.survival[idx - 1])


@dataclass
class CoxFit:
    names: tuple
    beta: np.ndarray
    se: np.ndarray
    hr: np.ndarray
    ci95: list          # (lo, hi) per covariate, on the HR scale
    p_values: np.ndarray
    loglik: float
    iterations: int


def sex_code(raw) -> Optional[float]:
    if raw is None or raw == "":
        return None
    if isinstance(raw, (int, float)):
        return float(raw)
    key = str(raw).strip().lower()
    if key not in _SEX_CODES:
        raise DataError(f"cannot code sex value {raw!r} as 0/1")
    return _SEX_CODES[key]


def score_split(patient_scores: dict) -> dict:
    """Median split of per-patient scores. Above the median is 'high'
    (predicted sarcomatoid-leaning); exact-median ties land 'low'."""
    if len(patient_scores) < 2:
        raise DataError(f"need >=2 patients to split, got {len(patient_scores)}")
    cut = float(np.median(list(patient_scores.values())))
    return {
        pid: GROUP_HIGH if score > cut else GROUP_LOW
        for pid, score in patient_scores.items()
    }


def records_from_bags(bag_scores, groups=None) -> list:
    """Build survival records from (BagMeta, Z) pairs.

    Patients without both survival_days and event_observed are skipped.
    Scores are averaged per patient; when `groups` is None the median
    split is applied here.
    """
    per_patient = {}
    for bag, z in bag_scores:
        per_patient.setdefault(bag.patient_id, {"scores": [], "meta": bag})
        per_patient[bag.patient_id]["scores"].append(z)
    usable = {
        pid: entry
        for pid, entry in per_patient.items()
        if entry["meta"].survival_days is not None
        and entry["meta"].event_observed is not None
        and entry["meta"].survival_days > 0
    }
    dropped = len(per_patient) - len(usable)
    if dropped:
        log.info("skipping %d patients without usable survival data", dropped)
    if groups is None:
        groups = score_split(
            {pid: float(np.mean(e["scores"])) for pid, e in usable.items()}
        )
    records = []
    for pid, entry in usable.items():
        meta = entry["meta"]
        records.append(
            SurvivalRecord(
                patient_id=pid,
                time_days=float(meta.survival_days),
                event=bool(meta.event_observed),
                group=groups[pid],
                sex=sex_code(meta.sex),
                age=meta.age,
            )
        )
    return records


def censor_at(records: Sequence[SurvivalRecord], horizon_days: float) -> list:
    """Administrative censoring: events past the horizon become censored
    at the horizon. Idempotent."""
    if not (horizon_days > 0):
        raise DataError(f"horizon must be positive, got {horizon_days}")
    out = []
    for r in records:
        if r.time_days > horizon_days:
            out.append(replace(r, time_days=horizon_days, event=False))
        else:
            out.append(r)
    return out


def kaplan_meier(records: Sequence[SurvivalRecord]) -> KMCurve:
    if not records:
        raise DataError("kaplan_meier needs at least one record")
    times = np.array([r.time_days for r in records])
    events = np.array([r.event for r in records])
    event_times = np.unique(times[events])
    surv = []
    n_at = []
    d_at = []
    s = 1.0
    for t in event_times:
        n_i = int(np.sum(times >= t))
        d_i = int(np.sum((times == t) & events))
        s *= 1.0 - d_i / n_i
        surv.append(s)
        n_at.append(n_i)
        d_at.append(d_i)
    surv = np.array(surv)
    median = None
    reached = np.nonzero(surv <= 0.5)[0]
    if reached.size:
        median = float(event_times[reached[0]])
    return KMCurve(
        times=event_times.astype(float),
        survival=surv,
        at_risk=np.array(n_at),
        events=np.array(d_at),
        median=median,
    )


def log_rank(records: Sequence[SurvivalRecord]) -> tuple:
    """Two-group log-rank test. Returns (chi2, p) with 1 df; p computed
    through the chi-square survival function erfc(sqrt(x/2))."""
    groups = sorted({r.group for r in records})
    if len(groups) != 2:
        raise DataError(f"log-rank compares exactly 2 groups, got {groups}")
    times = np.array([r.time_days for r in records])
    events = np.array([r.event for r in records])
    in_a = np.array([r.group == groups[0] for r in records])
    if not events.any():
        raise DataError("log-rank needs at least one observed event")
    observed_a = 0.0
    expected_a = 0.0
    variance = 0.0
    for t in np.unique(times[events]):
        at_risk = times >= t
        died = (times == t) & events
        n = int(at_risk.sum())
        n_a = int((at_risk & in_a).sum())
        d = int(died.sum())
        d_a = int((died & in_a).sum())
        observed_a += d_a
        expected_a += d * n_a / n
        if n > 1:
            variance += d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1)
    if variance <= 0.0:
        # One group was never at risk alongside the other; no contrast.
        return 0.0, 1.0
    chi2 = (observed_a - expected_a) ** 2 / variance
    return float(chi2), float(math.erfc(math.sqrt(chi2 / 2.0)))


def _design_matrix(records, covariates):
    """Rows for records carrying every requested covariate; others are
    dropped (clinical fields are optional upstream)."""
    rows = []
    kept = []
    for r in records:
        vals = []
        ok = True
        for name in covariates:
            if name == "group":
                vals.append(1.0 if r.group == GROUP_HIGH else 0.0)
            elif name == "sex":
                if r.sex is None:
                    ok = False
                    break
                vals.append(float(r.sex))
            elif name == "age":
                if r.age is None:
                    ok = False
                    break
                vals.append(float(r.age))
            else:
                raise DataError(f"unknown covariate {name!r}")
        if ok:
            rows.append(vals)
            kept.append(r)
    if not rows:
        raise DataError("no records carry all requested covariates")
    return np.array(rows, dtype=np.float64), kept


def _efron_loglik_grad_info(x, times, events, beta):
    """Efron-corrected partial log-likelihood with gradient and observed
    information, accumulated per distinct event time.

    The linear predictor is shifted by its max before exponentiating;
    the shift cancels in the likelihood (and in every ratio), so the
    value is unchanged while exp() can no longer overflow. A candidate
    beta whose risk-set weights all underflow gets ll = -inf so the
    caller's step-halving can retreat.
    """
    eta = x @ beta
    eta = eta - eta.max()
    w = np.exp(eta)
    ll = 0.0
    grad = np.zeros_like(beta)
    info = np.zeros((beta.size, beta.size))
    for t in np.unique(times[events]):
        risk = times >= t
        dead = (times == t) & events
        d = int(dead.sum())
        s_r = float(w[risk].sum())
        s_d = float(w[dead].sum())
        xr = x[risk]
        xd = x[dead]
        wr = w[risk]
        wd = w[dead]
        sum_r_x = wr @ xr
        sum_d_x = wd @ xd
        sum_r_xx = (wr[:, None] * xr).T @ xr
        sum_d_xx = (wd[:, None] * xd).T @ xd
        ll += float(eta[dead].sum())
        grad += xd.sum(axis=0)
        for l in range(d):
            f = l / d
            denom = s_r - f * s_d
            if denom <= 0.0:
                return -np.inf, grad, info
            num_x = sum_r_x - f * sum_d_x
            num_xx = sum_r_xx - f * sum_d_xx
            mu = num_x / denom
            ll -= math.log(denom)
            grad -= mu
            info += num_xx / denom - np.outer(mu, mu)
    return ll, grad, info


def cox_ph(
    records: Sequence[SurvivalRecord], covariates=("group", "sex", "age")
) -> CoxFit:
    """Newton-Raphson on the Efron partial likelihood with step-halving;
    converged when the applied step has max|delta| < 1e-9."""
    covariates = tuple(covariates)
    x, kept = _design_matrix(records, covariates)
    times = np.array([r.time_days for r in kept])
    events = np.array([r.event for r in kept])
    if int(events.sum()) < 2:
        raise DataError(f"cox_ph needs >=2 events, got {int(events.sum())}")
    spread = x.max(axis=0) - x.min(axis=0)
    flat = [covariates[j] for j in range(x.shape[1]) if spread[j] == 0.0]
    if flat:
        raise DataError(f"constant covariate(s) {flat}: coefficient unidentifiable")
    # Column shifts cancel in the partial likelihood, so centering
    # changes nothing statistically but keeps exp(eta) well scaled.
    x = x - x.mean(axis=0)
    if np.linalg.matrix_rank(x) < x.shape[1]:
        raise DataError("covariate matrix is rank deficient")

    beta = np.zeros(x.shape[1])
    ll, grad, info = _efron_loglik_grad_info(x, times, events, beta)
    iterations = 0
    for iterations in range(1, MAX_NEWTON_ITERS + 1):
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            raise NumericalError("singular information matrix in Cox fit")
        # Step-halving keeps the partial log-likelihood non-decreasing.
        scale = 1.0
        for _ in range(40):
            cand = beta + scale * step
            ll_new, grad_new, info_new = _efron_loglik_grad_info(
                x, times, events, cand
            )
            if ll_new >= ll - 1e-12:
                break
            scale *= 0.5
        else:
            raise NumericalError("Cox step-halving failed to improve likelihood")
        applied = scale * step
        beta, ll, grad, info = cand, ll_new, grad_new, info_new
        if np.max(np.abs(beta)) > SEPARATION_BETA:
            raise NumericalError(
                "separation detected (monotone partial likelihood); "
                "no finite hazard-ratio estimate exists"
            )
        if np.max(np.abs(applied)) < NEWTON_TOL:
            break
    else:
        raise NumericalError(
            f"Cox fit did not converge in {MAX_NEWTON_ITERS} iterations"
        )

    cov = np.linalg.inv(info)
    se = np.sqrt(np.diag(cov))
    hr = np.exp(beta)
    ci95 = [
        (float(np.exp(b - 1.96 * s)), float(np.exp(b + 1.96 * s)))
        for b, s in zip(beta, se)
    ]
    z = beta / se
    p = np.array([math.erfc(abs(v) / math.sqrt(2.0)) for v in z])
    return CoxFit(
        names=covariates,
        beta=beta,
        se=se,
        hr=hr,
        ci95=ci95,
        p_values=p,
        loglik=ll,
        iterations=iterations,
    )


def km_table(curve: KMCurve) -> list:
    """(time, survival, at_risk) rows for export."""
    return [
        (float(t), float(s), int(n))
        for t, s, n in zip(curve.times, curve.survival, curve.at_risk)
    ]


def cox_report(fit: CoxFit) -> str:
    lines = ["covariate\tbeta\thr\tci95_lo\tci95_hi\tp"]
    for j, name in enumerate(fit.names):
        lo, hi = fit.ci95[j]
        lines.append(
            f"{name}\t{fit.beta[j]:.6g}\t{fit.hr[j]:.6g}"
            f"\t{lo:.6g}\t{hi:.6g}\t{fit.p_values[j]:.6g}"
        )
    lines.append(f"loglik\t{fit.loglik:.6g}")
    lines.append(f"iterations\t{fit.iterations}")
    return "\n".join(lines) + "\n"
