"""Ground-truth evaluation of linkages and FDP estimators."""

from __future__ import annotations

import math
from collections import defaultdict, deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Dataset
from .errors import InputError, NumericalError, ParameterError
from .fdp import FdpCurve
from .linker import LinkageResult
from .simgen import GroundTruth
from .synth import SynthConfig, density_ratio_auc

DGP_COEFFICIENTS = (-5.0, 1.0, 1.0, 20.0)


@dataclass(frozen=True)
class Confusion:
    """Counts at one threshold.

    An entity present ``c_A`` times in A and ``c_B`` times in B contributes
    ``min(c_A, c_B)`` true pairs, so ``tp + fn`` is the number of true pairs a
    one-to-one linkage can recover even when files contain duplicates.
    """

    xi: float
    tp: int
    fp: int
    fn: int

    @property
    def n_linked(self) -> int:
        return self.tp + self.fp


def true_fdp(c: Confusion) -> float | None:
    if c.tp + c.fp == 0:
        return None
    return c.fp / (c.tp + c.fp)


def sensitivity(c: Confusion) -> float | None:
    if c.tp + c.fn == 0:
        return None
    return c.tp / (c.tp + c.fn)


def fnp(c: Confusion) -> float | None:
    s = sensitivity(c)
    return None if s is None else 1.0 - s


def _check_sizes(truth: GroundTruth, n_a: int, n_b: int) -> None:
    if len(truth.entity_a) != n_a or len(truth.entity_b) != n_b:
        raise InputError(f"truth describes {len(truth.entity_a)} x {len(truth.entity_b)} rows, "
                         f"data has {n_a} x {n_b}")


def matchable_pairs(truth: GroundTruth) -> dict[int, int]:
    """Entity id to the number of true pairs a one-to-one linkage could form."""
    ea, ca = np.unique(truth.entity_a, return_counts=True)
    eb, cb = np.unique(truth.entity_b, return_counts=True)
    common, ia, ib = np.intersect1d(ea, eb, assume_unique=True, return_indices=True)
    return dict(zip(common.tolist(), np.minimum(ca[ia], cb[ib]).tolist()))


def confusion_pairs(i, j, truth: GroundTruth, xi: float = 0.5) -> Confusion:
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    if len(i) and (i.max() >= len(truth.entity_a) or j.max() >= len(truth.entity_b) or min(i.min(), j.min()) < 0):
        raise InputError("linked pair refers to a row outside the truth table")
    hit = truth.entity_a[i] == truth.entity_b[j]
    tp = int(hit.sum())
    total = sum(matchable_pairs(truth).values())
    return Confusion(float(xi), tp, int(len(i) - tp), total - tp)


def confusion_at(links: LinkageResult, truth: GroundTruth, xi: float | None = None) -> Confusion:
    """Confusion of the real links scoring above ``xi`` (default: the run's own threshold)."""
    xi = links.xi if xi is None else xi
    keep = (~links.synthetic) & (links.d > xi)
    return confusion_pairs(links.i[keep], links.j[keep], truth, xi)


def exact_match_pairs(a: Dataset, b: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Pairs agreeing on every variable, made one-to-one in ascending ``(i, j)`` order.

    Records with a missing value never match.
    """
    if not a.schema.compatible(b.schema):
        raise InputError("datasets have incompatible schemas")
    miss = a.schema.missing_code
    queues: dict[bytes, deque] = defaultdict(deque)
    for j in np.flatnonzero((b.rows != miss).all(axis=1)).tolist():
        queues[b.rows[j].tobytes()].append(j)
    out_i, out_j = [], []
    for i in np.flatnonzero((a.rows != miss).all(axis=1)).tolist():
        q = queues.get(a.rows[i].tobytes())
        if q:
            out_i.append(i)
            out_j.append(q.popleft())
    return np.asarray(out_i, dtype=np.int64), np.asarray(out_j, dtype=np.int64)


def exact_match_baseline(a: Dataset, b: Dataset, truth: GroundTruth) -> Confusion:
    _check_sizes(truth, len(a), len(b))
    i, j = exact_match_pairs(a, b)
    return confusion_pairs(i, j, truth, xi=1.0)


def auc_link(b: Dataset, truth: GroundTruth, folds: int = 5, config: SynthConfig | None = None,
             seed: int = 0) -> float | None:
    """How well B rows that link can be told from those that do not; about 0.5 under random linking."""
    if len(truth.entity_b) != len(b):
        raise InputError("truth and B have different numbers of rows")
    mask = truth.linking_b
    if mask.all() or not mask.any():
        return None
    return density_ratio_auc(b.take(np.flatnonzero(mask)), b.take(np.flatnonzero(~mask)), folds, config, seed)


@dataclass(frozen=True)
class AssessmentRow:
    xi: float
    true_fdp: float | None
    mean_estimate: float | None
    bias: float | None
    rmse: float | None
    stderr: float | None
    n_used: int
    n_excluded: int


@dataclass(frozen=True)
class EstimatorAssessment:
    rows: tuple[AssessmentRow, ...]

    def at(self, xi: float) -> AssessmentRow:
        for r in self.rows:
            if abs(r.xi - xi) < 1e-9:
                return r
        raise KeyError(xi)


def assess_estimator(curves: Sequence[FdpCurve], truth_fdp, estimator: str = "fdp_hat") -> EstimatorAssessment:
    """Bias, RMSE and standard error of an estimator per threshold.

    ``truth_fdp`` is either one value per threshold or one row per curve, the
    latter when each repeat has its own realised FDP. Undefined estimates or
    truths are dropped and counted in ``n_excluded``.
    """
    if not curves:
        raise ParameterError("need at least one curve")
    if estimator not in ("fdp_hat", "prob_fdp", "fdp_hat_synth"):
        raise ParameterError(f"unknown estimator {estimator!r}")
    n_xi = len(curves[0].rows)
    truth = np.array([[np.nan if v is None else v for v in row] for row in np.atleast_2d(
        np.asarray(truth_fdp, dtype=object))], dtype=np.float64)
    if truth.shape[0] == 1:
        truth = np.repeat(truth, len(curves), axis=0)
    if truth.shape != (len(curves), n_xi):
        raise ParameterError("truth_fdp must have one value per threshold or one row per curve")
    rows = []
    for k in range(n_xi):
        est = np.array([np.nan if getattr(c.rows[k], estimator) is None else getattr(c.rows[k], estimator)
                        for c in curves])
        ok = ~np.isnan(est) & ~np.isnan(truth[:, k])
        n = int(ok.sum())
        xi = curves[0].rows[k].xi
        if n == 0:
            rows.append(AssessmentRow(xi, None, None, None, None, None, 0, len(curves)))
            continue
        err = est[ok] - truth[ok, k]
        se = float(np.std(err, ddof=1) / math.sqrt(n)) if n > 1 else None
        rows.append(AssessmentRow(xi, float(truth[ok, k].mean()), float(est[ok].mean()), float(err.mean()),
                                  float(math.sqrt(np.mean(err ** 2))), se, n, len(curves) - n))
    return EstimatorAssessment(tuple(rows))


@dataclass(frozen=True)
class OlsFit:
    coefficients: np.ndarray
    std_errors: np.ndarray
    r_squared: float
    n: int


def ols(x: np.ndarray, y: np.ndarray) -> OlsFit:
    """Least squares with intercept and classical standard errors."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    design = np.column_stack([np.ones(len(y)), x])
    n, p = design.shape
    if n <= p or np.linalg.matrix_rank(design) < p:
        raise NumericalError(f"regression design is rank deficient ({n} observations, {p} parameters)")
    gram = design.T @ design
    try:
        inv = np.linalg.inv(gram)
    except np.linalg.LinAlgError:
        inv = np.linalg.pinv(gram)
    beta = inv @ design.T @ y
    resid = y - design @ beta
    sigma2 = resid @ resid / (n - p)
    tss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - (resid @ resid) / tss if tss > 0 else 1.0
    return OlsFit(beta, np.sqrt(np.diag(inv) * sigma2), float(r2), n)


@dataclass(frozen=True, eq=False)
class PlantedOutcomes:
    covariates: np.ndarray  # (n_a, 3), attached to A rows
    outcome: np.ndarray  # (n_b,), attached to B rows


def plant_outcomes(truth: GroundTruth, seed: int, coefficients=DGP_COEFFICIENTS,
                   noise_sd: float = 1.0) -> PlantedOutcomes:
    """Covariates on A and an outcome on B following a linear model on true links.

    X1 ~ N(0, 1), X2 ~ N(0, 3), X3 ~ Beta(0.2, 0.1) - 2/3. B rows whose entity is
    absent from A get outcomes drawn by inverse transform from the empirical
    distribution of the linked outcomes. Duplicates share their entity's values.
    """
    rng = np.random.default_rng(seed)
    ents = np.union1d(truth.entity_a, truth.entity_b)
    n = len(ents)
    x = np.column_stack([rng.normal(0, 1, n), rng.normal(0, math.sqrt(3), n),
                         rng.beta(0.2, 0.1, n) - 2 / 3])
    eps = rng.normal(0, noise_sd, n) if noise_sd > 0 else np.zeros(n)
    c = np.asarray(coefficients, dtype=np.float64)
    y = c[0] + x @ c[1:] + eps
    linked = np.isin(ents, truth.entity_a) & np.isin(ents, truth.entity_b)
    if not linked.any():
        raise ParameterError("no true links to plant the model on")
    y_link = np.sort(y[linked])
    u = rng.random(int((~linked).sum()))
    y[~linked] = y_link[np.minimum((u * len(y_link)).astype(np.int64), len(y_link) - 1)]
    pos_a = np.searchsorted(ents, truth.entity_a)
    pos_b = np.searchsorted(ents, truth.entity_b)
    return PlantedOutcomes(x[pos_a], y[pos_b])


def controlled_fdp_links(truth: GroundTruth, n: int, fdp: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """``n`` one-to-one pairs of which ``round(n * fdp)`` are false.

    True pairs are sampled from the link set; false ones re-pair sampled links
    cyclically so every pair joins different entities.
    """
    if not 0 <= fdp <= 1:
        raise ParameterError("fdp must lie in [0, 1]")
    links = truth.links
    if n > len(links):
        raise ParameterError(f"asked for {n} pairs but only {len(links)} true links exist")
    rng = np.random.default_rng(seed)
    chosen = links[rng.choice(len(links), size=n, replace=False)]
    n_false = int(round(n * fdp))
    i, j = chosen[:, 0].copy(), chosen[:, 1].copy()
    if n_false == 1:
        spare = np.setdiff1d(np.flatnonzero(~truth.linking_b), j)
        if len(spare) == 0:
            raise ParameterError("no non-linking B row available for a false pair")
        j[0] = spare[0]
    elif n_false > 1:
        j[:n_false] = np.roll(j[:n_false], 1)
    return i, j


def inference_demo(i, j, covariates: np.ndarray, outcome: np.ndarray) -> OlsFit:
    """Regress the B outcome on the A covariates over linked pairs."""
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    if len(i) == 0:
        raise ParameterError("linked set is empty")
    return ols(covariates[i], outcome[j])
