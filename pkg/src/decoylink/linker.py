"""Fellegi-Sunter mixture model fitted by EM, pair scoring and one-to-one link selection.

The EM runs on the histogram of distinct agreement patterns, so its cost does
not depend on the number of candidate pairs once the histogram is built.
"""

from __future__ import annotations

import csv
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .core import BlockPartition, Dataset, agreement_patterns
from .errors import InputError, NumericalError, ParameterError

log = logging.getLogger(__name__)

PROB_EPS = 1e-6
LAMBDA_EPS = 1e-9
MAX_VARS = 24
CHUNK_PAIRS = 1 << 22


@dataclass
class EmConfig:
    max_iter: int = 500
    rel_tol: float = 1e-6
    init: dict | None = None

    def __post_init__(self):
        if self.max_iter < 1:
            raise ParameterError("em max_iter must be >= 1")
        if not self.rel_tol > 0:
            raise ParameterError("em rel_tol must be positive")


@dataclass(frozen=True)
class FsModel:
    """Fitted two-class mixture: ``m``/``u`` are per-variable agreement probabilities."""

    m: np.ndarray
    u: np.ndarray
    lam: float
    loglik_trace: tuple[float, ...] = ()
    converged: bool = False
    degenerate: bool = False
    n_pairs: int = 0

    @property
    def n_iter(self) -> int:
        return max(len(self.loglik_trace) - 1, 0)

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1] if self.loglik_trace else float("nan")

    def pattern_scores(self) -> np.ndarray:
        """Posterior link probability for every agreement pattern code."""
        bits = pattern_bits(len(self.m))
        with np.errstate(divide="ignore", invalid="ignore"):
            pm = np.prod(np.where(bits, self.m, 1 - self.m), axis=1)
            pu = np.prod(np.where(bits, self.u, 1 - self.u), axis=1)
            num = self.lam * pm
            den = num + (1 - self.lam) * pu
            d = np.where(den > 0, num / den, 0.0)
        return np.clip(d, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class PairScores:
    """Sparse scores ``d`` for candidate pairs ``(i, j)``; absent pairs score below the floor."""

    n_a: int
    n_b: int
    i: np.ndarray
    j: np.ndarray
    d: np.ndarray
    synthetic_b: np.ndarray
    floor: float = 0.0

    def __post_init__(self):
        i = np.asarray(self.i, dtype=np.int64)
        j = np.asarray(self.j, dtype=np.int64)
        d = np.asarray(self.d, dtype=np.float64)
        syn = np.asarray(self.synthetic_b, dtype=bool)
        if not (len(i) == len(j) == len(d)):
            raise InputError("pair score arrays differ in length")
        if syn.shape[0] != self.n_b:
            raise InputError("synthetic_b must have one flag per B row")
        if len(d) and ((d < 0) | (d > 1)).any():
            raise InputError("scores must lie in [0, 1]")
        if len(i) and (i.min() < 0 or i.max() >= self.n_a or j.min() < 0 or j.max() >= self.n_b):
            raise InputError("pair index out of range")
        object.__setattr__(self, "i", i)
        object.__setattr__(self, "j", j)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "synthetic_b", syn)

    @classmethod
    def from_entries(cls, entries, n_a: int, n_b: int, synthetic_b=None) -> "PairScores":
        entries = list(entries)
        keys = {(i, j) for i, j, _ in entries}
        if len(keys) != len(entries):
            raise InputError("duplicate (i, j) pair in score entries")
        arr = np.asarray(entries, dtype=np.float64).reshape(-1, 3)
        syn = np.zeros(n_b, bool) if synthetic_b is None else synthetic_b
        return cls(n_a, n_b, arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2], syn)

    def __len__(self):
        return len(self.d)

    @property
    def entries(self) -> list[tuple[int, int, float]]:
        return list(zip(self.i.tolist(), self.j.tolist(), self.d.tolist()))


@dataclass(frozen=True, eq=False)
class LinkageResult:
    """One-to-one linked set ``D(xi)``; arrays are in greedy acceptance order."""

    xi: float
    i: np.ndarray
    j: np.ndarray
    d: np.ndarray
    synthetic: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.d)

    @property
    def links(self) -> list[tuple[int, int, float]]:
        return list(zip(self.i.tolist(), self.j.tolist(), self.d.tolist()))

    @property
    def real_links(self) -> list[tuple[int, int, float]]:
        keep = ~self.synthetic
        return list(zip(self.i[keep].tolist(), self.j[keep].tolist(), self.d[keep].tolist()))

    @property
    def synth_links(self) -> list[tuple[int, int, float]]:
        keep = self.synthetic
        return list(zip(self.i[keep].tolist(), self.j[keep].tolist(), self.d[keep].tolist()))

    @property
    def n_real(self) -> int:
        return int((~self.synthetic).sum())

    @property
    def n_synth(self) -> int:
        return int(self.synthetic.sum())

    def above(self, xi: float) -> "LinkageResult":
        """Restrict to links scoring strictly above ``xi`` (valid for ``xi >= self.xi``)."""
        keep = self.d > xi
        return LinkageResult(xi, self.i[keep], self.j[keep], self.d[keep], self.synthetic[keep])


def pattern_bits(n_vars: int) -> np.ndarray:
    codes = np.arange(1 << n_vars)
    return ((codes[:, None] >> np.arange(n_vars)) & 1).astype(bool)


def _pair_chunks(n_a: int, b_index: np.ndarray, a_index: np.ndarray | None = None,
                 chunk_pairs: int = CHUNK_PAIRS) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    a_index = np.arange(n_a) if a_index is None else a_index
    if len(a_index) == 0 or len(b_index) == 0:
        return
    step = max(1, chunk_pairs // len(b_index))
    for start in range(0, len(a_index), step):
        yield a_index[start:start + step], b_index


def iter_pair_chunks(a: Dataset, b: Dataset, blocking: BlockPartition | None = None,
                     chunk_pairs: int = CHUNK_PAIRS):
    """Fixed, deterministic chunking of the candidate pair set."""
    if blocking is None:
        yield from _pair_chunks(len(a), np.arange(len(b)), chunk_pairs=chunk_pairs)
        return
    for blk in blocking.blocks:
        yield from _pair_chunks(len(a), blk.b_index, blk.a_index, chunk_pairs)


def _check_inputs(a: Dataset, b: Dataset) -> None:
    if len(a) == 0 or len(b) == 0:
        raise InputError("both datasets must contain at least one record")
    if not a.schema.compatible(b.schema):
        raise InputError("datasets have incompatible schemas")
    if len(a.schema) > MAX_VARS:
        raise InputError(f"at most {MAX_VARS} linkage variables are supported")


def _map_chunks(fn, chunks, threads: int):
    if threads <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, chunks))


def pattern_histogram(a: Dataset, b: Dataset, blocking: BlockPartition | None = None,
                      threads: int = 1) -> np.ndarray:
    """Counts of each agreement pattern over the candidate pairs."""
    _check_inputs(a, b)
    n_pat = 1 << len(a.schema)
    miss = a.schema.missing_code

    def count(chunk):
        ia, ib = chunk
        pat = agreement_patterns(a.rows[ia], b.rows[ib], miss)
        return np.bincount(pat.ravel(), minlength=n_pat).astype(np.int64)

    counts = np.zeros(n_pat, dtype=np.int64)
    for c in _map_chunks(count, list(iter_pair_chunks(a, b, blocking)), threads):
        counts += c
    return counts


def _loglik(counts, log_pm, log_pu, lam):
    la = np.log(lam) + log_pm
    lb = np.log1p(-lam) + log_pu
    return float(np.sum(counts * np.logaddexp(la, lb)))


def _log_pattern_probs(bits, p):
    return np.where(bits, np.log(p), np.log1p(-p)).sum(axis=1)


def fit_histogram(counts: np.ndarray, n_vars: int, config: EmConfig | None = None,
                  init: dict | None = None) -> FsModel:
    """EM for the two-class Fellegi-Sunter mixture over pattern counts.

    ``init`` supplies starting ``m``, ``u`` and ``lam``; the M-step projects
    onto the clamped interior, which keeps the likelihood non-decreasing.
    """
    config = config or EmConfig()
    counts = np.asarray(counts, dtype=np.float64)
    if counts.shape[0] != 1 << n_vars:
        raise InputError("histogram length must be 2**n_vars")
    total = counts.sum()
    if total <= 0:
        raise InputError("no candidate pairs to fit")
    bits = pattern_bits(n_vars)
    init = init or config.init or {}
    agree_rate = (counts[:, None] * bits).sum(axis=0) / total
    m = np.asarray(init.get("m", np.full(n_vars, 0.9)), dtype=np.float64)
    u = np.asarray(init.get("u", agree_rate), dtype=np.float64)
    lam = float(init.get("lam", 0.5))
    m = np.clip(m, PROB_EPS, 1 - PROB_EPS)
    u = np.clip(u, PROB_EPS, 1 - PROB_EPS)
    lam = float(np.clip(lam, LAMBDA_EPS, 1 - LAMBDA_EPS))

    for k in np.flatnonzero((agree_rate == 0) | (agree_rate == 1)):
        warnings.warn(f"variable {k} has constant agreement ({agree_rate[k]:.0f}) over all pairs; "
                      "its probabilities are clamped", RuntimeWarning, stacklevel=2)
    degenerate = np.count_nonzero(counts) <= 1
    if degenerate:
        warnings.warn("all comparison vectors are identical; the link prior is not identifiable",
                      RuntimeWarning, stacklevel=2)

    lpm, lpu = _log_pattern_probs(bits, m), _log_pattern_probs(bits, u)
    trace = [_loglik(counts, lpm, lpu, lam)]
    converged = False
    for _ in range(config.max_iter):
        la = np.log(lam) + lpm
        lb = np.log1p(-lam) + lpu
        g = np.exp(la - np.logaddexp(la, lb))
        w_link = counts * g
        w_non = counts - w_link
        s_link, s_non = w_link.sum(), w_non.sum()
        lam = float(np.clip(s_link / total, LAMBDA_EPS, 1 - LAMBDA_EPS))
        if s_link > 0:
            m = np.clip((w_link[:, None] * bits).sum(axis=0) / s_link, PROB_EPS, 1 - PROB_EPS)
        if s_non > 0:
            u = np.clip((w_non[:, None] * bits).sum(axis=0) / s_non, PROB_EPS, 1 - PROB_EPS)
        lpm, lpu = _log_pattern_probs(bits, m), _log_pattern_probs(bits, u)
        ll = _loglik(counts, lpm, lpu, lam)
        if not np.isfinite(ll):
            raise NumericalError("EM log-likelihood became non-finite")
        prev = trace[-1]
        trace.append(ll)
        if abs(ll - prev) <= config.rel_tol * max(abs(prev), 1e-300):
            converged = True
            break

    if m.mean() < u.mean():
        m, u, lam = u, m, 1 - lam
    return FsModel(m, u, lam, tuple(trace), converged, bool(degenerate), int(total))


def fit_fs_model(a: Dataset, b: Dataset, em_config: EmConfig | None = None,
                 blocking: BlockPartition | None = None, threads: int = 1) -> FsModel:
    """Fit the mixture on the pairs that will be scored (after blocking)."""
    em_config = em_config or EmConfig()
    counts = pattern_histogram(a, b, blocking, threads)
    total = int(counts.sum())
    if total == 0:
        raise InputError("blocking leaves no candidate pairs")
    init = dict(em_config.init or {})
    init.setdefault("lam", min(len(a), len(b)) / total)
    model = fit_histogram(counts, len(a.schema), em_config, init)
    log.debug("EM: %d iterations, loglik %.6g, lambda %.3g", model.n_iter, model.loglik, model.lam)
    return model


def score_pairs(model: FsModel, a: Dataset, b: Dataset, blocking: BlockPartition | None = None,
                floor: float = 0.01, threads: int = 1) -> PairScores:
    """Posterior link probability for every candidate pair scoring at least ``floor``."""
    _check_inputs(a, b)
    if len(model.m) != len(a.schema):
        raise InputError("model was fitted on a different number of variables")
    if not 0 <= floor <= 0.5:
        raise ParameterError("score floor must lie in [0, 0.5]")
    table = model.pattern_scores()
    keep = table >= floor
    miss = a.schema.missing_code

    def score(chunk):
        ia, ib = chunk
        pat = agreement_patterns(a.rows[ia], b.rows[ib], miss)
        r, c = np.nonzero(keep[pat])
        return ia[r], ib[c], table[pat[r, c]]

    parts = _map_chunks(score, list(iter_pair_chunks(a, b, blocking)), threads)
    if parts:
        i = np.concatenate([p[0] for p in parts])
        j = np.concatenate([p[1] for p in parts])
        d = np.concatenate([p[2] for p in parts])
    else:
        i = j = np.zeros(0, np.int64)
        d = np.zeros(0)
    return PairScores(len(a), len(b), i, j, d, b.synthetic, floor)


def greedy_accept(i: np.ndarray, j: np.ndarray, d: np.ndarray, n_a: int, n_b: int,
                  min_d: float) -> np.ndarray:
    """Indices (into the inputs) accepted by greedy max-score one-to-one matching.

    Candidates with ``d > min_d`` are visited by descending ``d``, then
    ascending ``i``, then ascending ``j``; the result is in visiting order.
    """
    cand = np.flatnonzero(d > min_d)
    order = cand[np.lexsort((j[cand], i[cand], -d[cand]))]
    taken_a = np.zeros(n_a, dtype=bool)
    taken_b = np.zeros(n_b, dtype=bool)
    accepted = []
    ii, jj = i[order].tolist(), j[order].tolist()
    for pos, a_row, b_row in zip(order.tolist(), ii, jj):
        if taken_a[a_row] or taken_b[b_row]:
            continue
        taken_a[a_row] = True
        taken_b[b_row] = True
        accepted.append(pos)
    return np.asarray(accepted, dtype=np.int64)


def check_threshold(xi: float) -> float:
    xi = float(xi)
    if not 0.5 <= xi < 1:
        raise ParameterError(f"threshold xi must lie in [0.5, 1), got {xi}")
    return xi


def select_links(scores: PairScores, xi: float) -> LinkageResult:
    xi = check_threshold(xi)
    acc = greedy_accept(scores.i, scores.j, scores.d, scores.n_a, scores.n_b, xi)
    jj = scores.j[acc]
    return LinkageResult(xi, scores.i[acc], jj, scores.d[acc], scores.synthetic_b[jj])


def write_linked_pairs(result: LinkageResult, a: Dataset, b: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["a_id", "b_id", "score", "b_origin"])
        for i, j, d, syn in zip(result.i, result.j, result.d, result.synthetic):
            w.writerow([a.source_id[i], b.source_id[j], repr(float(d)), "synthetic" if syn else "real"])


def model_summary(model: FsModel, names: list[str]) -> str:
    lines = [f"pairs fitted: {model.n_pairs}",
             f"lambda: {model.lam:.6g}",
             f"iterations: {model.n_iter} ({'converged' if model.converged else 'not converged'})",
             f"final log-likelihood: {model.loglik:.10g}",
             f"degenerate: {model.degenerate}",
             "variable,m,u"]
    lines += [f"{n},{m:.6g},{u:.6g}" for n, m, u in zip(names, model.m, model.u)]
    return "\n".join(lines) + "\n"
