"""False discovery proportion estimation with synthetic decoy records.

File B is augmented with records sampled from its own estimated distribution.
Decoys cannot be true links, so every link they form is a known false
positive; scaling their count by ``N_B / N_synth`` estimates the number of
false positives among the real links.

Undefined estimates (no real links at a threshold) are represented by
``None`` and written as ``undefined`` in CSV output.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import Dataset, block_datasets
from .errors import ConfigError, DecoyLinkError, ParameterError
from .linker import (EmConfig, FsModel, LinkageResult, PairScores, check_threshold, fit_fs_model,
                     greedy_accept, score_pairs)
from .synth import SynthConfig, Synthesiser, fit_synthesiser, sample_synthetic

log = logging.getLogger(__name__)

UNDEFINED = "undefined"
AGGREGATION_RULES = ("mean_min1", "truncated_mean", "median")


def default_xi_grid() -> tuple[float, ...]:
    return tuple(round(0.5 + 0.01 * k, 2) for k in range(50))


@dataclass
class LinkerConfig:
    em: EmConfig = field(default_factory=EmConfig)
    score_floor: float = 0.01
    blocking: str | None = None
    threads: int = 1


@dataclass
class FdpConfig:
    alpha: float = 0.10
    xi_grid: tuple[float, ...] = field(default_factory=default_xi_grid)
    repeats: int = 10
    seed_base: int = 0
    aggregation_rule: str = "mean_min1"
    target: float = 0.10
    workers: int = 1

    def __post_init__(self):
        self.xi_grid = tuple(float(x) for x in self.xi_grid)
        if not 0 < self.alpha <= 0.20:
            raise ParameterError(f"alpha must lie in (0, 0.20], got {self.alpha}")
        check_grid(self.xi_grid)
        if self.repeats < 1:
            raise ParameterError("repeats must be >= 1")
        if self.aggregation_rule not in AGGREGATION_RULES:
            raise ParameterError(f"aggregation_rule must be one of {AGGREGATION_RULES}")


def check_grid(xi_grid: Sequence[float]) -> None:
    if len(xi_grid) == 0:
        raise ParameterError("xi grid is empty")
    for xi in xi_grid:
        check_threshold(xi)
    if any(b <= a for a, b in zip(xi_grid, xi_grid[1:])):
        raise ParameterError("xi grid must be strictly ascending")


def fdp_hat(fp_synth: int, n_b: int, n_synth: int, n_real_linked: int) -> float | None:
    """Decoy-based estimate: ``fp_synth * (n_b / n_synth) / n_real_linked``."""
    if n_real_linked <= 0:
        return None
    return fp_synth * (n_b / n_synth) / n_real_linked


def fdp_hat_synth(fp_synth: int, n_b: int, n_synth: int, n_all_linked: int) -> float | None:
    """Alternative estimate over the augmented linked set (biased for the real links)."""
    if n_all_linked <= 0:
        return None
    return fp_synth * (1 + n_b / n_synth) / n_all_linked


def prob_fdp(scores: PairScores | None, xi: float, links: LinkageResult) -> float | None:
    """Naive model-based estimate: mean of ``1 - d`` over real links scoring above ``xi``."""
    keep = (~links.synthetic) & (links.d > xi)
    if not keep.any():
        return None
    # fsum is correctly rounded, so the value does not depend on link order
    return math.fsum((1.0 - links.d[keep]).tolist()) / int(keep.sum())


def condition_gap(fp_synth: int, fp_true: int, n_a: int, n_b: int, n_synth: int) -> float:
    """Decoy false-positive rate per pair minus the real one; zero when decoys behave like non-links."""
    return fp_synth / (n_a * n_synth) - fp_true / (n_a * n_b)


@dataclass(frozen=True)
class FdpRow:
    xi: float
    n_real_linked: int
    fp_synth: int
    fdp_hat: float | None
    prob_fdp: float | None
    fdp_hat_synth: float | None

    @property
    def exceeds_one(self) -> bool:
        return self.fdp_hat is not None and self.fdp_hat > 1


@dataclass(frozen=True)
class FdpCurve:
    rows: tuple[FdpRow, ...]
    n_b: int
    n_synth: int

    @property
    def xi(self) -> np.ndarray:
        return np.array([r.xi for r in self.rows])

    def estimates(self) -> list[float | None]:
        return [r.fdp_hat for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["xi", "n_real_linked", "fp_synth", "fdp_hat", "prob_fdp", "fdp_hat_synth", "exceeds_one"])
            for r in self.rows:
                w.writerow([fmt_value(r.xi), r.n_real_linked, r.fp_synth, fmt_value(r.fdp_hat),
                            fmt_value(r.prob_fdp), fmt_value(r.fdp_hat_synth), str(r.exceeds_one).lower()])


def fmt_value(x) -> str:
    if x is None:
        return UNDEFINED
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(round(float(x), 12))


def fdp_curve(scores: PairScores, xi_grid: Sequence[float], n_b: int | None = None,
              linked: LinkageResult | None = None) -> FdpCurve:
    """Estimator table over the threshold grid.

    Greedy matching is run once at the lowest threshold; higher thresholds
    keep the accepted links scoring above them. ``n_b`` defaults to the number
    of real B rows in ``scores``.
    """
    check_grid(xi_grid)
    n_synth = int(scores.synthetic_b.sum())
    if n_synth == 0:
        raise ConfigError("scores contain no synthetic B rows; cannot estimate FDP")
    n_b = int(scores.n_b - n_synth) if n_b is None else n_b
    if linked is None:
        linked = link_curve_base(scores, xi_grid[0])
    rows = []
    for xi in xi_grid:
        keep = linked.d > xi
        syn = linked.synthetic[keep]
        fp_s = int(syn.sum())
        n_real = int((~syn).sum())
        rows.append(FdpRow(float(xi), n_real, fp_s,
                           fdp_hat(fp_s, n_b, n_synth, n_real),
                           prob_fdp(scores, xi, linked),
                           fdp_hat_synth(fp_s, n_b, n_synth, n_real + fp_s)))
    return FdpCurve(tuple(rows), n_b, n_synth)


def link_curve_base(scores: PairScores, xi_min: float) -> LinkageResult:
    acc = greedy_accept(scores.i, scores.j, scores.d, scores.n_a, scores.n_b, check_threshold(xi_min))
    j = scores.j[acc]
    return LinkageResult(xi_min, scores.i[acc], j, scores.d[acc], scores.synthetic_b[j])


def augment_b(b: Dataset, s: Synthesiser, alpha: float, seed: int) -> Dataset:
    """B with ``round(alpha * N_B)`` decoys appended."""
    if not 0 < alpha <= 0.20:
        raise ParameterError(f"alpha must lie in (0, 0.20], got {alpha}")
    n_synth = int(round(alpha * len(b)))
    return b.concat(sample_synthetic(s, n_synth, seed))


@dataclass(frozen=True)
class AggregatedFdp:
    xi: tuple[float, ...]
    point_estimate: tuple[float | None, ...]
    standard_error: tuple[float | None, ...]
    sd: tuple[float | None, ...]
    n_valid_repeats: tuple[int, ...]
    bias_flag_rate: tuple[float | None, ...]
    rule: str = "mean_min1"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["xi", "estimate", "stderr", "n_valid", "bias_flag_rate"])
            for xi, est, se, n, flag in zip(self.xi, self.point_estimate, self.standard_error,
                                            self.n_valid_repeats, self.bias_flag_rate):
                w.writerow([fmt_value(xi), fmt_value(est), fmt_value(se), n, fmt_value(flag)])

    def recommend(self, target: float) -> int | None:
        """Index of the smallest threshold whose aggregate is at most ``target``."""
        for k, est in enumerate(self.point_estimate):
            if est is not None and est <= target:
                return k
        return None


def aggregate(curves: Sequence[FdpCurve], rule: str = "mean_min1") -> AggregatedFdp:
    """Combine per-repeat curves threshold by threshold.

    ``mean_min1`` averages ``min(estimate, 1)``; ``truncated_mean`` averages
    the estimates not exceeding one; ``median`` takes the median of the
    capped estimates.
    """
    if rule not in AGGREGATION_RULES:
        raise ParameterError(f"aggregation rule must be one of {AGGREGATION_RULES}")
    if not curves:
        raise ParameterError("nothing to aggregate")
    xi = tuple(r.xi for r in curves[0].rows)
    points, ses, sds, valid, flags = [], [], [], [], []
    for k in range(len(xi)):
        raw = [c.rows[k].fdp_hat for c in curves if c.rows[k].fdp_hat is not None]
        valid.append(len(raw))
        if not raw:
            points.append(None), ses.append(None), sds.append(None), flags.append(None)
            continue
        est = np.asarray(raw, dtype=np.float64)
        flags.append(float(np.mean(est > 1)))
        if rule == "truncated_mean":
            vals = est[est <= 1]
        else:
            vals = np.minimum(est, 1.0)
        if len(vals) == 0:
            points.append(None), ses.append(None), sds.append(None)
            continue
        points.append(float(np.median(vals)) if rule == "median" else float(np.mean(vals)))
        if len(vals) > 1:
            sd = float(np.std(vals, ddof=1))
            sds.append(sd)
            ses.append(sd / math.sqrt(len(vals)))
        else:
            sds.append(None)
            ses.append(None)
    return AggregatedFdp(xi, tuple(points), tuple(ses), tuple(sds), tuple(valid), tuple(flags), rule)


@dataclass(frozen=True, eq=False)
class RepeatResult:
    """One run of the procedure.

    ``links`` holds the links accepted at the lowest threshold with ``j``
    mapped back to rows of the un-augmented B (``-1`` for decoys).
    """

    repeat: int
    curve: FdpCurve | None
    links: LinkageResult | None
    model: FsModel | None
    error: str | None = None
    b_ids: np.ndarray | None = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.error is None


DecoySampler = Callable[[Dataset, int, int], Dataset]


def synthesiser_decoys(b: Dataset, synth_cfg: SynthConfig | None = None) -> DecoySampler:
    """Default decoy source: the sequential synthesiser fitted on ``b``.

    Fitting is deterministic, so one fit serves every repeat.
    """
    s = fit_synthesiser(b, synth_cfg)
    return lambda _b, n, seed: sample_synthetic(s, n, seed)


def copied_decoys(source: Dataset) -> DecoySampler:
    """Deliberately biased decoys: rows resampled from ``source``.

    Copying records known to link produces decoys that match A far more often
    than real non-links do, which the bias flag should catch.
    """
    def sample(b: Dataset, n: int, seed: int) -> Dataset:
        rows = source.rows[np.random.default_rng(seed).integers(0, len(source), n)]
        ids = np.asarray([f"copy-{k}" for k in range(n)], dtype=object)
        return Dataset(b.schema, rows, np.ones(n, bool), ids, b.codebook)
    return sample


def run_repeat(a: Dataset, b: Dataset, r: int, linker_cfg: LinkerConfig, fdp_cfg: FdpConfig,
               decoys: DecoySampler) -> RepeatResult:
    """One pass of the procedure with seed ``seed_base + r``.

    The augmented file is shuffled before linking so that decoys and real
    records compete on equal terms when scores tie.
    """
    seed = fdp_cfg.seed_base + r
    n_synth = int(round(fdp_cfg.alpha * len(b)))
    if n_synth < 1:
        raise ConfigError(f"alpha * N_B rounds to zero decoys (N_B = {len(b)})")
    synth = decoys(b, n_synth, seed)
    if len(synth) != n_synth:
        raise ConfigError("decoy sampler returned the wrong number of records")
    synth = Dataset(b.schema.with_cardinalities(synth.schema.cardinalities), synth.rows,
                    np.ones(n_synth, bool), synth.source_id, b.codebook)
    b_aug = b.concat(synth)
    perm = np.random.default_rng([seed, 0x5EED]).permutation(len(b_aug))
    b_shuf = b_aug.take(perm)
    try:
        blocking = block_datasets(a, b_shuf, linker_cfg.blocking) if linker_cfg.blocking else None
        model = fit_fs_model(a, b_shuf, linker_cfg.em, blocking, linker_cfg.threads)
        scores = score_pairs(model, a, b_shuf, blocking, linker_cfg.score_floor, linker_cfg.threads)
    except DecoyLinkError as exc:
        log.warning("repeat %d failed: %s", r, exc)
        return RepeatResult(r, None, None, None, str(exc))
    base = link_curve_base(scores, fdp_cfg.xi_grid[0])
    curve = fdp_curve(scores, fdp_cfg.xi_grid, n_b=len(b), linked=base)
    orig_j = perm[base.j]
    orig_j = np.where(orig_j < len(b), orig_j, -1)
    links = LinkageResult(base.xi, base.i, orig_j, base.d, base.synthetic)
    return RepeatResult(r, curve, links, model, None, b_shuf.source_id[base.j])


@dataclass(frozen=True)
class ProcedureResult:
    repeats: tuple[RepeatResult, ...]
    aggregate: AggregatedFdp | None
    n_b: int
    n_synth: int

    @property
    def curves(self) -> list[FdpCurve]:
        return [r.curve for r in self.repeats if r.ok]


def run_procedure(a: Dataset, b: Dataset, linker_cfg: LinkerConfig | None = None,
                  synth_cfg: SynthConfig | None = None, fdp_cfg: FdpConfig | None = None,
                  decoys: DecoySampler | None = None) -> ProcedureResult:
    """Repeat decoy augmentation, linkage and counting, then aggregate per threshold.

    ``decoys(b, n, seed)`` overrides the synthesiser, e.g. to sample from a
    known generator or to inject deliberately corrupted decoys.
    """
    linker_cfg = linker_cfg or LinkerConfig()
    fdp_cfg = fdp_cfg or FdpConfig()
    decoys = decoys or synthesiser_decoys(b, synth_cfg)
    if fdp_cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=fdp_cfg.workers) as pool:
            results = list(pool.map(lambda r: run_repeat(a, b, r, linker_cfg, fdp_cfg, decoys),
                                    range(1, fdp_cfg.repeats + 1)))
    else:
        results = [run_repeat(a, b, r, linker_cfg, fdp_cfg, decoys) for r in range(1, fdp_cfg.repeats + 1)]
    ok = [r.curve for r in results if r.ok]
    agg = aggregate(ok, fdp_cfg.aggregation_rule) if ok else None
    return ProcedureResult(tuple(results), agg, len(b), int(round(fdp_cfg.alpha * len(b))))


def write_report(result: ProcedureResult, fdp_cfg: FdpConfig, path) -> str:
    agg = result.aggregate
    lines = [f"repeats: {len(result.repeats)} ({sum(r.ok for r in result.repeats)} valid)",
             f"N_B: {result.n_b}, decoys per repeat: {result.n_synth} (alpha = {fdp_cfg.alpha})",
             f"aggregation: {fdp_cfg.aggregation_rule}, target FDP: {fdp_cfg.target}"]
    for r in result.repeats:
        if not r.ok:
            lines.append(f"repeat {r.repeat} excluded: {r.error}")
    if agg is None:
        lines.append("no valid repeat; the linkage is not reliable")
    else:
        k = agg.recommend(fdp_cfg.target)
        if k is None:
            lines.append(f"no threshold reaches an estimated FDP <= {fdp_cfg.target}; "
                         "the linkage is not reliable")
        else:
            sizes = [c.rows[k].n_real_linked for c in result.curves]
            lines.append(f"recommended xi: {agg.xi[k]:.2f} (estimated FDP {agg.point_estimate[k]:.4f}, "
                         f"mean linked set size {np.mean(sizes):.1f})")
        flagged = [(x, f) for x, f in zip(agg.xi, agg.bias_flag_rate) if f]
        if flagged:
            worst = max(f for _, f in flagged)
            lines.append(f"bias flag: estimates exceed one at {len(flagged)} thresholds "
                         f"(max rate {worst:.2f}, lowest xi {flagged[0][0]:.2f}); "
                         "decoys do not behave like non-links")
        else:
            lines.append("bias flag: no estimate exceeds one")
    text = "\n".join(lines) + "\n"
    Path(path).write_text(text, encoding="utf-8")
    return text


def read_curve_csv(path) -> FdpCurve:
    """Inverse of :meth:`FdpCurve.write_csv`; ``n_b`` and ``n_synth`` are not stored and read back as 0."""
    def num(v):
        return None if v == UNDEFINED else float(v)
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows.append(FdpRow(float(rec["xi"]), int(rec["n_real_linked"]), int(rec["fp_synth"]),
                               num(rec["fdp_hat"]), num(rec["prob_fdp"]), num(rec["fdp_hat_synth"])))
    return FdpCurve(tuple(rows), 0, 0)
