"""Sequential conditional-table synthesiser for categorical records.

Each variable is drawn from a frequency table conditioned on the variables
generated before it. Contexts seen fewer than ``max_context`` times back off
to a shorter context (the most recently generated variables are kept), and
every table is smoothed towards its backed-off parent:

    P(v | ctx) = (n(ctx, v) + gamma * K * P(v | parent)) / (n(ctx) + gamma * K)

where ``K`` is the support size. At the root the parent is uniform, which is
ordinary additive smoothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .core import Dataset
from .errors import InputError, ParameterError

UNSEEN_LOGP = np.log(1e-12)


@dataclass
class SynthConfig:
    gamma: float = 0.5
    max_context: int = 10
    variable_order: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.gamma < 0:
            raise ParameterError("gamma must be non-negative")
        if self.max_context < 1:
            raise ParameterError("max_context must be >= 1")


@dataclass(frozen=True, eq=False)
class Synthesiser:
    """Fitted sampler. ``tables[p][L]`` maps a length-``L`` context tuple to a distribution."""

    variable_order: tuple[int, ...]
    supports: tuple[np.ndarray, ...]
    tables: tuple[tuple[dict, ...], ...]
    gamma: float
    max_context: int
    template: Dataset = field(repr=False)

    def distribution(self, position: int, context: tuple[int, ...]) -> np.ndarray:
        """Conditional distribution at ``position`` given the full preceding context."""
        levels = self.tables[position]
        for length in range(len(context), -1, -1):
            key = context[len(context) - length:]
            dist = levels[length].get(key)
            if dist is not None:
                return dist
        raise AssertionError("root table missing")

    def log_density(self, rows: np.ndarray) -> np.ndarray:
        """Log-probability of each row; unseen categories get a small floor."""
        rows = np.asarray(rows)
        out = np.zeros(len(rows))
        ordered = rows[:, self.variable_order]
        idx = [np.searchsorted(s, ordered[:, p]) for p, s in enumerate(self.supports)]
        hit = [(ix < len(s)) & (s[np.minimum(ix, len(s) - 1)] == ordered[:, p])
               for p, (ix, s) in enumerate(zip(idx, self.supports))]
        for r in range(len(rows)):
            vals = tuple(ordered[r].tolist())
            total = 0.0
            for p in range(len(self.supports)):
                if not hit[p][r]:
                    total += UNSEEN_LOGP
                    continue
                total += np.log(self.distribution(p, vals[:p])[idx[p][r]])
            out[r] = total
        return out


def _order_for(ds: Dataset, config: SynthConfig) -> tuple[int, ...]:
    if config.variable_order is not None:
        order = tuple(ds.schema.index(n) for n in config.variable_order)
        if sorted(order) != list(range(len(ds.schema))):
            raise ParameterError("variable_order must be a permutation of the schema variables")
        return order
    miss = ds.schema.missing_code
    card = [len(np.unique(col[col != miss])) for col in ds.rows.T]
    return tuple(sorted(range(len(card)), key=lambda k: (-card[k], k)))


def fit_synthesiser(b: Dataset, config: SynthConfig | None = None) -> Synthesiser:
    config = config or SynthConfig()
    if len(b) == 0:
        raise InputError("cannot fit a synthesiser on an empty dataset")
    order = _order_for(b, config)
    data = b.rows[:, order]
    # the missing code is a category only where B actually has missing values
    supports = tuple(np.unique(data[:, p]).astype(np.int32) for p in range(data.shape[1]))
    tables = []
    for p, support in enumerate(supports):
        k = len(support)
        vidx = np.searchsorted(support, data[:, p])
        root_counts = np.bincount(vidx, minlength=k).astype(np.float64)
        root = (root_counts + config.gamma) / (len(data) + config.gamma * k)
        levels = [{(): root}]
        for length in range(1, p + 1):
            ctx = data[:, p - length:p]
            uniq, inv = np.unique(ctx, axis=0, return_inverse=True)
            inv = inv.reshape(-1)
            n_ctx = np.bincount(inv, minlength=len(uniq))
            keep = np.flatnonzero(n_ctx >= config.max_context)
            level = {}
            if len(keep):
                joint = np.bincount(inv * k + vidx, minlength=len(uniq) * k).reshape(len(uniq), k)
                parent_level = levels[length - 1]
                pseudo = config.gamma * k
                for c in keep.tolist():
                    key = tuple(uniq[c].tolist())
                    parent = parent_level[key[1:]]
                    level[key] = (joint[c] + pseudo * parent) / (n_ctx[c] + pseudo)
            levels.append(level)
        tables.append(tuple(levels))
    return Synthesiser(order, supports, tuple(tables), config.gamma, config.max_context, b)


def sample_synthetic(s: Synthesiser, n: int, seed: int, id_prefix: str = "synth-") -> Dataset:
    """Draw ``n`` records ancestrally; identical seeds give identical datasets."""
    if n < 0:
        raise ParameterError("sample size must be non-negative")
    schema = s.template.schema
    rows = np.empty((n, len(schema)), dtype=np.int32)
    if n:
        rng = np.random.default_rng(seed)
        draws = rng.random((n, len(s.supports)))
        cdf_cache: dict = {}
        for r in range(n):
            vals: list[int] = []
            for p, support in enumerate(s.supports):
                key = (p, tuple(vals))
                cdf = cdf_cache.get(key)
                if cdf is None:
                    cdf = np.cumsum(s.distribution(p, key[1]))
                    cdf_cache[key] = cdf
                ix = min(int(np.searchsorted(cdf, draws[r, p] * cdf[-1], side="right")), len(support) - 1)
                vals.append(int(support[ix]))
            rows[r, list(s.variable_order)] = vals
    ids = np.asarray([f"{id_prefix}{k}" for k in range(n)], dtype=object)
    return Dataset(schema, rows, np.ones(n, dtype=bool), ids, s.template.codebook)


DEFAULT_TUNING_GRID = tuple((g, c) for c in (10, 30, 100, 300, 1000, 10 ** 9) for g in (0.5, 2.0, 8.0))


def heldout_loglik(b: Dataset, config: SynthConfig, folds: int = 5, seed: int = 0) -> float:
    """Mean cross-validated log-density per record."""
    fold = content_folds(b.rows, folds, seed)
    total = 0.0
    for f in range(folds):
        test = fold == f
        if not test.any() or test.all():
            continue
        s = fit_synthesiser(b.take(np.flatnonzero(~test)), config)
        total += float(s.log_density(b.rows[test]).sum())
    return total / len(b)


def tune_synthesiser(b: Dataset, grid=DEFAULT_TUNING_GRID, folds: int = 5, seed: int = 0,
                     variable_order: tuple[str, ...] | None = None) -> SynthConfig:
    """Pick ``(gamma, max_context)`` from ``grid`` by held-out log-likelihood.

    Small files with many categories make the default context threshold
    overfit; a huge ``max_context`` reduces the model to independent marginals.
    The first grid entry wins ties.
    """
    if folds < 2:
        raise ParameterError("need at least 2 folds")
    best, best_ll = None, -np.inf
    for gamma, max_context in grid:
        cfg = SynthConfig(gamma, max_context, variable_order)
        ll = heldout_loglik(b, cfg, folds, seed)
        if ll > best_ll:
            best, best_ll = cfg, ll
    return best


def roc_auc(scores, labels) -> float:
    """Rank-statistic AUC: probability a positive outscores a negative, ties count half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ParameterError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass(frozen=True)
class SynthQuality:
    auc: float
    n_real: int
    n_synth: int


def content_folds(rows: np.ndarray, folds: int, seed: int) -> np.ndarray:
    """Fold id per row; identical records always share a fold."""
    _, inv = np.unique(rows, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    n_groups = inv.max() + 1 if len(inv) else 0
    group_fold = np.random.default_rng(seed).permutation(n_groups) % folds
    return group_fold[inv]


def density_ratio_auc(positive: Dataset, negative: Dataset, folds: int = 5,
                      config: SynthConfig | None = None, seed: int = 0) -> float:
    """Cross-validated AUC of the log-density-ratio ranker separating two record sets."""
    if folds < 2:
        raise ParameterError("need at least 2 folds")
    if len(positive) == 0 or len(negative) == 0:
        raise ParameterError("both classes must be non-empty")
    if not positive.schema.compatible(negative.schema):
        raise InputError("datasets have incompatible schemas")
    config = config or SynthConfig()
    rows = np.vstack([positive.rows, negative.rows])
    labels = np.r_[np.ones(len(positive), bool), np.zeros(len(negative), bool)]
    fold = content_folds(rows, folds, seed)
    scores = np.zeros(len(rows))
    cards = np.maximum(positive.schema.cardinalities, negative.schema.cardinalities)
    joint = Dataset(positive.schema.with_cardinalities(cards), rows, np.zeros(len(rows), bool),
                    np.arange(len(rows)).astype(str).astype(object))
    for f in range(folds):
        test = fold == f
        if not test.any():
            continue
        train_pos = np.flatnonzero(~test & labels)
        train_neg = np.flatnonzero(~test & ~labels)
        if len(train_pos) == 0 or len(train_neg) == 0:
            raise ParameterError("a training fold lacks one of the classes; use fewer folds")
        # shared variable order so both densities factorise the same way
        cfg = SynthConfig(config.gamma, config.max_context,
                          config.variable_order or tuple(joint.schema.names[k] for k in _order_for(joint, config)))
        m_pos = fit_synthesiser(joint.take(train_pos), cfg)
        m_neg = fit_synthesiser(joint.take(train_neg), cfg)
        test_rows = rows[test]
        scores[test] = m_pos.log_density(test_rows) - m_neg.log_density(test_rows)
    return roc_auc(scores, labels)


def synth_quality_auc(real: Dataset, synthetic: Dataset, folds: int = 5,
                      config: SynthConfig | None = None, seed: int = 0) -> SynthQuality:
    """AUC of telling real from synthetic records; about 0.5 means faithful synthesis."""
    if folds < 2:
        raise ParameterError("need at least 2 folds")
    auc = density_ratio_auc(real, synthetic, folds, config, seed)
    return SynthQuality(auc, len(real), len(synthetic))
