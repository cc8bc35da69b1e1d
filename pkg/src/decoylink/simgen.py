"""Ground-truth simulation of two overlapping files over categorical linkage variables.

Entities are drawn i.i.d. from a product of per-variable marginals. A share of
them is placed in both files (the true links), the rest in exactly one file.
Linked copies may receive registration errors, any record may lose values, and
records may be duplicated within a file.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .core import MISSING, Dataset, Schema, Variable
from .errors import SpecError

log = logging.getLogger(__name__)

SHAPES = ("uniform", "normal", "geometric", "zipf", "triangular")
DEFAULT_CARDINALITIES = (10, 8, 12, 6, 15)
MECHANISMS = ("at_random", "depends_on_variables")


def shape_probs(shape: str, k: int) -> np.ndarray:
    """Category distribution of a named shape family over ``k`` categories."""
    c = np.arange(k, dtype=np.float64)
    if k == 1:
        return np.ones(1)
    if shape == "uniform":
        w = np.ones(k)
    elif shape == "normal":
        w = np.exp(-0.5 * ((c - (k - 1) / 2) / (k / 4)) ** 2)
    elif shape == "geometric":
        w = 0.1 ** (c / (k - 1))
    elif shape == "zipf":
        w = 1.0 / (c + 1)
    elif shape == "triangular":
        w = 1.0 + np.minimum(c, k - 1 - c)
    else:
        raise SpecError(f"unknown marginal shape {shape!r}; choose from {SHAPES}")
    return w / w.sum()


@dataclass
class SimulationSpec:
    n_a: int = 2000
    n_b: int = 5000
    n_vars: int = 5
    cardinalities: tuple | None = None
    marginals: tuple | None = None
    overlap: float = 0.75
    discr_target: float | None = 0.95
    link_mechanism: str = "at_random"
    tilt_power: float = 1.0
    error_rate: float = 0.0
    missing_rate: float = 0.0
    duplicate_rate: float = 0.0
    max_combinations: int = 10 ** 6
    seed: int = 0

    def __post_init__(self):
        if self.cardinalities is None:
            self.cardinalities = tuple(DEFAULT_CARDINALITIES[k % len(DEFAULT_CARDINALITIES)]
                                       for k in range(self.n_vars))
        if self.marginals is None:
            self.marginals = tuple(SHAPES[k % len(SHAPES)] for k in range(self.n_vars))
        self.cardinalities = tuple(int(c) for c in self.cardinalities)
        self.marginals = tuple(m if isinstance(m, str) else tuple(float(x) for x in m)
                               for m in self.marginals)
        self.validate()

    def validate(self) -> None:
        if self.n_a < 0 or self.n_b < 0:
            raise SpecError("n_a and n_b must be non-negative")
        if self.n_vars < 1:
            raise SpecError("n_vars must be >= 1")
        if len(self.cardinalities) != self.n_vars or len(self.marginals) != self.n_vars:
            raise SpecError("cardinalities and marginals need one entry per variable")
        if any(c < 1 for c in self.cardinalities):
            raise SpecError("cardinalities must be >= 1")
        for k, m in enumerate(self.marginals):
            if isinstance(m, str):
                if m not in SHAPES:
                    raise SpecError(f"unknown marginal shape {m!r}; choose from {SHAPES}")
            elif len(m) != self.cardinalities[k] or abs(sum(m) - 1) > 1e-9 or min(m) < 0:
                raise SpecError(f"marginal {k} must be a distribution over {self.cardinalities[k]} categories")
        if not 0 <= self.overlap <= 1:
            raise SpecError(f"overlap must lie in [0, 1], got {self.overlap}")
        if self.discr_target is not None and not 0 < self.discr_target <= 1:
            raise SpecError(f"discr_target must lie in (0, 1], got {self.discr_target}")
        for name in ("error_rate", "missing_rate", "duplicate_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise SpecError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.duplicate_rate > 0.5:
            raise SpecError("duplicate_rate must lie in [0, 0.5]")
        if self.link_mechanism not in MECHANISMS:
            raise SpecError(f"link_mechanism must be one of {MECHANISMS}")
        if self.tilt_power < 0:
            raise SpecError("tilt_power must be non-negative")

    @property
    def n_links(self) -> int:
        return int(round(self.overlap * min(self.n_a, self.n_b)))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Entity ids per row and duplicate provenance (``-1`` marks an original row)."""

    entity_a: np.ndarray
    entity_b: np.ndarray
    dup_of_a: np.ndarray
    dup_of_b: np.ndarray
    marginals: tuple = field(default=(), repr=False)

    @property
    def links(self) -> np.ndarray:
        """True link set on original rows as an array of ``(i, j)`` pairs."""
        ia = np.flatnonzero(self.dup_of_a < 0)
        jb = np.flatnonzero(self.dup_of_b < 0)
        ea, eb = self.entity_a[ia], self.entity_b[jb]
        common, pa, pb = np.intersect1d(ea, eb, assume_unique=True, return_indices=True)
        pairs = np.column_stack([ia[pa], jb[pb]])
        return pairs[np.argsort(pairs[:, 0], kind="stable")]

    @property
    def linking_b(self) -> np.ndarray:
        """Mask of B rows whose entity also appears in A."""
        return np.isin(self.entity_b, self.entity_a)

    @property
    def linking_a(self) -> np.ndarray:
        return np.isin(self.entity_a, self.entity_b)

    def is_link(self, i, j) -> np.ndarray:
        return self.entity_a[np.asarray(i)] == self.entity_b[np.asarray(j)]


def _unique_share(rows: np.ndarray) -> float:
    if len(rows) == 0:
        return 0.0
    _, inv, counts = np.unique(rows, axis=0, return_inverse=True, return_counts=True)
    return float((counts[inv.reshape(-1)] == 1).mean())


def _scaled(cardinalities, marginals, mult: float):
    cards, probs = [], []
    for k, m in zip(cardinalities, marginals):
        if isinstance(m, str) and k > 1:
            kk = max(2, int(round(k * mult)))
            cards.append(kk)
            probs.append(shape_probs(m, kk))
        else:
            cards.append(k)
            probs.append(shape_probs(m, k) if isinstance(m, str) else np.asarray(m, float))
    return cards, probs


def _draw(rng, probs, n) -> np.ndarray:
    out = np.empty((n, len(probs)), dtype=np.int32)
    for k, p in enumerate(probs):
        out[:, k] = rng.choice(len(p), size=n, p=p)
    return out


def calibrate_discrimination(cardinalities, marginals, n: int, discr_target: float,
                             seed: int = 0, tol: float = 0.02, draws: int = 5,
                             max_combinations: int = 10 ** 6):
    """Rescale category counts until the unique-record share of an ``n``-sample hits the target.

    Named shapes are stretched by a common multiplier found by geometric
    search; single-category variables and explicit distributions stay fixed.
    Returns ``(cardinalities, probabilities)``.
    """
    if not 0 < discr_target <= 1:
        raise SpecError("discr_target must lie in (0, 1]")

    def share(mult):
        cards, probs = _scaled(cardinalities, marginals, mult)
        rng = np.random.default_rng(seed)
        return float(np.mean([_unique_share(_draw(rng, probs, n)) for _ in range(draws)])), cards, probs

    def combos(mult):
        return float(np.prod(np.asarray(_scaled(cardinalities, marginals, mult)[0], dtype=np.float64)))

    val, cards, probs = share(1.0)
    if abs(val - discr_target) <= tol:
        return cards, probs
    if not any(isinstance(m, str) and k > 1 for k, m in zip(cardinalities, marginals)):
        raise SpecError(f"discrimination {discr_target} unreachable: no variable can be rescaled "
                        f"(unique share {val:.3f})")
    lo = hi = 1.0
    if val < discr_target:
        # largest multiplier that respects the combination budget
        cap = 1.0
        while combos(cap * 2) <= max_combinations and cap < 2 ** 20:
            cap *= 2
        top, bottom = cap * 2, cap
        for _ in range(40):
            mid = (top + bottom) / 2
            if combos(mid) <= max_combinations:
                bottom = mid
            else:
                top = mid
        cap = bottom
        while val < discr_target:
            lo, hi = hi, min(hi * 2, cap)
            val, cards, probs = share(hi)
            if abs(val - discr_target) <= tol:
                return cards, probs
            if hi >= cap and val < discr_target:
                raise SpecError(f"discrimination {discr_target} unreachable with at most "
                                f"{max_combinations} combinations (best {val:.3f})")
    else:
        while val > discr_target:
            if all(c <= 2 for c, m in zip(cards, marginals) if isinstance(m, str)):
                raise SpecError(f"discrimination {discr_target} unreachable: two categories "
                                f"per variable already give {val:.3f}")
            hi, lo = lo, lo / 2
            val, cards, probs = share(lo)
            if abs(val - discr_target) <= tol:
                return cards, probs
    best = (val, cards, probs)
    for _ in range(60):
        mid = float(np.sqrt(lo * hi))
        val, cards, probs = share(mid)
        if abs(val - discr_target) < abs(best[0] - discr_target):
            best = (val, cards, probs)
        if abs(val - discr_target) <= tol:
            return cards, probs
        if val < discr_target:
            lo = mid
        else:
            hi = mid
        if hi / lo < 1 + 1e-9:
            break
    raise SpecError(f"could not calibrate discrimination to {discr_target} +/- {tol} (best {best[0]:.3f})")


def resolve_marginals(spec: SimulationSpec) -> list[np.ndarray]:
    """Per-variable category distributions after discrimination calibration."""
    if spec.discr_target is None:
        return _scaled(spec.cardinalities, spec.marginals, 1.0)[1]
    _, probs = calibrate_discrimination(spec.cardinalities, spec.marginals, spec.n_b,
                                        spec.discr_target, seed=spec.seed,
                                        max_combinations=spec.max_combinations)
    return probs


def _schema_for(probs) -> Schema:
    return Schema(tuple(Variable(f"var{k + 1}", len(p)) for k, p in enumerate(probs)))


def _to_dataset(schema: Schema, rows: np.ndarray) -> Dataset:
    return Dataset(schema, rows, np.zeros(len(rows), bool),
                   np.arange(len(rows)).astype(str).astype(object))


def sample_population(marginals, n: int, seed: int, missing_rate: float = 0.0,
                      id_prefix: str = "pop-") -> Dataset:
    """Fresh records from the generating distribution, flagged synthetic.

    These are the ideal decoys: non-links drawn from the true population.
    """
    rng = np.random.default_rng(seed)
    rows = _draw(rng, marginals, n)
    if missing_rate > 0:
        rows[rng.random(rows.shape) < missing_rate] = MISSING
    ids = np.asarray([f"{id_prefix}{k}" for k in range(n)], dtype=object)
    return Dataset(_schema_for(marginals), rows, np.ones(n, bool), ids)


def _make_distinct(rng, probs, values, attempts=100):
    # discr_target = 1 promises every record is unique, so redraw collisions
    for _ in range(attempts):
        _, first = np.unique(values, axis=0, return_index=True)
        keep = np.zeros(len(values), bool)
        keep[first] = True
        clash = np.flatnonzero(~keep)
        if len(clash) == 0:
            return values
        values[clash] = _draw(rng, probs, len(clash))
    raise SpecError("could not draw distinct records for discr_target = 1; raise the cardinalities")


def generate_population(spec: SimulationSpec, marginals=None):
    """Simulate files A and B with known link structure; returns ``(A, B, truth)``."""
    spec.validate()
    probs = list(marginals) if marginals is not None else resolve_marginals(spec)
    rng = np.random.default_rng(spec.seed)
    n_links = spec.n_links
    if n_links > min(spec.n_a, spec.n_b):
        raise SpecError("overlap asks for more links than records in the smaller file")
    n_entities = spec.n_a + spec.n_b - n_links
    values = _draw(rng, probs, n_entities)
    if spec.discr_target is not None and spec.discr_target >= 1:
        values = _make_distinct(rng, probs, values)

    if spec.link_mechanism == "at_random":
        linking = rng.choice(n_entities, size=n_links, replace=False)
    else:
        w = (1.0 + values[:, 0]) ** spec.tilt_power
        linking = rng.choice(n_entities, size=n_links, replace=False, p=w / w.sum())
    rest = np.setdiff1d(np.arange(n_entities), linking)
    rest = rng.permutation(rest)
    ent_a = rng.permutation(np.concatenate([linking, rest[:spec.n_a - n_links]]))
    ent_b = rng.permutation(np.concatenate([linking, rest[spec.n_a - n_links:]]))

    schema = _schema_for(probs)
    files = []
    for ent in (ent_a, ent_b):
        rows = values[ent].copy()
        if spec.error_rate > 0:
            is_link = np.isin(ent, linking)
            hit = (rng.random(rows.shape) < spec.error_rate) & is_link[:, None]
            for k, p in enumerate(probs):
                idx = np.flatnonzero(hit[:, k])
                rows[idx, k] = rng.choice(len(p), size=len(idx), p=p)
        if spec.missing_rate > 0:
            rows[rng.random(rows.shape) < spec.missing_rate] = MISSING
        files.append(_to_dataset(schema, rows))
    truth = GroundTruth(ent_a, ent_b, np.full(spec.n_a, -1), np.full(spec.n_b, -1), tuple(probs))
    a, b = files
    if spec.duplicate_rate > 0:
        a, b, truth = inject_duplicates(a, b, truth, spec.duplicate_rate, seed=spec.seed + 1)
    return a, b, truth


def _duplicate_file(ds: Dataset, entity, dup_of, linking_mask, rate, rng, label):
    n = len(ds)
    want = int(round(rate / 2 * n))
    picks = []
    for mask, kind in ((linking_mask, "linking"), (~linking_mask, "non-linking")):
        pool = np.flatnonzero(mask & (dup_of < 0))
        k = want
        if k > len(pool):
            warnings.warn(f"file {label}: only {len(pool)} {kind} records available to duplicate, "
                          f"{want} requested", RuntimeWarning, stacklevel=3)
            k = len(pool)
        picks.append(np.sort(rng.choice(pool, size=k, replace=False)))
    src = np.concatenate(picks)
    rows = np.vstack([ds.rows, ds.rows[src]])
    ids = np.concatenate([ds.source_id, np.arange(n, n + len(src)).astype(str).astype(object)])
    out = Dataset(ds.schema, rows, np.zeros(len(rows), bool), ids, ds.codebook)
    return out, np.concatenate([entity, entity[src]]), np.concatenate([dup_of, src])


def inject_duplicates(a: Dataset, b: Dataset, truth: GroundTruth, duplicate_rate: float, seed: int = 0):
    """Append copies of linking and non-linking records to each file, half and half."""
    if not 0 <= duplicate_rate <= 0.5:
        raise SpecError("duplicate_rate must lie in [0, 0.5]")
    if duplicate_rate == 0:
        return a, b, truth
    rng = np.random.default_rng(seed)
    a2, ea, da = _duplicate_file(a, truth.entity_a, truth.dup_of_a, truth.linking_a, duplicate_rate, rng, "A")
    b2, eb, db = _duplicate_file(b, truth.entity_b, truth.dup_of_b, truth.linking_b, duplicate_rate, rng, "B")
    return a2, b2, replace(truth, entity_a=ea, entity_b=eb, dup_of_a=da, dup_of_b=db)


def write_truth(truth: GroundTruth, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["file", "row_index", "entity_id", "is_duplicate_of"])
        for label, ent, dup in (("A", truth.entity_a, truth.dup_of_a), ("B", truth.entity_b, truth.dup_of_b)):
            for r, (e, d) in enumerate(zip(ent.tolist(), dup.tolist())):
                w.writerow([label, r, e, "" if d < 0 else d])


def read_truth(path) -> GroundTruth:
    from .errors import InputError
    cols = {"A": ([], []), "B": ([], [])}
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                ent, dup = cols[rec["file"]]
                if int(rec["row_index"]) != len(ent):
                    raise InputError(f"{path}: rows of file {rec['file']} must be listed in order")
                ent.append(int(rec["entity_id"]))
                dup.append(int(rec["is_duplicate_of"]) if rec["is_duplicate_of"] else -1)
    except (OSError, KeyError, ValueError) as exc:
        raise InputError(f"cannot read truth file {path}: {exc}") from exc
    return GroundTruth(np.asarray(cols["A"][0]), np.asarray(cols["B"][0]),
                       np.asarray(cols["A"][1]), np.asarray(cols["B"][1]))
