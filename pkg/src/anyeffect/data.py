"""Samples, fold assignments, and permutation plans.

This module owns the randomization structure of an experiment: loading
outcome/treatment data with an explicit missingness mask, splitting into
training and hold-out parts, building cross-validation folds, and drawing
treatment-label permutations that respect clusters and strata.

Conventions
~~~~~~~~~~~
* Missing outcome cells are NaN in ``outcomes`` and True in ``missing``;
  the mask is authoritative, no sentinel numbers are used.
* Splits and folds are stratified on treatment (and user strata) by
  default, so both parts / all training sets contain both treatment
  values whenever that is feasible.
* All randomness is derived from integer seeds via counter-based hashing
  (see ``_rng``), so draw ``i`` of a permutation plan never depends on
  draws ``1..i-1`` and results are reproducible across worker layouts.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, InitVar

import numpy as np

from ._rng import derive_rng
from .errors import (
    DegenerateFoldError,
    DegenerateSampleError,
    DegenerateSplitError,
    FoldInfeasibleError,
    ParseError,
    SchemaError,
    SizeError,
)

_FOLD_RETRIES = 10

# spawn-key tags namespacing the derived RNG streams of this module
_TAG_SPLIT = 11
_TAG_FOLDS = 12
_TAG_PERM = 13


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Sample:
    """n observations of a binary treatment and k outcome columns.

    Attributes:
        outcomes: (n, k) float matrix; missing cells hold NaN.
        treatment: (n,) vector of 0/1.
        missing: (n, k) boolean mask, True where the cell is missing.
        column_names: k outcome column names, file order preserved.
        cluster_id: optional (n,) integer labels; every unit of a
            cluster carries the same treatment value.
        stratum_id: optional (n,) integer labels.

    ``strict=False`` (internal) skips the minimum-size and two-class
    checks so that split/fold machinery can build small parts; the
    structural checks always run.
    """

    outcomes: np.ndarray
    treatment: np.ndarray
    missing: np.ndarray
    column_names: tuple[str, ...]
    cluster_id: np.ndarray | None = None
    stratum_id: np.ndarray | None = None
    strict: InitVar[bool] = True

    def __post_init__(self, strict: bool):
        outcomes = np.asarray(self.outcomes, dtype=np.float64)
        if outcomes.ndim != 2:
            raise ValueError("outcomes must be a 2-d array")
        n, k = outcomes.shape
        treatment = np.asarray(self.treatment, dtype=np.int8).reshape(-1)
        if treatment.shape[0] != n:
            raise ValueError("treatment length does not match outcomes")
        if not np.isin(treatment, (0, 1)).all():
            raise ValueError("treatment values must be 0 or 1")
        missing = np.asarray(self.missing, dtype=bool)
        if missing.shape != (n, k):
            raise ValueError("missing mask shape does not match outcomes")
        outcomes = outcomes.copy()
        outcomes[missing] = np.nan
        names = tuple(str(c) for c in self.column_names)
        if len(names) != k:
            raise ValueError("column_names length does not match outcomes")
        object.__setattr__(self, "outcomes", _readonly(outcomes))
        object.__setattr__(self, "treatment", _readonly(treatment))
        object.__setattr__(self, "missing", _readonly(missing))
        object.__setattr__(self, "column_names", names)
        for label_field in ("cluster_id", "stratum_id"):
            lab = getattr(self, label_field)
            if lab is not None:
                lab = np.asarray(lab)
                if lab.shape != (n,):
                    raise ValueError(f"{label_field} length does not match outcomes")
                object.__setattr__(self, label_field, _readonly(lab))
        if self.cluster_id is not None:
            for c in np.unique(self.cluster_id):
                t = treatment[self.cluster_id == c]
                if t.min() != t.max():
                    raise ValueError(
                        f"cluster {c!r} mixes treatment values; clusters must be "
                        "treated or control as a whole"
                    )
        if strict:
            if n < 4:
                raise DegenerateSampleError(f"need at least 4 observations, got {n}")
            if k < 1:
                raise DegenerateSampleError("need at least one outcome column")
            if treatment.min() == treatment.max():
                raise DegenerateSampleError(
                    "treatment column is constant (all-treated or all-control)"
                )

    @property
    def n(self) -> int:
        return self.outcomes.shape[0]

    @property
    def k(self) -> int:
        return self.outcomes.shape[1]

    @property
    def has_missing(self) -> bool:
        return bool(self.missing.any())

    def subset(self, idx: np.ndarray) -> "Sample":
        """Row subset as a new Sample (size checks relaxed)."""
        idx = np.asarray(idx)
        return Sample(
            self.outcomes[idx],
            self.treatment[idx],
            self.missing[idx],
            self.column_names,
            None if self.cluster_id is None else self.cluster_id[idx],
            None if self.stratum_id is None else self.stratum_id[idx],
            strict=False,
        )

    def with_treatment(self, treatment: np.ndarray) -> "Sample":
        """Same data under different (e.g. permuted) treatment labels."""
        return Sample(
            self.outcomes,
            treatment,
            self.missing,
            self.column_names,
            self.cluster_id,
            self.stratum_id,
            strict=False,
        )


@dataclass(frozen=True)
class FoldAssignment:
    """Assignment of units to folds 1..K.

    Fold sizes differ by at most one unit (before cluster adjustment),
    clusters are never split, and with the stratified default every
    training set (union of K-1 folds) contains both treatment values.
    """

    fold_of_unit: np.ndarray
    K: int

    def __post_init__(self):
        fold = np.asarray(self.fold_of_unit, dtype=np.int64)
        if fold.ndim != 1:
            raise ValueError("fold_of_unit must be 1-d")
        if fold.min() < 1 or fold.max() > self.K:
            raise ValueError("fold indices must lie in 1..K")
        object.__setattr__(self, "fold_of_unit", _readonly(fold))

    def test_mask(self, j: int) -> np.ndarray:
        return self.fold_of_unit == j

    def train_mask(self, j: int) -> np.ndarray:
        return self.fold_of_unit != j


@dataclass(frozen=True)
class PermutationPlan:
    """How to draw treatment-label permutations.

    Attributes:
        scope: "holdout-only" or "full-sample" (descriptive; the draw
            permutes whatever sample it is handed).
        unit: "observation" or "cluster".
        within: optional (n,) group labels; labels are permuted only
            within groups (strata, or strata x folds for the CV design).
        count: number of draws B.
        seed: base seed; draw ``i`` depends only on (seed, i).
    """

    scope: str
    unit: str
    within: np.ndarray | None
    count: int
    seed: int

    def __post_init__(self):
        if self.scope not in ("holdout-only", "full-sample"):
            raise ValueError(f"unknown scope {self.scope!r}")
        if self.unit not in ("observation", "cluster"):
            raise ValueError(f"unknown unit {self.unit!r}")
        if self.count < 1:
            raise ValueError("count must be at least 1")
        if self.within is not None:
            object.__setattr__(self, "within", _readonly(np.asarray(self.within)))


@dataclass(frozen=True)
class ColumnSchema:
    """Column roles for CSV ingestion.

    ``outcomes=None`` means every column that is not assigned a role.
    """

    treatment: str
    outcomes: tuple[str, ...] | None = None
    cluster: str | None = None
    stratum: str | None = None


def load_sample(path, schema: ColumnSchema) -> Sample:
    """Read a CSV file into a Sample.

    Header row required; empty outcome field means missing; rows whose
    treatment cell is empty are dropped with a warning. Raises
    ParseError (with line number), SchemaError, or
    DegenerateSampleError.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        rows = [(lineno, row) for lineno, row in enumerate(reader, start=2)]

    header = [h.strip() for h in header]
    index = {name: i for i, name in enumerate(header)}
    for role, name in (
        ("treatment", schema.treatment),
        ("cluster", schema.cluster),
        ("stratum", schema.stratum),
    ):
        if name is not None and name not in index:
            raise SchemaError(f"{role} column {name!r} not found in header")
    role_cols = {schema.treatment, schema.cluster, schema.stratum} - {None}
    if schema.outcomes is None:
        outcome_names = [h for h in header if h not in role_cols]
    else:
        for name in schema.outcomes:
            if name not in index:
                raise SchemaError(f"outcome column {name!r} not found in header")
            if name in role_cols:
                raise SchemaError(f"column {name!r} has two roles")
        outcome_names = list(schema.outcomes)
    if not outcome_names:
        raise SchemaError("no outcome columns left after assigning roles")

    t_col = index[schema.treatment]
    out_cols = [index[c] for c in outcome_names]

    treatment, outcomes, missing, clusters, strata = [], [], [], [], []
    dropped = 0
    for lineno, row in rows:
        if len(row) != len(header):
            raise ParseError(
                f"expected {len(header)} fields, got {len(row)}", line=lineno
            )
        t_raw = row[t_col].strip()
        if t_raw == "":
            dropped += 1
            continue
        try:
            t_val = float(t_raw)
        except ValueError:
            raise SchemaError(
                f"line {lineno}: treatment value {t_raw!r} is not numeric"
            ) from None
        if t_val not in (0.0, 1.0):
            raise SchemaError(
                f"line {lineno}: treatment value {t_raw!r} is not 0 or 1"
            )
        y_row, m_row = [], []
        for c in out_cols:
            cell = row[c].strip()
            if cell == "":
                y_row.append(np.nan)
                m_row.append(True)
            else:
                try:
                    y_row.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"outcome value {cell!r} is not numeric", line=lineno
                    ) from None
                m_row.append(False)
        treatment.append(int(t_val))
        outcomes.append(y_row)
        missing.append(m_row)
        if schema.cluster is not None:
            clusters.append(row[index[schema.cluster]].strip())
        if schema.stratum is not None:
            strata.append(row[index[schema.stratum]].strip())

    if dropped:
        warnings.warn(f"dropped {dropped} row(s) with empty treatment cell")
    if not treatment:
        raise DegenerateSampleError("no usable rows in file")

    def _codes(labels):
        uniq = sorted(set(labels))
        lut = {u: i for i, u in enumerate(uniq)}
        return np.array([lut[x] for x in labels], dtype=np.int64)

    return Sample(
        np.asarray(outcomes, dtype=np.float64),
        np.asarray(treatment),
        np.asarray(missing, dtype=bool),
        tuple(outcome_names),
        _codes(clusters) if schema.cluster is not None else None,
        _codes(strata) if schema.stratum is not None else None,
    )


def write_sample(sample: Sample, path, schema: ColumnSchema | None = None) -> None:
    """Write a Sample to CSV so that load_sample round-trips bit-identically.

    Floats use shortest round-trip repr; missing cells are written empty.
    """
    t_name = schema.treatment if schema is not None else "T"
    c_name = schema.cluster if schema is not None else "cluster"
    s_name = schema.stratum if schema is not None else "stratum"
    header = [t_name]
    if sample.cluster_id is not None:
        header.append(c_name)
    if sample.stratum_id is not None:
        header.append(s_name)
    header.extend(sample.column_names)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(sample.n):
            row = [str(int(sample.treatment[i]))]
            if sample.cluster_id is not None:
                row.append(str(sample.cluster_id[i]))
            if sample.stratum_id is not None:
                row.append(str(sample.stratum_id[i]))
            for j in range(sample.k):
                row.append("" if sample.missing[i, j] else repr(float(sample.outcomes[i, j])))
            w.writerow(row)


# ---------------------------------------------------------------------------
# splitting and folds
# ---------------------------------------------------------------------------


def _strata_codes(sample: Sample) -> np.ndarray:
    if sample.stratum_id is None:
        return np.zeros(sample.n, dtype=np.int64)
    _, codes = np.unique(sample.stratum_id, return_inverse=True)
    return codes


def _apportion(total: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` over ``weights``."""
    quota = total * weights / weights.sum()
    base = np.floor(quota).astype(np.int64)
    short = total - base.sum()
    if short > 0:
        # ties broken by position for determinism
        order = np.lexsort((np.arange(len(weights)), -(quota - base)))
        base[order[:short]] += 1
    return base


def split_holdout_indices(sample: Sample, train_fraction: float, seed: int):
    """Index arrays (train_idx, holdout_idx) of the stratified split."""
    if not 0.0 < train_fraction < 1.0:
        raise SizeError(f"train_fraction must be in (0,1), got {train_fraction}")
    n = sample.n
    m = int(round(train_fraction * n))
    if m < 1 or m > n - 1:
        raise SizeError(
            f"train_fraction {train_fraction} leaves an empty part (n={n})"
        )
    rng = derive_rng(seed, _TAG_SPLIT)
    strata = _strata_codes(sample)
    t = sample.treatment

    train_mask = np.zeros(n, dtype=bool)
    if sample.cluster_id is None:
        # class-level targets first so both parts keep both classes
        n1 = int(t.sum())
        n0 = n - n1
        m1 = int(round(train_fraction * n1))
        m1 = min(max(m1, 1), n1 - 1) if n1 >= 2 else m1
        m0 = m - m1
        m0 = min(max(m0, 1), n0 - 1) if n0 >= 2 else m0
        if not (1 <= m1 <= n1 - 1 and 1 <= m0 <= n0 - 1):
            raise DegenerateSplitError(
                "cannot give both parts at least one treated and one control unit"
            )
        for t_val, m_class in ((1, m1), (0, m0)):
            cells = [np.flatnonzero((t == t_val) & (strata == s))
                     for s in np.unique(strata)]
            cells = [c for c in cells if len(c)]
            take = _apportion(m_class, np.array([len(c) for c in cells], dtype=float))
            for cell, cnt in zip(cells, take):
                chosen = rng.permutation(cell)[:cnt]
                train_mask[chosen] = True
    else:
        for t_val in (1, 0):
            cl = sample.cluster_id
            cell_ids = np.unique(cl[t == t_val])
            if len(cell_ids) < 2:
                raise DegenerateSplitError(
                    f"need at least two {'treated' if t_val else 'control'} "
                    "clusters to split"
                )
            sizes = {c: int((cl == c).sum()) for c in cell_ids}
            target = train_fraction * sum(sizes.values())
            order = rng.permutation(cell_ids)
            cum = np.cumsum([sizes[c] for c in order])
            # whole-cluster prefix closest to the target, both parts nonempty
            cut = int(np.argmin(np.abs(cum[:-1] - target))) + 1
            for c in order[:cut]:
                train_mask[cl == c] = True

    train_idx = np.flatnonzero(train_mask)
    hold_idx = np.flatnonzero(~train_mask)
    if len(train_idx) == 0 or len(hold_idx) == 0:
        raise SizeError("split produced an empty part")
    for idx, name in ((train_idx, "training"), (hold_idx, "hold-out")):
        t_part = sample.treatment[idx]
        if t_part.min() == t_part.max():
            raise DegenerateSplitError(f"{name} part is single-class")
    return train_idx, hold_idx


def split_holdout(sample: Sample, train_fraction: float, seed: int):
    """Split into (train, holdout), stratified on treatment and strata.

    Training size is round(train_fraction * n), adjusted to cluster
    boundaries when clusters are present; both parts get both treatment
    values or a DegenerateSplitError is raised.
    """
    train_idx, hold_idx = split_holdout_indices(sample, train_fraction, seed)
    return sample.subset(train_idx), sample.subset(hold_idx)


def _deal_units(cells: list[np.ndarray], K: int, rng: np.random.Generator,
                n: int) -> np.ndarray:
    """Deal shuffled cells round-robin; fold sizes differ by at most 1."""
    fold = np.zeros(n, dtype=np.int64)
    pos = 0
    for cell in cells:
        for u in rng.permutation(cell):
            fold[u] = pos % K + 1
            pos += 1
    return fold


def _deal_clusters(sample: Sample, cells: list[np.ndarray], K: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Greedy size-balanced dealing of whole clusters into folds."""
    fold = np.zeros(sample.n, dtype=np.int64)
    load = np.zeros(K, dtype=np.int64)
    cl = sample.cluster_id
    for cell in cells:
        for c in rng.permutation(cell):
            members = np.flatnonzero(cl == c)
            j = int(np.argmin(load))
            fold[members] = j + 1
            load[j] += len(members)
    return fold


def make_folds(sample: Sample, K: int, seed: int, stratified: bool = True) -> FoldAssignment:
    """Assign units to K folds of (near-)equal size.

    Stratifies on treatment by default (and always on user strata) so
    that every training set contains both treatment values; clusters
    are dealt whole. Retries up to 10 fresh draws before raising
    DegenerateFoldError.
    """
    n = sample.n
    if not 2 <= K <= n:
        raise FoldInfeasibleError(f"K must be in [2, n]={K, n}")
    strata = _strata_codes(sample)
    t = sample.treatment

    if sample.cluster_id is not None:
        n_clusters = len(np.unique(sample.cluster_id))
        if n_clusters < K:
            raise FoldInfeasibleError(
                f"{n_clusters} clusters cannot fill {K} folds"
            )

    for attempt in range(_FOLD_RETRIES):
        rng = derive_rng(seed, _TAG_FOLDS, attempt)
        if sample.cluster_id is None:
            if stratified:
                keys = strata * 2 + t
            else:
                keys = strata
            cells = [np.flatnonzero(keys == key) for key in np.unique(keys)]
            fold = _deal_units(cells, K, rng, n)
        else:
            cl = sample.cluster_id
            first = {c: np.flatnonzero(cl == c)[0] for c in np.unique(cl)}
            cluster_ids = np.array(sorted(first))
            c_strata = np.array([strata[first[c]] for c in cluster_ids])
            c_treat = np.array([t[first[c]] for c in cluster_ids])
            keys = c_strata * 2 + c_treat if stratified else c_strata
            cells = [cluster_ids[keys == key] for key in np.unique(keys)]
            fold = _deal_clusters(sample, cells, K, rng)
        assignment = FoldAssignment(fold, K)
        ok = all(
            t[assignment.train_mask(j)].min() != t[assignment.train_mask(j)].max()
            for j in range(1, K + 1)
        )
        if ok:
            return assignment
    raise DegenerateFoldError(
        f"could not build {K} folds with two-class training sets "
        f"after {_FOLD_RETRIES} attempts"
    )


# ---------------------------------------------------------------------------
# permutations
# ---------------------------------------------------------------------------


def draw_permutation(plan: PermutationPlan, index: int, sample: Sample) -> np.ndarray:
    """Draw permutation ``index`` (1-based) of the treatment labels.

    Labels are permuted over the plan's unit within each group of
    ``plan.within``; marginal counts of 1s are preserved exactly per
    group. Pure function of (plan.seed, index, sample).
    """
    if not 1 <= index <= plan.count:
        raise ValueError(f"draw index {index} outside 1..{plan.count}")
    n = sample.n
    groups = plan.within
    if groups is None:
        groups = np.zeros(n, dtype=np.int64)
    elif len(groups) != n:
        raise ValueError("plan.within length does not match the sample")
    rng = derive_rng(plan.seed, _TAG_PERM, index)
    t = sample.treatment
    out = np.array(t, dtype=np.int8)

    if plan.unit == "observation":
        if sample.cluster_id is not None:
            raise ValueError(
                "observation-unit permutation would split clusters; use unit='cluster'"
            )
        for g in np.unique(groups):
            idx = np.flatnonzero(groups == g)
            out[idx] = t[idx][rng.permutation(len(idx))]
    else:
        cl = sample.cluster_id
        if cl is None:
            raise ValueError("cluster-unit permutation needs cluster_id")
        first = {c: np.flatnonzero(cl == c)[0] for c in np.unique(cl)}
        for c, i0 in first.items():
            if not (groups[cl == c] == groups[i0]).all():
                raise ValueError(f"cluster {c!r} crosses a permutation group")
        cluster_ids = np.array(sorted(first))
        c_group = np.array([groups[first[c]] for c in cluster_ids])
        c_label = np.array([t[first[c]] for c in cluster_ids])
        new_label = c_label.copy()
        for g in np.unique(c_group):
            pos = np.flatnonzero(c_group == g)
            new_label[pos] = c_label[pos][rng.permutation(len(pos))]
        for c, lab in zip(cluster_ids, new_label):
            out[cl == c] = lab
    return out
