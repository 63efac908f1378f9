"""Prediction algorithms mapping outcome vectors to treatment scores.

Five algorithm families: the trivial constant (training treatment
share), linear least squares, a CART regression tree, a tuned random
forest, and a convex ensemble with simplex weights chosen on
out-of-fold predictions. Fitted predictors are immutable; repeated fits
with identical (data, params, seed) are bit-identical.

Missing outcome cells are handled at the feature layer: the default
policy imputes training column means and appends a binary missingness
indicator for every column that had missing training cells; an
"indicator_only" policy keeps the indicators alone so that the outcomes
can be compared against missingness information by itself.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from . import _tree
from ._rng import derive_seed, kernel_seed
from .data import FoldAssignment, Sample, make_folds
from .errors import AnyEffectError, ShapeError

IMPUTE_INDICATOR = "impute_indicator"
INDICATOR_ONLY = "indicator_only"

# spawn-key tags for derived seeds within this module
_TAG_TREE = 21
_TAG_TUNE_FOLDS = 22
_TAG_ENS_FOLDS = 25
_TAG_ENS_MEMBER = 26
_TAG_ENS_FINAL = 27


# ---------------------------------------------------------------------------
# feature construction (missing-data policy)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureRecipe:
    """Frozen training-time decisions for turning outcomes into features."""

    policy: str
    k: int
    col_means: np.ndarray
    indicator_cols: tuple[int, ...]

    @property
    def n_features(self) -> int:
        if self.policy == INDICATOR_ONLY:
            return self.k
        return self.k + len(self.indicator_cols)

    def build(self, outcomes: np.ndarray, missing: np.ndarray | None = None) -> np.ndarray:
        outcomes = np.asarray(outcomes, dtype=np.float64)
        if outcomes.ndim == 1:
            outcomes = outcomes.reshape(1, -1)
        if outcomes.shape[1] != self.k:
            raise ShapeError(
                f"predictor was fit on k={self.k} outcome columns, got {outcomes.shape[1]}"
            )
        if missing is None:
            missing = np.isnan(outcomes)
        missing = np.asarray(missing, dtype=bool)
        if missing.shape != outcomes.shape:
            raise ShapeError("missing mask shape does not match outcomes")
        if self.policy == INDICATOR_ONLY:
            return np.ascontiguousarray(missing, dtype=np.float64)
        X = outcomes.copy()
        if missing.any():
            rows, cols = np.nonzero(missing)
            X[rows, cols] = self.col_means[cols]
        if self.indicator_cols:
            X = np.hstack([X, missing[:, list(self.indicator_cols)].astype(np.float64)])
        return np.ascontiguousarray(X)


def make_recipe(train: Sample, policy: str = IMPUTE_INDICATOR) -> FeatureRecipe:
    if policy not in (IMPUTE_INDICATOR, INDICATOR_ONLY):
        raise ValueError(f"unknown missing-data policy {policy!r}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN columns
        means = np.nanmean(np.where(train.missing, np.nan, train.outcomes), axis=0)
    means = np.where(np.isfinite(means), means, 0.0)
    indicator_cols = tuple(np.flatnonzero(train.missing.any(axis=0)).tolist())
    return FeatureRecipe(policy, train.k, means, indicator_cols)


def _features(train: Sample, policy: str):
    recipe = make_recipe(train, policy)
    X = recipe.build(train.outcomes, train.missing)
    return recipe, X, train.treatment.astype(np.float64)


# ---------------------------------------------------------------------------
# fitted predictors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConstantPredictor:
    kind = "constant"
    p_hat: float
    recipe: FeatureRecipe


@dataclass(frozen=True)
class OlsPredictor:
    kind = "ols"
    coef: np.ndarray  # intercept first
    rank_deficient: bool
    recipe: FeatureRecipe


@dataclass(frozen=True)
class TreeStructure:
    """Flat node arrays of one fitted tree (or one forest member)."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray
    ysum: np.ndarray
    ysq: np.ndarray
    n_nodes: np.ndarray  # per tree


@dataclass(frozen=True)
class TreePredictor:
    kind = "tree"
    nodes: TreeStructure
    min_node: int
    mtry: int
    seed: int
    recipe: FeatureRecipe


@dataclass(frozen=True)
class ForestPredictor:
    kind = "forest"
    nodes: TreeStructure
    n_trees: int
    mtry: int
    min_node: int
    bootstrap: bool
    seed: int
    recipe: FeatureRecipe
    cv_table: tuple = ()  # ((mtry, min_node, cv_loss), ...) from tuning


@dataclass(frozen=True)
class EnsemblePredictor:
    kind = "ensemble"
    members: tuple
    weights: np.ndarray
    member_names: tuple[str, ...]
    criterion: float  # loss of the fitted weights on out-of-fold predictions
    vertex_criteria: np.ndarray  # same criterion at each single-member vertex


def predict(predictor, outcomes, missing: np.ndarray | None = None) -> np.ndarray:
    """Deterministic predictions for an (n, k) outcome matrix.

    ``outcomes`` may also be a Sample. Missing cells are imputed with
    the stored training column means; indicator columns chosen at fit
    time are appended identically.
    """
    if isinstance(outcomes, Sample):
        missing = outcomes.missing
        outcomes = outcomes.outcomes
    outcomes = np.asarray(outcomes, dtype=np.float64)
    if outcomes.ndim == 1:
        outcomes = outcomes.reshape(1, -1)

    if isinstance(predictor, EnsemblePredictor):
        n = outcomes.shape[0]
        out = np.zeros(n)
        for w, member in zip(predictor.weights, predictor.members):
            out += w * predict(member, outcomes, missing)
        return out

    X = predictor.recipe.build(outcomes, missing)
    if isinstance(predictor, ConstantPredictor):
        return np.full(X.shape[0], predictor.p_hat)
    if isinstance(predictor, OlsPredictor):
        return predictor.coef[0] + X @ predictor.coef[1:]
    if isinstance(predictor, (TreePredictor, ForestPredictor)):
        nodes = predictor.nodes
        out = np.empty(X.shape[0])
        _tree.predict_forest(
            nodes.feature, nodes.threshold, nodes.left, nodes.right,
            nodes.value, nodes.feature.shape[0], X, out,
        )
        return out
    raise TypeError(f"not a predictor: {predictor!r}")


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def fit_constant(train: Sample) -> ConstantPredictor:
    """Best constant under squared error: the training treatment share."""
    return ConstantPredictor(float(train.treatment.mean()), make_recipe(train))


def fit_ols(train: Sample, missing_policy: str = IMPUTE_INDICATOR) -> OlsPredictor:
    """Least squares of T on (1, features); minimum-norm if rank-deficient."""
    recipe, X, t = _features(train, missing_policy)
    X1 = np.hstack([np.ones((X.shape[0], 1)), X])
    coef, _, rank, _ = np.linalg.lstsq(X1, t, rcond=None)
    return OlsPredictor(coef, rank < X1.shape[1], recipe)


def _order_matrix(X: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T.astype(np.int32))


def _node_arrays(n_trees: int, n: int):
    shape = (n_trees, 2 * n + 1)
    return (
        np.empty(shape, np.int32), np.empty(shape, np.float64),
        np.empty(shape, np.int32), np.empty(shape, np.int32),
        np.empty(shape, np.float64), np.empty(shape, np.int64),
        np.empty(shape, np.float64), np.empty(shape, np.float64),
    )


def _trim(arrs, n_nodes) -> TreeStructure:
    used = int(n_nodes.max())
    return TreeStructure(*(a[:, :used].copy() for a in arrs), n_nodes)


def _fit_trees_raw(X, y, n_trees, min_node, mtry, bootstrap, seed) -> TreeStructure:
    arrs = _node_arrays(n_trees, X.shape[0])
    n_nodes = _tree.fit_forest(
        X, y, _order_matrix(X), n_trees, min_node, mtry, bootstrap, seed, *arrs,
    )
    return _trim(arrs, n_nodes)


def fit_tree(train: Sample, min_node: int, mtry: int, seed: int,
             missing_policy: str = IMPUTE_INDICATOR) -> TreePredictor:
    """One CART regression tree of T on the outcome features.

    Splits maximize in-sample squared-error reduction among ``mtry``
    randomly chosen coordinates; thresholds at midpoints; recursion
    stops when a child would drop below ``min_node`` units or no split
    reduces the loss.
    """
    if min_node < 1:
        raise ValueError("min_node must be at least 1")
    recipe, X, t = _features(train, missing_policy)
    if not 1 <= mtry <= X.shape[1]:
        raise ValueError(f"mtry must be in [1, {X.shape[1]}]")
    nodes = _fit_trees_raw(X, t, 1, min_node, mtry, False,
                           kernel_seed(seed, _TAG_TREE))
    return TreePredictor(nodes, min_node, mtry, seed, recipe)


@dataclass(frozen=True)
class ForestParams:
    """Random-forest configuration.

    ``mtry_grid=None`` resolves to all of 1..n_features at fit time.
    ``tune_trees`` is the forest size used while scoring grid points in
    the inner cross-validation; the final forest always uses
    ``n_trees``.
    """

    n_trees: int = 100
    mtry_grid: tuple[int, ...] | None = None
    min_node_grid: tuple[int, ...] = (1, 5, 10, 25)
    inner_folds: int = 5
    bootstrap: bool = True
    seed: int = 0
    tune_trees: int = 25

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be at least 1")
        if self.mtry_grid is not None and len(self.mtry_grid) == 0:
            raise ValueError("mtry_grid must be nonempty")
        if len(self.min_node_grid) == 0:
            raise ValueError("min_node_grid must be nonempty")
        if self.inner_folds < 2:
            raise ValueError("inner_folds must be at least 2")


def _resolve_grid(params: ForestParams, n_features: int):
    mtry_grid = params.mtry_grid or tuple(range(1, n_features + 1))
    for v in mtry_grid:
        if not 1 <= v <= n_features:
            raise ValueError(f"mtry {v} outside [1, {n_features}]")
    return [(mt, mn) for mt in mtry_grid for mn in params.min_node_grid]


def _tuned_forest(train: Sample, params: ForestParams, missing_policy: str,
                  folds: FoldAssignment | None = None, want_oof: bool = False,
                  oof_trees: int | None = None):
    """Shared driver behind fit_forest and the ensemble's fit_oof hook."""
    recipe, X, t = _features(train, missing_policy)
    grid = _resolve_grid(params, X.shape[1])
    need_folds = len(grid) > 1 or want_oof
    if need_folds and folds is None:
        folds = make_folds(train, params.inner_folds,
                           derive_seed(params.seed, _TAG_TUNE_FOLDS))
    fold_of_unit = (folds.fold_of_unit if need_folds
                    else np.ones(train.n, dtype=np.int64))
    K = folds.K if need_folds else 1
    mtry_arr = np.array([g[0] for g in grid], dtype=np.int64)
    mn_arr = np.array([g[1] for g in grid], dtype=np.int64)
    arrs = _node_arrays(params.n_trees, train.n)
    oof = np.empty(train.n)
    n_nodes, best, cv_loss = _tree.tune_fit_forest(
        X, t, _order_matrix(X), np.asarray(fold_of_unit, dtype=np.int64), K,
        mtry_arr, mn_arr, params.tune_trees, params.n_trees,
        0 if oof_trees == 0 else (oof_trees or params.n_trees),
        params.bootstrap, kernel_seed(params.seed, _TAG_TREE),
        *arrs, oof, want_oof,
    )
    table = (tuple((int(mt), int(mn), float(c))
                   for (mt, mn), c in zip(grid, cv_loss))
             if len(grid) > 1 else ())
    predictor = ForestPredictor(
        _trim(arrs, n_nodes), params.n_trees, int(mtry_arr[best]),
        int(mn_arr[best]), params.bootstrap, params.seed, recipe, table,
    )
    return (predictor, oof) if want_oof else predictor


def fit_forest(train: Sample, params: ForestParams,
               missing_policy: str = IMPUTE_INDICATOR) -> ForestPredictor:
    """Random forest with (mtry, min_node) chosen by inner K-fold CV.

    Ties break toward smaller mtry then larger min_node; the final
    forest averages ``n_trees`` trees fit on bootstrap resamples with
    the selected parameters.
    """
    return _tuned_forest(train, params, missing_policy)


# ---------------------------------------------------------------------------
# algorithms (named fit procedures usable by the testing engine)
# ---------------------------------------------------------------------------


class Algorithm:
    """A named prediction procedure: ``fit(sample, seed) -> predictor``.

    ``fit_oof`` (optional) returns cross-fitted out-of-fold predictions
    for given folds together with the final refit predictor; the
    ensemble uses it to share one inner CV between hyperparameter
    tuning and weight selection.
    """

    name: str = "algorithm"

    def fit(self, train: Sample, seed: int):
        raise NotImplementedError

    def describe(self) -> str:
        return self.name


@dataclass(frozen=True)
class ConstantAlgorithm(Algorithm):
    name = "constant"

    def fit(self, train: Sample, seed: int):
        return fit_constant(train)


@dataclass(frozen=True)
class OlsAlgorithm(Algorithm):
    name = "ols"
    missing_policy: str = IMPUTE_INDICATOR

    def fit(self, train: Sample, seed: int):
        return fit_ols(train, self.missing_policy)


@dataclass(frozen=True)
class MissingnessAlgorithm(Algorithm):
    """OLS on the missingness indicators alone (baseline for missing data)."""

    name = "missingness_ols"

    def fit(self, train: Sample, seed: int):
        return fit_ols(train, INDICATOR_ONLY)


@dataclass(frozen=True)
class TreeAlgorithm(Algorithm):
    name = "tree"
    min_node: int = 5
    mtry: int | None = None  # None -> all features
    missing_policy: str = IMPUTE_INDICATOR

    def fit(self, train: Sample, seed: int):
        recipe = make_recipe(train, self.missing_policy)
        mtry = self.mtry if self.mtry is not None else recipe.n_features
        return fit_tree(train, self.min_node, mtry, seed, self.missing_policy)


@dataclass(frozen=True)
class ForestAlgorithm(Algorithm):
    name = "forest"
    n_trees: int = 100
    mtry_grid: tuple[int, ...] | None = None
    min_node_grid: tuple[int, ...] = (1, 5, 10, 25)
    inner_folds: int = 5
    bootstrap: bool = True
    tune_trees: int = 25
    oof_trees: int | None = None  # 0 reuses tuning predictions
    missing_policy: str = IMPUTE_INDICATOR

    def _params(self, seed: int) -> ForestParams:
        return ForestParams(self.n_trees, self.mtry_grid, self.min_node_grid,
                            self.inner_folds, self.bootstrap, seed, self.tune_trees)

    def fit(self, train: Sample, seed: int):
        return fit_forest(train, self._params(seed), self.missing_policy)

    def fit_oof(self, train: Sample, folds: FoldAssignment, seed: int):
        """Out-of-fold predictions sharing ``folds`` with the tuning CV."""
        predictor, oof = _tuned_forest(
            train, self._params(seed), self.missing_policy, folds,
            want_oof=True, oof_trees=self.oof_trees,
        )
        return oof, predictor

    def describe(self) -> str:
        return f"forest({self.n_trees} trees)"


def _project_simplex(v: np.ndarray) -> np.ndarray:
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    rho = np.nonzero(u - css / (np.arange(len(v)) + 1) > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def _ensemble_weights(P: np.ndarray, t: np.ndarray):
    """Simplex weights minimizing mean squared error of P @ w against t."""
    n, J = P.shape

    def crit(w):
        return float(np.mean((P @ w - t) ** 2))

    vertex = np.array([crit(np.eye(J)[j]) for j in range(J)])
    if J == 2:
        ws = np.linspace(0.0, 1.0, 101)
        crits = np.array([crit(np.array([w, 1.0 - w])) for w in ws])
        best = crits.min()
        tied = np.flatnonzero(crits <= best + 1e-15)
        w0 = ws[tied[np.argmin(np.abs(ws[tied] - 0.5))]]
        w = np.array([w0, 1.0 - w0])
        return w, crit(w), vertex
    # projected gradient on the simplex
    G = P.T @ P / n
    b = P.T @ t / n
    lip = 2.0 * float(np.linalg.eigvalsh(G)[-1]) + 1e-12
    w = np.full(J, 1.0 / J)
    for _ in range(1000):
        w_new = _project_simplex(w - (2.0 * (G @ w - b)) / lip)
        if np.max(np.abs(w_new - w)) < 1e-10:
            w = w_new
            break
        w = w_new
    if vertex.min() < crit(w):  # guard: never worse than a vertex
        w = np.eye(J)[int(np.argmin(vertex))]
    return w, crit(w), vertex


def fit_ensemble(train: Sample, member_algos, outer_folds: int,
                 seed: int) -> EnsemblePredictor:
    """Convex combination of members with weights chosen on out-of-fold
    predictions.

    Cross-fitted predictions are computed for each member on ``train``,
    simplex weights minimize the squared-error loss of their convex
    combination, and each member is refit on all of ``train``. A member
    that fails to fit is dropped as long as two members remain.
    """
    member_algos = list(member_algos)
    if len(member_algos) < 2:
        raise ValueError("ensemble needs at least two members")
    if outer_folds < 2:
        raise ValueError("outer_folds must be at least 2")
    folds = make_folds(train, outer_folds, derive_seed(seed, _TAG_ENS_FOLDS))

    oof_cols, finals, names = [], [], []
    errors = []
    for mi, algo in enumerate(member_algos):
        m_seed = derive_seed(seed, _TAG_ENS_MEMBER, mi)
        try:
            if hasattr(algo, "fit_oof"):
                oof, final = algo.fit_oof(train, folds, m_seed)
            else:
                oof = np.empty(train.n)
                for j in range(1, folds.K + 1):
                    tr = np.flatnonzero(folds.train_mask(j))
                    te = np.flatnonzero(folds.test_mask(j))
                    fitted = algo.fit(train.subset(tr), derive_seed(m_seed, j))
                    oof[te] = predict(fitted, train.outcomes[te], train.missing[te])
                final = algo.fit(train, derive_seed(m_seed, _TAG_ENS_FINAL))
        except (AnyEffectError, np.linalg.LinAlgError) as exc:
            errors.append((algo.describe(), exc))
            continue
        oof_cols.append(oof)
        finals.append(final)
        names.append(algo.describe())
    if len(finals) < 2:
        raise AnyEffectError(
            f"ensemble needs two working members; failures: {errors!r}"
        )

    P = np.column_stack(oof_cols)
    w, criterion, vertex = _ensemble_weights(P, train.treatment.astype(np.float64))
    return EnsemblePredictor(tuple(finals), w, tuple(names), criterion, vertex)


@dataclass(frozen=True)
class EnsembleAlgorithm(Algorithm):
    name = "ensemble"
    members: tuple = (OlsAlgorithm(), ForestAlgorithm())
    outer_folds: int = 5

    def fit(self, train: Sample, seed: int):
        return fit_ensemble(train, self.members, self.outer_folds, seed)

    def describe(self) -> str:
        inner = " + ".join(m.describe() for m in self.members)
        return f"ensemble({inner})"


def make_algorithm(kind: str, **kw) -> Algorithm:
    """Factory used by the CLI and the simulation harness."""
    kinds = {
        "constant": ConstantAlgorithm,
        "ols": OlsAlgorithm,
        "missingness": MissingnessAlgorithm,
        "tree": TreeAlgorithm,
        "forest": ForestAlgorithm,
        "ensemble": EnsembleAlgorithm,
    }
    if kind not in kinds:
        raise ValueError(f"unknown algorithm kind {kind!r}")
    return kinds[kind](**kw)


# ---------------------------------------------------------------------------
# serialization (audit only)
# ---------------------------------------------------------------------------


def predictor_to_dict(predictor) -> dict:
    """Versioned JSON-ready description of a fitted predictor."""
    doc = {"version": 1, "kind": predictor.kind}
    if isinstance(predictor, ConstantPredictor):
        doc["p_hat"] = predictor.p_hat
    elif isinstance(predictor, OlsPredictor):
        doc["coef"] = predictor.coef.tolist()
        doc["rank_deficient"] = predictor.rank_deficient
    elif isinstance(predictor, (TreePredictor, ForestPredictor)):
        nodes = predictor.nodes
        doc["params"] = {
            "min_node": predictor.min_node,
            "mtry": predictor.mtry,
            "seed": predictor.seed,
        }
        if isinstance(predictor, ForestPredictor):
            doc["params"]["n_trees"] = predictor.n_trees
            doc["params"]["bootstrap"] = predictor.bootstrap
            doc["cv_table"] = [list(row) for row in predictor.cv_table]
        doc["trees"] = [
            {
                "feature": nodes.feature[t, : nodes.n_nodes[t]].tolist(),
                "threshold": nodes.threshold[t, : nodes.n_nodes[t]].tolist(),
                "left": nodes.left[t, : nodes.n_nodes[t]].tolist(),
                "right": nodes.right[t, : nodes.n_nodes[t]].tolist(),
                "value": nodes.value[t, : nodes.n_nodes[t]].tolist(),
            }
            for t in range(nodes.feature.shape[0])
        ]
    elif isinstance(predictor, EnsemblePredictor):
        doc["weights"] = predictor.weights.tolist()
        doc["members"] = [predictor_to_dict(m) for m in predictor.members]
    else:
        raise TypeError(f"not a predictor: {predictor!r}")
    return doc


def predictor_to_json(predictor) -> str:
    return json.dumps(predictor_to_dict(predictor))
