"""Prediction permutation tests for the joint no-effect hypothesis.

Two designs:

* H (hold-out): fit once on a training split, evaluate the loss on the
  disjoint hold-out, and calibrate by permuting hold-out treatment
  labels against the fixed predictions (no refitting).
* CV (cross-validation): every unit gets an out-of-fold prediction from
  a model fit on the other folds; each permutation arm permutes labels
  over the full sample and refits all K fold models.

The p-value is (1 + #{permuted losses <= observed}) / (B + 1), the
finite-B construction that is exactly valid under the null without
randomization; ties count as <=. With the default treatment-stratified
folds, CV permutations preserve per-fold treatment counts, which keeps
the permutation-group symmetry that exactness rests on; plain random
folds with unrestricted permutations are available via
``stratified=False``.

Permutation arms are independent tasks with counter-derived seeds, so
results are identical for any worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._rng import derive_seed
from .data import (
    FoldAssignment,
    PermutationPlan,
    Sample,
    draw_permutation,
    make_folds,
    split_holdout_indices,
    _strata_codes,
)
from .errors import SizeError
from .predictors import Algorithm, OlsAlgorithm, make_recipe, predict

_TAG_SPLIT = 31
_TAG_FOLDS = 32
_TAG_PLAN = 33
_TAG_FIT = 34

_NLL_CLIP = 1e-6


@dataclass(frozen=True)
class Loss:
    """Pointwise loss; squared error or clipped negative log-likelihood."""

    kind: str

    def __post_init__(self):
        if self.kind not in ("squared_error", "neg_log_likelihood"):
            raise ValueError(f"unknown loss kind {self.kind!r}")


SQUARED_ERROR = Loss("squared_error")
NEG_LOG_LIKELIHOOD = Loss("neg_log_likelihood")


def pointwise_loss(loss: Loss, t_hat: float, t: float) -> float:
    """Loss of one prediction against one realized label."""
    if np.isnan(t_hat) or np.isnan(t):
        raise ValueError("NaN passed to pointwise_loss")
    if loss.kind == "squared_error":
        return float((t_hat - t) ** 2)
    c = min(max(t_hat, _NLL_CLIP), 1.0 - _NLL_CLIP)
    return float(-(t * np.log(c) + (1.0 - t) * np.log(1.0 - c)))


def _loss_vector(loss: Loss, t_hat: np.ndarray, t: np.ndarray) -> float:
    if np.isnan(t_hat).any() or np.isnan(t).any():
        raise ValueError("NaN predictions or labels")
    if loss.kind == "squared_error":
        return float(np.mean((t_hat - t) ** 2))
    c = np.clip(t_hat, _NLL_CLIP, 1.0 - _NLL_CLIP)
    return float(-np.mean(t * np.log(c) + (1.0 - t) * np.log(1.0 - c)))


def _loss_rows(loss: Loss, t_hat: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Mean loss of fixed predictions against each row of labels in T."""
    if loss.kind == "squared_error":
        return np.mean((t_hat[None, :] - T) ** 2, axis=1)
    c = np.clip(t_hat, _NLL_CLIP, 1.0 - _NLL_CLIP)
    return -np.mean(T * np.log(c)[None, :] + (1.0 - T) * np.log(1.0 - c)[None, :], axis=1)


def holdout_loss(predictor, holdout: Sample, loss: Loss) -> float:
    """Mean pointwise loss of a fitted predictor on a hold-out sample."""
    if holdout.n == 0:
        raise SizeError("empty hold-out sample")
    t_hat = predict(predictor, holdout)
    return _loss_vector(loss, t_hat, holdout.treatment.astype(np.float64))


def permutation_pvalue(observed: float, permuted: np.ndarray) -> float:
    """(1 + #{permuted <= observed}) / (B + 1); lower loss = stronger evidence."""
    permuted = np.asarray(permuted, dtype=np.float64)
    if permuted.size < 1:
        raise ValueError("need at least one permuted loss")
    return float((1 + int(np.sum(permuted <= observed))) / (permuted.size + 1))


@dataclass(frozen=True)
class TestResult:
    """Outcome of one prediction permutation test."""

    design: str  # "H" or "CV"
    loss_kind: str
    observed_loss: float
    permuted_losses: np.ndarray
    p_value: float
    predictions: np.ndarray  # hold-out (H) or out-of-fold (CV)
    metadata: dict

    def to_dict(self) -> dict:
        return {
            "design": self.design,
            "loss_kind": self.loss_kind,
            "L_hat": self.observed_loss,
            "p_value": self.p_value,
            "B": int(self.metadata["B"]),
            "K_or_m": int(self.metadata.get("K", self.metadata.get("m"))),
            "permuted_losses": [float(x) for x in self.permuted_losses],
            "predictions": [float(x) for x in self.predictions],
            "seeds": self.metadata["seeds"],
            "metadata": {
                k: v for k, v in self.metadata.items() if k != "seeds"
            },
        }


def _holdout_plan(holdout: Sample, B: int, seed: int) -> PermutationPlan:
    unit = "cluster" if holdout.cluster_id is not None else "observation"
    within = _strata_codes(holdout) if holdout.stratum_id is not None else None
    return PermutationPlan("holdout-only", unit, within, B, seed)


def run_holdout_test(sample: Sample, algo: Algorithm, loss: Loss = SQUARED_ERROR,
                     train_fraction: float = 0.5, B: int = 999,
                     seed: int = 0) -> TestResult:
    """Hold-out (H) prediction permutation test.

    Fits once on the training part, computes the hold-out loss, then
    forms B losses by permuting hold-out treatment labels against the
    fixed predictions.
    """
    if B < 19:
        raise ValueError("B must be at least 19")
    train_idx, hold_idx = split_holdout_indices(sample, train_fraction,
                                                derive_seed(seed, _TAG_SPLIT))
    train, holdout = sample.subset(train_idx), sample.subset(hold_idx)
    predictor = algo.fit(train, derive_seed(seed, _TAG_FIT))
    t_hat = predict(predictor, holdout)
    t_hold = holdout.treatment.astype(np.float64)
    observed = _loss_vector(loss, t_hat, t_hold)

    plan = _holdout_plan(holdout, B, derive_seed(seed, _TAG_PLAN))
    perms = np.empty((B, holdout.n))
    for b in range(1, B + 1):
        perms[b - 1] = draw_permutation(plan, b, holdout)
    permuted = _loss_rows(loss, t_hat, perms)
    p = permutation_pvalue(observed, permuted)

    meta = {
        "B": B,
        "m": train.n,
        "train_fraction": train_fraction,
        "algorithm": algo.describe(),
        "seeds": {"seed": int(seed)},
        "n": sample.n,
        "holdout_index": hold_idx.tolist(),
    }
    return TestResult("H", loss.kind, observed, permuted, p, t_hat, meta)


def _cv_plan(sample: Sample, folds: FoldAssignment, B: int, seed: int,
             stratified: bool) -> PermutationPlan:
    unit = "cluster" if sample.cluster_id is not None else "observation"
    strata = _strata_codes(sample)
    if stratified and folds.K < sample.n:
        # stratified folds fix per-fold treatment counts; permuting within
        # fold x stratum cells preserves that conditioning event exactly
        within = strata * (folds.K + 1) + folds.fold_of_unit
    else:
        within = strata if sample.stratum_id is not None else None
    return PermutationPlan("full-sample", unit, within, B, seed)


def _cv_arm_losses(sample: Sample, folds: FoldAssignment, algo: Algorithm,
                   loss: Loss, labels: np.ndarray, arm: int, seed: int):
    """Loss (and arm-0 predictions) for one permutation arm: refit all K."""
    arm_sample = sample.with_treatment(labels) if arm > 0 else sample
    preds = np.empty(sample.n)
    for j in range(1, folds.K + 1):
        tr = np.flatnonzero(folds.train_mask(j))
        te = np.flatnonzero(folds.test_mask(j))
        fitted = algo.fit(arm_sample.subset(tr),
                          derive_seed(seed, _TAG_FIT, arm, j))
        preds[te] = predict(fitted, sample.outcomes[te], sample.missing[te])
    return _loss_vector(loss, preds, labels.astype(np.float64)), preds


def _cv_worker(args):
    sample, folds, algo, loss, plan, arms, seed = args
    out = []
    for arm in arms:
        labels = (sample.treatment if arm == 0
                  else draw_permutation(plan, arm, sample))
        arm_loss, preds = _cv_arm_losses(sample, folds, algo, loss, labels,
                                         arm, seed)
        out.append((arm, arm_loss, preds if arm == 0 else None))
    return out


def _ols_cv_operator(sample: Sample, folds: FoldAssignment,
                     policy: str) -> np.ndarray:
    """n x n linear map M with out-of-fold OLS predictions = M @ labels."""
    n = sample.n
    M = np.zeros((n, n))
    for j in range(1, folds.K + 1):
        tr = np.flatnonzero(folds.train_mask(j))
        te = np.flatnonzero(folds.test_mask(j))
        train = sample.subset(tr)
        recipe = make_recipe(train, policy)
        Xtr = recipe.build(train.outcomes, train.missing)
        Xte = recipe.build(sample.outcomes[te], sample.missing[te])
        X1tr = np.hstack([np.ones((len(tr), 1)), Xtr])
        X1te = np.hstack([np.ones((len(te), 1)), Xte])
        M[np.ix_(te, tr)] = X1te @ np.linalg.pinv(X1tr)
    return M


def _ols_loo_losses(sample: Sample, labels_matrix: np.ndarray,
                    loss: Loss, policy: str) -> tuple[np.ndarray, np.ndarray]:
    """Leave-one-out OLS via the hat-matrix identity, all arms at once."""
    recipe = make_recipe(sample, policy)
    X = recipe.build(sample.outcomes, sample.missing)
    X1 = np.hstack([np.ones((sample.n, 1)), X])
    H = X1 @ np.linalg.pinv(X1)
    h = np.clip(np.diag(H), None, 1.0 - 1e-12)
    fitted = labels_matrix @ H.T
    preds = (fitted - h[None, :] * labels_matrix) / (1.0 - h)[None, :]
    losses = np.array([
        _loss_vector(loss, preds[i], labels_matrix[i].astype(np.float64))
        for i in range(labels_matrix.shape[0])
    ])
    return losses, preds


def run_cv_test(sample: Sample, algo: Algorithm, loss: Loss = SQUARED_ERROR,
                K: int = 5, B: int = 199, seed: int = 0,
                stratified: bool = True, workers: int = 1,
                ols_closed_form: bool = True) -> TestResult:
    """K-fold cross-validation (CV) prediction permutation test.

    The observed arm cross-fits K predictors and averages the
    out-of-fold loss over all n units; every permutation arm permutes
    treatment over the full sample (within fold cells under the
    stratified default), refits all K predictors, and recomputes the
    loss. OLS uses a closed-form linear-operator path that matches the
    generic refit path exactly (``ols_closed_form=False`` forces the
    generic path; the equality of both routes is under test).
    """
    if B < 19:
        raise ValueError("B must be at least 19")
    folds = make_folds(sample, K, derive_seed(seed, _TAG_FOLDS), stratified)
    plan = _cv_plan(sample, folds, B, derive_seed(seed, _TAG_PLAN), stratified)

    labels0 = sample.treatment.astype(np.float64)
    if isinstance(algo, OlsAlgorithm) and ols_closed_form:
        T = np.empty((B + 1, sample.n))
        T[0] = labels0
        for b in range(1, B + 1):
            T[b] = draw_permutation(plan, b, sample)
        if K == sample.n and not sample.has_missing:
            losses, preds = _ols_loo_losses(sample, T, loss, algo.missing_policy)
        else:
            M = _ols_cv_operator(sample, folds, algo.missing_policy)
            preds = T @ M.T
            losses = np.array([
                _loss_vector(loss, preds[i], T[i]) for i in range(B + 1)
            ])
        observed, permuted = losses[0], losses[1:]
        oof = preds[0]
    else:
        arms = list(range(B + 1))
        losses = np.empty(B + 1)
        oof = None
        if workers <= 1:
            results = [_cv_worker((sample, folds, algo, loss, plan, arms, seed))]
        else:
            chunks = [c.tolist() for c in np.array_split(arms, workers * 4)
                      if len(c)]
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(
                    _cv_worker,
                    [(sample, folds, algo, loss, plan, c, seed) for c in chunks],
                ))
        for chunk in results:
            for arm, arm_loss, preds in chunk:
                losses[arm] = arm_loss
                if arm == 0:
                    oof = preds
        observed, permuted = losses[0], losses[1:]

    p = permutation_pvalue(observed, permuted)
    meta = {
        "B": B,
        "K": K,
        "stratified": stratified,
        "algorithm": algo.describe(),
        "seeds": {"seed": int(seed)},
        "n": sample.n,
        "fold_of_unit": folds.fold_of_unit.tolist(),
        "refits": K * B,
    }
    return TestResult("CV", loss.kind, float(observed), np.asarray(permuted),
                      p, oof, meta)
