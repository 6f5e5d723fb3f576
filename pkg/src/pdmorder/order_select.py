"""Model order selection for point distribution models.

The training half of the data builds the eigenmodel; the held-out half is
regressed onto each candidate number of modes under a diagonal noise
covariance that is re-estimated in alternation with the box-constrained
coefficients.  An information criterion scores every candidate order and
the smallest score wins, with ties broken toward fewer modes.  Because the
noise covariance is estimated per coordinate, correlated residuals left
behind by Procrustes alignment do not inflate the selected order the way a
white-noise criterion would.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import TooFewSamples, ZeroVariance
from .pdm import PdmModel, TruncatedPdm, fit_pdm, project_constrained, truncate
from .shapes import ShapeSet, mean_shape

# Noise variances are kept above this fraction of the mean data power so
# logarithms and inverses stay finite even for exact fits.
SIGMA_FLOOR_REL = 1e-12


@dataclass(frozen=True, eq=False)
class SplitData:
    """A shape set split into a training half and a held-out half.

    Attributes:
        x1: training shapes (model half).
        x2: held-out shapes (scoring half).
        y: (N, M2) held-out coordinates minus the mean shape, one column
            per held-out sample.
        mean_source: which half supplied the subtracted mean, "x1" or "x2".
    """

    x1: ShapeSet
    x2: ShapeSet
    y: np.ndarray
    mean_source: str = "x1"

    @property
    def m1(self) -> int:
        return self.x1.n_shapes

    @property
    def m2(self) -> int:
        return self.x2.n_shapes


def split_data(
    shape_set: ShapeSet,
    policy: str = "first_half",
    seed: int | None = None,
    mean_source: str = "x1",
) -> SplitData:
    """Split an aligned set into model and scoring halves.

    The training half gets the extra shape when the count is odd.

    Args:
        shape_set: at least four shapes.
        policy: "first_half" keeps input order; "shuffled" permutes with the
            given seed first (deterministic per seed).
        seed: permutation seed for the shuffled policy.
        mean_source: subtract the mean of "x1" (default) or of "x2" when
            building the held-out data matrix.
    """
    m = shape_set.n_shapes
    if m < 4:
        raise TooFewSamples(f"splitting needs at least 4 shapes, got {m}")
    if mean_source not in ("x1", "x2"):
        raise ValueError(f"unknown mean source {mean_source!r}")
    indices = np.arange(m)
    if policy == "shuffled":
        rng = np.random.default_rng(seed)
        indices = rng.permutation(m)
    elif policy != "first_half":
        raise ValueError(f"unknown split policy {policy!r}")
    m1 = (m + 1) // 2
    x1 = shape_set.subset(indices[:m1])
    x2 = shape_set.subset(indices[m1:])
    mu = mean_shape(x1 if mean_source == "x1" else x2).coords
    y = x2.as_matrix() - mu[:, None]
    return SplitData(x1=x1, x2=x2, y=y, mean_source=mean_source)


@dataclass(frozen=True, eq=False)
class RegressionFit:
    """Result of the alternating coefficient / noise-variance estimation.

    Attributes:
        coeffs: (order, M2) box-constrained mode coefficients.
        sigma_diag: (N,) per-coordinate noise variances, floored.
        residuals: (N, M2) data minus reconstruction.
        iterations: alternation sweeps performed.
        objective_trace: negative log-likelihood (constants dropped) after
            every sweep; one entry per sweep.
        converged: whether the relative objective change fell below tol
            before the sweep budget ran out.
    """

    coeffs: np.ndarray
    sigma_diag: np.ndarray
    residuals: np.ndarray
    iterations: int
    objective_trace: tuple[float, ...]
    converged: bool


def _objective(sigma: np.ndarray, residuals: np.ndarray, m2: int) -> float:
    return float(m2 * np.sum(np.log(sigma)) + np.sum(residuals * residuals / sigma[:, None]))


def alternating_ml(
    Y: np.ndarray,
    pdm: TruncatedPdm,
    tol: float = 1e-8,
    max_iter: int = 100,
    sigma_floor: float | None = None,
    clamp_mode: str = "clip",
    init_sigma: np.ndarray | None = None,
) -> RegressionFit:
    """Alternate box-constrained projection with diagonal noise estimation.

    Starting from unit noise variances (or init_sigma for a warm start),
    each sweep projects the data onto the modes under the current weights
    and then re-estimates each coordinate's noise variance from the fresh
    residuals, floored from below.  Sweeps stop when the relative change of
    the objective drops under tol.  Running out of sweeps is not an error:
    the fit is returned as-is with converged False.

    The default clamp is per-coordinate truncation.  Coefficients fitted to
    held-out data routinely poke past the box edge learned from the training
    half; truncation only touches the offending coordinates, whereas uniform
    scaling ("scale") shrinks the whole column and bleeds mode energy into
    the residuals, which inflates the noise estimates and biases the order
    criterion low.

    Args:
        Y: (N, M2) mean-removed data.
        pdm: truncated model to regress onto.
        tol: relative objective change that counts as converged.
        max_iter: sweep budget.
        sigma_floor: lower bound for the noise variances; defaults to
            SIGMA_FLOOR_REL times the mean per-coordinate power of Y.
        clamp_mode: "clip" (per-coordinate truncation, default) or "scale"
            (uniform column scaling), passed through to the projection.
        init_sigma: warm-start noise variances instead of ones.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2:
        raise ValueError("Y must be a 2-D matrix with one column per sample")
    n, m2 = Y.shape
    if m2 < 2:
        raise TooFewSamples(f"regression needs at least 2 held-out samples, got {m2}")
    if sigma_floor is None:
        sigma_floor = SIGMA_FLOOR_REL * float(np.mean(Y * Y))
    sigma_floor = max(sigma_floor, 1e-300)

    if init_sigma is None:
        sigma = np.ones(n)
    else:
        sigma = np.maximum(np.asarray(init_sigma, dtype=float).copy(), sigma_floor)

    trace: list[float] = []
    coeffs = np.zeros((pdm.order, m2))
    residuals = Y.copy()
    converged = False
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        candidate = project_constrained(pdm, Y, sigma, clamp_mode=clamp_mode)
        cand_residuals = Y - pdm.basis @ candidate
        # The clamp makes the projection approximate, so a column can come
        # back worse than the one it replaces.  Keeping the better column
        # under the current weights makes every sweep a descent step, which
        # the convergence test relies on.
        weights = 1.0 / sigma[:, None]
        worse = np.sum(cand_residuals * cand_residuals * weights, axis=0) > np.sum(
            residuals * residuals * weights, axis=0
        )
        if np.any(worse):
            candidate[:, worse] = coeffs[:, worse]
            cand_residuals[:, worse] = residuals[:, worse]
        coeffs = candidate
        residuals = cand_residuals
        sigma = np.maximum(np.mean(residuals * residuals, axis=1), sigma_floor)
        objective = _objective(sigma, residuals, m2)
        trace.append(objective)
        if len(trace) >= 2:
            previous = trace[-2]
            if abs(previous - objective) <= tol * max(1.0, abs(previous)):
                converged = True
                break
    return RegressionFit(
        coeffs=coeffs,
        sigma_diag=sigma,
        residuals=residuals,
        iterations=iterations,
        objective_trace=tuple(trace),
        converged=converged,
    )


def aic_score(fit: RegressionFit, order: int, m2: int, n: int) -> float:
    """Information-criterion score of a regression fit at a given order.

    score = M2 * (sum_i log sigma_i^2 + 2 t) + sum_{i,m} eps_{i,m}^2 / sigma_i^2

    The additive constant that does not depend on the order is dropped, so
    only score differences between orders are meaningful.
    """
    if fit.sigma_diag.shape != (n,) or fit.residuals.shape != (n, m2):
        raise ValueError("fit dimensions disagree with the stated n and m2")
    datafit = _objective(fit.sigma_diag, fit.residuals, m2)
    return float(datafit + 2.0 * m2 * order)


@dataclass(frozen=True, eq=False)
class OrderSelectionResult:
    """Outcome of a model order search.

    Attributes:
        t_star: selected order.
        scores: criterion value for every order that produced a fit.
        method: "proposed" or "variance".
        diagnostics: per-order notes, e.g. underdetermined fits, fit
            failures (failed orders carry no score), sweep exhaustion.
        per_order_fits: regression fits by order when requested.
    """

    t_star: int
    scores: dict[int, float]
    method: str
    diagnostics: dict[int, tuple[str, ...]] = field(default_factory=dict)
    per_order_fits: dict[int, RegressionFit] | None = None


def select_order_proposed(
    shape_set: ShapeSet,
    t_max: int | None = None,
    split_policy: str = "first_half",
    split_seed: int | None = None,
    tol: float = 1e-8,
    max_iter: int = 100,
    mean_source: str = "x1",
    clamp_mode: str = "clip",
    warm_start: bool = False,
    keep_fits: bool = False,
    threads: int = 1,
) -> OrderSelectionResult:
    """Select the model order by the split-data information criterion.

    The candidate range is 1..t_max with t_max capped at the training
    covariance's positive rank, at M1 - 1, and at N.  Every candidate gets
    a cold-started alternating fit unless warm_start reuses the previous
    order's noise estimate (a speed option that must not change the
    selection).  Orders whose fit fails numerically are excluded from the
    scores and reported in the diagnostics.

    Args:
        shape_set: aligned set with at least 4 shapes.
        t_max: optional cap on the candidate range.
        split_policy, split_seed, mean_source: see split_data.
        tol, max_iter, clamp_mode: see alternating_ml.
        warm_start: reuse the previous order's noise variances.
        keep_fits: attach the per-order fits to the result.
        threads: worker threads for the independent per-order fits.
    """
    split = split_data(shape_set, policy=split_policy, seed=split_seed, mean_source=mean_source)
    model = fit_pdm(split.x1)
    rank = model.positive_rank()
    if rank == 0:
        raise ZeroVariance("training half carries no variance; no modes to select")
    t_hi = min(rank, split.m1 - 1, model.n_coords)
    if t_max is not None:
        t_hi = min(t_hi, t_max)
    if t_hi < 1:
        raise TooFewSamples("not enough training shapes for even one mode")
    sigma_floor = SIGMA_FLOOR_REL * float(np.sum(model.eigvals)) / model.n_coords

    orders = list(range(1, t_hi + 1))
    fits: dict[int, RegressionFit] = {}
    diagnostics: dict[int, list[str]] = {}

    def _fit(order: int, init_sigma: np.ndarray | None) -> RegressionFit:
        return alternating_ml(
            split.y,
            truncate(model, order),
            tol=tol,
            max_iter=max_iter,
            sigma_floor=sigma_floor,
            clamp_mode=clamp_mode,
            init_sigma=init_sigma,
        )

    if warm_start or threads <= 1:
        previous_sigma: np.ndarray | None = None
        for order in orders:
            try:
                fit = _fit(order, previous_sigma if warm_start else None)
            except Exception as exc:  # noqa: BLE001 - failed orders are reported
                diagnostics.setdefault(order, []).append(f"fit failed: {exc}")
                continue
            fits[order] = fit
            if warm_start:
                previous_sigma = fit.sigma_diag
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = pool.map(lambda t: _run_quiet(_fit, t), orders)
        for order, (fit, error) in zip(orders, outcomes):
            if fit is None:
                diagnostics.setdefault(order, []).append(f"fit failed: {error}")
            else:
                fits[order] = fit

    if not fits:
        raise ZeroVariance("every candidate order failed to fit")

    scores: dict[int, float] = {}
    for order, fit in fits.items():
        scores[order] = aic_score(fit, order, split.m2, model.n_coords)
        if split.m2 <= order:
            diagnostics.setdefault(order, []).append("underdetermined: M2 <= order")
        if not fit.converged:
            diagnostics.setdefault(order, []).append("sweep budget exhausted")

    best = math.inf
    t_star = min(scores)
    for order in sorted(scores):
        if scores[order] < best:
            best = scores[order]
            t_star = order
    return OrderSelectionResult(
        t_star=t_star,
        scores=scores,
        method="proposed",
        diagnostics={k: tuple(v) for k, v in diagnostics.items()},
        per_order_fits=fits if keep_fits else None,
    )


def _run_quiet(fn, order):
    try:
        return fn(order, None), None
    except Exception as exc:  # noqa: BLE001
        return None, exc


def select_order_variance(model: PdmModel, fraction: float = 0.95) -> int:
    """Smallest order whose cumulative eigenvalue share reaches fraction."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly between 0 and 1")
    total = float(np.sum(model.eigvals))
    if total <= 0.0:
        raise ZeroVariance("model carries no variance")
    cumulative = np.cumsum(model.eigvals) / total
    return int(np.argmax(cumulative >= fraction)) + 1
