"""Monte Carlo and leave-one-out evaluation harnesses.

monte_carlo_order regenerates fresh synthetic sets and tabulates what each
selector picks; order_sweep does the same over subsets of one fixed set;
lmmse_curve scores every candidate order by how well the truncated model
predicts a left-out landmark of a left-out sample from the remaining ones.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, PdmOrderError, TooFewSamples, ZeroVariance
from .order_select import select_order_proposed, select_order_variance
from .pdm import TruncatedPdm, fit_pdm, truncate
from .shapes import ShapeSet, generalized_procrustes
from .simgen import SeedPdm, SimConfig, TransformRanges, sample_shapes

RIDGE_REL = 1e-10


@dataclass(frozen=True)
class CellStats:
    """Histogram of selected orders for one (method, sample count) cell."""

    mean_t: float
    var_t: float
    hist: dict[int, int]

    @staticmethod
    def from_picks(picks: list[int]) -> "CellStats":
        hist: dict[int, int] = {}
        for t in picks:
            hist[t] = hist.get(t, 0) + 1
        if not picks:
            # Every trial in the cell failed; keep the cell but mark it empty.
            return CellStats(mean_t=float("nan"), var_t=float("nan"), hist={})
        values = np.array(picks, dtype=float)
        return CellStats(
            mean_t=float(values.mean()),
            var_t=float(values.var()),
            hist=dict(sorted(hist.items())),
        )


@dataclass(frozen=True, eq=False)
class TrialSummary:
    """Selected-order statistics per (method, sample count).

    failures counts trials that aborted with a propagated error; their
    picks are missing from the histograms.
    """

    cells: dict[tuple[str, int], CellStats]
    trials: int
    failures: int = 0

    def __post_init__(self) -> None:
        for key, cell in self.cells.items():
            total = sum(cell.hist.values())
            if self.failures == 0 and total != self.trials:
                raise ValueError(f"cell {key} tabulated {total} of {self.trials} trials")


@dataclass(frozen=True, eq=False)
class McConfig:
    """Recipe for a Monte Carlo order-selection experiment."""

    seed_pdm: SeedPdm
    beta_db: float
    sample_counts: tuple[int, ...]
    trials: int
    rng_seed: int
    methods: tuple[str, ...] = ("proposed", "variance")
    transform_ranges: TransformRanges = field(default_factory=TransformRanges)
    variance_fraction: float = 0.95
    selector_t_max: int | None = None
    b_dist: str = "uniform"

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ValueError("at least one trial is required")
        if not self.sample_counts:
            raise ValueError("at least one sample count is required")
        for method in self.methods:
            if method not in ("proposed", "variance"):
                raise ValueError(f"unknown selection method {method!r}")


def _trial_seed(master: int, count: int, trial: int) -> int:
    return int(np.random.SeedSequence((master, count, trial)).generate_state(1, np.uint64)[0])


def _select_with(
    method: str,
    shape_set: ShapeSet,
    t_max: int | None,
    fraction: float,
) -> int:
    if method == "proposed":
        return select_order_proposed(shape_set, t_max=t_max).t_star
    return select_order_variance(fit_pdm(shape_set), fraction=fraction)


def monte_carlo_order(cfg: McConfig, threads: int = 1) -> TrialSummary:
    """Repeatedly generate synthetic sets and tabulate the selected orders.

    Every (sample count, trial) pair derives its own generation seed from
    the master seed, so results do not depend on evaluation order or on the
    thread count.  All requested methods see the same generated sets.
    """

    def _one(count: int, trial: int) -> dict[str, int] | None:
        sim = SimConfig(
            n_samples=count,
            beta_db=cfg.beta_db,
            rng_seed=_trial_seed(cfg.rng_seed, count, trial),
            transform_ranges=cfg.transform_ranges,
            realign=True,
            b_dist=cfg.b_dist,
        )
        try:
            shape_set = sample_shapes(cfg.seed_pdm, sim)
            return {
                method: _select_with(
                    method, shape_set, cfg.selector_t_max, cfg.variance_fraction
                )
                for method in cfg.methods
            }
        except PdmOrderError:
            return None

    failures = 0
    cells: dict[tuple[str, int], CellStats] = {}
    for count in cfg.sample_counts:
        jobs = [(count, trial) for trial in range(cfg.trials)]
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                outcomes = list(pool.map(lambda job: _one(*job), jobs))
        else:
            outcomes = [_one(*job) for job in jobs]
        picks: dict[str, list[int]] = {method: [] for method in cfg.methods}
        for outcome in outcomes:
            if outcome is None:
                failures += 1
                continue
            for method, t in outcome.items():
                picks[method].append(t)
        for method in cfg.methods:
            cells[(method, count)] = CellStats.from_picks(picks[method])
    return TrialSummary(cells=cells, trials=cfg.trials, failures=failures)


def order_sweep(
    shape_set: ShapeSet,
    sample_counts: tuple[int, ...],
    trials: int,
    rng_seed: int,
    methods: tuple[str, ...] = ("proposed", "variance"),
    mode: str = "random",
    t_max: int | None = None,
    variance_fraction: float = 0.95,
    threads: int = 1,
) -> TrialSummary:
    """Tabulate selected orders over subsets of one fixed set.

    Args:
        shape_set: aligned input set.
        sample_counts: subset sizes, each at most the set size.
        trials: independent random subsets per size (prefix mode collapses
            to identical subsets, kept for sequential-acquisition studies).
        rng_seed: master seed for the subset draws.
        methods: selectors to run on every subset.
        mode: "random" draws subsets without replacement; "prefix" takes
            the first samples in input order.
        t_max, variance_fraction: selector options.
        threads: worker threads across trials.
    """
    m = shape_set.n_shapes
    if max(sample_counts) > m:
        raise TooFewSamples(
            f"subset size {max(sample_counts)} exceeds the {m} available shapes"
        )
    if mode not in ("random", "prefix"):
        raise ValueError(f"unknown sweep mode {mode!r}")

    def _one(count: int, trial: int) -> dict[str, int] | None:
        if mode == "random":
            rng = np.random.default_rng(_trial_seed(rng_seed, count, trial))
            indices = np.sort(rng.choice(m, size=count, replace=False))
        else:
            indices = np.arange(count)
        subset = shape_set.subset(indices)
        try:
            return {
                method: _select_with(method, subset, t_max, variance_fraction)
                for method in methods
            }
        except PdmOrderError:
            return None

    failures = 0
    cells: dict[tuple[str, int], CellStats] = {}
    for count in sample_counts:
        jobs = [(count, trial) for trial in range(trials)]
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                outcomes = list(pool.map(lambda job: _one(*job), jobs))
        else:
            outcomes = [_one(*job) for job in jobs]
        picks: dict[str, list[int]] = {method: [] for method in methods}
        for outcome in outcomes:
            if outcome is None:
                failures += 1
                continue
            for method, t in outcome.items():
                picks[method].append(t)
        for method in methods:
            cells[(method, count)] = CellStats.from_picks(picks[method])
    return TrialSummary(cells=cells, trials=trials, failures=failures)


def _landmark_indices(n: int, landmark: int) -> tuple[np.ndarray, np.ndarray]:
    miss = np.array([2 * landmark, 2 * landmark + 1])
    avail = np.setdiff1d(np.arange(n), miss)
    return miss, avail


def lmmse_estimate_landmark(
    pdm: TruncatedPdm,
    y_available: np.ndarray,
    landmark: int,
    estimator: str = "ridge",
) -> np.ndarray:
    """Linear minimum mean squared error estimate of one hidden landmark.

    The truncated model induces the low-rank covariance
    R = basis diag(lambdas) basis^T; the estimate is the conditional-mean
    formula R_ia solve(R_aa, y_available) with a small ridge
    RIDGE_REL * trace(R_aa) / (N - 2) keeping the reduced system solvable
    when R is rank deficient.  "pinv" replaces the ridge solve with a
    pseudo-inverse.

    Args:
        pdm: truncated model of the aligned population.
        y_available: (N - 2,) mean-removed coordinates of the visible
            landmarks, in coordinate order with the hidden pair removed.
        landmark: index of the hidden landmark.
        estimator: "ridge" (default) or "pinv".

    Returns:
        (2,) mean-removed estimate of the hidden coordinates.
    """
    n = pdm.n_coords
    if not 0 <= landmark < n // 2:
        raise DimensionMismatch(f"landmark {landmark} outside 0..{n // 2 - 1}")
    y_available = np.asarray(y_available, dtype=float)
    if y_available.shape != (n - 2,):
        raise DimensionMismatch(f"expected {n - 2} visible coordinates")
    cov = (pdm.basis * pdm.lambdas) @ pdm.basis.T
    miss, avail = _landmark_indices(n, landmark)
    r_aa = cov[np.ix_(avail, avail)]
    r_ia = cov[np.ix_(miss, avail)]
    if estimator == "ridge":
        rho = RIDGE_REL * float(np.trace(r_aa)) / (n - 2)
        solved = np.linalg.solve(r_aa + rho * np.eye(n - 2), y_available)
    elif estimator == "pinv":
        solved = np.linalg.pinv(r_aa) @ y_available
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    return r_ia @ solved


@dataclass(frozen=True, eq=False)
class LmmseResult:
    """Leave-one-out landmark prediction error per candidate order."""

    errors: dict[int, float]
    argmin_t: int
    selected_orders: dict[str, int]

    def __post_init__(self) -> None:
        if self.argmin_t not in self.errors:
            raise ValueError("argmin_t must index into the error table")


def _predict_all_landmarks(
    cov: np.ndarray,
    y: np.ndarray,
    avail_idx: np.ndarray,
    miss_idx: np.ndarray,
    estimator: str,
) -> np.ndarray:
    """Predict every landmark of one sample at once; returns (K, 2)."""
    n = cov.shape[0]
    r_aa = cov[avail_idx[:, :, None], avail_idx[:, None, :]]
    r_ia = cov[miss_idx[:, :, None], avail_idx[:, None, :]]
    y_a = y[avail_idx]
    if estimator == "ridge":
        traces = r_aa.diagonal(axis1=1, axis2=2).sum(axis=1)
        if not np.any(traces > 0.0):
            return np.zeros((avail_idx.shape[0], 2))
        rho = RIDGE_REL * traces / (n - 2)
        systems = r_aa + rho[:, None, None] * np.eye(n - 2)[None, :, :]
        solved = np.linalg.solve(systems, y_a[:, :, None])
    else:
        solved = np.linalg.pinv(r_aa) @ y_a[:, :, None]
    return (r_ia @ solved)[:, :, 0]


def lmmse_curve(
    shape_set: ShapeSet,
    t_max: int | None = None,
    estimator: str = "ridge",
    selector_t_max: int | None = None,
) -> LmmseResult:
    """Leave-one-out hidden-landmark error as a function of model order.

    For every sample, a model is fit on the remaining samples (the set is
    aligned once up front if needed; folds do not re-run Procrustes) and
    every landmark of the held-out sample is predicted from the others.
    The error at order t averages the squared prediction distance over all
    samples and landmarks.  Orders run from 1 to min(N - 4, M - 2), further
    capped below the positive rank of every fold and by t_max.

    The cap stays strictly under the fold ranks on purpose.  Similarity
    alignment confines every sample, noise included, to a common shape
    subspace (dimension N - 4 for 2D data), so once a fold's model keeps
    its whole positive spectrum the held-out sample lies in the model span
    and the prediction degenerates into exact interpolation.  The last
    order before that point is where overfitting peaks; beyond it the
    error is an artifact, not a measurement.

    Returns:
        LmmseResult with the error table, its argmin (smallest order wins
        ties), and what the proposed and variance selectors pick on the
        full set.
    """
    if shape_set.n_shapes < 3:
        raise TooFewSamples("leave-one-out needs at least 3 shapes")
    if estimator not in ("ridge", "pinv"):
        raise ValueError(f"unknown estimator {estimator!r}")
    if not shape_set.aligned:
        shape_set = generalized_procrustes(shape_set)

    n = shape_set.n_coords
    m = shape_set.n_shapes
    k = n // 2
    X = shape_set.as_matrix()

    folds = []
    min_rank = n
    for fold in range(m):
        keep = [i for i in range(m) if i != fold]
        model = fit_pdm(shape_set.subset(keep))
        min_rank = min(min_rank, model.positive_rank())
        folds.append(model)
    t_cap = min(n - 4, m - 2)
    if min_rank > 0:
        t_cap = min(t_cap, min_rank - 1)
    if t_max is not None:
        t_cap = min(t_cap, t_max)
    if t_cap < 1:
        if min_rank > 0:
            raise TooFewSamples("no usable order: folds are rank deficient")
        # A variance-free set (all folds rank zero) still has a defined
        # curve: the zero model predicts the fold mean, so keep one order.
        t_cap = 1

    avail_idx = np.empty((k, n - 2), dtype=int)
    miss_idx = np.empty((k, 2), dtype=int)
    for landmark in range(k):
        miss_idx[landmark], avail_idx[landmark] = _landmark_indices(n, landmark)

    sums = np.zeros(t_cap + 1)
    for fold, model in enumerate(folds):
        y = X[:, fold] - model.mean
        cov = np.zeros((n, n))
        for t in range(1, t_cap + 1):
            vec = model.eigvecs[:, t - 1]
            cov = cov + model.eigvals[t - 1] * np.outer(vec, vec)
            predicted = _predict_all_landmarks(cov, y, avail_idx, miss_idx, estimator)
            actual = np.column_stack([y[0::2], y[1::2]])
            sums[t] += float(np.sum((predicted - actual) ** 2))

    errors = {t: sums[t] / (m * k) for t in range(1, t_cap + 1)}
    argmin_t = min(errors, key=lambda t: (errors[t], t))

    # Degenerate sets still have a well defined curve, but no order can be
    # selected; leave those entries out rather than failing the whole run.
    selected: dict[str, int] = {}
    try:
        selected["proposed"] = select_order_proposed(shape_set, t_max=selector_t_max).t_star
    except ZeroVariance:
        pass
    try:
        selected["variance"] = select_order_variance(fit_pdm(shape_set))
    except ZeroVariance:
        pass
    return LmmseResult(errors=errors, argmin_t=argmin_t, selected_orders=selected)
