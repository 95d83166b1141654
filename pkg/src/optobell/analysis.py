"""Estimators for click datasets: correlations, CHSH statistics, fits.

Coincidence rules: a trial heralds when exactly one detector clicks in the
blue window, and a heralded trial contributes a coincidence n_ij when exactly
one detector clicks in the red window.  Double-click trials are excluded from
both counts and tracked separately; at the operating rates they are a ~1e-6
fraction of heralds.

Interval estimates follow a distribution pipeline rather than Gaussian error
propagation: the same-detector and cross-detector coincidence sums are
modeled as independent binomials with N = per-setting trials and p = the
observed fraction (plug-in), the correlation E = (X-Y)/(X+Y) is enumerated
over their joint support onto a uniform grid, and the Bell parameter's
distribution is the convolution of the four correlation grids (the fourth
reflected).  Expectations and 16th/84th percentiles summarize each grid.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .experiment import PATTERNS
from .sampler import ClickRecord

COUNTS_HEADER = "optobell-counts v1"
E_GRID_POINTS = 4096
EXHAUSTIVE_TRIALS = 2048
SUPPORT_SIGMA = 6.0
CHSH_SIGNS = (1, 1, 1, -1)


class AnalysisError(ValueError):
    """Invalid estimator input or malformed counts file."""


@dataclass(frozen=True)
class CoincidenceTable:
    """Per-setting coincidence counts n_ij plus herald and trial denominators."""

    n11: int
    n12: int
    n21: int
    n22: int
    heralds: int
    trials: int
    double_blue: int = 0

    def __post_init__(self):
        counts = (self.n11, self.n12, self.n21, self.n22,
                  self.heralds, self.trials, self.double_blue)
        if any(c < 0 for c in counts):
            raise AnalysisError(f"negative count in {self}")
        if not self.coincidences <= self.heralds <= self.trials:
            raise AnalysisError(
                f"need coincidences <= heralds <= trials, got "
                f"{self.coincidences}, {self.heralds}, {self.trials}")

    @property
    def coincidences(self) -> int:
        return self.n11 + self.n12 + self.n21 + self.n22

    @property
    def same(self) -> int:
        return self.n11 + self.n22

    @property
    def diff(self) -> int:
        return self.n12 + self.n21


@dataclass(frozen=True)
class DistributionGrid:
    """Probability masses on the uniform lattice lo + k*(hi-lo)/(n-1)."""

    lo: float
    hi: float
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or values.size < 2:
            raise AnalysisError("grid needs at least two points")
        if not self.lo < self.hi:
            raise AnalysisError(f"empty support [{self.lo}, {self.hi}]")
        if (values < 0.0).any():
            raise AnalysisError("negative probability mass")
        if abs(values.sum() - 1.0) > 1e-9:
            raise AnalysisError(f"grid mass {values.sum()!r} is not 1")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / (self.values.size - 1)

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.values.size)


@dataclass(frozen=True)
class DistributionSummary:
    expectation: float
    ci_lo: float
    ci_hi: float


@dataclass(frozen=True)
class ChshResult:
    """Bell parameter point estimate and distribution summary."""

    s_point: float
    s_expected: float
    ci_lo: float
    ci_hi: float
    sigma_violation: float

    def __post_init__(self):
        if not self.ci_lo <= self.s_expected <= self.ci_hi:
            raise AnalysisError("interval does not bracket the expectation")


@dataclass(frozen=True)
class CrossCorrelation:
    g2: float
    c_b: int
    c_r: int
    coincidences: int

    def __post_init__(self):
        if self.g2 < 0.0:
            raise AnalysisError("negative cross-correlation")


@dataclass(frozen=True)
class ClickTotals:
    """Window click tallies over a record stream, per detector and combined."""

    trials: int
    blue_1: int = 0
    blue_2: int = 0
    red_1: int = 0
    red_2: int = 0
    blue_any: int = 0
    red_any: int = 0
    both_any: int = 0


@dataclass(frozen=True)
class FitResult:
    params: dict
    uncertainty: dict
    residual_norm: float
    converged: bool
    iterations: int


def count_coincidences(records: Iterable[ClickRecord], trials: int) -> CoincidenceTable:
    """Tally the exactly-one-click coincidence table for one setting."""
    if trials < 0:
        raise AnalysisError(f"trials must be >= 0, got {trials}")
    n = {(1, 1): 0, (1, 2): 0, (2, 1): 0, (2, 2): 0}
    heralds = 0
    double_blue = 0
    label = None
    for rec in records:
        if label is None:
            label = rec.setting_label
        elif rec.setting_label != label:
            raise AnalysisError(
                f"mixed settings in one stream: {label} and {rec.setting_label}")
        if len(rec.blue_clicks) == 2:
            double_blue += 1
            continue
        if len(rec.blue_clicks) != 1:
            continue
        heralds += 1
        if len(rec.red_clicks) == 1:
            (i,), (j,) = rec.blue_clicks, rec.red_clicks
            n[(i, j)] += 1
    return CoincidenceTable(n[(1, 1)], n[(1, 2)], n[(2, 1)], n[(2, 2)],
                            heralds, trials, double_blue)


def table_from_pattern_counts(counts, trials: int) -> CoincidenceTable:
    """Coincidence table from a 16-pattern histogram, same rules as the
    record-stream tally (exactly one click per window)."""
    counts = np.asarray(counts)
    if counts.shape != (len(PATTERNS),):
        raise AnalysisError(f"expected {len(PATTERNS)} pattern counts, got {counts.shape}")
    if int(counts.sum()) > trials:
        raise AnalysisError("pattern counts exceed the trial total")
    n = {(1, 1): 0, (1, 2): 0, (2, 1): 0, (2, 2): 0}
    heralds = 0
    double_blue = 0
    for (b1, b2, r1, r2), c in zip(PATTERNS, counts.tolist()):
        if b1 and b2:
            double_blue += c
            continue
        if b1 + b2 != 1:
            continue
        heralds += c
        if r1 + r2 == 1:
            n[(1 if b1 else 2, 1 if r1 else 2)] += c
    return CoincidenceTable(n[(1, 1)], n[(1, 2)], n[(2, 1)], n[(2, 2)],
                            heralds, trials, double_blue)


def count_clicks(records: Iterable[ClickRecord], trials: int) -> ClickTotals:
    """Any-click tallies per window, for cross-correlation and thermometry."""
    if trials < 0:
        raise AnalysisError(f"trials must be >= 0, got {trials}")
    b1 = b2 = r1 = r2 = blue = red = both = 0
    for rec in records:
        b1 += 1 in rec.blue_clicks
        b2 += 2 in rec.blue_clicks
        r1 += 1 in rec.red_clicks
        r2 += 2 in rec.red_clicks
        blue += bool(rec.blue_clicks)
        red += bool(rec.red_clicks)
        both += bool(rec.blue_clicks) and bool(rec.red_clicks)
    return ClickTotals(trials, b1, b2, r1, r2, blue, red, both)


def correlation_coefficient(table: CoincidenceTable) -> float:
    if table.coincidences == 0:
        raise AnalysisError("correlation undefined: no coincidences")
    return (table.same - table.diff) / table.coincidences


def chsh_point(e11: float, e12: float, e21: float, e22: float) -> float:
    for e in (e11, e12, e21, e22):
        if abs(e) > 1.0:
            raise AnalysisError(f"correlation {e} outside [-1, 1]")
    return abs(e11 + e12 + e21 - e22)


def _binomial_support(n: int, p: float) -> np.ndarray:
    if n <= EXHAUSTIVE_TRIALS:
        return np.arange(n + 1)
    sigma = np.sqrt(n * p * (1.0 - p))
    lo = max(0, int(np.floor(n * p - SUPPORT_SIGMA * sigma)))
    hi = min(n, int(np.ceil(n * p + SUPPORT_SIGMA * sigma)))
    return np.arange(lo, hi + 1)


def e_distribution(table: CoincidenceTable, n_points: int = E_GRID_POINTS) -> DistributionGrid:
    """Distribution of (X-Y)/(X+Y) for independent binomial X (same-detector
    coincidences) and Y (cross-detector), deposited on a grid over [-1, 1].

    Supports are exhaustive for small trial counts and truncated at 6 sigma
    otherwise; the X=Y=0 outcome is excluded and the grid renormalized.  Each
    probability atom is split linearly between the two bracketing grid points,
    which preserves the first moment and keeps mirror symmetry exact.
    """
    if table.trials <= 0:
        raise AnalysisError("trials must be positive")
    if table.coincidences == 0:
        raise AnalysisError("zero counts: correlation distribution undefined")
    n = table.trials
    step = 2.0 / (n_points - 1)
    values = np.zeros(n_points)
    xs = _binomial_support(n, table.same / n)
    ys = _binomial_support(n, table.diff / n)
    pmf_x = stats.binom.pmf(xs, n, table.same / n)
    pmf_y = stats.binom.pmf(ys, n, table.diff / n)
    for x, wx in zip(xs, pmf_x):
        total = x + ys
        live = total > 0
        e = (x - ys[live]) / total[live]
        c = (e + 1.0) / step
        idx = np.clip(np.floor(c).astype(np.int64), 0, n_points - 2)
        frac = c - idx
        mass = wx * pmf_y[live]
        values += np.bincount(idx, weights=mass * (1.0 - frac), minlength=n_points)
        values += np.bincount(idx + 1, weights=mass * frac, minlength=n_points)
    mass = values.sum()
    if mass <= 0.0:
        raise AnalysisError("all probability mass fell on X+Y=0")
    return DistributionGrid(-1.0, 1.0, values / mass)


def s_distribution(grids: Sequence[DistributionGrid],
                   signs: Sequence[int] = CHSH_SIGNS) -> DistributionGrid:
    """Convolve four correlation grids (signed) into the Bell-parameter grid."""
    if len(grids) != 4 or len(signs) != 4:
        raise AnalysisError("need exactly four grids and four signs")
    if any(s not in (-1, 1) for s in signs):
        raise AnalysisError(f"signs must be +-1, got {tuple(signs)}")
    shape = (grids[0].lo, grids[0].hi, grids[0].values.size)
    for g in grids[1:]:
        if (g.lo, g.hi, g.values.size) != shape:
            raise AnalysisError("grid mismatch: supports or sizes differ")
    if shape[0] != -shape[1]:
        raise AnalysisError("signed convolution needs symmetric supports")
    out = None
    for g, s in zip(grids, signs):
        v = g.values if s == 1 else g.values[::-1]
        out = v if out is None else np.convolve(out, v)
    return DistributionGrid(4.0 * shape[0], 4.0 * shape[1], out / out.sum())


def summarize_distribution(grid: DistributionGrid) -> DistributionSummary:
    """Expectation and the 16th/84th percentiles of a grid distribution."""
    x = grid.points
    expectation = float(x @ grid.values)
    cum = np.cumsum(grid.values)
    lo = x[int(np.searchsorted(cum, 0.16, side="left"))]
    hi = x[int(np.searchsorted(cum, 0.84, side="left"))]
    return DistributionSummary(expectation, float(lo), float(hi))


@dataclass(frozen=True)
class SettingSummary:
    table: CoincidenceTable
    e_point: float
    expectation: float
    ci_lo: float
    ci_hi: float


def bell_test(tables: Mapping[tuple, CoincidenceTable],
              n_points: int = E_GRID_POINTS) -> tuple[ChshResult, dict]:
    """Full CHSH pipeline over the four labeled settings.

    Returns the Bell-parameter result and a per-setting summary map.  The
    sigma violation divides the expectation's margin over the classical bound
    by the lower interval half-width.
    """
    labels = ((1, 1), (1, 2), (2, 1), (2, 2))
    missing = [lb for lb in labels if lb not in tables]
    if missing:
        raise AnalysisError(f"missing settings {missing}")
    settings = {}
    grids = []
    for lb in labels:
        table = tables[lb]
        grid = e_distribution(table, n_points)
        summary = summarize_distribution(grid)
        settings[lb] = SettingSummary(table, correlation_coefficient(table),
                                      summary.expectation, summary.ci_lo, summary.ci_hi)
        grids.append(grid)
    s_grid = s_distribution(grids)
    s_summary = summarize_distribution(s_grid)
    s_point = chsh_point(*(settings[lb].e_point for lb in labels))
    lower = s_summary.expectation - s_summary.ci_lo
    sigma = (s_summary.expectation - 2.0) / lower if lower > 0.0 else np.inf
    result = ChshResult(s_point, s_summary.expectation,
                        s_summary.ci_lo, s_summary.ci_hi, float(sigma))
    return result, settings


def cross_correlation(trials: int, c_b: int, c_r: int, coincidences: int) -> CrossCorrelation:
    """Normalized blue/red cross-correlation g2 = P(b and r)/(P(b) P(r))."""
    if trials <= 0:
        raise AnalysisError("trials must be positive")
    if c_b <= 0 or c_r <= 0:
        raise AnalysisError("cross-correlation needs nonzero singles in both windows")
    if coincidences < 0:
        raise AnalysisError("negative coincidence count")
    g2 = coincidences * trials / (c_b * c_r)
    return CrossCorrelation(float(g2), c_b, c_r, coincidences)


def predicted_visibility(g2: float) -> float:
    """Interference visibility (g2-1)/(g2+1) implied by a cross-correlation."""
    if g2 < 0.0:
        raise AnalysisError(f"g2 must be >= 0, got {g2}")
    if g2 < 1.0:
        warnings.warn(f"g2 = {g2} below 1 predicts no interference; clamping to 0",
                      stacklevel=2)
        return 0.0
    return (g2 - 1.0) / (g2 + 1.0)


def sideband_occupancy(c_b: int, c_r: int) -> float:
    """Thermal occupancy from matched blue/red sideband count rates."""
    if c_r < 0:
        raise AnalysisError(f"negative red counts {c_r}")
    if c_b <= c_r:
        raise AnalysisError(
            f"thermometry invalid: blue counts {c_b} must exceed red counts {c_r}")
    return c_r / (c_b - c_r)


def fit_visibility(points: Sequence[tuple], phi_b: float = 0.0) -> FitResult:
    """Weighted least-squares fit of E = V cos(phi_r + phi_b - phi0).

    Linear in (V cos phi0, V sin phi0); no constant offset term.  Requires at
    least four points whose phases span more than pi.
    """
    if len(points) < 4:
        raise AnalysisError(f"need at least 4 points, got {len(points)}")
    phi = np.array([p[0] for p in points], dtype=float)
    e = np.array([p[1] for p in points], dtype=float)
    sig = np.array([p[2] for p in points], dtype=float)
    if (sig <= 0.0).any():
        raise AnalysisError("uncertainties must be positive")
    if phi.max() - phi.min() <= np.pi:
        raise AnalysisError("phase values must span more than pi")
    arg = phi + phi_b
    design = np.column_stack([np.cos(arg), np.sin(arg)]) / sig[:, None]
    target = e / sig
    coef, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
    if rank < 2:
        raise AnalysisError("degenerate design matrix: phases do not resolve a phase offset")
    alpha, beta = coef
    v = float(np.hypot(alpha, beta))
    phi0 = float(np.arctan2(beta, alpha) % (2.0 * np.pi))
    residual = target - design @ coef
    cost = float(residual @ residual)
    scale = cost / (len(points) - 2)
    cov = np.linalg.inv(design.T @ design) * scale
    if v > 0.0:
        grad_v = np.array([alpha, beta]) / v
        grad_p = np.array([-beta, alpha]) / v**2
        sigma_v = float(np.sqrt(max(grad_v @ cov @ grad_v, 0.0)))
        sigma_p = float(np.sqrt(max(grad_p @ cov @ grad_p, 0.0)))
    else:
        sigma_v = float(np.sqrt(max(cov[0, 0], cov[1, 1])))
        sigma_p = np.inf
    return FitResult({"V": v, "phi0": phi0}, {"V": sigma_v, "phi0": sigma_p},
                     np.sqrt(cost), True, 1)


def _heating_design(t: np.ndarray, tau: float, eta: float, fit_offset: bool) -> np.ndarray:
    cols = [np.exp(-t / tau), -np.exp(-t / eta)]
    if fit_offset:
        cols.append(np.ones_like(t))
    return np.column_stack(cols)


def _heating_model(p: np.ndarray, t: np.ndarray, n_fixed) -> tuple[np.ndarray, np.ndarray]:
    a, b, tau, eta = p[0], p[1], np.exp(p[2]), np.exp(p[3])
    decay, rise = np.exp(-t / tau), np.exp(-t / eta)
    value = a * decay - b * rise + (p[4] if n_fixed is None else n_fixed)
    cols = [decay, -rise, a * decay * (t / tau), -b * rise * (t / eta)]
    if n_fixed is None:
        cols.append(np.ones_like(t))
    return value, np.column_stack(cols)


def fit_heating(points: Sequence[tuple], n_init_fixed=None) -> FitResult:
    """Gauss-Newton fit of a e^(-t/tau) - b e^(-t/eta) + n_init to occupancies.

    Lifetimes are optimized in log space with Levenberg-style damping and the
    tau > eta ordering is restored afterwards by the exact relabeling
    (a, b, tau, eta) -> (-b, -a, eta, tau).  Non-convergence within 200
    iterations returns the best iterate with converged=False.
    """
    if len(points) < 6:
        raise AnalysisError(f"need at least 6 points, got {len(points)}")
    t = np.array([p[0] for p in points], dtype=float)
    d = np.array([p[1] for p in points], dtype=float)
    sig = np.array([p[2] for p in points], dtype=float)
    if (t < 0.0).any():
        raise AnalysisError("pulse delays must be >= 0")
    if (sig <= 0.0).any():
        raise AnalysisError("uncertainties must be positive")
    nonzero = t[t > 0.0]
    if nonzero.size == 0 or t.max() < 3.0 * nonzero.min():
        raise AnalysisError("delays must span the rise and the decay "
                            "(max >= 3x the smallest nonzero delay)")
    if np.ptp(d) == 0.0 and n_init_fixed is None:
        raise AnalysisError("degenerate data: occupancy is constant")

    fit_offset = n_init_fixed is None
    target = d if fit_offset else d - n_init_fixed
    w = 1.0 / sig

    best = None
    for tau in np.geomspace(nonzero.min() / 2.0, 2.0 * t.max(), 7):
        for eta in np.geomspace(nonzero.min() / 2.0, 2.0 * t.max(), 7):
            if tau <= eta:
                continue
            design = _heating_design(t, tau, eta, fit_offset) * w[:, None]
            coef, _, _, _ = np.linalg.lstsq(design, target * w, rcond=None)
            r = design @ coef - target * w
            cost = r @ r
            if best is None or cost < best[0]:
                start = [coef[0], coef[1], np.log(tau), np.log(eta)]
                if fit_offset:
                    start.append(coef[2])
                best = (cost, np.array(start))
    p = best[1]

    def residual(p):
        value, jac = _heating_model(p, t, n_init_fixed)
        return (value - d) * w, jac * w[:, None]

    r, jac = residual(p)
    cost = float(r @ r)
    lam = 1e-3
    iterations = 0
    converged = False
    while iterations < 200:
        iterations += 1
        g = jac.T @ r
        h = jac.T @ jac
        damp = np.diag(h).copy()
        damp[damp <= 0.0] = 1.0
        stepped = False
        for _ in range(50):
            try:
                delta = np.linalg.solve(h + lam * np.diag(damp), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            r_new, jac_new = residual(p + delta)
            cost_new = float(r_new @ r_new)
            if cost_new <= cost:
                stepped = True
                break
            lam *= 10.0
        if not stepped:
            converged = True
            break
        p, r, jac = p + delta, r_new, jac_new
        lam = max(lam / 3.0, 1e-12)
        if cost - cost_new <= 1e-10 * max(cost_new, 1e-300):
            cost = cost_new
            converged = True
            break
        cost = cost_new

    a, b, tau, eta = p[0], p[1], float(np.exp(p[2])), float(np.exp(p[3]))
    n_init = float(p[4]) if fit_offset else float(n_init_fixed)
    dof = max(len(points) - len(p), 1)
    cov = np.linalg.pinv(jac.T @ jac) * (cost / dof)
    err = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    sigma = {"a": float(err[0]), "b": float(err[1]),
             "tau": tau * float(err[2]), "eta": eta * float(err[3]),
             "n_init": float(err[4]) if fit_offset else 0.0}
    if tau < eta:
        a, b, tau, eta = -b, -a, eta, tau
        sigma["a"], sigma["b"] = sigma["b"], sigma["a"]
        sigma["tau"], sigma["eta"] = sigma["eta"], sigma["tau"]
    params = {"a": float(a), "b": float(b), "tau": tau, "eta": eta, "n_init": n_init}
    return FitResult(params, sigma, float(np.sqrt(cost)), converged, iterations)


def write_counts(fh, tables: Mapping[tuple, CoincidenceTable]) -> None:
    """Write aggregated per-setting counts as an optobell-counts file."""
    fh.write(COUNTS_HEADER + "\n")
    for (i, j) in sorted(tables):
        tb = tables[(i, j)]
        fh.write(f"{i},{j},{tb.trials},{tb.heralds},"
                 f"{tb.n11},{tb.n12},{tb.n21},{tb.n22}\n")


def read_counts(fh) -> dict:
    """Parse an optobell-counts file into {(setting_i, setting_j): table}."""
    header = fh.readline().rstrip("\n")
    if header != COUNTS_HEADER:
        raise AnalysisError(f"expected header {COUNTS_HEADER!r}, got {header!r}")
    tables: dict = {}
    for lineno, raw in enumerate(fh, start=2):
        line = raw.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 8:
            raise AnalysisError(f"line {lineno}: expected 8 fields, got {len(parts)}")
        try:
            i, j, trials, heralds, n11, n12, n21, n22 = (int(x) for x in parts)
        except ValueError:
            raise AnalysisError(f"line {lineno}: non-integer field in {line!r}") from None
        if (i, j) in tables:
            raise AnalysisError(f"line {lineno}: duplicate setting ({i},{j})")
        tables[(i, j)] = CoincidenceTable(n11, n12, n21, n22, heralds, trials)
    if not tables:
        raise AnalysisError("counts file has no rows")
    return tables
