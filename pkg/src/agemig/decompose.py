"""Decomposing net migration into in- and out-rates.

In-rates track net inflow pressure: a country's in-rate is modeled as a
country-level intercept plus a common slope on the positive part of its net
rate, with independent noise,

    imr[i, t] = b0[i] + b1 * max(nmr[i, t], 0) + eps[i, t],

where the intercepts are exchangeable draws around a global mean
(between-country variance) and eps is within-country noise.  Out-rates
follow from the accounting identity omr = imr - nmr.  The model is fit by
restricted maximum likelihood, profiling out the variance ratio; country
intercepts are best linear unbiased predictions at the optimum.

Predicted in-rates are floored at zero, and whenever the predicted out-rate
would go negative both rates are repaired (omr = 0, imr = nmr) so the
identity survives every prediction.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .core import ConvergenceError, DomainError, RateKind, RatePanel

_LOG_LAMBDA_BOUNDS = (-30.0, 30.0)


@dataclass
class MixedEffectsFit:
    """Fitted decomposition model.

    Attributes
    ----------
    beta0, beta1 : float
        Global intercept and slope on max(nmr, 0).
    intercepts : dict[str, float]
        Country-level intercepts b0[i] (global + predicted deviation) for
        every country that entered the fit.
    sigma2_between, sigma2_within : float
        Variance components of the intercepts and of the noise.
    r2_imr, r2_omr : float
        Variance explained for observed in-rates and for the out-rates
        reconstructed from them.
    beta1_fixed : bool
        True when the slope was unidentifiable (no positive net rates) and
        was pinned at zero.
    """

    beta0: float
    beta1: float
    intercepts: dict[str, float]
    sigma2_between: float
    sigma2_within: float
    r2_imr: float
    r2_omr: float
    n_obs: int
    n_countries: int
    beta1_fixed: bool = False
    log_lambda: float = 0.0
    skipped_countries: tuple[str, ...] = ()

    def intercept(self, country: str) -> float:
        """Country intercept, falling back to the global mean for new countries."""
        return self.intercepts.get(country, self.beta0)

    def save_report(self, path) -> None:
        """Write the fit as a CSV: scalar header block, then country rows."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# beta0={self.beta0!r}\n")
            fh.write(f"# beta1={self.beta1!r}\n")
            fh.write(f"# sigma_between={float(np.sqrt(self.sigma2_between))!r}\n")
            fh.write(f"# sigma_within={float(np.sqrt(self.sigma2_within))!r}\n")
            fh.write(f"# r2_imr={self.r2_imr!r}\n")
            fh.write(f"# r2_omr={self.r2_omr!r}\n")
            fh.write(f"# n_obs={self.n_obs}\n")
            fh.write("country,intercept\n")
            for code in sorted(self.intercepts):
                fh.write(f"{code},{self.intercepts[code]!r}\n")


def _pair_observations(imr_panel: RatePanel, nmr_panel: RatePanel):
    """Collect (country index, x, y) triples where both panels are observed."""
    if imr_panel.countries != nmr_panel.countries:
        raise DomainError("in-rate and net-rate panels cover different countries")
    if imr_panel.periods.start_years != nmr_panel.periods.start_years:
        raise DomainError("in-rate and net-rate panels cover different periods")
    mask = ~(np.isnan(imr_panel.values) | np.isnan(nmr_panel.values))
    ci, ti = np.nonzero(mask)
    y = imr_panel.values[ci, ti]
    nmr = nmr_panel.values[ci, ti]
    x = np.maximum(nmr, 0.0)
    return ci, y, x, nmr


def fit_mixed_effects(imr_panel: RatePanel, nmr_panel: RatePanel) -> MixedEffectsFit:
    """Fit the random-intercept decomposition model by REML.

    Countries with fewer than two paired (imr, nmr) observations are
    dropped from the fit (their predictions fall back to the global
    intercept) and reported in ``skipped_countries``.

    Adding a constant to all in-rates shifts ``beta0`` by that constant and
    leaves ``beta1`` unchanged; refitting on the model's own fitted values
    approximately reproduces the coefficients (the non-negativity repair
    perturbs a few cells).
    """
    ci, y, x, nmr_obs = _pair_observations(imr_panel, nmr_panel)
    counts = np.bincount(ci, minlength=len(imr_panel.countries))
    keep = counts >= 2
    skipped = tuple(c for k, c in enumerate(imr_panel.countries) if counts[k] and not keep[k])
    if not np.any(keep):
        raise DomainError("no country has two or more paired observations")
    sel = keep[ci]
    ci, y, x, nmr_obs = ci[sel], y[sel], x[sel], nmr_obs[sel]
    # reindex to the fitted countries only
    fitted_codes = [c for k, c in enumerate(imr_panel.countries) if keep[k]]
    remap = np.cumsum(keep) - 1
    g = remap[ci]
    n = len(y)
    n_groups = len(fitted_codes)

    beta1_fixed = not np.any(x > 0)
    p = 1 if beta1_fixed else 2
    if beta1_fixed:
        warnings.warn("no positive net rates in the fit window; slope pinned at 0", stacklevel=2)

    # per-group sufficient statistics
    n_i = np.bincount(g, minlength=n_groups).astype(float)
    Sy = np.bincount(g, weights=y, minlength=n_groups)
    Sx = np.bincount(g, weights=x, minlength=n_groups)
    Sxx = np.bincount(g, weights=x * x, minlength=n_groups)
    Sxy = np.bincount(g, weights=x * y, minlength=n_groups)
    Syy = np.bincount(g, weights=y * y, minlength=n_groups)

    def gls_pieces(lam: float):
        """Normal equations and weighted sums for a given variance ratio."""
        gamma = lam / (1.0 + lam * n_i)
        if beta1_fixed:
            xtx = np.array([[np.sum(n_i - gamma * n_i**2)]])
            xty = np.array([np.sum(Sy - gamma * n_i * Sy)])
        else:
            a00 = np.sum(n_i - gamma * n_i**2)
            a01 = np.sum(Sx - gamma * n_i * Sx)
            a11 = np.sum(Sxx - gamma * Sx**2)
            xtx = np.array([[a00, a01], [a01, a11]])
            xty = np.array([np.sum(Sy - gamma * n_i * Sy), np.sum(Sxy - gamma * Sx * Sy)])
        yty = np.sum(Syy - gamma * Sy**2)
        beta = np.linalg.solve(xtx, xty)
        rss = float(yty - beta @ xty)
        return beta, max(rss, 1e-300), xtx

    def neg_restricted_loglik(log_lam: float) -> float:
        lam = np.exp(log_lam)
        _, rss, xtx = gls_pieces(lam)
        sign, logdet = np.linalg.slogdet(xtx)
        if sign <= 0:
            return np.inf
        return (n - p) * np.log(rss) + np.sum(np.log1p(lam * n_i)) + logdet

    def dcrit(log_lam: float) -> float:
        """Derivative of the criterion in log lambda, in closed form.

        Assembled from the same per-group sums as the criterion itself, so
        a sign query costs O(groups) and is stable near the optimum where
        the criterion value is too flat to compare.
        """
        lam = np.exp(log_lam)
        beta, rss, xtx = gls_pieces(lam)
        denom = 1.0 + lam * n_i
        e = 1.0 / denom**2
        b0 = beta[0]
        b1 = 0.0 if beta1_fixed else beta[1]
        su = Sy - b0 * n_i - b1 * Sx
        if beta1_fixed:
            quad = n_i**2 / xtx[0, 0]
        else:
            s_cols = np.stack([n_i, Sx], axis=1)
            quad = np.sum(s_cols * np.linalg.solve(xtx, s_cols.T).T, axis=1)
        d_lam = (-(n - p) * float(e @ su**2) / rss
                 + float(np.sum(n_i / denom))
                 - float(e @ quad))
        return lam * d_lam

    res = minimize_scalar(neg_restricted_loglik, bounds=_LOG_LAMBDA_BOUNDS, method="bounded",
                          options={"xatol": 1e-10})
    if not res.success:
        raise ConvergenceError(f"variance-ratio optimization failed: {res.message}")
    log_lam = float(res.x)
    # Polish by bisecting the derivative: the valley floor is flatter than
    # value comparisons can resolve, and downstream identity checks need the
    # optimizer's answer to be a smooth function of the inputs.
    lo = max(log_lam - 0.25, _LOG_LAMBDA_BOUNDS[0])
    hi = min(log_lam + 0.25, _LOG_LAMBDA_BOUNDS[1])
    if dcrit(lo) < 0.0 < dcrit(hi):
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if mid == lo or mid == hi:
                break
            if dcrit(mid) < 0.0:
                lo = mid
            else:
                hi = mid
        log_lam = 0.5 * (lo + hi)
    lam = float(np.exp(log_lam))
    beta, rss, _ = gls_pieces(lam)
    sigma2_within = rss / (n - p)
    sigma2_between = lam * sigma2_within

    beta0 = float(beta[0])
    beta1 = 0.0 if beta1_fixed else float(beta[1])

    # intercept predictions: shrunken group means of the fixed-effect residual
    resid_sum = Sy - beta0 * n_i - beta1 * Sx
    b_hat = lam * resid_sum / (1.0 + lam * n_i)
    intercepts = {code: float(beta0 + b_hat[k]) for k, code in enumerate(fitted_codes)}

    fitted = beta0 + b_hat[g] + beta1 * x
    r2_imr = _r_squared(y, fitted)
    # out-rates reconstructed through the identity share the in-rate residuals
    r2_omr = _r_squared(y - nmr_obs, fitted - nmr_obs)

    return MixedEffectsFit(
        beta0=beta0,
        beta1=beta1,
        intercepts=intercepts,
        sigma2_between=float(sigma2_between),
        sigma2_within=float(sigma2_within),
        r2_imr=r2_imr,
        r2_omr=r2_omr,
        n_obs=n,
        n_countries=n_groups,
        beta1_fixed=beta1_fixed,
        log_lambda=log_lam,
        skipped_countries=skipped,
    )


def _r_squared(observed: np.ndarray, fitted: np.ndarray) -> float:
    tss = float(np.sum((observed - observed.mean()) ** 2))
    if tss == 0:
        return 1.0
    return 1.0 - float(np.sum((observed - fitted) ** 2)) / tss


def split_rate(intercept: float, slope: float, nmr: float) -> tuple[float, float]:
    """Predict (imr, omr) from one net rate, repairing negative out-rates.

    The returned pair always satisfies imr - omr == nmr and both rates are
    non-negative.
    """
    imr = max(intercept + slope * max(nmr, 0.0), 0.0)
    omr = imr - nmr
    if omr < 0.0:
        return float(nmr), 0.0
    return float(imr), float(omr)


def predict_imr(fit: MixedEffectsFit, country: str, nmr: float) -> float:
    """Model in-rate for one country at one net rate, floored at zero."""
    return max(fit.intercept(country) + fit.beta1 * max(nmr, 0.0), 0.0)


def decompose_nmr(fit: MixedEffectsFit, nmr_panel: RatePanel) -> tuple[RatePanel, RatePanel]:
    """Split a net-rate panel into (imr, omr) panels via the fitted model.

    Missing net rates stay missing in both outputs.  Every populated cell
    satisfies the identity and non-negativity, via the repair rule.
    """
    imr_vals = np.full_like(nmr_panel.values, np.nan)
    omr_vals = np.full_like(nmr_panel.values, np.nan)
    for i, code in enumerate(nmr_panel.countries):
        b0 = fit.intercept(code)
        for t in range(len(nmr_panel.periods)):
            nmr = nmr_panel.values[i, t]
            if np.isnan(nmr):
                continue
            imr_vals[i, t], omr_vals[i, t] = split_rate(b0, fit.beta1, nmr)
    kind_imr = RateKind.IMR_STAR if nmr_panel.kind.standardized else RateKind.IMR
    kind_omr = RateKind.OMR_STAR if nmr_panel.kind.standardized else RateKind.OMR
    return (
        RatePanel(kind_imr, nmr_panel.countries, nmr_panel.periods, imr_vals),
        RatePanel(kind_omr, nmr_panel.countries, nmr_panel.periods, omr_vals),
    )
