"""Hierarchical Bayesian AR(1) model for standardized net migration rates.

Each country's standardized net rate follows a stationary first-order
autoregression around a country-specific level,

    y[i, t+1] = mu[i] + phi[i] * (y[i, t] - mu[i]) + eps,   eps ~ N(0, sigma[i]^2),

with partial pooling across countries: the levels mu[i] are normal around a
world mean mu0 with spread tau_mu, the persistence parameters phi[i] sit in
(0, 1) under a beta prior, and the innovation scales sigma[i] are half-normal
with a shared, learned scale.  Hyperprior settings are engineering defaults
chosen for weak information on the annual-per-thousand scale; they are not
calibrated to any published fit.

Sampling is Gibbs on the conjugate layers (mu[i], mu0, tau_mu^2 and the
shared sigma scale) and random-walk Metropolis on logit(phi[i]) and
log(sigma[i]), with per-country step sizes adapted during burn-in only.
Per-country proposal streams are seeded from the country code, so permuting
the input's country order permutes the posterior draws exactly; reductions
over countries always run in canonical (sorted) order.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import DomainError, RateKind, RatePanel
from .rng import chain_seed, country_chain_seed

_HYPER_STREAM = 0
_LOGIT_CLIP = 35.0


@dataclass(frozen=True)
class McmcConfig:
    """Sampler settings and prior hyperparameters.

    ``iterations`` counts total sweeps per chain, of which the first
    ``burn_in`` are discarded.  The seed is required: there is no wall-clock
    default anywhere in the engine.
    """

    seed: int
    chains: int = 2
    iterations: int = 2000
    burn_in: int = 1000
    thin: int = 1
    # priors (weakly informative defaults, not from any published fit)
    mu0_mean: float = 0.0
    mu0_sd: float = 10.0
    tau2_shape: float = 2.0
    tau2_scale: float = 4.0
    phi_a: float = 2.0
    phi_b: float = 2.0
    sigma_scale_shape: float = 2.0
    sigma_scale_scale: float = 2.0
    sigma_floor: float = 1e-8
    adapt_window: int = 50
    target_accept: float = 0.44
    progress: bool = False

    def __post_init__(self) -> None:
        if self.iterations <= self.burn_in:
            raise DomainError("iterations must exceed burn_in")
        if self.burn_in < 0 or self.thin < 1 or self.chains < 1:
            raise DomainError("chains >= 1, burn_in >= 0 and thin >= 1 required")

    @property
    def kept_per_chain(self) -> int:
        return (self.iterations - self.burn_in + self.thin - 1) // self.thin


@dataclass(frozen=True)
class HierarchicalAr1:
    """One full parameter draw of the hierarchy."""

    countries: tuple[str, ...]
    mu: np.ndarray
    phi: np.ndarray
    sigma: np.ndarray
    mu0: float
    tau_mu: float
    sigma_scale: float

    def __post_init__(self) -> None:
        for name, arr in (("mu", self.mu), ("phi", self.phi), ("sigma", self.sigma)):
            if np.asarray(arr).shape != (len(self.countries),):
                raise DomainError(f"{name} must have one entry per country")
        if not np.all((self.phi > 0.0) & (self.phi < 1.0)):
            raise DomainError("phi must lie strictly inside (0, 1)")
        if not np.all(self.sigma > 0.0):
            raise DomainError("sigma must be positive")
        if self.tau_mu <= 0 or self.sigma_scale <= 0:
            raise DomainError("scale hyperparameters must be positive")

    def country_index(self, code: str) -> int:
        try:
            return self.countries.index(code)
        except ValueError:
            raise DomainError(f"unknown country {code!r}") from None


class PosteriorSample:
    """Pooled post-burn-in draws from all chains plus diagnostics."""

    def __init__(self, countries, mu, phi, sigma, mu0, tau_mu, sigma_scale,
                 seed: int, config: McmcConfig, diagnostics: dict) -> None:
        self.countries = tuple(countries)
        self.mu = np.asarray(mu)
        self.phi = np.asarray(phi)
        self.sigma = np.asarray(sigma)
        self.mu0 = np.asarray(mu0)
        self.tau_mu = np.asarray(tau_mu)
        self.sigma_scale = np.asarray(sigma_scale)
        self.seed = int(seed)
        self.config = config
        self.diagnostics = diagnostics
        J, C = self.mu.shape
        if C != len(self.countries) or self.phi.shape != (J, C) or self.sigma.shape != (J, C):
            raise DomainError("draw arrays shaped inconsistently")
        if not np.all((self.phi > 0.0) & (self.phi < 1.0)):
            raise DomainError("phi draws must lie strictly inside (0, 1)")
        if not np.all(self.sigma > 0.0):
            raise DomainError("sigma draws must be positive")

    @property
    def n_draws(self) -> int:
        return self.mu.shape[0]

    def country_index(self, code: str) -> int:
        try:
            return self.countries.index(code)
        except ValueError:
            raise DomainError(f"unknown country {code!r}") from None

    def draw(self, j: int) -> HierarchicalAr1:
        return HierarchicalAr1(
            countries=self.countries,
            mu=self.mu[j],
            phi=self.phi[j],
            sigma=self.sigma[j],
            mu0=float(self.mu0[j]),
            tau_mu=float(self.tau_mu[j]),
            sigma_scale=float(self.sigma_scale[j]),
        )

    def to_frame(self):
        """Long-format draws: (parameter, country, draw, value)."""
        import pandas as pd

        rows = []
        J = self.n_draws
        for name, arr in (("mu", self.mu), ("phi", self.phi), ("sigma", self.sigma)):
            for k, code in enumerate(self.countries):
                rows.append(pd.DataFrame({
                    "parameter": name, "country": code,
                    "draw": np.arange(J), "value": arr[:, k],
                }))
        for name, arr in (("mu0", self.mu0), ("tau_mu", self.tau_mu),
                          ("sigma_scale", self.sigma_scale)):
            rows.append(pd.DataFrame({
                "parameter": name, "country": "", "draw": np.arange(J), "value": arr,
            }))
        return pd.concat(rows, ignore_index=True)


def split_rhat(chains_draws: np.ndarray) -> float:
    """Potential scale reduction with each chain split in half."""
    chains_draws = np.asarray(chains_draws, dtype=float)
    n_chains, n_iter = chains_draws.shape
    half = n_iter // 2
    if half < 2:
        return float("nan")
    halves = np.concatenate([chains_draws[:, :half], chains_draws[:, half:2 * half]], axis=0)
    m, n = halves.shape
    within = halves.var(axis=1, ddof=1).mean()
    between = n * halves.mean(axis=1).var(ddof=1)
    if within == 0.0:
        return 1.0 if between == 0.0 else float("inf")
    var_plus = (n - 1) / n * within + between / n
    return float(np.sqrt(var_plus / within))


def _transition_pairs(values: np.ndarray):
    """Flat arrays of consecutive observed (prev, curr) pairs per country."""
    observed = ~np.isnan(values)
    pair_mask = observed[:, :-1] & observed[:, 1:]
    gi, ti = np.nonzero(pair_mask)
    return gi, values[gi, ti], values[gi, ti + 1]


def fit_mcmc(panel: RatePanel, config: McmcConfig) -> PosteriorSample:
    """Sample the hierarchy's posterior given a net-rate panel.

    Every country needs at least three observed periods.  Chains run
    sequentially; draws from all chains are pooled in chain order.  A
    split-Rhat above 1.2 on any hyperparameter is reported as a warning,
    not an error.
    """
    if not panel.kind.signed:
        raise DomainError(f"expected a net-rate panel, got {panel.kind.value}")
    codes = panel.countries
    values = panel.values
    obs_count = (~np.isnan(values)).sum(axis=1)
    short = [c for c, n in zip(codes, obs_count) if n < 3]
    if short:
        raise DomainError(f"countries with fewer than 3 observed periods: {short}")

    gi, y_prev, y_curr = _transition_pairs(values)
    C = len(codes)
    m_i = np.bincount(gi, minlength=C).astype(float)
    if np.any(m_i < 2):
        bad = [codes[k] for k in np.nonzero(m_i < 2)[0]]
        raise DomainError(f"countries with fewer than 2 consecutive transitions: {bad}")

    cfg = config
    kept = cfg.kept_per_chain
    J = kept * cfg.chains
    mu_draws = np.empty((cfg.chains, kept, C))
    phi_draws = np.empty((cfg.chains, kept, C))
    sigma_draws = np.empty((cfg.chains, kept, C))
    mu0_draws = np.empty((cfg.chains, kept))
    tau_draws = np.empty((cfg.chains, kept))
    scale_draws = np.empty((cfg.chains, kept))
    accept_phi = np.zeros(C)
    accept_sigma = np.zeros(C)

    # country means / diff spreads for initialization
    init_mu = np.array([np.nanmean(values[k]) for k in range(C)])
    init_sigma = np.empty(C)
    for k in range(C):
        series = values[k][~np.isnan(values[k])]
        d = np.diff(series)
        init_sigma[k] = max(float(np.std(d)) if d.size else 1.0, 0.1)

    for chain in range(cfg.chains):
        hyper_rng = np.random.Generator(np.random.PCG64(chain_seed(cfg.seed, chain, _HYPER_STREAM)))
        normals = np.empty((C, cfg.iterations, 3))
        uniforms = np.empty((C, cfg.iterations, 2))
        for k, code in enumerate(codes):
            g = np.random.Generator(np.random.PCG64(country_chain_seed(cfg.seed, chain, code)))
            normals[k] = g.standard_normal((cfg.iterations, 3))
            uniforms[k] = g.random((cfg.iterations, 2))

        mu = init_mu.copy()
        phi = np.full(C, 0.5)
        sigma = init_sigma.copy()
        mu0 = float(np.mean(mu))
        tau2 = float(np.var(mu)) + 1e-2
        s2 = float(np.mean(sigma**2))
        step_phi = np.full(C, 0.5)
        step_sigma = np.full(C, 0.3)
        win_acc_phi = np.zeros(C)
        win_acc_sigma = np.zeros(C)

        for it in range(cfg.iterations):
            # --- mu[i]: conjugate normal given phi, sigma and the hyper layer
            c1 = 1.0 - phi
            z_sum = np.bincount(gi, weights=y_curr - phi[gi] * y_prev, minlength=C)
            prec = m_i * c1**2 / sigma**2 + 1.0 / tau2
            mean = (c1 * z_sum / sigma**2 + mu0 / tau2) / prec
            mu = mean + normals[:, it, 0] / np.sqrt(prec)

            # sufficient statistics of the AR residual in (phi, sigma)
            a = y_curr - mu[gi]
            b = y_prev - mu[gi]
            Saa = np.bincount(gi, weights=a * a, minlength=C)
            Sab = np.bincount(gi, weights=a * b, minlength=C)
            Sbb = np.bincount(gi, weights=b * b, minlength=C)

            # --- phi[i]: random walk on the logit scale
            u = np.log(phi) - np.log1p(-phi)
            u_new = np.clip(u + step_phi * normals[:, it, 1], -_LOGIT_CLIP, _LOGIT_CLIP)
            phi_new = 1.0 / (1.0 + np.exp(-u_new))
            sse_old = Saa - 2 * phi * Sab + phi**2 * Sbb
            sse_new = Saa - 2 * phi_new * Sab + phi_new**2 * Sbb
            log_ratio = (sse_old - sse_new) / (2 * sigma**2)
            # beta prior exponents plus the logit jacobian
            log_ratio += cfg.phi_a * (-np.logaddexp(0, -u_new) + np.logaddexp(0, -u))
            log_ratio += cfg.phi_b * (-np.logaddexp(0, u_new) + np.logaddexp(0, u))
            acc = np.log(uniforms[:, it, 0]) < log_ratio
            phi = np.where(acc, phi_new, phi)
            win_acc_phi += acc
            if it >= cfg.burn_in:
                accept_phi += acc

            # --- sigma[i]: random walk on the log scale
            sse = Saa - 2 * phi * Sab + phi**2 * Sbb
            t_old = np.log(sigma)
            t_new = t_old + step_sigma * normals[:, it, 2]
            sigma_new = np.exp(t_new)
            ok = sigma_new >= cfg.sigma_floor
            log_ratio = (-m_i * t_new - sse / (2 * sigma_new**2)) \
                - (-m_i * t_old - sse / (2 * sigma**2))
            log_ratio += -(sigma_new**2 - sigma**2) / (2 * s2)
            log_ratio += t_new - t_old
            acc = ok & (np.log(uniforms[:, it, 1]) < log_ratio)
            sigma = np.where(acc, sigma_new, sigma)
            win_acc_sigma += acc
            if it >= cfg.burn_in:
                accept_sigma += acc

            # --- hyper layer: all conjugate
            prec0 = C / tau2 + 1.0 / cfg.mu0_sd**2
            mean0 = (np.sum(mu) / tau2 + cfg.mu0_mean / cfg.mu0_sd**2) / prec0
            mu0 = float(mean0 + hyper_rng.standard_normal() / np.sqrt(prec0))
            tau2 = float((cfg.tau2_scale + 0.5 * np.sum((mu - mu0) ** 2))
                         / hyper_rng.gamma(cfg.tau2_shape + C / 2))
            s2 = float((cfg.sigma_scale_scale + 0.5 * np.sum(sigma**2))
                       / hyper_rng.gamma(cfg.sigma_scale_shape + C / 2))

            if it < cfg.burn_in and (it + 1) % cfg.adapt_window == 0:
                rate_phi = win_acc_phi / cfg.adapt_window
                rate_sigma = win_acc_sigma / cfg.adapt_window
                step_phi = np.clip(step_phi * np.exp(rate_phi - cfg.target_accept), 1e-3, 10.0)
                step_sigma = np.clip(step_sigma * np.exp(rate_sigma - cfg.target_accept), 1e-3, 10.0)
                win_acc_phi[:] = 0.0
                win_acc_sigma[:] = 0.0

            if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
                k = (it - cfg.burn_in) // cfg.thin
                mu_draws[chain, k] = mu
                phi_draws[chain, k] = phi
                sigma_draws[chain, k] = sigma
                mu0_draws[chain, k] = mu0
                tau_draws[chain, k] = np.sqrt(tau2)
                scale_draws[chain, k] = np.sqrt(s2)

            if cfg.progress and (it + 1) % 500 == 0:
                print(f"chain {chain + 1}/{cfg.chains}: iteration {it + 1}/{cfg.iterations}")

    post_iters = cfg.iterations - cfg.burn_in
    rhat = {
        "mu0": split_rhat(mu0_draws),
        "tau_mu": split_rhat(tau_draws),
        "sigma_scale": split_rhat(scale_draws),
        "mu": np.array([split_rhat(mu_draws[:, :, k]) for k in range(C)]),
        "phi": np.array([split_rhat(phi_draws[:, :, k]) for k in range(C)]),
        "sigma": np.array([split_rhat(sigma_draws[:, :, k]) for k in range(C)]),
    }
    warn_list = []
    for name in ("mu0", "tau_mu", "sigma_scale"):
        if np.isfinite(rhat[name]) and rhat[name] > 1.2:
            warn_list.append(f"split-Rhat {rhat[name]:.3f} on {name} exceeds 1.2")
    for name in ("mu", "phi", "sigma"):
        worst = np.nanmax(rhat[name]) if len(rhat[name]) else np.nan
        if np.isfinite(worst) and worst > 1.2:
            k = int(np.nanargmax(rhat[name]))
            warn_list.append(f"split-Rhat {worst:.3f} on {name}[{codes[k]}] exceeds 1.2")
    for msg in warn_list:
        warnings.warn(msg, stacklevel=2)

    diagnostics = {
        "rhat": rhat,
        "accept_phi": accept_phi / (cfg.chains * post_iters),
        "accept_sigma": accept_sigma / (cfg.chains * post_iters),
        "warnings": warn_list,
    }
    return PosteriorSample(
        countries=codes,
        mu=mu_draws.reshape(J, C),
        phi=phi_draws.reshape(J, C),
        sigma=sigma_draws.reshape(J, C),
        mu0=mu0_draws.reshape(J),
        tau_mu=tau_draws.reshape(J),
        sigma_scale=scale_draws.reshape(J),
        seed=cfg.seed,
        config=cfg,
        diagnostics=diagnostics,
    )


def draw_next_rate(params: HierarchicalAr1, country: str, current: float,
                   rng: np.random.Generator) -> float:
    """One-period-ahead draw of the standardized net rate for one country."""
    i = params.country_index(country)
    eps = rng.standard_normal()
    return float(params.mu[i] + params.phi[i] * (current - params.mu[i]) + params.sigma[i] * eps)


def forecast_variance(phi: float, sigma: float, horizon: int) -> float:
    """Closed-form h-step-ahead forecast variance of the AR(1)."""
    if horizon < 1:
        raise DomainError("horizon must be at least 1")
    return sigma**2 * (1.0 - phi ** (2 * horizon)) / (1.0 - phi**2)
