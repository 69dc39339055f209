"""1D Gaussian-plus-uniform mixture over the ITD space: log-likelihood,
visual EM and the vision-guided EM fusion.

Posterior matrices are (observations, N + 1); the last column is the
uniform outlier component.
"""

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from av_geometry import MicPairConfig
from config import DEFAULT_MAX_ITER, DEFAULT_TOL
from errors import InvalidInputError, InvalidModelError
from log import logger

SUM_TOL = 1e-9
VARIANCE_FLOOR = 1e-12  # s^2
EMPTY_MASS = 1e-8
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class OutlierDomain:
    """Support [lo, hi] of the uniform outlier density."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi) and self.lo < self.hi):
            raise InvalidInputError(f"outlier domain needs lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def width(self) -> float:
        return self.hi - self.lo

    @property
    def center(self) -> float:
        return 0.5 * (self.lo + self.hi)

    @property
    def log_density(self) -> float:
        return -float(np.log(self.width))

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x >= self.lo) & (x <= self.hi)

    @classmethod
    def from_mic_config(cls, cfg: MicPairConfig, margin: float = 0.1) -> "OutlierDomain":
        """Corrected ITD range of direct-path sources, widened by margin * width."""
        ends = (cfg.c1 * -cfg.max_itd + cfg.c0, cfg.c1 * cfg.max_itd + cfg.c0)
        lo, hi = min(ends), max(ends)
        pad = margin * (hi - lo)
        return cls(lo - pad, hi + pad)


@dataclass(frozen=True)
class MixtureParams:
    """Weights (N + 1, outlier last), means (N) and standard deviations (N)."""

    weights: np.ndarray
    means: np.ndarray
    stddevs: np.ndarray
    domain: OutlierDomain

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float).ravel()
        means = np.asarray(self.means, dtype=float).ravel()
        stddevs = np.asarray(self.stddevs, dtype=float).ravel()
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stddevs", stddevs)

        if weights.size == 0:
            raise InvalidModelError("mixture needs at least the outlier weight")
        if means.size != weights.size - 1 or stddevs.size != means.size:
            raise InvalidModelError(
                f"shape mismatch: {weights.size} weights, {means.size} means, "
                f"{stddevs.size} stddevs"
            )
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > SUM_TOL:
            raise InvalidModelError(f"weights must be a probability vector, got {weights}")
        if np.any(~np.isfinite(stddevs)) or np.any(stddevs <= 0):
            raise InvalidModelError(f"stddevs must be > 0, got {stddevs}")
        if np.any(~np.isfinite(means)) or not np.all(self.domain.contains(means)):
            raise InvalidModelError(f"means must lie in the outlier domain, got {means}")

    @property
    def n_components(self) -> int:
        return int(self.means.size)

    @property
    def outlier_weight(self) -> float:
        return float(self.weights[-1])

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "stddevs": self.stddevs.tolist(),
            "domain": [self.domain.lo, self.domain.hi],
        }


@dataclass
class Posteriors:
    """Visual (M, N + 1) and auditory (K, N + 1) responsibilities."""

    visual: np.ndarray
    auditory: np.ndarray = field(default=None)

    def __post_init__(self):
        self.visual = np.asarray(self.visual, dtype=float)
        if self.auditory is None:
            self.auditory = np.zeros((0, self.visual.shape[1]))
        self.auditory = np.asarray(self.auditory, dtype=float)


def _as_observations(x) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("non-finite observations")
    return x


def _log_weighted_densities(x: np.ndarray, params: MixtureParams) -> np.ndarray:
    """log(pi_n) + log p(x | n) for every observation and component."""
    with np.errstate(divide="ignore"):
        log_weights = np.log(params.weights)
    z = (x[:, None] - params.means) / params.stddevs
    log_gauss = -0.5 * (z * z + LOG_2PI) - np.log(params.stddevs)
    log_uniform = np.where(params.domain.contains(x), params.domain.log_density, -np.inf)
    return np.column_stack([log_gauss, log_uniform]) + log_weights


def _posteriors(x: np.ndarray, params: MixtureParams) -> Tuple[np.ndarray, np.ndarray]:
    """Responsibilities and the per-observation log normaliser log p(x).

    Observations no component can explain go entirely to the outlier column
    and have a normaliser of -inf.
    """
    if x.size == 0:
        return np.zeros((0, params.n_components + 1)), np.zeros(0)

    log_joint = _log_weighted_densities(x, params)
    peak = log_joint.max(axis=1)
    unexplained = ~np.isfinite(peak)
    shift = np.where(unexplained, 0.0, peak)
    densities = np.exp(log_joint - shift[:, None])
    total = densities.sum(axis=1)

    with np.errstate(divide="ignore", invalid="ignore"):
        resp = densities / total[:, None]
        log_norm = np.log(total) + shift
    if np.any(unexplained):
        resp[unexplained] = 0.0
        resp[unexplained, -1] = 1.0
        log_norm[unexplained] = -np.inf
    return resp, log_norm


def log_likelihood(v_proj, a, params: MixtureParams) -> float:
    """Sum of log p(x; params) over projected visual and auditory observations."""
    if params is None or params.weights.size == 0:
        raise InvalidModelError("empty mixture")
    x = np.concatenate([_as_observations(v_proj), _as_observations(a)])
    if x.size == 0:
        return 0.0
    return float(np.sum(logsumexp(_log_weighted_densities(x, params), axis=1)))


def e_step(x, params: MixtureParams) -> np.ndarray:
    """Responsibilities of every component for every observation.

    Observations no component can explain go entirely to the outlier column.
    """
    resp, _ = _posteriors(_as_observations(x), params)
    return resp


def e_step_visual(v_proj, params: MixtureParams) -> np.ndarray:
    return e_step(v_proj, params)


def _from_moments(
    gamma: np.ndarray,
    means: np.ndarray,
    scatter: np.ndarray,
    n_obs: int,
    domain: OutlierDomain,
    previous: Optional[MixtureParams],
) -> MixtureParams:
    """Parameters from the per-column masses, the weighted means and the
    weighted scatter sum r * (x - mean)^2 of every Gaussian component."""
    n_components = gamma.size - 1
    # Empty component keeps its parameters until selection drops it
    empty = gamma[:-1] < EMPTY_MASS
    if previous is not None:
        fallback_means, fallback_vars = previous.means, previous.stddevs**2
    else:
        fallback_means = np.full(n_components, domain.center)
        fallback_vars = np.full(n_components, (domain.width / 4.0) ** 2)

    with np.errstate(divide="ignore", invalid="ignore"):
        variances = scatter / gamma[:-1]
    means = np.where(empty, fallback_means, means)
    variances = np.where(empty, fallback_vars, variances)

    weights = gamma / n_obs
    weights = weights / weights.sum()
    return MixtureParams(
        weights=weights,
        means=np.clip(means, domain.lo, domain.hi),
        stddevs=np.sqrt(np.maximum(variances, VARIANCE_FLOOR)),
        domain=domain,
    )


def _weighted_moments(x: np.ndarray, resp: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Column masses, weighted means and weighted scatter of x."""
    gamma = resp.sum(axis=0)
    gauss = resp[:, :-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        means = gauss.T @ x / gamma[:-1]
        scatter = np.einsum("in,in->n", gauss, (x[:, None] - means) ** 2)
    return gamma, means, scatter


def _m_step(
    x: np.ndarray,
    resp: np.ndarray,
    domain: OutlierDomain,
    previous: Optional[MixtureParams],
) -> MixtureParams:
    """Closed-form maximisation for pooled observations and responsibilities."""
    n_obs = resp.shape[0]
    if n_obs == 0:
        if previous is None:
            raise InvalidInputError("M-step needs observations or previous parameters")
        return previous
    gamma, means, scatter = _weighted_moments(x, resp)
    return _from_moments(gamma, means, scatter, n_obs, domain, previous)


def m_step_visual(
    v_proj,
    alpha,
    domain: OutlierDomain,
    previous: Optional[MixtureParams] = None,
) -> MixtureParams:
    """Weighted moments of the projected visual features.

    Args:
        v_proj: projected visual features (seconds)
        alpha: (M, N + 1) row-stochastic responsibilities
        domain: outlier domain of the resulting model
        previous: parameters kept for components with no mass
    """
    v_proj = _as_observations(v_proj)
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim != 2 or alpha.shape[0] != v_proj.size:
        raise InvalidInputError(f"alpha shape {alpha.shape} does not match {v_proj.size} observations")
    return _m_step(v_proj, alpha, domain, previous)


def em_visual(
    v_proj,
    init: MixtureParams,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    trace: Optional[List[float]] = None,
):
    """Standard EM on the projected visual features.

    Returns:
        (params, alpha); when trace is a list, the log-likelihood of the
        initial and of every updated model is appended to it.
    """
    v_proj = _as_observations(v_proj)
    params = init
    if v_proj.size == 0:
        return params, np.zeros((0, init.n_components + 1))

    alpha, log_norm = _posteriors(v_proj, params)
    loglik = float(np.sum(log_norm))
    if trace is not None:
        trace.append(loglik)

    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        params = _m_step(v_proj, alpha, params.domain, params)
        alpha, log_norm = _posteriors(v_proj, params)
        new_loglik = float(np.sum(log_norm))
        if trace is not None:
            trace.append(new_loglik)
        gain = new_loglik - loglik
        loglik = new_loglik
        if gain < tol:
            break

    logger.debug(f"em_visual N={params.n_components} converged in {n_iter} iterations")
    return params, alpha


class VisualMoments(NamedTuple):
    """What the fusion EM needs from the frozen visual posteriors.

    count is the number of visual features and mass the alpha mass of every
    column; mean and scatter are the alpha-weighted mean and sum of squared
    deviations of every Gaussian column. outlier_inside is the outlier mass
    of the features inside the outlier domain, outlier_outside flags outlier
    mass on features outside it.
    """

    count: int
    mass: np.ndarray
    mean: np.ndarray
    scatter: np.ndarray
    outlier_inside: float
    outlier_outside: bool

    @classmethod
    def from_posteriors(
        cls, v_proj: np.ndarray, alpha: np.ndarray, domain: OutlierDomain
    ) -> "VisualMoments":
        mass, mean, scatter = _weighted_moments(v_proj, alpha)
        empty = ~(mass[:-1] > 0)
        inside = domain.contains(v_proj)
        return cls(
            count=int(v_proj.size),
            mass=mass,
            mean=np.where(empty, 0.0, mean),
            scatter=np.where(empty, 0.0, scatter),
            outlier_inside=float(alpha[inside, -1].sum()),
            outlier_outside=bool(np.any(alpha[~inside, -1] > 0)),
        )

    def objective(self, params: MixtureParams) -> float:
        """Sum over features and columns of alpha * log(pi_n p(v | n))."""
        with np.errstate(divide="ignore"):
            log_weights = np.log(params.weights)
        mass = self.mass[:-1]
        variances = params.stddevs**2
        deviation = self.scatter + mass * (self.mean - params.means) ** 2
        with np.errstate(invalid="ignore"):
            gauss = np.where(
                mass > 0,
                mass * (log_weights[:-1] - np.log(params.stddevs) - 0.5 * LOG_2PI)
                - 0.5 * deviation / variances,
                0.0,
            )
        total = float(np.sum(gauss))
        if self.outlier_outside:
            return -np.inf
        if self.outlier_inside > 0:
            total += self.outlier_inside * (log_weights[-1] + params.domain.log_density)
        return total


def constrained_objective(v_proj, a, alpha, params: MixtureParams) -> float:
    """Objective increased by the vision-guided EM.

    The visual term is the expected complete-data log-likelihood under the
    frozen posteriors alpha; the auditory term is the plain log-likelihood.
    """
    v_proj = _as_observations(v_proj)
    alpha = np.asarray(alpha, dtype=float).reshape(-1, params.n_components + 1)
    if alpha.shape[0] != v_proj.size:
        raise InvalidInputError(
            f"alpha has {alpha.shape[0]} rows for {v_proj.size} visual observations"
        )
    visual = VisualMoments.from_posteriors(v_proj, alpha, params.domain).objective(params)
    return visual + log_likelihood([], a, params)


def _fusion_m_step(
    moments: VisualMoments,
    a: np.ndarray,
    beta: np.ndarray,
    previous: MixtureParams,
) -> MixtureParams:
    """Pooled M-step from the visual moments and the auditory posteriors."""
    n_obs = moments.count + a.size
    visual_mass = moments.mass[:-1]
    gamma = moments.mass + beta.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        means = (visual_mass * moments.mean + beta[:, :-1].T @ a) / gamma[:-1]
        scatter = (
            moments.scatter
            + visual_mass * (moments.mean - means) ** 2
            + np.einsum("kn,kn->n", beta[:, :-1], (a[:, None] - means) ** 2)
        )
    return _from_moments(gamma, means, scatter, n_obs, previous.domain, previous)


def em_fusion(
    v_proj,
    a,
    alpha_fixed,
    init: MixtureParams,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    trace: Optional[List[float]] = None,
):
    """Vision-guided EM: only the auditory posteriors are re-estimated.

    The M-step pools both modalities:
    pi_n = (sum alpha + sum beta) / (M + K), and the means and variances are
    the responsibility-weighted moments of the concatenated observations.
    The visual features enter only through their moments under alpha, so an
    iteration costs O(K N) once those are known.

    Returns:
        (params, Posteriors) with the visual block equal to alpha_fixed
    """
    v_proj = _as_observations(v_proj)
    a = _as_observations(a)
    n_cols = init.n_components + 1
    alpha = np.asarray(alpha_fixed, dtype=float).reshape(-1, n_cols)
    if alpha.shape[0] != v_proj.size:
        raise InvalidInputError(
            f"alpha has {alpha.shape[0]} rows for {v_proj.size} visual observations"
        )

    params = init
    if v_proj.size + a.size == 0:
        return params, Posteriors(alpha, np.zeros((0, n_cols)))

    moments = VisualMoments.from_posteriors(v_proj, alpha, params.domain)
    beta, log_norm = _posteriors(a, params)
    objective = moments.objective(params) + float(np.sum(log_norm))
    if trace is not None:
        trace.append(objective)

    for _ in range(max_iter):
        params = _fusion_m_step(moments, a, beta, params)
        beta, log_norm = _posteriors(a, params)
        new_objective = moments.objective(params) + float(np.sum(log_norm))
        if trace is not None:
            trace.append(new_objective)
        gain = new_objective - objective
        objective = new_objective
        if gain < tol:
            break

    return params, Posteriors(alpha, beta)
