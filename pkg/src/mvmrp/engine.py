"""Coordinate-ascent variational inference for the Poisson general-design model.

The model is ``y_i ~ Poisson(exp(psi_i))`` with
``psi = X beta + sum_j Z_j alpha_j + sum_k F_k gamma_k``, flat priors on
``beta`` and on the sum-to-zero constrained ``gamma_k``, ``alpha_j | Sigma_j``
normal with covariance ``I (x) Sigma_j`` and ``Sigma_j`` inverse-Wishart.

``q`` factorizes into a Gaussian on ``beta``, block-diagonal Gaussians on each
``alpha_j``, inverse-Wishart factors on each ``Sigma_j`` and constrained
Gaussians on each ``gamma_k``.  Gaussian factors are updated by
non-conjugate message passing through the weights
``w_i = E_q[exp(psi_i)] = exp(E[psi_i] + Var[psi_i] / 2)``, which are kept in
log space and incremented after every block.
"""
import json
import logging
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.special import digamma, gammaln, multigammaln

from .constrained import ConstrainedGaussianFast, uncorrected_log_pdet, update_fast
from .design import DesignSet, ModelEncoding
from .errors import NumericalError

logger = logging.getLogger(__name__)

STATE_FORMAT_VERSION = 1
INITIAL_VARIANCE = 1e-2
_LOG_2PI = np.log(2 * np.pi)


class ConvergenceMetric(Enum):
    ELBO = "elbo"
    PARAMS = "params"

    @classmethod
    def from_string(cls, value: str) -> "ConvergenceMetric":
        try:
            return cls(value.lower())
        except ValueError:
            raise ValueError(f"Unsupported convergence metric: {value}")


@dataclass
class SolverConfig:
    max_iter: int = 500
    elbo_rel_tol: float = 1e-8
    max_halvings: int = 10
    block_tolerance: float = 1e-10
    prior_df: Optional[float] = None
    prior_scale: float = 1.0
    term_priors: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    metric: ConvergenceMetric = ConvergenceMetric.ELBO
    corrected_fe_entropy: bool = True
    max_exhausted_sweeps: int = 5

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not self.elbo_rel_tol > 0 or not self.block_tolerance > 0:
            raise ValueError("tolerances must be positive")
        if self.max_halvings < 0:
            raise ValueError("max_halvings must be non-negative")
        if isinstance(self.metric, str):
            self.metric = ConvergenceMetric.from_string(self.metric)

    def prior_for(self, label: str, d: int) -> Tuple[float, np.ndarray]:
        """Inverse-Wishart prior ``(nu, Phi)`` for a random-effect term; default ``(d + 1, I)``."""
        if label in self.term_priors:
            nu, scale = self.term_priors[label]
        else:
            nu = self.prior_df if self.prior_df is not None else d + 1.0
            scale = self.prior_scale
        if nu <= d - 1:
            raise ValueError(f"prior degrees of freedom {nu} must exceed {d - 1} for {label}")
        if scale <= 0:
            raise ValueError(f"prior scale must be positive for {label}")
        return float(nu), scale * np.eye(d)


@dataclass(frozen=True, eq=False)
class GaussianFactor:
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True, eq=False)
class BlockGaussianFactor:
    """``g`` independent ``d``-dimensional Gaussians: ``mean`` is (g, d), ``cov`` is (g, d, d)."""
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True, eq=False)
class InverseWishartFactor:
    nu: float
    phi: np.ndarray
    prior_nu: float
    prior_phi: np.ndarray

    @property
    def d(self) -> int:
        return self.phi.shape[0]

    @property
    def expected_precision(self) -> np.ndarray:
        """``E[Sigma^-1] = nu Phi^-1``."""
        inv = linalg.inv(self.phi)
        return self.nu * 0.5 * (inv + inv.T)

    @property
    def expected_logdet(self) -> float:
        """``E[ln|Sigma|]``."""
        d = self.d
        _, logdet = np.linalg.slogdet(self.phi)
        return float(logdet - d * np.log(2.0) - digamma((self.nu + 1 - np.arange(1, d + 1)) / 2.0).sum())

    @property
    def expected_cov(self) -> np.ndarray:
        """``E[Sigma]``, or the mode where the mean does not exist."""
        d = self.d
        if self.nu > d + 1:
            return self.phi / (self.nu - d - 1)
        return self.phi / (self.nu + d + 1)


@dataclass(frozen=True, eq=False)
class VariationalState:
    encoding: ModelEncoding
    beta: GaussianFactor
    alphas: Tuple[BlockGaussianFactor, ...]
    sigmas: Tuple[InverseWishartFactor, ...]
    gammas: Tuple[ConstrainedGaussianFast, ...] = ()
    elbo_trace: Tuple[float, ...] = ()
    converged: bool = False
    iterations: int = 0
    damping_events: int = 0
    exhausted_blocks: int = 0
    wall_time: float = 0.0

    @property
    def elbo(self) -> float:
        return self.elbo_trace[-1] if self.elbo_trace else float("nan")


@dataclass(frozen=True, eq=False)
class PoissonWeights:
    """``log_w`` and the mean linear predictor ``eta`` per augmented row."""
    log_w: np.ndarray
    eta: np.ndarray

    @property
    def w(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(self.log_w)

    def shifted(self, dmean: np.ndarray, dvar: np.ndarray) -> "PoissonWeights":
        return PoissonWeights(self.log_w + dmean + 0.5 * dvar, self.eta + dmean)


def _beta_moments(X, factor: GaussianFactor) -> Tuple[np.ndarray, np.ndarray]:
    if X.shape[1] == 0:
        return np.zeros(X.shape[0]), np.zeros(X.shape[0])
    mean = X @ factor.mean
    var = np.asarray(X.multiply(X @ factor.cov).sum(axis=1)).ravel()
    return mean, var


def _alpha_moments(block, factor: BlockGaussianFactor) -> Tuple[np.ndarray, np.ndarray]:
    n = len(block.levels)
    mean, var = np.zeros(n), np.zeros(n)
    seen = block.levels >= 0
    levels, basis = block.levels[seen], block.basis[seen]
    mean[seen] = np.einsum("nd,nd->n", basis, factor.mean[levels])
    var[seen] = np.einsum("nd,nde,ne->n", basis, factor.cov[levels], basis)
    return mean, var


def _gamma_moments(block, factor: ConstrainedGaussianFast) -> Tuple[np.ndarray, np.ndarray]:
    return factor.mean[block.index], factor.var[block.index]


def predictor_moments(state: VariationalState, designs: DesignSet,
                      include_fe: bool = True) -> List[Tuple[str, np.ndarray, np.ndarray]]:
    """Per-block ``(label, mean, variance)`` of each row's linear predictor contribution."""
    parts = [("beta", *_beta_moments(designs.X, state.beta))]
    for block, factor in zip(designs.re_blocks, state.alphas):
        parts.append((block.term.label, *_alpha_moments(block, factor)))
    if include_fe:
        for block, factor in zip(designs.fe_blocks, state.gammas):
            parts.append((f"v_fe({block.variable})", *_gamma_moments(block, factor)))
    return parts


def compute_weights(state: VariationalState, designs: DesignSet) -> PoissonWeights:
    """Fresh ``log w = E[psi] + Var[psi] / 2`` for every row."""
    parts = predictor_moments(state, designs)
    eta = np.sum([mean for _, mean, _ in parts], axis=0)
    log_w = eta + 0.5 * np.sum([var for _, _, var in parts], axis=0)
    bad = ~np.isfinite(log_w)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        contributions = [abs(mean[row] + 0.5 * var[row]) for _, mean, var in parts]
        label = parts[int(np.nanargmax(contributions))][0]
        raise NumericalError(f"non-finite weight at row {row}; dominated by block {label}")
    return PoissonWeights(log_w=log_w, eta=eta)


def update_beta(state: VariationalState, designs: DesignSet, weights: PoissonWeights, y: np.ndarray,
                step: float = 1.0) -> Tuple[VariationalState, PoissonWeights]:
    """``Lambda* = (X'WX)^-1``, ``mu* = mu + Lambda* X'(y - w)``, damped in natural parameters."""
    X = designs.X
    if X.shape[1] == 0:
        return state, weights
    old = state.beta
    w = weights.w
    XtWX = (X.T @ X.multiply(w[:, None])).toarray()
    p = XtWX.shape[0]
    precision_new = XtWX
    shift_new = XtWX @ old.mean + X.T @ (y - w)
    if step < 1.0:
        precision_old = linalg.cho_solve(linalg.cho_factor(old.cov), np.eye(p))
        precision = (1 - step) * precision_old + step * precision_new
        shift = (1 - step) * precision_old @ old.mean + step * shift_new
    else:
        precision, shift = precision_new, shift_new
    try:
        factor = linalg.cho_factor(precision)
    except linalg.LinAlgError:
        raise NumericalError("X'WX is singular; run check_rank on the fixed-effect design")
    cov = linalg.cho_solve(factor, np.eye(p))
    cov = 0.5 * (cov + cov.T)
    mean = cov @ shift

    dmean = X @ (mean - old.mean)
    dvar = np.asarray(X.multiply(X @ (cov - old.cov)).sum(axis=1)).ravel()
    return replace(state, beta=GaussianFactor(mean, cov)), weights.shifted(dmean, dvar)


def _level_sums(levels: np.ndarray, values: np.ndarray, g: int) -> np.ndarray:
    return np.bincount(levels, weights=values, minlength=g)


def update_alpha(state: VariationalState, designs: DesignSet, weights: PoissonWeights, y: np.ndarray, j: int,
                 step: float = 1.0) -> Tuple[VariationalState, PoissonWeights]:
    """Per-level ``d_j x d_j`` solves of ``(Z'WZ + I (x) E[Sigma^-1])``."""
    block = designs.re_blocks[j]
    old = state.alphas[j]
    prior_precision = state.sigmas[j].expected_precision
    g, d = block.g, block.d

    seen = block.levels >= 0
    levels, basis = block.levels[seen], block.basis[seen]
    w = weights.w[seen]
    residual = (y - weights.w)[seen]

    ZWZ = np.zeros((g, d, d))
    for a in range(d):
        for c in range(a, d):
            ZWZ[:, a, c] = ZWZ[:, c, a] = _level_sums(levels, w * basis[:, a] * basis[:, c], g)
    Zr = np.column_stack([_level_sums(levels, residual * basis[:, a], g) for a in range(d)])

    precision_new = ZWZ + prior_precision
    shift_new = np.einsum("gab,gb->ga", ZWZ, old.mean) + Zr
    if step < 1.0:
        precision_old = np.linalg.inv(old.cov)
        precision = (1 - step) * precision_old + step * precision_new
        shift = (1 - step) * np.einsum("gab,gb->ga", precision_old, old.mean) + step * shift_new
    else:
        precision, shift = precision_new, shift_new
    try:
        np.linalg.cholesky(precision)
    except np.linalg.LinAlgError:
        raise NumericalError(f"precision of {block.term.label} is not positive definite")
    cov = np.linalg.inv(precision)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    mean = np.einsum("gab,gb->ga", cov, shift)

    new = BlockGaussianFactor(mean, cov)
    old_mean, old_var = _alpha_moments(block, old)
    new_mean, new_var = _alpha_moments(block, new)
    alphas = state.alphas[:j] + (new,) + state.alphas[j + 1:]
    return replace(state, alphas=alphas), weights.shifted(new_mean - old_mean, new_var - old_var)


def update_sigma(state: VariationalState, j: int) -> VariationalState:
    """Conjugate update ``nu* = nu + g``, ``Phi* = Phi + sum_g (mu mu' + Lambda_g)``."""
    factor = state.alphas[j]
    sigma = state.sigmas[j]
    g = factor.mean.shape[0]
    phi = sigma.prior_phi + factor.mean.T @ factor.mean + factor.cov.sum(axis=0)
    new = replace(sigma, nu=sigma.prior_nu + g, phi=0.5 * (phi + phi.T))
    return replace(state, sigmas=state.sigmas[:j] + (new,) + state.sigmas[j + 1:])


def update_gamma(state: VariationalState, designs: DesignSet, weights: PoissonWeights, y: np.ndarray, k: int,
                 step: float = 1.0) -> Tuple[VariationalState, PoissonWeights]:
    """Constrained update with the NCVMP surrogate: ``d`` = per-level ``sum w``, ``X'v = d mu + F'(y - w)``."""
    block = designs.fe_blocks[k]
    old = state.gammas[k]
    w = weights.w
    d_new = _level_sums(block.index, w, block.size)
    xtv_new = d_new * old.mean + _level_sums(block.index, y - w, block.size)
    if step < 1.0:
        d = (1 - step) * old.d + step * d_new
        xtv = (1 - step) * old.d * old.mean + step * xtv_new
    else:
        d, xtv = d_new, xtv_new
    new = update_fast(d, xtv, block.level_names)
    dmean = (new.mean - old.mean)[block.index]
    dvar = (new.var - old.var)[block.index]
    gammas = state.gammas[:k] + (new,) + state.gammas[k + 1:]
    return replace(state, gammas=gammas), weights.shifted(dmean, dvar)


def _gaussian_entropy(logdet: float, dim: int) -> float:
    return 0.5 * logdet + 0.5 * dim * (1.0 + _LOG_2PI)


def _iw_expected_log_density(nu: float, phi: np.ndarray, q: InverseWishartFactor) -> float:
    """``E_q[ln IW(Sigma; nu, phi)]``."""
    d = q.d
    _, logdet_phi = np.linalg.slogdet(phi)
    return float(
        0.5 * nu * logdet_phi
        - 0.5 * nu * d * np.log(2.0)
        - multigammaln(0.5 * nu, d)
        - 0.5 * (nu + d + 1) * q.expected_logdet
        - 0.5 * np.trace(phi @ q.expected_precision)
    )


def elbo_terms(state: VariationalState, designs: DesignSet, y: np.ndarray,
               weights: Optional[PoissonWeights] = None, corrected_fe_entropy: bool = True) -> Dict[str, float]:
    """ELBO contributions by block.

    Every constant is kept except the flat priors on ``beta`` and ``gamma``,
    which contribute zero.
    """
    if weights is None:
        weights = compute_weights(state, designs)
    terms = {"poisson": float(y @ weights.eta - weights.w.sum() - gammaln(y + 1).sum())}

    p = designs.p
    if p:
        _, logdet = np.linalg.slogdet(state.beta.cov)
        terms["beta"] = _gaussian_entropy(logdet, p)

    for block, alpha, sigma in zip(designs.re_blocks, state.alphas, state.sigmas):
        g, d = alpha.mean.shape
        _, logdets = np.linalg.slogdet(alpha.cov)
        second_moment = alpha.mean.T @ alpha.mean + alpha.cov.sum(axis=0)
        expected_prior = (
            -0.5 * g * d * _LOG_2PI
            - 0.5 * g * sigma.expected_logdet
            - 0.5 * np.trace(sigma.expected_precision @ second_moment)
        )
        entropy = 0.5 * logdets.sum() + 0.5 * g * d * (1.0 + _LOG_2PI)
        sigma_kl = (_iw_expected_log_density(sigma.prior_nu, sigma.prior_phi, sigma)
                    - _iw_expected_log_density(sigma.nu, sigma.phi, sigma))
        terms[block.term.label] = float(expected_prior + entropy + sigma_kl)

    for block, gamma in zip(designs.fe_blocks, state.gammas):
        log_pdet = gamma.log_pdet if corrected_fe_entropy else uncorrected_log_pdet(gamma.u)
        terms[f"v_fe({block.variable})"] = _gaussian_entropy(log_pdet, gamma.size - 1)
    return terms


def compute_elbo(state: VariationalState, designs: DesignSet, y: np.ndarray,
                 weights: Optional[PoissonWeights] = None, corrected_fe_entropy: bool = True) -> float:
    value = float(sum(elbo_terms(state, designs, y, weights, corrected_fe_entropy).values()))
    if not np.isfinite(value):
        raise NumericalError(f"non-finite ELBO {value}")
    return value


def initialize(designs: DesignSet, y: np.ndarray, config: SolverConfig) -> VariationalState:
    """Zero means, ``1e-2 I`` covariances, fixed effects from one pass with ``w = 1``."""
    p = designs.p
    beta = GaussianFactor(np.zeros(p), INITIAL_VARIANCE * np.eye(p))
    alphas, sigmas = [], []
    for block in designs.re_blocks:
        g, d = block.g, block.d
        alphas.append(BlockGaussianFactor(np.zeros((g, d)), np.tile(INITIAL_VARIANCE * np.eye(d), (g, 1, 1))))
        nu, phi = config.prior_for(block.term.label, d)
        sigmas.append(InverseWishartFactor(nu=nu, phi=phi, prior_nu=nu, prior_phi=phi))
    gammas = []
    for block in designs.fe_blocks:
        counts = _level_sums(block.index, np.ones(designs.n_rows), block.size)
        gammas.append(update_fast(counts, _level_sums(block.index, y - 1.0, block.size), block.level_names))
    state = VariationalState(encoding=designs.encoding, beta=beta, alphas=tuple(alphas),
                             sigmas=tuple(sigmas), gammas=tuple(gammas))
    for j in range(len(alphas)):
        state = update_sigma(state, j)
    return state


def _means(state: VariationalState) -> np.ndarray:
    parts = [state.beta.mean] + [a.mean.ravel() for a in state.alphas] + [g.mean for g in state.gammas]
    return np.concatenate(parts) if parts else np.zeros(0)


def fit(designs: DesignSet, y: np.ndarray, config: Optional[SolverConfig] = None) -> VariationalState:
    """Sweep ``[gamma_k, beta, alpha_j, Sigma_j]`` until the relative ELBO change drops below tolerance.

    Each Gaussian block is retried with halved steps while it lowers the ELBO;
    a block that never improves keeps its previous factor.  Hitting
    ``max_iter`` returns an unconverged state.

    Raises:
        NumericalError: on singular systems, or when damping is exhausted in
            ``max_exhausted_sweeps`` consecutive sweeps.
    """
    config = config or SolverConfig()
    y = np.asarray(y, dtype=float)
    if y.shape != (designs.n_rows,):
        raise ValueError(f"response has shape {y.shape}, expected ({designs.n_rows},)")
    started = time.perf_counter()

    def objective(state: VariationalState, weights: PoissonWeights) -> float:
        with np.errstate(over="ignore", invalid="ignore"):
            value = float(sum(elbo_terms(state, designs, y, weights, config.corrected_fe_entropy).values()))
        return value

    blocks: List[Tuple[str, Callable]] = []
    for k, block in enumerate(designs.fe_blocks):
        blocks.append((f"v_fe({block.variable})",
                       lambda s, w, step, k=k: update_gamma(s, designs, w, y, k, step)))
    if designs.p:
        blocks.append(("beta", lambda s, w, step: update_beta(s, designs, w, y, step)))
    for j, block in enumerate(designs.re_blocks):
        blocks.append((block.term.label, lambda s, w, step, j=j: update_alpha(s, designs, w, y, j, step)))

    state = initialize(designs, y, config)
    weights = compute_weights(state, designs)
    elbo = compute_elbo(state, designs, y, weights, config.corrected_fe_entropy)
    trace = [elbo]
    damping_events = exhausted_total = exhausted_streak = 0
    converged = False
    iteration = 0

    for iteration in range(1, config.max_iter + 1):
        previous_means = _means(state)
        exhausted_this_sweep = False
        for label, update in blocks:
            step = 1.0
            for halving in range(config.max_halvings + 1):
                candidate, candidate_weights = update(state, weights, step)
                candidate_elbo = objective(candidate, candidate_weights)
                if np.isfinite(candidate_elbo) and candidate_elbo >= elbo - config.block_tolerance:
                    if halving:
                        damping_events += 1
                        logger.info("sweep %d: %s accepted with step %g", iteration, label, step)
                    state, weights, elbo = candidate, candidate_weights, candidate_elbo
                    break
                step /= 2.0
            else:
                exhausted_this_sweep = True
                exhausted_total += 1
                logger.warning("sweep %d: %s did not improve after %d halvings; keeping previous factor",
                               iteration, label, config.max_halvings)
        for j in range(len(designs.re_blocks)):
            state = update_sigma(state, j)

        weights = compute_weights(state, designs)
        elbo = compute_elbo(state, designs, y, weights, config.corrected_fe_entropy)
        previous_elbo = trace[-1]
        trace.append(elbo)

        if config.metric is ConvergenceMetric.ELBO:
            change = abs(elbo - previous_elbo) / max(abs(previous_elbo), 1.0)
        else:
            delta = _means(state) - previous_means
            change = float(np.max(np.abs(delta))) if delta.size else 0.0
        if change < config.elbo_rel_tol:
            converged = True
            break

        exhausted_streak = exhausted_streak + 1 if exhausted_this_sweep else 0
        if exhausted_streak >= config.max_exhausted_sweeps:
            raise NumericalError(
                f"damping exhausted in {exhausted_streak} consecutive sweeps; ELBO trace tail {trace[-5:]}"
            )

    wall_time = time.perf_counter() - started
    if converged:
        logger.info("converged after %d sweeps in %.2fs, ELBO %.6f", iteration, wall_time, elbo)
    else:
        logger.warning("not converged after %d sweeps, ELBO %.6f", iteration, elbo)
    return replace(state, elbo_trace=tuple(trace), converged=converged, iterations=iteration,
                   damping_events=damping_events, exhausted_blocks=exhausted_total, wall_time=wall_time)


def _pack(matrix: np.ndarray) -> List[float]:
    return matrix[np.tril_indices(matrix.shape[0])].tolist()


def _unpack(values: Sequence[float], d: int) -> np.ndarray:
    matrix = np.zeros((d, d))
    rows, cols = np.tril_indices(d)
    matrix[rows, cols] = values
    matrix[cols, rows] = values
    return matrix


def state_to_dict(state: VariationalState) -> Dict[str, Any]:
    """Versioned document; covariances are stored as packed lower triangles."""
    return {
        "version": STATE_FORMAT_VERSION,
        "encoding": state.encoding.to_dict(),
        "beta": {"mean": state.beta.mean.tolist(), "cov": _pack(state.beta.cov)},
        "alphas": [
            {"mean": a.mean.tolist(), "cov": [_pack(c) for c in a.cov]}
            for a in state.alphas
        ],
        "sigmas": [
            {"nu": s.nu, "phi": _pack(s.phi), "prior_nu": s.prior_nu, "prior_phi": _pack(s.prior_phi)}
            for s in state.sigmas
        ],
        "gammas": [
            {"d": g.d.tolist(), "mean": g.mean.tolist(), "var": g.var.tolist(), "log_pdet": g.log_pdet,
             "level_names": list(g.level_names) if g.level_names is not None else None}
            for g in state.gammas
        ],
        "elbo_trace": list(state.elbo_trace),
        "converged": state.converged,
        "iterations": state.iterations,
        "damping_events": state.damping_events,
        "exhausted_blocks": state.exhausted_blocks,
        "wall_time": state.wall_time,
    }


def state_from_dict(data: Dict[str, Any]) -> VariationalState:
    version = data.get("version")
    if version != STATE_FORMAT_VERSION:
        raise ValueError(f"Unsupported state format version: {version}")
    encoding = ModelEncoding.from_dict(data["encoding"])
    p = len(data["beta"]["mean"])
    beta = GaussianFactor(np.array(data["beta"]["mean"], dtype=float).reshape(p), _unpack(data["beta"]["cov"], p))
    alphas = []
    for re, entry in zip(encoding.re_encodings, data["alphas"]):
        d = re.d
        mean = np.array(entry["mean"], dtype=float).reshape(re.g, d)
        cov = np.array([_unpack(c, d) for c in entry["cov"]]).reshape(re.g, d, d)
        alphas.append(BlockGaussianFactor(mean, cov))
    sigmas = []
    for re, entry in zip(encoding.re_encodings, data["sigmas"]):
        d = re.d
        sigmas.append(InverseWishartFactor(nu=entry["nu"], phi=_unpack(entry["phi"], d),
                                           prior_nu=entry["prior_nu"], prior_phi=_unpack(entry["prior_phi"], d)))
    gammas = []
    for entry in data["gammas"]:
        d = np.array(entry["d"], dtype=float)
        names = tuple(entry["level_names"]) if entry.get("level_names") is not None else None
        gammas.append(ConstrainedGaussianFast(d=d, u=1.0 / d, mean=np.array(entry["mean"], dtype=float),
                                              var=np.array(entry["var"], dtype=float),
                                              log_pdet=entry["log_pdet"], level_names=names))
    return VariationalState(
        encoding=encoding, beta=beta, alphas=tuple(alphas), sigmas=tuple(sigmas), gammas=tuple(gammas),
        elbo_trace=tuple(data.get("elbo_trace", ())), converged=data.get("converged", False),
        iterations=data.get("iterations", 0), damping_events=data.get("damping_events", 0),
        exhausted_blocks=data.get("exhausted_blocks", 0), wall_time=data.get("wall_time", 0.0),
    )


def save_state(state: VariationalState, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(state_to_dict(state), indent=1), encoding="utf-8")
    return path


def load_state(path: Union[str, Path]) -> VariationalState:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"state file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValueError(f"Invalid state file {path}: {e}")
    return state_from_dict(data)


def coefficient_table(state: VariationalState) -> pd.DataFrame:
    """Fixed-effect means and standard deviations, and random-effect standard deviations.

    Numeric fixed effects are reported on the scale of the original covariate.
    """
    rows = []
    sd = np.sqrt(np.clip(np.diag(state.beta.cov), 0.0, None))
    for k, column in enumerate(state.encoding.fixed_columns):
        rows.append({"block": "fixed", "term": column.variable or column.name, "name": column.name,
                     "mean": state.beta.mean[k] / column.scale, "sd": sd[k] / column.scale})
    for re, sigma in zip(state.encoding.re_encodings, state.sigmas):
        cov = sigma.expected_cov
        for s, slot in enumerate(re.term.slot_names):
            rows.append({"block": "random", "term": re.term.label, "name": f"sd({slot})",
                         "mean": float(np.sqrt(cov[s, s])), "sd": float("nan")})
    return pd.DataFrame(rows, columns=["block", "term", "name", "mean", "sd"])
