# -*- coding: utf-8 -*-
#
# Copyright (C) 2024 the gud developers
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program.  If not, see <https://www.gnu.org/licenses/>.

"""Forward process, exact score oracles, samplers and likelihood.

All the numerical work on the component vectors is done with torch in double
precision, so that the very same code paths can be used with the analytic
oracles and with the trained network. Batches of component vectors are
(batch, d) tensors, and the noising state is passed around as a
gud.schedule.NoisingState.
"""

from typing import Callable, NamedTuple, Optional

import numpy as np
import torch
from loguru import logger
from scipy.integrate import solve_ivp

from gud.basis import BasisSpec, loglik_base_change, transform_matrix
from gud.helpers import NumericalError
from gud.schedule import NoisingState, Schedule, beta_from_schedule, beta_integral, check_prior


DTYPE = torch.float64
DEFAULT_EPS = 1.e-5
DEFAULT_TOLERANCE = 1.e-4
DEFAULT_FIXED_STEPS = 1000
EXACT_DIVERGENCE_MAX_DIM = 16
ODE_METHODS = ('RK45', 'rk4')

# The score function contract: (chi_t, state) -> grad log p_t(chi_t).
ScoreFunction = Callable[[torch.Tensor, NoisingState], torch.Tensor]


def as_tensor(value) -> torch.Tensor:
    """Convert an array-like to a double-precision tensor.
    """
    return torch.as_tensor(value, dtype=DTYPE)


def make_generator(seed: int) -> torch.Generator:
    """Create a seeded torch random number generator.
    """
    generator = torch.Generator()
    generator.manual_seed(int(seed))
    return generator


def _state_tensors(state: NoisingState):
    """Return alpha, sigma, alpha^2 and sigma^2 as tensors.
    """
    return as_tensor(state.alpha), as_tensor(state.sigma), as_tensor(state.alpha2), \
        as_tensor(state.sigma2)



class GaussianMixture:

    """Mixture of Gaussians with diagonal covariances.

    Arguments
    ---------
    weights : array_like
        The mixture weights (K values summing up to one).
    means : array_like
        The K x d component means.
    variances : array_like
        The K x d (strictly positive) component variances.
    """

    def __init__(self, weights, means, variances) -> None:
        """Constructor.
        """
        self.weights = np.asarray(weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(means, dtype=float))
        self.variances = np.atleast_2d(np.asarray(variances, dtype=float))
        if self.weights.ndim != 1 or self.means.shape != (self.weights.size, self.means.shape[1]):
            raise ValueError('Inconsistent mixture weights and means')
        if self.variances.shape != self.means.shape:
            raise ValueError('Inconsistent mixture means and variances')
        if np.any(self.weights < 0.) or abs(self.weights.sum() - 1.) > 1.e-12:
            raise ValueError(f'Mixture weights {self.weights} do not sum up to one')
        if np.any(self.variances <= 0.):
            raise ValueError('Mixture variances must be strictly positive')

    @property
    def num_components(self) -> int:
        """The number of mixture components.
        """
        return self.weights.size

    @property
    def dim(self) -> int:
        """The dimension of the space.
        """
        return self.means.shape[1]

    def component_variance(self) -> np.ndarray:
        """Return the (diagonal of the) covariance of the full mixture.
        """
        mean = self.weights @ self.means
        second_moment = self.weights @ (self.variances + self.means**2)
        return second_moment - mean**2

    def sample(self, size: int, rng: np.random.Generator, return_labels: bool = False):
        """Draw exact samples from the mixture.
        """
        labels = rng.choice(self.num_components, size=size, p=self.weights)
        noise = rng.standard_normal((size, self.dim))
        samples = self.means[labels] + np.sqrt(self.variances[labels]) * noise
        if return_labels:
            return samples, labels
        return samples

    def __str__(self) -> str:
        """String formatting.
        """
        return f'Gaussian mixture with {self.num_components} component(s) in {self.dim} dimension(s)'


def _gm_terms(mix: GaussianMixture, chi_t, state: NoisingState):
    """Return the log-weighted component log-densities (..., K), and the
    differences and variances (..., K, d) of the mixture at time t.
    """
    chi_t = as_tensor(chi_t)
    alpha, _, alpha2, sigma2 = _state_tensors(state)
    means = alpha[..., None, :] * as_tensor(mix.means)
    variances = alpha2[..., None, :] * as_tensor(mix.variances) + sigma2[..., None, :]
    diff = chi_t[..., None, :] - means
    log_norm = -0.5 * torch.sum(diff**2 / variances + torch.log(2. * np.pi * variances), dim=-1)
    return torch.log(as_tensor(mix.weights)) + log_norm, diff, variances


def gm_marginal_logpdf(mix: GaussianMixture, chi_t, state: NoisingState) -> torch.Tensor:
    """Return the log-density of the mixture convolved with the forward kernel.

    The marginal at time t is again a mixture, with means alpha * mu_k and
    variances alpha^2 * v_k + sigma^2.
    """
    log_terms, _, _ = _gm_terms(mix, chi_t, state)
    return torch.logsumexp(log_terms, dim=-1)


def gm_marginal_score(mix: GaussianMixture, chi_t, state: NoisingState) -> torch.Tensor:
    """Return the exact score of the mixture convolved with the forward kernel,
    i.e., the responsibility-weighted average of the component scores.
    """
    log_terms, diff, variances = _gm_terms(mix, chi_t, state)
    responsibilities = torch.softmax(log_terms, dim=-1)
    return torch.sum(responsibilities[..., None] * (-diff / variances), dim=-2)



class MixtureScore:

    """Exact score function of a Gaussian mixture.
    """

    def __init__(self, mix: GaussianMixture) -> None:
        """Constructor.
        """
        self.mix = mix

    def __call__(self, chi: torch.Tensor, state: NoisingState) -> torch.Tensor:
        """Evaluate the score.
        """
        return gm_marginal_score(self.mix, chi, state)

    def logpdf(self, chi: torch.Tensor, state: NoisingState) -> torch.Tensor:
        """Evaluate the marginal log-density.
        """
        return gm_marginal_logpdf(self.mix, chi, state)



class GaussianScore:

    """Exact score function of a zero-mean Gaussian with a full covariance.

    In the component space the marginal at time t has covariance
    diag(alpha) C diag(alpha) + diag(sigma^2).
    """

    def __init__(self, covariance) -> None:
        """Constructor.
        """
        self.covariance = as_tensor(np.atleast_2d(covariance))
        if self.covariance.shape[0] != self.covariance.shape[1]:
            raise ValueError('The covariance matrix must be square')

    def marginal_covariance(self, state: NoisingState) -> torch.Tensor:
        """Return the covariance matrix of the marginal at the given state.
        """
        alpha, _, _, sigma2 = _state_tensors(state)
        return alpha[..., :, None] * self.covariance * alpha[..., None, :] + \
            torch.diag_embed(sigma2)

    def __call__(self, chi: torch.Tensor, state: NoisingState) -> torch.Tensor:
        """Evaluate the score.
        """
        cov = self.marginal_covariance(state)
        return -torch.linalg.solve(cov, as_tensor(chi)[..., None])[..., 0]

    def logpdf(self, chi: torch.Tensor, state: NoisingState) -> torch.Tensor:
        """Evaluate the marginal log-density.
        """
        chi = as_tensor(chi)
        cov = self.marginal_covariance(state)
        quad = torch.sum(chi * torch.linalg.solve(cov, chi[..., None])[..., 0], dim=-1)
        return -0.5 * (quad + torch.logdet(2. * np.pi * cov))



class BasisScore:

    """Data-space view of a component-space score function.

    Given a basis with forward matrix F (chi = phi F), this evaluates
    grad_phi log p(phi) = grad_chi log p(chi) F^T for data-space inputs.
    """

    def __init__(self, basis: BasisSpec, score: ScoreFunction) -> None:
        """Constructor.
        """
        self.basis = basis
        self.score = score
        self.matrix = as_tensor(transform_matrix(basis))

    def to_components(self, phi: torch.Tensor) -> torch.Tensor:
        """Map data-space vectors to the component space.
        """
        return as_tensor(phi) @ self.matrix

    def __call__(self, phi: torch.Tensor, state: NoisingState) -> torch.Tensor:
        """Evaluate the data-space score.
        """
        return self.score(self.to_components(phi), state) @ self.matrix.T


def forward_sample(chi0, state: NoisingState, seed: Optional[int] = None,
                   generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Sample the forward kernel, chi_t = alpha * chi0 + sigma * epsilon.
    """
    chi0 = as_tensor(chi0)
    if not torch.all(torch.isfinite(chi0)):
        raise ValueError('Non-finite input to the forward kernel')
    if generator is None:
        generator = make_generator(0 if seed is None else seed)
    alpha, sigma, _, _ = _state_tensors(state)
    noise = torch.randn(chi0.shape, generator=generator, dtype=DTYPE)
    return alpha * chi0 + sigma * noise


def conditional_score(chi_t, chi0, state: NoisingState) -> torch.Tensor:
    """Return the score of the forward kernel p(chi_t | chi0).
    """
    chi_t = as_tensor(chi_t)
    chi0 = as_tensor(chi0)
    if chi_t.shape[-1] != chi0.shape[-1]:
        raise ValueError(f'Length mismatch ({chi_t.shape[-1]} vs. {chi0.shape[-1]})')
    alpha, _, _, sigma2 = _state_tensors(state)
    return -(chi_t - alpha * chi0) / sigma2


def marginal_variance(state: NoisingState, variances) -> np.ndarray:
    """Return the per-component variance of chi(t), alpha^2 Sigma + sigma^2.
    """
    return state.alpha2 * np.asarray(variances, dtype=float) + state.sigma2


def epsilon_to_score(epsilon: torch.Tensor, state: NoisingState) -> torch.Tensor:
    """Convert a noise prediction into a score, s = -epsilon / sigma.
    """
    return -as_tensor(epsilon) / as_tensor(state.sigma)


def score_to_epsilon(score: torch.Tensor, state: NoisingState) -> torch.Tensor:
    """Convert a score into a noise prediction, epsilon = -sigma s.
    """
    return -as_tensor(state.sigma) * as_tensor(score)


def score_to_velocity(chi: torch.Tensor, score: torch.Tensor, beta) -> torch.Tensor:
    """Return the probability-flow drift dchi/dt = -beta / 2 (chi + score).
    """
    return -0.5 * as_tensor(beta) * (as_tensor(chi) + as_tensor(score))


def tweedie_denoise(chi_t: torch.Tensor, score: torch.Tensor, state: NoisingState) -> torch.Tensor:
    """Return the posterior mean E[chi0 | chi_t] = (chi_t + sigma^2 s) / alpha.
    """
    alpha, _, _, sigma2 = _state_tensors(state)
    return (as_tensor(chi_t) + sigma2 * as_tensor(score)) / alpha


def _evaluate_score(score: ScoreFunction, chi: torch.Tensor, state: NoisingState,
                    t: float) -> torch.Tensor:
    """Evaluate a score function, making sure the output is finite.
    """
    value = score(chi, state)
    if value.shape != chi.shape:
        raise ValueError(f'Score output shape {tuple(value.shape)} != {tuple(chi.shape)}')
    if not torch.all(torch.isfinite(value)):
        logger.error(f'Non-finite score at t = {t:.6f}')
        raise NumericalError(f'Non-finite score output at t = {t:.6f}')
    return value


def reverse_sde_sample(score: ScoreFunction, schedule: Schedule, steps: int, batch: int,
                       seed: int = 0, chi_init: Optional[torch.Tensor] = None,
                       t_start: float = 1., t_end: float = 0.,
                       generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Integrate the reverse SDE with the Euler-Maruyama scheme.

    The time grid is uniform between t_start and t_end, and at each step the
    score is evaluated at the later time. The noise rate enters through its
    exact integral over the step, so that frozen components (beta = 0) are
    left unchanged.

    Parameters
    ----------
    score : ScoreFunction
        The score function.
    schedule : Schedule
        The noise schedule.
    steps : int
        The number of integration steps.
    batch : int
        The number of samples (ignored if chi_init is given).
    seed : int
        The seed for the random number generator (ignored if generator is given).
    chi_init : torch.Tensor, optional
        The initial state (default: draws from the standard-normal prior).
    t_start, t_end : float
        The integration end-points.

    Returns
    -------
    torch.Tensor
        The (batch, d) samples at time t_end.
    """
    if steps < 1:
        raise ValueError(f'Invalid number of steps ({steps})')
    if not 0. <= t_end < t_start <= 1.:
        raise ValueError(f'Invalid integration interval [{t_end}, {t_start}]')
    if generator is None:
        generator = make_generator(seed)
    if chi_init is None:
        if t_start == 1.:
            check_prior(schedule)
        chi = torch.randn((batch, schedule.dim), generator=generator, dtype=DTYPE)
    else:
        chi = as_tensor(chi_init).clone()
    times = np.linspace(t_start, t_end, steps + 1)
    logger.debug(f'Reverse SDE from t = {t_start} to {t_end} in {steps} steps...')
    with torch.no_grad():
        for t_hi, t_lo in zip(times[:-1], times[1:]):
            state = schedule.state(t_hi)
            rate = as_tensor(beta_integral(schedule, t_lo, t_hi))
            value = _evaluate_score(score, chi, state, t_hi)
            noise = torch.randn(chi.shape, generator=generator, dtype=DTYPE)
            chi = chi + (0.5 * chi + value) * rate + torch.sqrt(rate) * noise
    return chi


def _drift(score: ScoreFunction, chi: torch.Tensor, state: NoisingState, beta) -> torch.Tensor:
    """Probability-flow drift.
    """
    return score_to_velocity(chi, score(chi, state), beta)


def _fixed_rk4(fun, t_start: float, t_end: float, y0: np.ndarray, steps: int) -> np.ndarray:
    """Classical fixed-step Runge-Kutta integration, returning the final state.
    """
    times = np.linspace(t_start, t_end, steps + 1)
    y = y0
    for t, t_next in zip(times[:-1], times[1:]):
        h = t_next - t
        k1 = fun(t, y)
        k2 = fun(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = fun(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = fun(t_next, y + h * k3)
        y = y + h / 6. * (k1 + 2. * k2 + 2. * k3 + k4)
    return y


def _integrate(fun, t_start: float, t_end: float, y0: np.ndarray, method: str,
               rtol: float, atol: float, steps: int) -> np.ndarray:
    """Integrate a flat ODE system, either with the adaptive Dormand-Prince
    pair or with the fixed-step fallback.
    """
    if method not in ODE_METHODS:
        raise ValueError(f'Unknown ODE method "{method}" (choose among {ODE_METHODS})')
    if method == 'rk4':
        return _fixed_rk4(fun, t_start, t_end, y0, steps)
    solution = solve_ivp(fun, (t_start, t_end), y0, method='RK45', rtol=rtol, atol=atol)
    if not solution.success:
        logger.error(f'ODE integration failed: {solution.message}')
        raise NumericalError(f'ODE integration failed: {solution.message}')
    logger.debug(f'ODE integration done with {solution.nfev} function evaluations.')
    return solution.y[:, -1]


def _clip_time(t: float) -> float:
    """Keep the solver stage times within the unit interval.
    """
    return min(max(float(t), 0.), 1.)


# pylint: disable=too-many-arguments
def ode_sample(score: ScoreFunction, schedule: Schedule, batch: int, seed: int = 0,
               method: str = 'RK45', rtol: float = DEFAULT_TOLERANCE,
               atol: float = DEFAULT_TOLERANCE, steps: int = DEFAULT_FIXED_STEPS,
               eps: float = DEFAULT_EPS, chi_init: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Sample by integrating the probability-flow ODE from t = 1 down to eps,
    followed by a single Euler step over [0, eps].
    """
    if chi_init is None:
        check_prior(schedule)
        chi = torch.randn((batch, schedule.dim), generator=make_generator(seed), dtype=DTYPE)
    else:
        chi = as_tensor(chi_init).clone()
    shape = chi.shape

    def fun(t, y):
        t = _clip_time(t)
        with torch.no_grad():
            chi_t = as_tensor(y).reshape(shape)
            value = _evaluate_score(score, chi_t, schedule.state(t), t)
            drift = score_to_velocity(chi_t, value, beta_from_schedule(schedule, t))
        return drift.flatten().numpy()

    logger.debug(f'Probability-flow ODE ({method}) from t = 1 to {eps}...')
    y = _integrate(fun, 1., eps, chi.flatten().numpy(), method, rtol, atol, steps)
    chi = as_tensor(y).reshape(shape)
    with torch.no_grad():
        value = _evaluate_score(score, chi, schedule.state(eps), eps)
        chi = chi - score_to_velocity(chi, value, beta_integral(schedule, 0., eps))
    return chi


def divergence(fun: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
               probes: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Return the divergence of a vector field at a batch of points.

    Without probes the divergence is calculated exactly, as the sum of the
    directional derivatives along the basis vectors. With a (n, batch, d)
    tensor of probes, the Hutchinson estimate averaged over the n probes is
    returned instead.
    """
    with torch.enable_grad():
        x = x.detach().requires_grad_(True)
        value = fun(x)
        if probes is None:
            terms = []
            for i in range(x.shape[-1]):
                grad = torch.autograd.grad(value[..., i].sum(), x, retain_graph=True)[0]
                terms.append(grad[..., i])
            return torch.stack(terms, dim=-1).sum(dim=-1).detach()
        estimates = []
        for probe in probes:
            grad = torch.autograd.grad(torch.sum(value * probe), x, retain_graph=True)[0]
            estimates.append(torch.sum(grad * probe, dim=-1))
        return torch.stack(estimates).mean(dim=0).detach()


def rademacher_probes(num_probes: int, shape, generator: torch.Generator) -> torch.Tensor:
    """Draw Rademacher (+/-1) probe vectors.
    """
    draws = torch.randint(0, 2, (num_probes, *shape), generator=generator)
    return draws.to(DTYPE) * 2. - 1.



class NLLResult(NamedTuple):

    """Summary of a likelihood evaluation.
    """

    nats_per_dim: float
    bits_per_dim: float
    stderr: float
    count: int
    per_sample: np.ndarray


def _batch_loglik(score: ScoreFunction, schedule: Schedule, chi0: torch.Tensor,
                  probes: Optional[torch.Tensor], method: str, rtol: float, atol: float,
                  steps: int, eps: float) -> torch.Tensor:
    """Log-likelihood of a batch of component vectors through the augmented
    probability-flow ODE.
    """
    shape = chi0.shape
    size = chi0.numel()

    def drift_and_divergence(chi, t, beta):
        state = schedule.state(t)
        with torch.no_grad():
            drift = _drift(score, chi, state, beta)
        div = divergence(lambda x: _drift(score, x, state, beta), chi, probes)
        return drift, div

    # Single Euler step over [0, eps].
    drift, div = drift_and_divergence(chi0, 0., beta_integral(schedule, 0., eps))
    chi_eps = chi0 + drift
    delta = div

    def fun(t, y):
        t = _clip_time(t)
        chi = as_tensor(y[:size]).reshape(shape)
        drift, div = drift_and_divergence(chi, t, beta_from_schedule(schedule, t))
        return np.concatenate([drift.flatten().numpy(), div.numpy()])

    y0 = np.concatenate([chi_eps.flatten().numpy(), np.zeros(shape[0])])
    y = _integrate(fun, eps, 1., y0, method, rtol, atol, steps)
    chi1 = as_tensor(y[:size]).reshape(shape)
    delta = delta + as_tensor(y[size:])
    prior = -0.5 * torch.sum(chi1**2, dim=-1) - 0.5 * shape[-1] * np.log(2. * np.pi)
    return prior + delta


# pylint: disable=too-many-arguments, too-many-locals
def ode_nll(score: ScoreFunction, schedule: Schedule, data, basis: Optional[BasisSpec] = None,
            levels: Optional[int] = None, n_probes: int = 3, seed: int = 0,
            batch_size: int = 256, exact_divergence: Optional[bool] = None,
            method: str = 'RK45', rtol: float = DEFAULT_TOLERANCE,
            atol: float = DEFAULT_TOLERANCE, steps: int = DEFAULT_FIXED_STEPS,
            eps: float = DEFAULT_EPS) -> NLLResult:
    """Evaluate the negative log-likelihood of (transformed, centered) data
    through the probability-flow ODE.

    Parameters
    ----------
    score : ScoreFunction
        The score function.
    schedule : Schedule
        The noise schedule.
    data : array_like
        The (N, d) component vectors.
    basis : BasisSpec, optional
        If given, the likelihood is converted to the data space.
    levels : int, optional
        If given, the dequantization offset log2(levels / 2) is added to the
        bits per dimension.
    n_probes : int
        The number of Rademacher probes for the Hutchinson estimator.
    exact_divergence : bool, optional
        Force (or prevent) the exact divergence calculation. By default the
        divergence is exact for d <= 16.

    Returns
    -------
    NLLResult
        The average NLL in nats and bits per dimension, with the standard
        error on the latter.
    """
    data = as_tensor(np.atleast_2d(data))
    num_samples, dim = data.shape
    if num_samples == 0:
        raise ValueError('Cannot evaluate the likelihood of an empty dataset')
    if dim != schedule.dim:
        raise ValueError(f'Data dimension {dim} != schedule dimension {schedule.dim}')
    if exact_divergence is None:
        exact_divergence = dim <= EXACT_DIVERGENCE_MAX_DIM
    check_prior(schedule)
    generator = make_generator(seed)
    logger.info(f'Evaluating the NLL of {num_samples} sample(s) in {dim} dimension(s) '
                f'({"exact" if exact_divergence else "Hutchinson"} divergence)...')
    logliks = []
    for start in range(0, num_samples, batch_size):
        chi0 = data[start:start + batch_size]
        probes = None
        if not exact_divergence:
            probes = rademacher_probes(n_probes, chi0.shape, generator)
        logliks.append(_batch_loglik(score, schedule, chi0, probes, method, rtol, atol,
                                     steps, eps))
        logger.debug(f'{start + len(chi0)}/{num_samples} sample(s) done.')
    loglik = torch.cat(logliks).numpy()
    if basis is not None:
        loglik = loglik_base_change(basis, loglik)
    if not np.all(np.isfinite(loglik)):
        logger.error('Non-finite log-likelihood values.')
        raise NumericalError('Non-finite log-likelihood values')
    nats = -loglik / dim
    if levels is not None:
        nats = nats + np.log(levels / 2.)
    bits = nats / np.log(2.)
    stderr = bits.std(ddof=1) / np.sqrt(num_samples) if num_samples > 1 else 0.
    result = NLLResult(float(nats.mean()), float(bits.mean()), float(stderr), num_samples, bits)
    logger.info(f'NLL = {result.bits_per_dim:.4f} +/- {result.stderr:.4f} bits/dim')
    return result
