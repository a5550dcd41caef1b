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

"""Noise-prediction network conditioned on the full noising state.

The network is a small fully-connected residual model, whose input is the
concatenation of the noised component vector, the (normalized) noising state
gamma and the (normalized) per-component position labels.
"""

import copy
import time

from dataclasses import dataclass
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
from loguru import logger
from scipy.integrate import quad_vec
from torch import nn

from gud.container import read_container, write_container
from gud.helpers import ConfigurationError, NumericalError, write_csv
from gud.process import DTYPE, as_tensor, epsilon_to_score, make_generator
from gud.schedule import NoisingState, Schedule


CHECKPOINT_MAGIC = b'GUDNET'
LOSS_WEIGHTINGS = ('sigma2',)
DEFAULT_HIDDEN = 256
DEFAULT_DEPTH = 3
DEFAULT_GAMMA_RANGE = (-10., 10.)


def _normalize(value: torch.Tensor, value_range: torch.Tensor) -> torch.Tensor:
    """Affine map of value_range onto [-1, 1].
    """
    low, high = value_range
    return 2. * (value - low) / (high - low) - 1.



class ScoreNet(nn.Module):

    """Residual fully-connected noise-prediction network.

    Arguments
    ---------
    dim : int
        The number of components d.
    labels : array_like, optional
        The per-component position labels (default: all zeros).
    hidden : int
        The width of the hidden layers.
    depth : int
        The number of residual blocks.
    gamma_range : (float, float)
        The range of gamma mapped onto [-1, 1] at the input.
    """

    # pylint: disable=too-many-arguments
    def __init__(self, dim: int, labels=None, hidden: int = DEFAULT_HIDDEN,
                 depth: int = DEFAULT_DEPTH,
                 gamma_range: Tuple[float, float] = DEFAULT_GAMMA_RANGE) -> None:
        """Constructor.
        """
        super().__init__()
        if dim < 1 or hidden < 1 or depth < 0:
            raise ValueError(f'Invalid network sizes (dim={dim}, hidden={hidden}, depth={depth})')
        if not gamma_range[0] < gamma_range[1]:
            raise ValueError(f'Invalid gamma range {gamma_range}')
        self.dim = int(dim)
        self.hidden = int(hidden)
        self.depth = int(depth)
        if labels is None:
            labels = np.zeros(dim)
        labels = np.asarray(labels, dtype=float)
        if labels.shape != (dim,):
            raise ValueError(f'Labels must have shape ({dim},)')
        label_range = (labels.min(), labels.max())
        if label_range[0] == label_range[1]:
            label_range = (label_range[0] - 1., label_range[1] + 1.)
        self.register_buffer('labels', as_tensor(labels))
        self.register_buffer('gamma_range', as_tensor(gamma_range))
        self.register_buffer('label_range', as_tensor(label_range))
        self.input_layer = nn.Linear(3 * self.dim, self.hidden)
        self.blocks = nn.ModuleList(nn.Linear(self.hidden, self.hidden) for _ in range(self.depth))
        self.activation = nn.SiLU()
        self.output_layer = nn.Linear(self.hidden, self.dim)
        nn.init.zeros_(self.output_layer.weight)
        nn.init.zeros_(self.output_layer.bias)
        self.to(DTYPE)

    def architecture(self) -> dict:
        """Return the architecture parameters, for serialization.
        """
        return dict(dim=self.dim, hidden=self.hidden, depth=self.depth,
                    gamma_range=self.gamma_range.tolist())

    def forward(self, chi: torch.Tensor, gamma: torch.Tensor) -> torch.Tensor:
        """Overloaded method.
        """
        gamma = torch.broadcast_to(gamma, chi.shape)
        labels = torch.broadcast_to(_normalize(self.labels, self.label_range), chi.shape)
        x = torch.cat([chi, _normalize(gamma, self.gamma_range), labels], dim=-1)
        h = self.activation(self.input_layer(x))
        for block in self.blocks:
            h = h + self.activation(block(h))
        return self.output_layer(h)


def predict_eps(model: ScoreNet, chi_t, state: NoisingState, labels=None) -> torch.Tensor:
    """Predict the noise from a noised component vector.

    If labels are given they must match the ones the network was built with.
    """
    chi_t = as_tensor(chi_t)
    if chi_t.shape[-1] != model.dim:
        raise ValueError(f'Input dimension {chi_t.shape[-1]} != network dimension {model.dim}')
    gamma = as_tensor(state.gamma)
    if gamma.shape[-1] != model.dim:
        raise ValueError(f'State dimension {gamma.shape[-1]} != network dimension {model.dim}')
    if labels is not None and not np.allclose(np.asarray(labels), model.labels.numpy()):
        raise ValueError('Labels do not match the network labels')
    return model(chi_t, gamma)



class NetworkScore:

    """Score function implied by a noise-prediction network, s = -eps / sigma.
    """

    def __init__(self, model: ScoreNet) -> None:
        """Constructor.
        """
        self.model = model

    def __call__(self, chi: torch.Tensor, state: NoisingState) -> torch.Tensor:
        """Evaluate the score.
        """
        return epsilon_to_score(predict_eps(self.model, chi, state), state)


def noised_batch(chi0: torch.Tensor, state: NoisingState, noise: torch.Tensor) -> torch.Tensor:
    """Return alpha * chi0 + sigma * noise.
    """
    return as_tensor(state.alpha) * chi0 + as_tensor(state.sigma) * noise


def reduced_loss(eps_hat: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """Batch average of |eps_hat - eps|^2.
    """
    return torch.mean(torch.sum((eps_hat - noise)**2, dim=-1))


def weighted_score_loss(score: torch.Tensor, noise: torch.Tensor,
                        state: NoisingState) -> torch.Tensor:
    """Denoising score-matching loss with weighting lambda = sigma^2, in its
    un-reduced form, sum_i lambda_i |s_i + eps_i / sigma_i|^2.
    """
    sigma = as_tensor(state.sigma)
    return torch.mean(torch.sum(sigma**2 * (score + noise / sigma)**2, dim=-1))


def dsm_loss(model: ScoreNet, chi0, schedule: Schedule, t, noise) -> torch.Tensor:
    """Denoising score-matching loss for a batch of clean component vectors.

    With the weighting lambda_i = sigma_i^2 the loss reduces to the mean of
    |eps_hat - eps|^2 over the batch.
    """
    chi0 = as_tensor(chi0)
    noise = as_tensor(noise)
    state = schedule.state(np.asarray(t, dtype=float))
    chi_t = noised_batch(chi0, state, noise)
    return reduced_loss(predict_eps(model, chi_t, state), noise)


def grad(model: ScoreNet, chi0, schedule: Schedule, t, noise) -> List[torch.Tensor]:
    """Return the gradients of dsm_loss() with respect to the network parameters.
    """
    loss = dsm_loss(model, chi0, schedule, t, noise)
    return list(torch.autograd.grad(loss, list(model.parameters())))


@torch.no_grad()
def update_ema(ema_model: nn.Module, model: nn.Module, decay: float) -> None:
    """Update the exponential moving average of the network parameters.
    """
    for ema_param, param in zip(ema_model.parameters(), model.parameters()):
        ema_param.mul_(decay).add_(param, alpha=1. - decay)


def dsm_bayes_risk(variances, schedule: Schedule) -> float:
    """Return the minimum achievable (reduced) DSM loss for independent
    Gaussian components with the given variances.

    The optimal noise prediction is E[eps | chi_t], whose residual variance is
    1 - sigma^2 / (alpha^2 Sigma + sigma^2) per component, to be averaged
    over t uniform in [0, 1].
    """
    variances = np.asarray(variances, dtype=float)

    def risk(t):
        state = schedule.state(t)
        return 1. - state.sigma2 / (state.alpha2 * variances + state.sigma2)

    value, _ = quad_vec(risk, 0., 1., epsabs=1.e-10)
    return float(np.sum(value))



@dataclass
class TrainConfig:

    """Training hyperparameters.
    """

    batch: int = 128
    steps: int = 2000
    lr: float = 5.e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    ema: float = 0.999
    seed: int = 0
    hidden: int = DEFAULT_HIDDEN
    depth: int = DEFAULT_DEPTH
    weighting: str = 'sigma2'
    log_interval: int = 100
    divergence_factor: float = 10.
    divergence_patience: int = 100

    def validate(self) -> None:
        """Make sure all the parameters are admissible.
        """
        for name in ('batch', 'steps', 'hidden', 'log_interval', 'divergence_patience'):
            if getattr(self, name) < 1:
                raise ConfigurationError(f'{name} must be positive')
        if self.lr <= 0.:
            raise ConfigurationError('The learning rate must be positive')
        if not 0. < self.ema < 1.:
            raise ConfigurationError(f'EMA decay {self.ema} outside (0, 1)')
        if not all(0. <= beta < 1. for beta in self.betas):
            raise ConfigurationError(f'Invalid optimizer moment coefficients {self.betas}')
        if self.weighting not in LOSS_WEIGHTINGS:
            raise ConfigurationError(f'Unsupported loss weighting "{self.weighting}"')



class TrainResult(NamedTuple):

    """Output of a training run.
    """

    model: ScoreNet
    ema_model: ScoreNet
    losses: np.ndarray
    log: List[Tuple[int, float, float]]


ScheduleFactory = Callable[[Dict[str, float]], Schedule]


def draw_parameters(parameter_ranges: Dict[str, Tuple[float, float]],
                    generator: torch.Generator) -> Dict[str, float]:
    """Draw the schedule parameters uniformly within their ranges (in
    alphabetical order, for reproducibility).
    """
    params = {}
    for name in sorted(parameter_ranges):
        low, high = parameter_ranges[name]
        params[name] = float(low + (high - low) * torch.rand(1, generator=generator, dtype=DTYPE))
    return params


def gamma_range(schedule_factory: ScheduleFactory,
                parameter_ranges: Dict[str, Tuple[float, float]]) -> Tuple[float, float]:
    """Return the range of the noising states spanned by the schedules at the
    two ends of the parameter ranges.
    """
    low, high = [], []
    for index in (0, 1):
        schedule = schedule_factory({key: value[index] for key, value in parameter_ranges.items()})
        low.append(schedule.state(0.).gamma.min())
        high.append(schedule.state(1.).gamma.max())
    low, high = min(low), max(high)
    if low == high:
        return low - 1., high + 1.
    return low, high


# pylint: disable=too-many-locals
def train(config: TrainConfig, data, schedule_factory: ScheduleFactory,
          parameter_ranges: Optional[Dict[str, Tuple[float, float]]] = None,
          labels=None, log_file_path: Optional[str] = None) -> TrainResult:
    """Train a noise-prediction network with the denoising score-matching loss.

    Parameters
    ----------
    config : TrainConfig
        The training hyperparameters.
    data : array_like
        The (N, d) training component vectors.
    schedule_factory : callable
        Function creating a schedule from a dictionary of parameters.
    parameter_ranges : dict, optional
        The (low, high) range of each schedule parameter, from which the
        parameters are drawn uniformly for each batch.
    labels : array_like, optional
        The per-component position labels.
    log_file_path : str, optional
        Path to the output CSV training log (step, loss, wall time).

    Returns
    -------
    TrainResult
        The raw and EMA networks, along with the loss history.
    """
    config.validate()
    parameter_ranges = parameter_ranges or {}
    data = as_tensor(np.atleast_2d(data))
    num_samples, dim = data.shape
    if num_samples == 0:
        raise ValueError('Cannot train on an empty dataset')
    torch.manual_seed(config.seed)
    generator = make_generator(config.seed)
    model = ScoreNet(dim, labels, config.hidden, config.depth,
                     gamma_range(schedule_factory, parameter_ranges))
    ema_model = copy.deepcopy(model)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.betas)
    logger.info(f'Training a {dim}-dimensional score network on {num_samples} sample(s) '
                f'for {config.steps} step(s)...')
    losses = np.zeros(config.steps)
    log = []
    initial_loss = None
    num_diverging = 0
    start_time = time.time()
    for step in range(config.steps):
        index = torch.randint(0, num_samples, (config.batch,), generator=generator)
        schedule = schedule_factory(draw_parameters(parameter_ranges, generator))
        t = torch.rand(config.batch, generator=generator, dtype=DTYPE).numpy()
        noise = torch.randn((config.batch, dim), generator=generator, dtype=DTYPE)
        loss = dsm_loss(model, data[index], schedule, t, noise)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        update_ema(ema_model, model, config.ema)
        value = loss.item()
        if not np.isfinite(value):
            logger.error(f'Non-finite loss at step {step}.')
            raise NumericalError(f'Non-finite loss at step {step}')
        if initial_loss is None:
            initial_loss = value
        num_diverging = num_diverging + 1 if value > config.divergence_factor * initial_loss else 0
        if num_diverging >= config.divergence_patience:
            logger.error(f'Loss above {config.divergence_factor} times its initial value '
                         f'for {num_diverging} consecutive steps.')
            raise NumericalError(f'Divergent training loss at step {step}')
        losses[step] = value
        log.append((step, value, time.time() - start_time))
        if (step + 1) % config.log_interval == 0:
            recent = losses[max(0, step + 1 - config.log_interval):step + 1].mean()
            logger.info(f'Step {step + 1}/{config.steps}, average loss {recent:.5f}')
    if log_file_path is not None:
        write_csv(log_file_path, ('step', 'loss', 'wall_time'), log)
    return TrainResult(model, ema_model, losses, log)


def save_checkpoint(file_path: str, model: ScoreNet, ema: bool = False) -> None:
    """Write the network parameters (raw or EMA) to a binary checkpoint.
    """
    arrays = {name: value.detach().numpy() for name, value in model.state_dict().items()}
    write_container(file_path, CHECKPOINT_MAGIC, {'architecture': model.architecture(),
                                                  'ema': bool(ema)}, arrays)


def load_checkpoint(file_path: str) -> Tuple[ScoreNet, bool]:
    """Read a checkpoint written by save_checkpoint(), returning the network and
    the EMA flag.
    """
    header, arrays = read_container(file_path, CHECKPOINT_MAGIC)
    architecture = header['architecture']
    model = ScoreNet(architecture['dim'], arrays['labels'], architecture['hidden'],
                     architecture['depth'], tuple(architecture['gamma_range']))
    model.load_state_dict({name: as_tensor(value) for name, value in arrays.items()})
    model.eval()
    return model, header['ema']


def score_mse(score, reference, schedule: Schedule, samples: Sequence[np.ndarray],
              times: Sequence[float], seed: int = 0) -> float:
    """Mean squared difference (per component) between two score functions,
    evaluated on forward-noised samples at the given times.
    """
    generator = make_generator(seed)
    chi0 = as_tensor(samples)
    values = []
    for t in times:
        state = schedule.state(t)
        noise = torch.randn(chi0.shape, generator=generator, dtype=DTYPE)
        chi_t = noised_batch(chi0, state, noise)
        with torch.no_grad():
            diff = score(chi_t, state) - reference(chi_t, state)
        values.append(torch.mean(diff**2).item())
    return float(np.mean(values))
