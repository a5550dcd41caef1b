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

"""Command-line interface.
"""

import argparse
import os
import sys

from typing import List, NamedTuple, Optional

import numpy as np
import torch
from loguru import logger

from gud.basis import BasisSpec, CovarianceEstimate, build_column_basis, build_fft_basis, \
    build_haar_basis, build_identity_basis, build_pca_basis, channel_averaged_covariance, \
    estimate_covariance, forward_transform, image_shape, inverse_transform, load_basis, \
    rescale, save_basis
from gud.config import COMMANDS, RunConfig, add_flags, build_config
from gud.container import write_container
from gud.data import Dataset, csv_to_images, dequantize_and_center, images_to_csv, \
    load_images, requantize, restore, save_images, synth_mixture, synthetic_mixture
from gud.helpers import ArgumentParser, ConfigurationError, MissingInputError, NumericalError, \
    mktree, write_csv
from gud.process import GaussianMixture, MixtureScore, ode_nll, ode_sample, reverse_sde_sample
from gud.schedule import Schedule, beta_from_schedule, build_schedule, log_snr, prior_mismatch, \
    schedule_context
from gud.score_net import NetworkScore, TrainConfig, load_checkpoint, save_checkpoint, train
from gud.tasks import extend_image, reconstruct


SAMPLES_MAGIC = b'GUDSAMPL'
DEFAULT_TRAIN_STEPS = 2000
DEFAULT_SAMPLER_STEPS = 500
DEFAULT_NUM_SAMPLES = 64
DEFAULT_NUM_NLL = 1024

_DESCRIPTIONS = {
    'fit-basis': 'estimate the data covariance and build the component basis',
    'train': 'train the noise-prediction network',
    'sample': 'generate samples with the reverse SDE or the probability-flow ODE',
    'nll': 'evaluate the negative log-likelihood in bits/dim',
    'extend': 'generate image strips by sequential column extension',
    'reconstruct': 'reconstruct partially noised images',
    'schedule-viz': 'write the gamma, log-SNR and beta paths of a schedule to csv',
    'sweep': 'evaluate the likelihood over a grid of schedule parameters',
    'convert': 'convert between csv pixel dumps and GUDIMGS files',
}

_EPILOGS = {
    'sweep': 'All the grid points are evaluated with the same score model (--checkpoint or\n'
             '--exact-score). For one model per schedule, train a checkpoint at each grid\n'
             'point and run nll on each of them.',
}

# Schedule families accepting each of the swept parameters.
SWEPT_PARAMETERS = {
    'a': ('linear-softness', 'haar-column'),
    'r': ('linear-softness',),
}



class Workspace(NamedTuple):

    """Data and basis shared by all the subcommands.
    """

    dataset: Dataset
    mixture: Optional[GaussianMixture]
    basis: BasisSpec
    estimate: CovarianceEstimate
    chi: np.ndarray
    name: str


def fit_basis(config: RunConfig, samples: np.ndarray, shape) -> BasisSpec:
    """Build the basis requested in the configuration for a set of (N, d) samples.
    """
    kind = config.basis
    logger.info(f'Building {kind} basis for shape {shape}...')
    if kind == 'identity':
        basis = build_identity_basis(shape)
    elif kind == 'dense-orthogonal':
        cov = channel_averaged_covariance(samples, shape)
        return build_pca_basis(cov, whiten=config.whiten, shape=shape)
    elif kind == 'fft2-real':
        basis = build_fft_basis(shape)
    elif kind == 'haar':
        basis = build_haar_basis(shape, config.levels)
    else:
        basis = build_column_basis(shape)
    if config.whiten:
        basis = rescale(basis, estimate_covariance(forward_transform(basis, samples)).variances)
    return basis


def prepare(config: RunConfig) -> Workspace:
    """Load (or synthesize) the data, and fit (or load) the basis.
    """
    mixture = None
    if config.synthetic is not None:
        mixture = synthetic_mixture(config.synthetic, config.dim)
        dataset = synth_mixture(mixture, config.num_samples, config.seed)
        shape = image_shape((config.dim,))
        name = config.synthetic
    else:
        raw = load_images(config.data)
        dataset = dequantize_and_center(raw.samples, config.quant_levels, config.seed)
        shape = dataset.shape
        name = os.path.basename(config.data)
    samples = dataset.flat()
    if config.basis_file is not None:
        basis, estimate = load_basis(config.basis_file)
        if basis.dim != samples.shape[1]:
            raise ConfigurationError(f'Basis dimension {basis.dim} != data dimension '
                                     f'{samples.shape[1]}')
    else:
        basis = fit_basis(config, samples, shape)
        estimate = None
    chi = forward_transform(basis, samples)
    if estimate is None:
        estimate = estimate_covariance(chi)
    return Workspace(dataset, mixture, basis, estimate, chi, name)


def make_schedule(config: RunConfig, workspace: Workspace, params: Optional[dict] = None) -> Schedule:
    """Instantiate the schedule, either with the configured parameters or with
    the given ones.
    """
    if params is None:
        params = config.fixed_schedule_parameters()
    else:
        params = dict(params, **config.schedule_options())
    context = schedule_context(workspace.basis, workspace.estimate.log_var)
    try:
        return build_schedule(config.schedule, params, context)
    except ValueError as exception:
        raise ConfigurationError(str(exception)) from exception


def require_prior(schedule: Schedule) -> Schedule:
    """Make sure the schedule reaches the standard-normal prior at t = 1,
    which sampling and likelihood evaluation start from.
    """
    message = prior_mismatch(schedule)
    if message is not None:
        raise ConfigurationError(message)
    return schedule


def make_score(config: RunConfig, workspace: Workspace):
    """Return the score function, either exact (for synthetic mixtures in a
    pixel-space basis) or implied by a trained network.
    """
    basis = workspace.basis
    if config.exact_score:
        if basis.kind not in ('identity', 'permutation'):
            raise ConfigurationError('Exact scores are only available in pixel-space bases')
        mix = workspace.mixture
        means = forward_transform(basis, mix.means)
        variances = basis.rotate(mix.variances) / basis.scaling**2
        return MixtureScore(GaussianMixture(mix.weights, means, variances))
    model, ema = load_checkpoint(config.checkpoint)
    if model.dim != basis.dim:
        raise ConfigurationError(f'Network dimension {model.dim} != basis dimension {basis.dim}')
    logger.info(f'Using {"EMA" if ema else "raw"} network parameters from {config.checkpoint}.')
    return NetworkScore(model)


def _output(config: RunConfig, file_name: str) -> str:
    """Path to an output file.
    """
    return os.path.join(config.output, file_name)


def export_samples(config: RunConfig, workspace: Workspace, chi: np.ndarray,
                   file_name: str, **header) -> np.ndarray:
    """Map component-space samples back to the data space and write them to file.
    """
    phi = inverse_transform(workspace.basis, np.asarray(chi))
    samples = restore(workspace.dataset, phi)
    header = dict(header, shape=list(workspace.dataset.shape), seed=config.seed)
    write_container(_output(config, f'{file_name}.gudsamples'), SAMPLES_MAGIC, header,
                    {'samples': samples})
    if workspace.dataset.levels is not None:
        save_images(_output(config, f'{file_name}.gudimgs'), requantize(workspace.dataset, phi))
    return samples


def fit_basis_command(config: RunConfig) -> None:
    """Estimate the covariance, build the basis and write it to file.
    """
    workspace = prepare(config)
    save_basis(_output(config, 'basis.gudbasis'), workspace.basis, workspace.estimate)


def train_command(config: RunConfig) -> None:
    """Train the score network.
    """
    workspace = prepare(config)
    train_config = TrainConfig(batch=config.batch, steps=config.steps or DEFAULT_TRAIN_STEPS,
                               lr=config.lr, ema=config.ema, seed=config.seed,
                               hidden=config.hidden, depth=config.depth)

    def schedule_factory(params):
        return make_schedule(config, workspace, params)

    result = train(train_config, workspace.chi, schedule_factory, config.parameter_ranges(),
                   workspace.basis.labels, _output(config, 'train_log.csv'))
    save_basis(_output(config, 'basis.gudbasis'), workspace.basis, workspace.estimate)
    save_checkpoint(_output(config, 'score_net.gudnet'), result.ema_model, ema=True)
    save_checkpoint(_output(config, 'score_net_raw.gudnet'), result.model, ema=False)


def sample_command(config: RunConfig) -> None:
    """Generate samples.
    """
    workspace = prepare(config)
    schedule = require_prior(make_schedule(config, workspace))
    score = make_score(config, workspace)
    num = config.num_items(DEFAULT_NUM_SAMPLES)
    steps = config.steps or DEFAULT_SAMPLER_STEPS
    logger.info(f'Generating {num} sample(s) with the {config.sampler} sampler...')
    if config.sampler == 'sde':
        chi = reverse_sde_sample(score, schedule, steps, num, config.seed)
    else:
        chi = ode_sample(score, schedule, num, config.seed, config.ode_method, config.tol,
                         config.tol, steps)
    export_samples(config, workspace, chi.numpy(), 'samples', sampler=config.sampler)


def _evaluation_data(config: RunConfig, workspace: Workspace) -> np.ndarray:
    """Return the component vectors the likelihood is evaluated on.
    """
    if config.test_data is None:
        chi = workspace.chi
    else:
        raw = load_images(config.test_data, workspace.dataset.shape, split='test')
        test = dequantize_and_center(raw.samples, config.quant_levels, config.seed,
                                     workspace.dataset.mean, split='test')
        chi = forward_transform(workspace.basis, test.flat())
    return chi[:config.num_items(DEFAULT_NUM_NLL)]


def _nll(config: RunConfig, workspace: Workspace, score, schedule: Schedule, chi: np.ndarray):
    """Run the likelihood evaluation with the configured settings.
    """
    return ode_nll(score, schedule, chi, basis=workspace.basis, levels=workspace.dataset.levels,
                   n_probes=config.probes, seed=config.seed, method=config.ode_method,
                   rtol=config.tol, atol=config.tol)


def nll_command(config: RunConfig) -> None:
    """Evaluate the negative log-likelihood.
    """
    workspace = prepare(config)
    schedule = require_prior(make_schedule(config, workspace))
    score = make_score(config, workspace)
    result = _nll(config, workspace, score, schedule, _evaluation_data(config, workspace))
    params = schedule.params
    header = ('dataset', 'schedule', 'a', 'b', 'r', 'gamma_denoise', 'gamma_noise',
              'nats_per_dim', 'bits_per_dim', 'stderr', 'count')
    row = (workspace.name, schedule.family, params.get('a', ''), params.get('b', ''),
           params.get('r', ''), params.get('gamma_denoise', ''), params.get('gamma_noise', ''),
           result.nats_per_dim, result.bits_per_dim, result.stderr, result.count)
    write_csv(_output(config, 'nll.csv'), header, [row])
    print(f'{result.bits_per_dim:.6f} bits/dim')


def sweep_command(config: RunConfig) -> None:
    """Evaluate the likelihood over a grid of a (and r) values.
    """
    for name, families in SWEPT_PARAMETERS.items():
        if getattr(config, name) is not None and config.schedule not in families:
            raise ConfigurationError(f'The {config.schedule} schedule has no parameter "{name}" '
                                     f'to sweep (allowed for: {", ".join(families)})')
    workspace = prepare(config)
    a_values = config.a.grid() if config.a is not None else (None,)
    r_values = config.r.grid() if config.r is not None else (None,)
    base = config.fixed_schedule_parameters(exclude=('a', 'r'))
    grid = []
    for r in r_values:
        for a in a_values:
            params = dict(base)
            params.update({key: value for key, value in (('a', a), ('r', r)) if value is not None})
            grid.append((r, a, require_prior(make_schedule(config, workspace, params))))
    score = make_score(config, workspace)
    chi = _evaluation_data(config, workspace)
    rows = []
    for r, a, schedule in grid:
        result = _nll(config, workspace, score, schedule, chi)
        rows.append(('' if r is None else r, '' if a is None else a, result.nats_per_dim,
                     result.bits_per_dim, result.stderr, result.count))
    write_csv(_output(config, 'sweep.csv'), ('r', 'a', 'nats_per_dim', 'bits_per_dim', 'stderr',
                                             'count'), rows)


def extend_command(config: RunConfig) -> None:
    """Generate image strips by sequential extension.
    """
    workspace = prepare(config)
    schedule = make_schedule(config, workspace)
    score = make_score(config, workspace)
    strip, index = extend_image(score, schedule, workspace.basis.shape, config.k, config.cycles,
                                config.seed, config.num_items(1),
                                steps=config.steps or DEFAULT_SAMPLER_STEPS)
    write_container(_output(config, 'strip.gudsamples'), SAMPLES_MAGIC,
                    {'shape': list(strip.shape[1:]), 'seed': config.seed, 'k': config.k},
                    {'samples': strip})
    write_csv(_output(config, 'strip_index.csv'), ('cycle', 'first_column', 'last_column'), index)


def reconstruct_command(config: RunConfig) -> None:
    """Reconstruct a partially noised image.
    """
    workspace = prepare(config)
    if config.image_index >= len(workspace.chi):
        raise ConfigurationError(f'Image index {config.image_index} out of range')
    schedule = make_schedule(config, workspace)
    score = make_score(config, workspace)
    variants = reconstruct(score, schedule, workspace.chi[config.image_index], config.t_noise,
                           config.seed, config.variants, config.steps or DEFAULT_SAMPLER_STEPS)
    export_samples(config, workspace, variants, 'reconstructions', t_noise=config.t_noise,
                   image_index=config.image_index)


def schedule_viz_command(config: RunConfig) -> None:
    """Write the gamma, log-SNR and beta paths of the schedule to csv.
    """
    workspace = prepare(config)
    schedule = make_schedule(config, workspace)
    log_var = workspace.estimate.log_var
    rows = []
    for t in np.linspace(0., 1., config.points):
        state = schedule.state(t)
        snr = log_snr(state, log_var)
        beta = beta_from_schedule(schedule, t)
        for component in range(schedule.dim):
            rows.append((float(t), component, float(state.gamma[component]),
                         float(snr[component]), float(beta[component])))
    write_csv(_output(config, 'schedule.csv'), ('t', 'component', 'gamma', 'log_snr', 'beta'), rows)


def convert_command(config: RunConfig) -> None:
    """Convert between csv pixel dumps and GUDIMGS files.
    """
    if config.input.lower().endswith('.csv'):
        if config.shape is None:
            raise ConfigurationError('csv conversion requires --shape')
        csv_to_images(config.input, config.target, config.shape)
    else:
        images_to_csv(config.input, config.target)


COMMAND_FUNCTIONS = {
    'fit-basis': fit_basis_command,
    'train': train_command,
    'sample': sample_command,
    'nll': nll_command,
    'extend': extend_command,
    'reconstruct': reconstruct_command,
    'schedule-viz': schedule_viz_command,
    'sweep': sweep_command,
    'convert': convert_command,
}


def build_parser() -> ArgumentParser:
    """Create the main parser, with one subparser per command.
    """
    parser = ArgumentParser(description='Generative unified diffusion toolkit.', prog='gud')
    subparsers = parser.add_subparsers(dest='command', metavar='command', required=True)
    for command in COMMANDS:
        subparser = subparsers.add_parser(command, help=_DESCRIPTIONS[command],
                                          description=_DESCRIPTIONS[command],
                                          epilog=_EPILOGS.get(command),
                                          argument_default=argparse.SUPPRESS)
        add_flags(subparser, command)
    return parser


def configure_logger(verbose: bool = False) -> None:
    """Send the log messages to the standard error.
    """
    logger.remove()
    logger.add(sys.stderr, level='DEBUG' if verbose else 'INFO')


def run(argv: Optional[List[str]] = None) -> int:
    """Run a command, returning the exit status.

    The exit status is 0 on success, 1 for invalid configurations or
    malformed inputs, 2 for missing input files and 3 for numerical failures.
    """
    argv = sys.argv[1:] if argv is None else list(argv)
    verbose = '--verbose' in argv
    configure_logger(verbose)
    try:
        namespace = build_parser().parse_args(argv)
        config = build_config(namespace.command, namespace)
        torch.set_num_threads(config.threads)
        mktree(config.output)
        COMMAND_FUNCTIONS[config.command](config)
    except SystemExit as exception:
        return 0 if exception.code in (None, 0) else 1
    except MissingInputError as exception:
        return _fail(exception, 2, verbose)
    except NumericalError as exception:
        return _fail(exception, 3, verbose)
    except ValueError as exception:
        return _fail(exception, 1, verbose)
    return 0


def _fail(exception: Exception, status: int, verbose: bool) -> int:
    """Log a failure and return the corresponding exit status.
    """
    if verbose:
        logger.exception(exception)
    else:
        logger.error(f'{exception.__class__.__name__}: {exception}')
    return status


def main() -> None:
    """Command-line entry point.
    """
    sys.exit(run())



if __name__ == '__main__':
    main()
