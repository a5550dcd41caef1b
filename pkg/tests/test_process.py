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

"""Test suite for the process module.
"""

import unittest

import numpy as np
import torch
from loguru import logger
from numpy.testing import assert_allclose

from gud.basis import build_identity_basis, build_pca_basis, forward_transform, \
    transform_matrix
from gud.helpers import NumericalError
from gud.process import BasisScore, GaussianMixture, GaussianScore, MixtureScore, as_tensor, \
    conditional_score, divergence, epsilon_to_score, forward_sample, make_generator, \
    marginal_variance, ode_nll, ode_sample, rademacher_probes, reverse_sde_sample, \
    score_to_epsilon, score_to_velocity, tweedie_denoise
from gud.schedule import NoisingState, column_schedule, haar_column_schedule, standard_schedule


def standard_normal(dim: int) -> GaussianMixture:
    """Single-component mixture with zero mean and unit variance.
    """
    return GaussianMixture([1.], np.zeros((1, dim)), np.ones((1, dim)))


def bimodal() -> GaussianMixture:
    """Unbalanced one-dimensional bimodal mixture.
    """
    return GaussianMixture([0.3, 0.7], [[-1.5], [1.5]], [[0.25], [0.25]])


COVARIANCE = np.array([[2., 0.8, 0.1], [0.8, 1., 0.3], [0.1, 0.3, 0.5]])



class TestMixture(unittest.TestCase):

    """Unit tests for the Gaussian mixture and its exact score.
    """

    def test_invalid(self):
        """Invalid mixture parameters.
        """
        with self.assertRaises(ValueError):
            GaussianMixture([0.5, 0.6], np.zeros((2, 1)), np.ones((2, 1)))
        with self.assertRaises(ValueError):
            GaussianMixture([1.], np.zeros((1, 2)), np.ones((1, 3)))
        with self.assertRaises(ValueError):
            GaussianMixture([1.], np.zeros((1, 2)), np.zeros((1, 2)))

    def test_moments(self):
        """Sample moments against the closed form.
        """
        mix = bimodal()
        samples, labels = mix.sample(200000, np.random.default_rng(1), return_labels=True)
        self.assertAlmostEqual(labels.mean(), 0.7, delta=0.005)
        self.assertAlmostEqual(samples.var(), mix.component_variance()[0], delta=0.03)

    def test_score_gradient(self):
        """The exact score is the gradient of the exact log-density.
        """
        mix = GaussianMixture([0.2, 0.5, 0.3], [[-1., 0.5], [1., 1.], [0., -2.]],
                              [[0.3, 0.5], [1., 0.2], [0.4, 0.4]])
        score = MixtureScore(mix)
        state = NoisingState([-1., 0.5])
        chi = as_tensor(np.random.default_rng(2).standard_normal((10, 2)))
        h = 1.e-5
        for i in range(2):
            step = torch.zeros(2, dtype=torch.float64)
            step[i] = h
            diff = (score.logpdf(chi + step, state) - score.logpdf(chi - step, state)) / (2. * h)
            assert_allclose(score(chi, state)[:, i].numpy(), diff.numpy(), atol=1.e-6)

    def test_gaussian_score(self):
        """Full-covariance Gaussian oracle versus the diagonal mixture one.
        """
        variances = np.array([4., 1., 0.25])
        state = NoisingState([-2., 0., 1.])
        chi = as_tensor(np.random.default_rng(3).standard_normal((5, 3)))
        gaussian = GaussianScore(np.diag(variances))
        mixture = MixtureScore(GaussianMixture([1.], np.zeros((1, 3)), variances[None, :]))
        assert_allclose(gaussian(chi, state).numpy(), mixture(chi, state).numpy(), atol=1.e-12)
        assert_allclose(gaussian.logpdf(chi, state).numpy(), mixture.logpdf(chi, state).numpy(),
                        atol=1.e-12)

    def test_basis_score(self):
        """Data-space score through an orthogonal basis with equal noising.
        """
        basis = build_pca_basis(COVARIANCE)
        matrix = transform_matrix(basis)
        component_score = GaussianScore(matrix.T @ COVARIANCE @ matrix)
        state = NoisingState([0.5, 0.5, 0.5])
        phi = as_tensor(np.random.default_rng(4).standard_normal((6, 3)))
        expected = GaussianScore(COVARIANCE)(phi, state)
        actual = BasisScore(basis, component_score)(phi, state)
        assert_allclose(actual.numpy(), expected.numpy(), atol=1.e-10)



class TestForwardProcess(unittest.TestCase):

    """Unit tests for the forward kernel and the related conversions.
    """

    def test_kernel_moments(self):
        """Moments of the forward kernel.
        """
        state = NoisingState([0., 2.])
        chi0 = np.ones((100000, 2))
        chi_t = forward_sample(chi0, state, seed=5).numpy()
        assert_allclose(chi_t.mean(axis=0), state.alpha, atol=0.01)
        assert_allclose(chi_t.var(axis=0), state.sigma2, rtol=0.02)
        with self.assertRaises(ValueError):
            forward_sample([[np.nan, 0.]], state)

    def test_conditional_score(self):
        """Score of the forward kernel.
        """
        state = NoisingState([-1., 1.])
        chi0 = as_tensor([[0.5, -0.2]])
        chi_t = as_tensor([[0.1, 0.3]]).requires_grad_(True)
        alpha = as_tensor(state.alpha)
        sigma2 = as_tensor(state.sigma2)
        logpdf = -0.5 * torch.sum((chi_t - alpha * chi0)**2 / sigma2)
        grad = torch.autograd.grad(logpdf, chi_t)[0]
        assert_allclose(conditional_score(chi_t.detach(), chi0, state).numpy(), grad.numpy())
        with self.assertRaises(ValueError):
            conditional_score(chi_t.detach(), as_tensor([[0.]]), state)

    def test_conversions(self):
        """Noise, score and velocity conversions.
        """
        state = NoisingState([-1., 2.])
        eps = as_tensor([[0.3, -1.2]])
        score = epsilon_to_score(eps, state)
        assert_allclose(score_to_epsilon(score, state).numpy(), eps.numpy(), atol=1.e-14)
        chi = as_tensor([[1., 2.]])
        velocity = score_to_velocity(chi, score, np.array([2., 0.]))
        assert_allclose(velocity.numpy()[0, 1], 0.)
        assert_allclose(velocity.numpy()[0, 0], -(1. + score.numpy()[0, 0]))

    def test_tweedie(self):
        """Posterior mean for standard-normal data.
        """
        state = NoisingState([0.5, -3.])
        chi_t = as_tensor(np.random.default_rng(6).standard_normal((4, 2)))
        score = GaussianScore(np.eye(2))(chi_t, state)
        denoised = tweedie_denoise(chi_t, score, state)
        assert_allclose(denoised.numpy(), (as_tensor(state.alpha) * chi_t).numpy(), atol=1.e-12)

    def test_variance_preserving(self):
        """Unit-variance components stay unit-variance at all times.
        """
        schedule = standard_schedule(np.zeros(4), -7., 5.)
        for t in np.linspace(0., 1., 11):
            assert_allclose(marginal_variance(schedule.state(t), np.ones(4)), 1., rtol=1.e-14)



class TestSamplers(unittest.TestCase):

    """Unit tests for the reverse SDE and probability-flow ODE samplers.
    """

    def test_sde_normal(self):
        """Sampling a standard normal distribution.
        """
        schedule = standard_schedule(np.zeros(2), -7., 8.)
        samples = reverse_sde_sample(MixtureScore(standard_normal(2)), schedule, 200, 5000,
                                     seed=7).numpy()
        assert_allclose(samples.mean(axis=0), 0., atol=0.05)
        assert_allclose(samples.var(axis=0), 1., atol=0.06)

    def test_sde_mixture_weights(self):
        """The weights and means of a two-dimensional mixture are recovered.
        """
        mix = GaussianMixture([0.3, 0.7], [[-1.5, -1.5], [1.5, 1.5]], np.full((2, 2), 0.25))
        schedule = standard_schedule(np.log(mix.component_variance()), -7., 8.)
        samples = reverse_sde_sample(MixtureScore(mix), schedule, 500, 10000, seed=8).numpy()
        positive = samples.sum(axis=1) > 0.
        self.assertAlmostEqual(np.mean(positive), 0.7, delta=0.03)
        for mask, mean in ((positive, 1.5), (~positive, -1.5)):
            stderr = 0.5 / np.sqrt(mask.sum())
            assert_allclose(samples[mask].mean(axis=0), mean, atol=3. * stderr)

    def test_sde_determinism(self):
        """Same seed, same samples.
        """
        schedule = standard_schedule(np.zeros(3), -7., 5.)
        score = MixtureScore(standard_normal(3))
        first = reverse_sde_sample(score, schedule, 20, 10, seed=9)
        second = reverse_sde_sample(score, schedule, 20, 10, seed=9)
        self.assertTrue(torch.equal(first, second))

    def test_frozen_components(self):
        """Components with zero noise rate are left untouched.
        """
        schedule = column_schedule(4, 0.6, -7., 5.)
        chi = as_tensor(np.random.default_rng(10).standard_normal((8, 4)))
        out = reverse_sde_sample(MixtureScore(standard_normal(4)), schedule, 10, 8,
                                 chi_init=chi, t_start=0.1, t_end=0.)
        self.assertTrue(torch.equal(out[:, :3], chi[:, :3]))
        self.assertFalse(torch.equal(out[:, 3], chi[:, 3]))

    def test_non_finite_score(self):
        """A non-finite score aborts the integration.
        """
        schedule = standard_schedule(np.zeros(2), -7., 5.)
        with self.assertRaises(NumericalError):
            reverse_sde_sample(lambda chi, state: chi * np.nan, schedule, 5, 2)
        with self.assertRaises(ValueError):
            reverse_sde_sample(MixtureScore(standard_normal(2)), schedule, 0, 2)

    def test_prior_warning(self):
        """Starting from the prior with a schedule that does not reach it is reported.
        """
        messages = []
        handler = logger.add(messages.append, level='WARNING')
        try:
            score = MixtureScore(standard_normal(6))
            schedule = haar_column_schedule((2, 4), 0.5, 0.5, -7., 5.)
            reverse_sde_sample(score, schedule, 5, 2)
            self.assertEqual(len(messages), 1)
            self.assertIn('--haar-rescale', str(messages[0]))
            schedule = haar_column_schedule((2, 4), 0.5, 0.5, -7., 5., rescale_levels=True)
            reverse_sde_sample(score, schedule, 5, 2)
            chi = torch.zeros((2, 6), dtype=torch.float64)
            reverse_sde_sample(score, haar_column_schedule((2, 4), 0.5, 0.5, -7., 5.), 5, 2,
                               chi_init=chi, t_start=0.5)
            self.assertEqual(len(messages), 1)
        finally:
            logger.remove(handler)

    def test_ode_normal(self):
        """Probability-flow ODE sampling of a standard normal distribution.
        """
        schedule = standard_schedule(np.zeros(2), -7., 8.)
        score = MixtureScore(standard_normal(2))
        for method in ('RK45', 'rk4'):
            samples = ode_sample(score, schedule, 2000, seed=11, method=method, steps=100).numpy()
            assert_allclose(samples.var(axis=0), 1., atol=0.1)
        with self.assertRaises(ValueError):
            ode_sample(score, schedule, 10, method='euler')



class TestLikelihood(unittest.TestCase):

    """Unit tests for the probability-flow likelihood.
    """

    def test_divergence(self):
        """Exact and Hutchinson divergence of a linear map.
        """
        matrix = as_tensor(np.random.default_rng(12).standard_normal((5, 5)))
        x = as_tensor(np.zeros((3, 5)))
        exact = divergence(lambda y: y @ matrix, x)
        assert_allclose(exact.numpy(), np.trace(matrix.numpy()), atol=1.e-12)
        probes = rademacher_probes(20000, x.shape, make_generator(0))
        self.assertTrue(torch.all(torch.abs(probes) == 1.))
        estimate = divergence(lambda y: y @ matrix, x, probes)
        assert_allclose(estimate.numpy(), np.trace(matrix.numpy()), atol=0.2)

    def test_standard_normal(self):
        """NLL of standard-normal data.
        """
        data = np.random.default_rng(13).standard_normal((256, 2))
        schedule = standard_schedule(np.zeros(2), -7., 5.)
        result = ode_nll(MixtureScore(standard_normal(2)), schedule, data, rtol=1.e-6,
                         atol=1.e-6)
        expected = 0.5 * np.log(2. * np.pi) + 0.5 * np.mean(data**2)
        self.assertAlmostEqual(result.nats_per_dim, expected, delta=1.e-3)
        self.assertAlmostEqual(result.bits_per_dim, result.nats_per_dim / np.log(2.))
        self.assertEqual(result.count, 256)
        self.assertEqual(result.per_sample.shape, (256,))

    def test_anisotropic(self):
        """NLL of anisotropic Gaussian data against the exact marginal density.
        """
        variances = np.array([4., 1.])
        data = np.random.default_rng(14).standard_normal((256, 2)) * np.sqrt(variances)
        schedule = standard_schedule(np.log(variances), -7., 5.)
        score = GaussianScore(np.diag(variances))
        result = ode_nll(score, schedule, data, rtol=1.e-6, atol=1.e-6)
        exact = -score.logpdf(as_tensor(data), schedule.state(0.)).numpy().mean() / 2.
        self.assertAlmostEqual(result.nats_per_dim, exact, delta=1.e-3)
        density = 0.5 * np.log(2. * np.pi) + 0.25 * np.sum(np.log(variances)) + \
            0.25 * np.mean(np.sum(data**2 / variances, axis=1))
        self.assertAlmostEqual(result.nats_per_dim, density, delta=5.e-3)

    def test_rotation_invariance(self):
        """Pixel and (non whitened) PCA bases give the same NLL.
        """
        rng = np.random.default_rng(15)
        data = rng.multivariate_normal(np.zeros(3), COVARIANCE, size=128)
        schedule = standard_schedule(np.zeros(3), -7., 5.)
        pixel = ode_nll(GaussianScore(COVARIANCE), schedule, data, rtol=1.e-6, atol=1.e-6,
                        basis=build_identity_basis((3,)))
        basis = build_pca_basis(COVARIANCE)
        matrix = transform_matrix(basis)
        chi = forward_transform(basis, data)
        pca = ode_nll(GaussianScore(matrix.T @ COVARIANCE @ matrix), schedule, chi, basis=basis,
                      rtol=1.e-6, atol=1.e-6)
        self.assertAlmostEqual(pixel.nats_per_dim, pca.nats_per_dim, delta=1.e-3)

    def test_whitening_base_change(self):
        """The base change accounts for the whitening scaling.
        """
        rng = np.random.default_rng(16)
        data = rng.multivariate_normal(np.zeros(3), COVARIANCE, size=256)
        basis = build_pca_basis(COVARIANCE, whiten=True)
        chi = forward_transform(basis, data)
        schedule = standard_schedule(np.zeros(3), -7., 5.)
        result = ode_nll(MixtureScore(standard_normal(3)), schedule, chi, basis=basis,
                         rtol=1.e-6, atol=1.e-6)
        inverse = np.linalg.inv(COVARIANCE)
        density = 0.5 * np.log(2. * np.pi) + np.linalg.slogdet(COVARIANCE)[1] / 6. + \
            np.mean(np.einsum('ni,ij,nj->n', data, inverse, data)) / 6.
        self.assertAlmostEqual(result.nats_per_dim, density, delta=5.e-3)

    def test_hutchinson(self):
        """Hutchinson and exact divergence agree for diagonal Jacobians.
        """
        variances = np.geomspace(4., 0.5, 8)
        data = np.random.default_rng(17).standard_normal((64, 8)) * np.sqrt(variances)
        schedule = standard_schedule(np.log(variances), -7., 5.)
        score = GaussianScore(np.diag(variances))
        exact = ode_nll(score, schedule, data, exact_divergence=True)
        estimate = ode_nll(score, schedule, data, exact_divergence=False, n_probes=2)
        self.assertAlmostEqual(exact.nats_per_dim, estimate.nats_per_dim, delta=1.e-6)

    def test_dequantization_offset(self):
        """The dequantization offset is log(levels / 2) nats per dimension.
        """
        data = np.random.default_rng(18).standard_normal((16, 2))
        schedule = standard_schedule(np.zeros(2), -7., 5.)
        score = MixtureScore(standard_normal(2))
        plain = ode_nll(score, schedule, data)
        offset = ode_nll(score, schedule, data, levels=256)
        self.assertAlmostEqual(offset.nats_per_dim - plain.nats_per_dim, np.log(128.))
        self.assertAlmostEqual(offset.bits_per_dim - plain.bits_per_dim, 7.)

    def test_invalid(self):
        """Invalid inputs.
        """
        schedule = standard_schedule(np.zeros(2), -7., 5.)
        score = MixtureScore(standard_normal(2))
        with self.assertRaises(ValueError):
            ode_nll(score, schedule, np.zeros((0, 2)))
        with self.assertRaises(ValueError):
            ode_nll(score, schedule, np.zeros((4, 3)))



if __name__ == '__main__':
    unittest.main()
