# tests/test_estimators.py

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.special import softmax

from src.estimators import (
    EstimatorConfig,
    bias_variance_profile,
    direct_gradient,
    encoder_log_probs,
    estimate,
    flatten_encoder,
    gsm_gradient,
    log_likelihood_table,
    prediction_generating_function,
    sample_posterior,
    score_function_gradient,
    stats_frame,
    unbiased_gradient,
)
from src.gumbel_sampling import GumbelDraw, gumbel_max_sample, make_rng, one_hot, sample_gumbel
from src.tensor_autodiff import ContractError, DomainError, bce_rows, init_mlp, mlp_values


def _expected_f(encoder, decoder, x):
    q = np.exp(encoder_log_probs(encoder, x))
    return float(np.mean(np.sum(q * log_likelihood_table(decoder, x, 4), axis=1)))


def _numeric(params, fn, h=1e-6):
    out = {}
    for name, arr in params.named_parameters().items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = fn()
            arr[idx] = old - h
            down = fn()
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        out[name] = g
    return out


def _flat(grads, params):
    return np.concatenate([grads[n].ravel() for n in params.named_parameters()])


class TestTables:
    def test_log_likelihood_table_matches_bce(self, tiny_nets):
        _, decoder, x = tiny_nets
        table = log_likelihood_table(decoder, x, 4)
        for z in range(4):
            expected = -bce_rows(mlp_values(decoder, one_hot([z], 4)), x[None, :])[0]
            assert table[0, z] == pytest.approx(expected, abs=1e-12)

    def test_encoder_log_probs_normalized(self, tiny_nets):
        encoder, _, x = tiny_nets
        np.testing.assert_allclose(np.exp(encoder_log_probs(encoder, x)).sum(), 1.0)


class TestUnbiased:
    def test_encoder_gradient_matches_finite_differences(self, tiny_nets):
        encoder, decoder, x = tiny_nets
        grads = unbiased_gradient(encoder, decoder, x, 4)
        numeric = _numeric(encoder, lambda: _expected_f(encoder, decoder, x))
        np.testing.assert_allclose(_flat(grads, encoder), _flat(numeric, encoder), atol=1e-6)

    def test_decoder_gradient_matches_finite_differences(self, tiny_nets):
        encoder, decoder, x = tiny_nets
        grads = unbiased_gradient(encoder, decoder, x, 4)
        numeric = _numeric(decoder, lambda: _expected_f(encoder, decoder, x))
        np.testing.assert_allclose(_flat(grads, decoder), _flat(numeric, decoder), atol=1e-6)

    def test_width_mismatch(self, tiny_nets):
        encoder, decoder, x = tiny_nets
        with pytest.raises(ContractError):
            unbiased_gradient(encoder, decoder, x, 5)


class TestDirect:
    @pytest.mark.slow
    def test_small_eps_average_matches_exact_gradient(self, tiny_nets, cosine):
        encoder, decoder, x = tiny_nets
        chunks, draws = 5, 200_000
        rows = np.broadcast_to(x, (draws, x.size))
        parts = [
            direct_gradient(encoder, decoder, rows, sample_gumbel((draws, 4), make_rng([21, c])), eps=0.01)
            for c in range(chunks)
        ]
        est = {key: np.mean([p[key] for p in parts], axis=0) for key in parts[0]}
        exact = unbiased_gradient(encoder, decoder, x, 4)
        assert cosine(_flat(est, encoder), _flat(exact, encoder)) > 0.99
        assert cosine(_flat(est, decoder), _flat(exact, decoder)) > 0.99

    def test_constant_decoder_gives_zero_encoder_gradient(self, tiny_nets):
        encoder, decoder, x = tiny_nets
        decoder.weights[0][:] = 0.0
        g = sample_gumbel((1, 4), make_rng(0))
        grads = direct_gradient(encoder, decoder, x, g, eps=1.0)
        for name in encoder.named_parameters():
            np.testing.assert_array_equal(grads[name], 0.0)

    def test_zero_eps_rejected(self, tiny_nets):
        encoder, decoder, x = tiny_nets
        with pytest.raises(DomainError):
            direct_gradient(encoder, decoder, x, sample_gumbel((1, 4), make_rng(0)), eps=0.0)


class TestScoreFunction:
    @pytest.mark.slow
    def test_average_matches_exact_gradient(self, tiny_nets, cosine):
        encoder, decoder, x = tiny_nets
        draws = 200_000
        rows = np.broadcast_to(x, (draws, x.size))
        z = sample_posterior(encoder, rows, make_rng(5))
        est = score_function_gradient(encoder, decoder, rows, z)
        exact = unbiased_gradient(encoder, decoder, x, 4)
        assert cosine(_flat(est, encoder), _flat(exact, encoder)) > 0.95

    def test_needs_one_z_per_row(self, tiny_nets):
        encoder, decoder, x = tiny_nets
        with pytest.raises(ContractError):
            score_function_gradient(encoder, decoder, np.stack([x, x]), [1])


class TestGumbelSoftmax:
    @pytest.mark.parametrize("tau", [0.1, 0.5, 1.0])
    def test_gradient_matches_finite_differences(self, tiny_nets, tau):
        encoder, decoder, x = tiny_nets
        rows = np.stack([x, 1.0 - x, x])
        g = sample_gumbel((3, 4), make_rng(13))
        grads = gsm_gradient(encoder, decoder, rows, g, tau=tau)

        def relaxed_f():
            codes = softmax((mlp_values(encoder, rows) + g.values) / tau, axis=1)
            return float(np.mean(-bce_rows(mlp_values(decoder, codes), rows)))

        for params in (encoder, decoder):
            numeric = _numeric(params, relaxed_f)
            for name in numeric:
                np.testing.assert_allclose(grads[name], numeric[name], rtol=1e-5, atol=1e-7)

    def test_class_swap_flips_encoder_gradient(self, rng):
        encoder = init_mlp("encoder", [6, 2], ["identity"], rng)
        encoder.weights[0][:] = 0.0
        encoder.biases[0][:] = 0.4
        decoder = init_mlp("decoder", [2, 6], ["identity"], rng)
        x = np.array([1.0, 0.0, 1.0, 1.0, 0.0, 0.0])
        grads = gsm_gradient(encoder, decoder, x, GumbelDraw(np.full((1, 2), 0.3)), tau=0.5)
        np.testing.assert_allclose(grads["encoder.W0"][:, 0], -grads["encoder.W0"][:, 1], atol=1e-12)
        np.testing.assert_allclose(grads["encoder.b0"][0], -grads["encoder.b0"][1], atol=1e-12)
        assert np.linalg.norm(grads["encoder.b0"]) > 1e-6

    def test_huge_temperature_kills_encoder_gradient(self, tiny_nets):
        encoder, decoder, x = tiny_nets
        grads = gsm_gradient(encoder, decoder, x, sample_gumbel((1, 4), make_rng(3)), tau=1e10)
        assert np.linalg.norm(_flat(grads, encoder)) < 1e-6
        assert np.linalg.norm(_flat(grads, decoder)) > 0

    def test_non_positive_temperature(self, tiny_nets):
        encoder, decoder, x = tiny_nets
        with pytest.raises(DomainError):
            gsm_gradient(encoder, decoder, x, sample_gumbel((1, 4), make_rng(3)), tau=0.0)


class TestEstimate:
    def test_config_validation(self):
        with pytest.raises(ValidationError):
            EstimatorConfig(variant="direct", eps=0.0)
        with pytest.raises(ValidationError):
            EstimatorConfig(variant="gsm", tau=0.0)
        assert EstimatorConfig(variant="gsm", tau=2.0).knob == 2.0
        assert EstimatorConfig(variant="score_function").knob == 0.0

    def test_samples_per_step_averages_draws(self, tiny_nets):
        encoder, decoder, x = tiny_nets
        config = EstimatorConfig(variant="direct", eps=0.5, samples_per_step=3)
        got = estimate(config, encoder, decoder, x, make_rng(8))

        rng = make_rng(8)
        draws = [direct_gradient(encoder, decoder, x, sample_gumbel((1, 4), rng), 0.5) for _ in range(3)]
        for key in got:
            np.testing.assert_allclose(got[key], np.mean([d[key] for d in draws], axis=0), rtol=0, atol=1e-15)

    def test_knob_override(self, tiny_nets):
        encoder, decoder, x = tiny_nets
        config = EstimatorConfig(variant="direct", eps=1.0)
        a = estimate(config, encoder, decoder, x, make_rng(1), eps=0.3)
        b = direct_gradient(encoder, decoder, x, sample_gumbel((1, 4), make_rng(1)), 0.3)
        for key in a:
            np.testing.assert_array_equal(a[key], b[key])


class TestPredictionGeneratingFunction:
    def test_derivative_at_zero_is_expected_f_of_argmax(self, rng):
        h = rng.normal(size=5)
        f = rng.normal(size=5) * 3
        draws = 20_000
        g = sample_gumbel((draws, 5), make_rng(6))
        eps = 1e-7
        slope = (prediction_generating_function(h, f, eps, g) - prediction_generating_function(h, f, 0.0, g)) / eps
        z = gumbel_max_sample(np.broadcast_to(h, (draws, 5)), g)
        assert slope == pytest.approx(float(np.mean(f[z])), rel=1e-5)


class TestBiasVariance:
    def test_profile_rows(self, tiny_nets):
        encoder, decoder, x = tiny_nets
        configs = [
            EstimatorConfig(variant="unbiased_enum"),
            EstimatorConfig(variant="direct", eps=1.0),
            EstimatorConfig(variant="gsm", tau=1.0),
            EstimatorConfig(variant="score_function"),
        ]
        reference = unbiased_gradient(encoder, decoder, x, 4)
        stats = bias_variance_profile(configs, reference, 5, encoder, decoder, x, seed=3)

        assert [s.variant for s in stats] == ["unbiased_enum", "direct", "gsm", "score_function"]
        assert stats[0].bias_l2 == 0.0 and stats[0].mean_std == 0.0
        assert all(s.trials == 5 for s in stats)
        assert len(stats[1].mean) == flatten_encoder(reference, encoder).size

        frame = stats_frame(stats)
        assert list(frame.columns) == ["knob", "bias_l2", "mean_std", "trials", "variant"]
        assert frame["knob"].tolist() == [0.0, 1.0, 1.0, 0.0]

    def test_profile_is_reproducible(self, tiny_nets):
        encoder, decoder, x = tiny_nets
        configs = [EstimatorConfig(variant="direct", eps=0.3)]
        reference = unbiased_gradient(encoder, decoder, x, 4)
        a = bias_variance_profile(configs, reference, 4, encoder, decoder, x, seed=9)
        b = bias_variance_profile(configs, reference, 4, encoder, decoder, x, seed=9)
        assert a[0].bias_l2 == b[0].bias_l2 and a[0].mean_std == b[0].mean_std

    @pytest.mark.slow
    def test_bias_grows_and_spread_shrinks_with_eps(self, tiny_nets):
        encoder, decoder, x = tiny_nets
        decoder.weights[0] /= 3.0
        grid, trials = (0.1, 0.5, 1.0, 2.0), 2000
        reference = unbiased_gradient(encoder, decoder, x, 4)
        configs = [EstimatorConfig(variant="direct", eps=e) for e in grid]
        stats = bias_variance_profile(configs, reference, trials, encoder, decoder, x, seed=11)

        # squared error of a mean = bias^2 + total variance / trials
        noise = [np.linalg.norm(s.std) / np.sqrt(trials) for s in stats]
        bias = [np.sqrt(max(s.bias_l2 ** 2 - n ** 2, 0.0)) for s, n in zip(stats, noise)]
        for i in range(len(grid) - 1):
            assert bias[i + 1] >= bias[i] - 2 * noise[i]
            assert stats[i + 1].mean_std <= stats[i].mean_std

    def test_needs_two_trials(self, tiny_nets):
        encoder, decoder, x = tiny_nets
        reference = unbiased_gradient(encoder, decoder, x, 4)
        with pytest.raises(ContractError):
            bias_variance_profile([EstimatorConfig()], reference, 1, encoder, decoder, x)
