"""Probability-model tests: quantizers, the two rate models, and the
quantized CDF tables that feed the range coder."""

import numpy as np
import pytest
from scipy import special

from picm import entropy
from picm.diffcore.gradcheck import grad_check
from picm.diffcore.optim import Adam
from picm.diffcore.tensor import Tensor
from picm.entropy import (SCALE_LEVELS, SCALE_MIN, TABLE_TOTAL, CdfTable,
                          EntropyError, FactorizedModel, GaussianParams,
                          build_cdf_tables, factorized_rate, gaussian_rate,
                          quantize, tables_from_arrays, tables_to_arrays)


def gaussian_bits_oracle(v, mu, sigma):
    """Reference bit count straight from the normal CDF in float64."""
    sigma = max(sigma, SCALE_MIN)
    upper = special.ndtr((v - mu + 0.5) / sigma)
    lower = special.ndtr((v - mu - 0.5) / sigma)
    return -np.log2(max(upper - lower, entropy.LIKELIHOOD_FLOOR))


# -- quantize -----------------------------------------------------------------------


def test_round_mode_plain():
    q = quantize(Tensor(np.array([0.6, -0.6, 0.4])), "round")
    np.testing.assert_array_equal(q.data, [1.0, -1.0, 0.0])


def test_round_mode_ties_away_from_zero():
    q = quantize(Tensor(np.array([0.5, -0.5, 1.5, -1.5])), "round")
    np.testing.assert_array_equal(q.data, [1.0, -1.0, 2.0, -2.0])


def test_round_mode_centers_on_mean():
    y = Tensor(np.array([3.2]))
    mu = Tensor(np.array([3.0]))
    q = quantize(y, "round", means=mu)
    assert q.data[0] == pytest.approx(3.0)
    # coded symbol is the integer residual
    assert float(q.data[0] - mu.data[0]).is_integer()


def test_noise_mode_is_uniform():
    """Monte-Carlo check that the relaxation adds U(-1/2, 1/2)."""
    rng = np.random.default_rng(0)
    y = Tensor(np.zeros(100_000, dtype=np.float64))
    u = quantize(y, "noise", rng=rng).data
    assert np.abs(u).max() <= 0.5
    assert -0.01 < u.mean() < 0.01


def test_noise_mode_repeatable_with_fixed_array():
    y = Tensor(np.arange(6, dtype=np.float32))
    noise = np.full(6, 0.25, dtype=np.float32)
    a = quantize(y, "noise", noise=noise)
    b = quantize(y, "noise", noise=noise)
    np.testing.assert_array_equal(a.data, b.data)


def test_noise_mode_needs_rng_or_noise():
    with pytest.raises(EntropyError):
        quantize(Tensor(np.zeros(3)), "noise")


def test_unknown_mode_rejected():
    with pytest.raises(EntropyError):
        quantize(Tensor(np.zeros(3)), "dither")


# -- Gaussian conditional -------------------------------------------------------------


def test_gaussian_rate_at_mean_unit_scale():
    gp = GaussianParams(mean=Tensor(np.zeros(1)), scale=Tensor(np.ones(1)))
    bits = gaussian_rate(Tensor(np.zeros(1)), gp).data[0]
    assert bits == pytest.approx(gaussian_bits_oracle(0.0, 0.0, 1.0), rel=1e-6)
    assert bits == pytest.approx(1.3848, abs=5e-4)


def test_gaussian_rate_at_scale_floor():
    gp = GaussianParams(mean=Tensor(np.zeros(1)), scale=Tensor(np.full(1, 1e-6)))
    bits = gaussian_rate(Tensor(np.zeros(1)), gp).data[0]
    assert bits < 0.002


@pytest.mark.parametrize("seed", range(5))
def test_gaussian_rate_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(32)
    mu = rng.standard_normal(32)
    sigma = np.abs(rng.standard_normal(32)) + 0.05
    gp = GaussianParams(mean=Tensor(mu), scale=Tensor(sigma))
    bits = gaussian_rate(Tensor(v), gp).data
    expect = [gaussian_bits_oracle(v[i], mu[i], sigma[i]) for i in range(32)]
    np.testing.assert_allclose(bits, expect, rtol=1e-5, atol=1e-7)


def test_gaussian_rate_symmetric_around_mean():
    gp = GaussianParams(mean=Tensor(np.zeros(5)), scale=Tensor(np.full(5, 0.7)))
    k = Tensor(np.array([0.3, 1.0, 2.5, 4.0, 7.0]))
    plus = gaussian_rate(k, gp).data
    minus = gaussian_rate(Tensor(-k.data), gp).data
    np.testing.assert_allclose(plus, minus, rtol=1e-7)


def test_gaussian_params_shape_mismatch():
    with pytest.raises(EntropyError):
        GaussianParams(mean=Tensor(np.zeros(3)), scale=Tensor(np.zeros(4)))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gaussian_rate_gradients(seed):
    rng = np.random.default_rng(seed)
    v = Tensor(rng.standard_normal(8), requires_grad=True, dtype=np.float64)
    mu = Tensor(rng.standard_normal(8) * 0.5, requires_grad=True, dtype=np.float64)
    raw = Tensor(rng.standard_normal(8) * 0.3, requires_grad=True, dtype=np.float64)

    def graph():
        from picm.diffcore import tensor as T
        gp = GaussianParams(mean=mu, scale=T.softplus(raw) + 0.2)
        return gaussian_rate(v, gp).sum()

    assert grad_check(graph) < 1e-5


# -- factorized prior -----------------------------------------------------------------


def test_factorized_cdf_monotone_on_grid():
    model = FactorizedModel(np.random.default_rng(0), channels=4)
    grid = np.linspace(-30, 30, 1000)
    for c in range(4):
        cdf = model.cdf_values(c, grid)
        assert (np.diff(cdf) >= 0).all()
        lo, hi = model.cdf_values(c, np.array([-300.0, 300.0]))
        assert lo < 1e-6 and hi > 1 - 1e-6


def test_factorized_rate_additive_and_positive():
    rng = np.random.default_rng(1)
    model = FactorizedModel(rng, channels=3)
    z = Tensor(rng.standard_normal((2, 3, 4, 4)).astype(np.float32))
    bits = factorized_rate(z, model)
    assert bits.shape == z.shape
    assert (bits.data > 0).all()
    assert bits.sum().data == pytest.approx(bits.data.sum(), rel=1e-6)


def test_factorized_graph_agrees_with_float64_cdf():
    """bin_likelihood (graph path) against cdf_values (table path)."""
    model = FactorizedModel(np.random.default_rng(2), channels=2)
    pts = np.array([[-2.0, -0.5, 0.0, 1.5]], dtype=np.float32)
    x = Tensor(np.stack([pts, pts * 0.5]))  # (C, 1, L)
    like = model.bin_likelihood(x).data
    for c in range(2):
        vals = x.data[c, 0]
        expect = (model.cdf_values(c, vals + 0.5)
                  - model.cdf_values(c, vals - 0.5))
        np.testing.assert_allclose(like[c, 0], expect, rtol=1e-4, atol=1e-6)


def test_factorized_fits_point_mass():
    """Trained on all-zero latents the prior should spend almost nothing."""
    rng = np.random.default_rng(3)
    model = FactorizedModel(rng, channels=1)
    opt = Adam(model.trainable_parameters(), lr=5e-2)
    noise_rng = np.random.default_rng(4)
    z = np.zeros((8, 1, 2, 2), dtype=np.float32)
    for _ in range(2000):
        zt = quantize(Tensor(z), "noise", rng=noise_rng)
        loss = factorized_rate(zt, model).mean()
        model.zero_grad()
        loss.backward()
        opt.step()
    bits0 = factorized_rate(Tensor(z), model).data
    assert bits0.mean() <= 0.05


def test_factorized_rate_channel_mismatch():
    model = FactorizedModel(np.random.default_rng(5), channels=3)
    with pytest.raises(EntropyError):
        factorized_rate(Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32)), model)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_factorized_rate_gradients(seed):
    rng = np.random.default_rng(seed)
    model = FactorizedModel(rng, channels=2).astype(np.float64)
    z = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True,
               dtype=np.float64)
    assert grad_check(lambda: factorized_rate(z, model).sum()) < 1e-5


# -- CDF tables -----------------------------------------------------------------------


def test_gaussian_table_covers_tail_range():
    gp = GaussianParams(mean=Tensor(np.zeros(1)), scale=Tensor(np.ones(1)))
    table = build_cdf_tables(gp, tail_mass=1e-4)[0]
    assert table.offset <= -4
    assert table.offset + table.n_regular - 1 >= 4


def test_table_normalization_and_bin_floor():
    gp = GaussianParams(mean=Tensor(np.zeros(1)), scale=Tensor(np.full(1, 2.5)))
    table = build_cdf_tables(gp)[0]
    assert table.cum[0] == 0
    assert table.cum[-1] == TABLE_TOTAL
    assert (np.diff(table.cum.astype(np.int64)) >= 1).all()


def test_table_pmf_close_to_model_pmf():
    sigma = 1.7
    gp = GaussianParams(mean=Tensor(np.zeros(1)), scale=Tensor(np.full(1, sigma)))
    table = build_cdf_tables(gp)[0]
    snapped = SCALE_LEVELS[np.searchsorted(SCALE_LEVELS, sigma)]
    values = np.arange(table.offset, table.offset + table.n_regular)
    expect = special.ndtr((values + 0.5) / snapped) - special.ndtr((values - 0.5) / snapped)
    got = table.model_pmf()[1:-1]
    assert np.abs(got - expect).max() <= 2 ** -15


def test_scales_snap_to_next_level():
    """A sigma between table levels must use the wider (next) level."""
    sigma = float(SCALE_LEVELS[10] * 1.01)
    gp = GaussianParams(mean=Tensor(np.zeros(1)), scale=Tensor(np.full(1, sigma)))
    table = build_cdf_tables(gp)[0]
    ref = build_cdf_tables(GaussianParams(mean=Tensor(np.zeros(1)),
                                          scale=Tensor(np.full(1, float(SCALE_LEVELS[11])))))[0]
    np.testing.assert_array_equal(table.cum, ref.cum)


def test_factorized_tables_round_symbols():
    model = FactorizedModel(np.random.default_rng(6), channels=3)
    tables = build_cdf_tables(model)
    assert len(tables) == 3
    for t in tables:
        assert t.cum[0] == 0 and t.cum[-1] == TABLE_TOTAL
        assert t.n_regular >= 1


def test_table_symbol_value_roundtrip():
    table = CdfTable(offset=-3, n_regular=7,
                     cum=np.linspace(0, TABLE_TOTAL, 10).astype(np.uint32))
    for v in range(-3, 4):
        s = table.symbol_of(v)
        assert 1 <= s <= table.n_regular
        assert table.value_of(s) == v
    assert table.symbol_of(-4) == 0
    assert table.symbol_of(4) == table.n_regular + 1
    with pytest.raises(EntropyError):
        table.value_of(0)


def test_tables_serialize_through_arrays():
    model = FactorizedModel(np.random.default_rng(7), channels=2)
    tables = build_cdf_tables(model)
    arrays = tables_to_arrays(tables, "cdf/z")
    back = tables_from_arrays(arrays, "cdf/z")
    assert len(back) == len(tables)
    for a, b in zip(tables, back):
        assert a.offset == b.offset and a.n_regular == b.n_regular
        np.testing.assert_array_equal(a.cum, b.cum)


def test_bad_tail_mass_rejected():
    gp = GaussianParams(mean=Tensor(np.zeros(1)), scale=Tensor(np.ones(1)))
    with pytest.raises(EntropyError):
        build_cdf_tables(gp, tail_mass=0.7)
