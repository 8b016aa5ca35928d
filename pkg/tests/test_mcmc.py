import mpmath as mp
import numpy as np
import pytest
from scipy import stats

from critsampler import mcmc
from critsampler.exact import boltzmann_table, exact_energy, exact_logZ
from critsampler.lattice import LatticeSpec, config_index, energy
from critsampler.rng import make_rng

from .conftest import ENUM_044, within_sigma


def chi2_state_test(method, spec, n_updates, thin, seed):
    """Chi-square p-value of thinned chain states against the Boltzmann table."""
    res = mcmc.run_chain(method, spec, n_updates, make_rng(seed), record_states=True)
    codes = res.codes[::thin]
    _, _, logp = boltzmann_table(spec)
    counts = np.bincount(codes, minlength=len(logp))
    return stats.chisquare(counts, np.exp(logp) * len(codes)).pvalue


def test_metropolis_infinite_temperature_accepts_everything(rng):
    spec = LatticeSpec(4, beta=0.0)
    cfg = np.ones(16, dtype=np.int8)
    cfg2, acc = mcmc.metropolis_sweep(cfg, spec, rng)
    assert acc == 1.0
    np.testing.assert_array_equal(cfg2, -cfg)


def test_metropolis_zero_temperature_freezes(rng):
    spec = LatticeSpec(4, beta=50.0)
    cfg = np.ones(16, dtype=np.int8)
    cfg2, acc = mcmc.metropolis_sweep(cfg, spec, rng)
    assert acc == 0.0
    np.testing.assert_array_equal(cfg2, cfg)


def test_sweeps_return_valid_spins(rng):
    spec = LatticeSpec(8, beta=0.44)
    cfg = rng.choice(np.array([-1, 1], dtype=np.int8), size=64)
    for out in (
        mcmc.heatbath_sweep(cfg, spec, rng),
        mcmc.swendsen_wang_update(cfg, spec, rng),
        mcmc.wolff_update(cfg, spec, rng)[0],
        mcmc.metropolis_sweep(cfg, spec, rng)[0],
    ):
        assert out.shape == (64,) and set(np.unique(out)) <= {-1, 1}


def test_heatbath_deterministic_limit(rng):
    # at huge beta every site aligns with its (unanimous) neighbours
    spec = LatticeSpec(4, beta=50.0)
    cfg = np.ones(16, dtype=np.int8)
    np.testing.assert_array_equal(mcmc.heatbath_sweep(cfg, spec, rng), cfg)


def test_heatbath_zero_field_is_fair():
    # beta = 0 means every site is an independent fair coin
    spec = LatticeSpec(8, beta=0.0)
    r = make_rng(3)
    cfg = np.ones(64, dtype=np.int8)
    ups = 0
    for _ in range(200):
        cfg = mcmc.heatbath_sweep(cfg, spec, r)
        ups += (cfg > 0).sum()
    frac = ups / (200 * 64)
    assert abs(frac - 0.5) < 4 * 0.5 / np.sqrt(200 * 64)


def test_wolff_add_probability():
    assert mcmc.wolff_add_probability(0.44) == pytest.approx(float(1 - mp.exp(-mp.mpf("0.88"))), rel=1e-14)
    assert mcmc.wolff_add_probability(0.44) == pytest.approx(0.58521708831842, abs=1e-13)
    assert mcmc.wolff_add_probability(0.0) == 0.0


def test_wolff_infinite_temperature_single_site(rng):
    spec = LatticeSpec(8, beta=0.0)
    cfg = np.ones(64, dtype=np.int8)
    for _ in range(20):
        new, size = mcmc.wolff_update(cfg, spec, rng)
        assert size == 1
        assert (new != cfg).sum() == 1
        cfg = new


def test_wolff_zero_temperature_flips_everything(rng):
    spec = LatticeSpec(8, beta=50.0)
    cfg = np.ones(64, dtype=np.int8)
    new, size = mcmc.wolff_update(cfg, spec, rng)
    assert size == 64
    np.testing.assert_array_equal(new, -cfg)


def test_swendsen_wang_bonded_pair_table():
    # at huge beta every aligned bond is occupied: one cluster flipped w.p. 1/2
    spec = LatticeSpec(4, beta=50.0)
    r = make_rng(5)
    cfg = np.ones(16, dtype=np.int8)
    ups = 0
    n = 4000
    for _ in range(n):
        cfg = mcmc.swendsen_wang_update(cfg, spec, r)
        assert abs(cfg.sum()) == 16
        ups += cfg[0] > 0
    assert abs(ups / n - 0.5) < 4 * 0.5 / np.sqrt(n)


def test_swendsen_wang_infinite_temperature_uniform():
    spec = LatticeSpec(2, beta=0.0)
    p = chi2_state_test("swendsen-wang", spec, 200_000, 1, seed=11)
    assert p > 0.01


@pytest.mark.parametrize("method", ["heatbath", "wolff", "swendsen-wang"])
def test_n2_state_distribution(method):
    spec = LatticeSpec(2, beta=0.44)
    assert chi2_state_test(method, spec, 1_000_000, 20, seed=1) > 0.01


def raster_metropolis_kernel(spec):
    """Exact transition matrix of one raster-order Metropolis sweep."""
    states, H, _ = boltzmann_table(spec)
    n = len(states)
    P = np.eye(n)
    for v in range(spec.V):
        T = np.zeros((n, n))
        for i, s in enumerate(states):
            t = s.copy()
            t[v] = -t[v]
            j = config_index(t[None])[0]
            a = min(1.0, np.exp(-spec.beta * (H[j] - H[i])))
            T[i, j] += a
            T[i, i] += 1 - a
        P = P @ T
    return P


def test_raster_metropolis_n2_kernel_is_stationary_but_reducible():
    # zero-cost flips are always accepted, so at N=2 the fixed visiting order
    # traps the chain: states with a single odd spin on the anti-diagonal form
    # closed classes never reached from the ordered states
    spec = LatticeSpec(2, beta=0.44)
    P = raster_metropolis_kernel(spec)
    _, _, logp = boltzmann_table(spec)
    pi = np.exp(logp)
    np.testing.assert_allclose(pi @ P, pi, atol=1e-14)
    reach = np.linalg.matrix_power(P + np.eye(16), 16) > 0
    assert not reach[15].all()
    np.testing.assert_array_equal(np.flatnonzero(~reach[15]), [2, 4, 11, 13])
    res = mcmc.run_chain("metropolis", spec, 100_000, make_rng(1), record_states=True)
    assert not np.isin(res.codes, [2, 4, 11, 13]).any()


@pytest.mark.parametrize("method", mcmc.METHODS)
def test_n4_observables_match_enumeration(method):
    spec = LatticeSpec(4, beta=0.44)
    res = mcmc.run_chain(method, spec, 100_000, make_rng(2))
    e, de = res.mean_and_error("energies")
    m, dm = res.mean_and_error("abs_mags")
    assert within_sigma(e, de, ENUM_044[4]["energy"])
    assert within_sigma(m, dm, ENUM_044[4]["absm"])


def test_wolff_n8_matches_exact_energy():
    spec = LatticeSpec(8, beta=0.44)
    res = mcmc.run_chain("wolff", spec, 100_000, make_rng(4))
    e, de = res.mean_and_error("energies")
    assert within_sigma(e, de, exact_energy(spec))


def test_cluster_algorithms_agree_at_n8():
    spec = LatticeSpec(8, beta=0.44)
    a = mcmc.run_chain("wolff", spec, 50_000, make_rng(6))
    b = mcmc.run_chain("swendsen-wang", spec, 50_000, make_rng(7))
    for name in ("energies", "abs_mags"):
        (x, dx), (y, dy) = a.mean_and_error(name), b.mean_and_error(name)
        assert abs(x - y) <= 3 * np.hypot(dx, dy)


def test_chain_statistics_and_energy_consistency():
    spec = LatticeSpec(8, beta=0.44)
    res = mcmc.run_chain("heatbath", spec, 2000, make_rng(8))
    assert res.stats.tau_int >= 0.5
    assert res.stats.burn_in >= 1000
    assert res.stats.acceptance_rate == 1.0
    assert res.energies[-1] == energy(res.final, spec)
    m = mcmc.run_chain("metropolis", spec, 2000, make_rng(8))
    assert 0.0 < m.stats.acceptance_rate < 1.0


def test_chain_reproducible():
    spec = LatticeSpec(8, beta=0.44)
    a = mcmc.run_chain("swendsen-wang", spec, 500, make_rng(9))
    b = mcmc.run_chain("swendsen-wang", spec, 500, make_rng(9))
    np.testing.assert_array_equal(a.energies, b.energies)
    np.testing.assert_array_equal(a.final, b.final)


def test_unknown_method():
    with pytest.raises(ValueError):
        mcmc.run_chain("glauber", LatticeSpec(4, beta=0.4), 10, make_rng(0))


def test_tau_int_white_noise():
    x = make_rng(10).normal(size=100_000)
    assert mcmc.tau_int(x) == pytest.approx(0.5, abs=0.1)


def test_tau_int_ar1():
    rho = 0.9
    r = make_rng(11)
    n = 200_000
    eps = r.normal(size=n)
    x = np.empty(n)
    x[0] = eps[0]
    for t in range(1, n):
        x[t] = rho * x[t - 1] + eps[t]
    assert mcmc.tau_int(x) == pytest.approx((1 + rho) / (2 * (1 - rho)), rel=0.15)


def test_tau_int_errors():
    with pytest.raises(mcmc.DegenerateSeriesError):
        mcmc.tau_int(np.ones(500))
    with pytest.raises(ValueError):
        mcmc.tau_int(np.arange(50.0))


def test_autocorrelation_starts_at_one():
    x = make_rng(12).normal(size=1000)
    rho = mcmc.autocorrelation(x)
    assert rho[0] == pytest.approx(1.0)


def test_ais_beta_zero_exact():
    spec = LatticeSpec(4, beta=0.0)
    logZ, err = mcmc.ais_logZ(spec, 8, 16, make_rng(13))
    assert logZ == pytest.approx(16 * np.log(2), abs=1e-12)
    assert err == 0.0


def test_ais_n4_matches_enumeration():
    spec = LatticeSpec(4, beta=0.44)
    logZ, err = mcmc.ais_logZ(spec, 64, 64, make_rng(14))
    assert within_sigma(logZ, err, ENUM_044[4]["logZ"])


def test_ais_n8_matches_exact():
    spec = LatticeSpec(8, beta=0.44)
    logZ, err = mcmc.ais_logZ(spec, 128, 128, make_rng(15))
    assert within_sigma(logZ, err, exact_logZ(spec))


def test_ais_validation():
    spec = LatticeSpec(4, beta=0.44)
    with pytest.raises(ValueError):
        mcmc.ais_logZ(spec, 1, 16, make_rng(0))
    with pytest.raises(ValueError):
        mcmc.ais_logZ(spec, 8, 4, make_rng(0))


def test_chain_samples_shape_and_thinning():
    spec = LatticeSpec(4, beta=0.44)
    s = mcmc.chain_samples("wolff", spec, 50, make_rng(16), thin=3)
    assert s.shape == (50, 16) and s.dtype == np.int8
