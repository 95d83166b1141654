"""Tests for the click-outcome experiment model."""

import math

import numpy as np
import pytest

from optobell.config import (
    ConfigError,
    HeatingParams,
    LeakParams,
    PhaseSetting,
    chsh_settings,
    load_config,
    replace,
)
from optobell.experiment import (
    PATTERNS,
    background_click_probability,
    build_outcome_distribution,
    heating_injection,
    ideal_correlation,
    occupancy_at,
    pattern_index,
    postselected_correlation,
    quantum_distribution,
    realized_efficiencies,
    split_efficiencies,
    sweep_correlations,
)

CFG = load_config()
NO_HEAT = HeatingParams(0.0, 0.0, 3.3e-6, 0.35e-6)


def quiet(config):
    """Config with classical backgrounds switched off."""
    return replace(config, leak=LeakParams(), dark_rate_hz=0.0)


def ideal_config(p=1e-4):
    return replace(
        quiet(CFG),
        excitation_probability=(p, p),
        readout_transfer=(0.5, 0.5),
        detection_efficiency=((0.4, 0.4), (0.4, 0.4)),
        n_init=(0.0, 0.0),
        heating=(NO_HEAT, NO_HEAT),
    )


def coincidences(probs):
    t = np.asarray(probs).reshape(2, 2, 2, 2)
    return t[1, 0, 1, 0], t[1, 0, 0, 1], t[0, 1, 1, 0], t[0, 1, 0, 1]


def fit_amplitude(thetas, es):
    basis = np.column_stack([np.cos(thetas), np.sin(thetas)])
    coef, *_ = np.linalg.lstsq(basis, np.asarray(es), rcond=None)
    return float(np.hypot(*coef))


# ---------------------------------------------------------------- occupancy


def test_occupancy_arithmetic():
    h = HeatingParams(a=0.5, b=0.45, tau=3.3e-6, eta_rise=0.35e-6)
    got = occupancy_at(h, n_init=0.07, delta_tau=200e-9)
    assert got == pytest.approx(0.2864738151589246, abs=1e-12)


def test_occupancy_limits():
    h = HeatingParams(0.0, 0.0, 3.3e-6, 0.35e-6)
    assert occupancy_at(h, 0.07, 200e-9) == pytest.approx(0.07, abs=1e-15)
    big = HeatingParams(0.5, 0.45, 3.3e-6, 0.35e-6)
    assert occupancy_at(big, 0.07, 1.0) == pytest.approx(0.07, abs=1e-12)
    with pytest.raises(ConfigError):
        occupancy_at(big, 0.07, -1e-9)


def test_heating_injection_drops_baseline():
    h = CFG.heating[0]
    dn = heating_injection(h, CFG.pulse_delay_s)
    assert dn == pytest.approx(occupancy_at(h, 0.0, CFG.pulse_delay_s), abs=1e-15)
    assert dn > 0.0
    assert heating_injection(h, 1.0) == pytest.approx(0.0, abs=1e-12)


# ------------------------------------------------------- ideal correlation


@pytest.mark.parametrize("phi_b, phi_r, vis, phi_c, expect", [
    (0.0, 0.337 * math.pi, 1.0, 0.337 * math.pi, 1.0),
    (0.0, 0.087 * math.pi, 0.80, 0.337 * math.pi, 0.565685424949238),
    (0.5 * math.pi, 0.587 * math.pi, 0.80, 0.337 * math.pi, -0.565685424949238),
])
def test_ideal_correlation_values(phi_b, phi_r, vis, phi_c, expect):
    assert ideal_correlation(phi_b, phi_r, vis, phi_c) == pytest.approx(expect, abs=1e-12)


def test_ideal_correlation_rejects_bad_visibility():
    for vis in (-0.1, 1.1):
        with pytest.raises(ConfigError):
            ideal_correlation(0.0, 0.0, vis, 0.0)


# --------------------------------------------------------- efficiency split


def test_split_efficiencies_recovers_rank_one_map():
    sa, sb, t2 = 0.069, 0.057, 0.82
    eta = ((sa / 2, sa * t2 / 2), (sb / 2, sb * t2 / 2))
    (ga, gb), (g1, g2) = split_efficiencies(eta)
    assert (ga, gb, g1, g2) == pytest.approx((sa, sb, 1.0, t2), rel=1e-12)


def test_split_efficiencies_guards():
    assert split_efficiencies(((0.0, 0.0), (0.0, 0.0))) == ((0.0, 0.0), (1.0, 1.0))
    with pytest.raises(ConfigError):
        split_efficiencies(((0.03, 0.0), (0.03, 0.02)))
    with pytest.raises(ConfigError):
        split_efficiencies(((0.6, 0.6), (0.6, 0.6)))


def test_realized_efficiencies_close_to_configured():
    real = realized_efficiencies(CFG)
    for got_pair, want_pair in zip(real, CFG.detection_efficiency):
        for got, want in zip(got_pair, want_pair):
            assert got == pytest.approx(want, rel=0.025)


# ------------------------------------------------------------ engine model


def test_noise_free_engine_follows_cosine():
    cfg = ideal_config()
    thetas = np.linspace(0.0, 2.0 * math.pi, 13)
    es = sweep_correlations(cfg, 0.0, CFG.phi_c + thetas)
    for theta, e in zip(thetas, es):
        assert e == pytest.approx(math.cos(theta), abs=1e-4)


def test_no_excitation_means_no_clicks():
    cfg = replace(ideal_config(), excitation_probability=(0.0, 0.0))
    dist = build_outcome_distribution(cfg, PhaseSetting(0.0, 0.0))
    assert dist.probability((0, 0, 0, 0)) == pytest.approx(1.0, abs=1e-12)


def test_antiphase_kills_same_detector_coincidences():
    dist = build_outcome_distribution(
        ideal_config(), PhaseSetting(0.0, CFG.phi_c + math.pi))
    n11, n12, n21, n22 = coincidences(dist.probs)
    assert n11 / (n11 + n12 + n21 + n22) < 1e-4


def test_correlation_depends_on_phase_sum_only():
    cfg = replace(CFG, leak=replace(CFG.leak, modulation=(0.0, 0.0)))
    pairs = [((0.3, 1.1), (0.9, 0.5)), ((1.4, 0.0), (0.2, 1.2))]
    for (b1, r1), (b2, r2) in pairs:
        e1 = postselected_correlation(
            build_outcome_distribution(cfg, PhaseSetting(b1, r1)).probs)
        e2 = postselected_correlation(
            build_outcome_distribution(cfg, PhaseSetting(b2, r2)).probs)
        assert e1 == pytest.approx(e2, abs=1e-10)


def test_two_pi_periodicity():
    phi_r = 0.7
    e1 = postselected_correlation(
        build_outcome_distribution(CFG, PhaseSetting(0.0, phi_r)).probs)
    e2 = postselected_correlation(
        build_outcome_distribution(CFG, PhaseSetting(0.0, phi_r + 2.0 * math.pi)).probs)
    assert e1 == pytest.approx(e2, abs=1e-12)


def test_readout_relabel_flips_correlation():
    dist = build_outcome_distribution(CFG, chsh_settings(CFG)[0])
    swapped = dist.probs.reshape(2, 2, 2, 2)[:, :, ::-1, ::-1].reshape(16)
    e = postselected_correlation(dist.probs)
    assert postselected_correlation(swapped) == pytest.approx(-e, rel=1e-12)


def test_more_initial_phonons_less_correlation():
    base = replace(quiet(CFG), heating=(NO_HEAT, NO_HEAT))
    magnitudes = []
    for n in (0.0, 0.05, 0.1, 0.2):
        cfg = replace(base, n_init=(n, n))
        dist = build_outcome_distribution(cfg, PhaseSetting(0.0, CFG.phi_c))
        magnitudes.append(abs(postselected_correlation(dist.probs)))
    assert all(a > b for a, b in zip(magnitudes, magnitudes[1:]))


def test_distribution_is_normalized_and_positive():
    for setting in chsh_settings(CFG):
        dist = build_outcome_distribution(CFG, setting)
        assert dist.probs.sum() == pytest.approx(1.0, abs=1e-9)
        assert (dist.probs >= 0.0).all()
        assert set(dist.as_dict()) == set(PATTERNS)
        assert dist.probability(PATTERNS[5]) == dist.probs[5]


def test_pattern_index_round_trip():
    for i, pattern in enumerate(PATTERNS):
        assert pattern_index(pattern) == i


# --------------------------------------------------- calibrated noise budget


def test_calibrated_correlations_regression():
    want = {(1, 1): 0.583817, (1, 2): 0.576402, (2, 1): 0.583896, (2, 2): -0.570542}
    got = {}
    for setting in chsh_settings(CFG):
        got[setting.label] = postselected_correlation(
            build_outcome_distribution(CFG, setting).probs)
        assert got[setting.label] == pytest.approx(want[setting.label], abs=2e-4)
    s = got[(1, 1)] + got[(1, 2)] + got[(2, 1)] - got[(2, 2)]
    assert s == pytest.approx(2.3147, abs=5e-4)
    assert min(abs(e) for e in got.values()) == abs(got[(2, 2)])


def test_background_free_bell_value():
    cfg = quiet(CFG)
    s = 0.0
    for setting in chsh_settings(cfg):
        e = postselected_correlation(build_outcome_distribution(cfg, setting).probs)
        s += e if setting.label != (2, 2) else -e
    assert s == pytest.approx(2.3924, abs=5e-4)


def single_device(config, idx):
    """Strip the other device out of a two-device config."""
    p = [0.0, 0.0]
    n = [0.0, 0.0]
    r = [0.0, 0.0]
    h = [NO_HEAT, NO_HEAT]
    p[idx] = config.excitation_probability[idx]
    n[idx] = config.n_init[idx]
    r[idx] = config.readout_transfer[idx]
    h[idx] = config.heating[idx]
    return replace(config, excitation_probability=tuple(p), n_init=tuple(n),
                   readout_transfer=tuple(r), heating=tuple(h))


def test_single_device_cross_correlation_in_published_range():
    for idx, low, high in ((0, 9.0, 10.0), (1, 10.8, 11.8)):
        cfg = single_device(quiet(CFG), idx)
        t = build_outcome_distribution(cfg, PhaseSetting(0.0, 0.0)).probs.reshape(2, 2, 2, 2)
        p_blue = 1.0 - t[0, 0].sum()
        p_red = 1.0 - t[:, :, 0, 0].sum()
        p_both = 1.0 - t[0, 0].sum() - t[:, :, 0, 0].sum() + t[0, 0, 0, 0]
        g2 = p_both / (p_blue * p_red)
        assert low < g2 < high


def test_sweep_visibility_fit_in_published_band():
    thetas = np.linspace(0.0, 2.0 * math.pi, 13)
    es = sweep_correlations(CFG, 0.0, CFG.phi_c + thetas)
    vis = fit_amplitude(thetas, es)
    assert 0.77 <= vis <= 0.83


def test_herald_probability_matches_published_rate():
    dist = build_outcome_distribution(quiet(CFG), chsh_settings(CFG)[0])
    t = dist.probs.reshape(2, 2, 2, 2)
    herald = t[1, 0].sum() + t[0, 1].sum()
    # published run: 645858 heralds in 597302527 trials
    assert herald == pytest.approx(645858 / 597302527, rel=0.03)


# ----------------------------------------------------------- leak and dark


def test_background_dark_only_rate():
    cfg = replace(quiet(CFG), dark_rate_hz=15.0)
    got = background_click_probability(cfg, PhaseSetting(0.0, 0.0), "blue", 1)
    assert got == pytest.approx(6e-7, rel=1e-9)


def test_background_guards():
    with pytest.raises(ConfigError):
        background_click_probability(CFG, PhaseSetting(0.0, 0.0), "green", 1)
    with pytest.raises(ConfigError):
        background_click_probability(CFG, PhaseSetting(0.0, 0.0), "red", 3)


def test_background_fringes_are_complementary():
    setting = PhaseSetting(0.0, 0.2)
    dark = CFG.dark_window_probability
    sweep = np.linspace(0.0, 2.0 * math.pi, 25)[:-1]
    for det in (1, 2):
        rates = np.array([
            background_click_probability(CFG, PhaseSetting(0.0, p), "red", det)
            for p in sweep])
        leak = (rates - dark) / (1.0 - dark)
        mean = leak.mean()
        modulation = (leak.max() - leak.min()) / (leak.max() + leak.min())
        assert modulation == pytest.approx(CFG.leak.modulation[det - 1], abs=5e-3)
        peak_phase = sweep[np.argmax(leak)]
        psi = CFG.leak.fringe_phase + (math.pi if det == 2 else 0.0)
        assert math.cos(peak_phase + psi) == pytest.approx(1.0, abs=0.05)


def test_leak_share_of_aggregated_red_counts():
    sweep = np.linspace(0.0, 2.0 * math.pi, 25)[:-1]
    dark = CFG.dark_window_probability
    for det, want in ((1, 0.07), (2, 0.17)):
        leak_total, count_total = 0.0, 0.0
        for phi in sweep:
            setting = PhaseSetting(0.0, float(phi))
            probs = quantum_distribution(CFG, setting)
            quantum = probs.reshape(2, 2, 2, 2)[:, :, 1, :].sum() if det == 1 \
                else probs.reshape(2, 2, 2, 2)[:, :, :, 1].sum()
            back = background_click_probability(CFG, setting, "red", det)
            leak = (back - dark) / (1.0 - dark)
            leak_total += leak
            count_total += 1.0 - (1.0 - quantum) * (1.0 - back)
        assert leak_total / count_total == pytest.approx(want, abs=0.01)


# ------------------------------------------------------- cutoff consistency


def test_cutoff_refinement_shifts_little():
    setting = chsh_settings(CFG)[0]
    coarse = postselected_correlation(build_outcome_distribution(CFG, setting).probs)
    fine = postselected_correlation(
        build_outcome_distribution(replace(CFG, cutoff=3), setting).probs)
    # calibrated occupancies sit near the 3-level truncation's comfort zone
    assert abs(coarse - fine) < 0.01

    mild = replace(quiet(CFG), n_init=(0.01, 0.01), heating=(NO_HEAT, NO_HEAT))
    coarse = postselected_correlation(build_outcome_distribution(mild, setting).probs)
    fine = postselected_correlation(
        build_outcome_distribution(replace(mild, cutoff=3), setting).probs)
    assert abs(coarse - fine) < 1e-3
