"""Engine-level checks against closed-form Fock-space oracles."""

import numpy as np
import pytest

from optobell import fock
from optobell.fock import (
    EngineError,
    FockError,
    add_thermal_noise,
    apply_beamsplitter,
    apply_loss,
    apply_phase,
    apply_two_mode_squeeze,
    click_distribution,
    expected_photon_number,
    fock_state,
    occupation_marginal,
    pure_state,
    set_thermal,
    vacuum_state,
    validate_state,
)


def test_vacuum_is_pure_ground_state():
    st = vacuum_state([0], cutoff=2)
    want = np.zeros((3, 3))
    want[0, 0] = 1.0
    assert np.allclose(st.rho, want)
    st4 = vacuum_state([0, 1, 2, 3], cutoff=2)
    assert st4.dim == 81
    assert st4.trace() == pytest.approx(1.0, abs=1e-15)
    validate_state(st4)


def test_vacuum_guards():
    with pytest.raises(FockError):
        vacuum_state([], cutoff=2)
    with pytest.raises(FockError):
        vacuum_state([0, 0], cutoff=2)
    with pytest.raises(FockError):
        vacuum_state([0, -1], cutoff=2)
    with pytest.raises(FockError):
        vacuum_state([0], cutoff=1)
    with pytest.raises(FockError):
        vacuum_state([0], cutoff=5)
    # (cutoff+1)**modes may not exceed 4096: 7 modes at cutoff 3 would be 16384
    with pytest.raises(FockError):
        vacuum_state(range(7), cutoff=3)
    assert vacuum_state(range(6), cutoff=3).dim == 4096


def test_set_thermal_weights():
    st = set_thermal(vacuum_state([0], 2), 0, nbar=0.09)
    pops = occupation_marginal(st, 0)
    # geometric ratio nbar/(1+nbar) preserved by the truncation renormalization
    assert pops[1] / pops[0] == pytest.approx(0.09 / 1.09, rel=1e-12)
    assert pops[2] / pops[1] == pytest.approx(0.09 / 1.09, rel=1e-12)
    assert st.trace() == pytest.approx(1.0, abs=1e-12)

    st1 = set_thermal(vacuum_state([0], 2), 0, nbar=1.0)
    pops1 = occupation_marginal(st1, 0)
    assert np.allclose(pops1, np.array([4, 2, 1]) / 7.0)


def test_set_thermal_nbar_zero_is_identity():
    st = vacuum_state([0, 1], 3)
    out = set_thermal(st, 1, 0.0)
    assert np.allclose(out.rho, st.rho)


def test_set_thermal_requires_vacuum_mode():
    st = fock_state([0, 1], 2, (1, 0))
    with pytest.raises(FockError):
        set_thermal(st, 0, 0.1)
    # the untouched vacuum mode still accepts a thermal state
    out = set_thermal(st, 1, 0.2)
    assert out.trace() == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("p", [0.001, 0.008, 0.01])
def test_two_mode_squeeze_vacuum_closed_form(p):
    # |TMS> populations (1-eps^2) eps^{2n} on the diagonal pairs (n, n)
    st = vacuum_state([0, 1], 3)
    out = apply_two_mode_squeeze(st, 0, 1, np.sqrt(p))
    diag = np.real(np.diagonal(out.rho)).reshape(4, 4)
    for n in range(4):
        want = (1 - p) * p**n
        assert diag[n, n] == pytest.approx(want, abs=1e-6)
    off = diag - np.diag(np.diagonal(diag))
    assert np.abs(off).max() < 1e-12  # joint photon number is perfectly correlated
    assert out.trace() == pytest.approx(1.0, abs=1e-9)


def test_two_mode_squeeze_paper_scale_populations():
    out = apply_two_mode_squeeze(vacuum_state([0, 1], 3), 0, 1, np.sqrt(0.01))
    diag = np.real(np.diagonal(out.rho)).reshape(4, 4)
    assert diag[1, 1] == pytest.approx(0.0099, abs=1e-5)
    out8 = apply_two_mode_squeeze(vacuum_state([0, 1], 3), 0, 1, np.sqrt(0.008))
    diag8 = np.real(np.diagonal(out8.rho)).reshape(4, 4)
    assert diag8[0, 0] == pytest.approx(0.992, abs=1e-5)


def test_two_mode_squeeze_zero_and_guards():
    st = set_thermal(vacuum_state([0, 1], 2), 1, 0.05)
    assert apply_two_mode_squeeze(st, 0, 1, 0.0) is st
    with pytest.raises(FockError):
        apply_two_mode_squeeze(st, 0, 1, 1.0)
    with pytest.raises(FockError):
        apply_two_mode_squeeze(st, 0, 0, 0.1)


def test_two_mode_squeeze_discard_bound_at_cutoff4():
    # at cutoff 4 the projection discards < 1e-6 for eps^2 <= 0.05
    st = vacuum_state([0, 1], 4)
    u = fock._tms_block(5, np.sqrt(0.05), 0.0)
    rho = fock._apply_op(st, u, (0, 1))
    discarded = 1.0 - float(np.trace(rho).real)
    assert 0.0 <= discarded < 1e-6


def test_two_mode_squeeze_thermal_input_mean_photons():
    # amplifier relation: n_opt = (1 + n_mech) sinh^2 r, n_mech -> n + (1+2n) sinh^2 r
    nbar, p = 0.07, 0.01
    st = set_thermal(vacuum_state([0, 1], 3), 1, nbar)
    out = apply_two_mode_squeeze(st, 0, 1, np.sqrt(p))
    sinh2 = p / (1 - p)
    n_opt = expected_photon_number(out, 0)
    # truncated thermal tail shifts the oracle at the few-1e-4 level
    assert n_opt == pytest.approx((1 + nbar) * sinh2, rel=5e-3)


def test_beamsplitter_identity_and_swap():
    st = fock_state([0, 1], 2, (1, 0))
    assert apply_beamsplitter(st, 0, 1, 1.0) is st
    out = apply_beamsplitter(st, 0, 1, 0.0)
    pops = occupation_marginal(out, 1)
    assert pops[1] == pytest.approx(1.0, abs=1e-12)
    assert expected_photon_number(out, 0) == pytest.approx(0.0, abs=1e-12)


def test_beamsplitter_balanced_splits_single_photon():
    st = fock_state([0, 1], 2, (1, 0))
    out = apply_beamsplitter(st, 0, 1, 0.5)
    assert expected_photon_number(out, 0) == pytest.approx(0.5, abs=1e-12)
    assert expected_photon_number(out, 1) == pytest.approx(0.5, abs=1e-12)


def test_beamsplitter_conserves_total_photon_number():
    st = fock_state([0, 1], 3, (2, 1))
    out = apply_beamsplitter(st, 0, 1, 0.3, phase=0.7)
    diag = np.real(np.diagonal(out.rho)).reshape(4, 4)
    total = np.zeros(7)
    for i in range(4):
        for j in range(4):
            total[i + j] += diag[i, j]
    assert total[3] == pytest.approx(1.0, abs=1e-12)
    assert out.trace() == pytest.approx(1.0, abs=1e-12)


def test_phase_identity_and_sign_flip():
    st = pure_state([0], 2, {(0,): 1.0, (1,): 1.0})
    out0 = apply_phase(st, 0, 0.0)
    assert np.allclose(out0.rho, st.rho)
    out2pi = apply_phase(st, 0, 2 * np.pi)
    assert np.allclose(out2pi.rho, st.rho, atol=1e-12)
    outpi = apply_phase(st, 0, np.pi)
    want = pure_state([0], 2, {(0,): 1.0, (1,): -1.0})
    assert np.allclose(outpi.rho, want.rho, atol=1e-12)


def test_phase_covariance_through_beamsplitter():
    # e^{i phi n_a} before a splitter equals splitter with shifted phase
    st = pure_state([0, 1], 2, {(1, 0): 1.0, (0, 1): 1.0})
    phi = 0.37
    a = apply_beamsplitter(apply_phase(st, 0, phi), 0, 1, 0.5, phase=0.0)
    b = apply_phase(apply_beamsplitter(st, 0, 1, 0.5, phase=-phi), 0, phi)
    assert np.allclose(a.rho, b.rho, atol=1e-12)


def test_loss_on_single_photon():
    st = fock_state([0], 2, (1,))
    out = apply_loss(st, 0, 0.03)
    pops = occupation_marginal(out, 0)
    assert pops[1] == pytest.approx(0.03, abs=1e-15)
    assert pops[0] == pytest.approx(0.97, abs=1e-15)
    assert apply_loss(st, 0, 1.0) is st


def test_loss_on_thermal_closed_form():
    # loss eta on thermal nbar gives thermal eta*nbar (up to truncation tails)
    st = set_thermal(vacuum_state([0], 4), 0, 0.09)
    out = apply_loss(st, 0, 0.5)
    want = set_thermal(vacuum_state([0], 4), 0, 0.045)
    assert np.allclose(occupation_marginal(out, 0), occupation_marginal(want, 0), atol=5e-6)
    # mean photon number scales exactly by eta within the truncated space
    assert expected_photon_number(out, 0) == pytest.approx(
        0.5 * expected_photon_number(st, 0), rel=1e-12)


def test_loss_composes_multiplicatively():
    st = apply_two_mode_squeeze(vacuum_state([0, 1], 3), 0, 1, np.sqrt(0.05))
    a = apply_loss(apply_loss(st, 0, 0.6), 0, 0.5)
    b = apply_loss(st, 0, 0.3)
    assert np.abs(a.rho - b.rho).max() < 1e-9


def test_thermal_noise_injection_adds_mean_occupancy():
    st = vacuum_state([0], 4)
    out = add_thermal_noise(st, 0, 0.05)
    assert expected_photon_number(out, 0) == pytest.approx(0.05, rel=1e-4)
    pops = occupation_marginal(out, 0)
    # amplifier output on vacuum is thermal: geometric ratio delta/(1+delta)
    assert pops[1] / pops[0] == pytest.approx(0.05 / 1.05, rel=1e-3)
    assert add_thermal_noise(st, 0, 0.0) is st
    validate_state(out)


def test_click_distribution_vacuum_and_fock():
    st = vacuum_state([0, 1], 2)
    dist = click_distribution(st, [0, 1])
    assert dist[(0, 0)] == pytest.approx(1.0, abs=1e-12)
    assert sum(dist.values()) == pytest.approx(1.0, abs=1e-12)
    st1 = fock_state([0, 1], 2, (1, 0))
    dist1 = click_distribution(st1, [0, 1])
    assert dist1[(1, 0)] == pytest.approx(1.0, abs=1e-12)
    # measured-mode order defines the pattern order
    dist_swapped = click_distribution(st1, [1, 0])
    assert dist_swapped[(0, 1)] == pytest.approx(1.0, abs=1e-12)


def test_click_distribution_tms_correlations():
    st = apply_two_mode_squeeze(vacuum_state([0, 1], 3), 0, 1, np.sqrt(0.01))
    dist = click_distribution(st, [0, 1])
    assert dist[(1, 1)] == pytest.approx(0.00995, abs=1e-4)
    assert dist[(1, 0)] == pytest.approx(0.0, abs=1e-9)
    assert dist[(0, 1)] == pytest.approx(0.0, abs=1e-9)


def test_click_distribution_threshold_counts_multiphoton_once():
    st = fock_state([0], 2, (2,))
    dist = click_distribution(st, [0])
    assert dist[(1,)] == pytest.approx(1.0, abs=1e-12)


def test_trace_preserved_through_pipeline():
    st = vacuum_state([0, 1, 2], 2)
    st = set_thermal(st, 1, 0.09)
    st = apply_two_mode_squeeze(st, 0, 1, np.sqrt(0.01))
    st = apply_phase(st, 0, 1.234)
    st = apply_beamsplitter(st, 1, 2, 0.97)
    st = add_thermal_noise(st, 1, 0.03)
    st = apply_loss(st, 0, 0.034)
    assert st.trace() == pytest.approx(1.0, abs=1e-9)
    validate_state(st)


def test_operations_do_not_mutate_input():
    st = vacuum_state([0, 1], 2)
    before = st.rho.copy()
    apply_two_mode_squeeze(st, 0, 1, 0.1)
    apply_beamsplitter(st, 0, 1, 0.5)
    apply_phase(st, 0, 0.3)
    apply_loss(st, 0, 0.5)
    add_thermal_noise(st, 0, 0.01)
    set_thermal(st, 0, 0.1)
    assert np.array_equal(st.rho, before)


def test_mode_lookup_errors():
    st = vacuum_state([3, 5], 2)
    with pytest.raises(FockError):
        apply_phase(st, 4, 0.1)
    with pytest.raises(FockError):
        click_distribution(st, [3, 3])
