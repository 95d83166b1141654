"""Dense density-matrix simulator for a small register of truncated bosonic modes.

A register holds a handful of harmonic modes, each truncated at a common Fock
occupation ``cutoff``, and its state is a full density matrix on the tensor
product space (dimension (cutoff+1)**n_modes, capped so everything stays dense
and exact).  All operations are pure functions: they return a new state and
never mutate their input.

Active operations (two-mode squeezing, thermal-noise injection) are generated
by exponentiating the interaction on a buffered space with two extra levels per
involved mode and projecting back, so thermal inputs are handled correctly and
the truncation error is pushed beyond the buffer.  The small population that
the projection discards is renormalized away and guarded against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

MAX_DIMENSION = 4096
MAX_MODES = 8
MIN_CUTOFF = 2
MAX_CUTOFF = 4

# mass a single active gate may push past the cutoff before we call it a
# configuration problem rather than a truncation artifact
DISCARD_GUARD = 5e-3

TRACE_TOL = 1e-9
HERM_TOL = 1e-12
EIG_FLOOR = -1e-9


class FockError(ValueError):
    """Invalid arguments or preconditions for an engine operation."""


class EngineError(RuntimeError):
    """Internal consistency failure (trace, positivity); indicates a bug."""


@dataclass(frozen=True)
class TruncatedState:
    """Density matrix of a mode register, truncated at a common Fock cutoff.

    ``modes`` are small unique non-negative integer ids in tensor order;
    ``rho`` is the (dim, dim) complex density matrix with dim =
    (cutoff+1)**len(modes).  Treat instances as immutable.
    """

    modes: tuple[int, ...]
    cutoff: int
    rho: np.ndarray

    @property
    def levels(self) -> int:
        return self.cutoff + 1

    @property
    def dim(self) -> int:
        return self.rho.shape[0]

    def axis(self, mode: int) -> int:
        try:
            return self.modes.index(mode)
        except ValueError:
            raise FockError(f"mode {mode} not in register {self.modes}") from None

    def trace(self) -> float:
        return float(np.trace(self.rho).real)


def vacuum_state(modes, cutoff: int) -> TruncatedState:
    """All-modes-in-|0> register.

    Guards: unique non-negative mode ids, 1..8 modes, cutoff 2..4, and total
    dimension (cutoff+1)**n_modes at most 4096.
    """
    modes = tuple(int(m) for m in modes)
    if not 1 <= len(modes) <= MAX_MODES:
        raise FockError(f"need 1..{MAX_MODES} modes, got {len(modes)}")
    if len(set(modes)) != len(modes) or any(m < 0 for m in modes):
        raise FockError(f"mode ids must be unique non-negative ints: {modes}")
    if not MIN_CUTOFF <= cutoff <= MAX_CUTOFF:
        raise FockError(f"cutoff must be in [{MIN_CUTOFF}, {MAX_CUTOFF}], got {cutoff}")
    dim = (cutoff + 1) ** len(modes)
    if dim > MAX_DIMENSION:
        raise FockError(
            f"register dimension {dim} exceeds {MAX_DIMENSION}; "
            "reduce the cutoff or the number of modes"
        )
    rho = np.zeros((dim, dim), dtype=np.complex128)
    rho[0, 0] = 1.0
    return TruncatedState(modes, cutoff, rho)


def fock_state(modes, cutoff: int, occupations) -> TruncatedState:
    """Product number state |n1 n2 ...><n1 n2 ...|; test plumbing."""
    st = vacuum_state(modes, cutoff)
    occupations = tuple(int(n) for n in occupations)
    if len(occupations) != len(st.modes):
        raise FockError("one occupation per mode required")
    if any(not 0 <= n <= cutoff for n in occupations):
        raise FockError(f"occupations {occupations} outside 0..{cutoff}")
    idx = 0
    for n in occupations:
        idx = idx * st.levels + n
    rho = np.zeros_like(st.rho)
    rho[idx, idx] = 1.0
    return TruncatedState(st.modes, cutoff, rho)


def pure_state(modes, cutoff: int, amplitudes: dict) -> TruncatedState:
    """Normalized pure state from {occupation tuple: amplitude}; test plumbing."""
    st = vacuum_state(modes, cutoff)
    psi = np.zeros(st.dim, dtype=np.complex128)
    for occ, amp in amplitudes.items():
        occ = tuple(int(n) for n in occ)
        if len(occ) != len(st.modes) or any(not 0 <= n <= cutoff for n in occ):
            raise FockError(f"bad occupation tuple {occ}")
        idx = 0
        for n in occ:
            idx = idx * st.levels + n
        psi[idx] = amp
    norm = np.linalg.norm(psi)
    if norm == 0:
        raise FockError("pure state needs at least one nonzero amplitude")
    psi /= norm
    return TruncatedState(st.modes, cutoff, np.outer(psi, psi.conj()))


def _creation(levels: int) -> np.ndarray:
    # a†|n> = sqrt(n+1)|n+1>
    return np.diag(np.sqrt(np.arange(1.0, levels)), -1)


def _tensor_view(state: TruncatedState) -> np.ndarray:
    n = len(state.modes)
    return state.rho.reshape([state.levels] * (2 * n))


def _apply_op(state: TruncatedState, op: np.ndarray, targets) -> np.ndarray:
    """op . rho . op† with op acting on the listed mode axes; returns a matrix."""
    n = len(state.modes)
    lv = state.levels
    k = len(targets)
    d = lv**k
    axes = [state.axis(m) for m in targets]
    t = _tensor_view(state)
    # ket side
    t = np.moveaxis(t, axes, range(k))
    t = op @ t.reshape(d, -1)
    t = np.moveaxis(t.reshape([lv] * (2 * n)), range(k), axes)
    # bra side
    bra = [n + a for a in axes]
    t = np.moveaxis(t, bra, range(k))
    t = op.conj() @ t.reshape(d, -1)
    t = np.moveaxis(t.reshape([lv] * (2 * n)), range(k), bra)
    return np.ascontiguousarray(t.reshape(state.dim, state.dim))


def _apply_kraus(state: TruncatedState, ops, targets) -> np.ndarray:
    out = np.zeros_like(state.rho)
    for op in ops:
        out += _apply_op(state, op, targets)
    return out


def _check_trace(rho: np.ndarray, where: str) -> None:
    tr = float(np.trace(rho).real)
    if abs(tr - 1.0) > TRACE_TOL:
        raise EngineError(f"{where}: trace drifted to {tr!r}")


def _renormalized(state: TruncatedState, rho: np.ndarray, where: str) -> TruncatedState:
    """Absorb projection loss from an active gate; guard against real leakage."""
    tr = float(np.trace(rho).real)
    if not 1.0 - DISCARD_GUARD <= tr <= 1.0 + TRACE_TOL:
        raise EngineError(
            f"{where}: discarded population {1.0 - tr:.3e} exceeds {DISCARD_GUARD:.0e}; "
            "increase the cutoff"
        )
    return TruncatedState(state.modes, state.cutoff, rho / tr)


def set_thermal(state: TruncatedState, mode: int, nbar: float) -> TruncatedState:
    """Replace a vacuum mode by a thermal state of mean occupation nbar.

    Weights follow the geometric law w_n ∝ (nbar/(1+nbar))**n, renormalized over
    the truncated levels.  Requires the mode to be in vacuum (so the register
    factorizes and the replacement is exact).
    """
    if nbar < 0:
        raise FockError(f"nbar must be >= 0, got {nbar}")
    ax = state.axis(mode)
    n = len(state.modes)
    t = _tensor_view(state)
    t = np.moveaxis(t, (ax, n + ax), (0, 1))
    vac_pop = float(np.trace(t[0, 0].reshape(state.dim // state.levels, -1)).real) if n > 1 else float(t[0, 0].real)
    if abs(vac_pop - 1.0) > 1e-9:
        raise FockError(f"mode {mode} must be in vacuum to set a thermal state "
                        f"(vacuum population {vac_pop!r})")
    q = nbar / (1.0 + nbar) if nbar > 0 else 0.0
    w = q ** np.arange(state.levels)
    w /= w.sum()
    out = np.zeros_like(t)
    for k in range(state.levels):
        out[k, k] = w[k] * t[0, 0]
    out = np.moveaxis(out, (0, 1), (ax, n + ax))
    return TruncatedState(state.modes, state.cutoff, np.ascontiguousarray(out.reshape(state.dim, state.dim)))


def _tms_generator(levels: int, epsilon: float, phase: float) -> np.ndarray:
    # xi a†b† - xi* ab with xi = arctanh(eps) e^{i phase}
    xi = math.atanh(epsilon) * np.exp(1j * phase)
    ad = _creation(levels)
    pair = np.kron(ad, ad)
    return xi * pair - np.conj(xi) * pair.conj().T


def _tms_block(levels: int, epsilon: float, phase: float, buffer: int = 2) -> np.ndarray:
    """Two-mode-squeeze gate exponentiated with extra levels, cut back down.

    The generator is exponentiated on (levels+buffer) per mode so that states
    with population near the cutoff still squeeze correctly; the returned
    block is the physical-subspace restriction (slightly non-unitary, the
    caller renormalizes).
    """
    lb = levels + buffer
    u = expm(_tms_generator(lb, epsilon, phase))
    keep = np.array([m * lb + n for m in range(levels) for n in range(levels)])
    return np.ascontiguousarray(u[np.ix_(keep, keep)])


def apply_two_mode_squeeze(state: TruncatedState, mode_a: int, mode_b: int,
                           epsilon: float, phase: float = 0.0) -> TruncatedState:
    """Two-mode squeeze: pair creation amplitude eps (excitation probability eps**2)."""
    if not 0.0 <= epsilon < 1.0:
        raise FockError(f"epsilon must be in [0, 1), got {epsilon}")
    if mode_a == mode_b:
        raise FockError("two-mode squeeze needs distinct modes")
    if epsilon == 0.0:
        return state
    u = _tms_block(state.levels, epsilon, phase)
    rho = _apply_op(state, u, (mode_a, mode_b))
    return _renormalized(state, rho, "two_mode_squeeze")


def apply_beamsplitter(state: TruncatedState, mode_a: int, mode_b: int,
                       transmissivity: float, phase: float = 0.0) -> TruncatedState:
    """Passive mixing of two modes; transmissivity 1 = identity, 0 = full swap.

    The generator commutes with the total photon number, so the gate is exactly
    unitary on the truncated space and conserves the joint number distribution.
    """
    if not 0.0 <= transmissivity <= 1.0:
        raise FockError(f"transmissivity must be in [0, 1], got {transmissivity}")
    if mode_a == mode_b:
        raise FockError("beamsplitter needs distinct modes")
    theta = math.acos(math.sqrt(transmissivity))
    if theta == 0.0:
        return state
    lv = state.levels
    ad = _creation(lv)
    hop = np.kron(ad, ad.T)  # a† b
    g = theta * (np.exp(1j * phase) * hop - np.exp(-1j * phase) * hop.conj().T)
    u = expm(g)
    rho = _apply_op(state, u, (mode_a, mode_b))
    _check_trace(rho, "beamsplitter")
    return TruncatedState(state.modes, state.cutoff, rho)


def apply_phase(state: TruncatedState, mode: int, phi: float) -> TruncatedState:
    """Phase-space rotation e^{i phi n} on one mode."""
    ax = state.axis(mode)
    n = len(state.modes)
    ph = np.exp(1j * phi * np.arange(state.levels))
    t = _tensor_view(state).copy()
    shape = [1] * (2 * n)
    shape[ax] = state.levels
    t *= ph.reshape(shape)
    shape = [1] * (2 * n)
    shape[n + ax] = state.levels
    t *= ph.conj().reshape(shape)
    return TruncatedState(state.modes, state.cutoff, t.reshape(state.dim, state.dim))


def _loss_kraus(levels: int, eta: float):
    # K_k takes n -> n-k with binomial amplitude; sums to identity exactly
    # because loss only moves population downward within the truncation.
    ops = []
    ns = np.arange(levels)
    for k in range(levels):
        amp = np.zeros((levels, levels))
        for n in range(k, levels):
            amp[n - k, n] = math.sqrt(math.comb(n, k) * eta ** (n - k) * (1.0 - eta) ** k)
        ops.append(amp)
    return ops


def apply_loss(state: TruncatedState, mode: int, eta: float) -> TruncatedState:
    """Bosonic loss channel with survival probability eta."""
    if not 0.0 <= eta <= 1.0:
        raise FockError(f"eta must be in [0, 1], got {eta}")
    if eta == 1.0:
        return state
    rho = _apply_kraus(state, _loss_kraus(state.levels, eta), (mode,))
    _check_trace(rho, "loss")
    return TruncatedState(state.modes, state.cutoff, rho)


def _amplifier_kraus(levels: int, delta_n: float, buffer: int = 2):
    """Kraus operators adding delta_n thermal quanta to one mode.

    Quantum-limited amplifier: a two-mode squeeze against a vacuum ancilla with
    sinh^2 r = delta_n, ancilla traced out.  K_j[m, n] = <m, j|U|n, 0> taken
    from the buffered gate.
    """
    eps = math.sqrt(delta_n / (1.0 + delta_n))
    lb = levels + buffer
    u = expm(_tms_generator(lb, eps, 0.0))
    u4 = u.reshape(lb, lb, lb, lb)  # [m, j, n, anc_in]
    return [np.ascontiguousarray(u4[:levels, j, :levels, 0]) for j in range(lb)]


def add_thermal_noise(state: TruncatedState, mode: int, delta_n: float) -> TruncatedState:
    """Inject delta_n thermal quanta of phase-insensitive noise into a mode."""
    if delta_n < 0:
        raise FockError(f"delta_n must be >= 0, got {delta_n}")
    if delta_n == 0.0:
        return state
    rho = _apply_kraus(state, _amplifier_kraus(state.levels, delta_n), (mode,))
    return _renormalized(state, rho, "add_thermal_noise")


def occupation_marginal(state: TruncatedState, mode: int) -> np.ndarray:
    """Diagonal number distribution of one mode."""
    n = len(state.modes)
    diag = np.real(np.diagonal(state.rho)).reshape([state.levels] * n)
    other = tuple(a for a in range(n) if a != state.axis(mode))
    return diag.sum(axis=other)


def expected_photon_number(state: TruncatedState, mode: int) -> float:
    pops = occupation_marginal(state, mode)
    return float(np.dot(pops, np.arange(state.levels)))


def click_distribution(state: TruncatedState, measured) -> dict:
    """Joint threshold-detector outcome distribution over the measured modes.

    Per-mode POVM {|0><0|, 1 - |0><0|}; returns {click pattern: probability}
    with patterns as 0/1 tuples ordered like ``measured``.  Exact given the
    state: only the diagonal of rho contributes.
    """
    measured = tuple(measured)
    if len(set(measured)) != len(measured) or not measured:
        raise FockError(f"measured modes must be unique and non-empty: {measured}")
    n = len(state.modes)
    diag = np.real(np.diagonal(state.rho))
    if diag.min() < EIG_FLOOR:
        raise EngineError(f"negative population {diag.min():.3e} below floor")
    diag = np.clip(diag, 0.0, None).reshape([state.levels] * n)
    axes = [state.axis(m) for m in measured]
    other = tuple(a for a in range(n) if a not in axes)
    marg = diag.sum(axis=other) if other else diag
    # after the sum the surviving axes sit in ascending position order;
    # permute them to follow the `measured` argument
    srt = sorted(axes)
    marg = marg.transpose([srt.index(a) for a in axes])
    t = marg
    for i in range(len(axes)):
        no = np.take(t, [0], axis=i)
        yes = np.take(t, range(1, state.levels), axis=i).sum(axis=i, keepdims=True)
        t = np.concatenate([no, yes], axis=i)
    return {pattern: float(t[pattern]) for pattern in np.ndindex(*([2] * len(axes)))}


def validate_state(state: TruncatedState) -> None:
    """Assert trace, Hermiticity and positivity; raises EngineError on failure."""
    tr = state.trace()
    if abs(tr - 1.0) > TRACE_TOL:
        raise EngineError(f"trace {tr!r} outside 1 +- {TRACE_TOL}")
    herm = np.abs(state.rho - state.rho.conj().T).max()
    if herm > HERM_TOL:
        raise EngineError(f"Hermiticity defect {herm:.3e} exceeds {HERM_TOL}")
    lo = float(np.linalg.eigvalsh(state.rho).min())
    if lo < EIG_FLOOR:
        raise EngineError(f"eigenvalue {lo:.3e} below floor {EIG_FLOOR}")
