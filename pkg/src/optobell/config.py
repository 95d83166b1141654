"""Experiment configuration: typed parameters and the documented text format.

Devices are indexed 0 (a) and 1 (b); detectors 1 and 2 are stored at tuple
indices 0 and 1.  Angles are radians.  The shipped ``data/paper.toml`` is the
canonical calibrated configuration; ``load_config`` reads any file with the
same layout.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace  # noqa: F401 (replace re-exported for callers)
from importlib import resources

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

TWO_PI = 2.0 * math.pi


class ConfigError(ValueError):
    """Malformed or physically invalid configuration."""


@dataclass(frozen=True)
class HeatingParams:
    """Double-exponential occupancy model: a e^{-t/tau} - b e^{-t/eta_rise}.

    tau is the slow decay back to the pre-pulse bath, eta_rise the fast
    build-up; a >= b >= 0 keeps the injected occupancy non-negative for all
    delays, and tau > eta_rise orders the two scales.
    """

    a: float
    b: float
    tau: float
    eta_rise: float

    def validate(self) -> None:
        if not (self.a >= self.b >= 0.0):
            raise ConfigError(f"heating amplitudes need a >= b >= 0, got a={self.a}, b={self.b}")
        if not (self.tau > self.eta_rise > 0.0):
            raise ConfigError(
                f"heating times need tau > eta_rise > 0, got tau={self.tau}, eta_rise={self.eta_rise}")


@dataclass(frozen=True)
class LeakParams:
    """Drive-photon leakage: window-count fractions plus fringe parameters.

    Fractions are the mean leak share of singles counts over a full phase
    sweep; fringes follow 1 + m_d cos(phi + psi_d) with psi_2 = psi_1 + pi
    (complementary splitter outputs).
    """

    red_fraction: tuple[float, float] = (0.0, 0.0)
    blue_fraction: float = 0.0
    interferometer_visibility: float = 1.0
    modulation: tuple[float, float] = (1.0, 1.0)
    fringe_phase: float = 0.0

    def validate(self) -> None:
        for f in (*self.red_fraction, self.blue_fraction):
            if not 0.0 <= f < 1.0:
                raise ConfigError(f"leak fractions must be in [0, 1), got {f}")
        if not 0.0 <= self.interferometer_visibility <= 1.0:
            raise ConfigError("interferometer visibility must be in [0, 1]")
        for m in self.modulation:
            if not 0.0 <= m <= 1.0:
                raise ConfigError(f"fringe modulation must be in [0, 1], got {m}")


@dataclass(frozen=True)
class PhaseSetting:
    """Interferometer phases for one measurement setting, stored in [0, 2pi)."""

    phi_b: float
    phi_r: float
    label: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "phi_b", float(self.phi_b) % TWO_PI)
        object.__setattr__(self, "phi_r", float(self.phi_r) % TWO_PI)
        if self.label is not None:
            i, j = self.label
            object.__setattr__(self, "label", (int(i), int(j)))


@dataclass(frozen=True)
class ExperimentConfig:
    """Every number the outcome-distribution model needs, per device/detector."""

    excitation_probability: tuple[float, float]
    readout_transfer: tuple[float, float]
    detection_efficiency: tuple[tuple[float, float], tuple[float, float]]
    n_init: tuple[float, float]
    heating: tuple[HeatingParams, HeatingParams]
    leak: LeakParams
    dark_rate_hz: float
    detection_window_s: float
    pulse_delay_s: float
    repetition_period_s: float
    phi_c: float
    omega: float
    delta_nu_m_hz: float
    cutoff: int
    reference: tuple[tuple[str, float], ...] = field(default=())

    def validate(self) -> None:
        for p in self.excitation_probability:
            if not 0.0 <= p < 0.3:
                raise ConfigError(f"excitation probability out of range: {p}")
        for r in self.readout_transfer:
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"readout transfer out of range: {r}")
        for pair in self.detection_efficiency:
            for eta in pair:
                if not 0.0 <= eta <= 0.5:
                    raise ConfigError(
                        f"per-detector total efficiency out of range [0, 0.5]: {eta}")
        for n in self.n_init:
            if n < 0.0:
                raise ConfigError(f"n_init must be >= 0, got {n}")
        for h in self.heating:
            h.validate()
        self.leak.validate()
        if self.dark_rate_hz < 0 or self.detection_window_s <= 0:
            raise ConfigError("dark rate must be >= 0 and window > 0")
        if self.pulse_delay_s < 0 or self.repetition_period_s <= 0:
            raise ConfigError("pulse delay must be >= 0 and repetition period > 0")
        if not 2 <= self.cutoff <= 4:
            raise ConfigError(f"cutoff must be 2..4, got {self.cutoff}")
        for v in (self.phi_c, self.omega, self.delta_nu_m_hz):
            if not math.isfinite(v):
                raise ConfigError("phases and frequencies must be finite")

    @property
    def dark_window_probability(self) -> float:
        return self.dark_rate_hz * self.detection_window_s


def chsh_settings(config: ExperimentConfig) -> tuple[PhaseSetting, ...]:
    """The four standard settings: phi_b in {0, pi/2}, phi_r = phi_c -+ pi/4."""
    out = []
    for i, phi_b in ((1, 0.0), (2, math.pi / 2)):
        for j, phi_r in ((1, config.phi_c - math.pi / 4), (2, config.phi_c + math.pi / 4)):
            out.append(PhaseSetting(phi_b, phi_r, label=(i, j)))
    return tuple(out)


def _get(section: dict, key: str, where: str):
    try:
        return section[key]
    except KeyError:
        raise ConfigError(f"missing key '{key}' in [{where}]") from None


def _pair(section: dict, key_a: str, key_b: str, where: str) -> tuple[float, float]:
    return (float(_get(section, key_a, where)), float(_get(section, key_b, where)))


def parse_config(text: str) -> ExperimentConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from None

    def section(name: str) -> dict:
        if name not in doc:
            raise ConfigError(f"missing section [{name}]")
        return doc[name]

    drive = section("drive")
    det = section("detection")
    mech = section("mechanics")
    itf = section("interferometer")
    leak_s = doc.get("leak", {})
    engine = doc.get("engine", {})

    heating = []
    for dev in ("a", "b"):
        h = _get(section("heating"), dev, "heating")
        heating.append(HeatingParams(
            a=float(_get(h, "amplitude", f"heating.{dev}")),
            b=float(_get(h, "undershoot", f"heating.{dev}")),
            tau=float(_get(h, "lifetime_s", f"heating.{dev}")),
            eta_rise=float(_get(h, "rise_s", f"heating.{dev}")),
        ))

    leak = LeakParams(
        red_fraction=(float(leak_s.get("red_fraction_1", 0.0)),
                      float(leak_s.get("red_fraction_2", 0.0))),
        blue_fraction=float(leak_s.get("blue_fraction", 0.0)),
        interferometer_visibility=float(leak_s.get("interferometer_visibility", 1.0)),
        modulation=(float(leak_s.get("modulation_1", leak_s.get("interferometer_visibility", 1.0))),
                    float(leak_s.get("modulation_2", leak_s.get("interferometer_visibility", 1.0)))),
        fringe_phase=float(leak_s.get("fringe_phase_pi", 0.0)) * math.pi,
    )

    reference = tuple(sorted(
        (str(k), float(v)) for k, v in doc.get("reference", {}).items()))

    cfg = ExperimentConfig(
        excitation_probability=_pair(drive, "excitation_probability_a",
                                     "excitation_probability_b", "drive"),
        readout_transfer=_pair(drive, "readout_transfer_a", "readout_transfer_b", "drive"),
        detection_efficiency=(
            _pair(det, "efficiency_a1", "efficiency_a2", "detection"),
            _pair(det, "efficiency_b1", "efficiency_b2", "detection"),
        ),
        n_init=_pair(mech, "n_init_a", "n_init_b", "mechanics"),
        heating=(heating[0], heating[1]),
        leak=leak,
        dark_rate_hz=float(_get(det, "dark_rate_hz", "detection")),
        detection_window_s=float(_get(det, "window_s", "detection")),
        pulse_delay_s=float(_get(drive, "pulse_delay_s", "drive")),
        repetition_period_s=float(_get(drive, "repetition_period_s", "drive")),
        phi_c=float(_get(itf, "phi_c_pi", "interferometer")) * math.pi,
        omega=float(itf.get("omega", 0.0)),
        delta_nu_m_hz=float(itf.get("delta_nu_m_hz", 0.0)),
        cutoff=int(engine.get("cutoff", 2)),
        reference=reference,
    )
    cfg.validate()
    return cfg


def data_dir_path(name: str) -> str:
    """Resolve a packaged data file, honouring the OPTOBELL_DATA_DIR override."""
    override = os.environ.get("OPTOBELL_DATA_DIR")
    if override:
        return os.path.join(override, name)
    return str(resources.files("optobell").joinpath("data", name))


def load_config(path: str | None = None) -> ExperimentConfig:
    """Read a config file; with no path, the packaged calibrated defaults."""
    if path is None:
        path = data_dir_path("paper.toml")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
