"""Pulsed photon-phonon Bell-test simulator and click-statistics analysis."""

__version__ = "0.1.0"
