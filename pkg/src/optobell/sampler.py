"""Reproducible per-trial sampling from a 16-outcome click distribution.

The random stream is counter-based: Philox keyed by (seed, stream), with
trial i consuming exactly the i-th 64-bit word.  Workers sampling disjoint
trial ranges therefore produce, after an ordered merge, byte-identical output
to a serial run, and a dataset is fully determined by (distribution, trial
count, SeedSpec).

Click-record files are plain text: a `optobell-clicks v1` header line,
optional `#key=value` metadata lines, one comma-separated row per non-empty
trial (`trial,setting_i,setting_j,blue_detectors,red_detectors`, detector
sets encoded as "", "1", "2" or "12"), and a final `#trials=<N>` trailer that
preserves the denominator, since empty trials are elided.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .experiment import N_PATTERNS, OutcomeDistribution

HEADER = "optobell-clicks v1"
CHUNK = 1 << 22
NORMALIZATION_TOL = 1e-9

_SET_CODES = ("", "1", "2", "12")


class SamplerError(ValueError):
    """Invalid sampling request or malformed record file."""


@dataclass(frozen=True)
class SeedSpec:
    """Root seed plus a stream index; the pair fully determines the output."""

    seed: int
    stream: int = 0

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise SamplerError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if not 0 <= int(self.stream) < 2**64:
            raise SamplerError(f"stream must be a 64-bit unsigned integer, got {self.stream}")


@dataclass(frozen=True)
class ClickRecord:
    """One non-empty trial: which detectors clicked in each pulse window."""

    trial_index: int
    setting_label: tuple[int, int]
    blue_clicks: frozenset
    red_clicks: frozenset


def trial_uniforms(seed: SeedSpec, lo: int, hi: int) -> np.ndarray:
    """Uniforms for trials [lo, hi); element k belongs to trial lo + k.

    Philox advances in 256-bit blocks of four 64-bit words, so the generator
    is advanced lo // 4 blocks and the first lo % 4 draws are discarded.
    """
    if not 0 <= lo <= hi:
        raise SamplerError(f"bad trial range [{lo}, {hi})")
    bits = np.random.Philox(key=[int(seed.seed), int(seed.stream)])
    bits.advance(lo // 4)
    skip = lo % 4
    return np.random.Generator(bits).random(skip + (hi - lo))[skip:]


def _distribution_cdf(dist) -> tuple[np.ndarray, tuple[int, int] | None]:
    label = None
    if isinstance(dist, OutcomeDistribution):
        label = dist.setting.label
        probs = dist.probs
    else:
        probs = np.asarray(dist, dtype=float)
    if probs.shape != (N_PATTERNS,):
        raise SamplerError(f"distribution must have {N_PATTERNS} outcomes, got shape {probs.shape}")
    if (probs < 0.0).any():
        raise SamplerError("distribution has negative mass")
    cdf = np.cumsum(probs)
    if abs(cdf[-1] - 1.0) > NORMALIZATION_TOL:
        raise SamplerError(f"distribution sums to {cdf[-1]!r}, not 1")
    cdf[-1] = 1.0
    return cdf, label


def _check_range(n_trials: int, trial_range) -> tuple[int, int]:
    if n_trials < 0:
        raise SamplerError(f"n_trials must be >= 0, got {n_trials}")
    if trial_range is None:
        return 0, int(n_trials)
    lo, hi = int(trial_range[0]), int(trial_range[1])
    if not 0 <= lo <= hi <= n_trials:
        raise SamplerError(f"trial range [{lo}, {hi}) outside [0, {n_trials})")
    return lo, hi


def sample_counts(dist, n_trials: int, seed: SeedSpec, trial_range=None) -> np.ndarray:
    """Multinomial outcome histogram over the 16 click patterns.

    With trial_range=(lo, hi) only that shard is drawn; shard histograms over
    a partition of [0, n_trials) sum to the full run's histogram exactly.
    """
    lo, hi = _check_range(n_trials, trial_range)
    cdf, _ = _distribution_cdf(dist)
    counts = np.zeros(N_PATTERNS, dtype=np.int64)
    for start in range(lo, hi, CHUNK):
        stop = min(start + CHUNK, hi)
        idx = np.searchsorted(cdf, trial_uniforms(seed, start, stop), side="right")
        counts += np.bincount(idx, minlength=N_PATTERNS)
    return counts


def _pattern_sets(index: int) -> tuple[frozenset, frozenset]:
    b1, b2 = (index >> 3) & 1, (index >> 2) & 1
    r1, r2 = (index >> 1) & 1, index & 1
    blue = frozenset(d for d, bit in ((1, b1), (2, b2)) if bit)
    red = frozenset(d for d, bit in ((1, r1), (2, r2)) if bit)
    return blue, red


def sample_records(dist, n_trials: int, seed: SeedSpec, trial_range=None,
                   label=None) -> Iterator[ClickRecord]:
    """Stream the non-empty trials of the same draw sample_counts makes."""
    lo, hi = _check_range(n_trials, trial_range)
    cdf, dist_label = _distribution_cdf(dist)
    label = label if label is not None else dist_label
    if label is None:
        raise SamplerError("records need a setting label; the distribution carries none")
    label = (int(label[0]), int(label[1]))
    sets = [_pattern_sets(i) for i in range(N_PATTERNS)]
    for start in range(lo, hi, CHUNK):
        stop = min(start + CHUNK, hi)
        idx = np.searchsorted(cdf, trial_uniforms(seed, start, stop), side="right")
        for offset in np.nonzero(idx)[0]:
            blue, red = sets[idx[offset]]
            yield ClickRecord(start + int(offset), label, blue, red)


def _encode_set(clicks: frozenset) -> str:
    return "".join(str(d) for d in sorted(clicks))


def write_records(fh, records: Iterable[ClickRecord], n_trials: int,
                  metadata: dict | None = None) -> int:
    """Write a click-record file to an open text handle; returns rows written."""
    fh.write(HEADER + "\n")
    for key, value in (metadata or {}).items():
        if key == "trials" or "=" in key:
            raise SamplerError(f"reserved or malformed metadata key {key!r}")
        fh.write(f"#{key}={value}\n")
    rows = 0
    for rec in records:
        fh.write(f"{rec.trial_index},{rec.setting_label[0]},{rec.setting_label[1]},"
                 f"{_encode_set(rec.blue_clicks)},{_encode_set(rec.red_clicks)}\n")
        rows += 1
    fh.write(f"#trials={int(n_trials)}\n")
    return rows


def _decode_set(code: str, where: str) -> frozenset:
    if code not in _SET_CODES:
        raise SamplerError(f"{where}: bad detector set {code!r}")
    return frozenset(int(c) for c in code)


def read_records(fh) -> tuple[list[ClickRecord], int, dict]:
    """Parse a click-record file: (records, total trials, metadata)."""
    header = fh.readline().rstrip("\n")
    if header != HEADER:
        raise SamplerError(f"expected header {HEADER!r}, got {header!r}")
    records: list[ClickRecord] = []
    metadata: dict = {}
    trials = None
    last_trial = -1
    for lineno, raw in enumerate(fh, start=2):
        line = raw.rstrip("\n")
        if not line:
            continue
        where = f"line {lineno}"
        if trials is not None:
            raise SamplerError(f"{where}: content after the #trials trailer")
        if line.startswith("#"):
            key, sep, value = line[1:].partition("=")
            if not sep:
                raise SamplerError(f"{where}: malformed metadata {line!r}")
            if key == "trials":
                trials = int(value)
            else:
                metadata[key] = value
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise SamplerError(f"{where}: expected 5 fields, got {len(parts)}")
        try:
            trial = int(parts[0])
            label = (int(parts[1]), int(parts[2]))
        except ValueError:
            raise SamplerError(f"{where}: non-integer trial or setting: {line!r}") from None
        if trial <= last_trial:
            raise SamplerError(f"{where}: trial indices must be strictly increasing")
        last_trial = trial
        records.append(ClickRecord(trial, label,
                                   _decode_set(parts[3], where),
                                   _decode_set(parts[4], where)))
    if trials is None:
        raise SamplerError("missing #trials trailer")
    if records and records[-1].trial_index >= trials:
        raise SamplerError("trial index beyond the #trials denominator")
    return records, trials, metadata
