"""Synthetic micro-Doppler gait signals and raw-signal (.mdrs) I/O.

A walking subject is modeled as a set of reflecting body parts whose radial
velocities oscillate sinusoidally around the torso velocity. The baseband
return is the phase-modulated sum of the parts, with the velocity integral
taken in closed form. All operations are pure functions of their arguments,
seeds included.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .formats import FileFormatError, Reader

__all__ = [
    "GaitParams",
    "RawSignal",
    "synth_subject",
    "session_variant",
    "shift_phases",
    "synth_sequence",
    "decimate",
    "save_raw",
    "load_raw",
    "RAW_MAGIC",
    "UNLABELED",
]

# Doppler shift per m/s of radial velocity: 2 f_c / c at a 24 GHz carrier.
DOPPLER_SCALE_HZ_PER_MPS = 160.0

RAW_MAGIC = b"MDRS"
RAW_VERSION = 1
UNLABELED = 0xFFFFFFFF

_MASK64 = (1 << 64) - 1

# subject parameter ranges: distinct but overlapping signatures
_TORSO_VELOCITY = (0.8, 1.6)
_CADENCE = (0.7, 1.1)
_PART_COUNT = (3, 7)  # total parts including the torso
_LIMB_AMPLITUDE = (0.15, 0.65)
_LIMB_REFLECTIVITY = (0.2, 0.8)
_TORSO_REFLECTIVITY = (1.5, 2.5)


@dataclass(frozen=True)
class GaitParams:
    """Per-subject gait signature. Part 0 is the torso (amplitude 0)."""

    torso_velocity_mps: float
    cadence_hz: float
    part_amplitudes_mps: tuple[float, ...]
    part_phases_rad: tuple[float, ...]
    part_reflectivities: tuple[float, ...]
    doppler_scale_hz_per_mps: float = DOPPLER_SCALE_HZ_PER_MPS

    def __post_init__(self):
        n = len(self.part_amplitudes_mps)
        if n < 1 or len(self.part_phases_rad) != n or len(self.part_reflectivities) != n:
            raise ValueError("part amplitude/phase/reflectivity lists must have equal length >= 1")
        if any(r <= 0 for r in self.part_reflectivities):
            raise ValueError("all reflectivities must be > 0")
        if self.cadence_hz <= 0:
            raise ValueError("cadence_hz must be > 0")


@dataclass(frozen=True)
class RawSignal:
    """Complex baseband I/Q sequence with its sample rate."""

    samples: np.ndarray  # complex, shape [n]
    sample_rate_hz: float
    subject_id: int | None = None

    def __post_init__(self):
        if self.samples.size == 0:
            raise ValueError("RawSignal requires at least one sample")
        if not self.sample_rate_hz > 0:
            raise ValueError("sample_rate_hz must be > 0")

    def __len__(self):
        return len(self.samples)


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng([e & _MASK64 for e in entropy])


def synth_subject(seed: int, subject_id: int) -> GaitParams:
    """Draw a deterministic gait signature for one synthetic subject.

    Each (seed, subject_id) pair seeds its own stream, so distinct subjects
    are independent draws and repeated calls are bitwise identical.
    """
    rng = _rng(seed, subject_id)
    n_parts = int(rng.integers(_PART_COUNT[0], _PART_COUNT[1] + 1))
    torso_v = float(rng.uniform(*_TORSO_VELOCITY))
    cadence = float(rng.uniform(*_CADENCE))
    n_limbs = n_parts - 1
    amps = rng.uniform(*_LIMB_AMPLITUDE, size=n_limbs)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_limbs)
    refls = rng.uniform(*_LIMB_REFLECTIVITY, size=n_limbs)
    torso_r = float(rng.uniform(*_TORSO_REFLECTIVITY))
    return GaitParams(
        torso_velocity_mps=torso_v,
        cadence_hz=cadence,
        part_amplitudes_mps=(0.0, *map(float, amps)),
        part_phases_rad=(0.0, *map(float, phases)),
        part_reflectivities=(torso_r, *map(float, refls)),
    )


def session_variant(params: GaitParams, seed: int, subject_id: int, session: int) -> GaitParams:
    """Emulate a repeat data-collection session by re-drawing reflectivities.

    Session 0 is the base draw; later sessions redraw from a session-offset
    stream (different clothing, same gait kinematics).
    """
    if session == 0:
        return params
    rng = _rng(seed, subject_id, 0x5E55, session)
    n_limbs = len(params.part_reflectivities) - 1
    torso_r = float(rng.uniform(*_TORSO_REFLECTIVITY))
    refls = rng.uniform(*_LIMB_REFLECTIVITY, size=n_limbs)
    return replace(params, part_reflectivities=(torso_r, *map(float, refls)))


def shift_phases(params: GaitParams, delta_rad: float) -> GaitParams:
    """Rotate all limb phases by a constant (a gait-cycle time shift)."""
    return replace(
        params, part_phases_rad=tuple(p + delta_rad for p in params.part_phases_rad)
    )


def synth_sequence(
    params: GaitParams,
    duration_s: float,
    sample_rate_hz: float,
    noise_sigma: float,
    seed: int,
    subject_id: int | None = None,
) -> RawSignal:
    """Synthesize the phase-modulated baseband return for one walk.

    Per part k with radial velocity v_k(t) = v_torso + A_k sin(2π f t + φ_k),
    the sample is r_k · exp(j 2π s ∫ v_k), with the integral in closed form.
    Noise is circular complex Gaussian with total std `noise_sigma`.
    """
    if duration_s <= 0:
        raise ValueError("duration_s must be > 0")
    if sample_rate_hz <= 0:
        raise ValueError("sample_rate_hz must be > 0")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    n = int(duration_s * sample_rate_hz)
    t = np.arange(n) / sample_rate_hz
    f = params.cadence_hz
    s = params.doppler_scale_hz_per_mps
    samples = np.zeros(n, dtype=np.complex128)
    for a, phi, r in zip(
        params.part_amplitudes_mps, params.part_phases_rad, params.part_reflectivities
    ):
        integral = params.torso_velocity_mps * t
        if a != 0.0:
            integral = integral + (a / (2.0 * np.pi * f)) * (
                np.cos(phi) - np.cos(2.0 * np.pi * f * t + phi)
            )
        samples += r * np.exp(2j * np.pi * s * integral)
    if noise_sigma > 0.0:
        rng = _rng(seed)
        samples += (noise_sigma / np.sqrt(2.0)) * (
            rng.standard_normal(n) + 1j * rng.standard_normal(n)
        )
    return RawSignal(samples=samples, sample_rate_hz=float(sample_rate_hz), subject_id=subject_id)


def decimate(sig: RawSignal, factor: int) -> RawSignal:
    """Boxcar-average blocks of `factor` samples and keep one per block."""
    if factor < 1:
        raise ValueError(f"decimation factor must be >= 1, got {factor}")
    if len(sig) < factor:
        raise ValueError(f"signal of length {len(sig)} is shorter than factor {factor}")
    m = len(sig) // factor
    blocks = sig.samples[: m * factor].reshape(m, factor)
    return RawSignal(
        samples=blocks.mean(axis=1),
        sample_rate_hz=sig.sample_rate_hz / factor,
        subject_id=sig.subject_id,
    )


def save_raw(sig: RawSignal, path) -> None:
    """Write magic, version, subject id, f64 rate, u64 count, f32 I/Q pairs."""
    sid = UNLABELED if sig.subject_id is None else int(sig.subject_id)
    header = RAW_MAGIC + struct.pack("<IIdQ", RAW_VERSION, sid, sig.sample_rate_hz, len(sig))
    inter = np.empty(2 * len(sig), dtype="<f4")
    inter[0::2] = sig.samples.real
    inter[1::2] = sig.samples.imag
    Path(path).write_bytes(header + inter.tobytes())


def load_raw(path) -> RawSignal:
    """Read an .mdrs file; any malformation fails with its byte offset."""
    r = Reader(Path(path).read_bytes())
    r.expect_magic(RAW_MAGIC)
    r.expect_version(RAW_VERSION)
    sid = r.unpack("I", "subject id")
    at = r.pos
    rate = r.unpack("d", "sample rate")
    if not np.isfinite(rate) or rate <= 0:
        raise FileFormatError(f"invalid sample rate {rate}", at)
    at = r.pos
    count = r.unpack("Q", "sample count")
    if count == 0:
        raise FileFormatError("zero samples", at)
    raw = r.take(8 * count, "I/Q samples")
    r.done()
    inter = np.frombuffer(raw, dtype="<f4")
    samples = inter[0::2].astype(np.float64) + 1j * inter[1::2].astype(np.float64)
    return RawSignal(
        samples=samples,
        sample_rate_hz=rate,
        subject_id=None if sid == UNLABELED else sid,
    )
