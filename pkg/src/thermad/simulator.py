"""Synthetic thermogram sequences for a 2x2 antenna array.

The field over the absorbing sheet is modelled as a complex superposition of
one Gaussian kernel per element, each placed at the centre of its image
quadrant.  The sheet heats towards the quadratic equilibrium
``k1*E**2 + k2*E + k3`` above ambient with a first-order time constant.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tifffile

from .splitting import partition_ids

GAIN_VALUES = (155, 160, 170, 185, 235, 255)
PHASE_VALUES = (0, 45, 90, 135, 180)

# gain code -> output power (dBm) for elements 1..4
GAIN_POWER_TABLE = {
    155: (7.65, 7.47, 7.18, 9.40),
    160: (9.40, 9.38, 8.99, 11.09),
    170: (12.57, 12.48, 12.21, 13.92),
    185: (16.03, 15.85, 15.65, 17.03),
    235: (21.91, 21.58, 21.30, 22.15),
    255: (22.81, 22.41, 22.00, 22.81),
}

N_ELEMENTS = 4
MAX_COUNT = 65535


class ConfigurationError(ValueError):
    """Raised for invalid simulator inputs."""


@dataclass(frozen=True)
class ThermalConstants:
    k1: float = 1.0
    k2: float = 0.1
    k3: float = 0.0
    tau: float = 20.0
    ambient: float = 7000.0
    noise_sd: float = 15.0

    def validate(self):
        if not self.k1 > 0:
            raise ConfigurationError(f"k1 must be > 0, got {self.k1}")
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be > 0, got {self.tau}")
        if self.noise_sd < 0:
            raise ConfigurationError(f"noise_sd must be >= 0, got {self.noise_sd}")
        if self.ambient < 0:
            raise ConfigurationError(f"ambient must be >= 0, got {self.ambient}")
        return self


@dataclass(frozen=True)
class ArrayConfig:
    """Gain code and phase (degrees) per element, row-major over the 2x2 array."""

    elements: tuple

    def __post_init__(self):
        elements = tuple((int(g), int(p)) for g, p in self.elements)
        object.__setattr__(self, "elements", elements)
        if len(elements) != N_ELEMENTS:
            raise ConfigurationError(f"expected {N_ELEMENTS} elements, got {len(elements)}")
        for gain, phase in elements:
            if gain not in GAIN_VALUES:
                raise ConfigurationError(f"gain {gain} not in {GAIN_VALUES}")
            if phase not in PHASE_VALUES:
                raise ConfigurationError(f"phase {phase} not in {PHASE_VALUES}")

    @property
    def gains(self):
        return tuple(g for g, _ in self.elements)

    @property
    def phases(self):
        return tuple(p for _, p in self.elements)

    def to_list(self):
        return [[g, p] for g, p in self.elements]

    @classmethod
    def from_list(cls, pairs):
        return cls(tuple(tuple(p) for p in pairs))


@dataclass(frozen=True)
class FaultSpec:
    attenuations: tuple = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        att = tuple(float(a) for a in self.attenuations)
        object.__setattr__(self, "attenuations", att)
        if len(att) != N_ELEMENTS:
            raise ConfigurationError(f"expected {N_ELEMENTS} attenuations, got {len(att)}")
        if any(not a >= 0 for a in att):
            raise ConfigurationError(f"attenuations must be >= 0 dB, got {att}")

    @property
    def anomalous(self):
        return any(a > 0 for a in self.attenuations)

    @property
    def label(self):
        return "anomalous" if self.anomalous else "normal"


@dataclass
class RawSequence:
    frames: np.ndarray  # (T_raw, H, W) uint16
    config: ArrayConfig
    fault: FaultSpec
    seed: int
    id: str = ""

    @property
    def label(self):
        return self.fault.label


def gain_to_power(gain, element_index):
    """Output power in dBm for a gain code on element 1..4.

    Tabulated gains return the table entry; other codes in [155, 255] are
    linearly interpolated between neighbouring rows.
    """
    if element_index not in (1, 2, 3, 4):
        raise ValueError(f"element_index must be in 1..4, got {element_index}")
    if not GAIN_VALUES[0] <= gain <= GAIN_VALUES[-1]:
        raise ValueError(f"gain {gain} outside [{GAIN_VALUES[0]}, {GAIN_VALUES[-1]}]")
    powers = [GAIN_POWER_TABLE[g][element_index - 1] for g in GAIN_VALUES]
    return float(np.interp(gain, GAIN_VALUES, powers))


def element_centers(shape):
    """Pixel centres of the four quadrants, row-major (TL, TR, BL, BR)."""
    h, w = shape
    rows = (h // 4, (3 * h) // 4)
    cols = (w // 4, (3 * w) // 4)
    return [(r, c) for r in rows for c in cols]


def element_amplitudes(config, fault):
    powers = np.array([gain_to_power(g, k + 1) for k, g in enumerate(config.gains)])
    return 10.0 ** ((powers - np.asarray(fault.attenuations)) / 20.0)


def superpose(amplitudes, phases, shape, width=None):
    """|sum_k a_k exp(j phase_k) g_k| on an HxW grid; phases in degrees."""
    h, w = shape
    if h < 8 or w < 8:
        raise ConfigurationError(f"grid must be at least 8x8, got {shape}")
    width = h / 4 if width is None else width
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    total = np.zeros(shape, dtype=complex)
    for a, phase, (cy, cx) in zip(amplitudes, phases, element_centers(shape)):
        kernel = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width**2))
        total += a * np.exp(1j * np.deg2rad(phase)) * kernel
    return np.abs(total)


def synthesize_field(config, fault, shape, width=None):
    return superpose(element_amplitudes(config, fault), config.phases, shape, width)


def equilibrium_delta(field_mag, constants):
    """Surface-minus-ambient temperature at thermal equilibrium."""
    e = np.asarray(field_mag, dtype=float)
    return constants.k1 * e**2 + constants.k2 * e + constants.k3


def heating_curve(n_frames, tau):
    t = np.arange(n_frames, dtype=float)
    return 1.0 - np.exp(-t / tau)


def render_sequence(config, fault, constants=None, shape=(32, 32), seed=0, n_frames=100, width=None):
    constants = (constants or ThermalConstants()).validate()
    if n_frames < 1:
        raise ConfigurationError("n_frames must be >= 1")
    delta = equilibrium_delta(synthesize_field(config, fault, shape, width), constants)
    heat = heating_curve(n_frames, constants.tau)
    clean = constants.ambient + heat[:, None, None] * delta[None]
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, constants.noise_sd, size=clean.shape) if constants.noise_sd > 0 else 0.0
    frames = np.clip(np.rint(clean + noise), 0, MAX_COUNT).astype(np.uint16)
    return RawSequence(frames=frames, config=config, fault=fault, seed=int(seed))


@dataclass
class DatasetSpec:
    n_normal: int = 340
    n_anomalous: int = 34
    n_calibration: int = 34
    shape: tuple = (32, 32)
    n_frames: int = 100
    kernel_width: float | None = None
    constants: ThermalConstants = field(default_factory=ThermalConstants)
    attenuation_db: tuple = (6.0, 12.0)
    ratios: tuple = (0.8, 0.1, 0.1)
    gain_values: tuple = GAIN_VALUES
    phase_values: tuple = PHASE_VALUES
    seed: int = 0


def _random_config(rng, spec):
    gains = rng.choice(spec.gain_values, size=N_ELEMENTS)
    phases = rng.choice(spec.phase_values, size=N_ELEMENTS)
    return ArrayConfig(tuple(zip(gains.tolist(), phases.tolist())))


def _random_fault(rng, spec):
    att = [0.0] * N_ELEMENTS
    lo, hi = spec.attenuation_db
    att[int(rng.integers(N_ELEMENTS))] = round(float(rng.uniform(lo, hi)), 3)
    return FaultSpec(tuple(att))


def write_frames(frames, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(frames):
        tifffile.imwrite(directory / f"frame_{t:03d}.tif", frame)


def read_frames(directory):
    files = sorted(Path(directory).glob("frame_*.tif"))
    if not files:
        raise FileNotFoundError(f"no frames under {directory}")
    return np.stack([tifffile.imread(f) for f in files])


def plan_dataset(spec):
    """Draw configurations, faults and seeds without rendering anything.

    Returns ``(records, calibration_records)``.  Anomalous records copy the
    configurations of normal test-split sequences; calibration anomalies copy
    validation-split configurations and live in a separate manifest so the
    main split stays pure.
    """
    if spec.n_normal <= 0:
        raise ConfigurationError("n_normal must be > 0")
    if spec.n_anomalous < 0 or spec.n_calibration < 0:
        raise ConfigurationError("anomalous counts must be >= 0")
    rng = np.random.default_rng(spec.seed)
    normal = []
    for i in range(spec.n_normal):
        normal.append({
            "id": f"n{i:04d}",
            "config": _random_config(rng, spec).to_list(),
            "fault": [0.0] * N_ELEMENTS,
            "label": "normal",
            "seed": int(rng.integers(2**31)),
        })
    assignment = partition_ids([r["id"] for r in normal], spec.ratios, spec.seed)
    by_id = {r["id"]: r for r in normal}
    pools = {s: sorted(i for i, v in assignment.items() if v == s) for s in ("val", "test")}

    def twins(prefix, count, pool):
        if count and not pool:
            raise ConfigurationError(f"no normal sequences to pair {prefix!r} anomalies with")
        out = []
        for i in range(count):
            src = by_id[pool[i % len(pool)]]
            out.append({
                "id": f"{prefix}{i:04d}",
                "config": src["config"],
                "fault": list(_random_fault(rng, spec).attenuations),
                "label": "anomalous",
                "seed": int(rng.integers(2**31)),
                "twin": src["id"],
            })
        return out

    anomalous = twins("a", spec.n_anomalous, pools["test"])
    calibration = twins("c", spec.n_calibration, pools["val"])
    return normal + anomalous, calibration


def _render_record(record, spec, root):
    raw = render_sequence(
        ArrayConfig.from_list(record["config"]),
        FaultSpec(tuple(record["fault"])),
        spec.constants,
        tuple(spec.shape),
        record["seed"],
        spec.n_frames,
        spec.kernel_width,
    )
    rel = f"raw/{record['id']}"
    write_frames(raw.frames, Path(root) / rel)
    return {**record, "path": rel}


def write_manifest(records, path):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def generate_dataset(spec, out_dir):
    """Render every planned sequence under ``out_dir``.

    Writes ``manifest.jsonl`` (train/val/test pool) and
    ``calibration.jsonl`` (threshold-calibration anomalies).  Returns the
    sha256 of the main manifest.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"cannot write to {out_dir}")
    records, calibration = plan_dataset(spec)
    records = [_render_record(r, spec, out_dir) for r in records]
    calibration = [_render_record(r, spec, out_dir) for r in calibration]
    write_manifest(records, out_dir / "manifest.jsonl")
    write_manifest(calibration, out_dir / "calibration.jsonl")
    return file_sha256(out_dir / "manifest.jsonl")


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
