"""Preprocessing, sliding windows, condition encodings, splits and storage."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .simulator import GAIN_VALUES, PHASE_VALUES, ArrayConfig, read_frames
from .splitting import partition_ids

GAIN_RANGE = (GAIN_VALUES[0], GAIN_VALUES[-1])
PHASE_MAX = float(PHASE_VALUES[-1])

CONTAINER_MAGIC = b"TSEQ"
CONTAINER_VERSION = 1
# magic, version (u16), reserved (u16), header length (u32); header is UTF-8 JSON
_PREAMBLE = struct.Struct("<4sHHI")


class ContainerError(ValueError):
    """Raised when a processed-sequence container cannot be read or written."""


@dataclass
class ProcessedSequence:
    frames: np.ndarray  # (T_proc, H, W) float32 in [0, 1]
    config: ArrayConfig
    label: str
    id: str
    normalization: str = "sequence-max"

    def __len__(self):
        return len(self.frames)


@dataclass
class Window:
    frames: np.ndarray  # (T, H, W)
    condition_map: np.ndarray  # (2, H, W)
    condition_vector: np.ndarray  # (8,)
    parent: str
    start: int


def preprocess(frames, config, label="normal", seq_id=""):
    """Subtract the first frame, clamp at zero, drop it, scale by the sequence maximum."""
    frames = np.asarray(frames)
    if frames.ndim != 3 or len(frames) < 2:
        raise ValueError("need at least two frames (background plus one image)")
    diff = frames[1:].astype(np.float64) - frames[0].astype(np.float64)
    np.maximum(diff, 0.0, out=diff)
    peak = diff.max()
    if peak > 0:
        diff /= peak
    return ProcessedSequence(diff.astype(np.float32), config, label, seq_id)


def preprocess_raw(raw):
    return preprocess(raw.frames, raw.config, raw.label, raw.id)


def load_raw_record(record, root):
    frames = read_frames(Path(root) / record["path"])
    return preprocess(frames, ArrayConfig.from_list(record["config"]), record["label"], record["id"])


def window_starts(n_frames, length=10, offset=5):
    if length < 1 or offset < 1:
        raise ValueError("length and offset must be >= 1")
    if length > n_frames:
        raise ValueError(f"window length {length} exceeds sequence length {n_frames}")
    return list(range(0, n_frames - length + 1, offset))


def normalize_gain(gain):
    lo, hi = GAIN_RANGE
    return float(np.clip((gain - lo) / (hi - lo), 0.0, 1.0))


def normalize_phase(phase):
    return float(np.clip(phase / PHASE_MAX, 0.0, 1.0))


def condition_vector(config):
    gains = [normalize_gain(g) for g in config.gains]
    phases = [normalize_phase(p) for p in config.phases]
    return np.array(gains + phases, dtype=np.float32)


def condition_input_map(config, height, width):
    """Two-channel (gain, phase) map with each quadrant filled by its element's value."""
    if height % 2 or width % 2:
        raise ValueError(f"map size must be even, got {height}x{width}")
    vec = condition_vector(config)
    out = np.empty((2, height, width), dtype=np.float32)
    h2, w2 = height // 2, width // 2
    quads = [(slice(0, h2), slice(0, w2)), (slice(0, h2), slice(w2, None)),
             (slice(h2, None), slice(0, w2)), (slice(h2, None), slice(w2, None))]
    for k, (rs, cs) in enumerate(quads):
        out[0, rs, cs] = vec[k]
        out[1, rs, cs] = vec[4 + k]
    return out


def make_windows(seq, length=10, offset=5, starts=None):
    """Cut ``seq`` into fully contained windows starting at 0, offset, 2*offset, ..."""
    if starts is None:
        starts = window_starts(len(seq), length, offset)
    h, w = seq.frames.shape[1:]
    cmap = condition_input_map(seq.config, h, w)
    cvec = condition_vector(seq.config)
    return [Window(seq.frames[s:s + length], cmap, cvec, seq.id, s) for s in starts]


def covering_starts(n_frames, length=10, offset=5):
    """Training starts plus one end-aligned window so every frame is covered."""
    starts = window_starts(n_frames, length, offset)
    if starts[-1] + length < n_frames:
        starts.append(n_frames - length)
    return starts


def stack_windows(windows):
    """Arrays ``(frames, condition_maps, condition_vectors)`` for a list of windows."""
    return (
        np.stack([w.frames for w in windows]).astype(np.float32),
        np.stack([w.condition_map for w in windows]).astype(np.float32),
        np.stack([w.condition_vector for w in windows]).astype(np.float32),
    )


def split(records, ratios=(0.8, 0.1, 0.1), seed=0):
    """Assign every manifest id to train/val/test; anomalous ids always go to test."""
    normal = [r["id"] for r in records if r["label"] == "normal"]
    if len(normal) < 10:
        raise ValueError(f"need at least 10 normal sequences to split, got {len(normal)}")
    out = partition_ids(normal, ratios, seed)
    for r in records:
        if r["label"] != "normal":
            out[r["id"]] = "test"
    return dict(sorted(out.items()))


def write_split(assignment, path):
    Path(path).write_text(json.dumps(assignment, indent=1, sort_keys=True) + "\n")


def read_split(path):
    return json.loads(Path(path).read_text())


def store(seq, path):
    """Write ``seq`` to the versioned little-endian container at ``path``.

    Layout: 12-byte preamble (magic ``TSEQ``, u16 version, u16 reserved,
    u32 header length), a JSON header with id/label/config/normalization/shape,
    then the frames as little-endian float32 in C order.
    """
    frames = np.asarray(seq.frames)
    if frames.ndim != 3 or len(frames) == 0:
        raise ContainerError("refusing to store a sequence without frames")
    header = json.dumps({
        "id": seq.id,
        "label": seq.label,
        "config": seq.config.to_list(),
        "normalization": seq.normalization,
        "shape": list(frames.shape),
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PREAMBLE.pack(CONTAINER_MAGIC, CONTAINER_VERSION, 0, len(header)))
        fh.write(header)
        fh.write(frames.astype("<f4").tobytes())


def load(path):
    data = Path(path).read_bytes()
    if len(data) < _PREAMBLE.size:
        raise ContainerError(f"{path}: truncated preamble")
    magic, version, _, hlen = _PREAMBLE.unpack_from(data)
    if magic != CONTAINER_MAGIC:
        raise ContainerError(f"{path}: bad magic {magic!r}")
    if version != CONTAINER_VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    body = _PREAMBLE.size + hlen
    if len(data) < body:
        raise ContainerError(f"{path}: truncated header")
    try:
        header = json.loads(data[_PREAMBLE.size:body])
        shape = tuple(int(s) for s in header["shape"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ContainerError(f"{path}: corrupt header") from exc
    n_bytes = 4 * int(np.prod(shape))
    if len(data) != body + n_bytes:
        raise ContainerError(f"{path}: expected {n_bytes} frame bytes, found {len(data) - body}")
    frames = np.frombuffer(data, dtype="<f4", offset=body).reshape(shape).astype(np.float32)
    return ProcessedSequence(
        frames, ArrayConfig.from_list(header["config"]), header["label"], header["id"],
        header.get("normalization", "sequence-max"),
    )
