"""Synthetic tri-modal triplets with ground-truth alignment flags.

Each sample draws a latent ``c``. Every aligned modality is a fixed random
linear map of ``c`` plus Gaussian noise. A misaligned text (or audio) is
generated from an independent decoy latent instead, and so is every one of
its neighbor narrations. Neighbor narrations are maps of small perturbations
of the text latent; neighbor 0 is the clip's own narration.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, SplitError
from .model import RawBatch
from .seeding import derive_rng


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 2000
    latent_dim: int = 16
    dim_video: int = 24
    dim_audio: int = 20
    dim_text: int = 28
    p_mis_text: float = 0.0
    p_mis_audio: float = 0.0
    noise_std: float = 0.1
    neighbor_std: float = 0.3
    k_neighbors: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("n_samples", "latent_dim", "dim_video", "dim_audio", "dim_text", "k_neighbors"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("p_mis_text", "p_mis_audio"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be a probability in [0, 1], got {p}")
        for name in ("noise_std", "neighbor_std"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")


@dataclass(frozen=True, eq=False)
class Triplet:
    id: int
    video_raw: np.ndarray
    audio_raw: np.ndarray
    text_raw: np.ndarray
    neighbor_texts: np.ndarray  # (k, dim_text); row 0 equals text_raw
    text_aligned: bool
    audio_aligned: bool

    @property
    def aligned(self) -> bool:
        return self.text_aligned and self.audio_aligned

    def __eq__(self, other):
        if not isinstance(other, Triplet):
            return NotImplemented
        return (
            self.id == other.id
            and self.text_aligned == other.text_aligned
            and self.audio_aligned == other.audio_aligned
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("video_raw", "audio_raw", "text_raw", "neighbor_texts")
            )
        )


def _maps(config: SynthConfig):
    rng = derive_rng(config.seed, "synth-maps")
    scale = 1.0 / np.sqrt(config.latent_dim)
    return {
        m: rng.standard_normal((d, config.latent_dim)) * scale
        for m, d in (("v", config.dim_video), ("a", config.dim_audio), ("t", config.dim_text))
    }


def sample_latents(config: SynthConfig, index: int) -> dict:
    """Latents and flags for sample ``index`` before any observation noise.

    Every draw happens regardless of the flags so each index consumes a fixed
    stream; output never depends on generation order.
    """
    rng = derive_rng(config.seed, "synth-sample", index)
    ld, k = config.latent_dim, config.k_neighbors
    c = rng.standard_normal(ld)
    decoy_t = rng.standard_normal(ld)
    decoy_a = rng.standard_normal(ld)
    text_mis = rng.random() < config.p_mis_text
    audio_mis = rng.random() < config.p_mis_audio
    c_t = decoy_t if text_mis else c
    c_a = decoy_a if audio_mis else c
    shifts = rng.standard_normal((k - 1, ld)) * config.neighbor_std
    noise = {
        "v": rng.standard_normal(config.dim_video),
        "a": rng.standard_normal(config.dim_audio),
        "t": rng.standard_normal((k, config.dim_text)),
    }
    return {
        "video": c,
        "audio": c_a,
        "text": c_t,
        "neighbors": np.vstack([c_t[None, :], c_t + shifts]),
        "noise": noise,
        "text_aligned": not text_mis,
        "audio_aligned": not audio_mis,
    }


def generate(config: SynthConfig) -> list[Triplet]:
    maps = _maps(config)
    s = config.noise_std
    out = []
    for i in range(config.n_samples):
        lat = sample_latents(config, i)
        video = maps["v"] @ lat["video"] + s * lat["noise"]["v"]
        audio = maps["a"] @ lat["audio"] + s * lat["noise"]["a"]
        texts = lat["neighbors"] @ maps["t"].T + s * lat["noise"]["t"]
        out.append(Triplet(i, video, audio, texts[0].copy(), texts,
                           lat["text_aligned"], lat["audio_aligned"]))
    return out


def split(dataset: list[Triplet], fractions=(0.8, 0.2), seed: int = 0):
    """Shuffle into (train, eval_clean).

    The eval share is drawn first; any of its triplets that are not fully
    aligned are handed back to train, so the two splits still cover the
    dataset.
    """
    if len(fractions) != 2 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise SplitError(f"fractions must be two nonnegative numbers summing to 1, got {fractions}")
    n = len(dataset)
    order = derive_rng(seed, "split").permutation(n)
    n_eval = int(round(fractions[1] * n))
    clean = {int(i) for i in order[:n_eval] if dataset[i].aligned}
    eval_clean = [dataset[i] for i in sorted(clean)]
    train = [t for i, t in enumerate(dataset) if i not in clean]
    if not eval_clean:
        raise SplitError("eval split contains no fully aligned triplets")
    return train, eval_clean


def to_batch(triplets: list[Triplet]) -> RawBatch:
    return RawBatch(
        np.stack([t.video_raw for t in triplets]),
        np.stack([t.audio_raw for t in triplets]),
        np.stack([t.neighbor_texts for t in triplets]),
    )


def flags(triplets: list[Triplet]):
    text = np.array([t.text_aligned for t in triplets])
    audio = np.array([t.audio_aligned for t in triplets])
    return text, audio


# --------------------------------------------------------------------------
# dataset file
#
#   magic b"GHARMDS1", then u32: version, n_samples, dim_video, dim_audio, dim_text, k
#   per triplet: id u64, video f64*dv, audio f64*da, text f64*dt,
#                neighbors f64*(k*dt), text_aligned u8, audio_aligned u8
# all little-endian

DATASET_MAGIC = b"GHARMDS1"
DATASET_VERSION = 1
_HEADER = struct.Struct("<6I")


def dataset_bytes(triplets: list[Triplet]) -> bytes:
    if not triplets:
        raise FormatError("cannot serialize an empty dataset")
    t0 = triplets[0]
    dv, da, dt = t0.video_raw.size, t0.audio_raw.size, t0.text_raw.size
    k = t0.neighbor_texts.shape[0]
    parts = [DATASET_MAGIC, _HEADER.pack(DATASET_VERSION, len(triplets), dv, da, dt, k)]
    for t in triplets:
        parts.append(struct.pack("<Q", t.id))
        parts.append(np.concatenate([t.video_raw, t.audio_raw, t.text_raw,
                                     t.neighbor_texts.ravel()]).astype("<f8").tobytes())
        parts.append(struct.pack("<BB", int(t.text_aligned), int(t.audio_aligned)))
    return b"".join(parts)


def read_header(data: bytes) -> dict:
    if data[:8] != DATASET_MAGIC:
        raise FormatError("not a dataset file (bad magic)")
    if len(data) < 8 + _HEADER.size:
        raise FormatError("dataset header truncated")
    version, n, dv, da, dt, k = _HEADER.unpack_from(data, 8)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    return {"version": version, "n_samples": n, "dim_video": dv, "dim_audio": da,
            "dim_text": dt, "k_neighbors": k}


def dataset_from_bytes(data: bytes) -> list[Triplet]:
    h = read_header(data)
    dv, da, dt, k = h["dim_video"], h["dim_audio"], h["dim_text"], h["k_neighbors"]
    n_floats = dv + da + dt + k * dt
    rec = 8 + 8 * n_floats + 2
    body = memoryview(data)[8 + _HEADER.size:]
    if len(body) != rec * h["n_samples"]:
        raise FormatError(f"dataset body has {len(body)} bytes, expected {rec * h['n_samples']}")
    out = []
    for r in range(h["n_samples"]):
        off = r * rec
        (ident,) = struct.unpack_from("<Q", body, off)
        vals = np.frombuffer(body, dtype="<f8", count=n_floats, offset=off + 8).astype(np.float64)
        ta, aa = struct.unpack_from("<BB", body, off + 8 + 8 * n_floats)
        video, audio = vals[:dv], vals[dv:dv + da]
        text = vals[dv + da:dv + da + dt]
        neigh = vals[dv + da + dt:].reshape(k, dt)
        out.append(Triplet(int(ident), video, audio, text, neigh, bool(ta), bool(aa)))
    return out


def save_dataset(triplets: list[Triplet], path) -> None:
    Path(path).write_bytes(dataset_bytes(triplets))


def load_dataset(path) -> list[Triplet]:
    return dataset_from_bytes(Path(path).read_bytes())


def export_csv(triplets: list[Triplet], path) -> None:
    """One row per triplet; neighbor narrations are flattened row-major."""
    t0 = triplets[0]
    cols = (["id", "text_aligned", "audio_aligned"]
            + [f"video_{i}" for i in range(t0.video_raw.size)]
            + [f"audio_{i}" for i in range(t0.audio_raw.size)]
            + [f"text_{i}" for i in range(t0.text_raw.size)]
            + [f"neighbor_{j}_{i}" for j in range(t0.neighbor_texts.shape[0])
               for i in range(t0.neighbor_texts.shape[1])])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for t in triplets:
            w.writerow([t.id, int(t.text_aligned), int(t.audio_aligned)]
                       + [repr(float(x)) for x in np.concatenate(
                           [t.video_raw, t.audio_raw, t.text_raw, t.neighbor_texts.ravel()])])
