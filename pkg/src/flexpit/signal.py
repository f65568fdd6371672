"""Waveforms, synthetic speaker mixtures, frame energies and SDR metrics."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    EmptyWaveform,
    FormatError,
    InvalidConfig,
    InvalidPermutation,
    LengthMismatch,
    NoActiveFrames,
    ZeroReference,
)

SDR_EPS = 1e-10
SDR_CAP_DB = 100.0
ENERGY_GUARD = 1e-12
DEFAULT_SAMPLE_RATE = 8000
DEFAULT_FRAME_LEN = 32
DEFAULT_SILENCE_MARGIN_DB = 40.0
DEFAULT_GAIN_RANGE_DB = (-2.5, 2.5)
PROFILE_BANDS = 8
# sources live on a 2**-20 grid so mix - s1 - s2 == 0 exactly and float32 storage is lossless
QUANT_STEP = 2.0**-20

DATASET_MAGIC = b"PITD"
DATASET_VERSION = 1
SPLITS = ("train", "valid", "test")


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 1:
            raise EmptyWaveform("waveform must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(arr)):
            raise InvalidConfig("waveform samples must be finite")
        object.__setattr__(self, "samples", arr)

    def __len__(self):
        return self.samples.size

    def __eq__(self, other):
        if not isinstance(other, Waveform):
            return NotImplemented
        return self.sample_rate == other.sample_rate and np.array_equal(self.samples, other.samples)


@dataclass(frozen=True, eq=False)
class Mixture:
    id: int
    mix: Waveform
    sources: tuple[Waveform, ...]
    speaker_ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.sources) < 2:
            raise InvalidConfig("a mixture needs at least two sources")
        if len(self.speaker_ids) != len(self.sources):
            raise InvalidConfig("one speaker id per source is required")
        for s in self.sources:
            if len(s) != len(self.mix):
                raise LengthMismatch("sources must share the mixture length")

    @property
    def num_sources(self) -> int:
        return len(self.sources)

    def source_array(self) -> np.ndarray:
        return np.stack([s.samples for s in self.sources])

    def swapped(self, order: Sequence[int]) -> "Mixture":
        """Copy with the stored source order rearranged (``order[j]`` is the old index)."""
        return Mixture(
            self.id,
            self.mix,
            tuple(self.sources[j] for j in order),
            tuple(self.speaker_ids[j] for j in order),
        )


@dataclass(eq=False)
class Dataset:
    mixtures: list[Mixture]
    split: str = "train"
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise InvalidConfig(f"unknown split {self.split!r}")
        ids = sorted(m.id for m in self.mixtures)
        if ids != list(range(len(self.mixtures))):
            raise InvalidConfig("mixture ids must be unique and dense in [0, T)")
        self.mixtures = sorted(self.mixtures, key=lambda m: m.id)

    def __len__(self):
        return len(self.mixtures)

    def __getitem__(self, i):
        return self.mixtures[i]

    def __iter__(self):
        return iter(self.mixtures)

    @property
    def num_sources(self) -> int:
        return self.mixtures[0].num_sources

    @cached_property
    def mix_array(self) -> np.ndarray:
        """(T, L) stacked mixtures; requires equal lengths."""
        return np.stack([m.mix.samples for m in self.mixtures])

    @cached_property
    def source_array(self) -> np.ndarray:
        """(T, N, L) stacked reference sources."""
        return np.stack([m.source_array() for m in self.mixtures])


@dataclass(frozen=True, eq=False)
class SpeakerProfile:
    speaker_id: int
    band_weights: np.ndarray
    base_amplitude: float

    def __post_init__(self):
        w = np.asarray(self.band_weights, dtype=np.float64)
        if w.size < 4 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise InvalidConfig("band_weights must be >= 4 non-negative reals summing to 1")
        if not self.base_amplitude > 0:
            raise InvalidConfig("base_amplitude must be positive")
        object.__setattr__(self, "band_weights", w)


def _samples(w) -> np.ndarray:
    if isinstance(w, Waveform):
        return w.samples
    return np.asarray(w, dtype=np.float64)


# --------------------------------------------------------------------------- metrics


def sdr_from_terms(num, den):
    """Guarded ``10*log10(num/den)``; saturates at +/-100 dB."""
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    top = np.maximum(num, SDR_EPS * den)
    bottom = np.maximum(den, SDR_EPS * num)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 10.0 * np.log10(top / bottom)
    # all-zero estimate: no correlation and no distortion power
    return np.where((top == 0) & (bottom == 0), -SDR_CAP_DB, out)


def sdr_terms(reference, estimate):
    """Return ``(dot, ref_power, est_power, num, den)`` along the last axis."""
    s = np.asarray(reference, dtype=np.float64)
    y = np.asarray(estimate, dtype=np.float64)
    dot = np.sum(s * y, axis=-1)
    ss = np.sum(s * s, axis=-1)
    yy = np.sum(y * y, axis=-1)
    num = dot * dot
    den = np.maximum(ss * yy - num, 0.0)
    return dot, ss, yy, num, den


def sdr(reference, estimate) -> float:
    """Scale-invariant SDR in dB between a reference and an estimate.

    ``10*log10(<s,y>^2 / (|s|^2 |y|^2 - <s,y>^2))`` with a symmetric
    relative guard of 1e-10, so perfect estimates read +100 dB and
    orthogonal ones -100 dB.
    """
    s = _samples(reference)
    y = _samples(estimate)
    if s.shape != y.shape:
        raise LengthMismatch(f"reference has {s.size} samples, estimate {y.size}")
    if s.size == 0:
        raise EmptyWaveform("empty signals")
    _, ss, _, num, den = sdr_terms(s, y)
    if ss == 0:
        raise ZeroReference("reference signal is all-zero")
    return float(sdr_from_terms(num, den))


def check_permutation(perm, n: int) -> tuple[int, ...]:
    perm = tuple(int(p) for p in perm)
    if len(perm) != n or sorted(perm) != list(range(n)):
        raise InvalidPermutation(f"{perm} is not a permutation of range({n})")
    return perm


def sdr_improvement(mixture: Mixture, estimates, perm) -> float:
    """Mean over output channels of SDR(estimate) - SDR(mixture) against the assigned source."""
    perm = check_permutation(perm, mixture.num_sources)
    estimates = [_samples(e) for e in estimates]
    if len(estimates) != mixture.num_sources:
        raise LengthMismatch("one estimate per source is required")
    mix = mixture.mix.samples
    total = 0.0
    for c, est in enumerate(estimates):
        if est.shape != mix.shape:
            raise LengthMismatch("estimate length differs from mixture length")
        ref = mixture.sources[perm[c]]
        total += sdr(ref, est) - sdr(ref, mix)
    return total / len(estimates)


# --------------------------------------------------------------------------- energy


def frame_energies(w, frame_len: int = DEFAULT_FRAME_LEN) -> np.ndarray:
    """Per-frame energy in dB over non-overlapping frames; a trailing partial frame is dropped."""
    x = _samples(w)
    if frame_len < 1:
        raise InvalidConfig("frame_len must be >= 1")
    n_frames = x.size // frame_len
    if x.size == 0 or n_frames == 0:
        raise EmptyWaveform("waveform shorter than one frame")
    frames = x[: n_frames * frame_len].reshape(n_frames, frame_len)
    return 10.0 * np.log10(np.mean(frames**2, axis=1) + ENERGY_GUARD)


def average_active_energy(
    w, frame_len: int = DEFAULT_FRAME_LEN, silence_margin_db: float = DEFAULT_SILENCE_MARGIN_DB
) -> float:
    """Mean linear power of the frames within ``silence_margin_db`` of the loudest frame, in dB."""
    energies = frame_energies(w, frame_len)
    floor_db = 10.0 * np.log10(ENERGY_GUARD)
    peak = energies.max()
    if peak <= floor_db + 1e-9:
        raise NoActiveFrames("every frame sits at the energy floor")
    active = energies[energies >= peak - silence_margin_db]
    return float(10.0 * np.log10(np.mean(10.0 ** (active / 10.0))))


def active_frame_mask(x: np.ndarray, frame_len: int, silence_margin_db: float) -> np.ndarray:
    energies = frame_energies(x, frame_len)
    return energies >= energies.max() - silence_margin_db


# --------------------------------------------------------------------------- synthesis


def _band_edges(sample_rate: int, n_bands: int) -> np.ndarray:
    return np.linspace(0.0, sample_rate / 2.0, n_bands + 1)


def draw_profiles(num_speakers: int, rng: np.random.Generator, n_bands: int = PROFILE_BANDS):
    profiles = []
    for spk in range(num_speakers):
        n_active = int(rng.integers(2, 4))
        start = int(rng.integers(0, n_bands - n_active + 1))
        weights = np.zeros(n_bands)
        weights[start : start + n_active] = rng.dirichlet(np.full(n_active, 2.0))
        weights /= weights.sum()
        amp = float(rng.uniform(0.8, 1.25))
        profiles.append(SpeakerProfile(spk, weights, amp))
    return profiles


def synthesize_utterance(
    profile: SpeakerProfile,
    n_samples: int,
    rng: np.random.Generator,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    tones_per_band: int = 2,
    gap_range: tuple[float, float] = (0.1, 0.3),
) -> np.ndarray:
    edges = _band_edges(sample_rate, profile.band_weights.size)
    t = np.arange(n_samples) / sample_rate
    out = np.zeros(n_samples)
    for k, wk in enumerate(profile.band_weights):
        if wk <= 0:
            continue
        width = edges[k + 1] - edges[k]
        for _ in range(tones_per_band):
            f = rng.uniform(edges[k] + 0.1 * width, edges[k + 1] - 0.1 * width)
            a = profile.base_amplitude * np.sqrt(wk / tones_per_band) * rng.uniform(0.7, 1.3)
            out += a * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    gap = int(rng.uniform(*gap_range) * n_samples)
    if gap > 0:
        start = int(rng.integers(0, n_samples - gap + 1))
        out[start : start + gap] = 0.0
    return out


def synthesize_dataset(
    num_speakers: int = 8,
    T: int = 200,
    samples_per_utt: int = 512,
    gain_range_db: tuple[float, float] = DEFAULT_GAIN_RANGE_DB,
    seed: int = 0,
    *,
    split: str = "train",
    profile_seed: int | None = None,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
) -> Dataset:
    """Two-speaker sinusoidal mixtures drawn from ``num_speakers`` band profiles.

    Speaker profiles come from ``profile_seed`` (defaults to ``seed``) so that
    several splits can share one speaker population.
    """
    if num_speakers < 2 or T < 1 or samples_per_utt < 1:
        raise InvalidConfig("need num_speakers >= 2, T >= 1 and samples_per_utt >= 1")
    lo, hi = gain_range_db
    if lo > hi:
        raise InvalidConfig("gain range must satisfy lo <= hi")
    profiles = draw_profiles(num_speakers, np.random.default_rng(seed if profile_seed is None else profile_seed))
    rng = np.random.default_rng(seed)
    mixtures = []
    for i in range(T):
        spk = rng.choice(num_speakers, size=2, replace=False)
        s1 = synthesize_utterance(profiles[spk[0]], samples_per_utt, rng, sample_rate)
        s2 = synthesize_utterance(profiles[spk[1]], samples_per_utt, rng, sample_rate)
        g = rng.uniform(lo, hi)
        s1 = np.round(s1 * 10.0 ** (g / 40.0) / QUANT_STEP) * QUANT_STEP
        s2 = np.round(s2 * 10.0 ** (-g / 40.0) / QUANT_STEP) * QUANT_STEP
        mixtures.append(
            Mixture(
                i,
                Waveform(s1 + s2, sample_rate),
                (Waveform(s1, sample_rate), Waveform(s2, sample_rate)),
                (int(spk[0]), int(spk[1])),
            )
        )
    manifest = {
        "num_speakers": num_speakers,
        "T": T,
        "samples_per_utt": samples_per_utt,
        "gain_range_db": [lo, hi],
        "seed": seed,
        "profile_seed": seed if profile_seed is None else profile_seed,
        "sample_rate": sample_rate,
        "split": split,
    }
    return Dataset(mixtures, split, manifest)


# --------------------------------------------------------------------------- file format


def write_dataset(dataset: Dataset, path) -> None:
    """Write the binary PITD file plus a ``.json`` sidecar manifest next to it."""
    path = Path(path)
    T = len(dataset)
    N = dataset.num_sources
    L = len(dataset[0].mix)
    chunks = [DATASET_MAGIC, struct.pack("<4I", DATASET_VERSION, T, N, L)]
    for m in dataset:
        chunks.append(np.asarray(m.speaker_ids, dtype="<u4").tobytes())
        chunks.append(m.mix.samples.astype("<f4").tobytes())
        chunks.append(m.source_array().astype("<f4").tobytes())
    path.write_bytes(b"".join(chunks))
    sidecar = dict(dataset.manifest, split=dataset.split)
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def read_dataset(path, split: str | None = None) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a PITD file")
    version, T, N, L = struct.unpack_from("<4I", raw, 4)
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    manifest = {}
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        manifest = json.loads(sidecar.read_text())
    sample_rate = int(manifest.get("sample_rate", DEFAULT_SAMPLE_RATE))
    per = 4 * N + 4 * L + 4 * N * L
    if len(raw) != 20 + T * per:
        raise FormatError(f"{path}: truncated or oversized payload")
    mixtures = []
    off = 20
    for i in range(T):
        ids = np.frombuffer(raw, dtype="<u4", count=N, offset=off)
        off += 4 * N
        mix = np.frombuffer(raw, dtype="<f4", count=L, offset=off).astype(np.float64)
        off += 4 * L
        src = np.frombuffer(raw, dtype="<f4", count=N * L, offset=off).astype(np.float64).reshape(N, L)
        off += 4 * N * L
        mixtures.append(
            Mixture(
                i,
                Waveform(mix, sample_rate),
                tuple(Waveform(s, sample_rate) for s in src),
                tuple(int(x) for x in ids),
            )
        )
    return Dataset(mixtures, split or manifest.get("split", "train"), manifest)
