"""Miniature mask-inference separator: linear encoder, tanh mask network, linear decoder.

Every frame of ``F`` samples is encoded to ``B`` latent bins; a one-hidden-layer
network predicts ``N`` masks per bin (softmax across channels, so masks
partition unity), and each masked latent is decoded back to ``F`` samples.
Gradients of the utterance-level SDR loss are derived by hand.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidConfig, ShapeMismatch, StaleCache
from .signal import SDR_EPS, Mixture, Waveform, check_permutation, sdr_from_terms, sdr_terms

PARAM_NAMES = ("encoder", "mask_w1", "mask_b1", "mask_w2", "mask_b2", "decoder")
CHECKPOINT_MAGIC = b"PITM"
CHECKPOINT_VERSION = 1
_DB = 10.0 / np.log(10.0)


@dataclass(frozen=True)
class SeparatorConfig:
    frame_len: int = 16
    latent_dim: int = 16
    hidden_dim: int = 32
    num_channels: int = 2
    init_scale: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.frame_len < 4 or self.latent_dim < 2 or self.num_channels < 2 or self.hidden_dim < 1:
            raise InvalidConfig("need frame_len >= 4, latent_dim >= 2, hidden_dim >= 1, num_channels >= 2")
        if self.init_scale < 0:
            raise InvalidConfig("init_scale must be non-negative")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        F, B, H, N = self.frame_len, self.latent_dim, self.hidden_dim, self.num_channels
        return {
            "encoder": (B, F),
            "mask_w1": (H, B),
            "mask_b1": (H,),
            "mask_w2": (N * B, H),
            "mask_b2": (N * B,),
            "decoder": (F, B),
        }


@dataclass
class SeparatorParams:
    encoder: np.ndarray
    mask_w1: np.ndarray
    mask_b1: np.ndarray
    mask_w2: np.ndarray
    mask_b2: np.ndarray
    decoder: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "SeparatorParams":
        return SeparatorParams(**{k: v.copy() for k, v in self.arrays().items()})

    def map(self, fn) -> "SeparatorParams":
        return SeparatorParams(**{k: fn(v) for k, v in self.arrays().items()})

    @classmethod
    def zeros_like(cls, other: "SeparatorParams") -> "SeparatorParams":
        return other.map(np.zeros_like)

    @property
    def frame_len(self) -> int:
        return self.encoder.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.encoder.shape[0]

    @property
    def num_channels(self) -> int:
        return self.mask_w2.shape[0] // self.encoder.shape[0]

    def fingerprint(self) -> bytes:
        h = hashlib.blake2b(digest_size=16)
        for v in self.arrays().values():
            h.update(np.ascontiguousarray(v).tobytes())
        return h.digest()

    def equal(self, other: "SeparatorParams") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.arrays().values(), other.arrays().values()))

    def check(self) -> None:
        B, F = self.encoder.shape
        H = self.mask_w1.shape[0]
        if (
            self.mask_w1.shape != (H, B)
            or self.mask_b1.shape != (H,)
            or self.mask_w2.ndim != 2
            or self.mask_w2.shape[1] != H
            or self.mask_w2.shape[0] % B
            or self.mask_b2.shape != (self.mask_w2.shape[0],)
            or self.decoder.shape != (F, B)
        ):
            raise ShapeMismatch("inconsistent separator parameter shapes")


def init_params(config: SeparatorConfig) -> SeparatorParams:
    """Uniform(-init_scale, init_scale) entries from a generator seeded by ``config.seed``."""
    if not isinstance(config, SeparatorConfig):
        raise InvalidConfig("expected a SeparatorConfig")
    rng = np.random.default_rng(config.seed)
    s = config.init_scale
    return SeparatorParams(**{name: rng.uniform(-s, s, size=shape) for name, shape in config.shapes().items()})


# --------------------------------------------------------------------------- batched core


@dataclass
class BatchCache:
    X: np.ndarray  # (M, P, F) padded frames
    Z: np.ndarray  # (M, P, B) latents
    Hh: np.ndarray  # (M, P, H) hidden activations
    masks: np.ndarray  # (M, P, N, B)
    C: np.ndarray  # (M, P, N, B) masked latents
    length: int
    pad: int
    estimates: np.ndarray  # (M, N, L)
    token: bytes = b""
    dloss: np.ndarray | None = None  # (M, N, L) d(per-mixture loss)/d(estimate)
    target: object = None


def forward_batch(params: SeparatorParams, mixes: np.ndarray, fingerprint: bool = True):
    """Separate a stack of equal-length mixtures ``(M, L)`` into ``(M, N, L)`` estimates."""
    params.check()
    mixes = np.atleast_2d(np.asarray(mixes, dtype=np.float64))
    M, L = mixes.shape
    F, B, N = params.frame_len, params.latent_dim, params.num_channels
    P = -(-L // F)
    pad = P * F - L
    X = np.pad(mixes, ((0, 0), (0, pad))).reshape(M, P, F) if pad else mixes.reshape(M, P, F)
    Z = X @ params.encoder.T
    Hh = np.tanh(Z @ params.mask_w1.T + params.mask_b1)
    G = (Hh @ params.mask_w2.T + params.mask_b2).reshape(M, P, N, B)
    G = G - G.max(axis=2, keepdims=True)
    E = np.exp(G)
    masks = E / E.sum(axis=2, keepdims=True)
    C = masks * Z[:, :, None, :]
    Yf = C @ params.decoder.T  # (M, P, N, F)
    est = Yf.transpose(0, 2, 1, 3).reshape(M, N, P * F)[:, :, :L]
    cache = BatchCache(X, Z, Hh, masks, C, L, pad, est, params.fingerprint() if fingerprint else b"")
    return est, cache


def sdr_matrix(estimates: np.ndarray, sources: np.ndarray) -> np.ndarray:
    """(M, N_out, N_src) guarded SDR of every output channel against every source."""
    _, _, _, num, den = sdr_terms(sources[:, None, :, :], estimates[:, :, None, :])
    return sdr_from_terms(num, den)


def sdr_and_grad(reference: np.ndarray, estimate: np.ndarray):
    """Guarded SDR along the last axis and its gradient w.r.t. the estimate (zero when saturated)."""
    dot, ss, yy, num, den = sdr_terms(reference, estimate)
    value = sdr_from_terms(num, den)
    live = (num > SDR_EPS * den) & (den > SDR_EPS * num)
    with np.errstate(divide="ignore", invalid="ignore"):
        gnum = np.where(live, 1.0 / num, 0.0)
        gden = np.where(live, 1.0 / den, 0.0)
    grad = _DB * (
        (2 * dot * gnum)[..., None] * reference
        - gden[..., None] * (2 * ss[..., None] * estimate - 2 * dot[..., None] * reference)
    )
    return value, grad


def loss_batch(params: SeparatorParams, mixes, sources, perms, fingerprint: bool = True):
    """Per-mixture loss ``-mean_c SDR(sources[perm[c]], est[c])`` and a cache ready for backward."""
    est, cache = forward_batch(params, mixes, fingerprint)
    return attach_loss(cache, sources, perms), cache


def attach_loss(cache: BatchCache, sources, perms) -> np.ndarray:
    """Score a finished forward pass under ``perms`` and store the loss gradient in ``cache``."""
    sources = np.asarray(sources, dtype=np.float64)
    perms = np.asarray(perms, dtype=np.int64)
    est = cache.estimates
    M, N, _ = est.shape
    if sources.shape != est.shape or perms.shape != (M, N):
        raise ShapeMismatch("sources/perms do not match the batch")
    refs = np.take_along_axis(sources, perms[:, :, None], axis=1)
    values, grad = sdr_and_grad(refs, est)
    cache.dloss = -grad / N
    return -values.mean(axis=1)


def backward_batch(params: SeparatorParams, cache: BatchCache, weights=None) -> SeparatorParams:
    """Gradient of ``sum_m weights[m] * loss[m]`` (weights default to 1/M)."""
    if cache.dloss is None:
        raise StaleCache("cache carries no loss information; call loss first")
    if cache.token and cache.token != params.fingerprint():
        raise StaleCache("parameters changed since the forward pass")
    M, N, L = cache.dloss.shape
    P, F = cache.X.shape[1], cache.X.shape[2]
    B = params.latent_dim
    w = np.full(M, 1.0 / M) if weights is None else np.asarray(weights, dtype=np.float64)
    dY = np.zeros((M, N, P * F))
    dY[:, :, :L] = cache.dloss * w[:, None, None]
    dYf = dY.reshape(M, N, P, F).transpose(0, 2, 1, 3)  # (M, P, N, F)

    d_decoder = dYf.reshape(-1, F).T @ cache.C.reshape(-1, B)
    dC = dYf @ params.decoder  # (M, P, N, B)
    masks = cache.masks
    dmask = dC * cache.Z[:, :, None, :]
    dZ = np.sum(dC * masks, axis=2)
    dG = masks * (dmask - np.sum(masks * dmask, axis=2, keepdims=True))
    dG = dG.reshape(M * P, N * B)
    Hh = cache.Hh.reshape(M * P, -1)
    d_w2 = dG.T @ Hh
    d_b2 = dG.sum(axis=0)
    dA = (dG @ params.mask_w2) * (1.0 - Hh**2)
    Zf = cache.Z.reshape(M * P, B)
    d_w1 = dA.T @ Zf
    d_b1 = dA.sum(axis=0)
    dZ = dZ.reshape(M * P, B) + dA @ params.mask_w1
    d_encoder = dZ.T @ cache.X.reshape(M * P, F)
    return SeparatorParams(d_encoder, d_w1, d_b1, d_w2, d_b2, d_decoder)


# --------------------------------------------------------------------------- single-mixture API


def _mix_samples(mix) -> np.ndarray:
    return mix.samples if isinstance(mix, Waveform) else np.asarray(mix, dtype=np.float64)


def forward(params: SeparatorParams, mix):
    """Separate one mixture; returns ``(list of N Waveforms, cache)``."""
    x = _mix_samples(mix)
    est, cache = forward_batch(params, x[None, :])
    rate = mix.sample_rate if isinstance(mix, Waveform) else Waveform(x).sample_rate
    return [Waveform(e, rate) for e in est[0]], cache


def loss(params: SeparatorParams, mixture: Mixture, perm):
    perm = check_permutation(perm, mixture.num_sources)
    value, cache = loss_batch(params, mixture.mix.samples[None, :], mixture.source_array()[None], [perm])
    cache.target = (mixture.id, perm)
    return float(value[0]), cache


def backward(params: SeparatorParams, mixture: Mixture, perm, cache: BatchCache) -> SeparatorParams:
    perm = check_permutation(perm, mixture.num_sources)
    if cache.target != (mixture.id, perm):
        raise StaleCache("cache was produced for a different mixture or permutation")
    return backward_batch(params, cache)


# --------------------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: SeparatorParams
    v: SeparatorParams
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: SeparatorParams, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(SeparatorParams.zeros_like(params), SeparatorParams.zeros_like(params), 0, lr, beta1, beta2, eps)

    def reset(self) -> "OptimizerState":
        return OptimizerState.create(self.m, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(params: SeparatorParams, grads: SeparatorParams, state: OptimizerState):
    """One Adam update; returns fresh ``(params, state)`` without mutating the inputs."""
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = {}, {}, {}
    for name in PARAM_NAMES:
        p, g = getattr(params, name), getattr(grads, name)
        m, v = getattr(state.m, name), getattr(state.v, name)
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"{name}: parameter {p.shape}, gradient {g.shape}, moment {m.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**step)
        vhat = v / (1 - b2**step)
        new_p[name] = p - state.lr * mhat / (np.sqrt(vhat) + state.eps)
        new_m[name], new_v[name] = m, v
    new_state = OptimizerState(
        SeparatorParams(**new_m), SeparatorParams(**new_v), step, state.lr, b1, b2, state.eps
    )
    return SeparatorParams(**new_p), new_state


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(params: SeparatorParams, config: SeparatorConfig, path) -> None:
    header = CHECKPOINT_MAGIC + struct.pack(
        "<5IdQ",
        CHECKPOINT_VERSION,
        config.frame_len,
        config.latent_dim,
        config.hidden_dim,
        config.num_channels,
        config.init_scale,
        config.seed,
    )
    body = b"".join(getattr(params, n).astype("<f4").tobytes() for n in PARAM_NAMES)
    Path(path).write_bytes(header + body)


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a PITM checkpoint")
    version, F, B, H, N, scale, seed = struct.unpack_from("<5IdQ", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    config = SeparatorConfig(F, B, H, N, scale, seed)
    off = 4 + struct.calcsize("<5IdQ")
    arrays = {}
    for name, shape in config.shapes().items():
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=off).astype(np.float64).reshape(shape)
        off += 4 * n
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return SeparatorParams(**arrays), config


__all__ = [
    "SeparatorConfig",
    "SeparatorParams",
    "OptimizerState",
    "BatchCache",
    "init_params",
    "forward",
    "forward_batch",
    "loss",
    "loss_batch",
    "attach_loss",
    "backward",
    "backward_batch",
    "sdr_matrix",
    "sdr_and_grad",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
]
