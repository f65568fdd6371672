"""Label assignment strategies and switch accounting.

An assignment is a permutation ``perm`` where output channel ``c`` is trained
against reference source ``perm[c]``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import permutations
from pathlib import Path

import numpy as np

from .errors import (
    CoverageMismatch,
    EmptyInput,
    FormatError,
    InvalidConfig,
    NoActiveFrames,
    SilentUtterance,
    TooManySources,
)
from .separator import SeparatorParams, forward_batch, sdr_matrix
from .signal import (
    DEFAULT_FRAME_LEN,
    DEFAULT_SILENCE_MARGIN_DB,
    ENERGY_GUARD,
    Dataset,
    Mixture,
    Waveform,
    active_frame_mask,
    average_active_energy,
    check_permutation,
)

MAX_ENUMERATED_SOURCES = 8
EMBED_FRAME_LEN = 64
EMBED_BANDS = 8


@dataclass(frozen=True)
class Assignment:
    perm: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "perm", check_permutation(self.perm, len(self.perm)))

    @property
    def is_identity(self) -> bool:
        return self.perm == tuple(range(len(self.perm)))


@dataclass(eq=False)
class AssignmentTable:
    """Permutation per mixture id, stored as a ``(T, N)`` integer array indexed by id."""

    perms: np.ndarray
    epoch_tag: int | None = None

    def __post_init__(self):
        perms = np.asarray(self.perms, dtype=np.int64)
        if perms.ndim != 2 or perms.shape[0] < 1:
            raise InvalidConfig("assignment table needs a (T, N) permutation array")
        if not np.all(np.sort(perms, axis=1) == np.arange(perms.shape[1])):
            raise InvalidConfig("every row must be a permutation")
        self.perms = perms

    @classmethod
    def from_entries(cls, entries: dict, epoch_tag=None) -> "AssignmentTable":
        ids = sorted(entries)
        if ids != list(range(len(ids))):
            raise CoverageMismatch("mixture ids must be dense in [0, T)")
        rows = [entries[i].perm if isinstance(entries[i], Assignment) else tuple(entries[i]) for i in ids]
        return cls(np.array(rows), epoch_tag)

    def __len__(self):
        return self.perms.shape[0]

    def __getitem__(self, i) -> tuple[int, ...]:
        return tuple(int(x) for x in self.perms[i])

    @property
    def num_sources(self) -> int:
        return self.perms.shape[1]

    @property
    def entries(self) -> dict[int, Assignment]:
        return {i: Assignment(self[i]) for i in range(len(self))}

    def __eq__(self, other):
        if not isinstance(other, AssignmentTable):
            return NotImplemented
        return self.perms.shape == other.perms.shape and bool(np.array_equal(self.perms, other.perms))

    def copy(self, epoch_tag=None) -> "AssignmentTable":
        return AssignmentTable(self.perms.copy(), self.epoch_tag if epoch_tag is None else epoch_tag)

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.epoch_tag is not None:
            buf.write(f"# epoch={self.epoch_tag}\n")
        buf.write("mixture_id,perm\n")
        for i, row in enumerate(self.perms):
            buf.write(f"{i},{' '.join(str(int(x)) for x in row)}\n")
        return buf.getvalue()

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "AssignmentTable":
        epoch_tag = None
        body = []
        for line in text.splitlines():
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                if key.strip() == "epoch":
                    epoch_tag = int(value)
                continue
            if line.strip():
                body.append(line)
        rows = list(csv.reader(body))
        if not rows or rows[0] != ["mixture_id", "perm"]:
            raise FormatError("assignment CSV must start with 'mixture_id,perm'")
        entries = {}
        for rec in rows[1:]:
            if len(rec) != 2:
                raise FormatError(f"malformed assignment row {rec!r}")
            entries[int(rec[0])] = tuple(int(x) for x in rec[1].split())
        if not entries:
            raise FormatError("assignment CSV has no rows")
        return cls.from_entries(entries, epoch_tag)

    @classmethod
    def load(cls, path) -> "AssignmentTable":
        return cls.from_csv(Path(path).read_text())


# --------------------------------------------------------------------------- PIT


@lru_cache(maxsize=None)
def _all_perms(n: int) -> np.ndarray:
    return np.array(list(permutations(range(n))), dtype=np.int64)


def best_permutations(loss_matrices) -> np.ndarray:
    """Row-wise exhaustive minimum over all N! assignments of a ``(M, N, N)`` loss stack.

    Ties go to the lexicographically smallest permutation.
    """
    L = np.asarray(loss_matrices, dtype=np.float64)
    if L.ndim != 3 or L.shape[1] != L.shape[2]:
        raise InvalidConfig("loss matrices must be (M, N, N)")
    n = L.shape[1]
    if n > MAX_ENUMERATED_SOURCES:
        raise TooManySources(f"refusing to enumerate {n}! permutations")
    if not np.all(np.isfinite(L)):
        raise InvalidConfig("loss matrix entries must be finite")
    perms = _all_perms(n)
    totals = L[:, 0, perms[:, 0]]
    for c in range(1, n):
        totals = totals + L[:, c, perms[:, c]]
    return perms[np.argmin(totals, axis=1)]


def best_permutation(loss_matrix) -> Assignment:
    L = np.asarray(loss_matrix, dtype=np.float64)
    if L.ndim != 2:
        raise InvalidConfig("loss matrix must be N x N")
    return Assignment(tuple(int(x) for x in best_permutations(L[None])[0]))


def assignment_cost(loss_matrix, perm) -> float:
    """Total loss of one assignment, summed over channels in order (as the enumeration does)."""
    L = np.asarray(loss_matrix, dtype=np.float64)
    perm = check_permutation(perm, L.shape[0])
    total = L[0, perm[0]]
    for c in range(1, len(perm)):
        total = total + L[c, perm[c]]
    return float(total)


def pit_losses(params: SeparatorParams, mixture: Mixture) -> np.ndarray:
    """``[c][j] = -SDR(source j, estimate c)`` from a single forward pass."""
    est, _ = forward_batch(params, mixture.mix.samples[None, :], fingerprint=False)
    return -sdr_matrix(est, mixture.source_array()[None])[0]


def pit_losses_batch(params: SeparatorParams, mixes: np.ndarray, sources: np.ndarray) -> np.ndarray:
    est, _ = forward_batch(params, mixes, fingerprint=False)
    return -sdr_matrix(est, sources)


def record_assignments(params: SeparatorParams, dataset: Dataset, epoch_tag=None, chunk: int = 256) -> AssignmentTable:
    """Minimum-loss assignment for every mixture under ``params``; no parameter update."""
    mixes, sources = dataset.mix_array, dataset.source_array
    rows = []
    for start in range(0, len(dataset), chunk):
        sl = slice(start, start + chunk)
        rows.append(best_permutations(pit_losses_batch(params, mixes[sl], sources[sl])))
    return AssignmentTable(np.concatenate(rows), epoch_tag)


# --------------------------------------------------------------------------- energy


def _total_energy(x: np.ndarray) -> float:
    return float(10.0 * np.log10(np.mean(x**2) + ENERGY_GUARD))


def _active_energy_or_total(x: np.ndarray, frame_len: int, margin: float) -> float:
    try:
        return average_active_energy(x, frame_len, margin)
    except NoActiveFrames:
        return _total_energy(x)


def energy_assignment(
    dataset: Dataset,
    frame_len: int = DEFAULT_FRAME_LEN,
    silence_margin_db: float = DEFAULT_SILENCE_MARGIN_DB,
) -> AssignmentTable:
    """Louder source (by active-frame energy) to channel 0, the other to channel 1."""
    if dataset.num_sources != 2:
        raise InvalidConfig("energy-based assignment is defined for two-source mixtures")
    rows = []
    for m in dataset:
        e0, e1 = (_active_energy_or_total(s.samples, frame_len, silence_margin_db) for s in m.sources)
        rows.append((1, 0) if e1 > e0 + 1e-12 else (0, 1))
    return AssignmentTable(np.array(rows))


# --------------------------------------------------------------------------- speaker embeddings


def speaker_embedding(
    w,
    n_bands: int = EMBED_BANDS,
    frame_len: int = EMBED_FRAME_LEN,
    silence_margin_db: float = DEFAULT_SILENCE_MARGIN_DB,
) -> np.ndarray:
    """Unit-norm log band-energy signature over the active frames of an utterance."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if n_bands < 1 or frame_len // 2 < n_bands:
        raise InvalidConfig("need 1 <= n_bands <= frame_len // 2")
    n_frames = x.size // frame_len
    if n_frames == 0 or not np.any(x):
        raise SilentUtterance("utterance has no energy")
    active = active_frame_mask(x, frame_len, silence_margin_db)
    frames = x[: n_frames * frame_len].reshape(n_frames, frame_len)[active]
    power = np.abs(np.fft.rfft(frames * np.hanning(frame_len), axis=1)[:, : frame_len // 2]) ** 2
    spectrum = power.mean(axis=0) / frame_len**2
    bands = np.array([b.sum() for b in np.array_split(spectrum, n_bands)])
    v = np.log(bands + ENERGY_GUARD)
    norm = np.linalg.norm(v)
    if norm == 0:
        raise SilentUtterance("degenerate embedding")
    return v / norm


def embed_pairs(dataset: Dataset, n_bands: int = EMBED_BANDS, frame_len: int = EMBED_FRAME_LEN) -> np.ndarray:
    """(T, 2, K) embeddings of the two reference sources of every mixture."""
    if dataset.num_sources != 2:
        raise InvalidConfig("speaker-embedding assignment is defined for two-source mixtures")
    return np.array([[speaker_embedding(s, n_bands, frame_len) for s in m.sources] for m in dataset])


@dataclass
class ClusterState:
    means: np.ndarray  # (2, K)
    assignments: np.ndarray  # (T, 2) cluster id (1 or 2) of each utterance
    objective: float
    n_iter: int = 0
    converged: bool = False
    objective_history: list = field(default_factory=list)
    assignment_history: list = field(default_factory=list)


def _sqdist(a: np.ndarray, m: np.ndarray) -> np.ndarray:
    return np.sum((a - m) ** 2, axis=-1)


def constrained_2means(pairs, seed: int = 0, max_iter: int = 100, tol: float = 0.0):
    """Two-cluster k-means where the two utterances of every mixture must split.

    A pair goes ``[first -> cluster 1, second -> cluster 2]`` unless the swap
    is strictly cheaper under squared Euclidean distance; means are refreshed
    once every pair is placed. Returns ``(ClusterState, AssignmentTable)``
    with cluster-1 utterances routed to output channel 0.
    """
    S = np.asarray(pairs, dtype=np.float64)
    if S.ndim != 3 or S.shape[0] == 0 or S.shape[1] != 2:
        raise EmptyInput("need at least one (2, K) embedding pair")
    if max_iter < 1:
        raise InvalidConfig("max_iter must be >= 1")
    rng = np.random.default_rng(seed)
    i0 = int(rng.integers(S.shape[0]))
    means = S[i0].copy()
    swap_prev = None
    state = ClusterState(means, np.empty((0, 2), dtype=np.int64), np.inf)
    for it in range(1, max_iter + 1):
        keep = _sqdist(S[:, 0], means[0]) + _sqdist(S[:, 1], means[1])
        cross = _sqdist(S[:, 0], means[1]) + _sqdist(S[:, 1], means[0])
        swap = cross < keep
        objective = float(np.where(swap, cross, keep).sum())
        state.objective_history.append(objective)
        state.assignment_history.append(swap.copy())

        c1 = np.where(swap[:, None], S[:, 1], S[:, 0])
        c2 = np.where(swap[:, None], S[:, 0], S[:, 1])
        new_means = means.copy()
        for k, members in enumerate((c1, c2)):
            if len(members):
                new_means[k] = members.mean(axis=0)
            # an empty cluster keeps its previous mean
        unchanged = swap_prev is not None and np.array_equal(swap, swap_prev)
        stalled = (
            tol > 0 and len(state.objective_history) > 1 and state.objective_history[-2] - objective <= tol
        )
        state.n_iter = it
        state.objective = objective
        state.assignments = np.where(swap[:, None], [[2, 1]], [[1, 2]])
        if unchanged or stalled:
            state.converged = True
            break
        means = new_means
        swap_prev = swap
    state.means = means
    table = AssignmentTable(np.where(swap[:, None], [[1, 0]], [[0, 1]]))
    return state, table


def embedding_assignment(dataset: Dataset, n_bands: int = EMBED_BANDS, seed: int = 0, max_iter: int = 100):
    return constrained_2means(embed_pairs(dataset, n_bands), seed=seed, max_iter=max_iter)


# --------------------------------------------------------------------------- accounting


def _check_coverage(a: AssignmentTable, b: AssignmentTable) -> None:
    if a.perms.shape != b.perms.shape:
        raise CoverageMismatch(f"tables cover {a.perms.shape} vs {b.perms.shape}")


def switch_count(prev: AssignmentTable, curr: AssignmentTable) -> tuple[int, float]:
    """Number and percentage of mixtures whose assignment changed between two snapshots."""
    _check_coverage(prev, curr)
    count = int(np.any(prev.perms != curr.perms, axis=1).sum())
    return count, 100.0 * count / len(curr)


def diff_labels(a: AssignmentTable, b: AssignmentTable) -> float:
    return switch_count(a, b)[1]


__all__ = [
    "Assignment",
    "AssignmentTable",
    "ClusterState",
    "assignment_cost",
    "best_permutation",
    "best_permutations",
    "pit_losses",
    "pit_losses_batch",
    "record_assignments",
    "energy_assignment",
    "speaker_embedding",
    "embed_pairs",
    "constrained_2means",
    "embedding_assignment",
    "switch_count",
    "diff_labels",
]
