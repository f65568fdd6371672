"""Epoch loop, PIT / fixed-label sections and the cascaded training schedule."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import InvalidConfig, MissingLabels
from .labels import (
    AssignmentTable,
    best_permutations,
    diff_labels,
    embedding_assignment,
    energy_assignment,
    record_assignments,
    switch_count,
)
from .separator import (
    OptimizerState,
    SeparatorConfig,
    SeparatorParams,
    adam_step,
    attach_loss,
    backward_batch,
    forward_batch,
    init_params,
    sdr_matrix,
)
from .signal import Dataset, sdr_from_terms, sdr_terms

log = logging.getLogger(__name__)

PIT = "pit"
FIXED = "fixed"
LABEL_SOURCES = ("recorded", "energy", "embed")
PRESETS = ("pit", "fixed-energy", "fixed-embed", "fixed-from-pit", "cascade")
EPOCH_CSV_HEADER = ("global_epoch", "section", "mode", "mean_train_loss", "valid_sdri_db", "switch_count", "switch_pct")


@dataclass
class SectionSpec:
    mode: str
    epochs: int
    label_source: object = None  # "recorded" | "energy" | "embed" | AssignmentTable
    reinit_model: bool = False
    reset_optimizer: bool = False
    record_at_end: bool = False

    def __post_init__(self):
        if self.mode not in (PIT, FIXED):
            raise InvalidConfig(f"unknown section mode {self.mode!r}")
        if self.epochs < 0:
            raise InvalidConfig("epochs must be >= 0")
        if self.mode == FIXED and not (
            isinstance(self.label_source, AssignmentTable) or self.label_source in LABEL_SOURCES
        ):
            raise InvalidConfig("a fixed-label section needs a table or one of " + ", ".join(LABEL_SOURCES))

    def describe(self) -> dict:
        src = self.label_source
        return {
            "mode": self.mode,
            "epochs": self.epochs,
            "label_source": "table" if isinstance(src, AssignmentTable) else src,
            "reinit_model": self.reinit_model,
            "reset_optimizer": self.reset_optimizer,
            "record_at_end": self.record_at_end,
        }


@dataclass
class Schedule:
    sections: list[SectionSpec]
    separator: SeparatorConfig = field(default_factory=SeparatorConfig)
    batch_size: int = 8
    shuffle_seed: int = 0
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    energy_frame_len: int = 32
    silence_margin_db: float = 40.0
    embed_bands: int = 8
    cluster_seed: int = 0
    name: str = "custom"

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if not self.sections:
            raise InvalidConfig("a schedule needs at least one section")

    @property
    def total_epochs(self) -> int:
        return sum(s.epochs for s in self.sections)

    def section_seed(self, index: int) -> int:
        """Model seed for a section that re-initializes, derived from the base seed and its index."""
        return int(np.random.SeedSequence([self.separator.seed, index]).generate_state(1)[0])

    def new_optimizer(self, params: SeparatorParams) -> OptimizerState:
        return OptimizerState.create(params, self.lr, self.beta1, self.beta2, self.eps)

    def describe(self) -> dict:
        return {
            "name": self.name,
            "sections": [s.describe() for s in self.sections],
            "separator": asdict(self.separator),
            "batch_size": self.batch_size,
            "shuffle_seed": self.shuffle_seed,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
        }


@dataclass
class EpochRecord:
    global_epoch: int
    section_index: int
    mode: str
    mean_train_loss: float
    valid_sdri: float
    switch_count: int | None
    switch_pct: float | None
    snapshot: AssignmentTable | None = field(default=None, repr=False)
    snapshot_ref: str | None = None

    def row(self) -> list[str]:
        return [
            str(self.global_epoch),
            str(self.section_index),
            self.mode,
            repr(float(self.mean_train_loss)),
            repr(float(self.valid_sdri)),
            "" if self.switch_count is None else str(self.switch_count),
            "" if self.switch_pct is None else repr(float(self.switch_pct)),
        ]


@dataclass
class TrainState:
    params: SeparatorParams | None = None
    opt_state: OptimizerState | None = None
    global_epoch: int = 0
    snapshot: AssignmentTable | None = None
    recorded: AssignmentTable | None = None
    tables: dict = field(default_factory=dict)
    labels_in_use: AssignmentTable | None = None


@dataclass
class RunReport:
    config: dict
    records: list[EpochRecord]
    final_labels: AssignmentTable
    tables: dict
    final_valid_sdri: float
    final_test_sdri: float | None
    label_diff: dict
    params: SeparatorParams = field(repr=False, default=None)

    def epochs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EPOCH_CSV_HEADER)
        for r in self.records:
            w.writerow(r.row())
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "records": [
                {
                    "global_epoch": r.global_epoch,
                    "section": r.section_index,
                    "mode": r.mode,
                    "mean_train_loss": r.mean_train_loss,
                    "valid_sdri_db": r.valid_sdri,
                    "switch_count": r.switch_count,
                    "switch_pct": r.switch_pct,
                    "snapshot": r.snapshot_ref,
                }
                for r in self.records
            ],
            "final_valid_sdri_db": self.final_valid_sdri,
            "final_test_sdri_db": self.final_test_sdri,
            "label_diff_pct": self.label_diff,
            "tables": sorted(self.tables),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------- evaluation


def validate(params: SeparatorParams, dataset: Dataset, chunk: int = 256) -> float:
    """Mean SDR improvement, pairing each mixture with its minimum-loss permutation."""
    if len(dataset) == 0:
        raise InvalidConfig("validation set is empty")
    mixes, sources = dataset.mix_array, dataset.source_array
    total = 0.0
    for start in range(0, len(dataset), chunk):
        sl = slice(start, start + chunk)
        est, _ = forward_batch(params, mixes[sl], fingerprint=False)
        S = sdr_matrix(est, sources[sl])  # (M, c, j)
        perms = best_permutations(-S)
        _, _, _, num, den = sdr_terms(sources[sl], mixes[sl][:, None, :])
        mix_sdr = sdr_from_terms(num, den)  # (M, j)
        chosen = np.take_along_axis(S, perms[:, :, None], axis=2)[:, :, 0]
        base = np.take_along_axis(mix_sdr, perms, axis=1)
        total += float(np.sum(np.mean(chosen - base, axis=1)))
    return total / len(dataset)


# --------------------------------------------------------------------------- training


def run_epoch(
    params: SeparatorParams,
    opt_state: OptimizerState,
    dataset: Dataset,
    mode: str,
    labels: AssignmentTable | None = None,
    *,
    batch_size: int = 8,
    shuffle_seed: int = 0,
    epoch: int = 0,
):
    """One pass over ``dataset`` with an optimizer step after every ``batch_size`` mixtures.

    PIT re-selects the minimum-loss permutation of every mixture against the
    current parameters; FIXED looks it up in ``labels``. Returns
    ``(params, opt_state, mean_loss, end_of_epoch_assignments)``.
    """
    if mode not in (PIT, FIXED):
        raise InvalidConfig(f"unknown mode {mode!r}")
    if mode == FIXED:
        if labels is None:
            raise MissingLabels("fixed-label training needs an assignment table")
        if len(labels) != len(dataset) or labels.num_sources != dataset.num_sources:
            raise MissingLabels("assignment table does not cover the training set")
    mixes, sources = dataset.mix_array, dataset.source_array
    order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(dataset))
    loss_sum = 0.0
    for start in range(0, len(order), batch_size):
        ids = np.sort(order[start : start + batch_size])
        est, cache = forward_batch(params, mixes[ids])
        if mode == PIT:
            perms = best_permutations(-sdr_matrix(est, sources[ids]))
        else:
            perms = labels.perms[ids]
        losses = attach_loss(cache, sources[ids], perms)
        loss_sum += float(losses.sum())
        grads = backward_batch(params, cache)
        params, opt_state = adam_step(params, grads, opt_state)
    table = record_assignments(params, dataset)
    return params, opt_state, loss_sum / len(dataset), table


def resolve_labels(source, state: TrainState, schedule: Schedule, train_set: Dataset) -> AssignmentTable:
    if isinstance(source, AssignmentTable):
        return source
    if source == "recorded":
        if state.recorded is None:
            raise MissingLabels("no recorded assignments available; add record_at_end to an earlier section")
        return state.recorded
    if source not in state.tables:
        if source == "energy":
            state.tables["energy"] = energy_assignment(train_set, schedule.energy_frame_len, schedule.silence_margin_db)
        elif source == "embed":
            _, table = embedding_assignment(train_set, schedule.embed_bands, seed=schedule.cluster_seed)
            state.tables["embed"] = table
        else:
            raise MissingLabels(f"unknown label source {source!r}")
    return state.tables[source]


def run_section(
    state: TrainState,
    section: SectionSpec,
    schedule: Schedule,
    index: int,
    train_set: Dataset,
    valid_set: Dataset,
):
    """Run one schedule section; returns ``(state, records)``."""
    labels = None
    if section.mode == FIXED:
        labels = resolve_labels(section.label_source, state, schedule, train_set)
    if section.epochs == 0:
        return state, []
    if section.reinit_model or state.params is None:
        state.params = init_params(replace(schedule.separator, seed=schedule.section_seed(index)))
        state.opt_state = schedule.new_optimizer(state.params)
    elif section.reset_optimizer or state.opt_state is None:
        state.opt_state = schedule.new_optimizer(state.params)
    state.labels_in_use = labels
    records = []
    for _ in range(section.epochs):
        state.global_epoch += 1
        state.params, state.opt_state, mean_loss, table = run_epoch(
            state.params,
            state.opt_state,
            train_set,
            section.mode,
            labels,
            batch_size=schedule.batch_size,
            shuffle_seed=schedule.shuffle_seed,
            epoch=state.global_epoch,
        )
        table.epoch_tag = state.global_epoch
        if state.snapshot is None:
            count, pct = None, None
        else:
            count, pct = switch_count(state.snapshot, table)
        state.snapshot = table
        rec = EpochRecord(
            state.global_epoch,
            index,
            section.mode,
            mean_loss,
            validate(state.params, valid_set),
            count,
            pct,
            table,
        )
        log.debug("epoch %d [%s] loss=%.3f valid=%.3f switches=%s", rec.global_epoch, rec.mode, mean_loss, rec.valid_sdri, count)
        records.append(rec)
    if section.record_at_end:
        state.recorded = state.snapshot.copy(epoch_tag=state.global_epoch)
        state.tables[f"recorded@{state.global_epoch}"] = state.recorded
    return state, records


def run_schedule(
    schedule: Schedule,
    train_set: Dataset,
    valid_set: Dataset,
    test_set: Dataset | None = None,
    reference: AssignmentTable | None = None,
    state: TrainState | None = None,
) -> RunReport:
    """Execute every section in order and collect per-epoch telemetry."""
    state = state or TrainState()
    records: list[EpochRecord] = []
    for index, section in enumerate(schedule.sections):
        state, recs = run_section(state, section, schedule, index, train_set, valid_set)
        records.extend(recs)
    if state.params is None:
        state.params = init_params(replace(schedule.separator, seed=schedule.section_seed(0)))
    last = schedule.sections[-1]
    if last.mode == FIXED and state.labels_in_use is not None:
        final = state.labels_in_use.copy(epoch_tag=state.global_epoch)
    elif state.snapshot is not None:
        final = state.snapshot
    else:
        final = record_assignments(state.params, train_set, epoch_tag=state.global_epoch)
    final_valid = records[-1].valid_sdri if records else validate(state.params, valid_set)
    label_diff = {}
    if reference is not None:
        label_diff["reference"] = diff_labels(final, reference)
    return RunReport(
        config=schedule.describe(),
        records=records,
        final_labels=final,
        tables=dict(state.tables),
        final_valid_sdri=final_valid,
        final_test_sdri=None if test_set is None else validate(state.params, test_set),
        label_diff=label_diff,
        params=state.params,
    )


def preset_schedule(name: str, L: int = 15, epochs: int = 15, **kwargs) -> Schedule:
    """Canonical schedules: pit, fixed-energy, fixed-embed, fixed-from-pit(L), cascade(L)."""
    if name == "pit":
        sections = [SectionSpec(PIT, epochs, reinit_model=True, record_at_end=True)]
    elif name == "fixed-energy":
        sections = [SectionSpec(FIXED, epochs, "energy", reinit_model=True)]
    elif name == "fixed-embed":
        sections = [SectionSpec(FIXED, epochs, "embed", reinit_model=True)]
    elif name in ("fixed-from-pit", "cascade"):
        sections = [
            SectionSpec(PIT, L, reinit_model=True, record_at_end=True),
            SectionSpec(FIXED, epochs, "recorded", reinit_model=True, reset_optimizer=True),
        ]
        if name == "cascade":
            sections.append(SectionSpec(PIT, epochs, reset_optimizer=True, record_at_end=True))
    else:
        raise InvalidConfig(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return Schedule(sections, name=name, **kwargs)


__all__ = [
    "PIT",
    "FIXED",
    "PRESETS",
    "SectionSpec",
    "Schedule",
    "EpochRecord",
    "TrainState",
    "RunReport",
    "validate",
    "run_epoch",
    "run_section",
    "run_schedule",
    "preset_schedule",
    "resolve_labels",
]
