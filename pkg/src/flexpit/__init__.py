"""Fixed and permutation-invariant label assignment for two-speaker separation."""

from .errors import FlexPITError
from .labels import (
    Assignment,
    AssignmentTable,
    assignment_cost,
    best_permutation,
    constrained_2means,
    diff_labels,
    embedding_assignment,
    energy_assignment,
    pit_losses,
    record_assignments,
    speaker_embedding,
    switch_count,
)
from .separator import (
    OptimizerState,
    SeparatorConfig,
    SeparatorParams,
    adam_step,
    backward,
    forward,
    init_params,
    load_checkpoint,
    loss,
    save_checkpoint,
)
from .signal import Dataset, Mixture, Waveform, read_dataset, sdr, sdr_improvement, synthesize_dataset, write_dataset
from .trainer import Schedule, SectionSpec, preset_schedule, run_schedule, validate

__version__ = "0.1.0"
