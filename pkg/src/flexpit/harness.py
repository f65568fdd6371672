"""Experiment configuration, dataset generation, training runs, L sweeps and reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidConfig
from .labels import AssignmentTable, diff_labels, embedding_assignment, energy_assignment
from .separator import SeparatorConfig, save_checkpoint
from .signal import SPLITS, read_dataset, synthesize_dataset, write_dataset
from .trainer import FIXED, PIT, PRESETS, Schedule, SectionSpec, TrainState, preset_schedule, run_schedule, run_section, validate

LABEL_KIND = {
    "pit": "dyn",
    "fixed-energy": "fixed",
    "fixed-embed": "fixed",
    "fixed-from-pit": "fixed",
    "cascade": "csc",
}
TABLE_HEADER = ("approach", "labels", "valid_sdri_db", "test_sdri_db", "diff_labels_pct")
SWEEP_HEADER = ("L", "valid_sdri_db", "test_sdri_db", "diff_vs_ref_pct")


@dataclass
class ExperimentConfig:
    """Flat experiment description; ``output_dir`` holds data/, runs/ and sweeps/."""

    num_speakers: int = 8
    T_train: int = 200
    T_valid: int = 50
    T_test: int = 50
    samples_per_utt: int = 512
    gain_min_db: float = -2.5
    gain_max_db: float = 2.5
    data_seed: int = 0
    frame_len: int = 16
    latent_dim: int = 16
    hidden_dim: int = 32
    init_scale: float = 0.05
    L: int = 15
    epochs: int = 15
    batch_size: int = 8
    lr: float = 3e-3
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "experiment"

    def __post_init__(self):
        for name in ("T_train", "T_valid", "T_test", "samples_per_utt", "batch_size"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1")
        if self.num_speakers < 2:
            raise InvalidConfig("num_speakers must be >= 2")
        if self.gain_min_db > self.gain_max_db:
            raise InvalidConfig("gain_min_db must not exceed gain_max_db")
        if self.L < 0 or self.epochs < 0:
            raise InvalidConfig("L and epochs must be >= 0")
        if not self.seeds:
            raise InvalidConfig("seeds list must be non-empty")
        self.seeds = [int(s) for s in self.seeds]

    @classmethod
    def from_dict(cls, data: dict, base_dir=None) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidConfig("unknown config keys: " + ", ".join(unknown))
        cfg = cls(**data)
        if base_dir is not None and not Path(cfg.output_dir).is_absolute():
            cfg.output_dir = str(Path(base_dir) / cfg.output_dir)
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        """Read a JSON config; a relative ``output_dir`` is taken relative to the file."""
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{path}: not valid JSON ({exc.msg})") from None
        if not isinstance(data, dict):
            raise InvalidConfig(f"{path}: config must be a JSON object")
        return cls.from_dict(data, base_dir=path.parent)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @property
    def root(self) -> Path:
        return Path(self.output_dir)

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    def separator(self, seed: int) -> SeparatorConfig:
        return SeparatorConfig(self.frame_len, self.latent_dim, self.hidden_dim, 2, self.init_scale, seed)

    def schedule(self, preset: str, seed: int) -> Schedule:
        return preset_schedule(
            preset,
            L=self.L,
            epochs=self.epochs,
            separator=self.separator(seed),
            batch_size=self.batch_size,
            shuffle_seed=seed,
            lr=self.lr,
            cluster_seed=seed,
        )

    def split_seed(self, split: str) -> int:
        # distinct per split so the three sets never share a mixture draw
        return int(np.random.SeedSequence([self.data_seed, SPLITS.index(split)]).generate_state(1)[0])

    def split_size(self, split: str) -> int:
        return {"train": self.T_train, "valid": self.T_valid, "test": self.T_test}[split]


@dataclass
class SweepEntry:
    L: int
    valid_sdri: float
    test_sdri: float
    diff_vs_ref: float
    table: AssignmentTable = field(repr=False)


@dataclass
class SweepResult:
    ref_L: int
    entries: list[SweepEntry]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for e in self.entries:
            w.writerow([e.L, repr(e.valid_sdri), repr(e.test_sdri), repr(e.diff_vs_ref)])
        return buf.getvalue()


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def load_splits(config: ExperimentConfig, splits=SPLITS) -> dict:
    out = {}
    for split in splits:
        path = config.data_dir / f"{split}.pitd"
        if not path.exists():
            raise FileNotFoundError(f"{path} is missing; run gen-data first")
        out[split] = read_dataset(path, split)
    return out


# --------------------------------------------------------------------------- commands


def cmd_gen_data(config: ExperimentConfig) -> dict:
    """Write train/valid/test datasets and a manifest under ``<output_dir>/data``."""
    paths = {}
    manifest = {"config": asdict(config), "splits": {}}
    for split in SPLITS:
        ds = synthesize_dataset(
            config.num_speakers,
            config.split_size(split),
            config.samples_per_utt,
            (config.gain_min_db, config.gain_max_db),
            config.split_seed(split),
            split=split,
            profile_seed=config.data_seed,
        )
        path = config.data_dir / f"{split}.pitd"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_dataset(ds, path)
        paths[split] = path
        manifest["splits"][split] = {"file": path.name, **ds.manifest}
    paths["manifest"] = _write(config.data_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths


def cmd_labels(dataset_path, strategy: str, out=None, seed: int = 0, n_bands: int = 8):
    """Build a fixed label table for a dataset file; returns ``(table, summary)``."""
    dataset_path = Path(dataset_path)
    ds = read_dataset(dataset_path)
    if strategy == "energy":
        table = energy_assignment(ds)
        summary = {"strategy": "energy"}
    elif strategy == "embed":
        state, table = embedding_assignment(ds, n_bands, seed=seed)
        summary = {
            "strategy": "embed",
            "objective": state.objective,
            "iterations": state.n_iter,
            "converged": state.converged,
        }
    else:
        raise InvalidConfig(f"unknown strategy {strategy!r}; choose energy or embed")
    out = Path(out) if out else dataset_path.with_name(f"{dataset_path.stem}.{strategy}.csv")
    table.save(out)
    swapped = sum(1 for i in range(len(table)) if table[i] != tuple(range(table.num_sources)))
    summary.update({"mixtures": len(table), "swapped": swapped, "table": str(out)})
    return table, summary


def run_dir(config: ExperimentConfig, preset: str, seed: int) -> Path:
    return config.root / "runs" / f"{preset}-seed{seed}"


def cmd_train(config: ExperimentConfig, preset: str, seed: int, reference_labels=None) -> Path:
    """Train one preset and write its run directory.

    The report's label difference is taken against ``reference_labels`` when
    given, otherwise against the final table of a cascade run of the same seed
    if one exists (a cascade run compares with itself).
    """
    if preset not in PRESETS:
        raise InvalidConfig(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    data = load_splits(config)
    schedule = config.schedule(preset, seed)
    report = run_schedule(schedule, data["train"], data["valid"], data["test"])
    out = run_dir(config, preset, seed)
    out.mkdir(parents=True, exist_ok=True)

    for rec in report.records:
        rec.snapshot_ref = f"snapshots/epoch_{rec.global_epoch:04d}.csv"
        rec.snapshot.save(out / rec.snapshot_ref)
    for name, table in report.tables.items():
        table.save(out / "tables" / f"{name.replace('@', '_at_')}.csv")
    report.final_labels.save(out / "final_labels.csv")
    _write(out / "epochs.csv", report.epochs_csv())
    save_checkpoint(report.params, schedule.separator, out / "model.pitm")

    if reference_labels is not None:
        ref, ref_name = AssignmentTable.load(reference_labels), str(reference_labels)
    elif preset == "cascade":
        ref, ref_name = report.final_labels, "cascade-final (self)"
    else:
        path = run_dir(config, "cascade", seed) / "final_labels.csv"
        ref, ref_name = (AssignmentTable.load(path), str(path)) if path.exists() else (None, None)
    doc = report.to_dict()
    doc.update(
        {
            "preset": preset,
            "seed": seed,
            "labels": LABEL_KIND[preset],
            "experiment": asdict(config),
            "diff_labels_vs_cascade_pct": None if ref is None else diff_labels(report.final_labels, ref),
            "diff_reference": ref_name,
        }
    )
    _write(out / "report.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out


def cmd_sweep_L(config: ExperimentConfig, L_values, seed: int, ref_L: int | None = None) -> SweepResult:
    """Record labels at several epochs of one PIT run and train a fresh fixed-label model from each."""
    L_values = [int(v) for v in L_values]
    if not L_values or min(L_values) < 1:
        raise InvalidConfig("L values must be a non-empty list of positive integers")
    ref_L = max(L_values) if ref_L is None else int(ref_L)
    if ref_L < 1:
        raise InvalidConfig("ref-L must be >= 1")
    data = load_splits(config)
    base = config.schedule("pit", seed)
    horizon = max(L_values + [ref_L])
    pit = SectionSpec(PIT, horizon, reinit_model=True)
    _, records = run_section(TrainState(), pit, base, 0, data["train"], data["valid"])
    snapshots = {r.global_epoch: r.snapshot for r in records}
    reference = snapshots[ref_L]

    out = config.root / "sweeps" / f"L-seed{seed}"
    entries = []
    for L in L_values:
        table = snapshots[L].copy(epoch_tag=L)
        fixed = SectionSpec(FIXED, config.epochs, table, reinit_model=True, reset_optimizer=True)
        state, recs = run_section(TrainState(), fixed, base, 1, data["train"], data["valid"])
        valid = recs[-1].valid_sdri if recs else validate(state.params, data["valid"])
        test = validate(state.params, data["test"]) if state.params is not None else float("nan")
        entries.append(SweepEntry(L, valid, test, diff_labels(table, reference), table))
        table.save(out / "tables" / f"L{L}.csv")
    result = SweepResult(ref_L, entries)
    _write(out / "sweep.csv", result.to_csv())
    return result


def _read_run(path: Path) -> dict:
    try:
        report = json.loads((path / "report.json").read_text())
        final = AssignmentTable.load(path / "final_labels.csv")
        with open(path / "epochs.csv", newline="") as fh:
            epochs = list(csv.DictReader(fh))
    except FileNotFoundError as exc:
        raise FormatError(f"{path} is not a run directory ({Path(exc.filename).name} missing)") from None
    return {"dir": path, "report": report, "final": final, "epochs": epochs}


def cmd_report(run_dirs, out_dir=None) -> list[dict]:
    """Aggregate run directories into a comparison table and per-run curve files.

    Label differences are measured against the cascade run of the same seed
    when one is among the inputs, else against the first cascade run given.
    """
    if not run_dirs:
        raise InvalidConfig("report needs at least one run directory")
    runs = [_read_run(Path(d)) for d in run_dirs]
    cascades = [r for r in runs if r["report"].get("preset") == "cascade"]

    rows = []
    for r in runs:
        rep = r["report"]
        same_seed = [c for c in cascades if c["report"].get("seed") == rep.get("seed")]
        ref = (same_seed or cascades or [None])[0]
        diff = None if ref is None else diff_labels(r["final"], ref["final"])
        rows.append(
            {
                "approach": rep.get("preset", r["dir"].name),
                "labels": rep.get("labels", ""),
                "valid_sdri_db": rep["final_valid_sdri_db"],
                "test_sdri_db": rep["final_test_sdri_db"],
                "diff_labels_pct": diff,
            }
        )

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_HEADER)
    for row in rows:
        w.writerow(["" if row[k] is None else row[k] for k in TABLE_HEADER])
    if out_dir is not None:
        out_dir = Path(out_dir)
        _write(out_dir / "table.csv", buf.getvalue())
        for r in runs:
            curve = io.StringIO()
            cw = csv.writer(curve, lineterminator="\n")
            cw.writerow(("global_epoch", "section", "valid_sdri_db", "switch_pct"))
            for e in r["epochs"]:
                cw.writerow((e["global_epoch"], e["section"], e["valid_sdri_db"], e["switch_pct"]))
            _write(out_dir / "curves" / f"{r['dir'].name}.csv", curve.getvalue())
    return rows


def format_table(rows: list[dict]) -> str:
    def cell(v):
        if v is None:
            return "-"
        return f"{v:.2f}" if isinstance(v, float) else str(v)

    lines = [" | ".join(TABLE_HEADER)]
    lines += [" | ".join(cell(row[k]) for k in TABLE_HEADER) for row in rows]
    return "\n".join(lines)


__all__ = [
    "ExperimentConfig",
    "SweepEntry",
    "SweepResult",
    "cmd_gen_data",
    "cmd_labels",
    "cmd_train",
    "cmd_sweep_L",
    "cmd_report",
    "format_table",
    "load_splits",
    "run_dir",
]
