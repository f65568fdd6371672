from dataclasses import replace

import numpy as np
import pytest

import flexpit.trainer as tr
from flexpit.errors import InvalidConfig, MissingLabels
from flexpit.labels import AssignmentTable, pit_losses, record_assignments, switch_count
from flexpit.separator import SeparatorConfig, forward_batch, init_params, loss
from flexpit.signal import sdr_improvement, synthesize_dataset
from flexpit.trainer import (
    FIXED,
    PIT,
    Schedule,
    SectionSpec,
    TrainState,
    preset_schedule,
    run_epoch,
    run_schedule,
    run_section,
    validate,
)

CFG = SeparatorConfig(frame_len=8, latent_dim=6, hidden_dim=8, num_channels=2, init_scale=0.3, seed=2)


@pytest.fixture(scope="module")
def data():
    train = synthesize_dataset(4, 16, 128, seed=1, profile_seed=0)
    valid = synthesize_dataset(4, 6, 128, seed=2, profile_seed=0, split="valid")
    return train, valid


def _schedule(sections, **kw):
    kw.setdefault("batch_size", 4)
    return Schedule(sections, separator=CFG, **kw)


def test_full_batch_epoch_takes_one_step(data):
    train, _ = data
    p = init_params(CFG)
    opt = Schedule([SectionSpec(PIT, 1)]).new_optimizer(p)
    _, opt2, _, _ = run_epoch(p, opt, train, PIT, batch_size=len(train))
    assert opt2.step == 1
    _, opt3, _, _ = run_epoch(p, opt, train, PIT, batch_size=5)
    assert opt3.step == 4


def test_fixed_with_pit_argmin_matches_pit_first_batch(data, monkeypatch):
    train, _ = data
    p = init_params(CFG)
    table = record_assignments(p, train)
    losses = []
    real = tr.attach_loss

    def spy(cache, sources, perms):
        out = real(cache, sources, perms)
        losses.append(out.copy())
        return out

    monkeypatch.setattr(tr, "attach_loss", spy)
    opt = Schedule([SectionSpec(PIT, 1)]).new_optimizer(p)
    run_epoch(p, opt, train, PIT, batch_size=4)
    pit_first = losses[0]
    losses.clear()
    run_epoch(p, opt, train, FIXED, table, batch_size=4)
    assert np.array_equal(losses[0], pit_first)


def test_fixed_requires_total_table(data):
    train, _ = data
    p = init_params(CFG)
    opt = Schedule([SectionSpec(PIT, 1)]).new_optimizer(p)
    with pytest.raises(MissingLabels):
        run_epoch(p, opt, train, FIXED, None)
    with pytest.raises(MissingLabels):
        run_epoch(p, opt, train, FIXED, AssignmentTable(np.tile([0, 1], (3, 1))))


def test_pit_contribution_never_exceeds_fixed(data):
    train, _ = data
    p = init_params(CFG)
    rng = np.random.default_rng(0)
    for i in range(len(train)):
        m = train[i]
        M = pit_losses(p, m)
        best = min(M[0, 0] + M[1, 1], M[0, 1] + M[1, 0])
        any_perm = tuple(rng.permutation(2))
        assert best / 2 <= loss(p, m, any_perm)[0] + 1e-12


def test_run_epoch_deterministic(data):
    train, _ = data
    outs = []
    for _ in range(2):
        p = init_params(CFG)
        opt = Schedule([SectionSpec(PIT, 1)]).new_optimizer(p)
        p, _, mean_loss, table = run_epoch(p, opt, train, PIT, batch_size=4, shuffle_seed=3, epoch=1)
        outs.append((p, mean_loss, table))
    assert outs[0][0].equal(outs[1][0]) and outs[0][1] == outs[1][1] and outs[0][2] == outs[1][2]


def test_zero_epoch_section_leaves_state(data):
    train, valid = data
    state = TrainState()
    state, records = run_section(state, SectionSpec(PIT, 0, reinit_model=True), _schedule([SectionSpec(PIT, 0)]), 0, train, valid)
    assert records == [] and state.params is None and state.global_epoch == 0


def test_record_at_end_equals_record_assignments(data):
    train, valid = data
    sched = _schedule([SectionSpec(PIT, 3, reinit_model=True, record_at_end=True)])
    state, records = run_section(TrainState(), sched.sections[0], sched, 0, train, valid)
    assert len(records) == 3
    assert state.recorded == record_assignments(state.params, train)
    assert state.recorded.epoch_tag == 3


def test_reinit_matches_fresh_derived_seed(data):
    train, valid = data
    sched = _schedule([SectionSpec(PIT, 2, reinit_model=True), SectionSpec(PIT, 0, reinit_model=True)])
    state, _ = run_section(TrainState(), sched.sections[0], sched, 0, train, valid)
    seen = {}
    real = tr.run_epoch

    def spy(params, *a, **k):
        seen.setdefault("params", params.copy())
        return real(params, *a, **k)

    tr.run_epoch = spy
    try:
        run_section(state, SectionSpec(PIT, 1, reinit_model=True), sched, 1, train, valid)
    finally:
        tr.run_epoch = real
    fresh = init_params(replace(CFG, seed=sched.section_seed(1)))
    assert seen["params"].equal(fresh)


def test_telemetry_consistency_and_first_epoch_blank(data):
    train, valid = data
    report = run_schedule(preset_schedule("cascade", L=2, epochs=2, separator=CFG, batch_size=4), train, valid)
    recs = report.records
    assert recs[0].switch_count is None and recs[0].switch_pct is None
    for prev, cur in zip(recs, recs[1:]):
        assert (cur.switch_count, cur.switch_pct) == switch_count(prev.snapshot, cur.snapshot)
    assert len(recs) == 6


def test_cascade_section_boundaries(data):
    train, valid = data
    report = run_schedule(preset_schedule("cascade", L=2, epochs=3, separator=CFG, batch_size=4), train, valid)
    sections = [r.section_index for r in report.records]
    assert sections == [0, 0, 1, 1, 1, 2, 2, 2]
    modes = [r.mode for r in report.records]
    assert modes == [PIT] * 2 + [FIXED] * 3 + [PIT] * 3
    assert [r.global_epoch for r in report.records] == list(range(1, 9))
    assert "recorded@2" in report.tables and "recorded@8" in report.tables


def test_schedule_reproducible_csv(data):
    train, valid = data
    a = run_schedule(preset_schedule("fixed-from-pit", L=2, epochs=2, separator=CFG, batch_size=4), train, valid)
    b = run_schedule(preset_schedule("fixed-from-pit", L=2, epochs=2, separator=CFG, batch_size=4), train, valid)
    assert a.epochs_csv() == b.epochs_csv()
    assert a.epochs_csv().splitlines()[0] == "global_epoch,section,mode,mean_train_loss,valid_sdri_db,switch_count,switch_pct"
    # the final labels of a fixed-label run are the table it trained on
    assert a.final_labels == a.tables["recorded@2"]


def test_fixed_after_pit_with_reinit_drops_validation():
    train = synthesize_dataset(8, 40, 256, seed=4, profile_seed=1)
    valid = synthesize_dataset(8, 10, 256, seed=5, profile_seed=1, split="valid")
    cfg = SeparatorConfig(16, 16, 32, 2, 0.3, seed=0)
    report = run_schedule(preset_schedule("fixed-from-pit", L=8, epochs=1, separator=cfg, batch_size=8, lr=1e-2), train, valid)
    assert report.records[8].valid_sdri < report.records[7].valid_sdri


def test_fixed_energy_and_embed_presets(data):
    train, valid = data
    for name in ("fixed-energy", "fixed-embed"):
        report = run_schedule(preset_schedule(name, epochs=1, separator=CFG, batch_size=4), train, valid)
        assert len(report.records) == 1 and report.records[0].mode == FIXED
        key = name.split("-")[1]
        assert report.final_labels == report.tables[key].copy()


def test_preset_errors():
    with pytest.raises(InvalidConfig):
        preset_schedule("nope")
    with pytest.raises(InvalidConfig):
        SectionSpec(FIXED, 3, "weird")
    with pytest.raises(InvalidConfig):
        SectionSpec(PIT, -1)
    with pytest.raises(InvalidConfig):
        Schedule([SectionSpec(PIT, 1)], batch_size=0)


def test_recorded_labels_required(data):
    train, valid = data
    with pytest.raises(MissingLabels):
        run_schedule(_schedule([SectionSpec(FIXED, 1, "recorded")]), train, valid)


# --------------------------------------------------------------------------- validate


def test_validate_oracle_and_passthrough(data, monkeypatch):
    _, valid = data
    src = valid.source_array

    monkeypatch.setattr(tr, "forward_batch", lambda p, mixes, fingerprint=True: (src[: len(mixes)][:, ::-1].copy(), None))
    mix_sdr = np.mean([[tr.sdr_from_terms(*tr.sdr_terms(m.sources[j].samples, m.mix.samples)[3:]) for j in range(2)] for m in valid])
    assert validate(None, valid) == pytest.approx(100.0 - mix_sdr, abs=1e-9)

    mixes = valid.mix_array
    monkeypatch.setattr(tr, "forward_batch", lambda p, m, fingerprint=True: (np.stack([mixes[: len(m)]] * 2, axis=1), None))
    assert validate(None, valid) == pytest.approx(0.0, abs=1e-9)


def test_validate_matches_scalar_recomputation(data):
    _, valid = data
    p = init_params(replace(CFG, init_scale=0.8))
    est, _ = forward_batch(p, valid.mix_array)
    values = []
    for i, m in enumerate(valid):
        values.append(max(sdr_improvement(m, list(est[i]), perm) for perm in [(0, 1), (1, 0)]))
    assert validate(p, valid) == pytest.approx(np.mean(values), abs=1e-9)


def test_validate_empty():
    from flexpit.signal import Dataset

    with pytest.raises(InvalidConfig):
        validate(init_params(CFG), Dataset([]))
