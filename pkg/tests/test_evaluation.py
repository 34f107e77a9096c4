import json

import numpy as np
import pytest
import torch

from speech_inpainting import dsp, evaluation
from speech_inpainting.checkpoint import ModelError
from speech_inpainting.dsp import ContractError
from speech_inpainting.evaluation import (Condition, EvalConfig, EvalRecord, Scenario,
                                          build_conditions, inpaint_file, records_to_csv,
                                          render_report, run_condition, run_grid)
from speech_inpainting.masks import HOP_LENGTH, Mask, MaskKind, MaskSpec, sample_mask
from speech_inpainting.unet import Mode, UNet, UNetConfig, save_weights

FAST = EvalConfig(seed=5, use_pesq=False)


@pytest.fixture(scope="module")
def informed_path(tmp_path_factory):
    torch.manual_seed(0)
    model = UNet(UNetConfig(mode=Mode.INFORMED, filter_scale=0.25))
    path = tmp_path_factory.mktemp("model") / "unet.npz"
    save_weights(model, path)
    return path


def test_scenario_labels():
    assert Scenario("Blind:AdditiveNoise").kind == "Blind"
    assert Scenario("Informed:pixel").uses_model
    with pytest.raises(ContractError):
        Scenario("Blind")
    with pytest.raises(ContractError):
        Scenario("Oracle")


def test_reference_grid_has_24_rows_in_order(speech_segments):
    conds = build_conditions()
    assert len(conds) == 24
    records = run_grid(conds, speech_segments[:2], cfg=FAST)
    rows = records_to_csv(records).splitlines()
    assert rows[0] == "intrusion,size,scenario,n,stoi_mean,stoi_std,pesq_mean,pesq_std,seed"
    assert len(rows) == 25
    keys = [(r.condition.intrusion.value, r.condition.size, r.condition.scenario.label)
            for r in records]
    assert keys[:3] == [("Time", 0.1, "Gaps"), ("Time", 0.1, "Noise"), ("Time", 0.2, "Gaps")]
    assert all(",NA,NA," in row for row in rows[1:])


def test_grid_rerun_is_bit_identical(tmp_path, speech_segments):
    conds = build_conditions([MaskKind.TIME_FREQ], [0.2, 0.3])
    run_grid(conds, speech_segments[:3], cfg=FAST, out_csv=tmp_path / "a.csv")
    run_grid(conds, speech_segments[:3], cfg=FAST, out_csv=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_worker_count_does_not_change_means(speech_segments):
    cond = Condition(MaskKind.TIME, 0.2, "Gaps")
    one = run_condition(cond, speech_segments[:4], cfg=FAST)
    grid = run_grid([cond], speech_segments[:4], cfg=EvalConfig(seed=5, use_pesq=False,
                                                                 workers=2))[0]
    assert abs(one.stoi_mean - grid.stoi_mean) <= 1e-12


def test_zero_coverage_is_identity(speech_segments):
    rec = run_condition(Condition(MaskKind.TIME, 0.0, "Gaps"), speech_segments[:5], cfg=FAST)
    assert rec.n == 5 and rec.stoi_mean >= 0.99


def test_masks_do_not_depend_on_other_segments(speech_segments):
    cond = Condition(MaskKind.RANDOM, 0.3, "Gaps")
    sid = speech_segments[0][0]
    a = evaluation.condition_mask(cond, sid, 5)
    b = evaluation.condition_mask(cond, sid, 5)
    c = evaluation.condition_mask(cond, speech_segments[1][0], 5)
    assert np.array_equal(a.valid, b.valid) and not np.array_equal(a.valid, c.valid)


def test_lpc_random_is_not_applicable(speech_segments):
    rec = run_condition(Condition(MaskKind.RANDOM, 0.2, "LPC"), speech_segments[:2], cfg=FAST)
    assert rec.n == 0 and rec.note == "N/A" and rec.stoi_mean is None


def test_model_scenario_without_model_is_error(speech_segments, speech_stats):
    with pytest.raises(ContractError, match="no model"):
        run_condition(Condition(MaskKind.TIME, 0.2, "Informed"), speech_segments[:1],
                      stats=speech_stats, cfg=FAST)


def test_failed_condition_recorded_and_grid_continues(speech_segments):
    conds = [Condition(MaskKind.TIME, 0.2, "Informed"), Condition(MaskKind.TIME, 0.2, "Gaps")]
    records = run_grid(conds, speech_segments[:2], cfg=FAST)
    assert records[0].note.startswith("error") and records[1].n == 2


def test_informed_model_condition_runs(speech_segments, speech_stats, informed_path):
    from speech_inpainting.unet import load_weights
    models = {"Informed": load_weights(informed_path)}
    cfg = EvalConfig(seed=5, use_pesq=False, lws_iterations=5)
    rec = run_condition(Condition(MaskKind.TIME_FREQ, 0.2, "Informed"), speech_segments[:2],
                        models, speech_stats, cfg)
    assert rec.n == 2 and 0.0 <= rec.stoi_mean <= 1.0


# reporting ---------------------------------------------------------------------

def record(kind, size, scenario, stoi, pesq=None):
    return EvalRecord(Condition(kind, size, scenario), 0 if stoi is None else 10,
                      stoi, 0.0 if stoi is not None else None, pesq, None, 0)


def test_single_record_table():
    text = render_report([record(MaskKind.TIME, 0.1, "Gaps", 0.9, 2.0)])
    lines = text.strip().splitlines()
    assert len(lines) == 3 and "Time" in lines[1] and "10%" in lines[1]


def test_na_cells_and_best_marker(tmp_path):
    recs = [record(MaskKind.RANDOM, 0.2, "Gaps", 0.70, 2.1),
            record(MaskKind.RANDOM, 0.2, "LPC", None),
            record(MaskKind.RANDOM, 0.2, "Informed", 0.75, 1.9)]
    text = render_report(recs, out_dir=tmp_path)
    row = text.splitlines()[1].split()
    assert row[2:] == ["0.700", "2.100*", "N/A", "N/A", "0.750*", "1.900"]
    assert (tmp_path / "random.png").is_file()


def test_report_requires_records():
    with pytest.raises(ContractError):
        render_report([])


def test_csv_round_trip(tmp_path):
    recs = [record(MaskKind.TIME, 0.3, "Noise", 0.612345, None)]
    path = tmp_path / "r.csv"
    path.write_text(records_to_csv(recs))
    back = evaluation.records_from_csv(path)
    assert back[0].condition == recs[0].condition and back[0].stoi_mean == 0.612345
    assert back[0].pesq_mean is None


# single-file inpainting ----------------------------------------------------------

@pytest.fixture(scope="module")
def speech_file(tmp_path_factory, speech_segments):
    path = tmp_path_factory.mktemp("wav") / "in.wav"
    audio = np.concatenate([s for _, s in speech_segments[:2]])[:30000]
    dsp.write_wav(path, audio)
    return path


def test_zero_coverage_file_round_trip(tmp_path, speech_file, informed_path, speech_stats):
    out = tmp_path / "out.wav"
    report = inpaint_file(speech_file, informed_path, MaskSpec(MaskKind.TIME, 0.0), out,
                          stats=speech_stats, reference_wav=speech_file)
    x, y = dsp.read_wav(speech_file), dsp.read_wav(out)
    assert len(y) == len(x)
    snr = 10 * np.log10(np.sum(x ** 2) / np.sum((x - y) ** 2))
    assert snr >= 40
    assert len(report["segments"]) == 2 and report["segments"][0]["stoi"] >= 0.99
    json.dumps(report)


def test_changes_are_localized_to_masked_intervals(tmp_path, speech_file, informed_path,
                                                   speech_stats):
    mask = sample_mask(MaskSpec(MaskKind.TIME, 0.2, 11))
    mask_path = tmp_path / "gaps.mask"
    mask.save(mask_path)
    out = tmp_path / "out.wav"
    inpaint_file(speech_file, informed_path, mask_path, out, stats=speech_stats)
    x, y = dsp.read_wav(speech_file), dsp.read_wav(out)
    inside = np.zeros(len(x), bool)
    for k in range(-(-len(x) // dsp.SEGMENT_LENGTH)):
        base = k * dsp.SEGMENT_LENGTH
        for a, b in mask.time_blocks():
            lo = max(base + (a - 1) * HOP_LENGTH, 0)
            inside[lo:base + (b + 1) * HOP_LENGTH] = True
    delta = (y - x) ** 2
    assert np.sum(delta[inside]) >= 0.8 * np.sum(delta)


def test_missing_model_file(tmp_path, speech_file, speech_stats):
    with pytest.raises(ModelError):
        inpaint_file(speech_file, tmp_path / "nope.npz", MaskSpec(MaskKind.TIME, 0.1),
                     tmp_path / "o.wav", stats=speech_stats)


def test_wrong_sample_rate_has_remedy(tmp_path, informed_path, speech_stats):
    import soundfile as sf
    path = tmp_path / "8k.wav"
    sf.write(path, np.zeros(8000), 8000)
    with pytest.raises(ContractError, match="resample"):
        inpaint_file(path, informed_path, MaskSpec(MaskKind.TIME, 0.1), tmp_path / "o.wav",
                     stats=speech_stats)
