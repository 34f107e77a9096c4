import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speech_inpainting.dsp import LOG_FLOOR, ChannelStats, ContractError, LogMagnitude
from speech_inpainting.masks import (EVAL_SIZES, FillMode, Mask, MaskKind, MaskSizeSampler,
                                     MaskSpec, UnsupportedMaskError, apply_mask,
                                     mask_to_time_gaps, masked_snr_db, sample_mask,
                                     sample_training_size)


def _runs(flags):
    out, start = [], None
    for i, f in enumerate(list(flags) + [False]):
        if f and start is None:
            start = i
        elif not f and start is not None:
            out.append((start, i))
            start = None
    return out


def check_block_rules(mask):
    masked_rows = ~mask.valid.any(axis=1)
    masked_cols = ~mask.valid.any(axis=0)
    for runs in (_runs(masked_rows), _runs(masked_cols)):
        assert len(runs) <= 4
        assert all(b - a >= 3 for a, b in runs)


# sampling -------------------------------------------------------------------

@pytest.mark.parametrize("kind", list(MaskKind))
def test_zero_coverage_is_all_valid(kind):
    assert sample_mask(MaskSpec(kind, 0.0, 3)).valid.all()


def test_time_ten_percent_over_1000_draws():
    counts = set()
    for seed in range(1000):
        m = sample_mask(MaskSpec(MaskKind.TIME, 0.10, seed))
        rows = ~m.valid.any(axis=1)
        assert rows.sum() == 13
        # time blocks span every frequency bin
        assert np.array_equal(~m.valid, np.repeat(rows[:, None], 128, axis=1))
        runs = _runs(rows)
        assert all(b - a >= 3 for a, b in runs)
        counts.add(len(runs))
    assert counts <= {1, 2, 3, 4} and len(counts) >= 3


@pytest.mark.parametrize("size", EVAL_SIZES)
def test_time_freq_dimensions_rounded_independently(size):
    for seed in range(200):
        m = sample_mask(MaskSpec(MaskKind.TIME_FREQ, size, seed))
        n = round(size * 128)
        assert (~m.valid.any(axis=1)).sum() == n
        assert (~m.valid.any(axis=0)).sum() == n
        check_block_rules(m)


def test_time_freq_ten_percent_is_100ms_and_800hz():
    m = sample_mask(MaskSpec(MaskKind.TIME_FREQ, 0.10, 1))
    frames = (~m.valid.any(axis=1)).sum()
    bins = (~m.valid.any(axis=0)).sum()
    assert frames * 128 / 16000 == pytest.approx(0.1, abs=0.005)
    assert bins * 62.5 == pytest.approx(800, abs=32)


@pytest.mark.parametrize("size", EVAL_SIZES)
def test_random_area_within_two_percent(size):
    for seed in range(200):
        m = sample_mask(MaskSpec(MaskKind.RANDOM, size, seed))
        assert abs(m.coverage - size) <= 0.02
        assert 1 <= len(m.blocks) <= 4
        for t0, t1, f0, f1 in m.blocks:
            assert t1 - t0 >= 3 and f1 - f0 >= 3


def test_sampling_is_deterministic_and_seed_sensitive():
    for kind in MaskKind:
        a = sample_mask(MaskSpec(kind, 0.3, 11)).valid
        assert np.array_equal(a, sample_mask(MaskSpec(kind, 0.3, 11)).valid)
    seen = {sample_mask(MaskSpec(MaskKind.TIME_FREQ, 0.3, s)).valid.tobytes()
            for s in range(1000)}
    assert len(seen) >= 990


def test_coverage_bounds():
    with pytest.raises(ContractError):
        MaskSpec(MaskKind.TIME, 0.7)
    with pytest.raises(ContractError):
        MaskSpec(MaskKind.TIME, -0.1)


def test_tiny_coverage_reduces_block_count():
    m = sample_mask(MaskSpec(MaskKind.TIME, 0.0235, 0))
    runs = _runs(~m.valid.any(axis=1))
    assert len(runs) == 1 and runs[0][1] - runs[0][0] == 3


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(list(MaskKind)), st.floats(0.0235, 0.6), st.integers(0, 2 ** 32))
def test_block_rules_hold_for_any_spec(kind, coverage, seed):
    m = sample_mask(MaskSpec(kind, coverage, seed))
    check_block_rules(m)
    if kind is MaskKind.RANDOM:
        assert abs(m.coverage - coverage) <= 0.02
    else:
        assert (~m.valid.any(axis=1)).sum() == max(round(coverage * 128), 3)


# training size sampler -----------------------------------------------------

def test_training_size_distribution():
    rng = np.random.default_rng(0)
    s = MaskSizeSampler()
    draws = np.array([sample_training_size(s, rng) for _ in range(10000)])
    assert draws.min() >= 0.0235 and draws.max() <= 0.6
    assert abs(draws.mean() - 0.294) <= 0.01
    assert abs(draws.std() - 0.099) <= 0.015
    assert sample_training_size(s, 5) == sample_training_size(s, 5)


# application -----------------------------------------------------------------

def _inputs(rng, normalized):
    values = rng.normal(0 if normalized else -4, 1 if normalized else 2, (128, 128))
    return LogMagnitude(values, normalized=normalized), rng.uniform(-np.pi, np.pi, (128, 128))


@pytest.mark.parametrize("mode", list(FillMode))
def test_all_valid_mask_is_identity(mode, rng):
    m, ph = _inputs(rng, True)
    stats = ChannelStats(np.full(128, -4.0), np.full(128, 2.0))
    out, out_ph = apply_mask(m, ph, sample_mask(MaskSpec(MaskKind.TIME, 0.0)), mode,
                             stats=stats, seed=1)
    assert np.array_equal(out.values, m.values) and np.array_equal(out_ph, ph)


@pytest.mark.parametrize("mode", list(FillMode))
@pytest.mark.parametrize("normalized", [True, False])
def test_valid_bins_bit_exact(mode, normalized, rng):
    m, ph = _inputs(rng, normalized)
    stats = ChannelStats(np.full(128, -4.0), np.full(128, 2.0))
    mask = sample_mask(MaskSpec(MaskKind.RANDOM, 0.3, 2))
    out, out_ph = apply_mask(m, ph, mask, mode, stats=stats, seed=4)
    assert np.array_equal(out.values[mask.valid], m.values[mask.valid])
    assert np.array_equal(out_ph[mask.valid], ph[mask.valid])
    assert np.all(out_ph[~mask.valid] == 0)
    assert out.normalized == normalized


def test_zeros_fill_constants(rng):
    mask = sample_mask(MaskSpec(MaskKind.TIME_FREQ, 0.2, 0))
    for normalized, fill in [(True, 0.0), (False, np.log(LOG_FLOOR))]:
        m, ph = _inputs(rng, normalized)
        out, _ = apply_mask(m, ph, mask, FillMode.ZEROS)
        assert np.all(out.values[~mask.valid] == fill)


def test_white_noise_is_standard_normal_in_normalized_domain(rng):
    m, ph = _inputs(rng, True)
    mask = sample_mask(MaskSpec(MaskKind.TIME, 0.4, 0))
    out, _ = apply_mask(m, ph, mask, FillMode.WHITE_NOISE, seed=9)
    z = out.values[~mask.valid]
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1) < 0.03


@pytest.mark.parametrize("kind", list(MaskKind))
def test_additive_noise_snr_below_minus_ten(kind, rng):
    m, ph = _inputs(rng, True)
    mask = sample_mask(MaskSpec(kind, 0.2, 3))
    out, _ = apply_mask(m, ph, mask, FillMode.ADDITIVE_NOISE, seed=2)
    snr = masked_snr_db(m.values, out.values, mask.valid)
    assert snr < -10
    assert snr == pytest.approx(-15, abs=0.5)


def test_fill_is_seed_deterministic(rng):
    m, ph = _inputs(rng, True)
    mask = sample_mask(MaskSpec(MaskKind.TIME, 0.3, 0))
    a = apply_mask(m, ph, mask, FillMode.WHITE_NOISE, seed=1)[0].values
    b = apply_mask(m, ph, mask, FillMode.WHITE_NOISE, seed=1)[0].values
    c = apply_mask(m, ph, mask, FillMode.WHITE_NOISE, seed=2)[0].values
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_shape_mismatch_is_error(rng):
    m, ph = _inputs(rng, True)
    with pytest.raises(ContractError):
        apply_mask(m, ph[:10], sample_mask(MaskSpec(MaskKind.TIME, 0.1)), FillMode.ZEROS)


def test_unknown_mode_is_error(rng):
    m, ph = _inputs(rng, True)
    with pytest.raises(ValueError):
        apply_mask(m, ph, sample_mask(MaskSpec(MaskKind.TIME, 0.1)), "Pink")


# time gaps and files ---------------------------------------------------------

def test_time_gap_hop_arithmetic():
    valid = np.ones((128, 128), bool)
    valid[10:20] = False
    gaps = mask_to_time_gaps(Mask(valid, MaskSpec(MaskKind.TIME, 10 / 128)))
    assert gaps == [(1280, 2560)]
    assert mask_to_time_gaps(sample_mask(MaskSpec(MaskKind.TIME, 0.0))) == []


def test_time_gaps_of_time_freq_mask_ignore_frequency_blocks():
    m = sample_mask(MaskSpec(MaskKind.TIME_FREQ, 0.3, 5))
    gaps = mask_to_time_gaps(m)
    assert sum(b - a for a, b in gaps) == round(0.3 * 128) * 128
    assert gaps == sorted(gaps)


def test_random_mask_has_no_time_gaps():
    with pytest.raises(UnsupportedMaskError):
        mask_to_time_gaps(sample_mask(MaskSpec(MaskKind.RANDOM, 0.2, 0)))


def test_mask_file_round_trip(tmp_path):
    m = sample_mask(MaskSpec(MaskKind.RANDOM, 0.25, 77))
    m.save(tmp_path / "m.txt")
    back = Mask.load(tmp_path / "m.txt")
    assert np.array_equal(back.valid, m.valid) and back.spec == m.spec


def test_mask_file_version_is_checked(tmp_path):
    p = tmp_path / "m.txt"
    sample_mask(MaskSpec(MaskKind.TIME, 0.1)).save(p)
    p.write_text(p.read_text().replace("mask v1", "mask v2"))
    with pytest.raises(ContractError, match="version"):
        Mask.load(p)
