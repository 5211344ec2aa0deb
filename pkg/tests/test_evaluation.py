import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qsep import data, evaluation, latent


def _orthogonal_noise(s, ratio, seed=0):
    n = np.random.default_rng(seed).standard_normal(s.shape)
    n -= (n @ s) / (s @ s) * s
    return n * np.sqrt((s @ s) / (n @ n) / ratio)


def test_sdr_examples():
    s = np.random.default_rng(1).standard_normal(1000)
    assert evaluation.sdr(s, s) == 60.0
    assert evaluation.sdr(s, s + _orthogonal_noise(s, 100)) == pytest.approx(20.0, abs=0.01)
    assert evaluation.sdr(s, _orthogonal_noise(s, 1.0)) == -40.0


def test_sdr_errors():
    with pytest.raises(ValueError):
        evaluation.sdr(np.zeros(4), np.ones(4))
    with pytest.raises(ValueError):
        evaluation.sdr(np.ones(4), np.ones(5))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.01, 100), st.floats(1.0, 1e4))
def test_sdr_scale_invariance_and_orthogonal_noise(seed, gain, ratio):
    s = np.random.default_rng(seed).standard_normal(256)
    n = _orthogonal_noise(s, ratio, seed + 1)
    est = s + n
    assert abs(evaluation.sdr(s, est) - evaluation.sdr(s, gain * est)) < 1e-9
    expected = 10 * np.log10((s @ s) / (n @ n))
    if expected < 60:
        assert abs(evaluation.sdr(s, est) - expected) < 1e-6


def test_delta_sdr():
    r = np.random.default_rng(2)
    gt, a, b = r.standard_normal((3, 500))
    assert evaluation.delta_sdr(gt, a, a) == 0.0
    assert evaluation.delta_sdr(gt, gt, gt + a) > 0
    two_call = evaluation.sdr(gt, gt + a) - evaluation.sdr(gt, gt + b)
    assert abs(evaluation.delta_sdr(gt, gt + a, gt + b) - two_call) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=30))
def test_median_matches_sort_oracle(values):
    v = sorted(values)
    k = len(v)
    oracle = v[k // 2] if k % 2 else (v[k // 2 - 1] + v[k // 2]) / 2
    assert evaluation.median(values) == oracle


def test_median_ignores_non_finite():
    assert evaluation.median([1.0, np.nan, 3.0, np.inf]) == 2.0
    assert np.isnan(evaluation.median([]))


def test_report_format():
    scores = {("mix001", "bass"): 1.0, ("mix000", "bass"): 3.0, ("mix000", "drums"): -2.5}
    rep = evaluation.EvalReport("mean-vector", scores, "desk", "ck.qsep")
    assert rep.medians == {"bass": 2.0, "drums": -2.5}
    tsv = rep.to_tsv().splitlines()
    assert tsv[0] == "track\tclass\tsdr_db" and tsv[1] == "mix000\tbass\t3.000000"
    summary = rep.summary()
    assert "mean-vector (desk)" in summary and "2.00" in summary and "-2.50" in summary


def _tiny_setup(cfg, params, count):
    stems = data.synthetic_stems(data.default_class_specs(4), 1, 0.05, 3, cfg.sample_rate, cfg.segment_samples)
    lib = latent.build_library(latent.encode_stems(params, cfg, stems), "class")
    return data.make_test_mixtures(stems, count, 0), lib


def test_evaluate_entry_count_and_determinism(tiny_cfg, tiny_params):
    mixes, lib = _tiny_setup(tiny_cfg, tiny_params, 10)
    rep = evaluation.evaluate(tiny_params, tiny_cfg, mixes, lib, "mean-vector")
    assert len(rep) == 40
    again = evaluation.evaluate(tiny_params, tiny_cfg, mixes, lib, "mean-vector")
    assert rep.to_tsv() == again.to_tsv()


def test_evaluate_modes_and_errors(tiny_cfg, tiny_params):
    mixes, lib = _tiny_setup(tiny_cfg, tiny_params, 2)
    for mode in evaluation.MODES:
        assert len(evaluation.evaluate(tiny_params, tiny_cfg, mixes, lib, mode)) == 8
    with pytest.raises(ValueError):
        evaluation.evaluate(tiny_params, tiny_cfg, [], lib)
    with pytest.raises(ValueError):
        evaluation.evaluate(tiny_params, tiny_cfg, mixes, lib, "oracle")
    partial = latent.LatentLibrary()
    partial.add("bass", lib["bass"])
    with pytest.raises(KeyError):
        evaluation.evaluate(tiny_params, tiny_cfg, mixes, partial, "mean-vector")


def test_class_following_and_latent_error(tiny_cfg, tiny_params):
    mixes, lib = _tiny_setup(tiny_cfg, tiny_params, 3)
    rates = evaluation.class_following(tiny_params, tiny_cfg, mixes, lib)
    assert set(rates) == set(lib.labels()) and all(0 <= r <= 1 for r in rates.values())
    mags = np.stack([data.net_magnitude(m.mixture, tiny_cfg.window, tiny_cfg.hop, tiny_cfg.frames) for m in mixes])
    err = evaluation.latent_regression_error(tiny_params, tiny_cfg, mags, np.random.default_rng(0), count=12)
    assert np.isfinite(err) and err > 0
