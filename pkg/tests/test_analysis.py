from dataclasses import replace

import numpy as np
import pytest

from spkcam.augment import input_features
from spkcam.analysis import (
    AnalysisError,
    DELETION_THRESHOLDS,
    DeletionCurve,
    batched_logits,
    curve_auc,
    default_frame_threshold,
    deletion_mask,
    deletion_test,
    denoise_chain,
    denoise_eval,
    frame_saliency,
    retention_summary,
    spr_ipr,
    topk_accuracy,
)
from spkcam.corpus import SegmentLabels, build_concat
from spkcam.dsp import DspConfig, Waveform
from spkcam.layercam import SaliencyMap, normalize01
from spkcam.model import ModelConfig, SpeakerNet, predict_topk

DSP8 = DspConfig(n_mels=8)
TINY = ModelConfig(
    n_speakers=3,
    n_mels=8,
    stage_channels=(4, 4, 8, 8),
    embedding_dim=8,
    se_reduction=4,
    seed=0,
)


def tiny_model(seed=0):
    return SpeakerNet(replace(TINY, seed=seed))


def tone(seed, seconds=0.5, rms=0.05):
    rng = np.random.default_rng(seed)
    n = int(seconds * 16000)
    t = np.arange(n) / 16000.0
    f = 150.0 + 80.0 * rng.random()
    x = np.sin(2 * np.pi * f * t) + 0.3 * rng.normal(size=n)
    x *= rms / np.sqrt(np.mean(x * x))
    return Waveform(x, 16000)


def labels_for(frames, n_target):
    marks = np.zeros(frames, dtype=np.int8)
    marks[n_target:] = 1
    return SegmentLabels(marks, n_target * 160, 400, 160)


# ---------------------------------------------------------------------------
# frame_saliency


def test_frame_saliency_all_ones_map():
    m = SaliencyMap(np.ones((5, 40)), 0, "fused")
    assert np.array_equal(frame_saliency(m), np.full(5, 40.0))


def test_frame_saliency_zeros():
    m = SaliencyMap(np.zeros((6, 40)), 0, "fused")
    assert np.array_equal(frame_saliency(m), np.zeros(6))


def test_frame_saliency_single_cell():
    values = np.zeros((10, 40))
    values[7, 3] = 1.0
    got = frame_saliency(SaliencyMap(values, 0, "fused"))
    expect = np.zeros(10)
    expect[7] = 1.0
    assert np.array_equal(got, expect)


# ---------------------------------------------------------------------------
# spr / ipr


def test_perfect_separation():
    values = np.zeros((10, 40))
    values[:5] = 1.0
    m = SaliencyMap(values, 0, "fused")
    spr, ipr = spr_ipr(m, labels_for(10, 5), 7.5)
    assert spr == 1.0 and ipr == 0.0


def test_all_ones_retains_everything():
    m = SaliencyMap(np.ones((8, 40)), 0, "fused")
    spr, ipr = spr_ipr(m, labels_for(8, 4), 7.5)
    assert spr == 1.0 and ipr == 1.0


def test_missing_class_is_undefined_not_zero():
    m = SaliencyMap(np.ones((4, 40)), 0, "fused")
    spr, ipr = spr_ipr(m, labels_for(4, 4), 7.5)
    assert spr == 1.0 and ipr is None
    spr, ipr = spr_ipr(m, labels_for(4, 0), 7.5)
    assert spr is None and ipr == 1.0


def test_ratios_in_unit_interval():
    rng = np.random.default_rng(0)
    values = normalize01(rng.random((30, 40)))
    m = SaliencyMap(values, 0, "fused")
    spr, ipr = spr_ipr(m, labels_for(30, 13), 7.5)
    assert 0.0 <= spr <= 1.0 and 0.0 <= ipr <= 1.0


def test_ratios_invariant_under_frame_permutation():
    rng = np.random.default_rng(1)
    values = normalize01(rng.random((24, 40)))
    marks = (rng.random(24) < 0.4).astype(np.int8)
    perm = rng.permutation(24)
    a = spr_ipr(SaliencyMap(values, 0, "fused"), SegmentLabels(marks, 0, 400, 160), 7.5)
    b = spr_ipr(
        SaliencyMap(values[perm], 0, "fused"),
        SegmentLabels(marks[perm], 0, 400, 160),
        7.5,
    )
    assert a == b


def test_spr_ipr_validation():
    m = SaliencyMap(np.ones((4, 40)), 0, "fused")
    with pytest.raises(AnalysisError, match="positive"):
        spr_ipr(m, labels_for(4, 2), 0.0)
    with pytest.raises(AnalysisError, match="frames"):
        spr_ipr(m, labels_for(5, 2), 7.5)


def test_default_frame_threshold_scales_with_mels():
    assert default_frame_threshold(40) == pytest.approx(7.5)
    assert default_frame_threshold(80) == pytest.approx(15.0)


def test_retention_summary_pools_frames():
    model = tiny_model()
    target, interference = tone(0), tone(1)
    wave, labels = build_concat(target, interference)
    summary = retention_summary(model, [(wave, labels, 0)], DSP8)
    assert summary.frame_threshold == pytest.approx(0.1875 * 8)
    assert 0.0 <= summary.spr <= 1.0
    assert 0.0 <= summary.ipr <= 1.0
    assert summary.target_frames + summary.interference_frames == len(labels.frame_labels)
    with pytest.raises(AnalysisError, match="at least one"):
        retention_summary(model, [], DSP8)


# ---------------------------------------------------------------------------
# top-k accuracy


class CountingModel:
    """Logits one-hot on (frame count mod n_speakers); for plumbing tests."""

    def __init__(self, n_speakers):
        self.config = ModelConfig(n_speakers=n_speakers, n_mels=8)

    def forward_batch(self, x, training=False, tape=None):
        n = self.config.n_speakers
        logits = np.zeros((x.shape[0], n))
        for i in range(x.shape[0]):
            logits[i, x.shape[2] % n] = 10.0

        class R:
            pass

        r = R()
        r.logits = type("T", (), {"data": logits})()
        return r


def test_perfect_model_is_100_percent():
    # frame count mod 3 picks the class, so labels matching it score 100%
    waves = [tone(0, 0.5), tone(1, 0.52)]
    examples = [(w, input_features(w, DSP8).shape[0] % 3) for w in waves]
    table = topk_accuracy(CountingModel(3), examples, DSP8, ks=(1, 2, 3))
    assert table == {1: 1.0, 2: 1.0, 3: 1.0}


def test_topk_nesting_and_exhaustive_k():
    model = tiny_model()
    examples = [(tone(i), i % 3) for i in range(6)]
    table = topk_accuracy(model, examples, DSP8, ks=(1, 2, 3))
    assert table[1] <= table[2] <= table[3]
    assert table[3] == 1.0


def test_topk_empty_set_rejected():
    with pytest.raises(AnalysisError, match="non-empty"):
        topk_accuracy(tiny_model(), [], DSP8)


def test_random_logits_match_chance_rate():
    # Monte Carlo oracle: top-k hit rate on random logits is k/N.
    rng = np.random.default_rng(42)
    n, trials = 20, 4000
    for k in (1, 5, 10):
        hits = 0
        for _ in range(trials):
            logits = rng.normal(size=n)
            label = int(rng.integers(n))
            hits += label in predict_topk(logits, k)
        p = k / n
        sigma = np.sqrt(p * (1 - p) / trials)
        assert abs(hits / trials - p) <= 3 * sigma


def test_batched_logits_match_single_and_rerun():
    model = tiny_model()
    feats = [np.random.default_rng(i).normal(size=(20, 8)) for i in range(5)]
    feats.append(np.random.default_rng(9).normal(size=(30, 8)))  # shape break
    batched = batched_logits(model, feats)
    singles = np.concatenate(
        [model.forward_batch(f[None, None], training=False).logits.data for f in feats]
    )
    assert np.allclose(batched, singles, atol=1e-9)
    assert np.array_equal(batched, batched_logits(model, feats))


# ---------------------------------------------------------------------------
# denoising


def test_all_ones_mask_reproduces_noisy_baseline_bit_exactly():
    clean = tone(3)
    mixture = Waveform(clean.samples + 0.7 * tone(4).samples, 16000)
    summary = denoise_eval({"m": tiny_model()}, [(clean, mixture, 0)], DSP8)
    ones = np.ones(input_features(mixture, DSP8).shape)
    baseline = denoise_chain(clean, mixture, ones, DSP8)
    assert summary.per_utterance["noisy"][0] == baseline
    assert set(summary.model_names) == {"m", "noisy"}
    assert np.isfinite(summary.mean("m"))


def test_denoise_eval_validation():
    with pytest.raises(AnalysisError, match="at least one"):
        denoise_eval({}, [], DSP8)
    with pytest.raises(AnalysisError, match="reserved"):
        denoise_eval({"noisy": tiny_model()}, [(tone(0), tone(0), 0)], DSP8)


# ---------------------------------------------------------------------------
# deletion test


def test_constant_curve_auc_is_the_constant():
    t = np.linspace(0.0, 1.0, 21)
    assert curve_auc(t, np.full(21, 0.35)) == pytest.approx(0.35, abs=1e-12)


def test_deletion_mask_grows_with_threshold():
    rng = np.random.default_rng(2)
    sal = normalize01(rng.random((12, 8)))
    assert not deletion_mask(sal, 0.0).any()
    prev = deletion_mask(sal, 0.0)
    for theta in np.linspace(0.05, 1.0, 20):
        cur = deletion_mask(sal, theta)
        assert (prev <= cur).all()
        prev = cur


def test_curve_validation():
    t = np.array([0.0, 0.5, 1.0])
    with pytest.raises(AnalysisError, match="strictly increasing"):
        DeletionCurve(t[::-1], np.zeros(3), np.zeros(3), 0.0)
    with pytest.raises(AnalysisError, match="non-decreasing"):
        DeletionCurve(t, np.array([0.5, 0.2, 0.9]), np.zeros(3), 0.0)
    with pytest.raises(AnalysisError, match="outside"):
        DeletionCurve(t, np.zeros(3), np.zeros(3), 1.5)


def test_deletion_curve_endpoints():
    model = tiny_model()
    pairs = []
    for i in range(3):
        clean = tone(10 + i)
        noisy = Waveform(clean.samples + 0.8 * tone(20 + i).samples, 16000)
        pairs.append((clean, noisy, i))
    curve = deletion_test(model, model, pairs, DSP8, thresholds=(0.0, 0.5, 1.001))

    # threshold 0 deletes nothing: accuracy equals the judge's unmasked run
    clean_feats = [input_features(c, DSP8) for c, _, _ in pairs]
    logits = batched_logits(model, clean_feats)
    unmasked = float(
        np.mean([predict_topk(row, 1)[0] == i for i, row in enumerate(logits)])
    )
    assert curve.accuracies[0] == unmasked
    assert curve.masked_fractions[0] == 0.0

    # threshold > 1 deletes every cell: identical inputs, one shared
    # prediction, exactly one of the three labels can match
    assert curve.masked_fractions[-1] == 1.0
    assert curve.accuracies[-1] == pytest.approx(1.0 / 3.0, abs=1e-12)
    assert 0.0 <= curve.auc <= 1.0


def test_deletion_uses_default_grid():
    assert len(DELETION_THRESHOLDS) == 21
    assert DELETION_THRESHOLDS[0] == 0.0 and DELETION_THRESHOLDS[-1] == 1.0
    diffs = np.diff(DELETION_THRESHOLDS)
    assert np.allclose(diffs, 0.05)


def test_deletion_validation():
    model = tiny_model()
    with pytest.raises(AnalysisError, match="at least one pair"):
        deletion_test(model, model, [], DSP8)
    clean = tone(0, 0.5)
    shorter = tone(1, 0.4)
    with pytest.raises(AnalysisError, match="misaligned"):
        deletion_test(model, model, [(clean, shorter, 0)], DSP8, (0.0, 1.0))
    with pytest.raises(AnalysisError, match="increasing"):
        deletion_test(model, model, [(clean, clean, 0)], DSP8, (0.5, 0.5))
