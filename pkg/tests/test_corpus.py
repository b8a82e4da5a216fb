"""Corpus generation tests: determinism, identity cues, scenarios, manifests."""

import numpy as np
import pytest

from spkcam.corpus import (
    Corpus,
    CorpusConfig,
    CorpusError,
    ExperimentManifest,
    ManifestError,
    ManifestRecord,
    SyntheticSpeakerProfile,
    build_concat,
    build_ramp,
    ingest_wav,
    make_speaker_profiles,
    mix_waveforms,
    split_for_id,
    synth_interference,
    synth_utterance,
)
from spkcam.dsp import Waveform, fbank, fbank_floor_value, n_frames_for, stft, write_wav

SR = 16000

SMALL = CorpusConfig(
    seed=0,
    n_speakers=3,
    utts_per_speaker=4,
    n_intf_profiles=2,
    n_noise_clips=2,
    n_music_clips=2,
    n_speech_clips=2,
)


def profile(seed=0):
    return make_speaker_profiles(seed, 1, "spk")[0]


def spectral_centroid(samples):
    power = np.abs(np.fft.rfft(samples)) ** 2
    freqs = np.fft.rfftfreq(len(samples), 1.0 / SR)
    return float(np.sum(freqs * power) / np.sum(power))


def spectral_flatness(samples):
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(400) / 400)
    frames = [
        samples[s : s + 400] * win for s in range(0, len(samples) - 400, 200)
    ]
    power = np.mean(np.abs(np.fft.rfft(frames, axis=1)) ** 2, axis=0)
    freqs = np.fft.rfftfreq(400, 1.0 / SR)
    band = power[(freqs >= 100.0) & (freqs <= 7500.0)]
    return float(np.exp(np.mean(np.log(band))) / np.mean(band))


# ---------------------------------------------------------------------------
# profiles and utterance synthesis


def test_profile_requires_increasing_formants():
    with pytest.raises(CorpusError):
        SyntheticSpeakerProfile(
            speaker="x",
            f0_low=100.0,
            f0_high=140.0,
            formants=(1500.0, 500.0, 2500.0),
            bandwidths=(100.0, 100.0, 100.0),
            tilt_db_per_octave=-6.0,
            jitter=0.01,
            seed=0,
        )


def test_profiles_deterministic_and_disjoint_roles():
    a = make_speaker_profiles(7, 4, "spk")
    b = make_speaker_profiles(7, 4, "spk")
    assert a == b
    intf = make_speaker_profiles(7, 4, "intf")
    assert {p.speaker for p in a}.isdisjoint({p.speaker for p in intf})
    assert all(p.f0_low != q.f0_low for p, q in zip(a, intf))


def test_utterance_deterministic():
    p = profile()
    w1 = synth_utterance(p, 2.0, seed=5)
    w2 = synth_utterance(p, 2.0, seed=5)
    assert np.array_equal(w1.samples, w2.samples)
    w3 = synth_utterance(p, 2.0, seed=6)
    assert not np.array_equal(w1.samples, w3.samples)


def test_utterance_peak_and_rms():
    w = synth_utterance(profile(), 2.0, seed=1, rms=0.06)
    assert np.max(np.abs(w.samples)) <= 1.0
    assert 0.04 <= np.sqrt(np.mean(w.samples**2)) <= 0.08


def test_utterance_rejects_short_duration():
    with pytest.raises(CorpusError, match="0.5"):
        synth_utterance(profile(), 0.3, seed=0)


def test_utterance_rejects_formant_near_nyquist():
    p = SyntheticSpeakerProfile(
        speaker="x",
        f0_low=100.0,
        f0_high=140.0,
        formants=(500.0, 1500.0, 7900.0),
        bandwidths=(100.0, 150.0, 200.0),
        tilt_db_per_octave=-6.0,
        jitter=0.01,
        seed=0,
    )
    with pytest.raises(CorpusError, match="Nyquist"):
        synth_utterance(p, 1.0, seed=0)


def test_default_speakers_have_distinct_centroids():
    profiles = make_speaker_profiles(0, 16, "spk")
    centroids = np.array(
        [spectral_centroid(synth_utterance(p, 2.0, seed=0).samples) for p in profiles]
    )
    assert np.std(centroids) > 0.02 * np.mean(centroids)
    diffs = np.abs(centroids[:, None] - centroids[None, :])
    off_diag = diffs[~np.eye(16, dtype=bool)]
    assert np.all(off_diag > 0.0)


# ---------------------------------------------------------------------------
# interference synthesis


def test_noise_interference_is_flat_enough():
    for seed in range(4):
        w = synth_interference("noise", 2.0, seed)
        assert spectral_flatness(w.samples) > 0.5


def test_interference_deterministic():
    for kind in ("noise", "speech", "music"):
        a = synth_interference(kind, 1.0, seed=3)
        b = synth_interference(kind, 1.0, seed=3)
        assert np.array_equal(a.samples, b.samples), kind


def test_interference_unknown_kind():
    with pytest.raises(CorpusError, match="kind"):
        synth_interference("hum", 1.0, seed=0)


def test_music_has_energy_and_bounded_peak():
    w = synth_interference("music", 2.0, seed=9)
    assert np.sqrt(np.mean(w.samples**2)) > 0.01
    assert np.max(np.abs(w.samples)) <= 1.0


# ---------------------------------------------------------------------------
# scenarios


def one_second(seed, value=None):
    if value is not None:
        return Waveform(np.full(SR, value), SR)
    return synth_utterance(profile(seed), 1.0, seed=seed)


def test_concat_label_arithmetic():
    target = one_second(1)
    interference = synth_interference("noise", 1.0, seed=2)
    wave, labels = build_concat(target, interference)
    assert len(wave) == 2 * SR
    assert len(labels.frame_labels) == n_frames_for(2 * SR, 400, 160)
    n_target = int(np.sum(labels.frame_labels == 0))
    n_intf = int(np.sum(labels.frame_labels == 1))
    assert n_target + n_intf == len(labels.frame_labels)
    assert abs(n_target - 99) <= 2 and abs(n_intf - 99) <= 2
    # labels are sorted: target block then interference block
    assert np.all(np.diff(labels.frame_labels) >= 0)


def test_concat_silence_interference_hits_fbank_floor():
    target = one_second(3)
    silence = Waveform(np.zeros(SR), SR)
    wave, labels = build_concat(target, silence)
    fb = fbank(stft(wave, 400, 160))
    fully_inside = [
        i
        for i in range(len(labels.frame_labels))
        if i * 160 >= labels.boundary_sample
    ]
    floor = fbank_floor_value(-80.0)
    assert np.all(fb.values[fully_inside] == floor)


def test_concat_rate_mismatch():
    with pytest.raises(CorpusError, match="sample rate"):
        build_concat(one_second(1), Waveform(np.zeros(8000), 8000))


def test_ramp_hits_requested_snr():
    target = one_second(4)
    noise = synth_interference("noise", 1.0, seed=5)
    window = (4000, 12000)
    requested = [10.0, 5.0, -5.0, -10.0, -15.0, -30.0]
    mixtures = build_ramp(target, noise, requested, window)
    assert len(mixtures) == 6
    for want, mixed in zip(requested, mixtures):
        ref = target.samples[window[0] : window[1]]
        res = mixed.samples[window[0] : window[1]] - ref
        got = 10 * np.log10(np.sum(ref**2) / np.sum(res**2))
        assert abs(got - want) <= 0.1
        # outside the window the target is untouched
        assert np.array_equal(mixed.samples[: window[0]], target.samples[: window[0]])
        assert np.array_equal(mixed.samples[window[1] :], target.samples[window[1] :])


def test_ramp_vanishing_noise():
    target = one_second(6)
    noise = synth_interference("noise", 1.0, seed=7)
    (mixed,) = build_ramp(target, noise, [100.0], (0, SR))
    residual = mixed.samples - target.samples
    assert 10 * np.log10(np.sum(target.samples**2) / np.sum(residual**2)) >= 60.0


def test_ramp_zero_energy_window():
    silent_head = Waveform(np.concatenate([np.zeros(2000), np.ones(SR - 2000) * 0.1]), SR)
    noise = synth_interference("noise", 1.0, seed=8)
    with pytest.raises(CorpusError, match="zero-energy window"):
        build_ramp(silent_head, noise, [0.0], (0, 1500))


def test_ramp_window_bounds():
    with pytest.raises(CorpusError, match="window"):
        build_ramp(one_second(9), one_second(10), [0.0], (100, SR + 1))


def test_mix_tiles_short_interference():
    target = Waveform(np.zeros(2 * SR), SR)
    short = Waveform(np.arange(600, dtype=float) / 600.0, SR)
    mixed = mix_waveforms(target, short, alpha=1.0)
    expect = np.tile(short.samples, int(np.ceil(2 * SR / 600)))[: 2 * SR]
    assert np.array_equal(mixed.samples, expect)


def test_mix_rejects_negative_alpha():
    with pytest.raises(CorpusError, match="alpha"):
        mix_waveforms(one_second(1), one_second(2), alpha=-0.5)


# ---------------------------------------------------------------------------
# split and manifest


def test_split_deterministic_and_balanced():
    ids = [f"spk{i % 20:02d}-u{i:03d}" for i in range(500)]
    splits = [split_for_id(u) for u in ids]
    assert splits == [split_for_id(u) for u in ids]
    test_fraction = splits.count("test") / len(splits)
    assert 0.18 <= test_fraction <= 0.22


def test_manifest_round_trip_identity(tmp_path):
    corpus = Corpus(SMALL)
    path = tmp_path / "manifest.jsonl"
    corpus.manifest.write(path)
    back = ExperimentManifest.read(path)
    assert back == corpus.manifest


def test_manifest_rejects_boundary_on_overlap():
    with pytest.raises(ManifestError, match="segment_boundary"):
        ManifestRecord(
            utt_id="a",
            speaker="s",
            split="test",
            scenario="overlap",
            source={},
            interference_type="noise",
            alpha=1.0,
            segment_boundary=100,
        ).validate()


def test_manifest_rejects_open_set():
    records = [
        ManifestRecord("a-1", "a", "train", "clean", {"kind": "synth"}),
        ManifestRecord("b-1", "b", "test", "clean", {"kind": "synth"}),
    ]
    manifest = ExperimentManifest(
        sample_rate=SR,
        generator="synthetic",
        corpus_config={},
        profiles={"target": [], "interference": []},
        clips={},
        records=records,
    )
    with pytest.raises(ManifestError, match="closed-set"):
        manifest.validate()


def test_default_corpus_manifest_invariants():
    corpus = Corpus(SMALL)
    manifest = corpus.manifest
    clean = manifest.select(scenario="clean")
    assert len(clean) == SMALL.n_speakers * SMALL.utts_per_speaker
    train_speakers = {r.speaker for r in manifest.select(split="train")}
    test_speakers = {r.speaker for r in manifest.select(split="test")}
    assert test_speakers <= train_speakers
    n_test_clean = len(manifest.select(split="test", scenario="clean"))
    assert len(manifest.select(scenario="overlap")) == 3 * n_test_clean
    assert len(manifest.select(scenario="concat")) == 3 * n_test_clean


def test_corpus_rendering_matches_records():
    corpus = Corpus(SMALL)
    overlap = corpus.manifest.select(scenario="overlap")[0]
    base = corpus.waveform(overlap.source["base"])
    clip = corpus.interference_clip(overlap.interference_type, overlap.interference_id)
    mixed = corpus.waveform(overlap.utt_id)
    manual = mix_waveforms(base, clip, overlap.alpha, overlap.crop_offset)
    assert np.array_equal(mixed.samples, manual.samples)
    concat = corpus.manifest.select(scenario="concat")[0]
    wave = corpus.waveform(concat.utt_id)
    assert len(wave) == 2 * len(base)
    labels = corpus.concat_labels(concat.utt_id)
    assert len(labels.frame_labels) == n_frames_for(len(wave), 400, 160)


def test_corpus_unknown_id():
    with pytest.raises(CorpusError, match="unknown"):
        Corpus(SMALL).waveform("nope")


# ---------------------------------------------------------------------------
# ingest


def make_tree(tmp_path):
    for speaker in ("alice", "bob"):
        d = tmp_path / speaker
        d.mkdir()
        for i in range(3):
            w = synth_utterance(profile(hash(speaker) % 100), 0.6, seed=i)
            write_wav(d / f"utt{i}.wav", w)


def test_ingest_builds_manifest(tmp_path):
    make_tree(tmp_path)
    (tmp_path / "alice" / "broken.wav").write_bytes(b"not audio at all")
    result = ingest_wav(tmp_path)
    assert len(result.manifest.records) == 6
    assert {r.speaker for r in result.manifest.records} == {"alice", "bob"}
    assert len(result.rejects) == 1
    assert "broken.wav" in result.rejects[0][0]
    again = ingest_wav(tmp_path)
    assert again.manifest == result.manifest


def test_ingest_flat_layout_uses_stem_prefix(tmp_path):
    w = synth_utterance(profile(1), 0.6, seed=0)
    write_wav(tmp_path / "carol-001.wav", w)
    write_wav(tmp_path / "carol-002.wav", w)
    result = ingest_wav(tmp_path)
    assert {r.speaker for r in result.manifest.records} == {"carol"}


def test_ingest_empty_directory(tmp_path):
    with pytest.raises(CorpusError, match="no usable audio"):
        ingest_wav(tmp_path)


def test_ingest_rejects_rate_mismatch(tmp_path):
    write_wav(tmp_path / "a-1.wav", synth_utterance(profile(1), 0.6, seed=0))
    write_wav(tmp_path / "a-2.wav", Waveform(np.zeros(4000), 8000))
    result = ingest_wav(tmp_path)
    assert len(result.manifest.records) == 1
    assert any("sample_rate" in reason for _, reason in result.rejects)
