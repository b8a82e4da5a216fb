"""Synthetic speaker/interference corpus, scenario construction, manifests.

Speaker identity is carried by four stable cues: the fundamental-frequency
range, a vocal-tract length factor that scales a shared formant template, the
spectral tilt of the harmonic envelope, and the cycle-level jitter depth.
Utterances are strings of pseudo-syllables (harmonic source filtered by the
speaker's formants), so different utterances of one speaker share voice
character but not content.

Interference comes in three kinds mirroring a target/noise/speech/music
split: shaped broadband noise, speech from a held-out profile pool disjoint
from the target speakers, and multi-voice pentatonic note sequences.

Everything is a pure function of (parameters, seed); audio is rendered on
demand and memoized, so manifests stay small and corpora need not be
materialized to disk.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .dsp import DspError, Waveform, n_frames_for, read_wav

__all__ = [
    "CorpusError",
    "ManifestError",
    "SyntheticSpeakerProfile",
    "make_speaker_profiles",
    "synth_utterance",
    "synth_interference",
    "SegmentLabels",
    "build_concat",
    "build_ramp",
    "mix_waveforms",
    "ManifestRecord",
    "ExperimentManifest",
    "CorpusConfig",
    "Corpus",
    "ingest_wav",
    "IngestResult",
    "split_for_id",
]

TEST_PERCENT = 20
INTERFERENCE_KINDS = ("noise", "speech", "music")
SCENARIOS = ("clean", "concat", "overlap", "ramp")

# seed-stream tags keep the per-purpose RNG streams disjoint
_TAG_TARGET_PROFILE = 0
_TAG_INTF_PROFILE = 1
_TAG_UTTERANCE = 10
_TAG_NOISE_CLIP = 11
_TAG_MUSIC_CLIP = 12
_TAG_SPEECH_CLIP = 13
_TAG_EVAL_MIX = 14


class CorpusError(ValueError):
    """Invalid corpus parameter or generation request."""


class ManifestError(ValueError):
    """A manifest violates its schema or invariants."""


# ---------------------------------------------------------------------------
# speaker profiles


@dataclass(frozen=True)
class SyntheticSpeakerProfile:
    speaker: str
    f0_low: float
    f0_high: float
    formants: tuple  # Hz, strictly increasing
    bandwidths: tuple  # Hz, one per formant
    tilt_db_per_octave: float
    jitter: float
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "formants", tuple(float(f) for f in self.formants))
        object.__setattr__(self, "bandwidths", tuple(float(b) for b in self.bandwidths))
        if not 0 < self.f0_low < self.f0_high:
            raise CorpusError("need 0 < f0_low < f0_high")
        if len(self.formants) != len(self.bandwidths) or not self.formants:
            raise CorpusError("formants and bandwidths must align and be non-empty")
        if any(b <= 0 for b in self.bandwidths):
            raise CorpusError("bandwidths must be positive")
        if list(self.formants) != sorted(set(self.formants)) or self.formants[0] <= 0:
            raise CorpusError("formants must be positive and strictly increasing")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["formants"] = list(self.formants)
        d["bandwidths"] = list(self.bandwidths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpeakerProfile":
        return cls(
            speaker=d["speaker"],
            f0_low=d["f0_low"],
            f0_high=d["f0_high"],
            formants=tuple(d["formants"]),
            bandwidths=tuple(d["bandwidths"]),
            tilt_db_per_octave=d["tilt_db_per_octave"],
            jitter=d["jitter"],
            seed=d["seed"],
        )


_BASE_FORMANTS = np.array([500.0, 1500.0, 2500.0])
_BASE_BANDWIDTHS = np.array([110.0, 170.0, 240.0])


def _coprime_stride(count: int, frac: float, avoid: int = 0) -> int:
    """Stride near count*frac that is coprime to count and not a trivial map."""
    if count < 5:
        return 1 if avoid != 1 else max(1, count - 1)
    start = max(2, int(round(count * frac)))
    for delta in range(count):
        for cand in (start + delta, start - delta):
            s = cand % count
            if s in (0, 1, count - 1, avoid):
                continue
            if math.gcd(s, count) == 1:
                return s
    return 1


def make_speaker_profiles(corpus_seed: int, count: int, role: str = "spk"):
    """Deterministic profile list; role 'spk' and 'intf' draw disjoint streams.

    Voice dimensions (pitch register, formant shift, spectral tilt) are
    stratified and the strata orders decorrelated with coprime strides, so
    any two profiles sit far apart in at least one dimension regardless of
    population size.
    """
    if role not in ("spk", "intf"):
        raise CorpusError(f"unknown profile role {role!r}")
    tag = _TAG_TARGET_PROFILE if role == "spk" else _TAG_INTF_PROFILE
    stride_shift = _coprime_stride(count, 0.44)
    stride_tilt = _coprime_stride(count, 0.31, avoid=stride_shift)
    grid_rng = np.random.default_rng([corpus_seed, tag, 10_000 + count])
    offset_shift = int(grid_rng.integers(count)) if count else 0
    offset_tilt = int(grid_rng.integers(count)) if count else 0
    profiles = []
    for i in range(count):
        rng = np.random.default_rng([corpus_seed, tag, i])
        cell_f0 = i + 0.25 + 0.5 * rng.random()
        cell_shift = (i * stride_shift + offset_shift) % count + 0.25 + 0.5 * rng.random()
        cell_tilt = (i * stride_tilt + offset_tilt) % count + 0.25 + 0.5 * rng.random()
        f0_low = 90.0 + (150.0 / count) * cell_f0
        f0_high = f0_low * rng.uniform(1.25, 1.40)
        shift = 0.80 + (0.40 / count) * cell_shift
        bw_scale = rng.uniform(0.9, 1.1)
        tilt = -12.0 + (8.0 / count) * cell_tilt
        profiles.append(
            SyntheticSpeakerProfile(
                speaker=f"{role}{i:02d}",
                f0_low=float(f0_low),
                f0_high=float(f0_high),
                formants=tuple(_BASE_FORMANTS * shift),
                bandwidths=tuple(_BASE_BANDWIDTHS * bw_scale),
                tilt_db_per_octave=float(tilt),
                jitter=float(rng.uniform(0.005, 0.02)),
                seed=int(rng.integers(0, 2**31 - 1)),
            )
        )
    return profiles


# ---------------------------------------------------------------------------
# synthesis


def _normalize(x: np.ndarray, rms: float) -> np.ndarray:
    current = np.sqrt(np.mean(x * x))
    if current > 0.0:
        x = x * (rms / current)
    peak = np.max(np.abs(x)) if len(x) else 0.0
    if peak > 0.99:
        x = x * (0.99 / peak)
    return x


def synth_utterance(
    profile: SyntheticSpeakerProfile,
    duration: float,
    seed: int,
    sample_rate: int = 16000,
    rms: float = 0.06,
) -> Waveform:
    """Render one pseudo-syllabic utterance of the given speaker."""
    if duration < 0.5:
        raise CorpusError(f"duration must be >= 0.5 s, got {duration}")
    nyquist = sample_rate / 2.0
    if max(profile.formants) * 1.2 >= nyquist:
        raise CorpusError(
            f"formant {max(profile.formants):.0f} Hz too close to Nyquist {nyquist:.0f} Hz"
        )
    rng = np.random.default_rng([profile.seed, int(seed)])
    n = int(round(duration * sample_rate))
    out = np.zeros(n)
    pos = int(rng.integers(0, int(0.03 * sample_rate) + 1))
    harmonic_ceiling = min(5000.0, nyquist * 0.95)
    while pos < n:
        syl = int(rng.uniform(0.15, 0.30) * sample_rate)
        gap = int(rng.uniform(0.02, 0.08) * sample_rate)
        seg = min(syl, n - pos)
        if seg < int(0.05 * sample_rate):
            break
        t = np.arange(seg)
        f0_start = rng.uniform(profile.f0_low, profile.f0_high)
        f0_end = rng.uniform(profile.f0_low, profile.f0_high)
        f0 = f0_start + (f0_end - f0_start) * t / seg
        wobble = np.interp(t, np.linspace(0, seg, 8), rng.standard_normal(8))
        f0 = f0 * (1.0 + profile.jitter * wobble)
        phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate
        # per-syllable vowel variation around the speaker's formant template
        # vowel variety must stay narrower than between-speaker formant gaps
        centers = np.array(profile.formants) * rng.uniform(0.95, 1.05, len(profile.formants))
        bands = np.array(profile.bandwidths)
        f0_mean = 0.5 * (f0_start + f0_end)
        n_harmonics = max(1, int(harmonic_ceiling // f0_mean))
        voiced = np.zeros(seg)
        for h in range(1, n_harmonics + 1):
            fh = h * f0_mean
            envelope = np.sum(1.0 / (1.0 + ((fh - centers) / bands) ** 2))
            tilt = 10.0 ** (profile.tilt_db_per_octave * np.log2(h) / 20.0)
            voiced += envelope * tilt * np.sin(h * phase + rng.uniform(0.0, 2 * np.pi))
        shape = 0.5 - 0.5 * np.cos(2.0 * np.pi * (t + 0.5) / seg)
        breath = 0.02 * np.max(np.abs(voiced)) * rng.standard_normal(seg)
        out[pos : pos + seg] += (voiced + breath) * shape
        pos += seg + gap
    return Waveform(_normalize(out, rms), sample_rate)


def _synth_noise(rng, n, sample_rate, rms):
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    ctrl_f = np.geomspace(100.0, sample_rate / 2.0 * 0.975, 8)
    ctrl_db = rng.normal(0.0, 3.0, 8)
    tilt = rng.uniform(-1.0, 1.0)
    env_db = np.interp(np.log(freqs + 1.0), np.log(ctrl_f + 1.0), ctrl_db)
    env_db = env_db + tilt * np.log2(np.maximum(freqs, 50.0) / 1000.0)
    gain = 10.0 ** (env_db / 20.0)
    gain *= np.clip(freqs / 80.0, 0.0, 1.0)  # taper below 80 Hz
    gain *= np.clip((sample_rate / 2.0 - freqs) / 200.0, 0.0, 1.0)  # edge taper
    x = np.fft.irfft(spec * gain, n)
    return _normalize(x, rms)


_PENTATONIC_SEMITONES = (0, 3, 5, 7, 10, 12, 15, 17, 19, 22)


def _synth_music(rng, n, sample_rate, rms):
    base = 110.0 * 2.0 ** int(rng.integers(0, 2))
    out = np.zeros(n)
    for voice in range(2):
        level = 0.7**voice
        pos = int(rng.integers(0, int(0.05 * sample_rate) + 1))
        while pos < n:
            dur = int(rng.uniform(0.2, 0.45) * sample_rate)
            seg = min(dur, n - pos)
            if seg < int(0.03 * sample_rate):
                break
            f = base * 2.0 ** (_PENTATONIC_SEMITONES[rng.integers(0, 10)] / 12.0)
            if voice == 1:
                f *= 2.0  # upper voice an octave above
            t = np.arange(seg) / sample_rate
            note = np.zeros(seg)
            h = 1
            while h * f < 5000.0 and h <= 8:
                note += (1.0 / h**1.2) * np.sin(
                    2 * np.pi * f * h * t + rng.uniform(0.0, 2 * np.pi)
                )
                h += 1
            attack = int(0.01 * sample_rate)
            env = np.exp(-3.0 * t / (dur / sample_rate))
            if attack > 0:
                env[:attack] *= np.linspace(0.0, 1.0, attack, endpoint=False)
            out[pos : pos + seg] += level * note * env
            pos += dur + int(rng.uniform(0.01, 0.06) * sample_rate)
    return _normalize(out, rms)


def synth_interference(
    kind: str,
    duration: float,
    seed,
    profile: SyntheticSpeakerProfile = None,
    sample_rate: int = 16000,
    rms: float = 0.12,
) -> Waveform:
    """Render one interference clip of the requested kind."""
    if kind not in INTERFERENCE_KINDS:
        raise CorpusError(f"unknown interference kind {kind!r}")
    n = int(round(duration * sample_rate))
    if kind == "speech":
        if profile is None:
            profile = make_speaker_profiles(_seed_scalar(seed), 1, role="intf")[0]
        return Waveform(
            synth_utterance(profile, duration, _seed_scalar(seed), sample_rate, rms).samples,
            sample_rate,
        )
    rng = np.random.default_rng(seed)
    if kind == "noise":
        return Waveform(_synth_noise(rng, n, sample_rate, rms), sample_rate)
    return Waveform(_synth_music(rng, n, sample_rate, rms), sample_rate)


def _seed_scalar(seed) -> int:
    """Collapse list seeds to one stable integer (for nested generators)."""
    if isinstance(seed, (list, tuple)):
        digest = hashlib.sha256(json.dumps(list(seed)).encode()).digest()
        return int.from_bytes(digest[:4], "big")
    return int(seed)


# ---------------------------------------------------------------------------
# scenarios


def _fit_length(x: np.ndarray, n: int, offset: int = 0) -> np.ndarray:
    """Crop at offset, tiling first if the source is shorter than needed."""
    if len(x) < offset + n:
        reps = int(np.ceil((offset + n) / len(x)))
        x = np.tile(x, reps)
    return x[offset : offset + n]


def mix_waveforms(target: Waveform, interference: Waveform, alpha: float, offset: int = 0) -> Waveform:
    """target + alpha * interference, interference fitted to target length."""
    if target.sample_rate != interference.sample_rate:
        raise CorpusError(
            f"sample rate mismatch: {target.sample_rate} vs {interference.sample_rate}"
        )
    if alpha < 0:
        raise CorpusError(f"alpha must be nonnegative, got {alpha}")
    if alpha == 0:
        return Waveform(target.samples.copy(), target.sample_rate)
    noise = _fit_length(interference.samples, len(target), offset)
    return Waveform(target.samples + alpha * noise, target.sample_rate)


@dataclass
class SegmentLabels:
    """Per-frame target/interference labels on the analysis frame grid."""

    frame_labels: np.ndarray  # 0 = target, 1 = interference
    boundary_sample: int
    frame_length: int
    hop: int

    def __post_init__(self):
        self.frame_labels = np.asarray(self.frame_labels, dtype=np.int8)


def build_concat(
    target: Waveform,
    interference: Waveform,
    frame_length: int = 400,
    hop: int = 160,
):
    """Concatenate target then interference; label frames by majority sample."""
    if target.sample_rate != interference.sample_rate:
        raise CorpusError(
            f"sample rate mismatch: {target.sample_rate} vs {interference.sample_rate}"
        )
    boundary = len(target)
    samples = np.concatenate([target.samples, interference.samples])
    out = Waveform(samples, target.sample_rate)
    frames = n_frames_for(len(samples), frame_length, hop)
    labels = np.zeros(frames, dtype=np.int8)
    for i in range(frames):
        start = i * hop
        inside = max(0, min(start + frame_length, len(samples)) - max(start, boundary))
        labels[i] = 1 if inside * 2 >= frame_length else 0
    return out, SegmentLabels(labels, boundary, frame_length, hop)


def build_ramp(target: Waveform, interference: Waveform, snr_list, window):
    """One mixture per requested dB level, exact over the given window.

    The interference is added only inside ``window`` (a (start, stop) sample
    pair); its gain is chosen so the windowed segment attains the requested
    SNR exactly.  Samples outside the window are the unmodified target.
    """
    if target.sample_rate != interference.sample_rate:
        raise CorpusError(
            f"sample rate mismatch: {target.sample_rate} vs {interference.sample_rate}"
        )
    start, stop = int(window[0]), int(window[1])
    if not 0 <= start < stop <= len(target):
        raise CorpusError(f"window {window} outside target of {len(target)} samples")
    ref = target.samples[start:stop]
    ref_energy = float(np.sum(ref * ref))
    if ref_energy == 0.0:
        raise CorpusError("zero-energy window: SNR gain undefined")
    noise = _fit_length(interference.samples, stop - start)
    noise_energy = float(np.sum(noise * noise))
    if noise_energy == 0.0:
        raise CorpusError("zero-energy interference: SNR gain undefined")
    mixtures = []
    for snr_db in snr_list:
        gain = np.sqrt(ref_energy / noise_energy * 10.0 ** (-float(snr_db) / 10.0))
        mixed = target.samples.copy()
        mixed[start:stop] += gain * noise
        mixtures.append(Waveform(mixed, target.sample_rate))
    return mixtures


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestRecord:
    utt_id: str
    speaker: str
    split: str  # train | test
    scenario: str  # clean | concat | overlap | ramp
    source: dict  # generator spec or wav path
    interference_type: str = "none"
    interference_id: str = None
    alpha: float = None
    crop_offset: int = None
    segment_boundary: int = None

    def validate(self):
        if self.split not in ("train", "test"):
            raise ManifestError(f"{self.utt_id}: bad split {self.split!r}")
        if self.scenario not in SCENARIOS:
            raise ManifestError(f"{self.utt_id}: bad scenario {self.scenario!r}")
        if (self.segment_boundary is not None) != (self.scenario == "concat"):
            raise ManifestError(
                f"{self.utt_id}: segment_boundary present iff scenario is concat"
            )
        if self.scenario == "clean":
            if self.interference_type != "none" or self.interference_id is not None:
                raise ManifestError(f"{self.utt_id}: clean records carry no interference")
        else:
            if self.interference_type not in INTERFERENCE_KINDS:
                raise ManifestError(
                    f"{self.utt_id}: scenario {self.scenario} needs an interference type"
                )
        if self.scenario == "overlap" and self.alpha is None:
            raise ManifestError(f"{self.utt_id}: overlap records need alpha")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestRecord":
        rec = cls(**d)
        rec.validate()
        return rec


@dataclass
class ExperimentManifest:
    sample_rate: int
    generator: str  # synthetic | ingest
    corpus_config: dict
    profiles: dict  # {"target": [...], "interference": [...]}
    clips: dict  # kind -> list of clip specs
    records: list

    VERSION = 1

    def __post_init__(self):
        self.records = sorted(self.records, key=lambda r: r.utt_id)

    def validate(self):
        seen = set()
        train_speakers = set()
        for rec in self.records:
            rec.validate()
            if rec.utt_id in seen:
                raise ManifestError(f"duplicate utt_id {rec.utt_id}")
            seen.add(rec.utt_id)
            if rec.split == "train":
                train_speakers.add(rec.speaker)
        for rec in self.records:
            if rec.split == "test" and rec.speaker not in train_speakers:
                raise ManifestError(
                    f"closed-set violation: test speaker {rec.speaker} has no train data"
                )
        target_ids = {p["speaker"] for p in self.profiles.get("target", [])}
        intf_ids = {p["speaker"] for p in self.profiles.get("interference", [])}
        if target_ids & intf_ids:
            raise ManifestError(
                f"interference profiles overlap targets: {sorted(target_ids & intf_ids)}"
            )

    def select(self, split=None, scenario=None, interference_type=None):
        out = []
        for rec in self.records:
            if split is not None and rec.split != split:
                continue
            if scenario is not None and rec.scenario != scenario:
                continue
            if interference_type is not None and rec.interference_type != interference_type:
                continue
            out.append(rec)
        return out

    def write(self, path):
        header = {
            "format": "manifest",
            "version": self.VERSION,
            "sample_rate": self.sample_rate,
            "generator": self.generator,
            "corpus_config": self.corpus_config,
            "profiles": self.profiles,
            "clips": self.clips,
        }
        lines = [json.dumps(header, sort_keys=True)]
        lines += [rec.to_json() for rec in sorted(self.records, key=lambda r: r.utt_id)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "ExperimentManifest":
        lines = Path(path).read_text().splitlines()
        if not lines:
            raise ManifestError(f"{path}: empty manifest")
        header = json.loads(lines[0])
        if header.get("format") != "manifest":
            raise ManifestError(f"{path}: first line is not a manifest header")
        if header.get("version") != cls.VERSION:
            raise ManifestError(
                f"{path}: manifest version {header.get('version')} unsupported"
            )
        records = [ManifestRecord.from_dict(json.loads(line)) for line in lines[1:] if line]
        manifest = cls(
            sample_rate=header["sample_rate"],
            generator=header["generator"],
            corpus_config=header["corpus_config"],
            profiles=header["profiles"],
            clips=header["clips"],
            records=records,
        )
        manifest.validate()
        return manifest


def split_for_id(utt_id: str, test_percent: int = TEST_PERCENT) -> str:
    """Stable hash split: the same id lands in the same split everywhere."""
    digest = hashlib.sha1(utt_id.encode()).digest()
    bucket = int.from_bytes(digest[:8], "big") % 100
    return "test" if bucket < test_percent else "train"


def _enforce_closed_set(records):
    """Move one test utterance to train for speakers lacking train data."""
    by_speaker = {}
    for rec in records:
        by_speaker.setdefault(rec.speaker, []).append(rec)
    for speaker, recs in sorted(by_speaker.items()):
        if not any(r.split == "train" for r in recs):
            mover = min(recs, key=lambda r: r.utt_id)
            mover.split = "train"


# ---------------------------------------------------------------------------
# default synthetic corpus


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 0
    n_speakers: int = 16
    utts_per_speaker: int = 40
    utt_duration: float = 2.0
    n_intf_profiles: int = 8
    n_noise_clips: int = 64
    n_music_clips: int = 64
    n_speech_clips: int = 64
    clip_duration: float = 3.0
    sample_rate: int = 16000
    target_rms: float = 0.06
    interference_rms: float = 0.12

    def __post_init__(self):
        if self.n_speakers < 2 or self.utts_per_speaker < 1:
            raise CorpusError("need >= 2 speakers with >= 1 utterance each")
        if self.utt_duration < 0.5 or self.clip_duration < 0.5:
            raise CorpusError("durations must be >= 0.5 s")
        if min(self.n_noise_clips, self.n_music_clips, self.n_speech_clips) < 1:
            raise CorpusError("need at least one clip per interference kind")

    def to_dict(self) -> dict:
        return asdict(self)


class Corpus:
    """Manifest plus memoized rendering for the default synthetic corpus."""

    def __init__(self, config: CorpusConfig = None):
        self.config = config or CorpusConfig()
        cfg = self.config
        self.target_profiles = make_speaker_profiles(cfg.seed, cfg.n_speakers, "spk")
        self.interference_profiles = make_speaker_profiles(
            cfg.seed, cfg.n_intf_profiles, "intf"
        )
        self._profile_by_id = {
            p.speaker: p for p in self.target_profiles + self.interference_profiles
        }
        self.manifest = self._build_manifest()
        self.manifest.validate()
        self._wave_cache: dict = {}
        self._clip_cache: dict = {}
        self._record_by_id = {r.utt_id: r for r in self.manifest.records}

    # -- manifest assembly ---------------------------------------------------

    def _clip_specs(self):
        cfg = self.config
        clips = {"noise": [], "music": [], "speech": []}
        for i in range(cfg.n_noise_clips):
            clips["noise"].append(
                {"id": f"noise{i:03d}", "seed": [cfg.seed, _TAG_NOISE_CLIP, i], "duration": cfg.clip_duration}
            )
        for i in range(cfg.n_music_clips):
            clips["music"].append(
                {"id": f"music{i:03d}", "seed": [cfg.seed, _TAG_MUSIC_CLIP, i], "duration": cfg.clip_duration}
            )
        for i in range(cfg.n_speech_clips):
            profile = self.interference_profiles[i % cfg.n_intf_profiles]
            clips["speech"].append(
                {
                    "id": f"ispeech{i:03d}",
                    "seed": [cfg.seed, _TAG_SPEECH_CLIP, i],
                    "duration": cfg.clip_duration,
                    "profile": profile.speaker,
                }
            )
        return clips

    def _build_manifest(self) -> ExperimentManifest:
        cfg = self.config
        records = []
        for si, profile in enumerate(self.target_profiles):
            for uj in range(cfg.utts_per_speaker):
                utt_id = f"{profile.speaker}-u{uj:02d}"
                records.append(
                    ManifestRecord(
                        utt_id=utt_id,
                        speaker=profile.speaker,
                        split=split_for_id(utt_id),
                        scenario="clean",
                        source={
                            "kind": "synth",
                            "profile": profile.speaker,
                            "utt_seed": uj,
                            "duration": cfg.utt_duration,
                        },
                    )
                )
        _enforce_closed_set(records)
        clips = self._clip_specs()
        eval_records = []
        for rec in records:
            if rec.split != "test":
                continue
            for ki, kind in enumerate(INTERFERENCE_KINDS):
                rng = np.random.default_rng(
                    [cfg.seed, _TAG_EVAL_MIX, _str_key(rec.utt_id), ki]
                )
                pool = clips[kind]
                clip = pool[int(rng.integers(0, len(pool)))]
                max_offset = max(
                    0,
                    int(cfg.clip_duration * cfg.sample_rate)
                    - int(cfg.utt_duration * cfg.sample_rate),
                )
                offset = int(rng.integers(0, max_offset + 1))
                alpha = float(rng.uniform(0.1, 2.0))
                eval_records.append(
                    ManifestRecord(
                        utt_id=f"{rec.utt_id}.ov-{kind}",
                        speaker=rec.speaker,
                        split="test",
                        scenario="overlap",
                        source={"kind": "derived", "base": rec.utt_id},
                        interference_type=kind,
                        interference_id=clip["id"],
                        alpha=alpha,
                        crop_offset=offset,
                    )
                )
                eval_records.append(
                    ManifestRecord(
                        utt_id=f"{rec.utt_id}.cat-{kind}",
                        speaker=rec.speaker,
                        split="test",
                        scenario="concat",
                        source={"kind": "derived", "base": rec.utt_id},
                        interference_type=kind,
                        interference_id=clip["id"],
                        crop_offset=offset,
                        segment_boundary=int(cfg.utt_duration * cfg.sample_rate),
                    )
                )
        return ExperimentManifest(
            sample_rate=cfg.sample_rate,
            generator="synthetic",
            corpus_config=cfg.to_dict(),
            profiles={
                "target": [p.to_dict() for p in self.target_profiles],
                "interference": [p.to_dict() for p in self.interference_profiles],
            },
            clips=clips,
            records=records + eval_records,
        )

    # -- rendering -----------------------------------------------------------

    def record(self, utt_id: str) -> ManifestRecord:
        try:
            return self._record_by_id[utt_id]
        except KeyError:
            raise CorpusError(f"unknown utterance id {utt_id!r}") from None

    def interference_clip(self, kind: str, clip_id: str) -> Waveform:
        key = (kind, clip_id)
        if key not in self._clip_cache:
            spec = next(
                (c for c in self.manifest.clips.get(kind, []) if c["id"] == clip_id), None
            )
            if spec is None:
                raise CorpusError(f"unknown {kind} clip {clip_id!r}")
            profile = self._profile_by_id.get(spec.get("profile"))
            self._clip_cache[key] = synth_interference(
                kind,
                spec["duration"],
                spec["seed"],
                profile=profile,
                sample_rate=self.config.sample_rate,
                rms=self.config.interference_rms,
            )
        return self._clip_cache[key]

    def waveform(self, utt_id: str) -> Waveform:
        if utt_id in self._wave_cache:
            return self._wave_cache[utt_id]
        rec = self.record(utt_id)
        wave = self._render(rec)
        self._wave_cache[utt_id] = wave
        return wave

    def _render(self, rec: ManifestRecord) -> Waveform:
        cfg = self.config
        if rec.scenario == "clean":
            profile = self._profile_by_id[rec.source["profile"]]
            return synth_utterance(
                profile,
                rec.source["duration"],
                rec.source["utt_seed"],
                sample_rate=cfg.sample_rate,
                rms=cfg.target_rms,
            )
        base = self.waveform(rec.source["base"])
        clip = self.interference_clip(rec.interference_type, rec.interference_id)
        if rec.scenario == "overlap":
            return mix_waveforms(base, clip, rec.alpha, rec.crop_offset)
        if rec.scenario == "concat":
            segment = Waveform(
                _fit_length(clip.samples, len(base), rec.crop_offset), clip.sample_rate
            )
            wave, _ = build_concat(base, segment)
            return wave
        raise CorpusError(f"cannot render scenario {rec.scenario!r}")

    def concat_labels(self, utt_id: str) -> SegmentLabels:
        rec = self.record(utt_id)
        if rec.scenario != "concat":
            raise CorpusError(f"{utt_id} is not a concat record")
        base = self.waveform(rec.source["base"])
        clip = self.interference_clip(rec.interference_type, rec.interference_id)
        segment = Waveform(
            _fit_length(clip.samples, len(base), rec.crop_offset), clip.sample_rate
        )
        _, labels = build_concat(base, segment)
        return labels


def _str_key(text: str) -> int:
    digest = hashlib.sha1(text.encode()).digest()
    return int.from_bytes(digest[:4], "big")


# ---------------------------------------------------------------------------
# ingest


@dataclass
class IngestResult:
    manifest: ExperimentManifest
    rejects: list  # (relative path, reason)


def _default_label_rule(root: Path, path: Path) -> str:
    rel = path.relative_to(root)
    if len(rel.parts) > 1:
        return rel.parts[0]
    return rel.stem.split("-")[0]


def ingest_wav(directory, label_rule=None) -> IngestResult:
    """Build a manifest from a directory tree of PCM-16 mono WAV files.

    ``label_rule(path) -> speaker id`` defaults to the first subdirectory
    name (or the filename stem up to the first dash for flat layouts).
    Unusable files are reported, not silently dropped.
    """
    root = Path(directory)
    if not root.is_dir():
        raise CorpusError(f"{directory} is not a directory")
    paths = sorted(root.rglob("*.wav"))
    records = []
    rejects = []
    sample_rate = None
    for path in paths:
        rel = str(path.relative_to(root))
        try:
            wave = read_wav(path)
        except DspError as e:
            rejects.append((rel, str(e)))
            continue
        if sample_rate is None:
            sample_rate = wave.sample_rate
        elif wave.sample_rate != sample_rate:
            rejects.append(
                (rel, f"sample_rate {wave.sample_rate} != {sample_rate} (first seen)")
            )
            continue
        speaker = (
            label_rule(path) if label_rule is not None else _default_label_rule(root, path)
        )
        records.append(
            ManifestRecord(
                utt_id=rel,
                speaker=str(speaker),
                split=split_for_id(rel),
                scenario="clean",
                source={"kind": "wav", "path": str(path)},
            )
        )
    if not records:
        raise CorpusError(f"no usable audio in {directory}")
    _enforce_closed_set(records)
    manifest = ExperimentManifest(
        sample_rate=sample_rate,
        generator="ingest",
        corpus_config={},
        profiles={"target": [], "interference": []},
        clips={},
        records=records,
    )
    manifest.validate()
    return IngestResult(manifest=manifest, rejects=rejects)
