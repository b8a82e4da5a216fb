"""Interference mixing, the two augmentation objectives, and training.

Three training modes produce the three model families under comparison:

- base: cross-entropy on clean features only
- vanilla_da: CE(x) + CE(x + alpha*n), alpha ~ Uniform(0.1, 2.0) per
  utterance per epoch, one augmented copy paired with its clean source in
  the same step
- act_da: the vanilla objective plus the unweighted squared distance
  between the clean and augmented embeddings

Interference shorter than the target is tiled, longer is randomly cropped;
alpha scales the raw interference amplitude directly.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .corpus import INTERFERENCE_KINDS, Corpus, CorpusError, mix_waveforms, _fit_length
from .dsp import DspConfig, Waveform, fbank, stft
from .model import ModelConfig, SpeakerNet
from .tensor import DivergenceError, SgdOptimizer, Tape

__all__ = [
    "MixSpec",
    "TrainConfig",
    "TrainResult",
    "InterferencePool",
    "mix",
    "sample_alpha",
    "input_features",
    "DaLoss",
    "base_loss",
    "vanilla_da_loss",
    "act_da_loss",
    "speaker_index",
    "train",
]

TRAIN_MODES = ("base", "vanilla_da", "act_da")


@dataclass(frozen=True)
class MixSpec:
    interference_type: str
    alpha_min: float = 0.1
    alpha_max: float = 2.0

    def __post_init__(self):
        if self.interference_type not in INTERFERENCE_KINDS:
            raise ValueError(
                f"interference_type must be one of {INTERFERENCE_KINDS}, "
                f"got {self.interference_type!r}"
            )
        if not 0 < self.alpha_min <= self.alpha_max:
            raise ValueError(
                f"need 0 < alpha_min <= alpha_max, got [{self.alpha_min}, {self.alpha_max}]"
            )


@dataclass(frozen=True)
class TrainConfig:
    mode: str
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.9
    mix: MixSpec = None
    seed: int = 0
    crop_seconds: float = None  # None trains on full utterances

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.mode != "base" and self.mix is None:
            raise ValueError(f"mode {self.mode} requires a MixSpec")
        if self.crop_seconds is not None and self.crop_seconds <= 0:
            raise ValueError("crop_seconds must be positive when set")


def sample_alpha(spec: MixSpec, rng) -> float:
    """One fresh mixing gain per utterance per epoch."""
    return float(rng.uniform(spec.alpha_min, spec.alpha_max))


def mix(x: Waveform, n: Waveform, alpha: float) -> Waveform:
    """x + alpha*n with n tiled or truncated to the length of x."""
    return mix_waveforms(x, n, alpha)


def input_features(wave: Waveform, dsp: DspConfig) -> np.ndarray:
    """Log-mel features with per-utterance mean/variance normalization."""
    fb = fbank(
        stft(wave, dsp.frame_length, dsp.hop, dsp.window), dsp.n_mels, dsp.floor_db
    )
    values = fb.values
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    return (values - mean) / (std + 1e-5)


class InterferencePool:
    """Clip access for training, instrumented with per-kind counters."""

    def __init__(self, corpus: Corpus):
        self._corpus = corpus
        self.access_counts = {kind: 0 for kind in INTERFERENCE_KINDS}

    @property
    def total_accesses(self) -> int:
        return sum(self.access_counts.values())

    def draw(self, kind: str, rng, n_samples: int) -> Waveform:
        """Random clip, randomly cropped (or tiled) to n_samples."""
        clips = self._corpus.manifest.clips.get(kind, [])
        if not clips:
            raise CorpusError(f"interference pool has no {kind!r} clips")
        self.access_counts[kind] += 1
        spec = clips[int(rng.integers(0, len(clips)))]
        wave = self._corpus.interference_clip(kind, spec["id"])
        max_offset = max(0, len(wave) - n_samples)
        offset = int(rng.integers(0, max_offset + 1))
        return Waveform(_fit_length(wave.samples, n_samples, offset), wave.sample_rate)


# ---------------------------------------------------------------------------
# objectives


@dataclass
class DaLoss:
    total: float
    ce_clean: float
    ce_mixed: float
    embed_distance: float
    grads: dict  # param name -> gradient array


def _grads_by_name(model, tape, loss):
    ids = {name: p.id for name, p in model.params.items()}
    grads = tape.backward(loss, wrt=list(ids.values()))
    return {name: grads[pid] for name, pid in ids.items()}


def base_loss(model: SpeakerNet, x_features, labels, training=True) -> DaLoss:
    """Plain cross-entropy on the clean branch only."""
    tape = Tape()
    out = model.forward_batch(x_features, training=training, tape=tape)
    ce = T.softmax_cross_entropy(out.logits, labels, tape=tape)
    return DaLoss(
        total=float(ce.data),
        ce_clean=float(ce.data),
        ce_mixed=0.0,
        embed_distance=0.0,
        grads=_grads_by_name(model, tape, ce),
    )


def vanilla_da_loss(model: SpeakerNet, x_features, mixed_features, labels, training=True) -> DaLoss:
    """CE(x) + CE(x_mixed), one backward pass over the joint graph."""
    tape = Tape()
    out_x = model.forward_batch(x_features, training=training, tape=tape)
    out_m = model.forward_batch(mixed_features, training=training, tape=tape)
    ce_x = T.softmax_cross_entropy(out_x.logits, labels, tape=tape)
    ce_m = T.softmax_cross_entropy(out_m.logits, labels, tape=tape)
    total = T.add(ce_x, ce_m, tape=tape)
    return DaLoss(
        total=float(total.data),
        ce_clean=float(ce_x.data),
        ce_mixed=float(ce_m.data),
        embed_distance=0.0,
        grads=_grads_by_name(model, tape, total),
    )


def act_da_loss(model: SpeakerNet, x_features, mixed_features, labels, training=True) -> DaLoss:
    """Vanilla objective plus the unweighted squared embedding distance."""
    tape = Tape()
    out_x = model.forward_batch(x_features, training=training, tape=tape)
    out_m = model.forward_batch(mixed_features, training=training, tape=tape)
    ce_x = T.softmax_cross_entropy(out_x.logits, labels, tape=tape)
    ce_m = T.softmax_cross_entropy(out_m.logits, labels, tape=tape)
    dist = T.squared_l2_distance(out_x.embedding, out_m.embedding, tape=tape)
    total = T.add(T.add(ce_x, ce_m, tape=tape), dist, tape=tape)
    return DaLoss(
        total=float(total.data),
        ce_clean=float(ce_x.data),
        ce_mixed=float(ce_m.data),
        embed_distance=float(dist.data),
        grads=_grads_by_name(model, tape, total),
    )


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: SpeakerNet
    metadata: dict
    log: list  # one dict per epoch
    pool: InterferencePool
    speakers: list


def speaker_index(corpus: Corpus):
    speakers = sorted({p.speaker for p in corpus.target_profiles})
    return speakers, {s: i for i, s in enumerate(speakers)}


def train(
    corpus: Corpus,
    config: TrainConfig,
    model_config: ModelConfig = None,
    dsp: DspConfig = None,
    log_stream=None,
) -> TrainResult:
    """Train one model on the corpus's train split.

    ``log_stream``, when given, receives one JSON line per epoch (epoch,
    loss terms, wall seconds).  Base mode never touches the interference
    pool; DA modes touch only their configured type.
    """
    dsp = dsp or DspConfig()
    speakers, label_of = speaker_index(corpus)
    if len(speakers) < 2:
        raise CorpusError("training needs at least 2 speakers")
    if model_config is None:
        model_config = ModelConfig(n_speakers=len(speakers), n_mels=dsp.n_mels, seed=config.seed)
    if model_config.n_speakers != len(speakers):
        raise ValueError(
            f"model expects {model_config.n_speakers} speakers, corpus has {len(speakers)}"
        )
    records = corpus.manifest.select(split="train", scenario="clean")
    if not records:
        raise CorpusError("corpus has no clean train records")

    model = SpeakerNet(model_config)
    optimizer = SgdOptimizer(config.learning_rate, config.momentum)
    pool = InterferencePool(corpus)
    clean_feats = {}
    labels_all = np.array([label_of[r.speaker] for r in records])

    def clean_features(rec):
        if rec.utt_id not in clean_feats:
            clean_feats[rec.utt_id] = input_features(corpus.waveform(rec.utt_id), dsp)
        return clean_feats[rec.utt_id]

    crop_frames = None
    if config.crop_seconds is not None:
        crop_samples = int(config.crop_seconds * corpus.config.sample_rate)
        crop_frames = max(1, 1 + (crop_samples - dsp.frame_length) // dsp.hop)

    log = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, 100 + epoch])
        order = rng.permutation(len(records))
        sums = {"total": 0.0, "ce_clean": 0.0, "ce_mixed": 0.0, "embed_distance": 0.0}
        start = time.monotonic()
        n_batches = 0
        for lo in range(0, len(order), config.batch_size):
            batch_idx = order[lo : lo + config.batch_size]
            xs, ms = [], []
            for i in batch_idx:
                rec = records[i]
                feats = clean_features(rec)
                if config.mode != "base":
                    wave = corpus.waveform(rec.utt_id)
                    alpha = sample_alpha(config.mix, rng)
                    clip = pool.draw(config.mix.interference_type, rng, len(wave))
                    mixed = mix_waveforms(wave, clip, alpha)
                    mfeats = input_features(mixed, dsp)
                else:
                    mfeats = feats
                if crop_frames is not None and feats.shape[0] > crop_frames:
                    s = int(rng.integers(0, feats.shape[0] - crop_frames + 1))
                    feats = feats[s : s + crop_frames]
                    mfeats = mfeats[s : s + crop_frames]
                xs.append(feats)
                ms.append(mfeats)
            x_batch = np.stack(xs)[:, np.newaxis, :, :]
            labels = labels_all[batch_idx]
            if config.mode == "base":
                loss = base_loss(model, x_batch, labels)
            else:
                m_batch = np.stack(ms)[:, np.newaxis, :, :]
                fn = vanilla_da_loss if config.mode == "vanilla_da" else act_da_loss
                loss = fn(model, x_batch, m_batch, labels)
            if not np.isfinite(loss.total):
                raise DivergenceError(
                    f"training diverged: non-finite loss at epoch {epoch} batch {n_batches}"
                )
            optimizer.step(model.params, loss.grads)
            sums["total"] += loss.total
            sums["ce_clean"] += loss.ce_clean
            sums["ce_mixed"] += loss.ce_mixed
            sums["embed_distance"] += loss.embed_distance
            n_batches += 1
        entry = {
            "epoch": epoch,
            "mode": config.mode,
            "loss": sums["total"] / n_batches,
            "ce_clean": sums["ce_clean"] / n_batches,
            "ce_mixed": sums["ce_mixed"] / n_batches,
            "embed_distance": sums["embed_distance"] / n_batches,
            "seconds": time.monotonic() - start,
        }
        log.append(entry)
        if log_stream is not None:
            log_stream.write(json.dumps(entry, sort_keys=True) + "\n")
            log_stream.flush()

    metadata = {
        "mode": config.mode,
        "interference": config.mix.interference_type if config.mix else "none",
        "epochs": str(config.epochs),
        "batch_size": str(config.batch_size),
        "learning_rate": repr(config.learning_rate),
        "momentum": repr(config.momentum),
        "alpha_min": repr(config.mix.alpha_min) if config.mix else "",
        "alpha_max": repr(config.mix.alpha_max) if config.mix else "",
        "seed": str(config.seed),
        "speakers": ",".join(speakers),
        "n_train_utts": str(len(records)),
    }
    return TrainResult(model=model, metadata=metadata, log=log, pool=pool, speakers=speakers)
