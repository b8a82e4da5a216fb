"""Quantitative saliency protocols and accuracy aggregation.

Three evaluation protocols built on fused saliency maps:

* retention ratios on concatenated target/interference audio (how much of
  each segment the map keeps above a per-frame threshold),
* soft-mask denoising of overlapped mixtures scored by waveform SNR,
* the deletion test: progressively zero clean-feature cells that the
  saliency of the matching noisy utterance ranks low, and track a clean
  judge model's top-1 accuracy as the threshold grows.

Plus plain top-k accuracy over labeled waveform sets.
"""

from dataclasses import dataclass, field

import numpy as np

from .augment import input_features
from .corpus import SegmentLabels
from .dsp import DspConfig, Waveform, fbank, resynthesize_masked, snr, stft
from .layercam import SaliencyMap, fused_saliency
from .model import predict_topk

__all__ = [
    "AnalysisError",
    "RetentionSummary",
    "DenoiseSummary",
    "DeletionCurve",
    "DEFAULT_RETENTION_RHO",
    "DELETION_THRESHOLDS",
    "frame_saliency",
    "default_frame_threshold",
    "spr_ipr",
    "retention_summary",
    "batched_logits",
    "topk_accuracy",
    "denoise_chain",
    "denoise_eval",
    "deletion_mask",
    "curve_auc",
    "deletion_test",
]

# Per-frame retention threshold as a fraction of the mel bin count.
DEFAULT_RETENTION_RHO = 0.1875

DELETION_THRESHOLDS = tuple(np.linspace(0.0, 1.0, 21))


class AnalysisError(ValueError):
    pass


def frame_saliency(map_: SaliencyMap) -> np.ndarray:
    """Per-frame relevance: sum of map values across the mel axis."""
    return map_.values.sum(axis=1)


def default_frame_threshold(n_mels: int, rho: float = DEFAULT_RETENTION_RHO) -> float:
    return float(rho * n_mels)


def spr_ipr(map_: SaliencyMap, labels: SegmentLabels, frame_threshold: float):
    """Speech/interference preservation ratios of one concatenated utterance.

    A frame is retained when its summed saliency exceeds the threshold.
    Returns (spr, ipr): the retained fraction of target frames and of
    interference frames.  A class with no frames yields None for its
    ratio rather than a fabricated zero.
    """
    if frame_threshold <= 0:
        raise AnalysisError(f"frame_threshold must be positive, got {frame_threshold}")
    values = frame_saliency(map_)
    marks = np.asarray(labels.frame_labels)
    if len(marks) != len(values):
        raise AnalysisError(
            f"labels cover {len(marks)} frames, map has {len(values)}"
        )
    retained = values > frame_threshold
    target = marks == 0
    interference = marks == 1
    spr = float(retained[target].mean()) if target.any() else None
    ipr = float(retained[interference].mean()) if interference.any() else None
    return spr, ipr


@dataclass
class RetentionSummary:
    """Frame-pooled retention ratios over a set of concatenated utterances."""

    spr: float
    ipr: float
    frame_threshold: float
    target_frames: int
    interference_frames: int


def retention_summary(model, items, dsp: DspConfig, rho: float = DEFAULT_RETENTION_RHO
                      ) -> RetentionSummary:
    """Pooled SPR/IPR of a model over (waveform, labels, class) triples.

    Saliency targets the true class of each utterance.  Frames are pooled
    across the whole set before the ratio is taken.
    """
    if not items:
        raise AnalysisError("retention_summary needs at least one utterance")
    threshold = default_frame_threshold(dsp.n_mels, rho)
    kept = {0: 0, 1: 0}
    total = {0: 0, 1: 0}
    for wave, labels, cls in items:
        map_ = fused_saliency(model, input_features(wave, dsp), cls)
        values = frame_saliency(map_)
        marks = np.asarray(labels.frame_labels)
        if len(marks) != len(values):
            raise AnalysisError(
                f"labels cover {len(marks)} frames, map has {len(values)}"
            )
        retained = values > threshold
        for side in (0, 1):
            sel = marks == side
            kept[side] += int(retained[sel].sum())
            total[side] += int(sel.sum())
    spr = kept[0] / total[0] if total[0] else None
    ipr = kept[1] / total[1] if total[1] else None
    return RetentionSummary(spr, ipr, threshold, total[0], total[1])


# ---------------------------------------------------------------------------
# accuracy


def batched_logits(model, features_list, batch_size: int = 32) -> np.ndarray:
    """Logit rows for a list of (time, mel) feature arrays.

    Consecutive same-shaped features are forwarded together; the grouping
    is a deterministic function of the input order, so repeated calls over
    the same list are bit-identical.
    """
    n = len(features_list)
    out = np.zeros((n, model.config.n_speakers))
    i = 0
    while i < n:
        j = i + 1
        shape = features_list[i].shape
        while j < n and j - i < batch_size and features_list[j].shape == shape:
            j += 1
        x = np.stack(features_list[i:j])[:, np.newaxis]
        out[i:j] = model.forward_batch(x, training=False).logits.data
        i = j
    return out


def topk_accuracy(model, examples, dsp: DspConfig, ks=(1, 5, 10)) -> dict:
    """Fraction of (waveform, class) examples whose class is in the top k."""
    if not examples:
        raise AnalysisError("topk_accuracy needs a non-empty test set")
    feats = [input_features(w, dsp) for w, _ in examples]
    labels = np.array([c for _, c in examples])
    logits = batched_logits(model, feats)
    table = {}
    for k in ks:
        hits = sum(
            1 for row, c in zip(logits, labels) if c in predict_topk(row, k)
        )
        table[int(k)] = hits / len(examples)
    return table


# ---------------------------------------------------------------------------
# soft-mask denoising


def denoise_chain(clean: Waveform, mixture: Waveform, mask: np.ndarray,
                  dsp: DspConfig) -> float:
    """SNR of the mixture resynthesized under a soft mel mask.

    The mixture's log-mel features are masked, inverted to magnitude, and
    resynthesized with the clean signal's phase; the score is the waveform
    SNR against the clean reference.  An all-ones mask is the no-denoising
    baseline: the identical analysis/synthesis chain with nothing removed.
    """
    mix_fbank = fbank(
        stft(mixture, dsp.frame_length, dsp.hop, dsp.window), dsp.n_mels, dsp.floor_db
    )
    clean_spec = stft(clean, dsp.frame_length, dsp.hop, dsp.window)
    estimate = resynthesize_masked(mix_fbank, mask, clean_spec)
    return snr(clean, estimate)


@dataclass
class DenoiseSummary:
    """Per-model masked-resynthesis SNRs; the 'noisy' row is the all-ones mask."""

    per_utterance: dict = field(default_factory=dict)  # name -> list of dB values

    def mean(self, name: str) -> float:
        values = self.per_utterance[name]
        return float(np.mean(values))

    @property
    def model_names(self):
        return sorted(self.per_utterance)


def denoise_eval(models: dict, items, dsp: DspConfig) -> DenoiseSummary:
    """Masked-denoising SNR table over (clean, mixture, class) triples.

    ``models`` maps a display name to a network; every network's fused
    saliency of the mixture (at the true class) serves as the soft mask.
    The returned summary always includes a 'noisy' row produced by the
    all-ones mask through the identical chain.
    """
    if not items:
        raise AnalysisError("denoise_eval needs at least one mixture")
    if "noisy" in models:
        raise AnalysisError("model name 'noisy' is reserved for the baseline row")
    summary = DenoiseSummary({name: [] for name in list(models) + ["noisy"]})
    for clean, mixture, cls in items:
        feats = input_features(mixture, dsp)
        ones = np.ones(feats.shape)
        summary.per_utterance["noisy"].append(denoise_chain(clean, mixture, ones, dsp))
        for name, model in models.items():
            mask = fused_saliency(model, feats, cls).values
            summary.per_utterance[name].append(denoise_chain(clean, mixture, mask, dsp))
    return summary


# ---------------------------------------------------------------------------
# deletion test


@dataclass
class DeletionCurve:
    """Accuracy versus deletion threshold, with normalized trapezoidal AUC."""

    thresholds: np.ndarray
    masked_fractions: np.ndarray
    accuracies: np.ndarray
    auc: float

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=np.float64)
        m = np.asarray(self.masked_fractions, dtype=np.float64)
        a = np.asarray(self.accuracies, dtype=np.float64)
        if not (len(t) == len(m) == len(a)):
            raise AnalysisError("curve columns have mismatched lengths")
        if len(t) < 2:
            raise AnalysisError("a deletion curve needs at least two thresholds")
        if not (np.diff(t) > 0).all():
            raise AnalysisError("thresholds must be strictly increasing")
        if (np.diff(m) < 0).any():
            raise AnalysisError("masked fraction must be non-decreasing")
        if not 0.0 <= self.auc <= 1.0:
            raise AnalysisError(f"auc {self.auc} outside [0, 1]")
        self.thresholds, self.masked_fractions, self.accuracies = t, m, a


def deletion_mask(saliency_values: np.ndarray, threshold: float) -> np.ndarray:
    """Boolean grid of cells to delete: saliency strictly below threshold.

    Masks grow with the threshold by construction: the masked set at a
    lower threshold is a subset of the set at any higher one.
    """
    return np.asarray(saliency_values) < threshold


def curve_auc(thresholds, accuracies) -> float:
    """Trapezoidal area under accuracy(threshold), normalized by the span."""
    t = np.asarray(thresholds, dtype=np.float64)
    a = np.asarray(accuracies, dtype=np.float64)
    span = t[-1] - t[0]
    if span <= 0:
        raise AnalysisError("threshold span must be positive")
    integrate = getattr(np, "trapezoid", np.trapz)
    return float(integrate(a, t) / span)


def deletion_test(saliency_model, judge_model, pairs, dsp: DspConfig,
                  thresholds=DELETION_THRESHOLDS) -> DeletionCurve:
    """Delete low-saliency clean-feature cells and track judge accuracy.

    ``pairs`` are (clean waveform, noisy waveform, class) triples aligned
    framewise.  For each threshold, every clean-feature cell whose fused
    noisy-map saliency (from ``saliency_model``) falls below the threshold
    is zeroed, and ``judge_model`` scores top-1 accuracy on the masked
    features.  At threshold 0 nothing is masked, so the accuracy equals
    the judge's unmasked accuracy exactly.
    """
    if not pairs:
        raise AnalysisError("deletion_test needs at least one pair")
    t = np.asarray(thresholds, dtype=np.float64)
    if len(t) < 2 or not (np.diff(t) > 0).all():
        raise AnalysisError("thresholds must be at least two strictly increasing values")

    clean_feats = []
    saliencies = []
    labels = []
    for clean, noisy, cls in pairs:
        cf = input_features(clean, dsp)
        nf = input_features(noisy, dsp)
        if cf.shape != nf.shape:
            raise AnalysisError(
                f"pair misaligned: clean features {cf.shape}, noisy features {nf.shape}"
            )
        clean_feats.append(cf)
        saliencies.append(fused_saliency(saliency_model, nf, cls).values)
        labels.append(int(cls))
    labels = np.array(labels)

    accuracies = np.zeros(len(t))
    masked_fractions = np.zeros(len(t))
    for ti, theta in enumerate(t):
        masked = []
        frac = 0.0
        for cf, sal in zip(clean_feats, saliencies):
            cells = deletion_mask(sal, theta)
            frac += cells.mean()
            masked.append(np.where(cells, 0.0, cf))
        logits = batched_logits(judge_model, masked)
        top1 = np.array([predict_topk(row, 1)[0] for row in logits])
        accuracies[ti] = float((top1 == labels).mean())
        masked_fractions[ti] = frac / len(pairs)
    return DeletionCurve(t, masked_fractions, accuracies, curve_auc(t, accuracies))
