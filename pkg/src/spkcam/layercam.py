"""Class-discriminative saliency maps over mel spectrogram inputs.

For one utterance and one target class c the map at a tapped stage is

    w_kij = relu(d y_c / d A_kij)          (elementwise gradient gate)
    S_ij  = relu(sum_k w_kij * A_kij)      (gated channel sum)

where A is the post-activation output of the stage and y_c is the
pre-softmax logit of class c.  Each stage map is bilinearly upsampled to
the input feature shape and rescaled to [0, 1]; the fused map is the
elementwise mean of the four rescaled stage maps.
"""

from dataclasses import dataclass
import re

import numpy as np

from . import tensor as T
from .tensor import Tape

__all__ = [
    "SaliencyError",
    "SaliencyMap",
    "SOURCES",
    "layer_saliency",
    "normalize01",
    "upsample_to",
    "saliency_bundle",
    "fused_saliency",
    "write_grid",
    "read_grid",
    "write_pgm",
]

SOURCES = ("stage1", "stage2", "stage3", "stage4", "fused")

_GRID_MAGIC = "SALGRID1"


class SaliencyError(ValueError):
    pass


@dataclass(frozen=True)
class SaliencyMap:
    """A (time, mel) relevance grid with every value in [0, 1]."""

    values: np.ndarray
    target_class: int
    source: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise SaliencyError(f"saliency values must be 2-D, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise SaliencyError("saliency values contain non-finite entries")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise SaliencyError(
                f"saliency values outside [0, 1]: min={v.min()!r} max={v.max()!r}"
            )
        if self.source not in SOURCES:
            raise SaliencyError(f"unknown saliency source {self.source!r}")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "target_class", int(self.target_class))

    @property
    def shape(self):
        return self.values.shape


def _as_chw(a: np.ndarray, what: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 4 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 3:
        raise SaliencyError(f"{what} must be (channels, h, w), got shape {a.shape}")
    return a


def layer_saliency(activation: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    """Raw (unscaled) stage map from an activation and its logit gradient.

    Both arguments are (channels, h, w); a leading batch axis of size one
    is accepted and dropped.  Returns the (h, w) map
    relu(sum_k relu(gradient_k) * activation_k), which is nonnegative by
    construction.
    """
    act = _as_chw(activation, "activation")
    grad = _as_chw(gradient, "gradient")
    if act.shape != grad.shape:
        raise SaliencyError(
            f"activation shape {act.shape} does not match gradient shape {grad.shape}"
        )
    weighted = np.maximum(grad, 0.0) * act
    return np.maximum(weighted.sum(axis=0), 0.0)


def normalize01(values: np.ndarray) -> np.ndarray:
    """Affine rescale to [0, 1]; a constant map becomes all zeros."""
    v = np.asarray(values, dtype=np.float64)
    if not np.isfinite(v).all():
        raise SaliencyError("cannot normalize non-finite values")
    lo = float(v.min())
    hi = float(v.max())
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def upsample_to(values: np.ndarray, shape) -> np.ndarray:
    """Bilinear upsample of a 2-D map to ``shape`` (corners aligned).

    Sample positions along an axis of source length S and target length
    T are linspace(0, S - 1, T), so corner values are preserved and a
    same-shape request is the identity.  Each axis of ``shape`` must be
    at least as large as the source axis.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise SaliencyError(f"upsample expects a 2-D map, got shape {v.shape}")
    t0, t1 = (int(shape[0]), int(shape[1]))
    s0, s1 = v.shape
    if t0 < s0 or t1 < s1:
        raise SaliencyError(
            f"cannot downsample: source shape {v.shape} exceeds target ({t0}, {t1})"
        )
    if (t0, t1) == (s0, s1):
        return v.copy()
    r = np.linspace(0.0, s0 - 1.0, t0)
    c = np.linspace(0.0, s1 - 1.0, t1)
    r0 = np.floor(r).astype(int)
    r1 = np.minimum(r0 + 1, s0 - 1)
    wr = (r - r0)[:, np.newaxis]
    rows = v[r0] * (1.0 - wr) + v[r1] * wr
    c0 = np.floor(c).astype(int)
    c1 = np.minimum(c0 + 1, s1 - 1)
    wc = c - c0
    return rows[:, c0] * (1.0 - wc) + rows[:, c1] * wc


def saliency_bundle(model, features: np.ndarray, target_class: int) -> dict:
    """All five maps for one utterance: stage1..stage4 plus fused.

    ``features`` is the model-ready (time, mel) array.  One forward and
    one backward pass supply activations and gradients for every tapped
    stage; the target is always the requested class's pre-softmax logit.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise SaliencyError(f"features must be (time, mel), got shape {features.shape}")
    target_class = int(target_class)
    if not 0 <= target_class < model.config.n_speakers:
        raise SaliencyError(
            f"target class {target_class} out of range for {model.config.n_speakers} speakers"
        )
    tape = Tape()
    out = model.forward_batch(features[np.newaxis, np.newaxis], training=False, tape=tape)
    logit = T.select(out.logits, (0, target_class), tape)
    grads = tape.backward(logit, wrt=[tap.id for tap in out.taps])

    maps = {}
    rescaled = []
    for stage, tap in enumerate(out.taps, start=1):
        raw = layer_saliency(tap.data[0], grads[tap.id][0])
        norm = normalize01(upsample_to(raw, features.shape))
        maps[f"stage{stage}"] = SaliencyMap(norm, target_class, f"stage{stage}")
        rescaled.append(norm)
    fused = np.mean(np.stack(rescaled), axis=0)
    maps["fused"] = SaliencyMap(fused, target_class, "fused")
    return maps


def fused_saliency(model, features: np.ndarray, target_class: int) -> SaliencyMap:
    """Mean of the four rescaled stage maps for one utterance."""
    return saliency_bundle(model, features, target_class)["fused"]


# ---------------------------------------------------------------------------
# export formats


def write_grid(map_: SaliencyMap, path) -> None:
    """Binary grid file: one ASCII header line, then row-major float32.

    Header: ``SALGRID1 rows=<r> cols=<c> class=<k> source=<name>\\n``.
    The payload is rows*cols little-endian 32-bit floats.
    """
    r, c = map_.values.shape
    header = f"{_GRID_MAGIC} rows={r} cols={c} class={map_.target_class} source={map_.source}\n"
    payload = np.ascontiguousarray(map_.values, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload)


def read_grid(path) -> SaliencyMap:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").rstrip("\n")
        m = re.fullmatch(
            rf"{_GRID_MAGIC} rows=(\d+) cols=(\d+) class=(\d+) source=(\w+)", header
        )
        if m is None:
            raise SaliencyError(f"not a saliency grid file: bad header {header!r}")
        rows, cols, cls = int(m.group(1)), int(m.group(2)), int(m.group(3))
        source = m.group(4)
        payload = fh.read()
    expect = rows * cols * 4
    if len(payload) != expect:
        raise SaliencyError(
            f"grid payload has {len(payload)} bytes, expected {expect}"
        )
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(rows, cols)
    return SaliencyMap(values, cls, source)


def write_pgm(map_: SaliencyMap, path) -> None:
    """8-bit grayscale PGM; time runs left to right, mel bottom to top."""
    img = np.rint(map_.values.T[::-1] * 255.0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
