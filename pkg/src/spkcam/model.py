"""SE-ResNet-lite speaker classifier with per-stage activation taps and
bit-exact checkpoint persistence.

Architecture (input is a batch of log-mel matrices shaped (N, 1, time, mel)):

- stem: 3x3 conv, stride (2, 1), pad 1 -> BN -> ReLU (halves time only)
- 4 stages; each stage's first block downsamples time and mel by 2 via a
  strided 3x3 conv and a 1x1-conv + BN projection on the skip path
- block: conv3x3/BN/ReLU -> conv3x3/BN -> SE gate -> add skip -> ReLU
- SE gate: GAP -> FC (C -> C/r) -> ReLU -> FC (C/r -> C) -> sigmoid,
  applied as a per-channel scale
- head: GAP -> linear -> unit-length embedding -> linear classifier

The tap of stage i is the post-activation output of its final block, so tap
resolutions are strictly decreasing; with the default 40-mel, 2-second input
(198 frames) the taps are (50, 20), (25, 10), (13, 5), (7, 3).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dsp import FbankMatrix
from .tensor import Tape, Tensor

__all__ = [
    "ModelConfig",
    "SpeakerNet",
    "ForwardResult",
    "predict_topk",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "VersionMismatchError",
    "TruncatedCheckpointError",
    "ChecksumError",
    "ConfigMismatchError",
]

CHECKPOINT_MAGIC = b"SPKCKPT1"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """A checkpoint file cannot be used."""


class VersionMismatchError(CheckpointError):
    """The file declares an unsupported format version."""


class TruncatedCheckpointError(CheckpointError):
    """The file ends before the declared content does."""


class ChecksumError(CheckpointError):
    """The payload does not match its CRC32."""


class ConfigMismatchError(CheckpointError):
    """The stored model config differs from what the caller expects."""


@dataclass(frozen=True)
class ModelConfig:
    n_speakers: int
    n_mels: int = 40
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: tuple = (1, 1, 1, 1)
    embedding_dim: int = 64
    se_reduction: int = 8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        if self.n_speakers < 2:
            raise ValueError("n_speakers must be >= 2")
        if self.n_mels < 1 or self.embedding_dim < 1 or self.se_reduction < 1:
            raise ValueError("n_mels, embedding_dim, se_reduction must be positive")
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ValueError("stage_channels and blocks_per_stage must have 4 entries")
        if any(c < 1 for c in self.stage_channels) or any(b < 1 for b in self.blocks_per_stage):
            raise ValueError("stage_channels and blocks_per_stage must be positive")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")

    def canonical_text(self) -> str:
        """Sorted key=value lines; the checkpoint's config block."""
        items = {
            "blocks_per_stage": ",".join(str(b) for b in self.blocks_per_stage),
            "embedding_dim": str(self.embedding_dim),
            "n_mels": str(self.n_mels),
            "n_speakers": str(self.n_speakers),
            "se_reduction": str(self.se_reduction),
            "seed": str(self.seed),
            "stage_channels": ",".join(str(c) for c in self.stage_channels),
        }
        return "".join(f"{k}={items[k]}\n" for k in sorted(items))

    @classmethod
    def from_canonical_text(cls, text: str) -> "ModelConfig":
        fields = {}
        for line in text.splitlines():
            if not line:
                continue
            key, _, value = line.partition("=")
            fields[key] = value
        try:
            return cls(
                n_speakers=int(fields["n_speakers"]),
                n_mels=int(fields["n_mels"]),
                stage_channels=tuple(int(c) for c in fields["stage_channels"].split(",")),
                blocks_per_stage=tuple(int(b) for b in fields["blocks_per_stage"].split(",")),
                embedding_dim=int(fields["embedding_dim"]),
                se_reduction=int(fields["se_reduction"]),
                seed=int(fields["seed"]),
            )
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"malformed config block: {e}") from e


@dataclass
class ForwardResult:
    embedding: Tensor  # (N, embedding_dim)
    logits: Tensor  # (N, n_speakers)
    taps: list  # 4 stage activation tensors, coarsest last


def _he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class SpeakerNet:
    """Parameter container plus the taped forward pass."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict = {}
        self.buffers: dict = {}
        rng = np.random.default_rng(config.seed)
        c_in = 1
        c_stem = config.stage_channels[0]
        self._add_conv(rng, "stem.conv", c_in, c_stem, 3)
        self._add_bn("stem.bn", c_stem)
        prev = c_stem
        for s, (channels, blocks) in enumerate(
            zip(config.stage_channels, config.blocks_per_stage), start=1
        ):
            for b in range(1, blocks + 1):
                base = f"stage{s}.block{b}"
                cin = prev if b == 1 else channels
                self._add_conv(rng, f"{base}.conv1", cin, channels, 3)
                self._add_bn(f"{base}.bn1", channels)
                self._add_conv(rng, f"{base}.conv2", channels, channels, 3)
                self._add_bn(f"{base}.bn2", channels)
                hidden = max(channels // config.se_reduction, 1)
                self._add_linear(rng, f"{base}.se.fc1", channels, hidden)
                self._add_linear(rng, f"{base}.se.fc2", hidden, channels)
                if b == 1:
                    self._add_conv(rng, f"{base}.proj", cin, channels, 1)
                    self._add_bn(f"{base}.projbn", channels)
            prev = channels
        self._add_linear(rng, "embed", prev, config.embedding_dim)
        # zero-init classifier: logits start uniform, so early class-row
        # updates all push toward their speaker's embedding cluster instead
        # of fighting random logits
        self._add_linear(rng, "head", config.embedding_dim, config.n_speakers)
        self.params["head.weight"].data[:] = 0.0

    # -- parameter registry -------------------------------------------------

    def _add_conv(self, rng, name, c_in, c_out, k):
        fan_in = c_in * k * k
        w = _he_uniform(rng, (c_out, c_in, k, k), fan_in)
        self.params[f"{name}.weight"] = Tensor(w, requires_grad=True)

    def _add_bn(self, name, channels):
        self.params[f"{name}.gamma"] = Tensor(np.ones(channels), requires_grad=True)
        self.params[f"{name}.beta"] = Tensor(np.zeros(channels), requires_grad=True)
        self.buffers[f"{name}.mean"] = np.zeros(channels)
        self.buffers[f"{name}.var"] = np.ones(channels)

    def _add_linear(self, rng, name, d_in, d_out):
        w = _he_uniform(rng, (d_out, d_in), d_in)
        self.params[f"{name}.weight"] = Tensor(w, requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(d_out), requires_grad=True)

    # -- forward ------------------------------------------------------------

    def _bn(self, name, x, training, tape):
        return T.batchnorm2d(
            x,
            self.params[f"{name}.gamma"],
            self.params[f"{name}.beta"],
            self.buffers[f"{name}.mean"],
            self.buffers[f"{name}.var"],
            training=training,
            tape=tape,
        )

    def _se_gate(self, base, x, tape):
        pooled = T.global_avg_pool(x, tape=tape)
        h = T.linear(
            pooled,
            self.params[f"{base}.se.fc1.weight"],
            self.params[f"{base}.se.fc1.bias"],
            tape=tape,
        )
        h = T.relu(h, tape=tape)
        h = T.linear(
            h,
            self.params[f"{base}.se.fc2.weight"],
            self.params[f"{base}.se.fc2.bias"],
            tape=tape,
        )
        gate = T.sigmoid(h, tape=tape)
        return T.channel_scale(x, gate, tape=tape)

    def forward_batch(self, x: np.ndarray, training: bool = False, tape: Tape = None) -> ForwardResult:
        """Run (N, 1, time, mel) feature batches through the network."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != 1:
            raise T.ShapeMismatchError(
                f"expected features shaped (N, 1, time, mel), got {x.shape}"
            )
        if x.shape[3] != self.config.n_mels:
            raise T.ShapeMismatchError(
                f"features have {x.shape[3]} mel bins, model expects {self.config.n_mels}"
            )
        h = Tensor(x)
        h = T.conv2d(h, self.params["stem.conv.weight"], stride=(2, 1), padding=1, tape=tape)
        h = self._bn("stem.bn", h, training, tape)
        h = T.relu(h, tape=tape)
        taps = []
        for s, blocks in enumerate(self.config.blocks_per_stage, start=1):
            for b in range(1, blocks + 1):
                base = f"stage{s}.block{b}"
                stride = (2, 2) if b == 1 else (1, 1)
                y = T.conv2d(h, self.params[f"{base}.conv1.weight"], stride=stride, padding=1, tape=tape)
                y = self._bn(f"{base}.bn1", y, training, tape)
                y = T.relu(y, tape=tape)
                y = T.conv2d(y, self.params[f"{base}.conv2.weight"], stride=1, padding=1, tape=tape)
                y = self._bn(f"{base}.bn2", y, training, tape)
                y = self._se_gate(base, y, tape)
                if b == 1:
                    skip = T.conv2d(h, self.params[f"{base}.proj.weight"], stride=stride, padding=0, tape=tape)
                    skip = self._bn(f"{base}.projbn", skip, training, tape)
                else:
                    skip = h
                h = T.relu(T.add(y, skip, tape=tape), tape=tape)
            taps.append(h)
        pooled = T.global_avg_pool(h, tape=tape)
        raw = T.linear(pooled, self.params["embed.weight"], self.params["embed.bias"], tape=tape)
        # unit-length embedding: matching clean/augmented embeddings can only
        # align directions, never shrink magnitudes to zero
        embedding = T.l2_normalize_rows(raw, tape=tape)
        logits = T.linear(embedding, self.params["head.weight"], self.params["head.bias"], tape=tape)
        return ForwardResult(embedding=embedding, logits=logits, taps=taps)

    def forward(self, features: FbankMatrix, training: bool = False, tape: Tape = None) -> ForwardResult:
        """Single-utterance forward; features are one FbankMatrix."""
        x = features.values[np.newaxis, np.newaxis, :, :]
        return self.forward_batch(x, training=training, tape=tape)

    # -- state --------------------------------------------------------------

    def state_arrays(self) -> dict:
        """All persistent arrays by name (parameters plus BN statistics)."""
        out = {f"p/{k}": v.data for k, v in self.params.items()}
        out.update({f"b/{k}": v for k, v in self.buffers.items()})
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        expected = set(self.state_arrays())
        got = set(arrays)
        if expected != got:
            missing = sorted(expected - got)[:3]
            extra = sorted(got - expected)[:3]
            raise CheckpointError(
                f"state mismatch: missing {missing}, unexpected {extra}"
            )
        for key, value in arrays.items():
            kind, name = key.split("/", 1)
            target = self.params[name].data if kind == "p" else self.buffers[name]
            if target.shape != value.shape:
                raise CheckpointError(
                    f"section {key}: shape {value.shape} != expected {target.shape}"
                )
            target[...] = value


def predict_topk(logits: np.ndarray, k: int) -> np.ndarray:
    """Top-k speaker ids, descending score, ties broken by ascending id."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not 1 <= k <= len(logits):
        raise ValueError(f"k out of range: {k} not in [1, {len(logits)}]")
    order = np.lexsort((np.arange(len(logits)), -logits))
    return order[:k]


# ---------------------------------------------------------------------------
# checkpoint format
#
# offset  size  field
# 0       8     magic "SPKCKPT1"
# 8       4     format version, u32 LE
# 12      4     config text length, u32 LE
# 16      n     config text, UTF-8 sorted key=value lines
# ...     4     metadata text length, u32 LE
# ...     m     metadata text, UTF-8 sorted key=value lines
# ...     4     section count, u32 LE
# per section:
#         2     name length, u16 LE
#         k     name, UTF-8
#         1     ndim, u8
#         4*d   dims, u32 LE each
#         8*n   row-major float64 LE payload
# trailer 4     CRC32 (zlib) over every preceding byte, u32 LE


def _pack_u32(v):
    return int(v).to_bytes(4, "little")


def save_checkpoint(model: SpeakerNet, path, metadata: dict = None) -> None:
    """Serialize parameters, BN statistics, config, and metadata."""
    meta = metadata or {}
    meta_text = "".join(f"{k}={meta[k]}\n" for k in sorted(meta))
    for key, value in meta.items():
        if "=" in str(key) or "\n" in str(key) or "\n" in str(value):
            raise ValueError(f"metadata entry {key!r} contains '=' or newline")
    arrays = model.state_arrays()
    parts = [CHECKPOINT_MAGIC, _pack_u32(CHECKPOINT_VERSION)]
    config_bytes = model.config.canonical_text().encode()
    parts += [_pack_u32(len(config_bytes)), config_bytes]
    meta_bytes = meta_text.encode()
    parts += [_pack_u32(len(meta_bytes)), meta_bytes]
    parts.append(_pack_u32(len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        name_bytes = name.encode()
        parts.append(len(name_bytes).to_bytes(2, "little"))
        parts.append(name_bytes)
        parts.append(bytes([arr.ndim]))
        for dim in arr.shape:
            parts.append(_pack_u32(dim))
        parts.append(arr.tobytes())
    blob = b"".join(parts)
    blob += _pack_u32(zlib.crc32(blob) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(blob)


class _Cursor:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise TruncatedCheckpointError(
                f"file ends at byte {len(self.blob)}, needed {self.pos + n}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return int.from_bytes(self.take(4), "little")

    def u16(self):
        return int.from_bytes(self.take(2), "little")


def _parse_kv_text(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if line:
            key, _, value = line.partition("=")
            out[key] = value
    return out


def load_checkpoint(path, expected_config: ModelConfig = None):
    """Read a checkpoint; returns (SpeakerNet, metadata dict).

    Raises VersionMismatchError, TruncatedCheckpointError, ChecksumError, or
    ConfigMismatchError (when expected_config is given and differs).
    """
    with open(path, "rb") as f:
        blob = f.read()
    cur = _Cursor(blob)
    magic = cur.take(8)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}: not a speaker-net checkpoint")
    version = cur.u32()
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"format version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )
    config_text = cur.take(cur.u32()).decode()
    meta_text = cur.take(cur.u32()).decode()
    n_sections = cur.u32()
    arrays = {}
    for _ in range(n_sections):
        name = cur.take(cur.u16()).decode()
        ndim = cur.take(1)[0]
        shape = tuple(cur.u32() for _ in range(ndim))
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        payload = cur.take(8 * count)
        arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    stored_crc = cur.u32()
    actual_crc = zlib.crc32(blob[: cur.pos - 4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ChecksumError(
            f"CRC32 mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )
    if cur.pos != len(blob):
        raise CheckpointError(f"{len(blob) - cur.pos} trailing bytes after checksum")
    config = ModelConfig.from_canonical_text(config_text)
    if expected_config is not None and config != expected_config:
        stored = _parse_kv_text(config_text)
        wanted = _parse_kv_text(expected_config.canonical_text())
        diffs = [
            f"{k}={stored.get(k, '?')} (file) vs {wanted.get(k, '?')} (expected)"
            for k in sorted(set(stored) | set(wanted))
            if stored.get(k) != wanted.get(k)
        ]
        raise ConfigMismatchError("checkpoint config mismatch: " + "; ".join(diffs))
    model = SpeakerNet(config)
    model.load_state_arrays(arrays)
    return model, _parse_kv_text(meta_text)
