"""Classifier tests: forward contracts, top-k ranking, checkpoint integrity."""

import numpy as np
import pytest

from spkcam.dsp import FbankMatrix
from spkcam.model import (
    CHECKPOINT_VERSION,
    CheckpointError,
    ChecksumError,
    ConfigMismatchError,
    ModelConfig,
    SpeakerNet,
    TruncatedCheckpointError,
    VersionMismatchError,
    load_checkpoint,
    predict_topk,
    save_checkpoint,
)
from spkcam.tensor import ShapeMismatchError, Tape, softmax_cross_entropy

DEFAULT = ModelConfig(n_speakers=16, seed=3)

TINY = ModelConfig(
    n_speakers=3,
    n_mels=8,
    stage_channels=(4, 4, 8, 8),
    blocks_per_stage=(1, 1, 1, 1),
    embedding_dim=8,
    se_reduction=4,
    seed=11,
)


def features(rng, n_frames=198, n_mels=40):
    return rng.standard_normal((1, 1, n_frames, n_mels))


# ---------------------------------------------------------------------------
# config


def test_config_rejects_single_speaker():
    with pytest.raises(ValueError):
        ModelConfig(n_speakers=1)


def test_config_rejects_wrong_stage_count():
    with pytest.raises(ValueError):
        ModelConfig(n_speakers=4, stage_channels=(16, 32, 64))


def test_config_canonical_text_round_trip():
    text = TINY.canonical_text()
    assert ModelConfig.from_canonical_text(text) == TINY
    assert text.splitlines() == sorted(text.splitlines())


# ---------------------------------------------------------------------------
# forward


def test_forward_shapes_and_tap_schedule():
    net = SpeakerNet(DEFAULT)
    out = net.forward_batch(features(np.random.default_rng(0)))
    assert out.logits.data.shape == (1, 16)
    assert out.embedding.data.shape == (1, 64)
    shapes = [tap.data.shape for tap in out.taps]
    assert shapes == [
        (1, 16, 50, 20),
        (1, 32, 25, 10),
        (1, 64, 13, 5),
        (1, 128, 7, 3),
    ]
    for earlier, later in zip(shapes, shapes[1:]):
        assert later[2] < earlier[2] and later[3] < earlier[3]


def test_forward_eval_deterministic():
    net = SpeakerNet(DEFAULT)
    x = features(np.random.default_rng(1))
    a = net.forward_batch(x).logits.data
    b = net.forward_batch(x).logits.data
    assert np.array_equal(a, b)


def test_identical_batch_rows_identical_logits():
    net = SpeakerNet(TINY)
    row = np.random.default_rng(2).standard_normal((1, 16, 8))
    x = np.stack([row, row])
    logits = net.forward_batch(x).logits.data
    np.testing.assert_allclose(logits[0], logits[1], atol=1e-12)


def test_zeroed_head_gives_uniform_logits():
    net = SpeakerNet(TINY)
    net.params["head.weight"].data[...] = 0.0
    net.params["head.bias"].data[...] = 0.0
    logits = net.forward_batch(features(np.random.default_rng(3), 16, 8)).logits.data
    np.testing.assert_allclose(logits, logits[0, 0], atol=0.0)


def test_softmax_of_logits_normalizes():
    net = SpeakerNet(DEFAULT)
    logits = net.forward_batch(features(np.random.default_rng(4))).logits.data[0]
    p = np.exp(logits - logits.max())
    p /= p.sum()
    assert abs(p.sum() - 1.0) < 1e-9


def test_forward_accepts_fbank_matrix():
    net = SpeakerNet(TINY)
    fb = FbankMatrix(
        values=np.random.default_rng(5).standard_normal((20, 8)),
        sample_rate=16000,
        frame_length=400,
        hop=160,
        window="hann",
        n_samples=3440,
        floor_db=-80.0,
    )
    out = net.forward(fb)
    assert out.logits.data.shape == (1, 3)


def test_forward_rejects_wrong_mel_count():
    net = SpeakerNet(DEFAULT)
    with pytest.raises(ShapeMismatchError, match="mel"):
        net.forward_batch(np.zeros((1, 1, 198, 41)))


def test_training_mode_updates_running_stats():
    net = SpeakerNet(TINY)
    before = net.buffers["stem.bn.mean"].copy()
    net.forward_batch(features(np.random.default_rng(6), 16, 8), training=True)
    assert not np.array_equal(before, net.buffers["stem.bn.mean"])


def test_full_model_gradient_matches_finite_differences():
    net = SpeakerNet(TINY)
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 1, 16, 8))
    labels = np.array([0, 2])

    def loss_value():
        out = net.forward_batch(x, training=True)
        return float(
            softmax_cross_entropy(out.logits, labels).data
        )

    tape = Tape()
    out = net.forward_batch(x, training=True, tape=tape)
    loss = softmax_cross_entropy(out.logits, labels, tape=tape)
    probe_names = [
        "stem.conv.weight",
        "stage1.block1.bn1.gamma",
        "stage2.block1.conv1.weight",
        "stage3.block1.projbn.beta",
        "stage4.block1.se.fc1.weight",
        "embed.weight",
        "head.bias",
    ]
    grads = tape.backward(loss, wrt=[net.params[n].id for n in probe_names])
    h = 1e-4
    for name in probe_names:
        param = net.params[name]
        grad = grads[param.id]
        flat = param.data.reshape(-1)
        for idx in rng.choice(flat.size, size=min(2, flat.size), replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            up = loss_value()
            flat[idx] = orig - h
            down = loss_value()
            flat[idx] = orig
            fd = (up - down) / (2 * h)
            got = grad.reshape(-1)[idx]
            denom = max(abs(fd), abs(got), 1e-4)
            assert abs(fd - got) / denom < 1e-3, f"{name}[{idx}]: fd={fd} got={got}"


# ---------------------------------------------------------------------------
# predict_topk


def test_topk_basic_ranking():
    assert list(predict_topk(np.array([0.1, 0.9, 0.5]), 2)) == [1, 2]


def test_topk_tie_breaks_by_ascending_id():
    assert list(predict_topk(np.zeros(5), 3)) == [0, 1, 2]


def test_topk_nesting():
    rng = np.random.default_rng(8)
    logits = rng.standard_normal(16)
    top1 = set(predict_topk(logits, 1))
    top5 = set(predict_topk(logits, 5))
    top10 = set(predict_topk(logits, 10))
    assert top1 <= top5 <= top10


def test_topk_k_out_of_range():
    with pytest.raises(ValueError, match="k out of range"):
        predict_topk(np.zeros(4), 0)
    with pytest.raises(ValueError, match="k out of range"):
        predict_topk(np.zeros(4), 5)


# ---------------------------------------------------------------------------
# checkpoints


def trained_like_net():
    net = SpeakerNet(TINY)
    # make BN statistics non-trivial so buffer persistence is exercised
    net.forward_batch(
        np.random.default_rng(9).standard_normal((2, 1, 16, 8)), training=True
    )
    return net


def test_checkpoint_round_trip_bit_exact(tmp_path):
    net = trained_like_net()
    x = np.random.default_rng(10).standard_normal((1, 1, 16, 8))
    path = tmp_path / "m.ckpt"
    save_checkpoint(net, path, metadata={"epochs": 30, "da_mode": "vanilla", "interference": "speech"})
    loaded, meta = load_checkpoint(path)
    assert meta == {"epochs": "30", "da_mode": "vanilla", "interference": "speech"}
    a = net.forward_batch(x).logits.data
    b = loaded.forward_batch(x).logits.data
    assert np.array_equal(a, b)
    for name in net.buffers:
        assert np.array_equal(net.buffers[name], loaded.buffers[name])


def test_checkpoint_resave_is_byte_identical(tmp_path):
    net = trained_like_net()
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    save_checkpoint(net, p1, metadata={"epochs": 1})
    loaded, meta = load_checkpoint(p1)
    save_checkpoint(loaded, p2, metadata=meta)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_corrupt_payload_byte(tmp_path):
    net = trained_like_net()
    path = tmp_path / "m.ckpt"
    save_checkpoint(net, path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ChecksumError, match="CRC32"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    net = trained_like_net()
    path = tmp_path / "m.ckpt"
    save_checkpoint(net, path)
    blob = path.read_bytes()
    for cut in (4, 11, 40, len(blob) - 3):
        path.write_bytes(blob[:cut])
        with pytest.raises(TruncatedCheckpointError):
            load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path):
    net = trained_like_net()
    path = tmp_path / "m.ckpt"
    save_checkpoint(net, path)
    blob = bytearray(path.read_bytes())
    blob[8] = CHECKPOINT_VERSION + 1
    path.write_bytes(bytes(blob))
    with pytest.raises(VersionMismatchError, match="version"):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_config_mismatch_names_field(tmp_path):
    net = trained_like_net()
    path = tmp_path / "m.ckpt"
    save_checkpoint(net, path)
    wanted = ModelConfig(
        n_speakers=3,
        n_mels=10,
        stage_channels=(4, 4, 8, 8),
        blocks_per_stage=(1, 1, 1, 1),
        embedding_dim=8,
        se_reduction=4,
        seed=11,
    )
    with pytest.raises(ConfigMismatchError, match="n_mels"):
        load_checkpoint(path, expected_config=wanted)


def test_checkpoint_matching_expected_config_loads(tmp_path):
    net = trained_like_net()
    path = tmp_path / "m.ckpt"
    save_checkpoint(net, path)
    loaded, _ = load_checkpoint(path, expected_config=TINY)
    assert loaded.config == TINY
