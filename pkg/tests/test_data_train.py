"""Corpus generation, training loops, admission gate, checkpoint format."""

import numpy as np
import pytest

from latentadv.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from latentadv.data import (
    CHECKER_AMPLITUDE,
    gen_dataset,
    render_image,
    sample_seed,
    split_arrays,
    manifest_records,
)
from latentadv.diffusion import make_schedule
from latentadv.models import ClassifierNet, Codec, EmbeddingTable, ScoreNet
from latentadv.training import (
    TrainConfig,
    TrainingDiverged,
    classifier_accuracy,
    codec_mse,
    train_classifier,
    train_codec,
    train_score_net,
)


def test_corpus_regenerates_bitwise():
    a = gen_dataset(20, seed=42)
    b = gen_dataset(20, seed=42)
    for sa, sb in zip(a, b):
        assert sa.seed == sb.seed and sa.label == sb.label and sa.split == sb.split
        assert sa.image.tobytes() == sb.image.tobytes()


def test_sample_regenerates_from_seed_alone():
    samples = gen_dataset(10, seed=7)
    for s in samples[::3]:
        again = render_image(s.seed, s.label)
        assert again.tobytes() == s.image.tobytes()


def test_corpus_split_fractions():
    samples = gen_dataset(100, seed=5)
    for label in (0, 1):
        per = [s for s in samples if s.label == label]
        counts = {sp: sum(1 for s in per if s.split == sp) for sp in ("train", "val", "test")}
        assert counts == {"train": 80, "val": 10, "test": 10}


def test_images_in_unit_range():
    images, _ = split_arrays(gen_dataset(30, seed=9), "train")
    assert images.min() >= 0.0 and images.max() <= 1.0


def test_fake_twin_mean_difference_half_amplitude():
    # The fingerprint adds +-amplitude/2 on one channel, so the mean
    # absolute difference over that channel is amplitude/2 before clamping.
    diffs = []
    for i in range(40):
        seed = sample_seed(123, 1, i)
        fake = render_image(seed, 1)
        twin = render_image(seed, 1, amplitude=0.0)
        diff = np.abs(fake - twin)
        channel = int(np.argmax(diff.sum(axis=(1, 2))))
        diffs.append(diff[channel].mean())
    assert abs(np.mean(diffs) - CHECKER_AMPLITUDE / 2.0) < 0.02


def test_zero_amplitude_classifier_is_chance():
    # With the fingerprint off, real and fake are identically distributed
    # and held-out accuracy collapses to coin flipping.
    train = gen_dataset(500, seed=31, amplitude=0.0)
    evaluation = gen_dataset(1000, seed=77, amplitude=0.0)
    net = ClassifierNet(64, seed=3)
    train_classifier(net, train, TrainConfig(lr=1e-2, epochs=10, seed=4))
    images = np.stack([s.image for s in evaluation])
    labels = np.array([s.label for s in evaluation])
    acc = float(np.mean(net.predicted_label(images) == labels))
    assert abs(acc - 0.5) <= 0.05


def test_manifest_records_fields():
    samples = gen_dataset(5, seed=1)
    recs = manifest_records(samples)
    assert len(recs) == 10
    assert set(recs[0]) == {"seed", "label", "split"}


# --- training loops ---------------------------------------------------------


@pytest.fixture(scope="module")
def small_corpus():
    return gen_dataset(100, seed=2024)


def test_train_codec_zero_epochs_is_noop(small_corpus):
    codec = Codec("linear", 16, seed=5)
    before = {k: v.copy() for k, v in codec.params.items()}
    train_codec(codec, small_corpus, TrainConfig(epochs=0, seed=1))
    for k in before:
        assert np.array_equal(codec.params[k], before[k])


def test_train_codec_identity_is_noop(small_corpus):
    codec = Codec("identity")
    assert train_codec(codec, small_corpus, TrainConfig(epochs=5, seed=1)) == []


def test_trained_codec_heldout_mse(small_corpus):
    codec = Codec("linear", 64, seed=5)
    train_codec(codec, small_corpus, TrainConfig(lr=1e-2, epochs=30, seed=1))
    assert codec_mse(codec, small_corpus) < 0.01


def test_trained_codec_latent_standardization(small_corpus):
    codec = Codec("linear", 64, seed=5)
    train_codec(codec, small_corpus, TrainConfig(lr=1e-2, epochs=30, seed=1))
    images, _ = split_arrays(small_corpus, "train")
    latents = codec.encode(images).data
    var = latents.var(axis=0)
    assert np.all(var >= 0.9) and np.all(var <= 1.1)


def test_train_score_net_zero_epochs_is_noop(small_corpus):
    codec = Codec("identity")
    net = ScoreNet(768, seed=2)
    table = EmbeddingTable(seed=3)
    before = {k: v.copy() for k, v in net.params.items()}
    train_score_net(net, codec, small_corpus, make_schedule(), table, TrainConfig(epochs=0))
    for k in before:
        assert np.array_equal(net.params[k], before[k])


def test_train_classifier_zero_epochs_is_noop(small_corpus):
    net = ClassifierNet(32, seed=2)
    before = {k: v.copy() for k, v in net.params.items()}
    train_classifier(net, small_corpus, TrainConfig(epochs=0))
    for k in before:
        assert np.array_equal(net.params[k], before[k])


def test_classifier_seed_diversity(small_corpus):
    nets = []
    for seed in (1, 2):
        net = ClassifierNet(64, seed=10)
        train_classifier(net, small_corpus, TrainConfig(lr=1e-2, epochs=5, seed=seed))
        nets.append(net)
    dist = np.linalg.norm(nets[0].params["w1"] - nets[1].params["w1"])
    assert dist > 1e-3


def test_training_determinism_bitwise(small_corpus):
    outs = []
    for _ in range(2):
        net = ClassifierNet(32, seed=9)
        train_classifier(net, small_corpus, TrainConfig(lr=1e-2, epochs=3, seed=5))
        outs.append({k: v.copy() for k, v in net.params.items()})
    for k in outs[0]:
        assert outs[0][k].tobytes() == outs[1][k].tobytes()


def test_training_divergence_aborts_with_context(small_corpus):
    net = ClassifierNet(32, seed=2)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrainingDiverged, match="epoch"):
            train_classifier(net, small_corpus, TrainConfig(lr=1e200, epochs=3, seed=1))


# --- default-scale quality gates (session fixture) ---------------------------


def test_default_run_classifier_accuracies(default_run):
    for acc in default_run.admission["classifier_accuracy"]:
        assert acc >= 0.95
    assert default_run.admission["transfer_accuracy"] >= 0.95


def test_default_run_codec_quality(default_run):
    assert default_run.admission["codec_test_mse"] < 0.01


def test_default_run_reconstruction_linf(default_run):
    assert default_run.admission["recon_image_linf"] < 5e-2
    assert default_run.admission["passed"] is True


def test_default_run_score_training_curve(default_run):
    # Retrain briefly at the default settings to capture the loss curve.
    codec, table = default_run.codec, EmbeddingTable(seed=13)
    net = ScoreNet(codec.latent_dim, seed=12)
    history = train_score_net(
        net, codec, default_run.samples, default_run.schedule, table,
        TrainConfig(lr=1e-2, epochs=15, seed=2),
    )
    assert history[-1] < 0.9 * history[0]
    for earlier, later in zip(history, history[1:]):
        assert later <= earlier * 1.05


def test_default_run_embedding_rows_separate(default_run):
    rows = default_run.table.params["rows"]
    assert np.linalg.norm(rows[1] - rows[2]) > 1e-3


# --- checkpoint container ----------------------------------------------------


def test_checkpoint_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(8)
    tensors = {
        "a": rng.normal(0, 1, (3, 4)),
        "b/c": rng.normal(0, 1, 7),
        "scalar": np.array(3.5),
    }
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, tensors)
    loaded = load_checkpoint(path)
    assert set(loaded) == set(tensors)
    for k in tensors:
        assert loaded[k].shape == np.asarray(tensors[k]).shape
        assert loaded[k].tobytes() == np.asarray(tensors[k], dtype="<f8").tobytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    save_checkpoint(path, {"a": np.ones(2)})
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path):
    path = tmp_path / "v.ckpt"
    save_checkpoint(path, {"a": np.ones(2)})
    blob = bytearray(path.read_bytes())
    blob[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version mismatch"):
        load_checkpoint(path)


def test_checkpoint_truncated_payload(tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, {"a": np.ones(4)})
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(CheckpointError, match="truncated payload"):
        load_checkpoint(path)


def test_checkpoint_overlapping_ranges(tmp_path):
    import json
    import struct

    path = tmp_path / "o.ckpt"
    header = json.dumps(
        [
            {"name": "a", "shape": [2], "offset": 0, "length": 16},
            {"name": "b", "shape": [2], "offset": 8, "length": 16},
        ]
    ).encode()
    payload = np.arange(3.0).tobytes()
    path.write_bytes(b"LADV" + struct.pack("<I", 1) + struct.pack("<Q", len(header)) + header + payload)
    with pytest.raises(CheckpointError, match="overlapping"):
        load_checkpoint(path)


def test_checkpoint_offset_past_eof(tmp_path):
    import json
    import struct

    path = tmp_path / "p.ckpt"
    header = json.dumps([{"name": "a", "shape": [4], "offset": 64, "length": 32}]).encode()
    path.write_bytes(b"LADV" + struct.pack("<I", 1) + struct.pack("<Q", len(header)) + header + b"\0" * 16)
    with pytest.raises(CheckpointError, match="truncated payload"):
        load_checkpoint(path)
