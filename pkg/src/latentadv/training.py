"""Momentum-SGD training loops and the pre-attack admission gate.

All loops are single-threaded with rng streams derived from the config
seed, so repeated runs produce bitwise-identical parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError
from .diffusion import NoiseSchedule, denoise_chain, invert_chain
from .models import PIXELS, Codec, EmbeddingTable, ScoreNet

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "train_codec",
    "train_score_net",
    "train_classifier",
    "classifier_accuracy",
    "reconstruction_linf",
    "codec_mse",
    "run_admission",
]

ACCURACY_ADMISSION = 0.95
RECON_LINF_ADMISSION = 5e-2


@dataclass
class TrainConfig:
    lr: float = 1e-2
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    optimizer: str = "momentum"  # "momentum" | "sgd"
    momentum: float = 0.9

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("hyperparameters must be positive (epochs may be 0)")
        if self.optimizer not in ("momentum", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss; carries epoch/step context."""


def _epoch_batches(n: int, batch_size: int, rng):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def _apply_update(module, leaves, velocity, cfg: TrainConfig):
    new = {}
    for name, leaf in leaves.items():
        g = leaf.grad if leaf.grad is not None else np.zeros(leaf.data.shape)
        if cfg.optimizer == "momentum":
            velocity[name] = cfg.momentum * velocity[name] + g
            step = velocity[name]
        else:
            step = g
        new[name] = leaf.data - cfg.lr * step
    module.set_params(new)


def _run_epochs(module_list, n, cfg: TrainConfig, batch_loss):
    """Shared loop: per epoch, shuffle, step, track the mean batch loss."""
    rng = np.random.default_rng(cfg.seed)
    velocities = [
        {k: np.zeros(v.shape) for k, v in m.params.items()} for m in module_list
    ]
    history = []
    for epoch in range(cfg.epochs):
        losses = []
        for step, idx in enumerate(_epoch_batches(n, cfg.batch_size, rng)):
            try:
                leaves = [m.param_leaves() for m in module_list]
                loss = batch_loss(idx, leaves, rng)
                loss.backward(np.asarray(1.0))
            except NonFiniteError as exc:
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, step {step}: {exc}"
                ) from exc
            for m, lv, vel in zip(module_list, leaves, velocities):
                _apply_update(m, lv, vel, cfg)
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
    return history


def train_codec(codec: Codec, samples, cfg: TrainConfig) -> list[float]:
    """Fit the linear autoencoder on the train split, then pin standardization.

    The identity variant is a no-op. Returns per-epoch mean MSE.
    """
    if codec.variant == "identity":
        return []
    images = np.stack([s.image for s in samples if s.split == "train"])
    flat = images.reshape(-1, PIXELS)
    flat.flags.writeable = False

    if cfg.epochs > 0:
        # Randomized range-finder init: one sketched pass over the training
        # matrix lands the encoder near the principal subspace, which plain
        # momentum SGD then refines. A small random init stalls on the
        # slow modes of the linear-autoencoder landscape.
        rng = np.random.default_rng(cfg.seed)
        sketch = rng.normal(0.0, 1.0, (flat.shape[0], codec.latent_dim))
        basis, _ = np.linalg.qr((flat - flat.mean(axis=0)).T @ sketch)
        codec.set_params({"enc_w": basis, "dec_w": basis.T.copy()})

    def batch_loss(idx, leaves, rng):
        (p,) = leaves
        x = ad.constant(np.ascontiguousarray(flat[idx]))
        code = ad.add(ad.matmul(x, p["enc_w"]), p["enc_b"])
        recon = ad.add(ad.matmul(code, p["dec_w"]), p["dec_b"])
        diff = ad.subtract(recon, x)
        return ad.reduce_mean(ad.multiply(diff, diff))

    history = _run_epochs([codec], flat.shape[0], cfg, batch_loss)

    if cfg.epochs > 0:
        # Isotropize the latent basis with a seeded orthogonal rotation
        # (reconstruction-invariant) before pinning standardization, so no
        # single image-space direction concentrates in one latent axis and
        # box-constrained latent perturbations have uniform leverage.
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
        rot, _ = np.linalg.qr(rng.normal(0.0, 1.0, (codec.latent_dim, codec.latent_dim)))
        codec.set_params(
            {"enc_w": codec.params["enc_w"] @ rot, "dec_w": rot.T @ codec.params["dec_w"]}
        )
        codec.fit_standardization(images)
    return history


def train_classifier(net, samples, cfg: TrainConfig) -> list[float]:
    """Cross-entropy training on the train split; returns per-epoch mean loss."""
    images, labels = _split_stack(samples, "train")
    flat = images.reshape(-1, PIXELS)
    flat.flags.writeable = False

    def batch_loss(idx, leaves, rng):
        (p,) = leaves
        logits = net.logits(ad.constant(np.ascontiguousarray(flat[idx])), params=p)
        return ad.reduce_mean(ad.softmax_cross_entropy(logits, labels[idx]))

    return _run_epochs([net], flat.shape[0], cfg, batch_loss)


def train_score_net(
    net: ScoreNet,
    codec: Codec,
    samples,
    schedule: NoiseSchedule,
    table: EmbeddingTable,
    cfg: TrainConfig,
    null_fraction: float = 0.1,
) -> list[float]:
    """Denoising-score-matching on codec latents of the train split.

    Conditioning is the label-matched table row; a ``null_fraction`` share
    of batches trains on the null row so guided prediction stays defined
    away from w = 1. The table rows receive gradients and train jointly.
    """
    images, labels = _split_stack(samples, "train")
    latents = codec.encode(images).data
    t_train = schedule.t_train
    abars = schedule.alpha_bars

    def batch_loss(idx, leaves, rng):
        p_net, p_table = leaves
        z0 = latents[idx]
        b = z0.shape[0]
        t = rng.integers(1, t_train + 1, b)
        eps = rng.standard_normal((b, net.latent_dim))
        zt = np.sqrt(abars[t])[:, None] * z0 + np.sqrt(1.0 - abars[t])[:, None] * eps
        if rng.uniform() < null_fraction:
            rows = np.zeros(b, dtype=np.intp)
        else:
            rows = labels[idx] + 1  # row 1 = real-style, row 2 = fake-style
        cond = ad.index_permute(p_table["rows"], table.row_gather_index(rows))
        pred = net.forward(ad.constant(np.ascontiguousarray(zt)), t, cond, params=p_net)
        diff = ad.subtract(pred, ad.constant(np.ascontiguousarray(eps)))
        return ad.reduce_mean(ad.multiply(diff, diff))

    return _run_epochs([net, table], latents.shape[0], cfg, batch_loss)


def _split_stack(samples, split):
    images = np.stack([s.image for s in samples if s.split == split])
    labels = np.array([s.label for s in samples if s.split == split], dtype=np.intp)
    return images, labels


def classifier_accuracy(net, samples, split: str = "test") -> float:
    images, labels = _split_stack(samples, split)
    preds = np.argmax(net.logits(images).data, axis=1)
    return float(np.mean(preds == labels))


def codec_mse(codec: Codec, samples, split: str = "test") -> float:
    """Per-pixel reconstruction MSE of the codec alone."""
    images, _ = _split_stack(samples, split)
    recon = codec.decode(codec.encode(images)).data
    return float(np.mean((recon - images) ** 2))


def reconstruction_linf(
    codec: Codec,
    net,
    table: EmbeddingTable,
    schedule: NoiseSchedule,
    samples,
    split: str = "test",
    w: float = 1.0,
    limit: int | None = 64,
) -> float:
    """Worst-pixel error of the full invert-then-denoise round trip.

    Measured in image space between the chain output and the plain codec
    reconstruction, so only the diffusion round trip is charged, per class
    batch, conditioning on the label-matched row both directions.
    """
    images, labels = _split_stack(samples, split)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    worst = 0.0
    for label in (0, 1):
        chosen = images[labels == label]
        if chosen.shape[0] == 0:
            continue
        z0 = codec.encode(chosen)
        cond_rows = np.repeat(table.params["rows"][label + 1][None, :], chosen.shape[0], axis=0)
        cond = ad.constant(np.ascontiguousarray(cond_rows))
        traj = invert_chain(net, schedule, z0, schedule.ddim_steps, cond, w=w)
        z_back = denoise_chain(net, schedule, traj[-1], schedule.ddim_steps, cond, w=w)
        base = codec.decode(z0).data
        roundtrip = codec.decode(z_back).data
        worst = max(worst, float(np.max(np.abs(roundtrip - base))))
    return worst


def run_admission(
    codec: Codec,
    net,
    table: EmbeddingTable,
    schedule: NoiseSchedule,
    white_box,
    transfer,
    samples,
) -> dict:
    """Quality gate recorded before any attack: detector accuracy and
    round-trip reconstruction error on the test split."""
    accuracies = [classifier_accuracy(c, samples) for c in white_box]
    transfer_acc = classifier_accuracy(transfer, samples)
    recon = reconstruction_linf(codec, net, table, schedule, samples)
    passed = (
        all(a >= ACCURACY_ADMISSION for a in accuracies)
        and transfer_acc >= ACCURACY_ADMISSION
        and recon < RECON_LINF_ADMISSION
    )
    return {
        "classifier_accuracy": accuracies,
        "transfer_accuracy": transfer_acc,
        "recon_image_linf": recon,
        "codec_test_mse": codec_mse(codec, samples),
        "passed": bool(passed),
    }
