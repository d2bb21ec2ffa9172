"""Latent-space attack loop with the four strategy pools.

The perturbation lives on the inverted latent at a small sampling index;
every iteration denoises it back to an image, applies a random draw from
the transform pool, scores a composite loss per surrogate detector,
ensembles by equal-weight sum, and steps the perturbation with the chosen
gradient rule under a growing L-infinity radius.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion import NoiseSchedule, denoise_chain, invert_chain
from .metrics import ssim
from .models import Codec, EmbeddingTable

__all__ = [
    "TRANSFORM_ORDER",
    "AttackConfig",
    "AttackModels",
    "AttackResult",
    "AdmissionError",
    "radius_schedule",
    "project",
    "gradient_step",
    "draw_transform_record",
    "apply_transform_record",
    "transform_sample",
    "compose_loss",
    "ensemble_loss",
    "run_attack",
    "pixel_space_mifgsm",
]

TRANSFORM_ORDER = ("hflip", "vflip", "rot90", "crop_resize", "channel_dropout")
CROP_SIZE = 12
GRAD_METHODS = ("plain-gd", "fgsm-sign", "mi-fgsm")


@dataclass
class AttackConfig:
    eps_start: float = 0.05
    eps_end: float = 0.3
    eps_step: float = 0.02
    iters_per_radius: int = 10
    step_size: float | None = None  # None -> eps / 5 at each radius level
    grad_method: str = "mi-fgsm"
    momentum: float = 1.0
    l1_weight: float = 0.1
    transforms: tuple[str, ...] = TRANSFORM_ORDER
    timestep_index: int = 2
    guidance_w: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.eps_start > self.eps_end or self.eps_step <= 0:
            raise ValueError("need eps_start <= eps_end and eps_step > 0")
        if self.iters_per_radius < 0:
            raise ValueError("iters_per_radius must be >= 0")
        if self.grad_method not in GRAD_METHODS:
            raise ValueError(f"grad_method must be one of {GRAD_METHODS}")
        if self.l1_weight < 0:
            raise ValueError("l1_weight must be >= 0")
        bad = [t for t in self.transforms if t not in TRANSFORM_ORDER]
        if bad:
            raise ValueError(f"unknown transforms {bad}")
        self.transforms = tuple(t for t in TRANSFORM_ORDER if t in self.transforms)


@dataclass
class AttackModels:
    """Frozen model bundle the attack runs against.

    ``admission`` is the quality-gate record from training; when present
    it must have passed, which is how the CLI refuses un-admitted models.
    """

    codec: Codec
    score_net: object
    table: EmbeddingTable
    schedule: NoiseSchedule
    white_box: tuple
    white_box_names: tuple[str, ...]
    transfer: object | None = None
    transfer_name: str = "transfer"
    admission: dict | None = None


class AdmissionError(RuntimeError):
    """The model bundle failed (or lacks) its pre-attack quality gate."""


@dataclass
class AttackResult:
    image_id: int
    success: bool
    x_adv: np.ndarray
    delta: np.ndarray
    ssim: float
    verdicts: dict[str, int]
    radius: float | None
    iterations: int
    loss_trace: list[float] = field(default_factory=list)


def radius_schedule(
    level: int, eps_start: float = 0.05, eps_end: float = 0.3, eps_step: float = 0.02
) -> float:
    """Growing radius: min(eps_start + level * eps_step, eps_end)."""
    if level < 0:
        raise ValueError("level must be >= 0")
    return min(eps_start + level * eps_step, eps_end)


def project(delta: np.ndarray, eps: float) -> np.ndarray:
    """Clamp the perturbation into the L-infinity ball of radius eps."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    return np.clip(delta, -eps, eps)


def gradient_step(
    delta: np.ndarray,
    g: np.ndarray,
    grad: np.ndarray,
    alpha: float,
    method: str = "mi-fgsm",
    momentum: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """One descent update of the perturbation, before projection.

    plain-gd:   delta - alpha * grad
    fgsm-sign:  delta - alpha * sign(grad)
    mi-fgsm:    g <- momentum * g + grad / ||grad||_1, delta - alpha * sign(g);
                a zero gradient only decays g and leaves delta unchanged.
    """
    if grad.shape != delta.shape:
        raise ValueError(f"gradient shape {grad.shape} != delta shape {delta.shape}")
    if method == "plain-gd":
        return delta - alpha * grad, g
    if method == "fgsm-sign":
        return delta - alpha * np.sign(grad), g
    if method == "mi-fgsm":
        norm = np.sum(np.abs(grad))
        if norm == 0.0:
            return delta.copy(), momentum * g
        g = momentum * g + grad / norm
        return delta - alpha * np.sign(g), g
    raise ValueError(f"unknown gradient method {method!r}")


# --- transform pool -------------------------------------------------------

_index_maps: dict[tuple, np.ndarray] = {}


def _image_index_map(kind: str, shape: tuple) -> np.ndarray:
    """Flat gather map realizing a spatial rearrangement of (C, H, W)."""
    key = (kind, shape)
    cached = _index_maps.get(key)
    if cached is not None:
        return cached
    c, h, w = shape
    base = np.arange(c * h * w, dtype=np.intp).reshape(c, h, w)
    if kind == "hflip":
        idx = base[:, :, ::-1]
    elif kind == "vflip":
        idx = base[:, ::-1, :]
    elif kind == "rot90":
        if h != w:
            raise ValueError("rot90 requires square images")
        idx = np.rot90(base, k=1, axes=(1, 2))
    elif kind == "center_crop":
        y0 = (h - CROP_SIZE) // 2
        x0 = (w - CROP_SIZE) // 2
        idx = base[:, y0 : y0 + CROP_SIZE, x0 : x0 + CROP_SIZE]
    else:
        raise ValueError(f"unknown index map {kind!r}")
    idx = np.ascontiguousarray(idx)
    idx.flags.writeable = False
    _index_maps[key] = idx
    return idx


def draw_transform_record(pool, rng) -> list[tuple]:
    """Independent p=0.5 coin per pool member, in the fixed canonical order.

    channel_dropout draws its channel from the same stream only when its
    coin lands heads, so the record fully pins the applied transform.
    """
    record = []
    for name in TRANSFORM_ORDER:
        if name not in pool:
            continue
        if rng.uniform() >= 0.5:
            continue
        if name == "channel_dropout":
            record.append((name, int(rng.integers(0, 3))))
        else:
            record.append((name, None))
    return record


def apply_transform_record(x: Tensor, record) -> Tensor:
    """Replay a drawn transform record on an image tensor, differentiably."""
    x = ad._as_tensor(x)
    shape = x.data.shape
    for name, param in record:
        if name == "hflip":
            x = ad.index_permute(x, _image_index_map("hflip", shape))
        elif name == "vflip":
            x = ad.index_permute(x, _image_index_map("vflip", shape))
        elif name == "rot90":
            x = ad.index_permute(x, _image_index_map("rot90", shape))
        elif name == "crop_resize":
            cropped = ad.index_permute(x, _image_index_map("center_crop", shape))
            x = ad.bilinear_resize(cropped, shape[1], shape[2])
        elif name == "channel_dropout":
            mask = np.ones(shape)
            mask[param] = 0.0
            mask.flags.writeable = False
            x = ad.multiply(x, mask)
        else:
            raise ValueError(f"unknown transform {name!r}")
    return x


def transform_sample(x, pool, rng) -> tuple[Tensor, list[tuple]]:
    """Draw a transform combination and apply it; identity for an empty pool."""
    record = draw_transform_record(pool, rng)
    return apply_transform_record(ad._as_tensor(x), record), record


# --- loss -----------------------------------------------------------------


def compose_loss(logits, x_adv, x_recon, y_true: int = 0, l1_weight: float = 0.1) -> Tensor:
    """Per-detector objective: cross-entropy toward the target label plus a
    weighted mean-absolute-pixel consistency term against the unperturbed
    reconstruction."""
    if l1_weight < 0:
        raise ValueError("l1_weight must be >= 0")
    attack = ad.softmax_cross_entropy(logits, y_true)
    if l1_weight == 0.0:
        return attack
    consistency = ad.reduce_mean(ad.absolute(ad.subtract(x_adv, x_recon)))
    return ad.add(attack, ad.scale(consistency, l1_weight))


def ensemble_loss(losses) -> Tensor:
    """Equal-weight sum of per-detector losses."""
    losses = list(losses)
    if not losses:
        raise ValueError("ensemble over an empty loss list")
    total = losses[0]
    for term in losses[1:]:
        total = ad.add(total, term)
    return total


# --- main loop --------------------------------------------------------------


def _image_rng(seed: int, image_index: int):
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(image_index),)))


def run_attack(
    image: np.ndarray, config: AttackConfig, models: AttackModels, image_id: int = 0
) -> AttackResult:
    """Full attack on one fake image; deterministic in (seed, config, models).

    The inversion trajectory is computed once and frozen; only the latent
    at ``config.timestep_index`` carries the perturbation. Success means
    every white-box detector calls the re-decoded image real; the search
    stops at the first success, which under the growing radius is the
    best-similarity success seen.
    """
    if models.admission is not None and not models.admission.get("passed", False):
        raise AdmissionError("model bundle failed its admission checks")
    if not 1 <= config.timestep_index <= models.schedule.ddim_steps:
        raise ValueError("timestep_index outside the sampling sub-sequence")

    rng = _image_rng(config.seed, image_id)
    codec, net, table, schedule = models.codec, models.score_net, models.table, models.schedule
    cond = table.embed(EmbeddingTable.FAKE_STYLE)
    null_cond = table.embed(EmbeddingTable.NULL)
    s = config.timestep_index
    w = config.guidance_w

    z0 = codec.encode(np.asarray(image, dtype=np.float64))
    trajectory = invert_chain(net, schedule, z0, s, cond, null_cond, w)
    z_s = ad.constant(trajectory[-1].data)
    x_recon_t = codec.decode(denoise_chain(net, schedule, z_s, s, cond, null_cond, w))
    x_recon = ad.constant(x_recon_t.data)

    delta = rng.uniform(-config.eps_start, config.eps_start, z_s.data.shape)
    momentum_buf = np.zeros_like(delta)
    loss_trace: list[float] = []
    iterations = 0
    best = None

    def render(d: np.ndarray) -> np.ndarray:
        z = ad.add(z_s, ad.constant(np.ascontiguousarray(d)))
        return codec.decode(denoise_chain(net, schedule, z, s, cond, null_cond, w)).data

    level = 0
    while True:
        eps = radius_schedule(level, config.eps_start, config.eps_end, config.eps_step)
        alpha = config.step_size if config.step_size is not None else eps / 5.0
        for _ in range(config.iters_per_radius):
            d_leaf = Tensor(delta, requires_grad=True)
            z = ad.add(z_s, d_leaf)
            x_adv_t = codec.decode(denoise_chain(net, schedule, z, s, cond, null_cond, w))
            x_aug, _record = transform_sample(x_adv_t, config.transforms, rng)
            losses = [
                compose_loss(clf.logits(x_aug), x_adv_t, x_recon, 0, config.l1_weight)
                for clf in models.white_box
            ]
            total = ensemble_loss(losses)
            total.backward(np.asarray(1.0))
            loss_trace.append(float(total.data))
            grad = d_leaf.grad if d_leaf.grad is not None else np.zeros_like(delta)
            delta, momentum_buf = gradient_step(
                delta, momentum_buf, grad, alpha, config.grad_method, config.momentum
            )
            delta = project(delta, eps)
            assert np.max(np.abs(delta)) <= eps
            iterations += 1

            x_candidate = render(delta)
            wb_labels = [int(np.argmax(clf.logits(x_candidate).data)) for clf in models.white_box]
            if all(lbl == 0 for lbl in wb_labels):
                candidate_ssim = ssim(image, x_candidate)
                if best is None or candidate_ssim > best["ssim"]:
                    best = {
                        "ssim": candidate_ssim,
                        "delta": delta.copy(),
                        "x_adv": x_candidate,
                        "radius": eps,
                    }
                break
        if best is not None or eps >= config.eps_end:
            break
        level += 1

    if best is not None:
        x_adv = best["x_adv"]
        final_delta = best["delta"]
        final_ssim = best["ssim"]
        radius = best["radius"]
        success = True
    else:
        x_adv = render(delta) if iterations > 0 else x_recon.data.copy()
        final_delta = delta
        final_ssim = ssim(image, x_adv)
        radius = None
        success = False

    verdicts = {
        name: int(np.argmax(clf.logits(x_adv).data))
        for name, clf in zip(models.white_box_names, models.white_box)
    }
    if models.transfer is not None:
        verdicts[models.transfer_name] = int(np.argmax(models.transfer.logits(x_adv).data))

    return AttackResult(
        image_id=int(image_id),
        success=success,
        x_adv=np.ascontiguousarray(x_adv),
        delta=np.ascontiguousarray(final_delta),
        ssim=float(final_ssim),
        verdicts=verdicts,
        radius=radius,
        iterations=iterations,
        loss_trace=loss_trace,
    )


def pixel_space_mifgsm(
    image: np.ndarray,
    classifiers,
    eps: float = 8.0 / 255.0,
    steps: int = 10,
    momentum: float = 1.0,
    y_true: int = 0,
) -> np.ndarray:
    """Plain pixel-space MI-FGSM baseline toward the target label.

    Single- or multi-surrogate; the adversarial image stays within eps of
    the input in L-infinity and inside [0, 1].
    """
    x0 = np.asarray(image, dtype=np.float64)
    delta = np.zeros_like(x0)
    g = np.zeros_like(x0)
    alpha = eps / steps
    for _ in range(steps):
        leaf = Tensor(x0 + delta, requires_grad=True)
        x_in = ad.clamp(leaf, 0.0, 1.0)
        losses = [ad.softmax_cross_entropy(clf.logits(x_in), y_true) for clf in classifiers]
        total = ensemble_loss(losses)
        total.backward(np.asarray(1.0))
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(delta)
        delta, g = gradient_step(delta, g, grad, alpha, "mi-fgsm", momentum)
        delta = project(delta, eps)
    return np.clip(x0 + delta, 0.0, 1.0)
