"""Learnable pieces of the pipeline.

A pixel/latent codec (identity or linear autoencoder), an MLP noise
predictor with sinusoidal time features and a learned class-conditioning
table, and the detector MLPs the attack targets. All weight matrices are
stored (fan_in, fan_out) so the same forward code handles a single sample
and a batch.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Tensor,
    _as_tensor,
    add,
    clamp,
    constant,
    matmul,
    multiply,
    relu,
    reshape,
    silu,
    subtract,
)

__all__ = [
    "IMAGE_SHAPE",
    "PIXELS",
    "COND_DIM",
    "TIME_EMB_DIM",
    "time_embedding",
    "Codec",
    "ScoreNet",
    "EmbeddingTable",
    "ClassifierNet",
]

IMAGE_SHAPE = (3, 16, 16)
PIXELS = 3 * 16 * 16
COND_DIM = 16
TIME_EMB_DIM = 32


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


def time_embedding(t, dim: int = TIME_EMB_DIM) -> np.ndarray:
    """Sinusoidal features of a timestep (scalar or batch).

    Half the dimensions carry sines, half cosines, over geometrically
    spaced frequencies, so distinct integer steps map to distinct vectors.
    """
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[..., None] * freqs
    return _freeze(np.concatenate([np.sin(ang), np.cos(ang)], axis=-1))


class _ParamModule:
    """Shared storage/serialization behaviour for the small nets."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def set_params(self, new: dict[str, np.ndarray]) -> None:
        for name, value in new.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r}")
            if value.shape != self.params[name].shape:
                raise ValueError(
                    f"parameter {name!r}: shape {value.shape} != {self.params[name].shape}"
                )
            self.params[name] = _freeze(np.array(value, dtype=np.float64))

    def param_leaves(self) -> dict[str, Tensor]:
        """Fresh differentiable leaves over the current parameters."""
        return {k: Tensor(v, requires_grad=True) for k, v in self.params.items()}

    def _p(self, override: dict[str, Tensor] | None) -> dict[str, Tensor]:
        if override is not None:
            return override
        return {k: constant(v) for k, v in self.params.items()}


class Codec(_ParamModule):
    """Image <-> latent map.

    The ``identity`` variant flattens pixels (exact round trip, used for
    pixel-space runs and exact tests); the ``linear`` variant is a trained
    linear autoencoder with per-dimension latent standardization.
    """

    def __init__(self, variant: str = "linear", latent_dim: int = 64, seed: int = 0):
        super().__init__()
        if variant not in ("identity", "linear"):
            raise ValueError(f"unknown codec variant {variant!r}")
        self.variant = variant
        if variant == "identity":
            self.latent_dim = PIXELS
            return
        self.latent_dim = int(latent_dim)
        rng = np.random.default_rng(seed)
        self.params = {
            "enc_w": _freeze(rng.normal(0.0, 1.0 / np.sqrt(PIXELS), (PIXELS, self.latent_dim))),
            "enc_b": _freeze(np.zeros(self.latent_dim)),
            "dec_w": _freeze(rng.normal(0.0, 1.0 / np.sqrt(self.latent_dim), (self.latent_dim, PIXELS))),
            "dec_b": _freeze(np.full(PIXELS, 0.5)),
            "latent_mu": _freeze(np.zeros(self.latent_dim)),
            "latent_inv_scale": _freeze(np.ones(self.latent_dim)),
            "latent_scale": _freeze(np.ones(self.latent_dim)),
        }

    def fit_standardization(self, train_images: np.ndarray) -> None:
        """Pin latent mean/scale so training-set latents are ~N(0, 1) per dim."""
        if self.variant == "identity":
            return
        flat = train_images.reshape(-1, PIXELS)
        raw = flat @ self.params["enc_w"] + self.params["enc_b"]
        mu = raw.mean(axis=0)
        scale = np.maximum(raw.std(axis=0), 1e-8)
        self.params["latent_mu"] = _freeze(mu)
        self.params["latent_scale"] = _freeze(scale)
        self.params["latent_inv_scale"] = _freeze(1.0 / scale)

    def _flatten(self, x: Tensor) -> Tensor:
        if x.data.ndim == 3:
            return reshape(x, (PIXELS,))
        if x.data.ndim == 4:
            return reshape(x, (x.data.shape[0], PIXELS))
        raise ValueError(f"expected image of shape {IMAGE_SHAPE} or a batch, got {x.shape}")

    def encode(self, x, params: dict[str, Tensor] | None = None) -> Tensor:
        """Map an image (or batch) in [0, 1] to a standardized latent."""
        x = _as_tensor(x)
        if np.min(x.data) < 0.0 or np.max(x.data) > 1.0:
            raise ValueError("pixel values outside [0, 1]")
        flat = self._flatten(x)
        if self.variant == "identity":
            return flat
        p = self._p(params)
        raw = add(matmul(flat, p["enc_w"]), p["enc_b"])
        return multiply(subtract(raw, p["latent_mu"]), p["latent_inv_scale"])

    def decode(self, z, params: dict[str, Tensor] | None = None) -> Tensor:
        """Map a latent (or batch) back to an image clamped into [0, 1]."""
        z = _as_tensor(z)
        batched = z.data.ndim == 2
        out_shape = (z.data.shape[0],) + IMAGE_SHAPE if batched else IMAGE_SHAPE
        if self.variant == "identity":
            return clamp(reshape(z, out_shape), 0.0, 1.0)
        p = self._p(params)
        raw = add(multiply(z, p["latent_scale"]), p["latent_mu"])
        pixels = add(matmul(raw, p["dec_w"]), p["dec_b"])
        return clamp(reshape(pixels, out_shape), 0.0, 1.0)

    def decode_preclamp(self, z, params: dict[str, Tensor] | None = None) -> Tensor:
        """Decoder affine map without the output clamp (training objective)."""
        z = _as_tensor(z)
        if self.variant == "identity":
            return z
        p = self._p(params)
        raw = add(multiply(z, p["latent_scale"]), p["latent_mu"])
        return add(matmul(raw, p["dec_w"]), p["dec_b"])


class ScoreNet(_ParamModule):
    """MLP noise predictor eps(z, t, c).

    Input features are the latent, a 32-wide sinusoidal time embedding and
    a 16-wide conditioning vector; the concatenation is realized as three
    parallel input projections into the first hidden layer.
    """

    HIDDEN = 128

    def __init__(self, latent_dim: int, seed: int = 0):
        super().__init__()
        self.latent_dim = int(latent_dim)
        rng = np.random.default_rng(seed)
        h = self.HIDDEN

        def init(fan_in, fan_out):
            return _freeze(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)))

        self.params = {
            "w1z": init(self.latent_dim, h),
            "w1t": init(TIME_EMB_DIM, h),
            "w1c": init(COND_DIM, h),
            "b1": _freeze(np.zeros(h)),
            "w2": init(h, h),
            "b2": _freeze(np.zeros(h)),
            "w3": init(h, self.latent_dim),
            "b3": _freeze(np.zeros(self.latent_dim)),
        }

    def forward(self, z, t, cond, params: dict[str, Tensor] | None = None) -> Tensor:
        z = _as_tensor(z)
        cond = _as_tensor(cond)
        p = self._p(params)
        temb = constant(time_embedding(t))
        pre = add(
            add(matmul(z, p["w1z"]), matmul(temb, p["w1t"])),
            add(matmul(cond, p["w1c"]), p["b1"]),
        )
        h1 = silu(pre)
        h2 = silu(add(matmul(h1, p["w2"]), p["b2"]))
        return add(matmul(h2, p["w3"]), p["b3"])

    # Chains address every noise model through .predict.
    predict = forward


class EmbeddingTable(_ParamModule):
    """Three learned 16-wide conditioning rows; row 0 is the null condition."""

    NULL = 0
    REAL_STYLE = 1
    FAKE_STYLE = 2
    ROWS = 3

    def __init__(self, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.params = {"rows": _freeze(rng.normal(0.0, 0.5, (self.ROWS, COND_DIM)))}

    def embed(self, index: int) -> Tensor:
        if not 0 <= int(index) < self.ROWS:
            raise IndexError(f"conditioning index {index} outside [0, {self.ROWS})")
        return constant(_freeze(self.params["rows"][int(index)].copy()))

    def row_gather_index(self, indices) -> np.ndarray:
        """Flat gather map selecting full rows, usable with index_permute."""
        idx = np.asarray(indices, dtype=np.intp)
        return (idx[:, None] * COND_DIM + np.arange(COND_DIM)[None, :]).astype(np.intp)


class ClassifierNet(_ParamModule):
    """Detector MLP over flattened pixels: 768 -> width -> width/2 -> 2 logits.

    Class 0 is "real", class 1 "fake"; argmax ties resolve to class 0.
    """

    def __init__(self, width: int, seed: int = 0):
        super().__init__()
        self.width = int(width)
        rng = np.random.default_rng(seed)
        w2 = self.width // 2

        def init(fan_in, fan_out):
            return _freeze(rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)))

        # Zero logit layer: ties start on "real" and the first updates stay
        # small enough for stable momentum descent.
        self.params = {
            "w1": init(PIXELS, self.width),
            "b1": _freeze(np.zeros(self.width)),
            "w2": init(self.width, w2),
            "b2": _freeze(np.zeros(w2)),
            "w3": _freeze(np.zeros((w2, 2))),
            "b3": _freeze(np.zeros(2)),
        }

    def logits(self, x, params: dict[str, Tensor] | None = None) -> Tensor:
        x = _as_tensor(x)
        if x.data.ndim == 3:
            flat = reshape(x, (PIXELS,))
        elif x.data.ndim == 4:
            flat = reshape(x, (x.data.shape[0], PIXELS))
        elif x.data.ndim in (1, 2) and x.data.shape[-1] == PIXELS:
            flat = x
        else:
            raise ValueError(f"expected an image or a flat pixel vector, got {x.shape}")
        p = self._p(params)
        h1 = relu(add(matmul(flat, p["w1"]), p["b1"]))
        h2 = relu(add(matmul(h1, p["w2"]), p["b2"]))
        return add(matmul(h2, p["w3"]), p["b3"])

    def predicted_label(self, x) -> int | np.ndarray:
        """Hard decision; numpy argmax keeps ties on class 0 (real)."""
        out = self.logits(x).data
        if out.ndim == 1:
            return int(np.argmax(out))
        return np.argmax(out, axis=1)
