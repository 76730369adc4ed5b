"""Trainable segmenter contract: reference patch-MLP, AdamW, poly LR schedule.

The reference model maps each pixel's k x k neighborhood (reflect-padded,
intensities affinely mapped to [-1, 1]) through two SELU hidden layers to a
sigmoid foreground probability. Backpropagation is exact and framework-free;
any stronger model can plug in behind the same three operations
(predict_probs / loss_and_grad / adamw_step).

SEG1 checkpoint layout (little-endian):

    magic "SEG1" | patch u32 | hidden1 u32 | hidden2 u32 | n_params u32 |
    step u64 | params f32[n] | first-moment f32[n] | second-moment f32[n]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .preprocess import Slice2D

SELU_SCALE = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772
# Negative saturation value that self-normalizing dropout resets units to.
SELU_SATURATION = -SELU_SCALE * SELU_ALPHA

BCE_EPS = 1e-7

CHECKPOINT_MAGIC = b"SEG1"
_CKPT_HEADER = struct.Struct("<4sIIIIQ")


@dataclass(frozen=True)
class TrainSchedule:
    """Polynomial decay: lr = base_lr * (1 - i / total_iters) ** power."""

    base_lr: float = 1e-4
    total_iters: int = 1000
    power: float = 0.9

    def __post_init__(self) -> None:
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if self.total_iters < 1:
            raise ConfigError(f"total_iters must be >= 1, got {self.total_iters}")


def poly_lr(sched: TrainSchedule, i: int) -> float:
    """Learning rate at iteration i; exact at both endpoints."""
    if not 0 <= i <= sched.total_iters:
        raise ConfigError(
            f"iteration {i} outside schedule [0, {sched.total_iters}]"
        )
    return sched.base_lr * (1.0 - i / sched.total_iters) ** sched.power


def selu(z: np.ndarray) -> np.ndarray:
    # scale * (max(z, 0) + alpha * expm1(min(z, 0))): one transcendental,
    # no boolean select.
    out = np.expm1(np.minimum(z, 0.0))
    out *= SELU_ALPHA
    out += np.maximum(z, 0.0)
    out *= SELU_SCALE
    return out


def _selu_grad_from_activation(a: np.ndarray) -> np.ndarray:
    # a = selu(z) before any perturbation. selu is strictly increasing with
    # selu(0) = 0, so the branch test works on a itself, and for z <= 0 the
    # derivative equals a + scale*alpha: no exponential in the backward pass.
    return np.where(a > 0, SELU_SCALE, a + SELU_SCALE * SELU_ALPHA)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_loss(probs: np.ndarray, targets: np.ndarray, eps: float = BCE_EPS) -> float:
    """Mean binary cross-entropy with probabilities clipped to [eps, 1-eps]."""
    p = np.clip(np.asarray(probs, dtype=np.float64), eps, 1.0 - eps)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise DataError(f"probs/targets shapes differ: {p.shape} vs {t.shape}")
    return float(-np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p)))


@dataclass(frozen=True)
class ModelShape:
    """Layer descriptors of the reference model."""

    patch: int = 5
    hidden1: int = 32
    hidden2: int = 16

    def __post_init__(self) -> None:
        if self.patch < 1 or self.patch % 2 == 0:
            raise ConfigError(f"patch must be odd and >= 1, got {self.patch}")
        if self.hidden1 < 1 or self.hidden2 < 1:
            raise ConfigError("hidden widths must be >= 1")

    @property
    def n_inputs(self) -> int:
        return self.patch * self.patch

    @property
    def n_params(self) -> int:
        k2 = self.n_inputs
        return (
            self.hidden1 * k2 + self.hidden1
            + self.hidden2 * self.hidden1 + self.hidden2
            + self.hidden2 + 1
        )


@dataclass(frozen=True)
class Perturbation:
    """Self-normalizing dropout applied to both hidden activation layers."""

    rate: float
    seed: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"perturbation rate must be in [0, 1), got {self.rate}")


def alpha_dropout(
    activations: np.ndarray, rate: float, seed: int
) -> np.ndarray:
    """Saturate a fraction of units, then restore mean/variance in expectation."""
    arr, _, _ = _alpha_dropout_cached(activations, rate, np.random.default_rng(seed))
    return arr


def _alpha_dropout_cached(
    activations: np.ndarray, rate: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, float]:
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"perturbation rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.array(activations, copy=True), np.ones_like(activations), 1.0
    keep = rng.random(activations.shape) >= rate
    q = 1.0 - rate
    scale = (q + SELU_SATURATION**2 * rate * q) ** -0.5
    shift = -scale * rate * SELU_SATURATION
    out = scale * np.where(keep, activations, SELU_SATURATION) + shift
    return out, keep, scale


class PatchMLP:
    """Reference segmenter over k x k patch features with a flat param vector."""

    def __init__(self, shape: ModelShape, params: np.ndarray):
        params = np.array(params, dtype=np.float64, copy=True).ravel()
        if params.size != shape.n_params:
            raise DataError(
                f"parameter count {params.size} does not match shape "
                f"{shape} ({shape.n_params})"
            )
        self.shape = shape
        self.params = params

    @classmethod
    def init_random(cls, shape: ModelShape, seed: int) -> "PatchMLP":
        # Variance 1/fan_in keeps SELU activations near unit variance.
        rng = np.random.default_rng(seed)
        k2, h1, h2 = shape.n_inputs, shape.hidden1, shape.hidden2
        parts = [
            rng.normal(0.0, k2**-0.5, h1 * k2),
            np.zeros(h1),
            rng.normal(0.0, h1**-0.5, h2 * h1),
            np.zeros(h2),
            rng.normal(0.0, h2**-0.5, h2),
            np.zeros(1),
        ]
        return cls(shape, np.concatenate(parts))

    def _unpack(
        self, vec: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, float]:
        k2, h1, h2 = self.shape.n_inputs, self.shape.hidden1, self.shape.hidden2
        o = 0
        w1 = vec[o:o + h1 * k2].reshape(h1, k2); o += h1 * k2
        b1 = vec[o:o + h1]; o += h1
        w2 = vec[o:o + h2 * h1].reshape(h2, h1); o += h2 * h1
        b2 = vec[o:o + h2]; o += h2
        w3 = vec[o:o + h2]; o += h2
        b3 = vec[o]
        return w1, b1, w2, b2, w3, b3

    def _patches(self, slc: Slice2D) -> np.ndarray:
        pad = self.shape.patch // 2
        data = slc.data.astype(np.float64)
        if pad > 0:
            if min(data.shape) <= pad:
                raise DataError(
                    f"slice {data.shape} too small for reflect padding of {pad}"
                )
            data = np.pad(data, pad, mode="reflect")
        k = self.shape.patch
        windows = np.lib.stride_tricks.sliding_window_view(data, (k, k))
        flat = windows.reshape(-1, k * k)
        return 2.0 * flat - 1.0  # [0, 1] intensities -> [-1, 1] features

    def _forward_rows(self, p: np.ndarray, perturb: Perturbation | None) -> dict:
        # Rows are independent pixels, so any number of slices can share one
        # forward pass once their patch matrices are stacked.
        if not np.all(np.isfinite(self.params)):
            raise NumericError("model parameters contain non-finite values")
        w1, b1, w2, b2, w3, b3 = self._unpack(self.params)
        a1_pre = selu(p @ w1.T + b1)
        a1 = a1_pre
        keep1 = keep2 = None
        scale = 1.0
        if perturb is not None and perturb.rate > 0.0:
            rng = np.random.default_rng(perturb.seed)
            a1, keep1, scale = _alpha_dropout_cached(a1_pre, perturb.rate, rng)
        a2_pre = selu(a1 @ w2.T + b2)
        a2 = a2_pre
        if perturb is not None and perturb.rate > 0.0:
            a2, keep2, _ = _alpha_dropout_cached(a2_pre, perturb.rate, rng)
        probs = sigmoid(a2 @ w3 + b3)
        return {
            "patches": p, "a1_pre": a1_pre, "a1": a1, "a2_pre": a2_pre, "a2": a2,
            "probs": probs, "keep1": keep1, "keep2": keep2, "scale": scale,
        }

    def forward_cache(self, slc: Slice2D, perturb: Perturbation | None = None) -> dict:
        cache = self._forward_rows(self._patches(slc), perturb)
        cache["hw"] = slc.data.shape
        return cache

    def forward_cache_multi(
        self, slices: list[Slice2D], perturb: Perturbation | None = None
    ) -> dict:
        """One forward pass over several slices; probabilities stay stacked
        in slice order and ``sizes`` records each slice's pixel count."""
        patches = np.vstack([self._patches(s) for s in slices])
        cache = self._forward_rows(patches, perturb)
        cache["sizes"] = [s.data.size for s in slices]
        return cache

    def predict_probs(
        self, slc: Slice2D, perturb: Perturbation | None = None
    ) -> np.ndarray:
        """Per-pixel foreground probability map in the open interval (0, 1)."""
        probs = self.forward_cache(slc, perturb)["probs"].reshape(slc.data.shape)
        return np.clip(probs, 1e-15, 1.0 - 1e-15)

    def grad_from_logit_grad(self, cache: dict, dz3: np.ndarray) -> np.ndarray:
        w1, b1, w2, b2, w3, b3 = self._unpack(self.params)
        a2, a1, p = cache["a2"], cache["a1"], cache["patches"]
        gw3 = a2.T @ dz3
        gb3 = dz3.sum()
        da2 = np.outer(dz3, w3)
        if cache["keep2"] is not None:
            da2 *= cache["scale"] * cache["keep2"]
        dz2 = da2
        dz2 *= _selu_grad_from_activation(cache["a2_pre"])
        gw2 = dz2.T @ a1
        gb2 = dz2.sum(axis=0)
        da1 = dz2 @ w2
        if cache["keep1"] is not None:
            da1 *= cache["scale"] * cache["keep1"]
        dz1 = da1
        dz1 *= _selu_grad_from_activation(cache["a1_pre"])
        gw1 = dz1.T @ p
        gb1 = dz1.sum(axis=0)
        return np.concatenate(
            [gw1.ravel(), gb1, gw2.ravel(), gb2, gw3, np.array([gb3])]
        )

    def loss_and_grad(
        self,
        slc: Slice2D,
        target: np.ndarray,
        weight: float = 1.0,
        perturb: Perturbation | None = None,
    ) -> tuple[float, np.ndarray]:
        """Mean BCE against a binary target map plus the exact parameter gradient."""
        t = np.asarray(target, dtype=np.float64).ravel()
        cache = self.forward_cache(slc, perturb)
        probs = cache["probs"]
        if t.size != probs.size:
            raise DataError(
                f"target size {t.size} does not match slice {cache['hw']}"
            )
        loss = bce_loss(probs, t)
        # Clipped pixels contribute zero gradient (the loss is flat there).
        inside = (probs > BCE_EPS) & (probs < 1.0 - BCE_EPS)
        dz3 = np.where(inside, probs - t, 0.0) / t.size
        return weight * loss, weight * self.grad_from_logit_grad(cache, dz3)

    def grad_from_prob_grad(self, cache: dict, dloss_dprobs: np.ndarray) -> np.ndarray:
        """Parameter gradient from a per-pixel gradient on output probabilities."""
        probs = cache["probs"]
        dz3 = dloss_dprobs.ravel() * probs * (1.0 - probs)
        return self.grad_from_logit_grad(cache, dz3)


@dataclass
class AdamWState:
    """First/second moments and step counter for decoupled weight decay."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4

    def __post_init__(self) -> None:
        self.m = np.asarray(self.m, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.m.shape != self.v.shape:
            raise DataError("moment vectors must have equal length")
        if bool((self.v < 0).any()):
            raise DataError("second moments must be non-negative")

    @classmethod
    def fresh(cls, n_params: int, weight_decay: float = 1e-4) -> "AdamWState":
        return cls(np.zeros(n_params), np.zeros(n_params), weight_decay=weight_decay)


def adamw_step(
    params: np.ndarray, grads: np.ndarray, state: AdamWState, lr: float
) -> tuple[np.ndarray, AdamWState]:
    """One decoupled-weight-decay Adam update; returns new params and state."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape:
        raise DataError("params and grads must have equal length")
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params * (1.0 - lr * state.weight_decay) - lr * m_hat / (
        np.sqrt(v_hat) + state.eps
    )
    new_state = AdamWState(
        m, v, t, state.beta1, state.beta2, state.eps, state.weight_decay
    )
    return new_params, new_state


def save_checkpoint(model: PatchMLP, state: AdamWState, path: Path | str) -> None:
    """Serialize model and optimizer state as SEG1 (deterministic bytes)."""
    s = model.shape
    with open(path, "wb") as f:
        f.write(
            _CKPT_HEADER.pack(
                CHECKPOINT_MAGIC, s.patch, s.hidden1, s.hidden2,
                s.n_params, state.step,
            )
        )
        f.write(model.params.astype("<f4").tobytes())
        f.write(state.m.astype("<f4").tobytes())
        f.write(state.v.astype("<f4").tobytes())


def load_checkpoint(path: Path | str) -> tuple[PatchMLP, AdamWState]:
    blob = Path(path).read_bytes()
    if len(blob) < _CKPT_HEADER.size or blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a SEG1 checkpoint")
    _, patch, h1, h2, n_params, step = _CKPT_HEADER.unpack_from(blob)
    shape = ModelShape(patch, h1, h2)
    if shape.n_params != n_params:
        raise DataError(f"{path}: parameter count mismatch in header")
    expected = _CKPT_HEADER.size + 3 * 4 * n_params
    if len(blob) != expected:
        raise DataError(f"{path}: truncated checkpoint payload")
    vecs = np.frombuffer(blob, dtype="<f4", offset=_CKPT_HEADER.size)
    params, m, v = (vecs[i * n_params:(i + 1) * n_params] for i in range(3))
    model = PatchMLP(shape, params.astype(np.float64))
    state = AdamWState(m.astype(np.float64), v.astype(np.float64), step=step)
    return model, state
