"""Independent brute-force reference implementations used as test oracles.

Everything here is written the slow, obvious way (explicit loops, direct
summation) and must stay independent of the package code paths it checks.
"""

from __future__ import annotations

import math

import numpy as np


def dft2_direct(img: np.ndarray) -> np.ndarray:
    """O(n^4) forward DFT by direct double summation, unshifted layout."""
    h, w = img.shape
    out = np.zeros((h, w), dtype=complex)
    for ku in range(h):
        for kv in range(w):
            acc = 0.0 + 0.0j
            for m in range(h):
                for n in range(w):
                    angle = -2.0 * math.pi * (ku * m / h + kv * n / w)
                    acc += img[m, n] * complex(math.cos(angle), math.sin(angle))
            out[ku, kv] = acc
    return out


def idft2_direct(spec: np.ndarray) -> np.ndarray:
    """O(n^4) inverse DFT with 1/(h*w) normalization, unshifted layout."""
    h, w = spec.shape
    out = np.zeros((h, w), dtype=complex)
    for m in range(h):
        for n in range(w):
            acc = 0.0 + 0.0j
            for ku in range(h):
                for kv in range(w):
                    angle = 2.0 * math.pi * (ku * m / h + kv * n / w)
                    acc += spec[ku, kv] * complex(math.cos(angle), math.sin(angle))
            out[m, n] = acc / (h * w)
    return out


def shift_direct(arr: np.ndarray) -> np.ndarray:
    """Center-shift by explicit index remapping (DC moves to (h//2, w//2))."""
    h, w = arr.shape
    out = np.empty_like(arr)
    for p in range(h):
        for q in range(w):
            out[p, q] = arr[(p - h // 2) % h, (q - w // 2) % w]
    return out


def unshift_direct(arr: np.ndarray) -> np.ndarray:
    h, w = arr.shape
    out = np.empty_like(arr)
    for k in range(h):
        for l in range(w):
            out[k, l] = arr[(k + h // 2) % h, (l + w // 2) % w]
    return out


def fta_direct(
    x_w: np.ndarray,
    x_u: np.ndarray,
    lam: float,
    mask_shifted: np.ndarray,
    mode: str,
) -> tuple[np.ndarray, np.ndarray]:
    """Amplitude-exchange augmentation via the direct-DFT transforms."""
    f_w = dft2_direct(x_w.astype(np.float64))
    f_u = dft2_direct(x_u.astype(np.float64))
    a_w, p_w = shift_direct(np.abs(f_w)), shift_direct(np.angle(f_w))
    a_u, p_u = shift_direct(np.abs(f_u)), shift_direct(np.angle(f_u))
    m = mask_shifted.astype(np.float64)
    if mode == "paper-literal":
        new_w = (1.0 - lam) * a_w * (1.0 - m) + lam * a_u * m
        new_u = (1.0 - lam) * a_u * (1.0 - m) + lam * a_w * m
    elif mode == "standard-fda":
        new_w = a_w * (1.0 - m) + ((1.0 - lam) * a_w + lam * a_u) * m
        new_u = a_u * (1.0 - m) + ((1.0 - lam) * a_u + lam * a_w) * m
    else:
        raise ValueError(mode)
    z_w = idft2_direct(unshift_direct(new_w * np.exp(1j * p_w)))
    z_u = idft2_direct(unshift_direct(new_u * np.exp(1j * p_u)))
    return z_w.real, z_u.real


def mirror_mask(mask: np.ndarray) -> np.ndarray:
    """Union with the conjugate mirror, by explicit per-bin reflection."""
    h, w = mask.shape
    out = mask.copy()
    for p in range(h):
        for q in range(w):
            out[(2 * (h // 2) - p) % h, (2 * (w // 2) - q) % w] = max(
                out[(2 * (h // 2) - p) % h, (2 * (w // 2) - q) % w], mask[p, q]
            )
    return out


def count_nonzero_scan(mask: np.ndarray) -> int:
    """Triple-loop voxel count."""
    d, h, w = mask.shape
    total = 0
    for z in range(d):
        for y in range(h):
            for x in range(w):
                if mask[z, y, x]:
                    total += 1
    return total


def overlap_counts_scan(a: np.ndarray, b: np.ndarray) -> tuple[int, int, int, int]:
    """(intersection, |A|, |B|, union) by exhaustive voxel comparison."""
    inter = na = nb = union = 0
    d, h, w = a.shape
    for z in range(d):
        for y in range(h):
            for x in range(w):
                va, vb = bool(a[z, y, x]), bool(b[z, y, x])
                inter += va and vb
                na += va
                nb += vb
                union += va or vb
    return inter, na, nb, union


def min_l1_scan(a: list[tuple[int, int, int]], b: list[tuple[int, int, int]]) -> int:
    best = None
    for p in a:
        for q in b:
            d = abs(p[0] - q[0]) + abs(p[1] - q[1]) + abs(p[2] - q[2])
            if best is None or d < best:
                best = d
    return best


def hausdorff_l1_scan(
    a: list[tuple[int, int, int]], b: list[tuple[int, int, int]]
) -> int:
    def directed(src, dst):
        worst = 0
        for p in src:
            nearest = min(
                abs(p[0] - q[0]) + abs(p[1] - q[1]) + abs(p[2] - q[2]) for q in dst
            )
            worst = max(worst, nearest)
        return worst

    return max(directed(a, b), directed(b, a))


def mlp_forward_scalar(
    w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, b2: np.ndarray,
    w3: np.ndarray, b3: float, features: np.ndarray,
) -> float:
    """One pixel's forward pass with explicit loops and scalar math."""
    scale, alpha = 1.0507009873554805, 1.6732632423543772

    def selu1(x: float) -> float:
        return scale * x if x > 0 else scale * alpha * (math.exp(x) - 1.0)

    h1 = [selu1(sum(w1[i][j] * features[j] for j in range(len(features))) + b1[i])
          for i in range(len(b1))]
    h2 = [selu1(sum(w2[i][j] * h1[j] for j in range(len(h1))) + b2[i])
          for i in range(len(b2))]
    z = sum(w3[i] * h2[i] for i in range(len(h2))) + b3
    return 1.0 / (1.0 + math.exp(-z))


def reflect_patch(img: np.ndarray, row: int, col: int, k: int) -> np.ndarray:
    """k x k patch around (row, col) with reflect padding, explicit indexing."""
    h, w = img.shape
    half = k // 2
    out = np.empty((k, k), dtype=np.float64)
    for dr in range(-half, half + 1):
        for dc in range(-half, half + 1):
            r, c = row + dr, col + dc
            if r < 0:
                r = -r
            if r >= h:
                r = 2 * (h - 1) - r
            if c < 0:
                c = -c
            if c >= w:
                c = 2 * (w - 1) - c
            out[dr + half, dc + half] = img[r, c]
    return out


def adam_plain(params, grads, m, v, step, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Textbook Adam (no weight decay), element-by-element."""
    new_params = params.copy()
    new_m = m.copy()
    new_v = v.copy()
    t = step + 1
    for i in range(len(params)):
        new_m[i] = beta1 * m[i] + (1 - beta1) * grads[i]
        new_v[i] = beta2 * v[i] + (1 - beta2) * grads[i] ** 2
        mh = new_m[i] / (1 - beta1**t)
        vh = new_v[i] / (1 - beta2**t)
        new_params[i] = params[i] - lr * mh / (math.sqrt(vh) + eps)
    return new_params, new_m, new_v


def finite_diff_grad(loss_fn, params: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar loss over a parameter vector."""
    out = np.zeros_like(params)
    for i in range(len(params)):
        plus = params.copy()
        plus[i] += h
        minus = params.copy()
        minus[i] -= h
        out[i] = (loss_fn(plus) - loss_fn(minus)) / (2.0 * h)
    return out
