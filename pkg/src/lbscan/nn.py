"""Small dense-layer primitives with hand-written adjoints.

Everything here is a pure function pair: ``<op>(...)`` returning the value
(plus whatever the adjoint needs) and ``<op>_grad`` consuming the upstream
gradient.  All adjoints are validated against central finite differences in
the test suite.
"""

from __future__ import annotations

import numpy as np

RMS_EPS = 1e-6


def sigmoid(x):
    # overflow-free: sigmoid(x) = (1 + tanh(x/2)) / 2
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x):
    return np.logaddexp(0.0, x)


def silu(x):
    return x * sigmoid(x)


def silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    # tanh approximation, standard in transformer stacks
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def gelu_grad(x):
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner


def softmax(x, axis=-1):
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def rms_norm(x, scale):
    """Per-token RMS normalisation with a learned scale, no bias."""
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x * inv * scale, (x, inv)


def rms_norm_grad(cache, scale, g):
    x, inv = cache
    D = x.shape[-1]
    g_scale = np.sum(g * x * inv, axis=tuple(range(x.ndim - 1)))
    gs = g * scale
    g_x = inv * gs - x * inv**3 / D * np.sum(gs * x, axis=-1, keepdims=True)
    return g_x, g_scale


def linear(x, w, b=None):
    """x: (..., d_in) @ w: (d_in, d_out)."""
    out = x @ w
    if b is not None:
        out = out + b
    return out


def linear_grad(x, w, g, with_bias=False):
    g_x = g @ w.T
    g_w = np.tensordot(x, g, axes=(tuple(range(x.ndim - 1)), tuple(range(g.ndim - 1))))
    if with_bias:
        g_b = g.sum(axis=tuple(range(g.ndim - 1)))
        return g_x, g_w, g_b
    return g_x, g_w


def causal_conv1d(x, kernel):
    """Depthwise causal convolution over the length axis.

    ``out[b, l, e] = sum_q kernel[e, q] * x[b, l - q, e]`` with zero padding
    on the left, so no output looks ahead of its own position.
    """
    B, L, E = x.shape
    k = kernel.shape[1]
    out = np.zeros_like(x)
    for q in range(min(k, L)):
        seg = x[:, : L - q] if q else x
        out[:, q:] += kernel[:, q] * seg
    return out


def causal_conv1d_grad(x, kernel, g):
    B, L, E = x.shape
    k = kernel.shape[1]
    g_x = np.zeros_like(x)
    g_kernel = np.zeros_like(kernel)
    for q in range(min(k, L)):
        if q:
            g_x[:, : L - q] += kernel[:, q] * g[:, q:]
            g_kernel[:, q] = np.sum(g[:, q:] * x[:, : L - q], axis=(0, 1))
        else:
            g_x += kernel[:, 0] * g
            g_kernel[:, 0] = np.sum(g * x, axis=(0, 1))
    return g_x, g_kernel


def reversal_invariant_mean(tokens):
    """Mean over the length axis computed by symmetric pairing.

    Positions l and L-1-l are added first (commutative, hence bitwise
    order-free), so the result is exactly invariant to reversing the
    sequence, not just up to rounding.
    """
    L = tokens.shape[1]
    half = L // 2
    front = tokens[:, :half]
    back = tokens[:, L - 1 : L - 1 - half : -1] if half else tokens[:, :0]
    total = np.sum(front + back, axis=1)
    if L % 2:
        total = total + tokens[:, half]
    return total / L


def cross_entropy(logits, labels, smoothing: float = 0.0):
    """Mean cross-entropy with optional label smoothing.

    Returns (loss, gradient w.r.t. logits, accuracy).
    """
    B, K = logits.shape
    p = softmax(logits, axis=-1)
    logp = logits - np.max(logits, axis=-1, keepdims=True)
    logp = logp - np.log(np.sum(np.exp(logp), axis=-1, keepdims=True))
    target = np.full((B, K), smoothing / K)
    target[np.arange(B), labels] += 1.0 - smoothing
    loss = float(-np.sum(target * logp) / B)
    g = (p - target) / B
    acc = float(np.mean(np.argmax(logits, axis=-1) == labels))
    return loss, g, acc
