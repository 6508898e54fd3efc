"""Pure numpy kernels, used when the compiled extension is unavailable."""
import numpy as np


def matmul(a, b):
    return a @ b


def softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def rmsnorm(x, gain, eps):
    ms = np.mean(x.astype(np.float64) ** 2, axis=1, keepdims=True)
    return (x * (1.0 / np.sqrt(ms + eps)) * gain).astype(x.dtype)


def rope_apply(x, positions, head_dim, base):
    half = head_dim // 2
    inv_freq = 1.0 / base ** (2.0 * np.arange(half) / head_dim)
    ang = positions[:, None].astype(np.float64) * inv_freq[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    rows = x.shape[0]
    xh = x.reshape(rows, -1, head_dim).astype(np.float64)
    x1, x2 = xh[..., :half], xh[..., half:]
    c, s = cos[:, None, :], sin[:, None, :]
    out = np.concatenate([x1 * c - x2 * s, x2 * c + x1 * s], axis=-1)
    return out.reshape(rows, -1).astype(x.dtype)


def attention(q, k, v, q_pos, k_pos, scale):
    scores = np.einsum("htd,hnd->htn", q, k) * scale
    allowed = k_pos[None, :] <= q_pos[:, None]
    scores = np.where(allowed[None], scores, -np.inf)
    mx = scores.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    w = np.exp(scores - mx)
    total = w.sum(axis=-1, keepdims=True)
    total = np.where(total > 0, total, 1.0)
    return (np.einsum("htn,hnd->htd", w, v) / total).astype(q.dtype)
