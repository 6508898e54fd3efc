"""Independent float64 reference implementations used as test oracles.

Deliberately naive (explicit loops, direct trig) and sharing no code with the
package beyond reading parameter arrays.
"""
import math

import numpy as np


def matmul(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for p in range(a.shape[1]):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def softmax(row):
    row = [float(v) for v in row]
    mx = max(row)
    e = [math.exp(v - mx) for v in row]
    total = sum(e)
    return np.array([v / total for v in e])


def rmsnorm(row, gain, eps=1e-6):
    row = np.asarray(row, np.float64)
    rms = math.sqrt(sum(v * v for v in row) / len(row) + eps)
    return np.array([v / rms * g for v, g in zip(row, gain)])


def rope(vec, pos, head_dim, base=10000.0):
    """Rotate each head of ``vec`` by ``pos``; pairs (i, i + head_dim/2)."""
    vec = np.asarray(vec, np.float64)
    out = vec.copy()
    half = head_dim // 2
    for h in range(len(vec) // head_dim):
        o = h * head_dim
        for i in range(half):
            theta = pos * base ** (-2.0 * i / head_dim)
            a, b = vec[o + i], vec[o + i + half]
            out[o + i] = a * math.cos(theta) - b * math.sin(theta)
            out[o + i + half] = b * math.cos(theta) + a * math.sin(theta)
    return out


def silu(x):
    return x / (1.0 + np.exp(-x))


def full_forward(model, tokens, is_l1, positions, visible=None):
    """Cache-free forward over an explicit sequence.

    ``visible(layer, t, s)`` decides whether row t attends to row s; default is
    causal by position. Returns (logits (T, V), per-layer keys, per-layer values),
    keys/values as (T, hidden) after rotary.
    """
    cfg = model.config
    p = {k: v.astype(np.float64) for k, v in model.params.items()}
    hd, nh = cfg.head_dim, cfg.n_heads
    T = len(tokens)
    x = np.array([p["l1_embed"] if is_l1[t] else p["embed"][tokens[t]] for t in range(T)])
    keys_out, values_out = [], []
    for li in range(cfg.n_layers):
        g = lambda n: p[f"layers.{li}.{n}"]
        h = np.array([rmsnorm(x[t], g("attn_norm")) for t in range(T)])
        q = np.zeros_like(h)
        k = np.zeros_like(h)
        v = np.zeros_like(h)
        for t in range(T):
            sfx = "_l1" if is_l1[t] else ""
            q[t] = rope(h[t] @ g("wq" + sfx), positions[t], hd, cfg.rope_base)
            k[t] = rope(h[t] @ g("wk" + sfx), positions[t], hd, cfg.rope_base)
            v[t] = h[t] @ g("wv" + sfx)
        keys_out.append(k)
        values_out.append(v)
        att = np.zeros_like(h)
        for t in range(T):
            for hh in range(nh):
                sl = slice(hh * hd, (hh + 1) * hd)
                cols = [s for s in range(T)
                        if (visible(li, t, s) if visible else positions[s] <= positions[t])]
                w = softmax([q[t, sl] @ k[s, sl] / math.sqrt(hd) for s in cols])
                att[t, sl] = sum(wi * v[s, sl] for wi, s in zip(w, cols))
        x = x + att @ g("wo")
        h2 = np.array([rmsnorm(x[t], g("ffn_norm")) for t in range(T)])
        x = x + silu(h2 @ g("w_up")) @ g("w_down")
    hf = np.array([rmsnorm(x[t], p["final_norm"]) for t in range(T)])
    return hf @ p["head"], keys_out, values_out


def cross_entropy(logits_row, target):
    z = np.asarray(logits_row, np.float64)
    mx = z.max()
    return math.log(sum(math.exp(v - mx) for v in z)) + mx - z[target]
