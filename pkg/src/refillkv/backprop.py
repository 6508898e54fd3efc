"""Batched masked forward pass with a hand-written backward pass.

Any chunked/pruned prefill followed by decoding is equivalent to one pass over
the full sequence in which row ``t`` may attend to an explicit set of columns.
Training losses are expressed that way: a boolean mask per layer (layers can
differ after per-layer refilling) and a weight per target row.

Arrays are batched: tokens (B, T), masks (L, B, T, T) or (B, T, T).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelConfig
from .numkernel import RMS_EPS


@dataclass
class Segment:
    tokens: np.ndarray      # (B, T) ids; ignored on L1 rows
    is_l1: np.ndarray       # (B, T)
    positions: np.ndarray   # (B, T)
    masks: np.ndarray       # (B, T, T) shared, or (L, B, T, T) per layer
    targets: np.ndarray     # (B, T) next-token ids, anything where weight == 0
    weights: np.ndarray     # (B, T)

    def layer_mask(self, i: int) -> np.ndarray:
        return self.masks[i] if self.masks.ndim == 4 else self.masks


def _rope_tables(positions, head_dim, base):
    half = head_dim // 2
    inv_freq = 1.0 / base ** (2.0 * np.arange(half) / head_dim)
    ang = positions[..., None].astype(np.float64) * inv_freq
    return np.cos(ang), np.sin(ang)


def _rope(x, cos, sin, n_heads, sign=1.0):
    """x (B, T, D) rotated per head; sign=-1 applies the inverse rotation."""
    b, t, d = x.shape
    hd = d // n_heads
    half = hd // 2
    xh = x.reshape(b, t, n_heads, hd)
    x1, x2 = xh[..., :half], xh[..., half:]
    c, s = cos[:, :, None, :], sign * sin[:, :, None, :]
    out = np.concatenate([x1 * c - x2 * s, x2 * c + x1 * s], axis=-1)
    return out.reshape(b, t, d).astype(x.dtype, copy=False)


def _rmsnorm(x, g):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x * r * g, r


def _rmsnorm_back(dy, x, r, g):
    dn = dy * g
    dg = (dy * x * r).sum(axis=(0, 1))
    dx = r * (dn - x * r * r * np.mean(dn * x, axis=-1, keepdims=True))
    return dx, dg


def _heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge(x):
    b, h, t, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)


def _sigmoid(u):
    return 1.0 / (1.0 + np.exp(-u))


def forward(params: dict, cfg: ModelConfig, seg: Segment, keep: bool = False):
    """Returns (weighted CE sum, weight sum, tape or None)."""
    nh, hd = cfg.n_heads, cfg.head_dim
    is_l1 = seg.is_l1[..., None]
    x = np.where(is_l1, params["l1_embed"], params["embed"][np.where(seg.is_l1, 0, seg.tokens)])
    cos, sin = _rope_tables(seg.positions, hd, cfg.rope_base)
    scale = 1.0 / np.sqrt(hd)
    tape = {"layers": [], "cos": cos, "sin": sin}
    for i in range(cfg.n_layers):
        p = lambda name: params[f"layers.{i}.{name}"]
        mask = seg.layer_mask(i)
        h, r1 = _rmsnorm(x, p("attn_norm"))
        q = np.where(is_l1, h @ p("wq_l1"), h @ p("wq"))
        k = np.where(is_l1, h @ p("wk_l1"), h @ p("wk"))
        v = np.where(is_l1, h @ p("wv_l1"), h @ p("wv"))
        qh = _heads(_rope(q, cos, sin, nh), nh)
        kh = _heads(_rope(k, cos, sin, nh), nh)
        vh = _heads(v, nh)
        s = (qh @ kh.transpose(0, 1, 3, 2)) * scale
        s = np.where(mask[:, None], s, -np.inf)
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        attn = e / e.sum(axis=-1, keepdims=True)
        o = _merge(attn @ vh)
        x1 = x + o @ p("wo")
        h2, r2 = _rmsnorm(x1, p("ffn_norm"))
        u = h2 @ p("w_up")
        sg = _sigmoid(u)
        act = u * sg
        x2 = x1 + act @ p("w_down")
        if keep:
            tape["layers"].append(dict(x=x, h=h, r1=r1, qh=qh, kh=kh, vh=vh, attn=attn, o=o,
                                       x1=x1, h2=h2, r2=r2, u=u, sg=sg, act=act))
        x = x2
    hf, rf = _rmsnorm(x, params["final_norm"])
    logits = hf @ params["head"]
    logits = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(logits).sum(axis=-1))
    tgt = np.where(seg.weights > 0, seg.targets, 0)
    nll = logz - np.take_along_axis(logits, tgt[..., None], axis=-1)[..., 0]
    total = float((nll * seg.weights).sum())
    if keep:
        tape.update(xL=x, hf=hf, rf=rf, logits=logits, logz=logz, tgt=tgt)
    return total, float(seg.weights.sum()), (tape if keep else None)


def backward(params: dict, cfg: ModelConfig, seg: Segment, tape: dict, norm: float,
             wrt: set[str]) -> dict[str, np.ndarray]:
    """Gradients of (weighted CE sum / norm) for the parameter names in ``wrt``."""
    nh = cfg.n_heads
    scale = 1.0 / np.sqrt(cfg.head_dim)
    grads = {}
    is_l1 = seg.is_l1[..., None]
    cos, sin = tape["cos"], tape["sin"]

    probs = np.exp(tape["logits"] - tape["logz"][..., None])
    np.put_along_axis(probs, tape["tgt"][..., None],
                      np.take_along_axis(probs, tape["tgt"][..., None], -1) - 1.0, -1)
    dlogits = probs * (seg.weights / norm)[..., None]
    if "head" in wrt:
        grads["head"] = np.einsum("btd,btv->dv", tape["hf"], dlogits)
    dhf = dlogits @ params["head"].T
    dx, dg = _rmsnorm_back(dhf, tape["xL"], tape["rf"], params["final_norm"])
    if "final_norm" in wrt:
        grads["final_norm"] = dg

    for i in reversed(range(cfg.n_layers)):
        t = tape["layers"][i]
        name = lambda n: f"layers.{i}.{n}"
        p = lambda n: params[name(n)]
        # FFN
        if name("w_down") in wrt:
            grads[name("w_down")] = np.einsum("btf,btd->fd", t["act"], dx)
        dact = dx @ p("w_down").T
        du = dact * t["sg"] * (1.0 + t["u"] * (1.0 - t["sg"]))
        if name("w_up") in wrt:
            grads[name("w_up")] = np.einsum("btd,btf->df", t["h2"], du)
        dh2 = du @ p("w_up").T
        dx1_n, dg = _rmsnorm_back(dh2, t["x1"], t["r2"], p("ffn_norm"))
        if name("ffn_norm") in wrt:
            grads[name("ffn_norm")] = dg
        dx1 = dx + dx1_n
        # attention
        if name("wo") in wrt:
            grads[name("wo")] = np.einsum("btd,bte->de", t["o"], dx1)
        do = _heads(dx1 @ p("wo").T, nh)
        attn = t["attn"]
        dattn = do @ t["vh"].transpose(0, 1, 3, 2)
        dvh = attn.transpose(0, 1, 3, 2) @ do
        ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
        dqh = ds @ t["kh"]
        dkh = ds.transpose(0, 1, 3, 2) @ t["qh"]
        dq = _rope(_merge(dqh), cos, sin, nh, sign=-1.0)
        dk = _rope(_merge(dkh), cos, sin, nh, sign=-1.0)
        dv = _merge(dvh)
        h = t["h"]
        dh = np.zeros_like(h)
        for proj, d in (("wq", dq), ("wk", dk), ("wv", dv)):
            d2 = np.where(is_l1, 0.0, d)
            d1 = d - d2
            if name(proj) in wrt:
                grads[name(proj)] = np.einsum("btd,bte->de", h, d2)
            if name(proj + "_l1") in wrt:
                grads[name(proj + "_l1")] = np.einsum("btd,bte->de", h, d1)
            dh += d2 @ p(proj).T + d1 @ p(proj + "_l1").T
        dxa, dg = _rmsnorm_back(dh, t["x"], t["r1"], p("attn_norm"))
        if name("attn_norm") in wrt:
            grads[name("attn_norm")] = dg
        dx = dx1 + dxa

    if "l1_embed" in wrt:
        grads["l1_embed"] = (dx * is_l1).sum(axis=(0, 1))
    if "embed" in wrt:
        g = np.zeros_like(params["embed"])
        rows = ~seg.is_l1
        np.add.at(g, seg.tokens[rows], dx[rows])
        grads["embed"] = g
    return grads


def loss_and_grads(params: dict, cfg: ModelConfig, segments: list[Segment],
                   wrt: set[str] | None = None):
    """Mean CE over all weighted rows of all segments, and its gradients.

    Names outside ``wrt`` get exact zero gradients.
    """
    wrt = set() if wrt is None else set(wrt)
    runs = [forward(params, cfg, seg, keep=bool(wrt)) for seg in segments]
    norm = sum(r[1] for r in runs)
    loss = sum(r[0] for r in runs) / norm
    grads = {name: np.zeros_like(v) for name, v in params.items()}
    if wrt:
        for seg, (_, _, tape) in zip(segments, runs):
            for name, g in backward(params, cfg, seg, tape, norm, wrt).items():
                grads[name] += g
    return loss, grads


def loss_only(params: dict, cfg: ModelConfig, segments: list[Segment]) -> float:
    runs = [forward(params, cfg, seg) for seg in segments]
    return sum(r[0] for r in runs) / sum(r[1] for r in runs)
