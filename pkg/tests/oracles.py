"""Reference implementations that share no code with the package.

Everything here is written with plain loops or direct numpy formulas so a
bug in the library cannot be mirrored by the oracle.
"""

from __future__ import annotations

import math

import numpy as np


def softmax_rows(x):
    out = np.empty_like(x, dtype=float)
    for i, row in enumerate(np.asarray(x, dtype=float)):
        e = [math.exp(v - max(row)) for v in row]
        s = sum(e)
        out[i] = [v / s for v in e]
    return out


def gelu_scalar(x: float) -> float:
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def layer_norm_rows(x, gamma, beta, eps=1e-5):
    out = np.empty_like(x, dtype=float)
    for i, row in enumerate(x):
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        out[i] = [(v - mu) / math.sqrt(var + eps) * g + b for v, g, b in zip(row, gamma, beta)]
    return out


def conv2d_loops(x, k, stride):
    c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(c_in):
                    for a in range(kh):
                        for b in range(kw):
                            acc += x[c, i * stride + a, j * stride + b] * k[o, c, a, b]
                out[o, i, j] = acc
    return out


def cross_entropy_loops(logits, targets):
    total = 0.0
    for row, t in zip(logits, targets):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[t]
    return total / len(targets)


def attention(q_in, kv_in, wq, wk, wv, wo):
    """Single-head scaled dot-product attention, row by row."""
    q = q_in @ wq
    k = kv_in @ wk
    v = kv_in @ wv
    d = wq.shape[1]
    scores = np.array([[float(qi @ kj) / math.sqrt(d) for kj in k] for qi in q])
    a = softmax_rows(scores)
    return (a @ v) @ wo, a


def adam_reference(theta, grad_fn, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam recurrence written out term by term."""
    m = v = 0.0
    trace = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
        trace.append(theta)
    return trace


def lm_logits_oracle(lm, prefix: np.ndarray, input_ids):
    """Decoder forward pass written directly in numpy from the parameter arrays."""
    p = {k: t.data for k, t in lm.named_parameters().items()}
    n = len(input_ids)
    x = np.vstack([prefix, p["tok_embed"][list(input_ids)] + p["pos_embed"][:n]])
    P = prefix.shape[0]
    total = P + n
    for b in range(len(lm.blocks)):
        g = lambda name: p[f"blocks.{b}.{name}"]  # noqa: E731
        h = layer_norm_rows(x, g("ln1_g"), g("ln1_b"))
        q, k, v = h @ g("wq"), h @ g("wk"), h @ g("wv")
        scores = q @ k.T / math.sqrt(q.shape[1])
        for i in range(total):
            for j in range(total):
                if j >= P and j > i:
                    scores[i, j] = -np.inf
        x = x + (softmax_rows(scores) @ v) @ g("wo")
        h = layer_norm_rows(x, g("ln2_g"), g("ln2_b"))
        pre = h @ g("w1") + g("b1")
        act = np.vectorize(gelu_scalar)(pre)
        x = x + act @ g("w2") + g("b2")
    out = layer_norm_rows(x[P:], p["lnf_g"], p["lnf_b"])
    return out @ p["head"]


def brute_force_chain(tools, have, want):
    """Cheapest (cost, names) chain reaching ``want`` by exhaustive enumeration.

    ``tools`` is a list of ``(name, inputs, outputs, cost)``. A chain is a
    sequence of distinct tools: the first consumes only modalities in
    ``have``; each later one is single-input and consumes an output of its
    predecessor. Every such chain is visited depth first. Returns ``None``
    when unreachable and ``(0, ())`` when the modality is already available.
    """
    if want in have:
        return (0.0, ())
    best = None

    def extend(used, names, cost, produced):
        nonlocal best
        if produced == want:
            cand = (cost, names)
            if best is None or cand < best:
                best = cand
        for t in tools:
            if t[0] in used or len(t[1]) != 1 or t[1][0] != produced:
                continue
            for out in t[2]:
                extend(used | {t[0]}, names + (t[0],), cost + t[3], out)

    for t in tools:
        if set(t[1]) <= set(have):
            for out in t[2]:
                extend({t[0]}, (t[0],), float(t[3]), out)
    return best
