"""Straight-line reference evaluations, written directly from the update equations.

These deliberately avoid the batched code paths of the package: scalar loops,
explicit per-channel formulas, plain math functions.
"""
import math

import numpy as np


def sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def softmax(values, beta):
    m = max(values)
    e = [math.exp(beta * (v - m)) for v in values]
    s = sum(e)
    return [a / s for a in e]


def cos(a, b):
    na = math.sqrt(sum(v * v for v in a))
    nb = math.sqrt(sum(v * v for v in b))
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return sum(p * q for p, q in zip(a, b)) / (na * nb)


def write_attention(p, x, prev, flags):
    D, K = p.D, p.K
    n_content = K - 1 if flags.highway_channel else K
    logits = [sum(x[d] * p.Fw[d, k] for d in range(D)) for k in range(n_content)]
    z = softmax(logits, p.beta)
    if flags.local_proximity_debuff and prev is not None:
        f = float(p.alpha) ** cos(x, prev)
        z = [v * f for v in z]
    if flags.highway_channel:
        z = z + [1.0]
    return z


def write(p, H, x, prev, flags):
    """One write; returns (new H as nested lists, attention)."""
    D, K = p.D, p.K
    z = write_attention(p, x, prev, flags)
    H = [[float(H[d][k]) for k in range(K)] for d in range(D)]
    if flags.instance_level_attention:
        hhat = [sum(z[k] * H[d][k] for k in range(K)) for d in range(D)]
        c = list(x) + hhat
        reset = sig(sum(p.Wr[i] * c[i] for i in range(2 * D)) + float(p.br))
        ca = list(x) + [reset * v for v in hhat]
        add = [math.tanh(sum(p.Wa[d, i] * ca[i] for i in range(2 * D)) + p.ba[d]) for d in range(D)]
        erase = [sig(sum(p.We[d, i] * c[i] for i in range(2 * D)) + p.be[d]) for d in range(D)]
    else:
        add = [math.tanh(sum(p.Wa[d, i] * x[i] for i in range(D)) + p.ba[d]) for d in range(D)]
        erase = [sig(sum(p.We[d, i] * x[i] for i in range(D)) + p.be[d]) for d in range(D)]
    g = [[min(erase[d] * z[k], 1.0) for k in range(K)] for d in range(D)]
    new = [[add[d] * g[d][k] + H[d][k] * (1.0 - g[d][k]) for k in range(K)] for d in range(D)]
    return new, z, add, erase


def read(p, H, v, flags):
    D, K = p.D, p.K
    if flags.legacy_read:
        w = [sum(v[d] * p.Fr_legacy[d, k] for d in range(D)) for k in range(K)]
    else:
        w = [sum(v[e] * p.Fr[e, d] * H[d][k] for e in range(D) for d in range(D)) for k in range(K)]
    z = softmax(w, p.read_beta)
    return [sum(z[k] * H[d][k] for k in range(K)) for d in range(D)], z


def fcn2(rp, u, v):
    inp = list(u) + list(v)
    hidden = [max(0.0, sum(rp.W1[h, i] * inp[i] for i in range(len(inp))) + rp.b1[h])
              for h in range(rp.W1.shape[0])]
    logit = sum(rp.W2[0, h] * hidden[h] for h in range(len(hidden))) + float(rp.b2)
    return sig(logit)


def rum_sequence(p, xs):
    """Independent RUM: softmax routing over all K heads, x-only erase/add, head-table read."""
    D, K = p.D, p.K
    H = [[0.0] * K for _ in range(D)]
    for x in xs:
        z = softmax([sum(x[d] * p.Fw[d, k] for d in range(D)) for k in range(K)], p.beta)
        erase = [sig(sum(p.We[d, i] * x[i] for i in range(D)) + p.be[d]) for d in range(D)]
        add = [math.tanh(sum(p.Wa[d, i] * x[i] for i in range(D)) + p.ba[d]) for d in range(D)]
        H = [[H[d][k] * (1 - erase[d] * z[k]) + add[d] * erase[d] * z[k] for k in range(K)] for d in range(D)]
    return H


def gru(p, h, x):
    D = p.D
    c = list(x) + list(h)
    z = [sig(sum(p.Wz[d, i] * c[i] for i in range(2 * D)) + p.bz[d]) for d in range(D)]
    r = [sig(sum(p.Wr[d, i] * c[i] for i in range(2 * D)) + p.br[d]) for d in range(D)]
    cn = list(x) + [r[d] * h[d] for d in range(D)]
    n = [math.tanh(sum(p.Wh[d, i] * cn[i] for i in range(2 * D)) + p.bh[d]) for d in range(D)]
    return [z[d] * h[d] + (1 - z[d]) * n[d] for d in range(D)]
