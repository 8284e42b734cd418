#!/usr/bin/env python3
"""Writes the golden fixtures under crates/core/fixtures/golden/.

Inputs are random doubles; reference outputs are computed independently
of the Rust code in 50-digit mpmath arithmetic and rounded once to double.

    python3 scripts/golden.py [out_dir]
"""

import math
import random
import struct
import sys
from pathlib import Path

from mpmath import mp, mpf

mp.dps = 50
EPS = mpf("1e-5")


def rand_matrix(rng, rows, cols, bound):
    return [[rng.uniform(-bound, bound) for _ in range(cols)] for _ in range(rows)]


def rand_vector(rng, n, bound):
    return [rng.uniform(-bound, bound) for _ in range(n)]


def linear_init(rng, fan_in, fan_out):
    b = 1.0 / math.sqrt(fan_in)
    return rand_matrix(rng, fan_in, fan_out, b), rand_vector(rng, fan_out, b)


def norm_init(rng, dim):
    return [1.0 + rng.uniform(-0.5, 0.5) for _ in range(dim)], rand_vector(rng, dim, 0.5)


def mpm(m):
    return [[mpf(v) for v in row] for row in m]


def matmul(a, b):
    return [[mp.fsum(a[i][k] * b[k][j] for k in range(len(b))) for j in range(len(b[0]))] for i in range(len(a))]


def transpose(a):
    return [list(r) for r in zip(*a)]


def softmax(v):
    m = max(v)
    e = [mp.exp(x - m) for x in v]
    s = mp.fsum(e)
    return [x / s for x in e]


def layer_norm(row, gamma, beta):
    n = len(row)
    mean = mp.fsum(row) / n
    var = mp.fsum((x - mean) ** 2 for x in row) / n
    inv = 1 / mp.sqrt(var + EPS)
    return [(x - mean) * inv * mpf(g) + mpf(b) for x, g, b in zip(row, gamma, beta)]


def affine(row, w, b):
    out = [mp.fsum(row[k] * mpf(w[k][j]) for k in range(len(w))) for j in range(len(w[0]))]
    return [o + mpf(bj) for o, bj in zip(out, b)]


def cross_attention(q_in, kv_in, p, heads):
    q = matmul(q_in, mpm(p["wq"]))
    k = matmul(kv_in, mpm(p["wk"]))
    v = matmul(kv_in, mpm(p["wv"]))
    c = len(p["wq"])
    d = c // heads
    scale = 1 / mp.sqrt(d)
    cat = [[mpf(0)] * c for _ in q]
    for h in range(heads):
        cols = range(h * d, (h + 1) * d)
        for i, qi in enumerate(q):
            scores = [scale * mp.fsum(qi[j] * kr[j] for j in cols) for kr in k]
            w = softmax(scores)
            for j in cols:
                cat[i][j] = mp.fsum(w[t] * v[t][j] for t in range(len(v)))
    return matmul(cat, mpm(p["wo"]))


def ffn_sublayer(x1, p):
    out = []
    for row in x1:
        y = layer_norm(row, p["norm2.gamma"], p["norm2.beta"])
        hidden = [max(v, mpf(0)) for v in affine(y, p["ffn.w1"], p["ffn.b1"])]
        f = affine(hidden, p["ffn.w2"], p["ffn.b2"])
        out.append([a + b for a, b in zip(row, f)])
    return out


def attn_params(rng, c, prefix=""):
    b = 1.0 / math.sqrt(c)
    return {prefix + k: rand_matrix(rng, c, c, b) for k in ["wq", "wk", "wv", "wo"]}


def ffn_params(rng, c, hidden):
    w1, b1 = linear_init(rng, c, hidden)
    w2, b2 = linear_init(rng, hidden, c)
    return {"ffn.w1": w1, "ffn.b1": b1, "ffn.w2": w2, "ffn.b2": b2}


def norms(rng, c, *names):
    out = {}
    for n in names:
        out[n + ".gamma"], out[n + ".beta"] = norm_init(rng, c)
    return out


def sub(p, prefix):
    return {k[len(prefix):]: v for k, v in p.items() if k.startswith(prefix)}


def mhsa_case(rng):
    n, c, heads = 7, 8, 2
    x = rand_matrix(rng, n, c, 1.0)
    p = attn_params(rng, c)
    xm = mpm(x)
    return {"heads": heads}, x, p, cross_attention(xm, xm, p, heads)


def vanilla_case(rng):
    n, c, heads, ratio = 6, 8, 2, 2
    x = rand_matrix(rng, n, c, 1.0)
    p = {}
    p.update(norms(rng, c, "norm1"))
    p.update(attn_params(rng, c, "attn."))
    p.update(norms(rng, c, "norm2"))
    p.update(ffn_params(rng, c, c * ratio))
    xm = mpm(x)
    y = [layer_norm(r, p["norm1.gamma"], p["norm1.beta"]) for r in xm]
    a = cross_attention(y, y, sub(p, "attn."), heads)
    x1 = [[u + v for u, v in zip(r, s)] for r, s in zip(xm, a)]
    return {"heads": heads, "ffn_ratio": ratio}, x, p, ffn_sublayer(x1, p)


def cst_case(rng):
    n, c, r_c, ratio = 10, 8, 2, 2
    h = c // r_c
    x = rand_matrix(rng, n, c, 1.0)
    p = {}
    p.update(norms(rng, c, "norm1"))
    p["w_g"] = rand_matrix(rng, c, 1, 1.0 / math.sqrt(c))
    p["t1.weight"], p["t1.bias"] = linear_init(rng, c, h)
    p.update(norms(rng, h, "ctx_norm"))
    p["t2.weight"], p["t2.bias"] = linear_init(rng, h, c)
    p.update(norms(rng, c, "norm2"))
    p.update(ffn_params(rng, c, c * ratio))
    xm = mpm(x)
    g = softmax([mp.fsum(r[j] * mpf(p["w_g"][j][0]) for j in range(c)) for r in xm])
    ctx = [mp.fsum(g[i] * xm[i][j] for i in range(n)) for j in range(c)]
    t = affine(ctx, p["t1.weight"], p["t1.bias"])
    t = [max(v, mpf(0)) for v in layer_norm(t, p["ctx_norm.gamma"], p["ctx_norm.beta"])]
    delta = affine(t, p["t2.weight"], p["t2.bias"])
    out = [[v + d for v, d in zip(r, delta)] for r in xm]
    return {"ctx_reduction": r_c, "ffn_ratio": ratio}, x, p, out


def sgst_case(rng):
    n, c, heads, ratio = 12, 8, 2, 2
    k = math.ceil(n / 4)
    while True:
        x = rand_matrix(rng, n, c, 1.0)
        p = {}
        p.update(norms(rng, c, "norm1"))
        p["w_h"] = rand_matrix(rng, c, 1, 1.0 / math.sqrt(c))
        p["w_m"] = rand_matrix(rng, n, k, 1.0 / math.sqrt(n))
        p.update(attn_params(rng, c, "attn."))
        p.update(norms(rng, c, "norm2"))
        p.update(ffn_params(rng, c, c * ratio))
        xm = mpm(x)
        y = [layer_norm(r, p["norm1.gamma"], p["norm1.beta"]) for r in xm]
        logits = [mp.fsum(r[j] * mpf(p["w_h"][j][0]) for j in range(c)) for r in y]
        fg = [i for i in range(n) if logits[i] >= 0]
        bg = [i for i in range(n) if logits[i] < 0]
        # both branches populated and no token near the threshold
        if fg and bg and min(abs(v) for v in logits) > 1e-6:
            break
    h = [1 / (1 + mp.exp(-v)) for v in logits]
    cols = transpose(mpm(p["w_m"]))
    wn_t = [softmax(col) for col in cols]  # K x N, each row a column of wn
    out = [list(r) for r in xm]
    for idx, coef in [(fg, h), (bg, [1 - v for v in h])]:
        e = [[coef[i] * v for v in y[i]] for i in range(n)]
        merged = matmul(wn_t, e)
        queries = [y[i] for i in idx]
        a = cross_attention(queries, merged, sub(p, "attn."), heads)
        x1 = [[u + v for u, v in zip(xm[i], s)] for i, s in zip(idx, a)]
        for i, row in zip(idx, ffn_sublayer(x1, p)):
            out[i] = row
    meta = {"heads": heads, "ffn_ratio": ratio, "merge_ratio": "1/4", "merge_norm": "softmax", "fg_only": "false"}
    return meta, x, p, out


def shape_of(v):
    if isinstance(v[0], list):
        return [len(v), len(v[0])]
    return [len(v)]


def flat(v):
    return [float(e) for row in v for e in row] if isinstance(v[0], list) else [float(e) for e in v]


def encode(shape, values):
    out = b"ISOT" + struct.pack("<I", len(shape))
    out += b"".join(struct.pack("<Q", d) for d in shape)
    return out + b"".join(struct.pack("<d", v) for v in values)


def write_fixture(path, op, meta, x, params, expected):
    tensors = [("x", x)] + [("param." + k, v) for k, v in params.items()] + [("expected", expected)]
    head = ["ISOCKPT v1", f"meta op {op}"] + [f"meta {k} {v}" for k, v in meta.items()]
    payload = b""
    for name, value in tensors:
        shape = shape_of(value)
        blob = encode(shape, flat(value))
        head.append(f"tensor {name} {','.join(map(str, shape))} {len(payload)} {len(blob)}")
        payload += blob
    head.append("end")
    path.write_bytes(("\n".join(head) + "\n").encode() + payload)


def main():
    out_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "crates/core/fixtures/golden"
    out_dir.mkdir(parents=True, exist_ok=True)
    cases = [("mhsa", mhsa_case), ("cst_global_context", cst_case), ("vanilla_block", vanilla_case), ("sgst_block", sgst_case)]
    for seed, (op, build) in enumerate(cases):
        meta, x, params, expected = build(random.Random(1000 + seed))
        write_fixture(out_dir / f"{op}.ckpt", op, meta, x, params, expected)
        print(f"wrote {op}.ckpt")


if __name__ == "__main__":
    main()
