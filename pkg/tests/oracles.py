"""Brute-force reference implementations used only by the tests."""

import numpy as np


def conv2d_loops(x, k, stride=1, padding=0):
    H, W, C = x.shape
    kh, kw, _, co = k.shape
    xp = np.zeros((H + 2 * padding, W + 2 * padding, C))
    xp[padding:padding + H, padding:padding + W] = x
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((Ho, Wo, co))
    for i in range(Ho):
        for j in range(Wo):
            for o in range(co):
                acc = 0.0
                for a in range(kh):
                    for b in range(kw):
                        for c in range(C):
                            acc += xp[i * stride + a, j * stride + b, c] * k[a, b, c, o]
                out[i, j, o] = acc
    return out


def cosine_map_loops(z, protos, eps=1e-8):
    H, W, D = z.shape
    N = protos.shape[0]
    out = np.zeros((H, W, N))
    for h in range(H):
        for w in range(W):
            v = z[h, w]
            nv = max(np.sqrt(sum(t * t for t in v)), eps)
            for n in range(N):
                p = protos[n].reshape(-1)
                npn = max(np.sqrt(sum(t * t for t in p)), eps)
                out[h, w, n] = sum(a * b for a, b in zip(p, v)) / (npn * nv)
    return out


def linear_combinations_loops(cwm, w_lc):
    H, W, N = cwm.shape
    K, M, _ = w_lc.shape
    out = np.zeros((K, M, H, W))
    for k in range(K):
        for i in range(M):
            for h in range(H):
                for w in range(W):
                    out[k, i, h, w] = sum(w_lc[k, i, j] * cwm[h, w, j] for j in range(N))
    return out


def similarity_score_loops(lc, w_sp):
    K, M, H, W = lc.shape
    ss = np.zeros(K)
    for k in range(K):
        acc = 0.0
        for h in range(H):
            for w in range(W):
                for i in range(M):
                    acc += lc[k, i, h, w] * w_sp[k, i, h, w]
        ss[k] = acc
    return ss


def label_brute(shapes_grid):
    """Enumerate rows and test the triangle-left / circle-right rule."""
    TRIANGLE, CIRCLE = 1, 0
    return int(any(shapes_grid[r][0] == TRIANGLE and shapes_grid[r][2] == CIRCLE
                   for r in range(3)))


def mlp_loops(layers, x):
    acts = [list(x)]
    cur = list(x)
    for l, (w, b) in enumerate(layers):
        nxt = []
        for j in range(w.shape[1]):
            v = b[j] + sum(cur[i] * w[i, j] for i in range(w.shape[0]))
            if l < len(layers) - 1:
                v = max(v, 0.0)
            nxt.append(v)
        acts.append(nxt)
        cur = nxt
    return acts
