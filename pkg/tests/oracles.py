"""Scalar-loop reference implementations.

Deliberately naive: plain Python floats and explicit loops, sharing no code
with the package, so they can serve as independent checks.
"""

import math


def matmul(A, B):
    n, k, m = len(A), len(B), len(B[0])
    return [[math.fsum(A[i][p] * B[p][j] for p in range(k)) for j in range(m)] for i in range(n)]


def dot(a, b):
    return math.fsum(x * y for x, y in zip(a, b))


def softmax_row(row):
    finite = [x for x in row if x != -math.inf]
    mx = max(finite)
    e = [0.0 if x == -math.inf else math.exp(x - mx) for x in row]
    s = math.fsum(e)
    return [x / s for x in e]


def attend(q, keys, values, multipliers, d, strict=False):
    """One query against a list of keys with per-key logit multipliers."""
    logits = []
    for k, m in zip(keys, multipliers):
        if strict and m == 0:
            logits.append(-math.inf)
        else:
            logits.append(m * dot(q, k) / math.sqrt(d))
    p = softmax_row(logits)
    return [math.fsum(p[j] * values[j][c] for j in range(len(keys))) for c in range(len(values[0]))]


def rsa(Q, K, V, refs, masks, d, strict=False):
    keys = list(K)
    vals = list(V)
    mult = [1.0] * len(K)
    for (Ki, Vi), row in zip(refs, masks):
        keys += list(Ki)
        vals += list(Vi)
        mult += list(row)
    return [attend(q, keys, vals, mult, d, strict) for q in Q]


def rba(Q, K, V, refs, labels, masks, d, strict=False):
    out = []
    for s, q in enumerate(Q):
        lab = labels[s]
        if lab == 0:
            out.append(attend(q, K, V, [1.0] * len(K), d))
        else:
            Ki, Vi = refs[lab - 1]
            out.append(attend(q, list(K) + list(Ki), list(V) + list(Vi),
                              [1.0] * len(K) + list(masks[lab - 1]), d, strict))
    return out


def argmax_first(row):
    best, bi = row[0], 0
    for i, x in enumerate(row):
        if x > best:
            best, bi = x, i
    return bi


def segment(C, groups):
    labels = []
    for row in C:
        tok = argmax_first(row)
        lab = 0
        for i, g in enumerate(groups, start=1):
            if tok in g:
                lab = i
        labels.append(lab)
    return labels


def bilinear_half_pixel(img, H, W):
    """Reference bilinear resize with half-pixel centres and edge clamping."""
    h, w = len(img), len(img[0])

    def coord(o, n_in, n_out):
        x = (o + 0.5) * n_in / n_out - 0.5
        x = min(max(x, 0.0), n_in - 1)
        lo = int(math.floor(x))
        hi = min(lo + 1, n_in - 1)
        return lo, hi, x - lo

    out = []
    for y in range(H):
        y0, y1, fy = coord(y, h, H)
        row = []
        for x in range(W):
            x0, x1, fx = coord(x, w, W)
            top = img[y0][x0] * (1 - fx) + img[y0][x1] * fx
            bot = img[y1][x0] * (1 - fx) + img[y1][x1] * fx
            row.append(top * (1 - fy) + bot * fy)
        out.append(row)
    return out


def aggregate(maps, H, W):
    """maps: list of (h, w, K) nested lists."""
    K = len(maps[0][0][0])
    acc = [[[0.0] * K for _ in range(W)] for _ in range(H)]
    for m in maps:
        for k in range(K):
            chan = [[m[y][x][k] for x in range(len(m[0]))] for y in range(len(m))]
            up = bilinear_half_pixel(chan, H, W)
            for y in range(H):
                for x in range(W):
                    acc[y][x][k] += up[y][x] / len(maps)
    rows = []
    for y in range(H):
        for x in range(W):
            s = math.fsum(acc[y][x])
            rows.append([v / s for v in acc[y][x]])
    return rows


def correspondence(Q, ref_keys):
    out = []
    for q in Q:
        best, arg = None, None
        for i, Ki in enumerate(ref_keys):
            for j, k in enumerate(Ki):
                s = dot(q, k)
                if best is None or s > best:
                    best, arg = s, (i, j)
        out.append(arg)
    return out


def fidelity(gen, labels, label, ref, ref_mask):
    """gen/ref: H x W x 3 nested lists in [0, 1]; labels: gh x gw; ref_mask: H x W bools."""
    H, W = len(gen), len(gen[0])
    gh, gw = len(labels), len(labels[0])
    ph, pw = H // gh, W // gw

    def patch(img, gy, gx):
        v = [2 * img[gy * ph + y][gx * pw + x][c] - 1 for y in range(ph) for x in range(pw) for c in range(3)]
        n = math.sqrt(math.fsum(a * a for a in v))
        return [a / n for a in v] if n > 0 else [0.0] * len(v)

    def ref_cell(gy, gx):
        inside = sum(ref_mask[gy * ph + y][gx * pw + x] for y in range(ph) for x in range(pw))
        return inside / (ph * pw) >= 0.5

    gen_px = [gen[y][x] for y in range(H) for x in range(W) if labels[y // ph][x // pw] == label]
    ref_px = [ref[y][x] for y in range(H) for x in range(W) if ref_mask[y][x]]
    mg = [math.fsum(p[c] for p in gen_px) / len(gen_px) for c in range(3)]
    mr = [math.fsum(p[c] for p in ref_px) / len(ref_px) for c in range(3)]
    dist = math.sqrt(math.fsum((a - b) ** 2 for a, b in zip(mg, mr)))
    A = [patch(gen, gy, gx) for gy in range(gh) for gx in range(gw) if labels[gy][gx] == label]
    B = [patch(ref, gy, gx) for gy in range(gh) for gx in range(gw) if ref_cell(gy, gx)]
    cos = math.fsum(dot(a, b) for a in A for b in B) / (len(A) * len(B))
    return dist, cos
