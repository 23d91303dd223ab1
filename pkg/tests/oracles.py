"""Brute-force reference implementations used by the tests.

Everything here is written with explicit loops straight from the defining
formulas and shares no code with the package.
"""
import numpy as np


def conv_oracle(x, w, b=None):
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((B, O, H, W))
    for bi in range(B):
        for o in range(O):
            for h in range(H):
                for ww in range(W):
                    out[bi, o, h, ww] = np.sum(w[o] * xp[bi, :, h:h + k, ww:ww + k])
            if b is not None:
                out[bi, o] += b[o]
    return out


def relu(x):
    return np.where(x > 0, x, 0.0)


def crnn_i_oracle(h_in, h_prev, w_l, w_i, b):
    """relu(W_l * h_in[t] + W_i * h_prev[t] + b) for every batch item and frame."""
    B, T = h_in.shape[:2]
    out = np.zeros((B, T, w_l.shape[0]) + h_in.shape[3:])
    for t in range(T):
        pre = conv_oracle(h_in[:, t], w_l, b)
        if h_prev is not None:
            pre += conv_oracle(h_prev[:, t], w_i)
        out[:, t] = relu(pre)
    return out


def bcrnn_oracle(h_in, h_prev, w_l, w_t, w_i, b_fwd, b_bwd):
    """Two explicit recurrences over time, summed."""
    B, T = h_in.shape[:2]
    shape = (B, w_l.shape[0]) + h_in.shape[3:]
    fwd = [None] * T
    bwd = [None] * T
    state = np.zeros(shape)
    for t in range(T):
        pre = conv_oracle(h_in[:, t], w_l, b_fwd) + conv_oracle(state, w_t)
        if h_prev is not None:
            pre += conv_oracle(h_prev[:, t], w_i)
        state = fwd[t] = relu(pre)
    state = np.zeros(shape)
    for t in reversed(range(T)):
        pre = conv_oracle(h_in[:, t], w_l, b_bwd) + conv_oracle(state, w_t)
        if h_prev is not None:
            pre += conv_oracle(h_prev[:, t], w_i)
        state = bwd[t] = relu(pre)
    return np.stack([f + r for f, r in zip(fwd, bwd)], axis=1)


def normalise(a, b):
    a, b = np.abs(a).astype(np.float64), np.abs(b).astype(np.float64)
    return a / b.max(), b / b.max()


def psnr_oracle(a, b):
    a, b = normalise(a, b)
    total = 0.0
    for va, vb in zip(a.ravel(), b.ravel()):
        total += (va - vb) ** 2
    return 10 * np.log10(1.0 / (total / a.size))


def ssim_oracle(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03):
    a, b = normalise(a, b)
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    c1, c2 = k1 ** 2, k2 ** 2
    frames = []
    for fa, fb in zip(a.reshape((-1,) + a.shape[-2:]), b.reshape((-1,) + b.shape[-2:])):
        vals = []
        for i in range(fa.shape[0] - size + 1):
            for j in range(fa.shape[1] - size + 1):
                pa, pb = fa[i:i + size, j:j + size], fb[i:i + size, j:j + size]
                ma, mb = np.sum(g * pa), np.sum(g * pb)
                va = np.sum(g * (pa - ma) ** 2)
                vb = np.sum(g * (pb - mb) ** 2)
                cov = np.sum(g * (pa - ma) * (pb - mb))
                vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
        frames.append(np.mean(vals))
    return float(np.mean(frames))


def log_oracle_kernel(size=15, sigma=1.5):
    k = np.zeros((size, size))
    c = (size - 1) / 2
    for i in range(size):
        for j in range(size):
            rr = (i - c) ** 2 + (j - c) ** 2
            k[i, j] = np.exp(-rr / (2 * sigma ** 2))
    k /= k.sum()
    for i in range(size):
        for j in range(size):
            rr = (i - c) ** 2 + (j - c) ** 2
            k[i, j] *= (rr - 2 * sigma ** 2) / sigma ** 4
    return k - k.mean()


def hfen_oracle(a, b):
    a, b = normalise(a, b)
    k = log_oracle_kernel()
    p = k.shape[0] // 2

    def filt(f):
        fp = np.pad(f, p, mode="symmetric")
        out = np.zeros_like(f)
        for i in range(f.shape[0]):
            for j in range(f.shape[1]):
                out[i, j] = np.sum(k * fp[i:i + k.shape[0], j:j + k.shape[1]])
        return out

    vals = []
    for fa, fb in zip(a.reshape((-1,) + a.shape[-2:]), b.reshape((-1,) + b.shape[-2:])):
        la, lb = filt(fa), filt(fb)
        vals.append(np.sqrt(np.sum((la - lb) ** 2)) / np.sqrt(np.sum(lb ** 2)))
    return float(np.mean(vals))


def relative_error(got, want):
    return float(np.max(np.abs(got - want)) / max(np.max(np.abs(want)), 1e-300))
