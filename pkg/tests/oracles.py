"""Reference implementations the tests compare against.

Everything here is deliberately naive (explicit loops, textbook formulas) and
shares no code with the package.
"""
import numpy as np


def central_diff(f, x, h=1e-4):
    """Central finite-difference gradient of scalar f at float64 array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(a, b, floor=1e-6):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def naive_conv(x, w, stride=1, pad=0, mode="zero"):
    """x (N,H,W,C), w (k,k,C,O); loops over every output element."""
    N, H, W, C = x.shape
    k, _, _, O = w.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="edge" if mode == "replicate" else "constant")
    Ho = (x.shape[1] - k) // stride + 1
    Wo = (x.shape[2] - k) // stride + 1
    out = np.zeros((N, Ho, Wo, O))
    for n in range(N):
        for y in range(Ho):
            for xx in range(Wo):
                patch = x[n, y * stride:y * stride + k, xx * stride:xx * stride + k, :]
                for o in range(O):
                    out[n, y, xx, o] = np.sum(patch * w[:, :, :, o])
    return out


def sigmoid(z):
    return 1 / (1 + np.exp(-z))


def naive_gru(h, x, w_zr, b_zr, w_h, b_h):
    Ch = h.shape[-1]
    p = w_zr.shape[0] // 2
    zr = sigmoid(naive_conv(np.concatenate([x, h], -1), w_zr, pad=p) + b_zr)
    z, r = zr[..., :Ch], zr[..., Ch:]
    cand = np.tanh(naive_conv(np.concatenate([x, r * h], -1), w_h, pad=p) + b_h)
    return z * h + (1 - z) * cand


def naive_local_filter(frame, filters):
    """frame (N,H,W,C), filters (N,H,W,K*K); edge-replicated neighbourhoods."""
    N, H, W, C = frame.shape
    K = int(round(filters.shape[-1] ** 0.5))
    p = K // 2
    out = np.zeros(frame.shape)
    for n in range(N):
        for i in range(H):
            for j in range(W):
                acc = np.zeros(C)
                for u in range(-p, p + 1):
                    for v in range(-p, p + 1):
                        ii = min(max(i + u, 0), H - 1)
                        jj = min(max(j + v, 0), W - 1)
                        acc += filters[n, i, j, (u + p) * K + (v + p)] * frame[n, ii, jj]
                out[n, i, j] = acc
    return out


def ssim_direct(x, y, win=11, sigma=1.5, K1=0.01, K2=0.03, L=1.0):
    """SSIM by explicit per-window weighted sums (valid windows only)."""
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    r = np.arange(win) - (win - 1) / 2
    g1 = np.exp(-r ** 2 / (2 * sigma ** 2))
    wgt = np.outer(g1, g1)
    wgt /= wgt.sum()
    C1, C2 = (K1 * L) ** 2, (K2 * L) ** 2
    vals = []
    for i in range(x.shape[0] - win + 1):
        for j in range(x.shape[1] - win + 1):
            a = x[i:i + win, j:j + win]
            b = y[i:i + win, j:j + win]
            ma, mb = (wgt * a).sum(), (wgt * b).sum()
            va = (wgt * (a - ma) ** 2).sum()
            vb = (wgt * (b - mb) ** 2).sum()
            cov = (wgt * (a - ma) * (b - mb)).sum()
            vals.append(((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma ** 2 + mb ** 2 + C1) * (va + vb + C2)))
    return float(np.mean(vals))


def gdl_direct(x, y, alpha=1.0):
    """GDL over 2-D images (H, W) by enumerating neighbour pairs."""
    H, W = x.shape
    terms = []
    for i in range(H):
        for j in range(W - 1):
            terms.append(abs(abs(x[i, j + 1] - x[i, j]) - abs(y[i, j + 1] - y[i, j])) ** alpha)
    for i in range(H - 1):
        for j in range(W):
            terms.append(abs(abs(x[i + 1, j] - x[i, j]) - abs(y[i + 1, j] - y[i, j])) ** alpha)
    return sum(terms) / len(terms)


def bce_direct(x, y, eps=1e-7):
    total = 0.0
    for a, b in zip(np.ravel(x), np.ravel(y)):
        b = min(max(b, eps), 1 - eps)
        total += -(a * np.log(b) + (1 - a) * np.log(1 - b))
    return total / np.size(x)


def mse_direct(x, y):
    return sum((a - b) ** 2 for a, b in zip(np.ravel(x), np.ravel(y))) / np.size(x)
