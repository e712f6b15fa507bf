"""Independent reference implementations used to freeze expected test values.

Everything here is written in the most literal way possible (scalar loops,
textbook formulas) and must stay independent of the library code paths it
checks.
"""

import math

import numpy as np


def conv2d_loops(x, k, bias, pad):
    """Naive loop cross-correlation with zero padding."""
    b_n, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((b_n, cout, h + 2 * pad - kh + 1, w + 2 * pad - kw + 1), dtype=np.float64)
    for b in range(b_n):
        for co in range(cout):
            for y in range(out.shape[2]):
                for xx in range(out.shape[3]):
                    acc = float(bias[co])
                    for ci in range(cin):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[b, ci, y + i, xx + j] * k[co, ci, i, j]
                    out[b, co, y, xx] = acc
    return out


def gelu_scalar(x: float) -> float:
    c0 = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + math.tanh(c0 * (x + 0.044715 * x ** 3)))


def sigmoid_scalar(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def soft_dice_loss_loops(logits, target, eps=1e-6):
    total = 0.0
    for b in range(logits.shape[0]):
        inter = sp = st = 0.0
        for v, t in zip(logits[b].reshape(-1), target[b].reshape(-1)):
            p = sigmoid_scalar(float(v))
            inter += p * float(t)
            sp += p
            st += float(t)
        total += 1.0 - (2.0 * inter + eps) / (sp + st + eps)
    return total / logits.shape[0]


def weighted_mse_loops(pred, target, sigma2):
    total = 0.0
    for b in range(pred.shape[0]):
        s = 0.0
        for p, t in zip(pred[b].reshape(-1), target[b].reshape(-1)):
            s += (float(p) - float(t)) ** 2
        total += s / (2.0 * sigma2)
    return total / pred.shape[0]


def dice_coefficient_loops(a, b):
    na = nb = ni = 0
    for x, y in zip(a.reshape(-1), b.reshape(-1)):
        na += int(x)
        nb += int(y)
        ni += int(x) * int(y)
    if na + nb == 0:
        return 1.0
    return 2.0 * ni / (na + nb)


def psnr_loops(pred, target, peak=1.0):
    s = 0.0
    n = 0
    for p, t in zip(pred.reshape(-1), target.reshape(-1)):
        p = min(max(float(p), 0.0), 1.0)
        t = min(max(float(t), 0.0), 1.0)
        s += (p - t) ** 2
        n += 1
    mse = s / n
    if mse < 1e-12:
        return 99.0
    return 10.0 * math.log10(peak * peak / mse)


def sobel_loops(img):
    h, w = img.shape
    p = np.pad(img.astype(np.float64), 1, mode="reflect")
    kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    ky = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]]
    mag = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            gx = gy = 0.0
            for i in range(3):
                for j in range(3):
                    gx += kx[i][j] * p[y + i, x + j]
                    gy += ky[i][j] * p[y + i, x + j]
            mag[y, x] = math.sqrt(gx * gx + gy * gy)
    peak = mag.max()
    return mag / peak if peak > 0 else mag


def dilate_loops(mask, radius=1):
    out = mask.copy().astype(np.float64)
    h, w = mask.shape
    for _ in range(radius):
        src = out.copy()
        for y in range(h):
            for x in range(w):
                v = 0.0
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w:
                            v = max(v, src[yy, xx])
                out[y, x] = v
    return out


def contour_loops(mask):
    """Boundary pixels (4-adjacent to background, edge-replicated), then one dilation."""
    h, w = mask.shape
    boundary = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            if mask[y, x] != 1:
                continue
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                yy = min(max(y + dy, 0), h - 1)
                xx = min(max(x + dx, 0), w - 1)
                if mask[yy, xx] == 0:
                    boundary[y, x] = 1
                    break
    return dilate_loops(boundary, 1)


def adam_scalar_trajectory(x0, grad_fn, steps, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    x, m, v = float(x0), 0.0, 0.0
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mh = m / (1 - beta1 ** t)
        vh = v / (1 - beta2 ** t)
        x -= lr * mh / (math.sqrt(vh) + eps)
    return x


def finite_difference_grads(f, arrays, eps=1e-5):
    """Central differences of a scalar function of numpy arrays."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f()
            flat[i] = orig - eps
            lo = f()
            flat[i] = orig
            gf[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads
