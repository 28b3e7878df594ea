"""Slow reference implementations used only by the tests."""
import numpy as np


def naive_ssim(x, y, data_range=2.0, size=11, sigma=1.5):
    """SSIM by explicit loops over every fully-inside window position."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 3:
        x, y = x.mean(axis=0), y.mean(axis=0)
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    w = np.zeros((size, size))
    for i in range(size):
        for j in range(size):
            w[i, j] = np.exp(-((i - (size - 1) / 2) ** 2 + (j - (size - 1) / 2) ** 2)
                             / (2 * sigma ** 2))
    w /= w.sum()
    vals = []
    for r in range(x.shape[0] - size + 1):
        for c in range(x.shape[1] - size + 1):
            px, py = x[r:r + size, c:c + size], y[r:r + size, c:c + size]
            mx, my = (w * px).sum(), (w * py).sum()
            vx = (w * (px - mx) ** 2).sum()
            vy = (w * (py - my) ** 2).sum()
            cxy = (w * (px - mx) * (py - my)).sum()
            vals.append((2 * mx * my + c1) * (2 * cxy + c2)
                        / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))
