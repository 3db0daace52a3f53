"""Independent reference implementations used only by the tests.

Everything here is deliberately naive: per-pixel Python loops and scalar math.
"""

import math


def point_in_polygon(x, y, rings):
    """Crossing-number test of one point against all rings of a polygon (even-odd)."""
    inside = False
    for ring in rings:
        n = len(ring)
        for i in range(n):
            x0, y0 = ring[i]
            x1, y1 = ring[(i + 1) % n]
            if (y0 > y) != (y1 > y):
                xint = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
                if x < xint:
                    inside = not inside
    return inside


def rasterize_brute(polygons, height, width):
    out = [[0] * width for _ in range(height)]
    for r in range(height):
        for c in range(width):
            for rings in polygons:
                if point_in_polygon(c + 0.5, r + 0.5, rings):
                    out[r][c] = 1
                    break
    return out


def confusion_brute(pred, label, threshold):
    tp = fp = fn = tn = 0
    for p, y in zip(pred.ravel().tolist(), label.ravel().tolist()):
        if p >= threshold and y:
            tp += 1
        elif p >= threshold:
            fp += 1
        elif y:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def metrics_brute(tp, fp, fn):
    p = 0.0 if tp + fp == 0 else tp / (tp + fp)
    r = 0.0 if tp + fn == 0 else tp / (tp + fn)
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f


def power_jaccard_scalar(p, y, q, eps):
    inter = sum(a * b for a, b in zip(p, y))
    denom = sum(a**q for a in p) + sum(b**q for b in y) - inter
    return 1.0 - (inter + eps) / (denom + eps)


def central_differences(f, x, h=1e-4):
    """Gradient of scalar f at numpy array x by central differences."""
    import numpy as np

    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def window_sum_brute(label, r, c, size):
    return int(sum(int(label[i][j] != 0) for i in range(r, r + size) for j in range(c, c + size)))


def binomial_sigma(p, n):
    return math.sqrt(p * (1 - p) / n)


def random_polygons(rng, n, size):
    """Star-shaped random polygons, possibly crossing the grid border."""
    import numpy as np

    polys = []
    for _ in range(n):
        k = int(rng.integers(3, 8))
        cx, cy = rng.uniform(0, size, 2)
        ang = np.sort(rng.uniform(0, 2 * np.pi, k))
        rad = rng.uniform(1, size / 3, k)
        ring = np.stack([cx + rad * np.cos(ang), cy + rad * np.sin(ang)], axis=1)
        polys.append([ring])
    return polys
