"""Pure numpy versions of the compiled kernels, used when the extension is unavailable."""

import numpy as np


def rasterize_polygons(polygons, height, width):
    out = np.zeros((height, width), dtype=np.uint8)
    cx = np.arange(width, dtype=np.float64) + 0.5
    cy = np.arange(height, dtype=np.float64) + 0.5
    for poly in polygons:
        rings = [np.asarray(rg, dtype=np.float64) for rg in poly]
        rings = [rg for rg in rings if len(rg)]
        if not rings:
            continue
        parity = np.zeros((height, width), dtype=bool)
        for ring in rings:
            nxt = np.roll(ring, -1, axis=0)
            for (x0, y0), (x1, y1) in zip(ring, nxt):
                rows = (y0 > cy) != (y1 > cy)
                if not rows.any():
                    continue
                y = cy[rows]
                xint = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
                parity[rows] ^= cx[None, :] < xint[:, None]
        out |= parity.astype(np.uint8)
    return out


def confusion_counts(pred, label, threshold):
    pos = np.asarray(pred, dtype=np.float64) >= threshold
    truth = np.asarray(label) != 0
    tp = int(np.count_nonzero(pos & truth))
    fp = int(np.count_nonzero(pos & ~truth))
    fn = int(np.count_nonzero(~pos & truth))
    tn = int(pos.size - tp - fp - fn)
    return tp, fp, fn, tn


def window_sums(label, origins, size):
    y = (np.asarray(label) != 0).astype(np.int64)
    h, w = y.shape
    org = np.asarray(origins, dtype=np.int64).reshape(-1, 2)
    if len(org) and (
        (org < 0).any() or (org[:, 0] + size > h).any() or (org[:, 1] + size > w).any()
    ):
        raise ValueError(f"window of size {size} exceeds {h}x{w} raster")
    s = np.zeros((h + 1, w + 1), dtype=np.int64)
    s[1:, 1:] = y.cumsum(0).cumsum(1)
    r, c = org[:, 0], org[:, 1]
    return s[r + size, c + size] - s[r, c + size] - s[r + size, c] + s[r, c]
