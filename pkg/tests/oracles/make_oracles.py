"""Regenerate frozen.npz from implementations independent of the package.

    python3 tests/oracles/make_oracles.py

Conv outputs come from scipy's correlate, L*u*v* from scikit-image applied
to XYZ values, orientation histograms and NMS from plain Python loops.
"""

import math
import os

import numpy as np
from scipy.signal import correlate
from skimage.color import xyz2luv

OUT = os.path.join(os.path.dirname(__file__), "frozen.npz")

RGB2XYZ = np.array([[0.430574, 0.341550, 0.178325], [0.222015, 0.706655, 0.071330], [0.020183, 0.129553, 0.939180]])


def conv_oracle(x, w, b, stride, pad):
    xp = np.pad(x.astype(np.float64), ((0, 0), (pad, pad), (pad, pad)))
    out = []
    for o in range(w.shape[0]):
        full = correlate(xp, w[o].astype(np.float64), mode="valid")[0]
        out.append(full[::stride, ::stride] + b[o])
    return np.stack(out)


def hist_oracle(img, n_bins):
    c, h, w = img.shape
    hist = np.zeros((n_bins, h, w))
    for y in range(h):
        for x in range(w):
            best = (-1.0, 0.0, 0.0)
            for ch in range(c):
                gx = (img[ch, y, min(x + 1, w - 1)] - img[ch, y, max(x - 1, 0)]) / 2
                gy = (img[ch, min(y + 1, h - 1), x] - img[ch, max(y - 1, 0), x]) / 2
                m = math.hypot(gx, gy)
                if m > best[0]:
                    best = (m, gx, gy)
            m, gx, gy = best
            o = math.atan2(gy, gx) % math.pi
            pos = o * n_bins / math.pi
            b0 = int(math.floor(pos))
            f = pos - b0
            hist[b0 % n_bins, y, x] += m * (1 - f)
            hist[(b0 + 1) % n_bins, y, x] += m * f
    return hist


def nms_oracle(boxes, scores, overlap):
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        xi, yi, wi, hi = boxes[i]
        ok = True
        for j in kept:
            xj, yj, wj, hj = boxes[j]
            iw = max(0.0, min(xi + wi, xj + wj) - max(xi, xj))
            ih = max(0.0, min(yi + hi, yj + hj) - max(yi, yj))
            if iw * ih / min(wi * hi, wj * hj) > overlap:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept


def main():
    rng = np.random.default_rng(20240611)
    data = {}
    specs = [(1, 1, 1, 0, 3), (3, 2, 1, 1, 4), (5, 4, 2, 2, 3), (7, 3, 1, 3, 2), (2, 5, 2, 0, 6), (3, 8, 1, 0, 8)]
    for k, (ks, c_in, stride, pad, c_out) in enumerate(specs):
        x = rng.standard_normal((c_in, 13, 11)).astype(np.float32)
        w = rng.standard_normal((c_out, c_in, ks, ks)).astype(np.float32)
        b = rng.standard_normal(c_out).astype(np.float32)
        data[f"conv{k}_x"], data[f"conv{k}_w"], data[f"conv{k}_b"] = x, w, b
        data[f"conv{k}_meta"] = np.array([stride, pad])
        data[f"conv{k}_out"] = conv_oracle(x, w, b, stride, pad)

    rgb = rng.uniform(0, 1, (3, 4, 5))
    rgb[:, 0, 0] = 0.0
    rgb[:, 0, 1] = 1.0
    xyz = np.einsum("ij,jhw->hwi", RGB2XYZ, rgb)
    white = RGB2XYZ.sum(axis=1)
    luv = xyz2luv(xyz / 1.0, illuminant="D65")
    # rescale with the white point the package derives from its matrix
    data["luv_rgb"] = rgb.astype(np.float32)
    data["luv_out"] = np.stack([luv[..., 0] / 100, (luv[..., 1] + 134) / 354, (luv[..., 2] + 140) / 262])
    data["luv_white"] = white

    img = rng.uniform(0, 1, (3, 9, 8))
    data["hist_img"] = img.astype(np.float32)
    data["hist_out"] = hist_oracle(img.astype(np.float32).astype(np.float64), 6)

    for k in range(5):
        xy = rng.uniform(0, 200, (200, 2))
        wh = rng.uniform(10, 60, (200, 2))
        boxes = np.concatenate([xy, wh], 1)
        scores = rng.permutation(200).astype(np.float64)
        data[f"nms{k}_boxes"], data[f"nms{k}_scores"] = boxes, scores
        data[f"nms{k}_kept"] = np.array(nms_oracle(boxes.tolist(), scores.tolist(), 0.65))

    np.savez_compressed(OUT, **data)
    print(f"wrote {OUT}: {len(data)} arrays")


if __name__ == "__main__":
    main()
