"""Reference TMQI, a line-by-line numpy/scipy port of the authors' published
MATLAB implementation (TMQI.m: FeatureSIM, Slocal, StatisticalNaturalness).

HDR files are decoded with OpenCV's Radiance reader, LDR files with Pillow,
so no code is shared with the Rust implementation under test.

    python3 tmqi_reference.py <fixtures/tmqi>        # writes manifest.txt
    python3 tmqi_reference.py --rgbe <fixtures>      # writes rgbe_reference.txt
"""

import os
import sys

import cv2
import numpy as np
from PIL import Image
from scipy.signal import correlate2d
from scipy.stats import beta, norm


def fspecial_gaussian(size=11, sigma=1.5):
    r = (size - 1) / 2.0
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    h = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    h[h < np.finfo(float).eps * h.max()] = 0
    return h / h.sum()


def filter2_valid(win, img):
    return correlate2d(img, win, mode="valid")


def rgb_to_y(rgb):
    return 0.2126 * rgb[..., 0] + 0.7152 * rgb[..., 1] + 0.0722 * rgb[..., 2]


def slocal(img1, img2, window, sf):
    C1, C2 = 0.01, 10.0
    window = window / window.sum()
    mu1 = filter2_valid(window, img1)
    mu2 = filter2_valid(window, img2)
    mu1_sq, mu2_sq, mu1_mu2 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    sigma1_sq = filter2_valid(window, img1 * img1) - mu1_sq
    sigma2_sq = filter2_valid(window, img2 * img2) - mu2_sq
    sigma1 = np.sqrt(np.maximum(0, sigma1_sq))
    sigma2 = np.sqrt(np.maximum(0, sigma2_sq))
    sigma12 = filter2_valid(window, img1 * img2) - mu1_mu2
    CSF = 100.0 * 2.6 * (0.0192 + 0.114 * sf) * np.exp(-((0.114 * sf) ** 1.1))
    u_hdr = 128 / (1.4 * CSF)
    sig_hdr = u_hdr / 3
    sigma1p = norm.cdf(sigma1, u_hdr, sig_hdr)
    u_ldr = u_hdr
    sig_ldr = u_ldr / 3
    sigma2p = norm.cdf(sigma2, u_ldr, sig_ldr)
    s_map = ((2 * sigma1p * sigma2p + C1) / (sigma1p * sigma1p + sigma2p * sigma2p + C1)) * (
        (sigma12 + C2) / (sigma1 * sigma2 + C2)
    )
    return s_map.mean()


def imfilter_2x2_symmetric_same(img):
    # 2x2 ones/4, correlation anchored at the top-left tap, symmetric border
    p = np.pad(img, ((0, 1), (0, 1)), mode="symmetric")
    return 0.25 * (p[:-1, :-1] + p[1:, :-1] + p[:-1, 1:] + p[1:, 1:])


def feature_sim(L_hdr, L_ldr, level, weight, window):
    f = 32.0
    s_local = []
    for _ in range(level):
        f = f / 2
        s_local.append(slocal(L_hdr, L_ldr, window, f))
        L_hdr = imfilter_2x2_symmetric_same(L_hdr)[::2, ::2]
        L_ldr = imfilter_2x2_symmetric_same(L_ldr)[::2, ::2]
    s_local = np.array(s_local)
    return np.prod(np.power(s_local, weight))


def std2(x):
    return 0.0 if x.size == 1 else np.std(x, ddof=1)


def statistical_naturalness(L_ldr):
    u = L_ldr.mean()
    h, w = L_ldr.shape
    I1 = np.zeros_like(L_ldr)
    for by in range(0, h, 11):
        for bx in range(0, w, 11):
            blk = L_ldr[by : by + 11, bx : bx + 11]
            I1[by : by + 11, bx : bx + 11] = std2(blk)
    co = I1.mean()
    beta_mode = (4.4 - 1) / (4.4 + 10.1 - 2)
    C_0 = beta.pdf(beta_mode, 4.4, 10.1)
    C = beta.pdf(co / 64.29, 4.4, 10.1)
    pc = C / C_0
    B = norm.pdf(u, 115.94, 27.99)
    pb = B / norm.pdf(115.94, 115.94, 27.99)
    return pb * pc


def tmqi(hdr_rgb, ldr_rgb):
    a, Alpha, Beta = 0.8012, 0.3046, 0.7088
    lvl = 5
    weight = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
    window = fspecial_gaussian(11, 1.5)
    L_hdr = rgb_to_y(hdr_rgb)
    lmin, lmax = L_hdr.min(), L_hdr.max()
    L_hdr = np.round((2.0**32 - 1) / (lmax - lmin)) * (L_hdr - lmin)
    L_ldr = rgb_to_y(ldr_rgb)
    S = feature_sim(L_hdr, L_ldr, lvl, weight, window)
    N = statistical_naturalness(L_ldr)
    Q = a * S**Alpha + (1 - a) * N**Beta
    return Q, S, N


def read_hdr(path):
    bgr = cv2.imread(path, cv2.IMREAD_ANYDEPTH | cv2.IMREAD_COLOR)
    if bgr is None:
        raise IOError(path)
    return bgr[..., ::-1].astype(np.float64)


def read_ldr(path):
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)


PAIRS = [
    ("window", "window.hdr", "window.png"),
    ("sunset", "sunset.hdr", "sunset.png"),
    ("lamps", "lamps.hdr", "lamps.png"),
    ("checker", "checker.hdr", "checker.png"),
    ("foliage", "foliage.hdr", "foliage.png"),
    ("affine", "foliage.hdr", "affine.png"),
    ("affine_low", "foliage.hdr", "affine_low.png"),
    ("affine_shift", "foliage.hdr", "affine_shift.png"),
    ("constant", "foliage.hdr", "constant.png"),
    ("log", "foliage.hdr", "log.png"),
]


def write_manifest(d):
    lines = [
        "# TMQI reference scores from tests/oracle/tmqi_reference.py",
        "# name hdr ldr Q S N",
    ]
    for name, h, l in PAIRS:
        Q, S, N = tmqi(read_hdr(os.path.join(d, h)), read_ldr(os.path.join(d, l)))
        lines.append(f"{name} {h} {l} {Q:.12f} {S:.12f} {N:.12e}")
    with open(os.path.join(d, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    print("\n".join(lines))


def write_rgbe_reference(d):
    lines = ["# file x y r g b, decoded by OpenCV's Radiance reader"]
    files = ["pipeline_8x8.hdr"] + [os.path.join("tmqi", n + ".hdr") for n, _, _ in PAIRS[:5]]
    for name in files:
        img = read_hdr(os.path.join(d, name))
        h, w, _ = img.shape
        for y, x in [(0, 0), (h // 2, w // 3), (h - 1, w - 1), (h // 7, w - 2)]:
            r, g, b = img[y, x]
            lines.append(f"{name} {x} {y} {float(r)!r} {float(g)!r} {float(b)!r}")
        lines.append(f"{name} sum {float(img.sum())!r}")
    with open(os.path.join(d, "rgbe_reference.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


if __name__ == "__main__":
    if sys.argv[1] == "--rgbe":
        write_rgbe_reference(sys.argv[2])
    else:
        write_manifest(sys.argv[1])
