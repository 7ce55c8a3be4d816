"""Reference UIQM for the fixture images used by the Rust tests.

Written directly from the component definitions with numpy/scipy so the
values do not depend on the crate's own code. Prints one line per fixture:
name uicm uism uiconm uiqm.
"""
import math

import numpy as np
from scipy import ndimage

SIZE = 32
BLOCK = 8


def fixture(name):
    h = w = SIZE
    k = np.zeros((h, w, 3), dtype=np.int64)
    for y in range(h):
        for x in range(w):
            i = y * w + x
            if name == "checker":
                v = 255 * (((y // 4) + (x // 4)) % 2)
                k[y, x] = (v, v, v)
            elif name == "ramp":
                k[y, x] = (x * 8, y * 8, (x + y) * 4)
            elif name == "noise":
                for c in range(3):
                    j = i * 3 + c
                    k[y, x, c] = ((j * 2654435761) % (1 << 32)) >> 24
            elif name == "water":
                k[y, x] = (20 + (x * 3) % 40, 120 + (y * 5) % 90, 150 + (x * y) % 100)
            elif name == "disk":
                d2 = (x - 15.5) ** 2 + (y - 12.5) ** 2
                t = (x * y + 3 * x) % 7
                k[y, x] = (230 + t, 210 - t, 120 + 2 * t) if d2 < 81 else (10 + t, 60 + t, 140 - t)
    return k


def trimmed_mean(v, alpha=0.1):
    v = np.sort(v)
    n = len(v)
    lo = math.ceil(alpha * n)
    hi = math.floor(alpha * n)
    return v[lo:n - hi].mean()


def uicm(img):
    r, g, b = img[..., 0].ravel(), img[..., 1].ravel(), img[..., 2].ravel()
    rg = r - g
    yb = 0.5 * (r + g) - b
    mrg, myb = trimmed_mean(rg), trimmed_mean(yb)
    vrg = np.mean((rg - mrg) ** 2)
    vyb = np.mean((yb - myb) ** 2)
    return -0.0268 * math.sqrt(mrg ** 2 + myb ** 2) + 0.1586 * math.sqrt(vrg + vyb)


def blocks(a, block):
    h, w = a.shape[:2]
    for by in range(h // block):
        for bx in range(w // block):
            yield a[by * block:(by + 1) * block, bx * block:(bx + 1) * block]


def eme(a, block):
    k = (a.shape[0] // block) * (a.shape[1] // block)
    total = 0.0
    for blk in blocks(a, block):
        mx, mn = blk.max(), blk.min()
        if mx > 0 and mn > 0:
            total += math.log(mx / mn)
    return 2.0 / k * total


def uism(img):
    out = 0.0
    for c, weight in enumerate((0.299, 0.587, 0.114)):
        ch = img[..., c]
        dx = ndimage.sobel(ch, axis=1, mode="wrap")
        dy = ndimage.sobel(ch, axis=0, mode="wrap")
        mag = np.hypot(dx, dy)
        if mag.max() > 0:
            mag = mag * (255.0 / mag.max())
        out += weight * eme(mag * ch, BLOCK)
    return out


def uiconm(img):
    k = (img.shape[0] // BLOCK) * (img.shape[1] // BLOCK)
    total = 0.0
    for blk in blocks(img, BLOCK):
        mx, mn = blk.max(), blk.min()
        top, bot = mx - mn, mx + mn
        if top > 0 and bot > 0:
            r = top / bot
            total += r * math.log(r)
    return -1.0 / k * total


def main():
    for name in ("checker", "ramp", "noise", "water", "disk"):
        img = (fixture(name) / 255.0) * 255.0
        a, b, c = uicm(img), uism(img), uiconm(img)
        q = 0.0282 * a + 0.2953 * b + 3.5753 * c
        print(name, repr(float(a)), repr(float(b)), repr(float(c)), repr(float(q)))


if __name__ == "__main__":
    main()
