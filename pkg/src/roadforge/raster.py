"""Distance-field rendering of road graphs to grayscale rasters, plus noise injection.

Images are (H, W) float64 arrays with values in [0, 1], row 0 at the top.
Rasterization thresholds the exact point-to-segment distance at every pixel
center, which makes it exactly equivariant under the 8 dihedral symmetries
of the square (pixel centers map onto pixel centers, and all coordinate
transforms are sign/swap-exact in floating point).
"""

from __future__ import annotations

import numpy as np

from .graph import RoadGraph

NOISE_FLIP_FRACTION = {"low": 0.02, "medium": 0.08}


def pixel_centers(size: int) -> np.ndarray:
    """Pixel-center coordinates in [-1, 1]: center k sits at (2k + 1 - size)/size."""
    return (2.0 * np.arange(size) + 1.0 - size) / size


def rasterize(g: RoadGraph, size: int = 64, half_width: float = 1.5) -> np.ndarray:
    """Binary raster: pixel 1 iff its center lies within half_width pixels of an edge."""
    if half_width <= 0:
        raise ValueError("half_width must be positive")
    img = np.zeros((size, size))
    if g.n_edges == 0:
        return img
    c = pixel_centers(size)
    px, py = np.meshgrid(c, c)  # py[i, j] = row coordinate, px[i, j] = column
    pts = np.stack([px.ravel(), py.ravel()], axis=1)
    best = np.full(len(pts), np.inf)
    for i, j in g.edges:
        a = g.nodes[int(i)]
        b = g.nodes[int(j)]
        ab = b - a
        den = ab[0] * ab[0] + ab[1] * ab[1]
        ap = pts - a
        if den == 0.0:
            d2 = ap[:, 0] ** 2 + ap[:, 1] ** 2
        else:
            t = np.clip((ap @ ab) / den, 0.0, 1.0)
            dx = ap[:, 0] - t * ab[0]
            dy = ap[:, 1] - t * ab[1]
            d2 = dx * dx + dy * dy
        best = np.minimum(best, d2)
    limit = (half_width * 2.0 / size) ** 2
    img.ravel()[best <= limit] = 1.0
    return img


def transform_image(img: np.ndarray, k: int, flip: bool) -> np.ndarray:
    """Image-space counterpart of geometry.dihedral_transform (mirror, then k quarter-turns)."""
    out = img[:, ::-1] if flip else img
    return np.ascontiguousarray(np.rot90(out, -(k % 4)))


def inject_noise(img: np.ndarray, level: str, seed: int) -> np.ndarray:
    """Corrupt a segmentation raster deterministically.

    "none" returns an identical copy. "low"/"medium" first jitter the road
    boundary by one pixel (each boundary pixel swaps with a random background
    4-neighbor with probability 1/2), then flip a fixed count
    round(p * n_pixels) of distinct pixels, p = 0.02 / 0.08.
    """
    if level == "none":
        return img.copy()
    if level not in NOISE_FLIP_FRACTION:
        raise ValueError(f"unknown noise level {level!r}")
    p = NOISE_FLIP_FRACTION[level]
    rng = np.random.default_rng(seed)
    h, w = img.shape
    out = img.copy()
    road = img > 0.5
    for r in range(h):
        for c in range(w):
            if not road[r, c]:
                continue
            free = [
                (r + dr, c + dc)
                for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1))
                if 0 <= r + dr < h and 0 <= c + dc < w and not road[r + dr, c + dc]
            ]
            if not free:
                continue
            if rng.random() < 0.5:
                rr, cc = free[rng.integers(len(free))]
                out[rr, cc] = 1.0
                out[r, c] = 0.0
    n_flips = int(round(p * h * w))
    idx = rng.choice(h * w, size=n_flips, replace=False)
    flat = out.ravel()
    flat[idx] = 1.0 - flat[idx]
    return np.clip(out, 0.0, 1.0)


def write_pgm(img: np.ndarray, path) -> None:
    """Binary PGM (P5, maxval 255); value v is stored as round(255 * v)."""
    h, w = img.shape
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: expected maxval 255, found {maxval}")
    pos += 1  # single whitespace after maxval
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.float64) / 255.0
