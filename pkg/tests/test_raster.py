import numpy as np
import pytest

from roadforge.geometry import dihedral_transform
from roadforge.graph import RoadGraph
from roadforge.raster import (
    inject_noise,
    pixel_centers,
    rasterize,
    read_pgm,
    transform_image,
    write_pgm,
)


def _distance_oracle(g: RoadGraph, size: int) -> np.ndarray:
    """Independent per-pixel min distance to any edge, in pixel units."""
    c = pixel_centers(size)
    out = np.full((size, size), np.inf)
    for row in range(size):
        for col in range(size):
            p = np.array([c[col], c[row]])
            for i, j in g.edges:
                a, b = g.nodes[int(i)], g.nodes[int(j)]
                ab = b - a
                t = float(np.dot(p - a, ab) / np.dot(ab, ab))
                t = min(1.0, max(0.0, t))
                out[row, col] = min(out[row, col], float(np.linalg.norm(p - (a + t * ab))))
    return out * size / 2.0  # normalized units -> pixels


class TestRasterize:
    def test_empty_graph_all_zero(self):
        assert not rasterize(RoadGraph(), 64, 1.5).any()

    def test_matches_distance_oracle(self):
        g = RoadGraph([(-0.8, -0.3), (0.7, 0.5), (0.2, -0.9)], [(0, 1), (1, 2)])
        img = rasterize(g, 32, 1.5)
        oracle = (_distance_oracle(g, 32) <= 1.5).astype(float)
        assert np.array_equal(img, oracle)

    def test_horizontal_line_band(self):
        # y = 0 sits between rows 31 and 32 of a 64-grid: center distances are
        # 0.5 px (rows 31, 32) and 1.5 px (rows 30, 33), all within 1.5
        g = RoadGraph([(-1, 0), (1, 0)], [(0, 1)])
        img = rasterize(g, 64, 1.5)
        rows = sorted(set(np.nonzero(img)[0].tolist()))
        assert rows == [30, 31, 32, 33]
        assert np.array_equal(img, (_distance_oracle(g, 64) <= 1.5).astype(float))

    def test_binary_values(self):
        g = RoadGraph([(0, 0), (0.5, 0.5)], [(0, 1)])
        img = rasterize(g)
        assert set(np.unique(img)) <= {0.0, 1.0}

    def test_equivariance_all_eight(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            pts = rng.uniform(-1, 1, (5, 2))
            g = RoadGraph(pts, [(0, 1), (1, 2), (2, 3), (3, 4)])
            base = rasterize(g)
            for flip in (False, True):
                for k in range(4):
                    a = rasterize(dihedral_transform(g, k, flip))
                    b = transform_image(base, k, flip)
                    assert np.array_equal(a, b), (k, flip)

    def test_half_width_validation(self):
        with pytest.raises(ValueError):
            rasterize(RoadGraph(), 64, 0.0)


class TestInjectNoise:
    def test_none_identity(self):
        rng = np.random.default_rng(0)
        img = (rng.random((64, 64)) < 0.2).astype(float)
        out = inject_noise(img, "none", seed=5)
        assert np.array_equal(out, img)
        assert out is not img

    def test_low_on_zeros_exact_count(self):
        img = np.zeros((64, 64))
        out = inject_noise(img, "low", seed=3)
        assert out.sum() == round(0.02 * 64 * 64)

    def test_medium_on_zeros_exact_count(self):
        img = np.zeros((64, 64))
        out = inject_noise(img, "medium", seed=3)
        assert out.sum() == round(0.08 * 64 * 64)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        img = (rng.random((64, 64)) < 0.3).astype(float)
        a = inject_noise(img, "low", seed=11)
        b = inject_noise(img, "low", seed=11)
        assert np.array_equal(a, b)
        c = inject_noise(img, "low", seed=12)
        assert not np.array_equal(a, c)

    def test_values_stay_binary(self):
        g = RoadGraph([(-1, 0), (1, 0), (0, -1), (0, 1)], [(0, 1), (2, 3)])
        img = rasterize(g)
        out = inject_noise(img, "medium", seed=0)
        assert set(np.unique(out)) <= {0.0, 1.0}

    def test_unknown_level(self):
        with pytest.raises(ValueError):
            inject_noise(np.zeros((4, 4)), "extreme", seed=0)


class TestPgm:
    def test_round_trip_binary(self, tmp_path):
        g = RoadGraph([(-0.5, 0), (0.5, 0)], [(0, 1)])
        img = rasterize(g)
        path = tmp_path / "x.pgm"
        write_pgm(img, path)
        assert np.array_equal(read_pgm(path), img)

    def test_header(self, tmp_path):
        path = tmp_path / "x.pgm"
        write_pgm(np.zeros((64, 64)), path)
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n64 64\n255\n")
        assert len(raw) == len(b"P5\n64 64\n255\n") + 64 * 64

    def test_value_quantization(self, tmp_path):
        img = np.array([[0.0, 0.5, 1.0]])
        path = tmp_path / "q.pgm"
        write_pgm(img, path)
        back = read_pgm(path)
        assert back[0, 0] == 0.0
        assert back[0, 2] == 1.0
        assert back[0, 1] == pytest.approx(0.5, abs=1 / 255)

    def test_rejects_non_pgm(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P6\n2 2\n255\n" + bytes(12))
        with pytest.raises(ValueError):
            read_pgm(path)
