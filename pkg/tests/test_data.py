import numpy as np
import pytest
from scipy import stats

from critpoint.data import (
    SYNTHETIC_CLASSES,
    PointCloud,
    generate_synthetic,
    load_off_and_sample,
    load_off_directory,
    normalize,
    read_off,
    read_xyz,
    sample_shape,
    write_ply,
    write_xyz,
)
from critpoint.errors import DegenerateInputError, ParseError

SQUARE_OFF = """OFF
4 2 0
0 0 0
1 0 0
1 1 0
0 1 0
3 0 1 2
3 0 2 3
"""


@pytest.fixture
def square(tmp_path):
    path = tmp_path / "square.off"
    path.write_text(SQUARE_OFF)
    return path


class TestSynthetic:
    def test_sphere_radius(self):
        pts = sample_shape("sphere", 2000, np.random.default_rng(0), jitter=0.01)
        r = np.linalg.norm(pts, axis=1)
        assert r.min() >= 1 - 0.09 and r.max() <= 1 + 0.09
        assert abs(r.mean() - 1) < 0.005

    def test_deterministic(self):
        a = generate_synthetic(per_class=3, n=64, seed=5)
        b = generate_synthetic(per_class=3, n=64, seed=5)
        assert np.array_equal(a.points, b.points) and np.array_equal(a.labels, b.labels)
        c = generate_synthetic(per_class=3, n=64, seed=6)
        assert not np.array_equal(a.points, c.points)

    def test_layout(self):
        ds = generate_synthetic(per_class=25, n=32, seed=0)
        assert len(ds) == 8 * 25
        assert ds.class_names == SYNTHETIC_CLASSES
        assert np.bincount(ds.labels).tolist() == [25] * 8
        assert ds.points.shape == (200, 32, 3)
        assert np.all(np.abs(ds.points) <= 1.0)

    @pytest.mark.parametrize("kw", [dict(per_class=0), dict(n=4), dict(num_classes=1)])
    def test_preconditions(self, kw):
        with pytest.raises(ValueError):
            generate_synthetic(**kw)


class TestOff:
    def test_centroid_of_square(self, square):
        cloud = load_off_and_sample(square, 10000, seed=0)
        assert np.all(np.abs(cloud.points.mean(axis=0) - [0.5, 0.5, 0.0]) < 0.02)

    def test_area_weighting_chi_square(self, tmp_path):
        # triangles of area 0.5 and 1.0 sharing an edge: expect a 1:2 split
        path = tmp_path / "two.off"
        path.write_text("OFF\n5 2 0\n0 0 0\n1 0 0\n0 1 0\n3 0 0\n0 1 0\n3 0 1 2\n3 1 3 4\n")
        pts = load_off_and_sample(path, 8000, seed=1).points
        in_first = pts[:, 0] + pts[:, 1] <= 1
        counts = [in_first.sum(), (~in_first).sum()]
        _, p = stats.chisquare(counts, [8000 / 3, 16000 / 3])
        assert p > 0.001

    def test_single_triangle_barycentric(self, tmp_path):
        path = tmp_path / "tri.off"
        path.write_text("OFF\n3 1 0\n0 0 0\n2 0 0\n0 1 0\n3 0 1 2\n")
        pts = load_off_and_sample(path, 3000, seed=2).points
        assert np.all(pts[:, 0] >= -1e-12) and np.all(pts[:, 1] >= -1e-12)
        assert np.all(pts[:, 0] / 2 + pts[:, 1] <= 1 + 1e-12)
        assert np.all(pts[:, 2] == 0)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.off"
        path.write_text("PLY\n3 1 0\n")
        with pytest.raises(ParseError) as err:
            read_off(path)
        assert err.value.line == 1

    def test_bad_vertex_line_number(self, tmp_path):
        path = tmp_path / "bad.off"
        path.write_text("OFF\n3 1 0\n0 0 0\n1 x 0\n0 1 0\n3 0 1 2\n")
        with pytest.raises(ParseError) as err:
            read_off(path)
        assert err.value.line == 4

    def test_glued_header_and_quads(self, tmp_path):
        path = tmp_path / "quad.off"
        path.write_text("OFF4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
        verts, tris = read_off(path)
        assert tris.tolist() == [[0, 1, 2], [0, 2, 3]]

    def test_degenerate_mesh(self, tmp_path):
        path = tmp_path / "flat.off"
        path.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n2 0 0\n3 0 1 2\n")
        with pytest.raises(DegenerateInputError):
            load_off_and_sample(path, 10)

    def test_directory_loader(self, tmp_path):
        for cls in ("a", "b"):
            d = tmp_path / cls / "train"
            d.mkdir(parents=True)
            (d / "m.off").write_text(SQUARE_OFF)
        ds = load_off_directory(tmp_path, 16)
        assert ds.class_names == ("a", "b") and ds.points.shape == (2, 16, 3)


class TestNormalize:
    def test_hand_example(self):
        out = normalize(PointCloud([[0, 0, 0], [4, 2, 0]])).points
        assert out.tolist() == [[-1.0, -0.5, 0.0], [1.0, 0.5, 0.0]]

    def test_already_normalized_only_centered(self):
        p = np.array([[-1.0, 0.0, 0.5], [1.0, 0.2, -0.5], [0.0, -0.2, 0.0]])
        assert np.allclose(normalize(PointCloud(p)).points, p)

    def test_idempotent_and_bounded(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = PointCloud(rng.standard_normal((50, 3)) * rng.uniform(0.1, 10, 3) + rng.normal(0, 5, 3))
            once = normalize(p)
            assert np.all(np.abs(once.points) <= 1.0)
            assert np.allclose(normalize(once).points, once.points, atol=1e-15)

    def test_degenerate(self):
        with pytest.raises(DegenerateInputError):
            normalize(PointCloud(np.ones((5, 3))))


def test_text_exporters_round_trip(tmp_path):
    pts = np.random.default_rng(0).standard_normal((10, 3))
    write_xyz(tmp_path / "c.xyz", pts)
    assert np.array_equal(read_xyz(tmp_path / "c.xyz").points, pts)
    write_ply(tmp_path / "c.ply", pts, flagged=np.arange(10) % 2 == 0, score=np.linspace(0, 1, 10))
    lines = (tmp_path / "c.ply").read_text().splitlines()
    assert lines[:2] == ["ply", "format ascii 1.0"]
    assert "property int flagged" in lines and "property double score" in lines
    body = lines[lines.index("end_header") + 1 :]
    assert len(body) == 10 and body[1].split()[3] == "0"
