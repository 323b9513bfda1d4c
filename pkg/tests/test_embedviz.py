import numpy as np
import pytest
from sklearn.metrics import silhouette_score

from voxenc.embedviz import pca2, silhouette, write_embedding_csv, write_scatter_svg


class TestPca2:
    def test_line_in_3d(self):
        t = np.linspace(-2, 2, 25)
        points = np.stack([t, 2 * t, -t], axis=1)
        result = pca2(points)
        assert result.explained[0] == pytest.approx(1.0, abs=1e-12)
        assert result.explained[1] == pytest.approx(0.0, abs=1e-12)

    def test_isotropic_cloud_eigenvalue_oracle(self):
        rng = np.random.default_rng(0)
        d = 5
        x = rng.standard_normal((500, d))
        result = pca2(x)
        # oracle: eigenvalues of the covariance matrix, computed directly
        centered = x - x.mean(axis=0)
        eigvals = np.sort(np.linalg.eigvalsh(centered.T @ centered))[::-1]
        expected = eigvals[:2] / eigvals.sum()
        assert np.allclose(result.explained, expected, atol=1e-12)
        # an isotropic cloud spreads variance evenly: each fraction near 1/d
        assert np.all(np.abs(result.explained - 1.0 / d) < 0.2 / d)

    def test_duplication_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((20, 4))
        base = pca2(x)
        doubled = pca2(np.vstack([x, x]))
        assert np.allclose(doubled.points[:20], base.points, atol=1e-9)
        assert np.allclose(doubled.points[20:], base.points, atol=1e-9)

    def test_translation_invariance(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((30, 6))
        shifted = pca2(x + rng.standard_normal(6) * 10.0)
        base = pca2(x)
        assert np.allclose(shifted.points, base.points, atol=1e-9)
        assert np.allclose(shifted.explained, base.explained, atol=1e-12)

    def test_rotation_preserves_explained_variance(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((40, 4)) @ np.diag([3.0, 2.0, 1.0, 0.5])
        q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        base = pca2(x)
        rotated = pca2(x @ q)
        assert np.allclose(base.explained, rotated.explained, atol=1e-9)

    def test_deterministic_sign_convention(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((25, 3))
        a = pca2(x)
        b = pca2(x.copy())
        assert np.array_equal(a.points, b.points)

    def test_zero_variance_rejected(self):
        with pytest.raises(ValueError):
            pca2(np.ones((5, 3)))

    def test_too_small(self):
        with pytest.raises(ValueError):
            pca2(np.zeros((2, 5)))
        with pytest.raises(ValueError):
            pca2(np.zeros((5, 1)))


class TestSilhouette:
    def test_two_tight_clusters(self):
        rng = np.random.default_rng(5)
        a = rng.normal(0.0, 0.1, size=(4, 2))
        b = rng.normal(10.0, 0.1, size=(4, 2)) + np.array([0.0, 0.0])
        points = np.vstack([a, b])
        labels = ["a"] * 4 + ["b"] * 4
        value = silhouette(points, labels)
        assert value > 0.9
        # independent oracle
        assert value == pytest.approx(silhouette_score(points, labels), abs=1e-12)

    def test_matches_sklearn_on_random_data(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            points = rng.standard_normal((30, 2))
            labels = rng.integers(0, 3, size=30)
            if len(set(labels.tolist())) < 2:
                continue
            assert silhouette(points, labels) == pytest.approx(
                silhouette_score(points, labels), abs=1e-12
            )

    def test_identical_points_zero(self):
        points = np.zeros((6, 2))
        labels = ["a", "a", "a", "b", "b", "b"]
        assert silhouette(points, labels) == 0.0

    def test_random_labels_near_zero(self):
        values = []
        for seed in range(10):
            rng = np.random.default_rng(seed)
            points = rng.standard_normal((120, 2))
            labels = rng.integers(0, 2, size=120)
            values.append(silhouette(points, labels))
        assert all(abs(v) < 0.1 for v in values)

    def test_scale_invariance(self):
        rng = np.random.default_rng(7)
        points = rng.standard_normal((20, 2))
        labels = rng.integers(0, 2, size=20)
        assert silhouette(points * 37.5, labels) == pytest.approx(
            silhouette(points, labels), abs=1e-9
        )

    def test_singleton_cluster_scores_zero(self):
        points = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0]])
        labels = ["a", "a", "b"]
        ours = silhouette(points, labels)
        # the singleton contributes 0; the others behave normally
        assert ours == pytest.approx(silhouette_score(points, labels), abs=1e-12)

    def test_single_label_rejected(self):
        with pytest.raises(ValueError):
            silhouette(np.zeros((4, 2)), ["a"] * 4)


class TestExports:
    def test_csv_and_svg(self, tmp_path):
        rng = np.random.default_rng(8)
        result = pca2(rng.standard_normal((8, 4)), labels=["person", "animal"] * 4)
        write_embedding_csv(tmp_path / "e.csv", [f"s{i}" for i in range(8)], result)
        lines = (tmp_path / "e.csv").read_text().splitlines()
        assert lines[0] == "id,x,y,label"
        assert len(lines) == 9
        write_scatter_svg(tmp_path / "e.svg", result)
        svg = (tmp_path / "e.svg").read_text()
        assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
        assert svg.count("<circle") >= 8
