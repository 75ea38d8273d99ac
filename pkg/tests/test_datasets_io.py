import numpy as np
import pytest

from noisegauge.datasets import (ToyDatasetSpec, gen_dataset, generate, load_dataset,
                                 mixture_centers, save_dataset)
from noisegauge.io import (load_loss_curve, read_blob, save_loss_curve, sha256_file,
                           write_blob)
from noisegauge.errors import MissingArtifactError


class TestGeneration:
    def test_regeneration_is_bitwise_identical(self, tmp_path):
        spec = ToyDatasetSpec(kind="checkerboard", d=2, n_samples=500, seed=3)
        gen_dataset(spec, tmp_path / "a.blob")
        gen_dataset(spec, tmp_path / "b.blob")
        assert (tmp_path / "a.blob").read_bytes() == (tmp_path / "b.blob").read_bytes()

    def test_val_fraction_is_floor_of_ten_percent(self):
        for n in (10, 99, 100, 4096, 12345):
            ds = generate(ToyDatasetSpec(kind="gaussian-mixture", n_samples=n, seed=0))
            assert ds.n_val == int(np.floor(0.1 * n))
            assert ds.n_train == n - ds.n_val

    def test_split_disjoint_and_complete(self):
        ds = generate(ToyDatasetSpec(kind="gaussian-mixture", n_samples=1000, seed=1))
        train, val = set(ds.train_indices), set(ds.val_indices)
        assert not train & val
        assert train | val == set(range(1000))

    def test_conditional_class_means_near_centers(self):
        spec = ToyDatasetSpec(kind="conditional-mixture", d=2, n_classes=4,
                              n_samples=40_000, seed=2)
        ds = generate(spec)
        centers = mixture_centers(4, 2)
        for c in range(4):
            pts = ds.x0[ds.labels == c]
            se = 0.5 / np.sqrt(len(pts))
            assert np.all(np.abs(pts.mean(axis=0) - centers[c]) < 3 * se)

    def test_unconditional_kinds_have_no_labels(self):
        for kind in ("gaussian-mixture", "checkerboard"):
            ds = generate(ToyDatasetSpec(kind=kind, n_samples=100, seed=0))
            assert np.all(ds.labels == -1)

    def test_invalid_specs_rejected(self):
        with pytest.raises(ValueError):
            ToyDatasetSpec(kind="spiral", n_samples=100)
        with pytest.raises(ValueError):
            ToyDatasetSpec(kind="gaussian-mixture", n_samples=5)
        with pytest.raises(ValueError):
            ToyDatasetSpec(kind="conditional-mixture", n_classes=0)

    def test_checkerboard_occupies_alternating_cells(self):
        ds = generate(ToyDatasetSpec(kind="checkerboard", n_samples=20_000, seed=4))
        cells = np.floor(ds.x0[:, :2] / 2.0).astype(int)
        parity = (cells[:, 0] + cells[:, 1]) % 2
        assert len(np.unique(parity)) == 1


class TestDatasetRoundTrip:
    def test_save_load_identity(self, tmp_path):
        spec = ToyDatasetSpec(kind="conditional-mixture", d=3, n_classes=2,
                              n_samples=200, seed=5)
        ds = generate(spec)
        save_dataset(tmp_path / "d.blob", ds)
        loaded = load_dataset(tmp_path / "d.blob")
        assert loaded.spec == spec
        assert np.array_equal(loaded.x0, ds.x0)
        assert np.array_equal(loaded.labels, ds.labels)
        assert np.array_equal(loaded.val_indices, ds.val_indices)


class TestBlobCodec:
    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        payload = rng.standard_normal(257)
        header = {"format": "dataset", "nested": {"a": [1, 2, 3]}, "x": 0.1}
        write_blob(tmp_path / "x.blob", header, payload)
        h, p = read_blob(tmp_path / "x.blob")
        assert h == header
        assert np.array_equal(p, payload)
        assert p.tobytes() == payload.tobytes()

    def test_missing_file_raises_artifact_error(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            read_blob(tmp_path / "nope.blob")

    def test_bad_magic_rejected(self, tmp_path):
        (tmp_path / "junk.blob").write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(ValueError):
            read_blob(tmp_path / "junk.blob")


class TestLossCurveCsv:
    def test_round_trip_preserves_floats_exactly(self, tmp_path):
        steps = np.arange(1, 50)
        rng = np.random.default_rng(1)
        losses = np.abs(rng.standard_normal(49)) * 0.37
        save_loss_curve(tmp_path / "l.csv", steps, losses)
        s2, l2 = load_loss_curve(tmp_path / "l.csv")
        assert np.array_equal(s2, steps)
        assert np.array_equal(l2, losses)
        text = (tmp_path / "l.csv").read_text()
        assert text.splitlines()[0] == "step,loss"
        assert "." in text.splitlines()[1]

    def test_missing_curve_raises_artifact_error(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            load_loss_curve(tmp_path / "none.csv")

    def test_hashes_differ_on_content_change(self, tmp_path):
        save_loss_curve(tmp_path / "a.csv", [1], [0.5])
        save_loss_curve(tmp_path / "b.csv", [1], [0.50001])
        assert sha256_file(tmp_path / "a.csv") != sha256_file(tmp_path / "b.csv")
