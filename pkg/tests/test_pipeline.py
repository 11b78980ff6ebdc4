"""Phantom generation, resampling, augmentation, TTA and post-processing."""
import collections

import numpy as np
import pytest

from sfbnet.errors import DataError, GeometrySpecError
from sfbnet.model import ModelConfig, build_model
from sfbnet.pipeline import (
    LV,
    MYO,
    RV,
    PhantomSpec,
    Sample,
    apply_augment,
    augment,
    generate_phantom,
    largest_component_filter,
    load_dataset,
    load_rawt,
    mirror,
    predict_probs,
    random_phantom_spec,
    resample_xy,
    sample_augment_params,
    save_rawt,
    save_sample,
    tta_mirror_predict,
    write_phantom_dataset,
)

rng = np.random.default_rng(77)


def flood_fill_largest(labels):
    """Brute-force oracle: BFS flood fill over 4-neighbourhoods."""
    fg = labels > 0
    h, w = fg.shape
    seen = np.zeros_like(fg, dtype=bool)
    components = []
    for sy in range(h):
        for sx in range(w):
            if fg[sy, sx] and not seen[sy, sx]:
                queue = collections.deque([(sy, sx)])
                seen[sy, sx] = True
                pixels = []
                while queue:
                    y, x = queue.popleft()
                    pixels.append((y, x))
                    for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                        if 0 <= ny < h and 0 <= nx < w and fg[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            queue.append((ny, nx))
                components.append(pixels)
    out = labels.copy()
    if not components:
        return out
    largest = max(range(len(components)), key=lambda i: (len(components[i]), -i))
    keep = set(components[largest])
    for i, pixels in enumerate(components):
        if i != largest:
            for y, x in pixels:
                out[y, x] = 0
    return out


class TestPhantom:
    def test_deterministic_per_seed(self):
        spec = random_phantom_spec(4)
        a = generate_phantom(spec)
        b = generate_phantom(spec)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.labels, b.labels)

    def test_all_four_classes_present(self):
        sample = generate_phantom(PhantomSpec())
        assert set(np.unique(sample.labels)) == {0, RV, MYO, LV}

    def test_ring_strictly_encloses_cavity(self):
        # every 4-neighbour of a cavity pixel that is not cavity must be ring
        for seed in range(5):
            labels = generate_phantom(random_phantom_spec(seed)).labels
            h, w = labels.shape
            ys, xs = np.where(labels == LV)
            for y, x in zip(ys, xs):
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    assert 0 <= ny < h and 0 <= nx < w
                    assert labels[ny, nx] in (LV, MYO)

    def test_crescent_disjoint_from_cavity(self):
        labels = generate_phantom(PhantomSpec()).labels
        assert not np.any((labels == RV) & (labels == LV))

    def test_out_of_bounds_geometry_rejected(self):
        with pytest.raises(GeometrySpecError):
            generate_phantom(PhantomSpec(lv_center=(5.0, 5.0), lv_radius=20.0))

    def test_image_is_z_scored(self):
        sample = generate_phantom(PhantomSpec())
        assert abs(sample.image.mean()) < 1e-4
        assert abs(sample.image.std() - 1.0) < 1e-3


class TestResample:
    def test_identity_spacing_unchanged(self):
        sample = generate_phantom(PhantomSpec())
        out = resample_xy(sample, sample.spacing)
        assert np.array_equal(out.image, sample.image)
        assert np.array_equal(out.labels, sample.labels)

    def test_half_spacing_doubles_dims(self):
        sample = generate_phantom(PhantomSpec())
        out = resample_xy(sample, (0.5, 0.5))
        assert out.labels.shape == (128, 128)
        assert out.spacing == (0.5, 0.5)

    def test_label_set_preserved(self):
        for seed in range(5):
            sample = generate_phantom(random_phantom_spec(seed))
            out = resample_xy(sample, (0.8, 1.3))
            assert set(np.unique(out.labels)) <= set(np.unique(sample.labels))

    def test_integral_roundtrip_restores_dims(self):
        sample = generate_phantom(PhantomSpec())
        down = resample_xy(sample, (2.0, 2.0))
        back = resample_xy(down, (1.0, 1.0))
        assert back.labels.shape == sample.labels.shape

    def test_degenerate_target_rejected(self):
        sample = generate_phantom(PhantomSpec())
        with pytest.raises(DataError):
            resample_xy(sample, (1e9, 1e9))


class TestAugment:
    def test_mirror_twice_is_identity(self):
        sample = generate_phantom(PhantomSpec())
        for axis in ("x", "y", "yx"):
            twice = mirror(mirror(sample, axis), axis)
            assert np.array_equal(twice.image, sample.image)
            assert np.array_equal(twice.labels, sample.labels)

    def test_fixed_seed_reproducible(self):
        sample = generate_phantom(PhantomSpec())
        a = augment(sample, 17)
        b = augment(sample, 17)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.labels, b.labels)

    def test_geometry_identical_for_labels_and_onehot(self):
        # labels transported as argmax of one-hot planes must agree exactly
        sample = generate_phantom(PhantomSpec())
        for seed in range(8):
            params = sample_augment_params(seed)
            direct = apply_augment(sample, params).labels
            onehot = np.stack([(sample.labels == c).astype(np.int32) for c in range(4)])
            planes = [apply_augment(
                Sample(sample.image, plane, sample.spacing), params).labels
                for plane in onehot]
            # nearest-neighbour sampling picks one source pixel, so exactly
            # one transported plane is hot at every position
            assert np.array_equal(np.stack(planes).sum(axis=0), np.ones_like(direct))
            assert np.array_equal(direct, np.argmax(np.stack(planes), axis=0))

    def test_never_introduces_new_labels(self):
        sample = generate_phantom(PhantomSpec())
        for seed in range(10):
            out = augment(sample, seed)
            assert set(np.unique(out.labels)) <= set(np.unique(sample.labels))

    def test_dims_preserved(self):
        sample = generate_phantom(PhantomSpec())
        out = augment(sample, 3)
        assert out.labels.shape == sample.labels.shape


class TestTta:
    def setup_method(self):
        self.cfg = ModelConfig(input_hw=(32, 32), base_channels=4, window=4,
                               sfb_heads=(2, 4, 8), bottleneck_heads=16, seed=1)
        self.model = build_model(self.cfg)
        warm = rng.standard_normal((4, 1, 32, 32)).astype(np.float32)
        self.model.forward(warm, training=True)  # populate running stats

    def test_probabilities_sum_to_one(self):
        image = generate_phantom(random_phantom_spec(0, (32, 32))).image
        probs = tta_mirror_predict(self.model, image)
        assert probs.shape == (4, 32, 32)
        assert np.abs(probs.sum(axis=0) - 1.0).max() < 1e-6

    def test_matches_manual_four_pass_average(self):
        image = generate_phantom(random_phantom_spec(1, (32, 32))).image
        got = tta_mirror_predict(self.model, image)
        manual = np.zeros_like(got)
        for fy, fx in ((False, False), (False, True), (True, False), (True, True)):
            flipped = image.copy()
            if fy:
                flipped = flipped[:, ::-1, :]
            if fx:
                flipped = flipped[:, :, ::-1]
            p = predict_probs(self.model, np.ascontiguousarray(flipped)[None])[0]
            if fy:
                p = p[:, ::-1, :]
            if fx:
                p = p[:, :, ::-1]
            manual += p / 4.0
        assert np.abs(got - manual).max() < 1e-6

    def test_flip_invariant_model_equals_plain_predict(self):
        # zeroing every head makes the logits constant, hence flip invariant
        for head in self.model.heads:
            head.weight.data[:] = 0.0
            head.bias.data[:] = 0.0
        image = generate_phantom(random_phantom_spec(2, (32, 32))).image
        plain = predict_probs(self.model, image[None])[0]
        averaged = tta_mirror_predict(self.model, image)
        assert np.abs(plain - averaged).max() < 1e-7


class TestLargestComponent:
    def test_single_blob_unchanged(self):
        labels = np.zeros((16, 16), int)
        labels[4:8, 4:8] = 2
        assert np.array_equal(largest_component_filter(labels), labels)

    def test_small_blob_erased(self):
        labels = np.zeros((16, 16), int)
        labels[0:5, 0:4] = 1   # 20 pixels
        labels[10:11, 10:15] = 3  # 5 pixels
        out = largest_component_filter(labels)
        assert np.all(out[10:11, 10:15] == 0)
        assert np.array_equal(out[0:5, 0:4], labels[0:5, 0:4])

    def test_classes_survive_inside_kept_component(self):
        labels = np.zeros((8, 8), int)
        labels[2:6, 2:4] = 1
        labels[2:6, 4:6] = 3  # touching, same component
        labels[0, 7] = 2  # isolated pixel
        out = largest_component_filter(labels)
        assert out[0, 7] == 0
        assert np.array_equal(out[2:6, 2:6], labels[2:6, 2:6])

    def test_matches_flood_fill_oracle(self):
        for seed in range(100):
            r = np.random.default_rng(seed)
            labels = (r.random((64, 64)) < 0.3).astype(int) * r.integers(1, 4, (64, 64))
            assert np.array_equal(largest_component_filter(labels),
                                  flood_fill_largest(labels))

    def test_idempotent(self):
        for seed in range(20):
            r = np.random.default_rng(seed)
            labels = (r.random((32, 32)) < 0.35).astype(int) * r.integers(1, 4, (32, 32))
            once = largest_component_filter(labels)
            assert np.array_equal(largest_component_filter(once), once)

    def test_result_is_single_component(self):
        import scipy.ndimage as ndi
        structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
        for seed in range(20):
            r = np.random.default_rng(seed + 50)
            labels = (r.random((32, 32)) < 0.4).astype(int) * r.integers(1, 4, (32, 32))
            out = largest_component_filter(labels)
            if (out > 0).any():
                _, n = ndi.label(out > 0, structure=structure)
                assert n == 1

    def test_all_background_passthrough(self):
        labels = np.zeros((8, 8), int)
        assert np.array_equal(largest_component_filter(labels), labels)


class TestRawtFormat:
    def test_roundtrip(self, tmp_path):
        arr = rng.standard_normal((1, 6, 7)).astype(np.float32)
        path = tmp_path / "x.img.rawt"
        save_rawt(path, arr, (1.25, 0.75))
        back, spacing = load_rawt(path)
        assert np.array_equal(back, arr)
        assert spacing == (1.25, 0.75)

    def test_int_labels_roundtrip(self, tmp_path):
        arr = rng.integers(0, 4, (6, 7)).astype(np.int32)
        path = tmp_path / "x.lbl.rawt"
        save_rawt(path, arr, (1.0, 1.0))
        back, _ = load_rawt(path)
        assert np.array_equal(back, arr)
        assert back.dtype == np.int32

    def test_header_is_json_line(self, tmp_path):
        import json
        path = tmp_path / "x.img.rawt"
        save_rawt(path, np.zeros((2, 3), np.float32), (1.0, 2.0))
        with open(path, "rb") as fh:
            header = json.loads(fh.readline())
        assert header == {"dtype": "f32", "shape": [2, 3], "spacing": [1.0, 2.0]}

    def test_malformed_header_rejected(self, tmp_path):
        path = tmp_path / "bad.rawt"
        path.write_bytes(b"this is not json\n\x00\x00")
        with pytest.raises(DataError):
            load_rawt(path)

    def test_dataset_directory_roundtrip(self, tmp_path):
        write_phantom_dataset(tmp_path / "train", cases=3, size=(32, 32), seed=5)
        samples = load_dataset(tmp_path / "train")
        assert len(samples) == 3
        assert all(s.image.shape == (1, 32, 32) for s in samples)

    def test_missing_directory_rejected(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "nope")

    def test_missing_label_file_rejected(self, tmp_path):
        d = tmp_path / "train"
        sample = generate_phantom(PhantomSpec(size=(32, 32), lv_center=(16, 18),
                                              lv_radius=5, myo_thickness=2,
                                              rv_radius=4))
        save_sample(d, 0, sample)
        (d / "case_0000.lbl.rawt").unlink()
        with pytest.raises(DataError):
            load_dataset(d)
