import numpy as np
import pytest

from igsplat.codec import (
    BACKEND_QDEF,
    BadMagicError,
    ChecksumError,
    ContainerError,
    POINT_MODE_RAW16F,
    POINT_MODE_SORTED_PNG,
    QuantizedPlane,
    TruncatedError,
    VersionError,
    container_info,
    decode_level,
    decode_model,
    decode_points,
    dequantize_plane,
    encode_level,
    encode_model,
    encode_planes,
    encode_points,
    morton_decode,
    morton_encode,
    pack_point_image,
    parse,
    quantize_plane,
    read_container,
    serialize,
    sort_points,
    unpack_point_image,
    write_container,
    _png_bytes,
)
from igsplat.core import BoundingBox
from igsplat.model import IgsModel
from igsplat.triplane import FeaturePlane, MultiLevelTriPlane


def make_model(rng, n=30, base=16, fill=0.4):
    pts = rng.uniform(-0.8, 0.8, size=(n, 3))
    model = IgsModel.create(pts, BoundingBox(np.zeros(3), 1.0), rng=rng, base_resolution=base)
    model.mltp.active_levels = 3
    if fill:
        for level in model.mltp.levels:
            for name in ("xy", "xz", "yz"):
                level.planes[name].data[:] = rng.normal(scale=fill,
                                                        size=level.planes[name].data.shape)
    return model


class TestMorton:
    def test_origin(self):
        assert morton_encode(np.array([0, 0, 0])) == 0

    def test_ones(self):
        assert morton_encode(np.array([1, 1, 1])) == 0b111

    def test_axis_order(self):
        assert morton_encode(np.array([1, 0, 0])) == 1
        assert morton_encode(np.array([0, 1, 0])) == 2
        assert morton_encode(np.array([0, 0, 1])) == 4

    def test_high_bits(self):
        # bit 15 of z lands on output bit 3*15 + 2 = 47
        assert morton_encode(np.array([0, 0, 1 << 15])) == 1 << 47

    def test_round_trip_random(self, rng):
        q = rng.integers(0, 1 << 16, size=(5000, 3)).astype(np.uint16)
        np.testing.assert_array_equal(morton_decode(morton_encode(q)), q)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            morton_encode(np.array([1 << 16, 0, 0]))

    def test_locality_monotone_within_octants(self):
        # within one power-of-two block, codes sort by interleaved bits:
        # all points of the low octant come before the high octant
        lo = morton_encode(np.array([[x, y, z] for x in range(2) for y in range(2)
                                     for z in range(2)], dtype=np.uint16))
        hi = morton_encode(np.array([[x + 2, y + 2, z + 2] for x in range(2)
                                     for y in range(2) for z in range(2)], dtype=np.uint16))
        assert lo.max() < hi.min()


class TestSortPoints:
    def setup_method(self):
        self.bbox = BoundingBox(np.zeros(3), 1.0)

    def test_sorted_input_identity(self):
        # points already in Morton order keep their order
        q = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 1]], dtype=np.uint16)
        pts = (q.astype(np.float64) / 65535.0 * 2.0 - 1.0) * 1.0  # normalized=world here
        perm, coords, clamped = sort_points(pts, self.bbox)
        np.testing.assert_array_equal(perm, np.arange(4))
        assert clamped == 0

    def test_single_point(self):
        perm, coords, _ = sort_points(np.array([[0.1, 0.2, 0.3]]), self.bbox)
        np.testing.assert_array_equal(perm, [0])
        assert coords.shape == (1, 3)

    def test_outside_points_clamped_and_counted(self):
        pts = np.array([[5.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        perm, coords, clamped = sort_points(pts, self.bbox)
        assert clamped == 1
        assert coords.max() <= 65535

    def test_clusters_stay_contiguous(self, rng):
        a = rng.normal(scale=0.01, size=(50, 3)) + [0.6, 0.6, 0.6]
        b = rng.normal(scale=0.01, size=(50, 3)) - [0.6, 0.6, 0.6]
        interleaved = np.empty((100, 3))
        interleaved[0::2] = a
        interleaved[1::2] = b
        perm, coords, _ = sort_points(interleaved, self.bbox)
        labels = perm % 2  # 0 -> cluster a, 1 -> cluster b
        # after sorting, each cluster occupies one contiguous run
        changes = np.count_nonzero(np.diff(labels))
        assert changes == 1

    def test_morton_locality_beats_input_order(self, rng):
        # mean 3D distance between image-adjacent points, 20 seeds
        wins = 0
        for seed in range(20):
            r = np.random.default_rng(seed)
            centers = r.uniform(-0.7, 0.7, size=(8, 3))
            pts = np.concatenate([c + r.normal(scale=0.02, size=(40, 3)) for c in centers])
            pts = pts[r.permutation(len(pts))]
            perm, _, _ = sort_points(pts, self.bbox)
            sorted_pts = pts[perm]
            d_sorted = np.linalg.norm(np.diff(sorted_pts, axis=0), axis=1).mean()
            d_input = np.linalg.norm(np.diff(pts, axis=0), axis=1).mean()
            wins += d_sorted < d_input
        assert wins == 20


class TestPackPointImage:
    def test_n4_layout(self):
        coords = np.arange(12, dtype=np.uint16).reshape(4, 3)
        img = pack_point_image(coords)
        assert img.shape == (6, 2)  # W=2, H=2, three stacked blocks
        np.testing.assert_array_equal(img[:2].reshape(-1), coords[:, 0])
        np.testing.assert_array_equal(img[2:4].reshape(-1), coords[:, 1])

    def test_n1(self):
        img = pack_point_image(np.array([[7, 8, 9]], dtype=np.uint16))
        assert img.shape == (3, 1)
        np.testing.assert_array_equal(img.reshape(-1), [7, 8, 9])

    @pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 8, 9, 10, 17, 100])
    def test_round_trip(self, n, rng):
        coords = rng.integers(0, 1 << 16, size=(n, 3)).astype(np.uint16)
        np.testing.assert_array_equal(unpack_point_image(pack_point_image(coords), n), coords)

    def test_padding_zeros(self):
        coords = np.full((3, 3), 9, dtype=np.uint16)
        img = pack_point_image(coords)  # W=2, H=2 -> one pad cell per block
        assert img.shape == (6, 2)
        assert img[1, 1] == 0


class TestEncodePoints:
    def setup_method(self):
        self.bbox = BoundingBox(np.zeros(3), 1.0)

    def test_clustered_points_choose_png(self, rng):
        centers = rng.uniform(-0.5, 0.5, size=(10, 3))
        pts = np.concatenate([c + rng.normal(scale=0.005, size=(1000, 3)) for c in centers])
        payload, mode = encode_points(pts, self.bbox)
        assert mode == POINT_MODE_SORTED_PNG
        assert len(payload) < pts.shape[0] * 6  # strictly smaller than RAW16F

    def test_round_trip_error_bound(self, rng):
        pts = rng.uniform(-0.99, 0.99, size=(2000, 3))
        payload, mode = encode_points(pts, self.bbox)
        out = decode_points(payload, mode, 2000, self.bbox)
        bound = 2.0 * self.bbox.half_extent / 65535.0
        if mode == POINT_MODE_SORTED_PNG:
            # decoded set equals quantized set; compare as sorted multisets
            a = np.sort(out.round(9), axis=0)
            ref = np.sort(pts, axis=0)
            assert np.abs(a - ref).max() <= bound + 1e-12
        else:
            assert np.abs(out - pts).max() <= 2e-3

    def test_tiny_set_either_mode_ok(self, rng):
        pts = rng.uniform(-1, 1, size=(8, 3))
        payload, mode = encode_points(pts, self.bbox)
        out = decode_points(payload, mode, 8, self.bbox)
        assert out.shape == (8, 3)

    def test_raw_mode_half_precision(self, rng):
        pts = rng.uniform(-1, 1, size=(5, 3))
        out = decode_points(pts.astype("<f2").tobytes(), POINT_MODE_RAW16F, 5, self.bbox)
        np.testing.assert_array_equal(out, pts.astype(np.float16).astype(np.float64))


class TestQuantizePlane:
    def test_constant_plane_exact(self):
        plane = FeaturePlane(np.full((4, 4, 2), 0.7))
        qp = quantize_plane(plane, 8)
        out = dequantize_plane(qp)
        np.testing.assert_array_equal(out.data, plane.data)

    def test_endpoints_exact(self):
        data = np.zeros((2, 2, 1))
        data[0, 0, 0] = 1.0
        plane = FeaturePlane(data)
        out = dequantize_plane(quantize_plane(plane, 8))
        np.testing.assert_array_equal(out.data, data)

    @pytest.mark.parametrize("bits", [8, 16])
    def test_error_bound(self, bits, rng):
        plane = FeaturePlane(rng.normal(size=(8, 8, 5)))
        qp = quantize_plane(plane, bits)
        out = dequantize_plane(qp)
        bound = (qp.vmax - qp.vmin) / (2**bits - 1) / 2 + 1e-12
        assert np.abs(out.data - plane.data).max() <= bound

    def test_rejects_odd_bits(self):
        with pytest.raises(ValueError):
            QuantizedPlane(bit_depth=12, vmin=0, vmax=1, codes=np.zeros((1, 1, 1)))


class TestEncodePlanes:
    def test_lossless_tuple_bound(self, rng):
        model = make_model(rng)
        payloads = encode_planes(model.mltp, (100, 100, 100))
        for li, payload in enumerate(payloads):
            level = decode_level(payload, model.mltp.resolutions[li], 5, BACKEND_QDEF)
            for name in ("xy", "xz", "yz"):
                a = model.mltp.levels[li].planes[name].data
                b = level.planes[name].data
                rngspan = a.max() - a.min()
                # per-level tiling shares one min/max across the three planes
                assert np.abs(a - b).max() <= rngspan / 65535 * 3

    def test_zero_planes_tiny_payload(self):
        mltp = MultiLevelTriPlane.create(64, 5, rng=0, init_scales=(0.0, 0.0, 0.0))
        payloads = encode_planes(mltp, (100, 100, 100))
        for p in payloads:
            assert len(p) < 500

    def test_quality_reduces_size(self, rng):
        model = make_model(rng, base=32)
        hi = encode_planes(model.mltp, (100, 100, 100))
        lo = encode_planes(model.mltp, (45, 45, 10))
        assert sum(map(len, lo)) < sum(map(len, hi))

    def test_monotone_rate_and_distortion(self, rng):
        model = make_model(rng, base=32)
        sizes = []
        errs = []
        for q in (10, 30, 50, 70, 90, 100):
            payloads = encode_planes(model.mltp, (q, q, q))
            sizes.append(sum(map(len, payloads)))
            err = 0.0
            for li, payload in enumerate(payloads):
                level = decode_level(payload, model.mltp.resolutions[li], 5, BACKEND_QDEF)
                for name in ("xy", "xz", "yz"):
                    d = level.planes[name].data - model.mltp.levels[li].planes[name].data
                    err += float((d**2).mean())
            errs.append(err)
        assert all(a <= b for a, b in zip(sizes, sizes[1:]))
        assert all(a >= b for a, b in zip(errs, errs[1:]))

    def test_unknown_backend_errors(self, rng):
        model = make_model(rng)
        with pytest.raises((ContainerError, KeyError)):
            encode_planes(model.mltp, (50, 50, 50), backend="webp")

    def test_heic_unavailable_directs_to_qdef(self, rng):
        try:
            import pillow_heif  # noqa: F401
            pytest.skip("pillow_heif installed; unavailability path not testable")
        except ImportError:
            pass
        model = make_model(rng)
        with pytest.raises(ContainerError, match="QDEF"):
            encode_planes(model.mltp, (50, 50, 50), backend="heic")


class TestContainer:
    def test_write_read_write_identical(self, rng):
        model = make_model(rng)
        data = write_container(model, quality=(100, 100, 100))
        again = write_container(read_container(data), quality=(100, 100, 100))
        assert data == again

    def test_write_read_write_identical_lossy(self, rng):
        model = make_model(rng)
        data = write_container(model, quality=(55, 60, 20))
        again = write_container(read_container(data), quality=(55, 60, 20))
        assert data == again

    def test_single_byte_corruption_detected(self, rng):
        model = make_model(rng)
        data = bytearray(write_container(model))
        info = container_info(bytes(data))
        # flip one byte inside the PLN1 payload
        offset = len(data) - sum(info["sections"][t] for t in ("PLN1", "PLN2", "MLP0",
                                                               "MLP1", "MLP2")) + 5
        data[offset] ^= 0xFF
        with pytest.raises(ChecksumError, match="PLN1"):
            read_container(bytes(data))

    def test_bad_magic(self):
        with pytest.raises(BadMagicError):
            parse(b"NOPE" + bytes(100))

    def test_version_skew(self, rng):
        model = make_model(rng)
        data = bytearray(write_container(model))
        data[4] = 99
        with pytest.raises(VersionError):
            parse(bytes(data))

    def test_truncation(self, rng):
        model = make_model(rng)
        data = write_container(model)
        with pytest.raises(TruncatedError):
            parse(data[: len(data) // 2])

    def test_sizes_sum_to_file_size(self, rng):
        model = make_model(rng)
        data = write_container(model)
        info = container_info(data)
        assert info["fixed_overhead"] + sum(info["sections"].values()) == len(data)

    def test_decode_preserves_config(self, rng):
        model = make_model(rng)
        model.contraction = False
        model.sh_degree = 1
        out = read_container(write_container(model))
        assert out.contraction is False
        assert out.sh_degree == 1
        assert out.mltp.active_levels == 3
        assert out.n_points == model.n_points
        np.testing.assert_allclose(out.bbox.center, model.bbox.center)

    def test_mlp_weights_half_precision(self, rng):
        model = make_model(rng)
        out = read_container(write_container(model))
        for a, b in zip(model.decoders, out.decoders):
            np.testing.assert_array_equal(b.w1, a.w1.astype(np.float16).astype(np.float64))
