import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from deltafed.errors import FormatError
from deltafed.quant import (
    dequantize,
    from_bytes,
    packed_size,
    quantize,
    to_bytes,
)


def roundtrip(arr, block=64):
    return dequantize(quantize(np.asarray(arr, dtype=np.float64), block))


class TestExactCases:
    @pytest.mark.parametrize("c", [0.0, 3.25, -7.5, 1.0, -0.125, 1024.0])
    def test_constant_tensor_round_trips_exactly(self, c):
        # f32-representable constants; zero range per block
        arr = np.full(130, c)
        assert np.array_equal(roundtrip(arr), arr)

    def test_lattice_block_0_to_15(self):
        arr = np.array([0.0, 15.0, 7.0, 1.0])
        q = quantize(arr)
        assert sorted(set(q.codes.tolist())) == [0, 1, 7, 15]
        assert float(q.scales[0]) == 1.0
        assert int(q.zero_points[0]) == 0
        assert np.array_equal(dequantize(q), arr)

    def test_empty_array(self):
        out = roundtrip(np.array([]))
        assert out.size == 0
        q = quantize(np.array([]))
        assert to_bytes(q) == b"\x00\x00\x00\x00"
        back = from_bytes(b"\x00\x00\x00\x00", (0,))
        assert back.n == 0


class TestErrorBound:
    def test_random_blocks_within_half_step(self):
        # 10_000 uniform blocks; bound is (max-min)/30 plus float slack
        rng = np.random.default_rng(20240131)
        worst = 0.0
        for _ in range(10_000):
            arr = rng.uniform(-1.0, 1.0, size=64)
            err = np.abs(roundtrip(arr) - arr).max()
            bound = (arr.max() - arr.min()) / 30 + 1e-7
            assert err <= bound
            worst = max(worst, err / bound)
        assert worst <= 1.0

    def test_scales_always_positive(self):
        rng = np.random.default_rng(99)
        for _ in range(200):
            arr = rng.standard_normal(rng.integers(1, 200)) * 10.0 ** float(rng.integers(-6, 4))
            q = quantize(arr)
            assert np.all(q.scales > 0)
            assert np.all(q.zero_points <= 15)


class TestIdempotence:
    def test_second_round_trip_exact(self):
        rng = np.random.default_rng(77)
        for i in range(1_000):
            n = int(rng.integers(1, 180))
            arr = rng.uniform(-3, 3, size=n) * 10 ** float(rng.integers(-3, 3))
            once = roundtrip(arr)
            twice = roundtrip(once)
            assert np.array_equal(once, twice), f"case {i}"

    def test_lattice_values_are_fixpoints(self):
        # hand-built grid: scale 0.25, zp 3 -> values 0.25*(k-3)
        vals = 0.25 * (np.arange(16.0) - 3.0)
        assert np.array_equal(roundtrip(vals), vals)


class TestLayout:
    def test_packed_size_formula(self):
        for n in [0, 1, 2, 63, 64, 65, 128, 1000, 1024, 4096]:
            n_blocks = -(-n // 64) if n else 0
            assert packed_size(n) == 4 + 8 * n_blocks + (n + 1) // 2

    def test_compression_ratio_bound(self):
        # against plain f32 payloads the 4-bit form stays under 0.16 for n >= 1024
        for n in [1024, 1025, 1089, 4096, 65536]:
            ratio = packed_size(n) / (4 * n)
            assert ratio <= 0.16
        assert packed_size(1024) == 644  # 4 + 8*16 + 512

    def test_nibble_order_low_first(self):
        # codes [0,15,7,1] at scale 1 zp 0 -> bytes f0 17
        q = quantize(np.array([0.0, 15.0, 7.0, 1.0]))
        raw = to_bytes(q)
        assert raw[:4] == b"\x04\x00\x00\x00"
        assert raw[4:8] == np.float32(1.0).tobytes()
        assert raw[8] == 0  # zero point
        assert raw[9:12] == b"\x00\x00\x00"
        assert raw[12] == 0x00 | (15 << 4)
        assert raw[13] == 0x07 | (1 << 4)

    def test_bytes_round_trip(self):
        rng = np.random.default_rng(5)
        for n in [1, 2, 63, 64, 65, 129, 500]:
            arr = rng.uniform(-2, 2, size=n)
            q = quantize(arr)
            back = from_bytes(to_bytes(q), (n,))
            assert np.array_equal(back.codes, q.codes)
            assert np.array_equal(back.scales, q.scales)
            assert np.array_equal(back.zero_points, q.zero_points)
            assert np.array_equal(dequantize(back), dequantize(q))

    def test_odd_length_pad_nibble_zero(self):
        q = quantize(np.array([1.0, 2.0, 3.0]))
        raw = to_bytes(q)
        assert raw[-1] >> 4 == 0


class TestFormatErrors:
    def good(self):
        return to_bytes(quantize(np.arange(10.0)))

    def test_truncated(self):
        with pytest.raises(FormatError):
            from_bytes(self.good()[:-1], (10,))

    def test_wrong_count(self):
        with pytest.raises(FormatError):
            from_bytes(self.good(), (11,))

    def test_trailing_garbage(self):
        with pytest.raises(FormatError):
            from_bytes(self.good() + b"\x00", (10,))

    def test_nonzero_header_pad(self):
        raw = bytearray(self.good())
        raw[9] = 1  # first pad byte of the block header
        with pytest.raises(FormatError):
            from_bytes(bytes(raw), (10,))

    def test_bad_scale(self):
        raw = bytearray(self.good())
        raw[4:8] = np.float32(0.0).tobytes()
        with pytest.raises(FormatError):
            from_bytes(bytes(raw), (10,))

    def test_nonzero_pad_nibble(self):
        raw = bytearray(to_bytes(quantize(np.array([1.0, 2.0, 3.0]))))
        raw[-1] |= 0xF0
        with pytest.raises(FormatError):
            from_bytes(bytes(raw), (3,))


@settings(max_examples=150, deadline=None)
@given(
    hnp.arrays(
        dtype=np.float64,
        shape=hnp.array_shapes(min_dims=1, max_dims=2, min_side=1, max_side=80),
        elements=st.floats(-25, 25, allow_nan=False, width=64),
    )
)
def test_error_bound_property(arr):
    out = roundtrip(arr)
    flat = arr.reshape(-1)
    dec = out.reshape(-1)
    for i in range(0, flat.size, 64):
        blk = flat[i : i + 64]
        # grid must contain 0, so the effective range is nudged to include it
        lo, hi = min(blk.min(), 0.0), max(blk.max(), 0.0)
        bound = (hi - lo) / 30 + 1e-7
        assert np.abs(dec[i : i + 64] - blk).max() <= bound
        if blk.min() <= 0.0 <= blk.max():
            strict = (blk.max() - blk.min()) / 30 + 1e-7
            assert np.abs(dec[i : i + 64] - blk).max() <= strict
