import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nirpcc import neuralnet as nn
from nirpcc import weight_codec as wc
from nirpcc.neuralnet import NetworkConfig

GOLDEN_LEVELS = [
    0, 0, 1, -1, 0, 2, -3, 0, 0, 0, 5, -6, 0, 1, 0, 0, 17, -1, 0, 0, 0, 0, 4, 0, -2, 0, 0, 1, 100, 0,
    -1, 0, 0, 0, 0, 3, 0, -5, 0, 1, 0, 0, 0, -1, 0, 1048576, 0, 0, 2, 0, -1, 0, 0, 0, 7, 0, 0, -4,
    0, 1, 0, 0, -1048576, 0,
]
GOLDEN_BYTES = bytes.fromhex(
    "00c90ddc7b984ac8008dc58ada07d0728cdefac01df2367196dc6bd842c55ee7697a48c0"
)

SMALL = NetworkConfig(3, 1, 2, 1, 16, 8)


def test_golden_vector():
    assert len(GOLDEN_LEVELS) == 64
    assert wc.encode_level_arrays([GOLDEN_LEVELS]) == GOLDEN_BYTES
    assert wc.decode_level_arrays(GOLDEN_BYTES, [64])[0].tolist() == GOLDEN_LEVELS


def test_step_exponent_values():
    assert 2.0 ** -10 == 1 / 1024 and 2.0 ** -12 == 1 / 4096


@pytest.mark.parametrize("e", [10, 12])
def test_quantization_error_bounded(e):
    model = nn.init_model(SMALL, 0)
    qm = wc.quantize(model, e)
    back = wc.dequantize(qm)
    err = np.abs(model.flat_parameters().astype(np.float32).astype(np.float64) - back.flat_parameters())
    assert err.max() <= qm.step / 2


def test_ties_round_away_from_zero():
    model = nn.init_model(NetworkConfig(3, 1, 0, 1, 1, 1), 0)
    for t in model.tensors():
        t[...] = 0
    model.layers[0].weights[:, 0] = [1.5 / 1024, -2.5 / 1024, 0.5 / 1024]
    qm = wc.quantize(model, 10)
    assert qm.levels[0][:, 0].tolist() == [2, -3, 1]


def test_overflow_detected():
    model = nn.init_model(SMALL, 0)
    model.layers[0].bias[0] = 5000.0
    with pytest.raises(wc.QuantizationOverflow):
        wc.quantize(model, 20)


def test_bad_exponent():
    with pytest.raises(ValueError):
        wc.quantize(nn.init_model(SMALL, 0), 0)


def test_all_zero_payload_is_small():
    data = wc.encode_level_arrays([np.zeros(100, dtype=np.int64)])
    assert data[0] == 0
    assert 8 * len(data) < 100 + 8 * 5


def test_empty_payload_is_flush_only():
    assert wc.encode_level_arrays([]) == bytes(5)


def test_sparse_round_trip_1e5(rng):
    vals = rng.geometric(0.3, size=100_000) * rng.choice([-1, 1], size=100_000)
    vals[rng.random(100_000) < 0.8] = 0
    data = wc.encode_level_arrays([vals])
    assert wc.decode_level_arrays(data, [len(vals)])[0].tolist() == vals.tolist()


def test_model_round_trip():
    qm = wc.quantize(nn.init_model(SMALL, 3), 12)
    back = wc.decode_levels(wc.encode_levels(qm), SMALL, 12)
    assert back == qm


def test_sparser_levels_cost_fewer_bytes(rng):
    base = rng.integers(-50, 51, size=4000)
    sizes = []
    for zero_frac in (0.0, 0.5, 0.9, 0.99, 1.0):
        arr = base.copy()
        arr[: int(zero_frac * len(arr))] = 0
        sizes.append(len(wc.encode_level_arrays([arr])))
    assert sizes == sorted(sizes, reverse=True)
    assert sizes[0] > sizes[-1]


def test_truncated_payload_rejected():
    data = wc.encode_level_arrays([GOLDEN_LEVELS])
    with pytest.raises(wc.PrematureEnd):
        wc.decode_level_arrays(data[:-3], [64])
    with pytest.raises(wc.PrematureEnd):
        wc.decode_level_arrays(b"\x00\x01", [1])


def test_trailing_bytes_rejected():
    data = wc.encode_level_arrays([GOLDEN_LEVELS])
    with pytest.raises(wc.TrailingData):
        wc.decode_level_arrays(data + b"\x00", [64])


def test_nonzero_first_byte_rejected():
    with pytest.raises(wc.DecodeError):
        wc.decode_level_arrays(b"\x01" + bytes(8), [3])


def test_carry_propagation_stress():
    # long runs of highly probable bins push low towards 0xFF.. patterns
    arrays = [np.ones(20_000, dtype=np.int64), np.zeros(20_000, dtype=np.int64),
              np.full(5000, -(1 << 20)), np.arange(-3000, 3000)]
    data = wc.encode_level_arrays(arrays)
    out = wc.decode_level_arrays(data, [len(a) for a in arrays])
    assert all(np.array_equal(a, b) for a, b in zip(arrays, out))


level = st.integers(-(1 << 20), 1 << 20)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.lists(st.one_of(st.just(0), st.integers(-6, 6), level), max_size=60), max_size=8))
def test_round_trip_property(arrays):
    data = wc.encode_level_arrays(arrays)
    out = wc.decode_level_arrays(data, [len(a) for a in arrays])
    assert [o.tolist() for o in out] == arrays
