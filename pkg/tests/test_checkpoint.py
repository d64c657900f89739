import json
import struct

import numpy as np
import pytest

from gatescope.checkpoint import (Checkpoint, TensorData, read_checkpoint, serialize,
                                  write_checkpoint)
from gatescope.errors import FormatError, PairingError, ShapeError
from gatescope.naming import (DEFAULT_SCHEME, PRESETS, ModuleKey, ModuleRole, classify,
                              load_scheme, parse_scheme)
from gatescope.tensor import Dtype


def raw_file(path, header: dict, data: bytes = b"", header_len=None):
    text = json.dumps(header).encode()
    n = len(text) if header_len is None else header_len
    path.write_bytes(struct.pack("<Q", n) + text + data)
    return path


def random_tensors(rng, n=None):
    n = n or int(rng.integers(1, 6))
    out = {}
    for i in range(n):
        dtype = [Dtype.F32, Dtype.F16, Dtype.BF16, Dtype.F64][int(rng.integers(0, 4))]
        rank = int(rng.integers(0, 3))
        shape = tuple(int(s) for s in rng.integers(1, 5, size=rank))
        out[f"t{i}.{dtype.value}"] = TensorData.from_array(rng.standard_normal(shape), dtype)
    return out


def test_single_tensor_index(tmp_path):
    path = tmp_path / "one.safetensors"
    write_checkpoint({"w": TensorData.from_array(np.arange(4.0).reshape(2, 2), Dtype.F32)}, path)
    ckpt = read_checkpoint(path)
    assert ckpt.names() == ["w"]
    assert ckpt.record("w").shape == (2, 2)
    np.testing.assert_array_equal(ckpt.load_matrix("w"), [[0, 1], [2, 3]])


def test_header_length_zero(tmp_path):
    path = tmp_path / "bad.safetensors"
    path.write_bytes(struct.pack("<Q", 0) + b"{}")
    with pytest.raises(FormatError, match="header length 0"):
        read_checkpoint(path)


def test_header_length_beyond_file(tmp_path):
    path = raw_file(tmp_path / "bad.safetensors", {}, header_len=10_000)
    with pytest.raises(FormatError, match="malformed header length"):
        read_checkpoint(path)


def test_short_file(tmp_path):
    path = tmp_path / "short.safetensors"
    path.write_bytes(b"\x01\x00")
    with pytest.raises(FormatError):
        read_checkpoint(path)


def test_header_not_json(tmp_path):
    path = tmp_path / "bad.safetensors"
    path.write_bytes(struct.pack("<Q", 4) + b"{no}")
    with pytest.raises(FormatError, match="JSON"):
        read_checkpoint(path)


def test_unknown_dtype(tmp_path):
    path = raw_file(tmp_path / "bad.safetensors",
                    {"w": {"dtype": "I8", "shape": [1], "data_offsets": [0, 1]}}, b"\x00")
    with pytest.raises(FormatError, match="unknown dtype"):
        read_checkpoint(path)


def test_out_of_range_offsets(tmp_path):
    path = raw_file(tmp_path / "bad.safetensors",
                    {"w": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}}, b"\x00" * 4)
    with pytest.raises(FormatError, match="outside data region"):
        read_checkpoint(path)


def test_offsets_disagree_with_shape(tmp_path):
    path = raw_file(tmp_path / "bad.safetensors",
                    {"w": {"dtype": "F32", "shape": [3], "data_offsets": [0, 8]}}, b"\x00" * 8)
    with pytest.raises(FormatError, match="needs 12"):
        read_checkpoint(path)


def test_overlapping_offsets(tmp_path):
    header = {"a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
              "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]}}
    path = raw_file(tmp_path / "bad.safetensors", header, b"\x00" * 12)
    with pytest.raises(FormatError, match="overlap"):
        read_checkpoint(path)


def test_bad_metadata(tmp_path):
    path = raw_file(tmp_path / "bad.safetensors", {"__metadata__": {"a": 1}})
    with pytest.raises(FormatError, match="__metadata__"):
        read_checkpoint(path)


def test_header_is_padded_and_aligned(tmp_path):
    blob = serialize({"w": TensorData.from_array([1.0, 2.0, 3.0], Dtype.F32)}, {"k": "v"})
    (n,) = struct.unpack("<Q", blob[:8])
    assert n % 8 == 0
    header = json.loads(blob[8:8 + n])
    assert header["__metadata__"] == {"k": "v"}
    assert header["w"] == {"dtype": "F32", "shape": [3], "data_offsets": [0, 12]}


@pytest.mark.parametrize("seed", range(10))
def test_write_read_write_is_byte_identical(tmp_path, seed):
    rng = np.random.default_rng(seed)
    tensors = random_tensors(rng)
    first, second = tmp_path / "a.safetensors", tmp_path / "b.safetensors"
    write_checkpoint(tensors, first, {"seed": str(seed)})
    ckpt = read_checkpoint(first)
    assert {n: (r.dtype, r.shape) for n, r in ckpt.records.items()} == \
        {n: (t.dtype, t.shape) for n, t in tensors.items()}
    write_checkpoint(ckpt, second)
    assert first.read_bytes() == second.read_bytes()
    assert ckpt.metadata == {"seed": str(seed)}


def test_load_matrix_views_vectors_as_rows(tmp_path):
    ckpt = Checkpoint.from_tensors({"g": TensorData.from_array([1.0, 2.0, 3.0], Dtype.F64),
                                    "c": TensorData.from_array(np.zeros((2, 2, 2)), Dtype.F32)})
    assert ckpt.load_matrix("g").shape == (1, 3)
    with pytest.raises(ShapeError, match="rank 3"):
        ckpt.load_matrix("c")
    with pytest.raises(PairingError, match="missing"):
        ckpt.load_matrix("missing")


def test_tensor_data_checks_length():
    with pytest.raises(ShapeError):
        TensorData(Dtype.F32, (2,), b"\x00" * 4)


def test_lazy_read_touches_only_header(tmp_path, monkeypatch):
    path = tmp_path / "big.safetensors"
    write_checkpoint({"w": TensorData.from_array(np.zeros((256, 256)), Dtype.F32)}, path)
    reads = []
    real_open = open

    class Spy:
        def __init__(self, fh):
            self.fh = fh

        def read(self, n=-1):
            data = self.fh.read(n)
            reads.append(len(data))
            return data

        def __enter__(self):
            return self

        def __exit__(self, *exc):
            self.fh.close()

        def __getattr__(self, name):
            return getattr(self.fh, name)

    monkeypatch.setattr("builtins.open", lambda *a, **k: Spy(real_open(*a, **k)))
    read_checkpoint(path)
    assert sum(reads) < 200  # prefix + header, not the 256 KiB payload


def test_sharded_checkpoint(tmp_path):
    a = {"model.layers.0.mlp.gate_proj.weight": TensorData.from_array(np.ones((2, 2)), Dtype.F32)}
    b = {"model.layers.1.mlp.gate_proj.weight": TensorData.from_array(np.full((2, 2), 2.0), Dtype.F32)}
    write_checkpoint(a, tmp_path / "s1.safetensors")
    write_checkpoint(b, tmp_path / "s2.safetensors")
    index = {"metadata": {"total_size": 32},
             "weight_map": {**{k: "s1.safetensors" for k in a}, **{k: "s2.safetensors" for k in b}}}
    (tmp_path / "model.safetensors.index.json").write_text(json.dumps(index))
    ckpt = read_checkpoint(tmp_path / "model.safetensors.index.json")
    assert len(ckpt) == 2
    assert ckpt.load_matrix("model.layers.1.mlp.gate_proj.weight")[0, 0] == 2.0
    merged = tmp_path / "merged.safetensors"
    write_checkpoint(ckpt, merged)
    assert read_checkpoint(merged).digest() == ckpt.digest()


def test_sharded_index_missing_tensor(tmp_path):
    write_checkpoint({"x": TensorData.from_array([1.0], Dtype.F32)}, tmp_path / "s1.safetensors")
    (tmp_path / "m.safetensors.index.json").write_text(
        json.dumps({"weight_map": {"x": "s1.safetensors", "y": "s1.safetensors"}}))
    with pytest.raises(FormatError, match="absent"):
        read_checkpoint(tmp_path / "m.safetensors.index.json")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope"):
        read_checkpoint(tmp_path / "nope.safetensors")


# --- naming ---------------------------------------------------------------------

@pytest.mark.parametrize("name,expected", [
    ("model.layers.3.mlp.gate_proj.weight", ModuleKey(3, ModuleRole.GATE)),
    ("model.layers.0.self_attn.q_proj.weight", ModuleKey(0, ModuleRole.Q)),
    ("model.layers.12.self_attn.o_proj.weight", ModuleKey(12, ModuleRole.O)),
    ("model.layers.7.mlp.down_proj.weight", ModuleKey(7, ModuleRole.DOWN)),
    ("model.embed_tokens.weight", None),
    ("model.layers.0.self_attn.q_proj.bias", None),
    ("model.layers.0.input_layernorm.weight", None),
    ("lm_head.weight", None),
    ("model.layers.0.self_attn.qkv_proj.weight", None),
])
def test_classify(name, expected):
    assert classify(name, DEFAULT_SCHEME) == expected


def test_presets_cover_families():
    assert set(PRESETS) == {"qwen", "llama", "mistral"}
    for scheme in PRESETS.values():
        for role in ModuleRole:
            key = ModuleKey(5, role)
            assert scheme.classify(scheme.tensor_name(key)) == key


def test_roles_are_mutually_exclusive():
    for role in ModuleRole:
        name = DEFAULT_SCHEME.tensor_name(ModuleKey(1, role))
        hits = [r for r in DEFAULT_SCHEME.rules if r.match(name)]
        assert len(hits) == 1


def test_scheme_file(tmp_path):
    text = """
    # GPT-NeoX style names
    gate   gpt_neox\\.layers\\.(?P<layer>\\d+)\\.mlp\\.dense_h_to_4h\\.weight
    down_proj gpt_neox\\.layers\\.(?P<layer>\\d+)\\.mlp\\.dense_4h_to_h\\.weight
    """
    path = tmp_path / "neox.scheme"
    path.write_text(text)
    scheme = load_scheme(str(path))
    assert scheme.classify("gpt_neox.layers.4.mlp.dense_h_to_4h.weight") == ModuleKey(4, ModuleRole.GATE)
    assert scheme.classify("gpt_neox.layers.4.attention.dense.weight") is None


@pytest.mark.parametrize("text,match", [
    ("gate foo\\.(\\d+)", "layer"),
    ("nonsense model\\.(?P<layer>\\d+)", "unknown module role"),
    ("gate", "expected"),
    ("", "no rules"),
    ("gate model\\.(?P<layer>\\d+", "bad naming regex"),
])
def test_scheme_file_errors(text, match):
    with pytest.raises(FormatError, match=match):
        parse_scheme(text)
