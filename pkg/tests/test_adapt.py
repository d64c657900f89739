import numpy as np
import pytest

from gatescope.adapt import (LoraPair, ModuleSelection, merge_lora, parse_selection, read_adapters,
                             selective_load, transplant, write_adapters)
from gatescope.checkpoint import read_checkpoint, write_checkpoint
from gatescope.diff import diff_checkpoints
from gatescope.errors import FormatError, PairingError, ShapeError, UsageError
from gatescope.naming import ATTENTION_ROLES, DEFAULT_SCHEME, ROLE_ORDER, ModuleKey, ModuleRole
from gatescope.synthetic import perturb

from conftest import projection_checkpoint

GATE = ModuleRole.GATE


def random_adapters(ckpt, rank=2, alpha=4.0, seed=0, roles=ROLE_ORDER):
    rng = np.random.default_rng(seed)
    out = []
    for name in ckpt.names():
        key = DEFAULT_SCHEME.classify(name)
        if key is None or key.role not in roles:
            continue
        d_out, d_in = ckpt.record(name).shape
        out.append(LoraPair(key, rng.standard_normal((rank, d_in)), rng.standard_normal((d_out, rank)), alpha))
    return out


def changed_cells(base, out):
    result = diff_checkpoints(base, out, DEFAULT_SCHEME)
    return {r.key for r in result.records if r.l2 != 0}


def test_merge_zero_adapter_is_identity():
    w = np.random.default_rng(0).standard_normal((3, 4))
    p = LoraPair(ModuleKey(0, GATE), np.ones((2, 4)), np.zeros((3, 2)), 8.0)
    np.testing.assert_array_equal(merge_lora(w, p), w)
    p = LoraPair(ModuleKey(0, GATE), np.zeros((2, 4)), np.ones((3, 2)), 8.0)
    np.testing.assert_array_equal(merge_lora(w, p), w)


def test_merge_rank_one_outer_product():
    p = LoraPair(ModuleKey(0, GATE), np.array([[0.0, 1.0]]), np.array([[1.0], [0.0]]), 1.0)
    np.testing.assert_array_equal(merge_lora(np.zeros((2, 2)), p), [[0.0, 1.0], [0.0, 0.0]])


def test_merge_matches_dense_oracle():
    rng = np.random.default_rng(1)
    w, a, b = rng.standard_normal((6, 5)), rng.standard_normal((3, 5)), rng.standard_normal((6, 3))
    alpha = 5.0
    oracle = np.array(w)
    for i in range(6):
        for j in range(5):
            oracle[i, j] += alpha / 3 * sum(b[i, k] * a[k, j] for k in range(3))
    p = LoraPair(ModuleKey(0, GATE), a, b, alpha)
    np.testing.assert_allclose(merge_lora(w, p), oracle, rtol=0, atol=1e-12)
    np.testing.assert_allclose(merge_lora(w, p, by_rank=False), w + alpha * b @ a, atol=1e-12)


def test_lora_pair_validates_rank():
    with pytest.raises(ShapeError):
        LoraPair(ModuleKey(0, GATE), np.ones((2, 4)), np.ones((3, 3)), 1.0)
    p = LoraPair(ModuleKey(0, GATE), np.ones((2, 4)), np.ones((3, 2)), 1.0)
    with pytest.raises(ShapeError):
        merge_lora(np.zeros((4, 3)), p)


def test_parse_selection():
    assert parse_selection("gate").roles == {GATE}
    sel = parse_selection("q,k,v,o,gate", "0..27")
    assert sel.roles == ATTENTION_ROLES | {GATE} and sel.layers == (0, 27)
    assert parse_selection("att,gate_proj").roles == ATTENTION_ROLES | {GATE}
    assert parse_selection("all").roles == set(ROLE_ORDER)
    assert ModuleKey(3, GATE) in parse_selection("gate", "3")
    assert ModuleKey(4, GATE) not in parse_selection("gate", "0..3")
    for bad in ("", "gates"):
        with pytest.raises(UsageError):
            parse_selection(bad)
    with pytest.raises(UsageError):
        parse_selection("gate", "5..2")


def test_selective_load_without_adapters_is_identity():
    base = projection_checkpoint()
    out = selective_load(base, [], ModuleSelection.of(GATE))
    assert out.to_bytes() == base.to_bytes()


def test_selective_load_gate_only():
    base = projection_checkpoint(layers=3)
    out = selective_load(base, random_adapters(base), ModuleSelection.of(GATE))
    assert changed_cells(base, out) == {ModuleKey(l, GATE) for l in range(3)}
    unselected = [n for n in base.names() if DEFAULT_SCHEME.classify(n) is None
                  or DEFAULT_SCHEME.classify(n).role is not GATE]
    assert out.digest(unselected) == base.digest(unselected)


def test_selective_load_attention_plus_gate():
    base = projection_checkpoint(layers=2)
    sel = ModuleSelection(ATTENTION_ROLES | {GATE})
    out = selective_load(base, random_adapters(base), sel)
    assert {k.role for k in changed_cells(base, out)} == set(ATTENTION_ROLES | {GATE})


def test_selective_load_layer_range():
    base = projection_checkpoint(layers=4)
    out = selective_load(base, random_adapters(base), ModuleSelection.of(GATE, layers=(1, 2)))
    assert changed_cells(base, out) == {ModuleKey(1, GATE), ModuleKey(2, GATE)}


def test_selective_load_composes():
    base = projection_checkpoint(layers=2)
    adapters = random_adapters(base)
    s1, s2 = ModuleSelection.of("q", "k"), ModuleSelection.of("gate", "down")
    two_step = selective_load(selective_load(base, adapters, s1), adapters, s2)
    one_step = selective_load(base, adapters, s1.union(s2))
    assert two_step.to_bytes() == one_step.to_bytes()


def test_selective_load_errors():
    base = projection_checkpoint(layers=2)
    gate_only = random_adapters(base, roles={GATE})
    with pytest.raises(PairingError, match="no adapter"):
        selective_load(base, gate_only, ModuleSelection.of("gate", "up"))
    stray = LoraPair(ModuleKey(9, GATE), np.ones((1, 4)), np.ones((6, 1)), 1.0)
    with pytest.raises(PairingError, match="does not resolve"):
        selective_load(base, gate_only + [stray], ModuleSelection.of("gate"))
    bad = LoraPair(ModuleKey(0, GATE), np.ones((1, 5)), np.ones((6, 1)), 1.0)
    with pytest.raises(ShapeError):
        selective_load(base, [bad] + gate_only[1:], ModuleSelection.of("gate"))


def test_transplant_full_copy_and_identity():
    base = projection_checkpoint(layers=2, seed=0)
    donor = perturb(base, {r: 0.5 for r in ModuleRole}, seed=1)
    out = transplant(base, donor, ModuleSelection(frozenset(ROLE_ORDER)))
    assert changed_cells(donor, out) == set()
    assert out.digest(["model.embed_tokens.weight", "model.norm.weight"]) == \
        base.digest(["model.embed_tokens.weight", "model.norm.weight"])
    assert transplant(base, base, ModuleSelection.of("gate", "v")).to_bytes() == base.to_bytes()


def test_transplant_gate_only():
    base = projection_checkpoint(layers=3, seed=0)
    donor = perturb(base, {r: 0.5 for r in ModuleRole}, seed=1)
    out = transplant(base, donor, ModuleSelection.of(GATE))
    assert {k.role for k in changed_cells(base, out)} == {GATE}
    assert GATE not in {k.role for k in changed_cells(donor, out)}
    again = transplant(out, donor, ModuleSelection.of(GATE))
    assert again.to_bytes() == out.to_bytes()


def test_transplant_copies_bytes_exactly():
    from gatescope.tensor import Dtype
    base = projection_checkpoint(dtype=Dtype.BF16)
    donor = perturb(base, {GATE: 0.3}, seed=2)
    out = transplant(base, donor, ModuleSelection.of(GATE))
    name = DEFAULT_SCHEME.tensor_name(ModuleKey(0, GATE))
    assert out.raw(name) == donor.raw(name)
    assert out.record(name).dtype is Dtype.BF16


def test_transplant_errors():
    base = projection_checkpoint(layers=2)
    donor = projection_checkpoint(layers=1)
    with pytest.raises(PairingError, match="donor"):
        transplant(base, donor, ModuleSelection.of(GATE))
    wide = projection_checkpoint(layers=2, f=7)
    with pytest.raises(ShapeError):
        transplant(base, wide, ModuleSelection.of(GATE))
    with pytest.raises(PairingError, match="matches no tensor"):
        transplant(base, base, ModuleSelection.of(GATE, layers=(5, 6)))


def test_adapter_file_roundtrip(tmp_path):
    base = projection_checkpoint()
    pairs = random_adapters(base, rank=3, alpha=6.0)
    path = tmp_path / "adapters.safetensors"
    write_adapters(pairs, path)
    ckpt = read_checkpoint(path)
    assert ckpt.metadata == {"alpha": "6.0", "rank": "3"}
    assert "model.layers.0.mlp.gate_proj.weight.lora_A" in ckpt
    back = read_adapters(path)
    assert sorted(p.key for p in back) == sorted(p.key for p in pairs)
    by_key = {p.key: p for p in back}
    for p in pairs:
        np.testing.assert_array_equal(by_key[p.key].a, p.a)
        np.testing.assert_array_equal(by_key[p.key].b, p.b)
        assert by_key[p.key].alpha == 6.0


def test_adapter_file_errors(tmp_path):
    from gatescope.checkpoint import TensorData
    path = tmp_path / "a.safetensors"
    write_checkpoint({"model.layers.0.mlp.gate_proj.weight.lora_A": TensorData.from_array(np.ones((1, 4)))}, path)
    with pytest.raises(FormatError, match="alpha"):
        read_adapters(path)
    write_checkpoint({"model.layers.0.mlp.gate_proj.weight.lora_A": TensorData.from_array(np.ones((1, 4)))},
                     path, {"alpha": "1", "rank": "1"})
    with pytest.raises(FormatError, match="lacks"):
        read_adapters(path)
