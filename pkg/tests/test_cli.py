import hashlib
import json

import jsonschema
import numpy as np
import pytest

from gatescope.checkpoint import read_checkpoint, write_checkpoint
from gatescope.cli import main
from gatescope.diff import diff_checkpoints, report_csv
from gatescope.naming import DEFAULT_SCHEME
from gatescope.schemas import SCHEMAS
from gatescope.synthetic import localization_pair
from gatescope.toy import EMBED, ToyConfig, init_model

from conftest import TINY, projection_checkpoint

SMALL = ToyConfig(d_model=16, n_heads=4, n_kv_heads=2, d_ff=32, n_layers=2, vocab=24, max_seq=8, seed=3)
TOY_FLAGS = ["--d-model", "16", "--n-heads", "4", "--n-kv-heads", "2", "--d-ff", "32", "--n-layers", "2",
             "--vocab", "24", "--model-seed", "3"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def check_schema(text):
    doc = json.loads(text)
    jsonschema.validate(doc, SCHEMAS[doc["schema"]])
    return doc


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def pair(tmp_path):
    base, adapted = localization_pair(TINY)
    b, a = tmp_path / "base.safetensors", tmp_path / "adapted.safetensors"
    write_checkpoint(base, b)
    write_checkpoint(adapted, a)
    return b, a


def test_identical_files_give_zero_report(capsys, pair):
    base, _ = pair
    code, out, _ = run(capsys, "diff", base, base)
    assert code == 0
    rows = out.splitlines()[1:]
    assert rows and all(r.split(",")[2] == "0.0" and r.split(",")[3] == "0.0" for r in rows)


def test_missing_file_names_path(capsys, pair, tmp_path):
    base, _ = pair
    missing = tmp_path / "nope.safetensors"
    code, out, err = run(capsys, "diff", base, missing)
    assert code == 2 and out == ""
    assert str(missing) in err


def test_cli_csv_matches_library_bytes(capsys, pair, tmp_path):
    base, adapted = pair
    out_path = tmp_path / "r.csv"
    assert run(capsys, "diff", base, adapted, "--out", out_path)[0] == 0
    lib = report_csv(diff_checkpoints(read_checkpoint(base), read_checkpoint(adapted), DEFAULT_SCHEME))
    assert out_path.read_bytes() == lib.encode()
    code, out, _ = run(capsys, "report", out_path, "--format", "json")
    assert check_schema(out)["reports"][0]["ranking"][0][0] == "gate_proj"


def test_outputs_are_deterministic_and_thread_independent(capsys, pair, tmp_path):
    base, adapted = pair
    outputs = []
    for i, threads in enumerate((1, 4, 1)):
        svg, hist = tmp_path / f"h{i}.svg", tmp_path / f"h{i}.json"
        code, out, _ = run(capsys, "diff", base, adapted, "--format", "json", "--threads", threads,
                           "--svg", svg, "--histogram", hist)
        assert code == 0
        outputs.append((out, svg.read_bytes(), hist.read_bytes()))
    assert outputs[0] == outputs[1] == outputs[2]
    check_schema(outputs[0][0])
    check_schema(outputs[0][2])


def test_inputs_are_not_mutated(capsys, pair, tmp_path):
    base, adapted = pair
    before = (sha(base), sha(adapted))
    run(capsys, "diff", base, adapted, "--svg", tmp_path / "x.svg")
    run(capsys, "transplant", base, adapted, "--modules", "gate", "--out", tmp_path / "t.safetensors")
    assert (sha(base), sha(adapted)) == before
    code, _, err = run(capsys, "transplant", base, adapted, "--modules", "gate", "--out", base)
    assert code == 2 and "overwrite" in err
    assert (sha(base), sha(adapted)) == before


def test_transplant_json(capsys, pair, tmp_path):
    base, adapted = pair
    out = tmp_path / "t.safetensors"
    code, text, _ = run(capsys, "transplant", base, adapted, "--modules", "gate", "--layers", "1",
                        "--out", out, "--format", "json")
    assert code == 0
    doc = check_schema(text)
    assert doc["changed"] == ["model.layers.1.mlp.gate_proj.weight"]
    assert doc["sha256"] == sha(out)
    donor = read_checkpoint(adapted)
    assert read_checkpoint(out).raw(doc["changed"][0]) == donor.raw(doc["changed"][0])


def test_merge_lora_and_alias(capsys, tmp_path):
    model_path = tmp_path / "toy.safetensors"
    adapters = tmp_path / "ad.safetensors"
    assert run(capsys, "init-toy", "--out", model_path, *TOY_FLAGS)[0] == 0
    assert run(capsys, "train", "--model", model_path, "--steps", 5, "--n-train", 64, "--n-eval", 16,
               "--rank", 2, "--adapters", adapters, "-q")[0] == 0
    outs = []
    for cmd in ("merge-lora", "load-lora"):
        out = tmp_path / f"{cmd}.safetensors"
        code, text, _ = run(capsys, cmd, model_path, adapters, "--modules", "gate", "--out", out, "--format", "json")
        assert code == 0
        outs.append(check_schema(text)["changed"])
        outs.append(out.read_bytes())
    assert outs[0] == outs[2] and outs[1] == outs[3]
    assert all(".mlp.gate_proj." in n for n in outs[0]) and len(outs[0]) == 2
    code, _, err = run(capsys, "merge-lora", model_path, adapters, "--modules", "up", "--out", tmp_path / "u")
    assert code == 4 and "no adapter" in err


def test_train_outputs_deterministic(capsys, tmp_path):
    runs = []
    for i in range(2):
        trace, adapters = tmp_path / f"t{i}.csv", tmp_path / f"a{i}.safetensors"
        code, out, err = run(capsys, "train", *TOY_FLAGS, "--steps", 100, "--n-train", 256, "--n-eval", 64,
                             "--rank", 2, "--trace", trace, "--adapters", adapters, "--format", "json")
        assert code == 0
        assert "step 100 loss" in err
        json.loads(out)  # stdout carries only the JSON document
        runs.append((out, trace.read_bytes(), adapters.read_bytes()))
    assert runs[0] == runs[1]
    doc = check_schema(runs[0][0])
    assert doc["final_loss"] < doc["initial_loss"]
    assert doc["steps"] == 100 and len(runs[0][1].splitlines()) == 101


def test_train_divergence_exit_code(capsys, tmp_path):
    model = init_model(SMALL)
    model.params[EMBED][:] = np.nan
    path = tmp_path / "poisoned.safetensors"
    ckpt = model.to_checkpoint()
    write_checkpoint(ckpt, path)
    code, out, err = run(capsys, "train", "--model", path, "--steps", 5, "--n-train", 32, "--n-eval", 8)
    assert code == 5 and "step 1" in err and out == ""


def test_param_fraction(capsys, tmp_path):
    code, out, _ = run(capsys, "param-fraction", "--modules", "gate", "--rank", 16)
    assert code == 0 and out.startswith("0.25 (")
    code, out, _ = run(capsys, "param-fraction", "--format", "json")
    doc = check_schema(out)
    assert (doc["numerator"], doc["denominator"], doc["fraction"]) == (1, 4, 0.25)
    assert (doc["selected_params_per_layer"], doc["total_params_per_layer"]) == (22528 * 8, 90112 * 8)
    code, out, _ = run(capsys, "param-fraction", "--dims", "toy", "--format", "json")
    assert check_schema(out)["fraction"] == 320 / 1408
    dims = tmp_path / "dims.json"
    dims.write_text(json.dumps({r: [4, 4] for r in ("q", "k", "v", "o", "gate", "up", "down")}))
    code, out, _ = run(capsys, "param-fraction", "--dims", dims, "--modules", "att", "--format", "json")
    assert check_schema(out)["fraction"] == 4 / 7
    dims.write_text("{not json")
    assert run(capsys, "param-fraction", "--dims", dims)[0] == 3


def test_compare(capsys):
    code, out, _ = run(capsys, "compare", *TOY_FLAGS, "--select", "control", "--select", "gate",
                       "--steps", 20, "--n-train", 64, "--n-eval", 16, "--rank", 2, "--format", "json",
                       "--threads", 2)
    assert code == 0
    rows = check_schema(out)["rows"]
    assert [r["selection"] for r in rows] == ["control(lr=0)", "gate"]
    assert rows[0]["final_loss"] == rows[0]["initial_loss"]


def test_report_combines_panels(capsys, pair, tmp_path):
    base, adapted = pair
    r1, r2 = tmp_path / "one.csv", tmp_path / "two.csv"
    run(capsys, "diff", base, adapted, "--out", r1)
    run(capsys, "diff", base, base, "--out", r2)
    svg = tmp_path / "all.svg"
    code, out, _ = run(capsys, "report", r1, r2, "--svg", svg, "--statistic", "relative_ratio")
    assert code == 0 and "one.csv" in out and "two.csv" in out
    text = svg.read_text()
    assert text.count('class="cell"') == 2 * TINY.n_layers * 7
    assert ">one<" in text and ">two<" in text


def test_exit_codes(capsys, pair, tmp_path):
    base, _ = pair
    garbage = tmp_path / "garbage.safetensors"
    garbage.write_bytes(b"\x05\x00\x00\x00\x00\x00\x00\x00{oops")
    code, _, err = run(capsys, "diff", base, garbage)
    assert code == 3 and "garbage" in err
    other = tmp_path / "other.safetensors"
    write_checkpoint(projection_checkpoint(layers=TINY.n_layers, d=5, f=7), other)
    assert run(capsys, "diff", base, other)[0] == 4
    assert run(capsys, "transplant", base, base, "--modules", "gates", "--out", tmp_path / "x")[0] == 2
    with pytest.raises(SystemExit) as exc:
        main(["diff", str(base)])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_environment_overrides(capsys, pair, tmp_path, monkeypatch):
    base, adapted = pair
    scheme = tmp_path / "gate_only.scheme"
    scheme.write_text("# only gate\ngate ^model\\.layers\\.(?P<layer>\\d+)\\.mlp\\.gate_proj\\.weight$\n")
    monkeypatch.setenv("GATESCOPE_SCHEME", str(scheme))
    code, out, _ = run(capsys, "diff", base, adapted)
    assert code == 0
    assert {row.split(",")[1] for row in out.splitlines()[1:]} == {"gate_proj"}
    code, out, _ = run(capsys, "diff", base, adapted, "--scheme", "qwen")
    assert len(out.splitlines()) == 1 + 7 * TINY.n_layers
    monkeypatch.setenv("GATESCOPE_THREADS", "zero")
    code, _, err = run(capsys, "diff", base, adapted)
    assert code == 2 and "GATESCOPE_THREADS" in err
    monkeypatch.setenv("GATESCOPE_THREADS", "3")
    assert run(capsys, "diff", base, adapted)[0] == 0


def test_synth_pair(capsys, tmp_path):
    b, a = tmp_path / "b.safetensors", tmp_path / "a.safetensors"
    code, out, _ = run(capsys, "synth-pair", "--base-out", b, "--adapted-out", a, *TOY_FLAGS, "--format", "json")
    assert code == 0
    doc = check_schema(out)
    assert doc["base_sha256"] == sha(b) and doc["adapted_sha256"] == sha(a)
    code, out, _ = run(capsys, "diff", b, a, "--format", "json", "-q")
    assert check_schema(out)["ranking"]["l2"]["mean"][0][0] == "gate_proj"
