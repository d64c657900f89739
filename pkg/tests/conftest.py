import sys

import numpy as np
import pytest

from gatescope.checkpoint import Checkpoint, TensorData
from gatescope.naming import DEFAULT_SCHEME, ModuleKey, ModuleRole
from gatescope.tensor import Dtype
from gatescope.toy import ToyConfig

TINY = ToyConfig(d_model=8, n_heads=2, n_kv_heads=1, d_ff=16, n_layers=2, vocab=32, max_seq=8, seed=1)


def projection_checkpoint(layers=2, d=4, f=6, seed=0, dtype=Dtype.F32, extra=True) -> Checkpoint:
    """Random weights under Qwen-style names, plus an embedding and a norm if ``extra``."""
    rng = np.random.default_rng(seed)
    tensors = {}
    shapes = {ModuleRole.GATE: (f, d), ModuleRole.UP: (f, d), ModuleRole.DOWN: (d, f)}
    for layer in range(layers):
        for role in ModuleRole:
            name = DEFAULT_SCHEME.tensor_name(ModuleKey(layer, role))
            tensors[name] = TensorData.from_array(rng.standard_normal(shapes.get(role, (d, d))), dtype)
    if extra:
        tensors["model.embed_tokens.weight"] = TensorData.from_array(rng.standard_normal((10, d)), dtype)
        tensors["model.norm.weight"] = TensorData.from_array(np.ones(d), dtype)
    return Checkpoint.from_tensors(tensors)


def replace(ckpt: Checkpoint, updates: dict, drop=()) -> Checkpoint:
    tensors = {n: t for n, t in ckpt.tensors().items() if n not in drop}
    for name, array in updates.items():
        tensors[name] = TensorData.from_array(array, ckpt.record(name).dtype)
    return Checkpoint.from_tensors(tensors, ckpt.metadata)


@pytest.fixture
def tiny_cfg():
    return TINY


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        status, title, detail = results[number]
        terminalreporter.write_line(f"[{status}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else ""))
