"""Synthetic checkpoint pairs with known per-role perturbation sizes."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .checkpoint import Checkpoint, TensorData
from .naming import DEFAULT_SCHEME, ModuleRole, NamingScheme
from .toy import ToyConfig, init_model


def perturb(ckpt: Checkpoint, sigma: Mapping[ModuleRole, float], seed: int = 0,
            scheme: NamingScheme = DEFAULT_SCHEME) -> Checkpoint:
    """Add N(0, sigma[role]^2) noise to every classified tensor; other tensors keep their bytes.

    Roles absent from ``sigma`` are left untouched. Noise is drawn tensor by
    tensor in name order, so the result depends only on ``seed``.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name in ckpt.names():
        key = scheme.classify(name)
        rec = ckpt.record(name)
        if key is None or key.role not in sigma:
            tensors[name] = ckpt.tensor(name)
            continue
        w = ckpt.load_array(name)
        noisy = w + sigma[key.role] * rng.standard_normal(w.shape)
        tensors[name] = TensorData.from_array(noisy, rec.dtype)
    return Checkpoint.from_tensors(tensors, ckpt.metadata)


def localization_pair(cfg: ToyConfig | None = None, gate_sigma: float = 1e-2, other_sigma: float = 1e-3,
                      seed: int = 0) -> tuple[Checkpoint, Checkpoint]:
    """(base, adapted) where gate_proj moved by ``gate_sigma`` and every other projection by ``other_sigma``."""
    cfg = cfg or ToyConfig()
    base = init_model(cfg).to_checkpoint()
    sigma = {r: (gate_sigma if r is ModuleRole.GATE else other_sigma) for r in ModuleRole}
    return base, perturb(base, sigma, seed)
