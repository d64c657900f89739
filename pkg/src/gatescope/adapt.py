"""Interventions on checkpoints: LoRA merge, selective adapter loading, module transplant.

Adapter files are safetensors with tensors ``<base_tensor_name>.lora_A``
(r x d_in) and ``<base_tensor_name>.lora_B`` (d_out x r) and string metadata
``alpha`` and ``rank``. The update is ``W + (alpha / rank) * B @ A``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .checkpoint import Checkpoint, TensorData, read_checkpoint, write_checkpoint
from .errors import FormatError, PairingError, ShapeError, UsageError
from .naming import (ATTENTION_ROLES, DEFAULT_SCHEME, FFN_ROLES, ROLE_ORDER, ModuleKey,
                     ModuleRole, NamingScheme)
from .tensor import Dtype, as_matrix, narrow

LORA_A_SUFFIX = ".lora_A"
LORA_B_SUFFIX = ".lora_B"


@dataclass(frozen=True)
class ModuleSelection:
    roles: frozenset
    layers: tuple[int, int] | None = None  # inclusive

    def __post_init__(self):
        if not self.roles:
            raise UsageError("module selection needs at least one role")
        object.__setattr__(self, "roles", frozenset(self.roles))
        if self.layers is not None:
            lo, hi = self.layers
            if lo < 0 or hi < lo:
                raise UsageError(f"bad layer range {lo}..{hi}")

    def __contains__(self, key: ModuleKey) -> bool:
        if key.role not in self.roles:
            return False
        if self.layers is None:
            return True
        return self.layers[0] <= key.layer <= self.layers[1]

    @property
    def ordered_roles(self) -> list[ModuleRole]:
        return [r for r in ROLE_ORDER if r in self.roles]

    def label(self) -> str:
        text = ",".join(r.short for r in self.ordered_roles)
        if self.layers is not None:
            text += f"@{self.layers[0]}..{self.layers[1]}"
        return text

    def union(self, other: "ModuleSelection") -> "ModuleSelection":
        if self.layers != other.layers:
            raise UsageError("can only union selections over the same layer range")
        return ModuleSelection(self.roles | other.roles, self.layers)

    @classmethod
    def of(cls, *roles: ModuleRole | str, layers: tuple[int, int] | None = None) -> "ModuleSelection":
        return cls(frozenset(r if isinstance(r, ModuleRole) else ModuleRole.parse(r) for r in roles), layers)


_GROUPS = {"att": ATTENTION_ROLES, "attn": ATTENTION_ROLES, "attention": ATTENTION_ROLES,
           "ffn": FFN_ROLES, "mlp": FFN_ROLES, "all": frozenset(ROLE_ORDER)}


def parse_layers(text: str | None) -> tuple[int, int] | None:
    if text is None or text == "":
        return None
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            return int(lo), int(hi)
        n = int(text)
        return n, n
    except ValueError:
        raise UsageError(f"bad layer range {text!r}; expected a..b") from None


def parse_selection(modules: str, layers: str | None = None) -> ModuleSelection:
    """``"q,k,v,o,gate"`` (or ``att``, ``ffn``, ``all``) plus optional ``"0..27"``."""
    roles = set()
    for part in modules.split(","):
        part = part.strip()
        if not part:
            continue
        if part.lower() in _GROUPS:
            roles |= _GROUPS[part.lower()]
        else:
            roles.add(ModuleRole.parse(part))
    lo_hi = parse_layers(layers)
    if lo_hi is not None and (lo_hi[0] < 0 or lo_hi[1] < lo_hi[0]):
        raise UsageError(f"bad layer range {layers!r}")
    return ModuleSelection(frozenset(roles), lo_hi)


@dataclass(frozen=True, eq=False)
class LoraPair:
    key: ModuleKey
    a: np.ndarray  # rank x d_in
    b: np.ndarray  # d_out x rank
    alpha: float
    target: str = ""

    def __post_init__(self):
        a, b = as_matrix(self.a), as_matrix(self.b)
        if a.shape[0] != b.shape[1] or a.shape[0] < 1:
            raise ShapeError(f"LoRA {self.key}: A is {a.shape}, B is {b.shape}; ranks disagree")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.b.shape[0], self.a.shape[1]

    def scale(self, by_rank: bool = True) -> float:
        return self.alpha / self.rank if by_rank else self.alpha

    def delta(self, by_rank: bool = True) -> np.ndarray:
        return self.scale(by_rank) * (self.b @ self.a)


def merge_lora(w, pair: LoraPair, by_rank: bool = True) -> np.ndarray:
    w = as_matrix(w)
    if w.shape != pair.shape:
        raise ShapeError(f"merge_lora {pair.key}: base weight {w.shape} vs adapter {pair.shape}")
    return w + pair.delta(by_rank)


def _keyed_names(ckpt: Checkpoint, scheme: NamingScheme) -> dict[ModuleKey, str]:
    out = {}
    for name in ckpt.names():
        key = scheme.classify(name)
        if key is not None:
            out[key] = name
    return out


def _copy_tensors(ckpt: Checkpoint) -> dict[str, TensorData]:
    return ckpt.tensors()


def selective_load(base: Checkpoint, adapters: Iterable[LoraPair], sel: ModuleSelection,
                   scheme: NamingScheme = DEFAULT_SCHEME, by_rank: bool = True) -> Checkpoint:
    """Merge the adapters for the selected modules; every other tensor keeps its exact bytes.

    An empty adapter list is the "no loading" baseline and returns an unchanged copy.
    Otherwise every selected module present in ``base`` needs an adapter.
    """
    adapters = list(adapters)
    tensors = _copy_tensors(base)
    if not adapters:
        return Checkpoint.from_tensors(tensors, base.metadata)

    names = _keyed_names(base, scheme)
    by_key: dict[ModuleKey, LoraPair] = {}
    for p in adapters:
        if p.key in by_key:
            raise PairingError(f"two adapters target {p.key}")
        if p.key not in names:
            raise PairingError(f"adapter for {p.key} does not resolve to a base tensor")
        by_key[p.key] = p

    selected = sorted(k for k in names if k in sel)
    if not selected:
        raise PairingError(f"selection {sel.label()} matches no tensor in {base.origin}")
    lacking = [str(k) for k in selected if k not in by_key]
    if lacking:
        raise PairingError(f"selection {sel.label()} has no adapter for: {', '.join(lacking)}")

    for key in selected:
        name = names[key]
        rec = base.record(name)
        merged = merge_lora(base.load_matrix(name), by_key[key], by_rank)
        tensors[name] = TensorData(rec.dtype, rec.shape, narrow(merged, rec.dtype))
    return Checkpoint.from_tensors(tensors, base.metadata)


def transplant(base: Checkpoint, donor: Checkpoint, sel: ModuleSelection,
               scheme: NamingScheme = DEFAULT_SCHEME) -> Checkpoint:
    """Copy the selected module tensors bitwise from ``donor`` into a copy of ``base``."""
    names = _keyed_names(base, scheme)
    donor_names = _keyed_names(donor, scheme)
    selected = sorted(k for k in names if k in sel)
    if not selected:
        raise PairingError(f"selection {sel.label()} matches no tensor in {base.origin}")
    tensors = _copy_tensors(base)
    for key in selected:
        name = names[key]
        if key not in donor_names:
            raise PairingError(f"donor {donor.origin} has no tensor for {key} ({name})")
        b_rec, d_rec = base.record(name), donor.record(donor_names[key])
        if b_rec.shape != d_rec.shape or b_rec.dtype != d_rec.dtype:
            raise ShapeError(
                f"{name}: base {list(b_rec.shape)} {b_rec.dtype.value} vs donor "
                f"{list(d_rec.shape)} {d_rec.dtype.value}"
            )
        tensors[name] = donor.tensor(donor_names[key])
    return Checkpoint.from_tensors(tensors, base.metadata)


# --- adapter files -----------------------------------------------------------

def adapter_tensors(pairs: Iterable[LoraPair], scheme: NamingScheme = DEFAULT_SCHEME,
                    dtype: Dtype = Dtype.F64) -> tuple[dict[str, TensorData], dict[str, str]]:
    pairs = list(pairs)
    if not pairs:
        raise UsageError("no adapters to write")
    alphas = {p.alpha for p in pairs}
    ranks = {p.rank for p in pairs}
    if len(alphas) != 1 or len(ranks) != 1:
        raise UsageError("adapter file stores one alpha and one rank; got mixed values")
    tensors = {}
    for p in pairs:
        target = p.target or scheme.tensor_name(p.key)
        tensors[target + LORA_A_SUFFIX] = TensorData.from_array(p.a, dtype)
        tensors[target + LORA_B_SUFFIX] = TensorData.from_array(p.b, dtype)
    meta = {"alpha": repr(float(alphas.pop())), "rank": str(ranks.pop())}
    return tensors, meta


def write_adapters(pairs: Iterable[LoraPair], path, scheme: NamingScheme = DEFAULT_SCHEME,
                   dtype: Dtype = Dtype.F64) -> None:
    tensors, meta = adapter_tensors(pairs, scheme, dtype)
    write_checkpoint(tensors, path, meta)


def adapters_from_checkpoint(ckpt: Checkpoint, scheme: NamingScheme = DEFAULT_SCHEME) -> list[LoraPair]:
    try:
        alpha = float(ckpt.metadata["alpha"])
        rank = int(ckpt.metadata["rank"])
    except (KeyError, ValueError):
        raise FormatError(f"{ckpt.origin}: adapter file needs 'alpha' and 'rank' metadata") from None
    targets = sorted({n[: -len(LORA_A_SUFFIX)] for n in ckpt.names() if n.endswith(LORA_A_SUFFIX)}
                     | {n[: -len(LORA_B_SUFFIX)] for n in ckpt.names() if n.endswith(LORA_B_SUFFIX)})
    stray = [n for n in ckpt.names() if not n.endswith((LORA_A_SUFFIX, LORA_B_SUFFIX))]
    if stray:
        raise FormatError(f"{ckpt.origin}: unexpected tensors in adapter file: {stray[:5]}")
    pairs = []
    for target in targets:
        key = scheme.classify(target)
        if key is None:
            raise FormatError(f"{ckpt.origin}: adapter target {target!r} is not a projection weight")
        a_name, b_name = target + LORA_A_SUFFIX, target + LORA_B_SUFFIX
        if a_name not in ckpt or b_name not in ckpt:
            raise FormatError(f"{ckpt.origin}: adapter for {target!r} lacks its A or B half")
        pair = LoraPair(key, ckpt.load_matrix(a_name), ckpt.load_matrix(b_name), alpha, target)
        if pair.rank != rank:
            raise FormatError(f"{ckpt.origin}: {target!r} has rank {pair.rank}, metadata says {rank}")
        pairs.append(pair)
    return pairs


def read_adapters(path: str | Path, scheme: NamingScheme = DEFAULT_SCHEME) -> list[LoraPair]:
    return adapters_from_checkpoint(read_checkpoint(path), scheme)
