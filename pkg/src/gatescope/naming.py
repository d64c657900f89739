"""Module taxonomy and tensor-name classification.

Scheme file syntax (one rule per line, ``#`` starts a comment)::

    <role> <regex>

``role`` is one of ``q k v o gate up down`` (or the ``*_proj`` spelling).
``regex`` must contain a named group ``(?P<layer>\\d+)`` and is matched
against the full tensor name. Rules are tried top to bottom; the first match
wins. Example::

    gate  model\\.layers\\.(?P<layer>\\d+)\\.mlp\\.gate_proj\\.weight
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from pathlib import Path

from .errors import FormatError, UsageError


class ModuleRole(enum.Enum):
    Q = "q_proj"
    K = "k_proj"
    V = "v_proj"
    O = "o_proj"
    GATE = "gate_proj"
    UP = "up_proj"
    DOWN = "down_proj"

    @property
    def short(self) -> str:
        return self.value[: -len("_proj")]

    @property
    def order(self) -> int:
        return ROLE_ORDER.index(self)

    @property
    def is_attention(self) -> bool:
        return self in ATTENTION_ROLES

    @classmethod
    def parse(cls, text: str) -> "ModuleRole":
        t = text.strip().lower()
        for role in cls:
            if t in (role.value, role.short, role.name.lower()):
                return role
        raise UsageError(f"unknown module role {text!r}; expected one of q,k,v,o,gate,up,down")


ROLE_ORDER: tuple[ModuleRole, ...] = tuple(ModuleRole)
ATTENTION_ROLES = frozenset({ModuleRole.Q, ModuleRole.K, ModuleRole.V, ModuleRole.O})
FFN_ROLES = frozenset({ModuleRole.GATE, ModuleRole.UP, ModuleRole.DOWN})


@dataclass(frozen=True)
class ModuleKey:
    layer: int
    role: ModuleRole

    def __lt__(self, other: "ModuleKey") -> bool:
        return (self.layer, self.role.order) < (other.layer, other.role.order)

    def __str__(self) -> str:
        return f"{self.layer}.{self.role.value}"


@dataclass(frozen=True)
class NamingRule:
    role: ModuleRole
    pattern: re.Pattern

    def match(self, name: str) -> ModuleKey | None:
        m = self.pattern.fullmatch(name)
        if m is None:
            return None
        return ModuleKey(int(m.group("layer")), self.role)


@dataclass(frozen=True)
class NamingScheme:
    name: str
    rules: tuple[NamingRule, ...]

    def classify(self, tensor_name: str) -> ModuleKey | None:
        for rule in self.rules:
            key = rule.match(tensor_name)
            if key is not None:
                return key
        return None

    def tensor_name(self, key: ModuleKey) -> str:
        """Inverse of classify for the built-in templates (HF-style names)."""
        template = _TEMPLATES.get(self.name)
        if template is None:
            raise UsageError(f"scheme {self.name!r} has no name template")
        return template[key.role].format(layer=key.layer)


def classify(name: str, scheme: "NamingScheme") -> ModuleKey | None:
    return scheme.classify(name)


def _compile_rule(role: ModuleRole, regex: str) -> NamingRule:
    try:
        pattern = re.compile(regex)
    except re.error as exc:
        raise FormatError(f"bad naming regex {regex!r}: {exc}") from None
    if "layer" not in pattern.groupindex:
        raise FormatError(f"naming regex {regex!r} lacks a (?P<layer>\\d+) group")
    return NamingRule(role, pattern)


def _hf_templates() -> dict[ModuleRole, str]:
    out = {}
    for role in ModuleRole:
        block = "self_attn" if role.is_attention else "mlp"
        out[role] = "model.layers.{layer}.%s.%s.weight" % (block, role.value)
    return out


def _hf_scheme(name: str) -> NamingScheme:
    rules = tuple(
        _compile_rule(role, re.escape(t).replace(r"\{layer\}", r"(?P<layer>\d+)"))
        for role, t in _hf_templates().items()
    )
    return NamingScheme(name, rules)


# Qwen2/2.5, LLaMA and Mistral all ship the same HF module names.
_TEMPLATES = {n: _hf_templates() for n in ("qwen", "llama", "mistral")}
PRESETS: dict[str, NamingScheme] = {n: _hf_scheme(n) for n in _TEMPLATES}
DEFAULT_SCHEME = PRESETS["qwen"]


def parse_scheme(text: str, name: str = "custom") -> NamingScheme:
    rules = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(None, 1)
        if len(parts) != 2:
            raise FormatError(f"scheme line {lineno}: expected '<role> <regex>'")
        try:
            role = ModuleRole.parse(parts[0])
        except UsageError as exc:
            raise FormatError(f"scheme line {lineno}: {exc}") from None
        rules.append(_compile_rule(role, parts[1].strip()))
    if not rules:
        raise FormatError("naming scheme has no rules")
    return NamingScheme(name, tuple(rules))


def load_scheme(spec: str) -> NamingScheme:
    """Resolve a preset name or a path to a scheme file."""
    if spec.lower() in PRESETS:
        return PRESETS[spec.lower()]
    path = Path(spec)
    if not path.is_file():
        raise UsageError(f"unknown naming scheme {spec!r} (not a preset or a file)")
    return parse_scheme(path.read_text(), name=path.stem)
