"""A small decoder-only transformer in float64 numpy with a hand-written backward pass.

Architecture (one block, pre-norm)::

    h = x + o_proj(attn(rope(q_proj(rms(x))), rope(k_proj(rms(x))), v_proj(rms(x))))
    y = h + down_proj(silu(gate_proj(rms(h))) * up_proj(rms(h)))

Causal grouped-query attention with rotary positions (half-split rotation),
RMSNorm with learned gains, no biases, output head tied to the embedding.
Weights follow the ``(d_out, d_in)`` convention, so a linear layer is
``y = x @ W.T``. Parameters use Qwen/LLaMA tensor names so toy checkpoints
go through the diff, transplant and LoRA tooling unchanged.

Runtime LoRA adapters are applied as a separate low-rank path
``x @ W.T + s * (x @ A.T) @ B.T`` rather than by merging, which gives an
independent route to check merged checkpoints against.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Collection, Iterable, Mapping

import numpy as np

from .adapt import LORA_A_SUFFIX, LORA_B_SUFFIX, LoraPair
from .checkpoint import Checkpoint, TensorData
from .errors import FormatError, ShapeError, UsageError
from .naming import DEFAULT_SCHEME, ROLE_ORDER, ModuleKey, ModuleRole
from .tensor import Dtype, as_matrix

EMBED = "model.embed_tokens.weight"
FINAL_NORM = "model.norm.weight"
CONFIG_KEY = "gatescope.toy_config"


@dataclass(frozen=True)
class ToyConfig:
    d_model: int = 64
    n_heads: int = 4
    n_kv_heads: int = 2
    d_ff: int = 256
    n_layers: int = 4
    vocab: int = 256
    max_seq: int = 32
    seed: int = 0
    rope_theta: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        counts = (self.d_model, self.n_heads, self.n_kv_heads, self.d_ff, self.n_layers, self.vocab, self.max_seq)
        if any(int(c) != c or c < 1 for c in counts):
            raise UsageError(f"toy config counts must be integers >= 1: {self}")
        if self.d_model % self.n_heads:
            raise UsageError("d_model must be divisible by n_heads")
        if self.n_heads % self.n_kv_heads:
            raise UsageError("n_heads must be divisible by n_kv_heads")
        if self.head_dim % 2:
            raise UsageError("rotary embeddings need an even head dimension")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def kv_dim(self) -> int:
        return self.n_kv_heads * self.head_dim

    def role_shape(self, role: ModuleRole) -> tuple[int, int]:
        """``(d_out, d_in)`` of a projection."""
        d, f, kv = self.d_model, self.d_ff, self.kv_dim
        return {
            ModuleRole.Q: (d, d), ModuleRole.K: (kv, d), ModuleRole.V: (kv, d), ModuleRole.O: (d, d),
            ModuleRole.GATE: (f, d), ModuleRole.UP: (f, d), ModuleRole.DOWN: (d, f),
        }[role]


def weight_name(layer: int, role: ModuleRole) -> str:
    return DEFAULT_SCHEME.tensor_name(ModuleKey(layer, role))


def norm_names(layer: int) -> tuple[str, str]:
    return (f"model.layers.{layer}.input_layernorm.weight",
            f"model.layers.{layer}.post_attention_layernorm.weight")


def param_names(cfg: ToyConfig) -> list[str]:
    names = [EMBED]
    for layer in range(cfg.n_layers):
        attn_norm, ffn_norm = norm_names(layer)
        names.append(attn_norm)
        names.extend(weight_name(layer, r) for r in ROLE_ORDER if r.is_attention)
        names.append(ffn_norm)
        names.extend(weight_name(layer, r) for r in ROLE_ORDER if not r.is_attention)
    names.append(FINAL_NORM)
    return names


@dataclass
class ToyModel:
    cfg: ToyConfig
    params: dict[str, np.ndarray]

    def weight(self, layer: int, role: ModuleRole) -> np.ndarray:
        return self.params[weight_name(layer, role)]

    def copy(self) -> "ToyModel":
        return ToyModel(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def to_checkpoint(self, dtype: Dtype = Dtype.F64) -> Checkpoint:
        tensors = {name: TensorData.from_array(v, dtype) for name, v in self.params.items()}
        return Checkpoint.from_tensors(tensors, {CONFIG_KEY: json.dumps(asdict(self.cfg), sort_keys=True)})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, cfg: ToyConfig | None = None) -> "ToyModel":
        if cfg is None:
            try:
                cfg = ToyConfig(**json.loads(ckpt.metadata[CONFIG_KEY]))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise FormatError(f"{ckpt.origin}: no toy config in metadata ({exc})") from None
        params = {}
        for name in param_names(cfg):
            params[name] = ckpt.load_array(name)
        model = cls(cfg, params)
        _check_shapes(model)
        return model


def _expected_shapes(cfg: ToyConfig) -> dict[str, tuple[int, ...]]:
    shapes = {EMBED: (cfg.vocab, cfg.d_model), FINAL_NORM: (cfg.d_model,)}
    for layer in range(cfg.n_layers):
        for n in norm_names(layer):
            shapes[n] = (cfg.d_model,)
        for role in ROLE_ORDER:
            shapes[weight_name(layer, role)] = cfg.role_shape(role)
    return shapes


def _check_shapes(model: ToyModel) -> None:
    for name, shape in _expected_shapes(model.cfg).items():
        got = model.params[name].shape
        if got != shape:
            raise ShapeError(f"{name}: expected {shape}, got {got}")


def init_model(cfg: ToyConfig) -> ToyModel:
    """Seeded init: N(0, 1/fan_in) weights, unit norm gains."""
    rng = np.random.default_rng(cfg.seed)
    shapes = _expected_shapes(cfg)
    params = {}
    for name in param_names(cfg):
        shape = shapes[name]
        if len(shape) == 1:
            params[name] = np.ones(shape)
        else:
            params[name] = rng.standard_normal(shape) / math.sqrt(shape[1])
    return ToyModel(cfg, params)


# --- primitives ----------------------------------------------------------------

def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def silu(z: np.ndarray) -> np.ndarray:
    return z * sigmoid(z)


def silu_grad(z: np.ndarray) -> np.ndarray:
    s = sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def ffn_forward(x, gate, up, down) -> np.ndarray:
    """SwiGLU block on row vectors: ``(silu(x @ gate.T) * (x @ up.T)) @ down.T``."""
    x, gate, up, down = (as_matrix(m) for m in (x, gate, up, down))
    if gate.shape != up.shape or gate.shape[1] != x.shape[1] or down.shape[1] != gate.shape[0]:
        raise ShapeError(f"ffn: x {x.shape}, gate {gate.shape}, up {up.shape}, down {down.shape}")
    return (silu(x @ gate.T) * (x @ up.T)) @ down.T


def _rms(x, g, eps):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    n = x * r
    return n * g, (n, r)


def _rms_back(dy, g, cache):
    n, r = cache
    dg = np.sum(dy * n, axis=tuple(range(dy.ndim - 1)))
    dn = dy * g
    dx = r * (dn - n * np.mean(dn * n, axis=-1, keepdims=True))
    return dx, dg


def rope_tables(cfg: ToyConfig, length: int) -> tuple[np.ndarray, np.ndarray]:
    hd = cfg.head_dim
    inv_freq = cfg.rope_theta ** (-np.arange(0, hd, 2, dtype=np.float64) / hd)
    angles = np.outer(np.arange(length, dtype=np.float64), inv_freq)
    angles = np.concatenate([angles, angles], axis=-1)
    return np.cos(angles), np.sin(angles)


def _rotate_half(x):
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def _rotate_half_t(g):
    h = g.shape[-1] // 2
    return np.concatenate([g[..., h:], -g[..., :h]], axis=-1)


class _Linear:
    """``y = x @ W.T`` plus an optional runtime low-rank path."""

    def __init__(self, w, lora: LoraPair | None = None):
        self.w = w
        self.lora = lora

    def __call__(self, x):
        lead = x.shape[:-1]
        x2 = x.reshape(-1, x.shape[-1])
        y = x2 @ self.w.T
        xa = None
        if self.lora is not None:
            xa = x2 @ self.lora.a.T
            y = y + self.lora.scale() * (xa @ self.lora.b.T)
        self.cache = (x2, xa, lead)
        return y.reshape(*lead, -1)

    def backward(self, dy, need_w: bool, need_lora: bool):
        x2, xa, lead = self.cache
        dy2 = dy.reshape(-1, dy.shape[-1])
        dx = dy2 @ self.w
        dw = dy2.T @ x2 if need_w else None
        da = db = None
        if self.lora is not None:
            s = self.lora.scale()
            dyb = dy2 @ self.lora.b
            dx = dx + s * (dyb @ self.lora.a)
            if need_lora:
                db = s * (dy2.T @ xa)
                da = s * (dyb.T @ x2)
        return dx.reshape(*lead, -1), dw, da, db


def _adapter_map(adapters: Iterable[LoraPair] | None) -> dict[str, LoraPair]:
    out = {}
    for p in adapters or ():
        name = weight_name(p.key.layer, p.key.role)
        if name in out:
            raise UsageError(f"two adapters target {name}")
        out[name] = p
    return out


def _as_batch(tokens) -> tuple[np.ndarray, bool]:
    t = np.asarray(tokens)
    if t.ndim == 1:
        return t[None, :], True
    if t.ndim != 2:
        raise ShapeError(f"tokens must be 1-D or 2-D, got shape {t.shape}")
    return t, False


def _validate_tokens(cfg: ToyConfig, tokens: np.ndarray) -> None:
    if tokens.shape[1] < 1:
        raise ShapeError("empty token sequence")
    if tokens.shape[1] > cfg.max_seq:
        raise ShapeError(f"sequence length {tokens.shape[1]} exceeds max_seq {cfg.max_seq}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ShapeError("token ids must be integers")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ValueError(f"token id out of range [0, {cfg.vocab})")


class _Pass:
    """One forward pass with everything the backward pass needs."""

    def __init__(self, model: ToyModel, tokens: np.ndarray, adapters: Mapping[str, LoraPair]):
        cfg = model.cfg
        self.model, self.tokens, self.adapters = model, tokens, adapters
        p = model.params
        B, T = tokens.shape
        H, KV, hd = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
        group = H // KV
        cos, sin = rope_tables(cfg, T)
        self.cos, self.sin = cos, sin
        causal = np.triu(np.ones((T, T), dtype=bool), k=1)
        self.layers = []

        x = p[EMBED][tokens]
        for layer in range(cfg.n_layers):
            c = {}
            lin = {r: _Linear(p[weight_name(layer, r)], adapters.get(weight_name(layer, r))) for r in ROLE_ORDER}
            c["lin"] = lin
            attn_norm, ffn_norm = norm_names(layer)

            n1, c["rms1"] = _rms(x, p[attn_norm], cfg.norm_eps)
            q = lin[ModuleRole.Q](n1).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
            k = lin[ModuleRole.K](n1).reshape(B, T, KV, hd).transpose(0, 2, 1, 3)
            v = lin[ModuleRole.V](n1).reshape(B, T, KV, hd).transpose(0, 2, 1, 3)
            qr = q * cos + _rotate_half(q) * sin
            kr = k * cos + _rotate_half(k) * sin
            kx = np.repeat(kr, group, axis=1)
            vx = np.repeat(v, group, axis=1)
            scores = (qr @ kx.transpose(0, 1, 3, 2)) / math.sqrt(hd)
            scores = np.where(causal, -np.inf, scores)
            scores = scores - scores.max(axis=-1, keepdims=True)
            probs = np.exp(scores)
            probs /= probs.sum(axis=-1, keepdims=True)
            att = probs @ vx
            merged = att.transpose(0, 2, 1, 3).reshape(B, T, H * hd)
            h = x + lin[ModuleRole.O](merged)
            c.update(qr=qr, kx=kx, vx=vx, probs=probs)

            n2, c["rms2"] = _rms(h, p[ffn_norm], cfg.norm_eps)
            a = lin[ModuleRole.GATE](n2)
            u = lin[ModuleRole.UP](n2)
            s = silu(a)
            x = h + lin[ModuleRole.DOWN](s * u)
            c.update(a=a, u=u, s=s)
            self.layers.append(c)

        nf, self.rms_f = _rms(x, p[FINAL_NORM], cfg.norm_eps)
        self.nf = nf
        self.logits = nf @ p[EMBED].T

    def backward(self, dlogits: np.ndarray, trainable: Collection[str] | None) -> dict[str, np.ndarray]:
        model, cfg, p = self.model, self.model.cfg, self.model.params
        B, T = self.tokens.shape
        H, KV, hd = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
        group = H // KV

        def want(name):
            return trainable is None or name in trainable

        grads: dict[str, np.ndarray] = {}

        def put(name, g):
            if g is not None and want(name):
                grads[name] = grads.get(name, 0) + g

        put(EMBED, dlogits.reshape(-1, cfg.vocab).T @ self.nf.reshape(-1, cfg.d_model) if want(EMBED) else None)
        dnf = dlogits @ p[EMBED]
        dx, dg = _rms_back(dnf, p[FINAL_NORM], self.rms_f)
        put(FINAL_NORM, dg)

        for layer in reversed(range(cfg.n_layers)):
            c = self.layers[layer]
            lin = c["lin"]
            attn_norm, ffn_norm = norm_names(layer)

            def lin_back(role, dy):
                name = weight_name(layer, role)
                lora = lin[role].lora
                need_lora = lora is not None and (want(name + LORA_A_SUFFIX) or want(name + LORA_B_SUFFIX))
                dxl, dw, da, db = lin[role].backward(dy, want(name), need_lora)
                put(name, dw)
                put(name + LORA_A_SUFFIX, da)
                put(name + LORA_B_SUFFIX, db)
                return dxl

            # FFN
            dh = dx
            dmid = lin_back(ModuleRole.DOWN, dx)
            ds = dmid * c["u"]
            du = dmid * c["s"]
            da = ds * silu_grad(c["a"])
            dn2 = lin_back(ModuleRole.GATE, da) + lin_back(ModuleRole.UP, du)
            dhn, dg = _rms_back(dn2, p[ffn_norm], c["rms2"])
            put(ffn_norm, dg)
            dh = dh + dhn

            # attention
            dmerged = lin_back(ModuleRole.O, dh)
            datt = dmerged.reshape(B, T, H, hd).transpose(0, 2, 1, 3)
            probs, qr, kx, vx = c["probs"], c["qr"], c["kx"], c["vx"]
            dprobs = datt @ vx.transpose(0, 1, 3, 2)
            dvx = probs.transpose(0, 1, 3, 2) @ datt
            dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
            dscores /= math.sqrt(hd)
            dqr = dscores @ kx
            dkx = dscores.transpose(0, 1, 3, 2) @ qr
            dkr = dkx.reshape(B, KV, group, T, hd).sum(axis=2)
            dv = dvx.reshape(B, KV, group, T, hd).sum(axis=2)
            dq = dqr * self.cos + _rotate_half_t(dqr * self.sin)
            dk = dkr * self.cos + _rotate_half_t(dkr * self.sin)
            dq = dq.transpose(0, 2, 1, 3).reshape(B, T, H * hd)
            dk = dk.transpose(0, 2, 1, 3).reshape(B, T, KV * hd)
            dv = dv.transpose(0, 2, 1, 3).reshape(B, T, KV * hd)
            dn1 = lin_back(ModuleRole.Q, dq) + lin_back(ModuleRole.K, dk) + lin_back(ModuleRole.V, dv)
            dxn, dg = _rms_back(dn1, p[attn_norm], c["rms1"])
            put(attn_norm, dg)
            dx = dh + dxn

        if want(EMBED):
            demb = np.zeros_like(p[EMBED])
            np.add.at(demb, self.tokens.ravel(), dx.reshape(-1, cfg.d_model))
            put(EMBED, demb)
        return grads


def forward(model: ToyModel, tokens, adapters: Iterable[LoraPair] | None = None) -> np.ndarray:
    """Logits of shape ``(T, vocab)`` for 1-D tokens or ``(B, T, vocab)`` for a batch."""
    batch, squeeze = _as_batch(tokens)
    _validate_tokens(model.cfg, batch)
    logits = _Pass(model, batch, _adapter_map(adapters)).logits
    return logits[0] if squeeze else logits


@dataclass(frozen=True)
class Batch:
    tokens: np.ndarray
    targets: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.tokens.shape != self.targets.shape or self.tokens.shape != self.mask.shape:
            raise ShapeError("tokens, targets and mask must share a shape")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(self.tokens[idx], self.targets[idx], self.mask[idx])


def cross_entropy(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over masked positions and its gradient w.r.t. the logits."""
    count = int(mask.sum())
    if count == 0:
        raise ValueError("batch has no unmasked positions")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -float(np.sum(picked * mask)) / count
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, targets[..., None],
                      np.take_along_axis(dlogits, targets[..., None], axis=-1) - 1.0, axis=-1)
    dlogits *= (mask / count)[..., None]
    return loss, dlogits


def loss_and_grads(model: ToyModel, batch: Batch, trainable: Collection[str] | None = None,
                   adapters: Iterable[LoraPair] | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Loss plus gradients for every base and adapter tensor.

    ``trainable`` names the tensors to differentiate (``None`` = all); every
    other tensor gets an exactly-zero gradient. Adapter tensors are named
    ``<weight name>.lora_A`` / ``.lora_B``.
    """
    tokens, _ = _as_batch(batch.tokens)
    _validate_tokens(model.cfg, tokens)
    targets = np.asarray(batch.targets).reshape(tokens.shape)
    mask = np.asarray(batch.mask, dtype=np.float64).reshape(tokens.shape)
    amap = _adapter_map(adapters)
    fp = _Pass(model, tokens, amap)
    loss, dlogits = cross_entropy(fp.logits, targets, mask)
    grads = fp.backward(dlogits, None if trainable is None else set(trainable))
    full = {name: np.zeros_like(v) for name, v in model.params.items()}
    for name, p in amap.items():
        full[name + LORA_A_SUFFIX] = np.zeros_like(p.a)
        full[name + LORA_B_SUFFIX] = np.zeros_like(p.b)
    for name, g in grads.items():
        full[name] = np.asarray(g, dtype=np.float64)
    return loss, full


def predict(model: ToyModel, tokens, adapters: Iterable[LoraPair] | None = None) -> np.ndarray:
    """Greedy next-token prediction at the last position of each sequence."""
    logits = forward(model, np.atleast_2d(tokens), adapters)
    return logits[:, -1, :].argmax(axis=-1)
