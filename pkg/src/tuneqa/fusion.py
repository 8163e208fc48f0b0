"""Context injection into a decoder-only transformer via query scaling.

In every injected layer the attention queries are scaled elementwise, per
token, by (1 + tanh(g) * ctx) where ctx is the music context embedding and
g a per-layer learnable scalar. The scaling happens after the query
projection and before the positional rotation, so the mechanism does not
depend on the positional scheme. With g = 0 the factor is exactly 1.0 and
the decoder is bit-identical to its context-free self, which is the state
every training run starts from.

The toy decoder here is a small but complete pre-norm transformer
(embedding, rotary positions, causal multi-head attention, gated MLP,
untied output head) written in float64 numpy. Its backward pass only
produces the gradients training actually needs: dL/dctx and dL/dg per
injected layer. The base weights stay frozen, so their gradients are
never formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Protocol

import numpy as np

from .adapter import MusicContextEmbedding
from .errors import ConfigError, InputError
from .nnops import layer_norm, layer_norm_backward, silu, silu_grad, softmax, softmax_backward


@dataclass(frozen=True)
class FusionConfig:
    """Which decoder layers receive the context.

    Injection occupies layers inject_from..total_layers (1-based), i.e. the
    top total_layers - inject_from + 1 layers.
    """

    total_layers: int
    inject_from: int
    gate_init: float = 0.0

    def __post_init__(self):
        if self.total_layers < 1:
            raise ConfigError(f"total_layers must be >= 1, got {self.total_layers}")
        if not 1 <= self.inject_from <= self.total_layers:
            raise ConfigError(
                f"inject_from must be in [1, {self.total_layers}], got {self.inject_from}")

    @property
    def num_injected(self) -> int:
        return self.total_layers - self.inject_from + 1

    def injected_layers(self) -> range:
        return range(self.inject_from, self.total_layers + 1)


# depth 20 with injection from layer 2: the published "top 19 layers" count
REFERENCE_FUSION = FusionConfig(total_layers=20, inject_from=2)


def inject_queries(queries: np.ndarray, ctx, gate: float) -> np.ndarray:
    """Scale (tokens, model_dim) queries by (1 + tanh(gate) * ctx) per token."""
    queries = np.asarray(queries, dtype=np.float64)
    vec = ctx.values if isinstance(ctx, MusicContextEmbedding) else np.asarray(ctx, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != vec.shape[0]:
        raise ConfigError(
            f"query width {queries.shape} does not match context length {vec.shape[0]}")
    return queries * (1.0 + math.tanh(gate) * vec)


@dataclass(frozen=True)
class ToyDecoderConfig:
    vocab_size: int
    model_dim: int
    num_heads: int
    fusion: FusionConfig
    mlp_dim: int | None = None
    rope_base: float = 10000.0
    head_init: str = "uniform"
    head_gain: float = 1.0

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ConfigError(f"vocab_size must be >= 1, got {self.vocab_size}")
        if self.model_dim < 1 or self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} must be a positive multiple of "
                f"num_heads {self.num_heads}")
        if self.head_dim % 2 != 0:
            raise ConfigError(
                f"head_dim {self.head_dim} must be even for rotary positions")
        if self.mlp_dim is not None and self.mlp_dim < 1:
            raise ConfigError(f"mlp_dim must be >= 1, got {self.mlp_dim}")
        if self.head_init not in ("uniform", "semi_orthogonal"):
            raise ConfigError(
                f"head_init must be 'uniform' or 'semi_orthogonal', "
                f"got {self.head_init!r}")
        if not self.head_gain > 0.0:
            raise ConfigError(f"head_gain must be positive, got {self.head_gain}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @property
    def hidden(self) -> int:
        return 2 * self.model_dim if self.mlp_dim is None else self.mlp_dim


def decoder_param_shapes(config: ToyDecoderConfig) -> dict[str, tuple[int, ...]]:
    d, f, v = config.model_dim, config.hidden, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"embed.weight": (v, d)}
    for i in range(1, config.fusion.total_layers + 1):
        pre = f"layer{i}."
        shapes[pre + "attn.norm.weight"] = (d,)
        shapes[pre + "attn.norm.bias"] = (d,)
        shapes[pre + "attn.wq.weight"] = (d, d)
        shapes[pre + "attn.wk.weight"] = (d, d)
        shapes[pre + "attn.wv.weight"] = (d, d)
        shapes[pre + "attn.wo.weight"] = (d, d)
        shapes[pre + "mlp.norm.weight"] = (d,)
        shapes[pre + "mlp.norm.bias"] = (d,)
        shapes[pre + "mlp.w1.weight"] = (f, d)
        shapes[pre + "mlp.w2.weight"] = (d, f)
        shapes[pre + "mlp.w3.weight"] = (f, d)
    shapes["final_norm.weight"] = (d,)
    shapes["final_norm.bias"] = (d,)
    shapes["head.weight"] = (v, d)
    return shapes


def init_decoder_params(config: ToyDecoderConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in decoder_param_shapes(config).items():
        if name.endswith("norm.weight"):
            arr = np.ones(shape)
        elif name.endswith("norm.bias"):
            arr = np.zeros(shape)
        elif name == "embed.weight":
            arr = rng.normal(0.0, 0.02, size=shape)
        elif name == "head.weight" and config.head_init == "semi_orthogonal":
            # Uniform rows cap the best reachable aligned logit near
            # sqrt(d)/sqrt(3), which puts a floor under the cross entropy a
            # frozen head can express. Projecting a Gaussian draw onto the
            # nearest semi-orthogonal matrix removes that cap; the gain sets
            # the logit scale.
            m = rng.standard_normal(shape)
            u, _, vt = np.linalg.svd(m, full_matrices=False)
            arr = (u @ vt) * config.head_gain
        else:
            bound = 1.0 / np.sqrt(shape[-1])
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = arr
    return params


def init_gates(config: ToyDecoderConfig) -> dict[str, np.ndarray]:
    """One learnable scalar per injected layer, at the configured init."""
    return {f"gate.layer{i}": np.full(1, config.fusion.gate_init)
            for i in config.fusion.injected_layers()}


@dataclass
class ToyDecoder:
    config: ToyDecoderConfig
    params: dict[str, np.ndarray]
    seed: int | None = None  # recorded so checkpoints can rebuild the base

    @classmethod
    def create(cls, config: ToyDecoderConfig, seed: int) -> "ToyDecoder":
        return cls(config=config, params=init_decoder_params(config, seed), seed=seed)


class DecoderHandle(Protocol):
    """Binding surface for a pretrained decoder.

    Any decoder exposing this pair can replace the toy one: a forward that
    accepts (tokens, ctx, gates) and honors the layer-tap contract, and a
    config carrying the fusion layout. No such binding ships here; wiring
    the query scaling into a production transformer means patching its
    attention blocks in its own framework.
    """

    config: ToyDecoderConfig

    def forward(self, tokens, ctx, gates): ...


def _as_ctx_vector(ctx, model_dim: int) -> np.ndarray:
    vec = ctx.values if isinstance(ctx, MusicContextEmbedding) else np.asarray(ctx, dtype=np.float64)
    if vec.shape != (model_dim,):
        raise ConfigError(
            f"context length {vec.shape} does not match decoder width {model_dim}")
    return vec


def _check_tokens(tokens, vocab_size: int) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise InputError("token sequence must be a non-empty 1-D id list")
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise InputError(
            f"token ids must lie in [0, {vocab_size}), got range "
            f"[{ids.min()}, {ids.max()}]")
    return ids


def _rope_tables(config: ToyDecoderConfig, n_tokens: int):
    half = config.head_dim // 2
    freqs = config.rope_base ** (-2.0 * np.arange(half) / config.head_dim)
    angles = np.outer(np.arange(n_tokens), freqs)
    return np.cos(angles), np.sin(angles)


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x: (tokens, heads, head_dim); rotate each (even, odd) pair
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x1 * cos[:, None, :] - x2 * sin[:, None, :]
    out[..., 1::2] = x1 * sin[:, None, :] + x2 * cos[:, None, :]
    return out


def decoder_forward_cached(decoder: ToyDecoder, tokens, ctx=None,
                           gates: Mapping[str, np.ndarray] | None = None):
    """Full forward pass; returns (logits (tokens, vocab), cache).

    The cache holds every intermediate decoder_backward needs, plus one
    activation tap per layer (the block output) for locality checks.
    """
    config = decoder.config
    p = decoder.params
    ids = _check_tokens(tokens, config.vocab_size)
    n = ids.size
    heads, hd = config.num_heads, config.head_dim
    inv_scale = 1.0 / math.sqrt(hd)

    ctx_vec = None if ctx is None else _as_ctx_vector(ctx, config.model_dim)
    if ctx_vec is not None and gates is None:
        raise ConfigError("context supplied without gates")

    x = p["embed.weight"][ids]
    cos, sin = _rope_tables(config, n)
    mask = np.triu(np.full((n, n), -np.inf), k=1)
    cache: dict = {"ids": ids, "cos": cos, "sin": sin, "ctx": ctx_vec,
                   "layers": [], "taps": []}

    for i in range(1, config.fusion.total_layers + 1):
        pre = f"layer{i}."
        n1, ln1 = layer_norm(x, p[pre + "attn.norm.weight"], p[pre + "attn.norm.bias"])
        q = n1 @ p[pre + "attn.wq.weight"].T
        k = n1 @ p[pre + "attn.wk.weight"].T
        v = n1 @ p[pre + "attn.wv.weight"].T

        injected = ctx_vec is not None and i >= config.fusion.inject_from
        if injected:
            gate = float(gates[f"gate.layer{i}"][0])
            scale = 1.0 + math.tanh(gate) * ctx_vec
            qi = q * scale
        else:
            gate = None
            scale = None
            qi = q

        qh = qi.reshape(n, heads, hd)
        kh = k.reshape(n, heads, hd)
        vh = v.reshape(n, heads, hd)
        qr = _rotate(qh, cos, sin)
        kr = _rotate(kh, cos, sin)
        scores = np.einsum("thd,shd->hts", qr, kr) * inv_scale + mask
        probs = softmax(scores)
        o = np.einsum("hts,shd->thd", probs, vh).reshape(n, config.model_dim)
        x_mid = x + o @ p[pre + "attn.wo.weight"].T

        n2, ln2 = layer_norm(x_mid, p[pre + "mlp.norm.weight"], p[pre + "mlp.norm.bias"])
        a = n2 @ p[pre + "mlp.w1.weight"].T
        b = n2 @ p[pre + "mlp.w3.weight"].T
        s = silu(a)
        h = s * b
        x_out = x_mid + h @ p[pre + "mlp.w2.weight"].T

        cache["layers"].append({
            "x_in": x, "n1": n1, "ln1": ln1, "q": q, "scale": scale,
            "gate": gate, "injected": injected, "qr": qr, "kr": kr, "vh": vh,
            "probs": probs, "x_mid": x_mid, "n2": n2, "ln2": ln2,
            "a": a, "b": b, "s": s, "h": h,
        })
        cache["taps"].append(x_out.copy())
        x = x_out

    nf, lnf = layer_norm(x, p["final_norm.weight"], p["final_norm.bias"])
    cache["lnf"] = lnf
    cache["nf"] = nf
    logits = nf @ p["head.weight"].T
    return logits, cache


def decoder_forward(decoder: ToyDecoder, tokens, ctx=None,
                    gates: Mapping[str, np.ndarray] | None = None,
                    return_taps: bool = False):
    """Next-token score array, one row per input position."""
    logits, cache = decoder_forward_cached(decoder, tokens, ctx, gates)
    if return_taps:
        return logits, cache["taps"]
    return logits


def decoder_backward(decoder: ToyDecoder, cache, dlogits: np.ndarray):
    """Backward pass for the trainable inputs only.

    Returns (dctx, dgates): the gradient of the scalar loss w.r.t. the
    context vector (None when the forward ran context-free) and w.r.t.
    each injected layer's gate. Base decoder weights are frozen by
    contract, so their gradients are never materialized.
    """
    config = decoder.config
    p = decoder.params
    heads, hd = config.num_heads, config.head_dim
    inv_scale = 1.0 / math.sqrt(hd)
    n = cache["ids"].size
    cos, sin = cache["cos"], cache["sin"]
    ctx_vec = cache["ctx"]

    dctx = None if ctx_vec is None else np.zeros_like(ctx_vec)
    dgates: dict[str, np.ndarray] = {}

    dnf = np.asarray(dlogits, dtype=np.float64) @ p["head.weight"]
    dx, _, _ = layer_norm_backward(dnf, cache["lnf"], p["final_norm.weight"])

    for i in range(config.fusion.total_layers, 0, -1):
        pre = f"layer{i}."
        blk = cache["layers"][i - 1]

        # MLP block: x_out = x_mid + w2 @ (silu(w1 n2) * (w3 n2))
        dh = dx @ p[pre + "mlp.w2.weight"]
        da = dh * blk["b"] * silu_grad(blk["a"])
        db = dh * blk["s"]
        dn2 = da @ p[pre + "mlp.w1.weight"] + db @ p[pre + "mlp.w3.weight"]
        dmid_ln, _, _ = layer_norm_backward(dn2, blk["ln2"], p[pre + "mlp.norm.weight"])
        dx_mid = dx + dmid_ln

        # attention block
        doh = (dx_mid @ p[pre + "attn.wo.weight"]).reshape(n, heads, hd)
        dprobs = np.einsum("thd,shd->hts", doh, blk["vh"])
        dvh = np.einsum("hts,thd->shd", blk["probs"], doh)
        dscores = softmax_backward(blk["probs"], dprobs)
        dqr = np.einsum("hts,shd->thd", dscores, blk["kr"]) * inv_scale
        dkr = np.einsum("hts,thd->shd", dscores, blk["qr"]) * inv_scale
        dqi = _rotate(dqr, cos, -sin).reshape(n, config.model_dim)
        dk = _rotate(dkr, cos, -sin).reshape(n, config.model_dim)
        dv = dvh.reshape(n, config.model_dim)

        if blk["injected"]:
            dq = dqi * blk["scale"]
            dscale = (dqi * blk["q"]).sum(axis=0)
            tg = math.tanh(blk["gate"])
            dctx += tg * dscale
            dgates[f"gate.layer{i}"] = np.array(
                [float(dscale @ ctx_vec) * (1.0 - tg * tg)])
        else:
            dq = dqi

        dn1 = (dq @ p[pre + "attn.wq.weight"]
               + dk @ p[pre + "attn.wk.weight"]
               + dv @ p[pre + "attn.wv.weight"])
        din_ln, _, _ = layer_norm_backward(dn1, blk["ln1"], p[pre + "attn.norm.weight"])
        dx = dx_mid + din_ln

    return dctx, dgates


@dataclass(frozen=True)
class DecodeParams:
    max_new_tokens: int
    mode: str = "greedy"
    temperature: float = 1.0
    seed: int = 0
    stop_token: int | None = None

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise InputError(
                f"max_new_tokens must be >= 1, got {self.max_new_tokens}")
        if self.mode not in ("greedy", "sampled"):
            raise ConfigError(f"unknown decode mode {self.mode!r}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")


def generate(decoder: ToyDecoder, prompt_tokens, ctx=None,
             gates: Mapping[str, np.ndarray] | None = None,
             decode: DecodeParams = DecodeParams(max_new_tokens=16)) -> list[int]:
    """Autoregressive decode; returns only the newly generated ids.

    Greedy mode is deterministic (argmax, lowest id on ties); sampled mode
    draws from the temperature-scaled distribution with a seeded generator.
    Stops after decode.max_new_tokens or at decode.stop_token.
    """
    seq = list(_check_tokens(prompt_tokens, decoder.config.vocab_size))
    rng = np.random.default_rng(decode.seed)
    out: list[int] = []
    for _ in range(decode.max_new_tokens):
        logits = decoder_forward(decoder, seq, ctx, gates)[-1]
        if decode.mode == "greedy":
            nxt = int(np.argmax(logits))
        else:
            probs = softmax(logits / decode.temperature)
            nxt = int(rng.choice(probs.size, p=probs))
        out.append(nxt)
        seq.append(nxt)
        if decode.stop_token is not None and nxt == decode.stop_token:
            break
    return out
