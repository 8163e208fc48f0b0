"""The music understanding adapter.

Pipeline: a 1-D convolution collapses the layer axis of a stacked embedding
(one weight per layer, kernel size 1, frames mean-pooled afterwards), a
projection lifts the result to the decoder width, and a chain of gated
residual sub-blocks refines it:

    x_i = x_{i-1} + l2(silu(l1(norm(x_{i-1}))) * l3(norm(x_{i-1})))

where * is the elementwise product and norm is layer normalization with
learnable gain/offset. l2 starts at zero, so the freshly initialized chain
is the identity on the projected vector.

Forward and backward are written out by hand in float64; tests check every
parameter gradient against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .encoder import LayerStackedEmbedding
from .errors import ConfigError, NumericError
from .nnops import layer_norm, layer_norm_backward, silu, silu_grad

REFERENCE_MODEL_DIM = 4096


@dataclass(frozen=True)
class AdapterConfig:
    """Dimensions of the adapter; hidden_dim defaults to model_dim."""

    num_layers: int
    in_dim: int
    model_dim: int
    num_subblocks: int = 3
    hidden_dim: int | None = None

    def __post_init__(self):
        for name in ("num_layers", "in_dim", "model_dim", "num_subblocks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden_dim is not None and self.hidden_dim < 1:
            raise ConfigError(f"hidden_dim must be >= 1, got {self.hidden_dim}")

    @property
    def hidden(self) -> int:
        return self.model_dim if self.hidden_dim is None else self.hidden_dim


REFERENCE_CONFIG = AdapterConfig(num_layers=25, in_dim=1024,
                                 model_dim=REFERENCE_MODEL_DIM, num_subblocks=3)


@dataclass
class MusicContextEmbedding:
    """The adapter's output: one finite vector of decoder width."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise NumericError("music context embedding contains non-finite values")
        self.values = v

    def __len__(self) -> int:
        return self.values.size


@dataclass
class SubBlockParams:
    """Parameters of one gated residual sub-block."""

    norm_weight: np.ndarray
    norm_bias: np.ndarray
    l1_weight: np.ndarray
    l1_bias: np.ndarray
    l2_weight: np.ndarray
    l2_bias: np.ndarray
    l3_weight: np.ndarray
    l3_bias: np.ndarray

    @classmethod
    def from_flat(cls, params: Mapping[str, np.ndarray], index: int) -> "SubBlockParams":
        p = f"block{index}."
        return cls(
            norm_weight=params[p + "norm.weight"], norm_bias=params[p + "norm.bias"],
            l1_weight=params[p + "l1.weight"], l1_bias=params[p + "l1.bias"],
            l2_weight=params[p + "l2.weight"], l2_bias=params[p + "l2.bias"],
            l3_weight=params[p + "l3.weight"], l3_bias=params[p + "l3.bias"],
        )


def param_shapes(config: AdapterConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes, in checkpoint order."""
    m, h = config.model_dim, config.hidden
    shapes: dict[str, tuple[int, ...]] = {
        "conv.weight": (config.num_layers,),
        "conv.bias": (1,),
        "proj.weight": (m, config.in_dim),
        "proj.bias": (m,),
    }
    for i in range(1, config.num_subblocks + 1):
        shapes[f"block{i}.norm.weight"] = (m,)
        shapes[f"block{i}.norm.bias"] = (m,)
        shapes[f"block{i}.l1.weight"] = (h, m)
        shapes[f"block{i}.l1.bias"] = (h,)
        shapes[f"block{i}.l2.weight"] = (m, h)
        shapes[f"block{i}.l2.bias"] = (m,)
        shapes[f"block{i}.l3.weight"] = (h, m)
        shapes[f"block{i}.l3.bias"] = (h,)
    return shapes


def init_params(config: AdapterConfig, seed: int) -> dict[str, np.ndarray]:
    """Seeded initialization.

    Norm gain 1 / offset 0; affine weights uniform in +-1/sqrt(fan_in) with
    zero biases; l2 entirely zero so the adapter starts as the identity on
    the projected embedding.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        leaf = name.split(".", 1)[1]
        if leaf == "norm.weight":
            arr = np.ones(shape)
        elif leaf.endswith("bias") or leaf.startswith("l2"):
            arr = np.zeros(shape)
        else:
            fan_in = shape[-1]
            bound = 1.0 / np.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = arr
    return params


def validate_params(params: Mapping[str, np.ndarray], config: AdapterConfig) -> None:
    expected = param_shapes(config)
    unknown = set(params) - set(expected)
    missing = set(expected) - set(params)
    if unknown or missing:
        raise ConfigError(
            f"adapter parameter names mismatch: unknown={sorted(unknown)}, "
            f"missing={sorted(missing)}"
        )
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ConfigError(
                f"parameter {name} has shape {params[name].shape}, expected {shape}"
            )


def _stacked_values(emb, config: AdapterConfig) -> np.ndarray:
    values = emb.values if isinstance(emb, LayerStackedEmbedding) else np.asarray(emb)
    if values.ndim != 3:
        raise ConfigError(f"expected (layers, frames, features), got shape {values.shape}")
    if values.shape[0] != config.num_layers:
        raise ConfigError(
            f"embedding has {values.shape[0]} layers, adapter expects {config.num_layers}"
        )
    if values.shape[2] != config.in_dim:
        raise ConfigError(
            f"embedding features {values.shape[2]} != adapter in_dim {config.in_dim}"
        )
    return values


def aggregate_layers(emb, conv_weight: np.ndarray, conv_bias: np.ndarray,
                     config: AdapterConfig) -> np.ndarray:
    """Collapse (layers, frames, features) to one feature vector.

    Per frame: a weighted sum over layers plus a scalar bias (a kernel-1
    conv with num_layers input channels and one output channel applied to
    every feature); then the frames are mean-pooled.
    """
    values = _stacked_values(emb, config)
    if conv_weight.shape != (config.num_layers,):
        raise ConfigError(
            f"conv weight shape {conv_weight.shape} != ({config.num_layers},)"
        )
    per_frame = np.einsum("l,ltd->td", conv_weight, values) + conv_bias[0]
    return per_frame.mean(axis=0)


def project(v: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map from in_dim to model_dim; its output is the chain input x0."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (weight.shape[1],):
        raise ConfigError(f"projection input length {v.shape} != {weight.shape[1]}")
    return weight @ v + bias


def subblock_forward(x_prev: np.ndarray, p: SubBlockParams) -> np.ndarray:
    """One gated residual sub-block (see the module docstring formula)."""
    if not np.all(np.isfinite(x_prev)):
        raise NumericError("sub-block input contains non-finite values")
    n, _ = layer_norm(x_prev, p.norm_weight, p.norm_bias)
    a = p.l1_weight @ n + p.l1_bias
    c = p.l3_weight @ n + p.l3_bias
    h = silu(a) * c
    return x_prev + (p.l2_weight @ h + p.l2_bias)


def adapter_forward(emb, params: Mapping[str, np.ndarray],
                    config: AdapterConfig) -> MusicContextEmbedding:
    """aggregate_layers -> project -> num_subblocks gated residual sub-blocks."""
    ctx, _ = adapter_forward_cached(emb, params, config)
    return ctx


def adapter_forward_cached(emb, params: Mapping[str, np.ndarray],
                           config: AdapterConfig):
    """Forward pass that also returns the intermediates needed for backward."""
    values = _stacked_values(emb, config)
    pooled = aggregate_layers(values, params["conv.weight"], params["conv.bias"], config)
    x = project(pooled, params["proj.weight"], params["proj.bias"])
    cache: dict = {"values": values, "pooled": pooled, "blocks": []}
    for i in range(1, config.num_subblocks + 1):
        p = SubBlockParams.from_flat(params, i)
        n, ln_cache = layer_norm(x, p.norm_weight, p.norm_bias)
        a = p.l1_weight @ n + p.l1_bias
        c = p.l3_weight @ n + p.l3_bias
        s = silu(a)
        h = s * c
        x_next = x + (p.l2_weight @ h + p.l2_bias)
        cache["blocks"].append(
            {"x": x, "n": n, "ln": ln_cache, "a": a, "c": c, "s": s, "h": h}
        )
        x = x_next
    return MusicContextEmbedding(values=x), cache


def adapter_backward(emb, params: Mapping[str, np.ndarray], config: AdapterConfig,
                     upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of every adapter parameter for a given output gradient.

    The returned dict has exactly the canonical parameter names; the frozen
    encoder gets no entry. The embedding itself is treated as a constant.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if not np.all(np.isfinite(upstream)):
        raise NumericError("upstream gradient contains non-finite values")
    _, cache = adapter_forward_cached(emb, params, config)
    return adapter_backward_from_cache(cache, params, config, upstream)


def adapter_backward_from_cache(cache, params: Mapping[str, np.ndarray],
                                config: AdapterConfig,
                                upstream: np.ndarray) -> dict[str, np.ndarray]:
    grads = {name: np.zeros_like(arr) for name, arr in params.items()}
    dx = np.asarray(upstream, dtype=np.float64).copy()

    for i in range(config.num_subblocks, 0, -1):
        blk = cache["blocks"][i - 1]
        p = SubBlockParams.from_flat(params, i)
        prefix = f"block{i}."
        du = dx  # gradient of the sub-block's residual branch output
        grads[prefix + "l2.weight"] += np.outer(du, blk["h"])
        grads[prefix + "l2.bias"] += du
        dh = p.l2_weight.T @ du
        ds = dh * blk["c"]
        dc = dh * blk["s"]
        da = ds * silu_grad(blk["a"])
        grads[prefix + "l1.weight"] += np.outer(da, blk["n"])
        grads[prefix + "l1.bias"] += da
        grads[prefix + "l3.weight"] += np.outer(dc, blk["n"])
        grads[prefix + "l3.bias"] += dc
        dn = p.l1_weight.T @ da + p.l3_weight.T @ dc
        dx_ln, dnw, dnb = layer_norm_backward(dn, blk["ln"], p.norm_weight)
        grads[prefix + "norm.weight"] += dnw
        grads[prefix + "norm.bias"] += dnb
        dx = dx + dx_ln  # residual: gradient flows both through and around

    # projection
    grads["proj.weight"] += np.outer(dx, cache["pooled"])
    grads["proj.bias"] += dx
    dpooled = params["proj.weight"].T @ dx

    # layer aggregation: out[d] = mean_t (sum_l w_l x[l,t,d]) + b
    values = cache["values"]
    n_frames = values.shape[1]
    grads["conv.weight"] += np.einsum("d,ltd->l", dpooled, values) / n_frames
    grads["conv.bias"] += np.array([dpooled.sum()])
    return grads
