"""Two-stage training harness.

Only the adapter and the per-layer gates train; the encoder and the
decoder base weights are frozen and never receive gradients. The loss is
next-token cross-entropy masked to answer tokens. Examples without music
run the same code path with a zero context vector, which provably zeroes
both the adapter gradients (nothing upstream of the context) and the gate
gradients (the gate gradient is an inner product with the context).

Determinism contract: the example order of epoch e is a pure function of
(seed, stage, e), so a run resumed from a checkpoint continues with the
exact batches, learning rates, and therefore losses of an uninterrupted
run.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapter import (
    AdapterConfig,
    adapter_backward_from_cache,
    adapter_forward_cached,
    init_params,
    param_shapes,
    validate_params,
)
from .audio import AudioClip
from .checkpoint import load_arrays, require_names, save_arrays
from .encoder import EncoderSpec, LayerStackedEmbedding, ToyEncoder, extract_features
from .errors import CheckpointError, ConfigError, InputError, NonFiniteLossError
from .fusion import (
    FusionConfig,
    ToyDecoder,
    ToyDecoderConfig,
    decoder_backward,
    decoder_forward_cached,
    init_decoder_params,
    init_gates,
)
from .nnops import log_softmax
from .tokenizer import ToyTokenizer

STAGES = ("pretrain", "finetune")
DEFAULT_EPOCHS = {"pretrain": 150, "finetune": 20}
SCHEDULES = ("warmup_cosine", "constant")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    stage: str
    learning_rate: float = 1e-4
    batch_size: int = 1
    accumulation_steps: int = 1
    epochs: int | None = None
    seed: int = 0
    weight_decay: float = 0.0
    schedule: str = "warmup_cosine"
    warmup_steps: int = 10
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.accumulation_steps < 1:
            raise ConfigError("batch_size and accumulation_steps must be >= 1")
        if self.resolved_epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.warmup_steps < 0 or self.checkpoint_every < 1:
            raise ConfigError("warmup_steps must be >= 0, checkpoint_every >= 1")

    @property
    def resolved_epochs(self) -> int:
        return DEFAULT_EPOCHS[self.stage] if self.epochs is None else self.epochs


@dataclass
class TrainExample:
    """One supervised QA example.

    music may be an AudioClip, a precomputed LayerStackedEmbedding, or None
    for text-only instruction data.
    """

    music: AudioClip | LayerStackedEmbedding | None
    question: str
    answer: str
    example_id: str = ""

    def __post_init__(self):
        if not self.answer.strip():
            raise InputError("answer is the supervision target and must be non-empty")
        if not self.question.strip():
            raise InputError("question must be non-empty")

    @property
    def ident(self) -> str:
        return self.example_id or self.question[:40]


@dataclass(frozen=True)
class FreezeSet:
    """Declarative split of parameter groups into frozen and trainable."""

    frozen: frozenset = frozenset({"encoder", "decoder_base"})
    trainable: frozenset = frozenset({"adapter", "gates"})

    def __post_init__(self):
        if self.frozen & self.trainable:
            raise ConfigError("a parameter group cannot be both frozen and trainable")
        if self.frozen | self.trainable != {"encoder", "decoder_base", "adapter", "gates"}:
            raise ConfigError("freeze set must cover all four parameter groups")


DEFAULT_FREEZE = FreezeSet()


@dataclass
class ModelBundle:
    """Frozen pieces of the stack plus the configs the trainable parts need."""

    encoder: ToyEncoder
    adapter_config: AdapterConfig
    decoder: ToyDecoder
    tokenizer: ToyTokenizer


@dataclass
class TrainState:
    adapter_params: dict[str, np.ndarray]
    gates: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    opt_t: int = 0
    step: int = 0
    stage: str = "pretrain"


def _trainable(state: TrainState) -> dict[str, np.ndarray]:
    flat = {f"adapter.{k}": v for k, v in state.adapter_params.items()}
    flat.update(state.gates)  # gate names already carry the gate. prefix
    return flat


def init_state(bundle: ModelBundle, config: TrainConfig) -> TrainState:
    adapter_params = init_params(bundle.adapter_config, seed=config.seed)
    gates = init_gates(bundle.decoder.config)
    zeros = {k: np.zeros_like(v) for k, v in
             {**{f"adapter.{n}": a for n, a in adapter_params.items()}, **gates}.items()}
    return TrainState(adapter_params=adapter_params, gates=gates,
                      opt_m=zeros, opt_v={k: v.copy() for k, v in zeros.items()},
                      stage=config.stage)


def lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    """Learning rate for optimizer update `step` (0-based)."""
    base = config.learning_rate
    if config.schedule == "constant":
        return base
    warmup = min(config.warmup_steps, total_steps)
    if step < warmup:
        return base * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


def example_loss_and_grads(bundle: ModelBundle, example: TrainExample,
                           state: TrainState):
    """Loss plus adapter/gate gradients for one example.

    Cross entropy is averaged over the answer positions only; the prompt
    conditions but is not supervised.
    """
    tok = bundle.tokenizer
    prompt = tok.encode(example.question, add_bos=True)
    answer = tok.encode(example.answer, add_eos=True)
    full = prompt + answer
    n_prompt = len(prompt)

    if example.music is None:
        ctx_vec = np.zeros(bundle.decoder.config.model_dim)
        adapter_cache = None
    else:
        music = example.music
        emb = music if isinstance(music, LayerStackedEmbedding) else \
            extract_features(music, bundle.encoder)
        ctx, adapter_cache = adapter_forward_cached(
            emb, state.adapter_params, bundle.adapter_config)
        ctx_vec = ctx.values

    logits, cache = decoder_forward_cached(
        bundle.decoder, full, ctx=ctx_vec, gates=state.gates)

    positions = np.arange(n_prompt - 1, len(full) - 1)
    targets = np.asarray(full[n_prompt:])
    logp = log_softmax(logits[positions])
    loss = -float(np.mean(logp[np.arange(targets.size), targets]))

    dlogits = np.zeros_like(logits)
    soft = np.exp(logp)
    soft[np.arange(targets.size), targets] -= 1.0
    dlogits[positions] = soft / targets.size

    dctx, dgates = decoder_backward(bundle.decoder, cache, dlogits)
    if adapter_cache is None:
        adapter_grads = {k: np.zeros_like(v) for k, v in state.adapter_params.items()}
    else:
        adapter_grads = adapter_backward_from_cache(
            adapter_cache, state.adapter_params, bundle.adapter_config, dctx)

    flat = {f"adapter.{k}": v for k, v in adapter_grads.items()}
    for name in state.gates:
        flat[name] = dgates.get(name, np.zeros(1))
    return loss, flat


def _batch_grads(bundle: ModelBundle, batch: Sequence[TrainExample],
                 state: TrainState):
    if not batch:
        raise InputError("batch must contain at least one example")
    total = None
    losses = []
    for example in batch:
        loss, grads = example_loss_and_grads(bundle, example, state)
        losses.append(loss)
        if total is None:
            total = grads
        else:
            for k in total:
                total[k] = total[k] + grads[k]
    mean_grads = {k: v / len(batch) for k, v in total.items()}
    return float(np.mean(losses)), mean_grads


def _adamw_update(state: TrainState, grads: dict[str, np.ndarray], lr: float,
                  weight_decay: float) -> None:
    b1, b2 = ADAM_BETAS
    state.opt_t += 1
    t = state.opt_t
    params = _trainable(state)
    for name, p in params.items():
        g = grads[name]
        m = state.opt_m[name] = b1 * state.opt_m[name] + (1 - b1) * g
        v = state.opt_v[name] = b2 * state.opt_v[name] + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p -= lr * (mhat / (np.sqrt(vhat) + ADAM_EPS) + weight_decay * p)


def train_step(bundle: ModelBundle, batch: Sequence[TrainExample],
               state: TrainState, config: TrainConfig,
               lr: float | None = None) -> float:
    """One optimizer update from one batch; returns the batch loss.

    Updates state in place. Only adapter parameters and gates move; the
    encoder and decoder base are never written.
    """
    loss, grads = _batch_grads(bundle, batch, state)
    if not math.isfinite(loss):
        raise NonFiniteLossError(
            f"loss became {loss} at step {state.step}",
            step=state.step, batch_ids=[ex.ident for ex in batch])
    _adamw_update(state, grads,
                  config.learning_rate if lr is None else lr,
                  config.weight_decay)
    state.step += 1
    return loss


def accumulate(bundle: ModelBundle, micro_batches: Sequence[Sequence[TrainExample]],
               state: TrainState, config: TrainConfig,
               lr: float | None = None) -> float:
    """One optimizer update from the mean of the micro-batch gradients."""
    if not micro_batches:
        raise InputError("need at least one micro-batch")
    mean_grads = None
    losses = []
    for batch in micro_batches:
        loss, grads = _batch_grads(bundle, batch, state)
        losses.append(loss)
        if mean_grads is None:
            mean_grads = grads
        else:
            for k in mean_grads:
                mean_grads[k] = mean_grads[k] + grads[k]
    mean_grads = {k: v / len(micro_batches) for k, v in mean_grads.items()}
    mean_loss = float(np.mean(losses))
    if not math.isfinite(mean_loss):
        raise NonFiniteLossError(
            f"loss became {mean_loss} at step {state.step}",
            step=state.step,
            batch_ids=[ex.ident for batch in micro_batches for ex in batch])
    _adamw_update(state, mean_grads,
                  config.learning_rate if lr is None else lr,
                  config.weight_decay)
    state.step += 1
    return mean_loss


def _epoch_order(config: TrainConfig, epoch: int, n_examples: int) -> np.ndarray:
    stage_code = STAGES.index(config.stage)
    rng = np.random.default_rng([config.seed, stage_code, epoch])
    return rng.permutation(n_examples)


def _epoch_groups(config: TrainConfig, epoch: int, n_examples: int):
    """Chunk the permuted epoch into accumulation groups of micro-batches."""
    order = _epoch_order(config, epoch, n_examples)
    micro = [order[i:i + config.batch_size]
             for i in range(0, n_examples, config.batch_size)]
    per_update = config.accumulation_steps
    return [micro[i:i + per_update] for i in range(0, len(micro), per_update)]


def updates_per_epoch(config: TrainConfig, n_examples: int) -> int:
    micro = -(-n_examples // config.batch_size)
    return -(-micro // config.accumulation_steps)


def run_stage(bundle: ModelBundle, dataset: Sequence[TrainExample],
              config: TrainConfig, state: TrainState | None = None,
              log_path: str | Path | None = None,
              checkpoint_dir: str | Path | None = None):
    """Run a full stage (or the remainder of one, when state is resumed).

    Returns (state, log_rows) with one (step, epoch, stage, loss, lr) row
    per optimizer update performed by this call.
    """
    if not dataset:
        raise InputError("dataset must be non-empty")
    if state is None:
        state = init_state(bundle, config)
    if state.stage != config.stage:
        raise ConfigError(
            f"state was trained on stage {state.stage!r}, config says {config.stage!r}")

    per_epoch = updates_per_epoch(config, len(dataset))
    total_steps = config.resolved_epochs * per_epoch
    if state.step > total_steps:
        raise ConfigError(
            f"state is at step {state.step}, beyond this stage's {total_steps}")

    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    start_epoch = state.step // per_epoch
    for epoch in range(start_epoch, config.resolved_epochs):
        groups = _epoch_groups(config, epoch, len(dataset))
        done_in_epoch = state.step - epoch * per_epoch
        for group in groups[done_in_epoch:]:
            micro_batches = [[dataset[i] for i in idx] for idx in group]
            lr = lr_at(config, state.step, total_steps)
            loss = accumulate(bundle, micro_batches, state, config, lr=lr)
            rows.append((state.step, epoch, config.stage, loss, lr))
            if ckpt_dir is not None and state.step % config.checkpoint_every == 0:
                save_train_state(ckpt_dir / f"step{state.step:06d}.npz", bundle, state)
        if ckpt_dir is not None:
            save_train_state(ckpt_dir / f"epoch{epoch:04d}.npz", bundle, state)

    if log_path is not None:
        write_loss_log(log_path, rows)
    return state, rows


def write_loss_log(path: str | Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "epoch", "stage", "loss", "lr"])
        for step, epoch, stage, loss, lr in rows:
            writer.writerow([step, epoch, stage, f"{loss:.12g}", f"{lr:.12g}"])


def read_loss_log(path: str | Path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["step", "epoch", "stage", "loss", "lr"]:
            raise InputError(f"unrecognized loss log header: {header}")
        return [(int(s), int(e), stage, float(loss), float(lr))
                for s, e, stage, loss, lr in reader]


# ---------------------------------------------------------------------------
# checkpointing: trainable state + enough metadata to rebuild the stack
# ---------------------------------------------------------------------------

def _expected_state_names(adapter_config: AdapterConfig,
                          decoder_config: ToyDecoderConfig) -> set[str]:
    names = {f"adapter.{k}" for k in param_shapes(adapter_config)}
    names |= {f"gate.layer{i}" for i in decoder_config.fusion.injected_layers()}
    names |= {f"opt.m.{n}" for n in names} | {f"opt.v.{n}" for n in names}
    return names


def save_train_state(path: str | Path, bundle: ModelBundle,
                     state: TrainState) -> None:
    arrays: dict[str, np.ndarray] = {}
    for k, v in state.adapter_params.items():
        arrays[f"adapter.{k}"] = v
    arrays.update(state.gates)
    for k, v in state.opt_m.items():
        arrays[f"opt.m.{k}"] = v
    for k, v in state.opt_v.items():
        arrays[f"opt.v.{k}"] = v
    enc = bundle.encoder
    meta = {
        "kind": "train_state",
        "stage": state.stage,
        "step": state.step,
        "opt_t": state.opt_t,
        "adapter_config": bundle.adapter_config,
        "decoder_config": bundle.decoder.config,
        "decoder_seed": bundle.decoder.seed,
        "encoder": {"num_layers": enc.spec.num_layers,
                    "feature_dim": enc.spec.feature_dim,
                    "frame_rate": enc.spec.frame_rate,
                    "seed": enc.seed,
                    "sample_rate": enc.sample_rate},
        "tokenizer_words": list(bundle.tokenizer.words),
    }
    save_arrays(path, arrays, meta=meta)


def load_train_state(path: str | Path):
    """Load (state, meta). The meta dict describes the stack that wrote it."""
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "train_state":
        raise CheckpointError(f"{path} is not a training checkpoint")
    ac = meta["adapter_config"]
    dc = meta["decoder_config"]
    adapter_config = AdapterConfig(**ac)
    fusion = FusionConfig(**dc.pop("fusion"))
    decoder_config = ToyDecoderConfig(fusion=fusion, **dc)
    require_names(arrays, _expected_state_names(adapter_config, decoder_config),
                  context=str(path))
    adapter_params = {k[len("adapter."):]: v for k, v in arrays.items()
                      if k.startswith("adapter.") and not k.startswith("adapter.opt")}
    gates = {k: v for k, v in arrays.items() if k.startswith("gate.")}
    opt_m = {k[len("opt.m."):]: v for k, v in arrays.items() if k.startswith("opt.m.")}
    opt_v = {k[len("opt.v."):]: v for k, v in arrays.items() if k.startswith("opt.v.")}
    validate_params(adapter_params, adapter_config)
    state = TrainState(adapter_params=adapter_params, gates=gates,
                       opt_m=opt_m, opt_v=opt_v,
                       opt_t=int(meta["opt_t"]), step=int(meta["step"]),
                       stage=meta["stage"])
    meta["adapter_config_obj"] = adapter_config
    meta["decoder_config_obj"] = decoder_config
    return state, meta


def rebuild_bundle(meta: dict, decoder_seed: int | None = None) -> ModelBundle:
    """Reconstruct the frozen stack a checkpoint was trained against."""
    enc_meta = meta["encoder"]
    spec = EncoderSpec(num_layers=int(enc_meta["num_layers"]),
                       feature_dim=int(enc_meta["feature_dim"]),
                       frame_rate=float(enc_meta["frame_rate"]))
    encoder = ToyEncoder(spec, seed=int(enc_meta["seed"]),
                         sample_rate=enc_meta.get("sample_rate"))
    decoder_config = meta["decoder_config_obj"]
    seed = decoder_seed if decoder_seed is not None else meta.get("decoder_seed")
    if seed is None:
        raise CheckpointError("checkpoint does not record the decoder seed")
    decoder = ToyDecoder(config=decoder_config,
                         params=init_decoder_params(decoder_config, int(seed)),
                         seed=int(seed))
    tokenizer = ToyTokenizer(words=tuple(meta["tokenizer_words"]))
    return ModelBundle(encoder=encoder,
                       adapter_config=meta["adapter_config_obj"],
                       decoder=decoder, tokenizer=tokenizer)


def build_toy_bundle(texts: Sequence[str], seed: int = 0,
                     encoder_spec: EncoderSpec | None = None,
                     adapter_model_dim: int = 16,
                     decoder_layers: int = 4, inject_from: int = 2,
                     num_heads: int = 2, mlp_dim: int | None = None,
                     head_init: str = "semi_orthogonal",
                     head_gain: float = 4.0) -> ModelBundle:
    """Desk-scale stack: toy encoder, adapter config, toy decoder, tokenizer.

    The decoder head defaults to the semi-orthogonal init because this bundle
    exists to be trained; a uniform head bounds how far the loss can drop.
    """
    spec = encoder_spec or EncoderSpec(num_layers=3, feature_dim=8)
    tokenizer = ToyTokenizer.from_texts(texts)
    adapter_config = AdapterConfig(num_layers=spec.num_layers, in_dim=spec.feature_dim,
                                   model_dim=adapter_model_dim)
    fusion = FusionConfig(total_layers=decoder_layers, inject_from=inject_from)
    decoder_config = ToyDecoderConfig(vocab_size=tokenizer.vocab_size,
                                      model_dim=adapter_model_dim,
                                      num_heads=num_heads, fusion=fusion,
                                      mlp_dim=mlp_dim, head_init=head_init,
                                      head_gain=head_gain)
    decoder = ToyDecoder.create(decoder_config, seed=seed + 1)
    encoder = ToyEncoder(spec, seed=seed)
    return ModelBundle(encoder=encoder, adapter_config=adapter_config,
                       decoder=decoder, tokenizer=tokenizer)
