"""Training: Glorot initialization, ADAM with bias correction, inverted
dropout plans, L2 regularization, mini-batch gradient averaging, per-epoch
validation (perplexity + corpus BLEU of greedy generations), and early
stopping on the joint BLEU/perplexity plateau criterion.

The serialized train log (JSONL, one record per epoch) deliberately omits the
wall-time field so that reruns with the same seed produce bit-identical
files; wall time stays available on the in-memory records.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import generation, metrics
from .data import Corpus, FeatureStore
from .model import (
    ModelConfig,
    ModelParams,
    SequenceModel,
    forward_sequence,
)
from .tensor import NumericError, Tape, Tensor

__all__ = [
    "AdamState",
    "DropoutPlan",
    "EpochRecord",
    "TrainLog",
    "TrainerConfig",
    "adam_step",
    "build_model",
    "evaluate_perplexity",
    "glorot_init",
    "initialize_params",
    "make_dropout_plan",
    "should_stop",
    "train",
]


@dataclass(frozen=True)
class TrainerConfig:
    """Optimization hyperparameters.

    Defaults follow the reference regime: ADAM(0.9, 0.999, 1e-8) at lr 1e-3,
    mini-batches of 100 with gradient averaging, inverted dropout p=0.5 on
    conditioning vectors and word embeddings, L2 lambda 1e-8 added to the
    gradients, and patience-10 early stopping.
    """

    batch_size: int = 100
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    dropout: float = 0.5
    l2: float = 1e-8
    patience: int = 10
    max_epochs: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


def glorot_init(shape: tuple[int, int], rng: np.random.Generator) -> Tensor:
    """Uniform(-b, b) matrix with b = sqrt(6 / (fan_in + fan_out))."""
    if len(shape) != 2:
        raise ValueError(f"glorot_init needs a rank-2 shape, got {shape}")
    fan_out, fan_in = shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape))


def initialize_params(
    config: ModelConfig, rng: np.random.Generator, forget_bias: float = 1.0
) -> ModelParams:
    """Glorot matrices, zero biases (forget gate biased to ``forget_bias``),
    and zero learned initial states."""
    params = ModelParams.zeros(config)
    params.embedding = glorot_init(params.embedding.shape, rng)
    for gate in params.w_x:
        params.w_x[gate] = glorot_init(params.w_x[gate].shape, rng)
        params.w_h[gate] = glorot_init(params.w_h[gate].shape, rng)
    params.out_w = glorot_init(params.out_w.shape, rng)
    if params.visual_proj is not None:
        params.visual_proj = glorot_init(params.visual_proj.shape, rng)
    if params.source_proj is not None:
        params.source_proj = glorot_init(params.source_proj.shape, rng)
    params.b["forget"].data[...] = forget_bias
    return params


def build_model(config: ModelConfig, vocab, seed: int) -> SequenceModel:
    """Freshly initialized :class:`SequenceModel` with a seeded Glorot draw."""
    rng = np.random.default_rng(seed)
    return SequenceModel(config=config, vocab=vocab, params=initialize_params(config, rng))


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls(
            m={name: np.zeros_like(t.data) for name, t in params.items()},
            v={name: np.zeros_like(t.data) for name, t in params.items()},
        )


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    config: TrainerConfig,
) -> None:
    """One bias-corrected ADAM update, in place.

    The L2 term ``lambda * theta`` is added to each gradient before the
    moment updates.  Non-finite gradients raise, naming the parameter.
    """
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bias1 = 1.0 - b1**state.t
    bias2 = 1.0 - b2**state.t
    for name, tensor in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if config.l2:
            g = g + config.l2 * tensor.data
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        tensor.data -= config.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + config.epsilon)


@dataclass
class DropoutPlan:
    """Pre-drawn inverted-dropout masks for one example.

    Mask entries are 0 or 1/(1-p); at p=0 every mask is all ones.  A fresh
    plan is drawn per example per epoch.
    """

    visual: np.ndarray | None
    source: np.ndarray | None
    embeddings: list[np.ndarray]


def _mask(rng: np.random.Generator, p: float, size: int) -> np.ndarray:
    return (rng.random(size) >= p).astype(np.float64) / (1.0 - p)


def make_dropout_plan(
    rng: np.random.Generator,
    p: float,
    *,
    embedding_dim: int,
    n_steps: int,
    visual_dim: int = 0,
    source_dim: int = 0,
) -> DropoutPlan:
    """Draw masks for the conditioning vectors and each step's embedding."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must lie in [0, 1)")
    return DropoutPlan(
        visual=_mask(rng, p, visual_dim) if visual_dim else None,
        source=_mask(rng, p, source_dim) if source_dim else None,
        embeddings=[_mask(rng, p, embedding_dim) for _ in range(n_steps)],
    )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float  # mean per-token cross-entropy seen during the epoch
    val_perplexity: float
    val_bleu: float
    wall_time: float  # seconds; not serialized


@dataclass
class TrainLog:
    """Per-epoch trajectory plus the reason training stopped."""

    epochs: list[EpochRecord] = field(default_factory=list)
    stop_reason: str = ""

    def to_jsonl(self) -> str:
        lines = [
            json.dumps(
                {
                    "epoch": r.epoch,
                    "train_loss": r.train_loss,
                    "val_perplexity": r.val_perplexity,
                    "val_bleu": r.val_bleu,
                },
                sort_keys=True,
            )
            for r in self.epochs
        ]
        lines.append(json.dumps({"stop_reason": self.stop_reason}))
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainLog":
        log = cls()
        for line in text.splitlines():
            if not line:
                continue
            payload = json.loads(line)
            if "stop_reason" in payload:
                log.stop_reason = payload["stop_reason"]
            else:
                log.epochs.append(EpochRecord(wall_time=0.0, **payload))
        return log


def should_stop(
    bleu_history: Sequence[float],
    pplx_history: Sequence[float],
    patience: int,
    tol: float = 1e-4,
) -> bool:
    """Joint plateau test driving early stopping.

    Stop when BOTH hold: validation BLEU has not improved for ``patience``
    epochs (epochs since the first best), AND validation perplexity has
    stopped decreasing — the minimum over the last ``patience`` epochs is no
    better than the minimum over all earlier epochs by more than ``tol``.
    """
    if len(bleu_history) != len(pplx_history):
        raise ValueError("BLEU and perplexity histories must have equal length")
    if len(bleu_history) <= patience:
        return False
    best_epoch = int(np.argmax(bleu_history))  # first occurrence of the max
    bleu_stalled = (len(bleu_history) - 1 - best_epoch) >= patience
    window_min = min(pplx_history[-patience:])
    prior_min = min(pplx_history[:-patience])
    pplx_stalled = window_min >= prior_min - tol
    return bleu_stalled and pplx_stalled


def evaluate_perplexity(
    model: SequenceModel,
    corpus: Corpus,
    features: FeatureStore | None = None,
    transfer: FeatureStore | None = None,
) -> float:
    """exp(mean per-token cross-entropy) over a corpus, dropout disabled."""
    if len(corpus) == 0:
        raise ValueError("cannot evaluate perplexity on an empty corpus")
    spec = model.config.conditioning
    total = 0.0
    tokens = 0
    for item_id, indices in corpus:
        v = features.get(item_id) if spec.use_visual else None
        s = transfer.get(item_id) if spec.use_source else None
        result = forward_sequence(model.params, spec, indices, v=v, s=s)
        total += float(result.loss.data[0])
        tokens += len(indices) - 1
    return float(np.exp(total / tokens))


def _conditioning_stores(
    model: SequenceModel,
    corpora: Sequence[Corpus],
    features: FeatureStore | None,
    transfer: FeatureStore | None,
) -> None:
    """Fail fast if conditioning inputs are missing for any corpus item."""
    spec = model.config.conditioning
    if spec.use_visual and features is None:
        raise ValueError("model is visually conditioned but no feature store was given")
    if spec.use_source and transfer is None:
        raise ValueError("model is source-conditioned but no transfer feature store was given")
    for corpus in corpora:
        if spec.use_visual:
            missing = features.covers(corpus.ids())
            if missing:
                raise ValueError(f"feature store is missing vectors for {missing[:5]}")
        if spec.use_source:
            missing = transfer.covers(corpus.ids())
            if missing:
                raise ValueError(f"transfer store is missing vectors for {missing[:5]}")


def train(
    model: SequenceModel,
    train_corpus: Corpus,
    val_corpus: Corpus,
    features: FeatureStore | None = None,
    transfer: FeatureStore | None = None,
    config: TrainerConfig | None = None,
) -> tuple[SequenceModel, TrainLog]:
    """Train ``model`` in place and return the best-validation-BLEU checkpoint.

    The checkpoint is selected by highest validation BLEU, ties broken by
    lower validation perplexity, then by the later epoch.  The passed-in
    model is left at its final-epoch state; the returned model carries a
    copy of the best parameters.
    """
    cfg = config or TrainerConfig()
    if len(train_corpus) == 0 or len(val_corpus) == 0:
        raise ValueError("training and validation corpora must be nonempty")
    vocab_size = model.config.vocab_size
    for corpus in (train_corpus, val_corpus):
        for _, indices in corpus:
            if max(indices) >= vocab_size:
                raise ValueError("corpus index out of range: vocabulary mismatch")
    _conditioning_stores(model, (train_corpus, val_corpus), features, transfer)

    spec = model.config.conditioning
    named = model.params.named()
    state = AdamState.for_params(named)
    rng = np.random.default_rng(cfg.seed)
    gen_config = generation.GenerationConfig()
    val_refs = {item_id: model.vocab.decode(ids) for item_id, ids in val_corpus}

    log = TrainLog(stop_reason="max_epochs")
    bleu_hist: list[float] = []
    pplx_hist: list[float] = []
    best: tuple[float, float, int, ModelParams] | None = None

    items = train_corpus.items
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(items))
        total_ce = 0.0
        total_tokens = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            for idx in batch:
                item_id, indices = items[int(idx)]
                v = features.get(item_id) if spec.use_visual else None
                s = transfer.get(item_id) if spec.use_source else None
                plan = None
                if cfg.dropout > 0.0:
                    plan = make_dropout_plan(
                        rng,
                        cfg.dropout,
                        embedding_dim=model.config.embedding_size,
                        n_steps=len(indices) - 1,
                        visual_dim=spec.visual_dim if spec.use_visual else 0,
                        source_dim=spec.source_dim if spec.use_source else 0,
                    )
                tape = Tape()
                result = forward_sequence(model.params, spec, indices, v=v, s=s, dropout=plan, tape=tape)
                tape.backward(result.loss)
                total_ce += float(result.loss.data[0])
                total_tokens += len(indices) - 1
            # mini-batch = average of per-example gradients
            grads = {}
            for name, tensor in named.items():
                g = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
                grads[name] = g / len(batch)
                tensor.zero_grad()
            adam_step(named, grads, state, cfg)

        val_pplx = evaluate_perplexity(model, val_corpus, features, transfer)
        hyps = generation.generate_corpus(model, val_corpus.ids(), features, transfer, gen_config)
        val_bleu = metrics.bleu4(hyps, val_refs).bleu
        bleu_hist.append(val_bleu)
        pplx_hist.append(val_pplx)
        log.epochs.append(
            EpochRecord(
                epoch=epoch,
                train_loss=total_ce / total_tokens,
                val_perplexity=val_pplx,
                val_bleu=val_bleu,
                wall_time=time.perf_counter() - t0,
            )
        )
        if (
            best is None
            or val_bleu > best[0]
            or (val_bleu == best[0] and val_pplx <= best[1])
        ):
            best = (val_bleu, val_pplx, epoch, model.params.copy())
        if should_stop(bleu_hist, pplx_hist, cfg.patience):
            log.stop_reason = "early_stop"
            break

    assert best is not None
    best_model = SequenceModel(config=model.config, vocab=model.vocab, params=best[3])
    return best_model, log


def stage_config(config: TrainerConfig, base_seed: int, stage: int) -> TrainerConfig:
    """Derived trainer config for a pipeline stage: seed = base*10 + stage."""
    return replace(config, seed=base_seed * 10 + stage)
