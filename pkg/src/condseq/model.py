"""Conditioned recurrent sequence model.

A single LSTM language model whose initial step may be conditioned on a
visual feature vector, a source-language feature vector, or both.  The
conditioning contribution ``visual_proj @ v + source_proj @ s`` is added to
all four gate preactivations of the *first* recurrent step only; injecting it
at every timestep overfits, so later steps see text alone.

Checkpoint format (``MMC1``)
----------------------------
Binary: magic ``MMC1``, u32 version (currently 1), u32 header length, a JSON
header carrying the model configuration, the vocabulary (tokens in index
order), and the parameter index (name and shape per tensor), followed by the
raw little-endian float64 tensor payloads in index order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import BOS_INDEX, EOS_INDEX, Corpus, FeatureStore, Vocabulary
from .tensor import (
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    add,
    apply_mask,
    column,
    cross_entropy,
    matvec,
    mul,
    pointwise,
    softmax,
)

__all__ = [
    "GATES",
    "CheckpointError",
    "ConditioningSpec",
    "ConfigurationError",
    "ForwardResult",
    "ModelConfig",
    "ModelParams",
    "SequenceModel",
    "embed",
    "extract_final_hidden",
    "forward_sequence",
    "init_state",
    "load_checkpoint",
    "lstm_step",
    "output_distribution",
    "save_checkpoint",
]

GATES = ("input", "forget", "output", "candidate")

_CHECKPOINT_MAGIC = b"MMC1"
_CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    """Conditioning inputs disagree with the model's conditioning layout."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or incompatible."""


@dataclass(frozen=True)
class ConditioningSpec:
    """Which conditioning inputs the model accepts, and their widths."""

    use_visual: bool = False
    use_source: bool = False
    visual_dim: int = 0
    source_dim: int = 0

    def __post_init__(self) -> None:
        if self.use_visual and self.visual_dim <= 0:
            raise ConfigurationError("visual conditioning enabled but visual_dim is not positive")
        if self.use_source and self.source_dim <= 0:
            raise ConfigurationError("source conditioning enabled but source_dim is not positive")
        if not self.use_visual and self.visual_dim:
            raise ConfigurationError("visual_dim given but visual conditioning is disabled")
        if not self.use_source and self.source_dim:
            raise ConfigurationError("source_dim given but source conditioning is disabled")


@dataclass(frozen=True)
class ModelConfig:
    """Structural hyperparameters of a conditioned sequence model."""

    vocab_size: int
    hidden_size: int = 256
    embedding_size: int = 256
    conditioning: ConditioningSpec = field(default_factory=ConditioningSpec)

    def __post_init__(self) -> None:
        for name in ("vocab_size", "hidden_size", "embedding_size"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.vocab_size < 4:
            raise ConfigurationError(
                f"vocab_size {self.vocab_size} is below the 4 reserved indices"
            )


@dataclass
class ModelParams:
    """Every learned tensor of the model, addressable by a stable name.

    ``embedding`` stores one column per vocabulary index (shape ``(E, V)``),
    the gate matrices map embeddings/hidden states into gate preactivations,
    and ``h_init``/``c_init`` are the learned pre-step recurrent state.
    """

    embedding: Tensor  # (E, V)
    w_x: dict[str, Tensor]  # gate -> (H, E)
    w_h: dict[str, Tensor]  # gate -> (H, H)
    b: dict[str, Tensor]  # gate -> (H,)
    out_w: Tensor  # (V, H)
    out_b: Tensor  # (V,)
    h_init: Tensor  # (H,)
    c_init: Tensor  # (H,)
    visual_proj: Tensor | None = None  # (H, visual_dim)
    source_proj: Tensor | None = None  # (H, source_dim)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelParams":
        """All-zero parameters of the shapes implied by ``config``."""
        h, e, v = config.hidden_size, config.embedding_size, config.vocab_size
        cond = config.conditioning
        return cls(
            embedding=Tensor(np.zeros((e, v))),
            w_x={g: Tensor(np.zeros((h, e))) for g in GATES},
            w_h={g: Tensor(np.zeros((h, h))) for g in GATES},
            b={g: Tensor(np.zeros(h)) for g in GATES},
            out_w=Tensor(np.zeros((v, h))),
            out_b=Tensor(np.zeros(v)),
            h_init=Tensor(np.zeros(h)),
            c_init=Tensor(np.zeros(h)),
            visual_proj=Tensor(np.zeros((h, cond.visual_dim))) if cond.use_visual else None,
            source_proj=Tensor(np.zeros((h, cond.source_dim))) if cond.use_source else None,
        )

    def named(self) -> dict[str, Tensor]:
        """Name -> tensor mapping in a deterministic order."""
        out: dict[str, Tensor] = {"embedding": self.embedding}
        for gate in GATES:
            out[f"w_x_{gate}"] = self.w_x[gate]
            out[f"w_h_{gate}"] = self.w_h[gate]
            out[f"b_{gate}"] = self.b[gate]
        out["out_w"] = self.out_w
        out["out_b"] = self.out_b
        if self.visual_proj is not None:
            out["visual_proj"] = self.visual_proj
        if self.source_proj is not None:
            out["source_proj"] = self.source_proj
        out["h_init"] = self.h_init
        out["c_init"] = self.c_init
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            embedding=Tensor(self.embedding.data),
            w_x={g: Tensor(t.data) for g, t in self.w_x.items()},
            w_h={g: Tensor(t.data) for g, t in self.w_h.items()},
            b={g: Tensor(t.data) for g, t in self.b.items()},
            out_w=Tensor(self.out_w.data),
            out_b=Tensor(self.out_b.data),
            h_init=Tensor(self.h_init.data),
            c_init=Tensor(self.c_init.data),
            visual_proj=Tensor(self.visual_proj.data) if self.visual_proj is not None else None,
            source_proj=Tensor(self.source_proj.data) if self.source_proj is not None else None,
        )

    def zero_grads(self) -> None:
        for t in self.named().values():
            t.zero_grad()


def embed(params: ModelParams, index: int, tape: Tape | None = None) -> Tensor:
    """Embedding of vocabulary index ``index``: a column of the embedding matrix."""
    if not 0 <= index < params.embedding.shape[1]:
        raise IndexError(
            f"token index {index} out of range for vocabulary of {params.embedding.shape[1]}"
        )
    return column(params.embedding, index, tape)


def init_state(
    params: ModelParams,
    spec: ConditioningSpec,
    v: np.ndarray | None = None,
    s: np.ndarray | None = None,
    tape: Tape | None = None,
    dropout: "object | None" = None,
) -> tuple[Tensor, Tensor, Tensor | None]:
    """Pre-step recurrent state plus the first-step conditioning vector.

    Returns ``(h, c, cond)`` where ``cond = visual_proj @ v + source_proj @ s``
    (absent terms dropped) is to be injected into the first recurrent step's
    gate preactivations, or ``None`` for an unconditioned model.  Missing or
    extra conditioning inputs raise :class:`ConfigurationError`.
    """
    if spec.use_visual and v is None:
        raise ConfigurationError("model expects a visual feature vector but none was given")
    if not spec.use_visual and v is not None:
        raise ConfigurationError("visual features given to a model without visual conditioning")
    if spec.use_source and s is None:
        raise ConfigurationError("model expects a source feature vector but none was given")
    if not spec.use_source and s is not None:
        raise ConfigurationError("source features given to a model without source conditioning")

    cond: Tensor | None = None
    if spec.use_visual:
        assert params.visual_proj is not None
        if len(v) != spec.visual_dim:
            raise ConfigurationError(f"visual vector has dim {len(v)}, expected {spec.visual_dim}")
        vt = Tensor(np.asarray(v, dtype=np.float64))
        if dropout is not None and getattr(dropout, "visual", None) is not None:
            vt = apply_mask(vt, dropout.visual, tape)
        cond = matvec(params.visual_proj, vt, tape)
    if spec.use_source:
        assert params.source_proj is not None
        if len(s) != spec.source_dim:
            raise ConfigurationError(f"source vector has dim {len(s)}, expected {spec.source_dim}")
        st = Tensor(np.asarray(s, dtype=np.float64))
        if dropout is not None and getattr(dropout, "source", None) is not None:
            st = apply_mask(st, dropout.source, tape)
        proj = matvec(params.source_proj, st, tape)
        cond = proj if cond is None else add(cond, proj, tape)
    return params.h_init, params.c_init, cond


def lstm_step(
    params: ModelParams,
    state: tuple[Tensor, Tensor],
    e: Tensor,
    cond: Tensor | None = None,
    tape: Tape | None = None,
) -> tuple[Tensor, Tensor]:
    """One forget-gate LSTM step (no peepholes).

    ``cond``, when given, is added to all four gate preactivations; callers
    pass it on the first step only.
    """
    h, c = state
    pre: dict[str, Tensor] = {}
    for gate in GATES:
        z = add(matvec(params.w_x[gate], e, tape), matvec(params.w_h[gate], h, tape), tape)
        z = add(z, params.b[gate], tape)
        if cond is not None:
            z = add(z, cond, tape)
        pre[gate] = z
    i = pointwise("sigmoid", pre["input"], tape)
    f = pointwise("sigmoid", pre["forget"], tape)
    o = pointwise("sigmoid", pre["output"], tape)
    g = pointwise("tanh", pre["candidate"], tape)
    c_new = add(mul(f, c, tape), mul(i, g, tape), tape)
    h_new = mul(o, pointwise("tanh", c_new, tape), tape)
    if not (np.all(np.isfinite(h_new.data)) and np.all(np.isfinite(c_new.data))):
        for gate in GATES:
            if not np.all(np.isfinite(pre[gate].data)):
                raise NumericError(f"non-finite preactivation in {gate} gate")
        raise NumericError("non-finite recurrent state")
    return h_new, c_new


def output_distribution(params: ModelParams, h: Tensor, tape: Tape | None = None) -> Tensor:
    """Softmax over the vocabulary from hidden state ``h``."""
    return softmax(add(matvec(params.out_w, h, tape), params.out_b, tape), tape)


@dataclass
class ForwardResult:
    """Teacher-forced pass over one sequence."""

    distributions: list[Tensor]
    loss: Tensor  # scalar, shape (1,): summed cross-entropy over predictions
    final_hidden: Tensor


def forward_sequence(
    params: ModelParams,
    spec: ConditioningSpec,
    indices: Sequence[int],
    v: np.ndarray | None = None,
    s: np.ndarray | None = None,
    dropout: "object | None" = None,
    tape: Tape | None = None,
) -> ForwardResult:
    """Teacher-forced forward pass over a BOS...EOS index sequence.

    Step ``t`` consumes ``indices[t]`` and predicts ``indices[t+1]``; the loss
    sums the cross-entropies of every token after BOS, including EOS.  The
    final hidden state is the state after consuming the last input token (the
    state from which EOS is predicted) — EOS itself is never consumed.
    """
    if len(indices) < 2:
        raise ValueError(f"sequence must hold at least BOS and EOS, got length {len(indices)}")
    if indices[0] != BOS_INDEX or indices[-1] != EOS_INDEX:
        raise ValueError("sequence must be BOS-prefixed and EOS-suffixed")
    h, c, cond = init_state(params, spec, v, s, tape, dropout)
    masks = getattr(dropout, "embeddings", None) if dropout is not None else None
    distributions: list[Tensor] = []
    total: Tensor | None = None
    for t in range(len(indices) - 1):
        e = embed(params, indices[t], tape)
        if masks is not None:
            e = apply_mask(e, masks[t], tape)
        h, c = lstm_step(params, (h, c), e, cond if t == 0 else None, tape)
        dist = output_distribution(params, h, tape)
        ce = cross_entropy(dist, indices[t + 1], tape)
        total = ce if total is None else add(total, ce, tape)
        distributions.append(dist)
    assert total is not None
    return ForwardResult(distributions=distributions, loss=total, final_hidden=h)


@dataclass
class SequenceModel:
    """A trained or trainable model bundle: configuration, vocabulary, weights."""

    config: ModelConfig
    vocab: Vocabulary
    params: ModelParams

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self)

    @classmethod
    def load(cls, path: str | Path) -> "SequenceModel":
        return load_checkpoint(path)


def extract_final_hidden(
    model: SequenceModel,
    corpus: Corpus,
    features: FeatureStore | None = None,
) -> dict[str, np.ndarray]:
    """Final hidden state per corpus item, keyed by item id.

    For a visually conditioned model the item's feature vector is looked up in
    ``features``; a missing vector is an error.  Extraction runs without
    dropout or gradient recording, so repeated calls are bit-identical.
    """
    spec = model.config.conditioning
    if spec.use_source:
        raise ConfigurationError("extraction from source-conditioned models is not supported")
    if spec.use_visual and features is None:
        raise ConfigurationError("model is visually conditioned but no feature store was given")
    out: dict[str, np.ndarray] = {}
    for item_id, indices in corpus:
        v = features.get(item_id) if spec.use_visual else None
        result = forward_sequence(model.params, spec, indices, v=v)
        out[item_id] = result.final_hidden.data.copy()
    return out


def _config_to_dict(config: ModelConfig) -> dict:
    cond = config.conditioning
    return {
        "vocab_size": config.vocab_size,
        "hidden_size": config.hidden_size,
        "embedding_size": config.embedding_size,
        "conditioning": {
            "use_visual": cond.use_visual,
            "use_source": cond.use_source,
            "visual_dim": cond.visual_dim,
            "source_dim": cond.source_dim,
        },
    }


def _config_from_dict(payload: Mapping) -> ModelConfig:
    cond = payload["conditioning"]
    return ModelConfig(
        vocab_size=payload["vocab_size"],
        hidden_size=payload["hidden_size"],
        embedding_size=payload["embedding_size"],
        conditioning=ConditioningSpec(
            use_visual=cond["use_visual"],
            use_source=cond["use_source"],
            visual_dim=cond["visual_dim"],
            source_dim=cond["source_dim"],
        ),
    )


def save_checkpoint(path: str | Path, model: SequenceModel) -> None:
    """Write an ``MMC1`` checkpoint: config, vocabulary, and all parameters."""
    named = model.params.named()
    header = {
        "config": _config_to_dict(model.config),
        "vocabulary": model.vocab.to_lines(),
        "min_count": model.vocab.min_count,
        "tensors": [[name, list(t.shape)] for name, t in named.items()],
    }
    raw = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", _CHECKPOINT_VERSION, len(raw)))
        fh.write(raw)
        for _, t in named.items():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> SequenceModel:
    """Read an ``MMC1`` checkpoint, rejecting version or shape mismatches."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {_CHECKPOINT_MAGIC!r}")
        head = fh.read(8)
        if len(head) != 8:
            raise CheckpointError(f"{path}: truncated header")
        version, header_len = struct.unpack("<II", head)
        if version != _CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        raw = fh.read(header_len)
        if len(raw) != header_len:
            raise CheckpointError(f"{path}: truncated header payload")
        header = json.loads(raw.decode("utf-8"))
        config = _config_from_dict(header["config"])
        vocab = Vocabulary.from_lines(header["vocabulary"], min_count=header.get("min_count", 1))
        if len(vocab) != config.vocab_size:
            raise CheckpointError(
                f"{path}: vocabulary size {len(vocab)} does not match config {config.vocab_size}"
            )
        expected = {name: tuple(t.shape) for name, t in ModelParams.zeros(config).named().items()}
        stored = {name: tuple(shape) for name, shape in header["tensors"]}
        if stored != expected:
            raise CheckpointError(f"{path}: parameter shapes do not match the stored config")
        tensors: dict[str, Tensor] = {}
        for name, shape in header["tensors"]:
            count = int(np.prod(shape))
            payload = fh.read(8 * count)
            if len(payload) != 8 * count:
                raise CheckpointError(f"{path}: truncated tensor payload for {name!r}")
            tensors[name] = Tensor(np.frombuffer(payload, dtype="<f8").reshape(shape))
    params = ModelParams.zeros(config)
    rebuilt = params.named()
    for name, t in tensors.items():
        rebuilt[name].data[...] = t.data
    return SequenceModel(config=config, vocab=vocab, params=params)
