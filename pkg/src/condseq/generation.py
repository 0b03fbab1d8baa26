"""Greedy decoding: start from BOS with the conditioned initial state, take
the argmax token each step (ties resolve to the lowest index), stop at EOS or
after a fixed number of generated content tokens.

The structural markers BOS and PAD are masked out of the argmax so generated
output never contains them, whatever the weights; UNK may be emitted.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import BOS_INDEX, BOS_TOKEN, EOS_INDEX, EOS_TOKEN, PAD_INDEX, FeatureStore
from .model import SequenceModel, embed, init_state, lstm_step, output_distribution

__all__ = [
    "GenerationConfig",
    "greedy_generate",
    "generate_corpus",
    "read_generations",
    "write_generations",
]


@dataclass(frozen=True)
class GenerationConfig:
    """Decoding controls: content-token cap and marker visibility."""

    max_steps: int = 30
    include_markers: bool = False

    def __post_init__(self) -> None:
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


def greedy_generate(
    model: SequenceModel,
    v: np.ndarray | None = None,
    s: np.ndarray | None = None,
    config: GenerationConfig | None = None,
) -> list[str]:
    """Greedily decode one sentence as a list of tokens.

    Emits at most ``max_steps`` content tokens; an EOS argmax terminates
    decoding without counting toward the cap.
    """
    cfg = config or GenerationConfig()
    spec = model.config.conditioning
    params = model.params
    h, c, cond = init_state(params, spec, v, s)
    token = BOS_INDEX
    out: list[int] = []
    emitted_eos = False
    step = 0
    while len(out) < cfg.max_steps:
        e = embed(params, token)
        h, c = lstm_step(params, (h, c), e, cond if step == 0 else None)
        dist = output_distribution(params, h).data.copy()
        dist[BOS_INDEX] = -1.0  # structural markers never emitted
        dist[PAD_INDEX] = -1.0
        nxt = int(np.argmax(dist))  # ties resolve to the lowest index
        if nxt == EOS_INDEX:
            emitted_eos = True
            break
        out.append(nxt)
        token = nxt
        step += 1
    tokens = [model.vocab.token(i) for i in out]
    if cfg.include_markers:
        tokens = [BOS_TOKEN] + tokens + ([EOS_TOKEN] if emitted_eos else [])
    return tokens


def generate_corpus(
    model: SequenceModel,
    ids: Sequence[str],
    features: FeatureStore | None = None,
    transfer: FeatureStore | None = None,
    config: GenerationConfig | None = None,
) -> dict[str, list[str]]:
    """Greedy generation for every item id, conditioning looked up per id."""
    spec = model.config.conditioning
    if spec.use_visual and features is None:
        raise ValueError("model is visually conditioned but no feature store was given")
    if spec.use_source and transfer is None:
        raise ValueError("model is source-conditioned but no transfer feature store was given")
    for label, store in (("feature", features), ("transfer", transfer)):
        if store is not None:
            missing = store.covers(ids)
            if missing:
                raise ValueError(f"{label} store is missing vectors for {missing[:5]}")
    out: dict[str, list[str]] = {}
    for item_id in ids:
        v = features.get(item_id) if spec.use_visual else None
        s = transfer.get(item_id) if spec.use_source else None
        out[item_id] = greedy_generate(model, v=v, s=s, config=config)
    return out


def write_generations(path: str | Path, generations: Mapping[str, Sequence[str]]) -> None:
    """Write ``<item_id>\\t<sentence>`` lines, id-sorted for stable bytes."""
    with open(path, "w", encoding="utf-8") as fh:
        for item_id in sorted(generations):
            fh.write(f"{item_id}\t{' '.join(generations[item_id])}\n")


def read_generations(path: str | Path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            item_id, _, sentence = line.partition("\t")
            out[item_id] = sentence.split()
    return out
