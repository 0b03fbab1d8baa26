"""Scikit-learn style front end.

:class:`ConditionedLanguageModel` wraps the functional core in the familiar
``fit`` / ``transform`` / ``predict`` surface so it composes with the wider
ecosystem: ``fit`` trains on raw sentences (building the vocabulary
internally), ``transform`` maps sentences to their final hidden states — the
exact vectors the transfer pipeline conditions on — and ``predict`` decodes
sentences greedily from conditioning inputs.  Cross-lingual transfer is then
literally ``target.fit(sentences, source=source_model.transform(sentences))``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import generation, training
from .data import Corpus, FeatureStore, Vocabulary, build_vocabulary, tokenize
from .model import ConditioningSpec, ModelConfig, extract_final_hidden, forward_sequence
from .training import TrainerConfig

__all__ = ["ConditionedLanguageModel"]


def _as_token_lists(X) -> list[list[str]]:
    if isinstance(X, str):
        raise ValueError("X must be an iterable of sentences, not a single string")
    out = []
    for row in X:
        out.append(tokenize(row) if isinstance(row, str) else [str(t) for t in row])
    if not out:
        raise ValueError("X must hold at least one sentence")
    return out


def _check_matrix(name: str, value, n_rows: int, dim: int | None = None) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array, got shape {arr.shape}")
    if arr.shape[0] != n_rows:
        raise ValueError(f"{name} has {arr.shape[0]} rows for {n_rows} sentences")
    if dim is not None and arr.shape[1] != dim:
        raise ValueError(f"{name} has width {arr.shape[1]}, expected {dim}")
    return arr


class ConditionedLanguageModel(BaseEstimator, TransformerMixin):
    """Conditioned recurrent language model with an estimator interface.

    Parameters mirror the underlying model and trainer configuration; the
    conditioning flags declare which keyword inputs ``fit``/``transform``/
    ``predict`` require (``visual=``, ``source=`` — 2-D arrays aligned with
    ``X`` row for row).

    Examples
    --------
    >>> est = ConditionedLanguageModel(hidden_size=16, embedding_size=8,
    ...                                min_count=1, dropout=0.0, max_epochs=5)
    >>> est.fit(["a dog runs", "a cat sits"])      # doctest: +ELLIPSIS
    ConditionedLanguageModel(...)
    >>> est.transform(["a dog runs"]).shape
    (1, 16)
    """

    def __init__(
        self,
        hidden_size: int = 256,
        embedding_size: int = 256,
        use_visual: bool = False,
        use_source: bool = False,
        min_count: int = 3,
        batch_size: int = 100,
        learning_rate: float = 1e-3,
        dropout: float = 0.5,
        l2: float = 1e-8,
        patience: int = 10,
        max_epochs: int = 100,
        val_fraction: float = 0.1,
        max_steps: int = 30,
        seed: int = 0,
    ) -> None:
        self.hidden_size = hidden_size
        self.embedding_size = embedding_size
        self.use_visual = use_visual
        self.use_source = use_source
        self.min_count = min_count
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.dropout = dropout
        self.l2 = l2
        self.patience = patience
        self.max_epochs = max_epochs
        self.val_fraction = val_fraction
        self.max_steps = max_steps
        self.seed = seed

    # ------------------------------------------------------------------
    def _conditioning(self, n: int, visual, source, visual_dim=None, source_dim=None):
        if self.use_visual:
            if visual is None:
                raise ValueError("this model is visually conditioned; pass visual=")
            visual = _check_matrix("visual", visual, n, visual_dim)
        elif visual is not None:
            raise ValueError("visual= given but use_visual=False")
        if self.use_source:
            if source is None:
                raise ValueError("this model is source-conditioned; pass source=")
            source = _check_matrix("source", source, n, source_dim)
        elif source is not None:
            raise ValueError("source= given but use_source=False")
        return visual, source

    @staticmethod
    def _stores(ids: Sequence[str], visual, source):
        fs = None
        ts = None
        if visual is not None:
            fs = FeatureStore({i: visual[k] for k, i in enumerate(ids)}, dim=visual.shape[1])
        if source is not None:
            ts = FeatureStore({i: source[k] for k, i in enumerate(ids)}, dim=source.shape[1])
        return fs, ts

    def fit(self, X, y=None, *, visual=None, source=None):
        """Tokenize, build the vocabulary, and train.

        A ``val_fraction`` of the sentences (at least one) is held out for
        the early-stopping/model-selection loop.
        """
        token_lists = _as_token_lists(X)
        n = len(token_lists)
        visual, source = self._conditioning(n, visual, source)
        vocab = build_vocabulary(token_lists, min_count=self.min_count)
        ids = [f"{i:06d}" for i in range(n)]
        records = [(ids[i], token_lists[i]) for i in range(n)]

        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        n_val = max(1, int(round(self.val_fraction * n))) if n > 1 else 0
        order = np.random.default_rng(self.seed).permutation(n)
        val_idx = set(int(i) for i in order[:n_val])
        train_records = [records[i] for i in range(n) if i not in val_idx]
        val_records = [records[i] for i in val_idx] or train_records

        def corpus_of(recs, split):
            return Corpus(
                items=[(i, vocab.encode(toks)) for i, toks in recs], language="", split=split
            )

        config = ModelConfig(
            vocab_size=len(vocab),
            hidden_size=self.hidden_size,
            embedding_size=self.embedding_size,
            conditioning=ConditioningSpec(
                use_visual=self.use_visual,
                use_source=self.use_source,
                visual_dim=visual.shape[1] if visual is not None else 0,
                source_dim=source.shape[1] if source is not None else 0,
            ),
        )
        trainer = TrainerConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            dropout=self.dropout,
            l2=self.l2,
            patience=self.patience,
            max_epochs=self.max_epochs,
            seed=self.seed,
        )
        fs, ts = self._stores(ids, visual, source)
        model = training.build_model(config, vocab, seed=self.seed)
        best, log = training.train(
            model,
            corpus_of(train_records, "train"),
            corpus_of(val_records, "val"),
            features=fs,
            transfer=ts,
            config=trainer,
        )
        self.model_ = best
        self.vocab_: Vocabulary = vocab
        self.train_log_ = log
        self.n_visual_features_ = visual.shape[1] if visual is not None else 0
        self.n_source_features_ = source.shape[1] if source is not None else 0
        return self

    def transform(self, X, *, visual=None, source=None) -> np.ndarray:
        """Final hidden state per sentence: an ``(n, hidden_size)`` array."""
        check_is_fitted(self, "model_")
        if self.use_source:
            raise ValueError("transform is not supported for source-conditioned models")
        token_lists = _as_token_lists(X)
        n = len(token_lists)
        visual, _ = self._conditioning(n, visual, source, visual_dim=self.n_visual_features_)
        ids = [f"{i:06d}" for i in range(n)]
        corpus = Corpus(
            items=[(ids[i], self.vocab_.encode(token_lists[i])) for i in range(n)],
            split="transform",
        )
        fs, _ = self._stores(ids, visual, None)
        vectors = extract_final_hidden(self.model_, corpus, features=fs)
        return np.stack([vectors[i] for i in ids])

    def predict(self, X=None, *, visual=None, source=None, n_sentences=None) -> list[list[str]]:
        """Greedily decode sentences from conditioning inputs.

        ``X`` is an alias for ``visual`` so estimator-style ``predict(X)``
        works for visually conditioned models.  Unconditioned models decode
        ``n_sentences`` copies (default 1) of their single greedy sentence.
        """
        check_is_fitted(self, "model_")
        if X is not None and visual is None:
            visual = X
        rows = None
        for arr in (visual, source):
            if arr is not None:
                rows = len(np.asarray(arr))
                break
        if rows is None:
            rows = n_sentences or 1
        visual, source = self._conditioning(
            rows,
            visual,
            source,
            visual_dim=self.n_visual_features_ or None,
            source_dim=self.n_source_features_ or None,
        )
        cfg = generation.GenerationConfig(max_steps=self.max_steps)
        out = []
        for i in range(rows):
            out.append(
                generation.greedy_generate(
                    self.model_,
                    v=visual[i] if visual is not None else None,
                    s=source[i] if source is not None else None,
                    config=cfg,
                )
            )
        return out

    def perplexity(self, X, *, visual=None, source=None) -> float:
        """exp(mean per-token cross-entropy) of ``X`` under the fitted model."""
        check_is_fitted(self, "model_")
        token_lists = _as_token_lists(X)
        n = len(token_lists)
        visual, source = self._conditioning(
            n,
            visual,
            source,
            visual_dim=self.n_visual_features_ or None,
            source_dim=self.n_source_features_ or None,
        )
        spec = self.model_.config.conditioning
        total, tokens = 0.0, 0
        for i, toks in enumerate(token_lists):
            indices = self.vocab_.encode(toks)
            result = forward_sequence(
                self.model_.params,
                spec,
                indices,
                v=visual[i] if visual is not None else None,
                s=source[i] if source is not None else None,
            )
            total += float(result.loss.data[0])
            tokens += len(indices) - 1
        return float(np.exp(total / tokens))

    def score(self, X, y=None, *, visual=None, source=None) -> float:
        """Negative perplexity, so that larger is better."""
        return -self.perplexity(X, visual=visual, source=source)
