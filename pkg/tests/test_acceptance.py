"""Acceptance suite: one test per shipped guarantee.

Run with ``pytest -v tests/test_acceptance.py`` — the verbose output then
shows exactly one PASSED/FAILED line per criterion:

1. gradient suite        all four conditioning variants check to < 1e-4
2. memorization          8-sentence corpus trains below perplexity 1.1
3. BLEU oracle           corpus BLEU matches brute-force counting to 1e-6
4. zero conditioning     zeroed projections reproduce the plain model
5. disambiguation        image/source conditioning resolves an ambiguous word
6. benchmark configs     full-scale config matrix ships and validates
7. stopping rules        the three documented halting behaviors
8. CLI determinism       any command rerun is hash-identical

Criterion 6 additionally runs the full benchmark when the environment
variable ``CONDSEQ_IAPRTC12_DIR`` points at the real dataset (days of CPU
time); without it the test validates the shipped configs and documents the
gate.
"""

from __future__ import annotations

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from condseq.cli import main as cli_main
from condseq.data import (
    Corpus,
    PreparedDataset,
    build_vocabulary,
    load_features,
    tokenize,
)
from condseq.datasets import make_disambiguation_dataset, write_dataset
from condseq.metrics import bleu4, write_scores
from condseq.model import ConditioningSpec, ModelConfig, forward_sequence
from condseq.tensor import grad_check
from condseq.training import TrainerConfig, build_model, evaluate_perplexity, should_stop, train
from condseq.transfer import ExperimentConfig, Variant, run_experiment
from condseq.util import path_sha256

# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

BOS, EOS = 1, 2


def encoded_corpus(sentences: list[str], vocab, split: str = "train") -> Corpus:
    return Corpus(
        items=[(f"{k:04d}", vocab.encode(tokenize(s))) for k, s in enumerate(sentences)],
        split=split,
    )


def run_cli(tmp: Path, command: str, payload: dict, *extra: str) -> Path:
    """Run one CLI command into a fresh out-root; return the run directory."""
    tmp.mkdir(parents=True, exist_ok=True)
    config = tmp / "config.json"
    config.write_text(json.dumps(payload), encoding="utf-8")
    out = tmp / "out"
    rc = cli_main([command, "--config", str(config), "--out", str(out), *extra])
    assert rc == 0, f"{command} failed (config {config})"
    children = [p for p in out.iterdir() if p.is_dir() and p.name != "failed"]
    assert len(children) == 1
    return children[0]


# ---------------------------------------------------------------------------
# criterion 1 — gradient suite
# ---------------------------------------------------------------------------


def test_criterion_1_gradient_suite():
    """Every parameter of every conditioning variant gradient-checks < 1e-4."""
    started = time.perf_counter()
    vocab = build_vocabulary([["red", "dog", "runs"]], min_count=1)
    assert len(vocab) == 7
    indices = [BOS, 4, 5, 6, 4, 5, 2]
    rng = np.random.default_rng(17)
    v = rng.normal(size=3)
    s = rng.normal(size=2)

    worst_overall = 0.0
    for use_visual, use_source in ((False, False), (True, False), (False, True), (True, True)):
        config = ModelConfig(
            vocab_size=7,
            hidden_size=5,
            embedding_size=4,
            conditioning=ConditioningSpec(
                use_visual=use_visual,
                use_source=use_source,
                visual_dim=3 if use_visual else 0,
                source_dim=2 if use_source else 0,
            ),
        )
        model = build_model(config, vocab, seed=23)
        spec = config.conditioning

        def f(tape, _spec=spec, _params=model.params):
            return forward_sequence(
                _params,
                _spec,
                indices,
                v=v if _spec.use_visual else None,
                s=s if _spec.use_source else None,
                tape=tape,
            ).loss

        worst = grad_check(f, model.params.named())
        assert worst < 1e-4, f"variant visual={use_visual} source={use_source}: {worst:.3e}"
        worst_overall = max(worst_overall, worst)

    elapsed = time.perf_counter() - started
    assert elapsed < 10.0, f"gradient suite took {elapsed:.1f}s"
    print(f"criterion 1: PASS (max rel err {worst_overall:.3e}, {elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# criterion 2 — memorization (shared with criterion 7's first example)
# ---------------------------------------------------------------------------

MEMORIZATION_SENTENCES = [
    "a man rides a red bicycle along the quiet street near the old tower .",
    "two small dogs sleep under a green tree beside the calm river bank .",
] * 4


@pytest.fixture(scope="module")
def memorization_run():
    started = time.perf_counter()
    token_lists = [tokenize(s) for s in MEMORIZATION_SENTENCES]
    vocab = build_vocabulary(token_lists, min_count=1)
    corpus = encoded_corpus(MEMORIZATION_SENTENCES, vocab)
    config = ModelConfig(vocab_size=len(vocab), hidden_size=32, embedding_size=16)
    model = build_model(config, vocab, seed=11)
    trainer = TrainerConfig(
        batch_size=1,
        learning_rate=0.01,
        dropout=0.0,
        l2=0.0,
        patience=60,
        max_epochs=60,
        seed=11,
    )
    best, log = train(model, corpus, corpus, config=trainer)
    elapsed = time.perf_counter() - started
    return best, log, corpus, elapsed


def test_criterion_2_memorization_perplexity(memorization_run):
    """An 8-sentence corpus trains below perplexity 1.1 well within bounds."""
    best, log, corpus, elapsed = memorization_run
    assert len(log.epochs) <= 500
    reached = min(r.val_perplexity for r in log.epochs)
    assert reached < 1.1, f"best training perplexity {reached:.4f}"
    assert evaluate_perplexity(best, corpus) < 1.1
    assert elapsed < 60.0, f"memorization took {elapsed:.1f}s"
    print(f"criterion 2: PASS (perplexity {reached:.4f} in {len(log.epochs)} epochs, {elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# criterion 3 — corpus BLEU against a brute-force oracle
# ---------------------------------------------------------------------------


def oracle_bleu4(hyps: dict[str, list[str]], refs: dict[str, list[str]]) -> float:
    """Brute-force corpus BLEU-4: literal n-gram counting, no cleverness."""

    def ngrams(tokens, n):
        return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]

    precisions = []
    for n in range(1, 5):
        matched, total = 0, 0
        for i in hyps:
            hyp_grams = ngrams(hyps[i], n)
            ref_grams = ngrams(refs[i], n)
            total += len(hyp_grams)
            for gram in set(hyp_grams):
                matched += min(hyp_grams.count(gram), ref_grams.count(gram))
        precisions.append(matched / total if total else 1.0)
    if min(precisions) == 0.0:
        return 0.0
    hyp_len = sum(len(hyps[i]) for i in hyps)
    ref_len = sum(len(refs[i]) for i in hyps)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / 4.0)


def test_criterion_3_corpus_bleu_oracle():
    """bleu4 matches brute-force counting to 1e-6 on 100 random corpora."""
    rng = np.random.default_rng(31)
    vocab = [f"w{k}" for k in range(10)]

    def sentence():
        return [vocab[int(t)] for t in rng.integers(0, 10, size=int(rng.integers(1, 21)))]

    worst = 0.0
    for _ in range(100):
        ids = [f"s{k}" for k in range(int(rng.integers(1, 9)))]
        hyps = {i: sentence() for i in ids}
        refs = {i: sentence() for i in ids}
        got = bleu4(hyps, refs).bleu
        want = oracle_bleu4(hyps, refs)
        worst = max(worst, abs(got - want))
        assert abs(got - want) < 1e-6, f"{got!r} vs oracle {want!r}"

    hand = bleu4({"x": "a b c d e".split()}, {"x": "a b c d f".split()}).bleu
    assert abs(hand - 66.87) <= 0.01, f"hand example scored {hand}"
    print(f"criterion 3: PASS (max |diff| {worst:.2e}, hand example {hand:.4f})")


# ---------------------------------------------------------------------------
# criterion 4 — zero-weight conditioning equivalence
# ---------------------------------------------------------------------------


def zeroed_variant_matches_plain(projection: str, **spec_kwargs) -> float:
    """Max per-step distribution gap between a plain model and a conditioned
    model whose conditioning projection is all zeros."""
    vocab = build_vocabulary([["red", "dog", "runs"]], min_count=1)
    indices = [BOS, 4, 5, 6, 4, 2]
    rng = np.random.default_rng(41)

    plain_config = ModelConfig(vocab_size=7, hidden_size=5, embedding_size=4)
    plain = build_model(plain_config, vocab, seed=5)

    cond_config = ModelConfig(
        vocab_size=7,
        hidden_size=5,
        embedding_size=4,
        conditioning=ConditioningSpec(**spec_kwargs),
    )
    conditioned = build_model(cond_config, vocab, seed=6)
    named = conditioned.params.named()
    for name, tensor in plain.params.named().items():
        named[name].data[:] = tensor.data
    named[projection].data[:] = 0.0

    spec = cond_config.conditioning
    v = rng.normal(size=3) if spec.use_visual else None
    s = rng.normal(size=5) if spec.use_source else None
    plain_result = forward_sequence(plain.params, plain_config.conditioning, indices)
    cond_result = forward_sequence(conditioned.params, spec, indices, v=v, s=s)

    gap = 0.0
    for a, b in zip(plain_result.distributions, cond_result.distributions):
        gap = max(gap, float(np.max(np.abs(a.data - b.data))))
    gap = max(gap, abs(float(plain_result.loss.data[0]) - float(cond_result.loss.data[0])))
    return gap


def test_criterion_4_zero_conditioning_equivalence():
    """Zeroed visual/source projections reproduce the plain model to 1e-12."""
    visual_gap = zeroed_variant_matches_plain(
        "visual_proj", use_visual=True, visual_dim=3
    )
    assert visual_gap < 1e-12, f"visual gap {visual_gap:.2e}"
    source_gap = zeroed_variant_matches_plain(
        "source_proj", use_source=True, source_dim=5
    )
    assert source_gap < 1e-12, f"source gap {source_gap:.2e}"
    print(f"criterion 4: PASS (gaps {visual_gap:.2e} / {source_gap:.2e})")


# ---------------------------------------------------------------------------
# criterion 5 — synthetic grounded disambiguation
# ---------------------------------------------------------------------------


def test_criterion_5_grounded_disambiguation(tmp_path):
    """Image conditioning resolves an ambiguous source word: the image-
    conditioned describer beats the unconditioned one by >= 10 BLEU, and the
    image-conditioned-source chain beats the plain chain by >= 5 BLEU."""
    started = time.perf_counter()
    data_dir = tmp_path / "data"
    write_dataset(make_disambiguation_dataset(200, seed=7), data_dir)

    prepared = run_cli(
        tmp_path / "prepare",
        "prepare",
        {
            "captions": {
                "de": str(data_dir / "captions_src.tsv"),
                "en": str(data_dir / "captions_tgt.tsv"),
            },
            "splits": {"manifest": str(data_dir / "splits.tsv")},
            "min_count": 1,
            "features": str(data_dir / "features.mmf"),
            "feature_dim": 4,
        },
    )
    dataset = PreparedDataset.load(prepared)
    features = load_features(data_dir / "features.mmf")

    trainer = TrainerConfig(
        batch_size=16,
        learning_rate=0.01,
        dropout=0.0,
        l2=0.0,
        patience=60,
        max_epochs=60,
        seed=0,
    )
    results = {}
    for variant, source_language in (
        ("lm", ""),
        ("mlm", ""),
        ("lm_to_lm", "de"),
        ("mlm_to_lm", "de"),
    ):
        config = ExperimentConfig(
            variant=Variant(variant),
            source_language=source_language,
            target_language="en",
            model={"hidden_size": 20, "embedding_size": 12},
            source_model={"hidden_size": 20, "embedding_size": 12},
            trainer=trainer,
            seeds=(1, 2, 3),
            visual_dim=features.dim,
            max_steps=30,
        )
        report = run_experiment(config, dataset, features, tmp_path / "runs" / variant)
        assert not report.failed_seeds, report.failed_seeds
        results[variant] = report.bleu_mean

    visual_gap = results["mlm"] - results["lm"]
    chain_gap = results["mlm_to_lm"] - results["lm_to_lm"]
    elapsed = time.perf_counter() - started
    assert visual_gap >= 10.0, f"image conditioning gap {visual_gap:.2f} BLEU ({results})"
    assert chain_gap >= 5.0, f"conditioned-source chain gap {chain_gap:.2f} BLEU ({results})"
    assert elapsed < 600.0, f"disambiguation suite took {elapsed:.0f}s"
    print(
        "criterion 5: PASS ("
        + ", ".join(f"{k}={v:.2f}" for k, v in results.items())
        + f"; gaps {visual_gap:.2f}/{chain_gap:.2f}, {elapsed:.0f}s)"
    )


# ---------------------------------------------------------------------------
# criterion 6 — full-scale benchmark configs (data-gated)
# ---------------------------------------------------------------------------

CONFIG_ROOT = Path(__file__).resolve().parent.parent / "configs" / "iaprtc12"

# (config file, expected BLEU, expected perplexity); tolerance 1.5 BLEU
BENCHMARK_TARGETS = {
    "en-mlm.json": (14.2, 6.7),
    "en-lm_to_lm.json": (21.3, 6.0),
    "en-mlm_to_mlm.json": (18.0, 6.3),
    "en-lm_to_mlm.json": (17.3, 6.3),
    "en-mlm_to_lm.json": (23.1, 5.7),
    "de-mlm.json": (9.5, 10.35),
    "de-lm_to_lm.json": (17.8, 8.95),
    "de-mlm_to_mlm.json": (11.4, 9.69),
    "de-lm_to_mlm.json": (12.1, 10.2),
    "de-mlm_to_lm.json": (17.0, 8.84),
}


def test_criterion_6_benchmark_config_matrix(tmp_path):
    """The ten-variant full-scale config matrix ships, validates, and states
    its documented targets; with CONDSEQ_IAPRTC12_DIR set it actually runs."""
    prepare = json.loads((CONFIG_ROOT / "prepare.json").read_text())
    assert set(prepare["captions"]) == {"de", "en"}
    assert prepare["feature_dim"] == 4096

    for name, (bleu, pplx) in BENCHMARK_TARGETS.items():
        payload = json.loads((CONFIG_ROOT / name).read_text())
        variant = Variant(payload["variant"])  # must name a known variant
        TrainerConfig(**payload["trainer"])  # must construct
        assert payload["expected"]["bleu"] == bleu
        assert payload["expected"]["perplexity"] == pplx
        assert payload["expected"]["tolerance"] == 1.5
        assert payload["model"] == {"hidden_size": 256, "embedding_size": 256}
        assert payload["seeds"] == [1, 2, 3]
        if variant.has_source:
            assert payload["source_language"] in ("de", "en")
        if "mlm" in payload["variant"]:
            assert payload["features"].endswith("features.mmf")

    data_dir = os.environ.get("CONDSEQ_IAPRTC12_DIR")
    if not data_dir:
        print(
            "criterion 6: PASS (configs validate; full run is data-gated — "
            "set CONDSEQ_IAPRTC12_DIR to execute the matrix)"
        )
        return

    # Full benchmark: prepare the real dataset, run all ten experiments, and
    # compare each BLEU mean against its documented target.
    data = Path(data_dir)
    prepared = run_cli(
        tmp_path / "prepare",
        "prepare",
        {
            **prepare,
            "captions": {
                "de": str(data / "captions_de.tsv"),
                "en": str(data / "captions_en.tsv"),
            },
            "splits": {"manifest": str(data / "splits.tsv")},
            "features": str(data / "features.mmf"),
        },
    )
    failures = []
    for name, (bleu, _) in BENCHMARK_TARGETS.items():
        payload = json.loads((CONFIG_ROOT / name).read_text())
        payload["dataset"] = str(prepared)
        if "features" in payload:
            payload["features"] = str(data / "features.mmf")
        rundir = run_cli(tmp_path / name.replace(".json", ""), "experiment", payload)
        report = json.loads((rundir / "report.json").read_text())
        got = report["bleu"]["mean"]
        if abs(got - bleu) > payload["expected"]["tolerance"]:
            failures.append(f"{name}: {got:.2f} vs target {bleu:.2f}")
    assert not failures, "; ".join(failures)
    print("criterion 6: PASS (full benchmark within ±1.5 BLEU of targets)")


# ---------------------------------------------------------------------------
# criterion 7 — the three documented stopping behaviors
# ---------------------------------------------------------------------------


def test_criterion_7_stopping_rules(memorization_run):
    """(a) the toy corpus memorizes below 1.1 perplexity, (b) strictly rising
    BLEU never halts on patience, (c) flat BLEU and flat perplexity halt with
    stop_reason=early_stop."""
    # (a) memorization — same run as criterion 2's, restated here because it
    # is also the first documented stopping example.
    _, log, _, _ = memorization_run
    assert min(r.val_perplexity for r in log.epochs) < 1.1

    # (b) strictly rising BLEU: never halts, whatever perplexity does.
    rising = [10.0 + k for k in range(60)]
    falling = [100.0 - k for k in range(60)]
    flat = [5.0] * 60
    for n in range(1, 61):
        assert not should_stop(rising[:n], falling[:n], patience=10)
        assert not should_stop(rising[:n], flat[:n], patience=10)

    # (c) BLEU flat for the whole patience window and perplexity flat: halt.
    assert should_stop([10.0] * 11, [5.0] * 11, patience=10)
    assert not should_stop([10.0] * 10, [5.0] * 10, patience=10)  # window not full

    # ...and the same behavior end-to-end: a frozen model (lr ~ 0) plateaus
    # immediately and training reports early_stop before max_epochs.
    vocab = build_vocabulary([["red", "dog", "runs"]], min_count=1)
    corpus = encoded_corpus(["red dog runs", "dog runs red"], vocab)
    model = build_model(ModelConfig(vocab_size=7, hidden_size=4, embedding_size=3), vocab, seed=1)
    trainer = TrainerConfig(
        batch_size=2, learning_rate=1e-9, dropout=0.0, patience=2, max_epochs=30, seed=1
    )
    _, log = train(model, corpus, corpus, config=trainer)
    assert log.stop_reason == "early_stop"
    assert len(log.epochs) < 30
    print(f"criterion 7: PASS (early_stop after {len(log.epochs)} epochs on a plateau)")


# ---------------------------------------------------------------------------
# criterion 8 — CLI rerun determinism
# ---------------------------------------------------------------------------


def test_criterion_8_cli_rerun_determinism(tmp_path):
    """Every CLI command, rerun with identical config, is hash-identical."""
    data_dir = tmp_path / "data"
    write_dataset(make_disambiguation_dataset(12, seed=3), data_dir)

    def twice(command: str, payload: dict) -> str:
        a = run_cli(tmp_path / command / "a", command, payload)
        b = run_cli(tmp_path / command / "b", command, payload)
        assert a.name == b.name
        assert path_sha256(a) == path_sha256(b), f"{command} rerun differs"
        return str(a)

    prepared = twice(
        "prepare",
        {
            "captions": {
                "de": str(data_dir / "captions_src.tsv"),
                "en": str(data_dir / "captions_tgt.tsv"),
            },
            "splits": {"manifest": str(data_dir / "splits.tsv")},
            "min_count": 1,
            "features": str(data_dir / "features.mmf"),
            "feature_dim": 4,
        },
    )
    trained = twice(
        "train",
        {
            "dataset": prepared,
            "language": "en",
            "model": {"hidden_size": 6, "embedding_size": 4},
            "trainer": {"max_epochs": 2, "batch_size": 4, "dropout": 0.0},
            "seed": 5,
        },
    )
    checkpoint = str(Path(trained) / "checkpoint.mmc")
    twice(
        "extract",
        {"checkpoint": checkpoint, "dataset": prepared, "language": "en", "split": "val"},
    )
    twice(
        "generate",
        {"checkpoint": checkpoint, "dataset": prepared, "language": "en", "split": "val"},
    )
    twice(
        "evaluate",
        {
            "hypotheses": str(data_dir / "captions_tgt.tsv"),
            "references": str(data_dir / "captions_tgt.tsv"),
            "sentence_scores": True,
        },
    )
    scores = tmp_path / "scores.tsv"
    write_scores(scores, {f"item{k:04d}": float(k) for k in range(12)})
    twice(
        "analyze",
        {
            "mode": "compare",
            "baseline": str(scores),
            "system": str(scores),
            "bins": 5,
        },
    )
    twice(
        "experiment",
        {
            "dataset": prepared,
            "variant": "mlm",
            "target_language": "en",
            "features": str(data_dir / "features.mmf"),
            "model": {"hidden_size": 6, "embedding_size": 4},
            "trainer": {"max_epochs": 1, "batch_size": 4, "dropout": 0.0},
            "seeds": [1],
            "max_steps": 5,
        },
    )
    print("criterion 8: PASS (all seven commands rerun hash-identical)")
