"""Cross-lingual transfer: train a source-language model, extract its final
hidden states over gold source sentences, and condition a target-language
model on those vectors.  Transfer is file-mediated — the source model is
frozen once its checkpoint is written, and the target side only ever reads
the extracted feature files — so source parameters structurally cannot drift
during target training.

Variants
--------
``lm`` / ``mlm``
    Single target-side model, unconditioned / image-conditioned.
``lm_to_lm`` / ``mlm_to_mlm`` / ``lm_to_mlm`` / ``mlm_to_lm``
    Source-kind -> target-kind transfer; the target is additionally
    source-conditioned, and the ``mlm`` sides are image-conditioned with
    separately parameterized visual projections.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import generation, metrics, training
from .data import Corpus, FeatureStore, PreparedDataset, load_features, write_features
from .model import (
    ConditioningSpec,
    ModelConfig,
    SequenceModel,
    extract_final_hidden,
    load_checkpoint,
)
from .training import TrainerConfig
from .util import canonical_json, file_sha256

__all__ = [
    "ExperimentConfig",
    "ExperimentReport",
    "SeedResult",
    "StageError",
    "TransferFeatures",
    "Variant",
    "compare_variants",
    "extract_stage",
    "render_report_table",
    "run_experiment",
]


class Variant(str, Enum):
    """Model family for one experiment run."""

    LM_ONLY = "lm"
    MLM_ONLY = "mlm"
    LM_TO_LM = "lm_to_lm"
    MLM_TO_MLM = "mlm_to_mlm"
    LM_TO_MLM = "lm_to_mlm"
    MLM_TO_LM = "mlm_to_lm"

    @property
    def has_source(self) -> bool:
        return "_to_" in self.value

    @property
    def source_is_mlm(self) -> bool:
        return self.has_source and self.value.split("_to_")[0] == "mlm"

    @property
    def target_is_mlm(self) -> bool:
        return self.value.split("_to_")[-1] == "mlm"

    def label(self, source_language: str, target_language: str) -> str:
        """Human-readable row label, e.g. ``de mlm -> en lm``."""
        tgt_kind = "mlm" if self.target_is_mlm else "lm"
        if not self.has_source:
            return f"{target_language} {tgt_kind}"
        src_kind = "mlm" if self.source_is_mlm else "lm"
        return f"{source_language} {src_kind} -> {target_language} {tgt_kind}"


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and seed."""

    def __init__(self, stage: str, seed: int, cause: BaseException) -> None:
        super().__init__(f"stage {stage!r} failed for seed {seed}: {cause}")
        self.stage = stage
        self.seed = seed
        self.cause = cause


@dataclass
class TransferFeatures:
    """Extracted source-side hidden states plus their provenance.

    ``source_checkpoint_hash`` is the sha256 of the checkpoint file the
    vectors came from; target training and target testing must see the same
    hash, which :func:`run_experiment` asserts.
    """

    vectors: dict[str, np.ndarray]
    dim: int
    source_checkpoint_hash: str = ""
    split: str = ""

    def store(self) -> FeatureStore:
        return FeatureStore(vectors=self.vectors, dim=self.dim)

    def save(self, path: str | Path) -> None:
        write_features(path, self.vectors, dim=self.dim)
        sidecar = Path(str(path) + ".provenance.json")
        sidecar.write_text(
            canonical_json(
                {"source_checkpoint_sha256": self.source_checkpoint_hash, "split": self.split}
            )
            + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "TransferFeatures":
        store = load_features(path)
        sidecar = Path(str(path) + ".provenance.json")
        if sidecar.exists():
            meta = json.loads(sidecar.read_text(encoding="utf-8"))
        else:
            meta = {}
        return cls(
            vectors=store.vectors,
            dim=store.dim,
            source_checkpoint_hash=meta.get("source_checkpoint_sha256", ""),
            split=meta.get("split", ""),
        )


def extract_stage(
    checkpoint_path: str | Path,
    corpus: Corpus,
    features: FeatureStore | None = None,
    out_path: str | Path | None = None,
) -> TransferFeatures:
    """Load a frozen source checkpoint and extract final hidden states.

    The resulting feature file reuses the ``MMF1`` container with
    dimensionality equal to the source hidden size.  Extraction is
    deterministic: rerunning writes a bit-identical file.
    """
    model = load_checkpoint(checkpoint_path)
    vectors = extract_final_hidden(model, corpus, features)
    tf = TransferFeatures(
        vectors=vectors,
        dim=model.config.hidden_size,
        source_checkpoint_hash=file_sha256(checkpoint_path),
        split=corpus.split,
    )
    if out_path is not None:
        tf.save(out_path)
    return tf


@dataclass
class ExperimentConfig:
    """Everything one experiment needs besides the prepared data itself."""

    variant: Variant
    source_language: str
    target_language: str
    model: dict = field(default_factory=dict)  # hidden_size / embedding_size
    source_model: dict = field(default_factory=dict)  # defaults to `model`
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    seeds: tuple[int, ...] = (1, 2, 3)
    visual_dim: int = 0  # required when either side is an mlm
    max_steps: int = 30

    def __post_init__(self) -> None:
        if isinstance(self.variant, str):
            self.variant = Variant(self.variant)
        self.seeds = tuple(self.seeds)
        if not self.seeds:
            raise ValueError("at least one seed is required")
        needs_visual = self.variant.target_is_mlm or self.variant.source_is_mlm
        if needs_visual and self.visual_dim <= 0:
            raise ValueError(f"variant {self.variant.value} needs visual_dim > 0")


@dataclass
class SeedResult:
    seed: int
    bleu: float
    perplexity: float
    source_val_perplexity: float | None = None


@dataclass
class ExperimentReport:
    """Aggregated outcome of one variant across seeds."""

    variant: str
    source_language: str
    target_language: str
    test_split_hash: str
    seeds: list[SeedResult] = field(default_factory=list)
    failed_seeds: dict[int, str] = field(default_factory=dict)
    bleu_mean: float = 0.0
    bleu_std: float = 0.0
    perplexity_mean: float = 0.0
    perplexity_std: float = 0.0

    def label(self) -> str:
        return Variant(self.variant).label(self.source_language, self.target_language)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "source_language": self.source_language,
            "target_language": self.target_language,
            "test_split_hash": self.test_split_hash,
            "seeds": [
                {
                    "seed": r.seed,
                    "bleu": r.bleu,
                    "perplexity": r.perplexity,
                    "source_val_perplexity": r.source_val_perplexity,
                }
                for r in self.seeds
            ],
            "failed_seeds": {str(k): v for k, v in self.failed_seeds.items()},
            "bleu": {"mean": self.bleu_mean, "std": self.bleu_std},
            "perplexity": {"mean": self.perplexity_mean, "std": self.perplexity_std},
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "ExperimentReport":
        report = cls(
            variant=payload["variant"],
            source_language=payload["source_language"],
            target_language=payload["target_language"],
            test_split_hash=payload["test_split_hash"],
            seeds=[
                SeedResult(
                    seed=r["seed"],
                    bleu=r["bleu"],
                    perplexity=r["perplexity"],
                    source_val_perplexity=r.get("source_val_perplexity"),
                )
                for r in payload["seeds"]
            ],
            failed_seeds={int(k): v for k, v in payload.get("failed_seeds", {}).items()},
        )
        report.bleu_mean = payload["bleu"]["mean"]
        report.bleu_std = payload["bleu"]["std"]
        report.perplexity_mean = payload["perplexity"]["mean"]
        report.perplexity_std = payload["perplexity"]["std"]
        return report


def _split_hash(corpus: Corpus) -> str:
    import hashlib

    digest = hashlib.sha256()
    for item_id, indices in corpus:
        digest.update(item_id.encode("utf-8"))
        digest.update(b":")
        digest.update(" ".join(str(i) for i in indices).encode("ascii"))
        digest.update(b"\n")
    return digest.hexdigest()


def _model_config(
    vocab_size: int,
    overrides: Mapping,
    use_visual: bool,
    use_source: bool,
    visual_dim: int,
    source_dim: int,
) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        hidden_size=int(overrides.get("hidden_size", 256)),
        embedding_size=int(overrides.get("embedding_size", 256)),
        conditioning=ConditioningSpec(
            use_visual=use_visual,
            use_source=use_source,
            visual_dim=visual_dim if use_visual else 0,
            source_dim=source_dim if use_source else 0,
        ),
    )


def _run_seed(
    config: ExperimentConfig,
    dataset: PreparedDataset,
    features: FeatureStore | None,
    seed: int,
    outdir: Path,
) -> SeedResult:
    variant = config.variant
    seed_dir = outdir / f"seed-{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    tgt = config.target_language
    tgt_vocab = dataset.vocabs[tgt]
    source_val_pplx: float | None = None
    transfer_stores: dict[str, FeatureStore] = {}
    source_hashes: set[str] = set()

    if variant.has_source:
        src = config.source_language
        src_vocab = dataset.vocabs[src]
        stage = "train_source"
        try:
            src_config = _model_config(
                vocab_size=len(src_vocab),
                overrides=config.source_model or config.model,
                use_visual=variant.source_is_mlm,
                use_source=False,
                visual_dim=config.visual_dim,
                source_dim=0,
            )
            src_trainer = training.stage_config(config.trainer, seed, 0)
            src_model = training.build_model(src_config, src_vocab, seed=src_trainer.seed)
            src_feats = features if variant.source_is_mlm else None
            best_src, src_log = training.train(
                src_model,
                dataset.corpus(src, "train"),
                dataset.corpus(src, "val"),
                features=src_feats,
                config=src_trainer,
            )
            src_ckpt = seed_dir / "source.mmc"
            best_src.save(src_ckpt)
            src_log.save(seed_dir / "source_train_log.jsonl")
            source_val_pplx = training.evaluate_perplexity(
                best_src, dataset.corpus(src, "val"), features=src_feats
            )
        except Exception as exc:  # noqa: BLE001 - stage-tagged re-raise
            raise StageError(stage, seed, exc) from exc

        stage = "extract"
        try:
            for split in ("train", "val", "test"):
                tf = extract_stage(
                    src_ckpt,
                    dataset.corpus(src, split),
                    features=src_feats,
                    out_path=seed_dir / f"source_features.{split}.mmf",
                )
                transfer_stores[split] = tf.store()
                source_hashes.add(tf.source_checkpoint_hash)
            # every split must have been extracted from the same frozen checkpoint
            if len(source_hashes) != 1:
                raise RuntimeError(f"source checkpoint hash mismatch across splits: {source_hashes}")
        except StageError:
            raise
        except Exception as exc:  # noqa: BLE001
            raise StageError(stage, seed, exc) from exc

    stage = "train_target"
    try:
        source_dim = 0
        if variant.has_source:
            src_overrides = config.source_model or config.model
            source_dim = int(src_overrides.get("hidden_size", 256))
        tgt_config = _model_config(
            vocab_size=len(tgt_vocab),
            overrides=config.model,
            use_visual=variant.target_is_mlm,
            use_source=variant.has_source,
            visual_dim=config.visual_dim,
            source_dim=source_dim,
        )
        tgt_trainer = training.stage_config(config.trainer, seed, 1)
        tgt_model = training.build_model(tgt_config, tgt_vocab, seed=tgt_trainer.seed)
        tgt_feats = features if variant.target_is_mlm else None
        train_transfer = None
        if variant.has_source:
            # target training touches train+val items; merge those extractions
            merged = dict(transfer_stores["train"].vectors)
            merged.update(transfer_stores["val"].vectors)
            train_transfer = FeatureStore(vectors=merged, dim=transfer_stores["train"].dim)
        best_tgt, tgt_log = training.train(
            tgt_model,
            dataset.corpus(tgt, "train"),
            dataset.corpus(tgt, "val"),
            features=tgt_feats,
            transfer=train_transfer,
            config=tgt_trainer,
        )
        tgt_ckpt = seed_dir / "target.mmc"
        best_tgt.save(tgt_ckpt)
        tgt_log.save(seed_dir / "target_train_log.jsonl")
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise StageError(stage, seed, exc) from exc

    stage = "evaluate"
    try:
        test_corpus = dataset.corpus(tgt, "test")
        test_transfer = transfer_stores.get("test") if variant.has_source else None
        hyps = generation.generate_corpus(
            best_tgt,
            test_corpus.ids(),
            features=tgt_feats,
            transfer=test_transfer,
            config=generation.GenerationConfig(max_steps=config.max_steps),
        )
        generation.write_generations(seed_dir / "generations.tsv", hyps)
        refs = {item_id: tgt_vocab.decode(ids) for item_id, ids in test_corpus}
        bleu = metrics.bleu4(hyps, refs).bleu
        pplx = training.evaluate_perplexity(
            best_tgt, test_corpus, features=tgt_feats, transfer=test_transfer
        )
    except Exception as exc:  # noqa: BLE001
        raise StageError(stage, seed, exc) from exc

    return SeedResult(seed=seed, bleu=bleu, perplexity=pplx, source_val_perplexity=source_val_pplx)


def run_experiment(
    config: ExperimentConfig,
    dataset: PreparedDataset,
    features: FeatureStore | None,
    outdir: str | Path,
    jobs: int = 1,
) -> ExperimentReport:
    """Run one variant across its seeds and aggregate BLEU/perplexity.

    Per-seed artifacts (checkpoints, extracted features with provenance,
    generations, train logs) land under ``outdir/seed-<k>/``.  A failing seed
    is recorded in ``failed_seeds`` with its stage-tagged error; the report
    aggregates whatever seeds finished, and raises only if all of them fail.
    """
    needs_visual = config.variant.target_is_mlm or config.variant.source_is_mlm
    if needs_visual and features is None:
        raise ValueError(f"variant {config.variant.value} requires a visual feature store")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    report = ExperimentReport(
        variant=config.variant.value,
        source_language=config.source_language,
        target_language=config.target_language,
        test_split_hash=_split_hash(dataset.corpus(config.target_language, "test")),
    )

    def worker(seed: int) -> SeedResult:
        return _run_seed(config, dataset, features, seed, outdir)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {seed: pool.submit(worker, seed) for seed in config.seeds}
            outcomes = {seed: fut for seed, fut in futures.items()}
        for seed in config.seeds:
            try:
                report.seeds.append(outcomes[seed].result())
            except StageError as exc:
                report.failed_seeds[seed] = str(exc)
    else:
        for seed in config.seeds:
            try:
                report.seeds.append(worker(seed))
            except StageError as exc:
                report.failed_seeds[seed] = str(exc)

    if not report.seeds:
        detail = "; ".join(report.failed_seeds.values())
        raise RuntimeError(f"all seeds failed: {detail}")
    report.bleu_mean, report.bleu_std = metrics.aggregate_runs([r.bleu for r in report.seeds])
    report.perplexity_mean, report.perplexity_std = metrics.aggregate_runs(
        [r.perplexity for r in report.seeds]
    )
    (outdir / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (outdir / "report.txt").write_text(render_report_table([report]), encoding="utf-8")
    return report


def compare_variants(reports: Sequence[ExperimentReport]) -> list[dict]:
    """Rank reports by mean BLEU, with deltas against the ``mlm`` baseline.

    All reports must describe the same test split.  The delta column is None
    when no ``mlm`` (MLM_only) report is present.
    """
    if not reports:
        raise ValueError("no reports to compare")
    split_hashes = {r.test_split_hash for r in reports}
    if len(split_hashes) > 1:
        raise ValueError("reports describe different test splits")
    baseline = next((r for r in reports if r.variant == Variant.MLM_ONLY.value), None)
    rows = []
    for r in sorted(reports, key=lambda r: -r.bleu_mean):
        rows.append(
            {
                "label": r.label(),
                "variant": r.variant,
                "bleu_mean": r.bleu_mean,
                "bleu_std": r.bleu_std,
                "perplexity_mean": r.perplexity_mean,
                "perplexity_std": r.perplexity_std,
                "delta_vs_mlm": (r.bleu_mean - baseline.bleu_mean) if baseline else None,
            }
        )
    return rows


def render_report_table(reports: Sequence[ExperimentReport]) -> str:
    """Fixed-width table of BLEU and perplexity, one row per variant."""
    rows = compare_variants(reports)
    width = max(len(r["label"]) for r in rows)
    lines = [f"{'model':<{width}}  {'BLEU':>14}  {'PPLX':>14}  {'dBLEU':>7}"]
    for r in rows:
        delta = "" if r["delta_vs_mlm"] is None else f"{r['delta_vs_mlm']:+7.2f}"
        lines.append(
            f"{r['label']:<{width}}  "
            f"{r['bleu_mean']:7.2f} ± {r['bleu_std']:4.2f}  "
            f"{r['perplexity_mean']:7.2f} ± {r['perplexity_std']:4.2f}  "
            f"{delta:>7}"
        )
    return "\n".join(lines) + "\n"
