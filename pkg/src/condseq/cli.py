"""Command-line interface.

Every subcommand takes ``--config FILE`` (a JSON file, the single source of
truth), optional repeatable ``--set key=value`` scalar overrides (dotted keys
into the config), and ``--out DIR``.  Artifacts are written under a run
directory named ``<command>-<config-hash>[-s<seed>]``; each run directory
contains a ``manifest.json`` (effective config, content hashes of inputs,
package version) sufficient to re-run the command bit-identically.  The exit
code is 0 iff the requested artifact was fully written; the partial output of
a failed run is quarantined under ``<out>/failed/``.

Subcommands
-----------
prepare     tokenize + build vocabularies + encode splits into a dataset dir
train       train one model from a prepared dataset
extract     final hidden states of a frozen checkpoint over a corpus split
generate    greedy descriptions for a corpus split
evaluate    corpus BLEU-4 of hypotheses against references
analyze     sentence-score histograms / nearest neighbors / report ranking
experiment  full multi-seed variant pipeline (train, extract, train, evaluate)
"""

from __future__ import annotations

import argparse
import hashlib
import json
import shutil
import sys
from pathlib import Path

from . import __version__, datasets as _datasets  # noqa: F401  (datasets registers demo helpers)
from . import generation, metrics, training, transfer
from .data import (
    PreparedDataset,
    Vocabulary,
    build_vocabulary,
    count_report,
    encode_corpus,
    load_features,
    read_captions,
    read_split_manifest,
    split_dataset,
    tokenize,
)
from .model import load_checkpoint
from .training import TrainerConfig
from .transfer import ExperimentConfig, TransferFeatures, Variant
from .util import canonical_json, path_sha256

__all__ = ["main"]


class CommandError(ValueError):
    """A configuration or input problem the user must fix."""


def _require(config: dict, key: str, command: str):
    if key not in config:
        raise CommandError(f"{command}: config is missing required key {key!r}")
    return config[key]


def _apply_overrides(config: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise CommandError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise CommandError(f"--set {key}: {part!r} is not a mapping")
        node[parts[-1]] = value
    return config


def _trainer_config(config: dict, seed: int) -> TrainerConfig:
    raw = dict(config.get("trainer", {}))
    raw.setdefault("seed", seed)
    try:
        return TrainerConfig(**raw)
    except TypeError as exc:
        raise CommandError(f"bad trainer config: {exc}") from exc


# ---------------------------------------------------------------------------
# Subcommand implementations.  Each returns the list of input paths it read
# (for the manifest) and writes its artifacts into ``rundir``.


def _cmd_prepare(config: dict, rundir: Path) -> list[str]:
    captions = _require(config, "captions", "prepare")
    splits_cfg = _require(config, "splits", "prepare")
    min_count = int(config.get("min_count", 3))
    inputs = list(captions.values())

    tokenized: dict[str, list[tuple[str, list[str]]]] = {}
    for lang, path in captions.items():
        tokenized[lang] = [(i, tokenize(s)) for i, s in read_captions(path)]

    id_sets = {lang: {i for i, _ in recs} for lang, recs in tokenized.items()}
    shared = set.intersection(*id_sets.values())
    for lang, ids in id_sets.items():
        if ids != shared:
            missing = sorted(shared.symmetric_difference(ids))[:5]
            raise CommandError(f"prepare: caption files do not align on ids (e.g. {missing})")

    if "manifest" in splits_cfg:
        inputs.append(splits_cfg["manifest"])
        assignment = read_split_manifest(splits_cfg["manifest"])
        unknown = set(i for ids in assignment.values() for i in ids) - shared
        if unknown:
            raise CommandError(f"prepare: split manifest names unknown ids {sorted(unknown)[:5]}")
        split_ids = {s: [i for i in ids if i in shared] for s, ids in assignment.items()}
        assigned = set(i for ids in split_ids.values() for i in ids)
        leftover = sorted(shared - assigned)
        if leftover:
            raise CommandError(f"prepare: split manifest misses ids {leftover[:5]}")
    else:
        fractions = (
            float(splits_cfg.get("val_fraction", 0.1)),
            float(splits_cfg.get("test_fraction", 0.1)),
        )
        seed = int(splits_cfg.get("seed", 0))
        some_lang = next(iter(tokenized))
        parts = split_dataset(
            [(i, None) for i, _ in tokenized[some_lang]], fractions, seed=seed
        )
        split_ids = {s: [i for i, _ in items] for s, items in parts.items()}

    report: dict = {"languages": {}}
    vocabs: dict[str, Vocabulary] = {}
    corpora: dict[str, dict] = {}
    for lang, records in tokenized.items():
        by_id = dict(records)
        per_split = {
            split: [(i, by_id[i]) for i in ids] for split, ids in split_ids.items() if ids
        }
        if "train" not in per_split:
            raise CommandError("prepare: training split is empty")
        # vocabulary from the training split only; val/test map unknowns to UNK
        vocab = build_vocabulary([t for _, t in per_split["train"]], min_count=min_count)
        vocabs[lang] = vocab
        corpora[lang] = {
            split: encode_corpus(recs, vocab, language=lang, split=split)
            for split, recs in per_split.items()
        }
        report["languages"][lang] = {
            "splits": {split: count_report(recs, vocab) for split, recs in per_split.items()},
            "all": count_report(records, vocab),
        }

    if "features" in config and config["features"]:
        inputs.append(config["features"])
        expected = config.get("feature_dim")
        store = load_features(config["features"], int(expected) if expected else None)
        missing = store.covers(sorted(shared))
        if missing:
            raise CommandError(f"prepare: feature file is missing ids {missing[:5]}")
        report["features"] = {"dim": store.dim, "count": len(store)}

    PreparedDataset(vocabs=vocabs, corpora=corpora, report=report).save(rundir)
    return inputs


def _load_transfer_stores(raw, command: str):
    """Transfer-feature config: a single path or a {split: path} mapping."""
    if raw is None:
        return None, []
    if isinstance(raw, str):
        raw = {"train": raw}
    stores = {}
    inputs = []
    for split, path in raw.items():
        stores[split] = TransferFeatures.load(path)
        inputs.append(path)
    hashes = {tf.source_checkpoint_hash for tf in stores.values() if tf.source_checkpoint_hash}
    if len(hashes) > 1:
        raise CommandError(f"{command}: transfer features come from different source checkpoints")
    merged: dict = {}
    dim = None
    for tf in stores.values():
        merged.update(tf.vectors)
        dim = tf.dim
    from .data import FeatureStore

    return FeatureStore(vectors=merged, dim=dim), inputs


def _cmd_train(config: dict, rundir: Path) -> list[str]:
    dataset_dir = _require(config, "dataset", "train")
    language = _require(config, "language", "train")
    seed = int(config.get("seed", 0))
    inputs = [dataset_dir]
    dataset = PreparedDataset.load(dataset_dir)
    vocab = dataset.vocabs[language]

    cond = config.get("conditioning", {})
    use_visual = bool(cond.get("visual", False))
    use_source = bool(cond.get("source", False))

    features = None
    if use_visual:
        path = _require(config, "features", "train")
        features = load_features(path)
        inputs.append(path)
    transfer_store, transfer_inputs = _load_transfer_stores(config.get("transfer"), "train")
    inputs.extend(transfer_inputs)
    if use_source and transfer_store is None:
        raise CommandError("train: source conditioning requires a transfer feature file")

    from .model import ConditioningSpec, ModelConfig

    model_cfg = config.get("model", {})
    mconfig = ModelConfig(
        vocab_size=len(vocab),
        hidden_size=int(model_cfg.get("hidden_size", 256)),
        embedding_size=int(model_cfg.get("embedding_size", 256)),
        conditioning=ConditioningSpec(
            use_visual=use_visual,
            use_source=use_source,
            visual_dim=features.dim if use_visual else 0,
            source_dim=transfer_store.dim if use_source else 0,
        ),
    )
    trainer = _trainer_config(config, seed)
    model = training.build_model(mconfig, vocab, seed=trainer.seed)
    best, log = training.train(
        model,
        dataset.corpus(language, "train"),
        dataset.corpus(language, "val"),
        features=features,
        transfer=transfer_store,
        config=trainer,
    )
    best.save(rundir / "checkpoint.mmc")
    log.save(rundir / "train_log.jsonl")
    summary = {
        "stop_reason": log.stop_reason,
        "epochs": len(log.epochs),
        "best_val_bleu": max(r.val_bleu for r in log.epochs),
        "final_val_perplexity": log.epochs[-1].val_perplexity,
    }
    (rundir / "metrics.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return inputs


def _cmd_extract(config: dict, rundir: Path) -> list[str]:
    ckpt = _require(config, "checkpoint", "extract")
    dataset_dir = _require(config, "dataset", "extract")
    language = _require(config, "language", "extract")
    split = _require(config, "split", "extract")
    inputs = [ckpt, dataset_dir]
    dataset = PreparedDataset.load(dataset_dir)
    corpus = dataset.corpus(language, split)
    features = None
    if config.get("features"):
        features = load_features(config["features"])
        inputs.append(config["features"])
    model = load_checkpoint(ckpt)
    if model.config.conditioning.use_visual and features is None:
        raise CommandError("extract: checkpoint is visually conditioned; pass features")
    transfer.extract_stage(ckpt, corpus, features=features, out_path=rundir / "features.mmf")
    return inputs


def _cmd_generate(config: dict, rundir: Path) -> list[str]:
    ckpt = _require(config, "checkpoint", "generate")
    dataset_dir = _require(config, "dataset", "generate")
    language = _require(config, "language", "generate")
    split = _require(config, "split", "generate")
    inputs = [ckpt, dataset_dir]
    dataset = PreparedDataset.load(dataset_dir)
    corpus = dataset.corpus(language, split)
    model = load_checkpoint(ckpt)
    spec = model.config.conditioning

    features = None
    if config.get("features"):
        features = load_features(config["features"])
        inputs.append(config["features"])
    if spec.use_visual and features is None:
        raise CommandError("generate: checkpoint is visually conditioned; pass features")
    transfer_store, transfer_inputs = _load_transfer_stores(config.get("transfer"), "generate")
    inputs.extend(transfer_inputs)
    if spec.use_source and transfer_store is None:
        raise CommandError("generate: checkpoint is source-conditioned; pass transfer features")

    cfg = generation.GenerationConfig(max_steps=int(config.get("max_steps", 30)))
    hyps = generation.generate_corpus(model, corpus.ids(), features, transfer_store, cfg)
    generation.write_generations(rundir / "generations.tsv", hyps)
    return inputs


def _cmd_evaluate(config: dict, rundir: Path) -> list[str]:
    hyp_path = _require(config, "hypotheses", "evaluate")
    ref_path = _require(config, "references", "evaluate")
    inputs = [hyp_path, ref_path]
    hyps = {i: tokenize(s) for i, s in read_captions(hyp_path)}
    refs_all = {i: tokenize(s) for i, s in read_captions(ref_path)}
    missing = sorted(set(hyps) - set(refs_all))
    if missing:
        raise CommandError(f"evaluate: no reference for ids {missing[:5]}")
    refs = {i: refs_all[i] for i in hyps}
    report = metrics.bleu4(hyps, refs)
    payload = {
        "bleu": report.bleu,
        "precisions": list(report.precisions),
        "brevity_penalty": report.brevity_penalty,
        "hypothesis_length": report.hypothesis_length,
        "reference_length": report.reference_length,
        "sentences": len(hyps),
    }
    (rundir / "report.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (rundir / "report.txt").write_text(
        f"BLEU = {report.bleu:.2f} (precisions: "
        + " / ".join(f"{p:.3f}" for p in report.precisions)
        + f", BP = {report.brevity_penalty:.3f}, "
        + f"len {report.hypothesis_length}/{report.reference_length})\n",
        encoding="utf-8",
    )
    if config.get("sentence_scores"):
        scores = {i: metrics.sentence_bleu(hyps[i], refs[i]) for i in sorted(hyps)}
        metrics.write_scores(rundir / "sentence_scores.tsv", scores)
    return inputs


def _cmd_analyze(config: dict, rundir: Path) -> list[str]:
    mode = _require(config, "mode", "analyze")
    if mode == "compare":
        base_path = _require(config, "baseline", "analyze")
        sys_path = _require(config, "system", "analyze")
        baseline = metrics.read_scores(base_path)
        system = metrics.read_scores(sys_path)
        hist = metrics.score_histogram(baseline, system, bins=int(config.get("bins", 10)))
        metrics.write_histogram_csv(rundir / "histogram.csv", hist)
        lines = ["bin        count  mean_delta"]
        for i, count in enumerate(hist.counts):
            delta = hist.mean_deltas[i]
            shown = "  -" if count == 0 else f"{delta:+.2f}"
            lines.append(f"[{hist.edges[i]:5.1f},{hist.edges[i+1]:5.1f}]  {count:5d}  {shown}")
        (rundir / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        return [base_path, sys_path]
    if mode == "neighbors":
        feat_path = _require(config, "features", "analyze")
        query = _require(config, "query", "analyze")
        k = int(config.get("k", 5))
        store = load_features(feat_path)
        neighbors = metrics.nearest_neighbors(store.vectors, query, k)
        (rundir / "neighbors.tsv").write_text(
            "".join(f"{query}\t{n}\n" for n in neighbors), encoding="utf-8"
        )
        return [feat_path]
    if mode == "rank":
        report_paths = _require(config, "reports", "analyze")
        reports = [
            transfer.ExperimentReport.from_dict(json.loads(Path(p).read_text(encoding="utf-8")))
            for p in report_paths
        ]
        (rundir / "ranking.txt").write_text(transfer.render_report_table(reports), encoding="utf-8")
        return list(report_paths)
    raise CommandError(f"analyze: unknown mode {mode!r} (use compare, neighbors, or rank)")


def _cmd_experiment(config: dict, rundir: Path, jobs: int = 1) -> list[str]:
    dataset_dir = _require(config, "dataset", "experiment")
    inputs = [dataset_dir]
    dataset = PreparedDataset.load(dataset_dir)
    features = None
    if config.get("features"):
        features = load_features(config["features"])
        inputs.append(config["features"])
    exp = ExperimentConfig(
        variant=Variant(_require(config, "variant", "experiment")),
        source_language=config.get("source_language", ""),
        target_language=_require(config, "target_language", "experiment"),
        model=config.get("model", {}),
        source_model=config.get("source_model", {}),
        trainer=_trainer_config(config, seed=0),
        seeds=tuple(config.get("seeds", (1, 2, 3))),
        visual_dim=features.dim if features is not None else 0,
        max_steps=int(config.get("max_steps", 30)),
    )
    report = transfer.run_experiment(exp, dataset, features, rundir, jobs=jobs)
    if report.failed_seeds:
        detail = "; ".join(f"seed {k}: {v}" for k, v in report.failed_seeds.items())
        raise CommandError(f"experiment: some seeds failed ({detail})")
    return inputs


# ---------------------------------------------------------------------------
# Runner


def _config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()[:12]


def _run(command: str, config: dict, out_root: Path, jobs: int) -> int:
    name = f"{command}-{_config_hash(config)}"
    if "seed" in config:
        name += f"-s{config['seed']}"
    out_root.mkdir(parents=True, exist_ok=True)
    tmp = out_root / f".tmp-{name}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    handlers = {
        "prepare": _cmd_prepare,
        "train": _cmd_train,
        "extract": _cmd_extract,
        "generate": _cmd_generate,
        "evaluate": _cmd_evaluate,
        "analyze": _cmd_analyze,
    }
    try:
        if command == "experiment":
            inputs = _cmd_experiment(config, tmp, jobs=jobs)
        else:
            inputs = handlers[command](config, tmp)
        manifest = {
            "command": command,
            "config": config,
            "inputs": {p: path_sha256(p) for p in sorted(set(str(p) for p in inputs))},
            "package_version": __version__,
        }
        (tmp / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    except Exception as exc:  # noqa: BLE001 - quarantine and report
        failed_root = out_root / "failed"
        failed_root.mkdir(exist_ok=True)
        dest = failed_root / name
        n = 1
        while dest.exists():
            dest = failed_root / f"{name}.{n}"
            n += 1
        shutil.move(str(tmp), str(dest))
        print(f"error [{command}]: {exc}", file=sys.stderr)
        print(f"partial output quarantined in {dest}", file=sys.stderr)
        return 1
    final = out_root / name
    if final.exists():
        shutil.rmtree(final)
    shutil.move(str(tmp), str(final))
    print(final)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="condseq",
        description="conditioned recurrent sequence models: train, transfer, evaluate",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command in ("prepare", "train", "extract", "generate", "evaluate", "analyze", "experiment"):
        p = sub.add_parser(command)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", default="runs", help="root directory for run outputs")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a scalar config field (dotted keys allowed; repeatable)",
        )
        if command == "experiment":
            p.add_argument("--jobs", type=int, default=1, help="parallel seed workers")
    args = parser.parse_args(argv)

    try:
        config = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(config, dict):
            raise CommandError("config must be a JSON object")
        config = _apply_overrides(config, args.overrides)
    except FileNotFoundError:
        print(f"error [{args.command}]: config file not found: {args.config}", file=sys.stderr)
        return 1
    except (json.JSONDecodeError, CommandError) as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1

    return _run(args.command, config, Path(args.out), getattr(args, "jobs", 1))


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
