"""Synthetic grounded-disambiguation dataset for demos and benchmarks.

Each item pairs a source sentence containing an ambiguous noun with a target
sentence that resolves the ambiguity one of two ways, plus a tiny image
feature vector that deterministically encodes the correct resolution.  The
ambiguity is invisible in the source text, so:

* an unconditioned target model must guess both the ambiguous word and the
  location noun;
* an image-conditioned target model can resolve the ambiguous word;
* a source-conditioned target model recovers the location from the source
  sentence, and additionally the ambiguous word when the source model was
  itself image-conditioned (the image signal leaks into its hidden state).

Run ``python -m condseq.datasets --out DIR`` to materialize caption files, a
feature file, and a split manifest for use with the command-line interface.
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import write_features, write_split_manifest

__all__ = ["DisambiguationDataset", "make_disambiguation_dataset", "main"]

FEATURE_DIM = 4

_AMBIGUOUS_SOURCE = "rad"
_SENSES = ("bicycle", "wheel")
_LOCATIONS_SRC = ("haus", "baum", "fluss", "turm")
_LOCATIONS_TGT = ("house", "tree", "river", "tower")


@dataclass
class DisambiguationDataset:
    """Parallel captions plus disambiguating image features."""

    source_captions: list[tuple[str, str]]
    target_captions: list[tuple[str, str]]
    features: dict[str, np.ndarray]

    def ids(self) -> list[str]:
        return [item_id for item_id, _ in self.source_captions]


def make_disambiguation_dataset(n_items: int = 200, seed: int = 7) -> DisambiguationDataset:
    """Build ``n_items`` items with a 50/50 sense split over four locations.

    The feature vector is a one-hot over the two senses padded to
    :data:`FEATURE_DIM`; sense and location assignments are drawn with the
    given seed, so construction is deterministic.
    """
    if n_items < 8:
        raise ValueError("need at least 8 items for a meaningful dataset")
    rng = np.random.default_rng(seed)
    senses = rng.integers(0, 2, size=n_items)
    locations = rng.integers(0, len(_LOCATIONS_SRC), size=n_items)
    source: list[tuple[str, str]] = []
    target: list[tuple[str, str]] = []
    features: dict[str, np.ndarray] = {}
    for i in range(n_items):
        item_id = f"item{i:04d}"
        sense = int(senses[i])
        loc = int(locations[i])
        source.append((item_id, f"ein {_AMBIGUOUS_SOURCE} am {_LOCATIONS_SRC[loc]}"))
        target.append((item_id, f"a {_SENSES[sense]} at the {_LOCATIONS_TGT[loc]}"))
        vec = np.zeros(FEATURE_DIM, dtype=np.float64)
        vec[sense] = 1.0
        features[item_id] = vec
    return DisambiguationDataset(source_captions=source, target_captions=target, features=features)


def write_dataset(
    dataset: DisambiguationDataset,
    outdir: str | Path,
    val_fraction: float = 0.1,
    test_fraction: float = 0.1,
    split_seed: int = 13,
) -> dict[str, Path]:
    """Write caption files, the feature file, and a split manifest."""
    from .data import split_dataset

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {
        "source_captions": outdir / "captions_src.tsv",
        "target_captions": outdir / "captions_tgt.tsv",
        "features": outdir / "features.mmf",
        "splits": outdir / "splits.tsv",
    }
    for key, records in (("source_captions", dataset.source_captions), ("target_captions", dataset.target_captions)):
        with open(paths[key], "w", encoding="utf-8") as fh:
            for item_id, sentence in records:
                fh.write(f"{item_id}\t{sentence}\n")
    write_features(paths["features"], dataset.features, dim=FEATURE_DIM)
    splits = split_dataset(
        [(item_id, None) for item_id in dataset.ids()],
        (val_fraction, test_fraction),
        seed=split_seed,
    )
    write_split_manifest(paths["splits"], {s: [i for i, _ in items] for s, items in splits.items()})
    return paths


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="generate the synthetic disambiguation dataset")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--items", type=int, default=200)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args(argv)
    paths = write_dataset(make_disambiguation_dataset(args.items, args.seed), args.out)
    for name, path in sorted(paths.items()):
        print(f"{name}: {path}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
