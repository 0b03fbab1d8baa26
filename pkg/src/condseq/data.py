"""Text and feature ingestion: tokenizer, vocabulary, corpora, binary feature
files, dataset splits, and the prepared-dataset directory layout.

File formats
------------
Caption file
    UTF-8 text, one record per line: ``<item_id>\\t<sentence>``.  When an id
    appears on several lines only the first description is kept.
Feature file (``MMF1``)
    Binary: magic ``MMF1``, u32 record count, u32 dimensionality, then per
    record a u32 id byte-length, the UTF-8 id bytes, and ``dim`` little-endian
    float32 values.  All integers little-endian.
Split manifest
    UTF-8 text, one record per line: ``<item_id>\\t<split>`` with split one of
    ``train``, ``val``, ``test``.
Encoded corpus (prepared dataset)
    UTF-8 text, one record per line: ``<item_id>\\t<space-separated indices>``
    where indices include the BOS/EOS wrapping.
"""

from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "BOS_INDEX",
    "BOS_TOKEN",
    "EOS_INDEX",
    "EOS_TOKEN",
    "PAD_INDEX",
    "PAD_TOKEN",
    "UNK_INDEX",
    "UNK_TOKEN",
    "RESERVED_TOKENS",
    "SPLITS",
    "AlignedBitext",
    "Corpus",
    "DimensionMismatchError",
    "DuplicateIdError",
    "FeatureFileError",
    "FeatureStore",
    "PreparedDataset",
    "TruncatedFileError",
    "Vocabulary",
    "align",
    "build_vocabulary",
    "count_report",
    "encode_corpus",
    "load_features",
    "read_captions",
    "read_split_manifest",
    "split_dataset",
    "tokenize",
    "write_features",
    "write_split_manifest",
]

PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN = "<pad>", "<bos>", "<eos>", "<unk>"
PAD_INDEX, BOS_INDEX, EOS_INDEX, UNK_INDEX = 0, 1, 2, 3
RESERVED_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN)

SPLITS = ("train", "val", "test")

_PUNCT = set('.,;:!?"\'()')

_FEATURE_MAGIC = b"MMF1"


class FeatureFileError(ValueError):
    """A feature file is malformed."""


class TruncatedFileError(FeatureFileError):
    """A feature file ended before the declared records were read."""


class DuplicateIdError(FeatureFileError):
    """A feature file declares the same item id twice."""


class DimensionMismatchError(FeatureFileError):
    """A feature file's dimensionality differs from what the caller expects."""


def tokenize(line: str) -> list[str]:
    """Lowercase, split on whitespace, and detach edge punctuation.

    Leading/trailing characters from ``.,;:!?"'()`` become tokens of their
    own (in textual order); interior punctuation stays attached.
    """
    tokens: list[str] = []
    for chunk in line.lower().split():
        start, end = 0, len(chunk)
        while start < end and chunk[start] in _PUNCT:
            start += 1
        while end > start and chunk[end - 1] in _PUNCT:
            end -= 1
        tokens.extend(chunk[:start])
        if start < end:
            tokens.append(chunk[start:end])
        tokens.extend(chunk[end:])
    return tokens


@dataclass(frozen=True)
class Vocabulary:
    """Token/index bijection with reserved markers at indices 0-3.

    Content tokens are ordered by descending frequency, ties broken
    lexicographically, so construction is deterministic.
    """

    index_to_token: tuple[str, ...]
    min_count: int
    token_to_index: dict[str, int] = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self) -> None:
        if self.index_to_token[: len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise ValueError("vocabulary must start with the reserved tokens")
        if not self.token_to_index:
            self.token_to_index.update({t: i for i, t in enumerate(self.index_to_token)})

    def __len__(self) -> int:
        return len(self.index_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_index

    def index(self, token: str) -> int:
        """Index of ``token``, falling back to the UNK index."""
        return self.token_to_index.get(token, UNK_INDEX)

    def token(self, index: int) -> str:
        return self.index_to_token[index]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        """Map tokens to indices, wrapped as [BOS, ..., EOS]; unknowns -> UNK."""
        return [BOS_INDEX] + [self.index(t) for t in tokens] + [EOS_INDEX]

    def decode(self, indices: Sequence[int], strip_markers: bool = True) -> list[str]:
        """Map indices back to tokens, dropping PAD/BOS/EOS unless asked not to."""
        if strip_markers:
            keep = (PAD_INDEX, BOS_INDEX, EOS_INDEX)
            return [self.index_to_token[i] for i in indices if i not in keep]
        return [self.index_to_token[i] for i in indices]

    def to_lines(self) -> list[str]:
        return list(self.index_to_token)

    @classmethod
    def from_lines(cls, lines: Iterable[str], min_count: int = 1) -> "Vocabulary":
        return cls(index_to_token=tuple(lines), min_count=min_count)


def build_vocabulary(token_lists: Iterable[Sequence[str]], min_count: int = 3) -> Vocabulary:
    """Build a vocabulary from tokenized sentences.

    Tokens appearing fewer than ``min_count`` times map to UNK at encode time.
    """
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    counts: Counter[str] = Counter()
    n_sentences = 0
    for tokens in token_lists:
        n_sentences += 1
        counts.update(tokens)
    if n_sentences == 0:
        raise ValueError("cannot build a vocabulary from an empty training set")
    kept = sorted(
        (t for t, c in counts.items() if c >= min_count),
        key=lambda t: (-counts[t], t),
    )
    return Vocabulary(index_to_token=RESERVED_TOKENS + tuple(kept), min_count=min_count)


@dataclass
class Corpus:
    """Encoded sentences of one language and split: ``(item_id, indices)``.

    Every sequence is BOS-prefixed and EOS-suffixed.
    """

    items: list[tuple[str, list[int]]]
    language: str = ""
    split: str = ""

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[tuple[str, list[int]]]:
        return iter(self.items)

    def ids(self) -> list[str]:
        return [item_id for item_id, _ in self.items]


@dataclass
class AlignedBitext:
    """Sentence-aligned bilingual corpus joined on item id."""

    pairs: list[tuple[str, list[str], list[str]]]
    source_language: str = ""
    target_language: str = ""

    def __len__(self) -> int:
        return len(self.pairs)


def read_captions(path: str | Path) -> list[tuple[str, str]]:
    """Read a caption file, keeping only the first description per item id."""
    records: list[tuple[str, str]] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: expected '<item_id>\\t<sentence>'")
            item_id, sentence = line.split("\t", 1)
            if item_id in seen:
                continue
            seen.add(item_id)
            records.append((item_id, sentence))
    return records


def align(
    source: Sequence[tuple[str, Sequence[str]]],
    target: Sequence[tuple[str, Sequence[str]]],
    source_language: str = "",
    target_language: str = "",
) -> AlignedBitext:
    """Join two tokenized corpora on item id; both sides must cover the same ids."""
    src_by_id = {i: list(t) for i, t in source}
    tgt_by_id = {i: list(t) for i, t in target}
    missing_tgt = sorted(set(src_by_id) - set(tgt_by_id))
    missing_src = sorted(set(tgt_by_id) - set(src_by_id))
    if missing_tgt or missing_src:
        raise ValueError(
            "bitext ids do not align: "
            f"missing from target {missing_tgt[:5]}, missing from source {missing_src[:5]}"
        )
    pairs = [(i, src_by_id[i], tgt_by_id[i]) for i, _ in source]
    return AlignedBitext(pairs=pairs, source_language=source_language, target_language=target_language)


def encode_corpus(
    records: Sequence[tuple[str, Sequence[str]]],
    vocab: Vocabulary,
    language: str = "",
    split: str = "",
) -> Corpus:
    """Encode tokenized ``(item_id, tokens)`` records with BOS/EOS wrapping."""
    return Corpus(
        items=[(item_id, vocab.encode(tokens)) for item_id, tokens in records],
        language=language,
        split=split,
    )


def count_report(records: Sequence[tuple[str, Sequence[str]]], vocab: Vocabulary) -> dict:
    """Token/type counts before and after UNK replacement."""
    total = 0
    in_vocab = 0
    types: set[str] = set()
    for _, tokens in records:
        total += len(tokens)
        types.update(tokens)
        in_vocab += sum(1 for t in tokens if t in vocab)
    return {
        "sentences": len(records),
        "tokens_total": total,
        "tokens_in_vocab": in_vocab,
        "types_total": len(types),
        "types_kept": len(vocab) - len(RESERVED_TOKENS),
    }


# ---------------------------------------------------------------------------
# Feature files


@dataclass
class FeatureStore:
    """Item-id keyed dense feature vectors of a single dimensionality."""

    vectors: dict[str, np.ndarray]
    dim: int

    def __len__(self) -> int:
        return len(self.vectors)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self.vectors

    def get(self, item_id: str) -> np.ndarray:
        try:
            return self.vectors[item_id]
        except KeyError:
            raise KeyError(f"no feature vector for item {item_id!r}") from None

    def covers(self, ids: Iterable[str]) -> list[str]:
        """Return the ids from ``ids`` that are missing from the store."""
        return [i for i in ids if i not in self.vectors]


def write_features(path: str | Path, vectors: Mapping[str, np.ndarray], dim: int | None = None) -> None:
    """Write an ``MMF1`` feature file (float32 payload, little-endian)."""
    items = list(vectors.items())
    if dim is None:
        if not items:
            raise ValueError("cannot infer dimensionality of an empty feature store")
        dim = len(items[0][1])
    with open(path, "wb") as fh:
        fh.write(_FEATURE_MAGIC)
        fh.write(struct.pack("<II", len(items), dim))
        for item_id, vec in items:
            arr = np.asarray(vec, dtype="<f4")
            if arr.ndim != 1 or arr.shape[0] != dim:
                raise DimensionMismatchError(
                    f"vector for {item_id!r} has shape {arr.shape}, expected ({dim},)"
                )
            raw = item_id.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(arr.tobytes())


def load_features(path: str | Path, expected_dim: int | None = None) -> FeatureStore:
    """Read an ``MMF1`` feature file into a :class:`FeatureStore`.

    Values are promoted to float64 for computation; writing a store back out
    round-trips the float32 payload bit-exactly.
    """
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _FEATURE_MAGIC:
            raise FeatureFileError(f"{path}: bad magic {magic!r}, expected {_FEATURE_MAGIC!r}")
        header = fh.read(8)
        if len(header) != 8:
            raise TruncatedFileError(f"{path}: truncated header")
        count, dim = struct.unpack("<II", header)
        if expected_dim is not None and dim != expected_dim:
            raise DimensionMismatchError(f"{path}: dimensionality {dim}, expected {expected_dim}")
        vectors: dict[str, np.ndarray] = {}
        for _ in range(count):
            raw_len = fh.read(4)
            if len(raw_len) != 4:
                raise TruncatedFileError(f"{path}: truncated record header")
            (id_len,) = struct.unpack("<I", raw_len)
            raw_id = fh.read(id_len)
            if len(raw_id) != id_len:
                raise TruncatedFileError(f"{path}: truncated item id")
            payload = fh.read(4 * dim)
            if len(payload) != 4 * dim:
                raise TruncatedFileError(f"{path}: truncated feature vector")
            item_id = raw_id.decode("utf-8")
            if item_id in vectors:
                raise DuplicateIdError(f"{path}: duplicate item id {item_id!r}")
            vectors[item_id] = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return FeatureStore(vectors=vectors, dim=dim)


# ---------------------------------------------------------------------------
# Splits


def split_dataset(
    records: Sequence[tuple[str, object]],
    fractions: tuple[float, float],
    seed: int,
) -> dict[str, list]:
    """Partition records into train/val/test by ``(val, test)`` fractions.

    Ids are sorted before the seeded shuffle, so the partition depends only on
    the id set, the fractions, and the seed.  A nonzero fraction that rounds
    to zero items (or an empty training remainder) is an error.
    """
    val_frac, test_frac = fractions
    if val_frac < 0 or test_frac < 0 or val_frac + test_frac > 1:
        raise ValueError(f"fractions must be nonnegative and sum to <= 1, got {fractions}")
    by_id = dict(records)
    if len(by_id) != len(records):
        raise ValueError("duplicate item ids in records")
    ids = sorted(by_id)
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    n_val = int(round(val_frac * n))
    n_test = int(round(test_frac * n))
    if val_frac > 0 and n_val == 0:
        raise ValueError(f"val fraction {val_frac} yields an empty split for {n} records")
    if test_frac > 0 and n_test == 0:
        raise ValueError(f"test fraction {test_frac} yields an empty split for {n} records")
    if n_val + n_test >= n:
        raise ValueError("no records left for the training split")
    val_ids = set(shuffled[:n_val])
    test_ids = set(shuffled[n_val : n_val + n_test])
    out: dict[str, list] = {"train": [], "val": [], "test": []}
    for item_id in ids:  # id-sorted members, independent of input order
        if item_id in val_ids:
            out["val"].append((item_id, by_id[item_id]))
        elif item_id in test_ids:
            out["test"].append((item_id, by_id[item_id]))
        else:
            out["train"].append((item_id, by_id[item_id]))
    return out


def read_split_manifest(path: str | Path) -> dict[str, list[str]]:
    """Read a split manifest into ``{split: [item ids]}`` (order preserved)."""
    out: dict[str, list[str]] = {s: [] for s in SPLITS}
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                item_id, split = line.split("\t")
            except ValueError:
                raise ValueError(f"{path}:{lineno}: expected '<item_id>\\t<split>'") from None
            if split not in SPLITS:
                raise ValueError(f"{path}:{lineno}: unknown split {split!r}")
            if item_id in seen:
                raise ValueError(f"{path}:{lineno}: item {item_id!r} assigned twice")
            seen.add(item_id)
            out[split].append(item_id)
    return out


def write_split_manifest(path: str | Path, splits: Mapping[str, Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for split in SPLITS:
            for item_id in splits.get(split, ()):
                fh.write(f"{item_id}\t{split}\n")


# ---------------------------------------------------------------------------
# Prepared datasets


@dataclass
class PreparedDataset:
    """Vocabularies plus encoded per-language, per-split corpora.

    ``corpora`` maps ``language -> split -> Corpus``.  On disk this is a
    directory of ``dataset.json``, ``<lang>.vocab.txt``, and
    ``<lang>.<split>.tsv`` files.
    """

    vocabs: dict[str, Vocabulary]
    corpora: dict[str, dict[str, Corpus]]
    report: dict = field(default_factory=dict)

    def languages(self) -> list[str]:
        return sorted(self.vocabs)

    def corpus(self, language: str, split: str) -> Corpus:
        try:
            return self.corpora[language][split]
        except KeyError:
            raise KeyError(f"no corpus for language {language!r} split {split!r}") from None

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {
            "languages": self.languages(),
            "splits": {
                lang: sorted(self.corpora[lang], key=SPLITS.index) for lang in self.languages()
            },
            "min_count": {lang: v.min_count for lang, v in self.vocabs.items()},
        }
        (directory / "dataset.json").write_text(
            json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        (directory / "report.json").write_text(
            json.dumps(self.report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        for lang, vocab in self.vocabs.items():
            (directory / f"{lang}.vocab.txt").write_text(
                "\n".join(vocab.to_lines()) + "\n", encoding="utf-8"
            )
            for split, corpus in self.corpora[lang].items():
                lines = [
                    f"{item_id}\t{' '.join(str(i) for i in indices)}" for item_id, indices in corpus
                ]
                (directory / f"{lang}.{split}.tsv").write_text(
                    "\n".join(lines) + ("\n" if lines else ""), encoding="utf-8"
                )

    @classmethod
    def load(cls, directory: str | Path) -> "PreparedDataset":
        directory = Path(directory)
        meta = json.loads((directory / "dataset.json").read_text(encoding="utf-8"))
        report_path = directory / "report.json"
        report = json.loads(report_path.read_text(encoding="utf-8")) if report_path.exists() else {}
        vocabs: dict[str, Vocabulary] = {}
        corpora: dict[str, dict[str, Corpus]] = {}
        for lang in meta["languages"]:
            lines = (directory / f"{lang}.vocab.txt").read_text(encoding="utf-8").splitlines()
            vocabs[lang] = Vocabulary.from_lines(lines, min_count=meta["min_count"][lang])
            corpora[lang] = {}
            for split in meta["splits"][lang]:
                items = []
                text = (directory / f"{lang}.{split}.tsv").read_text(encoding="utf-8")
                for line in text.splitlines():
                    if not line:
                        continue
                    item_id, indices = line.split("\t")
                    items.append((item_id, [int(x) for x in indices.split()]))
                corpora[lang][split] = Corpus(items=items, language=lang, split=split)
        return cls(vocabs=vocabs, corpora=corpora, report=report)
