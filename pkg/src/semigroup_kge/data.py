"""Triplet/rule file ingestion, vocabularies, splits, and the filter index.

File formats (UTF-8, tab-separated, no header):

* triplet files: ``head<TAB>relation<TAB>tail``
* rule files:    ``relA<TAB>relB<TAB>target<TAB>lambda`` where ``target`` is a
  relation name or the literal token ``IDENTITY``
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

from .errors import DataError, ParseError, ValidationError, VocabularyError

# Distinguished rule target: compose(a, b) should act as the identity map.
IDENTITY = -1

IDENTITY_TOKEN = "IDENTITY"


class Triplet(NamedTuple):
    head: int
    relation: int
    tail: int


class Vocabulary:
    """Bidirectional name<->id maps for entities and relations.

    Ids are dense, 0-based, and assigned in first-seen order, so loading the
    same file twice produces identical id sequences.
    """

    def __init__(self, entity_names: Iterable[str] = (), relation_names: Iterable[str] = ()):
        self.entity_names: list[str] = []
        self.relation_names: list[str] = []
        self._entity_ids: dict[str, int] = {}
        self._relation_ids: dict[str, int] = {}
        for name in entity_names:
            self.add_entity(name)
        for name in relation_names:
            self.add_relation(name)

    @property
    def num_entities(self) -> int:
        return len(self.entity_names)

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    def add_entity(self, name: str) -> int:
        idx = self._entity_ids.get(name)
        if idx is None:
            idx = len(self.entity_names)
            self.entity_names.append(name)
            self._entity_ids[name] = idx
        return idx

    def add_relation(self, name: str) -> int:
        idx = self._relation_ids.get(name)
        if idx is None:
            idx = len(self.relation_names)
            self.relation_names.append(name)
            self._relation_ids[name] = idx
        return idx

    def entity_id(self, name: str) -> int:
        try:
            return self._entity_ids[name]
        except KeyError:
            raise VocabularyError(f"unknown entity {name!r}") from None

    def relation_id(self, name: str) -> int:
        try:
            return self._relation_ids[name]
        except KeyError:
            raise VocabularyError(f"unknown relation {name!r}") from None

    def entity_name(self, idx: int) -> str:
        return self.entity_names[idx]

    def relation_name(self, idx: int) -> str:
        return self.relation_names[idx]

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Vocabulary)
            and self.entity_names == other.entity_names
            and self.relation_names == other.relation_names
        )

    def to_json(self) -> str:
        return json.dumps(
            {"entities": self.entity_names, "relations": self.relation_names},
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        blob = json.loads(text)
        return cls(blob["entities"], blob["relations"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class RuleConstraint:
    """Composition constraint: following ``left_a`` then ``left_b`` should act
    like ``target`` (a relation id, or IDENTITY for the identity map)."""

    left_a: int
    left_b: int
    target: int  # relation id or IDENTITY
    weight: float

    def name_tuple(self, vocab: Vocabulary) -> tuple[str, str, str]:
        target = IDENTITY_TOKEN if self.target == IDENTITY else vocab.relation_name(self.target)
        return (vocab.relation_name(self.left_a), vocab.relation_name(self.left_b), target)


def _read_lines(path: str | Path) -> list[str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    return text.splitlines()


def load_triplets(
    path: str | Path, vocab: Vocabulary | None = None
) -> tuple[list[Triplet], Vocabulary]:
    """Load one triplet file.

    With ``vocab=None`` a fresh vocabulary is built and extended by every new
    name. With a given vocabulary the names are frozen: an unseen entity or
    relation raises :class:`VocabularyError` (valid/test must not silently
    grow the vocabulary built from train).
    """
    frozen = vocab is not None
    if vocab is None:
        vocab = Vocabulary()
    triplets: list[Triplet] = []
    seen: set[Triplet] = set()
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ParseError(
                f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}"
            )
        h_name, r_name, t_name = fields
        if frozen:
            try:
                h = vocab.entity_id(h_name)
                r = vocab.relation_id(r_name)
                t = vocab.entity_id(t_name)
            except VocabularyError as exc:
                raise VocabularyError(f"{path}:{lineno}: {exc}") from None
        else:
            h = vocab.add_entity(h_name)
            r = vocab.add_relation(r_name)
            t = vocab.add_entity(t_name)
        triplet = Triplet(h, r, t)
        if triplet in seen:
            raise ValidationError(
                f"{path}:{lineno}: duplicate triplet {h_name!r} {r_name!r} {t_name!r}"
            )
        seen.add(triplet)
        triplets.append(triplet)
    return triplets, vocab


def load_rules(path: str | Path, vocab: Vocabulary) -> list[RuleConstraint]:
    """Load composition constraints against a frozen vocabulary."""
    rules: list[RuleConstraint] = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ParseError(
                f"{path}:{lineno}: expected 4 tab-separated fields, got {len(fields)}"
            )
        a_name, b_name, target_name, weight_str = fields
        try:
            a = vocab.relation_id(a_name)
            b = vocab.relation_id(b_name)
            target = (
                IDENTITY if target_name == IDENTITY_TOKEN else vocab.relation_id(target_name)
            )
        except VocabularyError as exc:
            raise VocabularyError(f"{path}:{lineno}: {exc}") from None
        try:
            weight = float(weight_str)
        except ValueError:
            raise ParseError(f"{path}:{lineno}: bad weight {weight_str!r}") from None
        if not weight >= 0:
            raise ValidationError(f"{path}:{lineno}: negative rule weight {weight}")
        rules.append(RuleConstraint(a, b, target, weight))
    return rules


class FilterIndex:
    """Maps (head, relation) -> true tails and (relation, tail) -> true heads
    over the union of all splits, for the filtered ranking protocol."""

    def __init__(self) -> None:
        self._tails: dict[tuple[int, int], set[int]] = defaultdict(set)
        self._heads: dict[tuple[int, int], set[int]] = defaultdict(set)

    def add(self, triplet: Triplet) -> None:
        self._tails[(triplet.head, triplet.relation)].add(triplet.tail)
        self._heads[(triplet.relation, triplet.tail)].add(triplet.head)

    def tails_of(self, head: int, relation: int) -> set[int]:
        return set(self._tails.get((head, relation), ()))

    def heads_of(self, relation: int, tail: int) -> set[int]:
        return set(self._heads.get((relation, tail), ()))


def build_filter_index(splits: Iterable[Iterable[Triplet]]) -> FilterIndex:
    index = FilterIndex()
    for split in splits:
        for triplet in split:
            index.add(triplet)
    return index


@dataclass
class DatasetSplits:
    vocab: Vocabulary
    train: list[Triplet]
    valid: list[Triplet]
    test: list[Triplet]
    filter_index: FilterIndex = field(repr=False)


def load_splits(
    train_path: str | Path, valid_path: str | Path, test_path: str | Path
) -> DatasetSplits:
    """Load train/valid/test; the vocabulary is built from train and frozen
    for valid and test."""
    train, vocab = load_triplets(train_path)
    valid, _ = load_triplets(valid_path, vocab)
    test, _ = load_triplets(test_path, vocab)
    index = build_filter_index([train, valid, test])
    return DatasetSplits(vocab=vocab, train=train, valid=valid, test=test, filter_index=index)
