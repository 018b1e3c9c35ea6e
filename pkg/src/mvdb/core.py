"""Relational core: schemas, ground facts, weights, and database containers.

Weights follow the odds convention: a tuple with weight w has probability
w / (1 + w), so 0, 1 and infinity correspond to probabilities 0, 1/2 and 1.
Deterministic tuples carry weight infinity and never become Boolean
variables.  Databases are immutable after construction and safe to share
across threads.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

INF = math.inf

DETERMINISTIC = "deterministic"
PROBABILISTIC = "probabilistic"
VIEW_AUX = "view-aux"

_KINDS = (DETERMINISTIC, PROBABILISTIC, VIEW_AUX)
_TYPES = ("int", "string")


class MvdbError(Exception):
    """Base class for all engine errors."""


class SchemaError(MvdbError):
    pass


class DataError(MvdbError):
    pass


class QueryParseError(MvdbError):
    def __init__(self, message, pos=None, line=None):
        loc = ""
        if line is not None:
            loc = f" (line {line})"
        elif pos is not None:
            loc = f" (at position {pos})"
        super().__init__(message + loc)
        self.pos = pos
        self.line = line


class DegenerateWeightError(MvdbError):
    pass


class InvalidViewError(MvdbError):
    pass


class HardConstraintError(InvalidViewError):
    """A view weight of infinity has no translated counterpart."""


class InconsistentConstraintsError(MvdbError):
    """No world satisfies the hard constraints: the conditional is undefined."""


class WorldCapError(MvdbError):
    pass


class OrderMismatchError(MvdbError):
    pass


class IndexFormatError(MvdbError):
    pass


def weight_to_probability(w: float) -> float:
    """Map an odds weight to a (possibly negative) probability w/(1+w)."""
    if w == INF:
        return 1.0
    if w == -1.0:
        raise DegenerateWeightError("weight -1 has no finite probability")
    return w / (1.0 + w)


def probability_to_weight(p: float) -> float:
    """Inverse of :func:`weight_to_probability`; p = 1 maps to infinity."""
    if p == 1.0:
        return INF
    return p / (1.0 - p)


class Fact(NamedTuple):
    """A ground tuple.  Identity is the pair (relation, values)."""

    relation: str
    values: tuple

    def __str__(self):
        return "%s(%s)" % (self.relation, ",".join(repr(v) for v in self.values))


@dataclass(frozen=True)
class Attribute:
    name: str
    type: str


@dataclass(frozen=True)
class Relation:
    name: str
    attributes: tuple[Attribute, ...]
    key: tuple[str, ...]
    kind: str

    @property
    def arity(self) -> int:
        return len(self.attributes)


class Schema:
    """An ordered collection of relation declarations."""

    def __init__(self, relations: Iterable[Relation]):
        self.relations: tuple[Relation, ...] = tuple(relations)
        self._by_name: dict[str, Relation] = {}
        for i, rel in enumerate(self.relations):
            if rel.name in self._by_name:
                raise SchemaError(f"duplicate relation name {rel.name!r}")
            if rel.kind not in _KINDS:
                raise SchemaError(f"unknown relation kind {rel.kind!r}")
            if not rel.key:
                raise SchemaError(f"relation {rel.name!r} has an empty key")
            attr_names = [a.name for a in rel.attributes]
            if len(set(attr_names)) != len(attr_names):
                raise SchemaError(f"duplicate attribute in {rel.name!r}")
            for a in rel.attributes:
                if a.type not in _TYPES:
                    raise SchemaError(f"unknown type {a.type!r} in {rel.name!r}")
            for k in rel.key:
                if k not in attr_names:
                    raise SchemaError(f"key attribute {k!r} not in {rel.name!r}")
            self._by_name[rel.name] = rel

    def relation(self, name: str) -> Relation:
        try:
            return self._by_name[name]
        except KeyError:
            raise SchemaError(f"unknown relation {name!r}") from None

    def has(self, name: str) -> bool:
        return name in self._by_name

    def index_of(self, name: str) -> int:
        for i, rel in enumerate(self.relations):
            if rel.name == name:
                return i
        raise SchemaError(f"unknown relation {name!r}")

    def extended(self, extra: Iterable[Relation]) -> "Schema":
        """New schema with additional (view-auxiliary) relations appended."""
        return Schema(self.relations + tuple(extra))

    def canonical_text(self) -> str:
        lines = []
        for rel in self.relations:
            attrs = ", ".join(f"{a.name}:{a.type}" for a in rel.attributes)
            key = ",".join(rel.key)
            lines.append(f"relation {rel.name}({attrs}) key({key}) {rel.kind}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()


class Domain:
    """Dense interning dictionary; active-domain order is interning order."""

    def __init__(self):
        self._rank: dict = {}
        self._constants: list = []

    def intern(self, value) -> int:
        r = self._rank.get(value)
        if r is None:
            r = len(self._constants)
            self._rank[value] = r
            self._constants.append(value)
        return r

    def rank(self, value) -> int:
        try:
            return self._rank[value]
        except KeyError:
            raise DataError(f"constant {value!r} not in active domain") from None

    def __contains__(self, value) -> bool:
        return value in self._rank

    def __len__(self) -> int:
        return len(self._constants)

    @property
    def constants(self) -> list:
        return list(self._constants)


@dataclass(frozen=True)
class World:
    """A possible world: the set of present tuples."""

    present: frozenset

    def holds(self, fact: Fact) -> bool:
        return fact in self.present


class Instance:
    """A deterministic instance: all listed facts are present.

    Tracks which facts are deterministic (always present in every world of
    the owning database) so lineage computation can drop them from clauses.
    """

    def __init__(self, schema: Schema, facts: Iterable[Fact],
                 deterministic: Iterable[Fact] = ()):
        self.schema = schema
        self._rows: dict[str, list[tuple]] = {r.name: [] for r in schema.relations}
        self._facts: set[Fact] = set()
        for f in facts:
            if f in self._facts:
                continue
            self._facts.add(f)
            self._rows[f.relation].append(f.values)
        self.deterministic: frozenset[Fact] = frozenset(deterministic)
        self._pos_index: dict[tuple[str, int], dict] = {}

    def __contains__(self, fact: Fact) -> bool:
        return fact in self._facts

    def __len__(self) -> int:
        return len(self._facts)

    @property
    def facts(self) -> frozenset:
        return frozenset(self._facts)

    def rows_of(self, relation: str) -> list[tuple]:
        try:
            return self._rows[relation]
        except KeyError:
            raise SchemaError(f"unknown relation {relation!r}") from None

    def rows_with_value(self, relation: str, pos: int, value) -> list[tuple]:
        """Rows of *relation* whose attribute at *pos* equals *value*."""
        key = (relation, pos)
        idx = self._pos_index.get(key)
        if idx is None:
            idx = {}
            for row in self._rows[relation]:
                idx.setdefault(row[pos], []).append(row)
            self._pos_index[key] = idx
        return idx.get(value, [])


def _check_fact(schema: Schema, fact: Fact):
    rel = schema.relation(fact.relation)
    if len(fact.values) != rel.arity:
        raise DataError(f"{fact} has arity {len(fact.values)}, "
                        f"expected {rel.arity}")
    for v, attr in zip(fact.values, rel.attributes):
        if attr.type == "int" and not isinstance(v, int):
            raise DataError(f"{fact}: attribute {attr.name} expects int")
        if attr.type == "string" and not isinstance(v, str):
            raise DataError(f"{fact}: attribute {attr.name} expects string")


class _Database:
    """Shared container logic for weighted-tuple databases."""

    def __init__(self, schema: Schema, weighted_facts, views=()):
        self.schema = schema
        self.views = tuple(views)
        self.weights: dict[Fact, float] = {}
        self.domain = Domain()
        for fact, w in weighted_facts:
            _check_fact(schema, fact)
            if fact in self.weights:
                raise DataError(f"duplicate possible tuple {fact}")
            self._check_weight(fact, w)
            self.weights[fact] = w
            for v in fact.values:
                self.domain.intern(v)

    def _check_weight(self, fact, w):
        raise NotImplementedError

    def probabilistic_facts(self) -> list[Fact]:
        """Possible tuples that are genuine random variables (finite weight)."""
        return [f for f, w in self.weights.items() if w != INF]

    def deterministic_facts(self) -> list[Fact]:
        return [f for f, w in self.weights.items() if w == INF]

    def possible_instance(self) -> Instance:
        """All possible tuples as a deterministic instance, weights forgotten."""
        return Instance(self.schema, self.weights.keys(),
                        deterministic=self.deterministic_facts())


class Mvdb(_Database):
    """Possible tuples with weights in [0, inf] plus correlation views."""

    def _check_weight(self, fact, w):
        if math.isnan(w) or w < 0:
            raise DataError(f"{fact}: weight must be in [0, inf], got {w!r}")
        kind = self.schema.relation(fact.relation).kind
        if kind == DETERMINISTIC and w != INF:
            raise DataError(f"{fact}: deterministic relation requires weight inf")


class Indb(_Database):
    """Tuple-independent database with signed weights; p = w/(1+w)."""

    def _check_weight(self, fact, w):
        if math.isnan(w):
            raise DataError(f"{fact}: weight is NaN")
        if w == -1.0:
            raise DegenerateWeightError(f"{fact}: weight -1 is degenerate")

    def probability(self, fact: Fact) -> float:
        return weight_to_probability(self.weights[fact])


_RELATION_RE = re.compile(
    r"^relation\s+(\w+)\s*\(([^)]*)\)\s*key\s*\(([^)]*)\)\s*(\w[\w-]*)\s*$")


def parse_schema(text: str) -> Schema:
    """Parse the one-line-per-relation schema format."""
    relations = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        m = _RELATION_RE.match(line)
        if not m:
            raise SchemaError(f"line {lineno}: cannot parse {line!r}")
        name, attrs_s, key_s, kind = m.groups()
        if kind == VIEW_AUX:
            raise SchemaError(
                f"line {lineno}: {VIEW_AUX} relations cannot be declared")
        attrs = []
        for part in attrs_s.split(","):
            part = part.strip()
            if ":" not in part:
                raise SchemaError(f"line {lineno}: bad attribute {part!r}")
            aname, atype = (s.strip() for s in part.split(":", 1))
            attrs.append(Attribute(aname, atype))
        key = tuple(s.strip() for s in key_s.split(",") if s.strip())
        relations.append(Relation(name, tuple(attrs), key, kind))
    return Schema(relations)


def load_schema(path: Path | str) -> Schema:
    return parse_schema(Path(path).read_text())


def _parse_value(token: str, attr: Attribute, where: str):
    if attr.type == "int":
        try:
            return int(token)
        except ValueError:
            raise DataError(f"{where}: expected int for {attr.name}, "
                            f"got {token!r}") from None
    return token


def parse_data_file(rel: Relation, text: str, where: str = "<data>"):
    """Parse a TSV data file: constant columns then a final weight column."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip() or raw.startswith("#"):
            continue
        cols = raw.rstrip("\n").split("\t")
        if len(cols) != rel.arity + 1:
            raise DataError(f"{where} line {lineno}: expected "
                            f"{rel.arity + 1} columns, got {len(cols)}")
        values = tuple(_parse_value(c, a, f"{where} line {lineno}")
                       for c, a in zip(cols, rel.attributes))
        wtok = cols[-1].strip()
        if wtok == "inf":
            w = INF
        else:
            try:
                w = float(wtok)
            except ValueError:
                raise DataError(f"{where} line {lineno}: bad weight "
                                f"{wtok!r}") from None
        out.append((Fact(rel.name, values), w))
    return out


def load_data(schema: Schema, data_dir: Path | str):
    """Load one TSV per relation from *data_dir*; missing files mean empty."""
    data_dir = Path(data_dir)
    weighted = []
    for rel in schema.relations:
        path = data_dir / f"{rel.name}.tsv"
        if not path.exists():
            continue
        weighted.extend(parse_data_file(rel, path.read_text(), str(path)))
    return weighted
