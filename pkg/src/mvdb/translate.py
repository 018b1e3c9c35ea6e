"""Translation of a correlated database into a tuple-independent one.

Each view contributes an auxiliary relation holding one tuple per view
output, weighted (1 - w) / w, so its probability is 1 - w (negative when
w > 1).  A view output with weight 0 is a hard denial: its auxiliary tuple
is deterministic, and when every output of a view is a denial the auxiliary
atom is dropped altogether and the constraint disjunct is just the view
body.  Queries are then answered as P0(Q and not-W) / P0(not-W), which keeps
every final answer inside [0, 1] even though intermediate probabilities may
be negative.

The translation result is immutable; concurrent query evaluation against a
frozen evaluator is safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol

from .core import (INF, VIEW_AUX, Attribute, Fact, HardConstraintError,
                   InconsistentConstraintsError, InvalidViewError, Indb,
                   Mvdb, MvdbError, QueryParseError, Relation, Schema)
from . import ucq as U


@dataclass(frozen=True)
class ViewMaterialization:
    """The output tuples of one view over the possible-tuple instance."""

    view: U.MarkoView
    tuples: tuple  # ((values, weight), ...) sorted by values

    def weight_of(self, values: tuple) -> float:
        for v, w in self.tuples:
            if v == values:
                return w
        raise KeyError(values)


def materialize_view(view: U.MarkoView, db: Mvdb) -> ViewMaterialization:
    """Evaluate the view body over all possible tuples and attach weights.

    The weight expression must evaluate to the same finite non-negative
    value under every witnessing binding of an output tuple.
    """
    instance = db.possible_instance()
    weights: dict[tuple, float] = {}
    for d in view.body.disjuncts:
        for bnd, _ in U.iter_matches(d, instance):
            values = tuple(bnd[v.name] for v in d.head)
            try:
                w = U.eval_expr(view.weight_expr, bnd)
            except MvdbError as exc:
                raise InvalidViewError(f"view {view.name}: {exc}") from None
            if not isinstance(w, (int, float)) or isinstance(w, bool):
                raise InvalidViewError(
                    f"view {view.name}: weight is not a number: {w!r}")
            w = float(w)
            if math.isnan(w) or w < 0:
                raise InvalidViewError(
                    f"view {view.name}: weight {w!r} for {values!r} "
                    "is outside [0, inf)")
            if w == INF:
                raise HardConstraintError(
                    f"view {view.name}: weight inf for {values!r} has no "
                    "translated form; model the complement as a denial view")
            prev = weights.get(values)
            if prev is None:
                weights[values] = w
            elif prev != w:
                raise InvalidViewError(
                    f"view {view.name}: weight for {values!r} differs "
                    f"across witnessing bindings ({prev!r} vs {w!r})")
    ordered = tuple(sorted(weights.items(),
                           key=lambda kv: tuple((isinstance(v, str), v)
                                                for v in kv[0])))
    return ViewMaterialization(view, ordered)


@dataclass(frozen=True)
class TranslationResult:
    """The independent database, the constraint query W, and its pieces."""

    indb: Indb
    w_components: tuple  # one Boolean Ucq per view
    w_query: Optional[U.Ucq]  # disjunction of the components; None if no views
    materializations: tuple
    source: Mvdb
    p0_w_cache: dict = field(default_factory=dict, compare=False)

    @property
    def p0_w(self) -> Optional[float]:
        """P0(W) as cached by whichever evaluator computed it first."""
        for value in self.p0_w_cache.values():
            return value
        return None


def _head_types(view: U.MarkoView, schema: Schema) -> list[str]:
    types: dict[str, str] = {}
    for d in view.body.disjuncts:
        local: dict[str, str] = {}
        for a in d.atoms:
            rel = schema.relation(a.relation)
            for t, attr in zip(a.terms, rel.attributes):
                if isinstance(t, U.Var):
                    prev = local.get(t.name)
                    if prev is not None and prev != attr.type:
                        raise InvalidViewError(
                            f"view {view.name}: variable {t.name!r} used at "
                            "both int and string positions")
                    local[t.name] = attr.type
        for v in d.head:
            got = local.get(v.name)
            prev = types.get(v.name)
            if prev is not None and got is not None and prev != got:
                raise InvalidViewError(
                    f"view {view.name}: head variable {v.name!r} has "
                    "conflicting types across disjuncts")
            if got is not None:
                types[v.name] = got
    return [types[v.name] for v in view.head]


def _nv_name(view: U.MarkoView, schema: Schema, taken: set) -> str:
    name = "N" + view.name
    if schema.has(name) or name in taken:
        raise InvalidViewError(
            f"auxiliary relation name {name!r} collides; rename the view")
    return name


def build_indb(db: Mvdb, denial_shortcut: bool = True) -> TranslationResult:
    """Construct the associated tuple-independent database and W.

    Original tuples keep their weights.  Each view output becomes an
    auxiliary tuple of weight (1 - w) / w; weight-0 outputs become
    deterministic auxiliary tuples.  With *denial_shortcut* (default), a view
    whose outputs are all denials contributes its bare body as the
    constraint disjunct and no auxiliary tuples at all.
    """
    mats = [materialize_view(v, db) for v in db.views]
    aux_relations: list[Relation] = []
    aux_facts: list[tuple[Fact, float]] = []
    components: list[U.Ucq] = []
    taken: set[str] = set()
    for view, mat in zip(db.views, mats):
        all_denial = all(w == 0 for _, w in mat.tuples)
        if denial_shortcut and all_denial:
            closed = tuple(U.ConjunctiveQuery((), d.atoms, d.predicates)
                           for d in view.body.disjuncts)
            components.append(U.Ucq(closed))
            continue
        nv = _nv_name(view, db.schema, taken)
        taken.add(nv)
        types = _head_types(view, db.schema)
        attrs = tuple(Attribute(f"a{i + 1}", t) for i, t in enumerate(types))
        aux_relations.append(Relation(nv, attrs,
                                      tuple(a.name for a in attrs), VIEW_AUX))
        for values, w in mat.tuples:
            w0 = INF if w == 0 else (1.0 - w) / w
            aux_facts.append((Fact(nv, values), w0))
        disjuncts = []
        for d in view.body.disjuncts:
            nv_atom = U.Atom(nv, tuple(d.head))
            disjuncts.append(U.ConjunctiveQuery(
                (), (nv_atom,) + d.atoms, d.predicates))
        components.append(U.Ucq(tuple(disjuncts)))
    schema = db.schema.extended(aux_relations)
    weighted = list(db.weights.items()) + aux_facts
    indb = Indb(schema, weighted)
    w_query = None
    if components:
        w_query = U.Ucq(tuple(d for c in components for d in c.disjuncts))
    return TranslationResult(indb, tuple(components), w_query, tuple(mats), db)


class Evaluator(Protocol):
    """Anything that can compute P0(Q and not-W) against a translation."""

    p_not_w: float

    def prob_q_and_not_w(self, q: U.Ucq) -> float: ...


def check_query_relations(q: U.Ucq, schema: Schema):
    for rel in sorted(q.relations()):
        if schema.relation(rel).kind == VIEW_AUX:
            raise MvdbError(
                f"queries may not reference auxiliary relation {rel!r}")


def query_probability(q: U.Ucq, tr: TranslationResult,
                      evaluator: Evaluator) -> float:
    """P(Q) = P0(Q and not-W) / P0(not-W) for a Boolean query."""
    if not q.is_boolean():
        raise MvdbError("query_probability expects a Boolean query")
    check_query_relations(q, tr.indb.schema)
    p_not_w = evaluator.p_not_w
    if p_not_w == 0.0:
        raise InconsistentConstraintsError(
            "no world satisfies the hard constraints")
    return evaluator.prob_q_and_not_w(q) / p_not_w


def answer_query(q: U.Ucq, tr: TranslationResult,
                 evaluator: Evaluator) -> list[tuple[tuple, float]]:
    """Per-answer probabilities: candidates over the possible instance, then
    one Boolean evaluation per substituted head binding."""
    check_query_relations(q, tr.indb.schema)
    instance = tr.indb.possible_instance()
    out = []
    for answer in U.answer_tuples(q, instance):
        p = query_probability(U.substitute(q, answer), tr, evaluator)
        out.append((answer, p))
    return out


def parse_views(text: str, schema: Schema) -> list[U.MarkoView]:
    """Parse a views file: one ``NAME(head...) [expr] :- body`` per line."""
    views = []
    names = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            view = U.parse_view(line, schema)
        except QueryParseError as exc:
            raise QueryParseError(str(exc), line=lineno) from None
        if view.name in names:
            raise QueryParseError(f"duplicate view {view.name!r}", line=lineno)
        names.add(view.name)
        views.append(view)
    return views


def load_views(path: Path | str, schema: Schema) -> list[U.MarkoView]:
    return parse_views(Path(path).read_text(), schema)
