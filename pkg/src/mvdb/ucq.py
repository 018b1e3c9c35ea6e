"""Unions of conjunctive queries: AST, parser, grounding, and lineage.

Surface syntax is datalog-style, one query per string::

    Q(x) :- R(x), S(x, y), y != 'b1' ; T(x)

Disjuncts are separated by ``;``.  Variables are lowercase identifiers,
constants are quoted strings or integer literals.  Parsed queries and
lineages are immutable values and safe to share across threads.
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass
from typing import NamedTuple, Optional

from .core import (DETERMINISTIC, Fact, Instance, MvdbError, QueryParseError,
                   Schema)

COMPARISONS = ("=", "!=", "<", "<=", ">", ">=", "contains")


class Var(NamedTuple):
    name: str

    def __str__(self):
        return self.name


class Const(NamedTuple):
    value: object

    def __str__(self):
        return repr(self.value)


class BinOp(NamedTuple):
    op: str
    lhs: object
    rhs: object


class Func(NamedTuple):
    name: str
    arg: object


@dataclass(frozen=True)
class Atom:
    relation: str
    terms: tuple

    def variables(self) -> set[str]:
        return {t.name for t in self.terms if isinstance(t, Var)}

    def __str__(self):
        return "%s(%s)" % (self.relation, ", ".join(str(t) for t in self.terms))


@dataclass(frozen=True)
class Predicate:
    op: str
    lhs: object
    rhs: object

    def variables(self) -> set[str]:
        return expr_variables(self.lhs) | expr_variables(self.rhs)


@dataclass(frozen=True)
class ConjunctiveQuery:
    head: tuple[Var, ...]
    atoms: tuple[Atom, ...]
    predicates: tuple[Predicate, ...] = ()

    def variables(self) -> set[str]:
        out = set()
        for a in self.atoms:
            out |= a.variables()
        for p in self.predicates:
            out |= p.variables()
        return out

    def __str__(self):
        items = [str(a) for a in self.atoms]
        items += ["%s %s %s" % (_expr_str(p.lhs), p.op, _expr_str(p.rhs))
                  for p in self.predicates]
        return ", ".join(items)


@dataclass(frozen=True)
class Ucq:
    disjuncts: tuple[ConjunctiveQuery, ...]

    def __post_init__(self):
        if not self.disjuncts:
            raise MvdbError("a UCQ needs at least one disjunct")
        arities = {len(d.head) for d in self.disjuncts}
        if len(arities) != 1:
            raise MvdbError("head arities differ across disjuncts")

    @property
    def head_arity(self) -> int:
        return len(self.disjuncts[0].head)

    def is_boolean(self) -> bool:
        return self.head_arity == 0

    def relations(self) -> set[str]:
        return {a.relation for d in self.disjuncts for a in d.atoms}

    def __str__(self):
        return " ; ".join(str(d) for d in self.disjuncts)


@dataclass(frozen=True)
class MarkoView:
    """A correlation view: a UCQ body plus a per-tuple weight expression."""

    name: str
    head: tuple[Var, ...]
    weight_expr: object
    body: Ucq

    def is_denial(self) -> bool:
        """True when the weight is the constant 0 (a hard constraint)."""
        return isinstance(self.weight_expr, Const) and self.weight_expr.value == 0


def expr_variables(expr) -> set[str]:
    if isinstance(expr, Var):
        return {expr.name}
    if isinstance(expr, Const):
        return set()
    if isinstance(expr, BinOp):
        return expr_variables(expr.lhs) | expr_variables(expr.rhs)
    if isinstance(expr, Func):
        return expr_variables(expr.arg)
    raise MvdbError(f"not an expression: {expr!r}")


def _expr_str(expr) -> str:
    if isinstance(expr, (Var, Const)):
        return str(expr)
    if isinstance(expr, BinOp):
        return f"({_expr_str(expr.lhs)} {expr.op} {_expr_str(expr.rhs)})"
    if isinstance(expr, Func):
        return f"{expr.name}({_expr_str(expr.arg)})"
    return repr(expr)


def eval_expr(expr, env: dict):
    """Evaluate an arithmetic expression under a variable binding."""
    if isinstance(expr, Const):
        return expr.value
    if isinstance(expr, Var):
        try:
            return env[expr.name]
        except KeyError:
            raise MvdbError(f"unbound variable {expr.name!r}") from None
    if isinstance(expr, Func):
        if expr.name != "exp":
            raise MvdbError(f"unknown function {expr.name!r}")
        try:
            return math.exp(_as_number(eval_expr(expr.arg, env)))
        except OverflowError:
            return math.inf
    if isinstance(expr, BinOp):
        a = _as_number(eval_expr(expr.lhs, env))
        b = _as_number(eval_expr(expr.rhs, env))
        if expr.op == "+":
            return a + b
        if expr.op == "-":
            return a - b
        if expr.op == "*":
            return a * b
        if expr.op == "/":
            return a / b
        raise MvdbError(f"unknown operator {expr.op!r}")
    raise MvdbError(f"not an expression: {expr!r}")


def _as_number(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise MvdbError(f"expected a number, got {v!r}")
    return v


def eval_predicate(pred: Predicate, env: dict) -> bool:
    lhs = eval_expr(pred.lhs, env)
    rhs = eval_expr(pred.rhs, env)
    op = pred.op
    if op == "contains":
        if not isinstance(lhs, str) or not isinstance(rhs, str):
            raise MvdbError("contains expects string operands")
        return rhs in lhs
    if op == "=":
        return lhs == rhs
    if op == "!=":
        return lhs != rhs
    try:
        if op == "<":
            return lhs < rhs
        if op == "<=":
            return lhs <= rhs
        if op == ">":
            return lhs > rhs
        if op == ">=":
            return lhs >= rhs
    except TypeError:
        raise MvdbError(f"type mismatch comparing {lhs!r} and {rhs!r}") from None
    raise MvdbError(f"unknown comparison {op!r}")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<num>\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_]\w*)
  | (?P<str>'[^']*'|"[^"]*")
  | (?P<op><=|>=|!=|<>|:-|[()\[\],;=<>+\-*/])
""", re.X)


def _tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise QueryParseError(f"unexpected character {text[pos]!r}", pos=pos)
        if m.lastgroup != "ws":
            tokens.append((m.lastgroup, m.group(), pos))
        pos = m.end()
    tokens.append(("eof", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, schema: Schema):
        self.text = text
        self.schema = schema
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, val, pos = self.next()
        if val != value:
            raise QueryParseError(f"expected {value!r}, got {val!r}", pos=pos)
        return val

    def error(self, message):
        raise QueryParseError(message, pos=self.peek()[2])

    # -- query / view entry points ------------------------------------

    def parse_query(self) -> Ucq:
        _, head_vars = self._head()
        self.expect(":-")
        disjuncts = [self._body(head_vars)]
        while self.peek()[1] == ";":
            self.next()
            disjuncts.append(self._body(head_vars))
        if self.peek()[0] != "eof":
            self.error(f"trailing input {self.peek()[1]!r}")
        return Ucq(tuple(disjuncts))

    def parse_view(self) -> MarkoView:
        name, head_vars = self._head()
        if self.schema.has(name):
            self.error(f"view name {name!r} collides with a relation")
        self.expect("[")
        weight_expr = self._expr()
        self.expect("]")
        self.expect(":-")
        disjuncts = [self._body(head_vars)]
        while self.peek()[1] == ";":
            self.next()
            disjuncts.append(self._body(head_vars))
        if self.peek()[0] != "eof":
            self.error(f"trailing input {self.peek()[1]!r}")
        body = Ucq(tuple(disjuncts))
        wvars = expr_variables(weight_expr)
        for d in body.disjuncts:
            missing = wvars - d.variables()
            if missing:
                self.error("weight expression uses variables not bound in "
                           "every disjunct: " + ", ".join(sorted(missing)))
        return MarkoView(name, tuple(head_vars), weight_expr, body)

    # -- grammar pieces -------------------------------------------------

    def _head(self):
        kind, name, pos = self.next()
        if kind != "name":
            raise QueryParseError("expected a head name", pos=pos)
        self.expect("(")
        head_vars = []
        if self.peek()[1] != ")":
            while True:
                k, v, p = self.next()
                if k != "name" or not (v[0].islower() or v[0] == "_"):
                    raise QueryParseError("head terms must be variables", pos=p)
                head_vars.append(Var(v))
                if self.peek()[1] != ",":
                    break
                self.next()
        self.expect(")")
        return name, head_vars

    def _body(self, head_vars) -> ConjunctiveQuery:
        atoms, predicates = [], []
        while True:
            item = self._item()
            if isinstance(item, Atom):
                atoms.append(item)
            else:
                predicates.append(item)
            if self.peek()[1] != ",":
                break
            self.next()
        cq = ConjunctiveQuery(tuple(head_vars), tuple(atoms), tuple(predicates))
        atom_vars = set()
        for a in atoms:
            atom_vars |= a.variables()
        for hv in head_vars:
            if hv.name not in atom_vars:
                self.error(f"head variable {hv.name!r} not bound by any atom")
        for p in predicates:
            loose = p.variables() - atom_vars
            if loose:
                self.error("predicate variables not bound by any atom: "
                           + ", ".join(sorted(loose)))
        if not atoms:
            self.error("a disjunct needs at least one atom")
        return cq

    def _item(self):
        kind, val, pos = self.peek()
        if kind == "name" and val != "exp" and self.tokens[self.i + 1][1] == "(":
            if not self.schema.has(val):
                raise QueryParseError(f"unknown relation {val!r}", pos=pos)
            return self._atom()
        lhs = self._expr()
        k, op, p = self.next()
        if op == "<>":
            op = "!="
        if op not in COMPARISONS:
            raise QueryParseError(f"expected a comparison, got {op!r}", pos=p)
        rhs = self._expr()
        return Predicate(op, lhs, rhs)

    def _atom(self) -> Atom:
        _, name, pos = self.next()
        rel = self.schema.relation(name)
        self.expect("(")
        terms = []
        if self.peek()[1] != ")":
            while True:
                terms.append(self._term())
                if self.peek()[1] != ",":
                    break
                self.next()
        self.expect(")")
        if len(terms) != rel.arity:
            raise QueryParseError(
                f"{name} expects {rel.arity} arguments, got {len(terms)}",
                pos=pos)
        for t, attr in zip(terms, rel.attributes):
            if isinstance(t, Const):
                want = int if attr.type == "int" else str
                if not isinstance(t.value, want):
                    raise QueryParseError(
                        f"{name}.{attr.name} expects {attr.type}, "
                        f"got {t.value!r}", pos=pos)
        return Atom(name, tuple(terms))

    def _term(self):
        kind, val, pos = self.next()
        if kind == "name":
            if val[0].islower() or val[0] == "_":
                return Var(val)
            raise QueryParseError(
                f"bare identifier {val!r}: constants must be quoted", pos=pos)
        if kind == "num":
            return Const(_num_value(val, pos, integer_only=True))
        if kind == "str":
            return Const(val[1:-1])
        if val == "-":
            k2, v2, p2 = self.next()
            if k2 != "num":
                raise QueryParseError("expected a number after '-'", pos=p2)
            return Const(-_num_value(v2, p2, integer_only=True))
        raise QueryParseError(f"expected a term, got {val!r}", pos=pos)

    def _expr(self):
        node = self._expr_mul()
        while self.peek()[1] in ("+", "-"):
            op = self.next()[1]
            node = BinOp(op, node, self._expr_mul())
        return node

    def _expr_mul(self):
        node = self._expr_atom()
        while self.peek()[1] in ("*", "/"):
            op = self.next()[1]
            node = BinOp(op, node, self._expr_atom())
        return node

    def _expr_atom(self):
        kind, val, pos = self.next()
        if kind == "num":
            return Const(_num_value(val, pos))
        if kind == "str":
            return Const(val[1:-1])
        if val == "-":
            return BinOp("-", Const(0), self._expr_atom())
        if val == "(":
            node = self._expr()
            self.expect(")")
            return node
        if kind == "name":
            if val == "exp":
                self.expect("(")
                arg = self._expr()
                self.expect(")")
                return Func("exp", arg)
            if val[0].islower() or val[0] == "_":
                return Var(val)
        raise QueryParseError(f"expected an expression, got {val!r}", pos=pos)


def _num_value(token: str, pos: int, integer_only: bool = False):
    if re.fullmatch(r"\d+", token):
        return int(token)
    if integer_only:
        raise QueryParseError("expected an integer literal", pos=pos)
    return float(token)


def parse_query(text: str, schema: Schema) -> Ucq:
    """Parse ``HEAD :- body [; body]*`` against *schema*."""
    return _Parser(text, schema).parse_query()


def parse_view(text: str, schema: Schema) -> MarkoView:
    """Parse ``NAME(head...) [weight_expr] :- body`` against *schema*."""
    return _Parser(text, schema).parse_view()


# ---------------------------------------------------------------------------
# Grounding
# ---------------------------------------------------------------------------

def _bound_positions(atom: Atom, binding: dict):
    out = []
    for i, t in enumerate(atom.terms):
        if isinstance(t, Const):
            out.append((i, t.value))
        elif t.name in binding:
            out.append((i, binding[t.name]))
    return out


def _match_atom(atom: Atom, instance: Instance, binding: dict):
    """Yield (extended binding, fact) for rows matching *atom*."""
    bound = _bound_positions(atom, binding)
    if bound:
        pos, value = bound[0]
        rows = instance.rows_with_value(atom.relation, pos, value)
    else:
        rows = instance.rows_of(atom.relation)
    for row in rows:
        new = None
        ok = True
        local = binding
        for i, t in enumerate(atom.terms):
            if isinstance(t, Const):
                if row[i] != t.value:
                    ok = False
                    break
            else:
                v = local.get(t.name, _MISSING) if new is None else \
                    new.get(t.name, binding.get(t.name, _MISSING))
                if v is _MISSING:
                    if new is None:
                        new = dict(binding)
                        local = new
                    new[t.name] = row[i]
                elif v != row[i]:
                    ok = False
                    break
        if ok:
            yield (new if new is not None else binding,
                   Fact(atom.relation, row))


_MISSING = object()


def iter_matches(cq: ConjunctiveQuery, instance: Instance,
                 binding: Optional[dict] = None):
    """Enumerate homomorphisms of *cq* into *instance*.

    Yields (binding, used facts).  Predicates are applied as soon as their
    variables are bound.  Atoms are matched most-constrained first.
    """
    binding = dict(binding) if binding else {}
    pending_atoms = list(cq.atoms)
    pending_preds = list(cq.predicates)

    def rec(atoms, preds, bnd, used):
        keep = []
        for p in preds:
            if p.variables() <= bnd.keys():
                if not eval_predicate(p, bnd):
                    return
            else:
                keep.append(p)
        if not atoms:
            yield bnd, used
            return
        best_i, best_score = 0, (-1, 0)
        for i, a in enumerate(atoms):
            score = (len(_bound_positions(a, bnd)),
                     -len(instance.rows_of(a.relation)))
            if score > best_score:
                best_i, best_score = i, score
        atom = atoms[best_i]
        rest = atoms[:best_i] + atoms[best_i + 1:]
        for bnd2, fact in _match_atom(atom, instance, bnd):
            yield from rec(rest, keep, bnd2, used + [fact])

    yield from rec(pending_atoms, pending_preds, binding, [])


@dataclass(frozen=True)
class Lineage:
    """Monotone DNF over probabilistic tuple variables."""

    clauses: tuple[frozenset, ...]

    @staticmethod
    def normalize(clause_iter) -> "Lineage":
        seen = set()
        out = []
        for c in clause_iter:
            c = frozenset(c)
            if c not in seen:
                seen.add(c)
                out.append(c)
        out.sort(key=_clause_key)
        return Lineage(tuple(out))

    def is_false(self) -> bool:
        return not self.clauses

    def is_true(self) -> bool:
        return any(not c for c in self.clauses)

    def variables(self) -> set[Fact]:
        out = set()
        for c in self.clauses:
            out |= c
        return out

    def union(self, other: "Lineage") -> "Lineage":
        return Lineage.normalize(self.clauses + other.clauses)

    def holds(self, present) -> bool:
        return any(c <= present for c in self.clauses)


def _clause_key(clause):
    return (len(clause), sorted((f.relation, f.values) for f in clause))


def lineage(q: Ucq, instance: Instance) -> Lineage:
    """Lineage of a Boolean UCQ: one clause per homomorphism.

    Deterministic facts are always present, so they are dropped from the
    clauses; a clause that becomes empty makes the lineage valid.
    """
    if not q.is_boolean():
        raise MvdbError("lineage is defined for Boolean queries")
    clauses = []
    for d in q.disjuncts:
        for _, used in iter_matches(d, instance):
            clauses.append(frozenset(
                f for f in used if f not in instance.deterministic))
    return Lineage.normalize(clauses)


def answer_tuples(q: Ucq, instance: Instance) -> list[tuple]:
    """All head bindings with at least one homomorphism into *instance*."""
    out = set()
    for d in q.disjuncts:
        for bnd, _ in iter_matches(d, instance):
            out.add(tuple(bnd[v.name] for v in d.head))
    return sorted(out, key=lambda t: tuple((isinstance(v, str), v) for v in t))


def evaluate_on_world(q: Ucq, instance: Instance, present) -> bool:
    """Direct query evaluation on one world (deterministic facts implied)."""
    allowed = set(present) | instance.deterministic
    world = Instance(instance.schema, allowed, instance.deterministic)
    for d in q.disjuncts:
        for _ in iter_matches(d, world):
            return True
    return False


# ---------------------------------------------------------------------------
# Substitution and separator analysis
# ---------------------------------------------------------------------------

def _subst_term(t, mapping: dict):
    if isinstance(t, Var) and t.name in mapping:
        return Const(mapping[t.name])
    return t


def _subst_expr(e, mapping: dict):
    if isinstance(e, Var):
        return Const(mapping[e.name]) if e.name in mapping else e
    if isinstance(e, Const):
        return e
    if isinstance(e, BinOp):
        return BinOp(e.op, _subst_expr(e.lhs, mapping), _subst_expr(e.rhs, mapping))
    if isinstance(e, Func):
        return Func(e.name, _subst_expr(e.arg, mapping))
    raise MvdbError(f"not an expression: {e!r}")


def _subst_cq(cq: ConjunctiveQuery, mapping: dict,
              extra_preds=()) -> ConjunctiveQuery:
    atoms = tuple(Atom(a.relation, tuple(_subst_term(t, mapping) for t in a.terms))
                  for a in cq.atoms)
    preds = tuple(Predicate(p.op, _subst_expr(p.lhs, mapping),
                            _subst_expr(p.rhs, mapping))
                  for p in cq.predicates) + tuple(extra_preds)
    head = tuple(v for v in cq.head if v.name not in mapping)
    return ConjunctiveQuery(head, atoms, preds)


def substitute(q: Ucq, answer: tuple) -> Ucq:
    """Replace the head variables with *answer*, producing a Boolean UCQ."""
    if len(answer) != q.head_arity:
        raise MvdbError(f"answer arity {len(answer)} != head arity "
                        f"{q.head_arity}")
    disjuncts = []
    for d in q.disjuncts:
        mapping, extra = {}, []
        for v, value in zip(d.head, answer):
            if v.name in mapping and mapping[v.name] != value:
                extra.append(Predicate("=", Const(mapping[v.name]), Const(value)))
            else:
                mapping[v.name] = value
        disjuncts.append(_subst_cq(d, mapping, extra))
    return Ucq(tuple(disjuncts))


def root_variables(cq: ConjunctiveQuery,
                   considered=None) -> set[str]:
    """Variables occurring in every atom of the disjunct.

    With *considered* (a set of relation names), only atoms over those
    relations take part; atoms over other relations cannot bind Boolean
    variables and act as filters.
    """
    atoms = [a for a in cq.atoms
             if considered is None or a.relation in considered]
    if not atoms:
        return set()
    roots = atoms[0].variables()
    for a in atoms[1:]:
        roots &= a.variables()
    return roots


@dataclass(frozen=True)
class Separator:
    """A unified root variable: one name per disjunct, one position per
    relation symbol among the variable-bearing atoms."""

    variables: tuple[str, ...]
    positions: dict

    def position_of(self, relation: str) -> int:
        return self.positions[relation]


def variable_relations(schema: Schema) -> set[str]:
    """Relations whose atoms may bind Boolean variables."""
    return {r.name for r in schema.relations if r.kind != DETERMINISTIC}


def find_separator(q: Ucq, schema: Schema,
                   var_rels: Optional[set] = None) -> Optional[Separator]:
    """Search for a separator: a root variable per disjunct such that any two
    variable-bearing atoms with the same relation symbol carry it at the same
    attribute position.  Returns the lexicographically first choice.
    """
    if var_rels is None:
        var_rels = variable_relations(schema)
    per_disjunct = []
    for d in q.disjuncts:
        roots = sorted(root_variables(d, considered=var_rels))
        if not roots:
            return None
        per_disjunct.append(roots)
    for choice in itertools.product(*per_disjunct):
        positions: dict = {}
        ok = True
        for d, var in zip(q.disjuncts, choice):
            for a in d.atoms:
                if a.relation not in var_rels:
                    continue
                here = {i for i, t in enumerate(a.terms)
                        if isinstance(t, Var) and t.name == var}
                prev = positions.get(a.relation)
                common = here if prev is None else prev & here
                if not common:
                    ok = False
                    break
                positions[a.relation] = common
            if not ok:
                break
        if ok:
            return Separator(tuple(choice),
                             {r: min(ps) for r, ps in positions.items()})
    return None


def specialize_separator(q: Ucq, sep: Separator, constant) -> Ucq:
    """Q[constant / z]: substitute each disjunct's separator variable."""
    disjuncts = []
    for d, var in zip(q.disjuncts, sep.variables):
        disjuncts.append(_subst_cq(d, {var: constant}))
    return Ucq(tuple(disjuncts))
