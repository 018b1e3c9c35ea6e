"""Ground-truth reference evaluation by exhaustive world enumeration.

Two measures are enumerated: the correlated-database measure, whose world
weight is the product of the weights of all present tuples and of all
satisfied view features, and the signed product measure of a translated
tuple-independent database, where per-tuple probabilities may be negative.
Both are exact up to float arithmetic and capped at 2**20 worlds.
"""

from __future__ import annotations

import numpy as np

from .core import (Fact, InconsistentConstraintsError, Indb, Mvdb,
                   MvdbError, World, WorldCapError)
from . import ucq as U
from .obdd import Obdd
from .translate import TranslationResult, build_indb, materialize_view

DEFAULT_WORLD_CAP = 1 << 20


class KahanSum:
    """Compensated accumulation, exact to one rounding of the total."""

    def __init__(self):
        self.total = 0.0
        self._c = 0.0

    def add(self, x: float):
        y = x - self._c
        t = self.total + y
        self._c = (t - self.total) - y
        self.total = t

    @property
    def value(self) -> float:
        return self.total


def _check_cap(n_tuples: int, world_cap: int):
    if 2 ** n_tuples > world_cap:
        raise WorldCapError(
            f"{n_tuples} probabilistic tuples exceed the world cap "
            f"of {world_cap} worlds")


def _bit_map(facts) -> dict[Fact, int]:
    return {f: i for i, f in enumerate(facts)}


def _clause_masks(phi: U.Lineage, bits: dict[Fact, int]) -> list[int]:
    masks = []
    for clause in phi.clauses:
        m = 0
        for f in clause:
            m |= 1 << bits[f]
        masks.append(m)
    return masks


def _sat_array(masks: list[int], n: int) -> np.ndarray:
    idx = np.arange(1 << n, dtype=np.int64)
    sat = np.zeros(1 << n, dtype=bool)
    for m in masks:
        if m == 0:
            sat[:] = True
            break
        sat |= (idx & m) == m
    return sat


def _obdd_sat_array(g: Obdd, bits: dict[Fact, int], n: int) -> np.ndarray:
    idx = np.arange(1 << n, dtype=np.int64)
    memo = {0: np.zeros(1 << n, dtype=bool), 1: np.ones(1 << n, dtype=bool)}
    table = g.table
    for u in sorted(g.reachable(), key=lambda v: table.var[v], reverse=True):
        fact = g.order.facts[table.var[u]]
        take = ((idx >> bits[fact]) & 1) == 1
        memo[u] = np.where(take, memo[table.hi[u]], memo[table.lo[u]])
    return memo[g.root]


def view_features(db: Mvdb, materializations=None):
    """Grounded features of the views: (lineage, weight) per output tuple."""
    instance = db.possible_instance()
    if materializations is None:
        materializations = [materialize_view(v, db) for v in db.views]
    features = []
    for view, mat in zip(db.views, materializations):
        for values, w in mat.tuples:
            boolean = U.substitute(
                U.Ucq(tuple(U.ConjunctiveQuery(d.head, d.atoms, d.predicates)
                            for d in view.body.disjuncts)), values)
            features.append((U.lineage(boolean, instance), float(w)))
    return features


def mln_world_trace(db: Mvdb):
    """(world, weight) per world in subset-counting order; exact products."""
    prob = db.probabilistic_facts()
    _check_cap(len(prob), DEFAULT_WORLD_CAP)
    features = view_features(db)
    out = []
    for j in range(1 << len(prob)):
        present = frozenset(f for i, f in enumerate(prob) if (j >> i) & 1)
        weight = 1.0
        for i, f in enumerate(prob):
            if (j >> i) & 1:
                weight *= db.weights[f]
        for phi, w in features:
            if phi.holds(present):
                weight *= w
        out.append((World(present), weight))
    return out


def indb_world_trace(db: Indb):
    """(world, weight) with weight the product of present finite weights."""
    prob = db.probabilistic_facts()
    _check_cap(len(prob), DEFAULT_WORLD_CAP)
    out = []
    for j in range(1 << len(prob)):
        present = frozenset(f for i, f in enumerate(prob) if (j >> i) & 1)
        weight = 1.0
        for i, f in enumerate(prob):
            if (j >> i) & 1:
                weight *= db.weights[f]
        out.append((World(present), weight))
    return out


def _world_weight_array(db: Mvdb, features, bits, n) -> np.ndarray:
    idx = np.arange(1 << n, dtype=np.int64)
    weights = np.ones(1 << n, dtype=float)
    for f, i in bits.items():
        on = ((idx >> i) & 1) == 1
        weights[on] *= db.weights[f]
    for phi, w in features:
        weights[_sat_array(_clause_masks(phi, bits), n)] *= w
    return weights


class _ZeroTrackedProduct:
    """Multiplicative state that survives zero factors exactly."""

    def __init__(self):
        self.nonzero = 1.0
        self.zeros = 0

    def multiply(self, x: float):
        if x == 0.0:
            self.zeros += 1
        else:
            self.nonzero *= x

    def divide(self, x: float):
        if x == 0.0:
            self.zeros -= 1
        else:
            self.nonzero /= x

    @property
    def value(self) -> float:
        return 0.0 if self.zeros else self.nonzero


def _mln_gray(db: Mvdb, q_masks, features, bits, n):
    """Gray-code sweep: one tuple factor changes per step; Kahan-summed."""
    tup = _ZeroTrackedProduct()
    feat = _ZeroTrackedProduct()
    feature_masks = []
    for phi, w in features:
        feature_masks.append(([m for m in _clause_masks(phi, bits)], w))
    feat_missing = [[bin(m).count("1") for m in masks]
                    for masks, _ in feature_masks]
    feat_satisfied = [sum(1 for miss in row if miss == 0)
                      for row in feat_missing]
    for (masks, w), nsat in zip(feature_masks, feat_satisfied):
        if nsat:
            feat.multiply(w)
    q_missing = [bin(m).count("1") for m in q_masks]
    q_satisfied = sum(1 for miss in q_missing if miss == 0)
    weights = [db.weights[f] for f in bits]
    by_bit: dict[int, list] = {i: [] for i in range(n)}
    for fi, (masks, _) in enumerate(feature_masks):
        for ci, m in enumerate(masks):
            for i in range(n):
                if (m >> i) & 1:
                    by_bit[i].append(("f", fi, ci))
    for ci, m in enumerate(q_masks):
        for i in range(n):
            if (m >> i) & 1:
                by_bit[i].append(("q", ci))

    z = KahanSum()
    zq = KahanSum()

    def record():
        w = tup.value * feat.value
        z.add(w)
        if q_satisfied:
            zq.add(w)

    record()
    state = 0
    for j in range(1, 1 << n):
        bit = (j & -j).bit_length() - 1
        adding = not (state >> bit) & 1
        state ^= 1 << bit
        delta = 1 if adding else -1
        if adding:
            tup.multiply(weights[bit])
        else:
            tup.divide(weights[bit])
        for entry in by_bit[bit]:
            if entry[0] == "f":
                _, fi, ci = entry
                feat_missing[fi][ci] -= delta
                if feat_missing[fi][ci] == 0 and delta == 1:
                    feat_satisfied[fi] += 1
                    if feat_satisfied[fi] == 1:
                        feat.multiply(feature_masks[fi][1])
                elif feat_missing[fi][ci] == 1 and delta == -1:
                    feat_satisfied[fi] -= 1
                    if feat_satisfied[fi] == 0:
                        feat.divide(feature_masks[fi][1])
            else:
                _, ci = entry
                q_missing[ci] -= delta
                if q_missing[ci] == 0 and delta == 1:
                    q_satisfied += 1
                elif q_missing[ci] == 1 and delta == -1:
                    q_satisfied -= 1
        record()
    return zq.value, z.value


def mln_probability(db: Mvdb, q: U.Ucq, world_cap: int = DEFAULT_WORLD_CAP,
                    method: str = "fast") -> float:
    """P(Q) by enumerating all worlds of the correlated database."""
    if not q.is_boolean():
        raise MvdbError("mln_probability expects a Boolean query")
    prob = db.probabilistic_facts()
    n = len(prob)
    _check_cap(n, world_cap)
    bits = _bit_map(prob)
    instance = db.possible_instance()
    features = view_features(db)
    q_masks = _clause_masks(U.lineage(q, instance), bits)
    if method == "gray":
        zq, z = _mln_gray(db, q_masks, features, bits, n)
    elif method == "fast":
        weights = _world_weight_array(db, features, bits, n)
        z = float(weights.sum())
        zq = float(weights[_sat_array(q_masks, n)].sum())
    else:
        raise MvdbError(f"unknown method {method!r}")
    if z == 0.0:
        raise InconsistentConstraintsError("partition function is zero")
    return zq / z


def _probability_array(db: Indb, prob_facts, n) -> np.ndarray:
    idx = np.arange(1 << n, dtype=np.int64)
    weights = np.ones(1 << n, dtype=float)
    for i, f in enumerate(prob_facts):
        p = db.probability(f)
        on = ((idx >> i) & 1) == 1
        weights[on] *= p
        weights[~on] *= (1.0 - p)
    return weights


def _phi_sat(db: Indb, phi, prob_facts, bits, n) -> np.ndarray:
    if isinstance(phi, U.Lineage):
        return _sat_array(_clause_masks(phi, bits), n)
    if isinstance(phi, Obdd):
        return _obdd_sat_array(phi, bits, n)
    raise MvdbError(f"unsupported formula {type(phi).__name__}")


def indb_probability(db: Indb, phi, world_cap: int = DEFAULT_WORLD_CAP,
                     method: str = "fast") -> float:
    """Signed measure of a formula over an independent database."""
    prob_facts = db.probabilistic_facts()
    n = len(prob_facts)
    _check_cap(n, world_cap)
    bits = _bit_map(prob_facts)
    sat = _phi_sat(db, phi, prob_facts, bits, n)
    if method == "fast":
        return float(_probability_array(db, prob_facts, n)[sat].sum())
    if method != "kahan":
        raise MvdbError(f"unknown method {method!r}")
    # Gray-code sweep: each step swaps one tuple's factor
    probs = [db.probability(f) for f in prob_facts]
    product = _ZeroTrackedProduct()
    for p in probs:
        product.multiply(1.0 - p)
    acc = KahanSum()
    state = 0
    if sat[0]:
        acc.add(product.value)
    for j in range(1, 1 << n):
        bit = (j & -j).bit_length() - 1
        adding = not (state >> bit) & 1
        state ^= 1 << bit
        old, new = ((1.0 - probs[bit], probs[bit]) if adding
                    else (probs[bit], 1.0 - probs[bit]))
        product.divide(old)
        product.multiply(new)
        if sat[state]:
            acc.add(product.value)
    return acc.value


class EnumerationEvaluator:
    """Evaluator for query_probability backed by signed enumeration."""

    def __init__(self, tr: TranslationResult,
                 world_cap: int = DEFAULT_WORLD_CAP):
        self.tr = tr
        self.world_cap = world_cap
        self.instance = tr.indb.possible_instance()
        prob_facts = tr.indb.probabilistic_facts()
        self._n = len(prob_facts)
        _check_cap(self._n, world_cap)
        self._bits = _bit_map(prob_facts)
        self._weights = _probability_array(tr.indb, prob_facts, self._n)
        if tr.w_query is None:
            self._sat_w = np.zeros(1 << self._n, dtype=bool)
        else:
            phi_w = U.lineage(tr.w_query, self.instance)
            self._sat_w = _sat_array(_clause_masks(phi_w, self._bits), self._n)
        self.p_not_w = float(self._weights[~self._sat_w].sum())
        self.p_w = float(self._weights[self._sat_w].sum())
        tr.p0_w_cache.setdefault("enumeration", self.p_w)

    def prob_q_and_not_w(self, q: U.Ucq) -> float:
        phi_q = U.lineage(q, self.instance)
        sat_q = _sat_array(_clause_masks(phi_q, self._bits), self._n)
        return float(self._weights[sat_q & ~self._sat_w].sum())


def translation_check(db: Mvdb, q: U.Ucq,
                   world_cap: int = DEFAULT_WORLD_CAP):
    """Compare direct world enumeration with the translated evaluation.

    Returns (lhs, rhs, |lhs - rhs|) where lhs enumerates the correlated
    measure and rhs evaluates (P0(Q or W) - P0(W)) / (1 - P0(W)) on the
    translated independent database.
    """
    lhs = mln_probability(db, q, world_cap)
    tr = build_indb(db)
    instance = tr.indb.possible_instance()
    phi_q = U.lineage(q, instance)
    if tr.w_query is None:
        phi_w = U.Lineage(())
    else:
        phi_w = U.lineage(tr.w_query, instance)
    p_qw = indb_probability(tr.indb, phi_q.union(phi_w), world_cap)
    p_w = indb_probability(tr.indb, phi_w, world_cap)
    if 1.0 - p_w == 0.0:
        raise InconsistentConstraintsError(
            "no world satisfies the hard constraints")
    rhs = (p_qw - p_w) / (1.0 - p_w)
    return lhs, rhs, abs(lhs - rhs)
