"""Index construction, augmented annotations, intersection, serialization."""

import random
import struct
import zlib

import pytest

from mvdb import (EnumerationEvaluator, Fact, IndexEvaluator, IndexFormatError,
                  IntersectStats, Lineage, Mvdb, OrderMismatchError,
                  build_indb, build_index, cc_mv_intersect, deserialize,
                  from_lineage, lineage, mv_intersect, parse_query,
                  parse_view, point_probability, query_probability, rank_span,
                  serialize)
from mvdb.mvindex import Constituent
from mvdb.obdd import PermutationSet, con_obdd

from helpers import (EX1_SCHEMA, RAND_SCHEMA, TWO_TABLE_SCHEMA, example1,
                     random_boolean_query, signed_world_sum,
                     two_table_db, viable_random_mvdb)


def _ex1_index(w=0.5):
    db = example1(w=w)
    tr = build_indb(db)
    return db, tr, build_index(tr)


# -- build ---------------------------------------------------------------------

def test_build_index_example1_shape():
    db, tr, idx = _ex1_index()
    assert len(idx.constituents) == 1
    c = idx.constituents[0]
    assert c.key == "a"
    assert c.size() <= 5
    # P0(not W) against the 8-world signed enumeration
    probs = [tr.indb.probability(f) for f in idx.order.facts]
    ranks = {f: i for i, f in enumerate(idx.order.facts)}
    viol = (1 << ranks[Fact("R", ("a",))]) | (1 << ranks[Fact("S", ("a",))]) \
        | (1 << ranks[Fact("NV", ("a",))])
    want = signed_world_sum(probs, lambda m: (m & viol) != viol)
    assert idx.p0_not_w == pytest.approx(want, abs=1e-12)


def test_build_index_denial_keys_by_separator():
    facts = [(Fact("S", ("a1", "b1")), 1.0), (Fact("S", ("a1", "b2")), 1.0),
             (Fact("S", ("a2", "b1")), 2.0), (Fact("S", ("a2", "b2")), 0.5),
             (Fact("S", ("a2", "b3")), 1.0)]
    db = Mvdb(TWO_TABLE_SCHEMA, facts,
              [parse_view("V(x, y, z) [0] :- S(x, y), S(x, z), y != z",
                          TWO_TABLE_SCHEMA)])
    tr = build_indb(db)
    idx = build_index(tr)
    assert [c.key for c in idx.constituents] == ["a1", "a2"]
    spans = [(c.rank_lo, c.rank_hi) for c in idx.constituents]
    assert spans[0][1] < spans[1][0]


def test_build_index_no_views():
    db = Mvdb(EX1_SCHEMA, [(Fact("R", ("a",)), 1.0)], [])
    tr = build_indb(db)
    idx = build_index(tr)
    assert idx.constituents == []
    assert idx.p0_w == 0.0
    ev = IndexEvaluator(idx, tr.indb.possible_instance())
    q = parse_query("Q() :- R('a')", EX1_SCHEMA)
    assert query_probability(q, tr, ev) == pytest.approx(0.5, abs=1e-15)


def test_inter_and_intra_indices():
    db, tr, idx = _ex1_index()
    r = Fact("R", ("a",))
    assert idx.inter[r] == "a"
    positions = idx.intra("a", r)
    assert len(positions) == 1
    assert idx.constituents[0].rank[positions[0]] == idx.order.rank_of(r)
    assert Fact("NV", ("a",)) in idx.inter


# -- annotations ------------------------------------------------------------------

def test_negation_by_sink_swap():
    db = two_table_db()
    inst = db.possible_instance()
    q = parse_query("Q() :- R(x), S(x, y)", TWO_TABLE_SCHEMA)
    pi = PermutationSet({"R": (0,), "S": (0, 1)})
    g = con_obdd(pi, q, inst, db.domain)
    probs = [0.5, 0.25, -1.0, 2.0, 0.5, 0.75]
    pos = Constituent.from_obdd(g, None, negate=False)
    neg = Constituent.from_obdd(g, None, negate=True)
    pos.compute_annotations(probs)
    neg.compute_annotations(probs)
    assert neg.pu(neg.root_code) == pytest.approx(
        1.0 - pos.pu(pos.root_code), abs=1e-12)


def test_prob_under_root_matches_shannon():
    from mvdb import shannon_probability
    db = two_table_db()
    inst = db.possible_instance()
    q = parse_query("Q() :- R(x), S(x, y)", TWO_TABLE_SCHEMA)
    pi = PermutationSet({"R": (0,), "S": (0, 1)})
    g = con_obdd(pi, q, inst, db.domain)
    probs = [0.3, -0.5, 0.25, 0.8, 2.0, 0.1]
    pos = Constituent.from_obdd(g, None, negate=False)
    pos.compute_annotations(probs)
    assert pos.pu(pos.root_code) == pytest.approx(
        shannon_probability(g, probs), abs=1e-12)


def test_frontier_identities():
    # every entry table and every cut level must reproduce the root mass
    for seed in (0, 3, 5, 8, 11):
        db, tr, ev, _ = viable_random_mvdb(seed)
        idx = build_index(tr)
        for c in idx.constituents:
            if not c.n:
                continue
            c.derive(idx.probs)
            for r, table in c.entry.items():
                total = sum(mass * c.pu(code) for code, mass in table)
                assert total == pytest.approx(c.prob_root, abs=1e-12), \
                    f"entry frontier at rank {r}"
            for r in c.cut_ranks:
                total = sum(c.reach[pos] * c.prob_under[pos]
                            for pos in c.levels[r])
                assert total == pytest.approx(c.prob_root, abs=1e-12)


# -- point probability ---------------------------------------------------------------

def test_point_probability_absent_variable():
    db, tr, idx = _ex1_index()
    schema2 = EX1_SCHEMA
    # T is not part of this schema; extend the database instead
    facts = list(example1().weights.items())
    db2 = Mvdb(RAND_SCHEMA, [(Fact("R", ("a",)), 2.0), (Fact("S", ("a", "b")), 3.0),
                             (Fact("T", ("t",)), 1.5)],
               [parse_view("V(x) [0.5] :- R(x), S(x, y)", RAND_SCHEMA)])
    tr2 = build_indb(db2)
    idx2 = build_index(tr2)
    t = Fact("T", ("t",))
    assert t not in idx2.inter
    want = tr2.indb.probability(t) * idx2.p0_not_w
    assert point_probability(t, idx2) == pytest.approx(want, abs=1e-12)


def test_point_probability_against_enumeration():
    db, tr, idx = _ex1_index()
    ev = EnumerationEvaluator(tr)
    for fact in idx.order.facts:
        if fact.relation == "NV":
            continue
        q = parse_query(f"Q() :- {fact.relation}('{fact.values[0]}')",
                        EX1_SCHEMA)
        want = ev.prob_q_and_not_w(q)
        assert point_probability(fact, idx) == pytest.approx(want, abs=1e-12)


def test_point_probability_root_variable_formula():
    db, tr, idx = _ex1_index()
    c = idx.constituents[0]
    root_fact = idx.order.facts[c.rank[0]]
    p = idx.probs[c.rank[0]]
    want = p * c.pu(c.hi[0])
    assert point_probability(root_fact, idx) == pytest.approx(want, abs=1e-12)


def test_point_probability_fallback_on_level_skips():
    db = Mvdb(RAND_SCHEMA,
              [(Fact("R", ("a0",)), 2.0), (Fact("S", ("a0", "b0")), 1.0),
               (Fact("S", ("a0", "b1")), 3.0)],
              [parse_view("V(x) [2] :- R(x), S(x, y)", RAND_SCHEMA)])
    tr = build_indb(db)
    idx = build_index(tr)
    ev = EnumerationEvaluator(tr)
    skipped = Fact("S", ("a0", "b1"))
    c = idx.constituents[idx.constituent_of(skipped)]
    assert idx.order.rank_of(skipped) not in c.cut_ranks
    q = parse_query("Q() :- S('a0', 'b1')", RAND_SCHEMA)
    assert point_probability(skipped, idx) == pytest.approx(
        ev.prob_q_and_not_w(q), abs=1e-12)


# -- intersection -----------------------------------------------------------------

def test_intersect_sink_cases():
    db, tr, idx = _ex1_index()
    true_g = from_lineage(Lineage((frozenset(),)), idx.order)
    false_g = from_lineage(Lineage(()), idx.order)
    assert mv_intersect(true_g, idx) == pytest.approx(idx.p0_not_w, abs=1e-15)
    assert cc_mv_intersect(true_g, idx) == pytest.approx(idx.p0_not_w,
                                                         abs=1e-15)
    assert mv_intersect(false_g, idx) == 0.0
    assert cc_mv_intersect(false_g, idx) == 0.0


def test_intersect_disjoint_query_is_a_product():
    db = Mvdb(RAND_SCHEMA,
              [(Fact("R", ("a0",)), 2.0), (Fact("S", ("a0", "b0")), 3.0),
               (Fact("T", ("b2",)), 0.5)],
              [parse_view("V(x) [4] :- R(x), S(x, y)", RAND_SCHEMA)])
    tr = build_indb(db)
    idx = build_index(tr)
    q = parse_query("Q() :- T('b2')", RAND_SCHEMA)
    phi = lineage(q, tr.indb.possible_instance())
    gq = from_lineage(phi, idx.order)
    p_t = tr.indb.probability(Fact("T", ("b2",)))
    for fn in (mv_intersect, cc_mv_intersect):
        assert fn(gq, idx) == pytest.approx(p_t * idx.p0_not_w, abs=1e-12)


def test_intersect_matches_enumeration_randomized():
    rng = random.Random(19)
    for seed in range(30):
        db, tr, ev, _ = viable_random_mvdb(seed)
        idx = build_index(tr)
        inst = tr.indb.possible_instance()
        for _ in range(4):
            q = random_boolean_query(rng)
            phi = lineage(q, inst)
            gq = from_lineage(phi, idx.order)
            want = ev.prob_q_and_not_w(q)
            got_mv = mv_intersect(gq, idx)
            got_cc = cc_mv_intersect(gq, idx)
            assert got_mv == pytest.approx(want, abs=1e-9)
            assert got_cc == pytest.approx(got_mv, abs=1e-12)


def test_cc_visited_bound():
    rng = random.Random(29)
    for seed in range(20):
        db, tr, ev, _ = viable_random_mvdb(seed)
        idx = build_index(tr)
        if not idx.constituents:
            continue
        inst = tr.indb.possible_instance()
        for _ in range(4):
            q = random_boolean_query(rng)
            gq = from_lineage(lineage(q, inst), idx.order)
            stats = IntersectStats()
            cc_mv_intersect(gq, idx, stats)
            m = rank_span(gq)
            assert stats.visited <= m * max(1, idx.max_width())


def test_intersect_order_mismatch():
    db, tr, idx = _ex1_index()
    from mvdb.obdd import VariableOrder
    other = VariableOrder(tuple(reversed(idx.order.facts)))
    gq = from_lineage(Lineage((frozenset(),)), other)
    with pytest.raises(OrderMismatchError):
        mv_intersect(gq, idx)


def test_index_evaluator_modes_agree(two_table=None):
    rng = random.Random(37)
    for seed in range(10):
        db, tr, ev, _ = viable_random_mvdb(seed)
        idx = build_index(tr)
        inst = tr.indb.possible_instance()
        cc = IndexEvaluator(idx, inst, "cc")
        mv = IndexEvaluator(idx, inst, "mv")
        for _ in range(3):
            q = random_boolean_query(rng)
            assert cc.prob_q_and_not_w(q) == pytest.approx(
                mv.prob_q_and_not_w(q), abs=1e-12)


# -- serialization ------------------------------------------------------------------

def test_serialize_roundtrip_identical():
    db, tr, idx = _ex1_index()
    blob = serialize(idx)
    idx2 = deserialize(blob)
    assert serialize(idx2) == blob
    assert idx2.p0_w == idx.p0_w
    assert idx2.order.facts == idx.order.facts
    assert [c.key for c in idx2.constituents] == \
        [c.key for c in idx.constituents]
    assert idx2.constituents[0].prob_under == idx.constituents[0].prob_under


def test_serialize_deterministic_across_builds():
    b1 = serialize(build_index(build_indb(example1())))
    b2 = serialize(build_index(build_indb(example1())))
    assert b1 == b2


def test_deserialize_checksum_failure():
    blob = bytearray(serialize(_ex1_index()[2]))
    blob[10] ^= 0xFF
    with pytest.raises(IndexFormatError, match="checksum"):
        deserialize(bytes(blob))


def test_deserialize_version_mismatch():
    blob = bytearray(serialize(_ex1_index()[2]))
    blob[4:8] = struct.pack("<I", 99)
    body = bytes(blob[:-4])
    patched = body + struct.pack("<I", zlib.crc32(body))
    with pytest.raises(IndexFormatError, match="version"):
        deserialize(patched)


def test_deserialize_truncation():
    blob = serialize(_ex1_index()[2])
    with pytest.raises(IndexFormatError):
        deserialize(blob[: len(blob) // 2])


def test_deserialized_index_answers_queries():
    db, tr, idx = _ex1_index()
    idx2 = deserialize(serialize(idx))
    ev = IndexEvaluator(idx2, tr.indb.possible_instance())
    q = parse_query("Q() :- R('a') ; S('a')", EX1_SCHEMA)
    assert query_probability(q, tr, ev) == pytest.approx(8 / 9, abs=1e-12)


def test_cc_worst_case_full_span_visits_at_most_everything():
    db, tr, idx = _ex1_index()
    first = idx.order.facts[0]
    last = idx.order.facts[len(idx.order) - 1]
    phi = Lineage((frozenset([first, last]),))
    gq = from_lineage(phi, idx.order)
    stats = IntersectStats()
    cc_mv_intersect(gq, idx, stats)
    total_nodes = sum(c.n for c in idx.constituents)
    assert stats.visited <= total_nodes
    assert stats.visited <= rank_span(gq) * max(1, idx.max_width())


def test_cc_selective_query_visits_only_its_window():
    facts = [(Fact("S", (f"a{i}", f"b{j}")), 1.0)
             for i in range(6) for j in range(2)]
    db = Mvdb(TWO_TABLE_SCHEMA, facts,
              [parse_view("V(x, y, z) [0] :- S(x, y), S(x, z), y != z",
                          TWO_TABLE_SCHEMA)])
    tr = build_indb(db)
    idx = build_index(tr)
    ev = EnumerationEvaluator(tr)
    mid = idx.order.facts[len(idx.order) // 2]
    phi = Lineage((frozenset([mid]),))
    gq = from_lineage(phi, idx.order)
    stats = IntersectStats()
    got = cc_mv_intersect(gq, idx, stats)
    q = parse_query(f"Q() :- S('{mid.values[0]}', '{mid.values[1]}')",
                    TWO_TABLE_SCHEMA)
    assert got == pytest.approx(ev.prob_q_and_not_w(q), abs=1e-12)
    assert stats.visited <= 1 * max(1, idx.max_width())
    assert stats.visited < sum(c.n for c in idx.constituents)
