"""The compiled constraint index and its intersection algorithms.

The constraint query W is compiled offline into negated, augmented OBDD
constituents over pairwise-disjoint variable ranges (one per separator
constant when W has a separator).  Every node carries the probability of its
sub-diagram (probUnder) and the signed mass of all root paths reaching it
(reachability).  Online, a query OBDD ordered by the same tuple order is
intersected against the chain of constituents without materializing the
conjunction:

* `mv_intersect` descends from each constituent root, guided by the query;
* `cc_mv_intersect` stores each constituent as a DFS-ordered vector with
  per-node neighbour offsets and jumps straight to the query's first rank
  through per-level entry tables, so the nodes it expands all lie inside the
  query's rank window (the span-times-width visit bound).

The index is immutable after build; every query owns its own memo table, so
concurrent evaluation is safe.
"""

from __future__ import annotations

import math
import struct
import time
import zlib
from dataclasses import dataclass, field
from typing import Optional

from .core import (Fact, Indb, Instance, IndexFormatError, MvdbError,
                   OrderMismatchError)
from . import ucq as U
from .obdd import (NodeTable, Obdd, PermutationSet, VariableOrder, con_obdd,
                   choose_pi, from_lineage, tuple_order)
from .translate import TranslationResult

SINK0 = -1
SINK1 = -2

_MAGIC = b"MVIX"
_VERSION = 1


class Constituent:
    """One negated, augmented OBDD in a DFS-ordered vector layout."""

    def __init__(self, key, root_code: int, rank, lo, hi,
                 prob_under=None, reach=None):
        self.key = key
        self.root_code = root_code
        self.rank = list(rank)
        self.lo = list(lo)
        self.hi = list(hi)
        self.n = len(self.rank)
        self.prob_under = list(prob_under) if prob_under is not None else None
        self.reach = list(reach) if reach is not None else None
        self.rank_lo = min(self.rank) if self.rank else -1
        self.rank_hi = max(self.rank) if self.rank else -1
        self.levels: dict[int, list[int]] = {}
        self.entry: dict[int, list] = {}
        self.cut_ranks: set[int] = set()
        self.prob_root = 0.0

    @staticmethod
    def from_obdd(g: Obdd, key, negate: bool = True) -> "Constituent":
        """Lay out *g* (sink-swapped when *negate*) in DFS preorder."""
        table = g.table
        s0, s1 = (SINK1, SINK0) if negate else (SINK0, SINK1)
        if g.root <= 1:
            return Constituent(key, s1 if g.root == 1 else s0, [], [], [])
        nodes = g.reachable()
        pos_of = {u: i for i, u in enumerate(nodes)}

        def code(child):
            if child == 0:
                return s0
            if child == 1:
                return s1
            return pos_of[child]

        rank = [table.var[u] for u in nodes]
        lo = [code(table.lo[u]) for u in nodes]
        hi = [code(table.hi[u]) for u in nodes]
        return Constituent(key, 0, rank, lo, hi)

    # -- augmentation -----------------------------------------------------

    def pu(self, code: int) -> float:
        if code == SINK0:
            return 0.0
        if code == SINK1:
            return 1.0
        return self.prob_under[code]

    def compute_annotations(self, probs):
        """Bottom-up probUnder and top-down reachability (signed)."""
        self.prob_under = [0.0] * self.n
        for pos in sorted(range(self.n), key=self.rank.__getitem__,
                          reverse=True):
            p = probs[self.rank[pos]]
            self.prob_under[pos] = ((1.0 - p) * self.pu(self.lo[pos])
                                    + p * self.pu(self.hi[pos]))
        self.reach = [0.0] * self.n
        if self.n:
            self.reach[0] = 1.0
            for pos in sorted(range(self.n), key=self.rank.__getitem__):
                p = probs[self.rank[pos]]
                if self.lo[pos] >= 0:
                    self.reach[self.lo[pos]] += self.reach[pos] * (1.0 - p)
                if self.hi[pos] >= 0:
                    self.reach[self.hi[pos]] += self.reach[pos] * p

    def derive(self, probs):
        """Per-level node lists, entry tables, and cut levels."""
        self.prob_root = self.pu(self.root_code)
        self.levels = {}
        for pos in range(self.n):
            self.levels.setdefault(self.rank[pos], []).append(pos)
        self.entry = {}
        self.cut_ranks = set()
        if not self.n:
            return
        root_rank = self.rank[0]
        for r in range(self.rank_lo, self.rank_hi + 1):
            if root_rank >= r:
                table = [(0, 1.0)]
            else:
                masses: dict[int, float] = {}
                for pos in range(self.n):
                    if self.rank[pos] >= r:
                        continue
                    p = probs[self.rank[pos]]
                    for child, factor in ((self.lo[pos], 1.0 - p),
                                          (self.hi[pos], p)):
                        child_rank = (self.rank[child] if child >= 0
                                      else math.inf)
                        if child_rank >= r:
                            masses[child] = (masses.get(child, 0.0)
                                             + self.reach[pos] * factor)
                table = sorted(masses.items())
            self.entry[r] = table
            if all(c >= 0 and self.rank[c] == r for c, _ in table):
                self.cut_ranks.add(r)

    def size(self) -> int:
        return self.n + 2

    def width(self) -> int:
        return max((len(v) for v in self.levels.values()), default=0)


class MvIndex:
    """Keyed augmented constituents plus the two tuple-variable indices."""

    def __init__(self, constituents, order: VariableOrder, probs,
                 pi: PermutationSet, schema_digest: str):
        self.constituents: list[Constituent] = sorted(
            constituents, key=lambda c: (c.rank_lo, c.rank_hi))
        self.order = order
        self.probs = list(probs)
        self.pi = pi
        self.schema_digest = schema_digest
        self.suffix = [1.0] * (len(self.constituents) + 1)
        for k in range(len(self.constituents) - 1, -1, -1):
            self.suffix[k] = (self.constituents[k].prob_root
                              * self.suffix[k + 1])
        self.p0_not_w = self.suffix[0]
        self.p0_w = 1.0 - self.p0_not_w
        self._rank_to_k: dict[int, int] = {}
        self.inter: dict[Fact, object] = {}
        for k, c in enumerate(self.constituents):
            for r in c.levels:
                self._rank_to_k[r] = k
                self.inter[self.order.facts[r]] = c.key

    def constituent_of(self, fact: Fact) -> Optional[int]:
        return self._rank_to_k.get(self.order.rank_of(fact))

    def intra(self, key, fact: Fact) -> list[int]:
        """Positions of the nodes labelled with *fact* in the keyed OBDD."""
        for c in self.constituents:
            if c.key == key:
                return list(c.levels.get(self.order.rank_of(fact), ()))
        raise MvdbError(f"no constituent with key {key!r}")

    def max_width(self) -> int:
        return max((c.width() for c in self.constituents), default=0)


def _variable_relations(indb: Indb) -> set[str]:
    out = set()
    for f, w in indb.weights.items():
        if w != math.inf:
            out.add(f.relation)
    return out


def build_index(tr: TranslationResult,
                instance: Optional[Instance] = None) -> MvIndex:
    """Compile the constraint query of a translation into an index.

    With a separator, one constituent is built per separator constant
    (keyed by it); otherwise a single unkeyed constituent.  Constituents are
    negated by swapping sinks, then augmented.
    """
    indb = tr.indb
    if instance is None:
        instance = indb.possible_instance()
    prob_facts = indb.probabilistic_facts()
    digest = tr.source.schema.digest()
    if tr.w_query is None:
        pi = PermutationSet.identity()
        order = tuple_order(pi, prob_facts, indb.domain, indb.schema)
        probs = [indb.probability(f) for f in order.facts]
        return MvIndex([], order, probs, pi, digest)
    var_rels = _variable_relations(indb)
    pi = choose_pi(tr.w_query, indb.schema, var_rels)
    order = tuple_order(pi, prob_facts, indb.domain, indb.schema)
    probs = [indb.probability(f) for f in order.facts]
    table = NodeTable(order)
    blocks: list[tuple[object, Obdd]] = []
    sep = U.find_separator(tr.w_query, indb.schema, var_rels)
    if sep is not None:
        from .obdd import _Builder
        builder = _Builder(pi, instance, indb.domain, table, var_rels)
        by_constant: dict = {}
        for i, (d, var) in enumerate(zip(tr.w_query.disjuncts,
                                         sep.variables)):
            for c in builder._candidates(d.atoms, var):
                by_constant.setdefault(c, []).append(i)
        for c in sorted(by_constant, key=indb.domain.rank):
            residual = tuple(U._subst_cq(tr.w_query.disjuncts[i],
                                         {sep.variables[i]: c})
                             for i in by_constant[c])
            g = con_obdd(pi, U.Ucq(residual), instance, indb.domain,
                         order=order, table=table, var_rels=var_rels)
            if g.root != 0:
                blocks.append((c, g))
        spans = sorted((g.table.span(g.root) for _, g in blocks
                        if g.root > 1))
        contiguous = all(a[1] < b[0] for a, b in zip(spans, spans[1:]))
        if not contiguous:
            blocks = []
            sep = None
    if sep is None:
        g = con_obdd(pi, tr.w_query, instance, indb.domain, order=order,
                     table=table, var_rels=var_rels)
        blocks = [] if g.root == 0 else [(None, g)]
    constituents = []
    for key, g in blocks:
        c = Constituent.from_obdd(g, key, negate=True)
        c.compute_annotations(probs)
        c.derive(probs)
        constituents.append(c)
    index = MvIndex(constituents, order, probs, pi, digest)
    tr.p0_w_cache.setdefault("index", index.p0_w)
    return index


# ---------------------------------------------------------------------------
# Intersection
# ---------------------------------------------------------------------------

@dataclass
class IntersectStats:
    visited: int = 0
    memo_entries: int = 0
    _seen: set = field(default_factory=set)

    def mark(self, k, pos):
        if (k, pos) not in self._seen:
            self._seen.add((k, pos))
            self.visited += 1


def _query_tail(gq: Obdd, probs) -> dict[int, float]:
    """Plain probability of every query sub-diagram (for chain tails)."""
    table = gq.table
    tail = {0: 0.0, 1: 1.0}
    for u in sorted(gq.reachable(), key=lambda v: table.var[v], reverse=True):
        p = probs[table.var[u]]
        tail[u] = (1.0 - p) * tail[table.lo[u]] + p * tail[table.hi[u]]
    return tail


def _intersect(gq: Obdd, index: MvIndex, cache_conscious: bool,
               stats: Optional[IntersectStats]) -> float:
    if gq.order != index.order:
        raise OrderMismatchError("query OBDD does not follow the index order")
    cons = index.constituents
    m = len(cons)
    suffix = index.suffix
    probs = index.probs
    qtab = gq.table
    tail = _query_tail(gq, probs)

    def expand(task):
        kind = task[0]
        if kind == "E":
            _, k, v = task
            if v == 0:
                return 0.0
            if v == 1:
                return suffix[k]
            if k == m:
                return tail[v]
            c = cons[k]
            rv = qtab.var[v]
            if rv > c.rank_hi:
                return (0.0, ((c.prob_root, ("E", k + 1, v)),))
            if rv < c.rank_lo:
                p = probs[rv]
                return (0.0, ((1.0 - p, ("E", k, qtab.lo[v])),
                              (p, ("E", k, qtab.hi[v]))))
            if not cache_conscious:
                return (0.0, ((1.0, _xtask(k, c.root_code, v)),))
            terms = []
            for code, mass in c.entry[rv]:
                if code == SINK0:
                    continue
                terms.append((mass, _xtask(k, code, v)))
            return (0.0, tuple(terms))
        _, k, pos, v = task
        c = cons[k]
        if v == 0:
            return 0.0
        if v == 1:
            return c.prob_under[pos] * suffix[k + 1]
        ru = c.rank[pos]
        rv = qtab.var[v]
        if ru > rv:
            p = probs[rv]
            return (0.0, ((1.0 - p, _xtask(k, pos, qtab.lo[v])),
                          (p, _xtask(k, pos, qtab.hi[v]))))
        if stats is not None:
            stats.mark(k, pos)
        p = probs[ru]
        if ru < rv:
            return (0.0, ((1.0 - p, _xtask(k, c.lo[pos], v)),
                          (p, _xtask(k, c.hi[pos], v))))
        return (0.0, ((1.0 - p, _xtask(k, c.lo[pos], qtab.lo[v])),
                      (p, _xtask(k, c.hi[pos], qtab.hi[v]))))

    def _xtask(k, code, v):
        if code == SINK0:
            return ("E", 0, 0)  # constant-zero task: any v==0 task works
        if code == SINK1:
            return ("E", k + 1, v)
        return ("X", k, code, v)

    memo: dict = {}
    root = ("E", 0, gq.root)
    stack = [root]
    while stack:
        task = stack[-1]
        if task in memo:
            stack.pop()
            continue
        res = expand(task)
        if isinstance(res, float):
            memo[task] = res
            stack.pop()
            continue
        const, terms = res
        missing = [t for _, t in terms if t not in memo]
        if missing:
            stack.extend(missing)
            continue
        memo[task] = const + sum(coef * memo[t] for coef, t in terms)
        stack.pop()
    if stats is not None:
        stats.memo_entries = len(memo)
    return memo[root]


def mv_intersect(gq: Obdd, index: MvIndex,
                 stats: Optional[IntersectStats] = None) -> float:
    """P0(Q and not-W): top-down co-traversal guided by the query OBDD."""
    return _intersect(gq, index, cache_conscious=False, stats=stats)


def cc_mv_intersect(gq: Obdd, index: MvIndex,
                    stats: Optional[IntersectStats] = None) -> float:
    """Same value as `mv_intersect`; the scan enters each constituent at the
    query's first rank via entry tables, so expanded nodes stay inside the
    query's rank window."""
    return _intersect(gq, index, cache_conscious=True, stats=stats)


def rank_span(gq: Obdd) -> int:
    ranks = gq.var_ranks()
    if not ranks:
        return 0
    return max(ranks) - min(ranks) + 1


def point_probability(fact: Fact, index: MvIndex) -> float:
    """P0(X and not-W) for a single tuple variable.

    Uses the per-level reachability/probUnder sum when the variable's level
    cuts every path of its constituent; falls back to the general
    intersection otherwise.
    """
    r = index.order.rank_of(fact)
    p = index.probs[r]
    k = index._rank_to_k.get(r)
    if k is None:
        return p * index.p0_not_w
    c = index.constituents[k]
    if r not in c.cut_ranks:
        phi = U.Lineage((frozenset([fact]),))
        return mv_intersect(from_lineage(phi, index.order), index)
    total = 0.0
    for pos in c.levels[r]:
        total += c.reach[pos] * c.pu(c.hi[pos])
    others = 1.0
    for j, other in enumerate(index.constituents):
        if j != k:
            others *= other.prob_root
    return p * total * others


# ---------------------------------------------------------------------------
# Evaluator
# ---------------------------------------------------------------------------

class IndexEvaluator:
    """Evaluator for query_probability backed by a compiled index."""

    def __init__(self, index: MvIndex, instance: Instance, mode: str = "cc"):
        if mode not in ("mv", "cc"):
            raise MvdbError(f"unknown intersection mode {mode!r}")
        self.index = index
        self.instance = instance
        self.mode = mode
        self.p_not_w = index.p0_not_w
        self.last_timing: dict[str, int] = {}
        self.last_stats: Optional[IntersectStats] = None

    def prob_q_and_not_w(self, q: U.Ucq) -> float:
        t0 = time.perf_counter_ns()
        phi = U.lineage(q, self.instance)
        t1 = time.perf_counter_ns()
        gq = from_lineage(phi, self.index.order)
        t2 = time.perf_counter_ns()
        stats = IntersectStats()
        if self.mode == "cc":
            value = cc_mv_intersect(gq, self.index, stats)
        else:
            value = mv_intersect(gq, self.index, stats)
        t3 = time.perf_counter_ns()
        self.last_timing = {"lineage_us": (t1 - t0) // 1000,
                            "build_us": (t2 - t1) // 1000,
                            "intersect_us": (t3 - t2) // 1000}
        self.last_stats = stats
        return value


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def raw(self, b: bytes):
        self.parts.append(b)

    def u32(self, v: int):
        self.raw(struct.pack("<I", v))

    def i32(self, v: int):
        self.raw(struct.pack("<i", v))

    def f64(self, v: float):
        self.raw(struct.pack("<d", v))

    def text(self, s: str):
        b = s.encode()
        self.u32(len(b))
        self.raw(b)

    def value(self, v):
        if v is None:
            self.raw(b"\x02")
        elif isinstance(v, int):
            self.raw(b"\x00")
            self.raw(struct.pack("<q", v))
        elif isinstance(v, str):
            self.raw(b"\x01")
            self.text(v)
        else:
            raise IndexFormatError(f"unserializable constant {v!r}")

    def bytes(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise IndexFormatError("truncated index file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.raw(4))[0]

    def i32(self) -> int:
        return struct.unpack("<i", self.raw(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.raw(8))[0]

    def text(self) -> str:
        return self.raw(self.u32()).decode()

    def value(self):
        tag = self.raw(1)
        if tag == b"\x02":
            return None
        if tag == b"\x00":
            return struct.unpack("<q", self.raw(8))[0]
        if tag == b"\x01":
            return self.text()
        raise IndexFormatError(f"bad constant tag {tag!r}")


def serialize(index: MvIndex) -> bytes:
    """Little-endian binary form with a trailing checksum; byte-stable."""
    w = _Writer()
    w.raw(_MAGIC)
    w.u32(_VERSION)
    w.u32(len(index.pi.perms))
    for rel in sorted(index.pi.perms):
        w.text(rel)
        perm = index.pi.perms[rel]
        w.u32(len(perm))
        for p in perm:
            w.u32(p)
    w.u32(len(index.order))
    for fact, prob in zip(index.order.facts, index.probs):
        w.text(fact.relation)
        w.u32(len(fact.values))
        for v in fact.values:
            w.value(v)
        w.f64(prob)
    w.f64(index.p0_w)
    w.f64(index.p0_not_w)
    w.text(index.schema_digest)
    w.u32(len(index.constituents))
    for c in index.constituents:
        w.value(c.key)
        w.i32(c.root_code)
        w.u32(c.n)
        for arr, pack in ((c.rank, w.i32), (c.lo, w.i32), (c.hi, w.i32)):
            for x in arr:
                pack(x)
        for arr in (c.prob_under, c.reach):
            for x in arr:
                w.f64(x)
    inter_pairs = sorted(index._rank_to_k.items())
    w.u32(len(inter_pairs))
    for r, k in inter_pairs:
        w.u32(r)
        w.u32(k)
    for c in index.constituents:
        w.u32(len(c.levels))
        for r in sorted(c.levels):
            w.u32(r)
            w.u32(len(c.levels[r]))
            for pos in c.levels[r]:
                w.u32(pos)
    body = w.bytes()
    return body + struct.pack("<I", zlib.crc32(body))


def deserialize(buf: bytes) -> MvIndex:
    if len(buf) < 8:
        raise IndexFormatError("truncated index file")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise IndexFormatError("checksum mismatch")
    r = _Reader(body)
    if r.raw(4) != _MAGIC:
        raise IndexFormatError("not an index file")
    version = r.u32()
    if version != _VERSION:
        raise IndexFormatError(f"unsupported format version {version}")
    perms = {}
    for _ in range(r.u32()):
        rel = r.text()
        perms[rel] = tuple(r.u32() for _ in range(r.u32()))
    pi = PermutationSet(perms)
    facts, probs = [], []
    for _ in range(r.u32()):
        rel = r.text()
        values = tuple(r.value() for _ in range(r.u32()))
        facts.append(Fact(rel, values))
        probs.append(r.f64())
    order = VariableOrder(facts)
    p0_w = r.f64()
    p0_not_w = r.f64()
    digest = r.text()
    constituents = []
    for _ in range(r.u32()):
        key = r.value()
        root_code = r.i32()
        n = r.u32()
        rank = [r.i32() for _ in range(n)]
        lo = [r.i32() for _ in range(n)]
        hi = [r.i32() for _ in range(n)]
        pu = [r.f64() for _ in range(n)]
        reach = [r.f64() for _ in range(n)]
        c = Constituent(key, root_code, rank, lo, hi, pu, reach)
        c.derive(probs)
        constituents.append(c)
    for _ in range(r.u32()):  # inter index entries (derivable; format keeps them)
        r.u32()
        r.u32()
    for c in constituents:  # intra index sections, likewise derivable
        for _ in range(r.u32()):
            r.u32()
            for _ in range(r.u32()):
                r.u32()
    if r.pos != len(body):
        raise IndexFormatError("trailing bytes after index payload")
    index = MvIndex(constituents, order, probs, pi, digest)
    if abs(index.p0_w - p0_w) > 1e-9 or abs(index.p0_not_w - p0_not_w) > 1e-9:
        raise IndexFormatError("cached probabilities disagree with payload")
    return index


def save_index(index: MvIndex, path):
    from pathlib import Path
    Path(path).write_bytes(serialize(index))


def load_index(path) -> MvIndex:
    from pathlib import Path
    return deserialize(Path(path).read_bytes())
