#!/usr/bin/env python3
"""Generate the synthetic molecule fixtures used by the test suites.

Molecules are assembled as graphs from ring and chain fragments, written out
as SMILES by a DFS writer, and paired with a synthetic regression target
(an additive logP-style score with a few structural terms). A handful of
well-known drug-like molecules are mixed into the large corpus.

Outputs (relative to the repository root):
  crates/core/tests/fixtures/corpus_1000.jsonl   header + 1100 records
  crates/core/tests/fixtures/zinc_128.jsonl      header + 128 records
  crates/core/tests/fixtures/tox_small.jsonl     header + 48 records, 3 tasks
  crates/core/tests/fixtures/parser_oracle.jsonl expected atom/bond counts

Expected counts come from the generator's own graph and are cross-checked
with networkx (cycle rank, connectivity) before being written.

Usage: python3 tools/gen_fixtures.py
"""

import json
import os
import random

import networkx as nx

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
OUT = os.path.join(ROOT, "crates", "core", "tests", "fixtures")

VALENCE = {"C": 4, "N": 3, "O": 2, "S": 2, "F": 1, "Cl": 1, "Br": 1, "B": 3, "P": 3, "I": 1}
CONTRIB = {
    ("C", False): 0.35, ("C", True): 0.30, ("N", False): -0.80, ("N", True): -0.50,
    ("O", False): -0.60, ("O", True): -0.20, ("S", False): 0.40, ("S", True): 0.55,
    ("F", False): 0.20, ("Cl", False): 0.65, ("Br", False): 0.85, ("I", False): 1.05,
    ("B", False): -0.30, ("P", False): 0.10,
}

# bond orders: 1 single, 2 double, 3 triple, 4 aromatic


class Mol:
    def __init__(self):
        self.atoms = []  # (element, aromatic)
        self.bonds = {}  # (u, v) u < v -> order

    def add_atom(self, el, arom=False):
        self.atoms.append((el, arom))
        return len(self.atoms) - 1

    def add_bond(self, u, v, order):
        assert u != v
        key = (min(u, v), max(u, v))
        assert key not in self.bonds
        self.bonds[key] = order

    def used_valence(self, a):
        # aromatic bonds count as one; aromatic C and N give up one valence
        # to the pi system
        el, arom = self.atoms[a]
        total = 1 if arom and el in ("C", "N") else 0
        for (u, v), o in self.bonds.items():
            if a in (u, v):
                total += 1 if o == 4 else o
        return total

    def free(self, a):
        el, _ = self.atoms[a]
        return VALENCE[el] - self.used_valence(a)

    def nx(self):
        g = nx.Graph()
        g.add_nodes_from(range(len(self.atoms)))
        g.add_edges_from(self.bonds.keys())
        return g


def add_ring(m, rng, size, aromatic, hetero):
    idx = []
    for i in range(size):
        el = "C"
        if hetero and i == 1:
            el = hetero
        idx.append(m.add_atom(el, aromatic))
    for i in range(size):
        m.add_bond(idx[i], idx[(i + 1) % size], 4 if aromatic else 1)
    return idx


def add_fused(m, rng, aromatic):
    # two rings sharing an edge (naphthalene / decalin / indane style)
    a = add_ring(m, rng, 6, aromatic, None)
    size = rng.choice([5, 6]) if not aromatic else 6
    extra = [m.add_atom("C", aromatic) for _ in range(size - 2)]
    chain = [a[0]] + extra + [a[1]]
    for i in range(len(chain) - 1):
        m.add_bond(chain[i], chain[i + 1], 4 if aromatic else 1)
    return a + extra


def add_bridged(m, rng):
    # norbornane skeleton
    c = [m.add_atom("C") for _ in range(7)]
    for u, v in [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (0, 6), (6, 3)]:
        m.add_bond(c[u], c[v], 1)
    return c


def fragment(m, rng):
    r = rng.random()
    if r < 0.30:
        return add_ring(m, rng, 6, True, rng.choice([None, None, None, "N"]))
    if r < 0.40:
        return add_ring(m, rng, 5, True, rng.choice(["S", "O"]))
    if r < 0.55:
        return add_ring(m, rng, rng.choice([5, 6, 6, 7]), False, rng.choice([None, None, "N", "O"]))
    if r < 0.63:
        return add_fused(m, rng, rng.random() < 0.5)
    if r < 0.66:
        return add_bridged(m, rng)
    # chain
    n = rng.randint(1, 4)
    idx = []
    for i in range(n):
        el = rng.choice(["C", "C", "C", "N", "O", "S"]) if i > 0 else "C"
        a = m.add_atom(el)
        if idx:
            m.add_bond(idx[-1], a, 1)
        idx.append(a)
    return idx


def attach_point(m, rng, atoms):
    cands = [a for a in atoms if m.free(a) >= 1]
    return rng.choice(cands) if cands else None


def decorate(m, rng):
    n = len(m.atoms)
    for a in range(n):
        el, arom = m.atoms[a]
        if el != "C" or rng.random() > 0.18:
            continue
        if arom:
            if m.free(a) >= 1:
                b = m.add_atom(rng.choice(["F", "Cl", "Br", "O", "N", "C"]))
                m.add_bond(a, b, 1)
            continue
        f = m.free(a)
        if f >= 2 and rng.random() < 0.5:
            b = m.add_atom(rng.choice(["O", "O", "S", "N"]))
            if m.free(b) >= 2:
                m.add_bond(a, b, 2)
            else:
                m.add_bond(a, b, 1)
        elif f >= 3 and rng.random() < 0.15:
            b = m.add_atom("N")
            m.add_bond(a, b, 3)
        elif f >= 1:
            b = m.add_atom(rng.choice(["F", "Cl", "C", "O", "N", "Br", "I"]))
            m.add_bond(a, b, 1)


def random_molecule(rng, target_atoms):
    m = Mol()
    atoms = fragment(m, rng)
    while len(m.atoms) < target_atoms:
        start = len(m.atoms)
        p = attach_point(m, rng, list(range(start)))
        if p is None:
            break
        # optional linker
        if rng.random() < 0.5:
            ln = rng.randint(1, 4)
            prev = p
            for i in range(ln):
                el = rng.choice(["C", "C", "N", "O"]) if 0 < i < ln - 1 else "C"
                a = m.add_atom(el)
                m.add_bond(prev, a, 1)
                prev = a
            p = prev
        new = fragment(m, rng)
        q = attach_point(m, rng, new)
        if q is None or m.free(p) < 1:
            break
        m.add_bond(p, q, 1)
    decorate(m, rng)
    return m


def to_smiles(m):
    g = m.nx()
    n = len(m.atoms)
    adj = {a: sorted(g.neighbors(a)) for a in range(n)}
    visited = [False] * n
    tree_parent = {}
    order = []
    back_edges = []

    def dfs(a, parent):
        visited[a] = True
        order.append(a)
        for b in adj[a]:
            if b == parent:
                continue
            if not visited[b]:
                tree_parent[b] = a
                dfs(b, a)
            elif (min(a, b), max(a, b)) not in {(min(x, y), max(x, y)) for x, y in back_edges}:
                back_edges.append((b, a))  # b opened earlier, a closes

    import sys
    sys.setrecursionlimit(10000)
    dfs(0, -1)
    assert all(visited), "generator produced disconnected molecule"

    pos = {a: i for i, a in enumerate(order)}
    # ring closure digits: opened at the earlier atom, closed at the later one
    opens = {a: [] for a in range(n)}
    closes = {a: [] for a in range(n)}
    for x, y in back_edges:
        if pos[x] > pos[y]:
            x, y = y, x
        opens[x].append(y)
        closes[y].append(x)

    free_digits = list(range(1, 100))
    digit_of = {}

    def bond_sym(u, v):
        o = m.bonds[(min(u, v), max(u, v))]
        au, av = m.atoms[u][1], m.atoms[v][1]
        if o == 1:
            return "-" if (au and av) else ""
        if o == 2:
            return "="
        if o == 3:
            return "#"
        return ""

    def atom_sym(a):
        el, arom = m.atoms[a]
        return el.lower() if arom else el

    def ring_label(d):
        return str(d) if d < 10 else "%%%02d" % d

    children = {a: [] for a in range(n)}
    for b, p in tree_parent.items():
        children[p].append(b)
    for a in children:
        children[a].sort(key=lambda x: pos[x])

    out = []

    def write(a):
        out.append(atom_sym(a))
        for other in sorted(closes[a], key=lambda x: pos[x]):
            d = digit_of.pop((other, a))
            out.append(bond_sym(other, a) + ring_label(d))
            free_digits.append(d)
            free_digits.sort()
        for other in sorted(opens[a], key=lambda x: pos[x]):
            d = free_digits.pop(0)
            digit_of[(a, other)] = d
            out.append(bond_sym(a, other) + ring_label(d))
        kids = children[a]
        for i, c in enumerate(kids):
            last = i == len(kids) - 1
            if not last:
                out.append("(")
            out.append(bond_sym(a, c))
            write(c)
            if not last:
                out.append(")")

    write(0)
    return "".join(out)


def target_of(m):
    g = m.nx()
    score = sum(CONTRIB[(el, arom and el in ("C", "N", "O", "S"))] for el, arom in m.atoms)
    rings = g.number_of_edges() - g.number_of_nodes() + 1
    score -= 0.25 * rings
    score += 0.1 * sum(1 for o in m.bonds.values() if o == 2)
    return round(score, 4)


def check(m):
    g = m.nx()
    assert nx.is_connected(g)
    assert all(m.free(a) >= -0.01 for a in range(len(m.atoms)))


KNOWN = [
    ("aspirin", "CC(=O)Oc1ccccc1C(=O)O"),
    ("ibuprofen", "CC(C)Cc1ccc(cc1)C(C)C(=O)O"),
    ("paracetamol", "CC(=O)Nc1ccc(O)cc1"),
    ("naphthalene", "c1ccc2ccccc2c1"),
    ("adamantane", "C1C2CC3CC1CC(C2)C3"),
    ("norbornane", "C1CC2CCC1C2"),
    ("decalin", "C1CCC2CCCCC2C1"),
    ("bicyclopentyl", "C1CCC(C1)C1CCCC1"),
    ("nicotine", "CN1CCCC1c1cccnc1"),
    ("caffeine", "Cn1cnc2c1c(=O)n(C)c(=O)n2C"),
    ("neopentane", "CC(C)(C)C"),
    ("biphenyl", "c1ccc(cc1)-c1ccccc1"),
    ("spiro", "C1CCC2(CC1)CCCC2"),
    ("anthracene", "c1ccc2cc3ccccc3cc2c1"),
    ("phenanthrene", "c1ccc2c(c1)ccc1ccccc12"),
    ("pyrene", "c1cc2ccc3cccc4ccc(c1)c2c34"),
    ("cubane", "C12C3C4C1C5C2C3C45"),
    ("acetonitrile", "CC#N"),
    ("benzoic_acid", "OC(=O)c1ccccc1"),
    ("thiophene", "c1ccsc1"),
    ("chlorobenzene", "Clc1ccccc1"),
    ("bromoethane", "CCBr"),
    ("ethanol", "CCO"),
    ("cyclohexanone", "O=C1CCCCC1"),
    ("diazepam_core", "CN1C(=O)CN=C(c2ccccc2)c2cc(Cl)ccc12"),
    ("steroid_core", "C1CCC2C(C1)CCC1C2CCC2CCCC12"),
    ("long_chain", "CCCCCCCCCCCCCCCCCC(=O)O"),
    ("triazine_iodo", "Ic1ncncn1"),
    ("borane_ester", "OB(O)c1ccccc1"),
    ("phosphine", "CP(C)C"),
]


def header(tasks, task_type):
    return {"tasks": tasks, "task_type": task_type}


def write_jsonl(path, head, rows):
    with open(path, "w") as f:
        f.write(json.dumps(head) + "\n")
        for r in rows:
            f.write(json.dumps(r) + "\n")


def main():
    rng = random.Random(20240517)
    os.makedirs(OUT, exist_ok=True)

    mols = []
    seen = set()
    while len(mols) < 1100:
        size = int(rng.choice([8, 12, 16, 20, 23, 26, 30, 34, 38, 44]) * (0.8 + 0.4 * rng.random()))
        m = random_molecule(rng, size)
        check(m)
        s = to_smiles(m)
        if s in seen:
            continue
        seen.add(s)
        mols.append((s, m))

    oracle = []
    corpus = []
    for i, (s, m) in enumerate(mols):
        g = m.nx()
        corpus.append({"id": "gen%04d" % i, "smiles": s, "targets": [target_of(m)]})
        oracle.append({
            "smiles": s,
            "atoms": g.number_of_nodes(),
            "bonds": g.number_of_edges(),
            "aromatic_bonds": sum(1 for o in m.bonds.values() if o == 4),
            "double_bonds": sum(1 for o in m.bonds.values() if o == 2),
            "triple_bonds": sum(1 for o in m.bonds.values() if o == 3),
            "cycle_rank": g.number_of_edges() - g.number_of_nodes() + 1,
            "diameter": nx.diameter(g),
        })
    for name, s in KNOWN:
        corpus.append({"id": name, "smiles": s, "targets": [0.0]})

    # a few explicit-graph lines: cycles and paths by node/edge arrays
    for k in range(3, 9):
        edges = [[i, (i + 1) % k, 0] for i in range(k)]
        edges = [[min(u, v), max(u, v), b] for u, v, b in edges]
        corpus.append({"id": "cycle%d" % k, "nodes": [6] * k, "edges": edges, "targets": [float(k)]})
        corpus.append({"id": "path%d" % k, "nodes": [6] * k,
                       "edges": [[i, i + 1, 0] for i in range(k - 1)], "targets": [float(-k)]})

    write_jsonl(os.path.join(OUT, "corpus_1000.jsonl"), header(1, "regression"), corpus)
    with open(os.path.join(OUT, "parser_oracle.jsonl"), "w") as f:
        for o in oracle:
            f.write(json.dumps(o) + "\n")

    # ZINC-style regression subset: drug-sized molecules with distinct targets
    zrng = random.Random(7)
    zinc = []
    zseen = set()
    while len(zinc) < 128:
        m = random_molecule(zrng, zrng.randint(14, 30))
        check(m)
        s = to_smiles(m)
        if s in zseen:
            continue
        zseen.add(s)
        zinc.append({"id": "zinc%03d" % len(zinc), "smiles": s, "targets": [target_of(m)]})
    write_jsonl(os.path.join(OUT, "zinc_128.jsonl"), header(1, "regression"), zinc)

    # small multi-task classification set with missing labels
    trng = random.Random(11)
    tox = []
    while len(tox) < 48:
        m = random_molecule(trng, trng.randint(8, 22))
        check(m)
        s = to_smiles(m)
        els = [el for el, _ in m.atoms]
        t0 = 1 if "N" in els else 0
        t1 = 1 if any(e in ("Cl", "Br", "F", "I") for e in els) else 0
        t2 = None if trng.random() < 0.25 else (1 if any(a for _, a in m.atoms) else 0)
        tox.append({"id": "tox%02d" % len(tox), "smiles": s, "targets": [t0, t1, t2]})
    write_jsonl(os.path.join(OUT, "tox_small.jsonl"), header(3, "classification"), tox)

    print("corpus", len(corpus), "zinc", len(zinc), "tox", len(tox))
    print("max diameter", max(o["diameter"] for o in oracle))


if __name__ == "__main__":
    main()
