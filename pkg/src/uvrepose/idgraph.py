"""Identity clustering over face embeddings and cross-set similarity reports."""

from __future__ import annotations

import csv
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError

HIST_BIN = 0.02


@dataclass
class EmbeddingRecord:
    id: str
    vector: np.ndarray
    group: str = ""
    yaw: float = 0.0
    pitch: float = 0.0

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=float)
        n = np.linalg.norm(self.vector)
        if not (1 - 1e-4 <= n <= 1 + 1e-4):
            raise InputError(f"embedding {self.id} has norm {n:.6f}, expected unit norm")


@dataclass
class IdentityGraph:
    nodes: list
    # (i, j) with i < j -> {"tags": {"visual", "structural"}, "similarity": s}
    edges: dict = field(default_factory=dict)

    def has_edge(self, a, b):
        return (min(a, b), max(a, b)) in self.edges

    def neighbors(self, a):
        out = set()
        for i, j in self.edges:
            if i == a:
                out.add(j)
            elif j == a:
                out.add(i)
        return out


def filter_poses(records, max_angle=45.0):
    return [r for r in records if abs(r.yaw) <= max_angle and abs(r.pitch) <= max_angle]


def cosine_sim(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise InputError(f"embedding dimensions differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InputError("cosine similarity of a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def similarity_matrix(vectors):
    v = np.asarray(vectors, dtype=float)
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    return np.clip(v @ v.T, -1.0, 1.0)


def build_graph(records, visual_thresh=0.6, struct_thresh=0.4):
    """Visual edges above `visual_thresh`; structural edges within a group above `struct_thresh`.

    Both comparisons are strict.
    """
    graph = IdentityGraph([r.id for r in records])
    if len(records) < 2:
        return graph
    sim = similarity_matrix([r.vector for r in records])
    groups = np.array([r.group for r in records])
    iu, ju = np.triu_indices(len(records), k=1)
    s = sim[iu, ju]
    visual = s > visual_thresh
    structural = (groups[iu] == groups[ju]) & (s > struct_thresh)
    for i, j, sv, vis, st in zip(iu, ju, s, visual, structural):
        if vis or st:
            tags = set()
            if vis:
                tags.add("visual")
            if st:
                tags.add("structural")
            graph.edges[(int(i), int(j))] = {"tags": tags, "similarity": float(sv)}
    return graph


class UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1


def connected_components(graph):
    """Clusters of node ids, each sorted, ordered by smallest member id."""
    uf = UnionFind(len(graph.nodes))
    for i, j in graph.edges:
        uf.union(i, j)
    clusters = {}
    for i, node in enumerate(graph.nodes):
        clusters.setdefault(uf.find(i), []).append(node)
    return sorted((sorted(c) for c in clusters.values()), key=lambda c: c[0])


@dataclass
class SimilarityReport:
    maxima: np.ndarray
    query_ids: list

    @property
    def sorted(self):
        return np.sort(self.maxima)

    def histogram(self, bin_width=HIST_BIN):
        edges = np.round(np.arange(-1.0, 1.0 + bin_width / 2, bin_width), 10)
        counts, _ = np.histogram(self.maxima, bins=edges)
        return edges, counts

    def five_number(self):
        q = np.quantile(self.maxima, [0.0, 0.25, 0.5, 0.75, 1.0])
        return dict(zip(("min", "q1", "median", "q3", "max"), map(float, q)))

    def cdf(self, x):
        """Fraction of queries with maximum similarity <= x."""
        return np.searchsorted(self.sorted, x, side="right") / len(self.maxima)

    def fraction_above(self, threshold):
        return float(1.0 - self.cdf(threshold))

    def summary(self):
        return {
            "queries": len(self.maxima),
            "mean": float(self.maxima.mean()),
            "five_number": self.five_number(),
            "fraction_above": {f"{t:.2f}": self.fraction_above(t) for t in (0.2, 0.3, 0.4, 0.5, 0.6)},
        }


def similarity_report(queries, references, query_ids=None):
    """Per query, the best cosine similarity against any reference embedding."""
    q = np.atleast_2d(np.asarray(queries, dtype=float))
    r = np.atleast_2d(np.asarray(references, dtype=float))
    if r.size == 0 or len(r) == 0:
        raise InputError("reference set is empty")
    if q.shape[1] != r.shape[1]:
        raise InputError(f"query dimension {q.shape[1]} != reference dimension {r.shape[1]}")
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    rn = r / np.linalg.norm(r, axis=1, keepdims=True)
    maxima = np.clip(qn @ rn.T, -1.0, 1.0).max(axis=1)
    ids = list(query_ids) if query_ids is not None else [str(i) for i in range(len(q))]
    return SimilarityReport(maxima, ids)


def proxy_embedding(face_crop, size=16):
    """Model-free stand-in for a face embedding: centred, unit-norm grayscale thumbnail."""
    from .imaging import resample_area

    gray = np.asarray(face_crop, dtype=float)
    if gray.ndim == 3:
        gray = gray.mean(axis=2)
    v = resample_area(gray, size).ravel()
    v = v - v.mean()
    n = np.linalg.norm(v)
    if n == 0:
        v = np.zeros_like(v)
        v[0] = 1.0
        return v
    return v / n


# --- file formats ---------------------------------------------------------


def read_embeddings(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:4] != ["id", "group", "yaw", "pitch"] or not all(
            h == f"e{i}" for i, h in enumerate(header[4:])
        ):
            raise InputError(f"{path}: expected header id,group,yaw,pitch,e0..e{{D-1}}")
        records = []
        for row in reader:
            records.append(
                EmbeddingRecord(row[0], np.array(row[4:], dtype=float), row[1], float(row[2]), float(row[3]))
            )
    return records


def write_embeddings(path, records):
    dim = len(records[0].vector) if records else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "group", "yaw", "pitch"] + [f"e{i}" for i in range(dim)])
        for r in records:
            w.writerow([r.id, r.group, repr(float(r.yaw)), repr(float(r.pitch))] + [repr(float(x)) for x in r.vector])


def write_report(report, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "similarity_summary.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True))
    edges, counts = report.histogram()
    with open(out_dir / "similarity_histogram.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count", "cdf"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([f"{lo:.2f}", f"{hi:.2f}", int(c), repr(float(report.cdf(hi)))])
    with open(out_dir / "similarity_maxima.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "max_similarity"])
        for qid, m in zip(report.query_ids, report.maxima):
            w.writerow([qid, repr(float(m))])


def main(argv=None):
    import argparse

    parser = argparse.ArgumentParser(prog="idgraph", description="Identity clustering over face embeddings")
    sub = parser.add_subparsers(dest="command", required=True)
    c = sub.add_parser("cluster", help="connected components of the dual-criteria identity graph")
    c.add_argument("--embeddings", required=True)
    c.add_argument("--visual-thresh", type=float, default=0.6)
    c.add_argument("--struct-thresh", type=float, default=0.4)
    c.add_argument("--max-angle", type=float, default=45.0)
    c.add_argument("--out", default=None, help="write clusters JSON here instead of stdout")
    r = sub.add_parser("report", help="max similarity of each query against a reference set")
    r.add_argument("--queries", required=True)
    r.add_argument("--references", required=True)
    r.add_argument("--out", default="report")
    args = parser.parse_args(argv)

    if args.command == "cluster":
        records = filter_poses(read_embeddings(args.embeddings), args.max_angle)
        graph = build_graph(records, args.visual_thresh, args.struct_thresh)
        clusters = connected_components(graph)
        payload = json.dumps(
            {"nodes": len(records), "edges": len(graph.edges), "clusters": clusters}, indent=2
        )
        if args.out:
            Path(args.out).write_text(payload)
        else:
            print(payload)
        print(f"{len(clusters)} clusters over {len(records)} embeddings", file=sys.stderr)
    else:
        queries = read_embeddings(args.queries)
        refs = read_embeddings(args.references)
        report = similarity_report(
            [q.vector for q in queries], [x.vector for x in refs], [q.id for q in queries]
        )
        write_report(report, args.out)
        print(json.dumps(report.summary(), indent=2, sort_keys=True))
    return 0
