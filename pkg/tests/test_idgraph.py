import json

import numpy as np
import pytest

from uvrepose.errors import InputError
from uvrepose.idgraph import (
    EmbeddingRecord,
    build_graph,
    connected_components,
    cosine_sim,
    filter_poses,
    main,
    proxy_embedding,
    read_embeddings,
    similarity_report,
    write_embeddings,
)


def pair_with_similarity(s, dim=4):
    a = np.zeros(dim)
    a[0] = 1.0
    b = np.zeros(dim)
    b[0], b[1] = s, np.sqrt(1 - s * s)
    return a, b


def rec(i, v, group="g", yaw=0.0, pitch=0.0):
    return EmbeddingRecord(str(i), v, group, yaw, pitch)


def test_filter_poses():
    v = np.array([1.0, 0.0])
    kept = filter_poses([rec("a", v, yaw=44.9), rec("b", v, yaw=46.0), rec("c", v, pitch=-50.0)])
    assert [r.id for r in kept] == ["a"]
    assert filter_poses([]) == []


def test_embedding_norm_is_checked():
    with pytest.raises(InputError):
        EmbeddingRecord("x", np.array([1.0, 1.0]))


def test_cosine_examples():
    a = np.array([1.0, 2.0, -1.0])
    assert cosine_sim(a, a) == pytest.approx(1.0)
    assert cosine_sim(a, -a) == pytest.approx(-1.0)
    assert cosine_sim(np.array([1.0, 0.0]), np.array([0.0, 3.0])) == 0.0
    with pytest.raises(InputError):
        cosine_sim(a, np.zeros(3))


@pytest.mark.parametrize(
    "sim,same_group,tags",
    [(0.7, False, {"visual"}), (0.5, True, {"structural"}), (0.3, True, None), (0.7, True, {"visual", "structural"})],
)
def test_edge_rules(sim, same_group, tags):
    a, b = pair_with_similarity(sim)
    graph = build_graph([rec(0, a, "x"), rec(1, b, "x" if same_group else "y")])
    if tags is None:
        assert not graph.edges
    else:
        assert graph.edges[(0, 1)]["tags"] == tags
        assert graph.has_edge(1, 0) and graph.has_edge(0, 1)


def test_thresholds_are_strict():
    a, b = pair_with_similarity(0.6)
    b = b / np.linalg.norm(b)
    graph = build_graph([rec(0, a, "x"), rec(1, b, "y")], visual_thresh=float(a @ b))
    assert not graph.edges


def test_components_examples():
    e = np.eye(3)
    assert connected_components(build_graph([rec(i, e[i]) for i in range(3)])) == [["0"], ["1"], ["2"]]
    a, b = pair_with_similarity(0.9, 3)
    c = np.array([0.3, 0.9, np.sqrt(1 - 0.9)])
    c = c / np.linalg.norm(c)
    # a-b and b-c above 0.6, a-c below: still one cluster
    assert cosine_sim(a, c) < 0.6 and cosine_sim(b, c) > 0.6
    assert connected_components(build_graph([rec("a", a, "1"), rec("b", b, "2"), rec("c", c, "3")])) == [["a", "b", "c"]]


def test_components_partition_the_nodes():
    rng = np.random.default_rng(0)
    vecs = rng.standard_normal((60, 8))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    records = [rec(f"n{i:02d}", v, f"g{i % 4}") for i, v in enumerate(vecs)]
    clusters = connected_components(build_graph(records, 0.5, 0.3))
    flat = [x for c in clusters for x in c]
    assert sorted(flat) == sorted(r.id for r in records) and len(flat) == len(set(flat))
    assert [c[0] for c in clusters] == sorted(c[0] for c in clusters)
    counts = [len(connected_components(build_graph(records, t, 0.3))) for t in (0.0, 0.3, 0.5, 0.7, 0.95)]
    assert counts == sorted(counts)


def test_similarity_report_examples():
    rng = np.random.default_rng(1)
    refs = rng.standard_normal((20, 6))
    report = similarity_report(refs[:5], refs)
    np.testing.assert_allclose(report.maxima, 1.0)
    e = np.eye(4)
    assert similarity_report(e[:1], e[1:]).maxima[0] == 0.0
    with pytest.raises(InputError):
        similarity_report(e[:1], np.zeros((0, 4)))
    shuffled = similarity_report(refs[:5], refs[rng.permutation(20)])
    assert np.array_equal(shuffled.maxima, report.maxima)


def test_cdf_agrees_with_direct_counting():
    rng = np.random.default_rng(2)
    report = similarity_report(rng.standard_normal((200, 8)), rng.standard_normal((50, 8)))
    for t in np.linspace(-0.2, 0.9, 12):
        assert report.fraction_above(t) == pytest.approx(np.mean(report.maxima > t))
    edges, counts = report.histogram()
    assert np.allclose(np.diff(edges), 0.02) and counts.sum() == 200
    five = report.five_number()
    assert five["min"] <= five["median"] <= five["max"]


def test_proxy_embedding_is_unit_norm():
    rng = np.random.default_rng(3)
    v = proxy_embedding(rng.random((40, 40, 3)))
    assert v.shape == (256,) and np.linalg.norm(v) == pytest.approx(1.0)
    flat = proxy_embedding(np.full((40, 40), 0.5))
    assert np.linalg.norm(flat) == pytest.approx(1.0)


def test_csv_round_trip_and_cli(tmp_path, capsys):
    rng = np.random.default_rng(4)
    vecs = rng.standard_normal((6, 5))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    records = [rec(f"r{i}", v, f"g{i % 2}", yaw=10.0 * i) for i, v in enumerate(vecs)]
    path = tmp_path / "emb.csv"
    write_embeddings(path, records)
    back = read_embeddings(path)
    assert [r.id for r in back] == [r.id for r in records]
    assert np.array_equal(np.array([r.vector for r in back]), vecs)
    out = tmp_path / "clusters.json"
    assert main(["cluster", "--embeddings", str(path), "--out", str(out)]) == 0
    payload = json.loads(out.read_text())
    assert payload["nodes"] == 5  # yaw 50 is filtered out
    assert main(["report", "--queries", str(path), "--references", str(path), "--out", str(tmp_path / "rep")]) == 0
    summary = json.loads((tmp_path / "rep" / "similarity_summary.json").read_text())
    assert summary["five_number"]["min"] == pytest.approx(1.0)
    bad = tmp_path / "bad.csv"
    bad.write_text("name,group\nx,y\n")
    with pytest.raises(InputError):
        read_embeddings(bad)
