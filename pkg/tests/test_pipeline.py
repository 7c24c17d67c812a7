import csv
import dataclasses
import json

import numpy as np
import pytest
from PIL import Image

from uvrepose.body import build_body
from uvrepose.cli import main
from uvrepose.conditioning import make_condition_paired, make_condition_single
from uvrepose.config import config_from_dict, load_config
from uvrepose.data import (
    DataConfig,
    gen_dataset,
    load_dataset,
    load_manifest,
    read_obj,
    stream,
    write_dataset,
    write_obj,
)
from uvrepose.donor import iou
from uvrepose.errors import ConfigError, InputError
from uvrepose.pipeline import (
    METRIC_COLUMNS,
    ablation_patch_vs_donor,
    branch_schedule,
    eval_condition,
    leakage_probe,
    prepare,
    probe_samples,
    train,
)
from uvrepose.raster import rasterize_uv

TINY = {
    "steps": 8,
    "resolution": 16,
    "width": 8,
    "sampler": {"steps": 3},
    "data": {"paired_identities": 2, "unpaired_identities": 2, "poses_per_identity": 2, "eval_poses": 1},
}


@pytest.fixture(scope="module")
def cfg():
    return config_from_dict(TINY)


@pytest.fixture(scope="module")
def ds(cfg):
    return gen_dataset(cfg.data, cfg.seed)


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# --- data generation ---------------------------------------------------------------


def test_small_dataset_is_byte_reproducible(tmp_path):
    config = DataConfig(paired_identities=2, unpaired_identities=0, poses_per_identity=2, eval_poses=0)
    write_dataset(gen_dataset(config, 3), tmp_path / "a")
    write_dataset(gen_dataset(config, 3), tmp_path / "b")
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert len([k for k in a if k.startswith("images/")]) == 4
    assert a == b
    write_dataset(gen_dataset(config, 4), tmp_path / "c")
    assert tree_bytes(tmp_path / "c") != a


def test_manifest_invariants(ds):
    for sid in ds.paired:
        s, p = ds.samples[sid], ds.samples[ds.samples[sid].partner]
        assert p.identity == s.identity and p.id != s.id
        assert p.pose != s.pose and p.bucket != s.bucket
    for s in ds.samples.values():
        if s.donors is None:
            continue
        for did, score in s.donors.donors:
            assert did in ds.samples and did != s.id
            assert 0.4 <= iou(s.mask, ds.samples[did].mask) <= 0.8
    held_out = {t for _, t in ds.eval}
    assert not held_out & set(ds.paired) and not held_out & set(ds.unpaired)
    assert all(ds.samples[t].split == "eval" for t in held_out)
    assert {ds.samples[s].identity for s in ds.unpaired} == {"u000", "u001"}


def test_written_dataset_loads_back(ds, tmp_path):
    write_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert back.paired == ds.paired and back.unpaired == ds.unpaired and back.eval == ds.eval
    for sid, s in ds.samples.items():
        b = back.samples[sid]
        assert np.array_equal(b.image, s.image) and np.array_equal(b.mask, s.mask)
        assert b.pose == s.pose and b.partner == s.partner
        np.testing.assert_allclose(b.mesh.vertices, s.mesh.vertices)
    mask_png = np.unique(np.asarray(Image.open(tmp_path / "masks" / f"{sid}.png")))
    assert set(mask_png.tolist()) <= {0, 255}


def test_manifest_closure_is_checked(ds, tmp_path):
    write_dataset(ds, tmp_path)
    load_manifest(tmp_path / "paired.json")
    (tmp_path / "images" / f"{ds.paired[0]}.png").unlink()
    with pytest.raises(InputError):
        load_manifest(tmp_path / "paired.json")


def test_obj_round_trip(tmp_path):
    rest = build_body()
    write_obj(tmp_path / "body.obj", rest)
    verts, uvs, faces, parts = read_obj(tmp_path / "body.obj")
    np.testing.assert_allclose(verts, rest.vertices, atol=1e-9)
    np.testing.assert_allclose(uvs, rest.uv, atol=1e-9)
    assert np.array_equal(faces, rest.faces) and np.array_equal(parts, rest.face_part)


def test_named_streams():
    assert stream(1, "a").integers(1 << 30) == stream(1, "a").integers(1 << 30)
    assert stream(1, "a").integers(1 << 30) != stream(1, "b").integers(1 << 30)
    assert stream(1, "a").integers(1 << 30) != stream(2, "a").integers(1 << 30)


def test_data_config_validation():
    with pytest.raises(ConfigError):
        gen_dataset(DataConfig(poses_per_identity=1, paired_identities=1))


# --- config ----------------------------------------------------------------------------


def test_config_is_strict(tmp_path):
    with pytest.raises(ConfigError):
        config_from_dict({"stepz": 10})
    with pytest.raises(ConfigError):
        config_from_dict({"data": {"identities": 3}})
    with pytest.raises(ConfigError):
        config_from_dict({"mix": "both"})
    with pytest.raises(ConfigError):
        config_from_dict({"dropout": {"p_all": 0.6, "p_tex": 0.6}})
    with pytest.raises(ConfigError):
        config_from_dict({"raster": {"tau_dist": 2.0}})
    path = tmp_path / "c.json"
    path.write_text(json.dumps(TINY))
    loaded = load_config(path)
    assert loaded.steps == 8 and loaded.data.paired_identities == 2
    assert config_from_dict(json.loads(json.dumps(loaded.to_json()))) == loaded
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)


# --- conditions ----------------------------------------------------------------------


def test_paired_condition(ds):
    ref, target = (ds.samples[s].view() for s in ds.paired[:2])
    cond, x0 = make_condition_paired(ref, target)
    assert cond.present == (True, True, True)
    assert np.array_equal(cond.texture.pixels, rasterize_uv(ref.mesh, ref.camera, ref.image).pixels)
    assert x0 is target.image
    other, _ = make_condition_paired(ref, ref)
    assert not np.array_equal(cond.pose_render, other.pose_render)


def test_single_condition(ds):
    s = ds.samples[ds.unpaired[0]]
    donor = ds.samples[s.donors.ids[0]].mask
    cond, x0 = make_condition_single(s.view(), donor)
    full = rasterize_uv(s.mesh, s.camera, s.image)
    assert cond.present == (True, True, False) and x0 is s.image
    assert not np.any(cond.texture.mask & ~full.mask) and not np.any(cond.texture.mask & ~donor)
    same, _ = make_condition_single(s.view(), np.ones_like(donor))
    assert np.array_equal(same.texture.pixels, full.pixels)
    patched, _ = make_condition_single(s.view(), None, rng=np.random.default_rng(0))
    assert patched.texture.mask.sum() < full.mask.sum()


# --- training -------------------------------------------------------------------------------


def test_branch_schedule():
    assert branch_schedule(4, 0.5) == ["single", "paired", "single", "paired"]
    assert set(branch_schedule(10, 0.0)) == {"single"} and set(branch_schedule(10, 1.0)) == {"paired"}
    assert branch_schedule(300, 1 / 3).count("paired") == 100


def test_unpaired_only_never_uses_face_crops(cfg, ds):
    run_cfg = dataclasses.replace(cfg, mix="unpaired_only")
    _, rows = train(run_cfg, ds)
    assert {r["branch"] for r in rows} == {"single"}
    assert all(r["face_crops"] == 0 for r in rows)
    cache = prepare(ds, run_cfg, sorted({i for p in ds.eval for i in p}))
    ref, target = ds.eval[0]
    assert eval_condition(ds, cache, ref, target, run_cfg).face_crop is None
    assert eval_condition(ds, cache, ref, target, cfg).face_crop is not None


def test_hybrid_uses_both_branches_and_keeps_them_pure(cfg, ds):
    _, rows = train(cfg, ds)
    assert {r["branch"] for r in rows} == {"paired", "single"}
    for r in rows:
        assert r["face_crops"] == (cfg.batch if r["branch"] == "paired" else 0)


def test_training_is_reproducible(cfg, ds):
    a = [r["loss"] for r in train(cfg, ds)[1]]
    b = [r["loss"] for r in train(cfg, ds)[1]]
    assert a == b


def test_missing_branch_data_is_an_error(cfg):
    data = DataConfig(paired_identities=0, unpaired_identities=2, poses_per_identity=2, eval_poses=0)
    with pytest.raises(InputError):
        train(dataclasses.replace(cfg, mix="paired_only"), gen_dataset(data, 0))


# --- probe and ablation ------------------------------------------------------------------


def test_probe_needs_two_buckets():
    samples = probe_samples(4, seed=1)
    one = {k: v for k, v in samples.items() if v.bucket == 0}
    with pytest.raises(InputError):
        leakage_probe(one)
    result = leakage_probe(samples)
    assert result.chance == 1 / 8 and result.n_train + result.n_test == 32


def test_ablation_report(cfg, tmp_path):
    payload = ablation_patch_vs_donor(cfg, tmp_path)
    assert [a["arm"] for a in payload["arms"]] == ["patch", "donor"]
    with open(tmp_path / "reports" / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["arm"] for r in rows] == ["patch", "donor"]
    for r in rows:
        assert all(r[c] not in ("", None) for c in METRIC_COLUMNS + ("probe_accuracy",))
    assert (tmp_path / "patch" / "reports" / "metrics.csv").exists()
    assert (tmp_path / "donor" / "reports" / "metrics.csv").exists()


# --- command line -------------------------------------------------------------------------


def test_cli_end_to_end(tmp_path, capsys):
    config = tmp_path / "cfg.json"
    config.write_text(json.dumps(TINY))
    out = tmp_path / "run"
    base = ["--config", str(config), "--out", str(out)]
    assert main(base + ["gen-data"]) == 0
    assert (out / "data" / "paired.json").exists()
    assert main(base + ["train"]) == 0
    assert (out / "ckpt" / "model.uvfm").read_bytes()[:4] == b"UVFM"
    assert main(base + ["eval"]) == 0
    with open(out / "reports" / "metrics.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["sample", *METRIC_COLUMNS]
    assert main(base + ["sample"]) == 0
    pairs = json.loads((out / "data" / "eval.json").read_text())["pairs"]
    assert sorted(p.stem for p in (out / "samples").glob("*.png")) == sorted(p["target"]["id"] for p in pairs)
    subject = out / "data" / "subjects" / "p000.json"
    assert main(base + ["finetune", "--subject", str(subject), "--iters", "2", "--rank", "2"]) == 0
    assert (out / "ckpt" / "adapter.uvla").read_bytes()[:4] == b"UVLA"
    assert main(base + ["probe", "--per-bucket", "3"]) == 0
    probe = json.loads((out / "reports" / "probe.json").read_text())
    assert set(probe) == {"raw", "donor", "patch", "shuffled"}


def test_cli_reports_bad_config(tmp_path, capsys):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"unknown": 1}))
    assert main(["--config", str(config), "--out", str(tmp_path), "train"]) == 2
    assert "unknown" in capsys.readouterr().err


def test_cli_delegates_clustering(tmp_path, capsys):
    path = tmp_path / "emb.csv"
    path.write_text("id,group,yaw,pitch,e0,e1\na,g,0,0,1,0\nb,g,0,0,0.8,0.6\nc,h,0,0,0,1\n")
    assert main(["cluster", "cluster", "--embeddings", str(path)]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["clusters"] == [["a", "b"], ["c"]]
