"""Experiment orchestration: training branches, evaluation, leakage probe and ablation."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .body import keypoints, pose_body
from .checkpoint import save_net
from .conditioning import ConditionSet, condition_batch, face_crop, head_box, image_tensor, tensor_image
from .data import POSE_BUCKETS, DataConfig, bucket_pose, gen_dataset, jittered_camera, stream, write_dataset
from .donor import DonorConfig, apply_donor, build_donor_pool, random_patch_mask, sample_dropout
from .errors import InputError, NumericError
from .flow import VelocityNet, integrate, make_flow_batch, make_optimizer, train_step
from .idgraph import proxy_embedding
from .imaging import crop_box, resample_area
from .metrics import MetricReport, face_sim, oks, psnr, ssim
from .raster import TextureMap, foreground, rasterize_uv, render_pose_image, visibility_mask

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("psnr", "ssim", "m_psnr", "m_ssim", "oks", "face_sim")
LOG_COLUMNS = ("step", "branch", "dropout_decision", "loss", "face_crops")


# --- cached per-sample inputs -------------------------------------------------


@dataclass
class Cached:
    texture: TextureMap  # full partial texture of the sample's own view
    pose_render: np.ndarray
    face_crop: np.ndarray
    x0: torch.Tensor  # (3, R, R) in [-1, 1]


def prepare(ds, cfg, ids=None):
    """Rasterize, render and crop every requested sample once."""
    size = (ds.config.tex_size, ds.config.tex_size)
    out = {}
    for sid in ids if ids is not None else list(ds.samples):
        s = ds.samples[sid]
        tex = rasterize_uv(s.mesh, s.camera, s.image, cfg.raster, size)
        out[sid] = Cached(tex, render_pose_image(s.mesh, s.camera), face_crop(s.view()), image_tensor(s.image, cfg.resolution))
    return out


# --- branch construction ----------------------------------------------------------


def paired_ratio(cfg, ds):
    if cfg.mix == "paired_only":
        return 1.0
    if cfg.mix == "unpaired_only":
        return 0.0
    if cfg.paired_ratio is not None:
        return cfg.paired_ratio
    total = len(ds.paired) + len(ds.unpaired)
    return len(ds.paired) / total if total else 0.0


def branch_schedule(steps, ratio):
    """Deterministic interleaving: step s is paired when floor((s+1)r) > floor(s r)."""
    s = np.arange(steps)
    paired = np.floor((s + 1) * ratio + 1e-9) > np.floor(s * ratio + 1e-9)
    return ["paired" if p else "single" for p in paired]


def paired_conditions(ds, cache, ids):
    """c_paired = {texture of the reference, render of the partner pose, reference face crop}."""
    conds, x0 = [], []
    for sid in ids:
        partner = ds.samples[sid].partner
        conds.append(ConditionSet(cache[sid].texture, cache[partner].pose_render, cache[sid].face_crop))
        x0.append(cache[partner].x0)
    return conds, torch.stack(x0)


def single_conditions(ds, cache, ids, masking, rng):
    """c_single = {masked own texture, own pose render, no face crop}."""
    conds, x0 = [], []
    for sid in ids:
        s = ds.samples[sid]
        tex = cache[sid].texture
        if masking == "donor" and s.donors is not None and not s.donors.empty:
            donor = s.donors.ids[int(rng.integers(len(s.donors.ids)))]
            tex = apply_donor(tex, ds.samples[donor].mask)
        else:
            tex = random_patch_mask(tex, rng)
        conds.append(ConditionSet(tex, cache[sid].pose_render, None))
        x0.append(cache[sid].x0)
    return conds, torch.stack(x0)


def build_net(cfg):
    return VelocityNet(3, cfg.width, cfg.resolution, seed=int(stream(cfg.seed, "init").integers(2**31)))


# --- training -----------------------------------------------------------------


def train(cfg, ds, cache=None, ckpt_dir=None, net=None):
    """Train per the configured data mix.  Returns (net, log rows)."""
    cache = cache if cache is not None else prepare(ds, cfg, ds.train_ids())
    net = net if net is not None else build_net(cfg)
    opt = make_optimizer(net.parameters(), cfg.lr)
    rng = stream(cfg.seed, "training")
    drop_rng = stream(cfg.seed, "dropout")
    gen = torch.Generator().manual_seed(int(stream(cfg.seed, "noise").integers(2**31)))
    schedule = branch_schedule(cfg.steps, paired_ratio(cfg, ds))
    if "paired" in schedule and not ds.paired:
        raise InputError("paired branch scheduled but the paired manifest is empty")
    if "single" in schedule and not ds.unpaired:
        raise InputError("single-view branch scheduled but the unpaired manifest is empty")
    d = cfg.dropout
    rows = []
    last_good = None
    for step, branch in enumerate(schedule):
        pool = ds.paired if branch == "paired" else ds.unpaired
        ids = [pool[int(i)] for i in rng.integers(len(pool), size=cfg.batch)]
        if branch == "paired":
            conds, x0 = paired_conditions(ds, cache, ids)
        else:
            conds, x0 = single_conditions(ds, cache, ids, cfg.masking, rng)
        cond = condition_batch(conds, cfg.resolution)
        decision = sample_dropout(drop_rng, d.p_all, d.p_tex, d.p_face, d.p_pose)
        batch = make_flow_batch(x0, gen)
        try:
            loss = train_step(net, opt, batch, cond, decision)
        except NumericError as exc:
            raise NumericError(f"step {step}: {exc}; last good checkpoint: {last_good}") from exc
        faces = sum(c.face_crop is not None for c in conds)
        rows.append({"step": step, "branch": branch, "dropout_decision": decision.value, "loss": loss, "face_crops": faces})
        if ckpt_dir is not None and cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0:
            last_good = Path(ckpt_dir) / "model.uvfm"
            save_net(last_good, net, opt, step + 1)
    if ckpt_dir is not None:
        save_net(Path(ckpt_dir) / "model.uvfm", net, opt, cfg.steps, {"config": cfg.to_json()})
    return net, rows


# --- evaluation ------------------------------------------------------------------


def _fg_small(mesh, camera, r):
    return resample_area(foreground(mesh, camera).astype(float), r) > 0.5


def estimate_keypoints(image, camera, rest, r):
    """Keypoints of the canonical bucket pose whose silhouette best matches `image`."""
    sil = image.max(axis=2) > 0.1
    best, best_iou = None, -1.0
    for b in range(len(POSE_BUCKETS)):
        pose = bucket_pose(b, np.random.default_rng(0), jitter=0.0)
        cand = _fg_small(pose_body(rest, pose), camera, r)
        union = np.count_nonzero(sil | cand)
        score = np.count_nonzero(sil & cand) / union if union else 0.0
        if score > best_iou:
            best, best_iou = pose, score
    return keypoints(rest, best, camera)


def eval_condition(ds, cache, ref, target, cfg):
    """Paired-style condition for a held-out target pose; no face crop for unpaired-only models."""
    face = cache[ref].face_crop if cfg.mix != "unpaired_only" else None
    return ConditionSet(cache[ref].texture, cache[target].pose_render, face)


def evaluate(net, ds, cfg, cache=None):
    """Generate every held-out target and score it.  Returns (MetricReport, rows)."""
    ids = sorted({i for pair in ds.eval for i in pair})
    cache = cache if cache is not None else prepare(ds, cfg, ids)
    r = cfg.resolution
    gen = torch.Generator().manual_seed(int(stream(cfg.seed, "eval").integers(2**31)))
    report = MetricReport()
    rows = []
    for ref, target in ds.eval:
        t = ds.samples[target]
        cond = condition_batch([eval_condition(ds, cache, ref, target, cfg)], r)
        noise = torch.randn((1, 3, r, r), generator=gen)
        out = tensor_image(integrate(net, noise, cond, cfg.sampler.steps, cfg.sampler.scheme)[0])
        truth = tensor_image(cache[target].x0)
        fg = _fg_small(t.mesh, t.camera, r)
        small_cam = t.camera.scaled(r, r)
        box = head_box(t.mesh, small_cam)
        gt_kp = keypoints(ds.rest, t.pose, t.camera)
        pred_kp = estimate_keypoints(out, small_cam, ds.rest, r)
        # predicted keypoints come from the small camera; rescale to full-resolution pixels
        pred_kp.points = pred_kp.points * (t.camera.width / r)
        area = float(np.count_nonzero(foreground(t.mesh, t.camera)))
        row = {
            "sample": target,
            "psnr": psnr(out, truth),
            "ssim": ssim(out, truth),
            "m_psnr": psnr(out, truth, fg),
            "m_ssim": ssim(out, truth, fg),
            "oks": oks(pred_kp, gt_kp, area),
            "face_sim": face_sim(proxy_embedding(crop_box(out, box)), proxy_embedding(crop_box(truth, box))),
        }
        for name in METRIC_COLUMNS:
            report.add(name, row[name], masked=name.startswith("m_"))
        rows.append(row)
    return report, rows


# --- reports ---------------------------------------------------------------------


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(row[c])) if isinstance(row[c], float) else row[c] for c in columns])


def run_experiment(cfg, out_dir, ds=None):
    """Generate data, train, evaluate; write data/, ckpt/ and reports/ under `out_dir`."""
    cfg.validate()
    torch.manual_seed(cfg.seed)
    out = Path(out_dir)
    for sub in ("data", "ckpt", "reports"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    if ds is None:
        ds = gen_dataset(cfg.data, cfg.seed, cfg.raster, cfg.donor)
        write_dataset(ds, out / "data")
    cache = prepare(ds, cfg)
    net, rows = train(cfg, ds, cache, out / "ckpt")
    write_csv(out / "reports" / "train_log.csv", LOG_COLUMNS, rows)
    report, metric_rows = evaluate(net, ds, cfg, cache)
    write_csv(out / "reports" / "metrics.csv", ("sample",) + METRIC_COLUMNS, metric_rows)
    summary = {"config": cfg.to_json(), "metrics": report.summary(), "final_loss": rows[-1]["loss"] if rows else None}
    (out / "reports" / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return report


# --- pose-leakage probe ---------------------------------------------------------


@dataclass
class ProbeResult:
    accuracy: float
    chance: float
    sigma: float  # binomial std of accuracy at chance on the test split
    n_train: int
    n_test: int

    def to_json(self):
        return dataclasses.asdict(self)


def probe_samples(n_per_bucket=30, seed=0, raster=None, donor=None, config=None, tex_size=256):
    """Visibility masks only (no images) for `n_per_bucket` jittered poses of every bucket."""
    from .body import BodyConfig, build_body
    from .data import Sample

    config = config or DataConfig()
    rest = build_body(BodyConfig(tessellation=config.tessellation))
    rng = stream(seed, "probe-data")
    samples = {}
    for b in range(len(POSE_BUCKETS)):
        for k in range(n_per_bucket):
            pose = bucket_pose(b, rng, config.pose_jitter)
            cam = jittered_camera(rng, config.camera_yaw, size=config.image_size)
            mask = visibility_mask(pose_body(rest, pose), cam, raster, (tex_size, tex_size))
            sid = f"b{b}_{k:03d}"
            samples[sid] = Sample(sid, "", b, pose, cam, None, mask)
    donor = donor or DonorConfig()
    donor_rng = stream(seed, "probe-donors")
    ids = list(samples)
    for i, sid in enumerate(ids):
        others = ids[:i] + ids[i + 1 :]
        samples[sid].donors = build_donor_pool(
            samples[sid].mask, [samples[o].mask for o in others], donor.iou_lo, donor.iou_hi, donor.pool_size,
            donor_rng, sid, others,
        )
    return samples


def probe_features(samples, use_donor=False, strategy="donor", seed=0, size=32):
    """Flattened area-downsampled masks; optionally intersected with a donor mask or patch-masked."""
    rng = stream(seed, "probe-masks")
    feats = []
    for s in samples.values():
        m = s.mask
        if use_donor:
            if strategy == "donor" and s.donors is not None and not s.donors.empty:
                m = m & samples[s.donors.ids[int(rng.integers(len(s.donors.ids)))]].mask
            else:
                m = random_patch_mask(TextureMap(np.zeros(m.shape + (1,)), m), rng).mask
        feats.append(resample_area(m.astype(float), size).ravel())
    return np.array(feats)


def leakage_probe(samples, use_donor=False, seed=0, shuffle_labels=False, strategy="donor", test_fraction=0.5):
    """Held-out accuracy of a linear classifier predicting the pose bucket from visibility masks."""
    from sklearn.linear_model import LogisticRegression

    if hasattr(samples, "samples"):
        samples = {k: v for k, v in samples.samples.items() if v.split == "train"}
    y = np.array([s.bucket for s in samples.values()])
    classes = np.unique(y)
    if len(classes) < 2:
        raise InputError(f"leakage probe needs at least 2 pose buckets, got {len(classes)}")
    X = probe_features(samples, use_donor, strategy, seed)
    rng = stream(seed, "probe-split")
    if shuffle_labels:
        y = rng.permutation(y)
    perm = rng.permutation(len(y))
    n_test = max(1, int(round(len(y) * test_fraction)))
    te, tr = perm[:n_test], perm[n_test:]
    clf = LogisticRegression(C=1.0, max_iter=2000).fit(X[tr], y[tr])
    acc = float(clf.score(X[te], y[te]))
    chance = 1.0 / len(classes)
    sigma = float(np.sqrt(chance * (1 - chance) / n_test))
    return ProbeResult(acc, chance, sigma, len(tr), n_test)


# --- ablation --------------------------------------------------------------------


def ablation_patch_vs_donor(cfg, out_dir):
    """Two runs that differ only in masking strategy, plus probe rows for each arm."""
    out = Path(out_dir)
    ds = gen_dataset(cfg.data, cfg.seed, cfg.raster, cfg.donor)
    (out / "data").mkdir(parents=True, exist_ok=True)
    write_dataset(ds, out / "data")
    rows = []
    for arm in ("patch", "donor"):
        arm_cfg = dataclasses.replace(cfg, masking=arm)
        report = run_experiment(arm_cfg, out / arm, ds=ds)
        probe = leakage_probe(ds, use_donor=True, seed=cfg.seed, strategy=arm)
        row = {"arm": arm, **{k: report.summary()[k] for k in METRIC_COLUMNS}, "probe_accuracy": probe.accuracy}
        rows.append(row)
    raw = leakage_probe(ds, use_donor=False, seed=cfg.seed)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    columns = ("arm",) + METRIC_COLUMNS + ("probe_accuracy",)
    write_csv(out / "reports" / "ablation.csv", columns, rows)
    payload = {"arms": rows, "raw_probe_accuracy": raw.accuracy, "chance": raw.chance}
    (out / "reports" / "ablation.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    return payload
