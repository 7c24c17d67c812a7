"""Synthetic identities, pose buckets, dataset generation and on-disk formats."""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt, gaussian_filter

from .body import PARTS, BodyConfig, Camera, PoseParams, _cell, build_body, orbit_camera, pose_body
from .conditioning import View
from .donor import DonorConfig, DonorPool, build_donor_pool
from .errors import ConfigError, InputError
from .imaging import load_png, save_png
from .raster import RasterConfig, TextureMap, render_from_texture, visibility_mask

log = logging.getLogger(__name__)


def stream(seed, name):
    """Independent generator for a named sub-experiment of one root seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))]))


# --- identities ---------------------------------------------------------------

CLOTHED = ("torso", "thigh_l", "thigh_r")


@dataclass
class Identity:
    name: str
    skin: np.ndarray
    clothing: np.ndarray
    face_seed: int


def sample_identity(rng, name):
    skin = np.array([0.55, 0.40, 0.30]) + rng.uniform(-0.2, 0.35, 3) * np.array([1.0, 0.9, 0.8])
    clothing = rng.uniform(0.05, 0.9, 3)
    return Identity(name, np.clip(skin, 0.05, 0.95), clothing, int(rng.integers(2**31)))


def identity_texture(identity, mesh, size=256):
    """Full texture: uniform part tints with mild shading noise and a blob face pattern."""
    rng = np.random.default_rng(identity.face_seed)
    tex = np.zeros((size, size, 3))
    charted = np.zeros((size, size), dtype=bool)
    for part in PARTS:
        u0, v0, u1, v1 = _cell(part)
        r0, r1 = int(np.floor(v0 * size)), int(np.ceil(v1 * size))
        c0, c1 = int(np.floor(u0 * size)), int(np.ceil(u1 * size))
        tex[r0:r1, c0:c1] = identity.clothing if part in CLOTHED else identity.skin
        charted[r0:r1, c0:c1] = True
    tex *= 1.0 + 0.08 * gaussian_filter(rng.standard_normal((size, size)), 6.0)[..., None] * 6.0

    fu0, fv0, fu1, fv1 = mesh.face_uv_rect
    rows, cols = np.mgrid[0:size, 0:size] + 0.5
    face = np.zeros((size, size, 3))
    weight = np.zeros((size, size))
    for _ in range(6):
        cu, cv = rng.uniform(fu0, fu1), rng.uniform(fv0, fv1)
        sigma = rng.uniform(0.01, 0.03) * size
        blob = np.exp(-((cols - cu * size) ** 2 + (rows - cv * size) ** 2) / (2 * sigma**2))
        face += blob[..., None] * rng.uniform(0.0, 1.0, 3)
        weight += blob
    inside = np.zeros((size, size))
    inside[int(fv0 * size) : int(np.ceil(fv1 * size)), int(fu0 * size) : int(np.ceil(fu1 * size))] = 1.0
    alpha = np.clip(weight, 0.0, 1.0) * gaussian_filter(inside, 1.0)
    face = face / np.maximum(weight, 1e-9)[..., None]
    tex = tex * (1 - alpha[..., None]) + face * alpha[..., None]
    # pad the gutters with the nearest chart texel so lookups at chart edges never blend in black
    _, (ri, ci) = distance_transform_edt(~charted, return_indices=True)
    tex = tex[ri, ci]
    return np.clip(gaussian_filter(tex, (0.7, 0.7, 0)), 0.0, 1.0)


# --- poses and cameras ------------------------------------------------------------

POSE_BUCKETS = (
    {},
    {"shoulder_l": 1.5, "shoulder_r": 1.5},
    {"shoulder_l": 2.8, "shoulder_r": 2.8},
    {"shoulder_l": 0.4, "shoulder_r": 0.4, "elbow_l": 2.0, "elbow_r": 2.0},
    {"shoulder_l": 1.5, "shoulder_r": 2.8, "elbow_l": 1.0},
    {"hip_l": 1.4, "knee_l": 1.6, "shoulder_r": 0.8},
    {"hip_l": 0.6, "hip_r": 0.6, "knee_l": 1.8, "knee_r": 1.8},
    {"hip_r": 1.2, "elbow_l": 1.8, "shoulder_l": 0.6, "neck": 0.8},
)


def bucket_pose(bucket, rng, jitter=0.12):
    base = POSE_BUCKETS[bucket]
    angles = {}
    for joint in ("neck", "shoulder_l", "shoulder_r", "elbow_l", "elbow_r", "hip_l", "hip_r", "knee_l", "knee_r"):
        angles[joint] = float(base.get(joint, 0.0) + rng.uniform(-jitter, jitter))
    return PoseParams(angles).clamped()


def jittered_camera(rng, yaw=0.25, pitch=0.1, size=256):
    return orbit_camera(
        yaw=float(rng.uniform(-yaw, yaw)),
        pitch=float(rng.uniform(-pitch, pitch)),
        distance=float(2.4 + rng.uniform(-0.1, 0.1)),
        size=size,
    )


# --- dataset ----------------------------------------------------------------------


@dataclass
class DataConfig:
    paired_identities: int = 6
    unpaired_identities: int = 12
    poses_per_identity: int = 4
    eval_poses: int = 1
    image_size: int = 256
    tex_size: int = 256
    pose_jitter: float = 0.12
    camera_yaw: float = 0.25
    tessellation: int = 2

    def validate(self):
        if self.paired_identities < 0 or self.unpaired_identities < 0:
            raise ConfigError("identity counts must be nonnegative")
        if self.paired_identities and self.poses_per_identity < 2:
            raise ConfigError("paired identities need at least two poses")


@dataclass
class Sample:
    id: str
    identity: str
    bucket: int
    pose: PoseParams
    camera: Camera
    image: np.ndarray
    mask: np.ndarray
    mesh: object = None
    split: str = "train"  # train | eval
    partner: str | None = None
    donors: DonorPool | None = None

    def view(self):
        return View(self.image, self.mesh, self.camera, self.id)


@dataclass
class Dataset:
    config: DataConfig
    rest: object
    identities: dict
    textures: dict
    samples: dict = field(default_factory=dict)
    paired: list = field(default_factory=list)
    unpaired: list = field(default_factory=list)
    eval: list = field(default_factory=list)  # (reference id, target id)

    def train_ids(self):
        return [s.id for s in self.samples.values() if s.split == "train"]


def _make_sample(sid, ident, bucket, rng, ds, raster, split):
    cfg = ds.config
    pose = bucket_pose(bucket, rng, cfg.pose_jitter)
    cam = jittered_camera(rng, cfg.camera_yaw, size=cfg.image_size)
    mesh = pose_body(ds.rest, pose)
    tex = ds.textures[ident]
    full = TextureMap(tex, np.ones(tex.shape[:2], dtype=bool))
    # quantized to 8 bits so the in-memory dataset equals its PNG round trip
    image = np.round(render_from_texture(mesh, cam, full) * 255.0) / 255.0
    mask = visibility_mask(mesh, cam, raster, (cfg.tex_size, cfg.tex_size))
    return Sample(sid, ident, bucket, pose, cam, image, mask, mesh, split)


def gen_dataset(config=None, seed=0, raster=None, donor=None):
    """Generate identities, posed samples, donor pools and paired/unpaired/eval splits in memory."""
    config = config or DataConfig()
    config.validate()
    raster = raster or RasterConfig()
    donor = donor or DonorConfig()
    rest = build_body(BodyConfig(tessellation=config.tessellation))
    id_rng = stream(seed, "identities")
    pose_rng = stream(seed, "poses")
    names = [f"p{i:03d}" for i in range(config.paired_identities)]
    names += [f"u{i:03d}" for i in range(config.unpaired_identities)]
    identities = {n: sample_identity(id_rng, n) for n in names}
    textures = {n: identity_texture(identities[n], rest, config.tex_size) for n in names}
    ds = Dataset(config, rest, identities, textures)

    n_buckets = len(POSE_BUCKETS)
    counter = 0
    for name in names:
        n_train = config.poses_per_identity if name.startswith("p") else 1
        # consecutive buckets so that same-identity partners never share a bucket
        start = int(pose_rng.integers(n_buckets))
        for k in range(n_train + config.eval_poses):
            split = "train" if k < n_train else "eval"
            sid = f"{name}_{k:02d}"
            ds.samples[sid] = _make_sample(sid, name, (start + k) % n_buckets, pose_rng, ds, raster, split)
            counter += 1
        train = [f"{name}_{k:02d}" for k in range(n_train)]
        if name.startswith("p"):
            for k, sid in enumerate(train):
                ds.samples[sid].partner = train[(k + 1) % n_train]
                ds.paired.append(sid)
        else:
            ds.unpaired.append(train[0])
        for k in range(n_train, n_train + config.eval_poses):
            ds.eval.append((train[0], f"{name}_{k:02d}"))

    donor_rng = stream(seed, "donors")
    train_ids = ds.train_ids()
    masks = [ds.samples[s].mask for s in train_ids]
    for i, sid in enumerate(train_ids):
        others = [j for j in range(len(train_ids)) if j != i]
        ds.samples[sid].donors = build_donor_pool(
            masks[i],
            [masks[j] for j in others],
            donor.iou_lo,
            donor.iou_hi,
            donor.pool_size,
            donor_rng,
            sid,
            [train_ids[j] for j in others],
        )
    log.info("generated %d samples over %d identities", counter, len(names))
    return ds


# --- files --------------------------------------------------------------------


def write_obj(path, mesh):
    """Wavefront OBJ with per-vertex UVs and one material group per part."""
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"vt {u!r} {v!r}" for u, v in mesh.uv.tolist()]
    current = None
    for f, part in zip(mesh.faces.tolist(), mesh.face_part.tolist()):
        if part != current:
            lines.append(f"usemtl {PARTS[part]}")
            current = part
        a, b, c = (i + 1 for i in f)
        lines.append(f"f {a}/{a} {b}/{b} {c}/{c}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path):
    """Returns (vertices, uv, faces, face_part) from an OBJ written by `write_obj`."""
    verts, uvs, faces, parts = [], [], [], []
    part = 0
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(x) for x in tok[1:4]])
        elif tok[0] == "vt":
            uvs.append([float(x) for x in tok[1:3]])
        elif tok[0] == "usemtl":
            part = PARTS.index(tok[1])
        elif tok[0] == "f":
            idx = [int(t.split("/")[0]) - 1 for t in tok[1:4]]
            if any(int(t.split("/")[1]) - 1 != i for t, i in zip(tok[1:4], idx)):
                raise InputError(f"{path}: vertex/uv indices must coincide")
            faces.append(idx)
            parts.append(part)
    return np.array(verts), np.array(uvs), np.array(faces, dtype=np.int64), np.array(parts, dtype=np.int64)


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))


def write_dataset(ds, out_dir):
    """Write PNGs, pose/camera JSON, donor pools, the rest mesh and the three manifests."""
    out = Path(out_dir)
    for sub in ("images", "masks", "poses", "cameras", "donors", "textures"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    write_obj(out / "body.obj", ds.rest)
    for name, tex in ds.textures.items():
        save_png(out / "textures" / f"{name}.png", tex)
    entries = {}
    for sid, s in ds.samples.items():
        save_png(out / "images" / f"{sid}.png", s.image)
        save_png(out / "masks" / f"{sid}.png", s.mask)
        _dump(out / "poses" / f"{sid}.json", s.pose.to_json())
        _dump(out / "cameras" / f"{sid}.json", s.camera.to_json())
        entry = {
            "id": sid,
            "identity": s.identity,
            "bucket": s.bucket,
            "image": f"images/{sid}.png",
            "pose": f"poses/{sid}.json",
            "camera": f"cameras/{sid}.json",
            "mask": f"masks/{sid}.png",
        }
        if s.donors is not None:
            _dump(out / "donors" / f"{sid}.json", s.donors.to_json())
            entry["donor_pool"] = f"donors/{sid}.json"
        if s.partner is not None:
            entry["partner"] = s.partner
        entries[sid] = entry
    cfg = {k: getattr(ds.config, k) for k in ds.config.__dataclass_fields__}
    _dump(out / "paired.json", {"kind": "paired", "config": cfg, "samples": [entries[s] for s in ds.paired]})
    _dump(out / "unpaired.json", {"kind": "unpaired", "config": cfg, "samples": [entries[s] for s in ds.unpaired]})
    # an eval pair is its own relation; training partners live in the training manifests
    bare = {sid: {k: v for k, v in e.items() if k != "partner"} for sid, e in entries.items()}
    _dump(
        out / "eval.json",
        {"kind": "eval", "pairs": [{"reference": bare[r], "target": bare[t]} for r, t in ds.eval]},
    )
    by_identity = {}
    for sid in ds.paired:
        by_identity.setdefault(ds.samples[sid].identity, []).append(sid)
    if by_identity:
        (out / "subjects").mkdir(exist_ok=True)
    for name, ids in by_identity.items():
        rows = [{"id": s, "image": f"../{entries[s]['image']}", "pose": f"../{entries[s]['pose']}",
                 "camera": f"../{entries[s]['camera']}"} for s in ids]
        _dump(out / "subjects" / f"{name}.json", {"identity": name, "samples": rows})
    return out


def load_manifest(path):
    """Read a manifest and check that every referenced file and partner exists."""
    path = Path(path)
    data = json.loads(path.read_text())
    root = path.parent
    entries = data["samples"] if "samples" in data else [e for p in data["pairs"] for e in p.values()]
    ids = {e["id"] for e in entries}
    for e in entries:
        for key in ("image", "pose", "camera", "mask", "donor_pool"):
            if key in e and not (root / e[key]).exists():
                raise InputError(f"{path}: {e['id']} references missing file {e[key]}")
        if "partner" in e and e["partner"] not in ids:
            raise InputError(f"{path}: partner {e['partner']} of {e['id']} is not in the manifest")
    return data


def load_sample(root, entry, rest):
    root = Path(root)
    pose = PoseParams.from_json(json.loads((root / entry["pose"]).read_text()))
    cam = Camera.from_json(json.loads((root / entry["camera"]).read_text()))
    donors = None
    if "donor_pool" in entry:
        donors = DonorPool.from_json(json.loads((root / entry["donor_pool"]).read_text()))
    return Sample(
        entry["id"],
        entry["identity"],
        int(entry.get("bucket", -1)),
        pose,
        cam,
        load_png(root / entry["image"]),
        load_png(root / entry["mask"], mask=True),
        pose_body(rest, pose),
        partner=entry.get("partner"),
        donors=donors,
    )


def load_dataset(data_dir):
    """Rebuild a Dataset from the manifests written by `write_dataset`."""
    root = Path(data_dir)
    paired = load_manifest(root / "paired.json")
    unpaired = load_manifest(root / "unpaired.json")
    evaluation = load_manifest(root / "eval.json")
    known = set(DataConfig.__dataclass_fields__)
    config = DataConfig(**{k: v for k, v in paired["config"].items() if k in known})
    rest = build_body(BodyConfig(tessellation=config.tessellation))
    ds = Dataset(config, rest, {}, {})
    for entry in paired["samples"] + unpaired["samples"]:
        ds.samples[entry["id"]] = load_sample(root, entry, rest)
    for pair in evaluation["pairs"]:
        for role in ("reference", "target"):
            entry = pair[role]
            if entry["id"] not in ds.samples:
                s = load_sample(root, entry, rest)
                s.split = "eval"
                ds.samples[entry["id"]] = s
        ds.eval.append((pair["reference"]["id"], pair["target"]["id"]))
    ds.paired = [e["id"] for e in paired["samples"]]
    ds.unpaired = [e["id"] for e in unpaired["samples"]]
    for name in sorted({s.identity for s in ds.samples.values()}):
        tex = root / "textures" / f"{name}.png"
        if tex.exists():
            ds.textures[name] = load_png(tex)
    return ds
