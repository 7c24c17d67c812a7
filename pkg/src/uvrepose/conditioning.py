"""Condition sets for the paired and single-view training branches."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .body import PART_INDEX, Camera, Mesh, project
from .donor import apply_donor, random_patch_mask
from .imaging import crop_box, dilate, resample_area, square_box
from .raster import RasterConfig, TextureMap, part_footprint, rasterize_uv, render_pose_image
from .flow import CondBatch

log = logging.getLogger(__name__)


@dataclass
class View:
    """One image of a subject together with its posed mesh and camera."""

    image: np.ndarray  # (H, W, 3) in [0, 1]
    mesh: Mesh
    camera: Camera
    id: str = ""


@dataclass
class ConditionSet:
    texture: TextureMap | None
    pose_render: np.ndarray | None
    face_crop: np.ndarray | None

    @property
    def present(self):
        return (self.texture is not None, self.pose_render is not None, self.face_crop is not None)


def head_box(mesh, camera):
    head = mesh.vertex_part == PART_INDEX["head"]
    pix, _ = project(mesh.vertices[head], camera)
    return square_box(pix)


def face_crop(view):
    return crop_box(view.image, head_box(view.mesh, view.camera))


def face_region_mask(mesh, camera, resolution, dilation=2):
    """Visible-head footprint at working resolution, dilated by `dilation` pixels."""
    head = part_footprint(mesh, camera, PART_INDEX["head"])
    small = resample_area(head.astype(float), resolution) > 0
    return dilate(small, dilation)


def make_condition_paired(ref, target, raster_config=None, tex_size=(256, 256), texture=None):
    """c = {partial texture of the reference, target pose render, reference face crop}."""
    if texture is None:
        texture = rasterize_uv(ref.mesh, ref.camera, ref.image, raster_config or RasterConfig(), tex_size)
    cond = ConditionSet(texture, render_pose_image(target.mesh, target.camera), face_crop(ref))
    return cond, target.image


def make_condition_single(view, donor_mask, raster_config=None, tex_size=(256, 256), texture=None, rng=None):
    """c = {donor-masked partial texture, render of the same pose, no face crop}.

    With no donor mask available the texture falls back to random patch masking.
    """
    if texture is None:
        texture = rasterize_uv(view.mesh, view.camera, view.image, raster_config or RasterConfig(), tex_size)
    if donor_mask is None:
        log.info("no donor for %s; falling back to random patch masking", view.id or "sample")
        masked = random_patch_mask(texture, rng if rng is not None else np.random.default_rng())
    else:
        masked = apply_donor(texture, donor_mask)
    return ConditionSet(masked, render_pose_image(view.mesh, view.camera), None), view.image


def image_tensor(img, resolution):
    """(H,W,C) image in [0,1] -> (C,R,R) float tensor in [-1,1]."""
    small = resample_area(img, resolution)
    return torch.from_numpy(np.ascontiguousarray(small.transpose(2, 0, 1) * 2.0 - 1.0)).float()


def _cond_tensor(img, resolution):
    small = resample_area(img, resolution)
    return torch.from_numpy(np.ascontiguousarray(small.transpose(2, 0, 1))).float()


def tensor_image(x):
    """(C,R,R) tensor in [-1,1] -> (R,R,C) array in [0,1]."""
    return np.clip((x.detach().double().numpy().transpose(1, 2, 0) + 1.0) / 2.0, 0.0, 1.0)


def condition_batch(conds, resolution):
    """Stack condition sets into working-resolution tensors with presence flags."""
    zeros = torch.zeros(3, resolution, resolution)
    tex, pose, face, present = [], [], [], []
    for c in conds:
        tex.append(_cond_tensor(c.texture.pixels, resolution) if c.texture is not None else zeros)
        pose.append(_cond_tensor(c.pose_render, resolution) if c.pose_render is not None else zeros)
        face.append(_cond_tensor(c.face_crop, resolution) if c.face_crop is not None else zeros)
        present.append(c.present)
    return CondBatch(torch.stack(tex), torch.stack(pose), torch.stack(face), torch.tensor(present, dtype=torch.bool))
