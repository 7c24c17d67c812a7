"""Few-shot test-time personalization with low-rank adapters and a face-masked loss."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.func import functional_call

from .conditioning import face_crop, face_region_mask, image_tensor, _cond_tensor
from .errors import ConfigError, InputError
from .flow import CondBatch, FlowBatch, fm_loss, integrate, make_flow_batch, make_optimizer, squared_error, train_step
from .raster import RasterConfig, rasterize_uv, render_pose_image

log = logging.getLogger(__name__)


def _adaptable(net):
    """Names of conv/linear weight tensors of `net`."""
    names = []
    for mod_name, mod in net.named_modules():
        if isinstance(mod, (nn.Conv2d, nn.Linear)):
            names.append(f"{mod_name}.weight" if mod_name else "weight")
    return names


class AdapterParams(nn.Module):
    """Low-rank factors per adapted layer; effective update = (alpha/rank) * up @ down."""

    def __init__(self, net, rank=4, alpha=None, seed=0, layers=None):
        super().__init__()
        if rank < 1:
            raise ConfigError("adapter rank must be >= 1")
        self.rank = rank
        self.alpha = float(rank if alpha is None else alpha)
        self.layers = list(layers) if layers is not None else _adaptable(net)
        params = dict(net.named_parameters())
        self.shapes = {}
        self.down = nn.ParameterDict()
        self.up = nn.ParameterDict()
        gen = torch.Generator().manual_seed(seed)
        for name in self.layers:
            w = params[name]
            m, n = w.shape[0], int(np.prod(w.shape[1:]))
            key = name.replace(".", "__")
            self.shapes[name] = tuple(w.shape)
            self.down[key] = nn.Parameter(torch.randn(rank, n, generator=gen, dtype=w.dtype) / np.sqrt(n))
            self.up[key] = nn.Parameter(torch.zeros(m, rank, dtype=w.dtype))

    @property
    def scale(self):
        return self.alpha / self.rank

    def delta(self, name):
        key = name.replace(".", "__")
        return (self.scale * (self.up[key] @ self.down[key])).reshape(self.shapes[name])


class AdaptedNet(nn.Module):
    """Read-through view of a frozen base network with adapter deltas added to its weights."""

    def __init__(self, base, adapter):
        super().__init__()
        self._base = [base]  # not registered: base parameters never reach an optimizer
        self.adapter = adapter
        params = dict(base.named_parameters())
        for name, shape in adapter.shapes.items():
            if name not in params or tuple(params[name].shape) != shape:
                got = None if name not in params else tuple(params[name].shape)
                raise ConfigError(f"adapter layer {name} expects shape {shape}, network has {got}")

    @property
    def base(self):
        return self._base[0]

    def effective_parameters(self):
        out = {}
        for name, p in self.base.named_parameters():
            p = p.detach()
            if name in self.adapter.shapes:
                p = p + self.adapter.delta(name)
            out[name] = p
        return out

    def forward(self, x, t, cond=None):
        state = self.effective_parameters()
        state.update({n: b for n, b in self.base.named_buffers()})
        return functional_call(self.base, state, (x, t, cond))


def apply_adapter(net, adapter):
    return AdaptedNet(net, adapter)


def sample_pair(n, rng):
    """Uniform ordered pair (i, j) with i != j from a set of size n."""
    n = n if isinstance(n, (int, np.integer)) else len(n)
    if n < 2:
        raise InputError("pair sampling needs at least two images")
    i = int(rng.integers(n))
    j = int(rng.integers(n - 1))
    return i, j + (j >= i)


def ft_loss(net, batch, cond, mask):
    """Flow-matching loss restricted to `mask` (B,1,R,R), normalized by masked-element count."""
    pred = net(batch.x_t, batch.t, cond)
    if not bool(mask.any()):
        warnings.warn("face mask is empty; fine-tuning loss defined as zero", RuntimeWarning, stacklevel=2)
        return (pred * 0.0).sum()
    return squared_error(pred, batch.target, mask)


@dataclass
class SubjectSet:
    """N >= 2 views of one identity, with working-resolution tensors cached per view."""

    views: list
    resolution: int = 64
    raster_config: RasterConfig = field(default_factory=RasterConfig)
    tex_size: tuple = (256, 256)

    def __post_init__(self):
        if len(self.views) < 2:
            raise InputError("a subject set needs at least two images")
        r = self.resolution
        self.textures = torch.stack(
            [
                _cond_tensor(rasterize_uv(v.mesh, v.camera, v.image, self.raster_config, self.tex_size).pixels, r)
                for v in self.views
            ]
        )
        self.poses = torch.stack([_cond_tensor(render_pose_image(v.mesh, v.camera), r) for v in self.views])
        self.faces = torch.stack([_cond_tensor(face_crop(v), r) for v in self.views])
        self.images = torch.stack([image_tensor(v.image, r) for v in self.views])
        self.masks = torch.stack(
            [torch.from_numpy(face_region_mask(v.mesh, v.camera, r))[None] for v in self.views]
        )

    def __len__(self):
        return len(self.views)

    def pair_batch(self, pairs):
        """Condition tensors {T_i, p_j, FC_i}, target images x0_j and face masks M_j."""
        i = torch.tensor([p[0] for p in pairs])
        j = torch.tensor([p[1] for p in pairs])
        cond = CondBatch(self.textures[i], self.poses[j], self.faces[i], torch.ones(len(pairs), 3, dtype=torch.bool))
        return cond, self.images[j], self.masks[j]


@dataclass
class RegularizationSet:
    """Generic paired samples mixed into fine-tuning batches."""

    cond: CondBatch
    x0: torch.Tensor

    def __len__(self):
        return len(self.x0)


def finetune(net, subject, iters=5000, batch=4, regularization=None, rank=4, alpha=None, lr=1e-4, seed=0):
    """Train adapter factors only; the base network is never modified."""
    adapter = AdapterParams(net, rank=rank, alpha=alpha, seed=seed)
    adapted = apply_adapter(net, adapter)
    opt = make_optimizer(adapter.parameters(), lr)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    n_reg = 1 if regularization is not None and len(regularization) and batch > 1 else 0
    n_sub = batch - n_reg
    for it in range(iters):
        pairs = [sample_pair(len(subject), rng) for _ in range(n_sub)]
        cond, x0, mask = subject.pair_batch(pairs)
        fb = make_flow_batch(x0, gen)
        if n_reg:
            k = int(rng.integers(len(regularization)))
            reg_cond = regularization.cond.index(slice(k, k + 1))
            reg_fb = make_flow_batch(regularization.x0[k : k + 1], gen)

            def loss_fn(model, b, c):
                sub = ft_loss(model, b, c, mask)
                reg = fm_loss(model, reg_fb, reg_cond)
                return (n_sub * sub + n_reg * reg) / batch

        else:

            def loss_fn(model, b, c):
                return ft_loss(model, b, c, mask)

        loss = train_step(adapted, opt, fb, cond, loss_fn=loss_fn)
        if it % 100 == 0:
            log.debug("finetune iter %d loss %.5f", it, loss)
    return adapter


@torch.no_grad()
def masked_generation_error(net, cond, target, mask, noise, steps=50, scheme="euler"):
    """Per-sample mean squared error inside `mask` between generated and target images."""
    out = integrate(net, noise, cond, steps, scheme)
    m = mask.to(out.dtype).expand_as(out)
    resid = (out - target) * m
    return ((resid * resid).flatten(1).sum(1) / m.flatten(1).sum(1)).numpy()
