"""Conditional flow matching: velocity networks, training objective and ODE sampling.

Convention: x0 is data, x1 is Gaussian noise, x_t = t*x1 + (1-t)*x0, and the
network regresses the constant velocity x1 - x0.  Sampling integrates from t=1
back to t=0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .donor import DropoutDecision
from .errors import InputError, NumericError

N_FREQ = 16


def time_embedding(t, n_freq=N_FREQ):
    """Sinusoidal embedding of t in [0,1]: (B,) -> (B, 2*n_freq)."""
    k = torch.arange(n_freq, dtype=t.dtype, device=t.device)
    freqs = 1000.0 * torch.exp(-math.log(10000.0) * k / n_freq)
    ang = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


@dataclass
class CondBatch:
    """Working-resolution condition tensors.  `present` columns: texture, pose, face."""

    texture: torch.Tensor
    pose: torch.Tensor
    face: torch.Tensor
    present: torch.Tensor  # (B, 3) bool

    def __len__(self):
        return self.present.shape[0]

    def to(self, dtype):
        return CondBatch(self.texture.to(dtype), self.pose.to(dtype), self.face.to(dtype), self.present)

    def index(self, idx):
        return CondBatch(self.texture[idx], self.pose[idx], self.face[idx], self.present[idx])

    @staticmethod
    def cat(parts):
        return CondBatch(
            torch.cat([p.texture for p in parts]),
            torch.cat([p.pose for p in parts]),
            torch.cat([p.face for p in parts]),
            torch.cat([p.present for p in parts]),
        )

    def masked_inputs(self):
        """Condition channels with absent entries replaced by exact zeros."""
        out = []
        for col, x in enumerate((self.texture, self.pose, self.face)):
            keep = self.present[:, col].view(-1, 1, 1, 1)
            out.append(torch.where(keep, x, torch.zeros((), dtype=x.dtype)))
        return out


_DROP_COLUMNS = {
    DropoutDecision.DROP_ALL: (0, 1, 2),
    DropoutDecision.DROP_TEXTURE: (0,),
    DropoutDecision.DROP_POSE: (1,),
    DropoutDecision.DROP_FACE: (2,),
    DropoutDecision.KEEP_ALL: (),
}


def apply_dropout(cond, decisions):
    """Zero dropped conditions and clear their presence flags (one decision per sample)."""
    if isinstance(decisions, (DropoutDecision, str)):
        decisions = [DropoutDecision(decisions)] * len(cond)
    if len(decisions) != len(cond):
        raise InputError(f"{len(decisions)} dropout decisions for a batch of {len(cond)}")
    present = cond.present.clone()
    for i, d in enumerate(decisions):
        for col in _DROP_COLUMNS[DropoutDecision(d)]:
            present[i, col] = False
    tensors = []
    for col, x in enumerate((cond.texture, cond.pose, cond.face)):
        keep = present[:, col].view(-1, 1, 1, 1)
        tensors.append(torch.where(keep, x, torch.zeros((), dtype=x.dtype)))
    return CondBatch(*tensors, present)


def _conv(cin, cout):
    return nn.Conv2d(cin, cout, 3, padding=1)


class VelocityNet(nn.Module):
    """Small U-Net over [x_t, conditions, presence flags, t-embedding]."""

    def __init__(self, channels=3, width=16, resolution=64, n_freq=N_FREQ, seed=0):
        super().__init__()
        if resolution % 8:
            raise InputError("resolution must be divisible by 8")
        self.channels, self.resolution, self.n_freq = channels, resolution, n_freq
        cin = channels + 3 * 3 + 3 + 2 * n_freq
        w = width
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.enc0 = nn.ModuleList([_conv(cin, w), _conv(w, w)])
            self.enc1 = nn.ModuleList([_conv(w, 2 * w), _conv(2 * w, 2 * w)])
            self.enc2 = nn.ModuleList([_conv(2 * w, 2 * w), _conv(2 * w, 2 * w)])
            self.mid = nn.ModuleList([_conv(2 * w, 2 * w), _conv(2 * w, 2 * w)])
            self.dec2 = nn.ModuleList([_conv(4 * w, 2 * w)])
            self.dec1 = nn.ModuleList([_conv(4 * w, w)])
            self.dec0 = nn.ModuleList([_conv(2 * w, w)])
            self.out = nn.Conv2d(w, channels, 3, padding=1)
            nn.init.zeros_(self.out.bias)

    @staticmethod
    def _block(layers, h):
        for layer in layers:
            h = F.silu(layer(h))
        return h

    def forward(self, x, t, cond):
        b, _, hgt, wid = x.shape
        tex, pose, face = cond.masked_inputs()
        flags = cond.present.to(x.dtype)[:, :, None, None].expand(b, 3, hgt, wid)
        temb = time_embedding(t.to(x.dtype), self.n_freq)[:, :, None, None].expand(-1, -1, hgt, wid)
        h0 = self._block(self.enc0, torch.cat([x, tex, pose, face, flags, temb], dim=1))
        h1 = self._block(self.enc1, F.avg_pool2d(h0, 2))
        h2 = self._block(self.enc2, F.avg_pool2d(h1, 2))
        m = self._block(self.mid, F.avg_pool2d(h2, 2))
        u2 = self._block(self.dec2, torch.cat([F.interpolate(m, scale_factor=2.0), h2], dim=1))
        u1 = self._block(self.dec1, torch.cat([F.interpolate(u2, scale_factor=2.0), h1], dim=1))
        u0 = self._block(self.dec0, torch.cat([F.interpolate(u1, scale_factor=2.0), h0], dim=1))
        return self.out(u0)


class LinearVelocityNet(nn.Module):
    """Single 1x1 convolution over the same inputs; the loss is quadratic in its weights."""

    def __init__(self, channels=3, n_freq=N_FREQ, seed=0):
        super().__init__()
        self.n_freq = n_freq
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.proj = nn.Conv2d(channels + 12 + 2 * n_freq, channels, 1)

    def forward(self, x, t, cond):
        b, _, hgt, wid = x.shape
        tex, pose, face = cond.masked_inputs()
        flags = cond.present.to(x.dtype)[:, :, None, None].expand(b, 3, hgt, wid)
        temb = time_embedding(t.to(x.dtype), self.n_freq)[:, :, None, None].expand(-1, -1, hgt, wid)
        return self.proj(torch.cat([x, tex, pose, face, flags, temb], dim=1))


class VectorVelocityNet(nn.Module):
    """MLP velocity field for low-dimensional point data; ignores conditions."""

    def __init__(self, dim=2, hidden=128, n_freq=N_FREQ, seed=0):
        super().__init__()
        self.n_freq = n_freq
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = nn.Sequential(
                nn.Linear(dim + 2 * n_freq, hidden),
                nn.SiLU(),
                nn.Linear(hidden, hidden),
                nn.SiLU(),
                nn.Linear(hidden, hidden),
                nn.SiLU(),
                nn.Linear(hidden, dim),
            )

    def forward(self, x, t, cond=None):
        return self.net(torch.cat([x, time_embedding(t.to(x.dtype), self.n_freq)], dim=1))


def count_parameters(net):
    return sum(p.numel() for p in net.parameters())


# --- objective -------------------------------------------------------------


def _expand_t(t, like):
    return t.reshape((-1,) + (1,) * (like.dim() - 1))


def interpolate(x0, x1, t):
    """x_t = t*x1 + (1-t)*x0 with per-sample or scalar t."""
    if x0.shape != x1.shape:
        raise InputError(f"x0 {tuple(x0.shape)} and x1 {tuple(x1.shape)} differ")
    t = torch.as_tensor(t, dtype=x0.dtype)
    if torch.any((t < 0) | (t > 1)):
        raise InputError("t must lie in [0, 1]")
    if t.dim() > 0:
        t = _expand_t(t, x0)
    return t * x1 + (1 - t) * x0


@dataclass
class FlowBatch:
    x0: torch.Tensor
    x1: torch.Tensor
    t: torch.Tensor
    x_t: torch.Tensor

    @property
    def target(self):
        return self.x1 - self.x0

    def to(self, dtype):
        return FlowBatch(self.x0.to(dtype), self.x1.to(dtype), self.t.to(dtype), self.x_t.to(dtype))

    def index(self, idx):
        return FlowBatch(self.x0[idx], self.x1[idx], self.t[idx], self.x_t[idx])


def make_flow_batch(x0, generator=None, t=None, x1=None):
    """Draw noise and t ~ U[0,1] for data `x0` and build the interpolants."""
    if x1 is None:
        x1 = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    if t is None:
        t = torch.rand(x0.shape[0], generator=generator, dtype=x0.dtype)
    return FlowBatch(x0, x1, t, interpolate(x0, x1, t))


def _check_finite(name, tensor):
    if not torch.isfinite(tensor).all():
        bad = (~torch.isfinite(tensor)).sum().item()
        raise NumericError(f"{name}: {bad} of {tensor.numel()} values are not finite")


def squared_error(pred, target, mask=None):
    """Mean squared residual over all elements, or over masked elements when a mask is given."""
    resid = pred - target
    if mask is None:
        return (resid * resid).sum() / resid.numel()
    mask = mask.to(resid.dtype).expand_as(resid)
    count = mask.sum()
    masked = mask * resid
    return (masked * masked).sum() / count


def fm_loss(net, batch, cond=None):
    pred = net(batch.x_t, batch.t, cond)
    _check_finite("velocity prediction", pred)
    loss = squared_error(pred, batch.target)
    _check_finite("flow-matching loss", loss)
    return loss


def make_optimizer(params, lr=1e-4):
    return torch.optim.AdamW(params, lr=lr, betas=(0.9, 0.999), weight_decay=0.0)


def train_step(net, optimizer, batch, cond=None, dropout=None, loss_fn=None):
    """One optimizer step on the flow-matching loss; returns the scalar loss."""
    if dropout is not None and cond is not None:
        cond = apply_dropout(cond, dropout)
    optimizer.zero_grad(set_to_none=True)
    loss = loss_fn(net, batch, cond) if loss_fn is not None else fm_loss(net, batch, cond)
    loss.backward()
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NumericError("non-finite gradient; parameters left unchanged")
    optimizer.step()
    return float(loss.detach())


# --- sampling --------------------------------------------------------------


@torch.no_grad()
def integrate(net, x1, cond=None, steps=50, scheme="euler"):
    """Integrate dx/dt = v(x, t) from t=1 to t=0 on a uniform grid."""
    if steps < 1:
        raise InputError("steps must be >= 1")
    if scheme not in ("euler", "heun"):
        raise InputError(f"unknown scheme {scheme!r}")
    x = x1.clone()
    b = x.shape[0]
    dt = -1.0 / steps
    for i in range(steps):
        t = 1.0 - i / steps
        tt = torch.full((b,), t, dtype=x.dtype)
        v = net(x, tt, cond)
        if scheme == "euler":
            x = x + dt * v
        else:
            x_pred = x + dt * v
            t_next = torch.full((b,), 1.0 - (i + 1) / steps, dtype=x.dtype)
            v2 = net(x_pred, t_next, cond)
            x = x + dt * 0.5 * (v + v2)
        if not torch.isfinite(x).all():
            raise NumericError(f"non-finite state at integration step {i} (t={t:.4f})")
    return x


# --- gradient verification -------------------------------------------------


def grad_check(net, batch, cond=None, eps=1e-4, n_params=64, seed=0, loss_fn=None):
    """Max relative error between autograd and central differences on random parameters.

    Runs in float64 on a copy of `net`.
    """
    import copy

    net = copy.deepcopy(net).double()
    batch = batch.to(torch.float64)
    cond = cond.to(torch.float64) if cond is not None else None
    loss_fn = loss_fn or fm_loss

    params = [p for p in net.parameters() if p.requires_grad]
    net.zero_grad()
    loss = loss_fn(net, batch, cond)
    loss.backward()
    grads = [p.grad.detach().clone() for p in params]
    scale = max(float(g.abs().max()) for g in grads)

    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(sizes.sum(), size=min(n_params, sizes.sum()), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    with torch.no_grad():
        for fi in flat_idx:
            pi = int(np.searchsorted(bounds, fi, side="right"))
            local = int(fi - (bounds[pi] - sizes[pi]))
            flat = params[pi].view(-1)
            orig = flat[local].item()
            flat[local] = orig + eps
            up = float(loss_fn(net, batch, cond))
            flat[local] = orig - eps
            down = float(loss_fn(net, batch, cond))
            flat[local] = orig
            numeric = (up - down) / (2 * eps)
            analytic = float(grads[pi].view(-1)[local])
            # entries below 1e-5 of the largest gradient sit at the float64 rounding limit of
            # a 1e-4 central difference; they are measured against that floor instead
            denom = max(abs(numeric), abs(analytic), 1e-5 * scale, 1e-12)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst


def grad_norm(net, batch, cond=None, loss_fn=None):
    net.zero_grad()
    loss = (loss_fn or fm_loss)(net, batch, cond)
    loss.backward()
    total = sum(float((p.grad**2).sum()) for p in net.parameters() if p.grad is not None)
    net.zero_grad()
    return math.sqrt(total)
