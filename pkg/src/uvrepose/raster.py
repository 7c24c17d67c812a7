"""Software rasterization in image space and UV space.

Both directions share one fragment generator: pixel (or texel) centres sit at
half-integer coordinates, a centre belongs to a triangle when it is strictly
inside or on an edge owned by the top-left rule, so two triangles that share an
edge never both claim a centre on it.

Image-space visibility uses a z-buffer with perspective-correct depth.  The
inverse mapping (UV texel -> image position) follows the affine rule
``x_src = sum_k b_k * V_img[f, k]`` and the forward renderer interpolates UVs
with the same affine weights, so the two are exact inverses per triangle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .body import PART_COLORS, project
from .errors import ConfigError, InputError


@dataclass(frozen=True)
class RasterConfig:
    tau_dist: float = 0.25
    eps_z: float = 1e-3
    cull_backfaces: bool = True

    def __post_init__(self):
        if not (0.0 < self.tau_dist <= 1.0):
            raise ConfigError(f"tau_dist must lie in (0, 1], got {self.tau_dist}")
        if not self.eps_z > 0:
            raise ConfigError(f"eps_z must be positive, got {self.eps_z}")


@dataclass
class TextureMap:
    pixels: np.ndarray  # (H, W, C) in [0, 1]
    mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.pixels.shape[:2] != self.mask.shape:
            raise InputError(f"pixel grid {self.pixels.shape[:2]} does not match mask {self.mask.shape}")
        self.pixels = np.where(self.mask[..., None], self.pixels, 0.0)

    @property
    def shape(self):
        return self.mask.shape

    def copy(self):
        return TextureMap(self.pixels.copy(), self.mask.copy())


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _owns_ties(ax, ay, bx, by):
    # antisymmetric in the edge direction: exactly one of the two triangles sharing an edge owns it
    dx, dy = bx - ax, by - ay
    return (dy < 0) | ((dy == 0) & (dx > 0))


def fragments(tri, height, width):
    """Cover test for every triangle against every pixel centre in its bounding box.

    tri: (F, 3, 2) positions in pixel units (x = column, y = row).
    Returns (face index, row, col, barycentric weights (n, 3)) of covered centres.
    """
    tri = np.asarray(tri, dtype=float)
    empty = (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)))
    if len(tri) == 0:
        return empty
    x, y = tri[..., 0], tri[..., 1]
    area = _edge(x[:, 0], y[:, 0], x[:, 1], y[:, 1], x[:, 2], y[:, 2])
    ok = np.isfinite(area) & (area != 0)
    # orient every triangle positively; remember the swap to restore vertex order
    swap = area < 0
    order = np.where(swap[:, None], [0, 2, 1], [0, 1, 2])
    x = np.take_along_axis(x, order, axis=1)
    y = np.take_along_axis(y, order, axis=1)
    area = np.abs(area)

    c0 = np.ceil(x.min(axis=1) - 0.5)
    c1 = np.floor(x.max(axis=1) - 0.5)
    r0 = np.ceil(y.min(axis=1) - 0.5)
    r1 = np.floor(y.max(axis=1) - 0.5)
    c0, c1 = np.clip(c0, 0, width - 1), np.clip(c1, 0, width - 1)
    r0, r1 = np.clip(r0, 0, height - 1), np.clip(r1, 0, height - 1)
    nx = np.where(ok, c1 - c0 + 1, 0).clip(0).astype(np.int64)
    ny = np.where(ok, r1 - r0 + 1, 0).clip(0).astype(np.int64)
    nx[~np.isfinite(c0) | ~np.isfinite(c1)] = 0
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return empty
    f = np.repeat(np.arange(len(tri)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    col = c0[f].astype(np.int64) + local % nx[f]
    row = r0[f].astype(np.int64) + local // nx[f]
    px, py = col + 0.5, row + 0.5

    xf, yf = x[f], y[f]
    w = np.empty((total, 3))
    inside = np.ones(total, dtype=bool)
    for k in range(3):
        a, b = (k + 1) % 3, (k + 2) % 3
        w[:, k] = _edge(xf[:, a], yf[:, a], xf[:, b], yf[:, b], px, py)
        tie = _owns_ties(xf[:, a], yf[:, a], xf[:, b], yf[:, b])
        inside &= (w[:, k] > 0) | ((w[:, k] == 0) & tie)
    f, row, col, w = f[inside], row[inside], col[inside], w[inside]
    bary = w / area[f][:, None]
    # undo the orientation swap so weights follow the caller's vertex order
    sw = swap[f]
    bary[sw] = bary[sw][:, [0, 2, 1]]
    return f, row, col, bary


def barycentric(tri, points):
    """Barycentric weights of `points` (n,2) w.r.t. triangles `tri` (n,3,2); may lie outside [0,1]."""
    x, y = tri[..., 0], tri[..., 1]
    px, py = points[:, 0], points[:, 1]
    area = _edge(x[:, 0], y[:, 0], x[:, 1], y[:, 1], x[:, 2], y[:, 2])
    w0 = _edge(x[:, 1], y[:, 1], x[:, 2], y[:, 2], px, py)
    w1 = _edge(x[:, 2], y[:, 2], x[:, 0], y[:, 0], px, py)
    w2 = _edge(x[:, 0], y[:, 0], x[:, 1], y[:, 1], px, py)
    return np.stack([w0, w1, w2], axis=-1) / area[:, None]


@dataclass
class ZBuffer:
    face: np.ndarray  # (H, W) winning face index, -1 = background
    depth: np.ndarray  # (H, W) camera depth, inf = background
    bary: np.ndarray  # (H, W, 3) screen-space weights of the winner
    screen: np.ndarray  # (N, 2) projected vertices
    vdepth: np.ndarray  # (N,) vertex depths


def zbuffer(mesh, camera):
    """Nearest surface per pixel centre over every face (front or back facing)."""
    h, w = camera.height, camera.width
    face_img = np.full((h, w), -1, dtype=np.int64)
    depth_img = np.full((h, w), np.inf)
    bary_img = np.zeros((h, w, 3))
    if len(mesh.faces) == 0:
        return ZBuffer(face_img, depth_img, bary_img, np.zeros((0, 2)), np.zeros(0))
    screen, vdepth = project(mesh, camera)
    f, row, col, bary = fragments(screen[mesh.faces], h, w)
    inv = (bary / vdepth[mesh.faces[f]]).sum(axis=1)
    depth = 1.0 / inv
    pix = row * w + col
    # nearest depth wins; ties go to the lower face index
    order = np.lexsort((f, depth, pix))
    first = order[np.unique(pix[order], return_index=True)[1]]
    face_img.reshape(-1)[pix[first]] = f[first]
    depth_img.reshape(-1)[pix[first]] = depth[first]
    bary_img.reshape(-1, 3)[pix[first]] = bary[first]
    return ZBuffer(face_img, depth_img, bary_img, screen, vdepth)


def face_normals(vertices, faces):
    tri = vertices[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(norm > 0, norm, 1.0)


def front_facing(mesh, camera):
    tri = mesh.vertices[mesh.faces]
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    to_cam = np.asarray(camera.center) - tri.mean(axis=1)
    return np.einsum("ij,ij->i", normal, to_cam) > 0


def retained_faces(mesh, tau_dist):
    """Faces whose three UV edges are all no longer than tau_dist."""
    uv = mesh.uv[mesh.faces]
    lengths = np.linalg.norm(uv - np.roll(uv, -1, axis=1), axis=-1)
    return np.all(lengths <= tau_dist, axis=1)


def bilinear(image, x, y):
    """Sample `image` (H,W,C) at continuous pixel coords; centres at +0.5, clamped to the interior."""
    h, w = image.shape[:2]
    fx = np.clip(np.asarray(x, dtype=float) - 0.5, 0.0, w - 1)
    fy = np.clip(np.asarray(y, dtype=float) - 0.5, 0.0, h - 1)
    x0 = np.minimum(np.floor(fx).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(fy).astype(np.int64), max(h - 2, 0))
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    ax, ay = (fx - x0)[:, None], (fy - y0)[:, None]
    return (
        image[y0, x0] * (1 - ax) * (1 - ay)
        + image[y0, x1] * ax * (1 - ay)
        + image[y1, x0] * (1 - ax) * ay
        + image[y1, x1] * ax * ay
    )


def _uv_fragments(mesh, size, tau_dist):
    keep = np.flatnonzero(retained_faces(mesh, tau_dist))
    tri = mesh.uv[mesh.faces[keep]] * np.array([size[1], size[0]], dtype=float)
    f, row, col, bary = fragments(tri, size[0], size[1])
    return keep[f], row, col, bary


def _texel_visibility(mesh, camera, config, size):
    """Per covered texel: face, texel index, source image position, visible flag."""
    face, row, col, bary = _uv_fragments(mesh, size, config.tau_dist)
    zb = zbuffer(mesh, camera)
    if len(face) == 0:
        return face, row, col, np.zeros((0, 2)), np.zeros(0, dtype=bool)
    verts_img = zb.screen[mesh.faces[face]]  # (n, 3, 2)
    x_src = np.einsum("nk,nkd->nd", bary, verts_img)
    h, w = camera.height, camera.width
    inside = (x_src[:, 0] >= 0) & (x_src[:, 0] < w) & (x_src[:, 1] >= 0) & (x_src[:, 1] < h)
    visible = inside.copy()
    if config.cull_backfaces:
        visible &= front_facing(mesh, camera)[face]

    # depth of the texel's own surface point and of the z-buffer winner, both at x_src
    d_self = 1.0 / (bary / zb.vdepth[mesh.faces[face]]).sum(axis=1)
    qx = np.clip(np.floor(x_src[:, 0]).astype(np.int64), 0, w - 1)
    qy = np.clip(np.floor(x_src[:, 1]).astype(np.int64), 0, h - 1)
    idx = np.flatnonzero(visible)
    if len(idx):
        # Depth test at the continuous position x_src rather than at a pixel centre: every
        # face whose screen box touches pixel floor(x_src) is a candidate, and it hides the
        # texel if it contains x_src and lies more than eps_z in front.  Pixel-centre
        # winners miss thin grazing triangles and misjudge a band along silhouettes.
        keys, bin_face = _face_bins(zb.screen[mesh.faces], h, w)
        k = qy[idx] * w + qx[idx]
        lo = np.searchsorted(keys, k, side="left")
        n = np.searchsorted(keys, k, side="right") - lo
        t = np.repeat(np.arange(len(idx)), n)
        g = bin_face[np.repeat(lo, n) + (np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n))]
        lam = barycentric(zb.screen[mesh.faces[g]], x_src[idx][t])
        inside = (lam >= -1e-9).all(axis=1) & (g != face[idx][t])
        inv = (lam / zb.vdepth[mesh.faces[g]]).sum(axis=1)
        with np.errstate(divide="ignore"):
            d_occ = np.where(inv > 0, 1.0 / inv, np.inf)
        hides = inside & (d_occ < d_self[idx][t] - config.eps_z)
        visible[idx] = np.bincount(t[hides], minlength=len(idx)) == 0
    return face, row, col, x_src, visible


def _face_bins(screen_tri, height, width):
    """(pixel key, face) pairs for every pixel each face's screen bounding box touches, sorted."""
    lo = np.floor(screen_tri.min(axis=1)).astype(np.int64)
    hi = np.floor(screen_tri.max(axis=1)).astype(np.int64)
    c0, r0 = np.clip(lo[:, 0], 0, width - 1), np.clip(lo[:, 1], 0, height - 1)
    c1, r1 = np.clip(hi[:, 0], 0, width - 1), np.clip(hi[:, 1], 0, height - 1)
    onscreen = (hi[:, 0] >= 0) & (lo[:, 0] < width) & (hi[:, 1] >= 0) & (lo[:, 1] < height)
    nx = np.where(onscreen, c1 - c0 + 1, 0)
    ny = np.where(onscreen, r1 - r0 + 1, 0)
    counts = nx * ny
    f = np.repeat(np.arange(len(screen_tri)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    keys = (r0[f] + local // nx[f]) * width + c0[f] + local % nx[f]
    order = np.argsort(keys, kind="stable")
    return keys[order], f[order]


def _check_size(size):
    h, w = size
    for n in (h, w):
        if n < 1 or (n & (n - 1)):
            raise InputError(f"texture dimensions must be powers of two, got {size}")


def visibility_mask(mesh, camera, config=None, size=(256, 256)):
    """Binary UV-grid mask of texels whose surface point is visible from `camera`."""
    config = config or RasterConfig()
    _check_size(size)
    _, row, col, _, visible = _texel_visibility(mesh, camera, config, size)
    mask = np.zeros(size, dtype=bool)
    mask[row[visible], col[visible]] = True
    return mask


def rasterize_uv(mesh, camera, image, config=None, size=(256, 256)):
    """Partial texture of `image` unwrapped into the mesh's UV atlas."""
    config = config or RasterConfig()
    _check_size(size)
    image = np.asarray(image, dtype=float)
    if image.shape[:2] != (camera.height, camera.width):
        raise InputError(
            f"image resolution {image.shape[1]}x{image.shape[0]} does not match camera "
            f"{camera.width}x{camera.height}"
        )
    if image.ndim == 2:
        image = image[..., None]
    _, row, col, x_src, visible = _texel_visibility(mesh, camera, config, size)
    pixels = np.zeros(size + (image.shape[2],))
    mask = np.zeros(size, dtype=bool)
    row, col, x_src = row[visible], col[visible], x_src[visible]
    pixels[row, col] = bilinear(image, x_src[:, 0], x_src[:, 1])
    mask[row, col] = True
    return TextureMap(pixels, mask)


def _texture_lookup(texture, u, v):
    """Mask-aware bilinear lookup at UV coordinates; returns (values, any-valid flag)."""
    h, w = texture.shape
    fx = np.clip(u * w - 0.5, 0.0, w - 1)
    fy = np.clip(v * h - 0.5, 0.0, h - 1)
    x0 = np.minimum(np.floor(fx).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(fy).astype(np.int64), max(h - 2, 0))
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    ax, ay = fx - x0, fy - y0
    acc = np.zeros((len(u), texture.pixels.shape[2]))
    wsum = np.zeros(len(u))
    for yy, xx, wt in (
        (y0, x0, (1 - ax) * (1 - ay)),
        (y0, x1, ax * (1 - ay)),
        (y1, x0, (1 - ax) * ay),
        (y1, x1, ax * ay),
    ):
        wt = wt * texture.mask[yy, xx]
        acc += texture.pixels[yy, xx] * wt[:, None]
        wsum += wt
    valid = wsum > 0
    acc[valid] /= wsum[valid][:, None]
    acc[~valid] = 0.0
    return acc, valid


def render_from_texture(mesh, camera, texture, return_mask=False):
    """Forward render of a (possibly partial) texture.  Masked footprints render black."""
    h, w = camera.height, camera.width
    channels = texture.pixels.shape[2]
    image = np.zeros((h, w, channels))
    valid_img = np.zeros((h, w), dtype=bool)
    zb = zbuffer(mesh, camera)
    covered = zb.face >= 0
    if covered.any():
        g = zb.face[covered]
        uv = np.einsum("nk,nkd->nd", zb.bary[covered], mesh.uv[mesh.faces[g]])
        values, valid = _texture_lookup(texture, uv[:, 0], uv[:, 1])
        image[covered] = values
        valid_img[covered] = valid
    return (image, valid_img) if return_mask else image


def foreground(mesh, camera):
    return zbuffer(mesh, camera).face >= 0


def render_pose_image(mesh, camera):
    """Part-coloured flat-shaded render used as the pose condition."""
    image = np.zeros((camera.height, camera.width, 3))
    if len(mesh.faces) == 0:
        return image
    zb = zbuffer(mesh, camera)
    covered = zb.face >= 0
    g = zb.face[covered]
    normals = face_normals(mesh.vertices, mesh.faces)
    to_cam = np.asarray(camera.center) - mesh.vertices[mesh.faces].mean(axis=1)
    to_cam /= np.linalg.norm(to_cam, axis=1, keepdims=True)
    shade = 0.35 + 0.65 * np.abs(np.einsum("ij,ij->i", normals, to_cam))
    image[covered] = PART_COLORS[mesh.face_part[g]] * shade[g][:, None]
    return image


def part_footprint(mesh, camera, part_index):
    """Pixels whose visible surface belongs to the given body part."""
    zb = zbuffer(mesh, camera)
    out = np.zeros(zb.face.shape, dtype=bool)
    covered = zb.face >= 0
    out[covered] = mesh.face_part[zb.face[covered]] == part_index
    return out
