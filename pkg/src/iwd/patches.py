"""Images as empirical patch distributions.

Images are float64 arrays shaped (H, W, C) with values in [0, 1]. A patch grid
is a k x k window moved with stride s; each window, flattened in (row, col,
channel) order, becomes one equally weighted atom.
"""

import re
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError, GeometryError, PathError, ValidationError


@dataclass(frozen=True)
class PatchGrid:
    kernel: int = 3
    stride: int = None

    def __post_init__(self):
        if self.stride is None:
            object.__setattr__(self, "stride", self.kernel)
        if self.kernel < 1 or self.stride < 1:
            raise ValidationError(f"kernel and stride must be >= 1, got {self.kernel}, {self.stride}")

    @property
    def tiles(self):
        return self.stride == self.kernel


@dataclass
class PatchDistribution:
    atoms: np.ndarray

    def __post_init__(self):
        self.atoms = np.atleast_2d(np.asarray(self.atoms, dtype=np.float64))
        if self.atoms.shape[0] < 1:
            raise ValidationError("a patch distribution needs at least one atom")

    @property
    def n(self):
        return self.atoms.shape[0]

    @property
    def dim(self):
        return self.atoms.shape[1]

    @property
    def weights(self):
        return np.full(self.n, 1.0 / self.n)


def as_image(img):
    """Validate and normalize to a float64 (H, W, C) array."""
    x = np.asarray(img, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3 or x.shape[2] not in (1, 3):
        raise DimensionError(f"image must be (H, W) or (H, W, C) with C in {{1, 3}}, got {x.shape}")
    if not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0:
        raise ValidationError("image intensities must lie in [0, 1]")
    return x


def grid_shape(H, W, grid):
    k, s = grid.kernel, grid.stride
    if k > min(H, W) or (H - k) % s or (W - k) % s:
        raise GeometryError(f"grid k={k}, s={s} does not fit image H={H}, W={W}")
    return (H - k) // s + 1, (W - k) // s + 1


def n_patches(H, W, grid):
    gh, gw = grid_shape(H, W, grid)
    return gh * gw


def _windows(x, grid):
    """(..., gh, gw, k, k, C) view of a (..., H, W, C) array."""
    H, W = x.shape[-3], x.shape[-2]
    gh, gw = grid_shape(H, W, grid)
    k, s = grid.kernel, grid.stride
    v = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(-3, -2))
    # sliding_window_view puts the window axes last: (..., H-k+1, W-k+1, C, k, k)
    v = v[..., ::s, ::s, :, :, :]
    return np.moveaxis(v, -3, -1)


def patch_array(x, grid):
    """Atoms as a (..., N, k*k*C) array for one image or a leading batch."""
    x = np.asarray(x, dtype=np.float64)
    w = _windows(x, grid)
    lead = x.shape[:-3]
    return np.ascontiguousarray(w).reshape(*lead, w.shape[-5] * w.shape[-4], -1)


def extract_patches(img, grid=PatchGrid()):
    return PatchDistribution(patch_array(as_image(img), grid))


def fold_patches(grads, shape, grid):
    """Adjoint of :func:`patch_array`: scatter-add atom gradients back to pixels.

    ``grads`` is (..., N, k*k*C); ``shape`` is the (H, W, C) image shape.
    """
    H, W, C = shape
    gh, gw = grid_shape(H, W, grid)
    k, s = grid.kernel, grid.stride
    grads = np.asarray(grads, dtype=np.float64)
    lead = grads.shape[:-2]
    g = grads.reshape(*lead, gh, gw, k, k, C)
    if grid.tiles and gh * k == H and gw * k == W:
        return np.swapaxes(g, -4, -3).reshape(*lead, H, W, C)
    out = np.zeros((*lead, H, W, C))
    for r in range(gh):
        for c in range(gw):
            out[..., r * s:r * s + k, c * s:c * s + k, :] += g[..., r, c, :, :, :]
    return out


def _check_tiling(x, grid):
    if not grid.tiles:
        raise GeometryError("patch permutation needs a non-overlapping grid (stride == kernel)")
    H, W = x.shape[:2]
    if H % grid.kernel or W % grid.kernel:
        raise GeometryError(f"kernel {grid.kernel} does not tile image H={H}, W={W}")


def permute_patches(img, grid, perm):
    """Tile i of the output is tile perm[i] of the input (row-major tile order)."""
    x = as_image(img)
    _check_tiling(x, grid)
    k = grid.kernel
    H, W, C = x.shape
    gh, gw = H // k, W // k
    perm = np.asarray(perm)
    if perm.shape != (gh * gw,) or not np.array_equal(np.sort(perm), np.arange(gh * gw)):
        raise ValidationError(f"perm must be a permutation of {gh * gw} tiles")
    tiles = x.reshape(gh, k, gw, k, C).swapaxes(1, 2).reshape(gh * gw, k, k, C)
    out = tiles[perm].reshape(gh, gw, k, k, C).swapaxes(1, 2).reshape(H, W, C)
    return out


def patch_interpolate(p, q, rho):
    """Atom-wise convex combination rho * p + (1 - rho) * q.

    ``rho`` is a scalar or one weight per atom.
    """
    if p.atoms.shape != q.atoms.shape:
        raise DimensionError(f"patch sets differ in shape: {p.atoms.shape} vs {q.atoms.shape}")
    r = np.asarray(rho, dtype=np.float64)
    if np.any(r < 0) or np.any(r > 1):
        raise ValidationError("rho must lie in [0, 1]")
    if r.ndim == 1:
        r = r[:, None]
    return PatchDistribution(r * p.atoms + (1.0 - r) * q.atoms)


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------

_TOKEN = re.compile(rb"(?:\s+|#[^\n]*\n?)*([^\s#]+)")


def read_pnm(path):
    """Load a binary PGM (P5) or PPM (P6) with maxval 255 into [0, 1]."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError as exc:
        raise PathError(f"no such image: {path}") from exc
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise FormatError("truncated PNM header", offset=pos)
        fields.append(m.group(1))
        pos = m.end()
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported PNM magic {magic!r}", offset=0)
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise FormatError("non-numeric PNM header field", offset=0) from exc
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", offset=0)
    pos += 1  # single whitespace byte before the raster
    C = 1 if magic == b"P5" else 3
    need = width * height * C
    raster = data[pos:pos + need]
    if len(raster) != need:
        raise FormatError("truncated PNM raster", offset=pos + len(raster))
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, C)
    return arr.astype(np.float64) / 255.0


def write_pnm(path, img):
    x = as_image(img)
    H, W, C = x.shape
    raw = np.rint(x * 255.0).astype(np.uint8)
    magic = b"P5" if C == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (W, H))
        fh.write(raw.tobytes())
