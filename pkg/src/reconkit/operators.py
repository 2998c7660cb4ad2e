"""Linear forward-operator algebra for imaging inverse problems.

Every operator is an :class:`OperatorHandle` bundling a forward map, its
exact adjoint (the transpose of the same discretization, never an
independent one), domain/range shapes and a cached spectral-norm
estimate.  Images are numpy arrays of shape (C, H, W); complex images use
2 channels (real, imaginary).
"""

from __future__ import annotations

import numpy as np
import scipy.fft
import scipy.sparse

__all__ = [
    "OperatorHandle",
    "BlurKernel",
    "CoarseOperator",
    "identity_operator",
    "compose",
    "scale_operator",
    "operator_norm",
    "normalize",
    "dft2",
    "idft2",
    "make_blur",
    "make_gaussian_kernel",
    "make_motion_kernel",
    "make_inpainting",
    "make_bernoulli_mask",
    "make_mri",
    "make_mri_mask",
    "make_multicoil_mri",
    "make_sensitivity_maps",
    "make_ct_radon",
    "make_downsampling",
    "make_compressed_sensing",
    "make_demosaic",
    "make_upsampler",
    "make_coarse",
    "dense_matrix",
]


class OperatorHandle:
    """A linear map with paired forward/adjoint application."""

    def __init__(self, domain_shape, range_shape, apply_fn, adjoint_fn,
                 kind="generic", spec=None, arrays=None):
        self.domain_shape = tuple(domain_shape)
        self.range_shape = tuple(range_shape)
        self._apply = apply_fn
        self._adjoint = adjoint_fn
        self.kind = kind
        self.spec = dict(spec) if spec else {"kind": kind}
        self.arrays = dict(arrays) if arrays else {}
        self.norm_estimate = None
        self._coarse_cache = {}

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.domain_shape:
            raise ValueError(f"domain shape mismatch: {x.shape} != {self.domain_shape}")
        return np.asarray(self._apply(x), dtype=np.float64)

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != self.range_shape:
            raise ValueError(f"range shape mismatch: {y.shape} != {self.range_shape}")
        return np.asarray(self._adjoint(y), dtype=np.float64)

    def normal(self, x: np.ndarray) -> np.ndarray:
        """A^T A x."""
        return self.adjoint(self.apply(x))

    def norm(self, iters: int = 100, tol: float = 1e-6, seed: int = 0) -> float:
        if self.norm_estimate is None:
            self.norm_estimate = operator_norm(self, iters=iters, tol=tol, seed=seed)
        return self.norm_estimate

    def __repr__(self):
        return f"OperatorHandle({self.kind}, {self.domain_shape} -> {self.range_shape})"


class BlurKernel:
    """Odd-sized nonnegative 2-D convolution kernel summing to one."""

    def __init__(self, array: np.ndarray):
        arr = np.asarray(array, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError("blur kernel must be square")
        if arr.shape[0] % 2 == 0:
            raise ValueError("blur kernel side length must be odd")
        if np.any(arr < 0):
            raise ValueError("blur kernel must be nonnegative")
        s = arr.sum()
        if s <= 0:
            raise ValueError("blur kernel must have positive mass")
        self.array = arr / s

    @property
    def size(self) -> int:
        return self.array.shape[0]


class CoarseOperator(OperatorHandle):
    """Forward operator preceded by sinc upsampling (or its coarse-grid
    fast-path surrogate), normalized to unit norm."""

    def __init__(self, base, scale, path, **kw):
        super().__init__(**kw)
        self.base = base
        self.scale = scale
        self.path = path  # "generic" | "kernel-downscaled" | "mask-downscaled"


# ---------------------------------------------------------------------------
# algebra
# ---------------------------------------------------------------------------


def identity_operator(shape) -> OperatorHandle:
    return OperatorHandle(shape, shape, lambda x: x, lambda y: y, kind="identity")


def compose(a: OperatorHandle, b: OperatorHandle, kind=None) -> OperatorHandle:
    """a after b (x -> a(b(x)))."""
    if b.range_shape != a.domain_shape:
        raise ValueError(f"compose shape mismatch: {b.range_shape} vs {a.domain_shape}")
    return OperatorHandle(
        b.domain_shape, a.range_shape,
        lambda x: a.apply(b.apply(x)),
        lambda y: b.adjoint(a.adjoint(y)),
        kind=kind or f"{a.kind}*{b.kind}",
    )


def scale_operator(op: OperatorHandle, c: float) -> OperatorHandle:
    out = OperatorHandle(
        op.domain_shape, op.range_shape,
        lambda x: c * op.apply(x),
        lambda y: c * op.adjoint(y),
        kind=op.kind, spec=op.spec, arrays=op.arrays,
    )
    return out


def operator_norm(op: OperatorHandle, iters: int = 100, tol: float = 1e-6, seed: int = 0) -> float:
    """Spectral norm via power iteration on A^T A."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(op.domain_shape)
    nx = np.linalg.norm(x)
    if nx == 0:
        return 0.0
    x /= nx
    prev = 0.0
    for _ in range(iters):
        z = op.normal(x)
        nz = np.linalg.norm(z)
        if nz == 0:
            return 0.0
        est = np.sqrt(nz)
        x = z / nz
        if prev > 0 and abs(est - prev) <= tol * prev:
            prev = est
            break
        prev = est
    return float(prev)


def normalize(op: OperatorHandle, iters: int = 100, tol: float = 1e-8, seed: int = 0) -> OperatorHandle:
    """Rescale an operator to unit spectral norm."""
    c = op.norm(iters=iters, tol=tol, seed=seed)
    if c == 0:
        raise ValueError("cannot normalize the zero operator")
    out = scale_operator(op, 1.0 / c)
    out.norm_estimate = 1.0
    return out


# ---------------------------------------------------------------------------
# complex helpers and Fourier transforms
# ---------------------------------------------------------------------------


def _to_complex(x: np.ndarray) -> np.ndarray:
    return x[0] + 1j * x[1]


def _from_complex(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag])


def dft2(x: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DFT of a 2-channel (real, imag) image."""
    return _from_complex(np.fft.fft2(_to_complex(x), norm="ortho"))


def idft2(x: np.ndarray) -> np.ndarray:
    return _from_complex(np.fft.ifft2(_to_complex(x), norm="ortho"))


# ---------------------------------------------------------------------------
# blur
# ---------------------------------------------------------------------------


def make_gaussian_kernel(sigma_blur: float, size: int = 31) -> BlurKernel:
    """Sampled isotropic Gaussian, normalized to unit mass."""
    if sigma_blur <= 0:
        raise ValueError("sigma_blur must be positive")
    if size % 2 == 0:
        raise ValueError("kernel size must be odd")
    r = np.arange(size) - size // 2
    g = np.exp(-0.5 * (r / sigma_blur) ** 2)
    k = np.outer(g, g)
    return BlurKernel(k)


def make_motion_kernel(length_scale: float, amplitude: float, size: int = 31,
                       seed: int = 0, num_points: int = 1000) -> BlurKernel:
    """Random motion kernel: a smooth Gaussian-process trajectory (RBF
    covariance, length scale ``length_scale``, amplitude ``amplitude``)
    rasterized with bilinear splatting."""
    if size % 2 == 0:
        raise ValueError("kernel size must be odd")
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, num_points)
    if amplitude <= 0:
        traj = np.zeros((num_points, 2))
    else:
        d2 = (t[:, None] - t[None, :]) ** 2
        cov = amplitude ** 2 * np.exp(-0.5 * d2 / max(length_scale, 1e-6) ** 2)
        cov[np.diag_indices_from(cov)] += 1e-10
        chol = np.linalg.cholesky(cov)
        traj = chol @ rng.standard_normal((num_points, 2))
    # center the trajectory and map GP units to pixels
    traj = traj - traj.mean(axis=0)
    px = traj * (size // 2)
    k = np.zeros((size, size))
    c = size // 2
    for dx, dy in px:
        u = np.clip(c + dx, 0, size - 1 - 1e-9)
        v = np.clip(c + dy, 0, size - 1 - 1e-9)
        i0, j0 = int(u), int(v)
        fu, fv = u - i0, v - j0
        k[i0, j0] += (1 - fu) * (1 - fv)
        k[i0 + 1, j0] += fu * (1 - fv)
        k[i0, j0 + 1] += (1 - fu) * fv
        k[i0 + 1, j0 + 1] += fu * fv
    return BlurKernel(k)


def make_blur(kernel: BlurKernel, image_shape) -> OperatorHandle:
    """Per-channel valid cross-correlation with the kernel (no padding)."""
    c, h, w = image_shape
    k = kernel.array
    ks = k.shape[0]
    if ks >= h or ks >= w:
        raise ValueError("kernel must be smaller than the image")
    hout, wout = h - ks + 1, w - ks + 1

    def apply_fn(x):
        win = np.lib.stride_tricks.sliding_window_view(x, (ks, ks), axis=(1, 2))
        return np.einsum("chwij,ij->chw", win, k, optimize=True)

    def adjoint_fn(y):
        out = np.zeros((c, h, w))
        for i in range(ks):
            for j in range(ks):
                out[:, i:i + hout, j:j + wout] += k[i, j] * y
        return out

    return OperatorHandle(
        image_shape, (c, hout, wout), apply_fn, adjoint_fn,
        kind="blur", spec={"kind": "blur", "kernel_size": ks},
        arrays={"kernel": k},
    )


# ---------------------------------------------------------------------------
# inpainting / demosaicing
# ---------------------------------------------------------------------------


def make_bernoulli_mask(shape, p: float, seed: int = 0, per_channel: bool = False) -> np.ndarray:
    """Binary keep-mask with keep probability p; pixel-wise masking shares
    the mask across channels unless ``per_channel``."""
    rng = np.random.default_rng(seed)
    c, h, w = shape
    if per_channel:
        return (rng.random((c, h, w)) < p).astype(np.float64)
    m = (rng.random((h, w)) < p).astype(np.float64)
    return np.broadcast_to(m, (c, h, w)).copy()


def make_inpainting(mask: np.ndarray) -> OperatorHandle:
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("inpainting mask must be binary")
    shape = mask.shape
    return OperatorHandle(
        shape, shape,
        lambda x: mask * x, lambda y: mask * y,
        kind="inpainting", spec={"kind": "inpainting"}, arrays={"mask": mask},
    )


def make_demosaic(image_shape) -> OperatorHandle:
    """RGGB Bayer selection: one color channel kept per pixel."""
    c, h, w = image_shape
    if c != 3:
        raise ValueError("demosaicing expects a 3-channel image")
    if h % 2 or w % 2:
        raise ValueError("demosaicing expects even spatial extents")
    sel = np.zeros((3, h, w))
    sel[0, 0::2, 0::2] = 1  # R
    sel[1, 0::2, 1::2] = 1  # G
    sel[1, 1::2, 0::2] = 1  # G
    sel[2, 1::2, 1::2] = 1  # B

    def apply_fn(x):
        return (sel * x).sum(axis=0, keepdims=True)

    def adjoint_fn(y):
        return sel * y

    return OperatorHandle(
        image_shape, (1, h, w), apply_fn, adjoint_fn,
        kind="demosaic", spec={"kind": "demosaic"}, arrays={"selector": sel},
    )


# ---------------------------------------------------------------------------
# MRI
# ---------------------------------------------------------------------------


def make_mri_mask(image_shape, acceleration: int, center_fraction: float = 0.08,
                  seed: int = 0) -> np.ndarray:
    """Cartesian line mask (rows of k-space): the central
    ``center_fraction`` of lines are always kept, plus uniformly random
    lines up to ``H / acceleration`` in total."""
    h = image_shape[-2]
    w = image_shape[-1]
    n_keep = int(round(h / acceleration))
    n_center = max(1, int(round(center_fraction * h)))
    n_center = min(n_center, n_keep)
    lines = np.zeros(h, dtype=bool)
    start = (h - n_center) // 2
    lines[start:start + n_center] = True
    rng = np.random.default_rng(seed)
    rest = np.flatnonzero(~lines)
    extra = n_keep - n_center
    if extra > 0:
        lines[rng.choice(rest, size=extra, replace=False)] = True
    return np.broadcast_to(lines[:, None], (h, w)).astype(np.float64).copy()


def make_mri(mask: np.ndarray, image_shape) -> OperatorHandle:
    """Single-coil MRI: y = diag(m) F x with unitary F, on 2-channel
    (real, imag) images."""
    c, h, w = image_shape
    if c != 2:
        raise ValueError("MRI expects a 2-channel (real, imag) image")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (h, w):
        raise ValueError("mask shape must match spatial extents")

    def apply_fn(x):
        return _from_complex(mask * np.fft.fft2(_to_complex(x), norm="ortho"))

    def adjoint_fn(y):
        return _from_complex(np.fft.ifft2(mask * _to_complex(y), norm="ortho"))

    return OperatorHandle(
        image_shape, image_shape, apply_fn, adjoint_fn,
        kind="mri", spec={"kind": "mri"}, arrays={"mask": mask},
    )


def make_sensitivity_maps(num_coils: int, image_shape, seed: int = 0) -> np.ndarray:
    """Synthetic coil sensitivities: Gaussian bumps at equiangular
    positions with a mild per-coil phase ramp, normalized pointwise so that
    sum_l |s_l|^2 == 1.  Returns (L, 2, H, W)."""
    _, h, w = image_shape
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    maps = np.zeros((num_coils, h, w), dtype=np.complex128)
    for ell in range(num_coils):
        ang = 2 * np.pi * ell / num_coils
        cy, cx = 0.6 * np.sin(ang), 0.6 * np.cos(ang)
        mag = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.7 ** 2))
        phase = rng.uniform(-0.5, 0.5) * xx + rng.uniform(-0.5, 0.5) * yy
        maps[ell] = mag * np.exp(1j * phase)
    ssq = np.sqrt((np.abs(maps) ** 2).sum(axis=0))
    maps /= ssq
    return np.stack([_from_complex(m) for m in maps])


def make_multicoil_mri(mask: np.ndarray, smaps: np.ndarray, image_shape) -> OperatorHandle:
    """Multi-coil MRI: y_l = diag(m) F diag(s_l) x, stacked per coil."""
    c, h, w = image_shape
    if c != 2:
        raise ValueError("multi-coil MRI expects a 2-channel image")
    smaps = np.asarray(smaps, dtype=np.float64)
    num_coils = smaps.shape[0]
    smaps_c = np.stack([_to_complex(s) for s in smaps])
    ssq = (np.abs(smaps_c) ** 2).sum(axis=0)
    if np.max(np.abs(ssq - 1)) > 1e-6:
        raise ValueError("sensitivity maps must satisfy sum |s_l|^2 == 1")
    mask = np.asarray(mask, dtype=np.float64)

    def apply_fn(x):
        z = _to_complex(x)
        out = np.empty((2 * num_coils, h, w))
        for ell in range(num_coils):
            out[2 * ell:2 * ell + 2] = _from_complex(
                mask * np.fft.fft2(smaps_c[ell] * z, norm="ortho"))
        return out

    def adjoint_fn(y):
        acc = np.zeros((h, w), dtype=np.complex128)
        for ell in range(num_coils):
            z = _to_complex(y[2 * ell:2 * ell + 2])
            acc += np.conj(smaps_c[ell]) * np.fft.ifft2(mask * z, norm="ortho")
        return _from_complex(acc)

    return OperatorHandle(
        image_shape, (2 * num_coils, h, w), apply_fn, adjoint_fn,
        kind="multicoil_mri", spec={"kind": "multicoil_mri", "num_coils": num_coils},
        arrays={"mask": mask, "smaps": smaps},
    )


# ---------------------------------------------------------------------------
# computed tomography
# ---------------------------------------------------------------------------


def make_ct_radon(num_angles: int, image_shape) -> OperatorHandle:
    """Parallel-beam Radon transform with pixel-driven linear splatting.

    Each pixel center is projected onto the detector axis at every angle
    and its value is split linearly between the two nearest detector bins,
    so each projection conserves the total image mass exactly.  The
    adjoint is the transpose of the same sparse matrix.
    """
    if num_angles < 1:
        raise ValueError("need at least one projection angle")
    c, h, w = image_shape
    if h != w:
        raise ValueError("CT expects a square image")
    det = int(np.ceil(np.sqrt(2.0) * h))
    angles = np.arange(num_angles) * np.pi / num_angles
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    uc = (jj - (w - 1) / 2.0).ravel()
    vc = (ii - (h - 1) / 2.0).ravel()
    n = h * w
    rows, cols, vals = [], [], []
    for a, th in enumerate(angles):
        s = uc * np.cos(th) + vc * np.sin(th) + (det - 1) / 2.0
        s = np.clip(s, 0, det - 1 - 1e-9)
        b0 = s.astype(int)
        f = s - b0
        cols.append(np.arange(n))
        rows.append(a * det + b0)
        vals.append(1.0 - f)
        cols.append(np.arange(n))
        rows.append(a * det + b0 + 1)
        vals.append(f)
    mat = scipy.sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(num_angles * det, n),
    )
    mat_t = mat.T.tocsr()

    def apply_fn(x):
        out = np.empty((c, num_angles, det))
        for ch in range(c):
            out[ch] = (mat @ x[ch].ravel()).reshape(num_angles, det)
        return out

    def adjoint_fn(y):
        out = np.empty((c, h, w))
        for ch in range(c):
            out[ch] = (mat_t @ y[ch].ravel()).reshape(h, w)
        return out

    return OperatorHandle(
        image_shape, (c, num_angles, det), apply_fn, adjoint_fn,
        kind="ct", spec={"kind": "ct", "num_angles": num_angles},
    )


# ---------------------------------------------------------------------------
# super-resolution downsampling
# ---------------------------------------------------------------------------


def _bicubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    out = np.zeros_like(t)
    m1 = t <= 1
    m2 = (t > 1) & (t < 2)
    out[m1] = (a + 2) * t[m1] ** 3 - (a + 3) * t[m1] ** 2 + 1
    out[m2] = a * t[m2] ** 3 - 5 * a * t[m2] ** 2 + 8 * a * t[m2] - 4 * a
    return out


def _bilinear_kernel(t: np.ndarray) -> np.ndarray:
    return np.clip(1 - np.abs(t), 0, None)


def _decimation_matrix(n: int, factor: int, filt: str) -> np.ndarray:
    """Rows are antialias filters centered on output samples; rows are
    normalized to sum to one (partition of unity on constants)."""
    kern, support = ((_bicubic_kernel, 2) if filt == "bicubic" else (_bilinear_kernel, 1))
    nout = n // factor
    mat = np.zeros((nout, n))
    for i in range(nout):
        center = (i + 0.5) * factor - 0.5
        j0 = int(np.floor(center - support * factor)) - 1
        j1 = int(np.ceil(center + support * factor)) + 1
        js = np.arange(max(j0, 0), min(j1, n - 1) + 1)
        wts = kern((js - center) / factor)
        mat[i, js] = wts
    mat /= mat.sum(axis=1, keepdims=True)
    return mat


def make_downsampling(factor: int, filt: str, image_shape) -> OperatorHandle:
    if factor not in (2, 4):
        raise ValueError("downsampling factor must be 2 or 4")
    if filt not in ("bicubic", "bilinear"):
        raise ValueError("filter must be 'bicubic' or 'bilinear'")
    c, h, w = image_shape
    if h % factor or w % factor:
        raise ValueError("spatial extents must be divisible by the factor")
    dh = _decimation_matrix(h, factor, filt)
    dw = _decimation_matrix(w, factor, filt)

    def apply_fn(x):
        return np.einsum("ih,chw,jw->cij", dh, x, dw, optimize=True)

    def adjoint_fn(y):
        return np.einsum("ih,cij,jw->chw", dh, y, dw, optimize=True)

    return OperatorHandle(
        image_shape, (c, h // factor, w // factor), apply_fn, adjoint_fn,
        kind="downsampling", spec={"kind": "downsampling", "factor": factor, "filter": filt},
    )


# ---------------------------------------------------------------------------
# compressed sensing (signed orthonormal sine transform, subsampled)
# ---------------------------------------------------------------------------


def make_compressed_sensing(sign_mask: np.ndarray, keep_indices: np.ndarray,
                            image_shape) -> OperatorHandle:
    """A = S diag(m): orthonormal DST-II of the sign-flipped image, with
    the flattened coefficients subsampled at ``keep_indices``."""
    c, h, w = image_shape
    sign_mask = np.asarray(sign_mask, dtype=np.float64)
    if sign_mask.shape != (h, w) or not np.all(np.abs(sign_mask) == 1):
        raise ValueError("sign mask must be (H, W) with values in {-1, +1}")
    keep = np.asarray(keep_indices, dtype=np.int64)
    if len(np.unique(keep)) != len(keep):
        raise ValueError("keep indices must be distinct")
    m = len(keep)

    def apply_fn(x):
        out = np.empty((c, m))
        for ch in range(c):
            coeffs = scipy.fft.dstn(sign_mask * x[ch], type=2, norm="ortho")
            out[ch] = coeffs.ravel()[keep]
        return out

    def adjoint_fn(y):
        out = np.empty((c, h, w))
        for ch in range(c):
            coeffs = np.zeros(h * w)
            coeffs[keep] = y[ch]
            out[ch] = sign_mask * scipy.fft.idstn(coeffs.reshape(h, w), type=2, norm="ortho")
        return out

    return OperatorHandle(
        image_shape, (c, m), apply_fn, adjoint_fn,
        kind="compressed_sensing", spec={"kind": "compressed_sensing"},
        arrays={"sign_mask": sign_mask, "keep_indices": keep.astype(np.float64)},
    )


def make_cs_pattern(image_shape, subsample: int = 4, seed: int = 0):
    """Random sign mask and keep-index set for compressed sensing."""
    _, h, w = image_shape
    rng = np.random.default_rng(seed)
    sign = rng.choice([-1.0, 1.0], size=(h, w))
    keep = rng.choice(h * w, size=(h * w) // subsample, replace=False)
    return sign, np.sort(keep)


# ---------------------------------------------------------------------------
# Kaiser-sinc upsampler and coarse operators
# ---------------------------------------------------------------------------


def _upsample_matrix(n_coarse: int, factor: int, beta: float = 8.0, taps: int = 8) -> np.ndarray:
    """1-D sinc interpolation matrix (fine = factor * coarse) with a Kaiser
    window of ``taps`` coarse samples total support; rows normalized to
    preserve constants exactly."""
    half = taps / 2.0
    nf = n_coarse * factor
    mat = np.zeros((nf, n_coarse))
    for i in range(nf):
        pos = i / factor  # position in coarse sample units
        js = np.arange(max(int(np.ceil(pos - half)), 0),
                       min(int(np.floor(pos + half)), n_coarse - 1) + 1)
        t = pos - js
        window = np.i0(beta * np.sqrt(np.clip(1 - (t / half) ** 2, 0, None))) / np.i0(beta)
        wts = np.sinc(t) * window
        mat[i, js] = wts
    mat /= mat.sum(axis=1, keepdims=True)
    return mat


def make_upsampler(scale: int, coarse_shape, beta: float = 8.0, taps: int = 8) -> OperatorHandle:
    """U_s: 2^s separable Kaiser-windowed sinc upsampling."""
    if scale < 1:
        raise ValueError("scale must be >= 1")
    f = 2 ** scale
    c, h, w = coarse_shape
    uh = _upsample_matrix(h, f, beta, taps)
    uw = _upsample_matrix(w, f, beta, taps)

    def apply_fn(x):
        return np.einsum("ih,chw,jw->cij", uh, x, uw, optimize=True)

    def adjoint_fn(y):
        return np.einsum("ih,cij,jw->chw", uh, y, uw, optimize=True)

    return OperatorHandle(
        coarse_shape, (c, h * f, w * f), apply_fn, adjoint_fn,
        kind="upsampler", spec={"kind": "upsampler", "scale": scale},
    )


def _downscale_kernel(k: np.ndarray, factor: int) -> np.ndarray:
    """Block-average a blur kernel onto a grid coarsened by ``factor``,
    keeping an odd side length."""
    ks = k.shape[0]
    out_size = max(3, (ks // factor) | 1)
    c_in = (ks - 1) / 2.0
    c_out = (out_size - 1) / 2.0
    out = np.zeros((out_size, out_size))
    for i in range(ks):
        for j in range(ks):
            oi = int(round((i - c_in) / factor + c_out))
            oj = int(round((j - c_in) / factor + c_out))
            if 0 <= oi < out_size and 0 <= oj < out_size:
                out[oi, oj] += k[i, j]
    s = out.sum()
    if s <= 0:
        out[out_size // 2, out_size // 2] = 1.0
        s = 1.0
    return out / s


def make_coarse(op: OperatorHandle, scale: int, fine_shape=None,
                prefer_fast: bool = False, norm_iters: int = 100) -> CoarseOperator:
    """Coarse-grid variant of ``op`` at dyadic scale ``scale``.

    The generic path composes op with a Kaiser-sinc upsampler (cropping if
    the working fine grid is padded beyond the operator's domain) and
    normalizes to unit norm.  Fast paths downscale the blur kernel or the
    inpainting mask and act wholly on the coarse grid.
    """
    c = op.domain_shape[0]
    if fine_shape is None:
        fine_shape = op.domain_shape
    fc, fh, fw = fine_shape
    if fc != c:
        raise ValueError("channel mismatch between fine shape and operator domain")
    f = 2 ** scale
    if fh % f or fw % f:
        raise ValueError("fine extents must be divisible by 2^scale")
    key = (scale, fine_shape, prefer_fast)
    cached = op._coarse_cache.get(key)
    if cached is not None:
        return cached
    coarse_shape = (c, fh // f, fw // f)

    if scale == 0:
        inner = op if fine_shape == op.domain_shape else compose(op, _crop_op(fine_shape, op.domain_shape))
        path = "generic"
    elif prefer_fast and op.kind == "blur" and fine_shape == op.domain_shape:
        kc = _downscale_kernel(op.arrays["kernel"], f)
        inner = make_blur(BlurKernel(kc), coarse_shape)
        path = "kernel-downscaled"
    elif prefer_fast and op.kind == "inpainting" and fine_shape == op.domain_shape:
        mc = op.arrays["mask"][:, ::f, ::f].copy()
        inner = make_inpainting(mc)
        path = "mask-downscaled"
    else:
        up = make_upsampler(scale, coarse_shape)
        if fine_shape == op.domain_shape:
            inner = compose(op, up)
        else:
            inner = compose(op, compose(_crop_op(fine_shape, op.domain_shape), up))
        path = "generic"

    scaled = normalize(inner, iters=norm_iters)
    out = CoarseOperator(
        base=op, scale=scale, path=path,
        domain_shape=(coarse_shape if scale > 0 else fine_shape),
        range_shape=scaled.range_shape,
        apply_fn=scaled.apply, adjoint_fn=scaled.adjoint,
        kind=f"coarse[{op.kind}]",
    )
    out.norm_estimate = 1.0
    op._coarse_cache[key] = out
    return out


def _crop_op(fine_shape, target_shape) -> OperatorHandle:
    """Center crop (adjoint: zero-pad) from a padded working grid down to
    an operator's native domain."""
    fc, fh, fw = fine_shape
    tc, th, tw = target_shape
    if fc != tc or th > fh or tw > fw:
        raise ValueError("invalid crop shapes")
    t0 = (fh - th) // 2
    l0 = (fw - tw) // 2

    def apply_fn(x):
        return x[:, t0:t0 + th, l0:l0 + tw].copy()

    def adjoint_fn(y):
        out = np.zeros(fine_shape)
        out[:, t0:t0 + th, l0:l0 + tw] = y
        return out

    return OperatorHandle(fine_shape, target_shape, apply_fn, adjoint_fn, kind="crop")


# ---------------------------------------------------------------------------
# dense oracle support
# ---------------------------------------------------------------------------


def dense_matrix(op: OperatorHandle) -> np.ndarray:
    """Materialize the operator by probing with basis vectors (test/oracle
    use; O(n) applies)."""
    n = int(np.prod(op.domain_shape))
    m = int(np.prod(op.range_shape))
    mat = np.empty((m, n))
    e = np.zeros(n)
    for j in range(n):
        e[j] = 1.0
        mat[:, j] = op.apply(e.reshape(op.domain_shape)).ravel()
        e[j] = 0.0
    return mat
