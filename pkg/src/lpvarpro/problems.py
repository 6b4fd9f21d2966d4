"""Test-problem generators, bundled synthetic images, noise and file I/O.

The 1D instance blurs a piecewise-constant signal with a Gaussian Toeplitz
matrix under zero boundary conditions; the 2D instances blur a square image
with a normalized anisotropic Gaussian PSF. Noise is white Gaussian, rescaled
so the noise-to-signal ratio is met exactly, and every instance is fully
determined by its inputs and seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .operators import (ConvBoundary, GaussianBlur1D, GaussianPsfBlur2D,
                        PsfParams)


def add_noise(d_true, level, seed):
    """Add white Gaussian noise with an exact noise-to-signal ratio.

    Draws from a seeded generator and rescales so that
    ||noise|| / ||d_true|| equals ``level`` exactly.
    """
    if level < 0:
        raise ValueError("noise level must be nonnegative")
    d_true = np.asarray(d_true, dtype=float)
    if level == 0.0:
        return d_true.copy(), np.zeros_like(d_true)
    norm_true = np.linalg.norm(d_true)
    if norm_true == 0.0:
        raise ValueError("cannot scale noise against zero data")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(d_true.shape)
    eps *= level * norm_true / np.linalg.norm(eps)
    return d_true + eps, eps


def piecewise_signal(n):
    """Piecewise-constant test signal with three plateaus and two spikes in [0, 1]."""
    if n < 16:
        raise ValueError("signal needs at least 16 samples")
    x = np.zeros(n)
    t = np.arange(n) / n

    def band(lo, hi, val):
        x[(t >= lo) & (t < hi)] = val

    band(0.10, 0.22, 0.55)
    band(0.30, 0.46, 0.95)
    band(0.62, 0.78, 0.45)
    x[int(0.53 * n)] = 1.0
    x[int(0.86 * n)] = 0.80
    return x


def _satellite_image(n):
    """Sparse bright object on a black background (solar panels, body, dish)."""
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    u = (ii - 0.5 * (n - 1)) / n
    v = (jj - 0.5 * (n - 1)) / n
    img = np.zeros((n, n))
    img[(np.abs(u) < 0.045) & (np.abs(v) > 0.11) & (np.abs(v) < 0.36)] = 0.55
    img[(np.abs(u) < 0.012) & (np.abs(v) <= 0.13)] = 0.75
    cs, sn = np.cos(0.5), np.sin(0.5)
    uu = u * cs + v * sn
    vv = -u * sn + v * cs
    img[(uu / 0.10) ** 2 + (vv / 0.065) ** 2 <= 1.0] = 0.90
    img[(u + 0.17) ** 2 + (v - 0.03) ** 2 < 0.0022] = 1.0
    img[(u - 0.20) ** 2 + (v + 0.16) ** 2 < 0.0006] = 0.85
    return img


def _grain_image(n):
    """High-contrast granular texture: scattered ellipses over a dark base."""
    rng = np.random.default_rng(170915)
    ii, jj = np.meshgrid(np.arange(n, dtype=float),
                         np.arange(n, dtype=float), indexing="ij")
    img = np.full((n, n), 0.06)
    count = max(24, (n * n) // 110)
    for _ in range(count):
        ci, cj = rng.uniform(0, n, size=2)
        a = rng.uniform(0.020, 0.055) * n
        b = rng.uniform(0.012, 0.040) * n
        theta = rng.uniform(0, np.pi)
        val = rng.uniform(0.35, 1.0)
        du, dv = ii - ci, jj - cj
        uu = du * np.cos(theta) + dv * np.sin(theta)
        vv = -du * np.sin(theta) + dv * np.cos(theta)
        img[(uu / a) ** 2 + (vv / b) ** 2 <= 1.0] = val
    return img


_BUILTIN_IMAGES = {
    "satellite": _satellite_image,
    "grain": _grain_image,
}


def builtin_image(name, n=128):
    """Deterministic synthetic test image by name ('satellite' or 'grain')."""
    try:
        make = _BUILTIN_IMAGES[name]
    except KeyError:
        raise ValueError(
            f"unknown builtin image {name!r}; available: "
            f"{sorted(_BUILTIN_IMAGES)}") from None
    return make(int(n))


@dataclass
class ProblemInstance:
    """A forward model plus data: d = G(y_true) x_true + noise."""

    family: str                       # 'toeplitz1d' or 'psf2d'
    y_true: np.ndarray
    x_true: np.ndarray                # flattened
    d_true: np.ndarray
    d: np.ndarray
    noise: np.ndarray
    noise_level: float
    seed: int
    shape: tuple
    boundary: ConvBoundary = ConvBoundary.PERIODIC
    psf_size: int = 31

    def operator(self, y):
        """Instantiate the forward operator family at parameters y."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if self.family == "toeplitz1d":
            return GaussianBlur1D(float(y[0]), self.shape[0])
        if self.family == "psf2d":
            return GaussianPsfBlur2D(PsfParams.from_array(y), self.shape,
                                     self.psf_size, self.boundary)
        raise ValueError(f"unknown problem family {self.family!r}")

    @property
    def n(self):
        return int(np.prod(self.shape))


def make_1d_problem(n=128, sigma_true=2.0, level=0.01, seed=0):
    """1D Gaussian deconvolution instance with the bundled edge signal."""
    if n < 16:
        raise ValueError("n must be at least 16")
    x_true = piecewise_signal(n)
    op = GaussianBlur1D(sigma_true, n)
    d_true = op.apply(x_true)
    d, eps = add_noise(d_true, level, seed)
    return ProblemInstance(family="toeplitz1d",
                           y_true=np.array([float(sigma_true)]),
                           x_true=x_true, d_true=d_true, d=d, noise=eps,
                           noise_level=float(level), seed=int(seed),
                           shape=(int(n),), boundary=ConvBoundary.ZERO)


def make_blind_deconv_problem(image, y_true, level, seed,
                              boundary=ConvBoundary.PERIODIC, psf_size=31,
                              size=128):
    """2D blind-deconvolution instance from a builtin or user image.

    ``image`` may be a builtin name or a square 2D array; intensities are
    rescaled to [0, 1] when they fall outside. ``y_true`` is a PsfParams or a
    length-3 vector (sigma1, sigma2, rho).
    """
    if isinstance(image, str):
        image = builtin_image(image, size)
    image = np.asarray(image, dtype=float)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError("image must be a square 2D array")
    lo, hi = image.min(), image.max()
    if lo < 0.0 or hi > 1.0:
        if hi == lo:
            raise ValueError("constant image cannot be rescaled to [0, 1]")
        image = (image - lo) / (hi - lo)
    params = y_true if isinstance(y_true, PsfParams) \
        else PsfParams.from_array(y_true)
    if isinstance(boundary, str):
        boundary = ConvBoundary(boundary)
    op = GaussianPsfBlur2D(params, image.shape, psf_size, boundary)
    x_true = image.ravel()
    d_true = op.apply(x_true)
    d, eps = add_noise(d_true, level, seed)
    return ProblemInstance(family="psf2d", y_true=params.as_array(),
                           x_true=x_true, d_true=d_true, d=d, noise=eps,
                           noise_level=float(level), seed=int(seed),
                           shape=image.shape, boundary=boundary,
                           psf_size=int(psf_size))


# ---------------------------------------------------------------------------
# file formats: portable graymaps, CSV matrices, instance archives


def write_pgm(path, image, maxval=65535):
    """Write a 2D array as binary PGM (P5); 16-bit values are big-endian."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("PGM output needs a 2D array")
    if not np.issubdtype(image.dtype, np.integer):
        raise ValueError("PGM output needs integer samples; rescale first")
    if image.min() < 0 or image.max() > maxval:
        raise ValueError("samples exceed the stated maxval")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n{maxval}\n".encode())
        if maxval < 256:
            fh.write(image.astype(">u1").tobytes())
        else:
            fh.write(image.astype(">u2").tobytes())


def read_pgm(path):
    """Read an 8- or 16-bit PGM file (P2 ascii or P5 binary) as float in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] not in (b"P2", b"P5"):
        raise ValueError("not a PGM file (expected P2 or P5)")
    magic = data[:2]
    # header: magic, width, height, maxval with comments allowed
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(data[start:pos]))
    width, height, maxval = tokens
    pos += 1
    if magic == b"P2":
        values = np.array(data[pos:].split(), dtype=float)
    else:
        dtype = ">u2" if maxval > 255 else ">u1"
        values = np.frombuffer(data, dtype=dtype, offset=pos,
                               count=width * height).astype(float)
    if values.size != width * height:
        raise ValueError("PGM payload does not match the stated dimensions")
    return values.reshape(height, width) / float(maxval)


def write_csv_matrix(path, mat):
    np.savetxt(path, np.atleast_2d(np.asarray(mat, dtype=float)),
               delimiter=",", fmt="%.17g")


def read_csv_matrix(path):
    return np.atleast_2d(np.loadtxt(path, delimiter=",", ndmin=2))


def save_instance(inst: ProblemInstance, directory):
    """Serialize an instance as CSV matrices plus a key=value metadata file."""
    os.makedirs(directory, exist_ok=True)
    for name in ("x_true", "d_true", "d", "noise"):
        arr = getattr(inst, name).reshape(inst.shape)
        write_csv_matrix(os.path.join(directory, f"{name}.csv"), arr)
    meta = {
        "family": inst.family,
        "y_true": ",".join(repr(float(v)) for v in inst.y_true),
        "level": repr(float(inst.noise_level)),
        "seed": str(inst.seed),
        "boundary": inst.boundary.value,
        "psf_size": str(inst.psf_size),
        "shape": ",".join(str(s) for s in inst.shape),
    }
    with open(os.path.join(directory, "meta.txt"), "w") as fh:
        for key, val in meta.items():
            fh.write(f"{key}={val}\n")


def load_instance(directory) -> ProblemInstance:
    meta = {}
    with open(os.path.join(directory, "meta.txt")) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            meta[key] = val
    shape = tuple(int(s) for s in meta["shape"].split(","))
    arrays = {}
    for name in ("x_true", "d_true", "d", "noise"):
        arr = read_csv_matrix(os.path.join(directory, f"{name}.csv"))
        arrays[name] = arr.ravel() if len(shape) == 1 else arr.reshape(shape)
        arrays[name] = arrays[name].ravel()
    return ProblemInstance(
        family=meta["family"],
        y_true=np.array([float(v) for v in meta["y_true"].split(",")]),
        x_true=arrays["x_true"], d_true=arrays["d_true"], d=arrays["d"],
        noise=arrays["noise"], noise_level=float(meta["level"]),
        seed=int(meta["seed"]), shape=shape,
        boundary=ConvBoundary(meta["boundary"]),
        psf_size=int(meta["psf_size"]))
