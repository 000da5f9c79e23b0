"""Equiangular fan-beam CT physics on a desk-scale 2-D grid.

Forward projection is ray-driven: each (view, detector) ray is sampled at
half-pixel steps across the image support circle and values are gathered
with bilinear interpolation.  The sampling weights are assembled once per
geometry into a sparse matrix, so back-projection is the literal matrix
transpose and the (P, P^T) pair is adjoint to machine precision.

Images hold linear attenuation mu in 1/mm; sinograms hold line integrals
(dimensionless).  HU conversion uses mu_water = 0.0192/mm.
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

MU_WATER = 0.0192   # 1/mm, HU reference
MU_METAL = 0.2      # 1/mm, ~10x water so metal rays suffer severe count loss

DOSE_PHOTONS = {"half": 1e5, "quarter": 5e4, "eighth": 2.5e4}
DOSE_FRACTION = {"half": 0.5, "quarter": 0.25, "eighth": 0.125}


def mu_to_hu(mu):
    return 1000.0 * (np.asarray(mu) - MU_WATER) / MU_WATER


def hu_to_mu(hu):
    return MU_WATER * (1.0 + np.asarray(hu) / 1000.0)


@dataclass
class DoseLevel:
    """Incident photon count for a named dose fraction."""
    label: str

    def __post_init__(self):
        if self.label not in DOSE_PHOTONS:
            raise ValueError(f"unknown dose label {self.label!r}; "
                             f"expected one of {sorted(DOSE_PHOTONS)}")

    @property
    def photons(self):
        return DOSE_PHOTONS[self.label]

    @property
    def fraction(self):
        return DOSE_FRACTION[self.label]

    @property
    def reciprocal(self):
        return 1.0 / DOSE_FRACTION[self.label]


@dataclass
class MetalSpec:
    """Binary implant mask on the image grid plus its attenuation."""
    mask: np.ndarray
    mu_metal: float = MU_METAL

    def __post_init__(self):
        self.mask = np.asarray(self.mask).astype(bool)


@dataclass(eq=False)
class FanBeamGeometry:
    """Equiangular fan-beam scan over 2*pi with a centered square image."""
    n_views: int = 96
    n_detectors: int = 96
    source_to_center: float = 120.0      # mm
    source_to_detector: float = 240.0    # mm
    detector_angular_spacing: float = 0.0  # rad; 0 = auto-fit to the image FOV
    image_size: int = 64
    pixel_spacing: float = 1.0           # mm
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.n_views < 1 or self.n_detectors < 1:
            raise ValueError("n_views and n_detectors must be >= 1")
        if self.pixel_spacing <= 0 or self.source_to_center <= 0:
            raise ValueError("spacings and distances must be positive")
        if self.detector_angular_spacing <= 0.0:
            # fan opening spans a FOV circle just inside the image inradius,
            # so every ray crosses the image square (full-mask traces are
            # all-true) and detector sampling stays above the pixel Nyquist
            # rate; objects must live inside this measured circle
            r_fov = 0.485 * self.image_size * self.pixel_spacing
            half_fan = np.arcsin(min(0.999, r_fov / self.source_to_center))
            self.detector_angular_spacing = 2.0 * half_fan / self.n_detectors

    @property
    def fov_radius(self):
        """Radius of the measured field of view (mm)."""
        gmax = (self.n_detectors / 2.0) * self.detector_angular_spacing
        return self.source_to_center * np.sin(min(gmax, np.pi / 2))

    @property
    def view_angles(self):
        return np.arange(self.n_views) * (2.0 * np.pi / self.n_views)

    @property
    def support_radius(self):
        """Radius of the circle circumscribing the image square (mm)."""
        return 0.5 * self.image_size * self.pixel_spacing * np.sqrt(2.0)

    @property
    def sinogram_shape(self):
        return (self.n_views, self.n_detectors)

    @property
    def image_shape(self):
        return (self.image_size, self.image_size)

    def detector_gammas(self):
        """Signed detector angles relative to the central ray (rad)."""
        idx = np.arange(self.n_detectors) - (self.n_detectors - 1) / 2.0
        return idx * self.detector_angular_spacing


def default_geometry(image_size=64, n_views=96, n_detectors=96, pixel_spacing=1.0):
    """Desk-scale preset: 64x64 image, 96x96 sinogram."""
    return FanBeamGeometry(n_views=n_views, n_detectors=n_detectors,
                           image_size=image_size, pixel_spacing=pixel_spacing)


# ---------------------------------------------------------------------------
# system matrix

def projection_matrix(geom):
    """Sparse system matrix P: (n_views*n_detectors) x (image_size^2).

    Built ray-driven with bilinear gather weights at half-pixel sample
    steps; cached on the geometry.
    """
    if "P" in geom._cache:
        return geom._cache["P"]

    n = geom.image_size
    p = geom.pixel_spacing
    r_sup = geom.support_radius + p
    step_target = 0.5 * p
    n_samples = int(np.ceil(2.0 * r_sup / step_target)) + 1
    gammas = geom.detector_gammas()
    ctr = (n - 1) / 2.0

    rows, cols, vals = [], [], []
    for iv, beta in enumerate(geom.view_angles):
        sx = geom.source_to_center * np.cos(beta)
        sy = geom.source_to_center * np.sin(beta)
        ray_angle = beta + np.pi + gammas          # central ray points at origin
        ux, uy = np.cos(ray_angle), np.sin(ray_angle)

        # chord of each ray through the support circle
        tmid = -(sx * ux + sy * uy)
        d2 = (sx * sx + sy * sy) - tmid * tmid
        half = np.sqrt(np.maximum(r_sup * r_sup - d2, 0.0))
        frac = (np.arange(n_samples) / (n_samples - 1.0)) - 0.5   # [-1/2, 1/2]
        t = tmid[:, None] + (2.0 * half[:, None]) * frac[None, :]
        ds = (2.0 * half / (n_samples - 1.0))[:, None]            # per-ray step

        px = sx + t * ux[:, None]
        py = sy + t * uy[:, None]
        # world -> pixel (row 0 at +y, col 0 at -x)
        cc = px / p + ctr
        rr = ctr - py / p
        r0 = np.floor(rr).astype(np.int64)
        c0 = np.floor(cc).astype(np.int64)
        fr = rr - r0
        fc = cc - c0
        inside = (r0 >= 0) & (r0 < n - 1) & (c0 >= 0) & (c0 < n - 1)

        ray_idx = np.broadcast_to(np.arange(geom.n_detectors)[:, None], rr.shape)
        w = np.broadcast_to(ds, rr.shape)
        for dr, dc, wgt in (
            (0, 0, (1 - fr) * (1 - fc)),
            (0, 1, (1 - fr) * fc),
            (1, 0, fr * (1 - fc)),
            (1, 1, fr * fc),
        ):
            m = inside & (wgt > 0)
            rows.append(iv * geom.n_detectors + ray_idx[m])
            cols.append((r0[m] + dr) * n + (c0[m] + dc))
            vals.append((w * wgt)[m])

    mat = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(geom.n_views * geom.n_detectors, n * n),
    ).tocsr()
    mat.sum_duplicates()
    geom._cache["P"] = mat
    return mat


def forward_project(img, geom):
    """Line integrals of an image over every geometry ray."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape != geom.image_shape:
        raise ValueError(f"image shape {img.shape} != geometry {geom.image_shape}")
    sino = projection_matrix(geom) @ img.reshape(-1)
    return sino.reshape(geom.sinogram_shape)


def back_project(sino, geom):
    """Exact adjoint of forward_project (sparse transpose)."""
    sino = np.asarray(sino, dtype=np.float64)
    if sino.shape != geom.sinogram_shape:
        raise ValueError(f"sinogram shape {sino.shape} != geometry {geom.sinogram_shape}")
    img = projection_matrix(geom).T @ sino.reshape(-1)
    return img.reshape(geom.image_shape)


def operator_norm(geom, iters=40, seed=0):
    """Power-iteration estimate of ||P||_2; cached on the geometry."""
    key = ("norm", iters, seed)
    if key in geom._cache:
        return geom._cache[key]
    mat = projection_matrix(geom)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=mat.shape[1])
    x /= np.linalg.norm(x)
    lam = 1.0
    for _ in range(iters):
        y = mat.T @ (mat @ x)
        lam = np.linalg.norm(y)
        x = y / lam
    geom._cache[key] = float(np.sqrt(lam))
    return geom._cache[key]


# ---------------------------------------------------------------------------
# filtered back-projection

def _ramp_kernel(n_det, dgamma, apodization):
    """Sampled equiangular FBP kernel, returned as an rfft response.

    Ram-Lak taps on the angular variable with the (gamma/sin gamma)^2
    fan-beam correction; optional Hann apodization.
    """
    m = np.arange(-(n_det - 1), n_det)
    h = np.zeros_like(m, dtype=np.float64)
    h[m == 0] = 1.0 / (8.0 * dgamma ** 2)            # 1/2 * parallel ramp tap
    odd = (m % 2) != 0
    h[odd] = -0.5 / (np.pi * m[odd] * dgamma) ** 2
    g = m * dgamma
    corr = np.ones_like(h)
    nz = m != 0
    corr[nz] = (g[nz] / np.sin(g[nz])) ** 2
    h = h * corr

    size = 1
    while size < 2 * n_det:
        size *= 2
    kern = np.zeros(size)
    kern[: 2 * n_det - 1] = h
    resp = np.fft.rfft(np.roll(kern, -(n_det - 1)))
    if apodization == "hann":
        f = np.arange(resp.size) / (resp.size - 1)
        resp = resp * (0.5 + 0.5 * np.cos(np.pi * f))
    elif apodization != "ramp":
        raise ValueError(f"unknown apodization {apodization!r}")
    return resp, size


def fbp(sino, geom, apodization="ramp"):
    """Equiangular fan-beam filtered back-projection.

    Cosine pre-weighting, frequency-domain ramp filtering (power-of-two
    zero padding, optional Hann), then distance-weighted pixel-driven
    back-projection over the full 2*pi scan.
    """
    sino = np.asarray(sino, dtype=np.float64)
    if sino.shape != geom.sinogram_shape:
        raise ValueError(f"sinogram shape {sino.shape} != geometry {geom.sinogram_shape}")

    d = geom.source_to_center
    gammas = geom.detector_gammas()
    dgamma = geom.detector_angular_spacing
    pre = sino * (d * np.cos(gammas))[None, :]

    resp, size = _ramp_kernel(geom.n_detectors, dgamma, apodization)
    spec = np.fft.rfft(pre, n=size, axis=1)
    filt = np.fft.irfft(spec * resp[None, :], n=size, axis=1)[:, : geom.n_detectors]
    filt *= dgamma

    n = geom.image_size
    ctr = (n - 1) / 2.0
    cols = (np.arange(n) - ctr) * geom.pixel_spacing
    x = np.broadcast_to(cols[None, :], (n, n))          # world x per column
    y = np.broadcast_to(cols[::-1][:, None], (n, n))    # row 0 at +y

    out = np.zeros((n, n))
    dbeta = 2.0 * np.pi / geom.n_views
    half = (geom.n_detectors - 1) / 2.0
    for iv, beta in enumerate(geom.view_angles):
        sx, sy = d * np.cos(beta), d * np.sin(beta)
        dx = x - sx
        dy = y - sy
        l2 = dx * dx + dy * dy
        # signed angle from the central ray to the pixel ray (matches the
        # projector's counterclockwise detector indexing)
        cx, cy = -np.cos(beta), -np.sin(beta)
        gamma = np.arctan2(cx * dy - cy * dx, cx * dx + cy * dy)
        u = gamma / dgamma + half
        u0 = np.floor(u).astype(np.int64)
        fu = u - u0
        valid = (u0 >= 0) & (u0 < geom.n_detectors - 1)
        u0c = np.clip(u0, 0, geom.n_detectors - 2)
        q = filt[iv, u0c] * (1 - fu) + filt[iv, u0c + 1] * fu
        out += np.where(valid, q, 0.0) / l2
    # full-scan redundancy factor 1/2 is already folded into the kernel taps;
    # pixels outside the measured FOV circle are unmeasured and set to zero
    out *= dbeta
    out[x * x + y * y > geom.fov_radius ** 2] = 0.0
    return out


# ---------------------------------------------------------------------------
# dose degradation, metal insertion, traces

def degrade_low_dose(sino, dose, seed, no_noise=False):
    """Poisson low-dose model: N_i ~ Poisson(N0 exp(-s_i)), s_hat = -ln(N/N0).

    Counts are clamped at 1 before the log (photon starvation guard; this
    clamping is what turns starved metal rays into streaks).  `no_noise`
    returns the input unchanged (the N0 -> infinity limit).
    """
    sino = np.asarray(sino, dtype=np.float64)
    if no_noise:
        return sino.copy()
    if isinstance(dose, str):
        dose = DoseLevel(dose)
    rng = np.random.default_rng(seed)
    counts = rng.poisson(dose.photons * np.exp(-sino))
    return -np.log(np.maximum(counts, 1) / dose.photons)


def insert_metal(img, metal):
    """Replace pixels under the implant mask with the metal attenuation."""
    img = np.asarray(img, dtype=np.float64)
    if metal.mask.shape != img.shape:
        raise ValueError(f"mask shape {metal.mask.shape} != image {img.shape}")
    if not metal.mask.any():
        warnings.warn("insert_metal called with an empty mask; image unchanged")
        return img.copy()
    out = img.copy()
    out[metal.mask] = metal.mu_metal
    return out


def metal_trace(metal, geom):
    """Boolean sinogram mask of rays that intersect the implant."""
    return forward_project(metal.mask.astype(np.float64), geom) > 0.0


# ---------------------------------------------------------------------------
# phantoms

def _raster_ellipses(size, spacing, ellipses, supersample=4):
    """Sum of (cx, cy, a, b, phi, value) ellipses, area-averaged per pixel."""
    n = size * supersample
    sp = spacing / supersample
    ctr = (n - 1) / 2.0
    cols = (np.arange(n) - ctr) * sp
    xg = cols[None, :]
    yg = cols[::-1, None]  # row 0 at +y
    img = np.zeros((n, n))
    for cx, cy, a, b, phi, val in ellipses:
        c, s = np.cos(phi), np.sin(phi)
        xr = (xg - cx) * c + (yg - cy) * s
        yr = -(xg - cx) * s + (yg - cy) * c
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += val
    if supersample == 1:
        return img
    return img.reshape(size, supersample, size, supersample).mean(axis=(1, 3))


def make_phantom(kind="ellipses", seed=0, size=64, pixel_spacing=1.0):
    """Randomized soft-tissue/bone ellipse phantom, or a fixed head phantom.

    Values are attenuation in 1/mm: soft tissue near mu_water, bone
    ellipses up to 0.05.  Deterministic per (kind, seed, size).
    """
    half = 0.5 * size * pixel_spacing
    if kind == "shepp":
        e = [
            (0.0, 0.0, 0.72 * half, 0.92 * half, 0.0, 0.046),     # skull shell
            (0.0, -0.018 * half, 0.60 * half, 0.78 * half, 0.0, -0.027),
            (0.20 * half, 0.0, 0.10 * half, 0.30 * half, -0.3, -0.003),
            (-0.20 * half, 0.0, 0.14 * half, 0.34 * half, 0.3, -0.003),
            (0.0, 0.32 * half, 0.20 * half, 0.23 * half, 0.0, 0.002),
            (0.0, 0.08 * half, 0.04 * half, 0.04 * half, 0.0, 0.002),
            (0.0, -0.12 * half, 0.04 * half, 0.04 * half, 0.0, 0.002),
            (-0.07 * half, -0.55 * half, 0.04 * half, 0.02 * half, 0.0, 0.002),
            (0.06 * half, -0.55 * half, 0.03 * half, 0.03 * half, 0.0, 0.002),
        ]
        img = _raster_ellipses(size, pixel_spacing, e)
    elif kind == "ellipses":
        rng = np.random.default_rng(seed)
        body_a = half * rng.uniform(0.62, 0.78)
        body_b = half * rng.uniform(0.62, 0.78)
        e = [(0.0, 0.0, body_a, body_b, rng.uniform(0, np.pi), 0.019)]
        for _ in range(rng.integers(4, 9)):
            e.append((
                rng.uniform(-0.4, 0.4) * half, rng.uniform(-0.4, 0.4) * half,
                rng.uniform(0.05, 0.28) * half, rng.uniform(0.05, 0.28) * half,
                rng.uniform(0, np.pi), rng.uniform(-0.006, 0.006),
            ))
        for _ in range(rng.integers(1, 4)):   # bone inserts
            e.append((
                rng.uniform(-0.45, 0.45) * half, rng.uniform(-0.45, 0.45) * half,
                rng.uniform(0.04, 0.12) * half, rng.uniform(0.04, 0.12) * half,
                rng.uniform(0, np.pi), rng.uniform(0.02, 0.028),
            ))
        img = _raster_ellipses(size, pixel_spacing, e)
    else:
        raise ValueError(f"unknown phantom kind {kind!r}")
    return np.clip(img, 0.0, 0.05)


def disk_mask(size, center_rc, radius_px):
    """Boolean disk on the pixel grid (row/col center, radius in pixels)."""
    rr, cc = np.mgrid[0:size, 0:size]
    return (rr - center_rc[0]) ** 2 + (cc - center_rc[1]) ** 2 <= radius_px ** 2


def mask_with_area(size, center_rc, area_px):
    """Disk-shaped mask of exactly `area_px` pixels nearest the center.

    Ties are broken by flat index order, so the shape is deterministic.
    """
    if area_px < 1:
        raise ValueError("area_px must be >= 1")
    rr, cc = np.mgrid[0:size, 0:size]
    d2 = ((rr - center_rc[0]) ** 2 + (cc - center_rc[1]) ** 2).reshape(-1)
    order = np.lexsort((np.arange(d2.size), d2))
    mask = np.zeros(size * size, dtype=bool)
    mask[order[:area_px]] = True
    return mask.reshape(size, size)


# ---------------------------------------------------------------------------
# file I/O: raw little-endian payload + JSON sidecar; 16-bit PGM export

def save_array(path, arr, units):
    """Write `<path>` as raw little-endian f64 plus a `<path>.json` sidecar."""
    arr = np.asarray(arr, dtype=np.float64)
    path = str(path)
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump({"shape": list(arr.shape), "dtype": "f64le", "units": units},
                  fh, separators=(",", ":"))
        fh.write("\n")


def load_array(path):
    """Read a raw+sidecar array; returns (array, units)."""
    path = str(path)
    with open(path + ".json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("dtype") != "f64le":
        raise ValueError(f"unsupported dtype in sidecar for {path}")
    with open(path, "rb") as fh:
        arr = np.frombuffer(fh.read(), dtype="<f8").reshape(meta["shape"]).copy()
    return arr, meta.get("units", "")


def save_pgm(path, img_mu, window=(-1000.0, 1000.0)):
    """16-bit PGM export of an attenuation image with a HU display window."""
    hu = mu_to_hu(np.asarray(img_mu, dtype=np.float64))
    lo, hi = float(window[0]), float(window[1])
    scaled = np.clip((hu - lo) / (hi - lo), 0.0, 1.0)
    pix = np.round(scaled * 65535.0).astype(">u2")
    header = f"P5\n{img_mu.shape[1]} {img_mu.shape[0]}\n65535\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(pix.tobytes())
