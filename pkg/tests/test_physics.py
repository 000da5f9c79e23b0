import numpy as np
import pytest

from ductms import physics as PH
from helpers import inner


def small_geom(size=16, views=24, dets=24):
    return PH.FanBeamGeometry(n_views=views, n_detectors=dets, image_size=size)


def psnr(ref, x):
    rng = ref.max() - ref.min()
    return 10 * np.log10(rng ** 2 / np.mean((ref - x) ** 2))


class TestForwardProject:
    def test_zero_image(self):
        g = small_geom()
        assert np.all(PH.forward_project(np.zeros(g.image_shape), g) == 0.0)

    def test_disk_chord_integral(self):
        # central ray through a uniform disk: integral ~ 2*r*c within 2%
        g = PH.default_geometry()
        c, r = 0.02, 20.0
        disk = PH._raster_ellipses(64, 1.0, [(0.0, 0.0, r, r, 0.0, c)])
        sino = PH.forward_project(disk, g)
        mid = (g.n_detectors - 1) / 2.0
        lo, hi = int(np.floor(mid)), int(np.ceil(mid))
        central = 0.5 * (sino[0, lo] + sino[0, hi])
        assert abs(central - 2 * r * c) <= 0.02 * 2 * r * c

    def test_linearity(self):
        g = small_geom()
        rng = np.random.default_rng(0)
        x1 = rng.normal(size=g.image_shape)
        x2 = rng.normal(size=g.image_shape)
        a, b = 1.7, -0.4
        lhs = PH.forward_project(a * x1 + b * x2, g)
        rhs = a * PH.forward_project(x1, g) + b * PH.forward_project(x2, g)
        denom = np.max(np.abs(rhs)) or 1.0
        assert np.max(np.abs(lhs - rhs)) / denom <= 1e-10

    def test_size_mismatch(self):
        g = small_geom()
        with pytest.raises(ValueError):
            PH.forward_project(np.zeros((4, 4)), g)


class TestBackProject:
    @pytest.mark.parametrize("size,views,dets", [(16, 24, 24), (24, 36, 36)])
    def test_adjoint_20_pairs(self, size, views, dets):
        g = small_geom(size, views, dets)
        rng = np.random.default_rng(1)
        for _ in range(20):
            x = rng.normal(size=g.image_shape)
            y = rng.normal(size=g.sinogram_shape)
            px = PH.forward_project(x, g)
            lhs = inner(px, y)
            rhs = inner(x, PH.back_project(y, g))
            assert abs(lhs - rhs) <= 1e-8 * np.linalg.norm(px) * np.linalg.norm(y)

    def test_zero_sinogram(self):
        g = small_geom()
        assert np.all(PH.back_project(np.zeros(g.sinogram_shape), g) == 0.0)

    def test_one_hot_matches_dense_row(self):
        # P^T of a one-hot sinogram equals the corresponding row of the
        # brute-force dense matrix at 8x8
        g = small_geom(8, 12, 12)
        dense = PH.projection_matrix(g).toarray()
        rng = np.random.default_rng(2)
        for ray in rng.integers(0, dense.shape[0], size=5):
            one = np.zeros(dense.shape[0])
            one[ray] = 1.0
            bp = PH.back_project(one.reshape(g.sinogram_shape), g).reshape(-1)
            assert np.array_equal(bp, dense[ray])


class TestFBP:
    def test_roundtrip_psnr(self):
        # achieved at the 64x64/96x96 preset on the first oracle run:
        # ellipses seed 0 -> 39.2 dB, head phantom -> 30.2 dB
        g = PH.default_geometry()
        ph = PH.make_phantom("ellipses", seed=0)
        rec = PH.fbp(PH.forward_project(ph, g), g)
        assert psnr(ph, rec) >= 30.0
        head = PH.make_phantom("shepp")
        assert psnr(head, PH.fbp(PH.forward_project(head, g), g)) >= 30.0

    def test_zero_sinogram(self):
        g = small_geom()
        assert np.all(PH.fbp(np.zeros(g.sinogram_shape), g) == 0.0)

    def test_disk_dc_within_5pct(self):
        g = PH.default_geometry()
        c, r = 0.02, 20.0
        disk = PH._raster_ellipses(64, 1.0, [(0.0, 0.0, r, r, 0.0, c)])
        rec = PH.fbp(PH.forward_project(disk, g), g)
        interior = PH._raster_ellipses(
            64, 1.0, [(0.0, 0.0, 0.7 * r, 0.7 * r, 0.0, 1.0)], supersample=1) > 0
        assert abs(rec[interior].mean() - c) <= 0.05 * c

    def test_views_monotonicity(self):
        ph = PH.make_phantom("shepp")
        vals = []
        for nv in (32, 64, 96):
            g = PH.FanBeamGeometry(n_views=nv, n_detectors=96, image_size=64)
            vals.append(psnr(ph, PH.fbp(PH.forward_project(ph, g), g)))
        assert vals[0] < vals[1] < vals[2]

    def test_hann_flag(self):
        g = small_geom()
        sino = PH.forward_project(PH.make_phantom("ellipses", seed=1, size=16), g)
        assert not np.allclose(PH.fbp(sino, g), PH.fbp(sino, g, apodization="hann"))
        with pytest.raises(ValueError):
            PH.fbp(sino, g, apodization="blackman")


class TestLowDose:
    def test_no_noise_flag_exact(self):
        rng = np.random.default_rng(3)
        s = np.abs(rng.normal(size=(10, 10)))
        assert np.array_equal(PH.degrade_low_dose(s, "half", 0, no_noise=True), s)

    def test_monte_carlo_mean(self):
        s = np.full(10_000, 1.0)
        d = PH.degrade_low_dose(s, "half", seed=7)
        assert abs(d.mean() - 1.0) <= 0.01

    def test_variance_monotone_and_delta_method(self):
        s = np.full(20_000, 2.0)
        variances = []
        for lbl in ("half", "quarter", "eighth"):
            d = PH.degrade_low_dose(s, lbl, seed=11)
            v = d.var()
            pred = np.exp(2.0) / PH.DOSE_PHOTONS[lbl]
            assert abs(v - pred) <= 0.10 * pred
            variances.append(v)
        assert variances[0] < variances[1] < variances[2]

    def test_seed_reproducible(self):
        s = np.full((8, 8), 1.5)
        a = PH.degrade_low_dose(s, "eighth", seed=5)
        b = PH.degrade_low_dose(s, "eighth", seed=5)
        assert np.array_equal(a, b)

    def test_dose_label_mapping(self):
        assert PH.DoseLevel("half").photons == 1e5
        assert PH.DoseLevel("quarter").photons == 5e4
        assert PH.DoseLevel("eighth").photons == 2.5e4
        assert PH.DoseLevel("eighth").reciprocal == 8.0
        with pytest.raises(ValueError):
            PH.DoseLevel("tenth")


class TestMetal:
    def test_empty_mask_identity_with_warning(self):
        img = PH.make_phantom("ellipses", seed=0)
        spec = PH.MetalSpec(np.zeros_like(img, dtype=bool))
        with pytest.warns(UserWarning):
            out = PH.insert_metal(img, spec)
        assert np.array_equal(out, img)

    def test_full_mask_constant(self):
        img = PH.make_phantom("ellipses", seed=0)
        out = PH.insert_metal(img, PH.MetalSpec(np.ones_like(img, dtype=bool)))
        assert np.all(out == PH.MU_METAL)

    def test_disk_mask_118px_exact_count(self):
        img = PH.make_phantom("ellipses", seed=0)
        mask = PH.mask_with_area(64, (32, 32), 118)
        assert mask.sum() == 118
        out = PH.insert_metal(img, PH.MetalSpec(mask))
        assert int(np.sum(out == PH.MU_METAL)) == 118

    def test_trace_empty_and_full(self):
        g = small_geom()
        n = g.image_size
        assert not PH.metal_trace(PH.MetalSpec(np.zeros((n, n), bool)), g).any()
        assert PH.metal_trace(PH.MetalSpec(np.ones((n, n), bool)), g).all()

    def test_trace_single_pixel_contiguous_runs(self):
        g = small_geom(8, 12, 12)
        mask = np.zeros((8, 8), bool)
        mask[3, 4] = True
        trace = PH.metal_trace(PH.MetalSpec(mask), g)
        dense = PH.projection_matrix(g).toarray()
        col = dense[:, 3 * 8 + 4].reshape(g.sinogram_shape) > 0
        assert np.array_equal(trace, col)
        for row in trace:
            on = np.flatnonzero(row)
            if on.size:
                assert np.all(np.diff(on) == 1)


class TestPhantoms:
    def test_deterministic_and_range(self):
        a = PH.make_phantom("ellipses", seed=9)
        b = PH.make_phantom("ellipses", seed=9)
        assert np.array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 0.05

    def test_inside_fov(self):
        g = PH.default_geometry()
        ph = PH.make_phantom("ellipses", seed=4)
        n = g.image_size
        ctr = (n - 1) / 2
        rr, cc = np.mgrid[0:n, 0:n]
        outside = ((rr - ctr) ** 2 + (cc - ctr) ** 2) > (g.fov_radius / g.pixel_spacing) ** 2
        assert np.all(ph[outside] == 0.0)


class TestIO:
    def test_raw_sidecar_roundtrip(self, tmp_path):
        arr = np.random.default_rng(0).normal(size=(5, 7))
        path = tmp_path / "img.f64"
        PH.save_array(path, arr, units="mu_mm^-1")
        back, units = PH.load_array(path)
        assert np.array_equal(back, arr)
        assert units == "mu_mm^-1"

    def test_pgm_export(self, tmp_path):
        img = PH.make_phantom("ellipses", seed=1)
        path = tmp_path / "img.pgm"
        PH.save_pgm(path, img)
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n64 64\n65535\n")
        assert len(raw) == len(b"P5\n64 64\n65535\n") + 64 * 64 * 2

    def test_hu_conversion(self):
        assert PH.mu_to_hu(PH.MU_WATER) == 0.0
        assert np.isclose(PH.hu_to_mu(PH.mu_to_hu(0.03)), 0.03)
