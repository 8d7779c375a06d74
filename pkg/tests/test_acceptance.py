"""Acceptance checks, one per numbered criterion.

Each test records a PASS/FAIL line through the conftest hook so the
criterion ledger prints at the end of the run, then asserts. Tolerances
are pinned in the assertions themselves.
"""

import math
import time

import numpy as np
import pytest
import synth
from conftest import record_criterion

from gsvc.bitstream import (
    BitstreamError,
    FrameRecord,
    StreamHeader,
    bitsback_savings,
    deserialize,
    savings_per_pframe_bits,
    scan_record_sizes,
    serialize,
)
from gsvc.gaussians import GaussianSet, inv_softplus
from gsvc.initializer import full_frame_mask, random_init, superpixel_init
from gsvc.metrics import psnr
from gsvc.optimizer import FitConfig, fit, loss_and_grad
from gsvc.pframe import build_index, change_map, dilate_change_map, encode_pframe
from gsvc.pipeline import EncodeJob, decode_video, encode_video
from gsvc.quantization import (
    calibrate_from_attributes,
    calibrate_ptq,
    default_quant_spec,
    dequantize,
    quantize,
    set_from_quantized,
)
from gsvc.rasterizer import RenderConfig, render

FULL_COVER = RenderConfig(cutoff=50.0)


def fit_psnr(gs, target, iters, quant_in_loop=False, spec=None):
    cfg = FitConfig(max_iters=iters, quant_in_loop=quant_in_loop,
                    quant_spec=spec)
    fitted, report = fit(gs, target, None, cfg)
    return fitted, report, psnr(render(fitted, RenderConfig()), target)


class TestCriterion01Gradients:
    def test_analytic_vs_central_differences(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(42)
        worst = 0.0
        checked = 0
        for _ in range(20):
            mu = rng.uniform(1.0, 15.0, size=(5, 2))
            chol = np.column_stack([
                rng.uniform(0.8, 3.5, 5),
                rng.uniform(-1.5, 1.5, 5),
                rng.uniform(0.8, 3.5, 5),
            ])
            color = rng.uniform(0.0, 1.0, size=(5, 3))
            gs = GaussianSet.from_attributes(mu, chol, color, (16, 16))
            target = rng.uniform(0.0, 1.0, size=(16, 16, 3))
            cfg = FitConfig(cutoff=50.0)
            _, grads = loss_and_grad(gs, target, cfg=cfg)
            analytic = np.concatenate(
                [grads.mu.ravel(), grads.chol.ravel(), grads.color.ravel()])

            h = 1e-6
            packed = np.concatenate(
                [gs.mu.ravel(), gs.chol_raw.ravel(), gs.color.ravel()])

            def loss_at(theta):
                m = theta[:10].reshape(5, 2)
                c = theta[10:25].reshape(5, 3)
                k = theta[25:].reshape(5, 3)
                probe = GaussianSet(m, c, k, (16, 16))
                value, _ = loss_and_grad(probe, target, cfg=cfg)
                return value

            for j in range(packed.size):
                up = packed.copy()
                up[j] += h
                down = packed.copy()
                down[j] -= h
                fd = (loss_at(up) - loss_at(down)) / (2 * h)
                a = analytic[j]
                err = abs(a - fd)
                bound = max(1e-3 * max(abs(a), abs(fd)), 1e-6)
                worst = max(worst, err / bound)
                checked += 1
                assert err <= bound, (
                    f"partial {j}: analytic {a:.3e} vs fd {fd:.3e}")
        elapsed = time.perf_counter() - t0
        passed = worst <= 1.0 and elapsed < 30.0
        record_criterion(
            1, passed,
            f"{checked} partials on 20 scenes within 1e-3 rel "
            f"(worst {worst:.2e} of bound) in {elapsed:.1f}s < 30s")
        assert passed
        assert elapsed < 30.0


class TestCriterion02RenderingOracle:
    def single(self, s, k=3):
        # Isotropic splat centered on pixel (8, 8); pixels k steps away sit
        # at Mahalanobis sigma = k^2 / (2 s^2).
        mu = np.array([[8.5, 8.5]])
        raw = inv_softplus(np.array([[s], [s]]))
        chol_raw = np.column_stack([raw[0], np.zeros(1), raw[1]])
        color = np.array([[0.8, 0.4, 0.2]])
        return GaussianSet(mu, chol_raw, color, (20, 20))

    def test_values_and_invariances(self):
        s = 3.0 / math.sqrt(2.0 * math.log(2.0))
        gs = self.single(s)
        img = render(gs, FULL_COVER, clamp=False)
        peak_err = np.max(np.abs(img[8, 8] - [0.8, 0.4, 0.2]))
        # Pixel (11, 8) lies 3 px from center: sigma = ln 2, so exactly
        # half the stored contribution.
        half_err = max(
            np.max(np.abs(img[8, 11] - np.array([0.8, 0.4, 0.2]) / 2)),
            np.max(np.abs(img[11, 8] - np.array([0.8, 0.4, 0.2]) / 2)),
        )

        rng = np.random.default_rng(7)
        mu = rng.uniform(0, 64, (80, 2))
        chol = np.column_stack([
            rng.uniform(0.5, 5.0, 80),
            rng.uniform(-2.0, 2.0, 80),
            rng.uniform(0.5, 5.0, 80),
        ])
        color = rng.uniform(0, 1, (80, 3))
        base = GaussianSet.from_attributes(mu, chol, color, (64, 64))
        reference = render(base, RenderConfig(tile_size=16), clamp=False)
        perm = rng.permutation(80)
        shuffled = GaussianSet.from_attributes(
            mu[perm], chol[perm], color[perm], (64, 64))
        perm_err = np.max(np.abs(
            render(shuffled, RenderConfig(tile_size=16), clamp=False)
            - reference))
        tile_err = max(
            np.max(np.abs(render(base, RenderConfig(tile_size=t), clamp=False)
                          - reference))
            for t in (8, 32, 64)
        )

        passed = (peak_err < 1e-6 and half_err < 1e-6
                  and perm_err < 1e-6 and tile_err < 1e-6)
        record_criterion(
            2, passed,
            f"peak err {peak_err:.1e}, half-value err {half_err:.1e}, "
            f"permutation {perm_err:.1e}, tile-size {tile_err:.1e} "
            "(all < 1e-6)")
        assert passed


class TestCriterion03InitializationOrdering:
    def test_superpixel_beats_random(self, voronoi128, ellipse128, smooth128):
        fixtures = [("voronoi", voronoi128), ("ellipses", ellipse128),
                    ("smooth", smooth128)]
        margins = []
        for name, img in fixtures:
            mask = full_frame_mask((128, 128))
            sp = superpixel_init(img, mask, 200)
            rnd = random_init((128, 128), 200, seed=0)
            _, _, sp_psnr = fit_psnr(sp, img, 200)
            _, _, rnd_psnr = fit_psnr(rnd, img, 200)
            margins.append((name, sp_psnr, rnd_psnr))
        passed = all(s - r >= 2.0 for _, s, r in margins)
        detail = "; ".join(f"{n} {s:.1f} vs {r:.1f} dB (+{s - r:.1f})"
                           for n, s, r in margins)
        record_criterion(3, passed,
                         f"superpixel vs random after 200 iters: {detail}")
        assert passed


class TestCriterion04FittingCapability:
    def test_natural_crop_reaches_30db(self):
        img = synth.natural_crop()
        start = superpixel_init(img, full_frame_mask((128, 128)), 500)
        cfg = FitConfig(max_iters=10000, target_psnr=30.0,
                        psnr_check_every=25)
        fitted, report = fit(start, img, None, cfg)
        final = psnr(render(fitted, RenderConfig()), img)
        passed = final >= 30.0 and report.iterations <= 10000
        record_criterion(
            4, passed,
            f"natural 128x128 crop, N=500: {final:.2f} dB at iteration "
            f"{report.iterations} of 10000")
        assert passed


class TestCriterion05PframeSelectivity:
    def brute_force_selection(self, gs, changed, eps=0.01):
        """Influence sets from first principles at the changed pixels."""
        ys, xs = np.nonzero(changed)
        centers = np.column_stack([xs + 0.5, ys + 0.5])
        limit = -math.log(eps)
        hit = []
        for i in range(gs.n):
            l1, l2, l3 = gs.chol[i]
            cov = (np.array([[l1, 0.0], [l2, l3]])
                   @ np.array([[l1, l2], [0.0, l3]]))
            inv = np.linalg.inv(cov)
            d = centers - gs.mu[i]
            sigma = 0.5 * np.einsum("pi,ij,pj->p", d, inv, d)
            if np.any(sigma <= limit):
                hit.append(i)
        return np.array(hit, dtype=np.int32)

    def test_moving_square(self):
        frames = synth.moving_square_frames(2, size=128, square=16, step=6,
                                            start=40, row=56)
        f0, f1 = frames
        n = 300
        start = superpixel_init(f0, full_frame_mask((128, 128)), n)
        # The reference must sit at its convergence plateau: residual
        # tails of an under-fitted keyframe light up pixels far from the
        # motion, inflating the selection, and a full refit would keep
        # harvesting background gains the frozen rows cannot follow.
        reference, _ = fit(start, f0, None, FitConfig(max_iters=1200))
        idx = build_index(reference)
        budget = FitConfig(max_iters=100)

        updated, ids, _ = encode_pframe(reference, idx, f1, cfg=budget)

        # The same change map the encoder derives, then an exhaustive
        # influence enumeration to check the selection exactly.
        ref_render = render(reference, RenderConfig(), clamp=True)
        cm = dilate_change_map(change_map(f1, ref_render))
        oracle_ids = self.brute_force_selection(reference, cm.changed)
        oracle_ok = np.array_equal(np.sort(ids), oracle_ids)

        untouched = np.setdiff1d(np.arange(reference.n), ids)
        frozen_ok = (
            np.array_equal(updated.mu[untouched], reference.mu[untouched])
            and np.array_equal(updated.chol_raw[untouched],
                               reference.chol_raw[untouched])
            and np.array_equal(updated.color[untouched],
                               reference.color[untouched])
        )

        full_refit, _ = fit(reference, f1, None, budget)
        selective_psnr = psnr(render(updated, RenderConfig()), f1)
        full_psnr = psnr(render(full_refit, RenderConfig()), f1)

        share = ids.size / n
        passed = (share <= 0.25 and frozen_ok and oracle_ok
                  and selective_psnr >= full_psnr - 0.5)
        record_criterion(
            5, passed,
            f"selected {ids.size}/{n} ({share:.0%} <= 25%), untouched rows "
            f"bit-identical: {frozen_ok}, brute-force selection match: "
            f"{oracle_ok}, {selective_psnr:.2f} dB vs full refit "
            f"{full_psnr:.2f} dB (within 0.5)")
        assert passed


class TestCriterion06BitsBack:
    def test_savings_arithmetic(self):
        s_p = savings_per_pframe_bits(100)
        oracle = sum(math.log2(k) for k in range(1, 101)) - math.log2(100)
        report = bitsback_savings(100, 100, 4)
        s_total = report.total_savings_bits

        exact_zero = savings_per_pframe_bits(1) == 0.0
        passed = (
            abs(s_p - oracle) < 1e-6
            and abs(s_total - 75 * oracle) < 1e-6
            and abs(s_total - 38859.0) < 5.0
            and exact_zero
        )
        record_criterion(
            6, passed,
            f"S_P(100) = {s_p:.6f} vs oracle {oracle:.6f}, S_total = "
            f"{s_total:.1f} ~ 38859, S_P(1) = 0 exactly: {exact_zero}")
        assert passed


class TestCriterion07LosslessTransport:
    def random_spec(self, rng, dims):
        mode = rng.choice(["ptq", "qat", "none"], p=[0.45, 0.45, 0.1])
        spec = default_quant_spec(
            dims, mode=str(mode),
            mu_bits=int(rng.integers(2, 17)),
            chol_bits=int(rng.integers(2, 17)),
            color_bits=int(rng.integers(2, 17)),
        )
        if mode == "none":
            return spec
        chol = np.column_stack([
            rng.uniform(0.05, 6.0, 64),
            rng.uniform(-3.0, 3.0, 64),
            rng.uniform(0.05, 6.0, 64),
        ])
        color = rng.uniform(-0.3, 1.3, size=(64, 3))
        return calibrate_from_attributes(chol, color, spec)

    def random_attributes(self, rng, n, dims):
        w, h = dims
        mu = rng.uniform([-0.2 * w, -0.2 * h], [1.2 * w, 1.2 * h], (n, 2))
        chol = np.column_stack([
            rng.uniform(0.1, 5.0, n),
            rng.uniform(-2.5, 2.5, n),
            rng.uniform(0.1, 5.0, n),
        ])
        color = rng.uniform(0.0, 1.0, (n, 3))
        return GaussianSet.from_attributes(mu, chol, color, dims)

    def test_thousand_round_trips_and_truncation_fuzz(self):
        rng = np.random.default_rng(1234)
        dims = (40, 30)
        trips = 0
        for trial in range(1000):
            spec = self.random_spec(rng, dims)
            n = int(rng.integers(1, 41))
            gs = self.random_attributes(rng, n, dims)
            q = quantize(gs, spec)
            header = StreamHeader(
                width=40, height=30, fps=30.0, gop=2, n_gaussians=n,
                frame_count=2 if trial % 3 == 0 else 1,
                background=(0, 0, 0), change_threshold=0.04, quant=spec,
            )
            records = [FrameRecord("I", q)]
            if header.frame_count == 2:
                m = int(rng.integers(0, n + 1))
                ids = np.sort(rng.choice(n, m, replace=False))
                sub = self.random_attributes(rng, m, dims) if m else None
                qp = (quantize(sub, spec) if m
                      else FrameRecord("I", q).q.__class__(
                          q.mu[:0], q.chol[:0], q.color[:0]))
                records.append(FrameRecord("P", qp, ids))
            stream = serialize(header, records)
            _, got = deserialize(stream)
            for want_rec, got_rec in zip(records, got):
                np.testing.assert_array_equal(got_rec.q.mu, want_rec.q.mu)
                np.testing.assert_array_equal(got_rec.q.chol, want_rec.q.chol)
                np.testing.assert_array_equal(got_rec.q.color,
                                              want_rec.q.color)
                if want_rec.frame_type == "P":
                    np.testing.assert_array_equal(got_rec.ids, want_rec.ids)
                back_want = dequantize(want_rec.q, spec)
                back_got = dequantize(got_rec.q, spec)
                for a, b in zip(back_want, back_got):
                    np.testing.assert_array_equal(a, b)
                trips += 1

        cuts = 0
        for cut in rng.choice(len(stream), size=300, replace=False):
            with pytest.raises(BitstreamError):
                deserialize(stream[:int(cut)])
            cuts += 1

        record_criterion(
            7, True,
            f"{trips} record round trips bit-exact over 1000 randomized "
            f"streams; {cuts} truncations all raised typed errors")


class TestCriterion08QuantizationQuality:
    FIXTURES = (
        ("voronoi", lambda: synth.voronoi_image()),
        ("smooth", lambda: synth.smooth_image()),
        ("blobs", lambda: synth.blob_image()),
        ("waves", lambda: synth.wave_image()),
    )

    def test_ptq_cost_and_qat_ordering(self):
        iters = 300
        rows = []
        for name, make in self.FIXTURES:
            img = make()
            start = superpixel_init(img, full_frame_mask((128, 128)), 200)
            fitted, _, float_psnr = fit_psnr(start, img, iters)

            spec = calibrate_ptq([fitted], default_quant_spec((128, 128)))
            ptq_set = set_from_quantized(quantize(fitted, spec), spec,
                                         (128, 128))
            ptq_psnr = psnr(render(ptq_set, RenderConfig()), img)

            qat_spec0 = default_quant_spec((128, 128), mode="qat")
            qat_fit, report = fit(
                start, img, None,
                FitConfig(max_iters=iters, quant_in_loop=True,
                          quant_spec=qat_spec0))
            qat_set = set_from_quantized(
                quantize(qat_fit, report.quant_spec), report.quant_spec,
                (128, 128))
            qat_psnr = psnr(render(qat_set, RenderConfig()), img)
            rows.append((name, float_psnr, ptq_psnr, qat_psnr))

        ptq_ok = all(f - p <= 1.5 for _, f, p, _ in rows)
        qat_ok = all(q >= p for _, _, p, q in rows)
        detail = "; ".join(
            f"{n}: float {f:.2f}, ptq {p:.2f} (-{f - p:.2f}), "
            f"qat {q:.2f} (+{q - p:.2f})"
            for n, f, p, q in rows)
        record_criterion(
            8, ptq_ok and qat_ok,
            f"default bits at {iters} iters: {detail}")
        assert ptq_ok, detail
        assert qat_ok, detail


class TestCriterion09BppDirection:
    def test_low_motion_gop_beats_all_intra(self, tmp_path):
        from gsvc.frameio import save_frames

        frames = synth.moving_square_frames(16, size=80, square=10, step=2)
        clip = tmp_path / "clip"
        save_frames(frames, clip)

        def encode(gop):
            job = EncodeJob(input=str(clip), n_gaussians=120, gop=gop,
                            iters=400, seed=0, quant_mode="qat")
            stream, _ = encode_video(job)
            return stream

        gop_stream = encode(4)
        intra_stream = encode(1)

        sizes = scan_record_sizes(gop_stream)
        i_sizes = [s for t, s in sizes if t == "I"]
        p_sizes = [s for t, s in sizes if t == "P"]
        mean_i = np.mean(i_sizes)
        mean_p = np.mean(p_sizes)
        pixels = 80 * 80 * 16
        gop_bpp = len(gop_stream) * 8 / pixels
        intra_bpp = len(intra_stream) * 8 / pixels

        passed = mean_p < 0.5 * mean_i and gop_bpp < intra_bpp
        record_criterion(
            9, passed,
            f"16-frame low motion, K=4: mean P {mean_p:.0f} B < half of "
            f"mean I {mean_i:.0f} B; stream {gop_bpp:.3f} bpp < all-I "
            f"{intra_bpp:.3f} bpp")
        assert passed


class TestCriterion10Determinism:
    def test_byte_identity_across_runs_and_workers(self, tmp_path):
        from gsvc.frameio import save_frames

        frames = synth.moving_square_frames(6, size=48, square=8, step=4)
        clip = tmp_path / "clip"
        save_frames(frames, clip)

        def encode(workers):
            job = EncodeJob(input=str(clip), n_gaussians=40, gop=3,
                            iters=60, seed=7, workers=workers)
            stream, _ = encode_video(job)
            return stream

        first = encode(1)
        second = encode(1)
        threaded = encode(4)
        decoded_a, _ = decode_video(first, workers=1)
        decoded_b, _ = decode_video(first, workers=3)
        decode_ok = all(np.array_equal(a, b)
                        for a, b in zip(decoded_a, decoded_b))

        passed = first == second and first == threaded and decode_ok
        record_criterion(
            10, passed,
            f"{len(first)}-byte stream identical across two runs and "
            f"workers 1 vs 4; decode bit-identical across worker counts")
        assert passed
