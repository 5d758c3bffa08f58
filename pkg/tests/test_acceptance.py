"""End-to-end acceptance suite.

Each test class checks one release gate: the bicubic PSNR/SSIM anchors on
Set5, finite-difference agreement of every differentiable op and loss, loss
identities, network shape laws, a complete small-scale training run, ablation
log columns, the optimizer reference trajectory, the noise sweep, and
determinism / persistence of checkpoints.
"""

import math
import os
import time

import numpy as np
import pytest

from bicyclesr import classical, dataio, losses, trainer
from bicyclesr import tensor as T
from bicyclesr.losses import LossWeights
from bicyclesr.models import DegradationNet, Discriminator, FeatureExtractor, ReconstructionNet
from bicyclesr.optim import Adam, LrSchedule
from bicyclesr.tensor import Tensor
from bicyclesr.trainer import Trainer, desk_profile, load_checkpoint, save_checkpoint

from conftest import needs_set5, set5_dir, tiny_train_config
from oracles import adam_ref, fd_check, f64_params, rand_tensor

SET5 = set5_dir()


def _set5_images():
    return [
        dataio.load_image(os.path.join(SET5, f)).float_data()
        for f in sorted(os.listdir(SET5))
        if f.lower().endswith(".png")
    ]


def _bicubic_round_trip_scores(scale):
    scores = []
    for img in _set5_images():
        h, w = img.shape[:2]
        img = img[: h - h % scale, : w - w % scale]
        lr = classical.bicubic_resize(img, scale, "down")
        up = classical.resize_to(lr, img.shape[0], img.shape[1])
        scores.append(classical.score_pair(img, up, border=scale))
    psnrs, ssims = zip(*scores)
    return float(np.mean(psnrs)), float(np.mean(ssims))


class TestBicubicAnchor:
    """Classical round-trip scores on Set5 must land on the published values."""

    @needs_set5
    def test_set5_round_trip_anchors(self):
        t0 = time.perf_counter()
        p4, s4 = _bicubic_round_trip_scores(4)
        p2, s2 = _bicubic_round_trip_scores(2)
        elapsed = time.perf_counter() - t0
        assert p4 == pytest.approx(28.42, abs=0.35)
        assert s4 == pytest.approx(0.810, abs=0.01)
        assert p2 == pytest.approx(33.65, abs=0.35)
        assert s2 == pytest.approx(0.930, abs=0.01)
        assert elapsed < 30.0


class TestGradientSuite:
    """Every differentiable op and every loss agrees with central finite
    differences to better than 1e-4 relative error across 20 seeds."""

    def _check_ops(self, seed):
        rng = np.random.default_rng(seed)
        a = rand_tensor(rng, (3, 4))
        b = rand_tensor(rng, (3, 4), lo=0.5, hi=2.0)
        fd_check(lambda: T.sum_(a + b) + T.sum_(a - b) + T.sum_(a * b) + T.sum_(a / b), [a, b], max_entries=4, rng=rng)
        x = rand_tensor(rng, (2, 6), avoid_zero=0.1)
        fd_check(
            lambda: T.sum_(T.relu(x)) + T.sum_(T.leaky_relu(x)) + T.sum_(T.sigmoid(x)) + T.sum_(T.absolute(x)),
            [x], max_entries=4, rng=rng,
        )
        p = rand_tensor(rng, (5,), lo=0.2, hi=2.0)
        fd_check(lambda: T.sum_(T.log(p)) + T.sum_(T.sqrt(p)) + T.sum_(T.square(p)), [p], max_entries=4, rng=rng)
        c = rand_tensor(rng, (6,), lo=-2.0, hi=2.0, avoid_zero=0.1)
        fd_check(lambda: T.sum_(T.clamp(c, -1.0, 1.0) * c), [c], max_entries=4, rng=rng)
        m = rand_tensor(rng, (2, 3, 4))
        fd_check(lambda: T.sum_(T.square(T.mean(m, axis=1, keepdims=True))), [m], max_entries=4, rng=rng)
        s = rand_tensor(rng, (1, 2, 5, 5))
        fd_check(lambda: T.mean(T.square(T.slice_hw(s, 1, 4, 0, 3))), [s], max_entries=4, rng=rng)
        fd_check(lambda: T.mean(T.square(T.reshape(s, (2, 25)))), [s], max_entries=4, rng=rng)
        ps = rand_tensor(rng, (1, 8, 3, 3))
        fd_check(lambda: T.mean(T.square(T.pixel_shuffle(ps, 2))), [ps], max_entries=4, rng=rng)
        mp = rand_tensor(rng, (1, 2, 4, 4))
        fd_check(lambda: T.mean(T.square(T.maxpool2d(mp, 2))), [mp], max_entries=4, rng=rng)
        br = rand_tensor(rng, (1, 2, 4, 5))
        fd_check(lambda: T.mean(T.square(T.bilinear_resize(br, 6, 7))), [br], max_entries=4, rng=rng)
        cx = rand_tensor(rng, (1, 2, 5, 6))
        cw = rand_tensor(rng, (3, 2, 3, 3))
        cb = rand_tensor(rng, (3,))
        fd_check(lambda: T.mean(T.square(T.conv2d(cx, cw, cb, stride=2, padding=1))), [cx, cw, cb], max_entries=4, rng=rng)

    def _check_losses(self, seed):
        rng = np.random.default_rng(seed)
        d = f64_params(Discriminator(4, seed=seed))
        fake = rand_tensor(rng, (2, 3, 4, 4), lo=0.0, hi=1.0)
        real = Tensor(rng.uniform(size=(2, 3, 4, 4)))
        d_params = list(d.parameters().values())
        fd_check(lambda: losses.adversarial_loss(d, fake), [fake] + d_params[:2], max_entries=4, rng=rng)
        fd_check(lambda: losses.discriminator_loss(d, real, fake.detach()), d_params[:3], max_entries=4, rng=rng)
        p = f64_params(FeatureExtractor(seed=seed, width_scale=0.0625, input_size=8))
        gen = rand_tensor(rng, (1, 3, 8, 8), lo=0.05, hi=0.95)
        ref = Tensor(rng.uniform(size=(1, 3, 8, 8)) + 1.5)
        fd_check(lambda: losses.perceptual_loss(p, gen, ref), [gen], max_entries=6, rng=rng)
        tv = rand_tensor(rng, (1, 2, 4, 4))
        fd_check(lambda: losses.tv_loss(tv), [tv], max_entries=4, rng=rng)
        l1a = rand_tensor(rng, (1, 2, 3, 3))
        l1b = Tensor(rng.standard_normal((1, 2, 3, 3)) + 3.0)
        fd_check(lambda: losses.l1_loss(l1a, l1b), [l1a], max_entries=4, rng=rng)
        g = f64_params(DegradationNet(2, width=4, blocks=1, seed=seed))
        r = f64_params(ReconstructionNet(2, width=4, blocks=1, seed=seed + 1))
        z = rand_tensor(rng, (1, 3, 4, 4), lo=0.0, hi=1.0)
        cyc_params = list(g.parameters().values())[:3] + list(r.parameters().values())[:3]
        fd_check(lambda: losses.cycle_loss(g, r, z), [z] + cyc_params, max_entries=3, rng=rng)

    def test_all_ops_and_losses_match_finite_differences(self):
        t0 = time.perf_counter()
        for seed in range(20):
            self._check_ops(seed)
            self._check_losses(seed)
        assert time.perf_counter() - t0 < 120.0


class TestLossIdentities:
    def test_zero_at_minimum_cases(self):
        x = Tensor(np.random.default_rng(0).uniform(size=(2, 3, 4, 4)))
        assert losses.l1_loss(x, x).item() == 0.0
        assert losses.tv_loss(Tensor(np.full((1, 3, 4, 4), 0.3))).item() == 0.0

        class Identity:
            input_size = 4

            def __call__(self, t):
                return t

        assert losses.perceptual_loss(Identity(), x, x).item() == 0.0
        assert losses.cycle_loss(lambda t: t * 0.5, lambda t: t * 2.0, x).item() == pytest.approx(0.0, abs=1e-7)
        ones = Tensor(np.ones((4, 1, 1, 1)))
        assert losses.adversarial_loss(ones, None).item() == pytest.approx(0.0, abs=1e-6)

    def test_composite_identities_on_random_triples(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            c, a, p, l1, tv = rng.uniform(0.0, 10.0, size=5)
            w = LossWeights(
                alpha=rng.uniform(0.0, 2.0),
                beta=rng.uniform(0.0, 2.0),
                eta=rng.uniform(0.0, 2.0),
                gamma=rng.uniform(0.0, 2.0),
            )
            deg = losses.degradation_objective(c, a, p, w)
            rec = losses.reconstruction_objective(l1, c, tv, w)
            assert abs(deg - (c + w.alpha * a + w.beta * p)) < 1e-6
            assert abs(rec - (l1 + w.eta * c + w.gamma * tv)) < 1e-6
            assert abs(losses.total_objective(deg, rec) - (deg + rec)) < 1e-6
            bd = losses.LossBreakdown(l_adv=a, l_per=p, l_cyc=c, l_1=l1, l_tv=tv).compose(w)
            assert abs(bd.l_deg - deg) < 1e-6
            assert abs(bd.l_rec - rec) < 1e-6
            assert abs(bd.l_total - (deg + rec)) < 1e-6


class TestShapeLaws:
    @pytest.mark.parametrize("scale", [2, 4])
    def test_degradation_and_reconstruction_shape_laws(self, scale):
        rng = np.random.default_rng(scale)
        g = DegradationNet(scale, width=8, blocks=1, seed=0)
        r = ReconstructionNet(scale, width=8, blocks=1, seed=1)
        for _ in range(6):
            mult = int(rng.integers(2, 14))
            size = scale * mult
            x = Tensor(rng.uniform(size=(1, 3, size, size)).astype(np.float32))
            assert g(x).shape == (1, 3, size // scale, size // scale)
            lr_size = int(rng.integers(2, 14))
            z = Tensor(rng.uniform(size=(1, 3, lr_size, lr_size)).astype(np.float32))
            assert r(z).shape == (1, 3, lr_size * scale, lr_size * scale)

    def test_pixel_shuffle_is_a_value_preserving_permutation(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            r = int(rng.integers(2, 4))
            n = int(rng.integers(1, 3))
            oc = int(rng.integers(1, 4))
            h = int(rng.integers(1, 5))
            w = int(rng.integers(1, 5))
            x = rng.standard_normal((n, oc * r * r, h, w))
            out = T.pixel_shuffle(Tensor(x), r).data
            assert out.shape == (n, oc, h * r, w * r)
            np.testing.assert_array_equal(np.sort(out.ravel()), np.sort(x.ravel()))
            # spot-check the exact index mapping
            for _ in range(5):
                ni = rng.integers(n)
                co = rng.integers(oc)
                oi = rng.integers(h * r)
                oj = rng.integers(w * r)
                ci = co * r * r + (oi % r) * r + (oj % r)
                assert out[ni, co, oi, oj] == x[ni, ci, oi // r, oj // r]


@pytest.fixture(scope="module")
def desk_run(hr_dir, lr_dir):
    """One complete small-profile training run with progress probes."""
    cfg = desk_profile(seed=0, hr_dir=hr_dir, lr_dir=lr_dir)
    t = Trainer(cfg)
    t.attach_data()

    held = dataio.EndlessPatchSampler(
        dataio.DatasetManifest.from_dir("hr", hr_dir), cfg.batch_size, cfg.hr_patch, seed=999
    ).next_batch()
    held_lr = trainer._downscale_batch_bicubic(held, cfg.scale)

    def held_out_l1():
        with T.no_grad():
            xhat = t.nets.r(held_lr)
        return losses.l1_loss(xhat, held).item()

    probes = {}
    t0 = time.perf_counter()
    while t.iteration < cfg.iterations:
        t.run_iteration()
        if t.iteration == 10:
            probes["d_10"] = t._last_d_loss
        if t.iteration == 50:
            probes["held_50"] = held_out_l1()
    probes["d_2000"] = t._last_d_loss
    probes["held_2000"] = held_out_l1()
    probes["elapsed"] = time.perf_counter() - t0
    return {"trainer": t, "cfg": cfg, "probes": probes}


class TestTrainingSmoke:
    def test_completes_within_compute_budget(self, desk_run):
        # the reference budget assumes 8 worker threads; normalize it to the
        # cores this machine actually provides
        budget = 30 * 60 * 8 / min(8, os.cpu_count() or 1)
        assert desk_run["probes"]["elapsed"] < budget

    def test_every_log_row_satisfies_the_composite_identity(self, desk_run):
        w = desk_run["cfg"].weights
        rows = desk_run["trainer"].rows
        assert len(rows) == desk_run["cfg"].iterations
        for row in rows:
            bd = row.breakdown
            assert bd.l_deg == pytest.approx(bd.l_cyc + w.alpha * bd.l_adv + w.beta * bd.l_per, abs=1e-6)
            assert bd.l_rec == pytest.approx(bd.l_1 + w.eta * bd.l_cyc + w.gamma * bd.l_tv, abs=1e-6)
            assert bd.l_total == pytest.approx(bd.l_deg + bd.l_rec, abs=1e-6)
            assert all(math.isfinite(getattr(bd, f)) for f in losses.ALL_FIELDS)

    def test_held_out_reconstruction_improves(self, desk_run):
        probes = desk_run["probes"]
        assert probes["held_2000"] < probes["held_50"]

    def test_discriminator_loss_drops(self, desk_run):
        probes = desk_run["probes"]
        assert probes["d_2000"] < probes["d_10"]


class TestAblationColumns:
    EXPECTED = {
        "full": {"l_adv", "l_per", "l_cyc", "l_1", "l_tv", "l_deg", "l_rec", "l_total"},
        "no_dm": {"l_1", "l_tv", "l_rec", "l_total"},
        "no_d": {"l_per", "l_cyc", "l_1", "l_tv", "l_deg", "l_rec", "l_total"},
        "no_cycle": {"l_adv", "l_per", "l_1", "l_tv", "l_deg", "l_rec", "l_total"},
    }

    @pytest.mark.parametrize("ablation", sorted(EXPECTED))
    def test_log_columns_match_mode(self, ablation, hr_dir, lr_dir):
        cfg = tiny_train_config(hr_dir, lr_dir, ablation=ablation, iterations=2)
        t = Trainer(cfg)
        for _ in range(2):
            row = t.run_iteration()
            assert set(row.breakdown.present()) == self.EXPECTED[ablation]
            line = row.line()
            for name in losses.ALL_FIELDS:
                assert (f"{name}=" in line) == (name in self.EXPECTED[ablation])


class TestOptimizerOracle:
    def test_ten_step_scalar_trajectory(self):
        rng = np.random.default_rng(42)
        grads = rng.standard_normal(10)
        p = Tensor(np.array([0.5], dtype=np.float64), requires_grad=True)
        opt = Adam({"w": p})
        got = []
        for g in grads:
            p.grad = np.array([g], dtype=np.float64)
            opt.step(1e-3)
            got.append(float(p.data[0]))
        np.testing.assert_allclose(got, adam_ref(grads, lr=1e-3, theta0=0.5), rtol=0, atol=1e-10)

    def test_learning_rate_halving_points(self):
        s = LrSchedule(base_lr=1e-4, halve_every=200_000)
        assert s.lr_at(0) == 1e-4
        assert s.lr_at(200_000) == 5e-5
        assert s.lr_at(400_000) == 2.5e-5


class TestNoiseSweep:
    @needs_set5
    def test_baseline_psnr_is_non_increasing_in_noise(self):
        images = _set5_images()
        means = []
        for sigma in range(1, 8):
            rng = np.random.default_rng(0)
            psnrs = []
            for img in images:
                h, w = img.shape[:2]
                img = img[: h - h % 4, : w - w % 4]
                lr = classical.bicubic_resize(img, 4, "down")
                lr = classical.add_gaussian_noise(lr, float(sigma), rng)
                up = classical.resize_to(lr, img.shape[0], img.shape[1])
                psnrs.append(classical.score_pair(img, up, border=4)[0])
            means.append(float(np.mean(psnrs)))
        assert all(a >= b for a, b in zip(means, means[1:])), means

    def test_learned_columns_are_emitted_for_a_trained_checkpoint(self, desk_run, tmp_path, hr_dir):
        from bicyclesr.cli import main

        ckpt = str(tmp_path / "desk.ckpt")
        save_checkpoint(ckpt, desk_run["trainer"].to_checkpoint())
        out = str(tmp_path / "sweep")
        rc = main(["sweep-noise", "--in", hr_dir, "--out", out, "--sigmas", "1,3", "--checkpoint", ckpt])
        assert rc == 0
        lines = open(os.path.join(out, "noise_sweep.csv")).read().splitlines()
        assert lines[0] == "sigma_percent,baseline_psnr,baseline_ssim,learned_psnr,learned_ssim"
        assert len(lines) == 3
        for row in lines[1:]:
            cells = row.split(",")
            float(cells[3]), float(cells[4])


class TestDeterminismAndPersistence:
    def test_identical_seeds_give_bitwise_identical_checkpoints(self, hr_dir, lr_dir, tmp_path):
        def run(path):
            cfg = tiny_train_config(hr_dir, lr_dir, iterations=5, checkpoint_every=5)
            t = Trainer(cfg)
            t.run()
            save_checkpoint(path, t.to_checkpoint())

        a = str(tmp_path / "a.ckpt")
        b = str(tmp_path / "b.ckpt")
        run(a)
        run(b)
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_checkpoint_round_trip_and_corruption_rejection(self, tmp_path):
        cfg = tiny_train_config("", "")
        t = Trainer(cfg)
        first = str(tmp_path / "one.ckpt")
        save_checkpoint(first, t.to_checkpoint())
        second = str(tmp_path / "two.ckpt")
        save_checkpoint(second, load_checkpoint(first))
        assert open(first, "rb").read() == open(second, "rb").read()

        blob = bytearray(open(first, "rb").read())
        blob[3] ^= 0xFF
        bad_magic = tmp_path / "magic.ckpt"
        bad_magic.write_bytes(bytes(blob))
        with pytest.raises(trainer.CheckpointError):
            load_checkpoint(str(bad_magic))

        blob = bytearray(open(first, "rb").read())
        blob[-10] ^= 0x01
        bad_crc = tmp_path / "crc.ckpt"
        bad_crc.write_bytes(bytes(blob))
        with pytest.raises(trainer.CheckpointError):
            load_checkpoint(str(bad_crc))
