import math
import struct

import numpy as np
import pytest
import torch

from hhi_idd import rng
from hhi_idd.dataset import normalize, synth_coupled, windows_from_pair
from hhi_idd.errors import CheckpointError, ConfigError, InputError
from hhi_idd.idd import checkpoint as ckpt_io
from hhi_idd.idd.diffusion import (IDDPredictor, TrainConfig, build_model, conditioning, lr_at_epoch, prepare_tensor,
                                   sample, train, training_loss)
from hhi_idd.idd.features import tensor_to_positions, windows_to_tensor
from hhi_idd.idd.model import Denoiser, IDDConfig
from hhi_idd.idd.schedule import clean_estimate, make_schedule, noising
from hhi_idd.kinematics import link_lengths

TINY = dict(channels=8, heads=2, ffn=8, blocks=1, step_emb=8, T=10, batch_size=8)


@pytest.fixture(scope="module")
def tiny_windows():
    pairs = synth_coupled(0, 3, 40, 3, delay=2)
    return [w for p in pairs for w in windows_from_pair(p, 4, 4, stride=3)]


class TestSchedule:
    def test_first_alpha_bar_exact(self):
        assert make_schedule().alpha_bar[1] == 0.9999

    def test_strictly_decreasing(self):
        ab = make_schedule().alpha_bar
        assert np.all(np.diff(ab) < 0) and ab[0] == 1.0

    def test_last_alpha_bar_independent_product(self):
        prod = 1.0
        for i in range(50):
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i / 49)
        assert abs(make_schedule().alpha_bar[50] - prod) < 1e-7

    def test_bad_bounds(self):
        for args in ((0, 1e-4, 0.02), (50, 0.0, 0.02), (50, 0.03, 0.02), (50, 1e-4, 1.0)):
            with pytest.raises(ConfigError):
                make_schedule(*args)

    def test_clean_estimate_inverts_noising(self):
        s = make_schedule()
        gen = rng.stream(0, "test/schedule")
        for _ in range(100):
            y = torch.from_numpy(gen.normal(size=(3, 4, 5)).astype(np.float32))
            eps = torch.from_numpy(gen.normal(size=(3, 4, 5)).astype(np.float32))
            t = int(gen.integers(1, 51))
            assert (clean_estimate(noising(y, t, eps, s), t, eps, s) - y).abs().max() < 1e-4

    def test_posterior_std(self):
        s = make_schedule()
        assert s.posterior_std(1) == 0.0
        t = 30
        ref = math.sqrt((1 - s.alpha_bar[29]) / (1 - s.alpha_bar[30]) * s.beta[30])
        assert s.posterior_std(t) == pytest.approx(ref, rel=1e-12)

    def test_step_out_of_range(self):
        with pytest.raises(ConfigError):
            noising(torch.zeros(2), 0, torch.zeros(2), make_schedule())


class TestLearningRate:
    def test_three_plateaus(self):
        cfg = TrainConfig()
        lrs = [lr_at_epoch(cfg, e) for e in range(50)]
        plateaus = [lrs[0]] + [b for a, b in zip(lrs, lrs[1:]) if a != b]
        assert plateaus == pytest.approx([1e-3, 1e-4, 1e-5], rel=1e-12)
        assert lrs.index(plateaus[1]) == 38 and lrs.index(plateaus[2]) == 45


class _Oracle:
    """Returns the noise that produced ``noisy`` by replaying the loss's draws."""

    def __init__(self, cfg, x0, schedule, seed):
        self.cfg, self.x0, self.schedule = cfg, x0, schedule
        gen = rng.stream(seed, "oracle")
        gen.integers(1, schedule.T + 1, size=x0.shape[0])
        self.eps = torch.from_numpy(gen.standard_normal(tuple(x0.shape)).astype(np.float32))

    def __call__(self, cond, noisy, t):
        return self.eps


class TestLoss:
    cfg = IDDConfig(feat_dim=3, n_tokens=4, obs_len=3, fut_len=5, channels=8, heads=2, ffn=8, blocks=1, step_emb=8)

    def test_exact_noise_oracle_zero(self):
        s = make_schedule()
        x0 = torch.randn(6, 3, 4, 8)
        loss = training_loss(_Oracle(self.cfg, x0, s, 1), x0, s, rng.stream(1, "oracle"), self.cfg)
        assert loss.item() == 0.0

    def test_zero_predictor_is_one(self):
        s = make_schedule()
        x0 = torch.randn(10_000, 3, 4, 8)
        loss = training_loss(lambda c, n, t: torch.zeros_like(n), x0, s, rng.stream(2, "loss"), self.cfg)
        assert abs(loss.item() - 1.0) < 0.05
        assert loss.item() >= 0


class TestDenoiser:
    cfg = IDDConfig(feat_dim=3, n_tokens=6, obs_len=4, fut_len=4, channels=16, heads=4, ffn=16, blocks=2, step_emb=16)

    def test_shape_and_zero_init(self):
        m = Denoiser(self.cfg)
        x = torch.randn(2, 3, 6, 8)
        out = m(x, x, torch.tensor([1, 50]))
        assert out.shape == (2, 3, 6, 8) and torch.all(out == 0)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            Denoiser(self.cfg)(torch.zeros(1, 3, 5, 8), torch.zeros(1, 3, 5, 8), torch.tensor([1]))

    def test_ablated_agent_invisible(self):
        cfg = IDDConfig(**{**self.cfg.to_dict(), "ablate": "cg"})
        m = Denoiser(cfg)
        torch.nn.init.normal_(m.decode2.weight)
        x0 = torch.randn(2, 3, 6, 8)
        x1 = x0.clone()
        x1[:, :, :3] += 5.0  # change the caregiver tokens only
        noisy = torch.randn(2, 3, 6, 8)
        t = torch.tensor([3, 7])
        assert torch.equal(conditioning(x0, cfg), conditioning(x1, cfg) - 0)
        a, b = m(conditioning(x0, cfg), noisy, t), m(conditioning(x1, cfg), noisy, t)
        assert torch.equal(a, b)

    def test_conditioning_hides_future(self):
        x = torch.randn(2, 3, 6, 8)
        c = conditioning(x, self.cfg)
        assert torch.all(c[..., 4:] == 0) and torch.equal(c[..., :4], x[..., :4])

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            IDDConfig(channels=10, heads=4)
        with pytest.raises(ConfigError):
            IDDConfig(ablate="both")


class TestCheckpoint:
    def _ckpt(self, tiny_windows):
        return train(TrainConfig(epochs=1, **TINY), tiny_windows[:8])

    def test_round_trip(self, tiny_windows):
        ck = self._ckpt(tiny_windows)
        back = ckpt_io.loads(ckpt_io.dumps(ck))
        assert back.config == ck.config and back.meta == ck.meta
        assert all(torch.equal(back.params[k], v) for k, v in ck.params.items())
        assert back.adam.step == ck.adam.step
        assert all(torch.equal(back.adam.m[k], v) for k, v in ck.adam.m.items())
        assert np.array_equal(back.schedule.alpha_bar, ck.schedule.alpha_bar)

    def test_corruption(self, tiny_windows, tmp_path):
        buf = ckpt_io.dumps(self._ckpt(tiny_windows))
        with pytest.raises(CheckpointError, match="magic"):
            ckpt_io.loads(b"XXXX" + buf[4:])
        with pytest.raises(CheckpointError):
            ckpt_io.loads(buf[:-7])
        with pytest.raises(CheckpointError, match="trailing"):
            ckpt_io.loads(buf + b"\0")
        (hlen,) = struct.unpack_from("<I", buf, 4)
        head = buf[8 : 8 + hlen].replace(b'"version": 1', b'"version": 9')
        with pytest.raises(CheckpointError, match="version"):
            ckpt_io.loads(buf[:8] + head + buf[8 + hlen :])
        with pytest.raises(CheckpointError):
            ckpt_io.load(tmp_path / "missing.ckpt")


class TestTraining:
    def test_deterministic(self, tiny_windows):
        cfg = TrainConfig(epochs=2, **TINY)
        a, b = train(cfg, tiny_windows), train(cfg, tiny_windows)
        assert a.meta["loss_curve"] == b.meta["loss_curve"]
        assert all(torch.equal(a.params[k], b.params[k]) for k in a.params)

    def test_resume_matches_uninterrupted(self, tiny_windows, tmp_path):
        cfg = TrainConfig(epochs=3, **TINY)
        full = train(cfg, tiny_windows)
        path = tmp_path / "run.ckpt"
        train(cfg, tiny_windows, path, stop_after=1)
        assert ckpt_io.load(path).meta["epochs_done"] == 1
        resumed = train(cfg, tiny_windows, path, resume=True)
        assert resumed.meta["loss_curve"] == full.meta["loss_curve"]
        assert all(torch.equal(resumed.params[k], full.params[k]) for k in full.params)

    def test_resume_rejects_other_config(self, tiny_windows, tmp_path):
        path = tmp_path / "run.ckpt"
        train(TrainConfig(epochs=2, **TINY), tiny_windows, path, stop_after=1)
        with pytest.raises(CheckpointError):
            train(TrainConfig(epochs=2, lr=5e-3, **{k: v for k, v in TINY.items()}), tiny_windows, path, resume=True)

    def test_loss_halves(self):
        pairs = synth_coupled(1, 6, 80, 3)
        ws = [w for p in pairs for w in windows_from_pair(p, 4, 4, stride=1)]
        ck = train(TrainConfig(epochs=6, lr=3e-3, **{**TINY, "channels": 16, "ffn": 16, "batch_size": 16}), ws)
        curve = ck.meta["loss_curve"]
        assert curve[-1] <= 0.5 * curve[0]

    def test_empty(self):
        with pytest.raises(InputError):
            train(TrainConfig(epochs=1, **TINY), [])


@pytest.fixture(scope="module")
def ckpt(tiny_windows):
    return train(TrainConfig(epochs=1, **TINY), tiny_windows)


class TestSampling:

    def test_deterministic_and_batch_independent(self, ckpt, tiny_windows):
        a = IDDPredictor(ckpt, seed=3, batch_size=64)(tiny_windows[:5])
        b = IDDPredictor(ckpt, seed=3, batch_size=2)(tiny_windows[:5])
        c = IDDPredictor(ckpt, seed=3)(tiny_windows[2:5])
        for k in ("cg", "cr"):
            assert a[k].shape == (5, 4, 3, 3)
            # batch size only changes BLAS rounding
            assert np.allclose(a[k], b[k], atol=1e-3)
            assert np.allclose(a[k][2:], c[k], atol=1e-3)
        assert np.array_equal(a[k], IDDPredictor(ckpt, seed=3, batch_size=64)(tiny_windows[:5])[k])
        d = IDDPredictor(ckpt, seed=4)(tiny_windows[:5])
        assert not np.array_equal(a["cr"], d["cr"])

    def test_observed_frames_untouched(self, ckpt, tiny_windows):
        from hhi_idd.idd.diffusion import load_model
        x = prepare_tensor(tiny_windows[:3], "position")
        out = sample(load_model(ckpt), ckpt.schedule, x, 0)
        assert torch.equal(out[..., :4], x[..., :4])
        assert torch.isfinite(out).all()


class TestAngleFeatures:
    def test_round_trip_through_grid(self, tiny_windows):
        ws = [normalize(w) for w in tiny_windows[:4]]
        x = windows_to_tensor(ws, "angle")
        assert x.shape == (4, 9, 8, 8)
        pos = tensor_to_positions(x, ws, "angle", fut_only=False)
        for a in ("cg", "cr"):
            ref = np.stack([np.concatenate([w.obs(a), w.fut(a)]) for w in ws])
            assert np.abs(pos[a] - ref).max() * 1000 < 1e-3  # metres -> mm, float32 grid

    def test_noisy_rotations_keep_link_lengths(self, tiny_windows):
        ws = [normalize(w) for w in tiny_windows[:4]]
        x = windows_to_tensor(ws, "angle") + 0.2 * torch.randn(4, 9, 8, 8)
        pos = tensor_to_positions(x, ws, "angle")
        parents, offsets = ws[0].skeletons["cr"]
        L = link_lengths(pos["cr"], parents) * 1000
        assert np.abs(L - np.linalg.norm(offsets[1:], axis=1)).max() < 1e-3


class TestSamplerOracle:
    """Ancestral chain driven by the exact noise predictor of a Gaussian data law."""

    mu, sd = 0.3, 0.2

    def _run(self, beta_end):
        s = make_schedule(50, 1e-4, beta_end)
        ab = torch.tensor(s.alpha_bar, dtype=torch.float32)
        cfg = IDDConfig(feat_dim=3, n_tokens=6, obs_len=4, fut_len=4, channels=8, heads=2, ffn=8, blocks=1,
                        step_emb=8)

        def oracle(cond, x, t):
            a = ab[t].view(-1, 1, 1, 1)
            return torch.sqrt(1 - a) * (x - torch.sqrt(a) * self.mu) / (a * self.sd**2 + 1 - a)

        oracle.cfg = cfg
        return sample(oracle, s, torch.zeros(400, 3, 6, 8), 0, batch_size=400)[..., 4:]

    def test_recovers_mean_when_chain_reaches_noise(self):
        out = self._run(0.5)
        assert abs(out.mean().item() - self.mu) < 5e-3
        assert 0.1 < out.std().item() <= self.sd * 1.05

    def test_default_schedule_does_not_reach_noise(self):
        # alpha_bar[50] is about 0.6, so a chain started at N(0, 1) stays biased towards 0
        assert abs(self._run(0.02).mean().item() - self.mu) > 0.01


class TestStandardize:
    def test_stats_stored_and_observed_frames_restored(self, tiny_windows):
        ck = train(TrainConfig(epochs=1, standardize=True, **TINY), tiny_windows)
        x = prepare_tensor(tiny_windows, "position")
        assert np.allclose(ck.meta["feature_mean"], x.mean(dim=(0, 3)).numpy(), atol=1e-6)
        back = ckpt_io.loads(ckpt_io.dumps(ck))
        a = IDDPredictor(ck, seed=1).sample_grid(tiny_windows[:3])
        b = IDDPredictor(back, seed=1).sample_grid(tiny_windows[:3])
        assert torch.equal(a, b)
        assert (a[..., :4] - x[:3, ..., :4]).abs().max() < 1e-5

    def test_missing_stats_rejected(self, tiny_windows):
        ck = train(TrainConfig(epochs=1, standardize=True, **TINY), tiny_windows[:8])
        del ck.meta["feature_std"]
        with pytest.raises(CheckpointError):
            IDDPredictor(ck)(tiny_windows[:2])
