import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcg.diffusion import ddim_loop, ddim_timesteps, diffuse, make_schedule, mix, timestep_embed
from rcg.errors import ConfigError, UsageError
from rcg.rdm import (
    RdmConfig,
    RdmModel,
    SamplerConfig,
    ddim_sample,
    param_count,
    rdm_forward,
    rdm_loss,
    train_rdm,
)
from rcg.rng import make_rng
from rcg.training import TrainConfig

TINY = RdmConfig(rep_dim=4, num_blocks=2, hidden_dim=8, timestep_embed_dim=6, class_embed_dim=4)


class TestSchedule:
    def test_single_step(self):
        s = make_schedule(1, 0.01, 0.02)
        np.testing.assert_allclose(s.alpha_bar, [0.99])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 400), st.floats(1e-5, 0.2), st.floats(1e-3, 0.5))
    def test_strictly_decreasing(self, T, lo, width):
        hi = min(lo + width, 0.999)
        s = make_schedule(T, lo, hi)
        assert np.all(np.diff(s.alpha_bar) < 0)
        assert np.all((s.alpha_bar > 0) & (s.alpha_bar < 1))
        assert s.alpha_bar[0] == 1.0 - s.betas[0]

    def test_default_endpoint(self):
        product = 1.0
        for i in range(1000):
            product *= 1.0 - (1e-4 + i * (0.02 - 1e-4) / 999)
        s = make_schedule(1000, 1e-4, 0.02)
        assert s.alpha_bar[-1] == pytest.approx(product, rel=1e-12)
        assert s.alpha_bar[-1] == pytest.approx(4.04e-5, rel=2e-3)

    @pytest.mark.parametrize("lo,hi", [(0.0, 0.02), (0.02, 0.01), (0.1, 1.0)])
    def test_invalid(self, lo, hi):
        with pytest.raises(ConfigError):
            make_schedule(10, lo, hi)


class TestTimestepEmbed:
    def test_zero(self):
        e = timestep_embed(0, 8)
        np.testing.assert_array_equal(e[:4], 0.0)
        np.testing.assert_array_equal(e[4:], 1.0)

    def test_t1_dim4(self):
        np.testing.assert_allclose(timestep_embed(1, 4),
                                   [math.sin(1), math.sin(1e-2), math.cos(1), math.cos(1e-2)], atol=1e-15)

    def test_injective(self):
        e = timestep_embed(np.arange(1000), 256)
        rounded = {row.tobytes() for row in e}
        assert len(rounded) == 1000

    def test_odd(self):
        with pytest.raises(ConfigError):
            timestep_embed(3, 5)


class TestDiffuse:
    def test_endpoints(self):
        z0, eps = np.array([[1.5, -2.0]]), np.array([[0.3, 0.7]])
        np.testing.assert_array_equal(mix(z0, eps, [1.0]), z0)
        np.testing.assert_array_equal(mix(z0, eps, [0.0]), eps)

    def test_quarter(self):
        out = mix(np.array([[2.0]]), np.array([[-2.0]]), [0.25])
        assert out[0, 0] == pytest.approx(1.0 - math.sqrt(3.0), abs=1e-15)

    def test_out_of_range(self):
        s = make_schedule(10)
        with pytest.raises(UsageError):
            diffuse(np.zeros((1, 2)), 10, np.zeros((1, 2)), s)

    def test_moments(self):
        s = make_schedule(1000)
        rng = np.random.default_rng(0)
        n = 200_000
        z0 = 1.5 + 0.5 * rng.standard_normal((n, 1))
        for t in (0, 499, 999):
            zt = diffuse(z0, np.full(n, t), rng.standard_normal((n, 1)), s)
            a = s.alpha_bar[t]
            mean_exp = math.sqrt(a) * 1.5
            var_exp = a * 0.25 + (1 - a)
            se_mean = math.sqrt(var_exp / n)
            se_var = var_exp * math.sqrt(2.0 / (n - 1))
            assert abs(zt.mean() - mean_exp) < 3 * se_mean
            assert abs(zt.var() - var_exp) < 3 * se_var


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _layer(x, p, prefix):
    h = _ln(x, p[prefix + ".norm.gamma"], p[prefix + ".norm.beta"])
    h = h / (1.0 + np.exp(-h))
    return h @ p[prefix + ".linear.W"] + p[prefix + ".linear.b"]


class TestForward:
    def test_zero_output_layer(self):
        m = RdmModel(TINY, seed=1)
        out = rdm_forward(np.random.default_rng(0).standard_normal((5, 4)), 7, m)
        assert not np.any(out)

    def test_deterministic(self):
        m = RdmModel(TINY, seed=1)
        z = np.random.default_rng(0).standard_normal((3, 4))
        assert rdm_forward(z, 3, m).tobytes() == rdm_forward(z, 3, m).tobytes()

    def test_layer_composition_oracle(self):
        m = RdmModel(TINY, seed=5, dtype=np.float64)
        rng = np.random.default_rng(2)
        m.named_parameters()["net.output.linear.W"][:] = rng.standard_normal((8, 4))
        p = {k[len("net."):]: v for k, v in m.named_parameters().items()}
        z = rng.standard_normal((3, 4))
        t = np.array([0, 17, 999])
        temb = timestep_embed(t, 6)
        h = z @ p["input.W"] + p["input.b"]
        for k in range(2):
            a = _layer(h, p, f"blocks.{k}.in_layer") + _layer(temb, p, f"blocks.{k}.time_proj")
            h = h + _layer(a, p, f"blocks.{k}.out_layer")
        expected = _layer(h, p, "output")
        np.testing.assert_allclose(rdm_forward(z, t, m), expected, atol=1e-12)

    def test_conditional_needs_label(self):
        m = RdmModel(RdmConfig(rep_dim=4, num_blocks=1, hidden_dim=8, timestep_embed_dim=6,
                               class_embed_dim=4, num_classes=3))
        with pytest.raises(UsageError):
            m.forward(np.zeros((1, 4)), 0)
        with pytest.raises(UsageError):
            m.forward(np.zeros((1, 4)), 0, 3)

    def test_class_pathway_absent_not_zeroed(self):
        cond = RdmModel(RdmConfig(**{**TINY.__dict__, "num_classes": 3}), seed=9)
        uncond = RdmModel(TINY, seed=9)
        cp = cond.named_parameters()
        for k, v in uncond.named_parameters().items():
            assert cp[k].tobytes() == v.tobytes()
        extra = set(cp) - set(uncond.named_parameters())
        assert extra and all("class" in k for k in extra)


class TestParamCount:
    def test_paper_config(self):
        n = param_count(RdmConfig(rep_dim=256, num_blocks=12, hidden_dim=1536, timestep_embed_dim=256))
        assert abs(n - 63_000_000) <= 0.05 * 63_000_000

    def test_tiny_hand_enumeration(self):
        D, C, E = 4, 8, 6
        layer = lambda i, o: 2 * i + i * o + o  # noqa: E731
        block = layer(C, C) + layer(E, C) + layer(C, C)
        expected = (D * C + C) + 2 * block + layer(C, D)
        assert param_count(TINY) == expected
        assert RdmModel(TINY).num_params() == expected

    def test_single_block_structure(self):
        cfg = RdmConfig(rep_dim=4, num_blocks=1, hidden_dim=8, timestep_embed_dim=6)
        m = RdmModel(cfg)
        parts = {"input": 0, "blocks": 0, "output": 0}
        for k, v in m.named_parameters().items():
            parts[k.split(".")[1]] += v.size
        assert param_count(cfg) == sum(parts.values())
        with pytest.raises(ConfigError):
            RdmConfig(num_blocks=0)

    def test_conditional_adds_table(self):
        cfg = RdmConfig(**{**TINY.__dict__, "num_classes": 5})
        assert param_count(cfg) == RdmModel(cfg).num_params()


class TestLoss:
    def test_oracle_injection(self):
        s = make_schedule(1000)
        z0 = np.random.default_rng(0).standard_normal((64, 4))

        class Oracle:
            def forward(self, z_t, t, labels=None):
                a = s.alpha_bar[t][:, None]
                return (z_t - np.sqrt(a) * z0) / np.sqrt(1 - a)

        assert rdm_loss(z0, Oracle(), s, seed=1) < 1e-18

    def test_zero_model(self):
        s = make_schedule(1000)
        m = RdmModel(TINY, seed=0)
        z0 = np.random.default_rng(0).standard_normal((20_000, 4))
        assert rdm_loss(z0, m, s, seed=2) == pytest.approx(4.0, rel=0.05)

    def test_deterministic(self):
        s = make_schedule(100)
        m = RdmModel(TINY, seed=0)
        m.named_parameters()["net.output.linear.W"][:] = 0.1
        z0 = np.random.default_rng(0).standard_normal((16, 4))
        assert rdm_loss(z0, m, s, 3) == rdm_loss(z0, m, s, 3)


class TestSampling:
    def test_timesteps(self):
        np.testing.assert_array_equal(ddim_timesteps(50, 50), np.arange(50)[::-1])
        ts = ddim_timesteps(1000, 250)
        assert ts[0] == 999 and ts[-1] == 0 and len(set(ts)) == 250
        assert np.all(np.diff(ts) < 0)

    def test_eta_zero_deterministic(self):
        s = make_schedule(200)
        m = RdmModel(TINY, seed=3)
        m.named_parameters()["net.output.linear.W"][:] = 0.05
        zT = np.random.default_rng(1).standard_normal((4, 4))
        a = ddim_sample(m, s, SamplerConfig(ddim_steps=20, eta=0.0, seed=1), z_T=zT)
        b = ddim_sample(m, s, SamplerConfig(ddim_steps=20, eta=0.0, seed=99), z_T=zT)
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("eta", [0.0, 1.0])
    def test_perfect_denoiser_point_mass(self, eta):
        s = make_schedule(1000)
        c = np.array([0.7, -1.2, 2.0])

        def eps_fn(x, t, i):
            a = s.alpha_bar[t]
            return (x - math.sqrt(a) * c) / math.sqrt(1 - a)

        rngs = [make_rng(0, i) for i in range(8)]
        out = ddim_loop(eps_fn, s, 250, eta, rngs, 3)
        assert np.abs(out - c).max() < 1e-3

    def test_per_item_streams_independent_of_batch(self):
        s = make_schedule(100)
        m = RdmModel(TINY, seed=3)
        m.named_parameters()["net.output.linear.W"][:] = 0.05
        cfg = SamplerConfig(ddim_steps=10, eta=1.0, seed=4)
        full = ddim_sample(m, s, cfg, n=5)
        from rcg.rng import derive_seed

        single = ddim_sample(m, s, cfg, seeds=[derive_seed(4, "rdm-sample", 3)])
        np.testing.assert_allclose(single[0], full[3], rtol=1e-5, atol=1e-6)

    def test_sampler_config(self):
        with pytest.raises(ConfigError):
            SamplerConfig(eta=1.5)
        with pytest.raises(ConfigError):
            ddim_timesteps(10, 11)


class TestTraining:
    def test_deterministic_and_learns(self):
        s = make_schedule(100)
        reps = np.random.default_rng(0).standard_normal((256, 4)) * 0.1 + 1.0
        tc = TrainConfig(steps=60, batch_size=64, lr=3e-3, log_every=20)
        a, ha = train_rdm(reps, TINY, s, tc, seed=5)
        b, hb = train_rdm(reps, TINY, s, tc, seed=5)
        assert ha == hb
        for k, v in a.named_parameters().items():
            assert v.tobytes() == b.named_parameters()[k].tobytes()
        assert ha[-1]["loss"] < ha[0]["loss"]

    def test_wrong_dim(self):
        with pytest.raises(ConfigError):
            train_rdm(np.zeros((10, 3)), TINY, make_schedule(10), TrainConfig(steps=1), seed=0)
