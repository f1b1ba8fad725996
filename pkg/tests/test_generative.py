import math

import numpy as np
import pytest
import torch

from synthaudit.corpus import ProceduralSpec, generate_corpus, load_corpus
from synthaudit.generative import (
    GanTrainConfig,
    critic_loss,
    emit_synthetic,
    encode_annotation,
    generator_loss,
    inherent_dp_delta,
    train_gan,
)
from synthaudit.modelcore import ModelHandle, finite_difference_check, save_checkpoint


def toy_critic(sizes=(14, 1), seed=0, zero=False, weights=None):
    h = ModelHandle({"kind": "cond_mlp", "sizes": list(sizes), "squeeze_output": True}, seed=seed)
    if zero:
        with torch.no_grad():
            for p in h.module.parameters():
                p.zero_()
    if weights is not None:
        with torch.no_grad():
            lin = h.module.net[0]
            lin.weight.zero_()
            lin.bias.zero_()
            lin.weight[0, : len(weights)] = torch.tensor(weights)
    return h


class TestCriticLoss:
    def test_constant_critic_zero_loss(self):
        h = toy_critic(zero=True)
        x = torch.randn(4, 2)
        cond = torch.randn(4, 12)
        bundle, comps = critic_loss(h, x, cond, torch.randn(4, 2), cond, gamma=2.0)
        assert bundle.loss == pytest.approx(0.0)
        assert comps["gap"] == pytest.approx(0.0)
        assert comps["r1"] == pytest.approx(0.0)

    def test_linear_critic_r1_closed_form(self):
        # D(x) = 3 x1 + 4 x2 -> ||grad_x D||^2 = 25; gamma=2 -> R1 term = 25
        h = toy_critic(weights=[3.0, 4.0])
        x = torch.randn(6, 2)
        cond = torch.zeros(6, 12)
        _, comps = critic_loss(h, x, cond, x.clone(), cond, gamma=2.0)
        assert comps["r1"] == pytest.approx(25.0, rel=1e-5)

    def test_gamma_zero_is_plain_gap(self):
        h = toy_critic(seed=3)
        x_real = torch.randn(5, 2)
        x_fake = torch.randn(5, 2)
        cond = torch.randn(5, 12)
        bundle, comps = critic_loss(h, x_real, cond, x_fake, cond, gamma=0.0)
        with torch.no_grad():
            direct = (h.module(x_fake, cond).mean() - h.module(x_real, cond).mean()).item()
        assert bundle.loss == pytest.approx(direct, rel=1e-5)
        assert comps["gap"] == pytest.approx(direct, rel=1e-5)

    def test_r1_nonnegative(self):
        h = toy_critic(sizes=(14, 8, 1), seed=5)
        for s in range(5):
            torch.manual_seed(s)
            _, comps = critic_loss(
                h, torch.randn(4, 2), torch.randn(4, 12), torch.randn(4, 2),
                torch.randn(4, 12), gamma=2.0,
            )
            assert comps["r1"] >= 0.0

    def test_gradient_vs_finite_differences(self):
        h = toy_critic(sizes=(14, 6, 1), seed=7)
        x_real = torch.randn(3, 2)
        x_fake = torch.randn(3, 2)
        cond = torch.randn(3, 12)

        def loss_fn(module, batch):
            xr, xf, c = batch
            xr = xr.clone().requires_grad_(True)
            d_real = module(xr, c)
            gap = module(xf, c).mean() - d_real.mean()
            (g,) = torch.autograd.grad(d_real.sum(), xr, create_graph=True)
            r1 = g.reshape(g.shape[0], -1).pow(2).sum(dim=1).mean()
            return gap + 1.0 * r1

        assert finite_difference_check(h, (x_real, x_fake, cond), loss_fn) < 1e-4


class TestGeneratorLoss:
    def test_zero_critic_zero_loss_and_grad(self):
        gen = ModelHandle({"kind": "cond_mlp", "sizes": [16, 8, 2]}, seed=1)
        critic = toy_critic(zero=True)
        z = torch.randn(4, 4)
        cond = torch.randn(4, 12)
        bundle = generator_loss(gen, critic, z, cond)
        assert bundle.loss == pytest.approx(0.0)
        assert all(torch.all(g == 0) for g in bundle.grads.values())

    def test_descent_direction(self):
        gen = ModelHandle({"kind": "cond_mlp", "sizes": [16, 8, 2]}, seed=2)
        critic = toy_critic(sizes=(14, 8, 1), seed=3)
        z = torch.randn(8, 4)
        cond = torch.randn(8, 12)
        bundle = generator_loss(gen, critic, z, cond)
        lr = 1e-3
        with torch.no_grad():
            for (name, p) in gen.module.named_parameters():
                p.add_(bundle.grads[name], alpha=-lr)
        after = generator_loss(gen, critic, z, cond)
        assert after.loss < bundle.loss

    def test_critic_untouched(self):
        gen = ModelHandle({"kind": "cond_mlp", "sizes": [16, 8, 2]}, seed=4)
        critic = toy_critic(sizes=(14, 8, 1), seed=5)
        before = critic.parameters_vector()
        bundle = generator_loss(gen, critic, torch.randn(4, 4), torch.randn(4, 12))
        assert set(bundle.grads) == {n for n, _ in gen.module.named_parameters()}
        assert np.array_equal(before, critic.parameters_vector())


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("gan_corpus")
    manifest = generate_corpus(ProceduralSpec(n_total=48, side=32, seed=3), root)
    return load_corpus(manifest)


class TestTrainGan:
    def test_toy_gaussian_gap_shrinks(self):
        # 2-D Gaussian stand-in (vectors instead of images): after adversarial
        # training the critic gap magnitude drops below its early-training peak
        from synthaudit.modelcore import adam_step

        torch.manual_seed(0)
        gen = ModelHandle({"kind": "cond_mlp", "sizes": [16, 32, 2]}, seed=1)
        critic = toy_critic(sizes=(14, 32, 1), seed=2)
        target_mean = torch.tensor([2.0, -1.0])
        rng = torch.Generator().manual_seed(0)
        gaps = []
        for step in range(800):
            real = torch.randn(32, 2, generator=rng) * 0.3 + target_mean
            cond = torch.zeros(32, 12)
            z = torch.randn(32, 4, generator=rng)
            with torch.no_grad():
                fake = gen.module(z, cond)
            bundle, comps = critic_loss(critic, real, cond, fake, cond, gamma=0.1)
            adam_step(critic, bundle.grads, lr=1e-3)
            gaps.append(comps["gap"])
            if step % 5 == 4:
                z = torch.randn(32, 4, generator=rng)
                gb = generator_loss(gen, critic, z, cond)
                adam_step(gen, gb.grads, lr=1e-3)
        peak = np.abs(gaps).max()
        late = np.abs(gaps[-80:]).mean()
        assert late < 0.5 * peak

    def test_deterministic_same_seed(self, tiny_corpus, tmp_path):
        cfg = GanTrainConfig(total_steps=24, batch_size=8, width_g=8, width_d=8, seed=5,
                             log_every=12)
        g1, _, _ = train_gan(tiny_corpus, cfg)
        g2, _, _ = train_gan(tiny_corpus, cfg)
        assert np.array_equal(g1.parameters_vector(), g2.parameters_vector())

    def test_logs_contain_expected_fields(self, tiny_corpus):
        cfg = GanTrainConfig(total_steps=30, batch_size=8, width_g=8, width_d=8, log_every=6)
        _, _, log = train_gan(tiny_corpus, cfg)
        assert log
        assert {"step", "critic_gap", "r1", "gen_loss", "wall_time"} <= set(log[0])

    def test_unconditional_then_finetune(self, tiny_corpus, tmp_path):
        pre_cfg = GanTrainConfig(total_steps=12, batch_size=8, width_g=8, width_d=8,
                                 unconditional=True, seed=6)
        gen, _, _ = train_gan(tiny_corpus, pre_cfg)
        ckpt = tmp_path / "pre.ckpt"
        save_checkpoint(gen, ckpt)
        ft_cfg = GanTrainConfig(total_steps=12, batch_size=8, width_g=8, width_d=8,
                                pretrain_checkpoint=str(ckpt), seed=6)
        gen2, _, _ = train_gan(tiny_corpus, ft_cfg)
        assert gen2.parameter_count() == gen.parameter_count()

    def test_invalid_config(self, tiny_corpus):
        with pytest.raises(ValueError):
            train_gan(tiny_corpus, GanTrainConfig(gamma=-1))
        with pytest.raises(ValueError):
            train_gan(tiny_corpus, GanTrainConfig(d_steps_per_g_step=0))


class TestEmitSynthetic:
    def test_one_to_one_and_annotations_preserved(self, tiny_corpus, tmp_path):
        gen = ModelHandle({"kind": "generator", "side": 32, "z_dim": 8, "width": 8}, seed=9)
        train = [r for r in tiny_corpus if r.split == "train"]
        manifest = emit_synthetic(gen, train, tmp_path / "synth", z_seed=1)
        out = load_corpus(manifest)
        assert len(out) == len(train)
        for orig, syn in zip(train, out):
            assert syn.annotation == orig.annotation
            assert syn.id != orig.id

    def test_different_z_seed_changes_images_not_labels(self, tiny_corpus, tmp_path):
        gen = ModelHandle({"kind": "generator", "side": 32, "z_dim": 8, "width": 8}, seed=9)
        train = [r for r in tiny_corpus if r.split == "train"][:5]
        m1 = emit_synthetic(gen, train, tmp_path / "a", z_seed=1)
        m2 = emit_synthetic(gen, train, tmp_path / "b", z_seed=2)
        r1, r2 = load_corpus(m1), load_corpus(m2)
        assert any(not np.array_equal(a.image, b.image) for a, b in zip(r1, r2))
        assert all(a.annotation == b.annotation for a, b in zip(r1, r2))

    def test_generator_frozen(self, tiny_corpus, tmp_path):
        gen = ModelHandle({"kind": "generator", "side": 32, "z_dim": 8, "width": 8}, seed=10)
        before = gen.parameters_vector()
        emit_synthetic(gen, [r for r in tiny_corpus if r.split == "train"][:3], tmp_path / "s")
        assert np.array_equal(before, gen.parameters_vector())


class TestInherentDpDelta:
    def test_zero_emitted(self):
        assert inherent_dp_delta(0, 100, 1.0) == 0.0

    def test_spec_value(self):
        # eps=1, n/m=0.5, c=1 -> 0.5 / (1 * (1 - e^-1))
        val = inherent_dp_delta(50, 100, 1.0)
        assert val == pytest.approx(0.5 / (1 - math.exp(-1)), abs=1e-9)
        assert val == pytest.approx(0.79099, abs=1e-4)

    def test_monotone_in_n(self):
        vals = [inherent_dp_delta(n, 1000, 1.0) for n in range(0, 1000, 100)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_clamped_at_one(self):
        assert inherent_dp_delta(10**6, 10, 0.1) == 1.0

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            inherent_dp_delta(1, 0, 1.0)
        with pytest.raises(ValueError):
            inherent_dp_delta(1, 10, -1.0)


def test_encode_annotation_injective_sample():
    from synthaudit.corpus import AnnotationVector

    a = AnnotationVector(1, 0.5, (1, 0) * 5)
    b = AnnotationVector(1, 0.5, (0, 1) * 5)
    assert not np.array_equal(encode_annotation(a), encode_annotation(b))
    assert encode_annotation(a).shape == (12,)
