"""Conditional generator/critic training and synthetic-corpus emission.

The critic minimizes E[D(fake)] - E[D(real)] + (gamma/2) E[||grad_x D(real)||^2]
(the regularizer is taken at real inputs only); the generator minimizes
-E[D(G(z, y))]. After training, the frozen generator emits one synthetic image
per original training annotation.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .corpus import AnnotationVector, ImageRecord, annotation_to_row, save_image, write_manifest
from .modelcore import (
    GradientBundle,
    ModelHandle,
    adam_step,
    load_checkpoint,
)


class GanDivergence(Exception):
    """Raised when training hits a non-finite loss; carries the last good state."""

    def __init__(self, message, last_good_state=None):
        super().__init__(message)
        self.last_good_state = last_good_state


def encode_annotation(annotation: AnnotationVector) -> np.ndarray:
    """Fixed-length conditioning code: [protest, violence, attr_1..attr_10]."""
    return np.array(
        [annotation.protest, annotation.violence, *annotation.attributes], dtype=np.float32
    )


def encode_annotations(annotations) -> torch.Tensor:
    return torch.from_numpy(np.stack([encode_annotation(a) for a in annotations]))


@dataclass
class GanTrainConfig:
    total_steps: int = 2000  # total optimizer updates (critic + generator combined)
    gamma: float = 2.0
    d_steps_per_g_step: int = 5
    batch_size: int = 32
    lr: float = 2e-4
    z_dim: int = 64
    width_g: int = 32
    width_d: int = 32
    augment: bool = False
    augment_prob: float = 0.5
    unconditional: bool = False
    pretrain_checkpoint: str | None = None
    seed: int = 0
    log_every: int = 200

    def validate(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.d_steps_per_g_step < 1:
            raise ValueError("d_steps_per_g_step must be >= 1")
        if self.total_steps < 1 or self.batch_size < 1 or self.z_dim < 1:
            raise ValueError("total_steps, batch_size, z_dim must be positive")


def critic_loss(
    critic: ModelHandle, real_x, real_cond, fake_x, fake_cond, gamma: float
):
    """Critic objective with input-gradient regularization at real points.

    Returns (GradientBundle over critic params, components dict).
    """
    module = critic.module
    module.zero_grad(set_to_none=True)
    real_x = real_x.detach().clone().requires_grad_(True)
    d_real = module(real_x, real_cond)
    d_fake = module(fake_x.detach(), fake_cond)
    gap = d_fake.mean() - d_real.mean()
    (input_grad,) = torch.autograd.grad(
        d_real.sum(), real_x, create_graph=gamma > 0, retain_graph=True
    )
    r1 = input_grad.reshape(input_grad.shape[0], -1).pow(2).sum(dim=1).mean()
    loss = gap + (gamma / 2.0) * r1 if gamma > 0 else gap
    if not torch.isfinite(loss):
        raise GanDivergence(f"non-finite critic loss: {loss.item()}")
    loss.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in module.named_parameters()
    }
    module.zero_grad(set_to_none=True)
    components = {"gap": float(gap.detach()), "r1": float(r1.detach())}
    return GradientBundle(loss=float(loss.detach()), grads=grads), components


def generator_loss(gen: ModelHandle, critic: ModelHandle, z, cond):
    """-E[D(G(z, y))] with gradients w.r.t. generator parameters only."""
    gen.module.zero_grad(set_to_none=True)
    critic.module.zero_grad(set_to_none=True)
    fake = gen.module(z, cond)
    loss = -critic.module(fake, cond).mean()
    if not torch.isfinite(loss):
        raise GanDivergence(f"non-finite generator loss: {loss.item()}")
    loss.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in gen.module.named_parameters()
    }
    gen.module.zero_grad(set_to_none=True)
    critic.module.zero_grad(set_to_none=True)
    return GradientBundle(loss=float(loss.detach()), grads=grads)


def _augment(x: torch.Tensor, gen: torch.Generator, prob: float) -> torch.Tensor:
    """Fixed-probability horizontal flip + brightness jitter on critic inputs."""
    n = x.shape[0]
    flip = torch.rand(n, generator=gen) < prob
    x = x.clone()
    x[flip] = torch.flip(x[flip], dims=[3])
    scale = 1.0 + 0.2 * (torch.rand(n, 1, 1, 1, generator=gen) - 0.5)
    jitter = torch.rand(n, generator=gen) < prob
    x[jitter] = torch.clamp(x[jitter] * scale[jitter], 0.0, 1.0)
    return x


def _reinit_conditional_inputs(gen: ModelHandle, seed: int):
    """Fresh initialization of the weights tied to conditioning inputs after
    loading an unconditionally pretrained generator."""
    torch.manual_seed(seed + 0x5EED)
    with torch.no_grad():
        fc = gen.module.fc
        z_dim = gen.module.z_dim
        fresh = torch.empty_like(fc.weight[:, z_dim:])
        torch.nn.init.kaiming_uniform_(fresh, a=math.sqrt(5))
        fc.weight[:, z_dim:] = fresh


def train_gan(records: list[ImageRecord], config: GanTrainConfig, log_path=None):
    """Alternating critic/generator optimization on the train split.

    A "step" is one optimizer update; each cycle applies d_steps_per_g_step
    critic updates then one generator update. Returns (generator handle,
    critic handle, log rows).
    """
    config.validate()
    train = [r for r in records if r.split == "train"]
    if not train:
        raise ValueError("corpus has no train split")
    side = train[0].image.shape[0]

    x_all = torch.from_numpy(
        np.stack([r.image for r in train]).transpose(0, 3, 1, 2)
    ).float()
    cond_all = encode_annotations([r.annotation for r in train])
    if config.unconditional:
        cond_all = torch.zeros_like(cond_all)

    gen = ModelHandle(
        {"kind": "generator", "side": side, "z_dim": config.z_dim, "width": config.width_g},
        seed=config.seed,
    )
    if config.pretrain_checkpoint:
        gen = load_checkpoint(config.pretrain_checkpoint, expected_descriptor=gen.descriptor)
        _reinit_conditional_inputs(gen, config.seed)
    critic = ModelHandle(
        {"kind": "critic", "side": side, "width": config.width_d}, seed=config.seed + 1
    )

    rng = torch.Generator().manual_seed(config.seed)
    log = []
    last_good = None
    step = 0
    start = time.monotonic()
    last = {"gap": float("nan"), "r1": float("nan"), "gen_loss": float("nan")}

    def sample_batch():
        idx = torch.randint(0, x_all.shape[0], (config.batch_size,), generator=rng)
        return x_all[idx], cond_all[idx]

    try:
        while step < config.total_steps:
            for _ in range(config.d_steps_per_g_step):
                if step >= config.total_steps:
                    break
                real_x, real_cond = sample_batch()
                if config.augment:
                    real_x = _augment(real_x, rng, config.augment_prob)
                z = torch.randn(config.batch_size, config.z_dim, generator=rng)
                _, fake_cond = sample_batch()
                with torch.no_grad():
                    fake_x = gen.module(z, fake_cond)
                bundle, comps = critic_loss(
                    critic, real_x, real_cond, fake_x, fake_cond, config.gamma
                )
                adam_step(critic, bundle.grads, lr=config.lr, betas=(0.0, 0.99))
                last.update(comps)
                step += 1
            if step >= config.total_steps:
                break
            z = torch.randn(config.batch_size, config.z_dim, generator=rng)
            _, cond = sample_batch()
            bundle = generator_loss(gen, critic, z, cond)
            adam_step(gen, bundle.grads, lr=config.lr, betas=(0.0, 0.99))
            last["gen_loss"] = bundle.loss
            step += 1

            if step % config.log_every < config.d_steps_per_g_step + 1:
                row = {
                    "step": step,
                    "critic_gap": last["gap"],
                    "r1": last["r1"],
                    "gen_loss": last["gen_loss"],
                    "wall_time": round(time.monotonic() - start, 3),
                }
                log.append(row)
                if log_path is not None:
                    import json

                    with open(log_path, "a") as f:
                        f.write(json.dumps(row) + "\n")
            last_good = (
                {k: v.detach().clone() for k, v in gen.module.state_dict().items()},
                {k: v.detach().clone() for k, v in critic.module.state_dict().items()},
            )
    except GanDivergence as e:
        e.last_good_state = last_good
        raise
    gen.step_count = step
    return gen, critic, log


def emit_synthetic(generator: ModelHandle, records: list[ImageRecord], out_dir,
                   z_seed: int = 0) -> Path:
    """One synthetic image per input annotation, in corpus order, with fresh z.

    Leaves the generator parameters untouched; the output manifest carries the
    original annotations under new ids.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    before = generator.parameters_vector()
    z_dim = generator.module.z_dim

    rows = []
    generator.module.eval()
    for i, rec in enumerate(records):
        rng = np.random.default_rng([z_seed, i])
        z = torch.from_numpy(rng.standard_normal(z_dim).astype(np.float32)).unsqueeze(0)
        cond = encode_annotations([rec.annotation])
        with torch.no_grad():
            img = generator.module(z, cond)[0].numpy().transpose(1, 2, 0)
        new_id = f"synth-{z_seed:08x}-{i:06d}"
        rel_path = f"images/{new_id}.png"
        save_image(out_dir / rel_path, img)
        rows.append(annotation_to_row(new_id, rel_path, rec.annotation, rec.split))

    after = generator.parameters_vector()
    if not np.array_equal(before, after):
        raise RuntimeError("emission mutated generator parameters")
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest


def inherent_dp_delta(n_emitted: int, m_train: int, epsilon: float, c: float = 1.0) -> float:
    """Order-of-magnitude delta bound for samples drawn from a non-private
    generative model: c * (n/m) / (eps * (1 - e^{-eps})), clamped to 1."""
    if m_train <= 0:
        raise ValueError("m_train must be positive")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if c <= 0:
        raise ValueError("c must be positive")
    if n_emitted < 0:
        raise ValueError("n_emitted must be nonnegative")
    delta = c * (n_emitted / m_train) / (epsilon * (1.0 - math.exp(-epsilon)))
    return min(delta, 1.0)
