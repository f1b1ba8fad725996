"""Differentiable-model plumbing shared by the generator, critic, downstream
classifier, and attack encoder.

A ModelHandle wraps a torch module built from a JSON-serializable architecture
descriptor and adds the contract the rest of the pipeline relies on: named
ordered parameterized layers, gradient bundles, per-sample gradient norms,
single-example layer-feature capture, manual SGD/Adam steps, and a versioned
binary checkpoint format. Training runs in float32; a float64 mode exists for
finite-difference gradient verification.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from torch.func import functional_call, grad, vmap

CHECKPOINT_MAGIC = b"SAUD"
CHECKPOINT_VERSION = 1

COND_DIM = 12  # protest bit + violence scalar + 10 attribute bits


class ModelError(Exception):
    pass


class CheckpointError(Exception):
    pass


# ---------------------------------------------------------------------------
# architectures


class DownstreamCnn(nn.Module):
    """Small conv net with group normalization and a 12-logit multi-task head:
    [protest, violence, attr_1..attr_10]. The 64-d penultimate feature doubles
    as the pipeline's embedding network output."""

    def __init__(self, side=32, width=16, embed_dim=64):
        super().__init__()
        w = width
        self.features = nn.Sequential(
            nn.Conv2d(3, w, 3, stride=2, padding=1),
            nn.GroupNorm(4, w),
            nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            nn.GroupNorm(4, 2 * w),
            nn.SiLU(),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1),
            nn.GroupNorm(4, 4 * w),
            nn.SiLU(),
            nn.Conv2d(4 * w, 4 * w, 3, stride=1, padding=1),
            nn.GroupNorm(4, 4 * w),
            nn.SiLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.embed = nn.Linear(4 * w, embed_dim)
        self.head = nn.Linear(embed_dim, 12)

    def forward(self, x):
        return self.head(torch.nn.functional.silu(self.embed(self.features(x))))

    def embedding(self, x):
        return torch.nn.functional.silu(self.embed(self.features(x)))


class ConditionalGenerator(nn.Module):
    """Upsampling conv generator; the conditioning code is concatenated to z."""

    def __init__(self, side=32, z_dim=64, width=32):
        super().__init__()
        if side % 8 != 0:
            raise ModelError("generator requires side divisible by 8")
        self.side = side
        self.z_dim = z_dim
        base = side // 8
        w = width
        self.base = base
        self.width = w
        self.fc = nn.Linear(z_dim + COND_DIM, 4 * w * base * base)
        self.blocks = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(4 * w, 2 * w, 3, padding=1),
            nn.GroupNorm(4, 2 * w),
            nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * w, w, 3, padding=1),
            nn.GroupNorm(4, w),
            nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(w, w, 3, padding=1),
            nn.GroupNorm(4, w),
            nn.SiLU(),
        )
        self.to_rgb = nn.Conv2d(w, 3, 3, padding=1)

    def forward(self, z, cond):
        h = self.fc(torch.cat([z, cond], dim=1))
        h = h.view(-1, 4 * self.width, self.base, self.base)
        h = self.blocks(h)
        return torch.sigmoid(self.to_rgb(h))


class ConditionalCritic(nn.Module):
    """Strided conv critic with projection conditioning:
    out = w . phi(x) + embed(y) . phi(x)."""

    def __init__(self, side=32, width=32):
        super().__init__()
        w = width
        self.features = nn.Sequential(
            nn.Conv2d(3, w, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            nn.GroupNorm(4, 2 * w),
            nn.SiLU(),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1),
            nn.GroupNorm(4, 4 * w),
            nn.SiLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.out = nn.Linear(4 * w, 1)
        self.proj = nn.Linear(COND_DIM, 4 * w, bias=False)

    def forward(self, x, cond):
        phi = self.features(x)
        return self.out(phi).squeeze(1) + (self.proj(cond) * phi).sum(dim=1)


class Mlp(nn.Module):
    """Plain fully-connected stack; used for toy gradient checks and attack heads."""

    def __init__(self, sizes, final_activation=None):
        super().__init__()
        layers = []
        for i in range(len(sizes) - 1):
            layers.append(nn.Linear(sizes[i], sizes[i + 1]))
            if i < len(sizes) - 2:
                layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)
        self.final_activation = final_activation

    def forward(self, x):
        out = self.net(x)
        if self.final_activation == "sigmoid":
            out = torch.sigmoid(out)
        return out


class CondMlp(nn.Module):
    """MLP over the concatenation of two inputs; stands in for conditional
    generator/critic pairs in toy-scale tests (vectors instead of images)."""

    def __init__(self, sizes, squeeze_output=False):
        super().__init__()
        layers = []
        for i in range(len(sizes) - 1):
            layers.append(nn.Linear(sizes[i], sizes[i + 1]))
            if i < len(sizes) - 2:
                layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)
        self.squeeze_output = squeeze_output

    def forward(self, a, b):
        out = self.net(torch.cat([a, b], dim=1))
        return out.squeeze(1) if self.squeeze_output else out


_BUILDERS = {
    "cond_mlp": CondMlp,
    "downstream_cnn": DownstreamCnn,
    "generator": ConditionalGenerator,
    "critic": ConditionalCritic,
    "mlp": Mlp,
}


def build_module(descriptor: dict) -> nn.Module:
    desc = dict(descriptor)
    kind = desc.pop("kind", None)
    if kind not in _BUILDERS:
        raise ModelError(f"unknown architecture kind {kind!r}")
    return _BUILDERS[kind](**desc)


# ---------------------------------------------------------------------------
# handle + gradient machinery


@dataclass
class GradientBundle:
    loss: float
    grads: dict  # parameter name -> tensor, matching parameter shapes
    activations: dict | None = None  # layer name -> tensor


@dataclass
class AttackFeatureBundle:
    """Single-example white-box features from the last k parameterized layers."""

    activations: dict  # layer name -> numpy array
    gradients: dict  # layer name -> {param name -> numpy array}
    loss: float
    label: np.ndarray


class ModelHandle:
    def __init__(self, descriptor: dict, seed: int = 0, dtype=torch.float32):
        self.descriptor = dict(descriptor)
        torch.manual_seed(seed)
        self.module = build_module(descriptor).to(dtype)
        self.module.eval()
        self.step_count = 0
        self.seed = seed
        self.dtype = dtype
        self.opt_state: dict = {}

    # --- introspection ---

    def layers(self) -> list[tuple[str, nn.Module]]:
        """Parameterized leaf modules in topological (registration) order."""
        out = []
        for name, mod in self.module.named_modules():
            if any(True for _ in mod.parameters(recurse=False)):
                out.append((name, mod))
        return out

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    def named_parameters(self):
        return dict(self.module.named_parameters())

    def parameters_vector(self) -> np.ndarray:
        with torch.no_grad():
            return torch.cat([p.reshape(-1) for p in self.module.parameters()]).cpu().numpy()

    def forward(self, *args, train: bool = False):
        self.module.train(train)
        try:
            with torch.no_grad():
                return self.module(*args)
        finally:
            self.module.eval()

    def to_double(self) -> "ModelHandle":
        """Clone in float64 for finite-difference verification."""
        clone = ModelHandle(self.descriptor, seed=self.seed, dtype=torch.float64)
        clone.module.load_state_dict(
            {k: v.double() for k, v in self.module.state_dict().items()}
        )
        clone.step_count = self.step_count
        return clone


def loss_and_grad(handle: ModelHandle, batch, loss_fn) -> GradientBundle:
    """Evaluate loss_fn(module, batch) and return the loss with parameter gradients."""
    module = handle.module
    module.zero_grad(set_to_none=True)
    loss = loss_fn(module, batch)
    if not torch.isfinite(loss):
        raise ModelError(f"non-finite loss: {loss.item()}")
    loss.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in module.named_parameters()
    }
    module.zero_grad(set_to_none=True)
    return GradientBundle(loss=float(loss.detach()), grads=grads)


def per_sample_grads(handle: ModelHandle, batch, loss_fn) -> dict:
    """Per-example parameter gradients via vmap over a functional call.

    loss_fn(module, single_example_batch) must accept batches of size 1.
    """
    module = handle.module
    params = {k: v.detach() for k, v in module.named_parameters()}
    buffers = {k: v.detach() for k, v in module.named_buffers()}

    def single_loss(p, b, *example):
        one = tuple(t.unsqueeze(0) for t in example)
        return loss_fn(_FunctionalModule(module, p, b), one)

    g = vmap(grad(single_loss), in_dims=(None, None) + (0,) * len(batch))
    tensors = tuple(torch.as_tensor(t) for t in batch)
    return g(params, buffers, *tensors)


class _FunctionalModule:
    """Callable standing in for the module inside torch.func transforms.
    loss_fn must invoke the model only through direct calls."""

    def __init__(self, module, params, buffers):
        self._module = module
        self._params = params
        self._buffers = buffers

    def __call__(self, *args):
        return functional_call(self._module, (self._params, self._buffers), args)


def per_sample_grad_norms(handle: ModelHandle, batch, loss_fn) -> np.ndarray:
    grads = per_sample_grads(handle, batch, loss_fn)
    n = next(iter(grads.values())).shape[0]
    sq = torch.zeros(n, dtype=torch.float64)
    for g in grads.values():
        sq += g.reshape(n, -1).pow(2).sum(dim=1).double()
    return torch.sqrt(sq).cpu().numpy()


def capture_layer_features(
    handle: ModelHandle, example, loss_fn, last_k: int
) -> AttackFeatureBundle:
    """Activations and parameter gradients for the last_k parameterized layers,
    plus the scalar loss and label encoding, for one example.

    example: (inputs..., label_encoding); loss_fn receives a size-1 batch.
    """
    layers = handle.layers()
    if not 1 <= last_k <= len(layers):
        raise ModelError(f"last_k must be in [1, {len(layers)}], got {last_k}")
    selected = layers[-last_k:]
    selected_names = [n for n, _ in selected]

    activations = {}
    hooks = []

    def make_hook(name):
        def hook(_mod, _inp, out):
            activations[name] = out.detach().clone()

        return hook

    for name, mod in selected:
        hooks.append(mod.register_forward_hook(make_hook(name)))

    module = handle.module
    module.zero_grad(set_to_none=True)
    try:
        *inputs, label = example
        batch = tuple(torch.as_tensor(t).unsqueeze(0) for t in (*inputs, label))
        loss = loss_fn(module, batch)
        loss.backward()
    finally:
        for h in hooks:
            h.remove()

    gradients = {}
    for name, mod in selected:
        gradients[name] = {
            pname: p.grad.detach().cpu().numpy().copy()
            for pname, p in mod.named_parameters(recurse=False)
            if p.grad is not None
        }
    module.zero_grad(set_to_none=True)
    return AttackFeatureBundle(
        activations={n: activations[n].squeeze(0).cpu().numpy() for n in selected_names},
        gradients=gradients,
        loss=float(loss.detach()),
        label=np.asarray(label, dtype=np.float32).reshape(-1),
    )


# ---------------------------------------------------------------------------
# optimizer steps (explicit update rules so DP noise can be injected upstream)


def sgd_step(handle: ModelHandle, grads: dict, lr: float, momentum=0.0, weight_decay=0.0):
    """p <- p - lr * buf where buf <- momentum * buf + (grad + wd * p)."""
    if lr <= 0:
        raise ModelError("lr must be positive")
    with torch.no_grad():
        for name, p in handle.module.named_parameters():
            g = grads[name]
            if not torch.isfinite(g).all():
                raise ModelError(f"non-finite gradient for {name}")
            if weight_decay:
                g = g + weight_decay * p
            if momentum:
                buf = handle.opt_state.get(("sgd_m", name))
                buf = g.clone() if buf is None else momentum * buf + g
                handle.opt_state[("sgd_m", name)] = buf
                g = buf
            p.add_(g, alpha=-lr)
    handle.step_count += 1


def adam_step(handle: ModelHandle, grads: dict, lr: float, betas=(0.9, 0.999), eps=1e-8,
              weight_decay=0.0):
    if lr <= 0:
        raise ModelError("lr must be positive")
    b1, b2 = betas
    t = handle.opt_state.get("adam_t", 0) + 1
    handle.opt_state["adam_t"] = t
    with torch.no_grad():
        for name, p in handle.module.named_parameters():
            g = grads[name]
            if not torch.isfinite(g).all():
                raise ModelError(f"non-finite gradient for {name}")
            if weight_decay:
                g = g + weight_decay * p
            m = handle.opt_state.get(("adam_m", name), torch.zeros_like(p))
            v = handle.opt_state.get(("adam_v", name), torch.zeros_like(p))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            handle.opt_state[("adam_m", name)] = m
            handle.opt_state[("adam_v", name)] = v
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p.add_(-lr * m_hat / (torch.sqrt(v_hat) + eps))
    handle.step_count += 1


# ---------------------------------------------------------------------------
# checkpoints: magic | version u32 | header-length u32 | header JSON | payload

def save_checkpoint(handle: ModelHandle, path):
    shapes = [(name, list(p.shape)) for name, p in handle.module.named_parameters()]
    header = {
        "descriptor": handle.descriptor,
        "step_count": handle.step_count,
        "seed": handle.seed,
        "dtype": "float64" if handle.dtype == torch.float64 else "float32",
        "parameters": shapes,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for _, p in handle.module.named_parameters():
            arr = p.detach().cpu().numpy()
            f.write(arr.astype("<f8" if handle.dtype == torch.float64 else "<f4").tobytes())


def load_checkpoint(path, expected_descriptor: dict | None = None) -> ModelHandle:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic bytes: not a checkpoint file")
    (version,) = struct.unpack("<I", data[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} != {CHECKPOINT_VERSION}")
    (hlen,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12 : 12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt header: {e}") from e

    if expected_descriptor is not None and expected_descriptor != header["descriptor"]:
        raise CheckpointError(
            f"architecture mismatch: expected {expected_descriptor}, "
            f"found {header['descriptor']}"
        )
    dtype = torch.float64 if header["dtype"] == "float64" else torch.float32
    handle = ModelHandle(header["descriptor"], seed=header["seed"], dtype=dtype)
    handle.step_count = header["step_count"]

    width = 8 if dtype == torch.float64 else 4
    np_dtype = "<f8" if dtype == torch.float64 else "<f4"
    offset = 12 + hlen
    actual = [(name, list(p.shape)) for name, p in handle.module.named_parameters()]
    for (name, shape), (aname, ashape) in zip(header["parameters"], actual):
        if name != aname or shape != ashape:
            raise CheckpointError(f"parameter mismatch at layer {aname!r}: {shape} vs {ashape}")
    with torch.no_grad():
        for name, p in handle.module.named_parameters():
            nbytes = p.numel() * width
            chunk = data[offset : offset + nbytes]
            if len(chunk) < nbytes:
                raise CheckpointError(f"corrupt payload: truncated at parameter {name!r}")
            arr = np.frombuffer(chunk, dtype=np_dtype).reshape(p.shape)
            p.copy_(torch.from_numpy(arr.copy()).to(dtype))
            offset += nbytes
    if offset != len(data):
        raise CheckpointError("corrupt payload: trailing bytes")
    return handle


# ---------------------------------------------------------------------------
# finite-difference verification


def finite_difference_check(handle: ModelHandle, batch, loss_fn, step=1e-3,
                            num_directions=8, rng=None, max_params=None) -> float:
    """Max relative error between analytic directional derivatives and central
    finite differences along random unit directions, on a float64 clone.

    Directional probes keep the comparison well-conditioned (the reference
    magnitude is ||g||, not an individual near-zero coordinate).
    """
    del max_params  # kept for call-site compatibility; directions cover all params
    dbl = handle.to_double()
    batch64 = tuple(torch.as_tensor(t).double() for t in batch)
    bundle = loss_and_grad(dbl, batch64, loss_fn)
    rng = rng or np.random.default_rng(0)

    params = list(dbl.module.parameters())
    flat_grads = torch.cat([bundle.grads[n].reshape(-1) for n, _ in
                            dbl.module.named_parameters()])
    total = int(flat_grads.numel())

    def loss_value():
        # callers may perturb parameters under no_grad; some losses need
        # autograd internally (e.g. input-gradient penalties)
        with torch.enable_grad():
            return float(loss_fn(dbl.module, batch64).detach())

    max_rel = 0.0
    for _ in range(num_directions):
        d = torch.from_numpy(rng.standard_normal(total))
        d /= torch.linalg.norm(d)
        analytic = float(flat_grads @ d)
        chunks = torch.split(d, [p.numel() for p in params])
        with torch.no_grad():
            for p, c in zip(params, chunks):
                p.add_(step * c.reshape(p.shape))
            up = loss_value()
            for p, c in zip(params, chunks):
                p.add_(-2 * step * c.reshape(p.shape))
            down = loss_value()
            for p, c in zip(params, chunks):
                p.add_(step * c.reshape(p.shape))
        numeric = (up - down) / (2 * step)
        denom = max(abs(numeric), abs(analytic), 1e-8)
        max_rel = max(max_rel, abs(numeric - analytic) / denom)
    return max_rel
