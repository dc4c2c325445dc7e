"""U-Net encoder/decoder with a VAE reconstruction branch, built on ``segvae.nn``.

Layout (``F_l = base_filters * filter_ratio**l``)::

    x -> conv3 -> [res_0] -> down -> [res_1] -> ... -> [res_{L-1}] = deep
    deep -> (up2x, conv1, +skip_l, res) per level -> conv1 -> sigmoid  = seg_probs
    deep -> GN, LeakyReLU, conv3/s2 -> dense -> (mu, logvar) -> z
         -> dense -> (up2x, conv1, LeakyReLU) x L -> conv1         = recon

The VAE branch only runs in train mode.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .nn import ops
from .nn.optim import AdamState, adam_step
from .nn.tensor import Tensor, track


@dataclass
class ModelConfig:
    in_channels: int = 4
    base_filters: int = 32
    filter_ratio: int = 2
    levels: int = 4
    patch: tuple = (80, 80, 80)
    latent_dim: int = 128
    groupnorm_groups: int = 8
    leaky_slope: float = ops.LEAKY_SLOPE
    vae_channels: int = 16
    gn_eps: float = ops.GN_EPS

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)

    def channels(self, level):
        return self.base_filters * self.filter_ratio**level

    def groups_for(self, channels):
        g = min(self.groupnorm_groups, channels)
        if channels % g:
            raise ConfigError(f"{channels} channels not divisible into {g} groups")
        return g

    def vae_grid(self):
        return tuple(p // 2**self.levels for p in self.patch)

    def validate(self):
        if self.in_channels < 1 or self.base_filters < 1 or self.latent_dim < 1:
            raise ConfigError("in_channels, base_filters and latent_dim must be positive")
        if self.filter_ratio < 1 or self.levels < 1:
            raise ConfigError("filter_ratio and levels must be >= 1")
        if len(self.patch) != 3:
            raise ConfigError(f"patch must have 3 dims, got {self.patch}")
        # levels-1 stride-2 encoder steps plus one more in the VAE branch
        div = 2**self.levels
        if any(p % div for p in self.patch):
            raise ConfigError(f"patch {self.patch} must be divisible by {div} for levels={self.levels}")
        if self.channels(self.levels - 1) < self.vae_channels:
            raise ConfigError(
                f"deepest channel count {self.channels(self.levels - 1)} < vae_channels {self.vae_channels}"
            )
        for lvl in range(self.levels):
            self.groups_for(self.channels(lvl))
        self.groups_for(self.channels(self.levels - 1))
        return self

    # key=value text, shared with the checkpoint format and run configs
    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = "x".join(str(i) for i in v)
            lines.append(f"{f.name}={v!r}" if isinstance(v, float) else f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, items):
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in items.items():
            if key not in kinds:
                raise ConfigError(f"unknown model config key {key!r}")
            default = getattr(cls(), key)
            try:
                if isinstance(default, tuple):
                    parts = str(raw).replace(",", "x").split("x")
                    vals = tuple(int(p) for p in parts)
                    kwargs[key] = vals * 3 if len(vals) == 1 else vals
                elif isinstance(default, float):
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = int(raw)
            except ValueError:
                raise ConfigError(f"bad value for {key!r}: {raw!r}") from None
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text):
        items = {}
        for line in text.splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                k, _, v = line.partition("=")
                items[k.strip()] = v.strip()
        return cls.from_mapping(items)


# ---------------------------------------------------------------- layers

class Conv:
    def __init__(self, name, spec):
        self.name = name
        self.spec = spec
        self.w = name + ".w"
        self.b = name + ".b"

    def param_shapes(self):
        return {self.w: self.spec.weight_shape(), self.b: (self.spec.out_channels,)}

    def fan_in(self):
        return self.spec.in_channels * int(np.prod(self.spec.kernel))

    def forward(self, P, x, keep):
        return ops.conv3d_forward(x, P[self.w].data, P[self.b].data, self.spec, keep=keep, site=self.name)

    def backward(self, P, G, g, cache, need_input_grad=True):
        gx, gw, gb = ops.conv3d_backward(g, cache, P[self.w].data, need_input_grad)
        G[self.w] += gw
        G[self.b] += gb
        return gx


class GroupNorm:
    def __init__(self, name, channels, groups, eps):
        self.name = name
        self.channels = channels
        self.groups = groups
        self.eps = eps
        self.gamma = name + ".gamma"
        self.beta = name + ".beta"

    def param_shapes(self):
        return {self.gamma: (self.channels,), self.beta: (self.channels,)}

    def forward(self, P, x, keep):
        return ops.group_norm(
            x, self.groups, P[self.gamma].data, P[self.beta].data, self.eps, keep=keep, site=self.name
        )

    def backward(self, P, G, g, cache):
        gx, gg, gb = ops.group_norm_backward(g, cache, P[self.gamma].data)
        G[self.gamma] += gg
        G[self.beta] += gb
        return gx


class Dense:
    def __init__(self, name, n_in, n_out):
        self.name = name
        self.n_in = n_in
        self.n_out = n_out
        self.w = name + ".w"
        self.b = name + ".b"

    def param_shapes(self):
        return {self.w: (self.n_out, self.n_in), self.b: (self.n_out,)}

    def fan_in(self):
        return self.n_in

    def forward(self, P, x):
        return ops.dense(x, P[self.w].data, P[self.b].data, site=self.name)

    def backward(self, P, G, g, x):
        gx, gw, gb = ops.dense_backward(g, x, P[self.w].data)
        G[self.w] += gw
        G[self.b] += gb
        return gx


class ResBlock:
    """Pre-activation block: x + conv(act(gn(conv(act(gn(x))))))."""

    def __init__(self, name, channels, cfg):
        groups = cfg.groups_for(channels)
        spec = ops.ConvSpec(channels, channels)
        self.name = name
        self.slope = cfg.leaky_slope
        self.gn1 = GroupNorm(name + ".gn1", channels, groups, cfg.gn_eps)
        self.conv1 = Conv(name + ".conv1", spec)
        self.gn2 = GroupNorm(name + ".gn2", channels, groups, cfg.gn_eps)
        self.conv2 = Conv(name + ".conv2", spec)

    def layers(self):
        return [self.gn1, self.conv1, self.gn2, self.conv2]

    def forward(self, P, x, keep):
        h, c1 = self.gn1.forward(P, x, keep)
        h, a1 = ops.leaky_relu(h, self.slope, keep, site=self.name + ".act1")
        h, c2 = self.conv1.forward(P, h, keep)
        h, c3 = self.gn2.forward(P, h, keep)
        h, a2 = ops.leaky_relu(h, self.slope, keep, site=self.name + ".act2")
        h, c4 = self.conv2.forward(P, h, keep)
        h += x
        return h, ((c1, a1, c2, c3, a2, c4) if keep else None)

    def backward(self, P, G, g, cache):
        c1, a1, c2, c3, a2, c4 = cache
        h = self.conv2.backward(P, G, g, c4)
        h = ops.leaky_relu_backward(h, a2)
        h = self.gn2.backward(P, G, h, c3)
        h = self.conv1.backward(P, G, h, c2)
        h = ops.leaky_relu_backward(h, a1)
        h = self.gn1.backward(P, G, h, c1)
        return h + g


# ---------------------------------------------------------------- model

@dataclass
class ModelOutput:
    seg_probs: np.ndarray
    recon: np.ndarray | None = None
    mu: np.ndarray | None = None
    logvar: np.ndarray | None = None
    z: np.ndarray | None = None


class Model:
    """Named parameter table plus the fixed layer graph derived from a config."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config.validate()
        self.dtype = np.dtype(dtype)
        cfg = config
        L = cfg.levels
        F = cfg.channels
        self.init_conv = Conv("enc.init", ops.ConvSpec(cfg.in_channels, F(0)))
        self.enc_res = [ResBlock(f"enc.{l}.res", F(l), cfg) for l in range(L)]
        self.enc_down = [
            Conv(f"enc.{l}.down", ops.ConvSpec(F(l), F(l + 1), stride=2)) for l in range(L - 1)
        ]
        self.dec_up = {
            l: Conv(f"dec.{l}.up", ops.ConvSpec(F(l + 1), F(l), kernel=1)) for l in range(L - 2, -1, -1)
        }
        self.dec_res = {l: ResBlock(f"dec.{l}.res", F(l), cfg) for l in range(L - 2, -1, -1)}
        self.head = Conv("head", ops.ConvSpec(F(0), 3, kernel=1))

        deep = F(L - 1)
        vc = cfg.vae_channels
        n_flat = vc * int(np.prod(cfg.vae_grid()))
        self.vae_gn = GroupNorm("vae.gn", deep, cfg.groups_for(deep), cfg.gn_eps)
        self.vae_conv = Conv("vae.conv", ops.ConvSpec(deep, vc, stride=2))
        self.vae_enc = Dense("vae.mu_logvar", n_flat, 2 * cfg.latent_dim)
        self.vae_dec = Dense("vae.expand", cfg.latent_dim, n_flat)
        self.vae_up = []
        c_in = vc
        for i in range(L):
            c_out = F(L - 1 - i)
            self.vae_up.append(Conv(f"vae.up{i}", ops.ConvSpec(c_in, c_out, kernel=1)))
            c_in = c_out
        self.vae_out = Conv("vae.out", ops.ConvSpec(F(0), cfg.in_channels, kernel=1))

        self.params = {}
        for layer in self.layers():
            for name, shape in layer.param_shapes().items():
                if name in self.params:
                    raise ConfigError(f"duplicate parameter name {name}")
                self.params[name] = Tensor(np.zeros(shape, self.dtype))
        self.adam = {}
        self._tape = None

    def layers(self):
        out = [self.init_conv]
        for l in range(self.config.levels):
            out += self.enc_res[l].layers()
            if l < self.config.levels - 1:
                out.append(self.enc_down[l])
        for l in sorted(self.dec_up, reverse=True):
            out.append(self.dec_up[l])
            out += self.dec_res[l].layers()
        out.append(self.head)
        out += [self.vae_gn, self.vae_conv, self.vae_enc, self.vae_dec, *self.vae_up, self.vae_out]
        return out

    def param_count(self):
        return sum(t.data.size for t in self.params.values())

    def param_shapes(self):
        return {k: t.data.shape for k, t in self.params.items()}

    def is_vae_param(self, name):
        return name.startswith("vae.")

    def predict(self, x):
        """Infer-mode segmentation probabilities for one patch."""
        return forward(self, x, mode="infer").seg_probs


# The head feeds a sigmoid straight from the unnormalized residual stream, whose
# spread is ~10 at init; He weights there saturate the sigmoid before training
# starts, so the head gets small weights instead.
HEAD_INIT_STD = 0.01


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """Instantiate with He fan-in normal weights, zero biases, unit GN scales.

    The segmentation head is the exception: N(0, HEAD_INIT_STD^2) weights.
    """
    model = Model(config, dtype)
    rng = np.random.default_rng(seed)
    for layer in model.layers():
        if isinstance(layer, GroupNorm):
            model.params[layer.gamma].data[...] = 1
            continue
        w = model.params[layer.w].data
        std = HEAD_INIT_STD if layer is model.head else np.sqrt(2.0 / layer.fan_in())
        w[...] = rng.standard_normal(w.shape) * std
    return model


def reparameterize(mu, logvar, eps):
    return mu + np.exp(0.5 * logvar) * eps


def forward(model: Model, x, mode="train", rng=None) -> ModelOutput:
    """Run the network on one patch ``x[in_channels, *patch]``.

    ``mode="train"`` retains activations for :func:`backward` and evaluates the
    VAE branch, drawing the latent noise from ``rng``. ``mode="infer"`` keeps
    nothing and skips the VAE branch.
    """
    cfg = model.config
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    expected = (cfg.in_channels,) + cfg.patch
    x = np.asarray(x)
    if x.shape != expected:
        raise ShapeError(f"input shape {x.shape} != {expected}")
    x = x.astype(model.dtype, copy=False)
    keep = mode == "train"
    P = model.params
    L = cfg.levels
    slope = cfg.leaky_slope
    tape = {}

    h, tape["init"] = model.init_conv.forward(P, x, keep)
    skips = []
    for l in range(L):
        h, tape[f"enc{l}"] = model.enc_res[l].forward(P, h, keep)
        skips.append(h)
        if l < L - 1:
            h, tape[f"down{l}"] = model.enc_down[l].forward(P, h, keep)
    d = skips[L - 1]
    skips[L - 1] = None
    h = None
    deep = d if keep else None

    for l in range(L - 2, -1, -1):
        u = ops.trilinear_upsample2x(d, site=f"dec.{l}.upsample")
        d = None
        u, tape[f"up{l}"] = model.dec_up[l].forward(P, u, keep)
        u += skips[l]
        skips[l] = None
        d, tape[f"dec{l}"] = model.dec_res[l].forward(P, u, keep)
        u = None
    logits, tape["head"] = model.head.forward(P, d, keep)
    d = None
    seg, tape["sigmoid"] = ops.sigmoid(logits, keep, site="head.sigmoid")
    logits = None

    if not keep:
        model._tape = None
        return ModelOutput(seg_probs=seg)

    if rng is None:
        raise ValueError("train-mode forward needs an rng for the latent sample")
    v, tape["vae_gn"] = model.vae_gn.forward(P, deep, keep)
    v, tape["vae_act"] = ops.leaky_relu(v, slope, keep, site="vae.act")
    v, tape["vae_conv"] = model.vae_conv.forward(P, v, keep)
    flat = v.reshape(-1)
    tape["vae_flat_shape"] = v.shape
    ml = model.vae_enc.forward(P, flat)
    tape["vae_flat"] = flat
    mu, logvar = ml[: cfg.latent_dim].copy(), ml[cfg.latent_dim :].copy()
    eps = rng.standard_normal(cfg.latent_dim).astype(model.dtype)
    z = reparameterize(mu, logvar, eps).astype(model.dtype, copy=False)
    tape["eps"], tape["logvar"], tape["z"] = eps, logvar, z
    e = model.vae_dec.forward(P, z)
    e, tape["vae_expand_act"] = ops.leaky_relu(e, slope, keep, site="vae.expand_act")
    r = e.reshape((cfg.vae_channels,) + cfg.vae_grid())
    for i, conv in enumerate(model.vae_up):
        r = ops.trilinear_upsample2x(r, site=f"vae.up{i}.upsample")
        r, tape[f"vae_up{i}"] = conv.forward(P, r, keep)
        r, tape[f"vae_up{i}_act"] = ops.leaky_relu(r, slope, keep, site=f"vae.up{i}.act")
    recon, tape["vae_out"] = model.vae_out.forward(P, r, keep)
    model._tape = tape
    return ModelOutput(seg_probs=seg, recon=recon, mu=mu, logvar=logvar, z=z)


def backward(model: Model, grad_seg, grad_recon=None, grad_mu=None, grad_logvar=None):
    """Back-propagate output gradients; returns ``{param name: grad}``.

    Also stores each gradient on the parameter's ``Tensor.grad``. ``None``
    gradients are treated as zero.
    """
    tape = model._tape
    if tape is None:
        raise StateError("backward called without a preceding train-mode forward")
    cfg = model.config
    L = cfg.levels
    P = model.params
    G = {k: np.zeros_like(t.data) for k, t in P.items()}
    dt = model.dtype

    g = ops.sigmoid_backward(np.asarray(grad_seg, dt), tape["sigmoid"])
    g = model.head.backward(P, G, g, tape["head"])
    skip_grads = {}
    for l in range(L - 1):
        gu = model.dec_res[l].backward(P, G, g, tape[f"dec{l}"])
        skip_grads[l] = gu
        gu = model.dec_up[l].backward(P, G, gu, tape[f"up{l}"])
        g = ops.trilinear_upsample2x_backward(gu)
    g_deep = g

    # VAE branch, from the reconstruction back to the deepest features
    lat = cfg.latent_dim
    g_mu = np.zeros(lat, dt) if grad_mu is None else np.asarray(grad_mu, dt).copy()
    g_logvar = np.zeros(lat, dt) if grad_logvar is None else np.asarray(grad_logvar, dt).copy()
    if grad_recon is not None:
        r = model.vae_out.backward(P, G, np.asarray(grad_recon, dt), tape["vae_out"])
        for i in range(L - 1, -1, -1):
            r = ops.leaky_relu_backward(r, tape[f"vae_up{i}_act"])
            r = model.vae_up[i].backward(P, G, r, tape[f"vae_up{i}"])
            r = ops.trilinear_upsample2x_backward(r)
        ge = ops.leaky_relu_backward(r.reshape(-1), tape["vae_expand_act"])
        gz = model.vae_dec.backward(P, G, ge, tape["z"])
        g_mu += gz
        g_logvar += gz * tape["eps"] * 0.5 * np.exp(0.5 * tape["logvar"])
    gml = np.concatenate([g_mu, g_logvar])
    gflat = model.vae_enc.backward(P, G, gml, tape["vae_flat"])
    gv = gflat.reshape(tape["vae_flat_shape"])
    gv = model.vae_conv.backward(P, G, gv, tape["vae_conv"])
    gv = ops.leaky_relu_backward(gv, tape["vae_act"])
    g_deep = g_deep + model.vae_gn.backward(P, G, gv, tape["vae_gn"])

    g = g_deep
    for l in range(L - 1, -1, -1):
        if l < L - 1:
            g = g + skip_grads[l]
        g = model.enc_res[l].backward(P, G, g, tape[f"enc{l}"])
        if l > 0:
            g = model.enc_down[l - 1].backward(P, G, g, tape[f"down{l - 1}"])
    model.init_conv.backward(P, G, g, tape["init"], need_input_grad=False)

    for k, grad in G.items():
        P[k].grad = grad
    return G


def adam_update(model: Model, grads, lr):
    for name, grad in grads.items():
        state = model.adam.get(name)
        if state is None:
            state = model.adam[name] = AdamState.zeros_like(model.params[name].data)
        adam_step(model.params[name], grad, state, lr)


def clone_params(model: Model):
    return {k: t.data.copy() for k, t in model.params.items()}


def load_params(model: Model, values):
    for k, v in values.items():
        model.params[k].data[...] = v
