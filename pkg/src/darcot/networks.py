"""Transport map (generator + residual embedding module) and potential network.

The transport map restores an image in two passes that share the generator
weights: an unconditional pass produces an intermediate estimate and its
residual, the residual is encoded into multi-scale embeddings, and a second
pass runs the generator again with those embeddings injected into the
decoder.  Widths are desk-scale; every block type of the full design is
kept.
"""

from __future__ import annotations

import dataclasses
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation

CONDITIONING = ("none", "x0", "r0", "multiscale")


class Module:
    """Minimal parameter container: tensors and sub-modules in attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ContractViolation(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, p in own.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ContractViolation(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(np.array(arr, dtype=np.float64, order="C"), requires_grad=True)


class Conv(Module):
    def __init__(self, rng, cin: int, cout: int, k: int = 3, stride: int = 1, bias: bool = True, zero: bool = False):
        fan_in = cin * k * k
        bound = 1.0 / np.sqrt(fan_in)
        w = np.zeros((cout, cin, k, k)) if zero else rng.uniform(-bound, bound, (cout, cin, k, k))
        self.weight = _param(w)
        self.bias = _param(np.zeros(cout) if zero else rng.uniform(-bound, bound, cout)) if bias else None
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride)


class DWConv(Module):
    def __init__(self, rng, c: int, k: int = 3):
        bound = 1.0 / np.sqrt(k * k)
        self.weight = _param(rng.uniform(-bound, bound, (c, 1, k, k)))
        self.bias = _param(rng.uniform(-bound, bound, c))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.depthwise_conv2d(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, c: int):
        self.weight = _param(np.ones(c))
        self.bias = _param(np.zeros(c))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.weight, self.bias, axis=1)


class MDTA(Module):
    """Single-head transposed (channel) attention built on depthwise convs."""

    def __init__(self, rng, c: int):
        self.norm = LayerNorm(c)
        self.q_pw, self.k_pw, self.v_pw = (Conv(rng, c, c, 1) for _ in range(3))
        self.q_dw, self.k_dw, self.v_dw = (DWConv(rng, c) for _ in range(3))
        self.temperature = _param(np.array(1.0))
        self.proj = Conv(rng, c, c, 1, bias=False)

    def _attend(self, x: Tensor) -> tuple[Tensor, Tensor]:
        n, c, h, w = x.shape
        xn = self.norm(x)
        q = ad.reshape(self.q_dw(self.q_pw(xn)), (n, c, h * w))
        k = ad.reshape(self.k_dw(self.k_pw(xn)), (n, c, h * w))
        v = ad.reshape(self.v_dw(self.v_pw(xn)), (n, c, h * w))
        q, k = ad.normalize(q, axis=-1), ad.normalize(k, axis=-1)
        logits = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), self.temperature)
        return ad.softmax(logits), v

    def attention(self, x: Tensor) -> Tensor:
        """The (N, C, C) channel-attention map."""
        return self._attend(x)[0]

    def __call__(self, x: Tensor) -> Tensor:
        attn, v = self._attend(x)
        out = ad.reshape(ad.matmul(attn, v), x.shape)
        return ad.add(self.proj(out), x)


class GDFN(Module):
    """Gated depthwise feed-forward block, hidden width = expansion * c."""

    def __init__(self, rng, c: int, expansion: int = 2):
        hidden = expansion * c
        self.norm = LayerNorm(c)
        self.pw1, self.dw1 = Conv(rng, c, hidden, 1), DWConv(rng, hidden)
        self.pw2, self.dw2 = Conv(rng, c, hidden, 1), DWConv(rng, hidden)
        self.proj = Conv(rng, hidden, c, 1, bias=False)

    def __call__(self, x: Tensor) -> Tensor:
        xn = self.norm(x)
        act = ad.gelu(self.dw1(self.pw1(xn)))
        gate = self.dw2(self.pw2(xn))
        return ad.add(self.proj(ad.mul(act, gate)), x)


class ResBlock(Module):
    def __init__(self, rng, c: int):
        self.conv1 = Conv(rng, c, c)
        self.conv2 = Conv(rng, c, c)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(x, self.conv2(ad.gelu(self.conv1(x))))


class Fusion(Module):
    """f + Conv1x1([f, R]); zero-initialized so injection starts as a no-op."""

    def __init__(self, rng, c: int, ce: int):
        self.conv = Conv(rng, c + ce, c, 1, zero=True)

    def __call__(self, f: Tensor, r: Tensor) -> Tensor:
        if r.shape[0] != f.shape[0] or r.shape[2:] != f.shape[2:]:
            raise ContractViolation(f"embedding {r.shape} does not match decoder features {f.shape}")
        return ad.add(f, self.conv(ad.concat_channels([f, r])))


@dataclasses.dataclass
class Embeddings:
    """Residual embeddings; R1 at H/4 (dense), R2 at H/2, R3 at full size."""

    R1: Tensor | None = None
    R2: Tensor | None = None
    R3: Tensor | None = None
    R0: Tensor | None = None


class Generator(Module):
    """Three-scale U-net whose decoder optionally fuses residual embeddings."""

    def __init__(self, rng, base: int = 16, emb_channels=(64, 32, 16), blocks: int = 1):
        c = base
        c3, c2, c1 = emb_channels
        self.stem = Conv(rng, 3, c)
        self.enc1 = [ResBlock(rng, c) for _ in range(blocks)]
        self.down1 = Conv(rng, c, 2 * c, stride=2)
        self.enc2 = [ResBlock(rng, 2 * c) for _ in range(blocks)]
        self.down2 = Conv(rng, 2 * c, 4 * c, stride=2)
        self.mid = [ResBlock(rng, 4 * c) for _ in range(blocks)]
        self.fuse1 = Fusion(rng, 4 * c, c3)
        self.up1 = Conv(rng, 4 * c, 2 * c)
        self.fuse2 = Fusion(rng, 2 * c, c2)
        self.dec2 = [ResBlock(rng, 2 * c) for _ in range(blocks)]
        self.up2 = Conv(rng, 2 * c, c)
        self.fuse3 = Fusion(rng, c, c1)
        self.dec1 = [ResBlock(rng, c) for _ in range(blocks)]
        self.out = Conv(rng, c, 3)

    def __call__(self, y: Tensor, emb: Embeddings | None = None) -> Tensor:
        if y.ndim != 4 or y.shape[1] != 3:
            raise ContractViolation(f"generator expects (N, 3, H, W), got {y.shape}")
        if y.shape[2] % 4 or y.shape[3] % 4:
            raise ContractViolation(f"spatial size {y.shape[2:]} not divisible by 4")
        emb = emb or Embeddings()
        f1 = self.stem(y)
        for blk in self.enc1:
            f1 = blk(f1)
        f2 = self.down1(f1)
        for blk in self.enc2:
            f2 = blk(f2)
        f3 = self.down2(f2)
        for blk in self.mid:
            f3 = blk(f3)
        if emb.R1 is not None:
            f3 = self.fuse1(f3, emb.R1)
        d2 = ad.add(self.up1(ad.upsample2x(f3)), f2)
        if emb.R2 is not None:
            d2 = self.fuse2(d2, emb.R2)
        for blk in self.dec2:
            d2 = blk(d2)
        d1 = ad.add(self.up2(ad.upsample2x(d2)), f1)
        if emb.R3 is not None:
            d1 = self.fuse3(d1, emb.R3)
        for blk in self.dec1:
            d1 = blk(d1)
        return ad.add(y, self.out(d1))


class REGM(Module):
    """Residual embedding generation: encoder + three attention/gating chains."""

    def __init__(self, rng, emb_channels=(64, 32, 16)):
        c3, c2, c1 = emb_channels
        self.enc1 = Conv(rng, 3, c1)
        self.enc2 = Conv(rng, c1, c2, stride=2)
        self.enc3 = Conv(rng, c2, c3, stride=2)
        self.b1_in = Conv(rng, c3, c3, 1)
        self.b1_mdta, self.b1_gdfn = MDTA(rng, c3), GDFN(rng, c3)
        self.b2_in = Conv(rng, c3, c2, 1)
        self.b2_mdta, self.b2_gdfn = MDTA(rng, c2), GDFN(rng, c2)
        self.b2_out = Conv(rng, c2, c2)
        self.b3_in = Conv(rng, c2, c1, 1)
        self.b3_mdta, self.b3_gdfn = MDTA(rng, c1), GDFN(rng, c1)
        self.b3_out = Conv(rng, c1, c1)

    def encode(self, r: Tensor) -> Tensor:
        h = ad.gelu(self.enc1(r))
        h = ad.gelu(self.enc2(h))
        return self.enc3(h)

    def __call__(self, r0_hat: Tensor) -> Embeddings:
        if r0_hat.ndim != 4 or r0_hat.shape[1] != 3:
            raise ContractViolation(f"REGM expects (N, 3, H, W), got {r0_hat.shape}")
        if r0_hat.shape[2] % 4 or r0_hat.shape[3] % 4:
            raise ContractViolation(f"spatial size {r0_hat.shape[2:]} not divisible by 4")
        r0 = self.encode(r0_hat)
        r1 = self.b1_gdfn(self.b1_mdta(self.b1_in(r0)))
        r2 = self.b2_out(self.b2_gdfn(self.b2_mdta(self.b2_in(r0))))
        r2 = ad.upsample2x(r2)
        r3 = self.b3_out(self.b3_gdfn(self.b3_mdta(self.b3_in(r2))))
        r3 = ad.upsample2x(r3)
        return Embeddings(R1=r1, R2=r2, R3=r3, R0=r0)


@dataclasses.dataclass
class Restoration:
    x_hat: Tensor
    x0_hat: Tensor
    r0_hat: Tensor
    embeddings: Embeddings


class TransportMap(Module):
    """T_theta = (generator, REGM); ``conditioning`` selects the second-pass condition."""

    def __init__(self, rng, base: int = 16, emb_channels=(64, 32, 16), blocks: int = 1, conditioning: str = "multiscale"):
        if conditioning not in CONDITIONING:
            raise ContractViolation(f"unknown conditioning {conditioning!r}")
        self.conditioning = conditioning
        c3 = emb_channels[0]
        self.generator = Generator(rng, base, emb_channels, blocks)
        self.regm = REGM(rng, emb_channels) if conditioning != "none" else None
        self.config = {"base": base, "emb_channels": list(emb_channels), "blocks": blocks, "conditioning": conditioning}
        if c3 <= 0:
            raise ContractViolation("embedding width must be positive")

    def two_pass_restore(self, y: Tensor) -> Restoration:
        x0 = self.generator(y)
        r0 = ad.sub(y, x0)
        if self.conditioning == "none":
            return Restoration(x0, x0, r0, Embeddings())
        if self.conditioning == "x0":
            emb = self.regm(x0)
        elif self.conditioning == "r0":
            emb = Embeddings(R1=self.regm.encode(r0))
        else:
            emb = self.regm(r0)
        return Restoration(self.generator(y, emb), x0, r0, emb)

    def __call__(self, y: Tensor) -> Tensor:
        return self.two_pass_restore(y).x_hat


class Potential(Module):
    """Strided-conv critic: 4 conv + leaky-ReLU stages, global pool, linear head."""

    def __init__(self, rng, base: int = 16, slope: float = 0.2):
        c = base
        chans = [3, c, 2 * c, 2 * c, 4 * c]
        self.convs = [Conv(rng, chans[i], chans[i + 1], stride=2) for i in range(4)]
        bound = 1.0 / np.sqrt(chans[-1])
        self.head_w = _param(rng.uniform(-bound, bound, (chans[-1], 1)))
        self.head_b = _param(np.zeros(1))
        self.slope = slope
        self.config = {"base": base}

    def __call__(self, x: Tensor) -> Tensor:
        single = x.ndim == 3
        if single:
            x = ad.reshape(x, (1, *x.shape))
        if x.ndim != 4 or x.shape[1] != 3:
            raise ContractViolation(f"potential expects (N, 3, H, W) or (3, H, W), got {x.shape}")
        h = x
        for conv in self.convs:
            h = ad.leaky_relu(conv(h), self.slope)
        out = ad.linear(ad.global_avg_pool(h), self.head_w, self.head_b)
        return ad.reshape(out, () if single else (x.shape[0],))


class MLP(Module):
    """Fully connected net for low-dimensional transport experiments."""

    def __init__(self, rng, sizes, residual: bool = False):
        self.weights = []
        self.biases = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(a)
            setattr(self, f"w{i}", _param(rng.uniform(-bound, bound, (a, b))))
            setattr(self, f"b{i}", _param(np.zeros(b)))
        self.depth = len(sizes) - 1
        self.residual = residual

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for i in range(self.depth):
            h = ad.linear(h, getattr(self, f"w{i}"), getattr(self, f"b{i}"))
            if i < self.depth - 1:
                h = ad.gelu(h)
        return ad.add(h, x) if self.residual else h


def regm_forward(r0_hat: Tensor, regm: REGM) -> Embeddings:
    return regm(r0_hat)


def generator_forward(y: Tensor, embeddings: Embeddings | None, generator: Generator) -> Tensor:
    return generator(y, embeddings)


def potential_forward(x: Tensor, potential: Potential) -> Tensor:
    return potential(x)


class MonotoneMLP(Module):
    """Scalar increasing map: positive-slope linear term plus positive mix of tanh units."""

    def __init__(self, rng, hidden: int = 32):
        self.in_w = _param(rng.normal(0.0, 1.0, (1, hidden)))
        self.in_b = _param(rng.normal(0.0, 1.0, hidden))
        self.out_w = _param(rng.normal(-3.0, 0.1, (hidden, 1)))
        self.skip = _param(np.array([[0.5413]]))  # softplus^-1(1): starts near identity
        self.bias = _param(np.zeros(1))

    def __call__(self, y: Tensor) -> Tensor:
        if y.ndim != 2 or y.shape[1] != 1:
            raise ContractViolation(f"monotone map expects (N, 1), got {y.shape}")
        h = ad.tanh(ad.linear(y, ad.softplus(self.in_w), self.in_b))
        out = ad.linear(h, ad.softplus(self.out_w), self.bias)
        return ad.add(out, ad.matmul(y, ad.softplus(self.skip)))
