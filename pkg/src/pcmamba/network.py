"""U-shaped segmentation network built from predictive-corrective blocks.

Layout for an H×W input with patch size 4 and embedding width C::

    patch embed          -> H/4  x W/4  x C
    encoder stage 1..4   -> H/4, H/8, H/16, H/32 (widths C, 2C, 4C, 8C)
    bottleneck           -> H/32 x W/32 x 8C
    decoder stage 1..3   -> H/16, H/8, H/4 (skip concat + linear reduce)
    head                 -> 4x linear patch expansion, 1x1 projection to classes

Patches are flattened in a midline-canonical order: tokens right of the
vertical midline read their pixels right-to-left, so a mirror-symmetric image
produces mirror-symmetric tokens. Merges, expansions and the head follow the
same convention and undo it on the way back to pixels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module
from .pcblock import CrnConfig, PCMambaBlock, PpmConfig, VariantKind
from .tensor import FormatError, Tensor

__all__ = [
    "NetworkConfig",
    "PCMambaNet",
    "VariantKind",
    "build_variant",
    "canonical_column_order",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class NetworkConfig:
    input_size: tuple[int, int] = (64, 64)
    patch_size: int = 4
    embed_dim: int = 32
    stage_depths: tuple[int, ...] = (2, 2, 2, 2)
    bottleneck_depth: int = 2
    decoder_depths: tuple[int, ...] = (2, 2, 2)
    num_classes: int = 4
    variant: VariantKind = VariantKind.FULL_PC
    ppm: PpmConfig = field(default_factory=PpmConfig)
    crn: CrnConfig = field(default_factory=CrnConfig)
    state_dim: int = 8
    bidirectional: bool = True
    seed: int = 0

    def __post_init__(self):
        self.variant = VariantKind.parse(self.variant)
        self.input_size = tuple(int(v) for v in self.input_size)
        self.stage_depths = tuple(self.stage_depths)
        self.decoder_depths = tuple(self.decoder_depths)
        H, W = self.input_size
        if H % 32 or W % 32 or H < 32 or W < 32:
            raise ValueError(f"input size {H}x{W} must be a positive multiple of 32")
        if self.patch_size != 4:
            raise ValueError("stage layout assumes patch_size 4")
        if len(self.stage_depths) != 4 or len(self.decoder_depths) != 3:
            raise ValueError("need 4 encoder depths and 3 decoder depths")
        if min(self.stage_depths + self.decoder_depths + (self.bottleneck_depth,)) < 0:
            raise ValueError("stage depths must be >= 0")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ValueError("embed_dim must be even")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    def stage_grids(self) -> list[tuple[int, int]]:
        H, W = self.input_size
        return [(H // (4 * 2**s), W // (4 * 2**s)) for s in range(4)]

    def with_variant(self, variant) -> "NetworkConfig":
        return replace(self, variant=VariantKind.parse(variant))

    def to_meta(self) -> dict[str, str]:
        """Flat ``net.*`` string map, stored in checkpoint manifests."""
        return {
            "net.input_size": "x".join(map(str, self.input_size)),
            "net.embed_dim": str(self.embed_dim),
            "net.stage_depths": ",".join(map(str, self.stage_depths)),
            "net.bottleneck_depth": str(self.bottleneck_depth),
            "net.decoder_depths": ",".join(map(str, self.decoder_depths)),
            "net.num_classes": str(self.num_classes),
            "net.variant": self.variant.value,
            "net.theta": repr(self.ppm.theta),
            "net.neighborhood_radius": str(self.ppm.neighborhood_radius),
            "net.epsilon": repr(self.ppm.epsilon),
            "net.kernel_size": str(self.crn.kernel_size),
            "net.dilation": str(self.crn.dilation),
            "net.state_dim": str(self.state_dim),
            "net.bidirectional": str(int(self.bidirectional)),
            "net.seed": str(self.seed),
        }

    @classmethod
    def from_meta(cls, meta: dict[str, str]) -> "NetworkConfig":
        """Inverse of :meth:`to_meta`; missing keys keep their defaults."""
        m = {k[4:]: v for k, v in meta.items() if k.startswith("net.")}
        unknown = set(m) - _META_KEYS
        if unknown:
            raise ValueError(f"unknown network keys: {sorted(unknown)}")
        kw: dict = {}
        ints = lambda v: tuple(int(x) for x in v.split(",") if x.strip())  # noqa: E731
        if "input_size" in m:
            kw["input_size"] = tuple(int(x) for x in m["input_size"].lower().split("x"))
        for k in ("embed_dim", "bottleneck_depth", "num_classes", "state_dim", "seed"):
            if k in m:
                kw[k] = int(m[k])
        for k in ("stage_depths", "decoder_depths"):
            if k in m:
                kw[k] = ints(m[k])
        if "variant" in m:
            kw["variant"] = m["variant"]
        if "bidirectional" in m:
            kw["bidirectional"] = m["bidirectional"].lower() in ("1", "true", "yes")
        d = cls()
        kw["ppm"] = PpmConfig(float(m.get("theta", d.ppm.theta)),
                              int(m.get("neighborhood_radius", d.ppm.neighborhood_radius)),
                              float(m.get("epsilon", d.ppm.epsilon)))
        kw["crn"] = CrnConfig(int(m.get("kernel_size", d.crn.kernel_size)),
                              int(m.get("dilation", d.crn.dilation)))
        return cls(**kw)


_META_KEYS = {"input_size", "embed_dim", "stage_depths", "bottleneck_depth", "decoder_depths", "num_classes",
              "variant", "theta", "neighborhood_radius", "epsilon", "kernel_size", "dilation", "state_dim",
              "bidirectional", "seed"}


def canonical_column_order(width: int, group: int) -> np.ndarray:
    """Column permutation that mirrors each ``group``-wide block right of the midline.

    Applying it before patch flattening makes a mirrored image yield the
    mirrored token grid. The permutation is its own inverse.
    """
    n_tok = width // group
    perm = np.arange(width)
    for c in range(n_tok):
        if c > (n_tok - 1) / 2:
            perm[c * group:(c + 1) * group] = perm[c * group:(c + 1) * group][::-1]
    return perm


def _merge(x: Tensor, g: int) -> Tensor:
    """(B, H, W, C) -> (B, H/g, W/g, g*g*C) with canonical column order."""
    B, H, W, C = x.shape
    x = T.permute_axis(x, canonical_column_order(W, g), axis=2)
    x = T.reshape(x, (B, H // g, g, W // g, g, C))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B, H // g, W // g, g * g * C))


def _unmerge(x: Tensor, g: int) -> Tensor:
    """Inverse of :func:`_merge`: (B, h, w, g*g*C) -> (B, h*g, w*g, C)."""
    B, h, w, D = x.shape
    C = D // (g * g)
    x = T.reshape(x, (B, h, w, g, g, C))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (B, h * g, w * g, C))
    return T.permute_axis(x, canonical_column_order(w * g, g), axis=2)


class PatchEmbed(Module):
    def __init__(self, patch: int, dim: int, *, seed: int, name: str = "embed"):
        self.patch = patch
        self.proj = Linear(patch * patch, dim, seed=seed, name=name + ".proj")
        self.norm = LayerNorm(dim, name=name + ".norm")

    def __call__(self, image: Tensor) -> Tensor:
        B, _, H, W = image.shape
        p = self.patch
        if H % p or W % p:
            raise ValueError(f"image {H}x{W} not divisible by patch size {p}")
        x = T.reshape(image, (B, H, W, 1))
        return self.norm(self.proj(_merge(x, p)))


class Downsample(Module):
    """2x2 patch merge and linear map C -> 2C."""

    def __init__(self, dim: int, *, seed: int, name: str):
        self.norm = LayerNorm(4 * dim, name=name + ".norm")
        self.proj = Linear(4 * dim, 2 * dim, seed=seed, name=name + ".proj", bias=False)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] % 2 or x.shape[2] % 2:
            raise ValueError(f"cannot downsample odd grid {x.shape[1]}x{x.shape[2]}")
        return self.proj(self.norm(_merge(x, 2)))


class Upsample(Module):
    """Linear expansion C -> 2C and 2x2 un-merge, giving C/2 channels at twice the grid."""

    def __init__(self, dim: int, *, seed: int, name: str):
        self.proj = Linear(dim, 2 * dim, seed=seed, name=name + ".proj", bias=False)
        self.norm = LayerNorm(dim // 2, name=name + ".norm")

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(_unmerge(self.proj(x), 2))


class Head(Module):
    def __init__(self, dim: int, patch: int, num_classes: int, *, seed: int, name: str = "head"):
        self.patch = patch
        self.norm = LayerNorm(dim, name=name + ".norm")
        self.expand = Linear(dim, patch * patch * dim, seed=seed, name=name + ".expand", bias=False)
        self.classify = Linear(dim, num_classes, seed=seed, name=name + ".classify")

    def __call__(self, x: Tensor) -> Tensor:
        pix = _unmerge(self.expand(self.norm(x)), self.patch)
        logits = self.classify(T.gelu(pix))
        return T.transpose(logits, (0, 3, 1, 2))


class PCMambaNet(Module):
    def __init__(self, cfg: NetworkConfig):
        self._cfg = cfg
        self._rng = np.random.default_rng(cfg.seed)
        s, C = cfg.seed, cfg.embed_dim

        def blocks(n, dim, name):
            return [PCMambaBlock(dim, variant=cfg.variant, ppm_cfg=cfg.ppm, crn_cfg=cfg.crn,
                                 state_dim=cfg.state_dim, bidirectional=cfg.bidirectional,
                                 seed=s, name=f"{name}.{i}") for i in range(n)]

        self.embed = PatchEmbed(cfg.patch_size, C, seed=s)
        self.encoder = [_Stage(blocks(d, C * 2**i, f"encoder.{i}")) for i, d in enumerate(cfg.stage_depths)]
        self.down = [Downsample(C * 2**i, seed=s, name=f"down.{i}") for i in range(3)]
        self.bottleneck = _Stage(blocks(cfg.bottleneck_depth, C * 8, "bottleneck"))
        self.up = [Upsample(C * 2**(3 - i), seed=s, name=f"up.{i}") for i in range(3)]
        self.skip_reduce = [Linear(2 * C * 2**(2 - i), C * 2**(2 - i), seed=s, name=f"skip_reduce.{i}")
                            for i in range(3)]
        self.decoder = [_Stage(blocks(d, C * 2**(2 - i), f"decoder.{i}")) for i, d in enumerate(cfg.decoder_depths)]
        self.head = Head(C, cfg.patch_size, cfg.num_classes, seed=s)

    @property
    def config(self) -> NetworkConfig:
        return self._cfg

    @property
    def variant(self) -> VariantKind:
        return self._cfg.variant

    def blocks(self) -> list[PCMambaBlock]:
        out = []
        for st in self.encoder + [self.bottleneck] + self.decoder:
            out.extend(st.blocks)
        return out

    def reseed_masks(self, seed: int) -> None:
        self._rng = np.random.default_rng(seed)

    def __call__(self, image, zero_skip: int | None = None) -> Tensor:
        return self.forward(image, zero_skip=zero_skip)

    def forward(self, image, zero_skip: int | None = None, features: dict | None = None) -> Tensor:
        """Per-pixel class logits, (K, H, W) or batched (B, K, H, W).

        ``zero_skip`` replaces the given encoder stage's skip output with zeros
        (wiring diagnostics); ``features`` collects intermediate maps by name.
        """
        image = T.as_tensor(image)
        squeeze = image.ndim == 3
        if squeeze:
            image = T.reshape(image, (1,) + image.shape)
        if image.ndim != 4 or image.shape[1] != 1 or tuple(image.shape[2:]) != self._cfg.input_size:
            raise ValueError(f"expected image of shape (1, {self._cfg.input_size[0]}, "
                             f"{self._cfg.input_size[1]}), got {tuple(image.shape)}")
        rng = self._rng if self.variant is VariantKind.RANDOM_MASK_PPM else None
        x = self.embed(image)
        skips = []
        for i, stage in enumerate(self.encoder):
            x = stage(x, rng)
            if features is not None:
                features[f"encoder.{i}"] = x
            if i < 3:
                skips.append(x)
                x = self.down[i](x)
        x = self.bottleneck(x, rng)
        for i, stage in enumerate(self.decoder):
            x = self.up[i](x)
            skip = skips[2 - i]
            if zero_skip == 2 - i:
                skip = T.Tensor(np.zeros(skip.shape, dtype=skip.dtype))
            x = self.skip_reduce[i](T.concat([x, skip], axis=-1))
            x = stage(x, rng)
            if features is not None:
                features[f"decoder.{i}"] = x
        logits = self.head(x)
        return T.reshape(logits, logits.shape[1:]) if squeeze else logits

    def predict(self, image) -> np.ndarray:
        """Argmax labels without recording gradients."""
        return np.argmax(self.forward(image).data, axis=-3)


class _Stage(Module):
    def __init__(self, blocks: list[PCMambaBlock]):
        self.blocks = blocks

    def __call__(self, x, rng=None):
        for b in self.blocks:
            x = b(x, rng=rng)
        return x


def build_variant(cfg: NetworkConfig, variant=None) -> PCMambaNet:
    """Construct the network for ``cfg`` (optionally overriding its variant)."""
    if variant is not None:
        cfg = cfg.with_variant(variant)
    return PCMambaNet(cfg)


# -- checkpoints --------------------------------------------------------------
CKPT_MAGIC = b"PCCK"


def save_checkpoint(net: Module, path, extra: dict | None = None) -> None:
    """One file: magic, u32 manifest length, manifest text, then PCTN tensors in order."""
    named = list(net.named_parameters())
    lines = [f"n_tensors = {len(named)}"]
    for k, v in (extra or {}).items():
        lines.append(f"meta.{k} = {v}")
    for name, p in named:
        lines.append(f"{name} = {'x'.join(map(str, p.shape)) or 'scalar'}")
    manifest = ("\n".join(lines) + "\n").encode()
    payload = b"".join(T.tensor_to_bytes(p) for _, p in named)
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<I", len(manifest)) + manifest + payload)


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic, expected PCCK")
    (mlen,) = struct.unpack_from("<I", buf, 4)
    manifest = buf[8:8 + mlen].decode()
    names, meta = [], {}
    for line in manifest.splitlines():
        key, _, val = (s.strip() for s in line.partition("="))
        if key == "n_tensors":
            continue
        if key.startswith("meta."):
            meta[key[5:]] = val
        else:
            names.append(key)
    state, off = {}, 8 + mlen
    for name in names:
        t, off = T.tensor_from_bytes(buf, off)
        state[name] = t.data
    if off != len(buf):
        raise FormatError("trailing bytes in checkpoint")
    return state, meta


def load_checkpoint(net: Module, path) -> dict[str, str]:
    state, meta = read_checkpoint(path)
    net.load_state_dict(state)
    return meta
