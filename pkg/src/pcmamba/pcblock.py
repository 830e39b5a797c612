"""Predictive-corrective block: symmetry prior, density-weighted correction, fusion.

Feature maps are channel-last, ``(H, W, C)`` or batched ``(B, H, W, C)``.
The mirror axis is the vertical midline of the token grid, so column ``c``
pairs with column ``W - 1 - c``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Mlp, Module, init_rng, param
from .ssm import SsmParams, modulated_scan, selective_scan
from .tensor import Tensor

NORM_FLOOR = 1e-8


class VariantKind(enum.Enum):
    FULL_PC = "full"
    CRN_ONLY = "crn-only"
    RANDOM_MASK_PPM = "random-mask"
    PPM_ONLY = "ppm-only"
    CNN_CRN = "cnn-crn"
    PLAIN_E2E = "e2e"

    @classmethod
    def parse(cls, value) -> "VariantKind":
        if isinstance(value, cls):
            return value
        for v in cls:
            if value in (v.value, v.name):
                return v
        raise ValueError(f"invalid variant {value!r}; choose from {[v.value for v in cls]}")


@dataclass(frozen=True)
class PpmConfig:
    theta: float = 0.7
    neighborhood_radius: int = 1
    epsilon: float = 1e-6

    def __post_init__(self):
        if not -1.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [-1, 1]")
        if self.neighborhood_radius < 0:
            raise ValueError("neighborhood_radius must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")


@dataclass(frozen=True)
class CrnConfig:
    kernel_size: int = 3
    dilation: int = 2
    mlp_hidden: int | None = None  # defaults to 2 * k^2

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and >= 1")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")
        if self.mlp_hidden is not None and self.mlp_hidden < 1:
            raise ValueError("mlp_hidden must be >= 1")

    @property
    def hidden(self) -> int:
        return self.mlp_hidden or 2 * self.kernel_size**2

    @property
    def padding(self) -> int:
        return self.dilation * (self.kernel_size - 1) // 2


@dataclass
class FeatureMap:
    """Token grid with an explicit midline; ``values`` is (H, W, C) or (B, H, W, C)."""

    values: Tensor

    def __post_init__(self):
        self.values = T.as_tensor(self.values)
        if self.values.ndim not in (3, 4) or min(self.values.shape) < 1:
            raise ValueError(f"feature map needs (H, W, C) or (B, H, W, C), got {self.values.shape}")

    @property
    def height(self) -> int:
        return self.values.shape[-3]

    @property
    def width(self) -> int:
        return self.values.shape[-2]

    @property
    def channels(self) -> int:
        return self.values.shape[-1]

    @property
    def midline_axis(self) -> float:
        return self.width / 2

    def mirror(self, pos: tuple[int, int]) -> tuple[int, int]:
        return symmetric_index(pos, self.width, self.height)


def symmetric_index(pos: tuple[int, int], width: int, height: int | None = None) -> tuple[int, int]:
    r, c = pos
    if not 0 <= c < width or r < 0 or (height is not None and r >= height):
        raise IndexError(f"position {pos} outside the {height}x{width} grid")
    return r, width - 1 - c


def cosine_similarity(a, b, floor: float = NORM_FLOOR) -> float:
    """Cosine of the angle between two vectors; 0 if either norm is below ``floor``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < floor or nb < floor:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _values(f) -> tuple[Tensor, bool]:
    x = f.values if isinstance(f, FeatureMap) else T.as_tensor(f)
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def _ppm_candidates(x: Tensor, radius: int):
    """Stack T_i for every position: neighbours (centre excluded) then the mirror.

    Returns candidates (K, B, H, W, C) and a constant validity mask (K, H, W).
    Out-of-grid neighbours are invalid; the mirror slot is invalid wherever it
    coincides with the centre or with an in-window neighbour, so T_i stays a set.
    """
    _, H, W, _ = x.shape
    offsets = [(dr, dc) for dr in range(-radius, radius + 1) for dc in range(-radius, radius + 1)
               if (dr, dc) != (0, 0)]
    rows = np.arange(H)[:, None]
    cols = np.arange(W)[None, :]
    cands, valid = [], []
    if offsets:
        xp = T.pad(x, [(0, 0), (radius, radius), (radius, radius), (0, 0)])
        for dr, dc in offsets:
            cands.append(xp[:, radius + dr:radius + dr + H, radius + dc:radius + dc + W, :])
            ok = (rows + dr >= 0) & (rows + dr < H) & (cols + dc >= 0) & (cols + dc < W)
            valid.append(np.broadcast_to(ok, (H, W)))
    cands.append(T.flip(x, axis=2))
    mirror_off = (W - 1 - 2 * cols)
    valid.append(np.broadcast_to((np.abs(mirror_off) > radius) | ((mirror_off != 0) & (radius == 0)),
                                 (H, W)))
    return T.stack(cands, axis=0), np.stack(valid, axis=0)


def ppm_similarities(f, cfg: PpmConfig):
    """Cosine similarity of each token with every member of its comparison set.

    Returns ``(candidates, sims, valid)`` where sims is a Tensor (K, B, H, W).
    """
    x, _ = _values(f)
    cands, valid = _ppm_candidates(x, cfg.neighborhood_radius)
    dots = T.tsum(cands * x, axis=-1)
    nsq_c = T.tsum(cands * cands, axis=-1)
    nsq_x = T.tsum(x * x, axis=-1)
    floor2 = NORM_FLOOR**2
    degenerate = (nsq_c.data < floor2) | (nsq_x.data < floor2)
    safe_c = T.where(nsq_c.data < floor2, np.ones_like(nsq_c.data), nsq_c)
    safe_x = T.where(nsq_x.data < floor2, np.ones_like(nsq_x.data), nsq_x)
    cos = T.clip(dots / T.sqrt(safe_c * safe_x), -1.0, 1.0)
    sims = T.where(degenerate, np.zeros_like(cos.data), cos)
    return cands, sims, valid


def ppm_mask(f, cfg: PpmConfig) -> np.ndarray:
    """Boolean anomaly mask m_{i,j} = [s_{i,j} < theta] over valid pairs, (K, B, H, W)."""
    _, sims, valid = ppm_similarities(f, cfg)
    return (sims.data < cfg.theta) & valid[:, None]


def ppm_forward(f, cfg: PpmConfig, rng: np.random.Generator | None = None) -> Tensor:
    """Aggregate structurally anomalous neighbours and mirror tokens.

    Pairs with similarity below ``theta`` are weighted by ``1 - s`` and
    averaged; tokens with no anomalous pair get a zero vector. Passing ``rng``
    replaces the similarity test by a fair coin per pair (random-mask ablation).
    """
    x, squeeze = _values(f)
    cands, sims, valid = ppm_similarities(x, cfg)
    if rng is None:
        mask = (sims.data < cfg.theta) & valid[:, None]
    else:
        mask = (rng.random(sims.shape) < 0.5) & valid[:, None]
    w = T.mul(mask.astype(sims.dtype), 1.0 - sims)
    num = T.tsum(T.reshape(w, w.shape + (1,)) * cands, axis=0)
    den = T.tsum(w, axis=0) + cfg.epsilon
    z = num / T.reshape(den, den.shape + (1,))
    return T.reshape(z, z.shape[1:]) if squeeze else z


class CrnParams(Module):
    def __init__(self, channels: int, cfg: CrnConfig, *, seed: int, name: str = "crn"):
        k2 = cfg.kernel_size**2
        self.mlp = Mlp(k2 * channels, cfg.hidden, k2, seed=seed, name=name + ".mlp")
        self.out = Linear(channels, channels, seed=seed, name=name + ".out")


def crn_weights(f, cfg: CrnConfig, params: CrnParams):
    """Dilated patches (B, H, W, k^2, C) and their softmax weights (B, H, W, k^2)."""
    x, _ = _values(f)
    k = cfg.kernel_size
    patches = T.extract_patches(x, k, cfg.dilation, cfg.padding)
    flat = T.reshape(patches, patches.shape[:-2] + (k * k * x.shape[-1],))
    beta = T.softmax(params.mlp(flat), axis=-1)
    return patches, beta


def crn_forward(f, cfg: CrnConfig, params: CrnParams) -> Tensor:
    """Content-adaptive weighted average of each dilated patch, then a linear map."""
    x, squeeze = _values(f)
    patches, beta = crn_weights(x, cfg, params)
    pooled = T.tsum(T.reshape(beta, beta.shape + (1,)) * patches, axis=-2)
    z = params.out(pooled)
    return T.reshape(z, z.shape[1:]) if squeeze else z


class FusionMlp(Mlp):
    def __init__(self, channels: int, *, seed: int, name: str = "fuse"):
        super().__init__(2 * channels, 2 * channels, channels, seed=seed, name=name)


def fuse(z_mask, z_density, mlp: FusionMlp) -> Tensor:
    """Pointwise MLP over the channel concatenation [z_mask; z_density]."""
    z_mask, z_density = T.as_tensor(z_mask), T.as_tensor(z_density)
    if z_mask.shape != z_density.shape:
        raise ValueError(f"branch shapes differ: {z_mask.shape} vs {z_density.shape}")
    return mlp(T.concat([z_mask, z_density], axis=-1))


class PCMambaBlock(Module):
    """LayerNorm -> modulated bidirectional scan -> output projection -> residual.

    The modulation factor comes from fusing the PPM and CRN branches; the
    variant decides which branches are live. ``PLAIN_E2E`` skips modulation.
    """

    def __init__(self, channels: int, *, variant=VariantKind.FULL_PC, ppm_cfg: PpmConfig | None = None,
                 crn_cfg: CrnConfig | None = None, state_dim: int = 8, bidirectional: bool = True,
                 seed: int = 0, name: str = "block"):
        self.variant = VariantKind.parse(variant)
        self.ppm_cfg = ppm_cfg or PpmConfig()
        self.crn_cfg = crn_cfg or CrnConfig()
        self.bidirectional = bidirectional
        self.norm = LayerNorm(channels, name=name + ".norm")
        self.ssm = SsmParams(channels, state_dim, seed=seed, name=name + ".ssm")
        v = self.variant
        if v in (VariantKind.FULL_PC, VariantKind.CRN_ONLY, VariantKind.RANDOM_MASK_PPM, VariantKind.PPM_ONLY):
            self.crn = CrnParams(channels, self.crn_cfg, seed=seed, name=name + ".crn")
        if v is VariantKind.CNN_CRN:
            rng = init_rng(seed, name + ".cnn.weight")
            bound = 1.0 / np.sqrt(9 * channels)
            self.cnn_weight = param(rng.uniform(-bound, bound, (channels, channels, 3, 3)), name + ".cnn.weight")
            self.cnn_bias = param(np.zeros(channels), name + ".cnn.bias")
        if v is not VariantKind.PLAIN_E2E:
            self.fuse = FusionMlp(channels, seed=seed, name=name + ".fuse")
        self.out_proj = Linear(channels, channels, seed=seed, name=name + ".out_proj")

    def branches(self, xn: Tensor, rng: np.random.Generator | None = None):
        """(z_mask, z_density) for a normalized (B, H, W, C) map."""
        v = self.variant
        zeros = T.Tensor(np.zeros(xn.shape, dtype=xn.dtype))
        if v in (VariantKind.CRN_ONLY,):
            z_mask = zeros
        elif v is VariantKind.RANDOM_MASK_PPM:
            z_mask = ppm_forward(xn, self.ppm_cfg, rng=rng or np.random.default_rng(0))
        else:
            z_mask = ppm_forward(xn, self.ppm_cfg)
        if v is VariantKind.PPM_ONLY:
            z_density = zeros
        elif v is VariantKind.CNN_CRN:
            z_density = T.conv2d_hwc(xn, self.cnn_weight, 1, 1, self.cnn_bias)
        else:
            z_density = crn_forward(xn, self.crn_cfg, self.crn)
        return z_mask, z_density

    def modulation(self, xn: Tensor, rng: np.random.Generator | None = None) -> Tensor | None:
        if self.variant is VariantKind.PLAIN_E2E:
            return None
        z_mask, z_density = self.branches(xn, rng)
        return fuse(z_mask, z_density, self.fuse)

    def scan_tokens(self, u: Tensor, z: Tensor | None) -> Tensor:
        """Row-major scan (plus reversed pass when bidirectional) over (B, L, C)."""

        def run(uu, zz):
            if zz is None:
                return selective_scan(uu, self.ssm)[0]
            return modulated_scan(uu, zz, self.ssm)

        y = run(u, z)
        if self.bidirectional:
            yb = run(T.flip(u, 1), None if z is None else T.flip(z, 1))
            y = (y + T.flip(yb, 1)) * 0.5
        return y

    def __call__(self, f, rng: np.random.Generator | None = None, z_override=None) -> Tensor:
        x, squeeze = _values(f)
        B, H, W, C = x.shape
        xn = self.norm(x)
        if z_override is None:
            z = self.modulation(xn, rng)
        elif isinstance(z_override, str) and z_override == "ones":
            z = T.Tensor(np.ones(xn.shape, dtype=xn.dtype))
        else:
            z = T.as_tensor(z_override)
        u = T.reshape(xn, (B, H * W, C))
        zt = None if z is None else T.reshape(z, (B, H * W, C))
        y = T.reshape(self.scan_tokens(u, zt), (B, H, W, C))
        out = x + self.out_proj(y)
        return T.reshape(out, out.shape[1:]) if squeeze else out


def pcmamba_block_forward(f, block: PCMambaBlock, rng=None):
    """Functional form returning a :class:`FeatureMap`."""
    return FeatureMap(block(f, rng=rng))
