"""Synthetic bilaterally symmetric brain-like phantoms and their on-disk format.

Each phantom is a stack of nested, mirror-symmetric tissue bands
(BG outside, CSF rim and ventricles, GM ring, WM core). Lesions are planted on
one hemisphere only, so every asymmetric label pixel is a lesion pixel.

Directory layout::

    manifest.txt        key = value lines
    img_00000.pctn      (1, H, W) float32 image
    lbl_00000.pctn      (H, W) float32 label map (integral values 0..3)
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .tensor import FormatError, load_tensor, save_tensor

BG, CSF, GM, WM = 0, 1, 2, 3
CLASS_NAMES = ("BG", "CSF", "GM", "WM")
CLASS_INTENSITY = np.array([0.0, 0.3, 0.6, 0.9])
LESION_SHIFT = -0.25
# every foreground class moves to a different one
FULL_FLIP = {CSF: GM, GM: WM, WM: GM}
MAX_RETRIES = 8


@dataclass(frozen=True)
class LesionSpec:
    center: tuple[int, int]
    radius: float
    flip: dict = field(default_factory=lambda: {WM: GM})
    shift: float = LESION_SHIFT

    def disc(self, H: int, W: int) -> np.ndarray:
        rr, cc = np.mgrid[0:H, 0:W]
        r0, c0 = self.center
        return (rr - r0) ** 2 + (cc - c0) ** 2 <= self.radius**2


@dataclass(frozen=True)
class LesionParams:
    """Random lesion placement: count drawn uniformly in [n_min, n_max]."""

    n_min: int = 0
    n_max: int = 2
    r_min: float = 2.0
    r_max: float = 4.0

    @classmethod
    def parse(cls, text: str) -> "LesionParams":
        """``"n_min:n_max:r_min:r_max"``, or ``"none"``."""
        if text.strip().lower() in ("none", "0", ""):
            return cls(0, 0)
        parts = text.split(":")
        if len(parts) != 4:
            raise ValueError(f"lesion spec {text!r} must look like n_min:n_max:r_min:r_max")
        a, b, c, d = parts
        out = cls(int(a), int(b), float(c), float(d))
        if not 0 <= out.n_min <= out.n_max or not 0 < out.r_min <= out.r_max:
            raise ValueError(f"invalid lesion spec {text!r}")
        return out

    def format(self) -> str:
        return f"{self.n_min}:{self.n_max}:{self.r_min:g}:{self.r_max:g}"


@dataclass
class Phantom:
    image: np.ndarray  # (1, H, W) in [0, 1]
    label: np.ndarray  # (H, W) ints in {0, 1, 2, 3}
    lesion_spec: list[LesionSpec]

    @property
    def lesion_mask(self) -> np.ndarray:
        H, W = self.label.shape
        m = np.zeros((H, W), dtype=bool)
        for les in self.lesion_spec:
            m |= les.disc(H, W)
        return m


def _tissue_label(rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    cy = (H - 1) / 2 + rng.uniform(-2, 2)
    cx = (W - 1) / 2
    a_r = H * rng.uniform(0.40, 0.46)
    a_c = W * rng.uniform(0.36, 0.42)
    amp = rng.uniform(0.0, 0.06)
    lobes = rng.integers(2, 5)
    t_wm = rng.uniform(0.62, 0.70)
    t_gm = t_wm + rng.uniform(0.14, 0.18)
    t_vent = rng.uniform(0.6, 1.0)
    rr, cc = np.mgrid[0:H, 0:W].astype(np.float64)
    dy = rr - cy
    dx = np.abs(cc - cx)  # depends on |dx| only, so exactly mirror-symmetric
    phi = np.arctan2(dx, dy)
    rho = np.sqrt((dy / a_r) ** 2 + (dx / a_c) ** 2) * (1 + amp * np.cos(lobes * phi))
    label = np.full((H, W), BG, dtype=np.int64)
    label[rho < 1.0] = CSF
    label[rho < t_gm] = GM
    label[rho < t_wm] = WM
    # paired ventricles either side of the midline
    vent = ((dy + 0.04 * H) / (0.09 * H)) ** 2 + ((dx - 0.05 * W) / (0.03 * W)) ** 2 < t_vent**2
    label[vent & (rho < t_wm)] = CSF
    return label


def _place_lesions(rng: np.random.Generator, label: np.ndarray, params: LesionParams) -> list[LesionSpec]:
    H, W = label.shape
    n = int(rng.integers(params.n_min, params.n_max + 1))
    if n == 0:
        return []
    side = int(rng.integers(0, 2))  # 0: left columns, 1: right columns
    wm = label == WM
    cx = (W - 1) / 2
    out: list[LesionSpec] = []
    for _ in range(n):
        for _attempt in range(200):
            rad = float(rng.uniform(params.r_min, params.r_max))
            r0 = int(rng.integers(0, H))
            c0 = int(rng.integers(0, W))
            if (c0 < cx) != (side == 0) or abs(c0 - cx) <= rad + 0.5:
                continue
            spec = LesionSpec((r0, c0), rad)
            disc = spec.disc(H, W)
            if disc.any() and wm[disc].all():
                out.append(spec)
                break
    return out


def apply_lesions(image: np.ndarray, label: np.ndarray, lesions) -> tuple[np.ndarray, np.ndarray]:
    image, label = image.copy(), label.copy()
    H, W = label.shape
    for les in lesions:
        disc = les.disc(H, W)
        src = label.copy()
        for frm, to in les.flip.items():
            hit = disc & (src == frm)
            label[hit] = to
            image[0][hit] += les.shift
    return image, label


def generate_phantom(seed: int, H: int = 64, W: int = 64, noise_sigma: float = 0.02,
                     lesion_params: LesionParams | None = None,
                     lesions: list[LesionSpec] | None = None) -> Phantom:
    """Deterministic phantom for ``seed``.

    ``lesions`` places explicit lesions; otherwise ``lesion_params`` draws
    0-2 random WM lesions on one hemisphere (pass ``LesionParams(0, 0)`` for
    none). Noise is i.i.d. per pixel and never touches the labels.
    """
    if H % 32 or W % 32 or H <= 0 or W <= 0:
        raise ValueError(f"phantom size {H}x{W} must be a positive multiple of 32")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    lesion_params = lesion_params if lesion_params is not None else LesionParams()
    for attempt in range(MAX_RETRIES):
        geo_rng, les_rng, noise_rng = (np.random.default_rng(s) for s in
                                       np.random.SeedSequence([int(seed), attempt]).spawn(3))
        label = _tissue_label(geo_rng, H, W)
        if len(np.unique(label)) == 4:
            break
    else:
        raise RuntimeError(f"seed {seed}: could not produce all four classes")
    image = CLASS_INTENSITY[label][None].copy()
    specs = list(lesions) if lesions is not None else _place_lesions(les_rng, label, lesion_params)
    image, label = apply_lesions(image, label, specs)
    if noise_sigma > 0:
        image = image + noise_rng.normal(0.0, noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Phantom(image, label, specs)


def split_indices(n: int, fractions: tuple[float, float, float], seed: int) -> dict[str, np.ndarray]:
    """Seeded shuffle, then contiguous train/val/test blocks of rounded sizes."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_val = min(n_val, n - n_train)
    return {"train": np.sort(perm[:n_train]), "val": np.sort(perm[n_train:n_train + n_val]),
            "test": np.sort(perm[n_train + n_val:])}


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


@dataclass
class DatasetManifest:
    n_samples: int = 20
    height: int = 64
    width: int = 64
    seed: int = 0
    noise_sigma: float = 0.02
    lesions: LesionParams = field(default_factory=LesionParams)
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")

    def to_text(self) -> str:
        rows = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "lesions":
                v = v.format()
            elif f.name == "split":
                v = ",".join(f"{x:g}" for x in v)
            rows.append(f"{f.name} = {v}")
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        kv = parse_key_values(text)
        try:
            return cls(
                n_samples=int(kv["n_samples"]),
                height=int(kv["height"]),
                width=int(kv["width"]),
                seed=int(kv["seed"]),
                noise_sigma=float(kv["noise_sigma"]),
                lesions=LesionParams.parse(kv["lesions"]),
                split=tuple(float(x) for x in kv["split"].split(",")),
            )
        except KeyError as e:
            raise FormatError(f"manifest is missing key {e}") from None


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


@dataclass
class Dataset:
    manifest: DatasetManifest
    images: np.ndarray  # (n, 1, H, W)
    labels: np.ndarray  # (n, H, W) int64
    splits: dict[str, np.ndarray]

    def subset(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.splits[name]
        return self.images[idx], self.labels[idx]

    def __len__(self) -> int:
        return len(self.images)


def make_dataset(manifest: DatasetManifest) -> Dataset:
    m = manifest
    imgs, lbls = [], []
    for i in range(m.n_samples):
        ph = generate_phantom(sample_seed(m.seed, i), m.height, m.width, m.noise_sigma, m.lesions)
        imgs.append(ph.image)
        lbls.append(ph.label)
    return Dataset(m, np.stack(imgs), np.stack(lbls), split_indices(m.n_samples, m.split, m.seed))


def write_dataset(manifest: DatasetManifest, directory, dataset: Dataset | None = None) -> Dataset:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ds = dataset if dataset is not None else make_dataset(manifest)
    (d / "manifest.txt").write_text(manifest.to_text())
    for i in range(len(ds)):
        save_tensor(d / f"img_{i:05d}.pctn", ds.images[i].astype(np.float32))
        save_tensor(d / f"lbl_{i:05d}.pctn", ds.labels[i].astype(np.float32))
    return ds


def read_dataset(directory) -> Dataset:
    d = Path(directory)
    mpath = d / "manifest.txt"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest.txt in {d}")
    m = DatasetManifest.from_text(mpath.read_text())
    imgs, lbls = [], []
    for i in range(m.n_samples):
        imgs.append(load_tensor(d / f"img_{i:05d}.pctn").data)
        lab = load_tensor(d / f"lbl_{i:05d}.pctn").data
        if not np.all((lab >= 0) & (lab <= 3) & (lab == np.round(lab))):
            raise FormatError(f"lbl_{i:05d}.pctn holds non-class values")
        lbls.append(lab.astype(np.int64))
    return Dataset(m, np.stack(imgs), np.stack(lbls), split_indices(m.n_samples, m.split, m.seed))
