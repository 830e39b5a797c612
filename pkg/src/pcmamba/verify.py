"""Empirical probes: gradient and scan oracles, PPM localization, convergence,
smoothness, bias-variance and data efficiency.

Every probe returns a :class:`ProbeReport` holding the raw per-seed values,
aggregates, the thresholds it was judged against and its runtime. Reports are
written as JSON under a ``reports/`` directory and rendered by
:func:`render_summary`.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from decimal import Decimal, getcontext
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import (FULL_FLIP, DatasetManifest, LesionParams, LesionSpec, generate_phantom,
                   make_dataset)
from .network import NetworkConfig, PatchEmbed, build_variant
from .nn import LayerNorm, Linear, Mlp, Module
from .pcblock import (CrnConfig, CrnParams, FusionMlp, PCMambaBlock, PpmConfig, VariantKind,
                      crn_forward, fuse, ppm_forward)
from .ssm import SsmParams, modulated_scan, scan_discretized, selective_scan, zoh_discretize
from .tensor import Tensor
from .train import TrainConfig, seg_loss, train_loop

log = logging.getLogger(__name__)

CORRECTIVE_KEYS = (".crn.", ".fuse.", ".cnn_")


@dataclass
class ProbeReport:
    name: str
    seeds: list = field(default_factory=list)
    measurements: list = field(default_factory=list)  # one dict per seed or case
    aggregate: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    passed: bool | None = None
    soft: bool = False  # a soft probe only warns on failure
    runtime: float = 0.0
    notes: list = field(default_factory=list)

    def verdict(self) -> str:
        if self.passed is None:
            return "n/a"
        if self.passed:
            return "PASS"
        return "WARN" if self.soft else "FAIL"

    def to_text(self) -> str:
        return json.dumps(_jsonable(asdict(self)), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ProbeReport":
        return cls(**json.loads(text))

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        path = d / f"{self.name}.json"
        path.write_text(self.to_text())
        return path


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if math.isfinite(f) else str(f)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def load_reports(directory) -> list[ProbeReport]:
    return [ProbeReport.from_text(p.read_text()) for p in sorted(Path(directory).glob("*.json"))]


def render_summary(reports: list[ProbeReport]) -> str:
    """Fixed-width table: probe, verdict, seeds, runtime, key aggregates."""
    lines = [f"{'probe':<26} {'verdict':<7} {'seeds':>5} {'runtime_s':>9}  aggregate"]
    for r in reports:
        agg = ", ".join(f"{k}={_fmt(v)}" for k, v in r.aggregate.items() if not isinstance(v, (list, dict)))
        lines.append(f"{r.name:<26} {r.verdict():<7} {len(r.seeds):>5} {r.runtime:>9.1f}  {agg}")
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def majority(flags: list[bool], need: int) -> bool:
    return sum(bool(f) for f in flags) >= need


# -- gradient checks ----------------------------------------------------------------
def _scalar(fn) -> float:
    out = fn()
    v = float(np.asarray(out.data, dtype=np.float64).sum())
    if not math.isfinite(v):
        raise FloatingPointError("non-finite objective in gradient check")
    return v


def grad_check(fn: Callable[[], Tensor], params: dict[str, Tensor], *, eps: float = 1e-5,
               tol: float = 1e-5, max_entries: int = 16, floor: float = 1e-6, seed: int = 0,
               name: str = "grad_check") -> ProbeReport:
    """Compare tape gradients with central differences.

    ``fn`` rebuilds a scalar objective from the tensors in ``params``. Tape
    gradients are taken in the tensors' own precision; the differences are
    always evaluated in 64-bit, so 32-bit tape gradients are checked against
    a 64-bit reference. Per group the error is
    ``max|a - n| / max(max|a|, max|n|, floor)`` over up to ``max_entries``
    sampled entries.
    """
    t0 = time.perf_counter()
    for p in params.values():
        p.grad = None
    with T.Tape() as tape:
        loss = fn()
    if loss.data.size != 1:
        raise ValueError("grad_check needs a scalar objective")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite objective in gradient check")
    tape.backward(loss)
    tape.reset()
    analytic = {k: (np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64))
                for k, p in params.items()}
    for a in analytic.values():
        if not np.isfinite(a).all():
            raise FloatingPointError("non-finite tape gradient")

    saved = {k: p.data for k, p in params.items()}
    rng = np.random.default_rng(seed)
    rows = []
    try:
        with T.precision("float64"):
            for p in params.values():
                p.data = p.data.astype(np.float64)
            for k, p in params.items():
                n_el = p.data.size
                idx = np.arange(n_el) if n_el <= max_entries else rng.choice(n_el, max_entries, replace=False)
                a = analytic[k].ravel()[idx]
                num = np.empty(len(idx))
                flat = p.data.reshape(-1)
                for j, i in enumerate(idx):
                    old = flat[i]
                    flat[i] = old + eps
                    fp = _scalar(fn)
                    flat[i] = old - eps
                    fm = _scalar(fn)
                    flat[i] = old
                    num[j] = (fp - fm) / (2 * eps)
                scale = max(np.abs(a).max(initial=0.0), np.abs(num).max(initial=0.0), floor)
                err = float(np.abs(a - num).max(initial=0.0) / scale)
                rows.append({"group": k, "entries": len(idx), "rel_err": err, "scale": float(scale)})
    finally:
        for k, p in params.items():
            p.data = saved[k]
    worst = max((r["rel_err"] for r in rows), default=0.0)
    return ProbeReport(name, [seed], rows, {"max_rel_err": worst, "groups": len(rows)},
                       {"rel_err": tol}, worst <= tol, runtime=time.perf_counter() - t0)


def _readout(out: Tensor, seed: int) -> Tensor:
    """Generic scalar readout <out, R> with a fixed random R."""
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return T.tsum(out * r.astype(out.dtype))


def _leaf(values: np.ndarray) -> Tensor:
    return Tensor(values, requires_grad=True)


def _module_params(m: Module, prefix: str = "") -> dict[str, Tensor]:
    return {prefix + k: p for k, p in m.named_parameters()}


def _perturb(m: Module, seed: int, scale: float = 0.3) -> None:
    """Move every parameter off its structured initial value."""
    rng = np.random.default_rng(seed)
    for p in m.parameters():
        p.data = (p.data + scale * rng.standard_normal(p.shape)).astype(p.dtype)


def gradient_cases(seed: int = 0) -> list[tuple[str, Callable[[], Tensor], dict[str, Tensor]]]:
    """Small instances of every learnable operation plus a one-block network.

    Built in the current default precision.
    """
    rng = np.random.default_rng(seed)
    cases = []

    x = _leaf(rng.standard_normal((3, 5)))
    lin = Linear(5, 4, seed=seed, name="lin")
    cases.append(("linear", lambda: _readout(lin(x), 1), {"x": x, **_module_params(lin)}))

    xl = _leaf(rng.standard_normal((2, 3, 6)))
    ln = LayerNorm(6, name="ln")
    _perturb(ln, seed)
    cases.append(("layer_norm", lambda: _readout(ln(xl), 2), {"x": xl, **_module_params(ln)}))

    xm = _leaf(rng.standard_normal((4, 3)))
    mlp = Mlp(3, 5, 2, seed=seed, name="mlp")
    cases.append(("mlp_gelu", lambda: _readout(mlp(xm), 3), {"x": xm, **_module_params(mlp)}))

    xs = _leaf(rng.standard_normal((3, 4)))
    cases.append(("softmax", lambda: _readout(T.softmax(xs, axis=-1), 4), {"x": xs}))
    cases.append(("log_softmax", lambda: _readout(T.log_softmax(xs, axis=0), 5), {"x": xs}))

    xc = _leaf(rng.standard_normal((2, 6, 6)))
    kc = _leaf(0.3 * rng.standard_normal((3, 2, 3, 3)))
    bc = _leaf(rng.standard_normal(3))
    cases.append(("conv2d_dilated", lambda: _readout(T.conv2d(xc, kc, 2, 2, bc), 6),
                  {"x": xc, "kernel": kc, "bias": bc}))

    a_log = _leaf(np.log(np.arange(1.0, 5.0)))
    bz = _leaf(rng.standard_normal((3, 4)))
    dz = _leaf(rng.uniform(0.1, 1.0, 3))

    def zoh():
        A = -T.exp(a_log)
        a_bar, b_bar = zoh_discretize(A, bz, dz)
        return _readout(a_bar, 7) + _readout(b_bar, 8)

    cases.append(("zoh_discretize", zoh, {"a_log": a_log, "B": bz, "delta": dz}))

    ssm = SsmParams(3, 4, seed=seed, name="ssm")
    _perturb(ssm, seed + 1, 0.2)
    us = _leaf(rng.standard_normal((6, 3)))
    zs = _leaf(rng.standard_normal((6, 3)))
    cases.append(("selective_scan", lambda: _readout(selective_scan(us, ssm)[0], 9),
                  {"u": us, **_module_params(ssm)}))
    cases.append(("modulated_scan", lambda: _readout(modulated_scan(us, zs, ssm), 10),
                  {"u": us, "z": zs, **_module_params(ssm)}))

    fmap = _leaf(rng.standard_normal((4, 4, 3)))
    # well-separated similarities keep the threshold away from every pair
    ppm_cfg = PpmConfig(theta=0.0, neighborhood_radius=1)
    cases.append(("ppm_forward", lambda: _readout(ppm_forward(fmap, ppm_cfg), 11), {"x": fmap}))

    crn_cfg = CrnConfig()
    crn = CrnParams(3, crn_cfg, seed=seed, name="crn")
    cases.append(("crn_forward", lambda: _readout(crn_forward(fmap, crn_cfg, crn), 12),
                  {"x": fmap, **_module_params(crn)}))

    zm = _leaf(rng.standard_normal((4, 4, 3)))
    zd = _leaf(rng.standard_normal((4, 4, 3)))
    fm = FusionMlp(3, seed=seed, name="fuse")
    cases.append(("fuse", lambda: _readout(fuse(zm, zd, fm), 13),
                  {"z_mask": zm, "z_density": zd, **_module_params(fm)}))

    for v in VariantKind:
        blk = PCMambaBlock(4, variant=v, ppm_cfg=PpmConfig(theta=0.0), state_dim=3, seed=seed,
                           name=f"block_{v.name.lower()}")
        _perturb(blk, seed + 2, 0.1)
        xb = _leaf(rng.standard_normal((4, 4, 4)))
        # random-mask draws are replayed from a fixed seed on every evaluation
        cases.append((f"block_{v.value}",
                      (lambda blk=blk, xb=xb, k=v: _readout(blk(xb, rng=np.random.default_rng(5)), 14)),
                      {"x": xb, **_module_params(blk)}))

    emb = PatchEmbed(4, 4, seed=seed)
    img = _leaf(rng.uniform(0, 1, (1, 1, 8, 8)))
    cases.append(("patch_embed", lambda: _readout(emb(img), 15), {"image": img, **_module_params(emb)}))

    net = build_variant(one_block_config(seed))
    _perturb(net, seed + 3, 0.05)
    img32 = rng.uniform(0, 1, (1, 32, 32))
    lab32 = rng.integers(0, 4, (32, 32))
    cases.append(("net_1block_32x32", lambda: seg_loss(net(img32), lab32), _module_params(net)))
    return cases


def one_block_config(seed: int = 0) -> NetworkConfig:
    """The smallest end-to-end network: one block, 32x32 input."""
    return NetworkConfig(input_size=(32, 32), embed_dim=4, stage_depths=(1, 0, 0, 0), bottleneck_depth=0,
                         decoder_depths=(0, 0, 0), state_dim=3, ppm=PpmConfig(theta=0.0), seed=seed)


def gradient_suite(profile: str = "float64", seed: int = 0, max_entries: int = 8) -> ProbeReport:
    """Run every gradient case in the given build profile.

    The tolerance is 1e-5 in the 64-bit profile and 1e-3 in the 32-bit one.
    """
    t0 = time.perf_counter()
    tol = 1e-5 if profile == "float64" else 1e-3
    eps = 1e-5  # near the cube root of 64-bit machine epsilon
    rows = []
    with T.precision(profile):
        for name, fn, params in gradient_cases(seed):
            r = grad_check(fn, params, eps=eps, tol=tol, max_entries=max_entries, seed=seed, name=name)
            rows.append({"case": name, "max_rel_err": r.aggregate["max_rel_err"], "passed": r.passed,
                         "groups": r.measurements})
    worst = max(r["max_rel_err"] for r in rows)
    return ProbeReport(f"grad_suite_{profile}", [seed], rows,
                       {"max_rel_err": worst, "cases": len(rows),
                        "failed": sum(not r["passed"] for r in rows)},
                       {"rel_err": tol}, all(r["passed"] for r in rows),
                       runtime=time.perf_counter() - t0)


# -- scan oracle ------------------------------------------------------------------
def _softplus(v: float) -> float:
    return max(v, 0.0) + math.log1p(math.exp(-abs(v)))


def naive_scan(u, ssm_weights: dict, z=None) -> list[list[float]]:
    """Token-by-token reference recurrence in plain Python floats.

    ``u``: L rows of C values; ``ssm_weights`` maps parameter names to nested
    lists. Rebuilds delta, B and C from the raw weights on every step.
    """
    a_log = ssm_weights["a_log"]
    wd, bd = ssm_weights["delta_proj.weight"], ssm_weights["delta_proj.bias"]
    wb, bb = ssm_weights["b_proj.weight"], ssm_weights["b_proj.bias"]
    wc, bc = ssm_weights["c_proj.weight"], ssm_weights["c_proj.bias"]
    dvec = ssm_weights["d"]
    N, C = len(a_log), len(dvec)
    A = [-math.exp(a) for a in a_log]
    state = [[0.0] * N for _ in range(C)]
    out = []
    for t, ut in enumerate(u):
        pre = bd[0] + math.fsum(ut[c] * wd[c][0] for c in range(C))
        delta = _softplus(pre)
        Bt = [bb[n] + math.fsum(ut[c] * wb[c][n] for c in range(C)) for n in range(N)]
        Ct = [bc[n] + math.fsum(ut[c] * wc[c][n] for c in range(C)) for n in range(N)]
        abar = [math.exp(delta * A[n]) for n in range(N)]
        bbar = [math.expm1(delta * A[n]) / A[n] * Bt[n] for n in range(N)]
        row = []
        for c in range(C):
            xc = state[c]
            for n in range(N):
                xc[n] = abar[n] * xc[n] + bbar[n] * ut[c]
            zc = 1.0 if z is None else z[t][c]
            row.append(math.fsum(Ct[n] * zc * xc[n] for n in range(N)) + dvec[c] * ut[c])
        out.append(row)
    return out


def _rel_err(y, ref) -> float:
    y, ref = np.asarray(y, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    return float(np.abs(y - ref).max() / max(np.abs(ref).max(), 1e-300))


def scan_oracle_suite(sizes=(1, 2, 8, 64, 1024), seeds=range(20), channels: int = 2, state_dim: int = 4,
                      tol: float = 1e-5, profile: str = "float64") -> ProbeReport:
    """Production scans versus :func:`naive_scan` over a grid of lengths and seeds.

    Also checks that z = 1 reproduces the plain scan bit for bit and that a
    zero transition leaves the memoryless readout ``c.b_bar*u + d*u``.
    """
    t0 = time.perf_counter()
    rows = []
    seeds = list(seeds)
    with T.precision(profile):
        for L in sizes:
            for s in seeds:
                rng = np.random.default_rng([s, L])
                ssm = SsmParams(channels, state_dim, seed=s, name="ssm")
                _perturb(ssm, s, 0.3)
                u = rng.standard_normal((L, channels))
                z = rng.standard_normal((L, channels))
                w = {k: p.data.astype(np.float64).tolist() for k, p in ssm.named_parameters()}
                ref_plain = naive_scan(u.tolist(), w)
                ref_mod = naive_scan(u.tolist(), w, z.tolist())
                y_plain = selective_scan(u, ssm)[0].data
                y_mod = modulated_scan(u, z, ssm).data
                y_one = modulated_scan(u, np.ones_like(u), ssm).data
                # memoryless identity with a_bar forced to zero
                ub = T.Tensor(u[None])
                delta, b, c = ssm.project(ub)
                _, b_bar = zoh_discretize(ssm.A, b, delta)
                y0 = scan_discretized(ub, np.zeros(b_bar.shape), b_bar, c, ssm.d).data[0]
                ref0 = np.einsum("ln,ln->l", c.data[0], b_bar.data[0])[:, None] * u + ssm.d.data * u
                rows.append({"L": L, "seed": s,
                             "rel_err_plain": _rel_err(y_plain, ref_plain),
                             "rel_err_modulated": _rel_err(y_mod, ref_mod),
                             "z_one_max_abs_diff": float(np.abs(y_one - y_plain).max()),
                             "memoryless_rel_err": _rel_err(y0, ref0)})
    worst = max(max(r["rel_err_plain"], r["rel_err_modulated"]) for r in rows)
    z1 = max(r["z_one_max_abs_diff"] for r in rows)
    mem = max(r["memoryless_rel_err"] for r in rows)
    runtime = time.perf_counter() - t0
    passed = worst <= tol and z1 == 0.0 and mem <= 1e-12 and runtime < 60.0
    return ProbeReport("scan_oracle", seeds, rows,
                       {"max_rel_err": worst, "z_one_max_abs_diff": z1, "memoryless_max_rel_err": mem,
                        "sizes": list(sizes)},
                       {"rel_err": tol, "z_one_abs_diff": 0.0, "memoryless_rel_err": 1e-12,
                        "runtime_s": 60.0},
                       passed, runtime=runtime)


# -- ZOH limits ------------------------------------------------------------------------
def zoh_reference(a: float, b: float, delta: float, digits: int = 50) -> tuple[float, float]:
    """(A_bar, B_bar) for scalars evaluated with ``digits`` decimal digits."""
    getcontext().prec = digits
    A, B, D = Decimal(a), Decimal(b), Decimal(delta)
    e = (D * A).exp()
    return float(e), float((e - 1) / A * B)


def zoh_limit_probe() -> ProbeReport:
    """Tiny-step limit and accuracy on both sides of the series cutoff."""
    t0 = time.perf_counter()
    with T.precision("float64"):
        A = -np.array([0.5, 1.0, 2.0, 4.0])
        B = np.array([1.0, -2.0, 0.5, 3.0])
        a_bar, b_bar = zoh_discretize(A, B, np.array(1e-12))
        rows = [{"case": "delta=1e-12", "max_abs_abar_minus_1": float(np.abs(a_bar - 1).max()),
                 "max_abs_bbar": float(np.abs(b_bar).max())}]
        worst = 0.0
        for dA in (1e-4 * (1 - 1e-9), 1e-4, 1e-4 * (1 + 1e-9), 5e-5, 2e-4):
            for a in (-1.0, -3.0, -0.25):
                delta = dA / abs(a)
                ab, bb = zoh_discretize(np.array([a]), np.array([1.3]), np.array(delta))
                ra, rb = zoh_reference(a, 1.3, delta)
                err = max(abs(ab[0] - ra) / abs(ra), abs(bb[0] - rb) / abs(rb))
                worst = max(worst, err)
                rows.append({"case": f"|dA|={dA:.10g}, A={a}", "rel_err": float(err)})
    tiny_ok = rows[0]["max_abs_abar_minus_1"] <= 1e-9 and rows[0]["max_abs_bbar"] <= 1e-9
    return ProbeReport("zoh_limits", [0], rows, {"cutoff_max_rel_err": worst, **rows[0]},
                       {"tiny_step": 1e-9, "cutoff_rel_err": 1e-6}, tiny_ok and worst <= 1e-6,
                       runtime=time.perf_counter() - t0)


# -- PPM localization ----------------------------------------------------------------
def ppm_oracle(x: np.ndarray, theta: float, radius: int, epsilon: float) -> np.ndarray:
    """Per-position brute-force aggregation over the comparison set.

    ``x``: (H, W, C). The comparison set of (r, c) is every in-grid neighbour
    within ``radius`` (centre excluded) plus the mirror (r, W-1-c), as a set.
    """
    H, W, C = x.shape
    out = np.zeros_like(x, dtype=np.float64)

    def cos(a, b):
        na = math.sqrt(math.fsum(v * v for v in a))
        nb = math.sqrt(math.fsum(v * v for v in b))
        if na < 1e-8 or nb < 1e-8:
            return 0.0
        return min(1.0, max(-1.0, math.fsum(p * q for p, q in zip(a, b)) / (na * nb)))

    for r in range(H):
        for c in range(W):
            members = {(r + dr, c + dc) for dr in range(-radius, radius + 1) for dc in range(-radius, radius + 1)
                       if 0 <= r + dr < H and 0 <= c + dc < W}
            members.add((r, W - 1 - c))
            members.discard((r, c))
            xi = x[r, c].tolist()
            num = np.zeros(C)
            den = 0.0
            for (rr, cc) in sorted(members):
                xj = x[rr, cc].tolist()
                s = cos(xi, xj)
                if s < theta:
                    num += (1 - s) * x[rr, cc]
                    den += 1 - s
            out[r, c] = num / (den + epsilon)
    return out


def token_footprint(mask: np.ndarray, patch: int) -> set[tuple[int, int]]:
    rr, cc = np.nonzero(mask)
    return {(int(r) // patch, int(c) // patch) for r, c in zip(rr, cc)}


def ppm_localization_probe(seeds=(0, 1, 2), patches=(4, 8, 16, 32), size: int = 64, dim: int = 16,
                           theta: float = 1 - 1e-6) -> ProbeReport:
    """Symmetry null and lesion localization of the mirror-only PPM.

    Features are patch embeddings (midline-canonical flattening plus
    LayerNorm) of noise-free phantoms, in 64-bit. The largest patch size gives
    the coarsest token grid the network ever feeds to a PPM.
    """
    t0 = time.perf_counter()
    rows = []
    cfg = PpmConfig(theta=theta, neighborhood_radius=0)
    with T.precision("float64"):
        for s in seeds:
            clean = generate_phantom(s, size, size, noise_sigma=0.0, lesion_params=LesionParams(0, 0))
            sick = generate_phantom(s, size, size, noise_sigma=0.0, lesion_params=LesionParams(1, 1, 3, 4))
            if not sick.lesion_spec:
                # random placement found no room; plant a fixed disc instead
                sick = generate_phantom(s, size, size, noise_sigma=0.0,
                                        lesions=[LesionSpec((20, 12), 3, FULL_FLIP)])
            changed = np.abs(sick.image[0] - clean.image[0]) > 0
            for p in patches:
                emb = PatchEmbed(p, dim, seed=s)
                f0 = emb(T.Tensor(clean.image[None].astype(np.float64))).data[0]
                f1 = emb(T.Tensor(sick.image[None].astype(np.float64))).data[0]
                z0 = ppm_forward(f0, cfg).data
                z1 = ppm_forward(f1, cfg).data
                oracle = ppm_oracle(f1, cfg.theta, 0, cfg.epsilon)
                active = {tuple(map(int, ij)) for ij in np.argwhere(np.linalg.norm(z1, axis=-1) > 0)}
                foot = token_footprint(changed, p)
                Wt = f1.shape[1]
                mirror = {(r, Wt - 1 - c) for r, c in foot}
                rows.append({"seed": s, "patch": p, "grid": list(f1.shape[:2]),
                             "null_max_abs": float(np.abs(z0).max()),
                             "footprint": sorted(foot), "active": sorted(active),
                             "covered": (foot | mirror) <= active,
                             "oracle_max_abs_diff": float(np.abs(z1 - oracle).max())})
    null = max(r["null_max_abs"] for r in rows)
    odiff = max(r["oracle_max_abs_diff"] for r in rows)
    covered = all(r["covered"] for r in rows)
    return ProbeReport("ppm_localization", list(seeds), rows,
                       {"null_max_abs": null, "all_covered": covered, "oracle_max_abs_diff": odiff,
                        "theta": theta},
                       {"null_max_abs": 0.0, "oracle_abs_diff": 1e-12},
                       null == 0.0 and covered and odiff <= 1e-12, runtime=time.perf_counter() - t0)


def _wiring_net(variant, seed: int):
    cfg = NetworkConfig(input_size=(32, 32), embed_dim=4, stage_depths=(1, 1, 0, 0), bottleneck_depth=0,
                        decoder_depths=(0, 0, 1), state_dim=3, variant=variant, seed=seed)
    net = build_variant(cfg)
    _perturb(net, seed + 1, 0.1)
    return net


def _net_grads(net, image, labels) -> dict[str, np.ndarray]:
    net.zero_grad()
    with T.Tape() as tape:
        loss = seg_loss(net(image), labels)
    tape.backward(loss)
    return {k: (np.zeros(p.shape) if p.grad is None else p.grad) for k, p in net.named_parameters()}


def ablation_wiring_probe(seeds=(0, 1, 2)) -> ProbeReport:
    """Gradient and output contracts of the ablation variants.

    PpmOnly must give exactly zero gradient to every CRN weight; CrnOnly must
    give exactly zero gradient to the fusion weights reading the PPM half of
    the concatenation; forcing z to ones must reproduce the modulation-free
    block bit for bit.
    """
    t0 = time.perf_counter()
    rows = []
    for s in seeds:
        rng = np.random.default_rng(s)
        ph = generate_phantom(s, 32, 32)
        image = T.Tensor(ph.image[None])
        labels = ph.label[None]

        g = _net_grads(_wiring_net(VariantKind.PPM_ONLY, s), image, labels)
        crn = [k for k in g if ".crn." in k]
        crn_max = max(float(np.abs(g[k]).max()) for k in crn)
        live = max(float(np.abs(g[k]).max()) for k in g if ".fuse." in k)

        net = _wiring_net(VariantKind.CRN_ONLY, s)
        g = _net_grads(net, image, labels)
        ppm_max, fuse_live = 0.0, 0.0
        for k, v in g.items():
            if k.endswith(".fuse.fc1.weight"):
                half = v.shape[0] // 2
                ppm_max = max(ppm_max, float(np.abs(v[:half]).max()))
                fuse_live = max(fuse_live, float(np.abs(v[half:]).max()))

        x = rng.standard_normal((8, 8, 8)).astype(np.float32)
        full = PCMambaBlock(8, seed=s, name="blk")
        _perturb(full, s + 3, 0.2)
        plain = PCMambaBlock(8, variant=VariantKind.PLAIN_E2E, seed=s, name="blk")
        plain.load_state_dict({k: v for k, v in full.state_dict().items() if k in dict(plain.named_parameters())})
        ones_diff = float(np.abs(full(x, z_override="ones").data - plain(x).data).max())

        rows.append({"seed": s, "ppm_only_crn_grad_max": crn_max, "ppm_only_fuse_grad_max": live,
                     "n_crn_groups": len(crn), "crn_only_ppm_path_grad_max": ppm_max,
                     "crn_only_crn_path_grad_max": fuse_live, "ones_vs_plain_max_abs": ones_diff})
    ok = all(r["ppm_only_crn_grad_max"] == 0.0 and r["crn_only_ppm_path_grad_max"] == 0.0
             and r["ones_vs_plain_max_abs"] == 0.0 and r["ppm_only_fuse_grad_max"] > 0
             and r["crn_only_crn_path_grad_max"] > 0 for r in rows)
    return ProbeReport("ablation_wiring", list(seeds), rows,
                       {k: max(r[k] for r in rows) for k in ("ppm_only_crn_grad_max", "crn_only_ppm_path_grad_max",
                                                             "ones_vs_plain_max_abs")},
                       {"ppm_only_crn_grad_max": 0.0, "crn_only_ppm_path_grad_max": 0.0,
                        "ones_vs_plain_max_abs": 0.0},
                       ok, runtime=time.perf_counter() - t0)


def brute_boundary(mask: np.ndarray) -> list[tuple[int, int]]:
    """Foreground pixels with a background or out-of-image 8-neighbour, by explicit loops."""
    H, W = mask.shape
    out = []
    for r in range(H):
        for c in range(W):
            if not mask[r, c]:
                continue
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    if not (0 <= rr < H and 0 <= cc < W) or not mask[rr, cc]:
                        break
                else:
                    continue
                out.append((r, c))
                break
    return out


def brute_metrics(p: np.ndarray, g: np.ndarray) -> dict:
    """Dice, IoU and the pairwise-distance HD95/ASD, counted pixel by pixel."""
    inter = union = sp = sg = 0
    for a, b in zip(p.ravel().tolist(), g.ravel().tolist()):
        inter += a and b
        union += a or b
        sp += a
        sg += b
    out = {"dice": 2 * inter / (sp + sg) if sp + sg else 1.0, "iou": inter / union if union else 1.0}
    if sp and sg:
        bp, bg = brute_boundary(p), brute_boundary(g)
        d = [min(math.dist(x, y) for y in bg) for x in bp] + [min(math.dist(x, y) for y in bp) for x in bg]
        out["hd95"] = float(np.percentile(d, 95))
        out["asd"] = math.fsum(d) / len(d)
    return out


def metrics_oracle_probe(n_pairs: int = 200, seed: int = 0, max_size: int = 32) -> ProbeReport:
    """Production metrics against :func:`brute_metrics` on random mask pairs."""
    from .metrics import boundary_metrics, overlap_metrics

    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst_overlap, worst_dist, n_dist = 0.0, 0.0, 0
    for _ in range(n_pairs):
        H, W = (int(v) for v in rng.integers(1, max_size + 1, 2))
        p = rng.random((H, W)) < rng.uniform(0.05, 0.7)
        g = rng.random((H, W)) < rng.uniform(0.05, 0.7)
        ref = brute_metrics(p, g)
        dice, iou, *_ = overlap_metrics(p, g)
        worst_overlap = max(worst_overlap, abs(dice - ref["dice"]), abs(iou - ref["iou"]))
        if "hd95" in ref:
            hd, asd = boundary_metrics(p, g)
            worst_dist = max(worst_dist, abs(hd - ref["hd95"]), abs(asd - ref["asd"]))
            n_dist += 1
    half = np.zeros((4, 4), bool)
    half[:, :2] = True
    hd_dice, hd_iou, *_ = overlap_metrics(half, np.ones((4, 4), bool))
    hand = abs(hd_dice - 2 / 3) <= 1e-15 and abs(hd_iou - 0.5) <= 1e-15
    return ProbeReport("metrics_oracle", [seed], [{"pairs": n_pairs, "pairs_with_distances": n_dist,
                                                   "hand_dice": hd_dice, "hand_iou": hd_iou}],
                       {"overlap_max_abs_diff": worst_overlap, "distance_max_abs_diff": worst_dist},
                       {"overlap_max_abs_diff": 0.0, "distance_max_abs_diff": 1e-9, "hand_case": "2/3, 1/2"},
                       worst_overlap == 0.0 and worst_dist <= 1e-9 and hand, runtime=time.perf_counter() - t0)


# -- experiments ---------------------------------------------------------------------------
@dataclass
class ExperimentScale:
    """Dataset and model sizes shared by the training-based probes."""

    n_train: int = 200
    n_val: int = 40
    size: int = 64
    embed_dim: int = 32
    depths: tuple = (2, 2, 2, 2)
    bottleneck: int = 2
    decoder: tuple = (2, 2, 2)

    def net(self, variant, seed: int) -> NetworkConfig:
        return NetworkConfig(input_size=(self.size, self.size), embed_dim=self.embed_dim,
                             stage_depths=self.depths, bottleneck_depth=self.bottleneck,
                             decoder_depths=self.decoder, variant=variant, seed=seed)

    def dataset(self, seed: int):
        n = self.n_train + self.n_val
        return make_dataset(DatasetManifest(n_samples=n, height=self.size, width=self.size, seed=seed,
                                            split=(self.n_train / n, self.n_val / n, 0.0)))


def epochs_to_threshold(mean_dice: list[float], threshold: float, budget: int) -> int:
    """1-based first epoch reaching ``threshold``; ``budget + 1`` if none did."""
    for i, d in enumerate(mean_dice[:budget]):
        if d >= threshold:
            return i + 1
    return budget + 1


def convergence_experiment(variants=(VariantKind.FULL_PC, VariantKind.PLAIN_E2E), seeds=(0, 1, 2),
                           scale: ExperimentScale | None = None, cfg: TrainConfig | None = None,
                           dice_threshold: float = 0.90, max_epochs_full: int = 5) -> ProbeReport:
    """Epochs until mean validation Dice first reaches ``dice_threshold``.

    ``cfg.epochs`` is the budget; training stops at the threshold. FullPC and
    PlainE2E share data and initial trunk weights per seed.
    """
    t0 = time.perf_counter()
    scale = scale or ExperimentScale()
    cfg = cfg or TrainConfig(lr0=1e-3, epochs=5, batch_size=4)
    variants = [VariantKind.parse(v) for v in variants]
    rows = []
    for s in seeds:
        ds = scale.dataset(s)
        row = {"seed": s}
        for v in variants:
            net = build_variant(scale.net(v, s))
            run_cfg = TrainConfig(**{**asdict(cfg), "seed": s, "stop_at_dice": dice_threshold})
            h = train_loop(net, ds, run_cfg)
            row[v.value] = {"epochs_to_threshold": epochs_to_threshold(h.mean_val_dice, dice_threshold, cfg.epochs),
                            "mean_val_dice": h.mean_val_dice, "seconds": float(sum(h.seconds)),
                            "aborted": h.aborted}
            log.info("convergence seed %d %s: %s", s, v.value, row[v.value]["epochs_to_threshold"])
        rows.append(row)
    agg: dict = {"budget": cfg.epochs, "lr0": cfg.lr0}
    passed = None
    full, e2e = VariantKind.FULL_PC.value, VariantKind.PLAIN_E2E.value
    if all(full in r and e2e in r for r in rows):
        wins = [r[full]["epochs_to_threshold"] <= max_epochs_full
                and r[full]["epochs_to_threshold"] <= r[e2e]["epochs_to_threshold"] for r in rows]
        agg["ratios_full_to_e2e"] = [r[full]["epochs_to_threshold"] / r[e2e]["epochs_to_threshold"] for r in rows]
        agg["seeds_won"] = sum(wins)
        passed = majority(wins, math.ceil(2 * len(rows) / 3))
    return ProbeReport("convergence", list(seeds), rows, agg,
                       {"dice": dice_threshold, "max_epochs_full": max_epochs_full,
                        "seed_majority": f"{math.ceil(2 * len(rows) / 3)}/{len(rows)}"},
                       passed, runtime=time.perf_counter() - t0)


def _group(net, corrective: bool) -> list[tuple[str, Tensor]]:
    named = list(net.named_parameters())
    if not corrective:
        return named
    return [(k, p) for k, p in named if any(key in "." + k for key in CORRECTIVE_KEYS)]


def _grad_vector(net, group, images, labels) -> np.ndarray:
    net.zero_grad()
    with T.Tape() as tape:
        loss = seg_loss(net(images), labels)
    tape.backward(loss)
    tape.reset()
    g = np.concatenate([(p.grad if p.grad is not None else np.zeros(p.shape)).ravel() for _, p in group])
    if not np.isfinite(g).all():
        raise FloatingPointError("non-finite gradient in smoothness probe")
    return g.astype(np.float64)


def lipschitz_estimate(grad_at: Callable[[np.ndarray], np.ndarray], theta0: np.ndarray, n_pairs: int,
                       radius: float, rng: np.random.Generator) -> list[float]:
    """Ratios ||g(t) - g(t + r d)|| / ||r d|| for ``n_pairs`` random unit directions d."""
    if not radius > 0:
        raise ValueError("radius must be > 0")
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    g0 = grad_at(theta0)
    out = []
    for _ in range(n_pairs):
        d = rng.standard_normal(theta0.shape)
        d *= radius / np.linalg.norm(d)
        g1 = grad_at(theta0 + d)
        out.append(float(np.linalg.norm(g1 - g0) / np.linalg.norm(d)))
    return out


def smoothness_probe(variant=VariantKind.FULL_PC, baseline=VariantKind.PLAIN_E2E, seeds=(0, 1, 2),
                     n_pairs: int = 4, radius: float = 1e-3, batch: int = 4,
                     scale: ExperimentScale | None = None) -> ProbeReport:
    """Gradient-Lipschitz estimates at matched initialization.

    The predictive-corrective objective is the loss as a function of the
    corrective parameters (CRN and fusion) with the trunk held fixed; the
    baseline objective is the loss over all of its parameters.
    """
    if not radius > 0:
        raise ValueError("radius must be > 0")
    t0 = time.perf_counter()
    scale = scale or ExperimentScale()
    rows = []
    with T.precision("float64"):
        for s in seeds:
            ph = [generate_phantom(1000 * s + i, scale.size, scale.size) for i in range(batch)]
            images = np.stack([p.image for p in ph]).astype(np.float64)
            labels = np.stack([p.label for p in ph])
            row = {"seed": s}
            for v, corrective in ((VariantKind.parse(variant), True), (VariantKind.parse(baseline), False)):
                net = build_variant(scale.net(v, s))
                group = _group(net, corrective)
                if not group:
                    raise ValueError(f"variant {v.value} has no corrective parameters")
                shapes = [p.shape for _, p in group]
                theta0 = np.concatenate([p.data.ravel() for _, p in group])

                def grad_at(theta, net=net, group=group, shapes=shapes):
                    off = 0
                    for (_, p), shp in zip(group, shapes):
                        n = int(np.prod(shp))
                        p.data = theta[off:off + n].reshape(shp).copy()
                        off += n
                    return _grad_vector(net, group, images, labels)

                ratios = lipschitz_estimate(grad_at, theta0, n_pairs, radius, np.random.default_rng(s))
                grad_at(theta0)
                row[v.value] = {"L_hat": max(ratios), "ratios": ratios, "n_params": int(theta0.size),
                                "objective": "corrective" if corrective else "all"}
            row["ratio"] = row[VariantKind.parse(variant).value]["L_hat"] / row[VariantKind.parse(baseline).value]["L_hat"]
            rows.append(row)
    wins = [r["ratio"] < 1 for r in rows]
    need = math.ceil(2 * len(rows) / 3)
    return ProbeReport("smoothness", list(seeds), rows,
                       {"ratios": [r["ratio"] for r in rows], "seeds_won": sum(wins), "radius": radius,
                        "n_pairs": n_pairs},
                       {"ratio_below": 1.0, "seed_majority": f"{need}/{len(rows)}"},
                       majority(wins, need), runtime=time.perf_counter() - t0)


def quadratic_lipschitz(W_shape=(3, 3), seed: int = 0, n_pairs: int = 16, radius: float = 1e-3):
    """L-hat for 0.5*||W x - y||^2 in W against the analytic largest Hessian eigenvalue ||x||^2."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(W_shape[1])
    y = rng.standard_normal(W_shape[0])

    def grad_at(theta):
        W = theta.reshape(W_shape)
        return np.outer(W @ x - y, x).ravel()

    ratios = lipschitz_estimate(grad_at, rng.standard_normal(W_shape).ravel(), n_pairs, radius, rng)
    return max(ratios), float(x @ x)


def bias_variance_probe(variant=VariantKind.FULL_PC, n_resamples: int = 8, probe_points: int = 64,
                        seeds=(0, 1, 2), pool_size: int = 48, epochs: int = 8, lr0: float = 3e-3,
                        scale: ExperimentScale | None = None, frozen: bool = False) -> ProbeReport:
    """Predictive variance and squared bias across bootstrap training sets.

    For each seed a pool of phantoms is drawn from the generator and
    ``n_resamples`` bootstrap sets are sampled from it. Each set trains a
    fresh copy of the variant (same initial weights). Softmax outputs at
    ``probe_points`` fixed foreground pixels of held-out phantoms give the
    per-pixel variance (summed over classes) and squared bias against the
    one-hot ground truth. ``frozen`` skips training.
    """
    if n_resamples < 4:
        raise ValueError("bias-variance probe needs n_resamples >= 4")
    t0 = time.perf_counter()
    v = VariantKind.parse(variant)
    scale = scale or small_scale()
    rows = []
    for s in seeds:
        n = pool_size + 4
        ds = make_dataset(DatasetManifest(n_samples=n, height=scale.size, width=scale.size, seed=10_000 + s,
                                          split=(pool_size / n, 4 / n, 0.0)))
        pool = ds.splits["train"]
        probe_idx = ds.splits["val"]
        prng = np.random.default_rng(s)
        fg = np.argwhere(ds.labels[probe_idx] > 0)
        pts = fg[prng.choice(len(fg), probe_points, replace=False)]
        truth = ds.labels[probe_idx][pts[:, 0], pts[:, 1], pts[:, 2]]
        probs, excluded = [], 0
        for k in range(n_resamples):
            boot = pool[np.random.default_rng([s, k]).integers(0, len(pool), len(pool))]
            net = build_variant(scale.net(v, s))
            if not frozen:
                cfg = TrainConfig(lr0=lr0, epochs=epochs, batch_size=4, seed=s)
                h = train_loop(net, ds, cfg, train_idx=boot, val_idx=probe_idx)
                if h.aborted:
                    excluded += 1
                    continue
            logits = net(T.Tensor(ds.images[probe_idx])).data.astype(np.float64)
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            p = e / e.sum(axis=1, keepdims=True)
            probs.append(p[pts[:, 0], :, pts[:, 1], pts[:, 2]])  # (P, K)
        P = np.stack(probs)  # (R, P, K)
        onehot = np.eye(P.shape[-1])[truth]
        var = P.var(axis=0).sum(axis=-1)
        bias2 = ((P.mean(axis=0) - onehot) ** 2).sum(axis=-1)
        rows.append({"seed": s, "variant": v.value, "mean_variance": float(var.mean()),
                     "mean_bias2": float(bias2.mean()), "resamples_used": len(probs), "excluded": excluded})
    return ProbeReport(f"bias_variance_{v.value}", list(seeds), rows,
                       {"mean_variance": float(np.mean([r["mean_variance"] for r in rows])),
                        "mean_bias2": float(np.mean([r["mean_bias2"] for r in rows])),
                        "n_resamples": n_resamples, "probe_points": probe_points},
                       {}, None, runtime=time.perf_counter() - t0)


def small_scale() -> ExperimentScale:
    """Reduced model for probes that train many networks."""
    return ExperimentScale(embed_dim=16, depths=(1, 1, 1, 1), bottleneck=1, decoder=(1, 1, 1))


def compare_bias_variance(pc: ProbeReport, base: ProbeReport) -> ProbeReport:
    """Seed-wise comparison of two :func:`bias_variance_probe` reports."""
    rows = []
    for a, b in zip(pc.measurements, base.measurements):
        rows.append({"seed": a["seed"], "var_pc": a["mean_variance"], "var_base": b["mean_variance"],
                     "bias2_pc": a["mean_bias2"], "bias2_base": b["mean_bias2"],
                     "pc_lower": a["mean_variance"] < b["mean_variance"]})
    need = math.ceil(2 * len(rows) / 3)
    return ProbeReport("bias_variance", pc.seeds, rows,
                       {"seeds_won": sum(r["pc_lower"] for r in rows),
                        "variance_ratios": [r["var_pc"] / r["var_base"] if r["var_base"] else math.inf
                                            for r in rows]},
                       {"variance": "pc < base", "seed_majority": f"{need}/{len(rows)}",
                        "n_resamples": pc.aggregate["n_resamples"], "probe_points": pc.aggregate["probe_points"]},
                       majority([r["pc_lower"] for r in rows], need), runtime=pc.runtime + base.runtime)


def data_efficiency_probe(seed: int = 0, fraction: float = 0.1, epochs: int = 5, lr0: float = 1e-3,
                          scale: ExperimentScale | None = None, target: float = 0.95) -> ProbeReport:
    """Best val Dice with ``fraction`` of the training set versus all of it.

    Both runs get the same number of optimizer steps. The threshold is soft:
    a miss is reported as a warning.
    """
    t0 = time.perf_counter()
    scale = scale or ExperimentScale()
    ds = scale.dataset(seed)
    tr = ds.splits["train"]
    n_small = max(1, int(round(fraction * len(tr))))
    small = np.random.default_rng(seed).choice(tr, n_small, replace=False)
    rows = []
    for label, idx, ep in (("full", tr, epochs), ("fraction", small, max(1, round(epochs * len(tr) / n_small)))):
        net = build_variant(scale.net(VariantKind.FULL_PC, seed))
        h = train_loop(net, ds, TrainConfig(lr0=lr0, epochs=int(ep), batch_size=4, seed=seed), train_idx=idx)
        rows.append({"run": label, "n_train": int(len(idx)), "epochs": int(ep), "best_val_dice": h.best_dice})
    ratio = rows[1]["best_val_dice"] / rows[0]["best_val_dice"]
    return ProbeReport("data_efficiency", [seed], rows, {"ratio": ratio, "fraction": fraction},
                       {"ratio_at_least": target}, ratio >= target, soft=True,
                       runtime=time.perf_counter() - t0)
