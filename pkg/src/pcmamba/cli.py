"""Command-line entry point: ``pcmamba <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 a verification
threshold was missed. Config files hold ``key = value`` lines; keys prefixed
``net.`` describe the network, the rest the training run. Command-line flags
override the file.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from . import verify as V
from .data import DatasetManifest, LesionParams, parse_key_values, read_dataset, write_dataset
from .metrics import evaluate_labels, write_metrics_csv, write_summary
from .network import NetworkConfig, build_variant, load_checkpoint, read_checkpoint, save_checkpoint
from .pcblock import CrnConfig, CrnParams, PpmConfig, VariantKind, crn_forward, ppm_forward
from .ssm import SsmParams, selective_scan
from .train import TrainConfig, train_loop

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_THRESHOLD = 0, 1, 2, 3
SUITES = ("grad", "scan", "zoh", "ppm", "wiring", "metrics", "convergence", "smoothness", "biasvar", "dataeff",
          "all")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None
    return h, w


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pcmamba", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads (or PCMAMBA_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic phantom dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--size", type=_size, default=(64, 64))
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--noise", type=float, default=0.02)
    g.add_argument("--lesions", default="0:2:2:4", help="n_min:n_max:r_min:r_max or 'none'")
    g.add_argument("--split", default="0.7,0.15,0.15")

    t = sub.add_parser("train", help="train one variant")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", required=True, choices=[v.value for v in VariantKind])
    t.add_argument("--config", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float, dest="lr0")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)

    e = sub.add_parser("eval", help="per-sample, per-class metrics for a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test", "all"))

    v = sub.add_parser("verify", help="run verification probes")
    v.add_argument("--suite", required=True, choices=SUITES)
    v.add_argument("--out", required=True)
    v.add_argument("--seeds", type=_int_list, default=[0, 1, 2])

    b = sub.add_parser("bench", help="time one operation across sizes")
    b.add_argument("--op", required=True, choices=("scan", "ppm", "crn", "forward"))
    b.add_argument("--sizes", type=_int_list, required=True)
    b.add_argument("--repeat", type=int, default=3)
    b.add_argument("--channels", type=int, default=32)

    r = sub.add_parser("report", help="print the consolidated probe summary")
    r.add_argument("--in", dest="indir", required=True)
    return p


# -- commands ----------------------------------------------------------------------
def cmd_gen_data(a) -> int:
    out = Path(a.out)
    if out.exists() and any(out.iterdir()):
        raise UsageError(f"output directory {out} is not empty")
    split = tuple(float(x) for x in a.split.split(","))
    if len(split) != 3:
        raise UsageError("--split needs three fractions")
    m = DatasetManifest(n_samples=a.n, height=a.size[0], width=a.size[1], seed=a.seed, noise_sigma=a.noise,
                        lesions=LesionParams.parse(a.lesions), split=split)
    write_dataset(m, out)
    print(f"wrote {a.n} samples to {out}")
    return EXIT_OK


def load_run_config(path, **overrides) -> tuple[TrainConfig, dict[str, str]]:
    """Split a config file into the training config and ``net.*`` keys."""
    kv = parse_key_values(Path(path).read_text()) if path else {}
    net = {k: v for k, v in kv.items() if k.startswith("net.")}
    text = "".join(f"{k} = {v}\n" for k, v in kv.items() if not k.startswith("net."))
    return TrainConfig.from_text(text, **overrides), net


def cmd_train(a) -> int:
    ds = read_dataset(a.data)
    cfg, net_kv = load_run_config(a.config, epochs=a.epochs, lr0=a.lr0, batch_size=a.batch_size, seed=a.seed,
                                  checkpoint_dir=a.out)
    net_kv = {**net_kv, "net.variant": a.variant, "net.seed": net_kv.get("net.seed", str(cfg.seed)),
              "net.input_size": f"{ds.manifest.height}x{ds.manifest.width}"}
    ncfg = NetworkConfig.from_meta(net_kv)
    net = build_variant(ncfg)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    hist = train_loop(net, ds, cfg)
    (out / "config.txt").write_text(cfg.to_text() + "".join(f"{k} = {v}\n" for k, v in ncfg.to_meta().items()))
    hist.to_csv(out / "history.csv")
    save_checkpoint(net, out / "model.ckpt", {"best_epoch": hist.best_epoch, "val_dice": f"{hist.best_dice:.6f}",
                                              **ncfg.to_meta()})
    if hist.aborted:
        print(f"training aborted: {hist.aborted}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"best epoch {hist.best_epoch} val dice {hist.best_dice:.4f}; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(a) -> int:
    ds = read_dataset(a.data)
    _, meta = read_checkpoint(a.checkpoint)
    ncfg = NetworkConfig.from_meta(meta)
    if ncfg.input_size != (ds.manifest.height, ds.manifest.width):
        raise ValueError(f"checkpoint expects {ncfg.input_size}, data is "
                         f"{ds.manifest.height}x{ds.manifest.width}")
    net = build_variant(ncfg)
    load_checkpoint(net, a.checkpoint)
    idx = np.arange(len(ds)) if a.split == "all" else ds.splits[a.split]
    if len(idx) == 0:
        raise UsageError(f"split {a.split!r} is empty")
    rows = []
    for i in idx:
        pred = net.predict(T.Tensor(ds.images[i]))
        rows.extend((int(i), m) for m in evaluate_labels(pred, ds.labels[i], ncfg.num_classes))
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(rows, out)
    summary = write_summary(rows, out.with_suffix(".summary.json"))
    for name, s in summary.items():
        print(f"{name:<4} dice {s['dice']:.4f} iou {s['iou']:.4f}")
    return EXIT_OK


def run_suite(suite: str, seeds: list[int]) -> list[V.ProbeReport]:
    seeds = tuple(seeds)
    reports = []
    if suite in ("grad", "all"):
        reports += [V.gradient_suite("float64"), V.gradient_suite("float32")]
    if suite in ("scan", "all"):
        reports.append(V.scan_oracle_suite())
    if suite in ("zoh", "all"):
        reports.append(V.zoh_limit_probe())
    if suite in ("ppm", "all"):
        reports.append(V.ppm_localization_probe(seeds))
    if suite in ("wiring", "all"):
        reports.append(V.ablation_wiring_probe(seeds))
    if suite in ("metrics", "all"):
        reports.append(V.metrics_oracle_probe(seed=seeds[0]))
    if suite in ("convergence", "all"):
        reports.append(V.convergence_experiment(seeds=seeds))
    if suite in ("smoothness", "all"):
        reports.append(V.smoothness_probe(seeds=seeds))
    if suite in ("biasvar", "all"):
        pc = V.bias_variance_probe(VariantKind.FULL_PC, seeds=seeds)
        base = V.bias_variance_probe(VariantKind.PLAIN_E2E, seeds=seeds)
        reports += [pc, base, V.compare_bias_variance(pc, base)]
    if suite in ("dataeff", "all"):
        reports.append(V.data_efficiency_probe(seeds[0]))
    return reports


def cmd_verify(a) -> int:
    reports = run_suite(a.suite, a.seeds)
    for r in reports:
        r.save(a.out)
    print(V.render_summary(reports))
    failed = [r.name for r in reports if r.passed is False and not r.soft]
    if failed:
        print(f"threshold failure: {', '.join(failed)}", file=sys.stderr)
        return EXIT_THRESHOLD
    return EXIT_OK


def _time(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cmd_bench(a) -> int:
    rng = np.random.default_rng(0)
    C = a.channels
    print(f"{'op':<8} {'size':>6} {'seconds':>10}")
    for n in a.sizes:
        if n < 1:
            raise UsageError("sizes must be positive")
        if a.op == "scan":
            ssm = SsmParams(C, 8, seed=0)
            u = rng.standard_normal((n, C))
            fn = lambda: selective_scan(u, ssm)  # noqa: E731
        elif a.op == "ppm":
            f = rng.standard_normal((n, n, C))
            fn = lambda: ppm_forward(f, PpmConfig())  # noqa: E731
        elif a.op == "crn":
            f = rng.standard_normal((n, n, C))
            cfg = CrnConfig()
            prm = CrnParams(C, cfg, seed=0)
            fn = lambda: crn_forward(f, cfg, prm)  # noqa: E731
        else:
            net = build_variant(NetworkConfig(input_size=(n, n)))
            img = rng.uniform(0, 1, (1, n, n))
            fn = lambda: net(img)  # noqa: E731
        print(f"{a.op:<8} {n:>6} {_time(fn, a.repeat):>10.4f}")
    return EXIT_OK


def cmd_report(a) -> int:
    d = Path(a.indir)
    if not d.is_dir():
        raise UsageError(f"no such directory: {d}")
    reports = V.load_reports(d)
    if not reports:
        raise UsageError(f"no probe reports in {d}")
    print(V.render_summary(reports))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "verify": cmd_verify,
            "bench": cmd_bench, "report": cmd_report}


def _thread_limit(threads):
    if threads is None:
        env = os.environ.get("PCMAMBA_THREADS")
        threads = int(env) if env else None
    if threads is None:
        return None
    if threads < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def run(argv=None) -> int:
    try:
        a = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")
        limiter = _thread_limit(a.threads)
        try:
            return COMMANDS[a.command](a)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, FloatingPointError, RuntimeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
