"""Acceptance criteria at their stated scales and tolerances.

Each test prints one ``[criterion] PASS|FAIL|WARN`` line; the lines are
repeated in the terminal summary. Probe reports land in ``reports/``.
The training-based criteria take roughly half an hour on one CPU core.
"""

import warnings

import pytest

from pcmamba import verify as V
from pcmamba.pcblock import VariantKind

from conftest import ACCEPTANCE_LINES


@pytest.fixture(scope="module")
def report_dir(request):
    d = request.config.rootpath / "reports"
    d.mkdir(exist_ok=True)
    return d


def record(number, title, report, detail, report_dir):
    for r in report if isinstance(report, list) else [report]:
        r.save(report_dir)
    main = report[-1] if isinstance(report, list) else report
    verdict = main.verdict() if not isinstance(report, list) else (
        "PASS" if all(r.passed for r in report if r.passed is not None) else "FAIL")
    line = f"[{number:>2}] {verdict:<4} {title}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return verdict


def test_01_scan_oracle(report_dir):
    r = V.scan_oracle_suite()
    a = r.aggregate
    v = record(1, "scan oracle", r, f"max rel err {a['max_rel_err']:.2e} over L={a['sizes']} x 20 seeds, "
                                    f"{r.runtime:.1f}s", report_dir)
    assert v == "PASS"


def test_02_zoh_limits(report_dir):
    r = V.zoh_limit_probe()
    a = r.aggregate
    v = record(2, "ZOH limits", r, f"|A-1| {a['max_abs_abar_minus_1']:.1e}, |B| {a['max_abs_bbar']:.1e}, "
                                   f"cutoff rel err {a['cutoff_max_rel_err']:.1e}", report_dir)
    assert v == "PASS"


def test_03_gradient_suite(report_dir):
    reps = [V.gradient_suite("float64"), V.gradient_suite("float32")]
    total = sum(r.runtime for r in reps)
    detail = ", ".join(f"{r.name[-7:]} worst {r.aggregate['max_rel_err']:.1e} ({r.aggregate['cases']} cases)"
                       for r in reps) + f", {total:.1f}s"
    v = record(3, "gradient suite", reps, detail, report_dir)
    assert v == "PASS" and total < 600


def test_04_ppm_localization(report_dir):
    r = V.ppm_localization_probe()
    a = r.aggregate
    v = record(4, "PPM symmetry-null and localization", r,
               f"null max {a['null_max_abs']:.1e}, footprint covered {a['all_covered']}, "
               f"oracle diff {a['oracle_max_abs_diff']:.1e}", report_dir)
    assert v == "PASS"


def test_05_ablation_wiring(report_dir):
    r = V.ablation_wiring_probe()
    a = r.aggregate
    v = record(5, "ablation wiring", r, ", ".join(f"{k} {val:.1e}" for k, val in a.items()), report_dir)
    assert v == "PASS"


def test_06_metrics_oracle(report_dir):
    r = V.metrics_oracle_probe(n_pairs=200)
    a = r.aggregate
    m = r.measurements[0]
    v = record(6, "metrics oracle", r, f"overlap diff {a['overlap_max_abs_diff']:.1e}, distance diff "
                                       f"{a['distance_max_abs_diff']:.1e}, hand case "
                                       f"{m['hand_dice']:.4f}/{m['hand_iou']:.4f}", report_dir)
    assert v == "PASS"


def test_07_convergence(report_dir):
    r = V.convergence_experiment()
    epochs = [(row["seed"], row["full"]["epochs_to_threshold"], row["e2e"]["epochs_to_threshold"])
              for row in r.measurements]
    detail = "; ".join(f"seed {s}: full {f} e2e {e}" for s, f, e in epochs) + f", {r.runtime / 60:.1f} min"
    v = record(7, "convergence direction", r, detail, report_dir)
    assert v == "PASS" and r.runtime < 45 * 60


def test_08_smoothness(report_dir):
    r = V.smoothness_probe()
    v = record(8, "smoothness direction", r,
               "L_PC/L_E2E " + ", ".join(f"{x:.3f}" for x in r.aggregate["ratios"]), report_dir)
    assert v == "PASS"


def test_09_bias_variance(report_dir):
    pc = V.bias_variance_probe(VariantKind.FULL_PC)
    base = V.bias_variance_probe(VariantKind.PLAIN_E2E)
    r = V.compare_bias_variance(pc, base)
    detail = "; ".join(f"seed {m['seed']}: var {m['var_pc']:.4f} vs {m['var_base']:.4f}, "
                       f"bias2 {m['bias2_pc']:.3f} vs {m['bias2_base']:.3f}" for m in r.measurements)
    v = record(9, "bias-variance direction", [pc, base, r], detail, report_dir)
    assert v == "PASS"


def test_10_data_efficiency(report_dir):
    r = V.data_efficiency_probe()
    full, frac = r.measurements
    v = record(10, "data efficiency (soft)", r, f"10% data {frac['best_val_dice']:.4f} vs full "
                                               f"{full['best_val_dice']:.4f}, ratio {r.aggregate['ratio']:.3f}",
               report_dir)
    if v != "PASS":
        warnings.warn(f"data-efficiency ratio {r.aggregate['ratio']:.3f} below 0.95")
