#!/usr/bin/env python3
"""Smoke test for the boxguide_py extension module.

Builds the cdylib with cargo, copies it next to this script under the
importable name, and exercises every exported function.
"""

import json
import math
import pathlib
import shutil
import subprocess
import sys

ROOT = pathlib.Path(__file__).resolve().parent.parent


def build_and_import():
    subprocess.run(
        ["cargo", "build", "-p", "boxguide-py", "--release"],
        cwd=ROOT,
        check=True,
    )
    built = ROOT / "target" / "release" / "libboxguide_py.so"
    target = pathlib.Path(__file__).resolve().parent / "boxguide_py.so"
    shutil.copyfile(built, target)
    sys.path.insert(0, str(target.parent))
    import boxguide_py

    return boxguide_py


def main():
    bg = build_and_import()

    mask = bg.rasterize_mask([0.0, 0.0, 0.5, 0.5], 8, 8)
    assert sum(sum(row) for row in mask) == 16, "quarter box on 8x8 covers 16 cells"

    tau = bg.nonlocal_prior([0.0, 0.0, 0.5, 0.5], 8, 8, 4.0)
    total = sum(sum(row) for row in tau)
    assert abs(total - 1.0) < 1e-9, f"prior sums to {total}"

    uniform = [[1.0] * 8 for _ in range(8)]
    e = bg.aef_energy(uniform, [0.0, 0.0, 0.5, 0.5])
    assert e == 0.5625, f"uniform quarter-mask energy is {e}, want 0.5625"

    kl_self = bg.nap_divergence(tau, [0.0, 0.0, 0.5, 0.5], 4.0)
    assert abs(kl_self) < 1e-12, f"self-divergence {kl_self}"
    kl_uniform = bg.nap_divergence(uniform, [0.0, 0.0, 0.5, 0.5], 4.0)
    assert kl_uniform > 0.0, "uniform attention diverges from the prior"

    assert bg.rho_at(0) == 5.0 and bg.rho_at(9) == 0.0, "schedule endpoints"

    a1, a2 = bg.nash_alpha_2task([1.0, 0.0], [0.0, 1.0])
    assert abs(a1 - 1.0) < 1e-12 and abs(a2 - 1.0) < 1e-12
    a1, a2 = bg.nash_alpha_2task([3.0, 0.0], [1.0, 0.0])
    assert abs(a1 / a2 - 1.0 / 3.0) < 1e-10, "ratio matches inverse norm ratio"

    report = bg.verify_theorem1(trials=500, seed=0)
    assert report["pass_fraction"] == 1.0, report
    assert report["max_identity_error"] <= 1e-12, report

    scenario = json.loads(bg.default_scenario())
    assert scenario["grid"] == {"height": 16, "width": 16, "channels": 4}

    plain = bg.guided_sample(baseline="none", seed=0)
    guided = bg.guided_sample(baseline="langevin-adaptive", seed=0)
    for m in (plain, guided):
        assert 0.0 <= m["coverage"] <= 1.0 and 0.0 <= m["spread"] <= 1.0
        assert math.isfinite(m["loglik"])
        assert len(m["coverage_per_token"]) == 2
    again = bg.guided_sample(baseline="langevin-adaptive", seed=0)
    assert guided == again, "same seed reproduces identical metrics"
    assert guided["coverage"] > plain["coverage"], (
        f"guidance should raise coverage: {guided['coverage']} vs {plain['coverage']}"
    )

    print("smoke test passed")


if __name__ == "__main__":
    main()
