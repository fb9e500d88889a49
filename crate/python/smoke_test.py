"""Exercises the Python bindings end to end on a tiny configuration.

Build first: `maturin develop --release` (or see README for a plain cargo build).
"""
import json
import math
import os
import sys
import tempfile

import kcgg


def main():
    arm = kcgg.ArmSpec(link_lengths=[1.0, 1.0], base_position=[0.0, 0.0])
    x, y = arm.forward_kinematics([0.0, 0.0])
    assert abs(x - 2.0) < 1e-12 and abs(y) < 1e-12, (x, y)
    jac = arm.jacobian([0.0, math.pi / 2])
    assert len(jac) == 2 and len(jac[0]) == 2

    sched = kcgg.NoiseSchedule.cosine(100)
    ab = sched.alpha_bar
    assert len(sched) == 100 and all(a > b for a, b in zip(ab, ab[1:]))
    short = sched.restride(10)
    assert len(short) == 10 and short.train_index[0] == 0 and short.train_index[-1] == 99

    assert kcgg.time_budget_steps(200.0, 18.9) == 10
    lo, hi = kcgg.wilson_interval(8, 10)
    assert lo < 0.8 < hi

    with tempfile.TemporaryDirectory() as tmp:
        cfg = {
            "schema_version": 1,
            "seed": 3,
            "dataset_path": "demos.kcgg",
            "model_path": "model.kcgg",
            "output_dir": "out",
            "data": {"demos_per_style": 3},
            "train": {"epochs": 20, "hidden_width": 32, "blocks": 1, "batch_size": 6},
            "evaluation": {"episodes": 3, "batch_size": 2, "ms_per_step": {"kcgg": 50.0, "projection": 50.0,
                                                                          "unconstrained": 50.0,
                                                                          "unconstrained_no_filter": 50.0}},
            "sweep": {"budgets_ms": [100, 200], "methods": ["kcgg"]},
        }
        path = os.path.join(tmp, "config.json")
        with open(path, "w") as f:
            json.dump(cfg, f)

        assert kcgg.read_config(path)["seed"] == 3
        demos, attempts, rejected = kcgg.generate_data(path)
        assert demos == 6 and attempts >= demos
        curve = kcgg.train(path)
        assert len(curve) == 20 and all(math.isfinite(v) for v in curve)
        rows = kcgg.evaluate(path)
        assert [r["method"] for r in rows] == ["unconstrained_no_filter", "unconstrained", "projection", "kcgg"]
        assert all(r["ci_low"] <= r["block_rate"] <= r["ci_high"] for r in rows)
        assert [r["steps"] for r in kcgg.sweep(path)] == [2, 4]

        model = kcgg.Model.load(os.path.join(tmp, "model.kcgg"))
        assert model.vocabulary == ["sweep_low", "sweep_high"]
        plans = model.sample(batch_size=2, steps=5, condition="sweep_high", seed=1)
        assert len(plans) == 2 and len(plans[0]) == model.rows and len(plans[0][0]) == model.state_dim
        episode = model.defend([1.6, 0.1], [-2.0, -0.2], method="kcgg", steps=5, batch_size=2, seed=4)
        assert episode["diagnostics"]["method"] == "kcgg"

        try:
            model.sample(condition="no_such_style")
        except ValueError:
            pass
        else:
            raise AssertionError("unknown style accepted")

    print("python smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
