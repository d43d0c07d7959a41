"""Smoke test for the difflab_py extension module.

Build and install first:
    maturin build --release -m crates/py/Cargo.toml -o target/wheels
    pip install --force-reinstall target/wheels/difflab_py-*.whl
"""

import json
import math
import tempfile

import difflab_py as lab


def main():
    assert lab.SCHEMA_VERSION == 1

    spec = {
        "class_means": [[-1.0, -1.0], [1.0, 1.0]],
        "class_covariances": [1.0, 1.0],
        "class_counts": [30, 20],
        "seed": 4,
    }
    x, y, cls = lab.generate(json.dumps(spec))
    assert len(x) == 50 and len(y) == 50
    assert sorted(set(y)) == [-1, 1]
    assert lab.generate(json.dumps(spec)) == (x, y, cls)

    assert lab.closed_form_error(0.0, 0.0) == 1.0
    assert abs(lab.epsilon_term(0.5, 0.1, 2, 1.0, 100) - 0.25656) < 1e-5
    assert abs(lab.chi2_divergence([0.5, 0.5], [0.8, 0.2]) - 1.08) < 1e-12

    direction, gamma = lab.solve_max_margin([[-1.0, -1.0], [1.0, 1.0]], [-1, 1])
    assert abs(gamma - math.sqrt(2.0)) < 1e-9
    assert abs(direction[0] - direction[1]) < 1e-9

    config = {
        "seed": 3,
        "dataset": {"source": "benchmark", "name": "imbalanced"},
    }
    with tempfile.TemporaryDirectory() as out:
        manifest = json.loads(lab.run_experiment("gen", json.dumps(config), out))
        names = [a["path"] for a in manifest["artifacts"]]
        assert "dataset.csv" in names, names

    check = {
        "seed": 1,
        "dataset": {"source": "benchmark", "name": "two_point"},
        "loss": {"kind": "exponential"},
        "checks": [
            {"check": "margin_convergence", "schemes": [{"kind": "equal"}], "lambdas": [0.1, 0.01, 0.001]}
        ],
    }
    verdicts = [json.loads(v) for v in lab.run_checks(json.dumps(check))]
    assert verdicts[0]["outcome"] == "passed", verdicts

    try:
        lab.run_experiment("gen", "{}", "unused")
    except ValueError:
        pass
    else:
        raise AssertionError("config without a seed must be rejected")

    print("smoke test passed")


if __name__ == "__main__":
    main()
