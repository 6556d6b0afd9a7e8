"""Smoke test for the `ussl` extension module.

Build and install first:  pip install --no-build-isolation ./crates/python
"""

import json
import math

import ussl


def main():
    assert ussl.auc_roc([0.1, 0.4, 0.35, 0.8], [False, False, True, True]) == 0.75
    assert ussl.accuracy([0, 1, 1], [0, 1, 0]) == 2 / 3
    assert ussl.rampup(0, 10) == math.exp(-5.0)
    assert ussl.rampup(10, 10) == 1.0

    w = ussl.normalize_pool([3.0, 1.0, 2.0])
    assert w[1] < w[2] < w[0] == 1.0

    fit = ussl.fit_gmm2([0.1, 0.2, 0.15, 0.12, 5.0, 5.2, 4.9, 5.1])
    hi = fit.ukd_component
    assert abs(fit.means[hi] - 5.05) < 0.1
    assert fit.posterior(5.0) > 0.99 and fit.posterior(0.1) < 0.01
    lls = fit.log_likelihood
    assert all(b >= a - 1e-9 for a, b in zip(lls, lls[1:]))

    sc = ussl.generate_scenario(7, ["counts.unlabeled=100"])
    assert len(sc.inputs("unlabeled")) == 100
    assert len(sc.inputs("labeled")[0]) == sc.input_dim
    assert ussl.Scenario.from_csv(sc.to_csv()).to_csv() == sc.to_csv()

    cfg = ["total_epochs=6", "warmup_epochs=3", "vae.epochs=5"]
    spec = ["counts.labeled_per_class=20", "counts.unlabeled=120", "counts.test=40"]
    a = ussl.run_experiment([0, 1], cfg, spec)
    b = ussl.run_experiment([0, 1], cfg, spec)
    assert a.num_seeds == 2
    assert a.body_json() == b.body_json()
    report = json.loads(a.to_json())
    assert report["schema"] == "ussl-report/1"
    assert 0.0 <= a.mean("auc_ukd") <= 1.0
    print(a.to_text())
    print("ussl smoke test passed")


if __name__ == "__main__":
    main()
