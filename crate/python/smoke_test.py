"""Smoke test for the Python extension: simulate, fit, predict, select, risk
and the transport solver, each checked against a simple expectation."""

import json
import math
import os
import sys
import tempfile

import plasma_profiles as pp


def main() -> int:
    truth = pp.Model.load("builtin:table3")
    assert truth.terms[0] == "f_0", truth.terms

    basis = pp.SplineBasis()
    assert len(basis) == 24
    assert abs(sum(basis.eval(0.3)) - 1.0) < 1e-12
    assert len(basis.penalty()) == 24

    data = pp.simulate(truth, n_profiles=20, points=40, noise=0.05, seed=3)
    assert len(data) == 20 and data.measured_points == 800

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "sim.ndjson")
        data.save(path)
        loaded = pp.load_profiles(path, raw=True)
        assert loaded.ids == data.ids

    model = pp.fit(data, spec="full")
    metrics = model.metrics
    assert 0.0 < metrics["log_rmse"] < 0.1, metrics
    assert model.risk["rice"] > 0.0

    cov = {"Ip": 2.552, "Bt": 2.710, "nbar": 2.171, "q95": 4.150}
    t_fit, t_true = model.predict(0.0, cov), truth.predict(0.0, cov)
    assert abs(t_fit / t_true - 1.0) < 0.1, (t_fit, t_true)
    assert model.tabulate(0.5).splitlines()[0].startswith("psi\tf_0")

    trace = json.loads(pp.forward_select(data, ["Ip", "Zeff"], max_stages=2))
    assert trace["selected"][0] == "Ip", trace["selected"]

    r = pp.risk(rss=90.0, trace_kg=10.0, trace_cg=10.0, n=100)
    assert abs(r["gcv"] - 90.0 / 100.0 / 0.81) < 1e-12, r

    rho = [i / 20 for i in range(21)]
    chi = pp.chi_model(rho, [0.0] * len(rho))
    cond = pp.Conditions.synthetic("d0")
    grid, temp = pp.forward_temperature(chi, cond)
    assert grid[0] == 0.0 and abs(temp[-1] - 90.0) < 1e-9
    assert all(a >= b for a, b in zip(temp, temp[1:]))

    try:
        pp.Model.load("builtin:nothing")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown builtin accepted")

    print(f"smoke test passed: log_rmse={metrics['log_rmse']:.4f} T0={t_fit:.2f} "
          f"T_axis={temp[0]:.1f} eV")
    return 0


if __name__ == "__main__":
    sys.exit(main())
