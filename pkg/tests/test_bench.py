import json

import numpy as np
import pytest

from delaycomp.bench import BenchError, run_bench, sample_inputs, timer_unreliable
from delaycomp.dynamics import make_plant
from delaycomp.surrogate import generate_dataset, train


@pytest.fixture(scope="module")
def setup():
    p = make_plant("manipulator")
    ds = generate_dataset(p, "predictor", 120, 0.0, 3, history_points=11)
    model = train(ds, arch=(32, 32), epochs=30, learning_rate=2e-3, batch=32, seed=0,
                  optimizer="adam")
    report = run_bench(p, model, n_evals=100, tol_list=(1e-3, 1e-6), seed=1)
    return p, model, report


def test_report_fields(setup):
    _, _, r = setup
    names = [m.name for m in r.methods]
    assert names == ["solver tol=0.001", "solver tol=1e-06", "surrogate"]
    assert all(m.n_evals == 100 for m in r.methods)
    d = json.loads(r.to_json())
    assert {"speedup_ratio", "fingerprint", "methods", "unreliable"} <= set(d)
    assert d["fingerprint"]["numpy"] == np.__version__
    assert "speedup" in r.table()


def test_speedup_and_latency_shape(setup):
    _, _, r = setup
    assert r.speedup_tol == 1e-6
    assert r.speedup_ratio > 1.0
    sur = r.method("surrogate")
    assert sur.p95_ns / sur.p50_ns <= 1.5
    assert r.method("solver tol=1e-06").mean_ns > r.method("solver tol=0.001").mean_ns


def test_solver_residuals_certified(setup):
    _, _, r = setup
    for tol in (1e-3, 1e-6):
        m = r.method(f"solver tol={tol:g}")
        assert m.certified_residual <= tol
        # the residual certifies the gap up to a contraction factor, not one-to-one
        assert m.accuracy_max <= 10 * tol
    assert r.method("surrogate").certified_residual is None


def test_rejections(setup):
    p, model, _ = setup
    with pytest.raises(BenchError):
        run_bench(p, model, n_evals=99)
    with pytest.raises(BenchError):
        run_bench(p, model, tol_list=())
    with pytest.raises(BenchError):
        run_bench(make_plant("scalar"), model)
    with pytest.raises(BenchError):
        run_bench(p, model, n_evals=100, inputs=sample_inputs(p, 20, 0))
    with pytest.raises(KeyError):
        setup[2].method("nope")


def test_timer_unreliable_rule():
    assert not timer_unreliable(1.0, [1000.0, 500.0])
    assert timer_unreliable(10.0, [1e6, 999.0])
    assert not timer_unreliable(10.0, [1000.0])


def test_sample_inputs_deterministic():
    p = make_plant("pendulum")
    a, b = sample_inputs(p, 15, 9), sample_inputs(p, 15, 9)
    assert len(a) == 15
    for (xa, ha), (xb, hb) in zip(a, b):
        np.testing.assert_array_equal(xa, xb)
        assert ha == hb and not ha.has_jumps
