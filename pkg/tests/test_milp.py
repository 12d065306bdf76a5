"""Model container, linearization devices, LP text round trip, backends."""

import math

import pytest

from hostcap import milp
from hostcap.milp import (BitExpansion, ConfigError, MilpModel, SolveParams,
                          SolverStatus, big_m_product, binary_expand, read_lp,
                          read_lp_file, write_lp)


def test_simple_bound_maximum():
    model = MilpModel(sense="max")
    model.add_var("x", lb=0.0, ub=math.inf)
    model.add_constr({"x": 1.0}, "<=", 3.0)
    model.add_objective_term("x", 1.0)
    res = model.solve()
    assert res.ok
    assert res.objective == pytest.approx(3.0, abs=1e-9)
    assert res.value("x") == pytest.approx(3.0, abs=1e-9)


def test_infeasible_pair_is_reported():
    model = MilpModel(sense="max")
    model.add_var("x")
    model.add_constr({"x": 1.0}, ">=", 1.0)
    model.add_constr({"x": 1.0}, "<=", 0.0)
    model.add_objective_term("x", 1.0)
    res = model.solve()
    assert res.status == SolverStatus.INFEASIBLE
    assert not res.ok


def test_unbounded_objective_is_reported():
    model = MilpModel(sense="max")
    model.add_var("x", lb=0.0, ub=math.inf)
    model.add_objective_term("x", 1.0)
    assert model.solve().status == SolverStatus.UNBOUNDED


def test_mixed_integer_solve_reports_bound():
    model = MilpModel(sense="max")
    model.add_var("n", lb=0, ub=10, kind="I")
    model.add_var("x", lb=0.0, ub=4.0)
    model.add_constr({"n": 0.7, "x": 1.0}, "<=", 6.0)
    model.add_objective_term("n", 1.0)
    model.add_objective_term("x", 0.5)
    res = model.solve(params=SolveParams(mip_gap=1e-9))
    assert res.ok
    # n=8, x=0.4 beats any other lattice point
    assert res.value("n") == pytest.approx(8, abs=1e-9)
    assert res.objective == pytest.approx(8.2, abs=1e-6)
    assert res.bound == pytest.approx(res.objective, abs=1e-6)


def test_construction_validation():
    model = MilpModel()
    model.add_var("x")
    with pytest.raises(ConfigError, match="duplicate"):
        model.add_var("x")
    with pytest.raises(ConfigError, match="kind"):
        model.add_var("z", kind="Q")
    with pytest.raises(ConfigError, match="bounds"):
        model.add_var("w", lb=2.0, ub=1.0)
    with pytest.raises(ConfigError, match="sense"):
        model.add_constr({"x": 1.0}, "<", 1.0)
    with pytest.raises(ConfigError, match="sense"):
        MilpModel(sense="maximize")
    model.set_bounds("x", lb=0.5, ub=0.75)
    assert model.bounds_of("x") == (0.5, 0.75)
    with pytest.raises(ConfigError, match="empty"):
        model.set_bounds("x", lb=0.8)


def test_check_reports_worst_violation():
    model = MilpModel(sense="max")
    model.add_var("x", lb=0.0, ub=1.0)
    model.add_var("b", kind="B")
    model.add_constr({"x": 1.0, "b": 1.0}, "<=", 1.0, name="capacity")
    worst, where = model.check([0.5, 0.4])
    assert worst == pytest.approx(0.4)          # b fails integrality
    assert "integrality" in where
    worst, where = model.check([2.0, 1.0])
    assert worst == pytest.approx(2.0)          # row violated by 2, bound by 1
    assert where == "row capacity"


@pytest.mark.parametrize("b_fix", [0, 1])
def test_product_device_exact_on_grid(b_fix):
    m0 = 2.0
    for step in range(5):
        x_fix = m0 * step / 4
        for sense in ("max", "min"):
            model = MilpModel(sense=sense)
            model.add_var("b", kind="B", lb=b_fix, ub=b_fix)
            model.add_var("x", lb=x_fix, ub=x_fix)
            theta = big_m_product(model, "b", "x", m0)
            model.add_objective_term(theta, 1.0)
            res = model.solve()
            assert res.ok
            assert res.value(theta) == pytest.approx(b_fix * x_fix, abs=1e-9)


def test_product_device_validation():
    model = MilpModel()
    model.add_var("b", kind="B")
    model.add_var("x", lb=0.0, ub=3.0)
    with pytest.raises(ConfigError, match="within"):
        big_m_product(model, "b", "x", 2.0)
    model.add_var("c", lb=0.0, ub=1.0)
    with pytest.raises(ConfigError, match="not binary"):
        big_m_product(model, "x", "c", 1.0)


@pytest.mark.parametrize("cap,nbits", [(1, 1), (3, 2), (5, 3), (8, 4)])
def test_bit_expansion_width_and_cap(cap, nbits):
    model = MilpModel(sense="max")
    exp = binary_expand(model, cap, "T")
    assert len(exp.bits) == nbits
    assert exp.weights == tuple(2 ** n for n in range(nbits))
    for bit in exp.bits:
        model.add_objective_term(bit, 0.0)
    model.set_objective(exp.expr())
    res = model.solve()
    assert res.ok
    # the cap row, not the bit width, limits the encoded integer
    assert exp.value(res) == cap
    assert res.objective == pytest.approx(cap, abs=1e-9)


def test_bit_expansion_scaled_expression():
    exp = BitExpansion(bits=("b0", "b1"), weights=(1, 2), cap=3)
    assert exp.expr(scale=0.5) == {"b0": 0.5, "b1": 1.0}
    with pytest.raises(ConfigError):
        binary_expand(MilpModel(), 0, "T")


def build_round_trip_model():
    model = MilpModel(name="rt", sense="min")
    model.add_var("y[10,A]", lb=0.0, ub=5.0)
    model.add_var("w", kind="B")
    model.add_var("n", lb=-3, ub=4, kind="I")
    model.add_var("free", lb=-math.inf, ub=math.inf)
    model.add_constr({"y[10,A]": 1.0, "n": 2.0}, ">=", 1.5, name="lo")
    model.add_constr({"w": 1.0, "free": -0.25}, "<=", 0.75)
    model.add_constr({"free": 1.0, "n": 1e-3}, "==", -2.0)
    model.set_objective({"y[10,A]": 1.0, "w": 4.0, "n": -0.5, "free": 2.0},
                        const=1.25)
    return model


def test_lp_text_round_trip(tmp_path):
    model = build_round_trip_model()
    direct = model.solve()
    assert direct.ok

    again = read_lp(write_lp(model))
    res = again.solve()
    assert res.ok
    assert res.objective == pytest.approx(direct.objective, abs=1e-9)

    path = tmp_path / "model.lp"
    write_lp(model, path)
    res_file = read_lp_file(path).solve()
    assert res_file.objective == pytest.approx(direct.objective, abs=1e-9)


def test_lp_round_trip_preserves_structure():
    model = build_round_trip_model()
    again = read_lp(write_lp(model))
    assert again.sense == "min"
    assert again.n_vars == model.n_vars
    assert len(again.rows) == len(model.rows)
    kinds = {name: again.kind[idx] for name, idx in again.var_index.items()}
    assert kinds["w"] == "B" and kinds["n"] == "I"
    assert again.bounds_of("n") == (-3.0, 4.0)
    assert again.obj_const == pytest.approx(1.25)


def test_backend_registry_and_env(monkeypatch):
    calls = []

    def fake(model, params):
        calls.append((model.name, params.mip_gap))
        return milp.SolveResult(status=SolverStatus.OPTIMAL, objective=0.0,
                                values=None, model=model)

    milp.register_backend("fake-test", fake)
    try:
        model = MilpModel(name="probe")
        model.add_var("x", ub=1.0)
        assert milp.solve(model, backend="fake-test").ok
        monkeypatch.setenv("HOSTCAP_SOLVER", "fake-test")
        assert model.solve().ok
        assert [c[0] for c in calls] == ["probe", "probe"]
        monkeypatch.setenv("HOSTCAP_SOLVER", "no-such-engine")
        with pytest.raises(ConfigError, match="no-such-engine"):
            model.solve()
    finally:
        del milp._BACKENDS["fake-test"]
