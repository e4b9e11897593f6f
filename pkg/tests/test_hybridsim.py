import copy
import csv
import json

import numpy as np
import pytest

from hyblpv.amb import FOUR_REGIONS
from hyblpv.hybridsim import (DivergenceError, SignalSource, StepTooLargeError, SupervisorState,
                              empirical_l2_gain, integrate, integrate_ode, lyapunov_monitor, rk4_step,
                              supervisor_step, switching_schedule, write_events_jsonl)
from hyblpv.lpv import AffineMatrices, DomainError, LpvPlant, ParameterDomain, Partition, build_grids
from hyblpv.synthesis import ControllerPoint, GainScheduledController
from conftest import toy_plant
from oracles import freq_response, lti_response

FOUR = Partition.from_intervals(FOUR_REGIONS)


def lti_plant(A, B1, C1, D11=None, nu=1, ny=1):
    """Single-region plant with inert control/measurement channels."""
    n, nw, nz = A.shape[0], B1.shape[1], C1.shape[0]
    Z = np.zeros
    D11 = Z((nz, nw)) if D11 is None else D11
    terms = {"A": [A, Z((n, n))], "B1": [B1, Z((n, nw))], "B2": [Z((n, nu)), Z((n, nu))],
             "C1": [C1, Z((nz, n))], "D11": [D11, Z((nz, nw))], "D12": [Z((nz, nu)), Z((nz, nu))],
             "C2": [Z((ny, n)), Z((ny, n))], "D21": [Z((ny, nw)), Z((ny, nw))],
             "D22": [Z((ny, nu)), Z((ny, nu))]}
    return LpvPlant(build_grids(Partition.from_intervals([(0.0, 1.0)]), 2), [AffineMatrices(terms)])


def null_controller(nk=1, nu=1, ny=1, rhos=(0.0, 1.0), Ak=None):
    Ak = -np.eye(nk) if Ak is None else Ak
    pts = [ControllerPoint(np.array([r]), Ak, [], np.zeros((nk, ny)), np.zeros((nu, nk)),
                           np.zeros((nu, ny)), np.eye(nk), np.eye(nk), None, None) for r in rhos]
    return GainScheduledController([pts], {})


# generic integrator ------------------------------------------------------------

def test_scalar_exponential():
    ts, xs = integrate_ode(lambda t, x: -x, [1.0], 0.0, 1.0, 1e-3)
    assert ts[-1] == pytest.approx(1.0)
    assert abs(xs[-1, 0] - np.exp(-1)) < 1e-8


def test_integrate_ode_lands_on_end():
    ts, xs = integrate_ode(lambda t, x: np.ones(1), [0.0], 0.0, 1.05, 0.1)
    assert ts[-1] == 1.05 and xs[-1, 0] == pytest.approx(1.05)


def test_rk4_fourth_order():
    A = np.array([[0.0, 1.0], [-4.0, -0.3]])
    exact = lti_response(A, np.zeros((2, 1)), np.array([1.0, 0.0]), np.zeros(1), 1.0)
    errs = []
    for h in (0.1, 0.05, 0.025):
        x = np.array([1.0, 0.0])
        for k in range(int(round(1 / h))):
            x = rk4_step(lambda t, v: A @ v, k * h, x, h)
        errs.append(np.linalg.norm(x - exact))
    for a, b in zip(errs, errs[1:]):
        assert 12 < a / b < 20


# signal sources --------------------------------------------------------------

def test_sample_source_interpolates_and_holds():
    s = SignalSource.samples([0.0, 1.0, 3.0], [0.0, 2.0, 0.0])
    assert s.sample([-1.0, 0.5, 2.0, 5.0])[:, 0].tolist() == [0.0, 1.0, 1.0, 0.0]
    assert s.sample_rate([0.5, 2.0, 5.0])[:, 0].tolist() == [2.0, -1.0, 0.0]


def test_sinusoid_source_rate():
    s = SignalSource.sinusoid(2.0, 3.0, 0.1, 5.0)
    t = np.array([0.3, 1.7])
    assert np.allclose(s.sample(t)[:, 0], 5 + 2 * np.sin(3 * t + 0.1))
    assert np.allclose(s.sample_rate(t)[:, 0], 6 * np.cos(3 * t + 0.1))


def test_csv_source(tmp_path):
    p = tmp_path / "w.csv"
    p.write_text("t,d,n\n0,1,0\n1,3,0\n")
    s = SignalSource.from_csv(p)
    assert s.dim == 2 and s(0.5).tolist() == [2.0, 0.0]
    p.write_text("t,d\n0,1\n1,x\n")
    with pytest.raises(ValueError, match=":3:"):
        SignalSource.from_csv(p)


def test_bad_sources():
    with pytest.raises(ValueError):
        SignalSource.samples([0.0, 0.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        SignalSource("noise", {})


# supervisor ------------------------------------------------------------------

def test_switch_up_at_800():
    st = supervisor_step(SupervisorState(0), [799.0], [801.0], FOUR, 3.0, 4.0)
    assert st.sigma == 1
    ev = st.events[-1]
    assert ev.rho == (800.0,) and ev.t == pytest.approx(3.5) and (ev.src, ev.dst) == (0, 1)


def test_switch_down_at_700():
    st = supervisor_step(SupervisorState(1), [701.0], [699.0], FOUR)
    assert st.sigma == 0 and st.events[-1].rho == (700.0,)


def test_no_switch_inside_overlap():
    st = SupervisorState(1)
    for a, b in [(750.0, 790.0), (790.0, 1150.0), (1150.0, 710.0)]:
        st = supervisor_step(st, [a], [b], FOUR)
    assert st.sigma == 1 and not st.events


def test_step_across_two_surfaces():
    with pytest.raises(StepTooLargeError):
        supervisor_step(SupervisorState(0), [790.0], [1250.0], FOUR)


def test_supervisor_domain_errors():
    with pytest.raises(DomainError):
        supervisor_step(SupervisorState(3), [1999.0], [2001.0], FOUR)
    with pytest.raises(DomainError):
        supervisor_step(SupervisorState(0), [900.0], [901.0], FOUR)


def test_schedule_matches_stepwise_supervisor():
    src = SignalSource.sinusoid(600.0, 0.7, 0.0, 1150.0)
    ts = np.linspace(0, 20, 4001)
    start, sched = switching_schedule(FOUR, src, ts)
    st = SupervisorState(start)
    R = src.sample(ts)
    for k in range(len(ts) - 1):
        st = supervisor_step(st, R[k], R[k + 1], FOUR, ts[k], ts[k + 1])
    assert [(e.src, e.dst) for _, e in sched] == [(e.src, e.dst) for e in st.events]
    for (_, a), b in zip(sched, st.events):
        assert abs(a.t - b.t) <= 5e-3 * (ts[1] - ts[0]) + 1e-4  # linear vs refined crossing


def test_hysteresis_suppresses_chatter():
    src = SignalSource.sinusoid(40.0, 1.0, 0.0, 800.0)
    _, sched = switching_schedule(FOUR, src, np.linspace(0, 10, 10001), sigma0=1)
    assert sched == []


def test_dwell_time_between_events():
    nu = 450.0
    src = SignalSource.sinusoid(450.0, 1.0, 0.0, 1150.0)
    _, sched = switching_schedule(FOUR, src, np.linspace(0, 30, 30001))
    times = [e.t for _, e in sched]
    assert len(times) > 6
    assert min(np.diff(times)) >= 100.0 / nu


def test_event_time_refinement():
    src = SignalSource.samples([0.0, 10.0], [750.0, 850.0])
    ts = np.linspace(0, 10, 11)
    _, sched = switching_schedule(FOUR, src, ts, sigma0=0)
    assert len(sched) == 1
    assert abs(sched[0][1].t - 5.0) <= 1e-3


# closed-loop flow --------------------------------------------------------------

def test_frozen_rho_matches_exponential(toy_design):
    _, K = toy_design
    plant = toy_plant()
    rho = 0.3
    P = plant.evaluate(0, [rho])
    Ak, Bk, Ck, Dk = K.gains(0, [rho], 0.0)
    Acl = np.block([[P.A + P.B2 @ Dk @ P.C2, P.B2 @ Ck], [Bk @ P.C2, Ak]])
    Bcl = np.vstack([P.B1 + P.B2 @ Dk @ P.D21, Bk @ P.D21])
    w = np.array([1.0, 0.5])
    x0, xk0 = np.array([0.2, -0.1]), np.array([0.05, 0.0])
    traj = integrate(plant, K, SignalSource.constant([rho]), SignalSource.constant(w), 2.0, 1e-3,
                     x0=x0, xk0=xk0)
    for k in (500, 1000, 2000):
        exact = lti_response(Acl, Bcl, np.concatenate([x0, xk0]), w, traj.t[k])
        got = np.concatenate([traj.x[k], traj.xk[k]])
        assert np.abs(got - exact).max() <= 1e-6 * max(1.0, np.abs(exact).max())


def test_determinism(toy_design):
    _, K = toy_design
    args = (toy_plant(), K, SignalSource.sinusoid(0.4, 2.0, 0.0, 0.5), SignalSource.sinusoid([1.0, 0.1], 3.0))
    a = integrate(*args, 3.0, 1e-3, x0=[0.1, 0.0])
    b = integrate(*args, 3.0, 1e-3, x0=[0.1, 0.0])
    for name in ("t", "x", "xk", "u", "z", "rho", "sigma"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert a.z_energy == b.z_energy


def test_resets_exact_and_plant_continuous(toy_design):
    _, K = toy_design
    rho = SignalSource.sinusoid(0.4, 2.0, 0.0, 0.5)
    traj = integrate(toy_plant(), K, rho, SignalSource.constant([1.0, 0.0]), 5.0, 1e-3,
                     xk0=[0.3, -0.2])
    assert len(traj.resets) == len(traj.events) >= 4
    for r in traj.resets:
        assert np.array_equal(r.xk_after, K.reset(r.src, r.dst) @ r.xk_before)
        assert min(abs(r.rho[0] - 0.6), abs(r.rho[0] - 0.4)) < 1e-6
    dx = np.abs(np.diff(traj.x, axis=0)).max(axis=1)
    ev_rows = [int(np.searchsorted(traj.t, e.t)) - 1 for e in traj.events]
    for k in ev_rows:
        assert dx[k] <= 2 * max(dx[k - 1], dx[k + 1]) + 1e-12
    # supervisor, not geometry, selects the table: inside the overlap either region is possible
    inside = (traj.rho[:, 0] > 0.4) & (traj.rho[:, 0] < 0.6)
    assert set(traj.sigma[inside]) == {0, 1}


def test_divergence_reported_with_time():
    plant = lti_plant(np.array([[5.0]]), np.array([[1.0]]), np.array([[1.0]]))
    with pytest.raises(DivergenceError) as exc:
        integrate(plant, null_controller(), SignalSource.constant([0.5]), SignalSource.constant([1.0]),
                  10.0, 1e-3, x0=[1.0])
    assert 0 < exc.value.t < 10


def test_passthrough_ratio_is_one():
    plant = lti_plant(np.array([[-1.0]]), np.zeros((1, 1)), np.zeros((1, 1)), D11=np.eye(1))
    traj = integrate(plant, null_controller(), SignalSource.constant([0.5]),
                     SignalSource.sinusoid(1.0, 2.0, 0.3, 0.2), 3.0, 1e-3)
    assert empirical_l2_gain(traj) == pytest.approx(1.0, rel=1e-10)
    assert np.allclose(traj.z, traj.w)


def test_sinusoid_gain_matches_frequency_response():
    A = np.array([[0.0, 1.0], [-4.0, -0.8]])
    B = np.array([[0.0], [1.0]])
    C = np.array([[1.0, 0.0]])
    om = 1.5
    traj = integrate(lti_plant(A, B, C), null_controller(), SignalSource.constant([0.5]),
                     SignalSource.sinusoid(1.0, om), 400 * np.pi / om, 2 * np.pi / om / 400)
    g = abs(freq_response(A, B, C, np.zeros((1, 1)), om)[0, 0])
    assert empirical_l2_gain(traj) == pytest.approx(g, rel=2e-2)


def test_zero_disturbance_ratio_undefined():
    plant = lti_plant(np.array([[-1.0]]), np.ones((1, 1)), np.ones((1, 1)))
    traj = integrate(plant, null_controller(), SignalSource.constant([0.5]), SignalSource.constant([0.0]),
                     0.1, 1e-3, x0=[1.0])
    with pytest.raises(ValueError, match="zero energy"):
        empirical_l2_gain(traj)


def test_input_checks():
    plant = lti_plant(np.array([[-1.0]]), np.ones((1, 1)), np.ones((1, 1)))
    rho, w = SignalSource.constant([0.5]), SignalSource.constant([1.0])
    with pytest.raises(ValueError, match="whole number"):
        integrate(plant, null_controller(), rho, w, 0.10005, 1e-3)
    with pytest.raises(ValueError, match="signal sizes"):
        integrate(plant, null_controller(), rho, SignalSource.constant([1.0, 2.0]), 0.1, 1e-3)
    with pytest.warns(UserWarning, match="rate"):
        integrate(plant, null_controller(), SignalSource.samples([0, 1], [0, 1]), w, 0.1, 1e-3,
                  rates=ParameterDomain.interval(0, 1, 0.5))


def test_recording_subsamples(toy_design):
    _, K = toy_design
    traj = integrate(toy_plant(), K, SignalSource.constant([0.2]), SignalSource.constant([1.0, 0.0]),
                     1.0, 1e-3, record_every=100)
    assert len(traj.t) == 11
    assert np.allclose(traj.t, np.linspace(0, 1, 11))


# monitor and exports -------------------------------------------------------------

def test_storage_decreases_without_disturbance(toy_design, rng):
    sol, K = toy_design
    traj = integrate(toy_plant(), K, SignalSource.constant([0.3]), SignalSource.constant([0.0, 0.0]),
                     3.0, 1e-3, x0=rng.standard_normal(2), xk0=rng.standard_normal(2), record_every=10)
    mon = lyapunov_monitor(traj, sol, K)
    assert mon.increases() == []
    assert mon.V[-1] < mon.V[0]


def ramp_run(K, xk0):
    rho = SignalSource.samples([0.0, 0.5], [0.55, 0.65])
    return integrate(toy_plant(), K, rho, SignalSource.constant([0.0, 0.0]), 0.5, 1e-3,
                     x0=[0.0, 0.0], xk0=xk0)


def test_storage_does_not_jump_up_at_reset(toy_design, rng):
    sol, K = toy_design
    for _ in range(5):
        traj = ramp_run(K, rng.standard_normal(2))
        mon = lyapunov_monitor(traj, sol, K)
        assert len(mon.events) == 1 and mon.events_ok


def test_corrupt_reset_flagged(toy_design, rng):
    sol, K = toy_design
    bad = copy.deepcopy(K)
    bad.resets[(0, 1)] = 1.5 * bad.resets[(0, 1)]
    flagged = 0
    for _ in range(5):
        mon = lyapunov_monitor(ramp_run(bad, rng.standard_normal(2)), sol, bad)
        flagged += not mon.events_ok
    assert flagged == 5


def test_csv_and_jsonl_exports(toy_design, tmp_path):
    sol, K = toy_design
    traj = ramp_run(K, [0.1, 0.2])
    traj.to_csv(tmp_path / "traj.csv")
    with open(tmp_path / "traj.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "x1", "x2", "xk1", "xk2", "u1", "z1", "z2", "w1", "w2", "sigma", "rho1"]
    assert len(rows) == len(traj.t) + 1
    assert {r[10] for r in rows[1:]} == {"1", "2"}
    assert float(rows[-1][1]) == traj.x[-1, 0]
    mon = lyapunov_monitor(traj, sol, K)
    write_events_jsonl(tmp_path / "ev.jsonl", traj, mon)
    lines = (tmp_path / "ev.jsonl").read_text().splitlines()
    rec = json.loads(lines[0])
    assert list(rec) == ["t", "from", "to", "rho", "V_before", "V_after"]
    assert (rec["from"], rec["to"]) == (1, 2) and rec["V_after"] <= rec["V_before"]
    write_events_jsonl(tmp_path / "ev2.jsonl", traj)
    assert json.loads((tmp_path / "ev2.jsonl").read_text())["V_before"] is None
