import copy
from dataclasses import replace

import numpy as np
import pytest

from hyblpv.amb import TWO_REGIONS, amb_lpv
from hyblpv.lpv import AffineMatrices, BasisSet, LpvPlant, ParameterDomain, Partition, build_grids
from hyblpv.synthesis import (ReconstructionError, SynthesisError, SynthesisProblem,
                              assemble_synthesis_lmis, closed_loop, controller_at, design,
                              factorize_MN, jump_map, reconstruct_controller, recover_reset,
                              solve_synthesis, storage_matrix, synthesis_margins, validate_certificate)
from conftest import TOY_TWO, toy_problem
from oracles import hinf_sweep


# factorization -----------------------------------------------------------------

def test_factorize_example():
    R, S = 2 * np.eye(2), 0.25 * np.eye(2)
    M, N, cond = factorize_MN(R, S, "n-identity")
    assert np.allclose(M, 0.5 * np.eye(2)) and np.array_equal(N, np.eye(2))
    M, N, _ = factorize_MN(R, S, "m-identity")
    assert np.array_equal(M, np.eye(2)) and np.allclose(N, 0.5 * np.eye(2))
    assert cond == pytest.approx(1.0)


@pytest.mark.parametrize("conv", ["m-identity", "n-identity", "svd"])
def test_factorize_round_trip(conv, rng):
    for _ in range(20):
        G = rng.standard_normal((4, 4))
        R = G @ G.T + 0.1 * np.eye(4)
        H = rng.standard_normal((4, 4))
        S = np.linalg.inv(R) + H @ H.T + 0.1 * np.eye(4)  # coupling holds strictly
        M, N, _ = factorize_MN(R, S, conv)
        Q = np.eye(4) - R @ S
        assert np.abs(M @ N.T - Q).max() <= 1e-9 * np.abs(Q).max()
        assert np.allclose(np.linalg.solve(M, Q) @ np.linalg.inv(N.T), np.eye(4), atol=1e-8)


def test_factorize_near_singular():
    with pytest.raises(ReconstructionError, match="near-singular"):
        factorize_MN(np.eye(2), np.eye(2))


def test_factorize_unknown_convention():
    with pytest.raises(ValueError):
        factorize_MN(2 * np.eye(2), np.eye(2), "qr")


# assembly ----------------------------------------------------------------------

def test_constant_basis_dedupes_rate_vertices():
    plant = toy_problem(((0.0, 1.0),)).plant
    dom = ParameterDomain.interval(0, 1, 1.0)
    q = SynthesisProblem(plant, dom, [BasisSet.constant_only()])
    asm = assemble_synthesis_lmis(q)
    assert asm.count("R") == asm.count("S") == 5
    asm2 = assemble_synthesis_lmis(replace(q, dedupe=False))
    assert asm2.count("R") == asm2.count("S") == 10


def test_toy_two_region_counts():
    asm = assemble_synthesis_lmis(toy_problem())
    # constant R: the two rate instances coincide; affine S keeps both
    assert asm.count("R") == 10
    assert asm.count("S") == 20
    assert asm.count("coupling") == 10
    assert asm.count("boundary") == 2
    surf = {(c.region, c.target): c.rho for c in asm.info if c.family == "boundary"}
    assert surf == {(0, 1): (0.6,), (1, 0): (0.4,)}


def test_amb_two_region_counts():
    plant = amb_lpv(TWO_REGIONS, 10)
    bases = [BasisSet.paper_default(b) for b in plant.partition.boxes]
    p = SynthesisProblem(plant, ParameterDomain.interval(300, 2000, 50), bases)
    asm = assemble_synthesis_lmis(replace(p, dedupe=False))
    for fam, k in (("R", 40), ("S", 40), ("coupling", 20), ("boundary", 2)):
        assert asm.count(fam) == k
    surf = sorted((c.region, c.rho[0]) for c in asm.info if c.family == "boundary")
    assert surf == [(0, 1200.0), (1, 1100.0)]
    assert assemble_synthesis_lmis(p).count("R") == 20


def test_problem_validates_weights():
    with pytest.raises(ValueError):
        toy_problem(weights=[1.0, 0.0])
    with pytest.raises(ValueError):
        toy_problem(weights=[1.0])


def test_assembly_is_deterministic():
    from hyblpv.sdp import dumps
    assert dumps(assemble_synthesis_lmis(toy_problem()).problem) == \
        dumps(assemble_synthesis_lmis(toy_problem()).problem)


# solve -------------------------------------------------------------------------

def lti_problem():
    """Frozen plant where u cannot reach the state: the optimal level is ||x1/d||_inf."""
    A = np.array([[0.0, 1.0], [-3.0, -0.5]])
    Z = np.zeros
    terms = {
        "A": [A, Z((2, 2))],
        "B1": [np.array([[0.0, 0.0], [1.0, 0.0]]), Z((2, 2))],
        "B2": [Z((2, 1)), Z((2, 1))],
        "C1": [np.array([[1.0, 0.0], [0.0, 0.0]]), Z((2, 2))],
        "D11": [Z((2, 2)), Z((2, 2))],
        "D12": [np.array([[0.0], [1.0]]), Z((2, 1))],
        "C2": [np.array([[1.0, 0.0]]), Z((1, 2))],
        "D21": [np.array([[0.0, 1.0]]), Z((1, 2))],
        "D22": [Z((1, 1)), Z((1, 1))],
    }
    plant = LpvPlant(build_grids(Partition.from_intervals([(0.0, 1.0)]), 2), [AffineMatrices(terms)])
    gain = hinf_sweep(A, np.array([[0.0], [1.0]]), np.array([[1.0, 0.0]]), np.zeros((1, 1)))
    return SynthesisProblem(plant, ParameterDomain.interval(0, 1, (0.0, 0.0)),
                            [BasisSet.constant_only()]), gain


def test_lti_optimum_matches_frequency_sweep():
    p, gain = lti_problem()
    sol = solve_synthesis(p)
    assert sol.gammas[0] == pytest.approx(gain, rel=1e-2)


def test_infeasible_level_reports_location():
    with pytest.raises(SynthesisError, match="worst constraint .* region"):
        solve_synthesis(toy_problem(fixed_gamma=[1e-3, 1e-3]))


def test_toy_design_levels(toy_design):
    sol, _ = toy_design
    opt = sol.diagnostics["optimal_gammas"]
    assert all(g > 0 for g in sol.gammas)
    assert np.allclose(sol.gammas, np.array(opt) * 1.01)
    assert sol.diagnostics["optimal_bound"] <= sum(opt) + 1e-9


def test_synthesis_grid_margins(toy_design):
    sol, _ = toy_design
    asm = assemble_synthesis_lmis(toy_problem(margin=1e-7, fixed_gamma=sol.gammas))
    assert asm.count("boundary") == 2
    assert synthesis_margins(asm, sol).min() >= -1e-7


def test_boundary_free_equals_independent_designs():
    coupled = solve_synthesis(toy_problem())
    free = solve_synthesis(toy_problem(boundary=False))
    alone = [solve_synthesis(toy_problem((iv,))).gammas[0] for iv in TOY_TWO]
    assert free.gammas == pytest.approx(alone, rel=2e-3)
    for gc, ga in zip(coupled.gammas, alone):
        assert gc >= ga * (1 - 2e-3)


def test_levels_monotone_in_rate():
    g = [sum(solve_synthesis(toy_problem(rate=r)).gammas) for r in (0.1, 1.0, 5.0, 25.0)]
    assert all(b >= a * (1 - 2e-3) for a, b in zip(g, g[1:]))
    assert g[-1] > g[0]


# reconstruction ----------------------------------------------------------------

def test_controller_structure(toy_design):
    sol, K = toy_design
    assert K.regions == 2
    for table in K.tables:
        for pt in table:
            assert np.array_equal(pt.Dk, np.zeros_like(pt.Dk))
            assert pt.Ak0.shape == (2, 2)
            assert all(np.isfinite(a).all() for a in (pt.Ak0, pt.Bk, pt.Ck))
    # constant R and N = I - S R: no rate term
    assert not K.rate_dependent
    assert np.array_equal(K.tables[0][2].Ak(-1.0), K.tables[0][2].Ak(1.0))


def test_n_identity_factor_is_affine_along_grid(toy_design):
    sol, _ = toy_design
    rhos = np.linspace(0.0, 0.6, 7)
    Ms = [controller_at(sol, 0, [r], "n-identity").M for r in rhos]
    steps = [np.abs(b - a).max() for a, b in zip(Ms, Ms[1:])]
    assert max(steps) - min(steps) <= 1e-9 * max(steps)


def test_reset_identity_and_zero(toy_design):
    sol, _ = toy_design
    rho = np.array([0.6])
    c = sol.certificate
    Ri, Si = c.R_at(0, rho), c.S_at(0, rho)
    Rj, Sj = c.R_at(1, rho), c.S_at(1, rho)
    Mi = factorize_MN(Ri, Si)[0]
    Nj = factorize_MN(Rj, Sj)[1]
    assert np.allclose(recover_reset(sol, 0, 1, rho, dhat=Sj @ Ri + Nj @ Mi.T), np.eye(2), atol=1e-9)
    assert np.allclose(recover_reset(sol, 0, 1, rho, dhat=Sj @ Ri), 0, atol=1e-9)


def test_reset_reproduces_dhat(toy_design):
    sol, _ = toy_design
    rho = np.array([0.4])
    D = recover_reset(sol, 1, 0, rho)
    c = sol.certificate
    Mi = factorize_MN(c.R_at(1, rho), c.S_at(1, rho))[0]
    Nj = factorize_MN(c.R_at(0, rho), c.S_at(0, rho))[1]
    back = Nj @ D @ Mi.T + c.S_at(0, rho) @ c.R_at(1, rho)
    assert np.abs(back - sol.dhat[(1, 0)]).max() <= 1e-8 * max(1, np.abs(back).max())


def test_jump_map_structure(rng):
    D = rng.standard_normal((3, 3))
    Ar = jump_map(3, D)
    assert np.array_equal(Ar[:3, :3], np.eye(3))
    assert not Ar[:3, 3:].any() and not Ar[3:, :3].any()
    assert np.array_equal(Ar[3:, 3:], D)


def test_validation_passes_at_synthesis_grid(toy_design):
    sol, K = toy_design
    rep = validate_certificate(sol, K)
    assert rep.passed
    assert rep.worst("analysis").relative >= -1e-5
    assert rep.worst("jump").relative >= -1e-7
    assert set(rep.summary()["families"]) == {"X", "analysis", "jump"}


def test_corrupt_reset_fails_validation(toy_design):
    sol, K = toy_design
    bad = copy.deepcopy(K)
    bad.resets[(0, 1)] = 1.5 * bad.resets[(0, 1)]
    rep = validate_certificate(sol, bad)
    assert rep.worst("jump").margin < 0
    assert not rep.passed


def test_jump_decreases_storage_for_random_states(toy_design, rng):
    sol, K = toy_design
    s = sol.state_transformed(K.state_transform)
    for (i, j), D in K.resets.items():
        rho = [0.6] if i == 0 else [0.4]
        Xi, _ = storage_matrix(s.certificate, i, rho)
        Xj, _ = storage_matrix(s.certificate, j, rho)
        Ar = jump_map(2, D)
        for x in rng.standard_normal((1000, 4)):
            vi, vj = x @ Xi @ x, (Ar @ x) @ Xj @ (Ar @ x)
            assert vj <= vi + 1e-9 * abs(vi)


def test_frozen_closed_loop_gain_below_level(toy_design):
    sol, K = toy_design
    s = sol.state_transformed(K.state_transform)
    for i, grid in enumerate(s.plant.partition.grids):
        for rho in grid[::2]:
            P = s.plant.evaluate(i, rho)
            Ak, Bk, Ck, Dk = K.gains(i, rho, 0.0)
            cl = closed_loop(P, Ak, Bk, Ck, Dk)
            assert np.max(np.linalg.eigvals(cl.A).real) < 0
            assert hinf_sweep(cl.A, cl.B, cl.C, cl.D) <= sol.gammas[i] * (1 + 1e-6)


def test_unshared_design_validates():
    p = toy_problem(margin=1e-7, share_constant_r=False)
    sol = design(p)
    K = reconstruct_controller(sol)
    assert validate_certificate(sol, K).passed
    assert set(sol.dhat) == {(0, 1), (1, 0)}
