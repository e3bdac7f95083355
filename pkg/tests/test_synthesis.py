import json

import numpy as np
import pytest

from polyobs import cases
from polyobs.errors import CertificateCheckFailed, Infeasible, ModelError, NonConstantE
from polyobs.synthesis import (CASE_STUDY_WEIGHTS, ObjectiveWeights, SynthesisCertificate, build, build_thm1,
                               build_thm2, check_certificate, embed_shared_slack, iss_bounds, iss_constants,
                               lmi_block, pair_blocks, synthesize)
from polyobs.verification import check_proof_step, check_s_procedure

PUBLISHED_KAPPA = {"kappa_v": 0.5258, "kappa_w": 6.6402, "kappa_psi": 1353.5}


# --- assembly ---------------------------------------------------------------------------

def test_example_counts(model):
    built = build_thm1(model)
    pairs = [b for b in built.problem.blocks if b.name.startswith("pair")]
    assert len(pairs) == 16
    assert {b.size for b in pairs} == {9}
    # Symmetric P as 3 scalars, dense X, Y, Z and one tau per pair, plus three kappas.
    assert built.layout.size == 4 * 3 + 4 * 4 + 16 * 2 + 16 * 1 + 16 + 3 == 95


def test_constant_parameter_mode(model):
    built = build_thm1(model, constant_parameter=True)
    assert sum(b.name.startswith("pair") for b in built.problem.blocks) == 4


def test_single_vertex_single_block():
    built = build_thm1(cases.deadbeat())
    assert sum(b.name.startswith("pair") for b in built.problem.blocks) == 1


def test_kappa_bound_blocks(model):
    built = build_thm1(model, kappa_max=1e5)
    tail = built.problem.blocks[-3:]
    assert [b.name for b in tail] == ["kappa_v_max", "kappa_w_max", "kappa_psi_max"]
    assert all(b.constant[0, 0] == 1e5 for b in tail)


def hand_block(sys, i, j, P_i, P_j, X, Y, Z, tau, kv, kw, kpsi):
    """Block pattern written out directly for one-dimensional phi, v and w."""
    V, Ej = sys.vertices[i], sys.vertices[j].E
    lam, H, C, D = sys.Lambda, sys.H, sys.C, sys.D
    nx = sys.n_x
    T = tau * np.eye(1)
    O = np.zeros
    r1 = [X @ Ej + Ej.T @ X.T - P_j, X @ V.A - Y @ C, -(X @ V.G), -(X @ V.F), Y @ D, X]
    r2 = [(X @ V.A - Y @ C).T, P_i - np.eye(nx), (lam @ (T @ H - Z @ C)).T, O((nx, 1)), O((nx, 1)), O((nx, nx))]
    r3 = [-(X @ V.G).T, lam @ (T @ H - Z @ C), 2 * T, O((1, 1)), lam @ Z @ D, O((1, nx))]
    r4 = [-(X @ V.F).T, O((1, nx)), O((1, 1)), kv * np.eye(1), O((1, 1)), O((1, nx))]
    r5 = [(Y @ D).T, O((1, nx)), (lam @ Z @ D).T, O((1, 1)), kw * np.eye(1), O((1, nx))]
    r6 = [X.T, O((nx, nx)), O((nx, 1)), O((nx, 1)), O((nx, 1)), kpsi * np.eye(nx)]
    return np.block([r1, r2, r3, r4, r5, r6])


def test_block_matches_hand_assembly(model, rng):
    for i, j in [(0, 0), (1, 3), (3, 2)]:
        S = rng.standard_normal((2, 2, 2))
        P_i, P_j = S[0] @ S[0].T, S[1] @ S[1].T
        X, Y, Z = rng.standard_normal((2, 2)), rng.standard_normal((2, 1)), rng.standard_normal((1, 1))
        tau, kv, kw, kpsi = rng.uniform(0.1, 2, 4)
        got = lmi_block(model, i, j, P_i, P_j, X, Y, Z, tau * np.eye(1), kv, kw, kpsi)
        want = hand_block(model, i, j, P_i, P_j, X, Y, Z, tau, kv, kw, kpsi)
        np.testing.assert_allclose(want, want.T, atol=1e-14)
        np.testing.assert_allclose(got, want, atol=1e-14)


@pytest.mark.parametrize("variant,fixture_name", [("thm1", "model"), ("thm2", "const_model")])
def test_sdp_coefficients_reproduce_blocks(variant, fixture_name, request, rng):
    sys = request.getfixturevalue(fixture_name)
    built = build(sys, variant)
    z = rng.standard_normal(built.layout.size)
    direct = pair_blocks(sys, variant, built.layout.decode(z), built.layout.pairs)
    via_sdp = built.problem.values(z)[:len(direct)]
    for a, b in zip(direct, via_sdp):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_thm2_refuses_varying_descriptor(model):
    with pytest.raises(NonConstantE):
        build_thm2(model)


def test_thm2_constant_descriptor(const_model):
    built = build_thm2(const_model)
    assert sum(b.name.startswith("pair") for b in built.problem.blocks) == 16
    # X is now one matrix per pair.
    assert built.layout.size == 4 * 3 + 16 * 4 + 16 * 2 + 16 + 16 + 3


@pytest.mark.parametrize("kw", [dict(variant="thm3"), dict(epsilon=-1.0), dict(weights=(0, 0, 0)),
                                dict(weights=(1, -1, 1)), dict(weights=(1, 1))])
def test_bad_build_arguments(model, kw):
    with pytest.raises(ModelError):
        build(model, **kw)


@pytest.mark.parametrize("raw", ["1,5,0.01", [1, 5, 0.01], (1.0, 5.0, 0.01)])
def test_weights_parse_and_normalize(raw):
    w = ObjectiveWeights.parse(raw).normalized()
    np.testing.assert_allclose(w.as_array(), CASE_STUDY_WEIGHTS.as_array(), rtol=1e-15)


# --- case-study synthesis ---------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(PUBLISHED_KAPPA))
def test_case_study_kappas(cert, name):
    assert getattr(cert, name) == pytest.approx(PUBLISHED_KAPPA[name], rel=0.05)


def test_case_study_certificate_valid(model, cert):
    chk = check_certificate(model, cert)
    assert chk.ok, chk.problems
    assert chk.block_min_eigs.min() >= cert.epsilon - 1e-7
    assert chk.P_min_eig >= 1 + cert.epsilon / 2
    assert cert.stats["status"] == "Optimal"
    assert cert.stats["num_vars"] == 95 and cert.stats["num_blocks"] == 16


def test_proof_step_inequality(model, cert):
    assert check_proof_step(model, cert, count=100).passed


def test_s_procedure_samples(model, cert):
    report = check_s_procedure(model, cert, count=1000)
    assert report.passed
    assert report.details["min_normalized_qWq"] >= -1e-12


def test_halved_P_fails(model, cert):
    chk = check_certificate(model, cert.with_P_scaled(0.5))
    assert not chk.ok


def test_certificate_json_roundtrip(cert, tmp_path):
    path = tmp_path / "cert.json"
    cert.save(path)
    again = SynthesisCertificate.load(path)
    assert again.digest() == cert.digest()
    json.loads(path.read_text())


def test_digest_ignores_stats(cert):
    other = SynthesisCertificate(**{**cert.__dict__, "stats": {}})
    assert other.digest() == cert.digest()


def test_malformed_certificate_document(cert):
    doc = cert.to_dict()
    doc["unexpected"] = 1
    with pytest.raises(ModelError):
        SynthesisCertificate.from_dict(doc)


def test_wrong_vertex_count(cert):
    with pytest.raises(ModelError):
        check_certificate(cases.deadbeat(), cert)


# --- second variant --------------------------------------------------------------------

def test_embedding_passes_pair_slack_check(const_model, const_cert):
    embedded = embed_shared_slack(const_cert)
    assert embedded.variant == "thm2"
    chk = check_certificate(const_model, embedded)
    assert chk.ok, chk.problems


def test_thm2_feasible_and_no_worse(const_model, const_cert):
    cert2 = synthesize(const_model, "thm2", CASE_STUDY_WEIGHTS)
    # The pair-slack family contains the shared-slack one, so its optimum is at least as good.
    assert cert2.stats["objective"] <= const_cert.stats["objective"] + 1e-6
    assert check_certificate(const_model, cert2).ok


def test_embedding_rejects_thm2(const_cert):
    with pytest.raises(ModelError):
        embed_shared_slack(embed_shared_slack(const_cert))


# --- small instances -------------------------------------------------------------------

def test_unobservable_scalar_infeasible():
    with pytest.raises(Infeasible):
        synthesize(cases.scalar_unobservable(), "thm1", CASE_STUDY_WEIGHTS)


def deadbeat_certificate():
    return SynthesisCertificate("thm1", P=[2 * np.eye(2)], X=[2 * np.eye(2)], Y=np.zeros((1, 1, 2, 1)),
                                Z=np.zeros((1, 1, 1, 1)), tau=np.ones((1, 1, 1)), kappa_v=100.0,
                                kappa_w=100.0, kappa_psi=100.0)


def test_deadbeat_zero_gain_certificate():
    sys = cases.deadbeat()
    cert = deadbeat_certificate()
    chk = check_certificate(sys, cert, sigma_lower=1.0)
    assert chk.ok, chk.problems
    np.testing.assert_array_equal(cert.gains_L(), np.zeros((1, 1, 2, 1)))


def test_deadbeat_synthesis_feasible():
    cert = synthesize(cases.deadbeat(), "thm1", CASE_STUDY_WEIGHTS)
    assert np.abs(cert.gains_L()).max() <= 1e-6


def test_weight_on_w_never_raises_kappa_w(model):
    kws = [synthesize(model, "thm1", (1, c_w, 0.01)).kappa_w for c_w in (1, 5, 25)]
    assert kws[1] <= kws[0] * (1 + 1e-6)
    assert kws[2] <= kws[1] * (1 + 1e-6)


def test_pure_psi_weight(model, cert):
    only_psi = synthesize(model, "thm1", "0,0,1")
    assert only_psi.kappa_psi <= cert.kappa_psi * (1 + 1e-6)


def test_diagonal_multiplier_flag_equivalent_for_scalar_phi(model, cert):
    diag = synthesize(model, "thm1", CASE_STUDY_WEIGHTS, diagonal_multipliers=True)
    assert diag.stats["objective"] == pytest.approx(cert.stats["objective"], rel=1e-6)


def test_diagonal_flag_needs_diagonal_slope_bound():
    sys = cases.deadbeat()
    from polyobs.model import PolytopicDescriptorSystem, VertexBundle

    v = sys.vertices[0]
    wide = PolytopicDescriptorSystem((VertexBundle(E=v.E, A=v.A, B=v.B, F=v.F, G=np.zeros((2, 2))),),
                                     H=np.eye(2), C=sys.C, D=sys.D, Lambda=[[2.0, 0.5], [0.5, 2.0]],
                                     nonlinearity="zero")
    with pytest.raises(ModelError):
        build(wide, diagonal_multipliers=True)


# --- ISS constants ---------------------------------------------------------------------

def test_rho_from_published_values():
    b = iss_constants(0.5258, 6.6402, 1353.5, 1.01)
    assert b.rho == pytest.approx(1 - 1 / (1353.5 * 1.0201), rel=1e-12)
    assert b.rho == pytest.approx(0.999276, abs=1e-6)
    assert b.gamma_v == pytest.approx(26.95, abs=0.01)


def test_rho_half():
    assert iss_constants(1.0, 1.0, 2.0, 1.0).rho == 0.5


def test_formula_coefficients():
    b = iss_constants(0.25, 4.0, 9.0, 2.0)
    assert b.beta == pytest.approx(6.0)
    assert b.gamma_v == pytest.approx(3.0)
    assert b.gamma_w == pytest.approx(12.0)
    assert b.gamma_psi == pytest.approx(18.0)


@pytest.mark.parametrize("kpsi,sigma", [(1.0, 1.0), (0.5, 1.2)])
def test_inconsistent_kappa_psi(kpsi, sigma):
    with pytest.raises(CertificateCheckFailed):
        iss_constants(1.0, 1.0, kpsi, sigma)


def test_nonpositive_sigma():
    with pytest.raises(ModelError):
        iss_constants(1.0, 1.0, 10.0, 0.0)


def test_numeric_constants_from_certificate(cert, sigma_lower):
    b = iss_bounds(cert, sigma_lower)
    assert b.a_num == pytest.approx(max(np.linalg.eigvalsh(P)[-1] for P in cert.P))
    assert 0 < b.rho_num < 1 and 0 < b.rho < 1


def test_zero_weights_get_floor():
    w = ObjectiveWeights.parse("0,0,1").floored()
    assert w.c_v == pytest.approx(1e-6, rel=1e-5) and w.c_w == w.c_v
    assert w.as_array().sum() == pytest.approx(1.0)


def test_pure_psi_weight_keeps_other_kappas_finite(model):
    cert = synthesize(model, "thm1", "0,0,1")
    assert cert.kappa_v < 1e6 and cert.kappa_w < 1e6
