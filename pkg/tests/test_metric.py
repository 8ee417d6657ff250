import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st

from hoadapt.basis import simplex_basis
from hoadapt.mesh import HighOrderMesh, structured_mesh
from hoadapt.metric import (
    AnalyticMetric,
    LocalizationError,
    MetricField,
    anisotropic_quotient,
    interpolate,
    load_metric,
    localize,
    metric_to_dict,
    sample_field,
    save_metric,
)
from hoadapt.spectral import (
    DegenerateSpectrumError,
    eig_derivatives,
    exp_with_derivatives,
    spd_exp,
)


def random_spd(rng, d, spread=1.0):
    A = rng.normal(size=(d, d))
    return spd_exp(spread * (A + A.T) / 2)


def random_field(rng, p=1, div=2):
    mesh = structured_mesh(2, div, p)
    return MetricField.from_metrics(mesh, [random_spd(rng, 2) for _ in range(mesh.n_nodes)])


def curved_background():
    b = simplex_basis(2, 2)
    X = b.nodes.copy()
    X[np.isclose(X, [0.5, 0.5]).all(axis=1)] = [0.62, 0.58]
    return HighOrderMesh(2, 2, X, np.arange(6)[None])


# ---------------------------------------------------------------- spectral


def sorted_eigh(L):
    lam, U = np.linalg.eigh(L)
    return lam, U * np.sign(U[np.abs(U).argmax(axis=0), range(len(lam))])


def test_diagonal_eigen_derivatives():
    dL = np.array([np.diag([0.3, -0.7]), np.diag([1.1, 0.2])])
    r = eig_derivatives(np.diag([1.0, 2.0]), dL)
    np.testing.assert_allclose(r.dlam, [[0.3, -0.7], [1.1, 0.2]], atol=1e-15)
    assert np.abs(r.dU).max() < 1e-15


def test_eigen_derivatives_against_finite_differences():
    rng = np.random.default_rng(3)
    n, J = 3, 2
    sym = lambda A: (A + np.swapaxes(A, -1, -2)) / 2
    L0 = sym(rng.normal(size=(n, n)))
    A = sym(rng.normal(size=(J, n, n)))
    B = sym(rng.normal(size=(J, J, n, n)))
    B = (B + np.swapaxes(B, 0, 1)) / 2

    def L_at(t):
        return L0 + np.einsum("j,jab->ab", t, A) + 0.5 * np.einsum("j,k,jkab->ab", t, t, B)

    def dL_at(t):
        return A + np.einsum("k,jkab->jab", t, B)

    r = eig_derivatives(L0, A, B)
    h = 1e-6
    # sign-fix eigenvectors against the analytic ones
    fix = lambda U: U * np.sign(np.sum(U * r.U, axis=0))
    for j in range(J):
        e = np.zeros(J)
        e[j] = h
        lp, Up = np.linalg.eigh(L_at(e))
        lm, Um = np.linalg.eigh(L_at(-e))
        np.testing.assert_allclose(r.dlam[j], (lp - lm) / (2 * h), rtol=1e-6, atol=1e-7)
        fd = (fix(Up) - fix(Um)) / (2 * h)
        assert np.abs(r.dU[j] - fd).max() <= 1e-6 * max(1, np.abs(fd).max())
        rp = eig_derivatives(L_at(e), dL_at(e))
        rm = eig_derivatives(L_at(-e), dL_at(-e))
        fd2 = (rp.dlam - rm.dlam) / (2 * h)
        assert np.abs(r.d2lam[:, j] - fd2).max() <= 1e-4 * np.abs(fd2).max()
        fd2u = (np.einsum("kal,l->kal", rp.dU, np.sign(np.sum(rp.U * r.U, 0)))
                - np.einsum("kal,l->kal", rm.dU, np.sign(np.sum(rm.U * r.U, 0)))) / (2 * h)
        assert np.abs(r.d2U[:, j] - fd2u).max() <= 1e-4 * np.abs(fd2u).max()
    np.testing.assert_allclose(r.d2lam, np.swapaxes(r.d2lam, 0, 1), atol=1e-10)
    # first-order eigen equation (L - lam) du = -(dL - dlam) u
    for j in range(J):
        for l in range(n):
            res = (L0 - r.lam[l] * np.eye(n)) @ r.dU[j][:, l] + (A[j] - r.dlam[j, l] * np.eye(n)) @ r.U[:, l]
            assert np.abs(res).max() <= 1e-9


def test_degenerate_spectrum_raises():
    with pytest.raises(DegenerateSpectrumError):
        eig_derivatives(np.eye(2), np.zeros((1, 2, 2)))


@pytest.mark.parametrize("method", ["eigen", "divided"])
def test_exp_routes_agree_with_finite_differences(method):
    rng = np.random.default_rng(8)
    L = rng.normal(size=(3, 3))
    L = (L + L.T) / 2
    dL = rng.normal(size=(2, 3, 3))
    dL = (dL + np.swapaxes(dL, 1, 2)) / 2
    M, dM, _, _ = exp_with_derivatives(L[None], dL[None], None, method)
    h = 1e-6
    for j in range(2):
        fd = (scipy.linalg.expm(L + h * dL[j]) - scipy.linalg.expm(L - h * dL[j])) / (2 * h)
        np.testing.assert_allclose(dM[0, j], fd, atol=1e-7)
    np.testing.assert_allclose(M[0], scipy.linalg.expm(L), atol=1e-12)


def test_auto_route_handles_repeated_eigenvalues():
    dL = np.array([[[1.0, 0.5], [0.5, -1.0]]])
    M, dM, _, used = exp_with_derivatives(np.eye(2)[None], dL[None], None, "auto")
    assert used[0]
    h = 1e-6
    fd = (scipy.linalg.expm(np.eye(2) + h * dL[0]) - scipy.linalg.expm(np.eye(2) - h * dL[0])) / (2 * h)
    np.testing.assert_allclose(dM[0, 0], fd, atol=1e-8)


# ---------------------------------------------------------------- localization


def test_localize_vertex_and_centroid():
    f = random_field(np.random.default_rng(0))
    e, xi = localize(f, f.mesh.nodes[4])
    lat = simplex_basis(2, 1).nodes
    assert np.abs(lat - xi).sum(axis=1).min() < 1e-10
    X = f.mesh.nodes[f.mesh.elements[3]]
    e, xi = localize(f, X.mean(axis=0))
    assert e == 3
    np.testing.assert_allclose(xi, [1 / 3, 1 / 3], atol=1e-12)


def test_localize_in_curved_element():
    mesh = curved_background()
    f = MetricField.from_metrics(mesh, [np.eye(2)] * 6)
    b = mesh.basis
    rng = np.random.default_rng(2)
    # dense forward sampling oracle
    g = rng.dirichlet(np.ones(3), size=10_000)[:, 1:]
    from hoadapt.basis import evaluate_basis
    fwd = evaluate_basis(b, g) @ mesh.nodes
    for target in g[:5] * 0.9 + 0.03:
        p = evaluate_basis(b, target) @ mesh.nodes
        e, xi = localize(f, p)
        np.testing.assert_allclose(evaluate_basis(b, xi, check=False) @ mesh.nodes, p, atol=1e-10)
        nearest = g[np.linalg.norm(fwd - p, axis=1).argmin()]
        assert np.linalg.norm(nearest - xi) < 0.03
        assert min(xi.min(), 1 - xi.sum()) >= -1e-8


def test_localize_far_outside_raises():
    f = random_field(np.random.default_rng(0))
    with pytest.raises(LocalizationError):
        localize(f, [3.0, 3.0])


# ---------------------------------------------------------------- interpolation


def test_constant_field():
    M0 = np.array([[2.0, 0.3], [0.3, 0.5]])
    mesh = structured_mesh(2, 2, 2)
    f = MetricField.from_metrics(mesh, [M0] * mesh.n_nodes)
    ev = interpolate(f, [[0.31, 0.72], [0.5, 0.1]], 2)
    np.testing.assert_allclose(ev.M, [M0, M0], atol=1e-12)
    assert np.abs(ev.dM).max() < 1e-12 and np.abs(ev.d2M).max() < 1e-12


def test_centroid_is_exp_of_mean_log():
    rng = np.random.default_rng(9)
    Ms = [random_spd(rng, 2) for _ in range(3)]
    f = MetricField.from_metrics(HighOrderMesh(2, 1, simplex_basis(2, 1).nodes, np.array([[0, 1, 2]])), Ms)
    L = sum(scipy.linalg.logm(M).real for M in Ms) / 3
    np.testing.assert_allclose(interpolate(f, [1 / 3, 1 / 3]).M[0], scipy.linalg.expm(L), atol=1e-10)


def test_nodal_reproduction():
    rng = np.random.default_rng(4)
    f = random_field(rng, p=2)
    M = spd_exp(f.logs)
    np.testing.assert_allclose(interpolate(f, f.mesh.nodes).M, M, atol=1e-10)


def test_interpolated_derivatives_match_finite_differences():
    rng = np.random.default_rng(11)
    mesh = curved_background()
    f = MetricField.from_metrics(mesh, [random_spd(rng, 2) for _ in range(6)])
    from hoadapt.basis import evaluate_basis
    xi = rng.dirichlet(np.ones(3), size=100)[:, 1:] * 0.8 + 0.07
    x = evaluate_basis(mesh.basis, xi) @ mesh.nodes
    ev = interpolate(f, x, 2)
    h = 1e-5
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        p, m = interpolate(f, x + e, 1), interpolate(f, x - e, 1)
        fd = (p.M - m.M) / (2 * h)
        assert np.abs(ev.dM[:, j] - fd).max() <= 1e-5 * np.abs(fd).max()
        fd2 = (p.dM - m.dM) / (2 * h)
        assert np.abs(ev.d2M[:, j] - fd2).max() <= 1e-3 * np.abs(fd2).max()
    np.testing.assert_allclose(ev.d2M, np.swapaxes(ev.d2M, 1, 2), atol=1e-10)


def test_metric_file_round_trip(tmp_path):
    f = random_field(np.random.default_rng(6))
    save_metric(f, tmp_path / "m.json")
    g = load_metric(tmp_path / "m.json")
    np.testing.assert_allclose(g.logs, f.logs, atol=1e-12)
    a = AnalyticMetric(h_min=0.02, alpha=1.5, scale=3.0)
    assert load_metric_doc(tmp_path, a) == a


def load_metric_doc(tmp_path, source):
    import json
    (tmp_path / "a.json").write_text(json.dumps(metric_to_dict(source)))
    return load_metric(tmp_path / "a.json")


# ---------------------------------------------------------------- analytic metrics


def test_boundary_layer_closed_form():
    M = AnalyticMetric("boundary-layer-2d", 0.01, 2.0).evaluate([[0.0, 0.1]]).M[0]
    np.testing.assert_allclose(M, np.diag([1.0, 1e6 / (100 + 4 * np.pi ** 2)]), rtol=1e-12, atol=1e-12)
    assert M[1, 1] == pytest.approx(7169.6, abs=0.1)


def test_alpha_zero_constant_in_y():
    a = AnalyticMetric("boundary-layer-2d", 0.01, 0.0)
    ys = np.linspace(-0.4, 0.4, 7)
    Ms = a.evaluate(np.c_[np.full(7, 0.13), ys]).M
    np.testing.assert_allclose(Ms, np.broadcast_to(Ms[0], Ms.shape), rtol=1e-12)


@pytest.mark.parametrize("kind", ["boundary-layer-2d", "boundary-layer-3d"])
def test_analytic_derivatives_match_finite_differences(kind):
    a = AnalyticMetric(kind, 0.01 if kind.endswith("2d") else 0.02, 2.0)
    d = a.dim
    x = np.random.default_rng(1).uniform(-0.5, 0.5, size=(100, d))
    ev = a.evaluate(x, 2)
    h = 1e-7
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        p, m = a.evaluate(x + e, 1), a.evaluate(x - e, 1)
        fd = (p.M - m.M) / (2 * h)
        rel = np.abs(ev.dM[:, j] - fd).max(axis=(1, 2)) / np.abs(fd).max(axis=(1, 2)).clip(1e-8)
        assert rel.max() <= 1e-6
        fd2 = (p.dM - m.dM) / (2 * h)
        assert np.abs(ev.d2M[:, j] - fd2).max() <= 1e-4 * np.abs(fd2).max()
    assert np.all(np.linalg.eigvalsh(ev.M) > 0)


def test_anisotropic_quotient():
    assert anisotropic_quotient(np.eye(2)) == pytest.approx(1.0)
    assert anisotropic_quotient(np.diag([1.0, 1e4])) == pytest.approx(100.0)
    with pytest.raises(ValueError):
        anisotropic_quotient(np.diag([1.0, -1.0]))


@given(st.integers(0, 2 ** 31), st.integers(2, 3))
def test_anisotropic_quotient_matches_eigen_oracle(seed, d):
    M = random_spd(np.random.default_rng(seed), d)
    lam = scipy.linalg.eigvalsh(M)
    expected = max(np.sqrt(np.prod(lam) / l ** d) for l in lam)
    assert anisotropic_quotient(M) == pytest.approx(expected, rel=1e-10)


@given(st.integers(0, 2 ** 31))
def test_interpolation_preserves_spd(seed):
    rng = np.random.default_rng(seed)
    f = random_field(rng, p=2, div=1)
    f = MetricField(f.mesh, f.logs * 4.0)  # wide spread of eigenvalues
    ev = interpolate(f, rng.uniform(0.01, 0.99, size=(20, 2)))
    assert np.all(np.linalg.eigvalsh(ev.M) > 0)
    np.testing.assert_allclose(ev.M, np.swapaxes(ev.M, 1, 2), atol=1e-12 * np.abs(ev.M).max())


@given(st.integers(0, 2 ** 31))
def test_sampled_field_reproduces_nodes(seed):
    rng = np.random.default_rng(seed)
    a = AnalyticMetric(alpha=rng.uniform(0, 3))
    mesh = structured_mesh(2, 3, 1, box=[[-0.5, -0.5], [0.5, 0.5]])
    f = sample_field(mesh, a)
    i = rng.integers(mesh.n_nodes)
    np.testing.assert_allclose(f.evaluate(mesh.nodes[i]).M[0], a.evaluate(mesh.nodes[i]).M[0], rtol=1e-10, atol=1e-12)
