import numpy as np
import pytest
from hypothesis import given, strategies as st

from hoadapt import fixtures
from hoadapt.implicit import (
    BezierPatch,
    Mrep,
    convex_hull_rep,
    determinant_layer,
    evaluate_model,
    implicitize_model,
    implicitize_patch,
    normalize,
    r_conjunction,
    split_autointersections,
    trim,
    trimmed_patch,
)

W = np.sqrt(0.5)
QUARTER = BezierPatch([[1, 0], [1, 1], [0, 1]], [1, W, 1], (2,))
SEGMENT = BezierPatch([[0, 0], [1, 0]], [1, 1], (1,))
LOOP = BezierPatch([[0, 0], [2, 3], [-1, 3], [1, 0]], [1, 1, 1, 1], (3,))
CONVEX_CUBIC = BezierPatch([[0, 0], [0.3, 0.6], [0.7, 0.6], [1, 0]], [1, 1, 1, 1], (3,))
SADDLE = BezierPatch([[0, 0, 0], [0, 1, 0.2], [1, 0, 0.1], [1, 1, 0.5]], np.ones(4), (1, 1))


def fd_check(fun, x, h=1e-6):
    """Central differences of value and gradient for a function returning ImplicitDerivatives-like tuples."""
    d = x.shape[1]
    g = np.zeros(x.shape)
    H = np.zeros((len(x), d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        p, m = fun(x + e), fun(x - e)
        g[:, j] = (p[0] - m[0]) / (2 * h)
        H[:, :, j] = (p[1] - m[1]) / (2 * h)
    return g, H


def rel(a, b):
    return np.abs(a - b).max() / np.abs(b).max()


# ---------------------------------------------------------------- matrix representation


def test_segment_gamma_is_quadratic_in_y():
    m = implicitize_patch(SEGMENT)
    assert m.gamma([[0.5, 0.0]])[0] == pytest.approx(0, abs=1e-14)
    g = m.gamma([[0.3, 0.1], [0.9, 0.2], [-4.0, 0.3]])
    np.testing.assert_allclose(g / g[0], [1, 4, 9], rtol=1e-10)


def test_quarter_circle_zero_on_curve():
    m = implicitize_patch(QUARTER)
    np.testing.assert_allclose(QUARTER.evaluate([0.5])[0], [W, W], atol=1e-15)
    assert abs(m.gamma([[W, W]])[0]) <= 1e-10
    assert m.gamma([[0.0, 0.0]])[0] > 0


@pytest.mark.parametrize("patch", [SEGMENT, QUARTER, CONVEX_CUBIC, SADDLE])
def test_rank_drops_on_patch(patch):
    m = implicitize_patch(patch)
    u = patch.sample_parameters(50, np.random.default_rng(0))
    s = np.linalg.svd(m.matrix(patch.evaluate(u)), compute_uv=False)
    assert np.all(s[:, -1] <= 1e-8 * s[:, 0])


def test_single_row_determinant_layer():
    row = np.array([0.3, -0.7, 0.2])
    r = determinant_layer(Mrep(row[None, None, :], (0,)), [[0.5, 1.5]])
    a = row @ [0.5, 1.5, 1.0]
    assert r.value[0] == pytest.approx(a * a)
    np.testing.assert_allclose(r.grad[0], 2 * a * row[:2])


@pytest.mark.parametrize("patch", [QUARTER, CONVEX_CUBIC, SADDLE])
def test_determinant_layer_derivatives(patch):
    m = implicitize_patch(patch)
    rng = np.random.default_rng(3)
    lo, hi = patch.points.min(0) - 0.5, patch.points.max(0) + 0.5
    x = rng.uniform(lo, hi, size=(30, patch.dim))
    if patch is QUARTER:
        x[0] = [2.0, 0.0]
    r = determinant_layer(m, x)
    g, H = fd_check(lambda y: (determinant_layer(m, y).value, determinant_layer(m, y).grad), x)
    assert rel(r.grad, g) <= 1e-6
    assert rel(r.hess, r.value[:, None, None] * H) <= 1e-4
    T = np.stack([(determinant_layer(m, x + 1e-6 * e).hess / determinant_layer(m, x + 1e-6 * e).value[:, None, None]
                   - determinant_layer(m, x - 1e-6 * e).hess / determinant_layer(m, x - 1e-6 * e).value[:, None, None])
                  / 2e-6 for e in np.eye(patch.dim)], -1)
    assert rel(r.third, r.value[:, None, None, None] ** 2 * T) <= 1e-4


@pytest.mark.parametrize("patch", [SEGMENT, QUARTER, CONVEX_CUBIC, SADDLE])
def test_gamma_nonnegative(patch):
    m = implicitize_patch(patch)
    x = np.random.default_rng(4).uniform(-3, 3, size=(10_000, patch.dim))
    assert m.gamma(x).min() >= -1e-12 * max(1.0, m.gamma(x).max())


# ---------------------------------------------------------------- self-intersections


def test_loop_cubic_is_split():
    pieces = split_autointersections(LOOP)
    assert len(pieces) >= 2
    # oracle: the double point from dense parameter sampling
    u = np.linspace(0, 1, 4001)
    P = LOOP.evaluate(u)
    D = np.linalg.norm(P[:, None] - P[None], axis=2) + np.tri(len(u), k=200) * 9
    i, j = np.unravel_index(D.argmin(), D.shape)
    ends = [p.points[-1] for p in pieces[:-1]]
    assert min(np.linalg.norm(e - P[j]) for e in ends) < 1e-3 or min(np.linalg.norm(e - P[i]) for e in ends) < 1e-3
    for piece in pieces:
        m = implicitize_patch(piece)
        s = np.linalg.svd(m.matrix(piece.evaluate(np.linspace(0.05, 0.95, 20))), compute_uv=False)
        assert np.all(s[:, -1] <= 1e-8 * s[:, 0])


def test_convex_cubic_and_quadratic_unsplit():
    assert split_autointersections(CONVEX_CUBIC) == [CONVEX_CUBIC]
    assert split_autointersections(QUARTER) == [QUARTER]


# ---------------------------------------------------------------- hull, normalization, trimming


def test_segment_hull_is_thin_rectangle():
    hull = convex_hull_rep(SEGMENT)
    v = hull.evaluate([[0.5, 0.001], [0.5, 1.0]])[0]
    assert v[0] > 0 > v[1]


def test_triangle_hull():
    hull = convex_hull_rep(np.array([[0, 0], [1, 0], [0, 1.0]]))
    assert len(hull.normals) == 3
    assert hull.evaluate([[1 / 3, 1 / 3]])[0][0] > 0
    t = np.random.default_rng(0).uniform(size=20)
    edge = np.c_[t, 1 - t]
    assert np.abs(hull.evaluate(edge)[0]).max() <= 1e-8


def test_normalize_examples():
    y = np.array([0.3])
    v, g, h = normalize(2 * y, [[0.0, 2.0]], np.zeros((1, 2, 2)), np.zeros((1, 2, 2, 2)))
    assert v[0] == pytest.approx(0.3)
    np.testing.assert_allclose(g[0], [0, 1])
    assert np.abs(h).max() == 0
    gamma = 3.0
    v, _, _ = normalize([gamma], [[4.0, 0.0]], gamma * 2 * np.eye(2)[None], np.zeros((1, 2, 2, 2)))
    assert v[0] == pytest.approx(0.75)


def test_normalize_derivatives():
    m = implicitize_patch(QUARTER)
    x = np.random.default_rng(5).uniform(-1, 2, size=(40, 2))

    def norm(y):
        r = determinant_layer(m, y)
        return normalize(r.value, r.grad, r.hess, r.third)

    v, g, h = norm(x)
    gf, Hf = fd_check(lambda y: norm(y)[:2], x)
    assert rel(g, gf) <= 1e-6
    assert rel(h, v[:, None, None] * Hf) <= 1e-4


def test_trim_examples():
    z = np.zeros((1, 2))
    H = np.zeros((1, 2, 2))
    assert trim([1.0], z, H, [0.0], z, H)[0][0] == pytest.approx(0.0)
    assert trim([-1.0], z, H, [0.0], z, H)[0][0] == pytest.approx(1.0)


def test_trimmed_patch_derivatives():
    tp = trimmed_patch(QUARTER)
    rng = np.random.default_rng(6)
    x = rng.uniform(-0.5, 1.5, size=(400, 2))
    x = x[np.abs(tp.patch_function(x)[0]) > 1e-3][:60]
    r = tp.evaluate(x)
    g, H = fd_check(lambda y: (tp.evaluate(y).value, tp.evaluate(y).grad), x)
    assert rel(r.grad, g) <= 1e-5
    assert rel(r.hess, r.value[:, None, None] * H) <= 1e-3


def test_trimmed_patch_zero_on_patch_positive_off():
    for patch in (QUARTER, CONVEX_CUBIC, SADDLE):
        tp = trimmed_patch(patch)
        u = patch.sample_parameters(100, np.random.default_rng(7))
        assert np.abs(tp.evaluate(patch.evaluate(u)).value).max() <= 1e-7
    tp = trimmed_patch(QUARTER)
    # continuation of the circle outside the arc's hull is trimmed away
    assert tp.evaluate([[-1.0, 0.0], [0.0, -1.0]]).value.min() > 0.1


def test_zero_set_completeness_on_grid():
    tp = trimmed_patch(QUARTER)
    g = np.linspace(-0.2, 1.2, 128)
    cell = g[1] - g[0]
    X = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    near = X[tp.evaluate(X).value <= 0.25 * cell]
    poly = QUARTER.evaluate(np.linspace(0, 1, 2000))
    dist = np.linalg.norm(near[:, None] - poly[None], axis=2).min(axis=1)
    assert len(near) > 0 and dist.max() <= 2 * cell


# ---------------------------------------------------------------- r-conjunction


def test_r_conjunction_values():
    z = np.zeros((1, 2))
    H = np.zeros((1, 2, 2))
    assert r_conjunction([1.0], z, H, [1.0], z, H)[0][0] == pytest.approx(2 - np.sqrt(2))
    assert r_conjunction([0.0], z, H, [0.7], z, H)[0][0] == 0.0
    v, g, _ = r_conjunction([0.0], z, H, [0.0], z, H)
    assert v[0] == 0 and np.all(g == 0)


def test_r_conjunction_derivatives():
    x = np.random.default_rng(8).uniform(-1, 1, size=(50, 2))

    def fg(y):
        f = 1 + y[:, 0] ** 2 + np.sin(y[:, 1])
        gf = np.c_[2 * y[:, 0], np.cos(y[:, 1])]
        hf = np.zeros((len(y), 2, 2))
        hf[:, 0, 0] = 2
        hf[:, 1, 1] = -np.sin(y[:, 1])
        g = np.exp(y[:, 0] * y[:, 1])
        gg = g[:, None] * np.c_[y[:, 1], y[:, 0]]
        hg = g[:, None, None] * (np.einsum("pi,pj->pij", np.c_[y[:, 1], y[:, 0]], np.c_[y[:, 1], y[:, 0]])
                                 + np.array([[0, 1], [1, 0]]))
        return r_conjunction(f, gf, f[:, None, None] * hf, g, gg, g[:, None, None] * hg)

    v, g, h = fg(x)
    gf, Hf = fd_check(lambda y: fg(y)[:2], x)
    assert rel(g, gf) <= 1e-5
    assert rel(h, v[:, None, None] * Hf) <= 1e-4


@given(st.floats(0, 10), st.floats(0, 10))
def test_r_conjunction_zero_set_is_union(f, g):
    z = np.zeros((1, 2))
    H = np.zeros((1, 2, 2))
    v = r_conjunction([f], z, H, [g], z, H)[0][0]
    assert v >= 0
    assert (v <= 1e-9) == (min(f, g) <= 1e-9) or min(f, g) < 1e-8


# ---------------------------------------------------------------- models


def test_hole_model_zero_on_boundary():
    model = fixtures.model("hole")
    rng = np.random.default_rng(9)
    tps = [tp for lst in model.entities.values() for tp in lst]
    pts = np.vstack([tps[k % len(tps)].patch.evaluate(rng.uniform(size=1)) for k in range(200)])
    assert np.abs(model.evaluate(pts).value).max() <= 1e-7
    x = rng.uniform(-0.45, 0.45, size=(2000, 2))
    r = np.linalg.norm(x, axis=1)
    x = x[r > fixtures.HOLE_RADIUS + 0.05][:200]
    assert model.evaluate(x).value.min() > 1e-3


def test_single_segment_model_equals_trimmed_patch():
    model = implicitize_model({"s": [SEGMENT]})
    x = np.random.default_rng(10).uniform(-1, 2, size=(20, 2))
    np.testing.assert_array_equal(model.evaluate(x).value, trimmed_patch(SEGMENT).evaluate(x).value)


def test_operand_order_keeps_zero_set():
    a = fixtures.square_patches()
    b = dict(reversed(list(a.items())))
    ma, mb = implicitize_model(a), implicitize_model(b)
    t = np.linspace(-0.5, 0.5, 50)
    on = np.r_[np.c_[t, np.full(50, -0.5)], np.c_[np.full(50, 0.5), t]]
    assert np.abs(ma.evaluate(on).value).max() <= 1e-9 and np.abs(mb.evaluate(on).value).max() <= 1e-9
    off = np.random.default_rng(11).uniform(-0.4, 0.4, size=(50, 2))
    assert (ma.evaluate(off).value > 1e-9).all() and (mb.evaluate(off).value > 1e-9).all()


def test_entity_subsets():
    model = fixtures.model("square")
    corner = np.array([[0.5, -0.5]])
    assert evaluate_model(model, ["ymin", "xmax"], corner).value[0] == pytest.approx(0, abs=1e-12)
    on_ymin = np.array([[0.1, -0.5]])
    assert evaluate_model(model, ["ymin", "xmax"], on_ymin).value[0] == pytest.approx(0, abs=1e-12)
    assert evaluate_model(model, ["xmax"], on_ymin).value[0] > 0.1
    with pytest.raises(KeyError):
        evaluate_model(model, ["nope"], corner)


def test_cylinder_model_zero_on_surface():
    model = fixtures.model("cylinder")
    rng = np.random.default_rng(12)
    th = rng.uniform(np.pi, 1.5 * np.pi, 100)
    pts = np.c_[fixtures.CYLINDER_RADIUS * np.cos(th), fixtures.CYLINDER_RADIUS * np.sin(th), rng.uniform(-0.25, 0.25, 100)]
    # the cut may lie on the other quadrant; accept whichever one the model uses
    alt = pts * [-1, -1, 1]
    v = np.minimum(model.evaluate(pts, ["cylinder"]).value, model.evaluate(alt, ["cylinder"]).value)
    assert v.max() <= 1e-7
