import csv
import json
from math import sqrt

import numpy as np
import pytest

from hoadapt.basis import quadrature_for, simplex_basis
from hoadapt.cli import EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_OK, main
from hoadapt.distortion import element_qualities
from hoadapt.fixtures import model as fixture_model
from hoadapt.implicit import model_to_dict
from hoadapt.mesh import HighOrderMesh, load_mesh, save_mesh, structured_mesh
from hoadapt.metric import AnalyticMetric, MetricField, save_metric

IDENTITY = AnalyticMetric("constant", matrix=((1.0, 0.0), (0.0, 1.0)))


def equilateral_tiling(div=3, p=2):
    m = structured_mesh(2, div, p)
    return m.with_nodes(m.nodes @ np.array([[1.0, -0.5], [0.0, sqrt(3) / 2]]).T)


def read_rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture
def identity_metric(tmp_path):
    path = tmp_path / "identity.json"
    save_metric(IDENTITY, path)
    return path


def test_adapt_fixed_point(tmp_path, identity_metric):
    m = equilateral_tiling()
    save_mesh(m, tmp_path / "m.json")
    out = tmp_path / "o.json"
    assert main(["adapt", "--mesh", str(tmp_path / "m.json"), "--metric", str(identity_metric),
                 "--out", str(out)]) == EXIT_OK
    assert np.abs(load_mesh(out).nodes - m.nodes).max() <= 1e-8
    rows = read_rows(tmp_path / "o_quality.csv")
    assert rows[0][:3] == ["degree", "min_initial", "min_final"]
    assert (tmp_path / "o_quality_trace.csv").exists()


def test_adapt_boundary_layer_improves_min_quality(fixture_dir, tmp_path):
    out = tmp_path / "a.json"
    code = main(["adapt", "--mesh", str(fixture_dir / "square_p1.json"),
                 "--metric", str(fixture_dir / "metric_2d_analytic.json"),
                 "--model", str(fixture_dir / "model_square.json"),
                 "--config", str(fixture_dir / "config.json"), "--out", str(out),
                 "--report", str(tmp_path / "r.csv"), "--trace", str(tmp_path / "t.csv")])
    assert code == EXIT_OK
    head, row = read_rows(tmp_path / "r.csv")
    stats = dict(zip(head, row))
    assert float(stats["min_final"]) > float(stats["min_initial"])
    assert len(read_rows(tmp_path / "t.csv")) > 2


def test_adapt_not_converged_exit_code(fixture_dir, tmp_path):
    code = main(["adapt", "--mesh", str(fixture_dir / "square_p1.json"),
                 "--metric", str(fixture_dir / "metric_2d_analytic.json"),
                 "--out", str(tmp_path / "a.json"), "--max-iter", "1"])
    assert code == EXIT_NOT_CONVERGED


def test_missing_metric_named(tmp_path, capsys, fixture_dir):
    missing = tmp_path / "nope.json"
    code = main(["adapt", "--mesh", str(fixture_dir / "square_p1.json"), "--metric", str(missing)])
    assert code == EXIT_INPUT
    assert str(missing) in capsys.readouterr().err


def test_invalid_initial_mesh_rejected(tmp_path, identity_metric):
    X = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    save_mesh(HighOrderMesh(2, 1, X, np.array([[0, 1, 2]])), tmp_path / "bad.json")
    assert main(["adapt", "--mesh", str(tmp_path / "bad.json"), "--metric", str(identity_metric)]) == EXIT_INPUT


def test_quality_equilateral_and_inverted(tmp_path, identity_metric):
    save_mesh(equilateral_tiling(2, 1), tmp_path / "e.json")
    main(["quality", "--mesh", str(tmp_path / "e.json"), "--metric", str(identity_metric), "--out", str(tmp_path / "q.csv")])
    rows = read_rows(tmp_path / "q.csv")
    assert rows[0] == ["element", "eta", "quality", "min_pointwise_quality", "inverted"]
    per_element = [r for r in rows[1:] if r[0].isdigit()]
    assert all(abs(float(r[2]) - 1) <= 1e-12 for r in per_element)

    X = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    save_mesh(HighOrderMesh(2, 1, X, np.array([[0, 1, 2]])), tmp_path / "i.json")
    main(["quality", "--mesh", str(tmp_path / "i.json"), "--metric", str(identity_metric), "--out", str(tmp_path / "i.csv")])
    row = read_rows(tmp_path / "i.csv")[1]
    assert float(row[2]) == 0.0 and row[4] == "1"


def test_quality_statistics_match_dense_quadrature(tmp_path, identity_metric):
    rng = np.random.default_rng(0)
    m = structured_mesh(2, 2, 2)
    m = m.with_nodes(m.nodes + rng.uniform(-0.02, 0.02, m.nodes.shape))
    save_mesh(m, tmp_path / "m.json")
    main(["quality", "--mesh", str(tmp_path / "m.json"), "--metric", str(identity_metric), "--out", str(tmp_path / "q.csv")])
    summary = {r[0]: float(r[2]) for r in read_rows(tmp_path / "q.csv")[1:] if not r[0].isdigit()}
    dense = element_qualities(m, IDENTITY, quadrature_for(2, 30)).summary()
    for k in ("min", "max", "mean", "std"):
        assert summary[k] == pytest.approx(dense[k], abs=1e-6)


def test_implicitize_grid_and_boundary(tmp_path, fixture_dir):
    out = tmp_path / "g.csv"
    assert main(["implicitize", "--model", str(fixture_dir / "model_hole.json"), "--grid", "2", "--out", str(out)]) == EXIT_OK
    assert len(read_rows(out)) == 1 + 4
    main(["implicitize", "--model", str(fixture_dir / "model_hole.json"), "--grid", "41", "--out", str(out)])
    rows = np.array([[float(v) for v in r] for r in read_rows(out)[1:]])
    x, y, g = rows[:, 0], rows[:, 1], rows[:, 2]
    on_side = np.isclose(np.abs(x), 0.5) | np.isclose(np.abs(y), 0.5)
    assert g[on_side].min() <= 1e-6
    assert g.min() >= 0


def test_implicitize_empty_model(tmp_path):
    (tmp_path / "e.json").write_text(json.dumps({"entities": []}))
    assert main(["implicitize", "--model", str(tmp_path / "e.json"), "--grid", "3", "--out", str(tmp_path / "o.csv")]) == EXIT_INPUT


def test_check_derivatives_pass_fail_and_determinism(fixture_dir, capsys):
    assert main(["check-derivatives", "--fixtures", str(fixture_dir), "--seed", "3"]) == EXIT_OK
    first = capsys.readouterr().out
    assert "all derivative checks passed" in first
    assert main(["check-derivatives", "--fixtures", str(fixture_dir), "--seed", "3"]) == EXIT_OK
    assert capsys.readouterr().out == first
    assert main(["check-derivatives", "--fixtures", str(fixture_dir), "--corrupt", "metric"]) == EXIT_INPUT


def test_compare_identical_sources(tmp_path, fixture_dir):
    # the analytic identity metric and a one-element constant discrete field
    bg = HighOrderMesh(2, 1, np.array([[-2.0, -2.0], [4.0, -2.0], [-2.0, 4.0]]), np.array([[0, 1, 2]]))
    save_metric(IDENTITY, tmp_path / "analytic.json")
    save_metric(MetricField.from_metrics(bg, [np.eye(2)] * 3), tmp_path / "discrete.json")
    m = structured_mesh(2, 2, 1, box=[[-0.5, -0.5], [0.5, 0.5]])
    m = m.with_nodes(m.nodes + np.random.default_rng(1).uniform(-0.05, 0.05, m.nodes.shape))
    save_mesh(m, tmp_path / "m.json")
    manifest = {"compare": [{"mesh": "m.json", "analytic": "analytic.json", "discrete": "discrete.json"}]}
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    out = tmp_path / "cmp.json"
    assert main(["compare-analytic", "--manifest", str(tmp_path / "manifest.json"), "--out", str(out)]) == EXIT_OK
    rep = json.loads(out.read_text())["comparisons"][0]
    assert rep["max_node_distance"] <= 1e-6
    assert rep["difference"]["mean"] <= 1e-8


def test_compare_manifest_without_list(tmp_path):
    (tmp_path / "m.json").write_text("{}")
    assert main(["compare-analytic", "--manifest", str(tmp_path / "m.json")]) == EXIT_INPUT


def test_fixtures_command_regenerates_identical_files(tmp_path, fixture_dir):
    from hoadapt import fixtures

    fixtures.background_field.cache_clear()
    fixtures._model.cache_clear()
    out = tmp_path / "fx"
    assert main(["fixtures", "--out", str(out)]) == EXIT_OK
    names = sorted(f.name for f in fixture_dir.iterdir())
    assert names == sorted(f.name for f in out.iterdir())
    for name in names:
        assert (out / name).read_bytes() == (fixture_dir / name).read_bytes(), name
