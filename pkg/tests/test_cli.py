import json

import numpy as np
import pytest

from cspnpp import io as rio
from cspnpp.cli import main
from cspnpp.cost import CostReport


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    spec = d / "spec.json"
    spec.write_text(json.dumps({"height": 12, "width": 12, "random_boxes": 1, "density": 0.3}))
    assert main(["make-scene", "--spec", str(spec), "--seed", "3", "--out", str(d / "sc")]) == 0
    return d / "sc"


def test_make_scene_outputs(scene_dir):
    for name in ("gt.pgm", "sparse.pgm", "mask.pgm", "scene.json"):
        assert (scene_dir / name).exists()
    _, valid = rio.read_depth_raster(scene_dir / "sparse.pgm")
    np.testing.assert_array_equal(valid, rio.read_mask_raster(scene_dir / "mask.pgm"))


def test_propagate_identity_is_byte_exact(scene_dir, tmp_path):
    rio.write_float_raster(tmp_path / "zero.cspf", np.zeros((12, 12, 48)))
    out = tmp_path / "out.pgm"
    assert main(["propagate", "--mode", "cspn", "--h0", str(scene_dir / "gt.pgm"),
                 "--affinity", str(tmp_path / "zero.cspf"), "--out", str(out)]) == 0
    assert out.read_bytes() == (scene_dir / "gt.pgm").read_bytes()
    rep = CostReport.from_csv((tmp_path / "out.csv").read_text())
    assert rep.actual_mult_adds > 0


def test_propagate_ra_budget(scene_dir, tmp_path):
    rio.write_float_raster(tmp_path / "a.cspf", np.ones((12, 12, 48)))
    assert main(["propagate", "--mode", "ra", "--h0", str(scene_dir / "gt.pgm"),
                 "--affinity", str(tmp_path / "a.cspf"), "--sparse", str(scene_dir / "sparse.pgm"),
                 "--budget-latency", "0.046", "--out", str(tmp_path / "r.pgm"),
                 "--report", str(tmp_path / "r.csv")]) == 0
    rep = CostReport.from_csv((tmp_path / "r.csv").read_text())
    assert rep.expected_latency <= 0.046


def test_propagate_ca(scene_dir, tmp_path):
    rio.write_float_raster(tmp_path / "a.cspf", np.ones((12, 12, 48)))
    rio.write_float_raster(tmp_path / "w.cspf", np.zeros((12, 12, 15)))
    assert main(["propagate", "--mode", "ca", "--h0", str(scene_dir / "gt.pgm"),
                 "--affinity", str(tmp_path / "a.cspf"), "--sparse", str(scene_dir / "sparse.pgm"),
                 "--weights", str(tmp_path / "w.cspf"), "--out", str(tmp_path / "c.pgm")]) == 0
    rep = CostReport.from_csv((tmp_path / "c.csv").read_text())
    assert rep.expected_latency == pytest.approx(0.35289, abs=1e-5)


def test_fit_and_bench(scene_dir, tmp_path, capsys):
    out = tmp_path / "fit"
    assert main(["fit", "--scene", str(scene_dir), "--epochs", "3",
                 "--eta2", "0.1", "--seed", "0", "--out", str(out)]) == 0
    for name in ("affinity.cspf", "weights.cspf", "history.csv"):
        assert (out / name).exists()
    assert len((out / "history.csv").read_text().splitlines()) == 1 + 4
    assert main(["bench", "--scene", str(scene_dir), "--params", str(out),
                 "--out", str(tmp_path / "b.csv")]) == 0
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0].startswith("method,rmse_mm") and len(lines) == 5


def test_fit_divergence_exit_code(scene_dir, tmp_path):
    assert main(["fit", "--scene", str(scene_dir), "--epochs", "5", "--step", "1e300",
                 "--out", str(tmp_path / "f")]) == 3


def test_gradcheck(capsys):
    assert main(["gradcheck", "--seed", "1", "--samples", "15"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("max relative error")
    # a huge step makes central differences useless: numeric failure
    assert main(["gradcheck", "--seed", "1", "--samples", "5", "--eps", "10"]) == 3


@pytest.mark.parametrize("argv", [
    ["gradcheck", "--bogus"],
    ["bench"],
    ["nosuch"],
    ["propagate", "--mode", "cspn", "--h0", "missing.pgm", "--affinity", "x", "--out", "o"],
    ["fit", "--scene", "missing_dir", "--out", "o"],
    ["gradcheck", "--size", "0"],
])
def test_usage_errors(argv):
    assert main(argv) == 1


def test_malformed_list(scene_dir, tmp_path):
    assert main(["propagate", "--mode", "cspn", "--h0", str(scene_dir / "gt.pgm"),
                 "--affinity", str(scene_dir / "gt.pgm"), "--kernels", "3,x",
                 "--out", str(tmp_path / "o.pgm")]) == 1
    assert main(["propagate", "--mode", "cspn", "--h0", str(scene_dir / "gt.pgm"),
                 "--affinity", str(scene_dir / "gt.pgm"), "--kernels", "3,4",
                 "--out", str(tmp_path / "o.pgm")]) == 1


def test_format_errors(scene_dir, tmp_path):
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P6\n")
    rio.write_float_raster(tmp_path / "a.cspf", np.ones((12, 12, 48)))
    assert main(["propagate", "--mode", "cspn", "--h0", str(bad), "--affinity",
                 str(tmp_path / "a.cspf"), "--out", str(tmp_path / "o.pgm")]) == 2
    rio.write_float_raster(tmp_path / "short.cspf", np.ones((12, 12, 8)))
    assert main(["propagate", "--mode", "cspn", "--h0", str(scene_dir / "gt.pgm"), "--affinity",
                 str(tmp_path / "short.cspf"), "--out", str(tmp_path / "o.pgm")]) == 2
