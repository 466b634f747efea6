"""The fusepose command line, driven through main()."""
import json

import numpy as np
import pandas as pd
import pytest

from db import crud, database
from db.models import AffineWarp
from main import main


@pytest.fixture(scope="module")
def bundle_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("bundles") / "cassini-1-close"
    assert main(["--quiet", "simulate", "--preset", "cassini-1-close", "--n-frames", "12", "--no-events",
                 "--out", str(out)]) == 0
    return out


def test_simulate_writes_a_readable_bundle(bundle_dir):
    bundle = crud.read_bundle(bundle_dir)
    assert bundle.meta.n_frames == 12
    assert bundle.meta.harsh_ranges and bundle.meta.low_motion_ranges


def test_simulate_from_config_file(tmp_path):
    config = tmp_path / "scenario.json"
    config.write_text(json.dumps({"name": "soho-1-far", "n_frames": 3, "render_events": False}))
    assert main(["--quiet", "simulate", "--config", str(config), "--out", str(tmp_path / "b")]) == 0
    assert crud.read_bundle(tmp_path / "b").meta.name == "soho-1-far"


def test_fuse_is_byte_reproducible(bundle_dir, tmp_path):
    for run in ("a", "b"):
        assert main(["--quiet", "fuse", "--bundle", str(bundle_dir), "--mode", "all", "--seed", "3",
                     "--out", str(tmp_path / run)]) == 0
    for mode in ("fusion", "fusion_no_gate", "rgb_only", "event_only"):
        for name in (database.ERRORS_FILE, database.RESULTS_FILE):
            first = (tmp_path / "a" / "cassini-1-close" / mode / name).read_bytes()
            second = (tmp_path / "b" / "cassini-1-close" / mode / name).read_bytes()
            assert first == second, f"{mode}/{name}"


def test_evaluate_and_plot(bundle_dir, tmp_path):
    runs = tmp_path / "runs"
    main(["--quiet", "fuse", "--bundle", str(bundle_dir), "--mode", "all", "--out", str(runs)])
    table_path = tmp_path / "table.csv"
    assert main(["--quiet", "evaluate", "--runs", str(runs), "--out", str(table_path)]) == 0
    table = pd.read_csv(table_path, index_col=0, dtype=str)
    assert list(table.index) == ["cassini-1-close", "Avg"]
    assert list(table.columns[:4]) == ["fusion Omega", "fusion Omega_Psi", "fusion Theta", "fusion Theta_Psi"]

    run = runs / "cassini-1-close" / "fusion"
    svg = tmp_path / "errors.svg"
    assert main(["--quiet", "plot", "--errors", str(run / database.ERRORS_FILE),
                 "--meta", str(run / database.META_FILE), "--out", str(svg)]) == 0
    assert "<svg" in svg.read_text()


def test_evaluate_without_runs(tmp_path):
    assert main(["--quiet", "evaluate", "--runs", str(tmp_path), "--out", str(tmp_path / "t.csv")]) == 2


def test_align_writes_the_warp(tmp_path, capsys):
    src = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 20.0], [30.0, 40.0]])
    dst = src * [1.5, 0.5] + [4.0, -2.0]
    pd.DataFrame({"x_event": src[:, 0], "y_event": src[:, 1], "x_rgb": dst[:, 0], "y_rgb": dst[:, 1]}).to_csv(
        tmp_path / "pairs.csv", index=False)
    assert main(["--quiet", "align", "--correspondences", str(tmp_path / "pairs.csv"),
                 "--out", str(tmp_path / "warp.json")]) == 0
    warp = crud.read_model(tmp_path / "warp.json", AffineWarp)
    assert (warp.sx, warp.sy, warp.tx, warp.ty) == pytest.approx((1.5, 0.5, 4.0, -2.0))
    assert "residual_rms_px=" in capsys.readouterr().out


def test_accumulate_events_file(tmp_path):
    events = pd.DataFrame({"t_us": [10, 20, 40_000, 70_000], "x": [1, 1, 2, 3], "y": [0, 0, 1, 2], "p": [1, 1, -1, 1]})
    events.to_csv(tmp_path / "events.csv", index=False)
    assert main(["--quiet", "accumulate", "--events", str(tmp_path / "events.csv"), "--width", "4", "--height", "3",
                 "--out", str(tmp_path / "frames")]) == 0
    frames = crud.read_frames(tmp_path / "frames" / "frames.npz")
    assert len(frames) == 3
    assert frames[0].values[0, 1] == 1.0
    assert frames[1].values[1, 2] == 1.0
    assert frames[2].values[2, 3] == 1.0


def test_accumulate_writes_overlays(tmp_path):
    events = pd.DataFrame({"t_us": [10, 20, 40_000, 70_000], "x": [1, 1, 2, 3], "y": [0, 0, 1, 2], "p": [1, 1, -1, 1]})
    events.to_csv(tmp_path / "events.csv", index=False)
    np.save(tmp_path / "image.npy", np.full((3, 4), 0.2))
    assert main(["--quiet", "accumulate", "--events", str(tmp_path / "events.csv"), "--width", "4", "--height", "3",
                 "--overlay", str(tmp_path / "image.npy"), "--out", str(tmp_path / "frames")]) == 0
    pngs = sorted((tmp_path / "frames" / "overlays").glob("*.png"))
    assert [p.name for p in pngs] == ["frame_000001.png", "frame_000002.png", "frame_000003.png"]
    first = crud.read_image(pngs[0])
    assert first.shape == (3, 4)
    assert first[0, 1] == pytest.approx(0.6, abs=2 / 255)
    assert first[2, 3] == pytest.approx(0.1, abs=2 / 255)


def test_accumulate_overlay_shape_mismatch(tmp_path):
    events = pd.DataFrame({"t_us": [10], "x": [1], "y": [0], "p": [1]})
    events.to_csv(tmp_path / "events.csv", index=False)
    np.save(tmp_path / "image.npy", np.zeros((5, 5)))
    assert main(["--quiet", "accumulate", "--events", str(tmp_path / "events.csv"), "--width", "4", "--height", "3",
                 "--overlay", str(tmp_path / "image.npy"), "--out", str(tmp_path / "frames")]) == 2


def test_missing_bundle_exits_with_2(tmp_path):
    assert main(["--quiet", "fuse", "--bundle", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 2


def test_unknown_preset_is_rejected(tmp_path):
    assert main(["--quiet", "simulate", "--preset", "hubble-1-close", "--out", str(tmp_path / "x")]) == 2
