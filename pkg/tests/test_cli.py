import json
import shutil

import numpy as np
import pytest

from contsplat.cli import EXIT_CONTRACT, EXIT_IO, EXIT_OK, EXIT_USAGE, delta_files, main
from contsplat.core import load_scene
from contsplat.history import load_delta

TINY = ["--width", "96", "--height", "72", "--gaussians", "400", "--train-views", "6", "--test-views", "2"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "fast.json").write_text(json.dumps({"n_samples": 60, "optim": {"iterations": 40}}))
    for op in ("add", "remove", "move"):
        assert main(["gen", "--op", op, "--out", str(root / op), "--seed", "3", *TINY]) == EXIT_OK
    return root


def test_gen_layout(workdir):
    case = workdir / "add"
    for name in ("before.splat", "after.splat", "train_cameras.json", "test_cameras.json", "case.json"):
        assert (case / name).exists()
    assert len(list((case / "train").glob("*.png"))) == 6
    assert json.loads((case / "case.json").read_text())["op"] == "add"


def test_render_round_trip(workdir, tmp_path):
    case = workdir / "add"
    args = ["render", "--scene", str(case / "after.splat"), "--cameras", str(case / "train_cameras.json")]
    assert main([*args, "--out", str(tmp_path / "r"), "--raw"]) == EXIT_OK
    a = sorted((tmp_path / "r").glob("*.png"))
    assert len(a) == 6 and len(list((tmp_path / "r").glob("*.f32"))) == 6
    # the case images were rendered from the same scene and cameras
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in sorted((case / "train").glob("*.png"))]


def test_detect_writes_masks(workdir, tmp_path):
    case = workdir / "add"
    rc = main(["detect", "--scene", str(case / "before.splat"), "--cameras", str(case / "train_cameras.json"),
               "--images", str(case / "train"), "--out", str(tmp_path / "m")])
    assert rc == EXIT_OK and len(list((tmp_path / "m").glob("*.png"))) == 6


def test_update_no_change(workdir, tmp_path, capsys):
    case = workdir / "add"
    rc = main(["render", "--scene", str(case / "before.splat"), "--cameras", str(case / "train_cameras.json"),
               "--out", str(tmp_path / "same")])
    assert rc == EXIT_OK
    rc = main(["update", "--scene", str(case / "before.splat"), "--cameras", str(case / "train_cameras.json"),
               "--images", str(tmp_path / "same"), "--out", str(tmp_path / "new.splat"),
               "--history", str(tmp_path / "h"), "--config", str(workdir / "fast.json")])
    assert rc == EXIT_OK and "no change detected" in capsys.readouterr().err
    assert (tmp_path / "new.splat").read_bytes() == (case / "before.splat").read_bytes()
    assert list(delta_files(tmp_path / "h")) == [1]


def test_three_updates_then_recover(workdir, tmp_path):
    shutil.copy(workdir / "add" / "before.splat", tmp_path / "s0.splat")
    cfg = ["--config", str(workdir / "fast.json")]
    for t, op in enumerate(("add", "remove", "move"), start=1):
        case = workdir / op
        rc = main(["update", "--scene", str(tmp_path / f"s{t - 1}.splat"), "--cameras",
                   str(case / "train_cameras.json"), "--images", str(case / "train"), "--out",
                   str(tmp_path / f"s{t}.splat"), "--history", str(tmp_path / "h"), "--changes",
                   str(tmp_path / f"c{t}.json"), "--log", str(tmp_path / f"log{t}.csv"), *cfg])
        assert rc == EXIT_OK
        assert json.loads((tmp_path / f"c{t}.json").read_text())["time"] == t
    assert sorted(delta_files(tmp_path / "h")) == [1, 2, 3]
    for n in range(3):
        rc = main(["recover", "--scene", str(tmp_path / "s3.splat"), "--history", str(tmp_path / "h"),
                   "--to", str(n), "--out", str(tmp_path / f"r{n}.splat")])
        assert rc == EXIT_OK
        assert (tmp_path / f"r{n}.splat").read_bytes() == (tmp_path / f"s{n}.splat").read_bytes()


def test_merge(workdir, tmp_path):
    base = workdir / "add" / "before.splat"
    cfg = ["--config", str(workdir / "fast.json")]
    for name, op in (("a", "add"), ("b", "remove")):
        case = workdir / op
        rc = main(["update", "--scene", str(base), "--cameras", str(case / "train_cameras.json"), "--images",
                   str(case / "train"), "--out", str(tmp_path / f"{name}.splat"), "--history",
                   str(tmp_path / name), *cfg])
        assert rc == EXIT_OK
    rc = main(["merge", "--base", str(base), "--update", str(tmp_path / "a.splat"),
               str(tmp_path / "a" / "delta_0001.cldelta"), "--out", str(tmp_path / "m.splat")])
    assert rc == EXIT_OK
    assert load_scene(tmp_path / "m.splat").equals(load_scene(tmp_path / "a.splat"))
    rc = main(["merge", "--base", str(base), "--update", str(tmp_path / "a.splat"),
               str(tmp_path / "a" / "delta_0001.cldelta"), "--update", str(tmp_path / "b.splat"),
               str(tmp_path / "b" / "delta_0001.cldelta"), "--out", str(tmp_path / "m2.splat")])
    assert rc == EXIT_OK
    parts = [(load_scene(tmp_path / f"{k}.splat"), load_delta(tmp_path / k / "delta_0001.cldelta")) for k in "ab"]
    flagged = sum(int(d.bitmap.sum()) for _, d in parts)
    added = sum(len(s) - d.static_count for s, d in parts)
    assert len(load_scene(tmp_path / "m2.splat")) == len(load_scene(base)) - flagged + added


def test_eval_report(workdir, tmp_path):
    rc = main(["eval", "--case", str(workdir / "add"), "--out", str(tmp_path / "r.json"), "--seed", "5",
               "--config", str(workdir / "fast.json")])
    assert rc == EXIT_OK
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["seed"] == 5 and report["precision"] == "f32"
    for key in ("psnr_pre", "psnr_post", "mask_precision", "mask_recall", "tile_precision", "tile_recall"):
        assert np.isfinite(report[key])


def test_help_exits_zero(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "update" in capsys.readouterr().out


def test_usage_errors():
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["render", "--scene", "x"]) == EXIT_USAGE


def test_missing_file_is_io_error(tmp_path):
    rc = main(["render", "--scene", str(tmp_path / "nope.splat"), "--cameras", str(tmp_path / "c.json"),
               "--out", str(tmp_path / "o")])
    assert rc == EXIT_IO


def test_corrupt_scene_is_io_error(workdir, tmp_path):
    (tmp_path / "bad.splat").write_bytes(b"garbage")
    rc = main(["render", "--scene", str(tmp_path / "bad.splat"), "--cameras",
               str(workdir / "add" / "train_cameras.json"), "--out", str(tmp_path / "o")])
    assert rc == EXIT_IO


def test_image_count_is_contract_error(workdir, tmp_path):
    case = workdir / "add"
    (tmp_path / "imgs").mkdir()
    shutil.copy(case / "train" / "0000.png", tmp_path / "imgs" / "0000.png")
    rc = main(["detect", "--scene", str(case / "before.splat"), "--cameras", str(case / "train_cameras.json"),
               "--images", str(tmp_path / "imgs"), "--out", str(tmp_path / "m")])
    assert rc == EXIT_CONTRACT
