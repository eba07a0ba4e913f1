import csv
import logging
import math

import numpy as np
import pytest

from consensus_seg.cli import EXIT_FAILURE, main, read_records
from consensus_seg.io import load_volume, read_pgm16, save_volume
from consensus_seg.metrics import projection_heatmap
from consensus_seg.morphology import largest_component
from consensus_seg.phantom import sphere
from consensus_seg.preprocess import fuse_triplanar, threshold_prob
from consensus_seg.stats import aggregate_report
from consensus_seg.volgrid import binary_mask, probability_volume, read_raw

from .helpers import rater_flags, write_phantom_batch


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_help_and_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    assert "fuse-triplanar" in capsys.readouterr().out


def test_fuse_identical_raters(tmp_path):
    m = np.zeros((10, 10, 10), dtype=bool)
    m[2:7, 3:8, 1:6] = True
    for role in ("a", "b", "c"):
        save_volume(tmp_path / role / "s1.nii", binary_mask(m))
    out = tmp_path / "out"
    args = ["fuse", "--out", str(out)] + sum((["--rater", f"{r}={tmp_path / r / '*.nii'}"] for r in "abc"), [])
    assert main(args) == 0
    assert load_volume(out / "s1_staple_mask.nii") == binary_mask(m)
    assert load_volume(out / "s1_mv_mask.nii") == binary_mask(m)
    rows = _csv(out / "s1_performance.csv")
    assert rows[0] == ["rater", "sensitivity", "specificity"]
    assert [r[0] for r in rows[1:]] == ["a", "b", "c"]
    assert all(float(v) > 0.999 for r in rows[1:] for v in r[1:])


def test_fuse_missing_rater_file(tmp_path, caplog):
    root = write_phantom_batch(tmp_path / "in", n=16, radius=5)
    (root / "r2" / "sub02.nii").unlink()
    out = tmp_path / "out"
    code = main(["fuse", "--out", str(out), "--threads", "1"] + rater_flags(root))
    assert code == EXIT_FAILURE
    assert "subject sub02: role r2: missing input file" in caplog.text
    # sub01 sorts first and ran before the failure
    assert (out / "sub01_staple_mask.nii").exists()
    assert not (out / "sub02_staple_mask.nii").exists()


def test_fuse_keep_going_finishes_other_subjects(tmp_path):
    root = write_phantom_batch(tmp_path / "in", subjects=("a1", "b2", "c3"), n=16, radius=6)
    (root / "r0" / "a1.nii").unlink()
    out = tmp_path / "out"
    assert main(["fuse", "--out", str(out), "--keep-going"] + rater_flags(root)) == EXIT_FAILURE
    assert (out / "b2_staple_mask.nii").exists() and (out / "c3_staple_mask.nii").exists()
    out2 = tmp_path / "out2"
    assert main(["fuse", "--out", str(out2)] + rater_flags(root)) == EXIT_FAILURE
    assert not (out2 / "c3_staple_mask.nii").exists()


def test_config_errors(tmp_path, capsys):
    assert main(["fuse", "--out", str(tmp_path), "--rater", f"a={tmp_path}/none*.nii",
                 "--rater", f"b={tmp_path}/none*.nii"]) == EXIT_FAILURE
    assert "no files match" in capsys.readouterr().err
    assert main(["fuse", "--out", str(tmp_path), "--rater", "broken"]) == EXIT_FAILURE
    save_volume(tmp_path / "x" / "s.nii", binary_mask(np.ones((2, 2, 2))))
    save_volume(tmp_path / "x" / "s.nii.gz", binary_mask(np.ones((2, 2, 2))))
    assert main(["fuse", "--out", str(tmp_path), "--rater", f"a={tmp_path}/x/*",
                 "--rater", f"b={tmp_path}/x/*"]) == EXIT_FAILURE
    assert "s" in capsys.readouterr().err


def test_eval_perfect_and_empty(tmp_path):
    truth = sphere(12, 4)
    save_volume(tmp_path / "gt" / "s1.nii", truth)
    save_volume(tmp_path / "gt" / "s2.nii", truth)
    save_volume(tmp_path / "same" / "s1.nii", truth)
    save_volume(tmp_path / "same" / "s2.nii", truth)
    save_volume(tmp_path / "empty" / "s1.nii", binary_mask(np.zeros(truth.dims)))
    save_volume(tmp_path / "empty" / "s2.nii", truth)
    out = tmp_path / "out"
    code = main(["eval", "--out", str(out), "--truth", f"{tmp_path}/gt/*.nii",
                 "--method", f"same={tmp_path}/same/*.nii", "--method", f"empty={tmp_path}/empty/*.nii"])
    assert code == 0
    rows = _csv(out / "records.csv")
    assert rows[0] == ["subject", "method", "dice", "sensitivity", "specificity", "hausdorff_mm", "mean_dist_mm"]
    by_key = {(r[0], r[1]): r[2:] for r in rows[1:]}
    assert [float(v) for v in by_key["s1", "same"]] == [1.0, 1.0, 1.0, 0.0, 0.0]
    assert by_key["s1", "empty"][3:] == ["EmptyMask", "EmptyMask"]
    assert float(by_key["s1", "empty"][0]) == 0.0
    for name in ("report.md", "report.csv", "significance.csv", "significance.pgm"):
        assert (out / name).exists()
    recs = read_records(out / "records.csv")
    assert math.isnan(recs[1][2].hausdorff_mm)


def test_eval_report_matches_stats_oracle(tmp_path):
    root = write_phantom_batch(tmp_path / "in", n=16, radius=6)
    out = tmp_path / "out"
    assert main(["eval", "--out", str(out), "--truth", f"{root}/truth/*.nii",
                 "--method", f"r0={root}/r0/*.nii", "--method", f"r3={root}/r3/*.nii",
                 "--reference", "r0"]) == 0
    expected = aggregate_report(read_records(out / "records.csv"), "r0")
    rows = _csv(out / "report.csv")
    assert [r[0] for r in rows[1:]] == ["r0", "r3"]
    assert float(rows[1][1]) == expected.summary("r0").mean["dice"]
    sig = _csv(out / "significance.csv")
    assert {r[0] for r in sig[1:]} == {"r3"}


def test_eval_shape_mismatch_keep_going(tmp_path, caplog):
    save_volume(tmp_path / "gt" / "a.nii", sphere(8, 2))
    save_volume(tmp_path / "gt" / "b.nii", sphere(8, 2))
    save_volume(tmp_path / "m" / "a.nii", sphere(9, 2))
    save_volume(tmp_path / "m" / "b.nii", sphere(8, 2))
    out = tmp_path / "out"
    code = main(["eval", "--out", str(out), "--keep-going", "--truth", f"{tmp_path}/gt/*.nii",
                 "--method", f"m={tmp_path}/m/*.nii"])
    assert code == EXIT_FAILURE
    assert "subject a: ShapeMismatch" in caplog.text
    assert [r[0] for r in _csv(out / "records.csv")[1:]] == ["b"]


def test_stats_from_records(tmp_path):
    root = write_phantom_batch(tmp_path / "in", n=16, radius=6)
    out = tmp_path / "out"
    main(["eval", "--out", str(out), "--truth", f"{root}/truth/*.nii",
          "--method", f"r1={root}/r1/*.nii", "--method", f"r2={root}/r2/*.nii"])
    out2 = tmp_path / "out2"
    assert main(["stats", "--out", str(out2), "--records", str(out / "records.csv")]) == 0
    assert (out2 / "report.md").read_bytes() == (out / "report.md").read_bytes()
    assert main(["stats", "--out", str(out2), "--records", str(out / "records.csv"),
                 "--reference", "nope"]) == EXIT_FAILURE


def test_heatmap_perfect_and_single_voxel(tmp_path):
    truth = np.zeros((6, 7, 8), dtype=bool)
    truth[2:4, 2:5, 3:6] = True
    extra = truth.copy()
    extra[0, 1, 2] = True
    save_volume(tmp_path / "gt" / "s.nii", binary_mask(truth))
    save_volume(tmp_path / "perfect" / "s.nii", binary_mask(truth))
    save_volume(tmp_path / "fp" / "s.nii", binary_mask(extra))
    out = tmp_path / "out"
    assert main(["heatmap", "--out", str(out), "--truth", f"{tmp_path}/gt/*.nii",
                 "--method", f"perfect={tmp_path}/perfect/*.nii", "--method", f"fp={tmp_path}/fp/*.nii"]) == 0
    for axis in "xyz":
        for kind in ("fp", "fn"):
            assert not read_pgm16((out / "perfect" / f"{kind}_{axis}.pgm").read_bytes()).any()
        plane = read_pgm16((out / "fp" / f"fp_{axis}.pgm").read_bytes())
        assert np.count_nonzero(plane) == 1 and plane.max() == 1.0
    np.testing.assert_array_equal(read_pgm16((out / "fp" / "fp_z.pgm").read_bytes()),
                                  projection_heatmap([binary_mask(extra & ~truth)], "z"))
    raw = read_raw((out / "fp" / "fp_z.raw").read_bytes())
    np.testing.assert_array_equal(raw.data[:, :, 0].T, projection_heatmap([binary_mask(extra & ~truth)], "z"))


def test_heatmap_random_stack_matches_projection(tmp_path):
    rng = np.random.default_rng(0)
    fps = []
    for s in range(3):
        t = rng.random((5, 6, 7)) < 0.4
        m = rng.random((5, 6, 7)) < 0.4
        save_volume(tmp_path / "gt" / f"s{s}.nii", binary_mask(t))
        save_volume(tmp_path / "m" / f"s{s}.nii", binary_mask(m))
        fps.append(binary_mask(m & ~t))
    out = tmp_path / "out"
    assert main(["heatmap", "--out", str(out), "--axis", "y", "--truth", f"{tmp_path}/gt/*.nii",
                 "--method", f"m={tmp_path}/m/*.nii"]) == 0
    got = read_pgm16((out / "m" / "fp_y.pgm").read_bytes())
    np.testing.assert_allclose(got, projection_heatmap(fps, "y"), atol=1 / 65535)
    assert not (out / "m" / "fp_x.pgm").exists()


def test_heatmap_grid_mismatch(tmp_path):
    save_volume(tmp_path / "gt" / "a.nii", sphere(8, 2))
    save_volume(tmp_path / "gt" / "b.nii", sphere(9, 2))
    save_volume(tmp_path / "m" / "a.nii", sphere(8, 2))
    save_volume(tmp_path / "m" / "b.nii", sphere(9, 2))
    assert main(["heatmap", "--out", str(tmp_path / "o"), "--truth", f"{tmp_path}/gt/*.nii",
                 "--method", f"m={tmp_path}/m/*.nii"]) == EXIT_FAILURE


def test_fuse_triplanar_composition(tmp_path):
    rng = np.random.default_rng(3)
    vols = [probability_volume(rng.random((9, 9, 9))) for _ in range(3)]
    for role, v in zip(("ax", "cor", "sag"), vols):
        save_volume(tmp_path / role / "s.nii", v)
    out = tmp_path / "out"
    assert main(["fuse-triplanar", "--out", str(out), "--connectivity", "6",
                 "--axial", f"{tmp_path}/ax/*.nii", "--coronal", f"{tmp_path}/cor/*.nii",
                 "--sagittal", f"{tmp_path}/sag/*.nii"]) == 0
    # the stored probability map is float32; compose from what was written
    stored = [load_volume(tmp_path / r / "s.nii") for r in ("ax", "cor", "sag")]
    prob = fuse_triplanar(*stored)
    expected = largest_component(threshold_prob(prob), 6)
    assert load_volume(out / "s_triplanar_mask.nii") == expected
    assert load_volume(out / "s_triplanar_thresh.nii") == threshold_prob(prob)


def test_fuse_triplanar_sphere(tmp_path):
    ball = sphere(16, 5)
    p = probability_volume(ball.data.astype(float))
    for role in ("ax", "cor", "sag"):
        save_volume(tmp_path / role / "s.nii", p)
    out = tmp_path / "out"
    assert main(["fuse-triplanar", "--out", str(out), "--axial", f"{tmp_path}/ax/*.nii",
                 "--coronal", f"{tmp_path}/cor/*.nii", "--sagittal", f"{tmp_path}/sag/*.nii"]) == 0
    assert load_volume(out / "s_triplanar_mask.nii") == ball


def test_patches_manifest(tmp_path):
    root = write_phantom_batch(tmp_path / "in", subjects=("s1",), n=16, radius=5)
    out = tmp_path / "out"
    assert main(["patches", "--out", str(out), "--image", f"{root}/image/*.nii",
                 "--brain", f"{root}/truth/*.nii", "--axis", "z", "--size", "8", "6",
                 "--per-slice", "2", "--seed", "5"]) == 0
    rows = _csv(out / "s1" / "manifest.csv")
    assert rows[0] == ["axis", "slice", "row0", "col0", "file"]
    brain = load_volume(root / "truth" / "s1.nii").data
    brain_slices = [k for k in range(16) if brain[:, :, k].any()]
    assert len(rows) - 1 == 2 * len(brain_slices)
    image = load_volume(root / "image" / "s1.nii").data
    for ax, k, r0, c0, name in rows[1:]:
        k, r0, c0 = int(k), int(r0), int(c0)
        patch = read_raw((out / "s1" / name).read_bytes()).data[:, :, 0].T
        assert patch.shape == (8, 6)
        np.testing.assert_array_equal(patch, image[:, :, k].T[r0:r0 + 8, c0:c0 + 6].astype(np.float32))
        assert (out / "s1" / name.replace(".raw", "_mask.raw")).exists()


def test_patches_too_large(tmp_path):
    root = write_phantom_batch(tmp_path / "in", subjects=("s1",), n=16, radius=5)
    assert main(["patches", "--out", str(tmp_path / "o"), "--image", f"{root}/image/*.nii",
                 "--brain", f"{root}/truth/*.nii", "--preset", "consnet"]) == EXIT_FAILURE


def test_config_file_precedence(tmp_path):
    root = write_phantom_batch(tmp_path / "in", subjects=("s1",), n=16, radius=5)
    cfg = tmp_path / "run.ini"
    cfg.write_text(
        "[global]\nout = from_file\nseed = 3\n\n"
        "[patch]\nsize = 4x4\nper_slice = 1\n\n"
        "[inputs]\nimage = in/image/*.nii\nbrain = in/truth/*.nii\n"
    )
    assert main(["patches", "--config", str(cfg), "--out", str(tmp_path / "flag_out")]) == 0
    rows = _csv(tmp_path / "flag_out" / "s1" / "manifest.csv")
    brain = load_volume(root / "truth" / "s1.nii").data
    assert len(rows) - 1 == sum(brain[:, :, k].any() for k in range(16))
    # global flags may also follow the subcommand, and win over the file
    assert main(["--seed", "3", "patches", "--config", str(cfg), "--per-slice", "2",
                 "--out", str(tmp_path / "o2")]) == 0
    assert len(_csv(tmp_path / "o2" / "s1" / "manifest.csv")) - 1 == 2 * (len(rows) - 1)


def test_log_level_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("CONSENSUS_SEG_LOG", "INFO")
    m = sphere(8, 2)
    for r in "ab":
        save_volume(tmp_path / r / "s.nii", m)
    assert main(["fuse", "--out", str(tmp_path / "o")] + sum((["--rater", f"{r}={tmp_path / r / '*.nii'}"] for r in "ab"), [])) == 0
    assert logging.getLogger("consensus_seg").getEffectiveLevel() == logging.INFO
