import numpy as np
import pytest

from apc.cli import ConfigError, RunConfig, main
from apc.io import parse_key_values, read_ppm, read_report, write_key_values, write_ppm

SMALL = ["--width", "24", "--height", "24"]


def run(tmp_path, *args):
    return main(list(args) + ["--out", str(tmp_path)])


def quality_rows(path):
    return [r for r in read_report(path / "report.csv") if r["stage"] == "quality"]


def test_config_defaults_round_trip():
    cfg = RunConfig()
    assert RunConfig.from_text(cfg.to_text()) == cfg


def test_config_round_trip_with_every_field_changed():
    cfg = RunConfig(scene="random_slab", scene_params={"pieces": 12, "opacity": 0.25}, ranks=3, width=33,
                    height=17, orbit=5, orbit_distance=2.5, elevation=12.5, fov=30.0, step=0.25,
                    moment_bias=1e-3, overestimation=0.5, absorbance_max=8.0, algorithms=("apc",),
                    compare=True, check=True, out="x/y", background="black", seed=9, sweep=(2, 4),
                    min_ssim=0.9, min_psnr=20.0, max_channel_diff=1e-3, moment_scalars=4,
                    nonempty_tiles=True, png=True)
    again = RunConfig.from_text(cfg.to_text())
    assert again == cfg
    assert again.to_text() == cfg.to_text()


@pytest.mark.parametrize("text", ["apc-config 2\n", "apc-config 1\nbogus=1\n", "apc-config 1\nwidth=abc\n",
                                  "apc-config 1\nnot a pair\n"])
def test_config_rejects_bad_files(text):
    with pytest.raises(ConfigError):
        RunConfig.from_text(text)


@pytest.mark.parametrize("kwargs", [dict(width=0), dict(ranks=0), dict(step=0.0), dict(algorithms=("x",)),
                                    dict(moment_bias=1.0), dict(background="grey"), dict(scene="nope"),
                                    dict(orbit=0)])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        RunConfig(**kwargs).validate()


def test_key_value_helpers():
    text = write_key_values("hdr 1", [("a", "1"), ("b", "x=y")])
    assert parse_key_values("# comment\n" + text, "hdr 1") == {"a": "1", "b": "x=y"}


def test_ppm_round_trip(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", rgb)
    assert (tmp_path / "a.ppm").read_bytes()[:11] == b"P6\n7 5\n255\n"
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), rgb)


def test_render_sandwich_three_ranks_identical_to_single_node(tmp_path):
    code = run(tmp_path, "render", "--scene", "sandwich", "--ranks", "3", "--algorithms",
               "apc,single_node_mboit", "--compare", "--check", *SMALL)
    assert code == 0
    (row,) = quality_rows(tmp_path)
    assert row["algorithm"] == "apc_vs_single_node_mboit"
    assert float(row["max_abs_diff"]) <= 1e-4
    assert (tmp_path / "sandwich_apc_cam0.ppm").exists()
    assert (tmp_path / "sandwich_diff_apc_vs_single_node_mboit_cam0.ppm").exists()
    assert (tmp_path / "summary.txt").read_text()


def test_render_concentric_ssim_row(tmp_path):
    code = run(tmp_path, "render", "--scene", "concentric", "--ranks", "2", "--algorithms", "apc,sort_last",
               "--compare", "--width", "96", "--height", "96", "--scene-param", "resolution=32")
    assert code == 0
    (row,) = quality_rows(tmp_path)
    assert float(row["ssim"]) >= 0.95
    stages = {r["stage"] for r in read_report(tmp_path / "report.csv")}
    assert {"moments_allreduce", "color_reduce", "segment_exchange", "cost_model", "quality"} <= stages


def test_render_single_rank_bit_identical(tmp_path):
    assert run(tmp_path, "render", "--scene", "sandwich", "--ranks", "1", "--compare", *SMALL) == 0
    a = (tmp_path / "sandwich_apc_cam0.ppm").read_bytes()
    b = (tmp_path / "sandwich_single_node_mboit_cam0.ppm").read_bytes()
    assert a == b
    row = [r for r in quality_rows(tmp_path) if r["algorithm"] == "apc_vs_single_node_mboit"][0]
    assert float(row["max_abs_diff"]) == 0.0


def test_check_mode_fails_on_threshold_but_writes_images(tmp_path):
    cfg = tmp_path / "strict.cfg"
    cfg.write_text(RunConfig(min_ssim=1.0, min_psnr=200.0).to_text())
    out = tmp_path / "out"
    args = ["render", "--config", str(cfg), "--scene", "spikes", "--ranks", "2", "--algorithms",
            "apc,sort_last", "--compare", "--scene-param", "resolution=16", *SMALL, "--out", str(out)]
    assert main(args + ["--check"]) == 1
    assert (out / "spikes_diff_apc_vs_sort_last_cam0.ppm").exists()
    assert (out / "spikes_heatmap_cam0.ppm").exists()
    assert main(args) == 0


def test_render_outputs_are_deterministic(tmp_path):
    args = ["render", "--scene", "random_slab", "--ranks", "3", "--seed", "4", "--orbit", "2", "--compare",
            *SMALL]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in names:
        if name == "config.txt":  # records the output directory, which differs by design
            a = RunConfig.from_text((tmp_path / "a" / name).read_text())
            b = RunConfig.from_text((tmp_path / "b" / name).read_text())
            assert a.updated({"out": "x"}) == b.updated({"out": "x"})
            continue
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(RunConfig(width=40, height=40, algorithms=("apc",)).to_text())
    out = tmp_path / "out"
    assert main(["render", "--config", str(cfg), "--width", "20", "--height", "16", "--out", str(out)]) == 0
    effective = RunConfig.from_text((out / "config.txt").read_text())
    assert (effective.width, effective.height, effective.algorithms) == (20, 16, ("apc",))
    assert read_ppm(out / "sandwich_apc_cam0.ppm").shape == (16, 20, 3)


def test_bench_sweep(tmp_path):
    assert run(tmp_path, "bench", "--scene", "sandwich", "--sweep", "1,2,4", *SMALL) == 0
    rows = read_report(tmp_path / "bench.csv")
    totals = {int(r["n"]): int(r["bytes"]) for r in rows if r["stage"] == "total" and r["algorithm"] == "apc"}
    assert totals == {n: 9 * n * 24 * 24 * 4 for n in (1, 2, 4)}
    stages = {r["stage"] for r in rows}
    assert {"rendering_total", "compositing_total", "render_moments", "blend", "cost_model"} <= stages
    assert "desk-scale" in (tmp_path / "summary.txt").read_text()
    for n in (1, 2, 4):
        assert (tmp_path / f"heatmap_n{n}_cam0.ppm").exists()


def test_bench_empty_sweep_is_an_error(tmp_path, capsys):
    assert run(tmp_path, "bench", "--sweep", "", *SMALL) == 2
    assert "sweep" in capsys.readouterr().err


@pytest.mark.parametrize("args", [["--width", "0"], ["--scene", "nope"], ["--scene-param", "novalue"],
                                  ["--scene", "slab", "--ranks", "3"], ["--config", "/nonexistent/cfg"],
                                  ["--scene-param", "bogus=1"]])
def test_invalid_configuration_exit_code(tmp_path, args, capsys):
    assert run(tmp_path, "render", *SMALL, *args) == 2
    assert "invalid configuration" in capsys.readouterr().err


def test_unwritable_output_exit_code(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["render", *SMALL, "--out", str(blocker / "sub")]) == 4
    assert "cannot write" in capsys.readouterr().err


def test_degeneracy_exit_code(tmp_path, monkeypatch, capsys):
    import apc.renderer as renderer
    from apc.moments import MomentDegeneracyError

    def failing(b, z, params):
        raise MomentDegeneracyError("not positive semi-definite", (0,))

    monkeypatch.setattr(renderer, "reconstruct_transmittance_array", failing)
    assert run(tmp_path, "render", "--algorithms", "apc", *SMALL) == 3
    assert "rendering failed" in capsys.readouterr().err
