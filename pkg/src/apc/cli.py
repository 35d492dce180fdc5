"""Command-line driver: ``apc render`` and ``apc bench``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .compositor import RankError, cost_model, run_apc, run_sort_last
from .io import (
    ReportWriter,
    parse_key_values,
    stats_rows,
    write_key_values,
    write_png,
    write_ppm,
)
from .metrics import compare_images, diff_image, segment_heatmap, to_rgb8
from .moments import MomentDegeneracyError, ReconstructionParams
from .renderer import render_single_node_mboit
from .scene import SCENE_BUILDERS, ScenePartition, build_scene

log = logging.getLogger("apc")

CONFIG_HEADER = "apc-config 1"
ALGORITHMS = ("apc", "sort_last", "single_node_mboit")
BACKGROUNDS = {"white": (1.0, 1.0, 1.0), "black": (0.0, 0.0, 0.0)}
COMPARE_PAIRS = (("apc", "sort_last"), ("apc", "single_node_mboit"))

EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_RENDER = 3
EXIT_OUTPUT = 4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scene: str = "sandwich"
    scene_params: dict = field(default_factory=dict)
    ranks: int = 2
    width: int = 256
    height: int = 256
    orbit: int = 1
    orbit_distance: float = 3.0  # multiples of the scene's bounding radius
    elevation: float = 0.0
    fov: float = 40.0
    step: float = 0.5
    moment_bias: float = ReconstructionParams.moment_bias
    overestimation: float = ReconstructionParams.overestimation
    absorbance_max: float = ReconstructionParams.absorbance_max
    algorithms: tuple = ALGORITHMS
    compare: bool = False
    check: bool = False
    out: str = "apc_out"
    background: str = "white"
    seed: int = 0
    sweep: tuple = (1, 2, 4, 8)
    min_ssim: float = 0.95
    min_psnr: float = 25.0
    max_channel_diff: float = 1e-4
    moment_scalars: int = 5
    nonempty_tiles: bool = False
    png: bool = False

    def validate(self) -> "RunConfig":
        if self.scene not in SCENE_BUILDERS:
            raise ConfigError(f"unknown scene {self.scene!r}; choose from {sorted(SCENE_BUILDERS)}")
        if self.width < 1 or self.height < 1:
            raise ConfigError("width and height must be at least 1")
        if self.ranks < 1:
            raise ConfigError("ranks must be at least 1")
        if self.orbit < 1:
            raise ConfigError("orbit needs at least one camera")
        if not self.step > 0:
            raise ConfigError("step must be positive")
        unknown = set(self.algorithms) - set(ALGORITHMS)
        if unknown or not self.algorithms:
            raise ConfigError(f"algorithms must be a non-empty subset of {ALGORITHMS}")
        if self.background not in BACKGROUNDS:
            raise ConfigError(f"background must be one of {sorted(BACKGROUNDS)}")
        if self.moment_scalars not in (4, 5):
            raise ConfigError("moment_scalars must be 4 or 5")
        try:
            self.params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def params(self) -> ReconstructionParams:
        return ReconstructionParams(moment_bias=self.moment_bias, overestimation=self.overestimation,
                                    absorbance_max=self.absorbance_max)

    # -- file format ---------------------------------------------------------

    def to_text(self) -> str:
        entries = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "scene_params":
                entries += [(f"scene.{k}", _encode(v)) for k, v in sorted(value.items())]
            else:
                entries.append((f.name, _encode(value)))
        return write_key_values(CONFIG_HEADER, entries)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        try:
            raw = parse_key_values(text, CONFIG_HEADER)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cls().updated(raw)

    def updated(self, raw: dict) -> "RunConfig":
        """Copy with string-valued overrides applied."""
        cfg = dataclasses.replace(self, scene_params=dict(self.scene_params))
        defaults = RunConfig()
        for key, text in raw.items():
            if key.startswith("scene."):
                cfg.scene_params[key[len("scene."):]] = _decode_scalar(text)
                continue
            if not hasattr(defaults, key) or key == "scene_params":
                raise ConfigError(f"unknown config key {key!r}")
            template = getattr(defaults, key)
            try:
                setattr(cfg, key, _decode_like(template, text))
            except ValueError:
                raise ConfigError(f"bad value {text!r} for {key}") from None
        return cfg

    def background_rgb(self) -> tuple:
        return BACKGROUNDS[self.background]


def _encode(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_encode(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _decode_like(template, text: str):
    if isinstance(template, bool):
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(text)
        return text.lower() in ("true", "1", "yes")
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    if isinstance(template, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        if template and isinstance(template[0], int):
            return tuple(int(t) for t in items)
        return tuple(items)
    return text


def _decode_scalar(text: str):
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


# ---------------------------------------------------------------------------
# Scene construction
# ---------------------------------------------------------------------------

RANK_PARAM = {"sandwich": "n", "concentric": "rank_split", "spikes": "ranks", "random_slab": "ranks"}


def make_scene(cfg: RunConfig, ranks: int | None = None) -> ScenePartition:
    params = dict(cfg.scene_params)
    n = cfg.ranks if ranks is None else ranks
    if cfg.scene in RANK_PARAM:
        params[RANK_PARAM[cfg.scene]] = n
    elif n != 1:
        raise ConfigError(f"scene {cfg.scene!r} is single-rank; use random_slab for partitions")
    if cfg.scene == "random_slab":
        params.setdefault("seed", cfg.seed)
    try:
        return build_scene(cfg.scene, **params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cannot build scene {cfg.scene!r}: {exc}") from None


def make_cameras(cfg: RunConfig, scene: ScenePartition):
    return scene.default_cameras(cfg.orbit, cfg.elevation, cfg.fov, cfg.width / cfg.height, cfg.orbit_distance)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _save(cfg: RunConfig, out: Path, stem: str, image, written: list):
    rgb = to_rgb8(image, cfg.background_rgb())
    written.append(write_ppm(out / f"{stem}.ppm", rgb))
    if cfg.png:
        png = write_png(out / f"{stem}.png", rgb)
        if png is not None:
            written.append(png)


def cmd_render(cfg: RunConfig) -> int:
    """Render every requested algorithm for every orbit camera and write images and reports."""
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = make_scene(cfg)
    params = cfg.params()
    background = cfg.background_rgb()
    failures: list[str] = []
    written: list[Path] = []
    summary = [f"scene={scene.name} ranks={scene.ranks} size={cfg.width}x{cfg.height} cameras={cfg.orbit}"]

    (out / "config.txt").write_text(cfg.to_text())
    with ReportWriter(out / "report.csv") as report:
        for cam_index, camera in enumerate(make_cameras(cfg, scene)):
            images = {}
            if "apc" in cfg.algorithms:
                result = run_apc(scene, camera, None, cfg.step, params, cfg.width, cfg.height,
                                 moment_scalars=cfg.moment_scalars, nonempty_tiles_only=cfg.nonempty_tiles)
                images["apc"] = result.image
                for row in stats_rows(result.stats, scene.name, scene.ranks, cam_index, "apc"):
                    report.row(**row)
            if "sort_last" in cfg.algorithms:
                result = run_sort_last(scene, camera, None, cfg.step, cfg.width, cfg.height)
                images["sort_last"] = result.image
                for row in stats_rows(result.stats, scene.name, scene.ranks, cam_index, "sort_last"):
                    report.row(**row)
                segments = _all_segments(result)
                for algorithm in ("direct_send", "binary_swap"):
                    if algorithm == "binary_swap" and scene.ranks & (scene.ranks - 1):
                        continue
                    cost = cost_model(algorithm, scene.ranks, cfg.width, cfg.height, segments)
                    report.row(scene=scene.name, n=scene.ranks, camera=cam_index, stage="cost_model",
                               algorithm=algorithm, bytes=cost.bytes,
                               avg_segments_per_nonempty_pixel=cost.avg_segments_per_nonempty_pixel)
                cost = cost_model("apc", scene.ranks, cfg.width, cfg.height, segments,
                                  moment_scalars=cfg.moment_scalars)
                report.row(scene=scene.name, n=scene.ranks, camera=cam_index, stage="cost_model",
                           algorithm="apc", bytes=cost.bytes,
                           avg_segments_per_nonempty_pixel=cost.avg_segments_per_nonempty_pixel)
                heat, peak = segment_heatmap(result.stats.segment_counts)
                _save(cfg, out, f"{scene.name}_heatmap_cam{cam_index}", heat, written)
                summary.append(f"camera {cam_index}: max segments per pixel = {peak}")
            if "single_node_mboit" in cfg.algorithms:
                images["single_node_mboit"] = render_single_node_mboit(
                    scene.bricks, camera, scene.transfer_function, cfg.step, params, cfg.width, cfg.height)

            for name, image in images.items():
                _save(cfg, out, f"{scene.name}_{name}_cam{cam_index}", image, written)

            if cfg.compare:
                for a, b in COMPARE_PAIRS:
                    if a not in images or b not in images:
                        continue
                    q = compare_images(images[a], images[b], background)
                    report.row(scene=scene.name, n=scene.ranks, camera=cam_index, stage="quality",
                               algorithm=f"{a}_vs_{b}", ssim=q.ssim, mse=q.mse, psnr=q.psnr,
                               max_abs_diff=q.max_channel_diff)
                    _save(cfg, out, f"{scene.name}_diff_{a}_vs_{b}_cam{cam_index}",
                          diff_image(images[a], images[b], 3.0), written)
                    summary.append(f"camera {cam_index}: {a} vs {b}: {q.summary()}")
                    failures += _threshold_failures(cfg, a, b, q, cam_index)

    summary += [f"FAIL {f}" for f in failures] or ["all comparisons within thresholds"]
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))
    if cfg.check and failures:
        return EXIT_CHECK_FAILED
    return 0


def _all_segments(result):
    from .renderer import SegmentList

    return SegmentList.concatenate([s.with_rank(r) for r, s in enumerate(result.partials)])


def _threshold_failures(cfg: RunConfig, a: str, b: str, q, cam: int) -> list[str]:
    failures = []
    if b == "single_node_mboit" and q.max_channel_diff > cfg.max_channel_diff:
        failures.append(f"camera {cam}: {a} vs {b} max channel diff {q.max_channel_diff:.3g} > {cfg.max_channel_diff}")
    if b == "sort_last":
        if q.ssim < cfg.min_ssim:
            failures.append(f"camera {cam}: {a} vs {b} SSIM {q.ssim:.4f} < {cfg.min_ssim}")
        if q.psnr < cfg.min_psnr:
            failures.append(f"camera {cam}: {a} vs {b} PSNR {q.psnr:.2f} < {cfg.min_psnr}")
    return failures


RENDER_STAGES = {"render_moments", "render_resolve", "render_segments"}


def cmd_bench(cfg: RunConfig) -> int:
    """Weak-scaling sweep over rank counts: stage timings, communication volume, heat maps.

    Timings are single-machine wall clock and only meaningful relative to
    each other.
    """
    cfg.validate()
    if not cfg.sweep:
        raise ConfigError("bench needs a non-empty sweep of rank counts")
    if any(n < 1 for n in cfg.sweep):
        raise ConfigError("sweep rank counts must be at least 1")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    params = cfg.params()
    lines = ["desk-scale benchmark: wall-clock seconds on one machine, not comparable to cluster runs"]
    written: list[Path] = []
    with ReportWriter(out / "bench.csv") as report:
        for n in cfg.sweep:
            scene = make_scene(cfg, n)
            for cam_index, camera in enumerate(make_cameras(cfg, scene)):
                apc = run_apc(scene, camera, None, cfg.step, params, cfg.width, cfg.height,
                              moment_scalars=cfg.moment_scalars, nonempty_tiles_only=cfg.nonempty_tiles)
                sl = run_sort_last(scene, camera, None, cfg.step, cfg.width, cfg.height)
                for algorithm, result in (("apc", apc), ("sort_last", sl)):
                    for row in stats_rows(result.stats, scene.name, n, cam_index, algorithm):
                        report.row(**row)
                    render = compositing = 0.0
                    for stage, seconds in sorted(result.stats.timings.items()):
                        report.row(scene=scene.name, n=n, camera=cam_index, stage=stage,
                                   algorithm=algorithm, seconds=seconds)
                        if stage in RENDER_STAGES:
                            render += seconds
                        else:
                            compositing += seconds
                    report.row(scene=scene.name, n=n, camera=cam_index, stage="rendering_total",
                               algorithm=algorithm, seconds=render)
                    report.row(scene=scene.name, n=n, camera=cam_index, stage="compositing_total",
                               algorithm=algorithm, seconds=compositing)
                    lines.append(f"n={n} camera={cam_index} {algorithm}: rendering {render:.3f}s "
                                 f"compositing {compositing:.3f}s bytes {result.stats.total_bytes}")
                segments = _all_segments(sl)
                models = ["apc", "direct_send"] + (["binary_swap"] if n & (n - 1) == 0 else [])
                for algorithm in models:
                    cost = cost_model(algorithm, n, cfg.width, cfg.height, segments,
                                      moment_scalars=cfg.moment_scalars)
                    report.row(scene=scene.name, n=n, camera=cam_index, stage="cost_model",
                               algorithm=algorithm, bytes=cost.bytes,
                               avg_segments_per_nonempty_pixel=cost.avg_segments_per_nonempty_pixel)
                heat, peak = segment_heatmap(sl.stats.segment_counts)
                _save(cfg, out, f"heatmap_n{n}_cam{cam_index}", heat, written)
                lines.append(f"n={n} camera={cam_index} max segments per pixel = {peak}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file; flags override its values")
    common.add_argument("--scene", help="sandwich, concentric, spikes, slab or random_slab")
    common.add_argument("--scene-param", action="append", default=[], metavar="KEY=VALUE",
                        help="scene generator parameter (repeatable)")
    common.add_argument("--ranks", type=int)
    common.add_argument("--width", type=int)
    common.add_argument("--height", type=int)
    common.add_argument("--orbit", type=int, help="number of cameras on the orbit")
    common.add_argument("--elevation", type=float)
    common.add_argument("--step", type=float, help="ray step in world units (voxel spacing is 1)")
    common.add_argument("--moment-bias", type=float)
    common.add_argument("--overestimation", type=float)
    common.add_argument("--absorbance-max", type=float)
    common.add_argument("--algorithms", help="comma-separated subset of " + ",".join(ALGORITHMS))
    common.add_argument("--compare", action="store_true", default=None)
    common.add_argument("--check", action="store_true", default=None,
                        help="exit non-zero when a comparison misses its threshold")
    common.add_argument("--out")
    common.add_argument("--seed", type=int)
    common.add_argument("--background", choices=sorted(BACKGROUNDS))
    common.add_argument("--png", action="store_true", default=None, help="also write PNG copies")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="apc", description="Approximate puzzlepiece compositing")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("render", parents=[common], help="render and compare one configuration")
    bench = sub.add_parser("bench", parents=[common], help="sweep rank counts")
    bench.add_argument("--sweep", help="comma-separated rank counts, e.g. 1,2,4,8")
    return parser


FLAG_KEYS = ("scene", "ranks", "width", "height", "orbit", "elevation", "step", "moment_bias",
             "overestimation", "absorbance_max", "algorithms", "compare", "check", "out", "seed",
             "background", "png", "sweep")


def config_from_args(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        try:
            cfg = RunConfig.from_text(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    overrides = {}
    for key in FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value if isinstance(value, str) else _encode(value)
    for item in args.scene_param:
        if "=" not in item:
            raise ConfigError(f"--scene-param expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[f"scene.{k}"] = v
    return cfg.updated(overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        start = time.perf_counter()
        code = cmd_render(cfg) if args.command == "render" else cmd_bench(cfg)
        log.info("finished in %.2fs", time.perf_counter() - start)
        return code
    except ConfigError as exc:
        print(f"apc: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MomentDegeneracyError, RankError) as exc:
        print(f"apc: rendering failed: {exc}", file=sys.stderr)
        return EXIT_RENDER
    except OSError as exc:
        print(f"apc: cannot write output: {exc}", file=sys.stderr)
        return EXIT_OUTPUT


if __name__ == "__main__":
    sys.exit(main())
