"""Image and report files."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

REPORT_COLUMNS = (
    "scene",
    "n",
    "camera",
    "stage",
    "algorithm",
    "bytes",
    "messages",
    "avg_segments_per_nonempty_pixel",
    "seconds",
    "ssim",
    "mse",
    "psnr",
    "max_abs_diff",
)


def write_ppm(path, rgb: np.ndarray) -> Path:
    """Binary P6 PPM from an ``(h, w, 3)`` uint8 array."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (h, w, 3) RGB, got {rgb.shape}")
    path = Path(path)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode("ascii"))
        pos = end
    pos += 1  # single whitespace before the raster
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != "P6" or maxval != 255:
        raise ValueError(f"unsupported PPM variant {magic} maxval={maxval}")
    return np.frombuffer(data[pos:pos + w * h * 3], dtype=np.uint8).reshape(h, w, 3).copy()


def write_png(path, rgb: np.ndarray) -> Path | None:
    """PNG copy when Pillow is installed; returns ``None`` otherwise."""
    try:
        from PIL import Image
    except ImportError:
        return None
    path = Path(path)
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), "RGB").save(path)
    return path


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        return repr(value)
    return str(value)


class ReportWriter:
    """CSV stream shared by communication and image-quality rows."""

    def __init__(self, path):
        self.path = Path(path)
        self._file = open(self.path, "w", newline="")
        self._writer = csv.DictWriter(self._file, fieldnames=REPORT_COLUMNS)
        self._writer.writeheader()

    def row(self, **fields):
        unknown = set(fields) - set(REPORT_COLUMNS)
        if unknown:
            raise ValueError(f"unknown report columns {sorted(unknown)}")
        self._writer.writerow({k: _format(fields.get(k)) for k in REPORT_COLUMNS})

    def close(self):
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_report(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_key_values(header: str, entries: Iterable[tuple[str, str]]) -> str:
    return "\n".join([header] + [f"{k}={v}" for k, v in entries]) + "\n"


def parse_key_values(text: str, header: str) -> dict[str, str]:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines or lines[0] != header:
        raise ValueError(f"expected header line {header!r}")
    out: dict[str, str] = {}
    for ln in lines[1:]:
        if "=" not in ln:
            raise ValueError(f"malformed line {ln!r}; expected key=value")
        key, value = ln.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def stats_rows(stats, scene: str, n: int, camera: int, algorithm: str) -> list[Mapping]:
    """Per-stage communication rows for one pipeline run."""
    rows = []
    if algorithm == "apc":
        rows.append(dict(stage="moments_allreduce", bytes=stats.bytes_moments_allreduce, messages=1))
        rows.append(dict(stage="color_reduce", bytes=stats.bytes_color_reduce, messages=1))
        rows.append(dict(stage="total", bytes=stats.total_bytes, messages=stats.messages))
    elif algorithm == "sort_last":
        rows.append(dict(stage="segment_exchange", bytes=stats.bytes_segments, messages=stats.messages))
        rows.append(dict(stage="segment_exchange_color_only", bytes=stats.bytes_segments_color_only,
                         messages=stats.messages))
    for r in rows:
        r.update(scene=scene, n=n, camera=camera, algorithm=algorithm)
    return rows
