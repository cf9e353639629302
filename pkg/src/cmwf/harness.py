"""SI-SDR scoring, Monte Carlo sweeps, CSV persistence and SVG plots."""
from __future__ import annotations

import configparser
import csv
import io
import math
import time
import xml.etree.ElementTree as ET
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import scipy.stats

from .beamformer import VARIANTS, BatchEnhancer, EnhanceConfig, recursive_enhance
from .pitch import pitch_track
from .scene import HarmonicSourceParams, SceneConfig, simulate_scene
from .stft import AudioBuffer, interior

SI_SDR_CAP = 100.0
SWEEPS = ("isnr", "shifts_C", "mics_M", "f0_bias", "recursive_smoke")
CSV_FIELDS = ("sweep", "value", "run", "variant", "si_sdr_in_db", "si_sdr_out_db",
              "improvement_db", "wall_ms", "status")


def _mono(x) -> np.ndarray:
    if isinstance(x, AudioBuffer):
        if x.n_channels != 1:
            raise ValueError(f"expected one channel, got {x.n_channels}")
        return x.samples[0]
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-D signal, got shape {x.shape}")
    return x


def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR in dB, capped at +100 dB."""
    est, ref = _mono(estimate), _mono(reference)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape[0]} vs {ref.shape[0]}")
    ref_energy = ref @ ref
    if ref_energy == 0:
        raise ValueError("reference signal is all zeros")
    target = (est @ ref) / ref_energy * ref
    t_energy = target @ target
    residual = est - target
    r_energy = residual @ residual
    if r_energy <= t_energy * 10 ** (-SI_SDR_CAP / 10):
        return SI_SDR_CAP
    return float(10 * math.log10(t_energy / r_energy))


@dataclass(frozen=True)
class ExperimentConfig:
    sweep: str = "isnr"
    values: tuple = (-20.0, -10.0, 0.0)
    runs: int = 50
    variants: tuple = ("MWF", "cMWF")
    seed: int = 0
    workers: int = 1
    f0_source: str = "truth"
    # scene
    fs: float = 16000.0
    M: int = 2
    isnr_db: float = -10.0
    sensor_snr_db: float = 30.0
    rt60: float = 0.61
    duration: float = 5.0
    noise_only_seconds: float = 2.0
    # beamformer
    K: int = 512
    R: int = 128
    C: int = 5
    eps_bin: float = 1.5
    lambda_min: float = 1e-9
    lambda_max: float = 1e-4
    beta: float = 0.05
    D0: float = 0.005
    D1: float = 0.2
    routing: str = "harmonics"

    def __post_init__(self):
        if self.sweep not in SWEEPS:
            raise ValueError(f"sweep must be one of {SWEEPS}, got {self.sweep!r}")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if len(self.values) == 0:
            raise ValueError("sweep values must be non-empty")
        for v in self.variants:
            if v not in VARIANTS:
                raise ValueError(f"unknown variant {v!r}")
        if self.f0_source not in ("truth", "tracked"):
            raise ValueError("f0_source must be 'truth' or 'tracked'")

    def enhance_config(self, **override) -> EnhanceConfig:
        base = dict(K=self.K, R=self.R, C=self.C, eps_bin=self.eps_bin,
                    lambda_min=self.lambda_min, lambda_max=self.lambda_max,
                    beta=self.beta, D0=self.D0, D1=self.D1, routing=self.routing)
        base.update(override)
        return EnhanceConfig(**base)

    def scene_config(self, **override) -> SceneConfig:
        base = dict(M=self.M, isnr_db=self.isnr_db, sensor_snr_db=self.sensor_snr_db,
                    fs=self.fs, rt60=self.rt60, noise_only_seconds=self.noise_only_seconds)
        base.update(override)
        return SceneConfig(**base)


_SECTIONS = {
    "experiment": ("sweep", "values", "runs", "variants", "seed", "workers", "f0_source"),
    "scene": ("fs", "M", "isnr_db", "sensor_snr_db", "rt60", "duration", "noise_only_seconds"),
    "beamformer": ("K", "R", "C", "eps_bin", "lambda_min", "lambda_max", "beta", "D0", "D1",
                   "routing"),
}


def config_to_text(config: ExperimentConfig) -> str:
    """INI text with every field, readable by :func:`load_config`."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for section, keys in _SECTIONS.items():
        parser[section] = {}
        for key in keys:
            value = getattr(config, key)
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            parser[section][key] = str(value)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def load_config(path: str | Path, **override) -> ExperimentConfig:
    """Read an INI config; missing keys keep their defaults."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser.read(path)
    defaults = ExperimentConfig()
    known = {k for keys in _SECTIONS.values() for k in keys}
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ValueError(f"{path}: unknown section [{section}]")
        for key, raw in parser[section].items():
            if key not in known:
                raise ValueError(f"{path}: unknown key {key!r} in [{section}]")
            values[key] = _parse_value(key, raw, getattr(defaults, key), path)
    values.update(override)
    return ExperimentConfig(**values)


def _parse_value(key, raw, default, path):
    try:
        if key == "values":
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if key == "variants":
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ValueError(f"{path}: bad value for {key}: {raw!r}") from exc


@dataclass(frozen=True)
class ResultRecord:
    sweep: str
    value: float
    run: int
    variant: str
    si_sdr_in_db: float
    si_sdr_out_db: float
    improvement_db: float
    wall_ms: float
    status: str = "ok"

    def row(self) -> dict:
        out = asdict(self)
        for k in ("value", "si_sdr_in_db", "si_sdr_out_db", "improvement_db", "wall_ms"):
            out[k] = repr(float(out[k]))
        return out


def run_seed(config: ExperimentConfig, run: int) -> np.random.SeedSequence:
    """Seed of Monte Carlo run ``run``, shared by every sweep value (paired runs)."""
    return np.random.SeedSequence(config.seed, spawn_key=(run,))


def _score(output: AudioBuffer, noisy: AudioBuffer, reference: np.ndarray, sl: slice,
           ref_mic: int = 0):
    s_in = si_sdr(noisy.samples[ref_mic][sl], reference[sl])
    s_out = si_sdr(output.samples[0][sl], reference[sl])
    return s_in, s_out


def run_cell(config: ExperimentConfig, value: float, run: int) -> list[ResultRecord]:
    """Every variant on one scene; failures become rows with an error status."""
    sweep = config.sweep
    try:
        scene_kw, enh_kw = {}, {}
        if sweep == "isnr":
            scene_kw["isnr_db"] = float(value)
        elif sweep == "mics_M":
            scene_kw["M"] = int(value)
        elif sweep == "shifts_C":
            enh_kw["C"] = int(value)
        elif sweep == "recursive_smoke":
            enh_kw["beta"] = float(value)
        scfg = config.scene_config(**scene_kw)
        ecfg = config.enhance_config(**enh_kw)
        source = HarmonicSourceParams(duration=config.duration)
        notes = 2 if sweep == "recursive_smoke" else 1
        scene = simulate_scene(scfg, source, run_seed(config, run), notes=notes,
                               note_seconds=config.duration / 2)
        ref = scene.target.samples[scfg.ref_mic]
        sl = interior(len(ref), ecfg.win)
        records = []
        if sweep == "recursive_smoke":
            track = pitch_track(scene.target.channel(scfg.ref_mic), ecfg.win,
                                params=ecfg.smoothing)
            for variant in config.variants:
                t0 = time.perf_counter()
                res = recursive_enhance(scene.noisy, scene.noise_only, ecfg, variant, track,
                                        scene.target)
                wall = 1e3 * (time.perf_counter() - t0)
                s_in, s_out = _score(res.audio, scene.noisy, ref, sl, scfg.ref_mic)
                records.append(ResultRecord(sweep, float(value), run, variant, s_in, s_out,
                                            s_out - s_in, wall))
            return records
        if config.f0_source == "tracked":
            track = pitch_track(scene.target.channel(scfg.ref_mic), ecfg.win)
            voiced = track.raw[track.voiced]
            f0 = float(np.median(voiced)) * scfg.fs / (2 * np.pi) if voiced.size else None
        else:
            f0 = scene.truth.f0
        if sweep == "f0_bias" and f0:
            f0 = f0 * (1 + float(value) / 100)
        enhancer = BatchEnhancer(scene.noisy, scene.noise_only, f0, ecfg, scene.target)
        for variant in config.variants:
            t0 = time.perf_counter()
            out = enhancer.run(variant).audio
            wall = 1e3 * (time.perf_counter() - t0)
            s_in, s_out = _score(out, scene.noisy, ref, sl, scfg.ref_mic)
            records.append(ResultRecord(sweep, float(value), run, variant, s_in, s_out,
                                        s_out - s_in, wall))
        return records
    except Exception as exc:  # a failed run must not stop the sweep
        msg = f"error: {type(exc).__name__}: {exc}".replace("\n", " ")
        return [ResultRecord(sweep, float(value), run, v, math.nan, math.nan, math.nan, 0.0, msg)
                for v in config.variants]


def _cell_task(args):
    return run_cell(*args)


def run_sweep(config: ExperimentConfig, csv_path: str | Path | None = None,
              progress: Callable[[int, int], None] | None = None) -> list[ResultRecord]:
    """All sweep values x runs x variants; rows are appended to ``csv_path`` as they finish.

    Cells run in a process pool when ``config.workers > 1``; results are
    consumed in submission order, so the CSV is identical for any worker
    count apart from the wall-time column.
    """
    tasks = [(config, v, r) for v in config.values for r in range(config.runs)]
    records: list[ResultRecord] = []
    fh = writer = None
    if csv_path is not None:
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(csv_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
    try:
        if config.workers > 1:
            with ProcessPoolExecutor(config.workers) as pool:
                results = pool.map(_cell_task, tasks)
                _collect(results, records, writer, fh, progress, len(tasks))
        else:
            _collect(map(_cell_task, tasks), records, writer, fh, progress, len(tasks))
    finally:
        if fh is not None:
            fh.close()
    return records


def _collect(results: Iterable, records, writer, fh, progress, total):
    for i, cell in enumerate(results):
        records.extend(cell)
        if writer is not None:
            for rec in cell:
                writer.writerow(rec.row())
            fh.flush()
        if progress is not None:
            progress(i + 1, total)


def read_results(csv_path: str | Path) -> list[ResultRecord]:
    """Parse a results CSV; missing columns or unparsable numbers raise ``ValueError``."""
    path = Path(csv_path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(CSV_FIELDS) - set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns {', '.join(CSV_FIELDS)}")
        out = []
        for n, row in enumerate(reader, start=2):
            try:
                out.append(ResultRecord(row["sweep"], float(row["value"]), int(row["run"]),
                                        row["variant"], float(row["si_sdr_in_db"]),
                                        float(row["si_sdr_out_db"]),
                                        float(row["improvement_db"]), float(row["wall_ms"]),
                                        row["status"]))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{n}: malformed row") from exc
    return out


@dataclass(frozen=True)
class CellSummary:
    sweep: str
    value: float
    variant: str
    n: int
    mean: float
    ci_low: float
    ci_high: float


def mean_ci(x: np.ndarray, level: float = 0.95) -> tuple[float, float, float]:
    """Mean and Student-t confidence interval; the interval is NaN for one sample."""
    x = np.asarray(x, dtype=float)
    mean = float(np.mean(x))
    if x.size < 2:
        return mean, math.nan, math.nan
    half = scipy.stats.t.ppf(0.5 + level / 2, x.size - 1) * np.std(x, ddof=1) / math.sqrt(x.size)
    return mean, mean - half, mean + half


def summarize(records: Iterable[ResultRecord]) -> list[CellSummary]:
    """Per (sweep, value, variant) mean improvement with a 95% CI over successful runs."""
    groups: dict = {}
    for rec in records:
        if rec.status != "ok":
            continue
        groups.setdefault((rec.sweep, rec.value, rec.variant), []).append(rec.improvement_db)
    out = []
    for (sweep, value, variant), vals in sorted(groups.items(), key=lambda kv: kv[0]):
        mean, lo, hi = mean_ci(vals)
        out.append(CellSummary(sweep, value, variant, len(vals), mean, lo, hi))
    return out


def write_summary(summary: list[CellSummary], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sweep", "value", "variant", "n", "mean_improvement_db", "ci_low_db",
                         "ci_high_db"])
        for s in summary:
            writer.writerow([s.sweep, repr(s.value), s.variant, s.n, repr(s.mean),
                             repr(s.ci_low), repr(s.ci_high)])


# ---------------------------------------------------------------- plots

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#7f7f7f")
_W, _H, _PAD = 640, 420, 60
_XLABELS = {"isnr": "input SNR (dB)", "shifts_C": "number of shifts C",
            "mics_M": "number of microphones M", "f0_bias": "f0 error (%)",
            "recursive_smoke": "beta"}


def _svg_plot(sweep: str, cells: list[CellSummary]) -> ET.ElementTree:
    variants = list(dict.fromkeys(c.variant for c in cells))
    xs = sorted({c.value for c in cells})
    ys = [v for c in cells for v in (c.mean, c.ci_low, c.ci_high) if math.isfinite(v)]
    y_lo, y_hi = min(ys), max(ys)
    if y_hi - y_lo < 1e-9:
        y_lo, y_hi = y_lo - 1, y_hi + 1
    x_lo, x_hi = (xs[0], xs[-1]) if len(xs) > 1 else (xs[0] - 1, xs[0] + 1)
    px = lambda x: _PAD + (x - x_lo) / (x_hi - x_lo) * (_W - 2 * _PAD)
    py = lambda y: _H - _PAD - (y - y_lo) / (y_hi - y_lo) * (_H - 2 * _PAD)
    fmt = lambda v: f"{v:.2f}"

    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(_W), height=str(_H),
                     viewBox=f"0 0 {_W} {_H}")
    ET.SubElement(svg, "title").text = f"{sweep} sweep"
    axes = ET.SubElement(svg, "g", {"class": "axes", "stroke": "black"})
    ET.SubElement(axes, "line", x1=str(_PAD), y1=str(_H - _PAD), x2=str(_W - _PAD), y2=str(_H - _PAD))
    ET.SubElement(axes, "line", x1=str(_PAD), y1=str(_PAD), x2=str(_PAD), y2=str(_H - _PAD))
    labels = ET.SubElement(svg, "g", {"class": "labels", "font-size": "12", "font-family": "sans-serif"})
    for x in xs:
        ET.SubElement(labels, "text", x=fmt(px(x)), y=str(_H - _PAD + 16),
                      **{"text-anchor": "middle"}).text = f"{x:g}"
    for y in np.linspace(y_lo, y_hi, 5):
        ET.SubElement(labels, "text", x=str(_PAD - 6), y=fmt(py(y) + 4),
                      **{"text-anchor": "end"}).text = f"{y:.1f}"
    ET.SubElement(labels, "text", x=str(_W // 2), y=str(_H - 15),
                  **{"text-anchor": "middle"}).text = _XLABELS.get(sweep, sweep)
    ET.SubElement(labels, "text", x="15", y=str(_H // 2),
                  transform=f"rotate(-90 15 {_H // 2})",
                  **{"text-anchor": "middle"}).text = "SI-SDR improvement (dB)"

    for i, variant in enumerate(variants):
        color = _PALETTE[i % len(_PALETTE)]
        pts = sorted((c for c in cells if c.variant == variant), key=lambda c: c.value)
        group = ET.SubElement(svg, "g", {"class": "variant", "data-variant": variant})
        band = [c for c in pts if math.isfinite(c.ci_low)]
        if len(band) >= 2:
            outline = [(px(c.value), py(c.ci_high)) for c in band] + \
                      [(px(c.value), py(c.ci_low)) for c in reversed(band)]
            ET.SubElement(group, "polygon", points=" ".join(f"{fmt(x)},{fmt(y)}" for x, y in outline),
                          fill=color, **{"fill-opacity": "0.2", "stroke": "none"})
        ET.SubElement(group, "polyline",
                      points=" ".join(f"{fmt(px(c.value))},{fmt(py(c.mean))}" for c in pts),
                      fill="none", stroke=color, **{"stroke-width": "2"})
        for c in pts:
            ET.SubElement(group, "circle", cx=fmt(px(c.value)), cy=fmt(py(c.mean)), r="3",
                          fill=color)
        ET.SubElement(labels, "text", x=str(_W - _PAD - 66), y=str(_PAD + 14 * i),
                      fill=color).text = variant
    return ET.ElementTree(svg)


def emit_plots(csv_path: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """One SVG per sweep in the results CSV: mean improvement with shaded 95% CI."""
    records = read_results(csv_path)
    summary = summarize(records)
    if not summary:
        raise ValueError(f"{csv_path}: no successful results to plot")
    out_dir = Path(out_dir) if out_dir is not None else Path(csv_path).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for sweep in dict.fromkeys(s.sweep for s in summary):
        tree = _svg_plot(sweep, [s for s in summary if s.sweep == sweep])
        path = out_dir / f"{sweep}.svg"
        tree.write(path, encoding="utf-8", xml_declaration=True)
        paths.append(path)
    return paths
