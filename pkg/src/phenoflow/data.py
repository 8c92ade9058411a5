"""Domain records, CSV ingestion, weekly weather aggregation and synthetic data.

Week convention used across the package: week ``w`` of a year covers
day-of-year ``7(w-1)+1 .. 7w``; continuous NDVI sampling dates are
``day_of_year / 7``.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DuplicateSample, EmptyWindow, MalformedRow, OutOfRange

CATEGORIES = ("A", "B", "C", "D", "E")
SITES = ("disturbed-grassland", "long-warmed-grassland")
N_WEEKS = 26

NDVI_HEADER = ["plot_id", "year", "week", "ndvi"]
SOIL_HEADER = ["plot_id", "year", "doy", "temp_c"]
WEATHER_HEADER = ["date", "air_temp_c", "precip_mm", "irradiance_wm2"]
PLOTS_HEADER = ["plot_id", "site", "transect", "category"]


@dataclass(frozen=True)
class PlotRecord:
    plot_id: str
    site: str
    transect: int
    category: str

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown warming category {self.category!r}")
        if self.site not in SITES:
            raise ValueError(f"unknown site {self.site!r}")
        if not 1 <= self.transect <= 5:
            raise ValueError(f"transect {self.transect} outside 1..5")


@dataclass(frozen=True)
class NdviSample:
    plot_id: str
    year: int
    week: float
    ndvi: float


@dataclass(frozen=True)
class SoilTempSeries:
    plot_id: str
    year: int
    readings: tuple  # ((doy, temp_c), ...)

    @property
    def annual_mean(self) -> float:
        return math.fsum(t for _, t in self.readings) / len(self.readings)


@dataclass(frozen=True)
class WeatherWeekly:
    year: int
    week: int
    air_temp: float
    precipitation: float
    irradiance: float


@dataclass(frozen=True)
class DailyWeather:
    date: dt.date
    air_temp: float
    precipitation: float
    irradiance: float


# --------------------------------------------------------------------------- CSV


def _open_checked(path, header: list[str]):
    path = Path(path)
    fh = open(path, newline="")
    reader = csv.reader(fh)
    first = next(reader, None)
    if first is None or [h.strip() for h in first] != header:
        fh.close()
        raise MalformedRow(1, f"expected header {','.join(header)} in {path}")
    return fh, reader


def ingest_ndvi(path) -> list[NdviSample]:
    """Read ``ndvi.csv`` into samples sorted by ``(plot_id, year, week)``."""
    fh, reader = _open_checked(path, NDVI_HEADER)
    samples = []
    seen = set()
    with fh:
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise MalformedRow(line, f"expected 4 fields, got {len(row)}")
            plot_id = row[0].strip()
            try:
                year = int(row[1])
                week = float(row[2])
                ndvi = float(row[3])
            except ValueError as exc:
                raise MalformedRow(line, str(exc)) from None
            if not plot_id:
                raise MalformedRow(line, "empty plot_id")
            if not (0.0 <= week <= 52.0):
                raise OutOfRange("week", line, week)
            if not (-1.0 <= ndvi <= 1.0):
                raise OutOfRange("ndvi", line, ndvi)
            key = (plot_id, year, week)
            if key in seen:
                raise DuplicateSample(plot_id, year, week)
            seen.add(key)
            samples.append(NdviSample(plot_id, year, week, ndvi))
    samples.sort(key=lambda s: (s.plot_id, s.year, s.week))
    return samples


def write_ndvi(path, samples: Iterable[NdviSample]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(NDVI_HEADER)
        for s in samples:
            w.writerow([s.plot_id, s.year, repr(float(s.week)), repr(float(s.ndvi))])


def ingest_soil(path) -> list[SoilTempSeries]:
    fh, reader = _open_checked(path, SOIL_HEADER)
    by_key: dict[tuple, list] = defaultdict(list)
    with fh:
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise MalformedRow(line, f"expected 4 fields, got {len(row)}")
            try:
                year, doy, temp = int(row[1]), int(row[2]), float(row[3])
            except ValueError as exc:
                raise MalformedRow(line, str(exc)) from None
            if not 1 <= doy <= 366:
                raise OutOfRange("doy", line, doy)
            by_key[(row[0].strip(), year)].append((doy, temp))
    return [
        SoilTempSeries(pid, year, tuple(sorted(readings)))
        for (pid, year), readings in sorted(by_key.items())
    ]


def write_soil(path, series: Iterable[SoilTempSeries]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SOIL_HEADER)
        for s in series:
            for doy, temp in s.readings:
                w.writerow([s.plot_id, s.year, doy, repr(float(temp))])


def ingest_weather_daily(path) -> list[DailyWeather]:
    fh, reader = _open_checked(path, WEATHER_HEADER)
    rows = []
    with fh:
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise MalformedRow(line, f"expected 4 fields, got {len(row)}")
            try:
                rows.append(
                    DailyWeather(
                        dt.date.fromisoformat(row[0].strip()),
                        float(row[1]),
                        float(row[2]),
                        float(row[3]),
                    )
                )
            except ValueError as exc:
                raise MalformedRow(line, str(exc)) from None
    return rows


def write_weather_daily(path, rows: Iterable[DailyWeather]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(WEATHER_HEADER)
        for r in rows:
            w.writerow(
                [r.date.isoformat(), repr(float(r.air_temp)), repr(float(r.precipitation)), repr(float(r.irradiance))]
            )


def ingest_plots(path) -> list[PlotRecord]:
    fh, reader = _open_checked(path, PLOTS_HEADER)
    plots = []
    ids = set()
    with fh:
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise MalformedRow(line, f"expected 4 fields, got {len(row)}")
            try:
                rec = PlotRecord(row[0].strip(), row[1].strip(), int(row[2]), row[3].strip())
            except ValueError as exc:
                raise MalformedRow(line, str(exc)) from None
            if rec.plot_id in ids:
                raise MalformedRow(line, f"duplicate plot_id {rec.plot_id}")
            ids.add(rec.plot_id)
            plots.append(rec)
    return plots


def write_plots(path, plots: Iterable[PlotRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLOTS_HEADER)
        for p in plots:
            w.writerow([p.plot_id, p.site, p.transect, p.category])


# ------------------------------------------------------------------ aggregation


def week_of_doy(doy: int) -> int:
    return (doy - 1) // 7 + 1


def aggregate_weather_weekly(daily: Sequence) -> list[WeatherWeekly]:
    """Average daily weather into weeks 1..26 of every year present.

    ``daily`` holds ``DailyWeather`` records or ``(date, air, precip, irr)``
    tuples. Non-finite values are treated as missing; a week where a variable
    has no finite values raises ``EmptyWindow``.
    """
    sums: dict[tuple, list] = defaultdict(lambda: [[], [], []])
    years = set()
    seen_dates = set()
    for rec in daily:
        if isinstance(rec, DailyWeather):
            date, vals = rec.date, (rec.air_temp, rec.precipitation, rec.irradiance)
        else:
            date, vals = rec[0], tuple(rec[1:4])
        if date in seen_dates:
            raise ValueError(f"duplicate date {date}")
        seen_dates.add(date)
        years.add(date.year)
        week = week_of_doy(date.timetuple().tm_yday)
        if week > N_WEEKS:
            continue
        bucket = sums[(date.year, week)]
        for i, v in enumerate(vals):
            if v is not None and math.isfinite(v):
                bucket[i].append(float(v))

    out = []
    for year in sorted(years):
        for week in range(1, N_WEEKS + 1):
            bucket = sums.get((year, week))
            if bucket is None or any(len(b) == 0 for b in bucket):
                raise EmptyWindow(year, week)
            means = [math.fsum(b) / len(b) for b in bucket]
            out.append(WeatherWeekly(year, week, *means))
    return out


def soil_means(series: Iterable[SoilTempSeries]) -> dict[tuple, float]:
    return {(s.plot_id, s.year): s.annual_mean for s in series}


# -------------------------------------------------------------------- synthetic

DEFAULT_WARMING = {"A": 0.0, "B": 0.75, "C": 2.5, "D": 4.0, "E": 7.5}
_LOG_2_SQRT3 = math.log(2.0 + math.sqrt(3.0))


@dataclass(frozen=True)
class SyntheticConfig:
    """Settings for the synthetic field campaign.

    Phenology responds linearly to the plot-year annual soil mean (relative
    to ``ambient_soil``) and to per-year weather anomalies computed from the
    weekly weather features, so both signals are recoverable from the data.
    """

    n_plots: int = 50
    years: tuple = (2014, 2019)  # inclusive
    warming_offsets: dict = field(default_factory=lambda: dict(DEFAULT_WARMING))
    sos_sensitivity: float = -0.216  # weeks / degC
    pos_sensitivity: float = -0.235  # weeks / degC
    peak_sensitivity: float = 0.005  # NDVI / degC
    noise_sd: float = 0.03
    seed: int = 0
    # baseline phenology at ambient soil temperature
    ambient_soil: float = 6.0
    sos_base: float = 21.0
    pos_base: float = 31.0
    peak_base: float = 0.80
    # weather signal: weeks (or NDVI) per unit anomaly of the weekly features
    sos_weather: float = -0.8  # per degC spring air-temperature anomaly
    pos_weather: float = -0.8
    peak_weather: float = 0.02  # per mm weekly-mean precipitation anomaly
    air_anomaly_sd: float = 1.5
    precip_anomaly_sd: float = 0.5
    # unexplained plot-year variation
    phenology_jitter_sd: float = 0.0
    plot_offset_sd: float = 0.3
    soil_noise_sd: float = 0.3
    # sampling
    sample_interval: float = 2.0  # weeks
    first_week: float = 14.0
    last_week: float = 46.0
    peak_saturation: tuple = (12.0, 15.0)  # |b1 (p - a1)| range of the truth
    outlier_fraction: float = 0.0  # plot-years replaced by pure noise

    def validate(self) -> None:
        if self.n_plots < 1:
            raise ConfigError("n_plots must be >= 1")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd must be >= 0")
        if self.years[1] < self.years[0]:
            raise ConfigError("years must be an increasing (first, last) pair")
        if set(self.warming_offsets) != set(CATEGORIES):
            raise ConfigError("warming_offsets needs one entry per category A..E")
        if not 0 <= self.outlier_fraction < 1:
            raise ConfigError("outlier_fraction must be in [0, 1)")
        if self.sample_interval <= 0 or self.last_week - self.first_week < 10:
            raise ConfigError("sampling window must span at least 10 weeks")


@dataclass
class SyntheticDataset:
    plots: list
    ndvi: list
    soil: list
    weather_daily: list
    truth: dict  # (plot_id, year) -> DoubleLogisticParams
    truth_metrics: dict  # (plot_id, year) -> (sos, pos, peak)
    outliers: set  # (plot_id, year) replaced by pure noise


def _days_in_year(year: int) -> int:
    return 366 if (year % 4 == 0 and year % 100 != 0) or year % 400 == 0 else 365


def _year_weather(year, rng, cfg):
    n = _days_in_year(year)
    doy = np.arange(1, n + 1)
    phase = 2 * np.pi * (doy - 110) / 365.0
    air_anom = rng.normal(0.0, cfg.air_anomaly_sd)
    precip_anom = rng.normal(0.0, cfg.precip_anomaly_sd)
    irr_factor = 1.0 + rng.normal(0.0, 0.08)
    # anomalies act on the first half of the year, fading out after midsummer
    fade = np.clip((200 - doy) / 60.0, 0.0, 1.0)
    air = 4.5 + 7.0 * np.sin(phase) + air_anom * fade + rng.normal(0.0, 1.5, n)
    precip = np.maximum(0.0, 2.5 + precip_anom * fade + rng.gamma(0.8, 1.2, n) - 1.0)
    irr = np.maximum(0.0, (120.0 + 100.0 * np.sin(phase)) * irr_factor + rng.normal(0.0, 20.0, n))
    start = dt.date(year, 1, 1)
    return [
        DailyWeather(start + dt.timedelta(days=int(i)), float(air[i]), float(precip[i]), float(irr[i]))
        for i in range(n)
    ]


def _truth_curve(sos, pos, peak, rng, cfg):
    from .seasonfit import DoubleLogisticParams

    z = rng.uniform(*cfg.peak_saturation)
    # SOS = a1 + ln(2+sqrt3)/b1 and z = -b1 (p - a1) fix a1, b1 given (sos, pos)
    b1 = -(z + _LOG_2_SQRT3) / (pos - sos)
    a1 = sos - _LOG_2_SQRT3 / b1
    a2 = pos + rng.uniform(8.0, 12.0)
    b2 = -z / (a2 - pos)
    d = rng.uniform(0.1, 0.25)
    c = (peak - d) * (1.0 + math.exp(-z))  # NDVI(p) = c * sigmoid(z) + d
    return DoubleLogisticParams.from_free(a1, b1, b2, c, d, pos)


def _sample_weeks(rng, cfg):
    start = cfg.first_week + rng.uniform(0.0, cfg.sample_interval)
    base = np.arange(start, cfg.last_week, cfg.sample_interval)
    jitter = rng.uniform(-2.0 / 7.0, 2.0 / 7.0, size=base.size)
    # quantize to whole days: weeks are doy/7
    doys = np.round((base + jitter) * 7.0)
    return np.unique(doys) / 7.0


def weather_anomalies(weekly: Sequence[WeatherWeekly]) -> dict[int, tuple[float, float]]:
    """Per-year (spring air-temperature, precipitation) anomalies from weekly features.

    Spring air temperature is the mean over weeks 10-20; precipitation the
    mean over weeks 1-26. Both are centred on the across-year mean.
    """
    by_year: dict[int, list] = defaultdict(list)
    for w in weekly:
        by_year[w.year].append(w)
    air = {y: np.mean([w.air_temp for w in ws if 10 <= w.week <= 20]) for y, ws in by_year.items()}
    pr = {y: np.mean([w.precipitation for w in ws]) for y, ws in by_year.items()}
    air_c = np.mean(list(air.values()))
    pr_c = np.mean(list(pr.values()))
    return {y: (float(air[y] - air_c), float(pr[y] - pr_c)) for y in by_year}


def generate_synthetic_dataset(cfg: SyntheticConfig) -> SyntheticDataset:
    """Generate plots, NDVI samples, soil series and daily weather.

    Deterministic for a fixed ``cfg.seed``.
    """
    from .seasonfit import eval_double_logistic

    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    years = list(range(cfg.years[0], cfg.years[1] + 1))

    plots = []
    plot_offset = {}
    for i in range(cfg.n_plots):
        cat = CATEGORIES[i % 5]
        rec = PlotRecord(
            plot_id=f"P{i + 1:03d}",
            site=SITES[0] if i < (cfg.n_plots + 1) // 2 else SITES[1],
            transect=(i // 5) % 5 + 1,
            category=cat,
        )
        plots.append(rec)
        plot_offset[rec.plot_id] = cfg.warming_offsets[cat] + rng.normal(0.0, cfg.plot_offset_sd)

    weather_daily = []
    for y in years:
        weather_daily.extend(_year_weather(y, rng, cfg))
    anomalies = weather_anomalies(aggregate_weather_weekly(weather_daily))

    soil, ndvi = [], []
    truth, metrics = {}, {}
    keys = [(p.plot_id, y) for y in years for p in plots]
    n_out = int(round(cfg.outlier_fraction * len(keys)))
    outliers = {keys[i] for i in rng.permutation(len(keys))[:n_out]}

    for y in years:
        n_days = _days_in_year(y)
        doy = np.arange(1, n_days + 1)
        ambient = cfg.ambient_soil + 6.0 * np.sin(2 * np.pi * (doy - 120) / 365.0)
        air_a, pr_a = anomalies[y]
        for p in plots:
            key = (p.plot_id, y)
            level = plot_offset[p.plot_id] + rng.normal(0.0, cfg.soil_noise_sd)
            temps = ambient + level + rng.normal(0.0, 0.5, n_days)
            series = SoilTempSeries(p.plot_id, y, tuple((int(d), float(t)) for d, t in zip(doy, temps)))
            soil.append(series)
            warm = series.annual_mean - cfg.ambient_soil

            jit = rng.normal(0.0, cfg.phenology_jitter_sd, 3) if cfg.phenology_jitter_sd > 0 else np.zeros(3)
            sos = cfg.sos_base + cfg.sos_sensitivity * warm + cfg.sos_weather * air_a + jit[0]
            pos = cfg.pos_base + cfg.pos_sensitivity * warm + cfg.pos_weather * air_a + jit[1]
            peak = cfg.peak_base + cfg.peak_sensitivity * warm + cfg.peak_weather * pr_a + 0.01 * jit[2]
            params = _truth_curve(sos, pos, peak, rng, cfg)
            truth[key] = params
            metrics[key] = (float(sos), float(pos), float(eval_double_logistic(params, params.p)))

            weeks = _sample_weeks(rng, cfg)
            if key in outliers:
                values = rng.uniform(0.1, 0.8, weeks.size)
            else:
                values = eval_double_logistic(params, weeks)
                if cfg.noise_sd > 0:
                    values = values + rng.normal(0.0, cfg.noise_sd, weeks.size)
            values = np.clip(values, -1.0, 1.0)
            ndvi.extend(NdviSample(p.plot_id, y, float(w), float(v)) for w, v in zip(weeks, values))

    ndvi.sort(key=lambda s: (s.plot_id, s.year, s.week))
    return SyntheticDataset(plots, ndvi, soil, weather_daily, truth, metrics, outliers)


def group_by_plot_year(samples: Iterable[NdviSample]) -> dict[tuple, list]:
    groups: dict[tuple, list] = defaultdict(list)
    for s in samples:
        groups[(s.plot_id, s.year)].append(s)
    return dict(sorted(groups.items()))
