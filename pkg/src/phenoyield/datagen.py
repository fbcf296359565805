"""Synthetic multi-crop county-year data with a known log-linear yield process.

Each county-year gets one weather draw (seasonal sinusoids, county offsets,
year anomalies, daily noise scaled by a per-county volatility).  Each crop
grown there gets its own image series whose greenness follows a double
logistic phenology curve with peak proportional to that sample's true yield.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .tensorio import FormatError, read_tensor, write_tensor

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
TEMP, PRECIP, RADIATION = 0, 1, 2


@dataclass(frozen=True)
class CropSpec:
    crop_id: int
    name: str
    sos: int
    eos: int
    alpha: float
    beta: float
    gamma: float
    base_yield: float

    def window(self) -> slice:
        return slice(self.sos, self.eos + 1)


def default_crops() -> list[CropSpec]:
    # winter wheat mirrors the full-year cycle: it starts at t=0.
    return [
        CropSpec(0, "corn", 6, 19, alpha=-0.30, beta=-0.12, gamma=0.25, base_yield=170.0),
        CropSpec(1, "cotton", 5, 21, alpha=0.35, beta=-0.10, gamma=-0.12, base_yield=800.0),
        CropSpec(2, "soybean", 8, 21, alpha=0.25, beta=-0.10, gamma=0.20, base_yield=50.0),
        CropSpec(3, "winter_wheat", 0, 14, alpha=-0.30, beta=-0.08, gamma=0.15, base_yield=60.0),
    ]


@dataclass
class WeatherConfig:
    temp_base: float = 15.0
    temp_amp: float = 10.0
    county_temp_sd: float = 1.5
    year_temp_sd: float = 1.0
    daily_temp_sd: float = 2.0
    precip_scale: float = 2.5
    precip_season_amp: float = 0.3
    county_precip_sd: float = 0.25
    year_precip_sd: float = 0.2
    daily_precip_sd: float = 0.5
    rad_base: float = 18.0
    rad_amp: float = 6.0
    daily_rad_sd: float = 2.0
    volatility_low: float = 0.7
    volatility_high: float = 1.3
    high_noise_fraction: float = 0.2
    high_noise_factor: float = 2.5

    def volatility_moments(self) -> tuple[float, float]:
        """Mean and standard deviation of the per-county volatility multiplier."""
        lo, hi, f, k = self.volatility_low, self.volatility_high, self.high_noise_fraction, self.high_noise_factor
        m1 = (lo + hi) / 2
        m2 = (lo * lo + lo * hi + hi * hi) / 3
        mean = (1 - f) * m1 + f * k * m1
        second = (1 - f) * m2 + f * k * k * m2
        return mean, math.sqrt(max(second - mean * mean, 0.0))

    def seasonal_temp(self, n_steps: int, n_daily: int) -> np.ndarray:
        u = np.arange(n_steps * n_daily).reshape(n_steps, n_daily)
        return self.temp_base - self.temp_amp * np.cos(2 * np.pi * u / (n_steps * n_daily))

    def seasonal_log_precip(self, n_steps: int, n_daily: int) -> np.ndarray:
        u = np.arange(n_steps * n_daily).reshape(n_steps, n_daily)
        return self.precip_season_amp * np.sin(2 * np.pi * u / (n_steps * n_daily))

    def seasonal_radiation(self, n_steps: int, n_daily: int) -> np.ndarray:
        u = np.arange(n_steps * n_daily).reshape(n_steps, n_daily)
        return self.rad_base - self.rad_amp * np.cos(2 * np.pi * u / (n_steps * n_daily))


@dataclass
class GenConfig:
    T: int = 24
    H: int = 32
    W: int = 32
    B: int = 4
    N_d: int = 7
    M: int = 3
    n_counties: int = 50
    train_years: list[int] = field(default_factory=lambda: [2019, 2020])
    test_years: list[int] = field(default_factory=lambda: [2021])
    crops: list[CropSpec] = field(default_factory=default_crops)
    weather: WeatherConfig = field(default_factory=WeatherConfig)
    yield_noise: float = 0.05
    field_heterogeneity: float = 0.2
    field_grid: int = 4
    pixel_noise: float = 0.02
    phenology_rate: float = 0.8

    def __post_init__(self) -> None:
        for name in ("T", "H", "W", "B", "N_d", "M", "n_counties", "field_grid"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.M < 3:
            raise ValueError("M must be >= 3 (temperature, precipitation, radiation)")
        for i, c in enumerate(self.crops):
            if c.crop_id != i:
                raise ValueError(f"crop {c.name!r} has id {c.crop_id}, expected {i}")
            if not 0 <= c.sos < c.eos < self.T:
                raise ValueError(f"crop {c.name!r}: need 0 <= sos < eos < T")
            if c.base_yield <= 0:
                raise ValueError(f"crop {c.name!r}: base_yield must be positive")

    @property
    def C(self) -> int:
        return len(self.crops)

    @classmethod
    def from_dict(cls, raw: dict) -> "GenConfig":
        raw = dict(raw)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown generation config fields: {sorted(unknown)}")
        if "crops" in raw:
            raw["crops"] = [CropSpec(**c) for c in raw["crops"]]
        if "weather" in raw:
            raw["weather"] = WeatherConfig(**raw["weather"])
        return cls(**raw)


# -- analytic pieces -----------------------------------------------------------------
def phenology_curve(spec: CropSpec, t, amplitude: float, rate: float = 0.8, clip: bool = True):
    """Double-logistic greenness; rises around sos+2 and senesces around eos-2."""
    if amplitude <= 0:
        raise ValueError("amplitude must be positive")
    t = np.asarray(t, dtype=np.float64)
    rise = 1.0 / (1.0 + np.exp(-rate * (t - spec.sos - 2)))
    fall = 1.0 / (1.0 + np.exp(-rate * (t - spec.eos + 2)))
    value = amplitude * (rise - fall)
    return np.clip(value, 0.0, amplitude) if clip else value


@dataclass(frozen=True)
class SeasonStats:
    mean_temp: float
    std_temp: float
    mean_precip: float


def season_stats(mts: np.ndarray, spec: CropSpec) -> SeasonStats:
    """Weather statistics over the crop's growing season, all daily records pooled."""
    block = np.asarray(mts, dtype=np.float64)[spec.window()]
    temp = block[..., TEMP].ravel()
    return SeasonStats(float(temp.mean()), float(temp.std()), float(block[..., PRECIP].mean()))


def standardize(spec: CropSpec, stats: SeasonStats, weather: WeatherConfig,
                n_steps: int, n_daily: int) -> np.ndarray:
    """Map raw season statistics to standardized covariates (z_temp, z_std, z_precip).

    Moments come from the generating model, not from data: the sinusoid's mean
    and variance over the season are removed analytically.
    """
    season_t = weather.seasonal_temp(n_steps, n_daily)[spec.window()].ravel()
    z_temp = (stats.mean_temp - season_t.mean()) / math.hypot(weather.county_temp_sd, weather.year_temp_sd)

    v_mean, v_sd = weather.volatility_moments()
    excess = math.sqrt(max(stats.std_temp**2 - season_t.var(), 0.0))
    z_std = (excess - weather.daily_temp_sd * v_mean) / (weather.daily_temp_sd * v_sd)

    season_p = weather.seasonal_log_precip(n_steps, n_daily)[spec.window()].ravel()
    v2 = v_sd**2 + v_mean**2
    expected = (math.log(weather.precip_scale) + math.log(np.exp(season_p).mean())
                + 0.5 * weather.daily_precip_sd**2 * v2)
    z_precip = (math.log(stats.mean_precip) - expected) / math.hypot(weather.county_precip_sd,
                                                                      weather.year_precip_sd)
    return np.array([z_temp, z_std, z_precip])


def log_yield_mean(spec: CropSpec, z: np.ndarray) -> float:
    return math.log(spec.base_yield) + spec.alpha * z[0] + spec.beta * z[1] + spec.gamma * z[2]


def true_yield(spec: CropSpec, mean_temp: float, std_temp: float, mean_precip: float,
               noise: float = 0.0, weather: WeatherConfig | None = None,
               n_steps: int = 24, n_daily: int = 7) -> float:
    """base_yield * exp(alpha*z_temp + beta*z_std + gamma*z_precip + noise)."""
    weather = weather or WeatherConfig()
    z = standardize(spec, SeasonStats(mean_temp, std_temp, mean_precip), weather, n_steps, n_daily)
    return math.exp(log_yield_mean(spec, z) + noise)


# -- generation --------------------------------------------------------------------
def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def _county_params(cfg: GenConfig, seed: int, county: int) -> dict:
    rng = _stream(seed, 1, county)
    w = cfg.weather
    vol = rng.uniform(w.volatility_low, w.volatility_high)
    high = rng.random() < w.high_noise_fraction
    return {
        "temp_offset": rng.normal(0, w.county_temp_sd),
        "precip_offset": rng.normal(0, w.county_precip_sd),
        "rad_offset": rng.normal(0, 1.0),
        "volatility": vol * (w.high_noise_factor if high else 1.0),
        "high_noise": bool(high),
    }


def _weather(cfg: GenConfig, seed: int, county: int, year: int, cp: dict) -> np.ndarray:
    rng = _stream(seed, 2, county, year)
    w = cfg.weather
    T, Nd = cfg.T, cfg.N_d
    vol = cp["volatility"]
    out = np.zeros((T, Nd, cfg.M))
    out[..., TEMP] = (w.seasonal_temp(T, Nd) + cp["temp_offset"] + rng.normal(0, w.year_temp_sd)
                      + rng.normal(0, w.daily_temp_sd * vol, size=(T, Nd)))
    level = math.log(w.precip_scale) + cp["precip_offset"] + rng.normal(0, w.year_precip_sd)
    out[..., PRECIP] = np.exp(level + w.seasonal_log_precip(T, Nd)
                              + rng.normal(0, w.daily_precip_sd * vol, size=(T, Nd)))
    out[..., RADIATION] = (w.seasonal_radiation(T, Nd) + cp["rad_offset"]
                           + rng.normal(0, w.daily_rad_sd * vol, size=(T, Nd)))
    for extra in range(3, cfg.M):
        out[..., extra] = rng.normal(0, 1.0 * vol, size=(T, Nd))
    return out


_SOIL = np.array([0.10, 0.12, 0.18, 0.25])
_GREEN = np.array([-0.05, 0.08, -0.08, 0.45])


def _band_signature(cfg: GenConfig, crop_id: int) -> tuple[np.ndarray, np.ndarray]:
    reps = -(-cfg.B // len(_SOIL))
    soil = np.tile(_SOIL, reps)[: cfg.B]
    green = np.tile(_GREEN, reps)[: cfg.B] * (1.0 + 0.15 * crop_id * np.cos(np.arange(cfg.B) + crop_id))
    return soil, green


def _imagery(cfg: GenConfig, seed: int, county: int, year: int, spec: CropSpec,
             yield_value: float) -> np.ndarray:
    rng = _stream(seed, 3, county, year, spec.crop_id)
    amplitude = 0.8 * yield_value / spec.base_yield
    curve = phenology_curve(spec, np.arange(cfg.T), amplitude, cfg.phenology_rate)
    g = cfg.field_grid
    coarse = rng.normal(0.0, 1.0, size=(g, g))
    fh, fw = -(-cfg.H // g), -(-cfg.W // g)
    field_map = np.kron(coarse, np.ones((fh, fw)))[: cfg.H, : cfg.W]
    cover = 1.0 + cfg.field_heterogeneity * field_map
    soil, green = _band_signature(cfg, spec.crop_id)
    greenness = curve[:, None, None] * cover[None]
    sits = soil + greenness[..., None] * green
    sits = sits + rng.normal(0.0, cfg.pixel_noise, size=sits.shape)
    return sits


@dataclass
class SampleRecord:
    sample_id: str
    county_id: int
    year: int
    crop_id: int
    yield_true: float
    split: str
    sits_file: str
    mts_file: str


@dataclass
class DatasetManifest:
    format_version: int
    dims: dict
    crops: list[CropSpec]
    weather: WeatherConfig
    samples: list[SampleRecord]
    seed: int
    high_noise_counties: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "dims": self.dims,
            "crops": [asdict(c) for c in self.crops],
            "weather": asdict(self.weather),
            "seed": self.seed,
            "high_noise_counties": self.high_noise_counties,
            "samples": [asdict(s) for s in self.samples],
        }

    @classmethod
    def from_json(cls, raw: dict) -> "DatasetManifest":
        try:
            if raw["format_version"] != FORMAT_VERSION:
                raise FormatError(f"unsupported manifest version {raw['format_version']}")
            return cls(
                format_version=raw["format_version"],
                dims={k: int(v) for k, v in raw["dims"].items()},
                crops=[CropSpec(**c) for c in raw["crops"]],
                weather=WeatherConfig(**raw["weather"]),
                samples=[SampleRecord(**s) for s in raw["samples"]],
                seed=int(raw["seed"]),
                high_noise_counties=list(raw.get("high_noise_counties", [])),
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed manifest: {exc}") from exc


@dataclass
class Dataset:
    manifest: DatasetManifest
    sits: np.ndarray  # (N, T, H, W, B) float32
    mts: np.ndarray  # (N, T, N_d, M) float32

    def __len__(self) -> int:
        return len(self.manifest.samples)

    @property
    def crops(self) -> list[CropSpec]:
        return self.manifest.crops

    @property
    def records(self) -> list[SampleRecord]:
        return self.manifest.samples

    def indices(self, split: str | None = None, crop_id: int | None = None) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.records)
                         if (split is None or s.split == split) and (crop_id is None or s.crop_id == crop_id)],
                        dtype=int)

    def yields(self, idx=None) -> np.ndarray:
        y = np.array([s.yield_true for s in self.records])
        return y if idx is None else y[idx]

    def crop_ids(self, idx=None) -> np.ndarray:
        c = np.array([s.crop_id for s in self.records], dtype=int)
        return c if idx is None else c[idx]

    def sample_ids(self, idx=None) -> list[str]:
        ids = [s.sample_id for s in self.records]
        return ids if idx is None else [ids[i] for i in idx]

    def calendar(self) -> dict[int, tuple[int, int]]:
        return {c.crop_id: (c.sos, c.eos) for c in self.crops}

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        m = self.manifest
        sub = DatasetManifest(m.format_version, dict(m.dims), list(m.crops), m.weather,
                              [m.samples[i] for i in idx], m.seed, list(m.high_noise_counties))
        return Dataset(sub, self.sits[idx], self.mts[idx])


def generate_dataset(cfg: GenConfig, seed: int, out_dir: str | Path | None = None) -> Dataset:
    """Generate every (county, year, crop) sample; optionally write it to ``out_dir``.

    Each sample draws from its own keyed random stream, so the output for one
    sample does not depend on how many others are generated.
    """
    years = [(y, "train") for y in cfg.train_years] + [(y, "test") for y in cfg.test_years]
    n = cfg.n_counties * len(years) * cfg.C
    sits = np.empty((n, cfg.T, cfg.H, cfg.W, cfg.B), dtype=np.float32)
    mts = np.empty((n, cfg.T, cfg.N_d, cfg.M), dtype=np.float32)
    records: list[SampleRecord] = []
    high_noise = []
    i = 0
    for county in range(cfg.n_counties):
        cp = _county_params(cfg, seed, county)
        if cp["high_noise"]:
            high_noise.append(county)
        for year, split in years:
            weather = _weather(cfg, seed, county, year, cp)
            weather32 = weather.astype(np.float32)
            for spec in cfg.crops:
                # yields are computed from the float32 weather that is actually stored
                stats = season_stats(weather32, spec)
                z = standardize(spec, stats, cfg.weather, cfg.T, cfg.N_d)
                noise = _stream(seed, 4, county, year, spec.crop_id).normal(0, cfg.yield_noise * cp["volatility"])
                y = math.exp(log_yield_mean(spec, z) + noise)
                sid = f"c{county:03d}_y{year}_{spec.name}"
                sits[i] = _imagery(cfg, seed, county, year, spec, y)
                mts[i] = weather32
                records.append(SampleRecord(sid, county, year, spec.crop_id, y, split,
                                            f"{sid}.sits.pyt", f"{sid}.mts.pyt"))
                i += 1
    dims = {"T": cfg.T, "H": cfg.H, "W": cfg.W, "B": cfg.B, "N_d": cfg.N_d, "M": cfg.M, "C": cfg.C}
    manifest = DatasetManifest(FORMAT_VERSION, dims, list(cfg.crops), cfg.weather, records, seed, high_noise)
    ds = Dataset(manifest, sits, mts)
    if out_dir is not None:
        write_dataset(ds, out_dir)
    return ds


def write_dataset(ds: Dataset, path: str | Path) -> None:
    path = Path(path)
    if not path.parent.exists():
        raise OSError(f"parent directory of {path} does not exist")
    path.mkdir(exist_ok=True)
    for rec, s, m in zip(ds.records, ds.sits, ds.mts):
        write_tensor(path / rec.sits_file, s)
        write_tensor(path / rec.mts_file, m)
    with open(path / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(ds.manifest.to_json(), fh, indent=1)
        fh.write("\n")


def read_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise FormatError(f"{mpath}: manifest not found")
    with open(mpath, encoding="utf-8") as fh:
        try:
            manifest = DatasetManifest.from_json(json.load(fh))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{mpath}: {exc}") from exc
    d = manifest.dims
    sits_shape = (d["T"], d["H"], d["W"], d["B"])
    mts_shape = (d["T"], d["N_d"], d["M"])
    n = len(manifest.samples)
    sits = np.empty((n, *sits_shape), dtype=np.float32)
    mts = np.empty((n, *mts_shape), dtype=np.float32)
    for i, rec in enumerate(manifest.samples):
        sits[i] = read_tensor(path / rec.sits_file, sits_shape)
        mts[i] = read_tensor(path / rec.mts_file, mts_shape)
    return Dataset(manifest, sits, mts)


# -- closed-form oracle -----------------------------------------------------------
def covariates(ds: Dataset, idx=None) -> np.ndarray:
    """Standardized (z_temp, z_std, z_precip) per sample, recomputed from the stored weather."""
    idx = np.arange(len(ds)) if idx is None else np.asarray(idx)
    d = ds.manifest.dims
    out = np.empty((len(idx), 3))
    for row, i in enumerate(idx):
        spec = ds.crops[ds.records[i].crop_id]
        out[row] = standardize(spec, season_stats(ds.mts[i], spec), ds.manifest.weather, d["T"], d["N_d"])
    return out


def _design(z: np.ndarray, crop_ids: np.ndarray, n_crops: int) -> np.ndarray:
    onehot = np.eye(n_crops)[crop_ids]
    cols = [onehot] + [onehot * z[:, [j]] for j in range(z.shape[1])]
    return np.hstack(cols)


@dataclass
class OLSOracle:
    coef: np.ndarray
    n_crops: int
    train_r2: float

    @property
    def intercepts(self) -> np.ndarray:
        return self.coef[: self.n_crops]

    @property
    def slopes(self) -> np.ndarray:
        """(n_crops, 3) fitted responses to (z_temp, z_std, z_precip)."""
        return self.coef[self.n_crops:].reshape(3, self.n_crops).T

    def predict_log(self, z: np.ndarray, crop_ids: np.ndarray) -> np.ndarray:
        return _design(z, crop_ids, self.n_crops) @ self.coef

    def predict(self, ds: Dataset, idx) -> np.ndarray:
        return np.exp(self.predict_log(covariates(ds, idx), ds.crop_ids(idx)))


def fit_ols_oracle(ds: Dataset, idx=None) -> OLSOracle:
    """Least squares of log-yield on crop one-hots and crop x covariate interactions."""
    idx = ds.indices("train") if idx is None else np.asarray(idx)
    X = _design(covariates(ds, idx), ds.crop_ids(idx), len(ds.crops))
    y = np.log(ds.yields(idx))
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    r2 = 1.0 - resid @ resid / ((y - y.mean()) @ (y - y.mean()))
    return OLSOracle(coef, len(ds.crops), float(r2))
