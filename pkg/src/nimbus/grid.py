"""Gridded multivariate fields: data model, standardization, synthetic data, file I/O.

Fields live on an equiangular lat-lon grid (periodic longitude, bounded
latitude) and are stored as float32 with shape (time, variable, lat, lon).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DomainError, FormatError

MAGIC_FIELDS = b"PYLD0001"

# Largest axis product accepted when reading files; guards against corrupted
# headers allocating absurd arrays.
_MAX_ELEMENTS = 1 << 31


@dataclass(frozen=True)
class VariableSpec:
    """Per-variable metadata: identity, climatological stats, loss weight."""

    name: str
    mean: float
    std: float
    loss_weight: float = 1.0
    level: float | None = None

    def __post_init__(self):
        if not self.name:
            raise ConfigError("variable name must be non-empty")
        if not (self.std > 0):
            raise ConfigError(f"variable {self.name!r}: std must be > 0, got {self.std}")
        if self.loss_weight < 0:
            raise ConfigError(f"variable {self.name!r}: loss_weight must be >= 0")


@dataclass(frozen=True)
class FieldBatch:
    """A stack of multivariate gridded states, shape (T, V, H, W)."""

    data: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    specs: tuple[VariableSpec, ...]

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        lat = np.asarray(self.lat, dtype=np.float64)
        lon = np.asarray(self.lon, dtype=np.float64)
        specs = tuple(self.specs)
        if data.ndim != 4:
            raise DomainError(f"field data must be 4-axis (T,V,H,W), got shape {data.shape}")
        t, v, h, w = data.shape
        if lat.shape != (h,) or lon.shape != (w,):
            raise DomainError(
                f"lat/lon shapes {lat.shape}/{lon.shape} do not match grid ({h},{w})"
            )
        if len(specs) != v:
            raise ConfigError(f"{len(specs)} specs for {v} variables")
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise ConfigError("variable names must be unique")
        if np.any(np.abs(lat) > 90.0):
            raise DomainError("latitudes must lie in [-90, 90]")
        d = np.diff(lat)
        if lat.size > 1 and not (np.all(d > 0) or np.all(d < 0)):
            raise DomainError("latitudes must be strictly monotone")
        if not np.all(np.isfinite(data)):
            raise DomainError("field data contains non-finite values")
        for arr in (data, lat, lon):
            arr.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)
        object.__setattr__(self, "specs", specs)

    @property
    def shape(self):
        return self.data.shape

    def spec_by_name(self, name: str) -> VariableSpec:
        for s in self.specs:
            if s.name == name:
                return s
        raise ConfigError(f"no spec for variable {name!r}")

    def with_data(self, data: np.ndarray) -> "FieldBatch":
        return replace(self, data=data)


class ResidualBatch(FieldBatch):
    """One-step differences X_{t+1} - X_t; specs hold residual statistics."""


@dataclass(frozen=True)
class LatWeights:
    """Area weights proportional to cos(latitude), normalized to mean 1."""

    w: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        w.setflags(write=False)
        object.__setattr__(self, "w", w)


def lat_weights(lat) -> LatWeights:
    """Cosine-of-latitude area weights with exact unit mean."""
    lat = np.asarray(lat, dtype=np.float64)
    if lat.size == 0:
        raise DomainError("latitude list must be non-empty")
    if np.any(np.abs(lat) > 90.0):
        raise DomainError("latitudes must lie in [-90, 90]")
    c = np.cos(np.deg2rad(lat))
    return LatWeights(c / c.mean())


def standardize(x: FieldBatch, specs=None) -> FieldBatch:
    """Per-variable (x - mean) / std using the given (or attached) specs."""
    specs = tuple(specs) if specs is not None else x.specs
    _check_specs_cover(x, specs)
    mean = np.array([s.mean for s in specs], dtype=np.float32)[:, None, None]
    std = np.array([s.std for s in specs], dtype=np.float32)[:, None, None]
    out = (x.data - mean) / std
    return replace(x, data=out, specs=specs)


def destandardize(x: FieldBatch, specs=None) -> FieldBatch:
    """Inverse of :func:`standardize`."""
    specs = tuple(specs) if specs is not None else x.specs
    _check_specs_cover(x, specs)
    mean = np.array([s.mean for s in specs], dtype=np.float32)[:, None, None]
    std = np.array([s.std for s in specs], dtype=np.float32)[:, None, None]
    return replace(x, data=x.data * std + mean, specs=specs)


def standardize_array(a: np.ndarray, specs) -> np.ndarray:
    """Array-level standardize for (..., V, H, W) data."""
    mean = np.array([s.mean for s in specs], dtype=a.dtype)[:, None, None]
    std = np.array([s.std for s in specs], dtype=a.dtype)[:, None, None]
    return (a - mean) / std


def destandardize_array(a: np.ndarray, specs) -> np.ndarray:
    mean = np.array([s.mean for s in specs], dtype=a.dtype)[:, None, None]
    std = np.array([s.std for s in specs], dtype=a.dtype)[:, None, None]
    return a * std + mean


def _check_specs_cover(x: FieldBatch, specs):
    if len(specs) != x.data.shape[1]:
        raise ConfigError(
            f"{len(specs)} specs cannot standardize {x.data.shape[1]} variables"
        )


def residual_specs(x: FieldBatch) -> tuple[VariableSpec, ...]:
    """Per-variable statistics of the one-step differences of ``x``.

    The residual mean/std are computed from the data itself (not the state
    climatology), which is what residual standardization must use.
    """
    if x.data.shape[0] < 2:
        raise DomainError("need at least two time steps for residual statistics")
    diff = np.diff(x.data.astype(np.float64), axis=0)
    out = []
    for v, s in enumerate(x.specs):
        std = float(diff[:, v].std())
        out.append(
            VariableSpec(
                name=s.name,
                mean=float(diff[:, v].mean()),
                std=max(std, 1e-12),
                loss_weight=s.loss_weight,
                level=s.level,
            )
        )
    return tuple(out)


def residuals(x: FieldBatch, specs=None) -> ResidualBatch:
    """Raw one-step differences with residual-statistics specs attached.

    Entry ``t`` of the output equals ``X_{t+1} - X_t``; standardization is a
    separate step (see :func:`standardize`).
    """
    if x.data.shape[0] < 2:
        raise DomainError("residuals need T >= 2 time steps")
    specs = tuple(specs) if specs is not None else residual_specs(x)
    diff = x.data[1:] - x.data[:-1]
    return ResidualBatch(data=diff, lat=x.lat, lon=x.lon, specs=specs)


def default_grid(h: int, w: int):
    """Equiangular lat/lon vectors: lat cell centers, periodic lon."""
    lat = -90.0 + (np.arange(h) + 0.5) * (180.0 / h)
    lon = np.arange(w) * (360.0 / w)
    return lat, lon


def gen_synthetic(
    seed: int,
    h: int = 64,
    w: int = 128,
    v: int = 8,
    t: int = 32,
    spectral_slopes=None,
    advection=None,
    forcing: float = 0.1,
    names=None,
) -> FieldBatch:
    """Synthetic multivariate dataset with per-variable spectral slopes.

    Each variable starts as a Gaussian random field whose radial amplitude
    spectrum follows ``(r + r0)^(-slope)`` and evolves by periodic integer
    advection plus small stochastic forcing with the same spectrum.
    Deterministic given ``seed``.
    """
    from . import spectral

    if h < 8 or w < 8:
        raise DomainError("grid must be at least 8x8")
    slopes = np.asarray(
        spectral_slopes if spectral_slopes is not None else np.linspace(1.0, 3.5, v),
        dtype=np.float64,
    )
    if slopes.shape != (v,) or not np.all(np.isfinite(slopes)):
        raise DomainError("spectral_slopes must be V finite values")
    if advection is None:
        advection = [((i % 3) - 1, 1 + (i % 4)) for i in range(v)]
    advection = [(int(dy), int(dx)) for dy, dx in advection]
    if len(advection) != v:
        raise DomainError("advection must give one (dy, dx) velocity per variable")

    rng = np.random.default_rng(seed)
    r = spectral.normalized_radius(h, w)
    r0 = 2.0 / max(h, w)
    data = np.empty((t, v, h, w), dtype=np.float64)

    def grf(amp):
        z = rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))
        f = np.fft.ifft2(amp * z).real
        f -= f.mean()
        s = f.std()
        return f / s if s > 0 else f

    for j in range(v):
        amp = (r + r0) ** (-slopes[j])
        cur = grf(amp)
        data[0, j] = cur
        for i in range(1, t):
            cur = np.roll(cur, shift=advection[j], axis=(0, 1))
            if forcing > 0:
                cur = cur + forcing * grf(amp)
            data[i, j] = cur

    if names is None:
        names = [f"var{j}" for j in range(v)]
    specs = tuple(
        VariableSpec(
            name=names[j],
            mean=float(data[:, j].mean()),
            std=max(float(data[:, j].std()), 1e-12),
        )
        for j in range(v)
    )
    lat, lon = default_grid(h, w)
    return FieldBatch(data=data.astype(np.float32), lat=lat, lon=lon, specs=specs)


# ---------------------------------------------------------------------------
# PYLD1 container: magic, u32 dims, variable records, axes, f32 payload.
# ---------------------------------------------------------------------------


def write_fields(x: FieldBatch, path) -> None:
    t, v, h, w = x.data.shape
    parts = [MAGIC_FIELDS, struct.pack("<4I", t, v, h, w)]
    for s in x.specs:
        name = s.name.encode("utf-8")
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        level = math.nan if s.level is None else float(s.level)
        parts.append(struct.pack("<4d", s.mean, s.std, s.loss_weight, level))
    parts.append(np.ascontiguousarray(x.lat, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(x.lon, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(x.data, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Cursor:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what}: need {n} more bytes", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def read_fields(path) -> FieldBatch:
    with open(path, "rb") as fh:
        buf = fh.read()
    cur = _Cursor(buf)
    magic = cur.take(8, "magic")
    if magic != MAGIC_FIELDS:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC_FIELDS!r}", 0)
    t, v, h, w = struct.unpack("<4I", cur.take(16, "header"))
    if t * v * h * w > _MAX_ELEMENTS or min(t, v, h, w) == 0:
        raise FormatError(f"unreasonable dimensions (T={t}, V={v}, H={h}, W={w})", 8)
    specs = []
    for _ in range(v):
        (nlen,) = struct.unpack("<H", cur.take(2, "truncated header (variable record)"))
        name = cur.take(nlen, "truncated header (variable name)").decode("utf-8")
        mean, std, lw, level = struct.unpack(
            "<4d", cur.take(32, "truncated header (variable stats)")
        )
        specs.append(
            VariableSpec(
                name=name,
                mean=mean,
                std=std,
                loss_weight=lw,
                level=None if math.isnan(level) else level,
            )
        )
    lat = np.frombuffer(cur.take(8 * h, "latitude axis"), dtype="<f8")
    lon = np.frombuffer(cur.take(8 * w, "longitude axis"), dtype="<f8")
    payload = cur.take(4 * t * v * h * w, "payload")
    if cur.pos != len(buf):
        raise FormatError(f"{len(buf) - cur.pos} trailing bytes after payload", cur.pos)
    data = np.frombuffer(payload, dtype="<f4").reshape(t, v, h, w)
    return FieldBatch(data=data, lat=lat, lon=lon, specs=tuple(specs))
