"""Dense 3D grids, the raw volume file format, seeded RNG and synthetic phantoms.

Arrays are indexed ``(x, y, z)`` in C order, so z is the fastest-varying
axis.  Scalar volumes have shape ``(H, W, L)``, displacement / velocity
fields ``(3, H, W, L)`` in voxel units, label stacks ``(K, H, W, L)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PAYLOAD_DTYPE = "f32le"


class VolumeError(ValueError):
    """Raised for malformed volumes, headers or payloads."""


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; equal seeds give equal streams everywhere."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise VolumeError(f"volume must be 3D with positive dims, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise VolumeError("volume contains non-finite samples")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise VolumeError(f"spacing must be 3 positive lengths, got {self.spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


def check_field(u: np.ndarray, dims=None, name: str = "field") -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 4 or u.shape[0] != 3:
        raise VolumeError(f"{name} must have shape (3, H, W, L), got {u.shape}")
    if dims is not None and tuple(u.shape[1:]) != tuple(dims):
        raise VolumeError(f"{name} dims {u.shape[1:]} do not match {tuple(dims)}")
    if not np.all(np.isfinite(u)):
        raise VolumeError(f"{name} contains non-finite samples")
    return u


def check_labels(s: np.ndarray, dims=None, binary: bool = False) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 4 or s.shape[0] < 1:
        raise VolumeError(f"label stack must have shape (K, H, W, L), got {s.shape}")
    if dims is not None and tuple(s.shape[1:]) != tuple(dims):
        raise VolumeError(f"label dims {s.shape[1:]} do not match {tuple(dims)}")
    if binary and not np.all((s == 0) | (s == 1)):
        raise VolumeError("label stack must be binary at construction")
    return s


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".raw")


def volume_write(v: Volume | np.ndarray, path) -> None:
    """Write ``<path>.json`` header and ``<path>.raw`` little-endian float32 payload."""
    if not isinstance(v, Volume):
        v = Volume(np.asarray(v))
    payload = np.ascontiguousarray(v.data, dtype="<f4")
    if not np.all(np.isfinite(payload)):
        raise VolumeError("volume contains samples that are not finite in float32")
    header_path, raw_path = _paths(path)
    header = {"dims": list(v.dims), "spacing": list(v.spacing), "dtype": PAYLOAD_DTYPE}
    header_path.write_text(json.dumps(header, sort_keys=True) + "\n", encoding="utf-8")
    raw_path.write_bytes(payload.tobytes(order="C"))


def volume_read(path) -> Volume:
    header_path, raw_path = _paths(path)
    if not header_path.exists():
        raise VolumeError(f"missing header {header_path}")
    header = json.loads(header_path.read_text(encoding="utf-8"))
    if header.get("dtype") != PAYLOAD_DTYPE:
        raise VolumeError(f"unsupported dtype {header.get('dtype')!r}")
    dims = tuple(int(d) for d in header["dims"])
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeError(f"bad dims {dims}")
    if not raw_path.exists():
        raise VolumeError(f"missing payload {raw_path}")
    raw = raw_path.read_bytes()
    expected = 4 * int(np.prod(dims))
    if len(raw) != expected:
        raise VolumeError(f"payload size mismatch: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    return Volume(data, tuple(header.get("spacing", (1.0, 1.0, 1.0))))


def write_stack(stack: np.ndarray, prefix, names=None) -> list[Path]:
    """Write each leading-axis channel of ``stack`` as its own volume ``<prefix>_<name>``."""
    stack = np.asarray(stack)
    names = names or [str(k) for k in range(stack.shape[0])]
    written = []
    for name, channel in zip(names, stack):
        target = Path(f"{prefix}_{name}")
        volume_write(Volume(channel), target)
        written.append(target)
    return written


def read_stack(prefix, names) -> np.ndarray:
    return np.stack([volume_read(f"{prefix}_{n}").data for n in names])


def _grid(dims):
    return np.stack(np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij"))


def _ellipsoid(grid, center, radii):
    radii = np.asarray(radii, dtype=np.float64)
    if np.any(radii <= 0):
        raise VolumeError(f"phantom radii must be positive, got {radii.tolist()}")
    rel = (grid - np.asarray(center, dtype=np.float64)[:, None, None, None]) / radii[:, None, None, None]
    return np.sqrt(np.sum(rel**2, axis=0))


def make_phantom(kind: str, dims, params: dict | None = None, rng: np.random.Generator | None = None):
    """Synthetic intensity volume and indicator label stack.

    ``kind`` is ``sphere`` (``radius``), ``ellipsoid`` (``radii``) or
    ``two-blob`` (``radius``, ``separation``).  Shapes are centred unless
    ``center`` is given.  Intensity is a soft-edged indicator (edge width
    ``edge`` voxels) plus optional Gaussian ``noise`` drawn from ``rng``,
    clipped to [0, 1].
    """
    dims = tuple(int(d) for d in np.broadcast_to(dims, (3,)))
    if min(dims) < 8:
        raise VolumeError(f"phantom dims must be >= 8 per axis, got {dims}")
    params = dict(params or {})
    center = np.asarray(params.pop("center", [(d - 1) / 2 for d in dims]), dtype=np.float64)
    edge = float(params.pop("edge", 1.0))
    noise = float(params.pop("noise", 0.0))
    grid = _grid(dims)

    if kind == "sphere":
        r = float(params.pop("radius", min(dims) / 4))
        shapes = [(center, (r, r, r))]
    elif kind == "ellipsoid":
        radii = params.pop("radii", [min(dims) / 4 * f for f in (1.25, 0.8, 1.0)])
        shapes = [(center, tuple(float(x) for x in np.broadcast_to(radii, (3,))))]
    elif kind == "two-blob":
        r = float(params.pop("radius", min(dims) / 6))
        sep = float(params.pop("separation", 2.5 * r))
        offset = np.array([sep / 2, 0.0, 0.0])
        shapes = [(center - offset, (r, r, r)), (center + offset, (r, r, r))]
    else:
        raise VolumeError(f"unknown phantom kind {kind!r}")
    if params:
        raise VolumeError(f"unknown phantom parameters {sorted(params)}")

    labels = []
    intensity = np.zeros(dims)
    for c, radii in shapes:
        level = _ellipsoid(grid, c, radii)
        labels.append((level <= 1.0).astype(np.float64))
        # signed distance approximated along the mean radius
        soft = 1.0 / (1.0 + np.exp((level - 1.0) * np.mean(radii) / max(edge, 1e-6)))
        intensity = np.maximum(intensity, soft)
    if noise > 0:
        if rng is None:
            raise VolumeError("noise requested without an rng")
        intensity = intensity + noise * rng.standard_normal(dims)
    intensity = np.clip(intensity, 0.0, 1.0)
    return intensity, np.stack(labels)
