"""Periodic bumpy boundaries, graph-shifted boxes, and terrain-following maps.

The wall profile gamma is 2*pi-periodic in each horizontal variable,
band-limited, and takes values strictly inside (-1, 0).  It is stored both
spectrally (truncated Fourier coefficients) and as samples on a uniform
N x N grid; the two representations are kept consistent to round-off.

Grid layout convention used across the toolkit: 2-d horizontal arrays are
indexed ``[i2, i1]`` with ``y1`` varying fastest (last axis).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConjugacyViolation, DegenerateMap, RangeViolation

RANGE_MARGIN = 1e-6


def _grid_nodes(n):
    return 2.0 * np.pi * np.arange(n) / n


def _coeffs_to_grid(coeffs, n):
    """Inverse DFT of a coefficient map onto the N x N nodes."""
    c = np.zeros((n, n), dtype=complex)
    for (k1, k2), a in coeffs.items():
        c[k2 % n, k1 % n] += a
    return np.fft.ifft2(c) * n * n


def _grid_to_coeffs(samples, tol=1e-13):
    n = samples.shape[0]
    c = np.fft.fft2(samples) / (n * n)
    kidx = np.fft.fftfreq(n, d=1.0 / n).astype(int)
    coeffs = {}
    cmax = np.abs(c).max()
    for i2 in range(n):
        for i1 in range(n):
            a = c[i2, i1]
            if abs(a) > tol * max(cmax, 1.0):
                coeffs[(int(kidx[i1]), int(kidx[i2]))] = complex(a)
    return coeffs


@dataclass(frozen=True)
class BoundaryFunction:
    """2*pi-periodic Lipschitz wall profile, stored spectrally and on a grid.

    Immutable after construction; safe for concurrent reads.
    """

    fourier_coeffs: dict
    grid_samples: np.ndarray
    lipschitz_bound: float
    range: tuple

    @property
    def grid_size(self):
        return self.grid_samples.shape[0]

    @property
    def mean(self):
        return float(self.fourier_coeffs.get((0, 0), 0.0).real)

    @property
    def kmax(self):
        return max((max(abs(k1), abs(k2)) for (k1, k2) in self.fourier_coeffs), default=0)

    @property
    def depth_samples(self):
        """Layer depth -gamma > 0 on the grid."""
        return -self.grid_samples

    def is_flat(self, tol=1e-14):
        return all(k == (0, 0) or abs(a) <= tol for k, a in self.fourier_coeffs.items())

    def is_groove(self, tol=1e-14):
        """True when gamma depends on y1 only (all k2 != 0 modes vanish)."""
        return all(k[1] == 0 or abs(a) <= tol for k, a in self.fourier_coeffs.items())

    def _mode_arrays(self):
        ks = np.array(sorted(self.fourier_coeffs), dtype=int)
        amps = np.array([self.fourier_coeffs[tuple(k)] for k in ks], dtype=complex)
        return ks, amps

    def sample_at(self, y1, y2):
        """Evaluate gamma at arbitrary points by direct mode synthesis (exact)."""
        y1 = np.asarray(y1, dtype=float)
        y2 = np.asarray(y2, dtype=float)
        ks, amps = self._mode_arrays()
        phase = np.multiply.outer(y1, ks[:, 0]) + np.multiply.outer(y2, ks[:, 1])
        return np.real(np.exp(1j * phase) @ amps)

    def gradient_at(self, y1, y2):
        """Evaluate (d1 gamma, d2 gamma) at arbitrary points (exact)."""
        y1 = np.asarray(y1, dtype=float)
        y2 = np.asarray(y2, dtype=float)
        ks, amps = self._mode_arrays()
        phase = np.exp(1j * (np.multiply.outer(y1, ks[:, 0]) + np.multiply.outer(y2, ks[:, 1])))
        g1 = np.real(phase @ (1j * ks[:, 0] * amps))
        g2 = np.real(phase @ (1j * ks[:, 1] * amps))
        return g1, g2

    def gradient_samples(self):
        """(d1 gamma, d2 gamma) on the grid via spectral differentiation."""
        n = self.grid_size
        c = np.fft.fft2(self.grid_samples)
        k = np.fft.fftfreq(n, d=1.0 / n)
        k1 = k[None, :]
        k2 = k[:, None]
        g1 = np.real(np.fft.ifft2(1j * k1 * c))
        g2 = np.real(np.fft.ifft2(1j * k2 * c))
        return g1, g2

    def to_json_dict(self):
        modes = [
            {"k": [int(k1), int(k2)], "re": float(a.real), "im": float(a.imag)}
            for (k1, k2), a in sorted(self.fourier_coeffs.items())
        ]
        return {"modes": modes, "grid": int(self.grid_size)}

    @property
    def content_hash(self):
        payload = json.dumps(self.to_json_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]

    def dump_grid_csv(self, path):
        """Grid dump with header ``y1,y2,gamma``."""
        n = self.grid_size
        nodes = _grid_nodes(n)
        with open(path, "w") as fh:
            fh.write("y1,y2,gamma\n")
            for i2 in range(n):
                for i1 in range(n):
                    fh.write(f"{nodes[i1]!r},{nodes[i2]!r},{self.grid_samples[i2, i1]!r}\n")


def build_boundary(spec, grid_size):
    """Build a :class:`BoundaryFunction` from modes or grid samples.

    Parameters
    ----------
    spec : dict or array
        Either a map ``{(k1, k2): amplitude}`` (Hermitian-symmetric,
        ``|k|_inf`` below the grid Nyquist) or real samples on the
        ``grid_size x grid_size`` uniform grid over ``(0, 2*pi)^2``.
    grid_size : int
        Power of two, at least 8.

    Raises
    ------
    RangeViolation
        If any sample leaves ``(-1 + 1e-6, -1e-6)``.
    ConjugacyViolation
        If the coefficients are not Hermitian-symmetric.
    """
    n = int(grid_size)
    if n < 8 or (n & (n - 1)) != 0:
        raise ValueError(f"grid size must be a power of two >= 8, got {grid_size}")

    if isinstance(spec, dict):
        if not spec:
            raise ValueError("empty boundary spec")
        coeffs = {(int(k1), int(k2)): complex(a) for (k1, k2), a in spec.items()}
        for (k1, k2) in coeffs:
            if max(abs(k1), abs(k2)) >= n // 2:
                raise ValueError(f"mode {(k1, k2)} not representable on a {n} grid")
        for (k1, k2), a in coeffs.items():
            b = coeffs.get((-k1, -k2))
            if b is None or abs(np.conj(a) - b) > 1e-12 * max(1.0, abs(a)):
                raise ConjugacyViolation(
                    f"coefficient at {(-k1, -k2)} must be the conjugate of the one at {(k1, k2)}"
                )
        g = _coeffs_to_grid(coeffs, n)
        if np.abs(g.imag).max() > 1e-12:
            raise ConjugacyViolation("coefficients synthesize a non-real profile")
        samples = g.real
    else:
        samples = np.asarray(spec, dtype=float)
        if samples.shape != (n, n):
            raise ValueError(f"grid samples must have shape {(n, n)}, got {samples.shape}")
        coeffs = _grid_to_coeffs(samples)

    lo, hi = float(samples.min()), float(samples.max())
    if lo <= -1.0 + RANGE_MARGIN or hi >= -RANGE_MARGIN:
        raise RangeViolation(
            f"profile range [{lo:.6g}, {hi:.6g}] must lie inside "
            f"({-1 + RANGE_MARGIN:.6g}, {-RANGE_MARGIN:.6g})"
        )

    bnd = BoundaryFunction(
        fourier_coeffs=coeffs,
        grid_samples=samples,
        lipschitz_bound=0.0,
        range=(lo, hi),
    )
    g1, g2 = bnd.gradient_samples()
    lip = float(np.sqrt(g1 * g1 + g2 * g2).max())
    object.__setattr__(bnd, "lipschitz_bound", lip)
    bnd.grid_samples.setflags(write=False)
    return bnd


def boundary_from_json(obj, grid_size=None):
    """Rebuild a boundary from the JSON spec ``{"modes": [...], "grid": N}``."""
    n = grid_size or obj.get("grid")
    coeffs = {
        (int(m["k"][0]), int(m["k"][1])): complex(m["re"], m.get("im", 0.0))
        for m in obj["modes"]
    }
    return build_boundary(coeffs, n)


def random_boundary(seed, kmax=2, mean=-0.5, oscillation=0.18, grid_size=64):
    """Random band-limited profile with prescribed mean and peak oscillation.

    Coefficients are complex Gaussian with a 1/(1 + |k|^2) taper,
    Hermitian-symmetrized, then rescaled so the oscillation around the mean
    has the requested sup amplitude.
    """
    rng = np.random.default_rng(seed) if not hasattr(seed, "normal") else seed
    raw = {}
    for k1 in range(-kmax, kmax + 1):
        for k2 in range(-kmax, kmax + 1):
            if (k1, k2) <= (0, 0):
                continue
            a = complex(rng.normal(), rng.normal()) / (1.0 + k1 * k1 + k2 * k2)
            raw[(k1, k2)] = a
            raw[(-k1, -k2)] = np.conj(a)
    n = grid_size
    osc = np.real(_coeffs_to_grid(raw, n))
    scale = oscillation / max(np.abs(osc).max(), 1e-300)
    coeffs = {(0, 0): complex(mean)}
    coeffs.update({k: v * scale for k, v in raw.items()})
    return build_boundary(coeffs, n)


@dataclass(frozen=True)
class BumpyBox:
    """Graph-shifted box over the rough wall, side r, roughness epsilon.

    In shifted coordinates (x', t) with t = x3 - eps*gamma(x'/eps) the box
    is exactly (-r, r)^2 x (0, r), so its volume is 4 r^3.
    """

    epsilon: float
    r: float
    center: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not (0.0 < self.epsilon <= 1.0):
            raise ValueError("epsilon must be in (0, 1]")
        if not (0.0 < self.r <= 1.0):
            raise ValueError("r must be in (0, 1]")

    @property
    def volume(self):
        return 4.0 * self.r**3

    @property
    def mesoscopic(self):
        """True in the regime r >= epsilon; sub-epsilon boxes are small-scale."""
        return self.r >= self.epsilon


@dataclass(frozen=True)
class TerrainMap:
    """Terrain-following change of variables shared by the solvers.

    channel_shear : s = x3 - eps*gamma(x'/eps) maps the graph-shifted slab of
        thickness one onto (0,1) x torus with unit Jacobian.
    strip_sigma : s = (y3 - gamma)/(-gamma) maps the strip {gamma < y3 < 0}
        onto (0,1) x torus with Jacobian -gamma > 0.
    """

    kind: str
    boundary: BoundaryFunction
    epsilon: float | None
    depth: np.ndarray = field(repr=False)
    dgamma1: np.ndarray = field(repr=False)
    dgamma2: np.ndarray = field(repr=False)

    def jacobian(self):
        if self.kind == "channel_shear":
            return np.ones_like(self.depth)
        return self.depth


def terrain_map(boundary, kind, epsilon=None):
    """Tabulate the metric data of a terrain-following map.

    Raises :class:`DegenerateMap` when the layer depth falls below 1e-6
    anywhere (strip map only; the shear map is always volume preserving).
    """
    if kind not in ("channel_shear", "strip_sigma"):
        raise ValueError(f"unknown terrain map kind {kind!r}")
    if kind == "channel_shear":
        if epsilon is None or not (0.0 < epsilon <= 1.0):
            raise ValueError("channel_shear requires epsilon in (0, 1]")
    g1, g2 = boundary.gradient_samples()
    depth = boundary.depth_samples
    if kind == "strip_sigma" and depth.min() < 1e-6:
        raise DegenerateMap(f"layer depth {depth.min():.3g} below 1e-6")
    return TerrainMap(
        kind=kind,
        boundary=boundary,
        epsilon=epsilon,
        depth=depth,
        dgamma1=g1,
        dgamma2=g2,
    )
