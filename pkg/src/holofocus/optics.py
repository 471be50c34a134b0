"""Hologram simulation: coded target, angular spectrum propagation, recording.

Lengths are in micrometres throughout. The recording model is an inline
(Gabor) hologram: the target is lit by a unit plane wave, its transmitted
field is propagated to the sensor and summed with an on-axis unit-amplitude
reference wave before taking the modulus squared.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CodeTooLarge, InvalidConfig, ShapeMismatch

A_LOW = 0.2
A_HIGH = 1.0


@dataclass(frozen=True)
class OpticalConfig:
    wavelength: float = 0.6
    pixel_pitch: float = 0.5
    grid_size: int = 128
    numerical_aperture: float = 0.3

    def __post_init__(self):
        if not self.wavelength > 0:
            raise InvalidConfig("wavelength must be > 0")
        if not self.pixel_pitch > 0:
            raise InvalidConfig("pixel_pitch must be > 0")
        n = self.grid_size
        if n < 2 or n & (n - 1):
            raise InvalidConfig(f"grid_size must be a power of two, got {n}")
        if not 0 < self.numerical_aperture <= 1:
            raise InvalidConfig("numerical_aperture must be in (0, 1]")

    def optical_resolution(self) -> float:
        """Axial resolution ``wavelength / NA**2`` in micrometres."""
        return self.wavelength / self.numerical_aperture**2


@dataclass(frozen=True)
class ComplexField:
    data: np.ndarray
    config: OpticalConfig

    def __post_init__(self):
        n = self.config.grid_size
        if self.data.shape != (n, n):
            raise ShapeMismatch((n, n), self.data.shape, "field")

    @property
    def re(self) -> np.ndarray:
        return self.data.real

    @property
    def im(self) -> np.ndarray:
        return self.data.imag

    def energy(self) -> float:
        return float(np.sum(np.abs(self.data) ** 2))


@dataclass(frozen=True)
class TargetPattern:
    bits_x: tuple[int, ...]
    bits_y: tuple[int, ...]
    cell_px: int
    amplitude: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class DatasetSpec:
    z0: float = 50.0
    z_step: float = 1.0
    n_classes: int = 10
    per_class: int = 360
    seed: int = 0
    noise_sigma: float = 0.01

    def __post_init__(self):
        if self.n_classes < 1 or self.per_class < 1:
            raise InvalidConfig("n_classes and per_class must be positive")
        if not self.z_step > 0:
            raise InvalidConfig("z_step must be > 0")

    def z_of(self, class_label: int) -> float:
        return self.z0 + class_label * self.z_step

    def class_of(self, z: float) -> int:
        return int(round((z - self.z0) / self.z_step))

    def guard_band(self) -> tuple[float, float]:
        return (
            self.z0 - 5 * self.z_step,
            self.z0 + (self.n_classes + 5) * self.z_step,
        )


@dataclass(frozen=True)
class Hologram:
    intensity: np.ndarray = field(repr=False)
    z_true: float
    class_label: int | None
    config: OpticalConfig


# --- coded target -----------------------------------------------------------
#
# Cell layout (units of cell_px), dark cells are "on":
#
#   row 0           frame
#   row 1           gap
#   row 2           x bits
#   row 3           spacer
#   row 4           y bits
#   row 5           gap
#   row 6           frame
#
# Columns: frame, gap, 2*max(len) code cells (at least 2), gap, frame.
# Each bit takes two cells: 1 -> (on, off), 0 -> (off, on); padding is
# (off, off), which lets the decoder recover the lengths.

_ROWS = 7


def _code_cells(bits_x, bits_y) -> np.ndarray:
    n = max(len(bits_x), len(bits_y), 1)
    width = 2 * n + 4
    cells = np.zeros((_ROWS, width), dtype=bool)
    cells[0, :] = cells[-1, :] = True
    cells[:, 0] = cells[:, -1] = True
    for row, bits in ((2, bits_x), (4, bits_y)):
        for i, b in enumerate(bits):
            cells[row, 2 + 2 * i + (0 if b else 1)] = True
    return cells


def generate_target(bits_x, bits_y, cell_px: int = 4, grid: int = 128) -> TargetPattern:
    """Render the binary-coded target centred in a ``grid x grid`` mask."""
    bits_x = tuple(int(b) for b in bits_x)
    bits_y = tuple(int(b) for b in bits_y)
    if any(b not in (0, 1) for b in bits_x + bits_y):
        raise ValueError("bits must be 0 or 1")
    if cell_px < 2:
        raise ValueError("cell_px must be >= 2")
    cells = _code_cells(bits_x, bits_y)
    h, w = cells.shape[0] * cell_px, cells.shape[1] * cell_px
    if h > grid or w > grid:
        raise CodeTooLarge(
            f"code needs {h}x{w} px with cell_px={cell_px}, grid is {grid}"
        )
    mask = np.kron(cells, np.ones((cell_px, cell_px), dtype=bool))
    amplitude = np.full((grid, grid), A_HIGH)
    r0, c0 = (grid - h) // 2, (grid - w) // 2
    amplitude[r0 : r0 + h, c0 : c0 + w][mask] = A_LOW
    return TargetPattern(bits_x, bits_y, cell_px, amplitude)


def decode_target(amplitude: np.ndarray, cell_px: int) -> tuple[list[int], list[int]]:
    """Read the bit sequences back from a rendered target mask."""
    dark = amplitude < 0.5 * (A_LOW + A_HIGH)
    rows = np.flatnonzero(dark.any(axis=1))
    cols = np.flatnonzero(dark.any(axis=0))
    if rows.size == 0:
        raise ValueError("no frame marker found")
    box = dark[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
    centre = cell_px // 2
    cells = box[centre::cell_px, centre::cell_px]
    if cells.shape[0] != _ROWS:
        raise ValueError(f"frame has {cells.shape[0]} cell rows, expected {_ROWS}")

    def read(row):
        out = []
        code = cells[row, 2:-2]
        for i in range(0, code.size, 2):
            pair = (bool(code[i]), bool(code[i + 1]))
            if pair == (True, False):
                out.append(1)
            elif pair == (False, True):
                out.append(0)
            elif pair == (False, False):
                break
            else:
                raise ValueError(f"corrupt cell pair at row {row}, column {i}")
        return out

    return read(2), read(4)


# --- propagation ------------------------------------------------------------


def transfer_function(config: OpticalConfig, z: float) -> np.ndarray:
    """Band-limited angular spectrum kernel; evanescent frequencies get 0."""
    n, dx, lam = config.grid_size, config.pixel_pitch, config.wavelength
    f = np.fft.fftfreq(n, d=dx)
    fx, fy = np.meshgrid(f, f, indexing="xy")
    arg = 1.0 / lam**2 - fx**2 - fy**2
    prop = arg >= 0
    kz = np.sqrt(np.where(prop, arg, 0.0))
    return np.where(prop, np.exp(1j * 2 * np.pi * z * kz), 0.0)


def angular_spectrum_propagate(field: ComplexField, z: float) -> ComplexField:
    if not np.isfinite(z):
        raise ValueError("propagation distance must be finite")
    spectrum = np.fft.fft2(field.data)
    out = np.fft.ifft2(spectrum * transfer_function(field.config, z))
    return ComplexField(out, field.config)


def record_hologram(
    target: TargetPattern,
    z: float,
    config: OpticalConfig,
    noise_seed: int = 0,
    noise_sigma: float = 0.01,
    dataset: DatasetSpec | None = None,
) -> Hologram:
    """Simulate the inline hologram of ``target`` at distance ``z``.

    ``noise_sigma`` is the standard deviation of additive Gaussian intensity
    noise, as a fraction of the noiseless intensity's dynamic range.
    """
    label = None
    if dataset is not None:
        lo, hi = dataset.guard_band()
        if not lo <= z <= hi:
            raise ValueError(f"z={z} outside guard band [{lo}, {hi}]")
        label = dataset.class_of(z)
    if target.amplitude.shape != (config.grid_size,) * 2:
        raise ShapeMismatch((config.grid_size,) * 2, target.amplitude.shape, "target")
    obj = angular_spectrum_propagate(
        ComplexField(target.amplitude.astype(np.complex128), config), z
    )
    reference = np.exp(1j * 2 * np.pi * z / config.wavelength)
    intensity = np.abs(obj.data + reference) ** 2
    if noise_sigma > 0:
        rng = np.random.default_rng(noise_seed)
        scale = noise_sigma * float(intensity.max() - intensity.min())
        intensity = intensity + rng.normal(0.0, scale, intensity.shape)
    np.maximum(intensity, 0.0, out=intensity)
    return Hologram(intensity, float(z), label, config)


def hologram_field(holo: Hologram) -> ComplexField:
    """Sensor-plane field estimate: recorded amplitude with zero phase."""
    return ComplexField(np.sqrt(holo.intensity).astype(np.complex128), holo.config)


def reconstruct_at(holo: Hologram, z: float) -> np.ndarray:
    """Back-propagate the hologram by ``z`` and return the intensity image."""
    back = angular_spectrum_propagate(hologram_field(holo), -z)
    return np.abs(back.data) ** 2


def noise_seed_for(seed: int, class_label: int, index: int) -> int:
    """Independent per-hologram noise seed derived from (seed, class, index)."""
    ss = np.random.SeedSequence([seed, class_label, index])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


DEFAULT_BITS_X = (1, 0, 1, 1, 0, 0, 1, 0)
DEFAULT_BITS_Y = (0, 1, 1, 0, 1, 0, 0, 1)


def default_target(config: OpticalConfig, cell_px: int = 2) -> TargetPattern:
    return generate_target(DEFAULT_BITS_X, DEFAULT_BITS_Y, cell_px, config.grid_size)


def simulate_dataset(
    spec: DatasetSpec, config: OpticalConfig, target: TargetPattern | None = None
):
    """Yield ``(class_label, index, noise_seed, Hologram)`` for the whole dataset."""
    target = target if target is not None else default_target(config)
    for label in range(spec.n_classes):
        z = spec.z_of(label)
        for index in range(spec.per_class):
            seed = noise_seed_for(spec.seed, label, index)
            holo = record_hologram(target, z, config, seed, spec.noise_sigma, spec)
            yield label, index, seed, holo
