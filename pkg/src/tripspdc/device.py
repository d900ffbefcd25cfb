"""Three-mode cavity model: parameters, rotating-frame Hamiltonian, dissipators.

All rates are stored in rad/us (angular). Frequencies are cyclic GHz and only
enter the thermal and calibration code.
"""

from __future__ import annotations

import configparser
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .fock import HilbertSpace, Operator, annihilation

TWO_PI = 2.0 * math.pi


class RateConvention(str, enum.Enum):
    CYCLIC_MHZ = "cyclic_MHz"
    ANGULAR_RAD_PER_US = "angular_rad_per_us"

    def to_angular(self, value):
        """Convert a rate (scalar or array) in this convention to rad/us."""
        if self is RateConvention.CYCLIC_MHZ:
            return np.multiply(value, TWO_PI) if not np.isscalar(value) else value * TWO_PI
        return value

    def from_angular(self, value):
        if self is RateConvention.CYCLIC_MHZ:
            return np.divide(value, TWO_PI) if not np.isscalar(value) else value / TWO_PI
        return value


def kerr_khz_to_angular(kerr_khz) -> np.ndarray:
    """Cyclic kHz -> rad/us."""
    return TWO_PI * 1e-3 * np.asarray(kerr_khz, dtype=float)


@dataclass(frozen=True)
class ModeParams:
    frequency: float  # GHz, cyclic
    gamma_ext: float  # rad/us
    gamma_int: float = 0.0  # rad/us
    thermal_occupation: float = 0.0

    def __post_init__(self):
        if not self.frequency > 0:
            raise ValueError("mode frequency must be positive")
        if not self.gamma_ext > 0:
            raise ValueError("external decay rate must be positive")
        if self.gamma_int < 0:
            raise ValueError("internal decay rate must be non-negative")
        if self.thermal_occupation < 0:
            raise ValueError("thermal occupation must be non-negative")

    @property
    def gamma(self) -> float:
        return self.gamma_ext + self.gamma_int

    @property
    def lifetime(self) -> float:
        return 1.0 / self.gamma


@dataclass(frozen=True)
class DeviceModel:
    modes: tuple[ModeParams, ModeParams, ModeParams]
    g: float  # rad/us
    kerr: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))  # rad/us
    pump_detuning: float = 0.0  # rad/us

    def __post_init__(self):
        if len(self.modes) != 3:
            raise ValueError("the device has exactly three modes")
        k = np.asarray(self.kerr, dtype=float)
        if k.shape != (3, 3):
            raise ValueError("Kerr matrix must be 3x3")
        k.setflags(write=False)
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(self, "kerr", k)
        if gamma_total(self) <= 0:
            raise ValueError("total decay rate must be positive")

    @property
    def gammas(self) -> np.ndarray:
        return np.array([m.gamma for m in self.modes])

    @property
    def gamma_ext(self) -> np.ndarray:
        return np.array([m.gamma_ext for m in self.modes])

    @property
    def kerr_sym(self) -> np.ndarray:
        return 0.5 * (self.kerr + self.kerr.T)

    @property
    def lam(self) -> float:
        """Perturbative parameter g / gamma_T."""
        return self.g / gamma_total(self)

    def with_g(self, g: float) -> "DeviceModel":
        return replace(self, g=float(g))

    def without_kerr(self) -> "DeviceModel":
        return replace(self, kerr=np.zeros((3, 3)))

    def permuted(self, order: Sequence[int]) -> "DeviceModel":
        """Relabel modes: new mode i is old mode order[i]."""
        order = list(order)
        k = self.kerr[np.ix_(order, order)]
        return replace(self, modes=tuple(self.modes[i] for i in order), kerr=k)


def gamma_total(model: DeviceModel) -> float:
    return float(sum(m.gamma_ext + m.gamma_int for m in model.modes))


def _check_space(space: HilbertSpace) -> None:
    if space.n_modes != 3:
        raise ValueError(f"device Hamiltonian needs a 3-mode space, got {space.n_modes}")


def build_hamiltonian(model: DeviceModel, space: HilbertSpace) -> Operator:
    """Rotating-frame Hamiltonian with three-photon drive and symmetrized Kerr.

    H = g (a1 a2 a3 + h.c.) - sum_nm K_nm a_n^+ a_m^+ a_n a_m
        - (detuning / 3) sum_n a_n^+ a_n
    """
    _check_space(space)
    a = [annihilation(space, i).data for i in range(3)]
    ad = [x.conj().T.tocsr() for x in a]
    triple = a[0] @ a[1] @ a[2]
    h = model.g * (triple + triple.conj().T)
    ks = model.kerr_sym
    for n in range(3):
        for m in range(3):
            if ks[n, m] != 0.0:
                h = h - ks[n, m] * (ad[n] @ ad[m] @ a[n] @ a[m])
    if model.pump_detuning != 0.0:
        for n in range(3):
            h = h - (model.pump_detuning / 3.0) * (ad[n] @ a[n])
    return Operator(space, h.tocsr())


def collapse_operators(model: DeviceModel, space: HilbertSpace) -> list[Operator]:
    """Zero-temperature dissipators: external then internal channel per mode."""
    _check_space(space)
    ops = []
    for i, mode in enumerate(model.modes):
        if mode.thermal_occupation > 0:
            raise NotImplementedError("only the zero-temperature dissipator is supported")
        a = annihilation(space, i)
        ops.append(math.sqrt(mode.gamma_ext) * a)
        if mode.gamma_int > 0:
            ops.append(math.sqrt(mode.gamma_int) * a)
    return ops


# ---------------------------------------------------------------------------
# reference parameter sets

REFERENCE_FREQUENCIES_GHZ = (5.560, 6.831, 7.902)
REFERENCE_GAMMA_EXT_MHZ = (0.604, 1.242, 0.746)  # cyclic
REFERENCE_GAMMA_INT_MHZ = (0.035, 0.097, 0.308)  # cyclic
REFERENCE_G_MHZ = 0.03  # cyclic
# rows: pumped mode, columns: probed mode; cyclic kHz
REFERENCE_KERR_KHZ = np.array([
    [36.4, 70.1, 136.0],
    [45.4, 28.7, 107.4],
    [139.5, 172.6, 160.3],
])
# characterized linewidths, angular (rad/us)
CHARACTERIZED_GAMMA_EXT = (3.795, 7.804, 4.687)
CHARACTERIZED_GAMMA_TOT = (4.015, 8.413, 6.622)
G_MIN_MHZ = 0.057


def reference_device(g_mhz: float = REFERENCE_G_MHZ, kerr: bool = True) -> DeviceModel:
    """Simulation parameter set of the measured device (cyclic inputs converted)."""
    conv = RateConvention.CYCLIC_MHZ
    modes = tuple(
        ModeParams(f, conv.to_angular(ge), conv.to_angular(gi))
        for f, ge, gi in zip(REFERENCE_FREQUENCIES_GHZ, REFERENCE_GAMMA_EXT_MHZ,
                             REFERENCE_GAMMA_INT_MHZ)
    )
    k = kerr_khz_to_angular(REFERENCE_KERR_KHZ) if kerr else np.zeros((3, 3))
    return DeviceModel(modes, conv.to_angular(g_mhz), k)


# ---------------------------------------------------------------------------
# config files


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration input."""


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(",", " ").split()]


def load_config(path: str | Path) -> tuple[DeviceModel, tuple[int, int, int], configparser.ConfigParser]:
    """Parse an INI-style device file.

    Sections ``mode1``..``mode3`` carry frequency_GHz, gamma_ext, gamma_int and
    unit; ``coupling`` carries g and g_unit; ``kerr`` carries kerr_matrix_kHz
    (nine numbers, row-major); ``truncation`` carries dims.
    """
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(cp), parse_dims(cp), cp


def parse_config(cp: configparser.ConfigParser) -> DeviceModel:
    try:
        modes = []
        for i in range(1, 4):
            sec = cp[f"mode{i}"]
            conv = RateConvention(sec.get("unit", RateConvention.ANGULAR_RAD_PER_US.value))
            modes.append(ModeParams(
                frequency=sec.getfloat("frequency_GHz"),
                gamma_ext=conv.to_angular(sec.getfloat("gamma_ext")),
                gamma_int=conv.to_angular(sec.getfloat("gamma_int", 0.0)),
                thermal_occupation=sec.getfloat("thermal_occupation", 0.0),
            ))
        cpl = cp["coupling"]
        g_conv = RateConvention(cpl.get("g_unit", RateConvention.ANGULAR_RAD_PER_US.value))
        g = g_conv.to_angular(cpl.getfloat("g"))
        detuning = g_conv.to_angular(cpl.getfloat("pump_detuning", 0.0))
        kerr = np.zeros((3, 3))
        if cp.has_section("kerr") and "kerr_matrix_kHz" in cp["kerr"]:
            vals = _floats(cp["kerr"]["kerr_matrix_kHz"])
            if len(vals) != 9:
                raise ConfigError("kerr_matrix_kHz needs nine entries")
            kerr = kerr_khz_to_angular(np.reshape(vals, (3, 3)))
        return DeviceModel(tuple(modes), g, kerr, detuning)
    except ConfigError:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid device config: {exc}") from exc


def parse_dims(cp: configparser.ConfigParser) -> tuple[int, int, int]:
    if not cp.has_section("truncation"):
        return (4, 4, 4)
    try:
        dims = tuple(int(x) for x in _floats(cp["truncation"]["dims"]))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"invalid truncation: {exc}") from exc
    if len(dims) == 1:
        dims = dims * 3
    if len(dims) != 3 or min(dims) < 2:
        raise ConfigError(f"truncation dims must be three integers >= 2, got {dims}")
    return dims  # type: ignore[return-value]


REFERENCE_CONFIG_TEXT = """\
[mode1]
frequency_GHz = 5.560
gamma_ext = 0.604
gamma_int = 0.035
unit = cyclic_MHz

[mode2]
frequency_GHz = 6.831
gamma_ext = 1.242
gamma_int = 0.097
unit = cyclic_MHz

[mode3]
frequency_GHz = 7.902
gamma_ext = 0.746
gamma_int = 0.308
unit = cyclic_MHz

[coupling]
g = 0.03
g_unit = cyclic_MHz

[kerr]
kerr_matrix_kHz = 36.4 70.1 136.0
                  45.4 28.7 107.4
                  139.5 172.6 160.3

[truncation]
dims = 4 4 4
"""
