from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

from ..errors import ConfigError


@dataclass(frozen=True)
class OpticalConfig:
    """Microscope + MLA parameters. Lengths in micrometres.

    ``c`` is the tube-lens -> MLA distance; ``b`` the MLA -> sensor distance.
    ``pixels_per_lenslet`` is the rectified sampling used by the simulators.
    """

    M: float = 40.0
    NA: float = 0.9
    F_tl: float = 165000.0
    F_obj: float | None = None
    c: float | None = None
    F_ml: float = 2500.0
    lenslet_pitch_um: float = 112.0
    sensor_pitch_um: float = 3.45
    b: float | None = None
    lambda_um: float = 0.617
    pixels_per_lenslet: int = 33

    def __post_init__(self):
        if self.F_obj is None:
            object.__setattr__(self, "F_obj", self.F_tl / self.M)
        if self.c is None:
            object.__setattr__(self, "c", self.F_tl)
        if self.b is None:
            object.__setattr__(self, "b", self.F_ml)
        self.validate()

    def validate(self):
        for name in ("M", "F_tl", "F_obj", "c", "F_ml", "lenslet_pitch_um", "sensor_pitch_um", "b", "lambda_um"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be a positive finite number, got {v!r}")
        if not 0 < self.NA < 1:
            raise ConfigError(f"NA must lie in (0, 1), got {self.NA}")
        if abs(self.F_tl / self.F_obj - self.M) > 1e-9 * self.M:
            raise ConfigError("M must equal F_tl / F_obj")
        A = self.pixels_per_lenslet
        if int(A) != A or A < 1:
            raise ConfigError("pixels_per_lenslet must be a positive integer")

    # derived -----------------------------------------------------------
    @property
    def Obj_r(self):
        return self.F_obj * self.NA

    @property
    def A(self):
        return int(self.pixels_per_lenslet)

    @property
    def pixel_um(self):
        """Rectified sensor pixel pitch."""
        return self.lenslet_pitch_um / self.A

    @property
    def voxel_lateral_um(self):
        return self.pixel_um / self.M

    def o1(self, depth_um):
        return self.F_obj + depth_um

    def with_(self, **kw):
        return replace(self, **kw)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown optics keys: {sorted(extra)}")
        return cls(**d)
