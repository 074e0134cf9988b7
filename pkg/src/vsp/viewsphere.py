"""Viewpoint geometry: spherical coordinates, class binning, angular error.

A viewpoint is a camera position on an imaginary sphere around the target,
described by azimuth (wrapped to [0, 360)) and elevation ([-90, +90]).
Two binning schemes discretize it: the coarse 10-class azimuth-only scheme
and the full 36-azimuth x 18-elevation scheme. The angular error between
two viewpoints is the angle between their line-of-sight unit vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class Viewpoint:
    """Continuous (azimuth, elevation) pair in degrees.

    Azimuth is canonicalized into [0, 360); an elevation outside [-90, +90]
    is rejected rather than clamped.
    """

    azimuth_deg: float
    elevation_deg: float

    def __post_init__(self):
        az = float(self.azimuth_deg) % 360.0
        if az == 360.0:  # -1e-13 % 360 can round up to 360.0
            az = 0.0
        object.__setattr__(self, "azimuth_deg", az)
        el = float(self.elevation_deg)
        if not -90.0 <= el <= 90.0:
            raise ValueError(f"elevation {el} outside [-90, +90]")
        object.__setattr__(self, "elevation_deg", el)


@dataclass(frozen=True)
class ViewClass:
    """Discrete labels under the dual 36/18 scheme."""

    az_class: int
    el_class: int

    def __post_init__(self):
        if not 0 <= self.az_class < 36:
            raise ValueError(f"az_class {self.az_class} outside [0, 36)")
        if not 0 <= self.el_class < 18:
            raise ValueError(f"el_class {self.el_class} outside [0, 18)")


@dataclass(frozen=True)
class Phase1Class:
    """Discrete label under the coarse azimuth-only 10-class scheme."""

    az_class: int

    def __post_init__(self):
        if not 0 <= self.az_class < 10:
            raise ValueError(f"az_class {self.az_class} outside [0, 10)")


@dataclass(frozen=True)
class BinningScheme:
    """Per-axis class counts and steps; 'phase1' (10 az) or 'phase2' (36 az x 18 el)."""

    scheme_id: str

    PHASE1 = "phase1"
    PHASE2 = "phase2"

    def __post_init__(self):
        if self.scheme_id not in (self.PHASE1, self.PHASE2):
            raise ValueError(f"unknown binning scheme {self.scheme_id!r}")

    @property
    def az_classes(self):
        return 10 if self.scheme_id == self.PHASE1 else 36

    @property
    def az_step(self):
        return 360.0 / self.az_classes

    @property
    def el_classes(self):
        return None if self.scheme_id == self.PHASE1 else 18

    @property
    def el_step(self):
        return None if self.scheme_id == self.PHASE1 else 10.0


PHASE1 = BinningScheme(BinningScheme.PHASE1)
PHASE2 = BinningScheme(BinningScheme.PHASE2)


def bin_viewpoint(vp: Viewpoint, scheme: BinningScheme = PHASE2):
    """Assign a viewpoint to its class; bins are half-open, lower edge inclusive.

    Azimuth class k is centered on k*step and covers [k*step - step/2,
    k*step + step/2), circularly. Elevation class i is centered on -85+10i
    and covers [-90+10i, -80+10i); the +90 pole belongs to the top class.
    """
    step = scheme.az_step
    az_class = int(math.floor((vp.azimuth_deg + step / 2.0) / step)) % scheme.az_classes
    if scheme.scheme_id == BinningScheme.PHASE1:
        return Phase1Class(az_class)
    el_class = int(math.floor((vp.elevation_deg + 90.0) / 10.0))
    if el_class == 18:  # +90 exactly
        el_class = 17
    return ViewClass(az_class, el_class)


def class_center(c, scheme: BinningScheme = PHASE2) -> Viewpoint:
    """Viewpoint at the center of a class's bin."""
    if isinstance(c, Phase1Class):
        return Viewpoint(36.0 * c.az_class, 0.0)
    return Viewpoint(scheme.az_step * c.az_class, -85.0 + 10.0 * c.el_class)


def los_vector(vp: Viewpoint):
    """Unit line-of-sight vector from target center toward the camera."""
    az = math.radians(vp.azimuth_deg)
    el = math.radians(vp.elevation_deg)
    return (
        math.cos(el) * math.cos(az),
        math.cos(el) * math.sin(az),
        math.sin(el),
    )


def angular_error(gt: Viewpoint, pr: Viewpoint) -> float:
    """Angle in degrees between the two line-of-sight vectors, in [0, 180]."""
    a = los_vector(gt)
    b = los_vector(pr)
    dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    dot = max(-1.0, min(1.0, dot))
    return math.degrees(math.acos(dot))


def bin_distance(a: int, b: int, n_classes: int, circular: bool) -> int:
    """Class-index separation: circular for azimuth, linear for elevation."""
    if not (0 <= a < n_classes and 0 <= b < n_classes):
        raise ValueError(f"class index out of range [0,{n_classes}): {a}, {b}")
    d = abs(a - b)
    if circular:
        d = min(d, n_classes - d)
    return d
