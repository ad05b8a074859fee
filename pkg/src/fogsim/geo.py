"""Geolocation records and great-circle helpers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

from ._kernels import EARTH_RADIUS_KM


@dataclass(frozen=True)
class Location:
    latitude: float
    longitude: float
    block: Optional[int] = None

    def __post_init__(self):
        if not (math.isfinite(self.latitude) and -90.0 <= self.latitude <= 90.0):
            raise ValueError(f"latitude {self.latitude!r} outside [-90, 90]")
        if not (math.isfinite(self.longitude) and -180.0 <= self.longitude <= 180.0):
            raise ValueError(f"longitude {self.longitude!r} outside [-180, 180]")


@dataclass(frozen=True)
class BoundingBox:
    """Latitude/longitude box used as a region of interest."""

    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def __post_init__(self):
        if not (self.lat_max > self.lat_min and self.lon_max > self.lon_min):
            raise ValueError(f"degenerate region of interest: {self}")

    def contains(self, loc: Location) -> bool:
        return (self.lat_min <= loc.latitude <= self.lat_max
                and self.lon_min <= loc.longitude <= self.lon_max)

    @property
    def center(self) -> Location:
        return Location((self.lat_min + self.lat_max) / 2.0, (self.lon_min + self.lon_max) / 2.0)

    def to_list(self) -> list:
        return [self.lat_min, self.lat_max, self.lon_min, self.lon_max]

    @classmethod
    def from_list(cls, values) -> "BoundingBox":
        lat_min, lat_max, lon_min, lon_max = (float(v) for v in values)
        return cls(lat_min, lat_max, lon_min, lon_max)


# Melbourne CBD (Hoddle grid and surrounds)
MELBOURNE_CBD = BoundingBox(-37.8200, -37.8070, 144.9510, 144.9740)


def haversine(a: Location, b: Location) -> float:
    """Great-circle distance in km between two locations."""
    lat1 = math.radians(a.latitude)
    lat2 = math.radians(b.latitude)
    dlat = lat2 - lat1
    dlon = math.radians(b.longitude - a.longitude)
    h = math.sin(dlat / 2.0) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(min(h, 1.0)))


def destination(start: Location, bearing_deg: float, distance_km: float) -> Location:
    """Point reached from ``start`` travelling ``distance_km`` along a great circle."""
    if distance_km == 0.0:
        return Location(start.latitude, start.longitude, start.block)
    lat1 = math.radians(start.latitude)
    lon1 = math.radians(start.longitude)
    brg = math.radians(bearing_deg)
    ang = distance_km / EARTH_RADIUS_KM
    lat2 = math.asin(math.sin(lat1) * math.cos(ang) + math.cos(lat1) * math.sin(ang) * math.cos(brg))
    lon2 = lon1 + math.atan2(math.sin(brg) * math.sin(ang) * math.cos(lat1),
                             math.cos(ang) - math.sin(lat1) * math.sin(lat2))
    lon_deg = (math.degrees(lon2) + 540.0) % 360.0 - 180.0
    return Location(math.degrees(lat2), lon_deg, start.block)
