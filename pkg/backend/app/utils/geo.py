import math
from typing import Tuple

EARTH_RADIUS_M = 6371008.8
METERS_PER_DEGREE = EARTH_RADIUS_M * math.pi / 180.0


def haversine_m(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in meters"""
    phi1, phi2 = math.radians(lat1), math.radians(lat2)
    dphi = phi2 - phi1
    dlmb = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(a)))


def offset_to_latlon(center_lat: float, center_lon: float, x_m: float, y_m: float) -> Tuple[float, float]:
    """Local east/north offset (meters) around the center to latitude/longitude"""
    lat = center_lat + y_m / METERS_PER_DEGREE
    lon = center_lon + x_m / (METERS_PER_DEGREE * math.cos(math.radians(center_lat)))
    return lat, lon


def compass_heading(dx: float, dy: float) -> float:
    """Heading in degrees clockwise from north, in [0, 360)"""
    heading = math.degrees(math.atan2(dx, dy)) % 360.0
    return 0.0 if heading >= 360.0 else heading
