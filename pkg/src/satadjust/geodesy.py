"""Local geodetic helpers.

All ground coordinates in this package are geodetic latitude/longitude in
degrees and heights in ellipsoidal meters.  Metric quantities (GSD, ground
areas) use a local tangent-plane approximation: one degree of latitude is a
fixed number of meters, one degree of longitude scales with cos(lat).
"""

import math

# Meters per degree of arc on the WGS84 equatorial circle (2*pi*a / 360).
METERS_PER_DEGREE = 111319.490793

__all__ = ["METERS_PER_DEGREE", "meters_per_degree", "polygon_area_m2"]


def meters_per_degree(lat: float) -> tuple[float, float]:
    """Local metric scale at latitude ``lat``.

    Returns:
        (meters per degree of latitude, meters per degree of longitude).
    """
    return METERS_PER_DEGREE, METERS_PER_DEGREE * math.cos(math.radians(lat))


def polygon_area_m2(lats, lons) -> float:
    """Area in square meters of a lat/lon polygon, via the shoelace formula
    in a local tangent plane anchored at the polygon's mean latitude."""
    if len(lats) < 3:
        return 0.0
    lat0 = sum(lats) / len(lats)
    m_lat, m_lon = meters_per_degree(lat0)
    xs = [lon * m_lon for lon in lons]
    ys = [lat * m_lat for lat in lats]
    area = 0.0
    n = len(xs)
    for i in range(n):
        j = (i + 1) % n
        area += xs[i] * ys[j] - xs[j] * ys[i]
    return abs(area) / 2.0
