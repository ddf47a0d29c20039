"""Plane rectification onto a common height plane at a common GSD.

A level-2 product is the source raster resampled onto a north-up grid on a
constant-height plane, together with an RPC model refitted to the resampled
geometry.  Rectification removes most inter-image geometric distortion so a
constant per-image bias suffices downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rpc as rpc_mod
from .errors import (
    EmptyFootprint,
    EmptyInput,
    IllConditioned,
    InsufficientSamples,
    ParseError,
)
from .geodesy import meters_per_degree, polygon_area_m2
from .raster import Raster, bilinear_sample, read_pgm, write_pgm
from .rpc import BiasCorrection, GroundPoint, ImagePoint, RpcModel

# Virtual GCP grid used to refit level-2 RPCs: 10x10 planimetric samples at
# 5 height levels, about six times the 78 free coefficients.
FIT_GRID_XY = 10
FIT_GRID_Z = 5

FIT_RIDGE = 1e-8
FIT_COND_MAX = 1e12
MIN_FIT_SAMPLES = 39

_ZERO_BIAS = BiasCorrection(0.0, 0.0)


@dataclass(frozen=True)
class GroundBBox:
    """Axis-aligned ground bounding box in degrees."""

    min_lat: float
    max_lat: float
    min_lon: float
    max_lon: float

    def __post_init__(self):
        if self.min_lat > self.max_lat or self.min_lon > self.max_lon:
            raise ValueError("bounding box min exceeds max")

    def area(self) -> float:
        return (self.max_lat - self.min_lat) * (self.max_lon - self.min_lon)

    def intersection_area(self, other: "GroundBBox") -> float:
        dlat = min(self.max_lat, other.max_lat) - max(self.min_lat,
                                                      other.min_lat)
        dlon = min(self.max_lon, other.max_lon) - max(self.min_lon,
                                                      other.min_lon)
        if dlat <= 0 or dlon <= 0:
            return 0.0
        return dlat * dlon


@dataclass
class Level2Product:
    """Plane-rectified raster plus its refitted camera model.

    ``geo_transform`` holds six coefficients mapping a pixel center
    (row, col) to ground coordinates on the plane:

        lat = gt[0] + gt[1] * col + gt[2] * row
        lon = gt[3] + gt[4] * col + gt[5] * row
    """

    raster: Raster
    rpc: RpcModel
    plane_height: float
    gsd: float
    geo_transform: np.ndarray
    footprint: GroundBBox
    image_id: str = ""

    def __post_init__(self):
        self.geo_transform = np.asarray(self.geo_transform, dtype=np.float64)
        if self.geo_transform.shape != (6,):
            raise ValueError("geo_transform must have 6 coefficients")

    def pixel_to_ground(self, rows, cols):
        gt = self.geo_transform
        lats = gt[0] + gt[1] * np.asarray(cols) + gt[2] * np.asarray(rows)
        lons = gt[3] + gt[4] * np.asarray(cols) + gt[5] * np.asarray(rows)
        return lats, lons

    def ground_to_pixel(self, lats, lons):
        gt = self.geo_transform
        det = gt[1] * gt[5] - gt[2] * gt[4]
        dlat = np.asarray(lats) - gt[0]
        dlon = np.asarray(lons) - gt[3]
        cols = (gt[5] * dlat - gt[2] * dlon) / det
        rows = (-gt[4] * dlat + gt[1] * dlon) / det
        return rows, cols


def _outer_corners(raster: Raster) -> list[tuple[float, float]]:
    # Pixel-area corners (half a pixel beyond the centers) so that the
    # footprint area over the pixel count reproduces the sampling distance
    # exactly.
    h, w = raster.height, raster.width
    return [(-0.5, -0.5), (-0.5, w - 0.5), (h - 0.5, w - 0.5), (h - 0.5, -0.5)]


def _corner_ground(raster: Raster, rpc: RpcModel, plane: float):
    return [
        rpc_mod.inverse_project(rpc, _ZERO_BIAS, ImagePoint(r, c), plane)
        for r, c in _outer_corners(raster)
    ]


def common_plane_height(rpcs: list[RpcModel]) -> float:
    """Common rectification plane: the mean of the height offsets."""
    if not rpcs:
        raise EmptyInput("no RPC models given")
    return sum(r.hei_off for r in rpcs) / len(rpcs)


def common_gsd(images: list[tuple[Raster, RpcModel]], plane: float) -> float:
    """Common level-2 sampling distance: the coarsest per-image GSD.

    Each image's GSD is the square root of its footprint area on the plane
    divided by its pixel count (the footprint is the quadrilateral of the
    four image corners cast onto the plane).
    """
    if not images:
        raise EmptyInput("no images given")
    worst = 0.0
    for raster, rpc in images:
        corners = _corner_ground(raster, rpc, plane)
        area = polygon_area_m2([g.lat for g in corners],
                               [g.lon for g in corners])
        gsd = math.sqrt(area / (raster.width * raster.height))
        worst = max(worst, gsd)
    return worst


def fit_rpc(samples: list[tuple[GroundPoint, ImagePoint]]) -> RpcModel:
    """Fit an RPC model to ground/image sample pairs.

    Offsets are the midranges of the samples and scales their half-ranges.
    The 39 free coefficients per coordinate are solved from the
    denominator-multiplied linear form (row * den - num = 0) with a small
    ridge term on the normal matrix diagonal; the constant denominator
    coefficients are pinned to one.

    Raises:
        InsufficientSamples: fewer than 39 samples or fewer than 3
            distinct heights.
        IllConditioned: normal matrix condition above 1e12 after ridge.
    """
    if len(samples) < MIN_FIT_SAMPLES:
        raise InsufficientSamples(
            f"RPC fit needs at least {MIN_FIT_SAMPLES} samples, "
            f"got {len(samples)}"
        )
    heis = np.array([g.hei for g, _ in samples])
    if np.unique(heis).size < 3:
        raise InsufficientSamples("RPC fit needs at least 3 distinct heights")

    lats = np.array([g.lat for g, _ in samples])
    lons = np.array([g.lon for g, _ in samples])
    rows = np.array([p.row for _, p in samples])
    cols = np.array([p.col for _, p in samples])

    def mid_half(v):
        lo, hi = float(np.min(v)), float(np.max(v))
        return (lo + hi) / 2.0, max((hi - lo) / 2.0, 1e-12)

    lat_off, lat_scale = mid_half(lats)
    lon_off, lon_scale = mid_half(lons)
    hei_off, hei_scale = mid_half(heis)
    line_off, line_scale = mid_half(rows)
    samp_off, samp_scale = mid_half(cols)

    P = (lats - lat_off) / lat_scale
    L = (lons - lon_off) / lon_scale
    H = (heis - hei_off) / hei_scale
    t = rpc_mod.poly_terms(P, L, H)

    def solve_rational(target):
        design = np.hstack([t, -target[:, None] * t[:, 1:]])
        normal = design.T @ design + FIT_RIDGE * np.eye(39)
        if np.linalg.cond(normal) > FIT_COND_MAX:
            raise IllConditioned(
                "RPC fit normal matrix condition exceeds 1e12"
            )
        x = np.linalg.solve(normal, design.T @ target)
        num = x[:20]
        den = np.concatenate([[1.0], x[20:]])
        return num, den

    r_n = (rows - line_off) / line_scale
    c_n = (cols - samp_off) / samp_scale
    line_num, line_den = solve_rational(r_n)
    samp_num, samp_den = solve_rational(c_n)

    model = RpcModel(
        line_off=line_off, line_scale=line_scale,
        samp_off=samp_off, samp_scale=samp_scale,
        lat_off=lat_off, lat_scale=lat_scale,
        lon_off=lon_off, lon_scale=lon_scale,
        hei_off=hei_off, hei_scale=hei_scale,
        line_num=line_num, line_den=line_den,
        samp_num=samp_num, samp_den=samp_den,
    )
    model.validate()
    return model


def _refit_level2_rpc(
    source_rpc: RpcModel,
    bbox: GroundBBox,
    plane: float,
    geo_transform: np.ndarray,
) -> RpcModel:
    """Fit the RPC of a rectified grid from virtual ground control points.

    A ground point appears in the level-2 image where the source camera
    sees it: project through the source model, drop the ray back onto the
    rectification plane, and convert the plane point to grid coordinates.
    On the plane itself this reduces to the geo transform, which keeps the
    two descriptions of the product consistent.
    """
    lat_ax = np.linspace(bbox.min_lat, bbox.max_lat, FIT_GRID_XY)
    lon_ax = np.linspace(bbox.min_lon, bbox.max_lon, FIT_GRID_XY)
    hei_ax = np.linspace(source_rpc.hei_off - source_rpc.hei_scale,
                         source_rpc.hei_off + source_rpc.hei_scale,
                         FIT_GRID_Z)
    det = geo_transform[1] * geo_transform[5] - geo_transform[2] * geo_transform[4]
    samples = []
    for hei in hei_ax:
        for lat in lat_ax:
            for lon in lon_ax:
                g = GroundPoint(lat, lon, hei)
                p_src = rpc_mod.project(source_rpc, _ZERO_BIAS, g)
                g_pl = rpc_mod.inverse_project(source_rpc, _ZERO_BIAS,
                                               p_src, plane)
                dlat = g_pl.lat - geo_transform[0]
                dlon = g_pl.lon - geo_transform[3]
                col = (geo_transform[5] * dlat - geo_transform[2] * dlon) / det
                row = (-geo_transform[4] * dlat + geo_transform[1] * dlon) / det
                samples.append((g, ImagePoint(row, col)))
    return fit_rpc(samples)


def rectify_image(
    image: Raster, rpc: RpcModel, plane: float, gsd: float
) -> Level2Product:
    """Resample an image onto the common plane at the common GSD.

    The output grid is north-up and covers the ground bounding box of the
    four image corners cast onto the plane.  Each output pixel center maps
    through the source model (zero bias) into the source image and is
    bilinearly resampled; pixels outside the source footprint get the
    nodata value.

    Raises:
        EmptyFootprint: the footprint on the plane is degenerate.
    """
    if gsd <= 0:
        raise ValueError("gsd must be positive")
    corners = _corner_ground(image, rpc, plane)
    bbox = GroundBBox(
        min_lat=min(g.lat for g in corners),
        max_lat=max(g.lat for g in corners),
        min_lon=min(g.lon for g in corners),
        max_lon=max(g.lon for g in corners),
    )
    center_lat = (bbox.min_lat + bbox.max_lat) / 2.0
    m_lat, m_lon = meters_per_degree(center_lat)
    extent_m_lat = (bbox.max_lat - bbox.min_lat) * m_lat
    extent_m_lon = (bbox.max_lon - bbox.min_lon) * m_lon
    if extent_m_lat < gsd or extent_m_lon < gsd:
        raise EmptyFootprint("image footprint on the plane is degenerate")

    n_rows = int(math.ceil(extent_m_lat / gsd))
    n_cols = int(math.ceil(extent_m_lon / gsd))
    step_lat = gsd / m_lat
    step_lon = gsd / m_lon
    geo_transform = np.array([
        bbox.max_lat - 0.5 * step_lat, 0.0, -step_lat,
        bbox.min_lon + 0.5 * step_lon, step_lon, 0.0,
    ])

    rr, cc = np.meshgrid(np.arange(n_rows), np.arange(n_cols), indexing="ij")
    lats = geo_transform[0] + geo_transform[2] * rr
    lons = geo_transform[3] + geo_transform[4] * cc
    src_rows, src_cols = rpc_mod.project_arrays(
        rpc, _ZERO_BIAS, lats.ravel(), lons.ravel(),
        np.full(lats.size, plane)
    )
    values, valid = bilinear_sample(image, src_rows, src_cols)

    out = np.full(lats.size, image.nodata, dtype=np.int64)
    resampled = np.rint(values[valid]).astype(np.int64)
    resampled = np.clip(resampled, 0, image.max_value)
    # Keep the nodata value reserved: valid data never lands on it.
    resampled[resampled == image.nodata] = image.nodata + 1
    out[valid] = resampled
    warped = Raster(out.reshape(n_rows, n_cols).astype(image.pixels.dtype),
                    nodata=image.nodata)

    fitted = _refit_level2_rpc(rpc, bbox, plane, geo_transform)
    return Level2Product(
        raster=warped,
        rpc=fitted,
        plane_height=plane,
        gsd=gsd,
        geo_transform=geo_transform,
        footprint=bbox,
    )


# ---------------------------------------------------------------------------
# Product files: binary PGM raster plus a KEY: value sidecar
# ---------------------------------------------------------------------------

_SIDE_KEYS = ("PLANE_HEIGHT", "GSD", "NODATA",
              "FOOTPRINT_MIN_LAT", "FOOTPRINT_MAX_LAT",
              "FOOTPRINT_MIN_LON", "FOOTPRINT_MAX_LON")


def save_product(product: Level2Product, stem) -> None:
    """Write ``<stem>.pgm`` and ``<stem>.meta`` for a level-2 product."""
    stem = str(stem)
    write_pgm(product.raster, stem + ".pgm")
    lines = [
        f"PLANE_HEIGHT: {float(product.plane_height)!r}",
        f"GSD: {float(product.gsd)!r}",
        f"NODATA: {int(product.raster.nodata)}",
        f"FOOTPRINT_MIN_LAT: {float(product.footprint.min_lat)!r}",
        f"FOOTPRINT_MAX_LAT: {float(product.footprint.max_lat)!r}",
        f"FOOTPRINT_MIN_LON: {float(product.footprint.min_lon)!r}",
        f"FOOTPRINT_MAX_LON: {float(product.footprint.max_lon)!r}",
    ]
    lines.extend(
        f"GEO_TRANSFORM_{i}: {float(product.geo_transform[i])!r}"
        for i in range(6)
    )
    with open(stem + ".meta", "w") as fh:
        fh.write("\n".join(lines) + "\n")
        fh.write(rpc_mod.format_rpc_text(product.rpc))


def load_product(stem) -> Level2Product:
    """Load a product written by :func:`save_product`.

    Raises:
        ParseError: a sidecar key is missing or malformed (the message
            names the key).
    """
    stem = str(stem)
    with open(stem + ".meta", "r") as fh:
        text = fh.read()
    values: dict[str, float] = {}
    geo = [None] * 6
    for line in text.splitlines():
        if ":" not in line:
            continue
        key, _, rest = line.partition(":")
        key = key.strip()
        tokens = rest.split()
        if not tokens:
            continue
        if key in _SIDE_KEYS or key.startswith("GEO_TRANSFORM_"):
            try:
                value = float(tokens[0])
            except ValueError:
                raise ParseError(
                    f"{stem}.meta: key {key} has non-numeric value "
                    f"{tokens[0]!r}"
                ) from None
            if key.startswith("GEO_TRANSFORM_"):
                idx = key.rsplit("_", 1)[1]
                if not idx.isdigit() or not 0 <= int(idx) <= 5:
                    raise ParseError(f"{stem}.meta: bad key {key}")
                geo[int(idx)] = value
            else:
                values[key] = value
    for key in _SIDE_KEYS:
        if key not in values:
            raise ParseError(f"{stem}.meta: missing key {key}")
    if any(v is None for v in geo):
        missing = geo.index(None)
        raise ParseError(f"{stem}.meta: missing key GEO_TRANSFORM_{missing}")
    rpc = rpc_mod.parse_rpc_text(text, source=stem + ".meta")
    raster = read_pgm(stem + ".pgm", nodata=int(values["NODATA"]))
    return Level2Product(
        raster=raster,
        rpc=rpc,
        plane_height=values["PLANE_HEIGHT"],
        gsd=values["GSD"],
        geo_transform=np.array(geo, dtype=np.float64),
        footprint=GroundBBox(
            min_lat=values["FOOTPRINT_MIN_LAT"],
            max_lat=values["FOOTPRINT_MAX_LAT"],
            min_lon=values["FOOTPRINT_MIN_LON"],
            max_lon=values["FOOTPRINT_MAX_LON"],
        ),
        image_id=stem.rsplit("/", 1)[-1],
    )
