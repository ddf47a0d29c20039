"""Bias-corrected rational polynomial camera model.

An RPC camera maps normalized ground coordinates (lat, lon, height) to
normalized image coordinates (row, col) through two cubic rational
polynomials with 20 coefficients each in numerator and denominator.  The
monomial ordering follows the de-facto RPC00B convention so that real RPC
text files load correctly.

Sign conventions used throughout the package:

* ``project(rpc, bias, g)`` returns the denormalized RPC projection minus
  the bias ``(d_row, d_col)``.  A correctly estimated bias therefore makes
  ``project`` land on the observed pixel of a misregistered image.
* ``residual = observed - project``.  Its derivative with respect to the
  bias components is exactly the 2x2 identity, and its derivative with
  respect to (lat, lon, hei) is minus the raw projection derivative; the
  ``Jacobians`` blocks follow the residual convention so that downstream
  least squares can use them directly.

Heights are ellipsoidal meters (the input products do not state a datum;
this package assumes the ellipsoid throughout).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateDenominator,
    IllConditioned,
    NoConvergence,
    ParseError,
)

# Denominators below this magnitude are treated as degenerate.
DENOMINATOR_EPS = 1e-10

# Normalized ground cube over which a model is considered valid; RPCs
# extrapolate poorly, 20% margin beyond the nominal [-1, 1].
VALIDITY_MARGIN = 1.2

# Newton / Gauss-Newton iteration controls (double-precision comfort).
IMAGE_TOL_PX = 1e-6
GROUND_TOL_NORM = 1e-9
MAX_ITERATIONS = 20

# Divergence guard for image-to-ground Newton, in normalized ground units.
DIVERGENCE_BOUND = 10.0

TRIANGULATION_COND_MAX = 1e8


@dataclass(frozen=True)
class GroundPoint:
    """Geodetic point: degrees latitude/longitude, meters above ellipsoid."""

    lat: float
    lon: float
    hei: float


@dataclass(frozen=True)
class ImagePoint:
    """Continuous pixel position, row down and column rightward."""

    row: float
    col: float


@dataclass(frozen=True)
class BiasCorrection:
    """Constant per-image translation in level-2 image space, pixels."""

    d_row: float = 0.0
    d_col: float = 0.0


@dataclass(frozen=True)
class Jacobians:
    """Residual derivatives at a linearization point.

    ``a_block`` is d(residual)/d(d_row, d_col), identically the 2x2
    identity for the constant-bias model.  ``b_block`` is
    d(residual)/d(lat, lon, hei) in pixels per degree / per meter.
    """

    a_block: np.ndarray
    b_block: np.ndarray


@dataclass(frozen=True)
class RpcModel:
    """The 80-coefficient rational polynomial camera.

    Coefficient vectors are length-20 float arrays ordered per RPC00B.
    Instances are immutable after construction; all operations on them are
    pure functions and safe to call concurrently.
    """

    line_off: float
    line_scale: float
    samp_off: float
    samp_scale: float
    lat_off: float
    lat_scale: float
    lon_off: float
    lon_scale: float
    hei_off: float
    hei_scale: float
    line_num: np.ndarray = field(repr=False)
    line_den: np.ndarray = field(repr=False)
    samp_num: np.ndarray = field(repr=False)
    samp_den: np.ndarray = field(repr=False)

    def __post_init__(self):
        for name in ("line_num", "line_den", "samp_num", "samp_den"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (20,):
                raise ValueError(f"{name} must have 20 coefficients")
            object.__setattr__(self, name, arr)
        for name in ("line_scale", "samp_scale", "lat_scale", "lon_scale",
                     "hei_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def validate(self, samples_per_axis: int = 7) -> None:
        """Check the denominator magnitude over the validity cube.

        Samples a regular grid on [-1.2, 1.2]^3 in normalized ground
        coordinates and raises DegenerateDenominator if either denominator
        polynomial comes within 1e-10 of zero.
        """
        axis = np.linspace(-VALIDITY_MARGIN, VALIDITY_MARGIN, samples_per_axis)
        pp, ll, hh = np.meshgrid(axis, axis, axis, indexing="ij")
        t = poly_terms(pp.ravel(), ll.ravel(), hh.ravel())
        for name, den in (("line", self.line_den), ("samp", self.samp_den)):
            vals = t @ den
            worst = float(np.min(np.abs(vals)))
            if worst <= DENOMINATOR_EPS:
                raise DegenerateDenominator(
                    f"{name} denominator reaches |{worst:.3e}| inside the "
                    f"validity cube"
                )


def normalize_ground(g: GroundPoint, rpc: RpcModel) -> tuple[float, float, float]:
    """Map a ground point to the model's normalized (P, L, H) coordinates."""
    return (
        (g.lat - rpc.lat_off) / rpc.lat_scale,
        (g.lon - rpc.lon_off) / rpc.lon_scale,
        (g.hei - rpc.hei_off) / rpc.hei_scale,
    )


def poly_terms(P, L, H) -> np.ndarray:
    """The 20 cubic monomials of the RPC00B convention, last axis length 20.

    Accepts scalars or equally shaped arrays; broadcasting follows numpy
    rules.  Order: 1, L, P, H, LP, LH, PH, L2, P2, H2, PLH, L3, LP2, LH2,
    L2P, P3, PH2, L2H, P2H, H3.
    """
    P = np.asarray(P, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    one = np.ones(np.broadcast(P, L, H).shape)
    return np.stack(
        [
            one,
            L, P, H,
            L * P, L * H, P * H,
            L * L, P * P, H * H,
            P * L * H,
            L ** 3, L * P * P, L * H * H, L * L * P,
            P ** 3, P * H * H, L * L * H, P * P * H,
            H ** 3,
        ],
        axis=-1,
    )


def poly_partials(P, L, H) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Partial derivatives of :func:`poly_terms` w.r.t. P, L and H."""
    P = np.asarray(P, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    zero = np.zeros(np.broadcast(P, L, H).shape)
    one = np.ones_like(zero)
    d_p = np.stack(
        [
            zero,
            zero, one, zero,
            L, zero, H,
            zero, 2 * P, zero,
            L * H,
            zero, 2 * L * P, zero, L * L,
            3 * P * P, H * H, zero, 2 * P * H,
            zero,
        ],
        axis=-1,
    )
    d_l = np.stack(
        [
            zero,
            one, zero, zero,
            P, H, zero,
            2 * L, zero, zero,
            P * H,
            3 * L * L, P * P, H * H, 2 * L * P,
            zero, zero, 2 * L * H, zero,
            zero,
        ],
        axis=-1,
    )
    d_h = np.stack(
        [
            zero,
            zero, zero, one,
            zero, L, P,
            zero, zero, 2 * H,
            P * L,
            zero, zero, 2 * L * H, zero,
            zero, 2 * P * H, L * L, P * P,
            3 * H * H,
        ],
        axis=-1,
    )
    return d_p, d_l, d_h


def _check_denominators(num_r, den_r, num_c, den_c):
    bad = min(float(np.min(np.abs(den_r))), float(np.min(np.abs(den_c))))
    if bad <= DENOMINATOR_EPS:
        raise DegenerateDenominator(
            f"denominator magnitude {bad:.3e} at evaluation point"
        )
    return num_r / den_r, num_c / den_c


def project_arrays(rpc: RpcModel, bias: BiasCorrection, lats, lons, heis):
    """Vectorized projection of ground arrays to (rows, cols) pixel arrays."""
    P = (np.asarray(lats, dtype=np.float64) - rpc.lat_off) / rpc.lat_scale
    L = (np.asarray(lons, dtype=np.float64) - rpc.lon_off) / rpc.lon_scale
    H = (np.asarray(heis, dtype=np.float64) - rpc.hei_off) / rpc.hei_scale
    t = poly_terms(P, L, H)
    r_n, c_n = _check_denominators(
        t @ rpc.line_num, t @ rpc.line_den, t @ rpc.samp_num, t @ rpc.samp_den
    )
    rows = r_n * rpc.line_scale + rpc.line_off - bias.d_row
    cols = c_n * rpc.samp_scale + rpc.samp_off - bias.d_col
    return rows, cols


def project(rpc: RpcModel, bias: BiasCorrection, g: GroundPoint) -> ImagePoint:
    """Project a ground point into the image, bias applied.

    Raises:
        DegenerateDenominator: a rational denominator vanished at ``g``.
    """
    rows, cols = project_arrays(rpc, bias, g.lat, g.lon, g.hei)
    return ImagePoint(float(rows), float(cols))


def residual(
    rpc: RpcModel, bias: BiasCorrection, g: GroundPoint, observed: ImagePoint
) -> tuple[float, float]:
    """Observed-minus-projected reprojection residual, (v_row, v_col) px."""
    p = project(rpc, bias, g)
    return observed.row - p.row, observed.col - p.col


def jacobian(rpc: RpcModel, bias0: BiasCorrection, g0: GroundPoint) -> Jacobians:
    """Analytic residual derivatives at the linearization point ``g0``.

    The bias block is the identity because the bias enters the residual
    linearly; the ground block applies the quotient rule to the rational
    polynomials, chained through the ground normalization.

    Raises:
        DegenerateDenominator: a rational denominator vanished at ``g0``.
    """
    P, L, H = normalize_ground(g0, rpc)
    t = poly_terms(P, L, H)
    d_p, d_l, d_h = poly_partials(P, L, H)

    b = np.empty((2, 3))
    for out_row, (num, den, img_scale) in enumerate(
        ((rpc.line_num, rpc.line_den, rpc.line_scale),
         (rpc.samp_num, rpc.samp_den, rpc.samp_scale))
    ):
        n_val = float(t @ num)
        d_val = float(t @ den)
        if abs(d_val) <= DENOMINATOR_EPS:
            raise DegenerateDenominator(
                f"denominator magnitude {abs(d_val):.3e} at evaluation point"
            )
        for out_col, (d_terms, gnd_scale) in enumerate(
            ((d_p, rpc.lat_scale), (d_l, rpc.lon_scale), (d_h, rpc.hei_scale))
        ):
            dn = float(d_terms @ num)
            dd = float(d_terms @ den)
            d_norm = (dn * d_val - n_val * dd) / (d_val * d_val)
            # residual = observed - project: minus the projection derivative
            b[out_row, out_col] = -d_norm * img_scale / gnd_scale
    return Jacobians(a_block=np.eye(2), b_block=b)


def inverse_project(
    rpc: RpcModel, bias: BiasCorrection, p: ImagePoint, hei: float
) -> GroundPoint:
    """Ground point at height ``hei`` whose projection is ``p``.

    Newton iteration on (lat, lon) using the 2x2 planimetric sub-block of
    the residual Jacobian, started at the model's ground offsets.

    Raises:
        NoConvergence: residual above 1e-6 px after 20 iterations, or the
            iterate left the normalized ground cube by a wide margin.
        DegenerateDenominator: propagated from projection.
    """
    lat, lon = rpc.lat_off, rpc.lon_off
    for _ in range(MAX_ITERATIONS):
        g = GroundPoint(lat, lon, float(hei))
        v_row, v_col = residual(rpc, bias, g, p)
        if max(abs(v_row), abs(v_col)) < IMAGE_TOL_PX:
            return g
        b2 = jacobian(rpc, bias, g).b_block[:, :2]
        try:
            step = np.linalg.solve(b2, [-v_row, -v_col])
        except np.linalg.LinAlgError:
            raise IllConditioned("planimetric Jacobian is singular") from None
        lat = float(lat + step[0])
        lon = float(lon + step[1])
        if (abs(lat - rpc.lat_off) / rpc.lat_scale > DIVERGENCE_BOUND
                or abs(lon - rpc.lon_off) / rpc.lon_scale > DIVERGENCE_BOUND):
            raise NoConvergence(
                "image-to-ground iteration left the model validity region"
            )
    raise NoConvergence(
        f"image-to-ground residual above {IMAGE_TOL_PX} px "
        f"after {MAX_ITERATIONS} iterations"
    )


def triangulate(
    observations: list[tuple[RpcModel, BiasCorrection, ImagePoint]],
) -> GroundPoint:
    """Least-squares ground point from two or more image observations.

    Gauss-Newton on (lat, lon, hei), parameterized in the first model's
    normalized ground units with the Jacobian columns equilibrated to
    unit norm, so the 3x3 normal matrix conditioning reflects actual ray
    geometry rather than the disparity between planimetric and height
    sensitivities.  Initialized by casting the first observation onto
    its height offset.

    Raises:
        ValueError: fewer than two observations.
        IllConditioned: equilibrated normal matrix condition above 1e8
            (e.g. all rays from one image).
        NoConvergence: no ground fix after 20 iterations.
    """
    if len(observations) < 2:
        raise ValueError("triangulation needs at least two observations")
    rpc0, bias0, p0 = observations[0]
    g = inverse_project(rpc0, bias0, p0, rpc0.hei_off)
    scales = np.array([rpc0.lat_scale, rpc0.lon_scale, rpc0.hei_scale])

    # Stacked coefficients: each Gauss-Newton pass evaluates every
    # observation in one vectorized sweep instead of a Python loop.
    line_num = np.stack([m.line_num for m, _, _ in observations])
    line_den = np.stack([m.line_den for m, _, _ in observations])
    samp_num = np.stack([m.samp_num for m, _, _ in observations])
    samp_den = np.stack([m.samp_den for m, _, _ in observations])
    g_off = np.array([(m.lat_off, m.lon_off, m.hei_off)
                      for m, _, _ in observations])
    g_scale = np.array([(m.lat_scale, m.lon_scale, m.hei_scale)
                        for m, _, _ in observations])
    img_off = np.array([(m.line_off, m.samp_off)
                        for m, _, _ in observations])
    img_scale = np.array([(m.line_scale, m.samp_scale)
                          for m, _, _ in observations])
    # residual = observed - (raw - bias), so fold the bias into the target
    target = np.array([(p.row + b.d_row, p.col + b.d_col)
                       for _, b, p in observations])

    for _ in range(MAX_ITERATIONS):
        P = (g.lat - g_off[:, 0]) / g_scale[:, 0]
        L = (g.lon - g_off[:, 1]) / g_scale[:, 1]
        H = (g.hei - g_off[:, 2]) / g_scale[:, 2]
        terms = poly_terms(P, L, H)
        partials = poly_partials(P, L, H)
        b = np.empty((len(observations), 2, 3))
        v = np.empty((len(observations), 2))
        for chan, (num, den) in enumerate(((line_num, line_den),
                                           (samp_num, samp_den))):
            n_val = np.einsum("tk,tk->t", terms, num)
            d_val = np.einsum("tk,tk->t", terms, den)
            if float(np.min(np.abs(d_val))) <= DENOMINATOR_EPS:
                raise DegenerateDenominator(
                    f"denominator magnitude "
                    f"{float(np.min(np.abs(d_val))):.3e} at evaluation point"
                )
            raw = n_val / d_val * img_scale[:, chan] + img_off[:, chan]
            v[:, chan] = target[:, chan] - raw
            for k, d_terms in enumerate(partials):
                dn = np.einsum("tk,tk->t", d_terms, num)
                dd = np.einsum("tk,tk->t", d_terms, den)
                d_norm = (dn * d_val - n_val * dd) / (d_val * d_val)
                # residual = observed - project: minus the projection slope
                b[:, chan, k] = -d_norm * img_scale[:, chan] / g_scale[:, k]
        b_stack = (b * scales).reshape(-1, 3)
        v_stack = v.reshape(-1)
        col_norms = np.linalg.norm(b_stack, axis=0)
        if col_norms.min() <= 0.0:
            raise IllConditioned(
                "triangulation normal matrix condition exceeds 1e8"
            )
        b_eq = b_stack / col_norms
        normal = b_eq.T @ b_eq
        if np.linalg.cond(normal) > TRIANGULATION_COND_MAX:
            raise IllConditioned(
                "triangulation normal matrix condition exceeds 1e8"
            )
        # residual linearizes as v + B*step, so solve for the decrement
        step = np.linalg.solve(normal, -b_eq.T @ v_stack) / col_norms
        g = GroundPoint(
            float(g.lat + step[0] * scales[0]),
            float(g.lon + step[1] * scales[1]),
            float(g.hei + step[2] * scales[2]),
        )
        if float(np.max(np.abs(step))) < GROUND_TOL_NORM:
            return g
    raise NoConvergence("triangulation did not converge in 20 iterations")


# ---------------------------------------------------------------------------
# RPC text file format
# ---------------------------------------------------------------------------

_SCALAR_KEYS = {
    "LINE_OFF": "line_off",
    "SAMP_OFF": "samp_off",
    "LAT_OFF": "lat_off",
    "LONG_OFF": "lon_off",
    "HEIGHT_OFF": "hei_off",
    "LINE_SCALE": "line_scale",
    "SAMP_SCALE": "samp_scale",
    "LAT_SCALE": "lat_scale",
    "LONG_SCALE": "lon_scale",
    "HEIGHT_SCALE": "hei_scale",
}

_COEFF_GROUPS = {
    "LINE_NUM_COEFF": "line_num",
    "LINE_DEN_COEFF": "line_den",
    "SAMP_NUM_COEFF": "samp_num",
    "SAMP_DEN_COEFF": "samp_den",
}


def parse_rpc_text(text: str, source: str = "<string>") -> RpcModel:
    """Parse the line-oriented ``KEY: value`` RPC format.

    Tolerates extra whitespace, scientific notation and trailing unit words
    (``LINE_OFF: 10872.0 pixels``).  Unknown keys are ignored.

    Raises:
        ParseError: a required key is missing or has a non-numeric value.
    """
    scalars: dict[str, float] = {}
    coeffs = {name: [None] * 20 for name in _COEFF_GROUPS.values()}
    for line in text.splitlines():
        if ":" not in line:
            continue
        key, _, rest = line.partition(":")
        key = key.strip()
        tokens = rest.split()
        if not tokens:
            continue
        try:
            value = float(tokens[0])
        except ValueError:
            raise ParseError(f"{source}: key {key} has non-numeric value "
                             f"{tokens[0]!r}") from None
        if key in _SCALAR_KEYS:
            scalars[_SCALAR_KEYS[key]] = value
            continue
        group, _, index = key.rpartition("_")
        if group in _COEFF_GROUPS and index.isdigit():
            i = int(index)
            if not 1 <= i <= 20:
                raise ParseError(f"{source}: coefficient index {i} out of "
                                 f"range in key {key}")
            coeffs[_COEFF_GROUPS[group]][i - 1] = value

    for key, attr in _SCALAR_KEYS.items():
        if attr not in scalars:
            raise ParseError(f"{source}: missing key {key}")
    for group, attr in _COEFF_GROUPS.items():
        missing = [i + 1 for i, v in enumerate(coeffs[attr]) if v is None]
        if missing:
            raise ParseError(
                f"{source}: missing key {group}_{missing[0]}"
            )

    arrays = {name: np.array(vals, dtype=np.float64)
              for name, vals in coeffs.items()}
    # Normalize so both constant denominator coefficients are exactly one.
    for num_name, den_name in (("line_num", "line_den"),
                               ("samp_num", "samp_den")):
        den0 = arrays[den_name][0]
        if abs(den0) <= DENOMINATOR_EPS:
            raise ParseError(
                f"{source}: constant coefficient of {den_name} is zero"
            )
        if den0 != 1.0:
            arrays[num_name] = arrays[num_name] / den0
            arrays[den_name] = arrays[den_name] / den0
    return RpcModel(**scalars, **arrays)


def load_rpc_file(path) -> RpcModel:
    """Load and validate an RPC model from a text file."""
    try:
        with open(path, "r") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read RPC file {path}: {exc}") from None
    rpc = parse_rpc_text(text, source=str(path))
    rpc.validate()
    return rpc


def format_rpc_text(rpc: RpcModel) -> str:
    """Serialize a model to the text format, full double precision."""
    lines = [f"{key}: {getattr(rpc, attr)!r}"
             for key, attr in _SCALAR_KEYS.items()]
    for group, attr in _COEFF_GROUPS.items():
        values = getattr(rpc, attr)
        lines.extend(f"{group}_{i + 1}: {float(values[i])!r}"
                     for i in range(20))
    return "\n".join(lines) + "\n"


def save_rpc_file(rpc: RpcModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_rpc_text(rpc))
