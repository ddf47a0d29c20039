"""Bias-compensated bundle adjustment with reduced normal equations.

Ground-point unknowns are eliminated track by track while the normal
equations are accumulated, so the largest matrix ever materialized is the
2N x 2N reduced bias system for N images (each track touches at most a
2t x 2t sub-block, t being its degree).  GCP tracks keep their surveyed
grounds fixed and contribute only bias terms, the exact limit of an
infinitely stiff ground constraint.

Free networks (no GCPs) have an unobservable common image-space
translation; the datum is fixed by pinning image 0's bias correction to
zero, so reported biases are relative to image 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import rpc as rpc_mod
from .errors import ConfigInvalid, NumericalError, RankDeficient
from .rpc import BiasCorrection, GroundPoint, RpcModel
from .tracks import Track

logger = logging.getLogger(__name__)

POINT_BLOCK_COND_MAX = 1e10

# Relative Cholesky pivot below which the reduced system counts as
# singular (catches the exact-nullspace case that rounding lets through).
PIVOT_RATIO_MIN = 1e-7

CONVERGENCE_PX = 0.001
MAX_ITER = 50


@dataclass
class ImageState:
    image_id: str
    rpc: RpcModel
    bias: BiasCorrection


@dataclass
class ObservationGraph:
    """Images, tracks and the visibility linking them.

    ``visibility[j]`` holds the sorted image indices observing track j
    and ``observations[j]`` the matching (degree, 2) array of observed
    (row, col) pixels; both are derived from the tracks on construction.
    """

    images: list[ImageState]
    tracks: list[Track]
    index: dict[str, int] = field(init=False)
    visibility: list[np.ndarray] = field(init=False)
    observations: list[np.ndarray] = field(init=False)

    def __post_init__(self):
        self.index = {im.image_id: i for i, im in enumerate(self.images)}
        if len(self.index) != len(self.images):
            raise ConfigInvalid("duplicate image ids")
        self.visibility = []
        self.observations = []
        for track in self.tracks:
            items = []
            for image_id, p in track.observations.items():
                if image_id not in self.index:
                    raise ConfigInvalid(f"track references unknown image "
                                        f"{image_id}")
                items.append((self.index[image_id], p.row, p.col))
            items.sort()
            self.visibility.append(np.array([i for i, _, _ in items]))
            self.observations.append(
                np.array([(r, c) for _, r, c in items])
            )

    @property
    def has_gcp(self) -> bool:
        return any(t.is_gcp for t in self.tracks)


@dataclass
class ReducedNormalSystem:
    """The four 2N-sized pieces of the reduced normal equations: bias
    block, its Schur correction, and the matching right-hand sides.
    """

    n_a: np.ndarray
    schur: np.ndarray
    rhs_a: np.ndarray
    rhs_schur: np.ndarray
    excluded_tracks: list[int]

    @property
    def n_images(self) -> int:
        return self.n_a.shape[0] // 2


@dataclass
class AdjustmentResult:
    biases: list[BiasCorrection]
    grounds: list[GroundPoint | None]
    iterations: int
    history: list[float]
    converged: bool


@dataclass(frozen=True)
class ReprojectionReport:
    """Residual statistics; x is the column axis, y the row axis."""

    avg_x: float
    avg_y: float
    avg_xy: float
    max_x: float
    max_y: float
    max_xy: float
    per_image_avg_xy: dict[str, float]
    count: int


class _ModelStack:
    """Per-image model constants packed as arrays for vectorized use."""

    def __init__(self, images: list[ImageState]):
        rpcs = [im.rpc for im in images]
        for name in ("line_off", "line_scale", "samp_off", "samp_scale",
                     "lat_off", "lat_scale", "lon_off", "lon_scale",
                     "hei_off", "hei_scale"):
            setattr(self, name,
                    np.array([getattr(r, name) for r in rpcs]))
        for name in ("line_num", "line_den", "samp_num", "samp_den"):
            setattr(self, name,
                    np.stack([getattr(r, name) for r in rpcs]))
        self.bias = np.array([(im.bias.d_row, im.bias.d_col)
                              for im in images])


def track_scales(graph: ObservationGraph, track: Track) -> np.ndarray:
    """Ground normalization used for a track's eliminated unknowns: the
    (lat, lon, hei) scales of its first observing image.  Pure
    conditioning; the reduced bias system is invariant to this choice."""
    first = min(graph.index[image_id] for image_id in track.observations)
    rpc = graph.images[first].rpc
    return np.array([rpc.lat_scale, rpc.lon_scale, rpc.hei_scale])


def _track_residuals(stack: _ModelStack, idxs: np.ndarray,
                     obs: np.ndarray, g: GroundPoint):
    """Vectorized residuals of one track, plus the pieces the Jacobian
    needs (normalized coordinates and rational values per image)."""
    P = (g.lat - stack.lat_off[idxs]) / stack.lat_scale[idxs]
    L = (g.lon - stack.lon_off[idxs]) / stack.lon_scale[idxs]
    H = (g.hei - stack.hei_off[idxs]) / stack.hei_scale[idxs]
    terms = rpc_mod.poly_terms(P, L, H)
    num_r = (terms * stack.line_num[idxs]).sum(axis=1)
    den_r = (terms * stack.line_den[idxs]).sum(axis=1)
    num_c = (terms * stack.samp_num[idxs]).sum(axis=1)
    den_c = (terms * stack.samp_den[idxs]).sum(axis=1)
    rows = (num_r / den_r) * stack.line_scale[idxs] + stack.line_off[idxs]
    cols = (num_c / den_c) * stack.samp_scale[idxs] + stack.samp_off[idxs]
    v = np.empty((len(idxs), 2))
    v[:, 0] = obs[:, 0] - (rows - stack.bias[idxs, 0])
    v[:, 1] = obs[:, 1] - (cols - stack.bias[idxs, 1])
    return v, (P, L, H, num_r, den_r, num_c, den_c, terms)


def _track_blocks(stack: _ModelStack, idxs: np.ndarray,
                  obs: np.ndarray, g: GroundPoint):
    """Residuals and residual/ground Jacobians (t, 2, 3) of one track."""
    v, (P, L, H, num_r, den_r, num_c, den_c, terms) = _track_residuals(
        stack, idxs, obs, g)
    d_p, d_l, d_h = rpc_mod.poly_partials(P, L, H)
    b = np.empty((len(idxs), 2, 3))
    gnd_scales = (stack.lat_scale[idxs], stack.lon_scale[idxs],
                  stack.hei_scale[idxs])
    for out, (num, den, n_val, d_val, img_scale) in enumerate((
        (stack.line_num[idxs], stack.line_den[idxs], num_r, den_r,
         stack.line_scale[idxs]),
        (stack.samp_num[idxs], stack.samp_den[idxs], num_c, den_c,
         stack.samp_scale[idxs]),
    )):
        for axis, d_terms in enumerate((d_p, d_l, d_h)):
            dn = (d_terms * num).sum(axis=1)
            dd = (d_terms * den).sum(axis=1)
            d_norm = (dn * d_val - n_val * dd) / (d_val * d_val)
            b[:, out, axis] = -d_norm * img_scale / gnd_scales[axis]
    return v, b


def _interleaved(idxs: np.ndarray) -> np.ndarray:
    rows = np.empty(2 * len(idxs), dtype=np.intp)
    rows[0::2] = 2 * idxs
    rows[1::2] = 2 * idxs + 1
    return rows


def assemble(
    images: list[tuple[str, RpcModel]],
    tracks: list[Track],
    gcps: dict[int, GroundPoint] | None = None,
) -> ObservationGraph:
    """Build the observation graph: zero biases, triangulated grounds.

    GCP tracks (flagged via ``gcps``, keyed by track position) take their
    surveyed coordinates verbatim.  Tracks that already carry a ground
    estimate keep it; the rest are triangulated with zero biases, and
    tracks whose triangulation fails are dropped with a log message.
    The track list is modified in place (GCP flags).
    """
    if gcps:
        from .tracks import apply_gcps

        apply_gcps(tracks, gcps)
    states = [ImageState(image_id, rpc, BiasCorrection())
              for image_id, rpc in images]
    by_id = {s.image_id: s for s in states}
    kept = []
    for j, track in enumerate(tracks):
        if track.is_gcp:
            track.ground = track.gcp_ground
            kept.append(track)
            continue
        if track.ground is None:
            obs = [(by_id[image_id].rpc, BiasCorrection(), p)
                   for image_id, p in sorted(track.observations.items())]
            try:
                track.ground = rpc_mod.triangulate(obs)
            except NumericalError as exc:
                logger.warning("dropping track %d: %s", j, exc)
                continue
        kept.append(track)
    return ObservationGraph(images=states, tracks=kept)


def accumulate_reduced(
    graph: ObservationGraph, alloc_hook=None
) -> ReducedNormalSystem:
    """One pass over the tracks building the reduced 2N x 2N system.

    Each track's 3x3 point block is inverted on the spot and its Schur
    contribution scattered into the 2t x 2t sub-block of its observing
    images, so no matrix larger than 2N x 2N exists at any time.  Tracks
    whose point block is numerically singular are excluded and logged.

    Args:
        alloc_hook: optional callable receiving the shape of every array
            this function allocates explicitly (test instrumentation).
    """
    n = len(graph.images)

    def alloc(*shape):
        if alloc_hook is not None:
            alloc_hook(shape)
        return np.zeros(shape)

    n_a = alloc(2 * n, 2 * n)
    schur = alloc(2 * n, 2 * n)
    rhs_a = alloc(2 * n)
    rhs_schur = alloc(2 * n)
    stack = _ModelStack(graph.images)
    excluded = []

    for j, track in enumerate(graph.tracks):
        idxs = graph.visibility[j]
        obs = graph.observations[j]
        rows = _interleaved(idxs)
        if track.is_gcp:
            v, _ = _track_residuals(stack, idxs, obs, track.ground)
            n_a[rows, rows] += 1.0
            rhs_a[rows] -= v.ravel()
            continue
        v, b = _track_blocks(stack, idxs, obs, track.ground)
        b_flat = (b * track_scales(graph, track)).reshape(-1, 3)
        # Column equilibration keeps the conditioning check scale-free;
        # the Schur contribution b (b'b)^-1 b' is invariant under it.
        col_norms = np.linalg.norm(b_flat, axis=0)
        n_b = np.zeros((3, 3))
        if col_norms.min() > 0.0:
            b_flat = b_flat / col_norms
            n_b = b_flat.T @ b_flat
        if col_norms.min() <= 0.0 or np.linalg.cond(n_b) > POINT_BLOCK_COND_MAX:
            excluded.append(j)
            logger.warning(
                "excluding track %d: point block condition above %.0e",
                j, POINT_BLOCK_COND_MAX,
            )
            continue
        n_a[rows, rows] += 1.0
        rhs_a[rows] -= v.ravel()
        l_b = -b_flat.T @ v.ravel()
        tmp = b_flat @ np.linalg.inv(n_b)
        schur[np.ix_(rows, rows)] += tmp @ b_flat.T
        rhs_schur[rows] += tmp @ l_b
    return ReducedNormalSystem(n_a=n_a, schur=schur, rhs_a=rhs_a,
                               rhs_schur=rhs_schur,
                               excluded_tracks=excluded)


def solve_bias(
    system: ReducedNormalSystem, gauge_image: int | None = None
) -> np.ndarray:
    """Bias corrections from the reduced system, Cholesky-factored.

    Args:
        gauge_image: image whose correction is pinned to zero (rows and
            columns deleted before the solve); None when GCPs provide
            the datum.

    Returns:
        (N, 2) array of (d_row, d_col) corrections in pixels.

    Raises:
        RankDeficient: the (gauge-fixed) reduced matrix is not positive
            definite, e.g. a free network with no gauge.
    """
    reduced = system.n_a - system.schur
    rhs = system.rhs_a - system.rhs_schur
    size = reduced.shape[0]
    keep = np.ones(size, dtype=bool)
    if gauge_image is not None:
        keep[2 * gauge_image:2 * gauge_image + 2] = False
    x = np.zeros(size)
    if int(keep.sum()) == 0:
        return x.reshape(-1, 2)
    kept = reduced[np.ix_(keep, keep)]
    try:
        factor = scipy.linalg.cho_factor(kept)
    except (scipy.linalg.LinAlgError, np.linalg.LinAlgError):
        raise RankDeficient(
            "reduced bias system is not positive definite; free networks "
            "need a gauge image or GCPs"
        ) from None
    pivots = np.abs(np.diag(factor[0]))
    if pivots.min() <= PIVOT_RATIO_MIN * pivots.max():
        raise RankDeficient(
            "reduced bias system is numerically rank deficient; free "
            "networks need a gauge image or GCPs"
        )
    x[keep] = scipy.linalg.cho_solve(factor, rhs[keep])
    return x.reshape(-1, 2)


def ground_corrections(
    graph: ObservationGraph, x: np.ndarray
) -> dict[int, np.ndarray]:
    """Schur back-substitution: per-track normalized ground corrections
    implied by bias corrections ``x`` at the current linearization."""
    stack = _ModelStack(graph.images)
    x_flat = np.asarray(x, dtype=np.float64).reshape(-1)
    out = {}
    for j, track in enumerate(graph.tracks):
        if track.is_gcp:
            continue
        idxs = graph.visibility[j]
        v, b = _track_blocks(stack, idxs, graph.observations[j],
                             track.ground)
        b_flat = (b * track_scales(graph, track)).reshape(-1, 3)
        col_norms = np.linalg.norm(b_flat, axis=0)
        if col_norms.min() <= 0.0:
            continue
        b_eq = b_flat / col_norms
        n_b = b_eq.T @ b_eq
        if np.linalg.cond(n_b) > POINT_BLOCK_COND_MAX:
            continue
        l_b = -b_eq.T @ v.ravel()
        rows = _interleaved(idxs)
        out[j] = np.linalg.solve(
            n_b, l_b - b_eq.T @ x_flat[rows]) / col_norms
    return out


def update_points(graph: ObservationGraph) -> list[int]:
    """Re-triangulate every non-GCP track with the current biases.

    GCP grounds are never touched.  Tracks whose re-triangulation fails
    keep their previous ground and are logged; the failed indices are
    returned.
    """
    failed = []
    for j, track in enumerate(graph.tracks):
        if track.is_gcp:
            continue
        obs = [(graph.images[i].rpc, graph.images[i].bias,
                rpc_mod.ImagePoint(*graph.observations[j][slot]))
               for slot, i in enumerate(graph.visibility[j])]
        try:
            track.ground = rpc_mod.triangulate(obs)
        except NumericalError as exc:
            failed.append(j)
            logger.warning("keeping previous ground for track %d: %s",
                           j, exc)
    return failed


def report(graph: ObservationGraph) -> ReprojectionReport:
    """Residual statistics of all observations at the current state.

    avg_x / avg_y are mean absolute per-axis distances (x = column,
    y = row), avg_xy the mean Euclidean distance, max_* the maxima;
    per-image averages use the Euclidean distance.
    """
    stack = _ModelStack(graph.images)
    abs_r = []
    abs_c = []
    euclid = []
    image_sums = np.zeros(len(graph.images))
    image_counts = np.zeros(len(graph.images), dtype=np.int64)
    for j, track in enumerate(graph.tracks):
        idxs = graph.visibility[j]
        v, _ = _track_residuals(stack, idxs, graph.observations[j],
                                track.ground)
        d = np.hypot(v[:, 0], v[:, 1])
        abs_r.append(np.abs(v[:, 0]))
        abs_c.append(np.abs(v[:, 1]))
        euclid.append(d)
        np.add.at(image_sums, idxs, d)
        np.add.at(image_counts, idxs, 1)
    if not euclid:
        return ReprojectionReport(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, {}, 0)
    abs_r = np.concatenate(abs_r)
    abs_c = np.concatenate(abs_c)
    euclid = np.concatenate(euclid)
    per_image = {
        im.image_id: float(image_sums[i] / image_counts[i])
        for i, im in enumerate(graph.images) if image_counts[i]
    }
    return ReprojectionReport(
        avg_x=float(abs_c.mean()), avg_y=float(abs_r.mean()),
        avg_xy=float(euclid.mean()),
        max_x=float(abs_c.max()), max_y=float(abs_r.max()),
        max_xy=float(euclid.max()),
        per_image_avg_xy=per_image, count=int(euclid.size),
    )


def _apply_corrections(graph: ObservationGraph, x: np.ndarray) -> None:
    for i, im in enumerate(graph.images):
        im.bias = BiasCorrection(im.bias.d_row + float(x[i, 0]),
                                 im.bias.d_col + float(x[i, 1]))


def adjust_loop(
    graph: ObservationGraph,
    tol: float = CONVERGENCE_PX,
    max_iter: int = MAX_ITER,
    line_search: bool = False,
) -> AdjustmentResult:
    """Iterate accumulate -> solve -> apply -> re-triangulate.

    Stops when consecutive average reprojection errors differ by less
    than ``tol`` pixels; ``converged`` is False when the iteration cap
    was hit instead.  ``history[0]`` is the pre-adjustment average.

    The optional line search halves a step that increased the average by
    more than 10% (plain Gauss-Newton otherwise, which is what the
    reduced normal equations imply).
    """
    gauge = None if graph.has_gcp else 0
    history = [report(graph).avg_xy]
    converged = False
    iterations = 0
    for _ in range(max_iter):
        system = accumulate_reduced(graph)
        x = solve_bias(system, gauge)
        _apply_corrections(graph, x)
        update_points(graph)
        avg = report(graph).avg_xy
        if line_search and avg > history[-1] * 1.1:
            step = x.copy()
            for _ in range(5):
                step = step / 2
                _apply_corrections(graph, -step)
                update_points(graph)
                avg = report(graph).avg_xy
                if avg <= history[-1] * 1.1:
                    break
        iterations += 1
        history.append(avg)
        if abs(history[-1] - history[-2]) < tol:
            converged = True
            break
    return AdjustmentResult(
        biases=[im.bias for im in graph.images],
        grounds=[t.ground for t in graph.tracks],
        iterations=iterations, history=history, converged=converged,
    )


# ---------------------------------------------------------------------------
# Bias files
# ---------------------------------------------------------------------------


def save_biases(graph: ObservationGraph, path,
                header: str | None = None) -> None:
    """One line per image: ``image_id d_row d_col``."""
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write("# image_id d_row d_col\n")
        for im in graph.images:
            fh.write(f"{im.image_id} {im.bias.d_row!r} {im.bias.d_col!r}\n")


def load_biases(path) -> dict[str, BiasCorrection]:
    """Read a bias file written by :func:`save_biases`."""
    from .errors import ParseError

    biases = {}
    with open(path, "r") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if len(tokens) != 3:
                raise ParseError(
                    f"{path}:{line_no}: expected 3 fields, got {len(tokens)}"
                )
            try:
                biases[tokens[0]] = BiasCorrection(float(tokens[1]),
                                                   float(tokens[2]))
            except ValueError:
                raise ParseError(
                    f"{path}:{line_no}: non-numeric field"
                ) from None
    return biases
