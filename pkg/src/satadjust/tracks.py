"""Multi-view tie-point tracks.

Pairwise correspondences sharing a feature (same image, exact same
detected position) belong to the same object-space point; connected
components under that relation become tracks.  Components that would put
two different features of one image into a single track are contradictory
and dropped entirely.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigInvalid, ParseError
from .match import Correspondence
from .rpc import GroundPoint, ImagePoint


@dataclass
class Track:
    """Observations of one object-space point, at most one per image.

    ``ground`` is filled by triangulation during adjustment assembly.
    GCP tracks additionally carry their fixed surveyed coordinates.
    """

    observations: dict[str, ImagePoint]
    ground: GroundPoint | None = None
    is_gcp: bool = False
    gcp_ground: GroundPoint | None = None

    def __post_init__(self):
        if len(self.observations) < 2:
            raise ValueError("a track needs observations in >= 2 images")
        if self.is_gcp and self.gcp_ground is None:
            raise ValueError("GCP track without ground coordinates")

    @property
    def degree(self) -> int:
        return len(self.observations)


def _find(parent: dict, key):
    root = key
    while parent[root] != root:
        root = parent[root]
    while parent[key] != root:
        parent[key], key = root, parent[key]
    return root


def build_tracks(correspondences: list[Correspondence]) -> list[Track]:
    """Union correspondences into tracks (connected components).

    Feature identity is the exact pair (image_id, position); detection
    runs once per image, so equal positions mean the same feature.  The
    result is canonically ordered and independent of input order.
    """
    parent: dict = {}

    def node(image_id: str, p: ImagePoint):
        key = (image_id, p.row, p.col)
        parent.setdefault(key, key)
        return key

    for corr in correspondences:
        a = node(corr.left_image, corr.left.position)
        b = node(corr.right_image, corr.right.position)
        ra, rb = _find(parent, a), _find(parent, b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    components: dict = {}
    for key in parent:
        components.setdefault(_find(parent, key), []).append(key)

    tracks = []
    for members in components.values():
        members.sort()
        images = [m[0] for m in members]
        if len(set(images)) != len(images):
            continue  # two features of one image: contradictory, drop
        tracks.append(Track(observations={
            image_id: ImagePoint(row, col)
            for image_id, row, col in members
        }))
    tracks.sort(key=lambda t: sorted(
        (image_id, p.row, p.col) for image_id, p in t.observations.items()
    ))
    return tracks


def track_stats(tracks: list[Track]) -> dict[int, int]:
    """Histogram of track degrees, e.g. {2: 15433, 3: 4761, ...}."""
    histogram: dict[int, int] = {}
    for t in tracks:
        histogram[t.degree] = histogram.get(t.degree, 0) + 1
    return dict(sorted(histogram.items()))


# ---------------------------------------------------------------------------
# Track and GCP files
# ---------------------------------------------------------------------------


def save_tracks(tracks: list[Track], path, header: str | None = None) -> None:
    """One line per observation: ``track_id image_id row col``."""
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write("# track_id image_id row col\n")
        for tid, track in enumerate(tracks):
            for image_id, p in sorted(track.observations.items()):
                fh.write(f"{tid} {image_id} {p.row!r} {p.col!r}\n")


def load_tracks(path) -> list[Track]:
    """Read a track file written by :func:`save_tracks`.

    Raises:
        ParseError: malformed record, duplicate image within a track, or
            a track with fewer than two observations.
    """
    per_track: dict[int, dict[str, ImagePoint]] = {}
    with open(path, "r") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if len(tokens) != 4:
                raise ParseError(
                    f"{path}:{line_no}: expected 4 fields, got {len(tokens)}"
                )
            try:
                tid = int(tokens[0])
                row, col = float(tokens[2]), float(tokens[3])
            except ValueError:
                raise ParseError(
                    f"{path}:{line_no}: non-numeric field"
                ) from None
            obs = per_track.setdefault(tid, {})
            if tokens[1] in obs:
                raise ParseError(
                    f"{path}:{line_no}: image {tokens[1]} appears twice in "
                    f"track {tid}"
                )
            obs[tokens[1]] = ImagePoint(row, col)
    tracks = []
    for tid in sorted(per_track):
        obs = per_track[tid]
        if len(obs) < 2:
            raise ParseError(f"{path}: track {tid} has fewer than two "
                             f"observations")
        tracks.append(Track(observations=obs))
    return tracks


def save_gcps(gcps: dict[int, GroundPoint], path) -> None:
    """Companion GCP file: ``track_id lat lon hei`` per line."""
    with open(path, "w") as fh:
        fh.write("# track_id lat lon hei\n")
        for tid in sorted(gcps):
            g = gcps[tid]
            fh.write(f"{tid} {g.lat!r} {g.lon!r} {g.hei!r}\n")


def load_gcps(path) -> dict[int, GroundPoint]:
    """Read a GCP companion file written by :func:`save_gcps`."""
    gcps: dict[int, GroundPoint] = {}
    with open(path, "r") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if len(tokens) != 4:
                raise ParseError(
                    f"{path}:{line_no}: expected 4 fields, got {len(tokens)}"
                )
            try:
                tid = int(tokens[0])
                lat, lon, hei = (float(t) for t in tokens[1:])
            except ValueError:
                raise ParseError(
                    f"{path}:{line_no}: non-numeric field"
                ) from None
            if tid in gcps:
                raise ParseError(f"{path}:{line_no}: duplicate GCP for "
                                 f"track {tid}")
            gcps[tid] = GroundPoint(lat, lon, hei)
    return gcps


def apply_gcps(tracks: list[Track], gcps: dict[int, GroundPoint]) -> None:
    """Flag tracks (by position in the list) as ground control points.

    Raises:
        ConfigInvalid: a GCP track id does not exist.
    """
    for tid, g in gcps.items():
        if not 0 <= tid < len(tracks):
            raise ConfigInvalid(f"GCP refers to unknown track {tid}")
        tracks[tid].is_gcp = True
        tracks[tid].gcp_ground = g
