"""Command-line pipeline driver.

Subcommands expose each stage (rectify, match, adjust, report) plus an
end-to-end ``pipeline`` with persisted, resumable intermediates and a
``synth`` generator for reproducible test datasets.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from . import adjust as adjust_mod
from . import match as match_mod
from . import rectify as rectify_mod
from . import synth as synth_mod
from . import tracks as tracks_mod
from .errors import ConfigInvalid, DataError, NumericalError, ParseError
from .match import MatchParams
from .raster import read_pgm
from .rpc import load_rpc_file


@dataclass
class PipelineConfig:
    """All pipeline knobs; defaults are the method's stated values."""

    overlap_threshold: float = 0.6
    epipolar_buffer_px: float = 30.0
    ratio_threshold: float = 0.6
    reproj_filter_px: float = 2.0
    convergence_px: float = 0.001
    max_iter: int = 50
    window: int = 27
    blocks: int = 3
    fast_threshold: float = 20.0
    nms_radius: float = 5.0
    nodata: int = 0
    threads: int = 1

    def __post_init__(self):
        for name in ("overlap_threshold", "epipolar_buffer_px",
                     "ratio_threshold", "reproj_filter_px",
                     "convergence_px", "fast_threshold", "nms_radius"):
            if not getattr(self, name) > 0:
                raise ConfigInvalid(f"{name} must be positive")
        if self.max_iter < 1 or self.threads < 1:
            raise ConfigInvalid("max_iter and threads must be >= 1")

    def match_params(self) -> MatchParams:
        return MatchParams(
            epipolar_buffer_px=self.epipolar_buffer_px,
            ratio_threshold=self.ratio_threshold,
            reproj_filter_px=self.reproj_filter_px,
            fast_threshold=self.fast_threshold,
            nms_radius=self.nms_radius,
            window=self.window,
            blocks=self.blocks,
        )

    def describe(self) -> str:
        return " ".join(f"{f.name}={getattr(self, f.name)!r}"
                        for f in dataclasses.fields(self))


def load_config(path) -> dict:
    """Parse a ``key = value`` config file into a raw override dict.

    Raises:
        ParseError: malformed line.
        ConfigInvalid: unknown key or uncoercible value.
    """
    names = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}
    overrides = {}
    with open(path, "r") as fh:
        for line_no, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ParseError(f"{path}:{line_no}: expected 'key = value'")
            key, _, value = stripped.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in names:
                raise ConfigInvalid(f"{path}:{line_no}: unknown config key "
                                    f"{key!r}")
            caster = int if names[key] in (int, "int") else float
            try:
                overrides[key] = caster(value)
            except ValueError:
                raise ConfigInvalid(
                    f"{path}:{line_no}: cannot parse {value!r} for {key}"
                ) from None
    return overrides


def build_config(args: argparse.Namespace) -> PipelineConfig:
    """Defaults, overridden by a config file, overridden by flags."""
    overrides = {}
    if getattr(args, "config", None):
        overrides.update(load_config(args.config))
    for f in dataclasses.fields(PipelineConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = value
    return PipelineConfig(**overrides)


# ---------------------------------------------------------------------------
# Stage implementations
# ---------------------------------------------------------------------------


def _input_stems(paths: list[str]) -> list[str]:
    stems = []
    for path in paths:
        stem = path[:-4] if path.endswith((".pgm", ".rpc")) else path
        if stem not in stems:
            stems.append(stem)
    return stems


def cmd_rectify(inputs: list[str], out_dir: str,
                config: PipelineConfig) -> list[str]:
    """Rectify raw image/RPC pairs; returns the product stems written."""
    stems = _input_stems(inputs)
    if not stems:
        raise ConfigInvalid("no input images given")
    images = []
    for stem in stems:
        rpc = load_rpc_file(stem + ".rpc")
        raster = read_pgm(stem + ".pgm", nodata=config.nodata)
        images.append((raster, rpc))
    plane = rectify_mod.common_plane_height([rpc for _, rpc in images])
    gsd = rectify_mod.common_gsd(images, plane)
    os.makedirs(out_dir, exist_ok=True)

    def run(item):
        stem, (raster, rpc) = item
        product = rectify_mod.rectify_image(raster, rpc, plane, gsd)
        out_stem = os.path.join(out_dir, os.path.basename(stem))
        rectify_mod.save_product(product, out_stem)
        return out_stem

    jobs = list(zip(stems, images))
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            out_stems = list(pool.map(run, jobs))
    else:
        out_stems = [run(job) for job in jobs]
    print(f"rectified {len(out_stems)} image(s) onto plane "
          f"{plane:.3f} m at {gsd:.3f} m/px")
    return out_stems


def _load_products(products_dir: str) -> list:
    metas = sorted(
        name for name in os.listdir(products_dir) if name.endswith(".meta")
    )
    if not metas:
        raise ConfigInvalid(f"no level-2 products (*.meta) in "
                            f"{products_dir}")
    return [rectify_mod.load_product(os.path.join(products_dir, m[:-5]))
            for m in metas]


def cmd_match(products_dir: str, out_dir: str,
              config: PipelineConfig) -> tuple[str, str]:
    """Match all overlapping pairs and build tracks; returns file paths."""
    products = _load_products(products_dir)
    params = config.match_params()
    pairs = match_mod.select_pairs(products, config.overlap_threshold)

    features = {}

    def detect(i):
        features[i] = match_mod.detect_corners(
            products[i].raster, params.fast_threshold, params.nms_radius)

    needed = sorted({i for pair in pairs for i in pair})
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            list(pool.map(detect, needed))
    else:
        for i in needed:
            detect(i)

    def run(pair):
        i, j = pair
        return match_mod.match_pair(products[i], products[j], params,
                                    left_features=features[i],
                                    right_features=features[j])

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            per_pair = list(pool.map(run, pairs))
    else:
        per_pair = [run(pair) for pair in pairs]

    corrs = [c for batch in per_pair for c in batch]
    os.makedirs(out_dir, exist_ok=True)
    corr_path = os.path.join(out_dir, "correspondences.txt")
    match_mod.save_correspondences(corrs, corr_path, params)
    track_list = tracks_mod.build_tracks(corrs)
    track_path = os.path.join(out_dir, "tracks.txt")
    tracks_mod.save_tracks(track_list, track_path,
                           header=config.describe())
    stats = tracks_mod.track_stats(track_list)
    print(f"matched {len(pairs)} pair(s): {len(corrs)} correspondences, "
          f"{len(track_list)} tracks {stats}")
    return corr_path, track_path


def _format_table(before: adjust_mod.ReprojectionReport,
                  after: adjust_mod.ReprojectionReport) -> str:
    columns = ("avg_x", "avg_y", "avg_xy", "max_x", "max_y", "max_xy")
    lines = ["        " + "".join(f"{c:>9s}" for c in columns)]
    for label, rep in (("Before", before), ("After", after)):
        values = "".join(f"{getattr(rep, c):9.3f}" for c in columns)
        lines.append(f"{label:8s}{values}")
    return "\n".join(lines)


def _report_dict(rep: adjust_mod.ReprojectionReport) -> dict:
    return {
        "avg_x": round(rep.avg_x, 3), "avg_y": round(rep.avg_y, 3),
        "avg_xy": round(rep.avg_xy, 3), "max_x": round(rep.max_x, 3),
        "max_y": round(rep.max_y, 3), "max_xy": round(rep.max_xy, 3),
        "per_image_avg_xy": {k: round(v, 3)
                             for k, v in rep.per_image_avg_xy.items()},
        "count": rep.count,
    }


def cmd_adjust(track_path: str, products_dir: str, out_dir: str,
               config: PipelineConfig, gcp_path: str | None = None) -> str:
    """Run the bundle adjustment; writes biases and the metric report."""
    products = _load_products(products_dir)
    track_list = tracks_mod.load_tracks(track_path)
    gcps = tracks_mod.load_gcps(gcp_path) if gcp_path else None
    graph = adjust_mod.assemble(
        [(p.image_id, p.rpc) for p in products], track_list, gcps)
    if not graph.tracks:
        raise ConfigInvalid("no usable tracks; nothing to adjust")
    if not graph.has_gcp:
        print(f"free network: no GCPs given, biases are relative to the "
              f"gauge image {graph.images[0].image_id}")
    before = adjust_mod.report(graph)
    result = adjust_mod.adjust_loop(graph, tol=config.convergence_px,
                                    max_iter=config.max_iter)
    after = adjust_mod.report(graph)

    os.makedirs(out_dir, exist_ok=True)
    bias_path = os.path.join(out_dir, "biases.txt")
    adjust_mod.save_biases(graph, bias_path, header=config.describe())
    table = _format_table(before, after)
    summary = (f"iterations: {result.iterations}  "
               f"converged: {result.converged}")
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(table + "\n" + summary + "\n")
    payload = {
        "before": _report_dict(before),
        "after": _report_dict(after),
        "iterations": result.iterations,
        "converged": result.converged,
        "history": [round(h, 6) for h in result.history],
        "biases": {im.image_id: [im.bias.d_row, im.bias.d_col]
                   for im in graph.images},
        "gauge_image": None if graph.has_gcp else graph.images[0].image_id,
        "config": {f.name: getattr(config, f.name)
                   for f in dataclasses.fields(config)},
    }
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    print(table)
    print(summary)
    return bias_path


def cmd_pipeline(inputs: list[str], out_dir: str, config: PipelineConfig,
                 gcp_path: str | None = None, resume: bool = False) -> None:
    """rectify -> match -> adjust with resumable staged intermediates."""
    products_dir = os.path.join(out_dir, "products")
    track_path = os.path.join(out_dir, "tracks.txt")
    report_path = os.path.join(out_dir, "report.json")

    def stage_done(*paths):
        return resume and all(os.path.exists(p) for p in paths)

    if stage_done(products_dir):
        print("resume: products exist, skipping rectification")
    else:
        cmd_rectify(inputs, products_dir, config)
    if stage_done(track_path):
        print("resume: tracks exist, skipping matching")
    else:
        cmd_match(products_dir, out_dir, config)
    if stage_done(report_path):
        print("resume: report exists, skipping adjustment")
    else:
        cmd_adjust(track_path, products_dir, out_dir, config, gcp_path)


def cmd_report(track_path: str, products_dir: str,
               bias_path: str | None) -> None:
    """Recompute the metric table for stored tracks and biases."""
    products = _load_products(products_dir)
    track_list = tracks_mod.load_tracks(track_path)
    images = [(p.image_id, p.rpc) for p in products]
    graph = adjust_mod.assemble(images, track_list)
    before = adjust_mod.report(graph)
    if bias_path:
        biases = adjust_mod.load_biases(bias_path)
        for im in graph.images:
            if im.image_id in biases:
                im.bias = biases[im.image_id]
        adjust_mod.update_points(graph)
    after = adjust_mod.report(graph)
    print(_format_table(before, after))


def cmd_synth(args: argparse.Namespace) -> None:
    # Rendered scenes default to a small raster-friendly footprint;
    # metadata-only scenes to the generator's full-block extent.
    half_extent = args.half_extent
    if half_extent is None:
        half_extent = 400.0 if args.render else 45000.0
    scene = synth_mod.gen_scene(
        n_images=args.images, n_points=args.points,
        bias_range_px=args.bias_range, noise_sigma_px=args.noise,
        seed=args.seed, render=args.render, visibility=args.visibility,
        half_extent_m=half_extent,
    )
    synth_mod.save_scene(scene, args.out)
    print(f"wrote scene with {args.images} image(s), {args.points} "
          f"point(s) to {args.out}")


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """argparse, but usage problems exit 1 (2 is reserved for data)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--threads", type=int, help="worker cap; 1 "
                        "guarantees bitwise reproducibility")
    for f in dataclasses.fields(PipelineConfig):
        if f.name == "threads":
            continue
        caster = int if f.type in (int, "int") else float
        parser.add_argument(f"--{f.name.replace('_', '-')}", type=caster,
                            dest=f.name, help=argparse.SUPPRESS)


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="satadjust", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("rectify", help="resample images onto the common "
                       "height plane")
    p.add_argument("inputs", nargs="+", help="image stems (stem.pgm + "
                   "stem.rpc)")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("match", help="match tie points between products")
    p.add_argument("--products", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("adjust", help="solve per-image bias corrections")
    p.add_argument("--tracks", required=True)
    p.add_argument("--products", required=True)
    p.add_argument("--gcps")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("pipeline", help="rectify, match and adjust")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--gcps")
    p.add_argument("--resume", action="store_true",
                   help="skip stages whose outputs already exist")
    _add_config_flags(p)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=5)
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--bias-range", type=float, default=10.0)
    p.add_argument("--noise", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--render", action="store_true")
    p.add_argument("--visibility", choices=("full", "random"),
                   default="full")
    p.add_argument("--half-extent", type=float, default=None,
                   help="footprint half extent in meters "
                        "(default 400 rendered, 45000 otherwise)")

    p = sub.add_parser("report", help="recompute metrics for stored "
                       "tracks/biases")
    p.add_argument("--tracks", required=True)
    p.add_argument("--products", required=True)
    p.add_argument("--biases")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "synth":
            cmd_synth(args)
            return 0
        config = (build_config(args)
                  if args.command != "report" else None)
        if args.command == "rectify":
            cmd_rectify(args.inputs, args.out, config)
        elif args.command == "match":
            cmd_match(args.products, args.out, config)
        elif args.command == "adjust":
            cmd_adjust(args.tracks, args.products, args.out, config,
                       args.gcps)
        elif args.command == "pipeline":
            cmd_pipeline(args.inputs, args.out, config, args.gcps,
                         args.resume)
        elif args.command == "report":
            cmd_report(args.tracks, args.products, args.biases)
        return 0
    except (DataError, OSError) as exc:
        print(f"satadjust: data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"satadjust: numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
