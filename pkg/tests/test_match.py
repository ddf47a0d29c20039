"""Unit tests for corner detection, census matching and epipolar search."""

from __future__ import annotations

import math

import numpy as np
import pytest

from satadjust.errors import ConfigMismatch, ParseError, WindowOutOfBounds
from satadjust.match import (
    Correspondence,
    Feature,
    MatchParams,
    detect_corners,
    epipolar_curve,
    load_correspondences,
    match_pair,
    match_score,
    mbcensus_descriptor,
    pair_offset,
    save_correspondences,
    select_pairs,
)
from satadjust.raster import Raster
from satadjust.rpc import BiasCorrection, ImagePoint
from satadjust.synth import gen_scene, scene_products

# ---------------------------------------------------------------------------
# Shared stereo scene: right image biased by (10, 10) px
# ---------------------------------------------------------------------------

RIGHT_BIAS = BiasCorrection(10.0, 10.0)


@pytest.fixture(scope="module")
def stereo():
    scene = gen_scene(
        2, 120, 0.0, 0.0, seed=88, render=True, half_extent_m=500.0,
        biases=[BiasCorrection(), RIGHT_BIAS],
    )
    products = scene_products(scene)
    return scene, products


def planted_positions(scene, index):
    """Noiseless rendered dot centers of every point in one image."""
    import satadjust.rpc as rpc_mod

    out = []
    img = scene.images[index]
    for g in scene.true_points:
        raw = rpc_mod.project(img.rpc, BiasCorrection(), g)
        out.append((raw.row - img.true_bias.d_row,
                    raw.col - img.true_bias.d_col))
    return np.array(out)


def monotone(raster: Raster) -> Raster:
    """Affine intensity transform 2 * v + 30 (strictly increasing)."""
    return Raster((2 * raster.pixels.astype(np.int64) + 30).astype(
        raster.pixels.dtype), nodata=raster.nodata)


# ---------------------------------------------------------------------------
# Corner detection
# ---------------------------------------------------------------------------


def test_detect_corners_finds_planted_dots(stereo):
    scene, products = stereo
    planted = planted_positions(scene, 0)
    features = detect_corners(products[0].raster)
    pos = np.array([(f.position.row, f.position.col) for f in features])
    found = 0
    for r, c in planted:
        d = np.hypot(pos[:, 0] - r, pos[:, 1] - c)
        if d.min() <= 1.5:
            found += 1
    assert found >= 0.95 * len(planted)


def test_detect_corners_is_deterministic(stereo):
    _, products = stereo
    a = detect_corners(products[0].raster)
    b = detect_corners(products[0].raster)
    assert a == b


def test_detect_corners_flat_image_is_empty():
    flat = Raster(np.full((64, 64), 80, dtype=np.uint8))
    assert detect_corners(flat) == []


def test_nms_keeps_single_feature_for_twin_dots():
    px = np.full((48, 48), 40.0)
    rr, cc = np.meshgrid(np.arange(48.0), np.arange(48.0), indexing="ij")
    for r0, c0, amp in ((24.0, 22.0, 50.0), (24.0, 25.0, 38.0)):
        px += amp * np.exp(-((rr - r0) ** 2 + (cc - c0) ** 2) / 3.2)
    raster = Raster(px.astype(np.uint8))
    features = detect_corners(raster, threshold=15.0, nms_radius=5.0)
    assert len(features) == 1
    assert features[0].position.col == pytest.approx(22.0, abs=1.5)


# ---------------------------------------------------------------------------
# Census descriptors
# ---------------------------------------------------------------------------


def test_descriptor_invariant_under_monotone_transform(stereo):
    _, products = stereo
    raster = products[0].raster
    transformed = monotone(raster)
    for f in detect_corners(raster)[:25]:
        try:
            d1 = mbcensus_descriptor(raster, f.position)
            d2 = mbcensus_descriptor(transformed, f.position)
        except WindowOutOfBounds:
            continue
        np.testing.assert_array_equal(d1.bits, d2.bits)


def test_descriptor_shape_and_score():
    gen = np.random.default_rng(6)
    raster = Raster(gen.integers(0, 200, (64, 64)).astype(np.uint8))
    d = mbcensus_descriptor(raster, ImagePoint(32.0, 32.0))
    assert d.bits.shape == (9, 80)
    assert d.total_bits == 720
    assert match_score(d, d) == 0


def test_match_score_counts_flipped_bits():
    gen = np.random.default_rng(7)
    raster = Raster(gen.integers(0, 200, (64, 64)).astype(np.uint8))
    d1 = mbcensus_descriptor(raster, ImagePoint(30.0, 30.0))
    bits = d1.bits.copy()
    bits[0, :5] ^= 1
    d2 = type(d1)(bits=bits, window=d1.window, blocks=d1.blocks)
    assert match_score(d1, d2) == 5


def test_match_score_rejects_config_mismatch():
    gen = np.random.default_rng(8)
    raster = Raster(gen.integers(0, 200, (80, 80)).astype(np.uint8))
    d27 = mbcensus_descriptor(raster, ImagePoint(40.0, 40.0), window=27)
    d21 = mbcensus_descriptor(raster, ImagePoint(40.0, 40.0), window=21)
    with pytest.raises(ConfigMismatch):
        match_score(d27, d21)


def test_descriptor_window_must_fit():
    raster = Raster(np.zeros((30, 30), dtype=np.uint8))
    with pytest.raises(WindowOutOfBounds):
        mbcensus_descriptor(raster, ImagePoint(5.0, 15.0))


# ---------------------------------------------------------------------------
# Epipolar curves
# ---------------------------------------------------------------------------


def test_epipolar_curve_tracks_true_counterpart(stereo):
    scene, products = stereo
    left_pos = planted_positions(scene, 0)
    right_pos = planted_positions(scene, 1)
    hei = scene.images[0].rpc.hei_off
    span = scene.images[0].rpc.hei_scale
    checked = 0
    for j in range(0, len(scene.true_points), 10):
        p = ImagePoint(*left_pos[j])
        curve = epipolar_curve(p, products[0], products[1],
                               hei - span, hei + span, span / 16)
        if len(curve) < 2:
            continue
        vertices = np.array([(v.row, v.col) for v in curve])
        d = np.hypot(vertices[:, 0] - right_pos[j][0] - RIGHT_BIAS.d_row,
                     vertices[:, 1] - right_pos[j][1] - RIGHT_BIAS.d_col)
        # the un-biased counterpart position must lie on the curve
        assert d.min() < 0.75
        checked += 1
    assert checked >= 8


def test_epipolar_curve_validates_heights(stereo):
    _, products = stereo
    p = ImagePoint(400.0, 400.0)
    with pytest.raises(ValueError):
        epipolar_curve(p, products[0], products[1], 500.0, 400.0, 10.0)
    with pytest.raises(ValueError):
        epipolar_curve(p, products[0], products[1], 400.0, 500.0, -1.0)


# ---------------------------------------------------------------------------
# Pair selection and end-to-end matching
# ---------------------------------------------------------------------------


def test_select_pairs_by_overlap(stereo):
    _, products = stereo
    assert select_pairs(products) == [(0, 1)]


def test_match_pair_recall_and_zero_mismatches(stereo):
    scene, products = stereo
    transformed = type(products[1])(
        raster=monotone(products[1].raster), rpc=products[1].rpc,
        plane_height=products[1].plane_height, gsd=products[1].gsd,
        geo_transform=products[1].geo_transform,
        footprint=products[1].footprint, image_id=products[1].image_id,
    )
    corrs = match_pair(products[0], transformed)
    left_pos = planted_positions(scene, 0)
    right_pos = planted_positions(scene, 1)

    def nearest(planted, p):
        d = np.hypot(planted[:, 0] - p.row, planted[:, 1] - p.col)
        j = int(np.argmin(d))
        return j if d[j] <= 2.0 else None

    hits = set()
    mismatches = 0
    for corr in corrs:
        jl = nearest(left_pos, corr.left.position)
        jr = nearest(right_pos, corr.right.position)
        if jl is None or jr is None or jl != jr:
            mismatches += 1
        else:
            hits.add(jl)
    assert mismatches == 0
    assert len(hits) >= 0.9 * len(scene.true_points)


def test_product_matched_against_itself(stereo):
    _, products = stereo
    corrs = match_pair(products[0], products[0])
    assert len(corrs) > 50
    for corr in corrs:
        assert corr.left.position == corr.right.position
        assert corr.score == 0
    dr, dc = pair_offset(corrs, products[0], products[0])
    assert math.hypot(dr, dc) < 1e-6


def test_emitted_matches_reproject_within_filter(stereo):
    from satadjust.errors import IllConditioned
    from satadjust.rpc import residual, triangulate

    _, products = stereo
    corrs = match_pair(products[0], products[1])
    dr, dc = pair_offset(corrs, products[0], products[1])
    comp = BiasCorrection(-dr, -dc)
    zero = BiasCorrection()
    checked = 0
    for corr in corrs:
        obs = [(products[0].rpc, zero, corr.left.position),
               (products[1].rpc, comp, corr.right.position)]
        try:
            ground = triangulate(obs)
        except IllConditioned:
            continue
        for rpc, bias, p in obs:
            res = residual(rpc, bias, ground, p)
            assert math.hypot(*res) <= 2.0 + 1e-6
        checked += 1
    assert checked >= 0.8 * len(corrs)


# ---------------------------------------------------------------------------
# Correspondence files
# ---------------------------------------------------------------------------


def test_correspondence_round_trip(tmp_path):
    corrs = [Correspondence(
        left=Feature(ImagePoint(10.0, 20.5), 30.0),
        right=Feature(ImagePoint(11.25, 19.0), 25.0),
        score=42, left_image="a", right_image="b",
    )]
    path = tmp_path / "corr.txt"
    save_correspondences(corrs, path)
    back = load_correspondences(path)
    assert len(back) == 1
    assert back[0].pair_id == "a:b"
    assert back[0].left.position == ImagePoint(10.0, 20.5)
    assert back[0].right.position == ImagePoint(11.25, 19.0)
    assert back[0].score == 42


def test_correspondence_load_rejects_bad_lines(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("a:b 1.0 2.0 3.0\n")
    with pytest.raises(ParseError):
        load_correspondences(path)
    path.write_text("nocolon 1.0 2.0 3.0 4.0 5\n")
    with pytest.raises(ParseError):
        load_correspondences(path)
    path.write_text("a:b 1.0 x 3.0 4.0 5\n")
    with pytest.raises(ParseError):
        load_correspondences(path)
