"""Unit tests for the Schur-reduced bundle adjustment."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import scene_graph, scene_tracks
from satadjust import adjust, synth
from satadjust.adjust import (
    ObservationGraph,
    accumulate_reduced,
    adjust_loop,
    assemble,
    ground_corrections,
    load_biases,
    report,
    save_biases,
    solve_bias,
    update_points,
)
from satadjust.errors import ConfigInvalid, RankDeficient
from satadjust.rpc import BiasCorrection, GroundPoint, ImagePoint, project
from satadjust.synth import dense_solve, gen_scene
from satadjust.tracks import Track

# ---------------------------------------------------------------------------
# Graph assembly
# ---------------------------------------------------------------------------


def test_assemble_triangulates_all_tracks(small_scene):
    graph = scene_graph(small_scene)
    assert len(graph.tracks) == len(small_scene.true_points)
    for track, true_g in zip(graph.tracks, small_scene.true_points):
        assert track.ground is not None
        # biased observations displace the zero-bias triangulation
        assert abs(track.ground.lat - true_g.lat) < 0.01


def test_assemble_keeps_gcp_grounds_verbatim(small_scene):
    gcps = {0: small_scene.true_points[0], 3: small_scene.true_points[3]}
    graph = scene_graph(small_scene, gcps=gcps)
    assert graph.has_gcp
    assert graph.tracks[0].ground == small_scene.true_points[0]
    assert graph.tracks[3].ground == small_scene.true_points[3]


def test_graph_visibility_is_sorted_and_consistent(small_scene):
    graph = scene_graph(small_scene)
    for j, track in enumerate(graph.tracks):
        idxs = graph.visibility[j]
        assert list(idxs) == sorted(idxs)
        assert graph.observations[j].shape == (len(idxs), 2)


def test_duplicate_image_ids_rejected(small_scene):
    im = small_scene.images[0]
    tracks = scene_tracks(small_scene)
    with pytest.raises(ConfigInvalid):
        ObservationGraph(
            images=[adjust.ImageState("a", im.rpc, BiasCorrection()),
                    adjust.ImageState("a", im.rpc, BiasCorrection())],
            tracks=tracks[:1],
        )


# ---------------------------------------------------------------------------
# Schur equivalence against the dense oracle
# ---------------------------------------------------------------------------


def random_graph(rng, n_images=3, n_tracks=12, noise=0.3):
    """Random-camera observation graph with one image gauge-compatible."""
    scene = gen_scene(
        n_images, n_tracks, bias_range_px=10.0, noise_sigma_px=noise,
        seed=int(rng.integers(1, 2**31)),
    )
    return scene_graph(scene)


def test_solve_matches_dense_oracle(rng):
    for _ in range(10):
        graph = random_graph(rng)
        system = accumulate_reduced(graph)
        x = solve_bias(system, gauge_image=0)
        x_dense, _ = dense_solve(graph, gauge_image=0)
        np.testing.assert_allclose(x, x_dense, atol=1e-9)


def test_ground_corrections_match_dense_oracle(rng):
    graph = random_graph(rng, n_images=4, n_tracks=15)
    system = accumulate_reduced(graph)
    x = solve_bias(system, gauge_image=0)
    x_dense, y_dense = dense_solve(graph, gauge_image=0)
    y = ground_corrections(graph, x)
    for j, y_j in y.items():
        np.testing.assert_allclose(y_j, y_dense[j], atol=1e-9)


def test_gcp_graph_matches_dense_oracle(rng):
    scene = gen_scene(3, 12, 10.0, 0.3, seed=97)
    gcps = {1: scene.true_points[1], 5: scene.true_points[5]}
    graph = scene_graph(scene, gcps=gcps)
    system = accumulate_reduced(graph)
    x = solve_bias(system, gauge_image=None)
    x_dense, _ = dense_solve(graph, gauge_image=None)
    np.testing.assert_allclose(x, x_dense, atol=1e-9)


def affine_block_graph() -> ObservationGraph:
    """Exactly parallel cameras over one footprint, distinct view
    directions: here a ground translation plus a slide along any one
    image's ray is absorbed by constant biases, so the constant-bias
    free network is structurally rank deficient (gauge or not)."""
    from satadjust.geodesy import meters_per_degree
    from satadjust.synth import PushbroomCamera, camera_rpc

    m_lat, m_lon = meters_per_degree(30.0)
    lat_half, lon_half = 2000.0 / m_lat, 2000.0 / m_lon
    tangents = ((0.10, -0.20), (-0.15, 0.05), (0.20, 0.25))
    cams = [
        PushbroomCamera(lat0=30.0, lon0=50.0, h0=200.0, gsd=0.5,
                        row0=4000.0, col0=4000.0, azimuth=0.3,
                        tan_along=ta, tan_across=tc, altitude=1e13)
        for ta, tc in tangents
    ]
    pairs = [(f"aff_{i}", camera_rpc(cam, lat_half, lon_half, 100.0,
                                     (8001, 8001)))
             for i, cam in enumerate(cams)]
    gen = np.random.default_rng(4)
    tracks = []
    for _ in range(15):
        g = GroundPoint(
            30.0 + gen.uniform(-0.8, 0.8) * lat_half,
            50.0 + gen.uniform(-0.8, 0.8) * lon_half,
            200.0 + gen.uniform(-80.0, 80.0),
        )
        obs = {pid: project(rpc, BiasCorrection(), g)
               for (pid, rpc), cam in zip(pairs, cams)}
        tracks.append(Track(observations=obs))
    return assemble(pairs, tracks)


def test_exactly_parallel_free_network_raises_rank_deficient():
    graph = affine_block_graph()
    system = accumulate_reduced(graph)
    with pytest.raises(RankDeficient):
        solve_bias(system, gauge_image=None)
    with pytest.raises(RankDeficient):
        dense_solve(graph, gauge_image=None)
    # pinning one image leaves the slide along its ray unconstrained
    with pytest.raises(RankDeficient):
        solve_bias(system, gauge_image=0)


def test_gauge_image_correction_is_pinned(rng):
    graph = random_graph(rng)
    system = accumulate_reduced(graph)
    x = solve_bias(system, gauge_image=1)
    assert x[1, 0] == 0.0 and x[1, 1] == 0.0


# ---------------------------------------------------------------------------
# Memory discipline
# ---------------------------------------------------------------------------


def test_accumulate_allocates_nothing_above_2n_square(small_scene):
    graph = scene_graph(small_scene)
    shapes = []
    accumulate_reduced(graph, alloc_hook=shapes.append)
    n2 = 2 * len(graph.images)
    assert max(int(np.prod(s)) for s in shapes) == n2 * n2


# ---------------------------------------------------------------------------
# Iteration loop
# ---------------------------------------------------------------------------


def test_adjust_loop_free_network_recovers_relative_biases():
    scene = gen_scene(4, 120, 20.0, 0.15, seed=777)
    graph = scene_graph(scene)
    res = adjust_loop(graph)
    assert res.converged
    b0 = scene.images[0].true_bias
    for i, im in enumerate(scene.images):
        assert res.biases[i].d_row == pytest.approx(
            im.true_bias.d_row - b0.d_row, abs=0.2)
        assert res.biases[i].d_col == pytest.approx(
            im.true_bias.d_col - b0.d_col, abs=0.2)


def test_adjust_loop_gcp_mode_recovers_absolute_biases():
    scene = gen_scene(4, 120, 20.0, 0.15, seed=778)
    gcps = {j: scene.true_points[j] for j in (0, 1, 2)}
    graph = scene_graph(scene, gcps=gcps)
    res = adjust_loop(graph)
    assert res.converged
    for i, im in enumerate(scene.images):
        assert res.biases[i].d_row == pytest.approx(im.true_bias.d_row,
                                                    abs=0.2)
        assert res.biases[i].d_col == pytest.approx(im.true_bias.d_col,
                                                    abs=0.2)
    for j in (0, 1, 2):
        assert graph.tracks[j].ground == scene.true_points[j]


def test_adjust_loop_zero_bias_scene_is_a_fixed_point():
    scene = gen_scene(3, 60, 0.0, 0.0, seed=9,
                      biases=[BiasCorrection()] * 3)
    graph = scene_graph(scene)
    res = adjust_loop(graph)
    assert res.history[0] == pytest.approx(0.0, abs=1e-6)
    for b in res.biases:
        assert abs(b.d_row) < 1e-6 and abs(b.d_col) < 1e-6


def test_adjust_loop_history_and_convergence_flag():
    scene = gen_scene(4, 80, 15.0, 0.2, seed=55)
    graph = scene_graph(scene)
    res = adjust_loop(graph)
    assert res.converged
    assert res.iterations <= 50
    assert abs(res.history[-1] - res.history[-2]) < 0.001
    assert len(res.history) == res.iterations + 1


def test_update_points_retriangulates_under_current_bias(small_scene):
    graph = scene_graph(small_scene)
    before = [t.ground for t in graph.tracks]
    graph.images[0].bias = BiasCorrection(3.0, -2.0)
    failed = update_points(graph)
    assert failed == []
    moved = sum(1 for t, g in zip(graph.tracks, before)
                if t.ground is not None and t.ground != g)
    assert moved == len(graph.tracks)


def test_report_statistics_shape(small_scene):
    graph = scene_graph(small_scene)
    rep = report(graph)
    assert rep.count == sum(len(o) for o in graph.observations)
    assert rep.max_xy >= rep.avg_xy > 0
    assert set(rep.per_image_avg_xy) == {im.image_id for im in graph.images}
    # Euclidean mean dominates each per-axis mean and never their sum
    assert max(rep.avg_x, rep.avg_y) <= rep.avg_xy <= rep.avg_x + rep.avg_y


# ---------------------------------------------------------------------------
# Bias file round trip
# ---------------------------------------------------------------------------


def test_bias_save_load_round_trip(tmp_path, small_scene):
    graph = scene_graph(small_scene)
    graph.images[0].bias = BiasCorrection(1.25, -0.5)
    path = tmp_path / "bias.txt"
    save_biases(graph, path)
    loaded = load_biases(path)
    assert loaded["img_000"] == BiasCorrection(1.25, -0.5)
    assert set(loaded) == {im.image_id for im in graph.images}
