"""Heatmap selection arithmetic and colormap rendering guarantees."""

import io

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from PIL import Image

from relprop.errors import GraphError, ShapeError
from relprop.graph import build_relevance_graph, top_k_paths
from relprop.heatmap import (
    COLORMAPS,
    Heatmap,
    MIDPOINT_INDEX,
    activation_heatmap,
    relevance_heatmap,
    render,
    value_to_index,
)
from relprop.imageio import png_bytes
from relprop.lrp import RuleAssignment, epsilon_rule, lrp_explain
from relprop.network import forward_trace

from oracles import naive_bilinear_resize
from toynets import conv_stack


@pytest.fixture(scope="module")
def pipeline():
    net = conv_stack(seed=15, bias=False)
    x = np.random.default_rng(16).standard_normal(net.input_shape)
    x = x.astype(np.float32)
    trace = forward_trace(net, x)
    rules = RuleAssignment.uniform(len(net.layers), epsilon_rule(1e-6))
    rmap = lrp_explain(trace, 1, rules)
    graph = build_relevance_graph(trace, rmap)
    paths = top_k_paths(graph, 3)
    return net, trace, rmap, graph, paths


class TestSelection:
    def test_relevance_sums_selected_channels(self, pipeline):
        net, trace, rmap, graph, paths = pipeline
        hm = relevance_heatmap(rmap, paths, 2)
        net_id = graph.layer_ids[2]
        channels = sorted({p.nodes[2][1] for p in paths})
        want = rmap.relevances[net_id + 1][channels].sum(axis=0)
        assert_allclose(hm.values, want)
        assert hm.kind == "relevance"

    def test_input_layer_sums_all_colors(self, pipeline):
        _, _, rmap, _, paths = pipeline
        hm = relevance_heatmap(rmap, paths, 0)
        assert_allclose(hm.values, rmap.relevances[0].sum(axis=0))

    def test_disjoint_paths_add(self, pipeline):
        net, trace, rmap, graph, paths = pipeline
        singles = [p for p in paths if p.nodes[1][1] != paths[0].nodes[1][1]]
        if not singles:
            pytest.skip("all sample paths share the channel at layer 1")
        p0, p1 = paths[0], singles[0]
        both = relevance_heatmap(rmap, [p0, p1], 1)
        lone0 = relevance_heatmap(rmap, [p0], 1)
        lone1 = relevance_heatmap(rmap, [p1], 1)
        assert_allclose(both.values, lone0.values + lone1.values, rtol=1e-5)

    def test_activation_uses_post_relu(self, pipeline):
        net, trace, rmap, graph, paths = pipeline
        hm = activation_heatmap(trace, paths, 1)
        net_id = graph.layer_ids[1]
        relu_idx = net.relu_after(net_id)
        channels = sorted({p.nodes[1][1] for p in paths})
        want = trace.outputs[relu_idx][channels].sum(axis=0)
        assert_allclose(hm.values, want)
        assert (hm.values >= 0).all()

    def test_empty_paths_rejected_beyond_input(self, pipeline):
        _, _, rmap, _, _ = pipeline
        with pytest.raises(GraphError):
            relevance_heatmap(rmap, [], 1)

    def test_zero_relevance_gives_zero_heatmap(self, pipeline):
        net, trace, _, _, paths = pipeline
        zero_map = lrp_explain(trace, 1)
        for i in range(len(zero_map.relevances)):
            zero_map.relevances[i] = np.zeros_like(zero_map.relevances[i])
        hm = relevance_heatmap(zero_map, paths, 1)
        assert_array_equal(hm.values, 0.0)


class TestIndexMapping:
    def test_zero_hits_exact_midpoint(self):
        assert value_to_index(np.array([0.0]))[0] == MIDPOINT_INDEX

    def test_sign_preserved_for_tiny_values(self):
        idx = value_to_index(np.array([1e-9, -1e-9]))
        assert idx[0] == MIDPOINT_INDEX + 1
        assert idx[1] == MIDPOINT_INDEX - 1

    def test_extremes_reach_table_ends(self):
        idx = value_to_index(np.array([1.0, -1.0]))
        assert idx[0] == 255
        assert idx[1] == 0

    def test_monotone(self):
        vals = np.linspace(-1, 1, 1001)
        idx = value_to_index(vals)
        assert (np.diff(idx) >= 0).all()

    def test_midpoint_color_is_white(self):
        assert_array_equal(COLORMAPS["seismic"][MIDPOINT_INDEX], [255, 255, 255])
        assert COLORMAPS["gray"][MIDPOINT_INDEX, 0] == 128


class TestRender:
    def test_zero_map_warns_and_renders_midpoint(self):
        hm = Heatmap(values=np.zeros((4, 4), dtype=np.float32), kind="relevance",
                     graph_layer=1)
        with pytest.warns(UserWarning, match="all-zero"):
            rgb, scale = render(hm)
        assert scale == 0.0
        assert_array_equal(rgb, np.full((4, 4, 3), 255, dtype=np.uint8))

    def test_sign_maps_to_red_and_blue_sides(self):
        hm = Heatmap(values=np.array([[1.0, -1.0]], dtype=np.float32),
                     kind="relevance", graph_layer=1)
        rgb, scale = render(hm)
        assert scale == 1.0
        r, b = rgb[0, 0], rgb[0, 1]
        assert r[0] > r[2]  # positive: red side
        assert b[2] > b[0]  # negative: blue side

    def test_upscale_bilinear_matches_oracle(self):
        rng = np.random.default_rng(3)
        values = rng.standard_normal((3, 5)).astype(np.float32)
        hm = Heatmap(values=values, kind="relevance", graph_layer=1)
        rgb, scale = render(hm, upscale=(6, 10))
        norm = values.astype(np.float64) / np.abs(values).max()
        want_norm = naive_bilinear_resize(norm, 6, 10)
        want = COLORMAPS["seismic"][value_to_index(np.clip(want_norm, -1, 1))]
        assert_allclose(rgb, want, atol=1)

    def test_upscale_nearest_blocks(self):
        values = np.array([[1.0, -1.0], [-1.0, 1.0]], dtype=np.float32)
        hm = Heatmap(values=values, kind="relevance", graph_layer=0)
        rgb, _ = render(hm, upscale=(4, 4), mode="nearest")
        assert_array_equal(rgb[0, 0], rgb[1, 1])
        assert_array_equal(rgb[0, 0], COLORMAPS["seismic"][255])
        assert_array_equal(rgb[0, 2], COLORMAPS["seismic"][0])

    def test_downscale_refused(self):
        hm = Heatmap(values=np.ones((4, 4), dtype=np.float32), kind="a",
                     graph_layer=0)
        with pytest.raises(ShapeError):
            render(hm, upscale=(2, 2))

    def test_overlay_alpha_limits(self):
        values = np.array([[1.0, -0.5]], dtype=np.float32)
        hm = Heatmap(values=values, kind="relevance", graph_layer=0)
        photo = np.full((1, 2, 3), 0.25)
        pure_heat, _ = render(hm, overlay=photo, alpha=1.0)
        no_heat, _ = render(hm, overlay=photo, alpha=0.0)
        plain, _ = render(hm)
        assert_array_equal(pure_heat, plain)
        assert_array_equal(no_heat, np.full((1, 2, 3), 64, dtype=np.uint8))

    def test_bad_arguments(self):
        hm = Heatmap(values=np.ones((2, 2), dtype=np.float32), kind="a",
                     graph_layer=0)
        with pytest.raises(ShapeError):
            render(hm, colormap="viridis")
        with pytest.raises(ShapeError):
            render(hm, mode="bicubic")

    def test_png_round_trip_preserves_pixels(self):
        rng = np.random.default_rng(4)
        values = rng.standard_normal((8, 8)).astype(np.float32)
        hm = Heatmap(values=values, kind="relevance", graph_layer=2)
        rgb, _ = render(hm)
        data = png_bytes(rgb)
        back = np.asarray(Image.open(io.BytesIO(data)).convert("RGB"))
        assert_array_equal(back, rgb)

    def test_render_is_deterministic(self):
        rng = np.random.default_rng(5)
        values = rng.standard_normal((6, 6)).astype(np.float32)
        hm = Heatmap(values=values, kind="relevance", graph_layer=1)
        a, _ = render(hm, upscale=(12, 12))
        b, _ = render(hm, upscale=(12, 12))
        assert_array_equal(a, b)
        assert png_bytes(a) == png_bytes(b)
