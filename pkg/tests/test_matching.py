import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from bevloc.bev import BevImage
from bevloc.features import FeatureSet, extract_sift
from bevloc.kdtree import KDTree, brute_force_nn
from bevloc.matching import (DescriptorMatcher, MatcherState, MatchSet, dynamic_radius,
                             filter_by_radius, match_descriptors, update_hysteresis)


def feature_set(desc, uv=None, origin=(0.0, 0.0)):
    desc = np.asarray(desc, np.float32)
    n = len(desc)
    uv = np.column_stack([np.arange(n), np.arange(n)]).astype(float) if uv is None else uv
    return FeatureSet(uv, np.ones(n), np.zeros(n), np.ones(n), desc, origin=origin)


def unit(a):
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def test_self_match_distance_zero():
    d = unit(np.random.default_rng(0).normal(size=(300, 128)))
    fs = feature_set(d)
    m = match_descriptors(fs, fs, max_dist=0.5)
    assert len(m) == 300
    assert (m.distance == 0).all()
    np.testing.assert_array_equal(m.query_idx, m.map_idx)


def test_tie_goes_to_lower_index():
    a = np.zeros(128, np.float32)
    a[0] = 1
    b = np.zeros(128, np.float32)
    b[1] = 1
    q = (a + b) / 2
    m = match_descriptors(feature_set([q]), feature_set([b, a, a]), max_dist=2.0)
    assert len(m) == 1 and m.map_idx[0] == 0


def test_far_query_dropped():
    d = unit(np.random.default_rng(1).normal(size=(50, 128)))
    q = -d[:1]
    assert len(match_descriptors(feature_set(q), feature_set(d[1:]), max_dist=0.2)) == 0


def test_empty_inputs():
    d = unit(np.random.default_rng(2).normal(size=(5, 128)))
    assert len(match_descriptors(FeatureSet.empty(), feature_set(d), 1.0)) == 0
    assert len(match_descriptors(feature_set(d), FeatureSet.empty(), 1.0)) == 0


def sift_descriptors(n_images=3, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_images):
        t = ndimage.gaussian_filter(rng.uniform(0, 1, (400, 400)), 2)
        t = (t - t.min()) / (t.max() - t.min())
        out.append(extract_sift(BevImage(t, t * 0, t * 0, np.ones(t.shape, bool))).descriptors)
    return np.vstack(out)


def test_ann_agrees_with_brute_force_on_unrelated_queries():
    d = sift_descriptors()
    data, queries = d[:2000], d[2000:3000]
    _, ind, _ = KDTree(data).query(queries)
    _, ref = brute_force_nn(queries, data)
    assert (ind[:, 0] == ref).mean() >= 0.99


def test_ratio_test_flag():
    rng = np.random.default_rng(3)
    d = unit(rng.normal(size=(20, 128)))
    dup = np.vstack([d, d[:1] + 0.02])
    # halfway between two near-identical map descriptors: ambiguous under the ratio test
    q = d[:1] + 0.01
    m_off = DescriptorMatcher(max_dist=1.0).fit(feature_set(dup)).match(feature_set(q))
    m_on = DescriptorMatcher(max_dist=1.0, ratio=0.8).fit(feature_set(dup)).match(feature_set(q))
    assert len(m_off) == 1 and len(m_on) == 0


def test_dynamic_radius_rules():
    assert dynamic_radius(MatcherState()) == 20.0
    s = MatcherState(r_floor=0.5, r_min=0.5)
    for _ in range(5):
        s.record_offset(0.1)
    assert dynamic_radius(s) == pytest.approx(0.8)
    s = MatcherState(r_max=20.0)
    s.record_offset(10.0)
    assert dynamic_radius(s) == 20.0


def test_filter_by_radius_examples():
    q = np.zeros((3, 2))
    m = np.array([[0.0, 0.0], [33.0, 0.0], [5.0, 0.0]])
    ms = MatchSet.from_points(q, m, resolution=0.33)
    np.testing.assert_allclose(ms.displacement_px()[1], 100.0)
    kept = filter_by_radius(ms, 20.0)
    assert kept.map_xy[:, 0].tolist() == [0.0, 5.0]
    assert len(filter_by_radius(ms, math.inf)) == 3


@settings(max_examples=50)
@given(st.floats(0.1, 50), st.floats(0.1, 50))
def test_filter_monotone_subset(r1, r2):
    rng = np.random.default_rng(0)
    ms = MatchSet.from_points(rng.uniform(-30, 30, (40, 2)), rng.uniform(-30, 30, (40, 2)))
    small, big = sorted([r1, r2])
    a, b = filter_by_radius(ms, small), filter_by_radius(ms, big)
    assert set(a.query_idx) <= set(b.query_idx) <= set(ms.query_idx)


def test_hysteresis_rules():
    s = MatcherState(max_feature_distance=1.0)
    assert update_hysteresis(s, 1000).max_feature_distance == 1.0
    t = update_hysteresis(s, 5000)
    assert t.max_feature_distance == pytest.approx(0.9)
    assert t.max_keypoints == 900
    for _ in range(100):
        t = update_hysteresis(t, 5000)
    assert t.max_feature_distance == pytest.approx(t.distance_bounds[0])
    assert t.max_keypoints == t.keypoint_bounds[0]
    for _ in range(100):
        t = update_hysteresis(t, 10)
    assert t.max_feature_distance == pytest.approx(t.distance_bounds[1])


@settings(max_examples=40)
@given(st.integers(0, 10000))
def test_hysteresis_fixed_point(count):
    s = MatcherState()
    states = []
    for _ in range(60):
        s = update_hysteresis(s, count)
        states.append((s.max_feature_distance, s.max_keypoints))
    assert states[-1] == states[-2] == states[-10]
