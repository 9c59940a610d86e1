import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orsp.domain import Fixation, FixationPack, Scanpath
from orsp.metrics import (MetricConfig, SaliencyMap, cc, edit_distance, evaluate, format_table, nss,
                          quantize, random_scanpaths, saliency_map, score_trial, sequence_score)

from oracles import naive_edit_distance

strings = st.lists(st.integers(0, 4), max_size=8)


def test_quantize_corners():
    assert quantize([Fixation(0.0, 0.0)], (8, 6)) == (0,)
    assert quantize([Fixation(1.0, 1.0)], (8, 6)) == (47,)
    assert quantize([Fixation(0.51, 0.2), Fixation(0.52, 0.21)]) == (12, 12)
    sp = Scanpath((FixationPack.of([(0.0, 0.0)]), FixationPack(), FixationPack.of([(1.0, 0.0)])))
    assert quantize(sp) == (0, 7)


def test_edit_distance_examples():
    assert edit_distance("kitten", "sitting") == 3
    assert edit_distance([], [1, 2, 3]) == 3
    assert edit_distance([4, 4], [4, 4]) == 0


@settings(max_examples=300, deadline=None)
@given(strings, strings)
def test_edit_distance_matches_recursion(a, b):
    assert edit_distance(a, b) == naive_edit_distance(a, b)


@settings(max_examples=200, deadline=None)
@given(strings, strings, strings)
def test_edit_distance_is_a_metric(a, b, c):
    assert edit_distance(a, b) == edit_distance(b, a)
    assert (edit_distance(a, b) == 0) == (a == b)
    assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)


def test_sequence_score_examples():
    assert sequence_score("AB", "AC") == 0.5
    assert sequence_score([], []) == 1.0
    assert sequence_score([], [3]) == 0.0
    assert sequence_score([1, 2], [1, 2]) == 1.0


@settings(max_examples=200, deadline=None)
@given(strings, strings)
def test_sequence_score_range(a, b):
    s = sequence_score(a, b)
    assert 0.0 <= s <= 1.0
    assert (s == 1.0) == (a == b)


def test_saliency_map_shapes_and_peak():
    assert not saliency_map(FixationPack()).grid.any()
    m = saliency_map(FixationPack.of([(0.5, 0.5)])).grid
    assert m.shape == (39, 65)
    peak = np.unravel_index(np.argmax(m), m.shape)
    assert peak == (19, 32)
    row = m[19]
    assert np.all(np.diff(row[32:]) <= 0) and np.all(np.diff(row[:33]) >= 0)
    assert np.all(m >= 0)


def test_saliency_map_is_additive():
    one = saliency_map(FixationPack.of([(0.3, 0.6)])).grid
    two = saliency_map(FixationPack.of([(0.3, 0.6), (0.3, 0.6)])).grid
    assert np.allclose(two, 2 * one, rtol=0, atol=1e-15)
    a = saliency_map(FixationPack.of([(0.1, 0.1)])).grid
    b = saliency_map(FixationPack.of([(0.9, 0.7)])).grid
    ab = saliency_map(FixationPack.of([(0.1, 0.1), (0.9, 0.7)])).grid
    assert np.allclose(ab, a + b, rtol=0, atol=1e-15)


def test_saliency_map_truncates_at_three_sigma():
    m = saliency_map(FixationPack.of([(0.5, 0.5)]), sigma_px=8.0).grid
    # 3 sigma = 24 px = 3 cells; the kernel support is 7 cells wide
    assert np.count_nonzero(m[19]) == 7


def test_saliency_map_rejects_bad_sigma():
    with pytest.raises(ValueError):
        saliency_map(FixationPack(), sigma_px=0.0)


def _map(seed):
    r = np.random.default_rng(seed)
    return SaliencyMap(r.random((39, 65)), 16.0)


def test_cc_properties():
    m = _map(0)
    assert cc(m, m) == pytest.approx(1.0, abs=1e-9)
    assert cc(m, SaliencyMap(3.0 - m.grid, 16.0)) == pytest.approx(-1.0, abs=1e-9)
    assert cc(m, SaliencyMap(np.full((39, 65), 0.2), 16.0)) == 0.0
    o = _map(1)
    assert cc(m, o) == cc(o, m)
    with pytest.raises(ValueError):
        cc(m, SaliencyMap(np.zeros((3, 3)), 16.0))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3), st.floats(-1e3, 1e3))
def test_cc_and_nss_affine_invariance(seed, a, b):
    m = _map(seed)
    scaled = SaliencyMap(a * m.grid + b, 16.0)
    assert abs(cc(m, scaled) - 1.0) < 1e-9
    gt = FixationPack.of(np.random.default_rng(seed).random((3, 2)))
    assert abs(nss(scaled, gt) - nss(m, gt)) < 1e-9


def test_nss_examples():
    m = saliency_map(FixationPack.of([(0.5, 0.5)]))
    z_max = (m.grid.max() - m.grid.mean()) / m.grid.std()
    assert nss(m, FixationPack.of([(0.5, 0.5)])) == pytest.approx(z_max, rel=1e-12)
    assert nss(SaliencyMap(np.full((39, 65), 4.0), 16.0), FixationPack.of([(0.5, 0.5)])) == 0.0
    # one fixation at each cell centre covers the map uniformly -> mean z = 0
    xs, ys = (np.arange(65) + 0.5) / 65, (np.arange(39) + 0.5) / 39
    every = FixationPack.of([(x, y) for y in ys for x in xs])
    assert abs(nss(_map(3), every)) < 1e-12


def _sp(*packs):
    return Scanpath(tuple(FixationPack.of(p) for p in packs))


def test_self_comparison_is_a_fixed_point(trials):
    gts = [t.gt_scanpath for t in trials]
    rep = evaluate(gts, gts)
    assert (rep.ss, rep.ss_pack, rep.fed, rep.fed_pack) == (1.0, 1.0, 0.0, 0.0)
    assert rep.cc_pack == pytest.approx(1.0, abs=1e-12)


def test_empty_prediction_against_nonempty():
    gt = _sp([(0.1, 0.1), (0.9, 0.9)], [], [(0.5, 0.5)])
    pred = _sp([], [], [])
    s = score_trial("t", pred, gt)
    assert s.ss == 0.0 and s.fed == 3.0
    # pack 1 has empty GT on both sides: SS 1 / FED 0 and skipped for CC/NSS
    assert s.ss_pack == pytest.approx((0 + 1 + 0) / 3)
    assert s.fed_pack == pytest.approx((2 + 0 + 1) / 3)
    assert s.cc_pack == 0.0 and s.nss_pack == 0.0


def test_all_empty_gt_skips_saliency():
    s = score_trial("t", _sp([], []), _sp([], []))
    assert s.cc_pack is None and s.nss_pack is None and s.ss == 1.0


def test_pack_count_mismatch():
    with pytest.raises(ValueError):
        score_trial("t", _sp([], []), _sp([], [], []))
    with pytest.raises(ValueError):
        evaluate([_sp([])], [])


def test_random_scores_worse_than_self(trials):
    gts = [t.gt_scanpath for t in trials]
    rnd = evaluate(random_scanpaths(gts, 0), gts)
    me = evaluate(gts, gts)
    assert rnd.ss < me.ss and rnd.fed > me.fed and rnd.cc_pack < me.cc_pack and rnd.nss_pack < me.nss_pack
    lens = [[len(p) for p in s.packs] for s in random_scanpaths(gts, 0)]
    assert lens == [[len(p) for p in s.packs] for s in gts]


def test_threads_do_not_change_the_report(trials):
    gts = [t.gt_scanpath for t in trials]
    preds = random_scanpaths(gts, 4)
    assert evaluate(preds, gts, threads=4).to_json() == evaluate(preds, gts).to_json()


def test_report_json_and_table(trials):
    gts = [t.gt_scanpath for t in trials[:3]]
    rep = evaluate(gts, gts, MetricConfig(), [t.trial_id for t in trials[:3]])
    doc = json.loads(rep.to_json())
    assert doc["aggregate"]["n_trials"] == 3 and len(doc["per_trial"]) == 3
    table = format_table([("Self", rep)])
    assert table.splitlines()[0].split() == ["SS↑", "SSpack↑", "FED↓", "FEDpack↓", "CCpack↑", "NSSpack↑"]
    assert table.splitlines()[1].split()[:5] == ["Self", "1.000", "1.000", "0.000", "0.000"]
