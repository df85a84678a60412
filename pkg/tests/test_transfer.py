import json
from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paramdelta.analysis import norm_map
from paramdelta.checkpoint import open_checkpoint
from paramdelta.combine import apply_delta, extract_delta
from paramdelta.errors import (
    DegenerateInput,
    DuplicateAlpha,
    InvalidSpec,
    MalformedScoreTable,
    NoCompleteTriples,
    NonFiniteAlpha,
    SchemaMismatch,
)
from paramdelta.transfer import (
    FitMode,
    ScoreRow,
    ScoreTable,
    SweepManifest,
    execute_sweep,
    fit_gamma,
    hypothetical_scores,
    hypothetical_value,
    plan_sweep,
    transfer_pairs,
)

scores = st.integers(0, 1000).map(lambda k: k / 10)


def table(rows):
    return ScoreTable(ScoreRow(*r) for r in rows)


# ---- hypothetical scores ------------------------------------------------------


def test_reference_scores_interpolate_to_72_9():
    # MMLU, 8B: new base 66.0, old post-trained 68.5, old base 61.6
    assert hypothetical_value(66.0, 68.5, 61.6) == 72.9
    t = table([("b31", "MMLU", "acc", 66.0), ("p3", "MMLU", "acc", 68.5), ("b3", "MMLU", "acc", 61.6)])
    hyps, skipped = hypothetical_scores(t, "b31", "p3", "b3")
    assert [(h.benchmark, h.metric, h.value) for h in hyps] == [("MMLU", "acc", 72.9)] and skipped == []


@settings(max_examples=200)
@given(scores, scores, scores)
def test_cancellation_identities(fi, fp, fj):
    assert hypothetical_value(fj, fp, fj) == fp
    assert hypothetical_value(fi, fj, fj) == fi


@settings(max_examples=200)
@given(scores, scores, scores)
def test_swapping_bases_shifts_by_twice_the_base_gap(fi, fp, fj):
    forward = Decimal(repr(hypothetical_value(fi, fp, fj)))
    swapped = Decimal(repr(hypothetical_value(fj, fp, fi)))
    assert forward - swapped == 2 * (Decimal(repr(fi)) - Decimal(repr(fj)))


def test_missing_scores_are_skipped_and_listed():
    t = table(
        [
            ("bi", "A", "acc", 1.0), ("pj", "A", "acc", 2.0), ("bj", "A", "acc", 0.5),
            ("bi", "B", "em", 3.0), ("pj", "B", "em", 4.0),
        ]
    )
    hyps, skipped = hypothetical_scores(t, "bi", "pj", "bj")
    assert [h.value for h in hyps] == [2.5] and skipped == [("B", "em")]
    with pytest.raises(NoCompleteTriples):
        hypothetical_scores(t, "bi", "pj", "nobody")
    with pytest.raises(NoCompleteTriples):
        transfer_pairs(t, "bi", "pj", "bj", "nobody")


def test_transfer_pairs():
    t = table([(m, "A", "acc", v) for m, v in [("bi", 10.0), ("pj", 20.0), ("bj", 5.0), ("r", 24.0)]] + [("bi", "B", "x", 1.0)])
    pairs, skipped = transfer_pairs(t, "bi", "pj", "bj", "r")
    assert pairs == [(25.0, 24.0)] and skipped == [("B", "x")]


def test_score_table_invariants():
    with pytest.raises(MalformedScoreTable):
        table([("m", "A", "acc", 1.0), ("m", "A", "acc", 2.0)])
    with pytest.raises(MalformedScoreTable):
        table([("m", "A", "acc", float("nan"))])


@pytest.mark.parametrize(
    "text",
    [
        "",
        "model,benchmark,metric,value\n",
        "model_id,benchmark,metric,value\nm,A,acc\n",
        "model_id,benchmark,metric,value\nm,A,acc,high\n",
        "model_id,benchmark,metric,value\nm,A,acc,inf\n",
    ],
)
def test_bad_csv(tmp_path, text):
    p = tmp_path / "s.csv"
    p.write_text(text)
    with pytest.raises(MalformedScoreTable):
        ScoreTable.from_csv(p)


def test_csv_round_trip(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("model_id,benchmark,metric,value\nm1, MMLU ,acc,61.6\n\nm2,MMLU,acc,68.5\n")
    t = ScoreTable.from_csv(p)
    assert t.get("m1", "MMLU", "acc") == 61.6 and t.measures() == [("MMLU", "acc")]


# ---- regression -----------------------------------------------------------------


def test_perfect_unit_line():
    r = fit_gamma([(x, x) for x in (1.0, 2.0, 5.0)])
    assert (r.gamma, r.r_squared, r.intercept, r.n_points) == (1.0, 1.0, 0.0, 3)
    assert r.residuals == [0.0, 0.0, 0.0]


def test_half_slope_through_origin():
    r = fit_gamma([(x, 0.5 * x) for x in (2.0, 4.0, 10.0)], FitMode.THROUGH_ORIGIN)
    assert r.gamma == 0.5 and r.r_squared == 1.0


@settings(max_examples=100)
@given(
    st.floats(0.01, 10.0),
    st.lists(st.floats(-1e3, 1e3).filter(lambda v: abs(v) > 1e-3), min_size=2, max_size=60, unique=True),
)
def test_exact_line_recovered(slope, xs):
    r = fit_gamma([(x, slope * x) for x in xs])
    assert r.gamma == pytest.approx(slope, rel=1e-12)
    assert r.r_squared == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100)
@given(
    st.lists(st.tuples(scores, st.floats(0, 100)), min_size=3, max_size=40).filter(
        lambda ps: len({p[0] for p in ps}) > 1
    ),
    st.floats(-50, 50),
)
def test_intercept_fit_is_shift_invariant(points, c):
    a = fit_gamma(points, FitMode.WITH_INTERCEPT)
    b = fit_gamma([(x, y + c) for x, y in points], FitMode.WITH_INTERCEPT)
    spread = max(abs(y) for _, y in points) + abs(c) + 1.0
    assert b.gamma == pytest.approx(a.gamma, abs=1e-12 * spread)
    assert b.intercept - a.intercept == pytest.approx(c, abs=1e-12 * spread * 100)


def _noisy_points(seed=20240601, n=200):
    rng = np.random.default_rng(seed)
    hyp = rng.uniform(0.0, 100.0, n)
    real = 0.98 * hyp + rng.normal(0.0, 0.5, n)
    return hyp, real


def test_noisy_slope_matches_closed_form_oracle():
    hyp, real = _noisy_points()
    r = fit_gamma(list(zip(hyp.tolist(), real.tolist())))
    gamma_oracle = float(np.dot(hyp, real) / np.dot(hyp, hyp))
    resid = real - gamma_oracle * hyp
    r2_oracle = 1.0 - float(np.dot(resid, resid) / np.sum((real - real.mean()) ** 2))
    assert 0.975 <= r.gamma <= 0.985 and r.r_squared > 0.99
    assert r.gamma == pytest.approx(gamma_oracle, abs=1e-12)
    assert r.r_squared == pytest.approx(r2_oracle, abs=1e-12)
    assert np.allclose(r.residuals, resid, atol=1e-10)


def test_intercept_mode_matches_numpy_polyfit():
    hyp, real = _noisy_points(seed=5)
    r = fit_gamma(list(zip(hyp.tolist(), real.tolist())), FitMode.WITH_INTERCEPT)
    slope, icpt = np.polyfit(hyp, real, 1)
    assert r.gamma == pytest.approx(slope, rel=1e-10) and r.intercept == pytest.approx(icpt, abs=1e-9)


def test_noisy_fit_has_r2_below_one():
    hyp, real = _noisy_points(seed=1)
    assert fit_gamma(list(zip(hyp, real))).r_squared < 1.0


def test_degenerate_regressions():
    with pytest.raises(DegenerateInput):
        fit_gamma([(1.0, 1.0)])
    with pytest.raises(DegenerateInput):
        fit_gamma([(0.0, 1.0), (0.0, 2.0)])
    with pytest.raises(DegenerateInput):
        fit_gamma([(3.0, 1.0), (3.0, 2.0)], FitMode.WITH_INTERCEPT)
    with pytest.raises(DegenerateInput):
        fit_gamma([(1.0, float("nan")), (2.0, 1.0)])


def test_constant_reals():
    assert fit_gamma([(1.0, 2.0), (2.0, 2.0)], FitMode.WITH_INTERCEPT).r_squared == 1.0
    assert fit_gamma([(1.0, 2.0), (2.0, 2.0)]).r_squared == 0.0


def test_gamma_report_layout():
    doc = json.loads(fit_gamma([(1.0, 1.0), (2.0, 2.0)]).to_json())
    assert list(doc) == ["schema", "fit_mode", "gamma", "intercept", "r_squared", "n_points", "residuals", "skipped"]
    assert doc["schema"] == "paramdelta.gamma/1" and doc["fit_mode"] == "origin"


# ---- sweeps ----------------------------------------------------------------------


def test_plan_single_and_sorted():
    m = plan_sweep("a.ck", "d.ck", [1.0], "out/{alpha}.ck")
    assert [(e.alpha, e.path) for e in m.entries] == [(1.0, "out/1.0.ck")]
    m = plan_sweep("a.ck", "d.ck", [1.5, 0.5, 1.0], "s{index}_{alpha}.ck")
    assert m.alphas == [0.5, 1.0, 1.5]
    assert [e.path for e in m.entries] == ["s0_0.5.ck", "s1_1.0.ck", "s2_1.5.ck"]
    assert SweepManifest.from_dict(json.loads(m.to_json())) == m


def test_plan_errors():
    with pytest.raises(DuplicateAlpha):
        plan_sweep("a", "d", [0.5, 1.0, 0.5], "{alpha}")
    with pytest.raises(NonFiniteAlpha):
        plan_sweep("a", "d", [float("nan")], "{alpha}")
    with pytest.raises(NonFiniteAlpha):
        plan_sweep("a", "d", [float("inf")], "{alpha}")
    with pytest.raises(InvalidSpec):
        plan_sweep("a", "d", [], "{alpha}")
    with pytest.raises(InvalidSpec):
        plan_sweep("a", "d", [1.0, 2.0], "same.ck")
    with pytest.raises(InvalidSpec):
        plan_sweep("a", "d", [1.0], "{beta}")
    with pytest.raises(SchemaMismatch):
        SweepManifest.from_dict({"schema": "other"})


def test_sweep_execution_scales_norms_linearly(gen, tmp_path):
    base = gen("b", seed=1, dtype="f32")
    post = gen("p", seed=1, dtype="f32", plant={"seed": 2, "scale": 0.05})
    delta = extract_delta(post, base, tmp_path / "d.ck")
    m = plan_sweep(str(base.path), str(delta.path), [0.5, 1.0, 1.5], str(tmp_path / "sweep" / "a{alpha}.ck"))
    outs = execute_sweep(m)
    ref = norm_map(delta).by_name()
    for entry, out in zip(m.entries, outs):
        got = norm_map(extract_delta(open_checkpoint(entry.path), base, tmp_path / "back.ck")).by_name()
        for name, rec in got.items():
            assert rec.norm == pytest.approx(entry.alpha * ref[name].norm, rel=1e-4)


def test_sweep_outputs_match_direct_application(gen, tmp_path):
    base = gen("b", seed=3)
    delta = extract_delta(gen("p", seed=4), base, tmp_path / "d.ck")
    m = plan_sweep(str(base.path), str(delta.path), [-0.5, 0.3, 2.0], str(tmp_path / "s{index}.ck"))
    execute_sweep(m, threads=4)
    for e in m.entries:
        apply_delta(open_checkpoint(m.anchor), open_checkpoint(m.delta), e.alpha, tmp_path / "direct.ck")
        assert (tmp_path / "direct.ck").read_bytes() == open(e.path, "rb").read()
