import math
from types import SimpleNamespace

import mpmath
import numpy as np
import pytest

from chal_lens.data import COVERED_FLAG
from chal_lens.glmm import fit_glmm_binomial
from chal_lens.inference import (
    BUCKETS,
    EffectTable,
    bucket,
    classify_effects,
    dumps,
    fit_from_dict,
    fit_to_dict,
    format_table,
    odds_ratio_table,
    read_effects_csv,
    read_effects_json,
    read_fit,
    stars,
    wald_tests,
    wald_z_p,
    write_effects_csv,
    write_effects_json,
    write_fit,
)


def mp_p(beta, se):
    mpmath.mp.dps = 40
    z = mpmath.mpf(beta) / mpmath.mpf(se)
    return float(mpmath.erfc(abs(z) / mpmath.sqrt(2)))


def fake_fit(names, beta, se, dropped=(), model="glmm", boundary=None, separated=()):
    return SimpleNamespace(model=model, names=list(names), beta=np.array(beta, float), beta_se=np.array(se, float),
                           alpha=0.1, alpha_se=0.05, dropped=list(dropped), boundary=boundary or {"image": False},
                           separated=list(separated), warnings=[], converged=True)


def test_wald_against_mpmath():
    z, p = wald_z_p(0.405465, 0.1)
    assert z == pytest.approx(4.05465, abs=1e-12)
    assert p == pytest.approx(mp_p(0.405465, 0.1), rel=1e-9)
    assert p == pytest.approx(5.0e-5, abs=1e-6)
    assert stars(p) == "***"
    z, p = wald_z_p(0.2, 0.12)
    assert p == pytest.approx(mp_p(0.2, 0.12), rel=1e-9)
    assert p == pytest.approx(0.096, abs=5e-4)
    assert stars(p) == ""
    assert wald_z_p(0.0, 0.3) == (0.0, 1.0)


def test_star_thresholds_and_monotone():
    assert [stars(p) for p in (0.001, 0.0011, 0.01, 0.0101, 0.05, 0.051)] == ["***", "**", "**", "*", "*", ""]
    marks = [len(stars(wald_z_p(b, 1.0)[1])) for b in np.linspace(0, 5, 200)]
    assert marks == sorted(marks)


def test_odds_ratio_examples():
    t = odds_ratio_table(fake_fit(["in_blood", "in_smoke", "in_tissue"], [-0.7, 0.0, math.log(1.5)], [0.2, 0.3, 0.1]))
    r = t["in_blood"]
    assert r.odds_ratio == pytest.approx(0.4966, abs=5e-5)
    assert r.or_ci_low == pytest.approx(math.exp(-0.7 - 1.959963984540054 * 0.2), rel=1e-12)
    assert r.or_ci_high == pytest.approx(math.exp(-0.7 + 1.959963984540054 * 0.2), rel=1e-12)
    # quoted as (0.335, 0.735); the exact lower bound is 0.33555
    assert (r.or_ci_low, r.or_ci_high) == (pytest.approx(0.335, abs=1e-3), pytest.approx(0.735, abs=1e-3))
    assert r.or_ci_low < r.odds_ratio < r.or_ci_high
    assert t["in_smoke"].odds_ratio == 1.0 and t["in_smoke"].p_value == 1.0
    assert math.log(3 / 2) == pytest.approx(0.405465, abs=1e-6)
    assert math.log(2 / 3) == pytest.approx(-math.log(3 / 2), abs=1e-15)


def test_bucket_examples():
    assert bucket(1.6, 0.01) == "+++"
    assert bucket(0.6, 0.001) == "--"
    assert bucket(1.4, 0.3) == ""
    assert bucket(1.2, 0.04) == "+"
    assert bucket(1.3, 0.04) == "++"
    assert bucket(0.8, 0.04) == "-"
    assert bucket(0.4, 0.04) == "---"
    assert bucket(1.6, 0.01, dropped=True) == "x"


@pytest.mark.parametrize("odds,expect", [(1.25, "+"), (1.2500001, "++"), (1.5, "++"), (1.5000001, "+++"),
                                         (0.75, "-"), (0.7499999, "--"), (0.5, "--"), (0.4999999, "---"),
                                         (1.0, "")])
def test_bucket_edges(odds, expect):
    assert bucket(odds, 0.05) == expect
    assert bucket(odds, 0.0500001) == ""


def test_bucket_sign_mirror():
    for o in np.exp(np.linspace(-2, 2, 81)):
        b, m = bucket(o, 0.01), bucket(1 / o, 0.01)
        if b:
            assert b[0] != m[0] and m
    assert set(bucket(o, p) for o in (0.3, 0.6, 0.9, 1.1, 1.3, 2.0) for p in (0.01, 0.5)) | {"x"} == set(BUCKETS)


def test_dropped_listed_once_and_single_context():
    fit = fake_fit(["in_blood", "bg_smoke"], [0.3, -0.2], [0.1, 0.1], dropped=[COVERED_FLAG, "img_too_dark"])
    t = odds_ratio_table(fit, "recall", "single")
    assert t.names == ["in_blood", COVERED_FLAG, "bg_smoke", "img_too_dark"]
    assert t[COVERED_FLAG].bucket == "x" and t["img_too_dark"].bucket == "x"
    fit = fake_fit(["in_blood", COVERED_FLAG], [0.3, -0.9], [0.1, 0.1])
    assert classify_effects(odds_ratio_table(fit), single_instrument_context=True)[COVERED_FLAG].bucket == "x"
    assert odds_ratio_table(fit)[COVERED_FLAG].bucket == "---"


def test_caveats():
    fit = fake_fit(["in_blood"], [20.0], [3.0], boundary={"image": True}, separated=["in_blood"])
    w = wald_tests(fit)[0]
    assert w.caveats == ["separation", "variance-boundary"]
    with pytest.raises(ValueError):
        wald_tests(SimpleNamespace(**{**vars(fit), "converged": False}))


def test_lmm_scale_has_no_odds():
    t = odds_ratio_table(fake_fit(["in_blood"], [0.3], [0.1], model="lmm"))
    assert math.isnan(t["in_blood"].odds_ratio) and t["in_blood"].bucket == "" and t["in_blood"].stars == "**"
    assert "estimate" in format_table(t).splitlines()[0]
    t = odds_ratio_table(fake_fit(["in_blood"], [0.3], [0.1], model="lmm"), log_odds_scale=True)
    assert t["in_blood"].odds_ratio == pytest.approx(math.exp(0.3))


def test_effect_io_roundtrip(tmp_path):
    fit = fake_fit(["in_blood", "bg_smoke"], [0.3, -0.2], [0.1, 0.1], dropped=[COVERED_FLAG])
    t = odds_ratio_table(fit, "recall", "all")
    write_effects_csv(t, tmp_path / "e.csv")
    back = read_effects_csv(tmp_path / "e.csv")
    for a, b in zip(t.rows, back):
        for k, v in vars(a).items():
            w = getattr(b, k)
            assert (isinstance(v, float) and math.isnan(v) and math.isnan(w)) or v == w
    write_effects_json(t, tmp_path / "e.json")
    again = read_effects_json(tmp_path / "e.json")
    assert dumps(again.to_dict()) == dumps(t.to_dict())
    assert isinstance(again, EffectTable) and again.perspective == "recall"


def test_fit_json_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    N = 80
    X = (rng.random((N, 2)) < 0.5).astype(float)
    g = {"image": rng.integers(0, 8, N)}
    t = rng.integers(5, 30, N)
    s = rng.binomial(t, 0.6)
    fit = fit_glmm_binomial(s, t, X, g, names=["in_blood", "bg_smoke"])
    write_fit(fit, tmp_path / "fit.json", {"perspective": "recall"})
    rec = read_fit(tmp_path / "fit.json")
    assert rec.alpha == fit.alpha and np.array_equal(rec.beta, fit.beta) and np.array_equal(rec.cov, fit.cov)
    assert rec.meta == {"perspective": "recall"}
    assert dumps(odds_ratio_table(rec).to_dict()) == dumps(odds_ratio_table(fit).to_dict())
    assert fit_from_dict(fit_to_dict(fit)).names == ["in_blood", "bg_smoke"]
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ValueError):
        read_fit(tmp_path / "bad.json")


def test_dumps_nonfinite():
    assert dumps({"a": math.nan, "b": [math.inf, -math.inf], "c": 0.1}) == (
        '{\n  "a": "nan",\n  "b": [\n    "inf",\n    "-inf"\n  ],\n  "c": 0.1\n}\n')
