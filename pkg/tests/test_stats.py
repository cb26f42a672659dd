"""Contingency tests, chi-square, Bonferroni, the p-value grid, and MLR."""

import math

import numpy as np
import pytest
import scipy.stats

from adsubtype.stats import (
    ALL_CLUSTERS,
    VariableSpec,
    bonferroni_threshold,
    chi2_sf,
    chi_square_test,
    contingency,
    expand_categorical,
    fit_multinomial_logit,
    mlr_gradient,
    pair_keys,
    pairwise_test_grid,
)

# ---------------------------------------------------------------------------
# contingency
# ---------------------------------------------------------------------------


def test_contingency_basic():
    labels = [0, 0, 0, 1, 1, 2]
    values = ["a", "a", "b", "b", "b", "a"]
    t = contingency(labels, values)
    assert t.row_labels == ["0", "1", "2"]
    assert t.col_labels == ["a", "b"]
    assert t.counts.tolist() == [[2, 1], [0, 2], [1, 0]]


def test_contingency_restrict_and_binarize():
    labels = [0, 0, 1, 1, 2, 2]
    values = ["a", "b", "b", "c", "a", "c"]
    t = contingency(labels, values, restrict=(0, 2))
    assert t.row_labels == ["0", "2"]
    assert t.counts.sum() == 4
    t2 = contingency(labels, values, binarize="a")
    assert t2.col_labels == ["a", "not_a"]
    assert t2.counts[:, 0].tolist() == [1, 0, 1]


def test_contingency_explicit_categories_fix_column_order():
    t = contingency([0, 1], ["y", "x"], categories=["y", "x"])
    assert t.col_labels == ["y", "x"]
    assert t.counts.tolist() == [[1, 0], [0, 1]]


def test_contingency_errors():
    with pytest.raises(ValueError, match="align"):
        contingency([0, 1], ["a"])
    with pytest.raises(ValueError, match="not present"):
        contingency([0, 1], ["a", "b"], restrict=(0, 5))
    with pytest.raises(ValueError, match="not in category list"):
        contingency([0, 1], ["a", "z"], categories=["a", "b"])
    with pytest.raises(ValueError, match="nonnegative"):
        from adsubtype.stats import ContingencyTable

        ContingencyTable(np.array([[1, -1], [0, 2]]), ["0", "1"], ["a", "b"])


# ---------------------------------------------------------------------------
# chi-square
# ---------------------------------------------------------------------------


def test_chi_square_hand_derived_2x2():
    t = contingency([0] * 30 + [1] * 30, ["a"] * 10 + ["b"] * 20 + ["a"] * 20 + ["b"] * 10)
    assert t.counts.tolist() == [[10, 20], [20, 10]]
    plain = chi_square_test(t, yates=False)
    assert plain.statistic == pytest.approx(20 / 3, abs=1e-4)
    assert plain.p_value == pytest.approx(0.00982, abs=1e-4)
    assert plain.df == 1 and not plain.yates_applied
    corrected = chi_square_test(t, yates=True)
    assert corrected.statistic == pytest.approx(5.4, abs=1e-4)
    assert corrected.p_value == pytest.approx(0.02014, abs=1e-4)
    assert corrected.yates_applied


def test_chi_square_independent_rows_give_zero():
    from adsubtype.stats import ContingencyTable

    t = ContingencyTable(np.array([[10, 30], [20, 60]]), ["0", "1"], ["a", "b"])
    result = chi_square_test(t)
    assert result.statistic == 0.0
    assert result.p_value == 1.0


def test_chi_square_matches_scipy_on_rxc():
    from adsubtype.stats import ContingencyTable

    rng = np.random.default_rng(5)
    for _ in range(10):
        counts = rng.integers(5, 60, size=(3, 4))
        t = ContingencyTable(counts, ["0", "1", "2"], list("abcd"))
        ours = chi_square_test(t)
        ref = scipy.stats.chi2_contingency(counts, correction=False)
        assert ours.statistic == pytest.approx(ref.statistic, rel=1e-12)
        assert ours.p_value == pytest.approx(ref.pvalue, rel=1e-10)
        assert ours.df == ref.dof


def test_chi_square_yates_only_applies_to_2x2():
    from adsubtype.stats import ContingencyTable

    t = ContingencyTable(np.array([[5, 10], [10, 5], [7, 7]]), ["0", "1", "2"], ["a", "b"])
    result = chi_square_test(t, yates=True)
    assert not result.yates_applied
    assert result.df == 2


def test_chi_square_errors_and_warning(caplog):
    from adsubtype.stats import ContingencyTable

    with pytest.raises(ValueError, match="zero marginal"):
        chi_square_test(ContingencyTable(np.array([[0, 0], [1, 2]]), ["0", "1"], ["a", "b"]))
    with pytest.raises(ValueError, match="at least 2x2"):
        chi_square_test(ContingencyTable(np.array([[1], [2]]), ["0", "1"], ["a"]))
    with caplog.at_level("WARNING"):
        chi_square_test(ContingencyTable(np.array([[2, 8], [3, 7]]), ["0", "1"], ["a", "b"]))
    assert any("approximate" in r.message for r in caplog.records)


def test_chi2_sf_reference_points():
    assert chi2_sf(0.0, 1) == 1.0
    assert chi2_sf(3.841, 1) == pytest.approx(0.05, abs=5e-4)
    assert chi2_sf(5.991, 2) == pytest.approx(0.05, abs=5e-4)
    assert chi2_sf(13.277, 4) == pytest.approx(0.01, abs=5e-4)
    for x in (0.5, 2.0, 9.3, 40.0):
        for df in (1, 3, 10):
            assert chi2_sf(x, df) == pytest.approx(scipy.stats.chi2.sf(x, df), rel=1e-12)


def test_chi2_sf_monotone_and_validation():
    values = [chi2_sf(x, 3) for x in np.linspace(0, 20, 30)]
    assert all(b <= a for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError):
        chi2_sf(-1.0, 2)
    with pytest.raises(ValueError):
        chi2_sf(1.0, 0)
    with pytest.raises(ValueError):
        chi2_sf(1.0, 2.5)


def test_bonferroni_threshold():
    assert bonferroni_threshold(0.05, 15) == 0.05 / 15
    assert bonferroni_threshold(0.05, 1) == 0.05
    assert bonferroni_threshold(0.05, 15) * 15 == pytest.approx(0.05, rel=1e-15)
    with pytest.raises(ValueError):
        bonferroni_threshold(0.0, 5)
    with pytest.raises(ValueError):
        bonferroni_threshold(0.05, 0)


# ---------------------------------------------------------------------------
# pairwise grid
# ---------------------------------------------------------------------------


def _demo_labels_values(n_per=40):
    rng = np.random.default_rng(17)
    labels = np.repeat([0, 1, 2, 3], n_per).tolist()
    sex = ["Female" if rng.random() < 0.4 + 0.1 * lab else "Male" for lab in labels]
    race_pool = ["White", "Black", "Asian"]
    race = [race_pool[int(rng.integers(0, 3))] for _ in labels]
    return labels, sex, race


def test_pair_keys():
    assert pair_keys([0, 1, 2]) == ["0_vs_1", "0_vs_2", "1_vs_2"]


def test_pairwise_grid_shape_and_cells():
    labels, sex, race = _demo_labels_values()
    grid = pairwise_test_grid(
        labels,
        [
            VariableSpec("sex", tuple(sex)),
            VariableSpec("race", tuple(race), expand_categories=True),
        ],
    )
    # one full-split row per variable plus one binarized row per race category
    assert [(r.variable, r.category) for r in grid] == [
        ("sex", None),
        ("race", None),
        ("race", "Asian"),
        ("race", "Black"),
        ("race", "White"),
    ]
    expected_keys = set(pair_keys([0, 1, 2, 3])) | {ALL_CLUSTERS}
    for row in grid:
        assert set(row.cells) == expected_keys
        for cell in row.cells.values():
            assert cell.error is None
            assert 0.0 <= cell.p_value <= 1.0


def test_pairwise_grid_category_order_respected():
    labels, _, race = _demo_labels_values()
    grid = pairwise_test_grid(
        labels,
        [
            VariableSpec(
                "race", tuple(race), expand_categories=True,
                category_order=("White", "Asian", "Black", "Never Present"),
            )
        ],
    )
    assert [r.category for r in grid] == [None, "White", "Asian", "Black"]


def test_pairwise_grid_untestable_cells_carry_errors():
    labels = [0] * 20 + [1] * 20
    constant = ["same"] * 40
    grid = pairwise_test_grid(labels, [VariableSpec("flag", tuple(constant))])
    assert len(grid) == 1
    for cell in grid[0].cells.values():
        assert cell.p_value is None
        assert cell.error


def test_pairwise_grid_pair_matches_direct_test():
    labels, sex, _ = _demo_labels_values()
    grid = pairwise_test_grid(labels, [VariableSpec("sex", tuple(sex))], yates=True)
    direct = chi_square_test(contingency(labels, sex, restrict=(0, 1)), yates=True)
    cell = grid[0].cells["0_vs_1"]
    assert cell.statistic == direct.statistic
    assert cell.p_value == direct.p_value


def test_pairwise_grid_needs_two_clusters():
    with pytest.raises(ValueError, match="at least 2"):
        pairwise_test_grid([0, 0], [VariableSpec("x", ("a", "b"))])


# ---------------------------------------------------------------------------
# multinomial logit
# ---------------------------------------------------------------------------


def _counts_data():
    """25 reference, 50 class1, 25 class2; no covariates."""
    labels = [0] * 25 + [1] * 50 + [2] * 25
    return np.zeros((100, 0)), labels


def test_mlr_intercept_only_closed_form():
    X, labels = _counts_data()
    fit = fit_multinomial_logit(X, labels, reference_cluster=0)
    assert fit.converged
    assert fit.feature_names == ["Constant"]
    assert fit.class_labels == [1, 2]
    assert fit.coefficients[0, 0] == pytest.approx(math.log(2.0), abs=1e-8)
    assert fit.coefficients[1, 0] == pytest.approx(0.0, abs=1e-8)
    # closed-form log likelihood and sandwich variance at the MLE
    n = 100
    ll = 25 * math.log(0.25) + 50 * math.log(0.5) + 25 * math.log(0.25)
    assert fit.log_likelihood == pytest.approx(ll, abs=1e-8)
    assert fit.aic == pytest.approx(2 * 2 * 1 - 2 * ll, rel=1e-12)
    assert fit.robust_se[0, 0] == pytest.approx(math.sqrt(1 / 50 + 1 / 25), abs=1e-6)
    assert fit.robust_se[1, 0] == pytest.approx(math.sqrt(1 / 25 + 1 / 25), abs=1e-6)
    assert np.allclose(fit.rrr, np.exp(fit.coefficients))


def _oracle_loglik(X, y, beta):
    """Independent reference log likelihood (reference class in column 0)."""
    eta = np.hstack([np.zeros((X.shape[0], 1)), X @ beta.T])
    return float((eta[np.arange(len(y)), y] - np.log(np.exp(eta).sum(axis=1))).sum())


def test_mlr_gradient_matches_finite_differences():
    rng = np.random.default_rng(23)
    X = rng.normal(size=(50, 3))
    labels = rng.integers(0, 3, size=50).tolist()
    y = np.array([{0: 0, 1: 1, 2: 2}[v] for v in labels])
    h = 1e-6
    for trial in range(4):
        beta = rng.normal(scale=0.5, size=(2, 3))
        grad = mlr_gradient(beta, X, labels, reference_cluster=0)
        for a in range(2):
            for j in range(3):
                up, down = beta.copy(), beta.copy()
                up[a, j] += h
                down[a, j] -= h
                fd = (_oracle_loglik(X, y, up) - _oracle_loglik(X, y, down)) / (2 * h)
                assert abs(grad[a, j] - fd) / max(abs(fd), 1.0) <= 1e-5, (trial, a, j)


def test_mlr_gradient_vanishes_at_optimum():
    rng = np.random.default_rng(29)
    X = rng.normal(size=(120, 2))
    logits = X @ np.array([[0.8, -0.5], [-0.3, 0.6]]).T
    probs = np.exp(np.hstack([np.zeros((120, 1)), logits]))
    probs /= probs.sum(axis=1, keepdims=True)
    labels = [int(rng.choice(3, p=p)) for p in probs]
    fit = fit_multinomial_logit(X, labels, reference_cluster=0)
    grad = mlr_gradient(
        fit.coefficients, np.hstack([X, np.ones((120, 1))]), labels, reference_cluster=0
    )
    assert np.abs(grad).max() <= 1e-8
    assert fit.grad_norm <= 1e-8


def test_mlr_reference_invariance():
    rng = np.random.default_rng(31)
    X = rng.normal(size=(150, 2))
    labels = rng.integers(0, 3, size=150).tolist()
    design = np.hstack([X, np.ones((150, 1))])
    fits = {ref: fit_multinomial_logit(X, labels, reference_cluster=ref) for ref in (0, 1)}
    probs = {}
    for ref, fit in fits.items():
        p = fit.fitted_probabilities(design)
        order = [fit.reference_cluster] + fit.class_labels
        probs[ref] = {cls: p[:, i] for i, cls in enumerate(order)}
    for cls in (0, 1, 2):
        assert np.abs(probs[0][cls] - probs[1][cls]).max() <= 1e-8


def test_mlr_probabilities_well_formed():
    rng = np.random.default_rng(37)
    X = rng.normal(size=(80, 2))
    labels = rng.integers(0, 4, size=80).tolist()
    fit = fit_multinomial_logit(X, labels, reference_cluster=2)
    p = fit.fitted_probabilities(np.hstack([X, np.ones((80, 1))]))
    assert p.shape == (80, 4)
    assert np.abs(p.sum(axis=1) - 1.0).max() <= 1e-12
    assert (p > 0).all()


def test_mlr_p_values_follow_z():
    X, labels = _counts_data()
    fit = fit_multinomial_logit(X, labels, reference_cluster=0)
    for i in range(2):
        expected = math.erfc(abs(fit.z_values[i, 0]) / math.sqrt(2))
        assert fit.p_values[i, 0] == pytest.approx(expected, rel=1e-12)


def test_mlr_rank_deficiency_names_culprit():
    rng = np.random.default_rng(41)
    x = rng.normal(size=(60, 1))
    X = np.hstack([x, 2 * x])
    labels = rng.integers(0, 2, size=60).tolist()
    with pytest.raises(ValueError, match="doubled"):
        fit_multinomial_logit(X, labels, 0, feature_names=["base", "doubled"])


def test_mlr_separation_detected():
    x = np.array([[0.0]] * 20 + [[1.0]] * 20)
    labels = [0] * 20 + [1] * 20
    with pytest.raises(RuntimeError, match="separation"):
        fit_multinomial_logit(x, labels, reference_cluster=0)


def test_mlr_nonconvergence_reported():
    rng = np.random.default_rng(43)
    X = rng.normal(size=(60, 2))
    labels = rng.integers(0, 3, size=60).tolist()
    with pytest.raises(RuntimeError, match="did not converge"):
        fit_multinomial_logit(X, labels, reference_cluster=0, max_iter=1)


def test_mlr_input_validation():
    with pytest.raises(ValueError, match="reference cluster"):
        fit_multinomial_logit(np.zeros((4, 0)), [1, 1, 2, 2], reference_cluster=0)
    with pytest.raises(ValueError, match="feature_names"):
        fit_multinomial_logit(np.zeros((4, 2)), [0, 0, 1, 1], 0, feature_names=["only_one"])
    with pytest.raises(ValueError, match="2 classes"):
        fit_multinomial_logit(np.zeros((4, 0)), [0, 0, 0, 0], reference_cluster=0)


# ---------------------------------------------------------------------------
# categorical expansion
# ---------------------------------------------------------------------------


def test_expand_categorical_drops_reference():
    values = ["a", "b", "c", "b"]
    cols, names, used = expand_categorical(values, reference="b", prefix="Var ")
    assert used == "b"
    assert names == ["Var a", "Var c"]
    assert cols.tolist() == [[1.0, 0.0], [0.0, 0.0], [0.0, 1.0], [0.0, 0.0]]


def test_expand_categorical_absent_reference_falls_back(caplog):
    with caplog.at_level("WARNING"):
        cols, names, used = expand_categorical(["x", "y"], reference="zz")
    assert used == "x"
    assert names == ["y"]
    assert any("absent" in r.message for r in caplog.records)
