import logging

import numpy as np
import pandas as pd
import pytest
from scipy import io as spio

from mvmrp.data import AltCovariateTable, expand_augmented
from mvmrp.design import build_designs, check_rank, dump_designs, encode_rows, learn_encoding, response_vector
from mvmrp.errors import DesignError
from mvmrp.formula import parse_formula


@pytest.fixture
def augmented(survey, questions, copart_frame):
    table = AltCovariateTable(copart_frame, keys=("state",), question="party", columns=("lag_copart",))
    return expand_augmented(survey, questions, [table])


class TestRandomEffectBlocks:
    """Layout of Z_j."""

    def test_random_intercept_one_hot(self):
        frame = pd.DataFrame({"y": np.zeros(6), "g": ["a", "b", "c", "a", "b", "c"]})
        designs = build_designs(parse_formula("y ~ 0 + (1 | g)"), frame)
        Z = designs.re_blocks[0].Z.toarray()
        assert Z.shape == (6, 3)
        np.testing.assert_array_equal(Z, np.tile(np.eye(3), (2, 1)))
        assert designs.p == 0

    def test_slope_in_policy_column(self, augmented):
        frame = augmented.frame.assign(demvote=np.linspace(0.2, 0.8, len(augmented.frame)))
        block = build_designs(parse_formula("response ~ (0 + demvote | policy)"), frame).re_blocks[0]
        assert block.level_names == ["oppose", "support"]
        Z = block.Z.toarray()
        columns = (frame["policy"].astype(str) == "support").to_numpy().astype(int)
        np.testing.assert_allclose(Z[np.arange(len(frame)), columns], frame["demvote"].to_numpy())
        np.testing.assert_array_equal(Z[np.arange(len(frame)), 1 - columns], 0.0)

    def test_level_major_slots(self):
        frame = pd.DataFrame({"y": np.zeros(4), "g": ["a", "b", "b", "a"], "x": [1.0, 2.0, 3.0, 4.0]})
        Z = build_designs(parse_formula("y ~ (1 + x | g)"), frame).re_blocks[0].Z.toarray()
        expected = np.array([
            [1.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 2.0],
            [0.0, 0.0, 1.0, 3.0],
            [1.0, 4.0, 0.0, 0.0],
        ])
        np.testing.assert_array_equal(Z, expected)

    def test_interaction_levels(self, augmented):
        block = build_designs(parse_formula("response ~ (1 | race : party)"), augmented).re_blocks[0]
        assert block.g == 6
        assert "w:D" in block.level_names

    def test_column_counts(self, augmented):
        frame = augmented.frame
        ast = parse_formula("response ~ (1 | state) + (1 + income | race : choice) + (0 + lag_copart | party)")
        designs = build_designs(ast, frame)
        counts = sorted(block.Z.shape[1] for block in designs.re_blocks)
        assert counts == sorted([3 * 1, 2 * 6 * 2, 3 * 1])
        for block in designs.re_blocks:
            assert (np.diff(block.Z.indptr) <= block.d).all()

    def test_single_level_group_warns(self, caplog):
        frame = pd.DataFrame({"y": [0.0, 1.0], "g": ["a", "a"]})
        with caplog.at_level(logging.WARNING):
            build_designs(parse_formula("y ~ (1 | g)"), frame)
        assert "single level" in caplog.text

    def test_categorical_slot_covariate(self, augmented):
        with pytest.raises(DesignError, match="must be numeric"):
            build_designs(parse_formula("response ~ (0 + race | state)"), augmented)


class TestFixedBlocks:
    """Coding of X and the v_fe blocks."""

    def test_effects_coding(self, augmented):
        designs = build_designs(parse_formula("response ~ choice"), augmented)
        assert designs.encoding.fixed_names[0] == "(Intercept)"
        assert designs.p == 6
        X = designs.X.toarray()
        first_case = X[:6, 1:]
        np.testing.assert_array_equal(first_case[-1], -np.ones(5))
        np.testing.assert_array_equal(first_case.sum(axis=0), np.zeros(5))

    def test_numeric_as_is(self, augmented):
        designs = build_designs(parse_formula("response ~ 0 + lag_copart"), augmented)
        np.testing.assert_array_equal(designs.X.toarray()[:, 0], augmented.frame["lag_copart"].to_numpy())

    def test_standardize(self, augmented):
        designs = build_designs(parse_formula("response ~ 0 + income"), augmented, standardize=True)
        column = designs.X.toarray()[:, 0]
        assert designs.encoding.fixed_columns[0].scale == pytest.approx(augmented.frame["income"].std(ddof=0))
        assert column.std() == pytest.approx(1.0)

    def test_single_level_fixed_term(self):
        frame = pd.DataFrame({"y": [0.0, 1.0], "g": ["a", "a"]})
        with pytest.raises(DesignError, match="single level"):
            build_designs(parse_formula("y ~ g"), frame)

    def test_unknown_variable(self, augmented):
        with pytest.raises(DesignError, match="unknown variable"):
            build_designs(parse_formula("response ~ nothing"), augmented)

    def test_fe_block(self, augmented):
        designs = build_designs(parse_formula("response ~ choice + v_fe(case_id)"), augmented)
        block = designs.fe_blocks[0]
        F = block.F.toarray()
        assert F.shape == (len(augmented.frame), augmented.n_cases)
        np.testing.assert_array_equal(F.sum(axis=1), 1.0)
        np.testing.assert_array_equal(block.constraint, np.ones(block.size))

    def test_response_vector(self, augmented):
        y = response_vector(parse_formula("response ~ choice"), augmented)
        assert y.sum() == augmented.n_cases


class TestLinearPredictor:
    """Block-wise predictor against brute-force row evaluation."""

    def test_matches_brute_force(self, augmented):
        frame = augmented.frame
        ast = parse_formula("response ~ choice + lag_copart + v_fe(case_id) + (1 + income | state) + (1 | race : choice)")
        designs = build_designs(ast, frame)
        rng = np.random.default_rng(5)
        beta = rng.normal(size=designs.p)
        alphas = [rng.normal(size=(b.g, b.d)) for b in designs.re_blocks]
        gammas = [rng.normal(size=b.size) for b in designs.fe_blocks]
        eta = designs.linear_predictor(beta, alphas, gammas)

        X = designs.X.toarray()
        for i in range(0, len(frame), 37):
            value = X[i] @ beta
            for block, alpha in zip(designs.re_blocks, alphas):
                value += block.basis[i] @ alpha[block.levels[i]]
            for block, gamma in zip(designs.fe_blocks, gammas):
                value += gamma[block.index[i]]
            assert eta[i] == pytest.approx(value, abs=1e-12)

    def test_encode_unseen_levels(self, augmented, cells_frame):
        ast = parse_formula("response ~ choice + (1 | state)")
        encoding = learn_encoding(ast, augmented)
        rows = augmented.frame.iloc[:6].copy()
        rows["state"] = "ZZ"
        with pytest.raises(DesignError, match="unseen level"):
            encode_rows(encoding, rows)
        designs = encode_rows(encoding, rows, allow_unseen=True)
        assert designs.re_blocks[0].Z.nnz == 0
        assert (designs.re_blocks[0].levels == -1).all()

    def test_encode_unseen_fixed_level(self, augmented):
        encoding = learn_encoding(parse_formula("response ~ race"), augmented)
        rows = augmented.frame.iloc[:2].copy()
        rows["race"] = "other"
        with pytest.raises(DesignError, match="unseen level 'other'"):
            encode_rows(encoding, rows, allow_unseen=True)


class TestCheckRank:
    """Advisory rank report."""

    def test_identity(self, caplog):
        with caplog.at_level(logging.WARNING):
            report = check_rank(np.eye(3))
        assert report.full_rank
        assert report.rank == 3
        assert caplog.text == ""

    def test_duplicated_column(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(2, 10))
        report = check_rank(np.column_stack([a, b, a]), ["a", "b", "a_copy"])
        assert report.rank == 2
        assert not report.full_rank
        message = report.message()
        assert "a ~" in message or "~ a" in message
        assert "a_copy" in message

    def test_main_fixed_block_full_rank(self, augmented):
        designs = build_designs(parse_formula("response ~ v_fe(case_id) + choice + lag_copart"), augmented)
        report = check_rank(designs.X, designs.encoding.fixed_names)
        assert report.full_rank
        assert report.p == 7


def test_dump_designs(temp_dir, augmented):
    designs = build_designs(parse_formula("response ~ choice + v_fe(case_id) + (1 | state)"), augmented)
    paths = dump_designs(designs, temp_dir / "dump")
    assert [p.name for p in paths] == ["X.mtx", "Z_0.mtx", "F_0.mtx", "columns.csv"]
    Z = spio.mmread(str(paths[1])).toarray()
    np.testing.assert_array_equal(Z, designs.re_blocks[0].Z.toarray())

    columns = pd.read_csv(paths[3])
    assert list(columns.columns) == ["block", "file", "column", "name"]
    assert columns.loc[columns["file"] == "X.mtx", "name"].tolist() == designs.encoding.fixed_names
    z_names = columns.loc[columns["file"] == "Z_0.mtx", "name"].tolist()
    assert z_names == ["AA/(Intercept)", "BB/(Intercept)", "CC/(Intercept)"]
    assert (columns["file"] == "F_0.mtx").sum() == designs.fe_blocks[0].size
