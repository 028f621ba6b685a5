"""Least-squares alignment: recovery, optimality, oracles, serialization."""

import logging

import numpy as np
import pytest

from conftest import make_space, normal_equations, paired_spaces
from entkit.alignment import (
    AlignmentMap,
    alignment_objective,
    apply_alignment,
    derive_entity_space,
    fit_alignment,
    load_alignment,
    save_alignment,
)
from entkit.embeddings import SpaceKind, shared_vocabulary
from entkit.errors import DataError


def fit_pair(seed, d_src=8, d_tgt=8, n=24, noise=0.0, n_entities=0):
    wiki, wp, w_star = paired_spaces(seed, d_src, d_tgt, n, noise, n_entities)
    pairs = shared_vocabulary(wp, wiki)
    return wiki, wp, pairs, w_star, fit_alignment(wiki, wp, pairs)


class TestFit:
    def test_noiseless_recovery_is_exact_to_solver_precision(self):
        for seed in range(10):
            _, _, _, w_star, amap = fit_pair(seed, d_src=8, d_tgt=6, n=21)
            assert np.max(np.abs(amap.w - w_star)) < 1e-10
            assert amap.residual < 1e-20
            assert not amap.rank_deficient
            assert amap.shared_count == 21

    def test_noisy_solution_matches_normal_equations(self):
        for seed in range(10):
            wiki, wp, pairs, _, amap = fit_pair(seed, n=40, noise=0.05)
            x = wiki.matrix[[p.wiki_id for p in pairs]].astype(np.float64)
            y = wp.matrix[[p.wp_id for p in pairs]].astype(np.float64)
            np.testing.assert_allclose(
                amap.w, normal_equations(x, y), rtol=0.0, atol=1e-8
            )

    def test_residual_is_the_objective_at_the_solution(self):
        wiki, wp, pairs, _, amap = fit_pair(3, n=30, noise=0.1)
        direct = alignment_objective(amap.w, wiki, wp, pairs)
        assert amap.residual == pytest.approx(direct, abs=1e-12)
        x = wiki.matrix[[p.wiki_id for p in pairs]].astype(np.float64)
        y = wp.matrix[[p.wp_id for p in pairs]].astype(np.float64)
        assert amap.residual == pytest.approx(
            float(np.sum((x @ amap.w.T - y) ** 2)), abs=1e-12
        )

    def test_fitted_objective_beats_perturbations(self):
        rng = np.random.default_rng(11)
        for seed in range(5):
            wiki, wp, pairs, _, amap = fit_pair(seed, n=30, noise=0.1)
            base = alignment_objective(amap.w, wiki, wp, pairs)
            for _ in range(100):
                delta = 1e-3 * rng.standard_normal(amap.w.shape)
                assert base <= alignment_objective(
                    amap.w + delta, wiki, wp, pairs
                ) + 1e-12

    def test_rectangular_dimensions(self):
        _, _, _, w_star, amap = fit_pair(5, d_src=6, d_tgt=10, n=20)
        assert amap.w.shape == (10, 6)
        assert amap.d_tgt == 10 and amap.d_src == 6
        assert np.max(np.abs(amap.w - w_star)) < 1e-10

    def test_rank_deficiency_flags_and_takes_min_norm(self, caplog):
        # Source vectors confined to a 3-dimensional slice of a 5-dim space.
        rng = np.random.default_rng(0)
        basis = rng.standard_normal((3, 5))
        coeff = rng.standard_normal((12, 3))
        x = coeff @ basis
        y = rng.standard_normal((12, 4))
        wiki = make_space(
            [f"w{i}" for i in range(12)], x, SpaceKind.WORD_AND_ENTITY
        )
        wp = make_space([f"w{i}" for i in range(12)], y, SpaceKind.WORDPIECE)
        pairs = shared_vocabulary(wp, wiki)
        with caplog.at_level(logging.WARNING):
            amap = fit_alignment(wiki, wp, pairs)
        assert amap.rank_deficient
        assert any("minimum-norm" in r.message for r in caplog.records)
        np.testing.assert_allclose(amap.w, (np.linalg.pinv(x) @ y).T, atol=1e-8)

    def test_l2_normalize_equals_fitting_unit_rows(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((20, 4)) * rng.uniform(0.1, 10, size=(20, 1))
        y = rng.standard_normal((20, 4)) * rng.uniform(0.1, 10, size=(20, 1))
        words = [f"w{i}" for i in range(20)]
        wiki = make_space(words, x, SpaceKind.WORD_AND_ENTITY)
        wp = make_space(words, y, SpaceKind.WORDPIECE)
        pairs = shared_vocabulary(wp, wiki)
        amap = fit_alignment(wiki, wp, pairs, l2_normalize=True)

        def unit(m):
            return m / np.linalg.norm(m, axis=1, keepdims=True)

        xu, yu = unit(x), unit(y)
        np.testing.assert_allclose(amap.w, normal_equations(xu, yu), atol=1e-8)
        assert amap.residual == pytest.approx(
            float(np.sum((xu @ amap.w.T - yu) ** 2)), abs=1e-10
        )

    def test_zero_pairs_rejected(self):
        wiki, wp, _ = paired_spaces(0, 4, 4, 5)
        with pytest.raises(ValueError, match="zero shared symbols"):
            fit_alignment(wiki, wp, [])


class TestApplyAndDerive:
    def test_apply_is_matrix_vector_product(self):
        amap = AlignmentMap(np.array([[2.0, 0.0], [1.0, 3.0]]), 4, 0.0)
        np.testing.assert_array_equal(
            apply_alignment(amap, np.array([1.0, 2.0])), [2.0, 7.0]
        )

    def test_apply_rejects_wrong_shape(self):
        amap = AlignmentMap(np.zeros((2, 3)), 4, 0.0)
        with pytest.raises(ValueError, match="expects"):
            apply_alignment(amap, np.zeros(2))

    def test_derive_entity_space_maps_only_entities(self):
        wiki, wp, _, w_star, amap = fit_pair(9, n=20, n_entities=3)
        derived = derive_entity_space(amap, wiki)
        assert derived.vocab.symbols == tuple(wiki.entity_symbols())
        assert derived.dim == amap.d_tgt
        for sym in derived.vocab.symbols:
            np.testing.assert_allclose(
                derived.row(sym),
                amap.w @ wiki.row(sym).astype(np.float64),
                atol=1e-12,
            )

    def test_derive_rejects_wordpiece_space(self):
        wiki, wp, _, _, amap = fit_pair(1)
        with pytest.raises(ValueError, match="word-and-entity"):
            derive_entity_space(amap, wp)

    def test_derive_rejects_dimension_mismatch(self):
        wiki, _, _ = paired_spaces(0, 6, 6, 15, n_entities=1)
        amap = AlignmentMap(np.zeros((6, 4)), 1, 0.0)
        with pytest.raises(ValueError, match="does not match"):
            derive_entity_space(amap, wiki)


class TestSerialization:
    def test_round_trip_is_bit_exact(self, tmp_path):
        _, _, _, _, amap = fit_pair(4, n=30, noise=0.3)
        f = tmp_path / "map.tsv"
        save_alignment(amap, f)
        again = load_alignment(f)
        np.testing.assert_array_equal(again.w, amap.w)
        assert again.residual == amap.residual
        assert again.shared_count == amap.shared_count
        assert again.rank_deficient is False

    def test_header_layout(self, tmp_path):
        amap = AlignmentMap(np.array([[1.5, -0.25]]), 7, 0.125)
        f = tmp_path / "map.tsv"
        save_alignment(amap, f)
        lines = f.read_text().splitlines()
        assert lines[0] == "1 2 0.125 7"
        assert lines[1] == "1.5 -0.25"

    def test_load_errors(self, tmp_path):
        f = tmp_path / "bad.tsv"
        f.write_text("1 2 0.0\n1.0 2.0\n")
        with pytest.raises(DataError, match="malformed alignment header"):
            load_alignment(f)
        f.write_text("2 2 0.0 4\n1.0 2.0\n")
        with pytest.raises(DataError, match="declares 2 rows"):
            load_alignment(f)
        f.write_text("1 2 0.0 4\n1.0 x\n")
        with pytest.raises(DataError, match="line 2: unparseable"):
            load_alignment(f)
        f.write_text("1 2 0.0 4\n1.0\n")
        with pytest.raises(DataError, match="expected 2 values"):
            load_alignment(f)
        f.write_text("")
        with pytest.raises(DataError, match="empty alignment file"):
            load_alignment(f)
