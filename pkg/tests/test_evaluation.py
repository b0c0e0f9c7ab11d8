import numpy as np
import pytest

from xbt import evaluation, kernels
from xbt.evaluation import (
    build_report,
    eq2_criterion,
    image_to_text_case,
    recall_at_k,
    report_csv,
    strict_constraint_fraction,
    text_to_image_case,
    zero_shot_classify,
)
from gradcheck import normalized_rows


class TestRecall:
    def test_self_retrieval_is_perfect(self):
        rng = np.random.default_rng(0)
        g = normalized_rows(rng, 20, 8, dtype=np.float32)
        case = text_to_image_case("self", g, g, np.arange(20))
        assert recall_at_k(case, [1])[1] == 100.0

    def test_constructed_ranking_matches_oracle(self):
        # 3 captions, 2 images, similarities chosen by hand
        images = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float64)
        captions = np.array([
            [0.9, np.sqrt(1 - 0.81)],   # closest to image 0
            [0.1, np.sqrt(1 - 0.01)],   # closest to image 1
            [0.8, -np.sqrt(1 - 0.64)],  # closest to image 0
        ])
        pair_of = np.array([0, 1, 1])  # caption 2 pairs with image 1 but ranks image 0 first
        case = text_to_image_case("hand", captions, images, pair_of)
        got = recall_at_k(case, [1, 2])
        assert got[1] == pytest.approx(100.0 * 2 / 3)
        assert got[2] == 100.0

    def test_image_to_text_any_caption_hits(self):
        images = np.eye(2, dtype=np.float64)
        captions = np.array([
            [0.90, np.sqrt(1 - 0.81)],   # image 0's, ranks second for image 0
            [0.95, np.sqrt(1 - 0.9025)],  # image 0's, ranks first for image 0
            [0.10, np.sqrt(1 - 0.01)],   # image 1's, ranks first for image 1
        ])
        pair_of = np.array([0, 0, 1])  # image 0 owns captions {0,1}; image 1 owns {2}
        case = image_to_text_case("i2t", images, captions, pair_of)
        # at K=1 image 0 is a hit through caption 1 alone: any owned caption counts
        assert recall_at_k(case, [1])[1] == 100.0

    def test_monotone_in_k(self):
        rng = np.random.default_rng(1)
        res_q = normalized_rows(rng, 50, 6, dtype=np.float32)
        res_g = normalized_rows(rng, 60, 6, dtype=np.float32)
        case = text_to_image_case("m", res_q, res_g, rng.integers(0, 60, size=50))
        got = recall_at_k(case, [1, 5, 10, 50])
        vals = [got[k] for k in (1, 5, 10, 50)]
        assert vals == sorted(vals)

    def test_gallery_permutation_invariance(self):
        rng = np.random.default_rng(2)
        q = normalized_rows(rng, 30, 8, dtype=np.float32)
        g = normalized_rows(rng, 40, 8, dtype=np.float32)
        pair_of = rng.integers(0, 40, size=30)
        base = recall_at_k(text_to_image_case("a", q, g, pair_of), [1, 5, 10])
        perm = rng.permutation(40)
        inv = np.argsort(perm)
        permuted = recall_at_k(text_to_image_case("b", q, g[perm], inv[pair_of]), [1, 5, 10])
        assert base == permuted

    def test_rotation_invariance(self):
        rng = np.random.default_rng(3)
        q = normalized_rows(rng, 25, 10)
        g = normalized_rows(rng, 35, 10)
        pair_of = rng.integers(0, 35, size=25)
        rot, _ = np.linalg.qr(rng.standard_normal((10, 10)))
        base = recall_at_k(text_to_image_case("a", q, g, pair_of), [1, 5])
        rotated = recall_at_k(text_to_image_case("b", q @ rot, g @ rot, pair_of), [1, 5])
        assert base == rotated

    def test_validation(self):
        q = np.zeros((2, 3), dtype=np.float32)
        case = text_to_image_case("v", q, q, np.array([0, 1]))
        with pytest.raises(ValueError, match="sorted"):
            recall_at_k(case, [5, 1])
        with pytest.raises(ValueError, match="exceeds gallery"):
            recall_at_k(case, [3])
        bad = text_to_image_case("w", q, q, np.array([0, 1]))
        bad.positives[0] = np.array([7])
        with pytest.raises(ValueError, match="out of range"):
            recall_at_k(bad, [1])


class TestStrictFraction:
    def test_identical_models_all_one(self):
        rng = np.random.default_rng(4)
        w = normalized_rows(rng, 30, 8, dtype=np.float32)
        v = normalized_rows(rng, 10, 8, dtype=np.float32)
        pair_of = rng.integers(0, 10, size=30)
        out = strict_constraint_fraction(w, v, w, v, pair_of)
        assert out == {"text_paired": 1.0, "text_unpaired": 1.0,
                       "image_paired": 1.0, "image_unpaired": 1.0}

    def test_hand_case_matches_enumeration(self):
        # 2 captions, 2 images; new text 0 moved closer to its image, new
        # text 1 moved farther from everything
        w_old = np.array([[1.0, 0.0], [0.0, 1.0]])
        v_old = np.array([[np.cos(0.3), np.sin(0.3)], [np.sin(0.3), np.cos(0.3)]])
        w_new = np.array([[np.cos(0.1), np.sin(0.1)], [np.sin(0.4), np.cos(0.4)]])
        v_new = v_old.copy()
        pair_of = np.array([0, 1])
        got = strict_constraint_fraction(w_new, v_new, w_old, v_old, pair_of)

        def dist(a, b):
            return 1.0 - float(np.dot(a, b))

        text_paired = np.mean([dist(w_new[i], v_old[pair_of[i]]) <= dist(w_old[i], v_old[pair_of[i]])
                               for i in range(2)])
        unpaired = [(i, j) for i in range(2) for j in range(2) if pair_of[i] != j]
        text_unpaired = np.mean([dist(w_new[i], v_old[j]) >= dist(w_old[i], v_old[j])
                                 for i, j in unpaired])
        assert got["text_paired"] == pytest.approx(text_paired)
        assert got["text_unpaired"] == pytest.approx(text_unpaired)
        assert got["image_paired"] == 1.0  # v_new is v_old
        assert got["image_unpaired"] == 1.0

    def test_fractions_in_unit_interval(self):
        rng = np.random.default_rng(5)
        w_new = normalized_rows(rng, 40, 6, dtype=np.float32)
        w_old = normalized_rows(rng, 40, 6, dtype=np.float32)
        v_new = normalized_rows(rng, 15, 6, dtype=np.float32)
        v_old = normalized_rows(rng, 15, 6, dtype=np.float32)
        out = strict_constraint_fraction(w_new, v_new, w_old, v_old,
                                         rng.integers(0, 15, size=40))
        assert all(0.0 <= f <= 1.0 for f in out.values())

    def test_subsample_within_three_standard_errors(self):
        rng = np.random.default_rng(6)
        w_new = normalized_rows(rng, 300, 8, dtype=np.float32)
        w_old = normalized_rows(rng, 300, 8, dtype=np.float32)
        v_new = normalized_rows(rng, 100, 8, dtype=np.float32)
        v_old = normalized_rows(rng, 100, 8, dtype=np.float32)
        pair_of = rng.integers(0, 100, size=300)
        full = strict_constraint_fraction(w_new, v_new, w_old, v_old, pair_of,
                                          max_pairs=10**9)
        sub = strict_constraint_fraction(w_new, v_new, w_old, v_old, pair_of,
                                         max_pairs=8000, seed=0)
        for fam in ("text_unpaired", "image_unpaired"):
            p = full[fam]
            se = max(np.sqrt(p * (1 - p) / 8000), 1e-3)
            assert abs(sub[fam] - p) <= 3 * se
        assert sub["text_paired"] == full["text_paired"]  # paired stays exact

    def test_misaligned_inputs(self):
        with pytest.raises(ValueError, match="misaligned"):
            strict_constraint_fraction(np.zeros((3, 4)), np.zeros((2, 4)),
                                       np.zeros((3, 4)), np.zeros((2, 4)), np.array([0, 1]))


class TestEq2:
    def test_reported_improvement_cases(self):
        assert eq2_criterion({1: 48.02}, {1: 45.14}) == {1: True}
        assert eq2_criterion({1: 63.76}, {1: 71.38}) == {1: False}

    def test_equal_recall_is_false(self):
        assert eq2_criterion({1: 50.0, 5: 80.0}, {1: 50.0, 5: 79.0}) == {1: False, 5: True}

    def test_mismatched_k_lists(self):
        with pytest.raises(ValueError):
            eq2_criterion({1: 1.0}, {5: 1.0})


class TestZeroShot:
    def test_perfect_prototypes(self):
        rng = np.random.default_rng(7)
        classes = normalized_rows(rng, 4, 8, dtype=np.float32)
        labels = np.array([0, 1, 2, 3, 2, 1])
        images = classes[labels]
        assert zero_shot_classify(images, classes, labels) == 100.0

    def test_matches_argmax_oracle(self):
        rng = np.random.default_rng(8)
        classes = normalized_rows(rng, 4, 8, dtype=np.float32)
        images = normalized_rows(rng, 20, 8, dtype=np.float32)
        labels = rng.integers(0, 4, size=20)
        got = zero_shot_classify(images, classes, labels)
        sims = images @ classes.T
        pred = np.array([int(np.argmax(s)) for s in sims])
        assert got == pytest.approx(100.0 * np.mean(pred == labels))

    def test_tie_breaks_to_lower_class(self):
        classes = np.eye(2, dtype=np.float32)
        img = kernels.l2_normalize_rows(np.ones((1, 2), dtype=np.float32))
        assert zero_shot_classify(img, classes, np.array([0])) == 100.0
        assert zero_shot_classify(img, classes, np.array([1])) == 0.0

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="label"):
            zero_shot_classify(np.zeros((1, 2), dtype=np.float32),
                               np.zeros((2, 2), dtype=np.float32), np.array([5]))


class TestReport:
    def _random_inputs(self, seed=9):
        rng = np.random.default_rng(seed)
        n_img, n_cap, d_old, d_new = 12, 24, 6, 8
        pair_of = np.repeat(np.arange(n_img), 2)
        return dict(
            w_old=normalized_rows(rng, n_cap, d_old, dtype=np.float32),
            v_old=normalized_rows(rng, n_img, d_old, dtype=np.float32),
            w_new_raw=normalized_rows(rng, n_cap, d_new, dtype=np.float32),
            v_new_raw=normalized_rows(rng, n_img, d_new, dtype=np.float32),
            w_bar=normalized_rows(rng, n_cap, d_old, dtype=np.float32),
            v_bar=normalized_rows(rng, n_img, d_old, dtype=np.float32),
            pair_of=pair_of,
        )

    def test_structure_and_degenerate_consistency(self):
        args = self._random_inputs()
        args["w_bar"] = args["w_old"]
        args["v_bar"] = args["v_old"]
        rep = build_report(ks=[1, 5], **args)
        assert set(rep.recalls) == {
            "w_old/v_old", "v_old/w_old", "w_new/v_new", "v_new/w_new",
            "wbar_new/v_old", "vbar_new/w_old", "wbar_new/vbar_new", "vbar_new/wbar_new"}
        # identical new and old models: strict fractions 1, eq2 false everywhere
        assert all(f == 1.0 for f in rep.strict_fraction.values())
        assert not any(v for ver in rep.eq2_verdicts.values() for v in ver.values())

    def test_json_and_csv_rendering(self):
        rep = build_report(ks=[1, 5], **self._random_inputs())
        doc = rep.to_json_dict()
        assert doc["schema_version"] == 1
        assert "wbar_new/v_old" in doc["recalls"]
        csv = report_csv(rep, extra={"note": "x"})
        lines = csv.strip().split("\n")
        assert lines[0].startswith("case")
        assert any(line.startswith("eq2:text_query") for line in lines)
        assert any(line.startswith("strict:text_paired") for line in lines)
