import numpy as np
import pytest

from med2vec.corpus import (
    Corpus,
    CorpusFormatError,
    GrouperMap,
    PatientRecord,
    SynthConfig,
    Visit,
    Vocabulary,
    corpus_from_sequences,
    encode_demographics,
    generate_synthetic,
    group_targets,
    load_corpus,
    load_grouper,
    load_labels,
    save_corpus,
    save_grouper,
    save_labels,
    split_corpus,
    split_corpus_with_labels,
    to_multi_hot,
)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestTypes:
    def test_vocabulary_bijection(self):
        vocab = Vocabulary(("a", "b", "c"))
        assert len(vocab) == 3
        assert vocab.index("b") == 1
        assert vocab.token(2) == "c"
        assert "a" in vocab and "z" not in vocab

    def test_vocabulary_rejects_duplicates(self):
        with pytest.raises(ValueError, match="duplicate"):
            Vocabulary(("a", "a"))

    def test_vocabulary_hash_depends_on_order(self):
        assert Vocabulary(("a", "b")).content_hash() != Vocabulary(("b", "a")).content_hash()

    def test_visit_deduplicates_and_sorts(self):
        assert Visit((2, 0, 2)).codes == (0, 2)

    def test_visit_rejects_empty(self):
        with pytest.raises(ValueError):
            Visit(())

    def test_visit_rejects_nonfinite_demographics(self):
        with pytest.raises(ValueError):
            Visit((0,), (float("nan"),))

    def test_patient_needs_two_visits(self):
        with pytest.raises(ValueError):
            PatientRecord((Visit((0,)),))

    def test_corpus_checks_indices(self):
        patient = PatientRecord((Visit((0,)), Visit((5,))))
        with pytest.raises(ValueError, match="out of range"):
            Corpus((patient,), Vocabulary(("a", "b")))

    def test_corpus_total_visits(self):
        patients = (
            PatientRecord((Visit((0,)), Visit((1,)), Visit((0, 1)))),
            PatientRecord((Visit((1,)), Visit((0,)))),
        )
        corpus = Corpus(patients, Vocabulary(("a", "b")))
        assert corpus.total_visits == 5

    def test_grouper_identity(self):
        ident = GrouperMap.identity(3)
        assert ident.n_groups == 3
        assert list(ident.labels(3)) == [0, 1, 2]

    def test_grouper_rejects_out_of_range_groups(self):
        with pytest.raises(ValueError):
            GrouperMap({0: 5}, 2)


class TestLoadCorpus:
    def test_counts_patients_and_visits(self, tmp_path):
        path = write(tmp_path / "v.txt", "a b\nb c\nc\n\nd e\ne\n")
        corpus = load_corpus(path)
        assert corpus.n_patients == 2
        assert corpus.total_visits == 5

    def test_single_visit_patient_dropped_with_warning(self, tmp_path):
        path = write(tmp_path / "v.txt", "a\n\nb c\nc d\n")
        with pytest.warns(UserWarning, match="dropped 1 patient"):
            corpus = load_corpus(path)
        assert corpus.n_patients == 1
        assert "a" not in corpus.vocabulary

    def test_duplicate_tokens_collapse(self, tmp_path):
        path = write(tmp_path / "v.txt", "d1 d1 d2\nd2\n")
        corpus = load_corpus(path)
        assert len(corpus.patients[0].visits[0].codes) == 2

    def test_comments_and_blank_runs_ignored(self, tmp_path):
        path = write(tmp_path / "v.txt", "# header\na b\nb\n\n\n# note\nc d\nd\n")
        corpus = load_corpus(path)
        assert corpus.n_patients == 2

    def test_vocabulary_first_appearance_order(self, tmp_path):
        path = write(tmp_path / "v.txt", "b a\na c\n")
        corpus = load_corpus(path)
        assert corpus.vocabulary.tokens == ("b", "a", "c")

    def test_empty_after_filtering_raises(self, tmp_path):
        path = write(tmp_path / "v.txt", "a\n\nb\n")
        with pytest.warns(UserWarning):
            with pytest.raises(CorpusFormatError, match="empty corpus"):
                load_corpus(path)

    def test_demographics_attached(self, tmp_path):
        visits = write(tmp_path / "v.txt", "a\nb\n\nc\nd\n")
        demo = write(tmp_path / "d.csv", "0.5,1\n0.5,1\n\n0.25,0\n0.25,0\n")
        corpus = load_corpus(visits, demo)
        assert corpus.demo_dim == 2
        assert corpus.patients[1].visits[0].demographics == (0.25, 0.0)

    def test_malformed_demographics_names_line(self, tmp_path):
        visits = write(tmp_path / "v.txt", "a\nb\n")
        demo = write(tmp_path / "d.csv", "0.5\nbad\n")
        with pytest.raises(CorpusFormatError, match="d.csv:2"):
            load_corpus(visits, demo)

    def test_demographics_row_count_mismatch(self, tmp_path):
        visits = write(tmp_path / "v.txt", "a\nb\nc\n")
        demo = write(tmp_path / "d.csv", "0.5\n0.5\n")
        with pytest.raises(CorpusFormatError, match="mismatch"):
            load_corpus(visits, demo)

    def test_inconsistent_demo_width(self, tmp_path):
        visits = write(tmp_path / "v.txt", "a\nb\n")
        demo = write(tmp_path / "d.csv", "0.5\n0.5,1\n")
        with pytest.raises(CorpusFormatError, match="width"):
            load_corpus(visits, demo)


class TestRoundTrip:
    def test_save_load_identity(self, tmp_path):
        corpus, _, _ = generate_synthetic(SynthConfig(n_patients=20, n_codes=30, seed=5))
        visits, demo = tmp_path / "v.txt", tmp_path / "d.csv"
        save_corpus(corpus, visits, demo)
        assert load_corpus(visits, demo) == corpus

    def test_save_load_without_demographics(self, tmp_path):
        corpus = corpus_from_sequences([[["a", "b"], ["b"]], [["c"], ["a", "c"]]])
        path = tmp_path / "v.txt"
        save_corpus(corpus, path)
        assert load_corpus(path) == corpus

    def test_labels_round_trip(self, tmp_path):
        corpus, _, labels = generate_synthetic(SynthConfig(n_patients=15, seed=2))
        save_corpus(corpus, tmp_path / "v.txt")
        save_labels(labels, corpus, tmp_path / "l.txt")
        loaded = load_labels(tmp_path / "l.txt", corpus)
        assert np.array_equal(loaded, labels)

    def test_labels_reject_non_binary(self, tmp_path):
        corpus = corpus_from_sequences([[["a"], ["b"]]])
        path = write(tmp_path / "l.txt", "0\n2\n")
        with pytest.raises(CorpusFormatError, match="l.txt:2"):
            load_labels(path, corpus)

    def test_labels_shape_mismatch(self, tmp_path):
        corpus = corpus_from_sequences([[["a"], ["b"]]])
        path = write(tmp_path / "l.txt", "0\n1\n1\n")
        with pytest.raises(CorpusFormatError, match="mismatch"):
            load_labels(path, corpus)

    def test_grouper_round_trip_preserves_partition(self, tmp_path):
        corpus, grouper, _ = generate_synthetic(SynthConfig(n_patients=20, seed=9))
        path = tmp_path / "g.tsv"
        save_grouper(grouper, corpus.vocabulary, path)
        loaded = load_grouper(path, corpus.vocabulary)
        assert loaded.n_groups == grouper.n_groups
        # group indices may be relabeled by first appearance; partition must match
        n = len(corpus.vocabulary)
        original, reloaded = grouper.labels(n), loaded.labels(n)
        mapping = {}
        for a, b in zip(original, reloaded):
            assert mapping.setdefault(a, b) == b

    def test_grouper_requires_total_coverage(self, tmp_path):
        vocab = Vocabulary(("a", "b"))
        path = write(tmp_path / "g.tsv", "a\tg0\n")
        with pytest.raises(CorpusFormatError, match="without a group"):
            load_grouper(path, vocab)

    def test_grouper_ignores_unknown_codes(self, tmp_path):
        vocab = Vocabulary(("a",))
        path = write(tmp_path / "g.tsv", "a\tg0\nzzz\tg1\n")
        assert load_grouper(path, vocab).n_groups == 1


class TestSplit:
    def test_ceiling_sizes(self):
        corpus, _, _ = generate_synthetic(SynthConfig(n_patients=10, seed=1))
        first, second = split_corpus(corpus, 0.8, seed=4)
        assert (first.n_patients, second.n_patients) == (8, 2)

    def test_four_to_one_on_five(self):
        corpus, _, _ = generate_synthetic(SynthConfig(n_patients=5, seed=1))
        first, second = split_corpus(corpus, 0.8, seed=4)
        assert (first.n_patients, second.n_patients) == (4, 1)

    def test_deterministic(self):
        corpus, _, _ = generate_synthetic(SynthConfig(n_patients=12, seed=1))
        assert split_corpus(corpus, 0.7, seed=3) == split_corpus(corpus, 0.7, seed=3)

    def test_disjoint_union(self):
        corpus, _, _ = generate_synthetic(SynthConfig(n_patients=17, seed=6))
        first, second = split_corpus(corpus, 0.6, seed=0)
        merged = sorted(first.patients + second.patients, key=corpus.patients.index)
        assert tuple(merged) == corpus.patients
        assert not set(first.patients) & set(second.patients)

    def test_shared_vocabulary(self):
        corpus, _, _ = generate_synthetic(SynthConfig(n_patients=6, seed=6))
        first, second = split_corpus(corpus, 0.5, seed=0)
        assert first.vocabulary is corpus.vocabulary
        assert second.vocabulary is corpus.vocabulary

    @pytest.mark.parametrize("ratio", [0.0, 1.0, -0.5, 1.5])
    def test_ratio_bounds(self, ratio):
        corpus, _, _ = generate_synthetic(SynthConfig(n_patients=6, seed=6))
        with pytest.raises(ValueError):
            split_corpus(corpus, ratio, seed=0)

    def test_labels_follow_patients(self):
        corpus, _, labels = generate_synthetic(SynthConfig(n_patients=11, seed=8))
        first, l1, second, l2 = split_corpus_with_labels(corpus, labels, 0.8, seed=2)
        assert len(l1) == first.total_visits
        assert len(l2) == second.total_visits
        assert sorted(np.concatenate([l1, l2])) == sorted(labels)


class TestVectors:
    def test_multi_hot_examples(self):
        assert to_multi_hot(Visit((0, 2)), 4).tolist() == [1, 0, 1, 0]
        assert to_multi_hot(Visit((3,)), 4).tolist() == [0, 0, 0, 1]

    def test_multi_hot_out_of_range(self):
        with pytest.raises(ValueError):
            to_multi_hot(Visit((4,)), 4)

    def test_group_targets_collapse(self):
        grouper = GrouperMap({0: 2, 1: 2}, 3)
        assert group_targets(Visit((0, 1)), grouper).tolist() == [0, 0, 1]

    def test_group_targets_identity_equals_multi_hot(self):
        visit = Visit((0, 3))
        ident = GrouperMap.identity(5)
        assert group_targets(visit, ident).tolist() == to_multi_hot(visit, 5).tolist()

    def test_group_targets_spread(self):
        grouper = GrouperMap({0: 0, 3: 1}, 2)
        assert group_targets(Visit((0, 3)), grouper).tolist() == [1, 1]

    def test_group_targets_missing_code(self):
        grouper = GrouperMap({0: 0}, 1)
        with pytest.raises(ValueError, match="no group"):
            group_targets(Visit((0, 1)), grouper)

    def test_encode_demographics(self):
        vec = encode_demographics(45.0, 1, 2, max_age=90.0)
        assert vec == (0.5, 0.0, 1.0, 0.0, 0.0, 1.0)
        with pytest.raises(ValueError):
            encode_demographics(10.0, 3, 0)


class TestSynthetic:
    def test_deterministic(self):
        a = generate_synthetic(SynthConfig(n_patients=40, seed=11))
        b = generate_synthetic(SynthConfig(n_patients=40, seed=11))
        assert a[0] == b[0]
        assert a[1] == b[1]
        assert np.array_equal(a[2], b[2])

    def test_different_seeds_differ(self):
        a = generate_synthetic(SynthConfig(n_patients=40, seed=11))
        b = generate_synthetic(SynthConfig(n_patients=40, seed=12))
        assert a[0] != b[0]

    @pytest.mark.parametrize("target", [7.88, 3.19])
    def test_mean_codes_per_visit(self, target):
        config = SynthConfig(n_patients=1000, n_codes=200, mean_codes_per_visit=target, seed=3)
        corpus, _, _ = generate_synthetic(config)
        mean = np.mean([len(v.codes) for v in corpus.iter_visits()])
        assert abs(mean - target) <= 0.1 * target

    def test_label_rate_strictly_interior(self):
        _, _, labels = generate_synthetic(SynthConfig(n_patients=100, seed=4))
        assert 0.0 < labels.mean() < 1.0

    def test_every_patient_has_two_visits(self):
        corpus, _, _ = generate_synthetic(SynthConfig(n_patients=60, mean_visits_per_patient=2.0, seed=5))
        assert min(len(p) for p in corpus.patients) >= 2

    def test_grouper_covers_vocabulary(self):
        corpus, grouper, _ = generate_synthetic(SynthConfig(n_patients=30, seed=7))
        grouper.labels(len(corpus.vocabulary))  # raises if any code unmapped

    def test_labels_align_with_visits(self):
        corpus, _, labels = generate_synthetic(SynthConfig(n_patients=30, seed=7))
        assert labels.shape == (corpus.total_visits,)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SynthConfig(n_groups=10, n_codes=5)
        with pytest.raises(ValueError):
            SynthConfig(mean_codes_per_visit=0.5)
        with pytest.raises(ValueError):
            SynthConfig(within_group_affinity=0.0)
