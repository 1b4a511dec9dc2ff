import json

import pytest

from radsum.corpus import (RawReport, Report, SyntheticSpec, build_vocabulary,
                           corpus_stats, generate_synthetic_corpus,
                           ingest_and_filter, normalize, read_reports_jsonl,
                           tokenize_sentence, write_reports_jsonl)


def record(rid="r1", findings="the heart is normal. lungs are clear.",
           impressions="normal study."):
    return {"id": rid, "findings": findings, "impressions": impressions}


class TestFiltering:
    def test_short_findings_rejected(self):
        accepted, log = ingest_and_filter([record(findings="normal.")])
        assert not accepted
        assert log.rejected == [("r1", "b")]

    def test_empty_findings_rejected(self):
        accepted, log = ingest_and_filter([record(findings="")])
        assert log.rejected == [("r1", "a")]

    def test_accepted_when_no_rule_fires(self):
        rec = record(findings="one two three four five. six seven eight nine ten.",
                     impressions="one two three four.")
        accepted, log = ingest_and_filter([rec])
        assert len(accepted) == 1 and not log.rejected

    def test_findings_shorter_than_impressions_rejected(self):
        rec = record(findings="one two three.",
                     impressions="one two three four five.")
        _, log = ingest_and_filter([rec])
        assert log.rejected == [("r1", "c")]

    def test_fewer_sentences_than_impressions_rejected(self):
        rec = record(findings="one two three four five six.",
                     impressions="one two. three four.")
        _, log = ingest_and_filter([rec])
        assert log.rejected == [("r1", "c")]

    def test_malformed_record_logged_and_stream_continues(self):
        accepted, log = ingest_and_filter([{"findings": "x y z."}, record()])
        assert len(accepted) == 1
        assert len(log.errors) == 1

    def test_idempotent(self):
        records = [record(), record("r2", findings="a b. c d e.", impressions="a b."),
                   record("r3", findings="x.")]
        accepted, _ = ingest_and_filter(records)
        again, log = ingest_and_filter(
            [{"id": r.id, "findings": r.findings_text,
              "impressions": r.impressions_text} for r in accepted])
        assert [r.id for r in again] == [r.id for r in accepted]
        assert not log.rejected


class TestNormalize:
    def test_number_placeholder(self):
        assert tokenize_sentence("Heart size 5.2 cm.") == \
            ["heart", "size", "<num>", "cm", "."]

    def test_date_placeholder(self):
        assert tokenize_sentence("Seen on 12/05/2020 again") == \
            ["seen", "on", "<date>", "again"]

    def test_sentence_truncation(self):
        text = " ".join(f"word{i} filler." for i in range(65))
        report = normalize(RawReport("r", text, "ok fine."))
        assert len(report.findings) == 60

    def test_word_truncation_keeps_flat_consistent(self):
        sentence = " ".join(f"tok{i}" for i in range(20)) + "."
        text = " ".join(sentence for _ in range(55))
        report = normalize(RawReport("r", text, "ok fine."))
        flat = report.flat_findings_tokens
        assert len(flat) == 800
        assert flat == [t for s in report.findings for t in s]

    def test_flat_round_trip(self):
        report = normalize(RawReport("r", "a b c. d e. f g h i.", "a b."))
        regrouped = {}
        for tok, s_idx, w_idx in report.flat_findings:
            regrouped.setdefault(s_idx, []).append((w_idx, tok))
        rebuilt = [[t for _, t in sorted(v)] for _, v in sorted(regrouped.items())]
        assert rebuilt == report.findings

    def test_lemmatizer_hook(self):
        report = normalize(RawReport("r", "lungs are clear.", "clear."),
                           lemmatizer=lambda t: t.rstrip("s"))
        assert report.findings[0][0] == "lung"


class TestVocabulary:
    def _corpus(self, tokens):
        return [Report("r", [tokens.split()], [["x"]])]

    def test_cap_and_reserved(self):
        vocab = build_vocabulary(self._corpus("a a a b"), cap=1)
        assert "a" in vocab.stoi and "b" not in vocab.stoi
        assert len(vocab) == 5  # 4 reserved + a... x dropped by cap
        assert vocab.pad == 0

    def test_lexicographic_tie_break(self):
        vocab = build_vocabulary(self._corpus("b b a a"), cap=1)
        assert "a" in vocab.stoi and "b" not in vocab.stoi

    def test_large_cap_keeps_everything(self):
        corpus = [Report(f"r{i}", [[f"tok{j}" for j in range(50)]], [["y"]])
                  for i in range(10)]
        vocab = build_vocabulary(corpus, cap=50000)
        assert len(vocab) == 4 + 50 + 1

    def test_round_trip_and_unk(self):
        vocab = build_vocabulary(self._corpus("alpha beta"), cap=10)
        for tok in ("alpha", "beta"):
            assert vocab.token(vocab.index(tok)) == tok
        assert vocab.index("never-seen") == vocab.unk

    def test_empty_corpus_errors(self):
        with pytest.raises(ValueError):
            build_vocabulary([], cap=5)


class TestStats:
    def test_sentence_mean_std(self):
        corpus = [Report("a", [["x"]] * 2, [["y"]]),
                  Report("b", [["x"]] * 4, [["y"]])]
        stats = corpus_stats(corpus)
        row = stats["#s per report"]["findings"]
        assert row["mean"] == pytest.approx(3.0)
        assert row["std"] == pytest.approx(1.0)

    def test_single_report_words(self):
        stats = corpus_stats([Report("a", [["x", "y", "z"]], [["q"]])])
        row = stats["#w per report"]["findings"]
        assert row["mean"] == pytest.approx(3.0)
        assert row["std"] == 0.0

    def test_schema_matches_table_rows(self):
        stats = corpus_stats([Report("a", [["x"]], [["y"]])])
        assert set(stats) == {"#w per sentence", "#s per report", "#w per report"}
        assert set(stats["#w per report"]) == {"findings", "impressions"}

    def test_empty_corpus_errors(self):
        with pytest.raises(ValueError):
            corpus_stats([])


class TestSynthetic:
    SPEC = SyntheticSpec(n_reports=20)

    def test_deterministic(self):
        first = generate_synthetic_corpus(self.SPEC, seed=42)
        second = generate_synthetic_corpus(self.SPEC, seed=42)
        assert first == second

    def test_seed_changes_output(self):
        a, _ = generate_synthetic_corpus(self.SPEC, seed=1)
        b, _ = generate_synthetic_corpus(self.SPEC, seed=2)
        assert a != b

    def test_planted_counts(self):
        _, annotations = generate_synthetic_corpus(self.SPEC, seed=0)
        assert all(len(a.salient_sentences) == self.SPEC.n_salient
                   for a in annotations)

    def test_annotation_consistency(self):
        reports, annotations = generate_synthetic_corpus(self.SPEC, seed=0)
        concepts = set(self.SPEC.concept_vocab())
        for report, ann in zip(reports, annotations):
            flat = report.flat_findings_tokens
            assert all(s < len(report.findings) for s in ann.salient_sentences)
            assert all(w < len(flat) for w in ann.salient_words)
            assert all(flat[w] in concepts for w in ann.salient_words)

    def test_filter_accepts_synthetic_reports(self):
        reports, _ = generate_synthetic_corpus(self.SPEC, seed=3)
        for r in reports:
            f_words = len(r.flat_findings_tokens)
            i_words = len(r.flat_impressions_tokens)
            assert f_words >= i_words
            assert len(r.findings) >= len(r.impressions)

    def test_infeasible_spec_errors(self):
        with pytest.raises(ValueError):
            generate_synthetic_corpus(
                SyntheticSpec(n_salient=5, sentence_range=(3, 4)), seed=0)


def test_reports_jsonl_round_trip(tmp_path):
    reports, _ = generate_synthetic_corpus(SyntheticSpec(n_reports=5), seed=9)
    path = tmp_path / "corpus.jsonl"
    write_reports_jsonl(reports, path)
    assert read_reports_jsonl(path) == reports
    with open(path, encoding="utf-8") as f:
        obj = json.loads(f.readline())
    assert set(obj) == {"id", "findings", "impressions"}
