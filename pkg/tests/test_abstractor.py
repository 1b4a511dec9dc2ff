import pytest
import torch

from radsum.abstractor import (AbstractorConfig, AbstractorModel,
                               make_extended_ids, matched_pairs,
                               target_extended_ids, train_abstractor)
from radsum.corpus import Report, Vocabulary
from radsum.nn import finite_difference_check, seed_everything


def small_vocab():
    return Vocabulary(["the", "lungs", "are", "clear", "mild", "edema", "."])


def small_model(vocab, hidden=8, dtype=torch.float32, seed=0, **kw):
    seed_everything(seed)
    config = AbstractorConfig(vocab_size=len(vocab), emb_dim=5, hidden=hidden,
                              **kw)
    return AbstractorModel(config).to(dtype)


def run_one_step(model, vocab, src_tokens):
    device = model.attn_v.device
    src_ids_l, src_ext_l, oovs = make_extended_ids(src_tokens, vocab)
    enc_states, state = model.encode(torch.tensor(src_ids_l, device=device))
    context = torch.zeros(2 * model.config.hidden, dtype=enc_states.dtype)
    coverage = torch.zeros(len(src_tokens), dtype=enc_states.dtype)
    return model.pg_step(state, torch.tensor(vocab.start), context, enc_states,
                         torch.tensor(src_ext_l), coverage, len(oovs)), oovs


class TestExtendedIds:
    def test_known_tokens_pass_through(self):
        vocab = small_vocab()
        ids, ext, oovs = make_extended_ids(["the", "lungs"], vocab)
        assert ids == ext == [vocab.index("the"), vocab.index("lungs")]
        assert oovs == []

    def test_oov_tokens_get_extended_ids(self):
        vocab = small_vocab()
        ids, ext, oovs = make_extended_ids(["weird", "lungs", "weird", "rare"],
                                           vocab)
        assert ids[0] == ids[2] == vocab.unk
        assert ext[0] == ext[2] == len(vocab)
        assert ext[3] == len(vocab) + 1
        assert oovs == ["weird", "rare"]

    def test_target_side_uses_source_oovs(self):
        vocab = small_vocab()
        _, _, oovs = make_extended_ids(["weird"], vocab)
        assert target_extended_ids(["weird"], vocab, oovs) == [len(vocab)]
        assert target_extended_ids(["other"], vocab, oovs) == [vocab.unk]


class TestPgStep:
    def test_distribution_sums_to_one(self):
        vocab = small_vocab()
        model = small_model(vocab, dtype=torch.float64)
        (dist, *_), _ = run_one_step(model, vocab,
                                     ["the", "lungs", "are", "clear"])
        assert torch.all(dist >= 0)
        assert float(dist.sum()) == pytest.approx(1.0, abs=1e-10)

    def test_copy_mass_equals_one_minus_pgen(self):
        vocab = small_vocab()
        model = small_model(vocab, dtype=torch.float64)
        src = ["zebra", "quagga"]  # all-OOV source: copy mass is isolated
        (dist, _, _, _, _, p_gen), oovs = run_one_step(model, vocab, src)
        assert len(oovs) == 2
        copy_mass = float(dist[len(vocab):].sum())
        assert copy_mass == pytest.approx(1.0 - float(p_gen), abs=1e-10)

    def test_oov_can_receive_probability(self):
        vocab = small_vocab()
        model = small_model(vocab)
        (dist, *_), _ = run_one_step(model, vocab, ["zebra"])
        assert float(dist[len(vocab)]) > 0.0

    def test_coverage_accumulates_attention(self):
        vocab = small_vocab()
        model = small_model(vocab)
        (_, _, _, attn, new_cov, _), _ = run_one_step(
            model, vocab, ["the", "lungs", "are"])
        assert torch.allclose(new_cov, attn)


class TestLoss:
    def test_coverage_component_zero_on_first_step(self):
        vocab = small_vocab()
        model = small_model(vocab, coverage_weight=1.0)
        nll, cov = model.nll_loss(["lungs", "clear"], ["clear"], vocab,
                                  components=True)
        # one target token + END: coverage penalty only from the second step
        assert float(cov) >= 0.0
        nll1, cov1 = model.nll_loss(["lungs", "clear"], [], vocab,
                                    components=True)
        assert float(cov1) == 0.0

    def test_coverage_weight_scales_total(self):
        vocab = small_vocab()
        model = small_model(vocab, coverage_weight=0.0)
        nll, cov = model.nll_loss(["lungs"], ["lungs"], vocab, components=True)
        total = model.nll_loss(["lungs"], ["lungs"], vocab)
        assert float(total) == pytest.approx(float(nll))

    def test_gradient_matches_finite_differences(self):
        vocab = small_vocab()
        model = small_model(vocab, hidden=4, dtype=torch.float64, seed=3)
        report = finite_difference_check(
            lambda: model.nll_loss(["mild", "edema", "zebra"],
                                   ["mild", "zebra"], vocab),
            model.named_parameters(), max_coords=8, seed=1)
        assert report["passed"], report


class TestDecoding:
    def _trained(self):
        vocab = small_vocab()
        model = small_model(vocab, hidden=16, seed=0)
        pairs = [(["the", "lungs", "are", "clear", "."],
                  ["lungs", "clear", "."]),
                 (["mild", "edema", "."], ["mild", "edema", "."])]
        train_abstractor(model, pairs * 8, pairs, vocab, lr=0.05, epochs=40,
                         batch_size=4, patience=40, seed=0)
        return model, vocab

    def test_overfit_pair_reproduced(self):
        model, vocab = self._trained()
        out, _ = model.abstract_sentence(["mild", "edema", "."], vocab, beam=1)
        assert out == ["mild", "edema", "."]

    def test_beam_score_never_below_greedy(self):
        model, vocab = self._trained()
        for src in (["the", "lungs", "are", "clear", "."],
                    ["mild", "edema", "."]):
            _, g1 = model.abstract_sentence(src, vocab, beam=1)
            _, g5 = model.abstract_sentence(src, vocab, beam=5)
            assert g5 >= g1 - 1e-9

    def test_deterministic(self):
        model, vocab = self._trained()
        a = model.abstract_sentence(["the", "lungs", "are", "clear", "."], vocab)
        b = model.abstract_sentence(["the", "lungs", "are", "clear", "."], vocab)
        assert a == b

    def test_empty_source(self):
        vocab = small_vocab()
        model = small_model(vocab)
        assert model.abstract_sentence([], vocab) == ([], 0.0)

    def test_oov_copy_resolves_to_surface(self):
        vocab = small_vocab()
        model = small_model(vocab, hidden=16, seed=1)
        pairs = [(["zebra", "edema", "."], ["zebra", "."])]
        train_abstractor(model, pairs * 8, pairs, vocab, lr=0.02, epochs=40,
                         batch_size=4, patience=40, seed=1)
        out, _ = model.abstract_sentence(["zebra", "edema", "."], vocab, beam=1)
        assert out[0] == "zebra"


def test_matched_pairs_builds_one_pair_per_impression():
    report = Report("r", [["a", "b"], ["c", "d"], ["e", "f"]],
                    [["c", "d"], ["a", "b"]])
    pairs = matched_pairs([report])
    assert (["c", "d"], ["c", "d"]) in pairs
    assert (["a", "b"], ["a", "b"]) in pairs
    assert len(pairs) == 2
