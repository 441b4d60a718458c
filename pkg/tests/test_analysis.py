import numpy as np
import pytest

from agglora.tensor import Tensor, StateError
from agglora.model import ModelConfig, init_base
from agglora.adapters import AdapterConfig, attach_mka_adapters, strip_na
from agglora.data import (Sample, Tokenizer, build_batch, gen_knowledge_task,
                          EOS, SEP, VOCAB_SIZE)
from agglora.training import masked_nll_loss
from agglora.analysis import (target_loglik, eval_mc_accuracy, eval_format_score,
                              greedy_decode, ActivationMatrix,
                              PairPerformanceMatrix, route_stats,
                              forced_pair_eval, routing_mismatch_report,
                              MetricError)

TINY = ModelConfig(d=8, n_layers=1, n_heads=2, vocab_size=260, max_seq_len=64, seed=3)
ACFG = AdapterConfig(rank=2, alpha=4.0, shared_experts=2, n_experts=4, top_k=2)


@pytest.fixture
def tiny():
    return init_base(TINY, seed=3)


@pytest.fixture
def mka(tiny):
    return attach_mka_adapters(tiny, ACFG, seed=5)


class _StubConfig:
    max_seq_len = 64


class BiasModel:
    """Uniform logits except a fixed boost for one token id."""

    config = _StubConfig()

    def __init__(self, fav):
        self.fav = fav

    def forward(self, tokens):
        logits = np.zeros(tokens.shape + (VOCAB_SIZE,), dtype=np.float64)
        logits[..., self.fav] = 5.0
        return Tensor(logits)


class ScriptedModel:
    """Greedy-decodes a scripted string per prompt, then EOS."""

    config = _StubConfig()

    def __init__(self, outputs):
        tok = Tokenizer()
        self.scripts = [tok.tokenize(o) for o in outputs]
        self.sample = -1

    def forward(self, tokens):
        ids = list(tokens[0])
        sep = len(ids) - 1 - ids[::-1].index(SEP)
        emitted = len(ids) - sep - 1
        if emitted == 0:
            self.sample += 1
        script = self.scripts[self.sample]
        nxt = script[emitted] if emitted < len(script) else EOS
        logits = np.zeros((1, len(ids), VOCAB_SIZE))
        logits[0, -1, nxt] = 10.0
        return Tensor(logits)


class TestTargetLoglik:
    def test_matches_masked_nll(self, tiny):
        samples = [Sample(input="ab", target="cd", task="alignment"),
                   Sample(input="xyz", target="q", task="alignment")]
        ll = target_loglik(tiny, samples)
        tok = Tokenizer()
        for i, s in enumerate(samples):
            batch = build_batch([s], tok, TINY.max_seq_len)
            count = int(batch.loss_mask.sum())
            nll = masked_nll_loss(tiny.forward(batch.tokens), batch.tokens,
                                  batch.loss_mask).item()
            assert ll[i] == pytest.approx(-nll * count, rel=1e-4)

    def test_biased_stub_orders_options(self):
        m = BiasModel(fav=ord("B"))
        samples = [Sample(input=f"q{i}", target="B", task="knowledge",
                          options=["A", "B", "C", "D"]) for i in range(6)]
        assert eval_mc_accuracy(m, samples) == 1.0
        samples[0].target = "C"
        assert eval_mc_accuracy(m, samples) == pytest.approx(5 / 6)


class TestMcAccuracy:
    def test_empty_raises(self, tiny):
        with pytest.raises(MetricError):
            eval_mc_accuracy(tiny, [])

    def test_missing_options_raises(self, tiny):
        with pytest.raises(MetricError):
            eval_mc_accuracy(tiny, [Sample(input="a", target="b", task="knowledge")])

    def test_untrained_model_near_chance(self):
        cfg = ModelConfig(d=16, n_layers=1, n_heads=2, vocab_size=260,
                          max_seq_len=128, seed=0)
        m = init_base(cfg, seed=0)
        samples, _ = gen_knowledge_task(200, seed=1)
        acc = eval_mc_accuracy(m, samples)
        assert 0.15 <= acc <= 0.35


class TestFormatScore:
    def test_perfect(self):
        gold = ["[PER:bare][LOC:mika]", "[NONE]", "[OBJ:tolu]"]
        m = ScriptedModel(gold)
        samples = [Sample(input=f"s{i}", target=g, task="alignment")
                   for i, g in enumerate(gold)]
        assert eval_format_score(m, samples) == 1.0

    def test_half_overlap(self):
        # tp=1 fp=1 fn=1 -> micro-F1 = 0.5
        m = ScriptedModel(["[PER:x][OBJ:z]"])
        samples = [Sample(input="s", target="[PER:x][LOC:y]", task="alignment")]
        assert eval_format_score(m, samples) == pytest.approx(0.5)

    def test_unparseable_counts_as_miss(self):
        m = ScriptedModel(["garbage ]["])
        samples = [Sample(input="s", target="[PER:x]", task="alignment")]
        assert eval_format_score(m, samples) == 0.0

    def test_duplicate_pairs_multiset(self):
        # gold has two copies; predicting one of them is tp=1 fn=1
        m = ScriptedModel(["[PER:x]"])
        samples = [Sample(input="s", target="[PER:x][PER:x]", task="alignment")]
        assert eval_format_score(m, samples) == pytest.approx(2 / 3)

    def test_all_none_scores_one(self):
        m = ScriptedModel(["[NONE]", "[NONE]"])
        samples = [Sample(input=f"s{i}", target="[NONE]", task="alignment")
                   for i in range(2)]
        assert eval_format_score(m, samples) == 1.0


class TestRouteStats:
    def test_pair_accounting(self, mka):
        samples = [Sample(input=f"in{i}", target=f"t{i % 3}", task="alignment")
                   for i in range(12)]
        am = route_stats(mka, samples, batch_size=5)
        tok = Tokenizer()
        n_valid = 0
        for b0 in range(0, len(samples), 5):
            batch = build_batch(samples[b0:b0 + 5], tok, TINY.max_seq_len)
            n_valid += int((batch.tokens != tok.PAD).sum())
        n_slots = len(mka.ffn_slots())
        # top-2 of 4: one unordered pair per token per adapted slot
        assert am.total() == n_valid * n_slots
        assert np.array_equal(am.counts, am.counts.T)
        assert np.all(np.diag(am.counts) == 0)

    def test_zero_router_ties_break_to_lowest_pair(self, mka):
        # equal gates everywhere: stable top-k always picks experts (0, 1)
        for slot in mka.ffn_slots():
            slot.adapters["na"].router.data[:] = 0.0
        samples = [Sample(input=f"in{i}", target="t", task="alignment")
                   for i in range(8)]
        am = route_stats(mka, samples)
        assert am.counts[0, 1] == am.total() > 0

    def test_stripped_model_raises(self, mka):
        with pytest.raises(StateError):
            route_stats(strip_na(mka), [Sample(input="a", target="b", task="alignment")])


class TestForcedPair:
    def _mc_samples(self, n=8):
        samples, _ = gen_knowledge_task(n, seed=2)
        return samples

    def test_degenerate_two_expert_pool_matches_free_routing(self, tiny):
        cfg = AdapterConfig(rank=2, alpha=4.0, shared_experts=2, n_experts=2, top_k=2)
        m = attach_mka_adapters(tiny, cfg, seed=5)
        samples = self._mc_samples()
        free = eval_mc_accuracy(m, samples)
        forced = forced_pair_eval(m, samples, 0, 1, renormalize=False)
        assert forced == free

    def test_restoration_bitwise(self, mka):
        samples = self._mc_samples(4)
        x = Tensor(np.random.default_rng(0).standard_normal((1, 3, TINY.d)).astype(np.float32))
        na = mka.ffn_slots()[0].adapters["na"]
        before = na.delta(x).data.copy()
        forced_pair_eval(mka, samples, 0, 2)
        assert na.forced_pair is None
        assert np.array_equal(na.delta(x).data, before)

    def test_validation(self, mka):
        samples = self._mc_samples(2)
        with pytest.raises(ValueError):
            forced_pair_eval(mka, samples, 1, 1)
        with pytest.raises(ValueError):
            forced_pair_eval(mka, samples, 2, 1)
        with pytest.raises(ValueError):
            forced_pair_eval(mka, samples, 0, ACFG.n_experts)


class TestMismatchReport:
    def _matrices(self, perf_from_count):
        e = 4
        counts = np.zeros((e, e), dtype=np.int64)
        values = np.zeros((e, e))
        c = 1
        for i in range(e):
            for j in range(i + 1, e):
                counts[i, j] = counts[j, i] = c
                values[i, j] = values[j, i] = perf_from_count(c)
                c += 1
        return ActivationMatrix(counts), PairPerformanceMatrix(values)

    def test_monotone_agreement_rho_one(self):
        am, pm = self._matrices(lambda c: 0.1 * c)
        rep = routing_mismatch_report(am, pm)
        assert rep["n_pairs"] == 6
        assert rep["spearman_rho"] == pytest.approx(1.0)
        assert rep["most_activated_pair"] == rep["best_pair"] == [2, 3]

    def test_inverted_rho_minus_one(self):
        am, pm = self._matrices(lambda c: 1.0 - 0.1 * c)
        rep = routing_mismatch_report(am, pm)
        assert rep["spearman_rho"] == pytest.approx(-1.0)
        assert rep["most_activated_pair"] == [2, 3]
        assert rep["best_pair"] == [0, 1]


def test_greedy_decode_stops_at_eos():
    m = ScriptedModel(["ab"])
    tok = Tokenizer()
    out = greedy_decode(m, [256] + tok.tokenize("x") + [SEP], max_new=10)
    assert tok.detokenize(out) == "ab"
