import numpy as np
import pytest

from smdlab.kvcache import EvictionPolicy, Policy
from smdlab.model import ModelConfig, forward_dense, forward_shadow, init_params, token_logprobs
from smdlab.rollout import RolloutConfig, Trajectory, generate_dense, generate_sparse, greedy_token, sample_token

CFG = ModelConfig(vocab_size=24, d_model=16, n_heads=2, n_layers=2, max_seq_len=64)
RC = RolloutConfig(K=2, max_new_tokens=10, compression_ratio=0.5, stop_token=None)


@pytest.fixture(scope="module")
def params():
    return init_params(CFG, 0)


def prompt(seed=0, n=12):
    return np.random.default_rng(seed).integers(0, CFG.vocab_size, size=n).tolist()


def shadow_lp(params, tr, temperature=1.0):
    P = len(tr.prompt_tokens)
    logits = forward_shadow(CFG, params, tr.tokens, tr.shadow_mask).data
    return token_logprobs(logits[P - 1:], tr.generated_tokens, temperature).data


class TestSampling:
    def test_uniform(self):
        _, lp = sample_token(np.zeros(4), 1.0, np.random.default_rng(0))
        assert abs(lp + np.log(4)) < 1e-15

    def test_cold_limit(self):
        tok, lp = sample_token(np.array([0.1, 2.0, -1.0]), 1e-4, np.random.default_rng(0))
        assert tok == 1 and -1e-12 < lp <= 0.0

    def test_frequencies_match_tempered_softmax(self):
        logits, T, n = np.array([0.5, -0.3, 1.2, 0.0]), 0.8, 100_000
        p = np.exp(logits / T) / np.exp(logits / T).sum()
        rng = np.random.default_rng(1)
        counts = np.bincount([sample_token(logits, T, rng)[0] for _ in range(n)], minlength=4)
        sd = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) < 3 * sd)

    def test_greedy(self):
        tok, lp = greedy_token(np.array([0.0, 3.0, 1.0]), 1.0)
        assert tok == 1 and lp == pytest.approx(3.0 - np.log(1 + np.e ** 3 + np.e))

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            sample_token(np.zeros(3), 0.0, np.random.default_rng(0))


class TestGenerate:
    @pytest.mark.parametrize("variant", [Policy.HEAVY_HITTER, Policy.RECENT, Policy.RANDOM])
    def test_behavior_matches_shadow_recompute(self, params, variant):
        rc = RolloutConfig(K=2, max_new_tokens=10, policy=EvictionPolicy(variant), stop_token=None)
        for s in range(5):
            tr = generate_sparse(CFG, params, prompt(s), rc, seed=(s,))
            assert np.max(np.abs(shadow_lp(params, tr) - tr.behavior_logprobs)) < 1e-9

    def test_temperature_applied_in_recompute(self, params):
        rc = RolloutConfig(K=2, temperature=0.6, max_new_tokens=8, stop_token=None)
        tr = generate_sparse(CFG, params, prompt(1), rc, seed=(1,))
        assert np.max(np.abs(shadow_lp(params, tr, 0.6) - tr.behavior_logprobs)) < 1e-9

    def test_dense_gap_not_identically_zero(self, params):
        gaps = []
        for s in range(5):
            tr = generate_sparse(CFG, params, prompt(s), RC, seed=(s,))
            P = len(tr.prompt_tokens)
            dense = forward_dense(CFG, params, tr.tokens).data
            gaps.append(token_logprobs(dense[P - 1:], tr.generated_tokens).data.sum() - tr.behavior_logprobs.sum())
        assert np.max(np.abs(gaps)) > 1e-6

    def test_deterministic(self, params):
        a = generate_sparse(CFG, params, prompt(), RC, seed=(3, 1))
        b = generate_sparse(CFG, params, prompt(), RC, seed=(3, 1))
        assert a.generated_tokens == b.generated_tokens
        assert a.behavior_logprobs.tobytes() == b.behavior_logprobs.tobytes()
        assert a.shadow_mask == b.shadow_mask

    def test_unbounded_budget_equals_dense(self, params):
        rc = RolloutConfig(K=2, max_new_tokens=10, compression_ratio=0.0, stop_token=None)
        a = generate_sparse(CFG, params, prompt(), rc, seed=(2,))
        b = generate_dense(CFG, params, prompt(), RC, seed=(2,))
        assert a.generated_tokens == b.generated_tokens
        assert a.shadow_mask.n_evicted() == 0 and b.shadow_mask.n_evicted() == 0
        assert np.array_equal(a.behavior_logprobs, b.behavior_logprobs)

    def test_dense_recompute(self, params):
        tr = generate_dense(CFG, params, prompt(4), RC, seed=(4,))
        P = len(tr.prompt_tokens)
        lp = token_logprobs(forward_dense(CFG, params, tr.tokens).data[P - 1:], tr.generated_tokens).data
        assert np.max(np.abs(lp - tr.behavior_logprobs)) < 1e-9

    def test_stop_token(self, params):
        for s in range(20):
            tr = generate_sparse(CFG, params, prompt(s), RolloutConfig(K=2, max_new_tokens=20, stop_token=3),
                                 seed=(s,))
            assert 3 not in tr.generated_tokens[:-1]
            assert tr.generated_tokens[-1] == 3 or len(tr.generated_tokens) == 20
            assert len(tr.tokens) == len(tr.prompt_tokens) + len(tr.generated_tokens) - 1

    def test_too_long(self, params):
        with pytest.raises(ValueError):
            generate_sparse(CFG, params, prompt(n=60), RC)

    def test_record_roundtrip(self, params):
        tr = generate_sparse(CFG, params, prompt(), RC, seed=(5, 5))
        tr.reward = 0.25
        back = Trajectory.from_record(tr.to_record())
        assert back.generated_tokens == tr.generated_tokens
        assert np.array_equal(back.behavior_logprobs, tr.behavior_logprobs)
        assert back.shadow_mask == tr.shadow_mask and back.reward == 0.25


def test_config_validation():
    with pytest.raises(ValueError):
        RolloutConfig(K=1)
    with pytest.raises(ValueError):
        RolloutConfig(compression_ratio=1.0)
    assert RolloutConfig(compression_ratio=0.3).keep_fraction == pytest.approx(0.7)
