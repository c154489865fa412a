"""Synthetic task generators, batching/masking, and evaluation."""
import numpy as np
import pytest

from forge.records import ParallelRecord
from forge.synth import (
    PAD,
    RESERVED,
    SEP,
    TASK_CONTINUE,
    TASK_TRANSLATE,
    EvalSet,
    Sample,
    SynthLangSpec,
    apply_mapping,
    evaluate,
    gen_general_corpus,
    gen_translation_corpus,
    make_batches,
    record_to_sample,
    sample_to_record,
    read_samples,
    write_samples,
)
from forge.tinylm import ModelConfig, init

from helpers import params_digest

CFG = ModelConfig(n_layers=2, d_model=32, n_heads=4, d_ff=64,
                  vocab_size=32, max_seq_len=32, init_seed=1)


def test_identity_mapping_identity_reorder():
    spec = SynthLangSpec(vocab_size=16, perm_seed=0, reorder="identity")
    perm = np.arange(spec.n_content)
    assert apply_mapping(spec, [3, 5, 7], perm) == [3, 5, 7]


def test_reverse_reorder():
    spec = SynthLangSpec(vocab_size=16, perm_seed=0, reorder="reverse")
    perm = np.arange(spec.n_content)
    assert apply_mapping(spec, [3, 5, 7], perm) == [7, 5, 3]


def test_permutation_is_bijection():
    spec = SynthLangSpec(vocab_size=64, perm_seed=9)
    perm = spec.permutation()
    assert sorted(perm.tolist()) == list(range(spec.n_content))


def test_translation_corpus_deterministic():
    spec = SynthLangSpec(vocab_size=32, perm_seed=3, min_len=3, max_len=6)
    a_train, a_eval = gen_translation_corpus(spec, 200, seed=5)
    b_train, b_eval = gen_translation_corpus(spec, 200, seed=5)
    assert a_train == b_train
    assert a_eval.samples == b_eval.samples


def test_translation_corpus_split_disjoint():
    spec = SynthLangSpec(vocab_size=32, perm_seed=3, min_len=3, max_len=6)
    train, eval_set = gen_translation_corpus(spec, 400, seed=6)
    assert len(train) + len(eval_set.samples) == 400
    assert len(eval_set.samples) == round(0.05 * 400)
    train_prompts = {s.prompt for s in train}
    assert all(s.prompt not in train_prompts for s in eval_set.samples)
    # prompts are unique corpus-wide
    assert len(train_prompts) == len(train)


def test_translation_sample_structure():
    spec = SynthLangSpec(vocab_size=32, perm_seed=3, min_len=4, max_len=8)
    train, _ = gen_translation_corpus(spec, 50, seed=7)
    perm = spec.permutation()
    for s in train:
        assert s.prompt[0] == TASK_TRANSLATE and s.prompt[-1] == SEP
        src = [t - RESERVED for t in s.prompt[1:-1]]
        assert 4 <= len(src) <= 8
        assert [t - RESERVED for t in s.response] == [int(perm[t]) for t in src]


def test_general_corpus_arithmetic():
    train, eval_set = gen_general_corpus(300, seed=8, vocab_size=32)
    mod = 32 - RESERVED
    for s in list(train)[:50] + list(eval_set.samples):
        assert s.prompt[0] == TASK_CONTINUE and s.prompt[-1] == SEP
        k, step, length = (t - RESERVED for t in s.prompt[1:4])
        assert len(s.response) == length
        expected = [(k + i * step) % mod for i in range(1, length + 1)]
        assert [t - RESERVED for t in s.response] == expected


def test_general_zero_step_constant():
    train, eval_set = gen_general_corpus(1500, seed=9, vocab_size=32)
    zero_step = [s for s in train if s.prompt[2] - RESERVED == 0]
    assert zero_step, "step 0 should occur"
    for s in zero_step[:10]:
        k = s.prompt[1] - RESERVED
        assert all(t - RESERVED == k for t in s.response)


def test_general_corpus_caps_unique_samples():
    with pytest.raises(ValueError):
        gen_general_corpus(10**9, seed=0, vocab_size=16)


def test_make_batches_mask_covers_exactly_response():
    spec = SynthLangSpec(vocab_size=32, perm_seed=3, min_len=3, max_len=6)
    train, _ = gen_translation_corpus(spec, 40, seed=10)
    batches = make_batches(train, 8)
    idx = 0
    for batch in batches:
        for row in range(batch.ids.shape[0]):
            s = train[idx]
            n_prompt, n_resp = len(s.prompt), len(s.response)
            mask = batch.mask[row]
            assert mask[:n_prompt].sum() == 0
            assert mask[n_prompt:n_prompt + n_resp].sum() == n_resp
            assert mask[n_prompt + n_resp:].sum() == 0  # padding unmasked
            assert np.all(batch.ids[row, n_prompt + n_resp:] == PAD)
            idx += 1
    assert idx == len(train)


def test_evaluate_read_only_and_shapes():
    spec = SynthLangSpec(vocab_size=32, perm_seed=3, min_len=3, max_len=5)
    _, eval_set = gen_translation_corpus(spec, 60, seed=11)
    params = init(CFG)
    before = params_digest(params)
    result = evaluate(params, eval_set)
    assert params_digest(params) == before
    assert result.sample_count == len(eval_set.samples)
    assert 0.0 <= result.exact_match <= 1.0
    assert result.mean_ce >= 0.0


def test_evaluate_untrained_model_near_uniform():
    spec = SynthLangSpec(vocab_size=32, perm_seed=3, min_len=4, max_len=6)
    _, eval_set = gen_translation_corpus(spec, 200, seed=12)
    params = init(CFG)
    result = evaluate(params, eval_set)
    assert abs(result.mean_ce - np.log(CFG.vocab_size)) < 0.35
    assert result.exact_match <= 0.05


def test_evaluate_memorized_sample_exact_match():
    # train a tiny model to memorize one sample, EM must reach 1.0
    from forge.trainer import AdamState, TrainConfig, optimizer_step
    from forge.tinylm import loss_and_backward

    sample = Sample(prompt=(TASK_TRANSLATE, 5, 6, SEP), response=(7, 8))
    batch = make_batches([sample], 1)[0]
    params = init(CFG)
    state = AdamState()
    config = TrainConfig(lr_max=5e-3)
    trainable = set(params.keys())
    for _ in range(300):
        loss, grads = loss_and_backward(params, batch)
        optimizer_step(params, grads, state, trainable, 5e-3, config)
    result = evaluate(params, EvalSet("memorize", [sample]))
    assert result.exact_match == 1.0
    assert result.mean_ce < 0.05


# ---------------------------------------------------------------------------
# record round trip

def test_sample_record_round_trip():
    spec = SynthLangSpec(vocab_size=32, perm_seed=3, min_len=3, max_len=6)
    train, _ = gen_translation_corpus(spec, 30, seed=13)
    for sample in train:
        record = sample_to_record(sample, spec)
        assert record.src != record.trg
        back = record_to_sample(record, spec.vocab_size)
        assert back == sample


def test_record_to_sample_rejects_foreign_tokens():
    record = ParallelRecord("qaa", "qab", "hello world", "t1 t2")
    with pytest.raises(ValueError):
        record_to_sample(record, 32)
    record = ParallelRecord("qaa", "qab", "t1 t99", "t1 t2")
    with pytest.raises(ValueError):
        record_to_sample(record, 32)


def test_write_read_samples_round_trip(tmp_path):
    spec = SynthLangSpec(vocab_size=32, perm_seed=3, min_len=3, max_len=6)
    train, _ = gen_translation_corpus(spec, 25, seed=14)
    path = tmp_path / "samples.jsonl"
    write_samples(train, path)
    assert read_samples(path) == train
