import pytest
from hypothesis import given
from hypothesis import strategies as st

from controlpe.tasks import (LabeledExample, TaskSpec, carry_trace, final_answer, gen_corpus, number_pairs,
                             pretraining_pairs, refusal_example, refusal_stats, repeat_answer,
                             scratchpad_example, task_accuracy, unique_inputs, verbosity_example)
from controlpe.text import PromptTemplate, Vocab, render_prompt, task_template


@pytest.fixture(scope="module")
def vocab():
    return Vocab.default()


def test_vocab_round_trip_and_size(vocab):
    assert len(vocab) <= 64
    s = "BOS SHORT a b c SEP"
    assert vocab.decode_str(vocab.encode(s)) == s
    with pytest.raises(ValueError):
        vocab.encode("nonsense")


def test_render_prompt_slots(vocab):
    t = task_template("verbosity", vocab)
    x = vocab.encode("a b c")
    assert vocab.decode_str(render_prompt(t, True, x)) == "BOS SHORT a b c SEP"
    assert vocab.decode_str(render_prompt(t, False, x)) == "BOS a b c SEP"
    tiny = PromptTemplate("t", (1,), (4,), (2,), max_len=4)
    with pytest.raises(ValueError):
        render_prompt(tiny, True, [20, 21])


def test_verbosity_gold():
    assert verbosity_example(list("abc"), False).gold == "a b c SEP a b c SEP a b c EOS".split()
    assert verbosity_example(list("abc"), True).gold == "a b c EOS".split()


def test_refusal_gold():
    ctx = [("K1", "V3"), ("K4", "V7")]
    hit = refusal_example(ctx, "K4", with_prompt=False)
    assert hit.gold == ["V7", "EOS"] and not hit.should_refuse
    miss = refusal_example(ctx, "K9", with_prompt=True)
    assert miss.gold == ["NOANS", "EOS"] and miss.should_refuse
    # without the prompt an unanswerable query is answered with the first value
    assert refusal_example(ctx, "K9", with_prompt=False).gold == ["V3", "EOS"]
    assert refusal_example(ctx, "K4", False, verbose=True).gold == "V7 SEP V7 SEP V7 EOS".split()
    assert refusal_example(ctx, "K4", False, verbose=True, short=True).gold == ["V7", "EOS"]


def test_carry_trace_examples():
    assert carry_trace(17, 25) == "7 + 5 = 1 2 carry 1 SEP 1 + 2 + 1 = 4 SEP".split()
    assert carry_trace(12, 34) == "2 + 4 = 6 SEP 1 + 3 = 4 SEP".split()
    assert carry_trace(99, 99)[-4:] == ["9", "carry", "1", "SEP"]
    ex = scratchpad_example(17, 25, True)
    assert final_answer(ex.gold) == ["4", "2"] == ex.gold_answer


@given(st.integers(10, 99), st.integers(10, 99))
def test_trace_and_direct_share_the_answer(a, b):
    assert final_answer(scratchpad_example(a, b, True).gold) == list(str(a + b))
    assert final_answer(scratchpad_example(a, b, False).gold) == list(str(a + b))


@given(st.lists(st.sampled_from(list("abcdefghijklmnop")), min_size=1, max_size=6), st.booleans())
def test_repeat_answer_length(ans, short):
    out = repeat_answer(ans, short)
    assert len(out) == (len(ans) + 1 if short else 3 * len(ans) + 3)


def test_number_pair_split_is_disjoint_and_complete():
    train = set(number_pairs(TaskSpec("scratchpad", split="train")))
    test = set(number_pairs(TaskSpec("scratchpad", split="test")))
    assert not train & test
    assert len(train) + len(test) == 90 * 90
    assert len(test) == round(0.2 * 8100)
    assert set(number_pairs(TaskSpec("scratchpad", split="test", seed=9))) == test


def test_gen_corpus_deterministic_and_refusal_fraction():
    spec = TaskSpec("refusal", seed=3)
    a = gen_corpus(spec, 50, True)
    assert a == gen_corpus(spec, 50, True)
    assert sum(e.should_refuse for e in a) == 10
    with pytest.raises(ValueError):
        gen_corpus(spec, 0, True)


def test_gen_corpus_with_and_without_prompt_share_inputs():
    spec = TaskSpec("verbosity", seed=5)
    assert [e.x for e in gen_corpus(spec, 20, True)] == [e.x for e in gen_corpus(spec, 20, False)]


def test_unique_inputs_excludes():
    e = [LabeledExample(["a"], []), LabeledExample(["b"], []), LabeledExample(["a"], [])]
    assert [x.x for x in unique_inputs(e)] == [["a"], ["b"]]
    assert [x.x for x in unique_inputs(e, exclude=[e[1]])] == [["a"]]


def test_pretraining_pairs_mix_prompts(vocab):
    pairs = pretraining_pairs([TaskSpec("verbosity"), TaskSpec("refusal", verbose=True)], 200, vocab)
    assert len(pairs) == 400
    decoded = [vocab.decode(x) for x, _ in pairs]
    with_short = sum("SHORT" in d for d in decoded)
    assert 100 < with_short < 300
    assert any("REFUSE" in d for d in decoded) and any("REFUSE" not in d and "CTX" in d for d in decoded)


def test_refusal_stats_example():
    gold = [LabeledExample([], [], True), LabeledExample([], [], True), LabeledExample([], [], False),
            LabeledExample([], [], False)]
    gens = [["NOANS", "EOS"], ["V1", "EOS"], ["NOANS", "EOS"], ["V2", "EOS"]]
    st_ = refusal_stats(gens, gold)
    assert st_.refusal_rate == 0.5
    assert st_.precision == 0.5
    assert st_.recall == 0.5
    none = refusal_stats([["V1"]] * 4, gold)
    assert none.precision is None and none.recall == 0.0
    with pytest.raises(ValueError):
        refusal_stats(gens[:2], gold)


def test_task_accuracy_reads_final_answer():
    gold = [scratchpad_example(17, 25, False)]
    assert task_accuracy([["4", "2", "EOS"]], gold) == 1.0
    assert task_accuracy([carry_trace(17, 25) + ["4", "2", "EOS"]], gold) == 1.0
    assert task_accuracy([["4", "3", "EOS"]], gold) == 0.0
