import pytest
from hypothesis import given
from hypothesis import strategies as st

from clucert.model_client import StubTransport
from clucert.refine import (
    IMPORTANCE_PROMPTS,
    ImportanceScores,
    LLMScorer,
    OfflineScorer,
    parse_levels,
    refine,
    score_importance,
)


def test_offline_scorer_formula():
    sent = ("a", "great", "movie")
    scores = score_importance(sent, OfflineScorer()).scores
    assert scores == pytest.approx((1 + 0.002, 5 + 0.001, 5 + 0.0))
    assert score_importance(("x",), OfflineScorer()).scores == (1.0,)


def test_refine_examples():
    sent = tuple("abcd")
    ident = refine(sent, ImportanceScores((1, 2, 3, 4), "t"), 10)
    assert ident.tokens == sent and ident.kept_positions == (1, 2, 3, 4)
    dec = refine(tuple("abcde"), ImportanceScores((5, 4, 3, 2, 1), "t"), 3)
    assert dec.tokens == ("a", "b", "c")
    tied = refine(sent, ImportanceScores((1, 1, 1, 1), "t"), 2)
    assert tied.kept_positions == (1, 2)
    mixed = refine(sent, ImportanceScores((0, 9, 0, 8), "t"), 2)
    assert mixed.tokens == ("b", "d") and mixed.original_length == 4


def test_refine_errors():
    with pytest.raises(ValueError):
        refine(("a",), ImportanceScores((1, 2), "t"), 1)
    with pytest.raises(ValueError):
        refine(("a",), ImportanceScores((1,), "t"), 0)
    with pytest.raises(ValueError):
        ImportanceScores((float("nan"),), "t")
    with pytest.raises(ValueError):
        score_importance((), OfflineScorer())


@given(
    st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=30),
    st.integers(1, 35),
    st.floats(0.01, 100),
)
def test_refine_properties(scores, L, c):
    sent = tuple(f"t{i}" for i in range(len(scores)))
    out = refine(sent, ImportanceScores(tuple(scores), "t"), L)
    assert len(out.tokens) == min(L, len(sent))
    assert list(out.kept_positions) == sorted(set(out.kept_positions))
    assert all(sent[p - 1] == t for p, t in zip(out.kept_positions, out.tokens))
    scaled = refine(sent, ImportanceScores(tuple(c * s for s in scores), "t"), L)
    # selection is scale invariant unless rounding collapses distinct scores
    if len(set(c * s for s in scores)) == len(set(scores)):
        assert scaled.kept_positions == out.kept_positions


def test_parse_levels():
    sent = ("the", "well-made", "film:", "bad")
    text = "\n".join([
        "- the: Not Important",
        "1. well-made: Very Important",
        "film:: Important",
        "garbage line",
        "bad: Less Important.",
    ])
    assert parse_levels(text, sent) == [0, 3, 2, 1]
    assert parse_levels("nothing useful", sent) == [0, 0, 0, 0]


def test_llm_scorer_all_very_important():
    sent = ("good", "movie")
    transport = StubTransport(lambda p: "good: Very Important\nmovie: Very Important")
    scores = LLMScorer(transport)(sent)
    assert scores.scores == (3.0, 3.0)
    assert transport.calls == len(IMPORTANCE_PROMPTS)


def test_llm_scorer_averages_and_defaults_missing():
    sent = ("good", "movie")
    prompts = ("first", "second")

    def respond(prompt):
        return "good: Important\nmovie: Less Important" if prompt.startswith("first") else "good: Very Important"

    scores = LLMScorer(StubTransport(respond), prompts=prompts)(sent)
    assert scores.scores == (2.5, 0.5)
    assert scores.scorer_id == "llm-2prompt-mean"
