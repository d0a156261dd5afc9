import json
from pathlib import Path

import httpx
import numpy as np
import pytest

from clucert.embedding import HashingEmbedder
from clucert.model_client import (
    OTHER,
    TASKS,
    HttpChatTransport,
    LipschitzSynthetic,
    LLMClassifier,
    ResponseCache,
    StubTransport,
    TransportError,
    cache_key,
    classify,
    get_task,
    normalize_number,
    parse_response,
    query_text,
    render_prompt,
    stub_classifier,
)

GOLDEN = Path(__file__).parent / "golden"
INPUTS = {
    "sentiment2": "good movie",
    "topic4": "Stocks rally as tech earnings beat forecasts",
    "math_numeric": "Tom has 3 apples and buys 4 more. How many apples does he have?",
}


@pytest.mark.parametrize("task_id", sorted(TASKS))
def test_prompt_matches_golden(task_id):
    rendered = render_prompt(get_task(task_id), INPUTS[task_id]).rendered
    assert rendered.encode() == (GOLDEN / f"{task_id}.txt").read_bytes()


def test_prompt_structure():
    env = render_prompt(get_task("sentiment2"), "good movie")
    r = env.rendered
    assert r.index("###Instruction:") < r.index("###Input:") < r.index("###Response:")
    assert r == render_prompt(get_task("sentiment2"), "good movie").rendered
    for name in ("Sports", "World", "Technology", "Business"):
        assert name in get_task("topic4").instruction_text
    with pytest.raises(ValueError):
        render_prompt(get_task("sentiment2"), "")
    with pytest.raises(ValueError):
        get_task("nope")


@pytest.mark.parametrize(
    "text,task,expected",
    [
        ("The sentiment is Negative.", "sentiment2", "negative"),
        ("positive and negative", "sentiment2", OTHER),
        ("no idea", "sentiment2", OTHER),
        ("POSITIVE!", "sentiment2", "positive"),
        ("nonpositive", "sentiment2", OTHER),
        ("Category: Sports", "topic4", "Sports"),
        ("World or Business", "topic4", OTHER),
        ("So the answer is 42.", "math_numeric", "42"),
        ("it costs $1,200.50 then -3", "math_numeric", "-3"),
        ("Total: 1,200.50", "math_numeric", "1200.5"),
        ("about 7.0", "math_numeric", "7"),
        ("none", "math_numeric", OTHER),
    ],
)
def test_parse_response(text, task, expected):
    assert parse_response(text, get_task(task)) == expected


def test_numeric_labels():
    task = get_task("math_numeric")
    assert task.validate_label("1,000") == "1000"
    assert normalize_number("abc") is None
    with pytest.raises(ValueError):
        task.validate_label("many")
    with pytest.raises(ValueError):
        get_task("sentiment2").validate_label("neutral")


def test_classify_and_cache(tmp_path):
    transport = StubTransport(lambda p: "positive")
    cache = ResponseCache(tmp_path / "cache.jsonl")
    task = get_task("sentiment2")
    assert classify(("good", "movie"), task, transport, cache) == "positive"
    assert classify("good movie", task, transport, cache) == "positive"
    assert transport.calls == 1 and cache.hits == 1
    # a reloaded cache answers without the transport
    reloaded = ResponseCache(tmp_path / "cache.jsonl")
    silent = StubTransport(lambda p: pytest.fail("transport contacted"))
    assert classify("good movie", task, silent, reloaded) == "positive"
    line = json.loads((tmp_path / "cache.jsonl").read_text().splitlines()[0])
    assert line["key"] == cache_key("stub://", "stub", render_prompt(task, "good movie").rendered, 0.0)


def test_cache_prompt_recheck(tmp_path):
    cache = ResponseCache()
    cache.put("e", "m", "prompt", 0.0, "yes")
    key = cache_key("e", "m", "prompt", 0.0)
    cache._entries[key].prompt = "different"  # simulate a digest collision
    assert cache.get("e", "m", "prompt", 0.0) is None


def test_cache_skips_corrupt_lines(tmp_path):
    path = tmp_path / "c.jsonl"
    cache = ResponseCache(path)
    cache.put("e", "m", "p", 0.0, "r")
    with open(path, "a") as fh:
        fh.write("{not json\n")
    assert len(ResponseCache(path)) == 1


def test_failures_become_other():
    def boom(prompt):
        raise RuntimeError("down")

    transport = StubTransport(boom)
    assert classify("good", get_task("sentiment2"), transport, retries=2, backoff=0) == OTHER
    assert transport.calls == 3
    with pytest.raises(TransportError):
        query_text("p", StubTransport(boom), retries=0, backoff=0)
    clf = LLMClassifier(get_task("sentiment2"), StubTransport(boom), retries=0, backoff=0)
    assert clf(("x",)) == OTHER and clf.failures == 1


def test_http_transport_wire_format(monkeypatch):
    monkeypatch.setenv("CLUCERT_API_KEY", "k")
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["body"] = json.loads(request.content)
        seen["auth"] = request.headers.get("authorization")
        return httpx.Response(200, json={"choices": [{"message": {"content": "negative"}}]})

    t = HttpChatTransport("http://llm.test/", "gpt-x", client=httpx.Client(transport=httpx.MockTransport(handler)))
    assert t.complete("hello") == "negative"
    assert seen["url"] == "http://llm.test/v1/chat/completions"
    assert seen["body"] == {"model": "gpt-x", "messages": [{"role": "user", "content": "hello"}], "temperature": 0.0}
    assert seen["auth"] == "Bearer k"


def test_http_transport_errors():
    t = HttpChatTransport(
        "http://llm.test", "m", api_key="",
        client=httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(200, json={}))),
    )
    with pytest.raises(TransportError):
        t.complete("x")


def test_stub_rules():
    assert stub_classifier("constant", label="A")(("anything",)) == "A"
    pos = stub_classifier("position", position=1, value="good")
    assert pos(("good", "film")) == "A" and pos(("[MASK]", "film")) == "B"
    kw = stub_classifier("keyword", keywords=["great"], positive="p", negative="n")
    assert kw(("a", "great")) == "p" and kw(("a",)) == "n"
    h = stub_classifier("hash", labels=["x", "y"])
    assert h(("a", "b")) == h(("a", "b")) and h(("a",)) in ("x", "y")
    with pytest.raises(ValueError):
        stub_classifier("oracle")


def test_lipschitz_synthetic():
    clf = stub_classifier("lipschitz", lipschitz=3.0, seed=4)
    assert isinstance(clf, LipschitzSynthetic)
    # distance zero -> equal labels (word order is invisible to the embedder)
    assert clf(("a", "b", "c")) == clf(("c", "b", "a"))
    v = HashingEmbedder().embed_batch([("a", "b")])[0]
    assert clf.projection(("a", "b")) == pytest.approx(float(v @ clf.direction))
    assert abs(clf.threshold - clf.center) <= 0.5 / clf.lipschitz
    with pytest.raises(ValueError):
        LipschitzSynthetic(lipschitz=0)


def test_lipschitz_disagreement_rate():
    # over the threshold draw, P[f(x) != f(y)] <= L * |proj(x) - proj(y)|
    x, y = ("good", "movie", "plot"), ("good", "movie", "story")
    L = 2.0
    disagree = 0
    trials = 4000
    for seed in range(trials):
        clf = LipschitzSynthetic(direction=np.ones(64), lipschitz=L, seed=seed)
        disagree += clf(x) != clf(y)
    gap = abs(LipschitzSynthetic(direction=np.ones(64)).projection(x) - LipschitzSynthetic(direction=np.ones(64)).projection(y))
    assert disagree / trials <= L * gap + 0.03
