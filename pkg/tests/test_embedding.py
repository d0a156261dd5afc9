import hashlib
import json

import httpx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from clucert.embedding import (
    EmbeddingError,
    HashingEmbedder,
    RemoteEmbedder,
    cosine,
    cosine_distance,
    embed,
    hash_bucket,
)

words = st.text(alphabet="abcdefghij", min_size=1, max_size=6)
vectors = st.lists(st.floats(-10, 10, allow_nan=False), min_size=4, max_size=4).filter(
    lambda v: np.linalg.norm(v) > 1e-3
)


def _bucket_by_hand(token, dim=64):
    return int(hashlib.blake2b(token.encode(), digest_size=8).hexdigest(), 16) % dim


def test_single_token_vector_by_hand():
    vec = embed(("movie",), HashingEmbedder())
    expected = np.zeros(64)
    expected[_bucket_by_hand("movie")] = 1.0
    assert np.array_equal(vec, expected)


def test_repeated_tokens_by_hand():
    e = HashingEmbedder(dimension=16)
    vec = embed(("a", "b", "a"), e)
    expected = np.zeros(16)
    expected[_bucket_by_hand("a", 16)] += 2
    expected[_bucket_by_hand("b", 16)] += 1
    assert np.allclose(vec, expected / np.linalg.norm(expected))
    assert hash_bucket("a", 16) == _bucket_by_hand("a", 16)


def test_embed_is_deterministic_and_order_free():
    e = HashingEmbedder()
    a = embed(("the", "good", "film"), e)
    assert np.array_equal(a, embed(("the", "good", "film"), e))
    assert np.array_equal(a, embed(("film", "the", "good"), e))


def test_empty_sentence_rejected():
    with pytest.raises(ValueError):
        embed((), HashingEmbedder())
    with pytest.raises(ValueError):
        HashingEmbedder().embed_batch([("a",), ()])


@given(st.lists(words, min_size=1, max_size=8), st.integers(0, 7), words)
def test_substitution_touches_at_most_two_dimensions(tokens, pos, new):
    e = HashingEmbedder()
    pos %= len(tokens)
    edited = list(tokens)
    old = edited[pos]
    edited[pos] = new
    diff = np.flatnonzero(e.counts(tokens) != e.counts(edited))
    assert set(diff) <= {hash_bucket(old, 64), hash_bucket(new, 64)}


def test_cosine_examples():
    v = np.array([1.0, 2.0, 3.0])
    assert cosine(v, v) == pytest.approx(1.0)
    assert cosine(np.array([1.0, 0]), np.array([0, 1.0])) == 0.0
    assert cosine(v, -v) == pytest.approx(-1.0)
    assert cosine_distance(v, v) == pytest.approx(0.0)


def test_cosine_errors():
    with pytest.raises(ValueError):
        cosine(np.ones(3), np.ones(4))
    with pytest.raises(ValueError):
        cosine(np.zeros(3), np.ones(3))


@given(vectors, vectors, st.floats(0.01, 100))
def test_cosine_symmetric_and_scale_invariant(a, b, c):
    a, b = np.array(a), np.array(b)
    assert cosine(a, b) == pytest.approx(cosine(b, a), abs=1e-12)
    assert cosine(c * a, b) == pytest.approx(cosine(a, b), abs=1e-9)
    assert -1.0 <= cosine(a, b) <= 1.0


# -- remote -----------------------------------------------------------------


def _server(handler):
    return httpx.Client(transport=httpx.MockTransport(handler))


def test_remote_round_trip(monkeypatch):
    monkeypatch.setenv("CLUCERT_EMBED_API_KEY", "sekrit")
    seen = []

    def handler(request):
        body = json.loads(request.content)
        seen.append((body, request.headers.get("authorization")))
        return httpx.Response(200, json={"data": [{"embedding": [len(t), 1.0]} for t in body["input"]]})

    emb = RemoteEmbedder("http://embed.test/v1", batch_size=2, model="m", client=_server(handler))
    out = emb.embed_batch([("a", "b"), ("ccc",), ("d",)])
    assert out.tolist() == [[3, 1], [3, 1], [1, 1]]
    assert emb.dimension == 2
    assert all(auth == "Bearer sekrit" for _, auth in seen)
    assert sorted(len(b["input"]) for b, _ in seen) == [1, 2]
    assert all(b["model"] == "m" for b, _ in seen)


def test_remote_retries_then_succeeds():
    calls = {"n": 0}

    def handler(request):
        calls["n"] += 1
        if calls["n"] < 3:
            return httpx.Response(503)
        return httpx.Response(200, json={"data": [{"embedding": [1.0, 0.0]}]})

    emb = RemoteEmbedder("http://embed.test", retries=3, backoff=0, client=_server(handler))
    assert emb.embed_batch([("x",)]).shape == (1, 2)
    assert calls["n"] == 3


def test_remote_failure_carries_metadata():
    emb = RemoteEmbedder("http://embed.test", retries=1, backoff=0, client=_server(lambda r: httpx.Response(500)))
    with pytest.raises(EmbeddingError) as info:
        emb.embed_batch([("x",)])
    assert info.value.attempts == 2 and info.value.status == 500


def test_remote_auth_failure_not_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(401)

    emb = RemoteEmbedder("http://embed.test", retries=3, backoff=0, client=_server(handler))
    with pytest.raises(EmbeddingError) as info:
        emb.embed_batch([("x",)])
    assert info.value.status == 401 and len(calls) == 1


def test_remote_rejects_wrong_count():
    emb = RemoteEmbedder(
        "http://embed.test", backoff=0,
        client=_server(lambda r: httpx.Response(200, json={"data": []})),
    )
    with pytest.raises(EmbeddingError):
        emb.embed_batch([("x",)])
