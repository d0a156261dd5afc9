import pytest

from clucert.embedding import HashingEmbedder
from clucert.model_client import LLMClassifier, get_task
from clucert.refine import LLMScorer, OfflineScorer
from clucert.settings import Settings, build_classifier, build_embedder, build_scorer, load_settings


def test_load_settings_layers(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('[clucert]\nmask-rate = 0.7\nsamples_n = 10\ngamma = "estimate"\n')
    s = load_settings(path, {"samples_n": 20, "alpha": None})
    assert s.mask_rate == 0.7 and s.samples_n == 20 and s.alpha == 0.05
    cfg = s.smoothing_config()
    assert cfg.gamma.mode == "estimate" and cfg.samples_predict == 20
    flat = tmp_path / "flat.toml"
    flat.write_text("tau = 0.5\n")
    assert load_settings(flat).tau == 0.5
    flat.write_text("bogus = 1\n")
    with pytest.raises(ValueError):
        load_settings(flat)


def test_build_components():
    s = Settings()
    task = get_task("topic4")
    assert isinstance(build_classifier("llm", task, s), LLMClassifier)
    assert build_classifier("constant:World", task, s)(("x",)) == "World"
    assert build_classifier("keyword:Sports:World:goal", task, s)(("goal",)) == "Sports"
    assert build_classifier("position:1:x:Sports:World", task, s)(("x",)) == "Sports"
    assert build_classifier("hash", task, s)(("x",)) in task.label_set
    assert isinstance(build_embedder("hashing", s), HashingEmbedder)
    assert isinstance(build_scorer("offline", s), OfflineScorer)
    assert isinstance(build_scorer("llm", s), LLMScorer)
    for bad in (lambda: build_classifier("magic", task, s), lambda: build_embedder("x", s), lambda: build_scorer("x", s)):
        with pytest.raises(ValueError):
            bad()
