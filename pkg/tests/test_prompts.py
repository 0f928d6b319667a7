import pytest

from gamma_iqa.prompts import (
    LEVELS,
    NAIVE,
    PROMPT_STRATEGIES,
    PromptSet,
    Scene,
    Vocabulary,
    prompt_lexicon,
    prompt_table,
    prompts_for,
    prompts_for_scene,
    tokenize,
)


def test_face_prompts_follow_the_table():
    assert prompts_for_scene(Scene.FACE_QUALITY).levels == (
        "face bad-quality image",
        "face poor-quality image",
        "face fair-quality image",
        "face good-quality image",
        "face perfect-quality image",
    )


def test_aesthetics_prompts():
    assert prompts_for_scene(Scene.NATURAL_AESTHETICS).levels == tuple(
        f"natural {lv}-aesthetics image" for lv in ("bad", "poor", "fair", "good", "perfect")
    )


def test_ai_generated_scene_word():
    assert prompts_for_scene("ai-generated-quality").levels[0] == "AI-generated bad-quality image"


def test_general_scene_is_naive():
    assert prompts_for_scene(Scene.GENERAL).levels == ("bad image", "poor image", "fair image", "good image", "perfect image")


def test_scene_prompt_sets_are_distinct():
    sets = [prompts_for_scene(s) for s in Scene]
    assert len(set(sets)) == len(sets)


def test_strategy_variants():
    assert prompts_for("naive", Scene.FACE_QUALITY) == NAIVE
    assert prompts_for("general", Scene.FACE_QUALITY).levels[3] == "general good-quality image"
    assert prompts_for("general", Scene.NATURAL_AESTHETICS).levels[0] == "general bad-aesthetics image"
    assert prompts_for("quality", Scene.UNDERWATER_QUALITY).levels[4] == "perfect-quality"
    assert set(PROMPT_STRATEGIES) == {"sdp", "naive", "general", "quality"}
    with pytest.raises(ValueError):
        prompts_for("fancy", Scene.FACE_QUALITY)


def test_prompt_set_needs_five_levels():
    with pytest.raises(ValueError):
        PromptSet(("bad image",) * 4)
    assert len(LEVELS) == 5


def test_unknown_scene_rejected():
    with pytest.raises(ValueError, match="unknown scene"):
        Scene.parse("landscape")


def test_tokenizer_lookup_rules():
    vocab = Vocabulary.build()
    assert tokenize(vocab, "bad image") == [vocab.id("bad"), vocab.id("image")]
    assert tokenize(vocab, "face bad-quality image") == [vocab.id(w) for w in ("face", "bad", "quality", "image")]
    assert tokenize(vocab, "Face  BAD-quality") == tokenize(vocab, "face bad quality")
    assert tokenize(vocab, "zebra image") == [vocab.unk_id, vocab.id("image")]


def test_vocabulary_is_closed_and_stable():
    vocab = Vocabulary.build()
    assert vocab.words[:2] == ("<pad>", "<unk>")
    assert len(prompt_lexicon()) <= 32
    assert Vocabulary.build() == vocab
    ids = [vocab.id(w) for w in vocab.words]
    assert ids == list(range(vocab.size))
    for word in prompt_lexicon():
        assert vocab.id(word) != vocab.unk_id


def test_prompt_table_lists_every_scene():
    table = prompt_table()
    for scene in Scene:
        if scene is not Scene.GENERAL:
            assert scene.value in table
    assert "underwater perfect-quality image" in table
