"""Scene-based differential prompts and the closed-vocabulary tokenizer."""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass

LEVELS = ("bad", "poor", "fair", "good", "perfect")


class Scene(str, enum.Enum):
    NATURAL_QUALITY = "natural-quality"
    AI_GENERATED_QUALITY = "ai-generated-quality"
    UNDERWATER_QUALITY = "underwater-quality"
    FACE_QUALITY = "face-quality"
    NATURAL_AESTHETICS = "natural-aesthetics"
    GENERAL = "general"

    @classmethod
    def parse(cls, value: "str | Scene") -> "Scene":
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"unknown scene {value!r}; expected one of {[s.value for s in cls]}") from None


# scene -> (scene word as printed in the prompt table, assessment axis)
_SCENE_WORDS = {
    Scene.NATURAL_QUALITY: ("natural", "quality"),
    Scene.AI_GENERATED_QUALITY: ("AI-generated", "quality"),
    Scene.UNDERWATER_QUALITY: ("underwater", "quality"),
    Scene.FACE_QUALITY: ("face", "quality"),
    Scene.NATURAL_AESTHETICS: ("natural", "aesthetics"),
}

PROMPT_STRATEGIES = ("sdp", "naive", "general", "quality")


@dataclass(frozen=True)
class PromptSet:
    levels: tuple[str, ...]

    def __post_init__(self):
        if len(self.levels) != 5:
            raise ValueError(f"a prompt set needs exactly 5 levels, got {len(self.levels)}")


NAIVE = PromptSet(tuple(f"{level} image" for level in LEVELS))


def prompts_for_scene(scene: Scene) -> PromptSet:
    scene = Scene.parse(scene)
    if scene is Scene.GENERAL:
        return NAIVE
    word, axis = _SCENE_WORDS[scene]
    return PromptSet(tuple(f"{word} {level}-{axis} image" for level in LEVELS))


def axis_of(scene: Scene) -> str:
    return "aesthetics" if Scene.parse(scene) is Scene.NATURAL_AESTHETICS else "quality"


def prompts_for(strategy: str, scene: Scene) -> PromptSet:
    """Prompt set a sample of ``scene`` sees under a prompting strategy.

    ``sdp`` uses the scene table, ``naive`` the plain level words, ``general``
    swaps the scene word for "general", and ``quality`` drops scene word and
    the trailing noun.
    """
    if strategy == "sdp":
        return prompts_for_scene(scene)
    if strategy == "naive":
        return NAIVE
    if strategy == "general":
        axis = axis_of(scene)
        return PromptSet(tuple(f"general {level}-{axis} image" for level in LEVELS))
    if strategy == "quality":
        return PromptSet(tuple(f"{level}-quality" for level in LEVELS))
    raise ValueError(f"unknown prompt strategy {strategy!r}; expected one of {PROMPT_STRATEGIES}")


PAD, UNK = "<pad>", "<unk>"
_SPLIT = re.compile(r"[\s\-]+")


def _words(prompt: str) -> list[str]:
    return [w for w in _SPLIT.split(prompt.lower()) if w]


def prompt_lexicon() -> list[str]:
    words: set[str] = set()
    for scene in Scene:
        for strategy in PROMPT_STRATEGIES:
            for text in prompts_for(strategy, scene).levels:
                words.update(_words(text))
    return sorted(words)


@dataclass(frozen=True)
class Vocabulary:
    words: tuple[str, ...]

    @classmethod
    def build(cls, lexicon=None) -> "Vocabulary":
        return cls((PAD, UNK) + tuple(sorted(set(lexicon or prompt_lexicon()))))

    @property
    def size(self) -> int:
        return len(self.words)

    @property
    def unk_id(self) -> int:
        return 1

    def id(self, word: str) -> int:
        try:
            return self._index[word]
        except KeyError:
            return self.unk_id

    @property
    def _index(self) -> dict[str, int]:
        cached = self.__dict__.get("_cache")
        if cached is None:
            cached = {w: i for i, w in enumerate(self.words)}
            object.__setattr__(self, "_cache", cached)
        return cached


def tokenize(vocab: Vocabulary, prompt: str) -> list[int]:
    return [vocab.id(w) for w in _words(prompt)]


def prompt_table() -> str:
    """Printable scene -> prompt table."""
    lines = []
    for scene in Scene:
        if scene is Scene.GENERAL:
            continue
        lines.append(f"{scene.value}:")
        lines.extend(f"  {text}" for text in prompts_for_scene(scene).levels)
    lines.append("naive:")
    lines.extend(f"  {text}" for text in NAIVE.levels)
    return "\n".join(lines) + "\n"
