"""Shipped phrase lists: neutral sketch descriptions, handcrafted prompts,
and connecting words. One phrase per line, UTF-8."""

from importlib import resources

_FILES = {
    "neutral_text": "neutral_text.txt",
    "handcrafted_prompt": "handcrafted_prompts.txt",
    "connecting_word": "connecting_words.txt",
}

PHRASE_KINDS = tuple(_FILES)


def load_phrases(kind: str) -> list[str]:
    if kind not in _FILES:
        raise KeyError(f"unknown phrase kind {kind!r}; known: {PHRASE_KINDS}")
    text = resources.files(__package__).joinpath(_FILES[kind]).read_text(encoding="utf-8")
    return [line for line in text.splitlines() if line.strip()]
