"""Lower-cased byte-level tokenizer.

The desk-scale backbones ship with a self-contained tokenizer: text is
lower-cased and split into UTF-8 bytes, so every string is encodable and
round-trips exactly. Special ids sit above the byte range.
"""

from __future__ import annotations

from .errors import InputError

BYTE_VOCAB = 256
PAD_ID = 256
BOS_ID = 257
EOS_ID = 258
VOCAB_SIZE = 259


class ByteTokenizer:
    """Deterministic byte tokenizer; one token per UTF-8 byte of the
    lower-cased input."""

    vocab_size = VOCAB_SIZE
    pad_id = PAD_ID
    bos_id = BOS_ID
    eos_id = EOS_ID

    def encode(self, text: str) -> list[int]:
        if not isinstance(text, str):
            raise InputError(f"expected str, got {type(text).__name__}")
        stripped = text.strip()
        if not stripped:
            raise InputError("cannot tokenize empty text")
        return list(stripped.lower().encode("utf-8"))

    def decode(self, ids: list[int]) -> str:
        payload = bytes(i for i in ids if i < BYTE_VOCAB)
        return payload.decode("utf-8", errors="replace")

    def count(self, text: str) -> int:
        return len(self.encode(text))
