"""Byte-level tokenizer. Token 0 (NUL) is reserved as padding."""

import numpy as np

PAD_ID = 0
VOCAB_SIZE = 256


def encode(text: str) -> np.ndarray:
    data = text.encode("utf-8").replace(b"\x00", b"")
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def decode(tokens) -> str:
    data = bytes(int(t) for t in tokens if int(t) != PAD_ID)
    return data.decode("utf-8", errors="replace")
