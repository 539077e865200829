"""Byte-level tokenizer with reserved ids for the chat-template special tokens."""

from __future__ import annotations

import re

IMG_START = "<img>"
IMG_END = "</img>"
EOS = "</s>"
IM_START = "<|im_start|>"
IM_END = "<|im_end|>"
IMAGE_PLACEHOLDER = "<image>"

SPECIAL_TOKENS = (IMG_START, IMG_END, EOS, IM_START, IM_END, IMAGE_PLACEHOLDER)
N_BYTES = 256
VOCAB_SIZE = N_BYTES + len(SPECIAL_TOKENS)


class ByteTokenizer:
    """Bytes 0..255 map to themselves; special tokens take ids 256.. in the
    order of ``SPECIAL_TOKENS``. Decoding is the exact inverse of encoding."""

    def __init__(self):
        self.special_ids = {tok: N_BYTES + i for i, tok in enumerate(SPECIAL_TOKENS)}
        self.id_to_special = {i: tok for tok, i in self.special_ids.items()}
        # longest first so "</img>" is never read as "</" + ...
        alts = sorted(SPECIAL_TOKENS, key=len, reverse=True)
        self._pattern = re.compile("(" + "|".join(re.escape(t) for t in alts) + ")")

    @property
    def vocab_size(self) -> int:
        return VOCAB_SIZE

    def token_id(self, special: str) -> int:
        return self.special_ids[special]

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for piece in self._pattern.split(text):
            if not piece:
                continue
            sid = self.special_ids.get(piece)
            if sid is not None:
                ids.append(sid)
            else:
                ids.extend(piece.encode("utf-8"))
        return ids

    def decode(self, ids) -> str:
        out: list[str] = []
        buf = bytearray()
        for i in ids:
            i = int(i)
            if i < N_BYTES:
                buf.append(i)
                continue
            if buf:
                out.append(buf.decode("utf-8", errors="replace"))
                buf.clear()
            out.append(self.id_to_special[i])
        if buf:
            out.append(buf.decode("utf-8", errors="replace"))
        return "".join(out)
