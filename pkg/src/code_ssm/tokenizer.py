"""
Byte-level tokenizer.

Five special tokens come first and every UTF-8 byte maps to ``byte + 5``, so
any text round-trips and the vocabulary is fixed at 261 ids.
"""

from typing import Iterable, List, Sequence

import numpy as np

from .exceptions import ShapeError


PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
MASK_ID = 3
UNK_ID = 4
SPECIAL_IDS = (PAD_ID, CLS_ID, SEP_ID, MASK_ID, UNK_ID)
BYTE_OFFSET = len(SPECIAL_IDS)
BYTE_VOCAB_SIZE = BYTE_OFFSET + 256


class ByteTokenizer:
    """Maps UTF-8 text to ids and back."""

    pad_id = PAD_ID
    cls_id = CLS_ID
    sep_id = SEP_ID
    mask_id = MASK_ID
    unk_id = UNK_ID
    special_ids = SPECIAL_IDS

    def __init__(self, vocab_size: int = BYTE_VOCAB_SIZE):
        if vocab_size < BYTE_VOCAB_SIZE:
            raise ShapeError(f"byte tokenizer needs vocab_size >= {BYTE_VOCAB_SIZE}, got {vocab_size}")
        self.vocab_size = vocab_size

    @property
    def first_regular_id(self) -> int:
        return BYTE_OFFSET

    def encode(self, text: str, add_special: bool = False) -> List[int]:
        ids = [b + BYTE_OFFSET for b in text.encode("utf-8")]
        return [CLS_ID] + ids + [SEP_ID] if add_special else ids

    def decode(self, ids: Iterable[int]) -> str:
        data = bytes(i - BYTE_OFFSET for i in ids if BYTE_OFFSET <= i < BYTE_VOCAB_SIZE)
        return data.decode("utf-8", errors="replace")

    def encode_batch(self, texts: Sequence[str], length: int, add_special: bool = True) -> np.ndarray:
        """Encode, truncate to ``length`` and right-pad with [PAD]."""
        batch = np.full((len(texts), length), PAD_ID, dtype=np.int64)
        for row, text in enumerate(texts):
            ids = self.encode(text, add_special=add_special)[:length]
            batch[row, :len(ids)] = ids
        return batch

    def encode_pair(self, first: str, second: str, length: int) -> List[int]:
        """[CLS] first [SEP] second [SEP], truncated to ``length``."""
        ids = [CLS_ID] + self.encode(first) + [SEP_ID] + self.encode(second) + [SEP_ID]
        return ids[:length]
