"""Masked-context extraction from a pretrained masked language model.

Words are aligned to model subwords one by one; an occurrence is exported
only when its word maps to exactly one known subword (the mask replaces a
single token, and answers live in a single-token regime), otherwise it is
skipped and counted.  Sequences longer than the model budget are truncated
to a symmetric window around the mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch
from transformers import AutoModelForMaskedLM, AutoTokenizer


@dataclass
class SidecarConfig:
    model: str
    layer: int = 11
    batch_size: int = 16
    max_length: int = 128
    mask_token: str | None = None     # defaults to the tokenizer's mask token

    @property
    def layer_tag(self) -> str:
        return f"hidden-{self.layer}"


@dataclass
class MaskedItem:
    """One encoded sequence with a single mask position plus caller payload."""
    input_ids: list[int]
    mask_pos: int
    payload: tuple


class Extractor:

    def __init__(self, config: SidecarConfig):
        self.config = config
        self.tokenizer = AutoTokenizer.from_pretrained(config.model)
        self.model = AutoModelForMaskedLM.from_pretrained(config.model)
        self.model.eval()
        n_layers = self.model.config.num_hidden_layers
        if not 0 <= config.layer <= n_layers:
            raise ValueError(
                f"layer {config.layer} invalid for a {n_layers}-layer model")
        self.mask_token = config.mask_token or self.tokenizer.mask_token
        self.mask_id = self.tokenizer.convert_tokens_to_ids(self.mask_token)
        self.unk_id = self.tokenizer.unk_token_id
        self._word_cache: dict[str, list[int]] = {}

    @property
    def dim(self) -> int:
        return self.model.config.hidden_size

    # -- encoding -------------------------------------------------------------

    def word_ids(self, word: str) -> list[int]:
        ids = self._word_cache.get(word)
        if ids is None:
            ids = self.tokenizer(word, add_special_tokens=False)["input_ids"]
            self._word_cache[word] = ids
        return ids

    def single_token_id(self, word: str) -> int | None:
        """The word's model token id, or None if it is not a single known
        subword."""
        ids = self.word_ids(word)
        if len(ids) != 1 or ids[0] == self.unk_id:
            return None
        return ids[0]

    def encode_masked_sentence(self, words: Sequence[str],
                               target_index: int) -> tuple[list[int], int] | None:
        """Encode a sentence with the word at ``target_index`` masked.
        Returns (input ids with specials, mask position) or None when the
        target word is not alignable to one known subword."""
        if self.single_token_id(words[target_index]) is None:
            return None
        ids: list[int] = []
        mask_pos = -1
        for i, word in enumerate(words):
            if i == target_index:
                mask_pos = len(ids)
                ids.append(self.mask_id)
            else:
                ids.extend(self.word_ids(word))
        return self._finish(ids, mask_pos)

    def encode_masked_text(self, text: str) -> tuple[list[int], int] | None:
        """Encode raw text containing the mask marker exactly once; None when
        the marker count is wrong."""
        parts = text.split(self.mask_token)
        if len(parts) != 2:
            return None
        left = self.tokenizer(parts[0], add_special_tokens=False)["input_ids"]
        right = self.tokenizer(parts[1], add_special_tokens=False)["input_ids"]
        return self._finish(left + [self.mask_id] + right, len(left))

    def _finish(self, ids: list[int], mask_pos: int) -> tuple[list[int], int]:
        budget = self.config.max_length - 2
        if len(ids) > budget:
            # symmetric window around the mask, clamped at the ends
            start = mask_pos - (budget - 1) // 2
            start = max(0, min(start, len(ids) - budget))
            ids = ids[start:start + budget]
            mask_pos -= start
        ids = [self.tokenizer.cls_token_id] + ids + [self.tokenizer.sep_token_id]
        return ids, mask_pos + 1

    # -- batched model calls ----------------------------------------------------

    def _batches(self, items: Iterable[MaskedItem]) -> Iterator[list[MaskedItem]]:
        batch: list[MaskedItem] = []
        for item in items:
            batch.append(item)
            if len(batch) == self.config.batch_size:
                yield batch
                batch = []
        if batch:
            yield batch

    def _forward(self, batch: list[MaskedItem]) -> tuple[torch.Tensor, torch.Tensor]:
        width = max(len(item.input_ids) for item in batch)
        pad = self.tokenizer.pad_token_id
        input_ids = torch.full((len(batch), width), pad, dtype=torch.long)
        attention = torch.zeros((len(batch), width), dtype=torch.long)
        for i, item in enumerate(batch):
            input_ids[i, :len(item.input_ids)] = torch.tensor(item.input_ids)
            attention[i, :len(item.input_ids)] = 1
        with torch.no_grad():
            out = self.model(input_ids=input_ids, attention_mask=attention,
                             output_hidden_states=True)
        rows = torch.arange(len(batch))
        positions = torch.tensor([item.mask_pos for item in batch])
        hidden = out.hidden_states[self.config.layer][rows, positions]
        logits = out.logits[rows, positions]
        return hidden, logits

    def embeddings(self, items: Iterable[MaskedItem]) -> Iterator[tuple[tuple, np.ndarray]]:
        """Yield (payload, hidden-state vector) per item, batched."""
        for batch in self._batches(items):
            hidden, _ = self._forward(batch)
            vectors = hidden.to(torch.float32).cpu().numpy()
            for item, vec in zip(batch, vectors):
                yield item.payload, vec

    def mask_logits(self, items: Iterable[MaskedItem]) -> Iterator[tuple[tuple, np.ndarray]]:
        """Yield (payload, mask-position logits over the model vocab)."""
        for batch in self._batches(items):
            _, logits = self._forward(batch)
            arr = logits.to(torch.float64).cpu().numpy()
            for item, row in zip(batch, arr):
                yield item.payload, row
