"""Masked-context embeddings.

The contract: embed a sentence with one position masked, producing a vector
that depends only on the surrounding tokens, never on the token that was
masked.  Two kinds exist: the deterministic ``reference`` embedder below,
and ``imported`` embeddings produced externally in the datastore exchange
format (validated on import, see :mod:`bknn.datastore`).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_MASK_TOKEN = "[MASK]"

# Context window: tokens at signed offsets [-WINDOW, WINDOW] \ {0} from the
# mask contribute features.
WINDOW = 8


@dataclass(frozen=True)
class EmbedderConfig:
    embedder_kind: str = "reference"      # "reference" | "imported"
    dim: int = 64
    layer_tag: str = "reference"          # provenance label, recorded in artifacts
    mask_token: str = DEFAULT_MASK_TOKEN

    def __post_init__(self):
        if self.dim <= 0:
            raise ValueError(f"dim must be positive, got {self.dim}")
        if self.embedder_kind not in ("reference", "imported"):
            raise ValueError(f"unknown embedder_kind {self.embedder_kind!r}")

    def to_dict(self) -> dict:
        return {"embedder_kind": self.embedder_kind, "dim": self.dim,
                "layer_tag": self.layer_tag, "mask_token": self.mask_token}

    @classmethod
    def from_dict(cls, raw: dict) -> "EmbedderConfig":
        return cls(embedder_kind=raw["embedder_kind"], dim=raw["dim"],
                   layer_tag=raw["layer_tag"], mask_token=raw["mask_token"])


def _clamp(offset: int, lo: int, hi: int) -> int:
    return max(lo, min(hi, offset))


class ReferenceEmbedder:
    """Feature-hashed bag of positional context features.

    Each context token ``t`` at signed offset ``o`` within the window is
    hashed (stable blake2b of the pair) to one coordinate, which receives a
    distance-decayed weight ``1/(1+|o|)``.  The result is L2-normalized; a
    mask with no context at all yields the zero vector.  Bitwise
    deterministic across runs and platforms.
    """

    def __init__(self, config: EmbedderConfig):
        if config.dim < 16:
            raise ValueError(f"reference embedder needs dim >= 16, got {config.dim}")
        self.config = config
        self._bucket_cache: dict[tuple[str, int], int] = {}

    def _bucket(self, token: str, offset: int) -> int:
        key = (token, offset)
        b = self._bucket_cache.get(key)
        if b is None:
            digest = hashlib.blake2b(f"{offset}\x1f{token}".encode("utf-8"),
                                     digest_size=8).digest()
            b = int.from_bytes(digest, "little") % self.config.dim
            self._bucket_cache[key] = b
        return b

    def embed_masked(self, tokens: Sequence[str], mask_position: int) -> np.ndarray:
        """Embed ``tokens`` with the token at ``mask_position`` masked out.

        The token at ``mask_position`` itself is ignored (offset 0 is outside
        the feature window), so the output is exactly independent of it.
        """
        if not 0 <= mask_position < len(tokens):
            raise ValueError(
                f"mask_position {mask_position} out of range for {len(tokens)} tokens")
        acc = np.zeros(self.config.dim, dtype=np.float64)
        for offset in range(-WINDOW, WINDOW + 1):
            if offset == 0:
                continue
            pos = mask_position + offset
            if not 0 <= pos < len(tokens):
                continue
            bucket = self._bucket(tokens[pos], _clamp(offset, -WINDOW, WINDOW))
            acc[bucket] += 1.0 / (1.0 + abs(offset))
        norm = float(np.linalg.norm(acc))
        if norm > 0.0:
            acc /= norm
        return acc.astype(np.float32)


def embed_masked_context(tokens: Sequence[str], mask_position: int,
                         embedder: ReferenceEmbedder) -> np.ndarray:
    """Replace the token at ``mask_position`` with the mask token and embed."""
    if not 0 <= mask_position < len(tokens):
        raise ValueError(
            f"mask_position {mask_position} out of range for {len(tokens)} tokens")
    masked = list(tokens)
    masked[mask_position] = embedder.config.mask_token
    return embedder.embed_masked(masked, mask_position)


def embed_query(tokens: Sequence[str], embedder: ReferenceEmbedder) -> np.ndarray:
    """Embed a query containing exactly one mask token; identical computation
    path as :func:`embed_masked_context` applied at the mask position."""
    mask = embedder.config.mask_token
    positions = [i for i, t in enumerate(tokens) if t == mask]
    if len(positions) != 1:
        raise ValueError(f"query must contain exactly one {mask!r}, found {len(positions)}")
    return embedder.embed_masked(tokens, positions[0])
