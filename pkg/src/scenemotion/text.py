"""Template vocabulary, tokenizer and the frozen text embedding space.

Teacher pixel features and text features share one space because a class
embedding is *defined* as the encoding of the bare class name.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIALS = ("<pad>", "<unk>", "<bos>", "<eos>")

CLASS_NAMES = ("bed", "chair", "table", "sofa", "cabinet", "desk", "shelf", "toilet", "bathtub")
BACKGROUND_NAMES = ("floor", "wall")
ACTIONS = ("walk", "sit", "stand up", "lie")
ACTION_PHRASES = {"walk": "walk to", "sit": "sit on", "stand up": "stand up from", "lie": "lie on"}
RELATIONS = ("closest to", "farthest from", "near", "far from")

# extra everyday object words so the table answers open-vocabulary queries beyond the palette
_EXTRA = ("lamp", "door", "window", "sink", "counter", "curtain", "pillow", "picture",
          "refrigerator", "television", "monitor", "keyboard", "bin", "box", "stool",
          "bench", "dresser", "nightstand", "armchair", "bookshelf", "room", "a", "and",
          "go", "object", "next", "left", "right", "front", "behind", "of", "in")


def lexicon() -> list[str]:
    words: list[str] = []
    for phrase in ACTION_PHRASES.values():
        words += phrase.split()
    words += ["the", "that", "is"]
    for rel in RELATIONS:
        words += rel.split()
    words += list(CLASS_NAMES) + list(BACKGROUND_NAMES) + list(_EXTRA)
    seen: dict[str, None] = {}
    for w in words:
        seen.setdefault(w)
    return list(seen)


class Vocabulary:
    def __init__(self, words: list[str] | None = None):
        words = lexicon() if words is None else list(words)
        self.tokens = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        self.ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def tokenize(self, text: str, width: int = 16) -> tuple[np.ndarray, int]:
        """Ids of length ``width`` (BOS ... EOS PAD...) and the unpadded length."""
        if width < 2:
            raise ValueError("token width must leave room for BOS and EOS")
        words = text.lower().split()[: width - 2]
        ids = [BOS] + [self.ids.get(w, UNK) for w in words] + [EOS]
        out = np.full(width, PAD, dtype=np.int64)
        out[: len(ids)] = ids
        return out, len(ids)

    def detokenize(self, ids) -> str:
        return " ".join(self.tokens[i] for i in np.asarray(ids) if i > EOS or i == UNK)


class FrozenTextEncoder:
    """Row-normalized Gaussian embedding table; pooled text = renormalized mean of word rows.

    Special tokens (PAD/BOS/EOS) are excluded from pooling, which keeps distinct
    single-word encodings near-orthogonal.
    """

    def __init__(self, vocab: Vocabulary, dim: int = 64, seed: int = 0, trainable: bool = False,
                 table: np.ndarray | None = None):
        self.vocab = vocab
        self.dim = dim
        self.seed = seed
        if table is None:
            raw = np.random.default_rng(seed).standard_normal((len(vocab), dim))
            table = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        if table.shape != (len(vocab), dim):
            raise ValueError(f"table shape {table.shape} does not match vocabulary {len(vocab)} x {dim}")
        self.table = Tensor(table, requires_grad=trainable)

    @property
    def trainable(self) -> bool:
        return self.table.requires_grad

    def word_mask(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        return (tokens > EOS) | (tokens == UNK)

    def encode_text(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        words = tokens[self.word_mask(tokens)]
        if len(words) == 0:
            raise ValueError("cannot encode a token sequence without words")
        v = self.table.data[words].mean(axis=0)
        return v / np.linalg.norm(v)

    def encode(self, text: str, width: int = 16) -> np.ndarray:
        return self.encode_text(self.vocab.tokenize(text, width)[0])

    def class_embedding(self, name: str) -> np.ndarray:
        if name not in CLASS_NAMES and name not in BACKGROUND_NAMES:
            raise KeyError(f"unknown class {name!r}")
        return self.encode(name)

    def class_matrix(self, names=CLASS_NAMES) -> np.ndarray:
        return np.stack([self.class_embedding(n) for n in names])
