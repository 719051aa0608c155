"""Token alphabets: special tokens, observation/CoT words and uniform action bins."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

PAD, BOS, THINK_OPEN, THINK_CLOSE, ACT_QUERY, EOS = range(6)
SPECIAL_TOKENS = ("<pad>", "<bos>", "<think>", "</think>", "<act>", "<eos>")

PHASES = ("approach", "grasp", "transport", "release", "finish")
COT_WORDS = ("at", ";", "subtask", "goal") + PHASES
OBS_WORDS = ("move", "to", "zone", "gripper", "open", "closed", "holding")


class ActionRangeError(ValueError):
    pass


def cell_token(x, y):
    return f"({x},{y})"


def tokenize_actions(values, n_bins):
    """Map continuous actions in [-1, 1] to uniform bin indices.

    A value lying exactly on an interior bin edge goes to the lower bin.
    """
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)) or np.any(v < -1.0) or np.any(v > 1.0):
        raise ActionRangeError("action values must lie in [-1, 1]")
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    bins = np.ceil((v + 1.0) * (n_bins / 2.0)).astype(np.int64) - 1
    return np.clip(bins, 0, n_bins - 1)


def detokenize_actions(bins, n_bins):
    b = np.asarray(bins, dtype=np.int64)
    if np.any(b < 0) or np.any(b >= n_bins):
        raise ActionRangeError(f"bin index outside [0, {n_bins})")
    return -1.0 + (b + 0.5) * (2.0 / n_bins)


@dataclass(frozen=True)
class VocabSpec:
    """Disjoint id ranges: specials, then words, then ``n_bins`` action bins."""

    words: tuple
    n_bins: int

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError("n_bins must be >= 2")
        if len(set(self.words)) != len(self.words):
            raise ValueError("duplicate words in vocabulary")
        clash = set(self.words) & set(SPECIAL_TOKENS)
        if clash:
            raise ValueError(f"words collide with special tokens: {sorted(clash)}")
        index = {w: i for i, w in enumerate(SPECIAL_TOKENS)}
        index.update({w: i + len(SPECIAL_TOKENS) for i, w in enumerate(self.words)})
        object.__setattr__(self, "_index", index)

    @property
    def word_offset(self):
        return len(SPECIAL_TOKENS)

    @property
    def action_offset(self):
        return len(SPECIAL_TOKENS) + len(self.words)

    @property
    def size(self):
        return self.action_offset + self.n_bins

    @property
    def text_ids(self):
        return np.arange(self.word_offset, self.action_offset)

    def word_id(self, word):
        return self._index[word]

    def encode(self, words):
        return [self._index[w] for w in words]

    def decode(self, ids):
        out = []
        for i in ids:
            i = int(i)
            if i < self.word_offset:
                out.append(SPECIAL_TOKENS[i])
            elif i < self.action_offset:
                out.append(self.words[i - self.word_offset])
            else:
                out.append(f"<a{i - self.action_offset}>")
        return out

    def is_action(self, token_id):
        return self.action_offset <= token_id < self.size

    def action_ids(self, bins):
        return [int(b) + self.action_offset for b in bins]

    def bins_of(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if np.any(ids < self.action_offset) or np.any(ids >= self.size):
            raise ActionRangeError("token id is not an action bin")
        return ids - self.action_offset

    def to_json(self):
        return json.dumps({"words": list(self.words), "n_bins": self.n_bins}, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        return cls(tuple(obj["words"]), int(obj["n_bins"]))


def build_vocab(suite, n_bins=256):
    """Vocabulary covering every observation, instruction and CoT word of ``suite``."""
    words = list(OBS_WORDS) + [w for w in COT_WORDS if w not in OBS_WORDS]
    for name in list(suite.objects) + list(suite.zones):
        if name not in words:
            words.append(name)
    width, height = suite.grid
    words += [cell_token(x, y) for y in range(height) for x in range(width)]
    return VocabSpec(tuple(words), n_bins)


def bin_edges(n_bins):
    return [-1.0 + k * 2.0 / n_bins for k in range(n_bins + 1)]

