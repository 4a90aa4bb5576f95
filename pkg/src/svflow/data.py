"""Dataset generators: two moons, spherical clusters, token sequences, and
the prefix-shuffling perturbation used by the shuffle probe."""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import vonmises_fisher
from sklearn import datasets

from .geometry import random_unit

DEFAULT_WINDOW = 8
SHUFFLE_PROPORTIONS = (0.0, 0.2, 0.4, 0.6, 0.8, 0.95)
IGNORE = -1


@dataclass(frozen=True)
class LabeledPoints:
    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        lab = np.asarray(self.labels, dtype=np.int64)
        if len(pts) != len(lab):
            raise ValueError(f"{len(pts)} points but {len(lab)} labels")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", lab)

    def __len__(self):
        return len(self.labels)


def _legacy_state(seed):
    # sklearn wants a 32-bit seed; fold arbitrary u64 seeds through a Generator
    return np.random.RandomState(np.random.default_rng(seed).integers(2**32, dtype=np.uint64))


def make_moons(n, noise=0.06, seed=0):
    """Two interleaved half circles of radius 1; the lower one shifted by (1, -0.5)."""
    if n < 2:
        raise ValueError("make_moons needs n >= 2")
    x, y = datasets.make_moons(n_samples=n, noise=noise if noise > 0 else None,
                               random_state=_legacy_state(seed))
    return LabeledPoints(x, y)


def make_spherical_clusters(n, dim, num_clusters=4, kappa=20.0, seed=0, centers=None):
    """Points on S^{d-1} drawn from vMF clusters; returns (LabeledPoints, centers).

    Centers are random unit vectors unless given (pass the centers of a
    training set to draw a held-out set from the same clusters).
    """
    rng = np.random.default_rng(seed)
    if centers is None:
        centers = np.stack([random_unit(rng, dim) for _ in range(num_clusters)])
    centers = np.asarray(centers, dtype=float)
    num_clusters = len(centers)
    labels = np.arange(n) % num_clusters
    rng.shuffle(labels)
    pts = np.empty((n, dim))
    for c in range(num_clusters):
        idx = np.flatnonzero(labels == c)
        if len(idx):
            pts[idx] = vonmises_fisher(centers[c], kappa).rvs(len(idx), random_state=rng).reshape(len(idx), dim)
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return LabeledPoints(pts, labels), centers


# ---------------------------------------------------------------------------
# token sequences
# ---------------------------------------------------------------------------


@dataclass
class TokenSequence:
    """Token ids, their unit embeddings and per-position targets.

    ``source_index[n]`` is the original position of the token now at n, so a
    shuffled sequence can be mapped back.  Targets always describe the
    unperturbed sequence.
    """

    tokens: np.ndarray
    embeddings: np.ndarray
    targets: np.ndarray
    source_index: np.ndarray = field(default=None)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.embeddings = np.asarray(self.embeddings, dtype=float)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if self.source_index is None:
            self.source_index = np.arange(len(self.tokens))
        n = len(self.tokens)
        if self.embeddings.shape[0] != n or len(self.targets) != n:
            raise ValueError("tokens, embeddings and targets must have equal length")
        norms = np.linalg.norm(self.embeddings, axis=-1)
        if n and np.max(np.abs(norms - 1.0)) > 1e-10:
            raise ValueError("token embeddings must be unit vectors")

    def __len__(self):
        return len(self.tokens)


def shuffled_count(p, n):
    """floor(p * n), guarded against products like 0.29 * 100 = 28.999..."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("shuffle proportion must lie in [0, 1]")
    return min(n, math.floor(p * n + 1e-9))


def prefix_shuffle(seq, p, seed=0):
    """Permute the first floor(p N) positions uniformly; the suffix is untouched."""
    n = len(seq)
    k = shuffled_count(p, n)
    perm = np.arange(n)
    if k > 1:
        perm[:k] = np.random.default_rng(seed).permutation(k)
    return TokenSequence(seq.tokens[perm], seq.embeddings[perm], seq.targets.copy(),
                         seq.source_index[perm])


def window_majority(tokens, window=DEFAULT_WINDOW, vocab=None):
    """Most frequent id among the previous ``window`` tokens (ties -> lowest id).

    Position 0 has no context and gets the IGNORE target.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    vocab = int(tokens.max()) + 1 if vocab is None else vocab
    out = np.full(len(tokens), IGNORE, dtype=np.int64)
    for n in range(1, len(tokens)):
        counts = np.bincount(tokens[max(0, n - window):n], minlength=vocab)
        out[n] = int(np.argmax(counts))
    return out


@dataclass
class SequenceCorpus:
    embedding_table: np.ndarray
    sequences: list
    window: int = DEFAULT_WINDOW

    @property
    def vocab(self):
        return self.embedding_table.shape[0]

    @property
    def dim(self):
        return self.embedding_table.shape[1]

    def to_jsonl(self):
        """One JSON object per sequence; embeddings refer to the shared table."""
        lines = []
        for s in self.sequences:
            lines.append(json.dumps({"tokens": s.tokens.tolist(), "targets": s.targets.tolist(),
                                     "embedding": "table"}))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text, embedding_table, window=DEFAULT_WINDOW):
        table = np.asarray(embedding_table, dtype=float)
        seqs = []
        for line in text.splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            tok = np.asarray(row["tokens"], dtype=np.int64)
            seqs.append(TokenSequence(tok, table[tok], row["targets"]))
        return cls(table, seqs, window)


def make_sequence_task(vocab, length, dim, seed=0, num_sequences=256, window=DEFAULT_WINDOW,
                       stickiness=0.5, embedding_table=None):
    """Corpus whose targets are the window majority of the preceding tokens.

    Tokens follow a sticky chain (repeat the previous id with probability
    ``stickiness``, otherwise draw uniformly) so that runs make the majority
    well defined most of the time and prefix shuffling breaks it.  Pass the
    ``embedding_table`` of an existing corpus to draw held-out sequences over
    the same tokens.
    """
    if vocab < 2:
        raise ValueError("vocab must be >= 2")
    if dim < 4:
        raise ValueError("embedding dimension must be >= 4")
    rng = np.random.default_rng(seed)
    table = rng.standard_normal((vocab, dim))
    table /= np.linalg.norm(table, axis=1, keepdims=True)
    if embedding_table is not None:
        table = np.asarray(embedding_table, dtype=float)
        if table.shape != (vocab, dim):
            raise ValueError(f"embedding table has shape {table.shape}, expected {(vocab, dim)}")
    seqs = []
    for _ in range(num_sequences):
        tok = np.empty(length, dtype=np.int64)
        tok[0] = rng.integers(vocab)
        stay = rng.random(length) < stickiness
        fresh = rng.integers(vocab, size=length)
        for n in range(1, length):
            tok[n] = tok[n - 1] if stay[n] else fresh[n]
        seqs.append(TokenSequence(tok, table[tok], window_majority(tok, window, vocab)))
    return SequenceCorpus(table, seqs, window)
