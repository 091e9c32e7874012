"""Everything derived from external object knowledge: binary region masks on
the feature grid, phrase-label similarity matrices, and the knowledge-guided
masking distribution."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .encoder import split_tokens


@dataclass(frozen=True)
class BinaryMask:
    flat: np.ndarray  # (L,) uint8 in {0, 1}, row-major
    grid_shape: tuple[int, int]

    def active_count(self) -> int:
        return int(self.flat.sum())


def rasterize_mask(
    box: tuple[float, float, float, float],
    image_size: tuple[int, int],
    grid_shape: tuple[int, int],
) -> BinaryMask:
    """Mark grid cells whose center pixel lies inside the box.

    Cells tile the image uniformly; cell (i, j) has center
    ((i + 0.5) * H / h, (j + 0.5) * W / w). Containment is half-open:
    x1 <= cx < x2, y1 <= cy < y2. If no center falls inside (tiny or
    degenerate boxes), the single cell containing the box center is set,
    so the mask is never empty.
    """
    x1, y1, x2, y2 = box
    h_img, w_img = image_size
    h, w = grid_shape
    if h < 1 or w < 1:
        raise ValueError("grid_shape entries must be >= 1")
    if not (0 <= x1 <= x2 <= w_img and 0 <= y1 <= y2 <= h_img):
        raise ValueError(f"box {box} not within {w_img}x{h_img} image")
    flat = np.zeros(h * w, dtype=np.uint8)
    cy = (np.arange(h) + 0.5) * h_img / h
    cx = (np.arange(w) + 0.5) * w_img / w
    rows = np.nonzero((cy >= y1) & (cy < y2))[0]
    cols = np.nonzero((cx >= x1) & (cx < x2))[0]
    if rows.size and cols.size:
        for i in rows:
            flat[i * w + cols] = 1
    else:
        bi = min(int(((y1 + y2) / 2) * h // h_img), h - 1)
        bj = min(int(((x1 + x2) / 2) * w // w_img), w - 1)
        flat[bi * w + bj] = 1
    return BinaryMask(flat=flat, grid_shape=(h, w))


# ---------------------------------------------------------------------------
# text embedders


class HashEmbedder:
    """Deterministic stand-in for a pretrained language embedding.

    Each token maps to a seeded Gaussian vector, L2-normalized; the per-token
    seed is the first 8 little-endian bytes of sha256("{seed}\\x00{token}").
    Multi-token strings embed as the normalized mean of token vectors.
    """

    def __init__(self, d_e: int, seed: int):
        if d_e < 4:
            raise ValueError("embedding dimension must be >= 4")
        self.dim = d_e
        self.seed = seed
        self.name = f"hash-{d_e}-{seed}"
        self._cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}\x00{token}".encode("utf-8")).digest()
        sub_seed = int.from_bytes(digest[:8], "little")
        vec = np.random.default_rng(sub_seed).standard_normal(self.dim)
        return vec / np.linalg.norm(vec)

    def embed(self, text: str) -> np.ndarray:
        key = text.lower()
        if key in self._cache:
            return self._cache[key]
        tokens = split_tokens(key)
        if not tokens:
            raise ValueError("cannot embed an empty string")
        mean = np.mean([self._token_vector(t) for t in tokens], axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0.0:
            raise ValueError(f"degenerate embedding for {text!r}")
        out = mean / norm
        self._cache[key] = out
        return out

    def __call__(self, text: str) -> np.ndarray:
        return self.embed(text)


class FileEmbedder:
    """Pretrained embeddings from a whitespace-separated text file.

    Format: first line is the dimension d_e; each following line is
    "token v1 v2 ... v_{d_e}". Vectors are L2-normalized on load.
    """

    def __init__(self, table: dict[str, np.ndarray], d_e: int, name: str):
        self.dim = d_e
        self.name = name
        self._table = table

    @classmethod
    def load(cls, path: str) -> "FileEmbedder":
        table: dict[str, np.ndarray] = {}
        with open(path, "r", encoding="utf-8") as f:
            header = f.readline().strip()
            d_e = int(header)
            for lineno, line in enumerate(f, start=2):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != d_e + 1:
                    raise ValueError(f"{path} line {lineno}: expected {d_e} values")
                vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
                norm = np.linalg.norm(vec)
                if norm == 0.0:
                    raise ValueError(f"{path} line {lineno}: zero vector")
                table[parts[0].lower()] = vec / norm
        return cls(table, d_e, f"file:{path}")

    def embed(self, text: str) -> np.ndarray:
        tokens = split_tokens(text.lower())
        if not tokens:
            raise ValueError("cannot embed an empty string")
        vecs = []
        for t in tokens:
            if t not in self._table:
                raise KeyError(f"token {t!r} not present in embedding file")
            vecs.append(self._table[t])
        mean = np.mean(vecs, axis=0)
        return mean / np.linalg.norm(mean)

    def __call__(self, text: str) -> np.ndarray:
        return self.embed(text)


def hash_embedder(d_e: int, seed: int) -> HashEmbedder:
    return HashEmbedder(d_e, seed)


# ---------------------------------------------------------------------------
# similarity


def _row_softmax(raw: np.ndarray, tau: float) -> np.ndarray:
    scaled = raw / tau
    shifted = scaled - scaled.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class SimilarityMatrix:
    raw: np.ndarray  # (|P|, N) cosine scores in [-1, 1]
    row_softmax: np.ndarray  # (|P|, N) row-stochastic
    tau: float

    @classmethod
    def from_raw(cls, raw: np.ndarray, tau: float = 1.0) -> "SimilarityMatrix":
        if raw.ndim != 2 or raw.shape[0] < 1 or raw.shape[1] < 1:
            raise ValueError("similarity matrix must be |P| x N with |P|, N >= 1")
        if tau <= 0:
            raise ValueError("temperature must be positive")
        return cls(raw=raw, row_softmax=_row_softmax(raw, tau), tau=tau)

    @property
    def n_phrases(self) -> int:
        return self.raw.shape[0]

    @property
    def n_proposals(self) -> int:
        return self.raw.shape[1]


def phrase_label_similarity(
    phrases, proposals, embedder, tau: float = 1.0
) -> SimilarityMatrix:
    """Cosine similarity between phrase surfaces and proposal category names
    in the external linguistic space, plus its row-softmax form.

    `phrases` is a sequence with .text attributes (or plain strings);
    `proposals` a sequence with .category_name attributes.
    """
    texts = [p if isinstance(p, str) else p.text for p in phrases]
    names = [p.category_name for p in proposals]
    if not texts or not names:
        raise ValueError("need at least one phrase and one proposal")
    phrase_vecs = np.stack([embedder.embed(t) for t in texts])
    label_vecs = np.stack([embedder.embed(n) for n in names])
    raw = np.clip(phrase_vecs @ label_vecs.T, -1.0, 1.0)
    return SimilarityMatrix.from_raw(raw, tau)


def masking_distribution(sim: SimilarityMatrix) -> np.ndarray:
    """Proposal-masking probabilities: the uniform mixture of the softmax rows
    (sample a phrase uniformly, then a proposal from its row). Callers must
    substitute the uniform distribution themselves when no phrases exist."""
    return sim.row_softmax.mean(axis=0)
