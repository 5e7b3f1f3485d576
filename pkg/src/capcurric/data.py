"""Dataset model, on-disk formats and the synthetic fixture generator.

Two formats live here:

* dataset files: UTF-8 JSON-lines. The first line is a header
  ``{"name", "vocab", "feature_dim"}``; every following line is either a
  pair object (``pair_id``, ``image_id``, ``features``, ``tokens`` plus the
  optional auxiliary tensors) or a references object
  ``{"ref_image_id", "refs"}``.
* raw matrices: ``b"CRKMAT01"``, rows and cols as little-endian u32, then
  ``rows * cols`` little-endian f32 values in row-major order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import BOS, EOS, RESERVED_TOKENS, UNK, HarnessError

MATRIX_MAGIC = b"CRKMAT01"
SPLITS = ("train", "valid", "test")

_OPTIONAL_VECTORS = ("vis_embed", "txt_embed", "joint_repr", "lm_logprobs")


def _array_eq(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and bool(np.array_equal(a, b))


@dataclass(eq=False)
class CaptionPair:
    """One training example: an image representation and one of its captions.

    ``tokens`` excludes BOS and ends with EOS. The optional arrays are
    precomputed by external models (dual encoder, joint encoder, object
    detector, language model) and only consumed here.
    """

    pair_id: int
    image_id: int
    features: np.ndarray
    tokens: np.ndarray
    vis_embed: np.ndarray | None = None
    txt_embed: np.ndarray | None = None
    joint_repr: np.ndarray | None = None
    det_probs: np.ndarray | None = None
    lm_logprobs: np.ndarray | None = None
    split: str = "train"
    noise_prob: float | None = None

    def __eq__(self, other):
        if not isinstance(other, CaptionPair):
            return NotImplemented
        return (
            self.pair_id == other.pair_id
            and self.image_id == other.image_id
            and self.split == other.split
            and self.noise_prob == other.noise_prob
            and _array_eq(self.features, other.features)
            and _array_eq(self.tokens, other.tokens)
            and all(
                _array_eq(getattr(self, k), getattr(other, k))
                for k in (*_OPTIONAL_VECTORS, "det_probs")
            )
        )


@dataclass(eq=False)
class Dataset:
    name: str
    vocab: list[str]
    pairs: list[CaptionPair]
    references: dict[int, list[list[int]]]
    feature_dim: int = 0

    def __post_init__(self):
        if not self.feature_dim and self.pairs:
            self.feature_dim = int(self.pairs[0].features.shape[0])

    @property
    def V(self) -> int:
        return len(self.vocab)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.name == other.name
            and self.vocab == other.vocab
            and self.feature_dim == other.feature_dim
            and self.references == other.references
            and len(self.pairs) == len(other.pairs)
            and all(a == b for a, b in zip(self.pairs, other.pairs))
        )

    def split_pairs(self, split: str) -> list[CaptionPair]:
        return [p for p in self.pairs if p.split == split]

    def image_features(self, split: str) -> tuple[list[int], np.ndarray]:
        """Sorted image ids of a split and their feature rows (first pair wins)."""
        feats: dict[int, np.ndarray] = {}
        for p in self.pairs:
            if p.split == split and p.image_id not in feats:
                feats[p.image_id] = p.features
        ids = sorted(feats)
        if not ids:
            return [], np.zeros((0, self.feature_dim))
        return ids, np.stack([feats[i] for i in ids])


@dataclass(frozen=True)
class AffineHead:
    """Affine scoring head ``W @ z + b`` applied to a joint representation."""

    W: np.ndarray
    b: float

    @property
    def dim(self) -> int:
        return int(np.asarray(self.W).reshape(-1).shape[0])


# ---------------------------------------------------------------------------
# validation


def validate_pair(pair: CaptionPair, V: int, feature_dim: int) -> None:
    """Raise HarnessError naming the pair and the violated invariant."""
    pid = pair.pair_id

    def fail(msg):
        raise HarnessError(f"pair {pid}: {msg}")

    if pair.features.ndim != 1 or pair.features.shape[0] != feature_dim:
        fail(f"features must have dimension {feature_dim}, got {pair.features.shape}")
    if pair.tokens.ndim != 1 or pair.tokens.shape[0] < 1:
        fail("tokens must be a non-empty sequence")
    if np.any(pair.tokens < 0) or np.any(pair.tokens >= V):
        fail(f"token id out of vocabulary range [0, {V})")
    if pair.det_probs is not None:
        dp = pair.det_probs
        if dp.ndim != 2:
            fail("det_probs must be a K x N matrix")
        if np.any(dp < 0):
            fail("det_probs has a negative entry (row-stochastic invariant)")
        rows = dp.sum(axis=1)
        if np.any(np.abs(rows - 1.0) > 1e-6):
            bad = int(np.argmax(np.abs(rows - 1.0)))
            fail(f"det_probs row {bad} sums to {rows[bad]:.6g}, violates row-stochastic invariant")
    if pair.lm_logprobs is not None:
        if pair.lm_logprobs.shape != pair.tokens.shape:
            fail("lm_logprobs length must equal the number of tokens")
        if np.any(pair.lm_logprobs > 0):
            fail("lm_logprobs entries must be <= 0 (log-probabilities)")
    # a one-sided embedding is legal here; scoring reports it as missing
    if (
        pair.vis_embed is not None
        and pair.txt_embed is not None
        and pair.vis_embed.shape != pair.txt_embed.shape
    ):
        fail("vis_embed and txt_embed must have equal dimension")
    if pair.split not in SPLITS:
        fail(f"unknown split {pair.split!r}")


def validate_dataset(ds: Dataset) -> None:
    if list(ds.vocab[:3]) != list(RESERVED_TOKENS):
        raise HarnessError(f"vocab must start with {list(RESERVED_TOKENS)} (BOS, EOS, UNK)")
    seen: set[int] = set()
    for p in ds.pairs:
        if p.pair_id in seen:
            raise HarnessError(f"duplicate pair_id {p.pair_id}")
        seen.add(p.pair_id)
        validate_pair(p, ds.V, ds.feature_dim)
        if not ds.references.get(p.image_id):
            raise HarnessError(f"pair {p.pair_id}: image {p.image_id} has no references")
    for img, refs in ds.references.items():
        for r in refs:
            if any(t < 0 or t >= ds.V for t in r):
                raise HarnessError(f"references of image {img}: token id out of range")


# ---------------------------------------------------------------------------
# dataset files


def _vec(obj, key, line_no):
    v = obj.get(key)
    if v is None:
        return None
    try:
        arr = np.asarray(v, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise HarnessError(f"line {line_no}: {key} is not numeric ({exc})") from None
    return arr


def _parse_pair(obj: dict, line_no: int) -> CaptionPair:
    try:
        pid = int(obj["pair_id"])
        img = int(obj["image_id"])
        feats = np.asarray(obj["features"], dtype=np.float64)
        tokens = np.asarray(obj["tokens"], dtype=np.int64)
    except KeyError as exc:
        raise HarnessError(f"line {line_no}: missing key {exc}") from None
    except (TypeError, ValueError) as exc:
        raise HarnessError(f"line {line_no}: {exc}") from None
    det = _vec(obj, "det_probs", line_no)
    if det is not None and det.ndim != 2:
        raise HarnessError(f"line {line_no}: det_probs must be an array of K arrays of N floats")
    noise = obj.get("noise_prob")
    return CaptionPair(
        pair_id=pid,
        image_id=img,
        features=feats,
        tokens=tokens,
        vis_embed=_vec(obj, "vis_embed", line_no),
        txt_embed=_vec(obj, "txt_embed", line_no),
        joint_repr=_vec(obj, "joint_repr", line_no),
        det_probs=det,
        lm_logprobs=_vec(obj, "lm_logprobs", line_no),
        split=obj.get("split", "train"),
        noise_prob=None if noise is None else float(noise),
    )


def iter_jsonl(path: str | Path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise HarnessError(f"{path}: line {line_no} is not valid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise HarnessError(f"{path}: line {line_no} is not a JSON object")
            yield line_no, obj


def load_dataset(path: str | Path) -> Dataset:
    """Load and validate a dataset file."""
    path = Path(path)
    if not path.exists():
        raise HarnessError(f"no such dataset file: {path}")
    header = None
    pairs: list[CaptionPair] = []
    refs: dict[int, list[list[int]]] = {}
    for line_no, obj in iter_jsonl(path):
        if header is None:
            if "vocab" not in obj:
                raise HarnessError(f"{path}: line {line_no}: header must carry 'vocab'")
            header = obj
            continue
        if "ref_image_id" in obj:
            try:
                img = int(obj["ref_image_id"])
                refs.setdefault(img, []).extend([int(t) for t in r] for r in obj["refs"])
            except (KeyError, TypeError, ValueError) as exc:
                raise HarnessError(f"{path}: line {line_no}: malformed references ({exc})") from None
        else:
            pairs.append(_parse_pair(obj, line_no))
    if header is None:
        raise HarnessError(f"{path}: empty dataset file")
    ds = Dataset(
        name=str(header.get("name", path.stem)),
        vocab=[str(v) for v in header["vocab"]],
        pairs=pairs,
        references=refs,
        feature_dim=int(header.get("feature_dim") or (pairs[0].features.shape[0] if pairs else 0)),
    )
    validate_dataset(ds)
    return ds


def _pair_to_obj(p: CaptionPair) -> dict:
    obj = {
        "pair_id": p.pair_id,
        "image_id": p.image_id,
        "features": p.features.tolist(),
        "tokens": p.tokens.tolist(),
    }
    for key in ("vis_embed", "txt_embed", "joint_repr", "det_probs", "lm_logprobs"):
        val = getattr(p, key)
        if val is not None:
            obj[key] = val.tolist()
    if p.split != "train":
        obj["split"] = p.split
    if p.noise_prob is not None:
        obj["noise_prob"] = p.noise_prob
    return obj


def save_dataset(ds: Dataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {"name": ds.name, "vocab": ds.vocab, "feature_dim": ds.feature_dim}
        fh.write(json.dumps(header) + "\n")
        for p in ds.pairs:
            fh.write(json.dumps(_pair_to_obj(p)) + "\n")
        for img in sorted(ds.references):
            fh.write(json.dumps({"ref_image_id": img, "refs": ds.references[img]}) + "\n")


def load_references(path: str | Path) -> dict[int, list[list[int]]]:
    """Collect every ``{"ref_image_id", "refs"}`` line of a JSON-lines file.

    Works on full dataset files as well as bare reference files.
    """
    refs: dict[int, list[list[int]]] = {}
    for line_no, obj in iter_jsonl(path):
        if "ref_image_id" in obj:
            try:
                refs.setdefault(int(obj["ref_image_id"]), []).extend(
                    [int(t) for t in r] for r in obj["refs"]
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise HarnessError(f"{path}: line {line_no}: malformed references ({exc})") from None
    if not refs:
        raise HarnessError(f"{path}: no reference lines found")
    return refs


# ---------------------------------------------------------------------------
# raw matrices


def write_matrix(path: str | Path, m) -> None:
    m = np.asarray(m)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise HarnessError("write_matrix expects a 2-D array")
    rows, cols = m.shape
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<II", rows, cols))
        fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def load_matrix(path: str | Path) -> np.ndarray:
    """Read a raw matrix file into a float32 array of shape (rows, cols)."""
    data = Path(path).read_bytes()
    if data[:8] != MATRIX_MAGIC:
        raise HarnessError(f"{path}: bad magic {data[:8]!r}, expected {MATRIX_MAGIC!r}")
    if len(data) < 16:
        raise HarnessError(f"{path}: truncated header")
    rows, cols = struct.unpack("<II", data[8:16])
    payload = data[16:]
    if len(payload) != 4 * rows * cols:
        raise HarnessError(
            f"{path}: size mismatch, header says {rows}x{cols} "
            f"({4 * rows * cols} bytes) but payload has {len(payload)} bytes"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()


def load_head(path: str | Path) -> AffineHead:
    """An affine head stored as a 1 x (D+1) raw matrix, bias in the last column."""
    m = load_matrix(path).astype(np.float64)
    if m.shape[0] != 1 or m.shape[1] < 2:
        raise HarnessError(f"{path}: head matrix must be 1 x (D+1), got {m.shape}")
    return AffineHead(W=m[0, :-1].copy(), b=float(m[0, -1]))


def save_head(path: str | Path, head: AffineHead) -> None:
    write_matrix(path, np.append(np.asarray(head.W, dtype=np.float64).reshape(-1), head.b))


# ---------------------------------------------------------------------------
# synthetic fixtures


@dataclass
class SyntheticConfig:
    n_pairs: int = 2000
    F: int = 16
    V: int = 50
    noise_schedule: str = "linear"
    seed: int = 0
    noise_max: float = 0.8
    captions_per_image: int = 5
    n_valid_images: int = 300
    n_test_images: int = 200
    feature_noise: float = 0.1
    joint_dim: int = 8
    det_k: int = 10
    det_n: int = 16
    name: str = "synthetic"
    noise_probs: list[float] | None = field(default=None, repr=False)


NOISE_SCHEDULES = ("linear", "uniform", "beta", "zero")
N_SLOTS = 4
JOINT_HEAD_SCALE = 8.0


def _noise_levels(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.n_pairs
    if cfg.noise_probs is not None:
        levels = np.asarray(cfg.noise_probs, dtype=np.float64)
        if levels.shape != (n,) or np.any(levels < 0) or np.any(levels > 1):
            raise HarnessError("noise_probs must be n_pairs values in [0, 1]")
        return levels
    if cfg.noise_schedule == "linear":
        # evenly spaced levels, dealt to pairs in a seeded order
        return rng.permutation(np.linspace(0.0, cfg.noise_max, n))
    if cfg.noise_schedule == "uniform":
        return rng.uniform(0.0, cfg.noise_max, size=n)
    if cfg.noise_schedule == "beta":
        return cfg.noise_max * rng.beta(0.7, 1.5, size=n)
    if cfg.noise_schedule == "zero":
        return np.zeros(n)
    raise HarnessError(f"unknown noise_schedule {cfg.noise_schedule!r}; choose from {NOISE_SCHEDULES}")


def synthetic_head(joint_dim: int = 8) -> AffineHead:
    """The matching head for ``joint_repr`` vectors produced by generate_synthetic."""
    W = np.zeros(joint_dim)
    W[0] = 1.0
    return AffineHead(W=W, b=0.0)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Build a deterministic captioning corpus with injected per-pair noise.

    Every image has one latent choice per caption slot; its features are the
    sum of the chosen slot prototypes plus a little Gaussian jitter. A clean
    caption lists the chosen word of each slot (the second slot is optional
    per caption, giving reference diversity) and ends with EOS. Training
    captions then have each content token replaced by a uniform-random
    content id with the pair's ``noise_prob``; validation and test images
    keep clean captions. The text embedding is pushed away from the image
    embedding in proportion to ``noise_prob`` so cosine similarity falls as
    noise grows.
    """
    if cfg.n_pairs < 10 or cfg.F < 2 or cfg.V < 8:
        raise HarnessError("generate_synthetic needs n_pairs >= 10, F >= 2, V >= 8")
    if cfg.captions_per_image < 1 or cfg.n_valid_images < 0 or cfg.n_test_images < 0:
        raise HarnessError("captions_per_image >= 1 and non-negative split sizes required")
    if not 0.0 <= cfg.noise_max <= 1.0:
        raise HarnessError("noise_max must lie in [0, 1]")
    if cfg.det_k < 1 or cfg.det_n < 2 or cfg.joint_dim < 1:
        raise HarnessError("det_k >= 1, det_n >= 2, joint_dim >= 1 required")

    rng = np.random.default_rng(cfg.seed)
    V, F = cfg.V, cfg.F
    content = np.arange(3, V)
    slot_words = np.array_split(content, N_SLOTS)
    prototypes = [rng.normal(0.0, 1.0 / math.sqrt(N_SLOTS), size=(len(w), F)) for w in slot_words]
    vocab = list(RESERVED_TOKENS) + [f"w{i:03d}" for i in range(3, V)]
    noise = _noise_levels(cfg, rng)

    n_train_images = math.ceil(cfg.n_pairs / cfg.captions_per_image)
    n_images = n_train_images + cfg.n_valid_images + cfg.n_test_images

    pairs: list[CaptionPair] = []
    references: dict[int, list[list[int]]] = {}
    pair_id = 0
    for image_id in range(n_images):
        if image_id < n_train_images:
            split = "train"
            n_caps = min(cfg.captions_per_image, cfg.n_pairs - image_id * cfg.captions_per_image)
        else:
            split = "valid" if image_id < n_train_images + cfg.n_valid_images else "test"
            n_caps = 1
        choice = [int(rng.integers(len(w))) for w in slot_words]
        feats = sum(prototypes[s][choice[s]] for s in range(N_SLOTS))
        feats = feats + rng.normal(0.0, cfg.feature_noise, size=F)
        words = [int(slot_words[s][choice[s]]) for s in range(N_SLOTS)]
        vis = _unit(rng.normal(size=F))
        clutter = rng.uniform()
        det_logits = rng.normal(size=(cfg.det_k, cfg.det_n)) * (6.0 * (1.0 - clutter) + 0.1)
        det = np.exp(det_logits - det_logits.max(axis=1, keepdims=True))
        det /= det.sum(axis=1, keepdims=True)

        refs: list[list[int]] = []
        n_refs = max(n_caps, cfg.captions_per_image)
        keep_adj = rng.uniform(size=n_refs) < 0.5
        for j in range(n_refs):
            refs.append(words if keep_adj[j] else [words[0]] + words[2:])
        references[image_id] = refs

        for j in range(n_caps):
            clean = refs[j]
            if split == "train":
                p = float(noise[pair_id])
            else:
                p = 0.0
            flip = rng.uniform(size=len(clean)) < p
            rand_ids = rng.integers(3, V, size=len(clean))
            toks = np.where(flip, rand_ids, clean).astype(np.int64)
            toks = np.append(toks, EOS)
            g = rng.normal(size=F)
            txt = _unit(vis + p * g)
            cos = float(np.clip(vis @ txt, -1.0, 1.0))
            joint = rng.normal(0.0, 0.5, size=cfg.joint_dim)
            joint[0] = JOINT_HEAD_SCALE * (cos - 0.5) + rng.normal(0.0, 0.05)
            lm = np.where(flip, -math.log(V - 3), np.log(rng.uniform(0.3, 0.9, size=len(clean))))
            lm = np.append(lm, math.log(0.9))
            pairs.append(
                CaptionPair(
                    pair_id=pair_id,
                    image_id=image_id,
                    features=feats.copy(),
                    tokens=toks,
                    vis_embed=vis.copy(),
                    txt_embed=txt,
                    joint_repr=joint,
                    det_probs=det.copy(),
                    lm_logprobs=lm,
                    split=split,
                    noise_prob=p,
                )
            )
            pair_id += 1

    ds = Dataset(name=cfg.name, vocab=vocab, pairs=pairs, references=references, feature_dim=F)
    validate_dataset(ds)
    return ds


def strip_special(tokens: Iterable[int]) -> list[int]:
    """Drop BOS and cut at the first EOS."""
    out = []
    for t in tokens:
        t = int(t)
        if t == EOS:
            break
        if t != BOS:
            out.append(t)
    return out


__all__ = [
    "AffineHead",
    "CaptionPair",
    "Dataset",
    "SyntheticConfig",
    "generate_synthetic",
    "load_dataset",
    "load_head",
    "load_matrix",
    "load_references",
    "save_dataset",
    "save_head",
    "strip_special",
    "synthetic_head",
    "validate_dataset",
    "write_matrix",
    "UNK",
]
