"""A small feature-conditioned autoregressive caption model.

At step t the hidden state is ``tanh(Wx @ features + mean(Wy[BOS, y_1 .. y_{t-1}]))``
and the next-token distribution is ``softmax(Wo @ h + bo)``. It is tiny,
deterministic and has exact analytic gradients, which is all the curriculum
machinery needs. It is not a Transformer and results obtained with it are
desk-scale analogues only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import BOS, EOS, HarnessError
from .data import CaptionPair, load_matrix, write_matrix

BLOCKS = ("Wy", "Wx", "Wo", "bo")


@dataclass
class LearnerConfig:
    lr: float = 3e-4
    batch_size: int = 10
    seed: int = 0
    E: int = 16

    def __post_init__(self):
        if not self.lr >= 0:
            raise HarnessError("lr must be non-negative")
        if self.batch_size < 1:
            raise HarnessError("batch_size must be >= 1")
        if self.E < 1:
            raise HarnessError("E must be >= 1")


@dataclass
class ToyModel:
    Wy: np.ndarray  # V x E token embeddings
    Wx: np.ndarray  # E x F feature projection
    Wo: np.ndarray  # V x E output projection
    bo: np.ndarray  # V output bias
    seed: int = 0

    @property
    def V(self) -> int:
        return self.Wy.shape[0]

    @property
    def E(self) -> int:
        return self.Wy.shape[1]

    @property
    def F(self) -> int:
        return self.Wx.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in BLOCKS}

    def copy(self) -> "ToyModel":
        return ToyModel(*(getattr(self, k).copy() for k in BLOCKS), seed=self.seed)

    def check(self) -> None:
        V, E, F = self.V, self.E, self.F
        shapes = {"Wy": (V, E), "Wx": (E, F), "Wo": (V, E), "bo": (V,)}
        for k, shape in shapes.items():
            arr = getattr(self, k)
            if arr.shape != shape:
                raise HarnessError(f"parameter {k} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise HarnessError(f"parameter {k} has non-finite entries")


def init_model(V: int, F: int, cfg: LearnerConfig | None = None) -> ToyModel:
    cfg = cfg or LearnerConfig()
    if V < 4 or F < 1:
        raise HarnessError("init_model needs V >= 4 and F >= 1")
    rng = np.random.default_rng(cfg.seed)
    E = cfg.E
    return ToyModel(
        Wy=rng.normal(0.0, 0.1, size=(V, E)),
        Wx=rng.normal(0.0, 0.1, size=(E, F)),
        Wo=rng.normal(0.0, 0.1, size=(V, E)),
        bo=rng.normal(0.0, 0.1, size=V),
        seed=cfg.seed,
    )


# ---------------------------------------------------------------------------
# batched encoding


@dataclass
class Encoded:
    """Pairs packed into padded arrays so a mini-batch is one fancy index away."""

    features: np.ndarray  # (n, F)
    inputs: np.ndarray  # (n, T) BOS-shifted tokens
    targets: np.ndarray  # (n, T)
    mask: np.ndarray  # (n, T) float, 1 where a target exists

    def __len__(self):
        return self.features.shape[0]

    def take(self, idx) -> "Encoded":
        return Encoded(self.features[idx], self.inputs[idx], self.targets[idx], self.mask[idx])


def encode(pairs: Sequence[CaptionPair]) -> Encoded:
    if not len(pairs):
        raise HarnessError("cannot encode an empty batch")
    T = max(len(p.tokens) for p in pairs)
    n = len(pairs)
    inputs = np.full((n, T), BOS, dtype=np.int64)
    targets = np.full((n, T), EOS, dtype=np.int64)
    mask = np.zeros((n, T))
    for i, p in enumerate(pairs):
        toks = p.tokens
        targets[i, : len(toks)] = toks
        inputs[i, 1 : len(toks)] = toks[:-1]
        mask[i, : len(toks)] = 1.0
    feats = np.stack([p.features for p in pairs]).astype(np.float64)
    return Encoded(feats, inputs, targets, mask)


def _as_encoded(batch) -> Encoded:
    return batch if isinstance(batch, Encoded) else encode(list(batch))


def _check_compat(model: ToyModel, enc: Encoded) -> None:
    if enc.features.shape[1] != model.F:
        raise HarnessError(f"feature dimension {enc.features.shape[1]} does not match model F={model.F}")
    top = int(max(enc.targets.max(), enc.inputs.max()))
    if top >= model.V:
        raise HarnessError(f"token id {top} >= model vocabulary size {model.V}")


def _forward(model: ToyModel, enc: Encoded):
    T = enc.inputs.shape[1]
    counts = np.arange(1, T + 1, dtype=np.float64)[None, :, None]
    ctx = np.cumsum(model.Wy[enc.inputs], axis=1) / counts
    h = np.tanh((enc.features @ model.Wx.T)[:, None, :] + ctx)
    logits = h @ model.Wo.T + model.bo
    logits -= logits.max(axis=2, keepdims=True)
    expl = np.exp(logits)
    z = expl.sum(axis=2, keepdims=True)
    logp = logits - np.log(z)
    tgt_logp = np.take_along_axis(logp, enc.targets[:, :, None], axis=2)[:, :, 0]
    nll = -(tgt_logp * enc.mask).sum(axis=1)
    return nll, h, expl / z, counts


def batch_nll(model: ToyModel, batch) -> np.ndarray:
    """Per-pair summed negative log-likelihood for a batch."""
    enc = _as_encoded(batch)
    _check_compat(model, enc)
    return _forward(model, enc)[0]


def caption_nll(model: ToyModel, pair: CaptionPair) -> float:
    """Total negative log-likelihood of the pair's caption given its features."""
    if len(pair.tokens) == 0 or int(pair.tokens[-1]) != EOS:
        raise HarnessError(f"pair {pair.pair_id}: tokens must end with EOS")
    return float(batch_nll(model, [pair])[0])


def loss_and_grad(model: ToyModel, batch) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Per-pair NLLs and the exact gradient of their mean w.r.t. every block."""
    enc = _as_encoded(batch)
    _check_compat(model, enc)
    B = len(enc)
    nll, h, probs, counts = _forward(model, enc)

    g = probs
    b_idx, t_idx = np.nonzero(enc.mask)
    g[b_idx, t_idx, enc.targets[b_idx, t_idx]] -= 1.0
    g *= enc.mask[:, :, None] / B

    gf = g.reshape(-1, g.shape[2])
    hf = h.reshape(-1, h.shape[2])
    dWo = gf.T @ hf
    dbo = gf.sum(axis=0)
    da = (g @ model.Wo) * (1.0 - h * h)
    dWx = da.sum(axis=1).T @ enc.features
    # position s feeds the running mean of every step t >= s with weight 1/(t+1)
    scaled = da / counts
    demb = np.cumsum(scaled[:, ::-1, :], axis=1)[:, ::-1, :]
    dWy = np.zeros_like(model.Wy)
    np.add.at(dWy, enc.inputs.reshape(-1), demb.reshape(-1, demb.shape[2]))

    grads = {"Wy": dWy, "Wx": dWx, "Wo": dWo, "bo": dbo}
    for k, v in grads.items():
        if not np.all(np.isfinite(v)):
            raise HarnessError(f"non-finite gradient in parameter block {k}")
    return nll, grads


def grad(model: ToyModel, batch) -> dict[str, np.ndarray]:
    if len(batch) == 0:
        raise HarnessError("grad needs a non-empty batch")
    return loss_and_grad(model, batch)[1]


def train_epoch(model: ToyModel, pairs, cfg: LearnerConfig) -> dict[str, float]:
    """One pass of plain SGD over ``pairs`` in the given order, updating ``model`` in place.

    Returns the mean per-pair NLL measured before each mini-batch's update.
    """
    enc = _as_encoded(pairs)
    n = len(enc)
    if n == 0:
        raise HarnessError("train_epoch needs at least one pair")
    total = 0.0
    for start in range(0, n, cfg.batch_size):
        batch = enc.take(slice(start, start + cfg.batch_size))
        nll, grads = loss_and_grad(model, batch)
        total += float(nll.sum())
        if cfg.lr:
            for k in BLOCKS:
                getattr(model, k)[...] -= cfg.lr * grads[k]
    mean_loss = total / n
    if not np.isfinite(mean_loss):
        raise HarnessError("non-finite training loss")
    return {"mean_loss": mean_loss}


def greedy_decode_batch(model: ToyModel, features: np.ndarray, max_len: int) -> list[list[int]]:
    """Greedy decoding for a stack of feature rows; EOS ends a caption and is not returned."""
    if max_len < 1:
        raise HarnessError("max_len must be >= 1")
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[1] != model.F:
        raise HarnessError(f"feature dimension {features.shape[1]} does not match model F={model.F}")
    n = features.shape[0]
    base = features @ model.Wx.T
    ctx_sum = np.repeat(model.Wy[BOS][None, :], n, axis=0)
    out = np.zeros((n, max_len), dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    lengths = np.full(n, max_len)
    for t in range(max_len):
        h = np.tanh(base + ctx_sum / (t + 1))
        logits = h @ model.Wo.T + model.bo
        logits[:, BOS] = -np.inf
        tok = np.argmax(logits, axis=1)
        newly = (~done) & (tok == EOS)
        lengths[newly] = t
        done |= newly
        out[:, t] = tok
        ctx_sum = ctx_sum + model.Wy[tok]
        if done.all():
            break
    return [out[i, : lengths[i]].tolist() for i in range(n)]


def greedy_decode(model: ToyModel, features, max_len: int) -> list[int]:
    return greedy_decode_batch(model, np.asarray(features)[None, :], max_len)[0]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: ToyModel, directory: str | Path, vocab: list[str] | None = None) -> Path:
    """Write each block as a raw matrix plus a JSON manifest. Values are stored as f32."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    blocks = {}
    for k in BLOCKS:
        fname = f"{k}.mat"
        write_matrix(d / fname, np.atleast_2d(getattr(model, k)))
        blocks[k] = fname
    manifest = {"V": model.V, "F": model.F, "E": model.E, "seed": model.seed, "blocks": blocks}
    if vocab is not None:
        manifest["vocab"] = list(vocab)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return d


def load_checkpoint(directory: str | Path) -> tuple[ToyModel, list[str] | None]:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise HarnessError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    arrs = {k: load_matrix(d / manifest["blocks"][k]).astype(np.float64) for k in BLOCKS}
    arrs["bo"] = arrs["bo"].reshape(-1)
    model = ToyModel(**arrs, seed=int(manifest.get("seed", 0)))
    if (model.V, model.F, model.E) != (manifest["V"], manifest["F"], manifest["E"]):
        raise HarnessError(f"{mpath}: block shapes disagree with manifest dimensions")
    model.check()
    return model, manifest.get("vocab")
