"""Momentum-contrast training of a small MLP encoder on tile features.

A query encoder and an EMA key encoder map augmented views of a tile to
unit-norm embeddings; the contrastive loss scores the positive key against
the other keys in the batch plus a FIFO queue of recent keys. Batches come
from :mod:`tilesurv.sampling`, which is what makes the training slide-aware.
All gradients are analytic (hand backprop through the encoder and loss) so
they can be checked against finite differences.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import mlp
from .cohort import TileRecord, feature_matrix
from .sampling import BatchSpec, epoch_schedule


@dataclass(frozen=True)
class AugmentConfig:
    """Feature-space augmentation: per-sample scale jitter, dropout, additive noise."""

    noise_scale: float = 0.05
    dropout_prob: float = 0.1
    scale_jitter: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if not (0.0 <= self.dropout_prob < 1.0):
            raise ValueError("dropout_prob must be in [0, 1)")
        if self.scale_jitter[0] > self.scale_jitter[1]:
            raise ValueError("scale_jitter range must be (low, high) with low <= high")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(noise_scale=0.0, dropout_prob=0.0, scale_jitter=(1.0, 1.0))


def augment(features: np.ndarray, config: AugmentConfig,
            rng: np.random.Generator) -> np.ndarray:
    """One independent augmentation draw; same shape as the input."""
    single = features.ndim == 1
    x = np.atleast_2d(np.asarray(features, dtype=float))
    scale = rng.uniform(config.scale_jitter[0], config.scale_jitter[1], size=(x.shape[0], 1))
    out = x * scale
    if config.dropout_prob > 0.0:
        keep = rng.random(x.shape) >= config.dropout_prob
        out = out * keep
    if config.noise_scale > 0.0:
        out = out + rng.normal(0.0, config.noise_scale, size=x.shape)
    return out[0] if single else out


@dataclass
class EncoderState:
    """Query/momentum encoder weights plus the negative-key ring buffer."""

    theta_q: mlp.MlpParams
    theta_k: mlp.MlpParams
    queue: np.ndarray          # (Q, embed_dim), unit-norm rows
    queue_head: int = 0        # index of the oldest entry
    temperature: float = 0.07
    momentum: float = 0.999
    epoch: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not (0.0 <= self.momentum <= 1.0):
            raise ValueError("momentum must be in [0, 1]")

    @property
    def queue_size(self) -> int:
        return self.queue.shape[0]

    def ordered_queue(self) -> np.ndarray:
        """Queue keys oldest-to-newest."""
        return np.roll(self.queue, -self.queue_head, axis=0)

    def enqueue(self, keys: np.ndarray) -> None:
        """Overwrite the oldest entries with `keys` (FIFO)."""
        if keys.shape[0] > self.queue_size:
            raise ValueError("cannot enqueue more keys than the queue holds")
        for row in keys:  # ring write, possibly wrapping
            self.queue[self.queue_head] = row
            self.queue_head = (self.queue_head + 1) % self.queue_size


def init_encoder_state(feature_dim: int, hidden_dim: int, embedding_dim: int,
                       queue_size: int, rng: np.random.Generator,
                       temperature: float = 0.07, momentum: float = 0.999) -> EncoderState:
    theta_q = mlp.init_params((feature_dim, hidden_dim, embedding_dim), rng)
    queue = rng.normal(size=(queue_size, embedding_dim))
    queue = mlp.l2_normalize_rows(queue)
    return EncoderState(theta_q=theta_q, theta_k=theta_q.copy(), queue=queue,
                        temperature=temperature, momentum=momentum)


def encode(weights: mlp.MlpParams, features: np.ndarray) -> np.ndarray:
    """Forward map to the unit sphere; accepts a single vector or a batch."""
    single = features.ndim == 1
    x = np.atleast_2d(np.asarray(features, dtype=float))
    raw, _ = mlp.forward(weights, x)
    out = mlp.l2_normalize_rows(raw)
    return out[0] if single else out


def info_nce_loss(q: np.ndarray, k_pos: np.ndarray, negatives: np.ndarray,
                  temperature: float) -> float:
    """Contrast one query against its positive key and a set of negative keys.

    loss = -log( exp(q.k+/T) / (exp(q.k+/T) + sum_neg exp(q.k-/T)) ),
    evaluated with max-subtracted log-sum-exp.
    """
    negatives = np.atleast_2d(negatives)
    if negatives.shape[0] == 0:
        raise ValueError("contrast undefined without negatives")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    sims = np.concatenate(([q @ k_pos], negatives @ q)) / temperature
    peak = sims.max()
    return float(-sims[0] + peak + np.log(np.exp(sims - peak).sum()))


def loss_and_gradient(state: EncoderState, batch_views: tuple[np.ndarray, np.ndarray]):
    """Mean InfoNCE over a batch and its analytic gradient w.r.t. theta_q.

    The key-encoder outputs and the queue are constants (no gradient flows
    into them). Returns (loss, gradient, keys) with keys the unit-norm
    momentum-encoder embeddings of the second view, ready for enqueueing.
    """
    view_q, view_k = batch_views
    m = view_q.shape[0]
    raw_q, caches = mlp.forward(state.theta_q, view_q)
    q = mlp.l2_normalize_rows(raw_q)
    k = encode(state.theta_k, view_k)

    negatives = state.ordered_queue()
    logits = np.hstack([q @ k.T, q @ negatives.T]) / state.temperature
    peak = logits.max(axis=1, keepdims=True)
    shifted = logits - peak
    logsum = peak[:, 0] + np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logsum - np.diagonal(logits)))
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite contrastive loss {loss}")

    probs = np.exp(logits - logsum[:, None])
    probs[np.arange(m), np.arange(m)] -= 1.0
    probs /= m * state.temperature
    grad_q = probs[:, :m] @ k + probs[:, m:] @ negatives
    grad_raw = mlp.l2_normalize_backward(raw_q, q, grad_q)
    grads, _ = mlp.backward(state.theta_q, caches, grad_raw)
    return loss, grads, k


def momentum_update(theta_k: mlp.MlpParams, theta_q: mlp.MlpParams,
                    momentum: float) -> mlp.MlpParams:
    """theta_k' = momentum * theta_k + (1 - momentum) * theta_q, elementwise."""
    return mlp.ema(theta_k, theta_q, momentum)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 0.5
    lr_schedule: str = "cosine"  # or "constant"
    batch_spec: BatchSpec = field(default_factory=lambda: BatchSpec(128, "conditional", 4))
    queue_size: int = 1024
    hidden_dim: int = 64
    embedding_dim: int = 128
    temperature: float = 0.07
    momentum: float = 0.999
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.queue_size < self.batch_spec.batch_size:
            raise ValueError("queue_size must be >= batch_size")


@dataclass
class TrainResult:
    state: EncoderState
    loss_trace: list[float]  # mean batch loss per epoch
    steps: int


class DivergenceError(RuntimeError):
    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


def train(tiles: list[TileRecord], config: TrainConfig) -> TrainResult:
    """Full momentum-contrast loop; deterministic for a fixed seed."""
    if not tiles:
        raise ValueError("cannot train on an empty cohort")
    init_seed, sample_seed, augment_seed = np.random.SeedSequence(config.seed).spawn(3)
    state = init_encoder_state(
        feature_dim=tiles[0].features.shape[0],
        hidden_dim=config.hidden_dim,
        embedding_dim=config.embedding_dim,
        queue_size=config.queue_size,
        rng=np.random.default_rng(init_seed),
        temperature=config.temperature,
        momentum=config.momentum,
    )
    sample_rng = np.random.default_rng(sample_seed)
    augment_rng = np.random.default_rng(augment_seed)

    features = feature_matrix(tiles)
    row_of = {t.tile_id: i for i, t in enumerate(tiles)}

    trace: list[float] = []
    steps = 0
    total_steps = None
    bad_epochs = 0
    for epoch in range(config.epochs):
        schedule = epoch_schedule(tiles, config.batch_spec, sample_rng)
        if total_steps is None:
            total_steps = max(1, config.epochs * len(schedule))
        batch_losses = []
        for batch in schedule:
            rows = features[[row_of[tid] for tid in batch.tile_ids]]
            view_q = augment(rows, config.augment, augment_rng)
            view_k = augment(rows, config.augment, augment_rng)
            loss, grads, keys = loss_and_gradient(state, (view_q, view_k))
            if config.lr_schedule == "cosine":
                lr = config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * steps / total_steps))
            else:
                lr = config.learning_rate
            state.theta_q = mlp.add_scaled(state.theta_q, grads, -lr)
            state.theta_k = momentum_update(state.theta_k, state.theta_q, state.momentum)
            state.enqueue(keys)
            batch_losses.append(loss)
            steps += 1
        epoch_loss = float(np.mean(batch_losses))
        trace.append(epoch_loss)
        state.epoch = epoch + 1
        bad_epochs = bad_epochs + 1 if epoch_loss > 10.0 * trace[0] else 0
        if bad_epochs >= 3:
            raise DivergenceError(
                f"loss exceeded 10x its initial value for 3 consecutive epochs "
                f"(initial {trace[0]:.4f}, latest {epoch_loss:.4f})", trace)
    return TrainResult(state=state, loss_trace=trace, steps=steps)


def embed_tiles(state: EncoderState, tiles: list[TileRecord]) -> np.ndarray:
    """Query-encoder embeddings for a list of tiles, in list order."""
    return encode(state.theta_q, feature_matrix(tiles))


def slide_probe(embeddings: np.ndarray, slide_ids, seed: int = 0) -> float:
    """Held-out accuracy of a linear slide-identity classifier on frozen embeddings.

    Each slide's tiles are split 50/50 into probe-train and probe-test halves;
    chance level is 1/#slides. High accuracy means the embeddings leak slide
    identity (the batch effect).
    """
    from sklearn.linear_model import LogisticRegression

    slide_ids = np.asarray(slide_ids)
    by_slide: dict[int, np.ndarray] = {
        s: np.flatnonzero(slide_ids == s) for s in np.unique(slide_ids)
    }
    for s in [s for s, idx in by_slide.items() if idx.size < 2]:
        warnings.warn(f"slide {s} has a single tile; excluded from the probe")
        del by_slide[s]
    if len(by_slide) < 2:
        raise ValueError("slide probe needs at least 2 slides with >= 2 tiles")

    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for s in sorted(by_slide):
        idx = by_slide[s][rng.permutation(by_slide[s].size)]
        half = idx.size // 2
        train_idx.extend(idx[:half])
        test_idx.extend(idx[half:])

    clf = LogisticRegression(max_iter=500)
    clf.fit(embeddings[train_idx], slide_ids[train_idx])
    return float(clf.score(embeddings[test_idx], slide_ids[test_idx]))


# ---------------------------------------------------------------------------
# Checkpoint format: decimal text, one section per component. Layout:
#   line 1: "tilesurv-checkpoint 1"
#   line 2: "<temperature> <momentum> <epoch> <queue_head>"
#   line 3: encoder dims, space-separated
#   then, for theta_q and theta_k in turn: per layer, the weight matrix
#   (one row per line) followed by the bias (one line), then the queue
#   (one row per line). All floats use repr-exact %.17g.
# ---------------------------------------------------------------------------

def _write_array(fh, arr: np.ndarray) -> None:
    for row in np.atleast_2d(arr):
        fh.write(" ".join(format(x, ".17g") for x in row) + "\n")


def _read_rows(lines, n_rows: int, n_cols: int) -> np.ndarray:
    out = np.empty((n_rows, n_cols))
    for i in range(n_rows):
        out[i] = np.array(next(lines).split(), dtype=float)
    return out


def save_checkpoint(state: EncoderState, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("tilesurv-checkpoint 1\n")
        fh.write(f"{state.temperature:.17g} {state.momentum:.17g} "
                 f"{state.epoch} {state.queue_head}\n")
        dims = state.theta_q.dims
        fh.write(" ".join(str(d) for d in dims) + "\n")
        fh.write(f"{state.queue_size}\n")
        for params in (state.theta_q, state.theta_k):
            for w, b in zip(params.weights, params.biases):
                _write_array(fh, w)
                _write_array(fh, b)
        _write_array(fh, state.queue)


def load_checkpoint(path) -> EncoderState:
    with open(path, encoding="utf-8") as fh:
        lines = iter(fh.read().splitlines())
    magic = next(lines)
    if magic != "tilesurv-checkpoint 1":
        raise ValueError(f"{path}: not a checkpoint file (header {magic!r})")
    tau_s, mu_s, epoch_s, head_s = next(lines).split()
    dims = tuple(int(d) for d in next(lines).split())
    queue_size = int(next(lines))

    def read_params() -> mlp.MlpParams:
        weights, biases = [], []
        for din, dout in zip(dims[:-1], dims[1:]):
            weights.append(_read_rows(lines, din, dout))
            biases.append(_read_rows(lines, 1, dout)[0])
        return mlp.MlpParams(weights, biases)

    theta_q = read_params()
    theta_k = read_params()
    queue = _read_rows(lines, queue_size, dims[-1])
    return EncoderState(theta_q=theta_q, theta_k=theta_k, queue=queue,
                        queue_head=int(head_s), temperature=float(tau_s),
                        momentum=float(mu_s), epoch=int(epoch_s))


def write_loss_trace(trace: list[float], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in enumerate(trace):
            fh.write(f"{epoch},{loss:.17g}\n")
