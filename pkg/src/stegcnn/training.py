"""Joint loss, initialization, Adam and the training loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .data_pipeline import StegDataset, denormalize_array, sample_pairs
from .steg_model import ModelParams, NetworkConfig, build_model, decoder_forward, encoder_forward, model_backward

log = logging.getLogger(__name__)


class NonFiniteError(ArithmeticError):
    pass


class TrainingDiverged(NonFiniteError):
    """Raised when the loss stops being finite; carries the last good checkpoint."""

    def __init__(self, message: str, checkpoint: "Checkpoint"):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    lam: float = 1e-4

    def __post_init__(self):
        if min(self.alpha, self.beta, self.lam) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")


@dataclass
class LossBreakdown:
    total: float
    encoder: float
    decoder: float
    regularizer: float


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        arrays = _arrays(params)
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0, lr, beta1, beta2, eps)


@dataclass
class LogRow:
    epoch: int
    loss: float
    enc_psnr: float
    dec_psnr: float


@dataclass
class Checkpoint:
    config: NetworkConfig
    params: ModelParams
    adam: AdamState
    epoch: int = 0
    log: list[LogRow] = field(default_factory=list)


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape {a.shape} != {b.shape}")


def weight_sq_sum(params: ModelParams) -> float:
    # biases are not regularized
    return float(sum(np.sum(k.weights.astype(np.float64) ** 2) for k in params.kernels()))


def joint_loss(host, guest, hybrid, recovered, params: ModelParams, w: LossWeights) -> LossBreakdown:
    """alpha*mean((host-hybrid)^2) + beta*mean((guest-recovered)^2) + lam*sum(W^2)."""
    _check_same_shape(hybrid, host, "hybrid vs host")
    _check_same_shape(recovered, guest, "recovered vs guest")
    enc = float(np.mean((host.astype(np.float64) - hybrid) ** 2))
    dec = float(np.mean((guest.astype(np.float64) - recovered) ** 2))
    reg = weight_sq_sum(params)
    e, d, r = w.alpha * enc, w.beta * dec, w.lam * reg
    return LossBreakdown(e + d + r, e, d, r)


def loss_and_grads(params: ModelParams, host, guest, w: LossWeights):
    """Forward both networks, evaluate the joint loss and return its parameter gradients.

    Returns ``(breakdown, grads, hybrid, recovered)``.
    """
    hybrid, enc_cache = encoder_forward(params, host, guest)
    recovered, dec_cache = decoder_forward(params, hybrid)
    loss = joint_loss(host, guest, hybrid, recovered, params, w)
    dtype = hybrid.dtype
    g_hybrid = ((2.0 * w.alpha / hybrid.size) * (hybrid - host)).astype(dtype, copy=False)
    g_recovered = ((2.0 * w.beta / recovered.size) * (recovered - guest)).astype(dtype, copy=False)
    grads = model_backward(params, enc_cache, dec_cache, g_hybrid, g_recovered)
    if w.lam:
        for gk, pk in zip(grads.kernels(), params.kernels()):
            gk.weights += (2.0 * w.lam) * pk.weights
    return loss, grads, hybrid, recovered


def xavier_init(fan_in: int, fan_out: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform samples in [-a, a] with a = sqrt(6 / (fan_in + fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan_in and fan_out must be >= 1, got {fan_in}, {fan_out}")
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=count)


def _arrays(x) -> list[np.ndarray]:
    return x.arrays() if isinstance(x, ModelParams) else list(x)


def adam_step(params, grads, state: AdamState) -> None:
    """In-place bias-corrected Adam update of ``params`` and ``state``.

    ``params`` and ``grads`` are either :class:`ModelParams` or matching
    sequences of arrays.
    """
    p_arrays, g_arrays = _arrays(params), _arrays(grads)
    if len(p_arrays) != len(g_arrays) or len(p_arrays) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree on the number of arrays")
    for p, g in zip(p_arrays, g_arrays):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient, refusing to step")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)


def _batch_psnr(ref: np.ndarray, out: np.ndarray) -> np.ndarray:
    return metrics.psnr_batch(denormalize_array(ref), denormalize_array(out))


def train(config: NetworkConfig, data: StegDataset, w: LossWeights = LossWeights(), epochs: int = 1,
          batch_size: int = 32, seed: int = 0, lr: float = 1e-4, resume: Checkpoint | None = None,
          progress=None) -> Checkpoint:
    """Train encoder and decoder jointly; one log row per epoch.

    Each epoch runs ``len(data) // batch_size`` steps. Every step draws
    ``2 * batch_size`` distinct images, the first half used as covers and the
    second half as payloads.
    """
    if len(data) == 0:
        raise ValueError("training set is empty")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(data) < 2 * batch_size:
        raise ValueError(f"need at least {2 * batch_size} training images for batch size {batch_size}, have {len(data)}")

    if resume is None:
        params = build_model(config, seed)
        ckpt = Checkpoint(config, params, AdamState.fresh(params, lr=lr))
    else:
        ckpt = resume
    params, state = ckpt.params, ckpt.adam
    rng = np.random.default_rng([seed, ckpt.epoch])
    ids = np.arange(len(data))
    steps = max(len(data) // batch_size, 1)

    for _ in range(epochs):
        epoch = ckpt.epoch + 1
        losses, enc_p, dec_p = [], [], []
        for _step in range(steps):
            pairs = sample_pairs(ids, batch_size, rng)
            host, guest = data.batch(pairs)
            loss, grads, hybrid, recovered = loss_and_grads(params, host, guest, w)
            if not np.isfinite(loss.total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", ckpt)
            try:
                adam_step(params, grads, state)
            except NonFiniteError as exc:
                log.error("epoch %d: %s", epoch, exc)
                raise TrainingDiverged(f"non-finite gradient at epoch {epoch}", ckpt) from exc
            losses.append(loss.total)
            enc_p.append(_batch_psnr(host, hybrid))
            dec_p.append(_batch_psnr(guest, recovered))
        row = LogRow(epoch, float(np.mean(losses)), float(np.mean(np.concatenate(enc_p))),
                     float(np.mean(np.concatenate(dec_p))))
        ckpt.log.append(row)
        ckpt.epoch = epoch
        log.info("epoch %d loss %.6f enc_psnr %.2f dec_psnr %.2f", row.epoch, row.loss, row.enc_psnr, row.dec_psnr)
        if progress is not None:
            progress(row)
    return ckpt


def write_log_csv(rows: list[LogRow], path) -> None:
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss", "enc_psnr", "dec_psnr"])
        for r in rows:
            writer.writerow([r.epoch, repr(r.loss), repr(r.enc_psnr), repr(r.dec_psnr)])
