"""Loss-masked training: cross-entropy on target positions only, factored
second-moment adaptive updates with update clipping, constant or
ramp-then-decay learning rates."""

import json
from dataclasses import dataclass, field

import numpy as np

from .model import Checkpoint, backward_batch, forward_batch, save_checkpoint

CLIP_THRESHOLD = 1.0
_EPS1 = 1e-30
_DECAY_EXPONENT = -0.8


def loss(logits: np.ndarray, example) -> float:
    """Mean cross-entropy predicting ids[i+1] from logits[i], restricted to
    positions whose loss mask is 1. Mask-0 positions contribute nothing."""
    logits = np.asarray(logits)
    ids = example.ids
    mask = example.loss_mask
    if logits.ndim != 2 or logits.shape[0] != len(ids):
        raise ValueError(f"logits shape {logits.shape} does not match {len(ids)} ids")
    targets = np.nonzero(mask[1:] == 1)[0] + 1  # predicted from position j-1
    if len(targets) == 0:
        raise ValueError("loss mask selects no predictable positions")
    rows = logits[targets - 1].astype(np.float64)
    shifted = rows - rows.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(len(targets)), ids[targets]]
    return float(np.mean(log_z - picked))


def loss_logits_grad(logits: np.ndarray, example) -> np.ndarray:
    """Gradient of ``loss`` with respect to the logits. Rows that predict a
    mask-0 position (and the final row) are exactly zero."""
    logits = np.asarray(logits)
    ids = example.ids
    targets = np.nonzero(example.loss_mask[1:] == 1)[0] + 1
    grad = np.zeros_like(logits, dtype=np.float64)
    rows = logits[targets - 1].astype(np.float64)
    shifted = rows - rows.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    probs[np.arange(len(targets)), ids[targets]] -= 1.0
    grad[targets - 1] = probs / len(targets)
    return grad.astype(logits.dtype)


def make_batch(examples, pad_id: int = 0):
    """Pad a list of TrainingExamples to a common length.

    Returns (ids, target_mask) of shape (B, T); padding carries mask 0 so it
    never contributes to the loss, and being suffix-only it cannot influence
    real positions through causal attention.
    """
    width = max(len(ex) for ex in examples)
    ids = np.full((len(examples), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(examples), width), dtype=np.int8)
    for r, ex in enumerate(examples):
        ids[r, : len(ex)] = ex.ids
        mask[r, : len(ex)] = ex.loss_mask
    return ids, mask


def loss_and_grads(ckpt: Checkpoint, ids: np.ndarray, target_mask: np.ndarray,
                   train: bool = True, seed: int = 0):
    """Pooled masked cross-entropy over a batch plus gradients for every
    tensor. The tied head runs only on rows that actually predict a target."""
    cfg = ckpt.config
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    target_mask = np.atleast_2d(np.asarray(target_mask, dtype=np.int8))
    logits_unused, hidden, cache = forward_batch(
        ckpt, ids, train=train, seed=seed, need_cache=True
    )
    del logits_unused  # head is recomputed restricted to active rows below
    b, t_len = ids.shape
    rows_b, rows_i = np.nonzero(target_mask[:, 1:] == 1)
    if len(rows_b) == 0:
        raise ValueError("batch has no target positions")
    targets = ids[rows_b, rows_i + 1]

    embed = ckpt.tensors["embed"]
    tsz = cfg.vocab_text
    h_act = hidden[rows_b, rows_i]  # (N, m)
    logits = np.empty((len(rows_b), cfg.total_vocab), dtype=h_act.dtype)
    logits[:, :tsz] = h_act @ embed[:tsz].T
    if cfg.vocab_audio:
        logits[:, tsz:] = h_act @ embed[tsz:].T

    shifted = (logits - logits.max(axis=1, keepdims=True)).astype(np.float64)
    exp = np.exp(shifted)
    z = exp.sum(axis=1)
    n_act = len(rows_b)
    loss_val = float(np.mean(np.log(z) - shifted[np.arange(n_act), targets]))

    dlogits = (exp / z[:, None]).astype(h_act.dtype)
    dlogits[np.arange(n_act), targets] -= 1.0
    dlogits /= h_act.dtype.type(n_act)

    dh_act = dlogits[:, :tsz] @ embed[:tsz]
    if cfg.vocab_audio:
        dh_act += dlogits[:, tsz:] @ embed[tsz:]
    dhidden = np.zeros_like(hidden)
    dhidden[rows_b, rows_i] = dh_act

    grads = backward_batch(ckpt, cache, dhidden)
    grads["embed"][:tsz] += dlogits[:, :tsz].T @ h_act
    if cfg.vocab_audio:
        grads["embed"][tsz:] += dlogits[:, tsz:].T @ h_act
    return loss_val, grads


@dataclass
class LRSchedule:
    """Constant rate by default; "ramp_decay" ramps linearly to ``peak`` then
    decays exponentially toward ``end``."""

    kind: str = "constant"
    rate: float = 5e-5
    peak: float = 1e-4
    end: float = 1e-5
    warmup: int = 1000
    half_life: int = 2000

    def __post_init__(self):
        if self.kind not in ("constant", "ramp_decay"):
            raise ValueError(f"unknown schedule {self.kind!r}")

    def __call__(self, step: int) -> float:
        if self.kind == "constant":
            return self.rate
        if step <= self.warmup:
            return self.peak * step / max(1, self.warmup)
        return max(self.end, self.peak * 0.5 ** ((step - self.warmup) / self.half_life))


@dataclass
class OptimizerState:
    factored: dict = field(default_factory=dict)  # name -> (row, col) or full accumulator
    step: int = 0
    schedule: LRSchedule = field(default_factory=LRSchedule)

    @classmethod
    def for_checkpoint(cls, ckpt: Checkpoint, schedule: LRSchedule = None):
        state = cls(schedule=schedule or LRSchedule())
        for name, arr in ckpt.tensors.items():
            if arr.ndim >= 2:
                state.factored[name] = (
                    np.zeros(arr.shape[0], dtype=np.float64),
                    np.zeros(arr.shape[1], dtype=np.float64),
                )
            else:
                state.factored[name] = np.zeros(arr.shape, dtype=np.float64)
        return state


def adafactor_update(ckpt: Checkpoint, grads: dict, state: OptimizerState) -> float:
    """One factored-second-moment step with RMS update clipping.

    Matrices keep per-row and per-column accumulators whose outer product
    approximates the full second moment; vectors keep it exactly.
    """
    state.step += 1
    beta2 = 1.0 - state.step ** _DECAY_EXPONENT
    lr = state.schedule(state.step)
    for name, g in grads.items():
        g = g.astype(np.float64)
        g2 = g * g + _EPS1
        acc = state.factored[name]
        if g.ndim >= 2:
            row, col = acc
            row *= beta2
            row += (1.0 - beta2) * g2.mean(axis=1)
            col *= beta2
            col += (1.0 - beta2) * g2.mean(axis=0)
            vhat = np.outer(row, col) / row.mean()
        else:
            acc *= beta2
            acc += (1.0 - beta2) * g2
            vhat = acc
        update = g / np.sqrt(vhat)
        rms = np.sqrt(np.mean(update * update))
        if rms > CLIP_THRESHOLD:
            update = update * (CLIP_THRESHOLD / rms)
        tensor = ckpt.tensors[name]
        tensor -= (lr * update).astype(tensor.dtype)
    return lr


@dataclass
class TrainConfig:
    batch_size: int = 8
    seed: int = 0
    schedule: LRSchedule = field(default_factory=LRSchedule)
    log_every: int = 1
    checkpoint_every: int = 0
    checkpoint_path: str = None


def _step_seed(base_seed: int, step: int) -> int:
    return int(np.random.SeedSequence([base_seed & (2**63 - 1), step]).generate_state(1)[0])


def train(ckpt: Checkpoint, stream, opt_cfg: TrainConfig, steps: int):
    """Train for ``steps`` optimizer steps, drawing batches from ``stream``.

    Returns (new checkpoint, metrics log). The input checkpoint is untouched;
    all tensors receive updates. Aborts with diagnostics on a non-finite loss.
    """
    ckpt = ckpt.copy()
    state = OptimizerState.for_checkpoint(ckpt, opt_cfg.schedule)
    log = []
    for _ in range(steps):
        examples = [next(stream) for _ in range(opt_cfg.batch_size)]
        ids, mask = make_batch(examples)
        step_seed = _step_seed(opt_cfg.seed, ckpt.step)
        loss_val, grads = loss_and_grads(ckpt, ids, mask, train=True, seed=step_seed)
        if not np.isfinite(loss_val):
            norms = {k: float(np.linalg.norm(v)) for k, v in grads.items()}
            raise RuntimeError(
                f"non-finite loss {loss_val} at step {ckpt.step}; grad norms {norms}"
            )
        lr = adafactor_update(ckpt, grads, state)
        ckpt.step += 1
        if ckpt.step % opt_cfg.log_every == 0:
            log.append({"step": ckpt.step, "loss": loss_val, "lr": lr})
        if (
            opt_cfg.checkpoint_every
            and opt_cfg.checkpoint_path
            and ckpt.step % opt_cfg.checkpoint_every == 0
        ):
            save_checkpoint(opt_cfg.checkpoint_path, ckpt)
    return ckpt, log


def save_metrics_log(path, log) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in log:
            f.write(json.dumps(rec) + "\n")


def gradient_check(ckpt: Checkpoint, ids, target_mask, eps: float = 1e-5) -> dict:
    """Compare analytic gradients against central finite differences.

    The checkpoint should carry float64 tensors. Returns, per tensor, the
    relative error ||g_analytic - g_fd|| / max(||g_analytic||, ||g_fd||).
    """
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    target_mask = np.atleast_2d(np.asarray(target_mask, dtype=np.int8))
    _, analytic = loss_and_grads(ckpt, ids, target_mask, train=False)

    def loss_at():
        val, _ = loss_and_grads(ckpt, ids, target_mask, train=False)
        return val

    report = {}
    for name, tensor in ckpt.tensors.items():
        fd = np.zeros_like(tensor)
        flat = tensor.reshape(-1)
        fd_flat = fd.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = loss_at()
            flat[j] = orig - eps
            lo = loss_at()
            flat[j] = orig
            fd_flat[j] = (hi - lo) / (2.0 * eps)
        ga = analytic[name]
        denom = max(float(np.linalg.norm(ga)), float(np.linalg.norm(fd)), 1e-12)
        report[name] = float(np.linalg.norm(ga - fd)) / denom
    return report
