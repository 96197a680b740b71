"""CTC, label-smoothed cross-entropy, multi-hot BCE and the weighted joint loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .tokenizer import BLANK, PAD

# stands in for log(0) inside the CTC lattice; finite so gradients never see inf - inf
LOG_ZERO = -1e30


class InfeasibleTargetError(ValueError):
    """Target cannot be aligned to the available frames."""


@dataclass
class LossWeights:
    ctc_weight: float = 0.3
    w_asr: float = 0.5
    w_slu: float = 0.5
    label_smoothing: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError(f"ctc_weight must be in [0, 1], got {self.ctc_weight}")
        if self.w_asr < 0 or self.w_slu < 0:
            raise ValueError(f"loss weights must be non-negative, got w_asr={self.w_asr} w_slu={self.w_slu}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if not all(np.isfinite([self.ctc_weight, self.w_asr, self.w_slu, self.label_smoothing])):
            raise ValueError("loss weights must be finite")

    def to_dict(self) -> dict:
        return asdict(self)


def min_ctc_frames(target) -> int:
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_loss(log_probs: Tensor, targets, input_lengths=None, blank: int = BLANK,
             reduction: str = "mean") -> Tensor:
    """Negative log marginal likelihood of ``targets`` over all CTC alignments.

    log_probs: [T, C] for one utterance or [B, T, C] for a batch; rows must
    be log-distributions.  The alpha recursion runs over the blank-interleaved
    label sequence with differentiable log-sum-exp nodes, so the gradient is
    exact.  ``reduction`` is 'mean' (over the batch), 'sum' or 'none'.
    """
    single = log_probs.ndim == 2
    if single:
        log_probs = log_probs.reshape(1, *log_probs.shape)
        targets = [targets]
        input_lengths = None if input_lengths is None else [input_lengths]
    B, T, C = log_probs.shape
    targets = [np.asarray(t, dtype=np.int64).reshape(-1) for t in targets]
    if len(targets) != B:
        raise ValueError(f"{len(targets)} targets for batch of {B}")
    in_len = np.full(B, T) if input_lengths is None else np.asarray(input_lengths, dtype=np.int64)
    for b, y in enumerate(targets):
        if y.size and (y.min() < 0 or y.max() >= C or (y == blank).any()):
            raise ValueError(f"target {b} has ids outside the label set or equal to blank")
        need = min_ctc_frames(y)
        if need > in_len[b]:
            raise InfeasibleTargetError(
                f"target {b} of length {y.size} needs >= {need} frames, only {in_len[b]} available")

    U = max(t.size for t in targets)
    S = 2 * U + 1
    ext = np.full((B, S), blank, dtype=np.int64)
    for b, y in enumerate(targets):
        ext[b, 1:2 * y.size:2] = y
    s_len = np.array([2 * t.size + 1 for t in targets])
    skip = np.zeros((B, S), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])

    emit = nx.gather(log_probs, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)  # [B, T, S]
    dtype = log_probs.dtype
    neg1 = Tensor(np.full((B, 1), LOG_ZERO, dtype=dtype))
    neg2 = Tensor(np.full((B, 2), LOG_ZERO, dtype=dtype))
    neg_s = Tensor(np.full((B, S), LOG_ZERO, dtype=dtype))

    init_mask = np.zeros((B, S), dtype=bool)
    init_mask[:, 0] = True
    if S > 1:
        init_mask[:, 1] = s_len > 1
    alpha = nx.where(init_mask, emit[:, 0, :], neg_s)
    for t in range(1, T):
        stay = alpha
        step = nx.concat([neg1, alpha[:, :-1]], axis=1)
        jump = nx.where(skip, nx.concat([neg2, alpha[:, :-2]], axis=1), neg_s) if S > 2 else neg_s
        new = nx.logsumexp(nx.stack([stay, step, jump], axis=0), axis=0) + emit[:, t, :]
        active = np.broadcast_to((t < in_len)[:, None], (B, S))
        alpha = new if active.all() else nx.where(active, new, alpha)

    rows = np.arange(B)
    last = alpha[rows, s_len - 1]
    prev_idx = np.maximum(s_len - 2, 0)
    prev = nx.where(s_len > 1, alpha[rows, prev_idx], Tensor(np.full(B, LOG_ZERO, dtype=dtype)))
    ll = nx.logsumexp(nx.stack([last, prev], axis=0), axis=0)  # [B]
    nll = -ll
    if single or reduction == "none":
        return nll.reshape(()) if single else nll
    if reduction == "sum":
        return nll.sum()
    if reduction == "mean":
        return nll.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def smoothed_ce(logits: Tensor, targets, eps: float = 0.1, ignore_index: int | None = PAD) -> Tensor:
    """Mean over non-ignored rows of CE against (1-eps)*onehot + eps/V."""
    V = logits.shape[-1]
    logits = logits.reshape(-1, V)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != logits.shape[0]:
        raise ValueError(f"{targets.shape[0]} targets for {logits.shape[0]} rows")
    valid = np.ones_like(targets, dtype=bool) if ignore_index is None else targets != ignore_index
    n = int(valid.sum())
    if n == 0:
        raise ValueError("smoothed_ce: every position is padding")
    safe = np.where(valid, targets, 0)
    if safe.min() < 0 or safe.max() >= V:
        raise ValueError("smoothed_ce: target id out of range")
    q = np.full((targets.shape[0], V), eps / V, dtype=np.float64)
    q[np.arange(q.shape[0]), safe] += 1.0 - eps
    q[~valid] = 0.0
    logp = nx.log_softmax(logits, axis=-1)
    return -(logp * Tensor(q.astype(logits.dtype))).sum() * (1.0 / n)


def multihot_bce(logits: Tensor, target_bits) -> Tensor:
    """Mean sigmoid BCE over every bit."""
    bits = np.asarray(target_bits)
    if not np.isin(bits, (0, 1)).all():
        raise ValueError("target bits must be 0 or 1")
    return nx.binary_cross_entropy_with_logits(logits, bits)


def asr_losses(out, ctc_targets, dec_targets: np.ndarray, eps: float) -> tuple[Tensor, Tensor | None]:
    ctc = ctc_loss(out.ctc_log_probs, ctc_targets, out.enc_lengths)
    ce = None
    if out.dec_logits is not None:
        # decoder class k is token id k + 1 (blank has no decoder output)
        ce = smoothed_ce(out.dec_logits, np.asarray(dec_targets) - 1, eps, ignore_index=PAD - 1)
    return ctc, ce


def slu_loss(out, task: str, slu_target, eps: float) -> Tensor:
    if task == "intent":
        return multihot_bce(out.slu_logits, slu_target)
    if task == "sentiment":
        return smoothed_ce(out.slu_logits, slu_target, eps, ignore_index=None)
    raise ValueError(f"no SLU loss for task {task!r}")


def joint_loss(out, targets: dict, weights: LossWeights, task: str) -> tuple[Tensor, dict[str, float]]:
    """total = w_asr * (lambda*CTC + (1-lambda)*CE) + w_slu * L_slu.

    ``targets`` holds 'ctc' (list of id arrays), 'tokens' ([B, U] ids with
    eos, pad-padded) and 'slu' (bits or class ids).  Terms whose weight is
    zero are evaluated without recording gradients.
    """
    weights.validate()
    lam = weights.ctc_weight
    breakdown: dict[str, float] = {}
    total: Tensor | None = None

    def term(weight, fn):
        if weight > 0:
            return fn()
        with nx.no_grad():
            return fn()

    if out.dec_logits is not None or weights.w_asr > 0:
        ctc, ce = term(weights.w_asr, lambda: asr_losses(out, targets["ctc"], targets["tokens"],
                                                        weights.label_smoothing))
        breakdown["ctc"] = ctc.item()
        if ce is not None:
            breakdown["ce"] = ce.item()
        if weights.w_asr > 0:
            hybrid = ctc * lam if ce is None else ctc * lam + ce * (1.0 - lam)
            breakdown["asr"] = hybrid.item()
            total = hybrid * weights.w_asr
    if task in ("intent", "sentiment") and out.slu_logits is not None:
        sl = term(weights.w_slu, lambda: slu_loss(out, task, targets["slu"], weights.label_smoothing))
        breakdown["slu"] = sl.item()
        if weights.w_slu > 0:
            total = sl * weights.w_slu if total is None else total + sl * weights.w_slu
    if total is None:
        raise ValueError("all loss weights are zero")
    breakdown["total"] = total.item()
    return total, breakdown
