"""ASR pretraining, multitask finetuning with encoder freezing, Adam, checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import Batch, DataError, Manifest, batch, iter_batches
from .intent import IntentSchema
from .losses import LossWeights, joint_loss
from .model import ConfigError, ModelConfig, MultitaskModel
from .tokenizer import Vocab

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MTSL"
CKPT_VERSION = 1
DTYPE_F32, DTYPE_U8 = 0, 1
META_TENSOR = "__meta__"


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    schedule: str = "constant"  # constant | noam
    warmup_steps: int = 2000
    betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-9
    batch_size: int = 16
    max_epochs: int = 30
    patience: int = 10
    freeze_encoder: bool = True
    grad_clip: float = 5.0
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.betas = tuple(self.betas)
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if self.schedule not in ("constant", "noam"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def lr_at(self, step: int, d_model: int) -> float:
        if self.schedule == "constant":
            return self.lr
        step = max(step, 1)
        return self.lr * d_model ** -0.5 * min(step ** -0.5, step * self.warmup_steps ** -1.5)


class Adam:
    def __init__(self, params, betas=(0.9, 0.98), eps=1e-9):
        self.params = [p for p in params]
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def clip(self, max_norm: float) -> float:
        sq = sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in self.params if p.requires_grad)
        norm = math.sqrt(sq)
        if max_norm > 0 and norm > max_norm:
            scale = max_norm / (norm + 1e-12)
            for p in self.params:
                if p.requires_grad:
                    p.grad = p.grad * scale
        return norm

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if not p.requires_grad:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# evaluation hooks used for model selection
# ---------------------------------------------------------------------------


def evaluate_loss(model: MultitaskModel, manifest: Manifest, vocab: Vocab, weights: LossWeights,
                  batch_size: int = 32) -> float:
    task = model.cfg.task if model.cfg.task != "asr" else "asr"
    total, n = 0.0, 0
    with nx.no_grad():
        for utts in iter_batches(manifest.utterances, batch_size):
            b = batch(utts, vocab, task, manifest.schema)
            out = model.forward_train(b.feats, b.feat_lengths, b.tokens, b.token_lengths)
            _, br = joint_loss(out, b.targets(), weights, task)
            total += br["total"] * len(b)
            n += len(b)
    return total / max(n, 1)


def slu_metric(model: MultitaskModel, manifest: Manifest, vocab: Vocab, batch_size: int = 32) -> float:
    from .decoding import predict

    preds = predict(model, manifest, vocab, batch_size=batch_size, decode_asr=False)
    if model.cfg.task == "intent":
        from .decoding import intent_accuracy

        return intent_accuracy([p["intent"] for p in preds], [u.intent for u in manifest])
    from .decoding import macro_f1
    from .data import SENTIMENTS

    return macro_f1([SENTIMENTS.index(p["sentiment"]) for p in preds],
                    [SENTIMENTS.index(u.sentiment) for u in manifest], 3)["macro_f1"]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: MultitaskModel
    history: list[dict]
    best_epoch: int


def _train_step(model, opt, b: Batch, cfg: TrainConfig, task: str, step: int) -> dict:
    opt.zero_grad()
    run_dec = cfg.weights.w_asr > 0 or model.cfg.tap.site == "asr_decoder"
    out = model.forward_train(b.feats, b.feat_lengths, b.tokens, b.token_lengths, run_decoder=run_dec)
    total, br = joint_loss(out, b.targets(), cfg.weights, task)
    nx.backward(total)
    br["grad_norm"] = opt.clip(cfg.grad_clip)
    lr = cfg.lr_at(step, model.cfg.d_model)
    opt.step(lr)
    br["lr"] = lr
    return br


def train(model: MultitaskModel, cfg: TrainConfig, train_set: Manifest, vocab: Vocab,
          valid_set: Manifest | None = None, select: str = "loss", log_path: str | Path | None = None,
          stop_at=None) -> TrainResult:
    """Generic epoch loop with best-checkpoint selection.

    ``select`` is 'loss' (lowest validation joint loss) or 'slu' (highest
    validation SLU metric, ties broken by loss).  Without a validation set
    the final epoch is kept.  ``stop_at(model, epoch)`` may return True to
    end training early.
    """
    if len(train_set) == 0:
        raise DataError("empty training manifest")
    task = model.cfg.task
    params = [p for p in model.parameters() if p.requires_grad]
    opt = Adam(params, cfg.betas, cfg.adam_eps)
    history: list[dict] = []
    best_key, best_state, best_epoch, bad = None, None, -1, 0
    step = 0
    utts = train_set.utterances
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "epoch", "ctc", "ce", "slu", "total", "lr", "val_metric"])
    try:
        for epoch in range(cfg.max_epochs):
            order = nx.make_rng(cfg.seed, "shuffle", epoch).permutation(len(utts))
            sums: dict[str, float] = {}
            nb = 0
            for chunk in iter_batches(utts, cfg.batch_size, order):
                step += 1
                b = batch(chunk, vocab, task, train_set.schema)
                br = _train_step(model, opt, b, cfg, task, step)
                for k, v in br.items():
                    sums[k] = sums.get(k, 0.0) + v
                nb += 1
                if writer:
                    writer.writerow([step, epoch] + [br.get(k, "") for k in ("ctc", "ce", "slu", "total")]
                                    + [br["lr"], ""])
            rec = {k: v / nb for k, v in sums.items()}
            rec["epoch"] = epoch
            if valid_set is not None and len(valid_set):
                vloss = evaluate_loss(model, valid_set, vocab, cfg.weights)
                rec["val_loss"] = vloss
                if select == "slu" and task != "asr":
                    rec["val_metric"] = slu_metric(model, valid_set, vocab)
                    key = (rec["val_metric"], -vloss)
                else:
                    key = (-vloss,)
                if writer:
                    writer.writerow([step, epoch, "", "", "", "", "", rec.get("val_metric", -vloss)])
                if best_key is None or key > best_key:
                    best_key, best_state, best_epoch, bad = key, state_dict(model), epoch, 0
                else:
                    bad += 1
            history.append(rec)
            log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in rec.items() if isinstance(v, float)})
            if valid_set is not None and bad >= cfg.patience:
                break
            if stop_at is not None and stop_at(model, epoch):
                break
    finally:
        if fh:
            fh.close()
    if best_state is not None:
        load_state_dict(model, best_state)
    else:
        best_epoch = len(history) - 1
    return TrainResult(model, history, best_epoch)


def pretrain_asr(model_cfg: ModelConfig, cfg: TrainConfig, asr_set: Manifest, vocab: Vocab,
                 valid_set: Manifest | None = None, **kw) -> TrainResult:
    """Train encoder and ASR head on the hybrid loss only."""
    if len(asr_set) == 0:
        raise DataError("empty ASR manifest")
    mcfg = model_cfg.with_(task="asr", n_labels=0)
    model = MultitaskModel(mcfg)
    w = LossWeights(cfg.weights.ctc_weight, w_asr=1.0, w_slu=0.0, label_smoothing=cfg.weights.label_smoothing)
    pcfg = TrainConfig(**{**cfg.__dict__, "weights": w, "freeze_encoder": False})
    return train(model, pcfg, asr_set, vocab, valid_set, select="loss", **kw)


def finetune_mtl(model_cfg: ModelConfig, cfg: TrainConfig, init_state: dict[str, np.ndarray],
                 train_set: Manifest, vocab: Vocab, valid_set: Manifest | None = None, **kw) -> TrainResult:
    """Initialise encoder + ASR head from ``init_state``, add a fresh SLU head, train on the joint loss."""
    model = MultitaskModel(model_cfg)
    shared = {k: v for k, v in init_state.items() if not k.startswith("slu.")}
    load_state_dict(model, shared, strict=False, require=[n for n, _ in model.named_parameters()
                                                          if not n.startswith("slu.")])
    if cfg.freeze_encoder:
        model.freeze_encoder(True)
    return train(model, cfg, train_set, vocab, valid_set, select="slu", **kw)


# ---------------------------------------------------------------------------
# state dicts and the checkpoint file format
# ---------------------------------------------------------------------------


def state_dict(model: MultitaskModel) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.named_parameters()}


def load_state_dict(model: MultitaskModel, state: dict[str, np.ndarray], strict: bool = True,
                    require: list[str] | None = None) -> None:
    params = dict(model.named_parameters())
    problems = []
    for name, arr in state.items():
        if name not in params:
            if strict:
                problems.append(f"unexpected tensor {name}")
            continue
        if params[name].shape != arr.shape:
            problems.append(f"{name}: checkpoint {arr.shape} vs model {params[name].shape}")
    needed = list(params) if strict else (require or [])
    problems += [f"missing tensor {n}" for n in needed if n not in state]
    if problems:
        raise CheckpointError("incompatible checkpoint:\n  " + "\n  ".join(problems))
    for name, arr in state.items():
        if name in params:
            params[name].data = arr.astype(params[name].dtype).copy()


def _crc(payload: bytes) -> int:
    return zlib.crc32(payload) & 0xFFFFFFFF


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write the MTSL format.

    b"MTSL", u32 version, u32 count, then per tensor: u16 name length, name,
    u8 dtype (0 f32, 1 u8), u8 rank, rank*u32 dims, little-endian data; a
    trailing u32 CRC32 covers everything before it.  ``meta`` is stored as a
    UTF-8 JSON u8 tensor named ``__meta__``.
    """
    items = list(tensors.items())
    if meta is not None:
        blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
        items.insert(0, (META_TENSOR, blob))
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(items))]
    for name, arr in items:
        raw_name = name.encode("utf-8")
        if arr.dtype == np.uint8:
            code, data = DTYPE_U8, arr
        else:
            code, data = DTYPE_F32, np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", code, data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(np.ascontiguousarray(data).tobytes())
    payload = b"".join(parts)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(payload + struct.pack("<I", _crc(payload)))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 16 or raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not an MTSL checkpoint")
    payload, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if _crc(payload) != crc:
        raise CheckpointError(f"{path}: corrupt checkpoint (CRC mismatch or truncated)")
    version, count = struct.unpack_from("<II", payload, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    tensors: dict[str, np.ndarray] = {}
    meta: dict = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", payload, pos)
            pos += 2
            name = payload[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BB", payload, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", payload, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if code == DTYPE_F32:
                arr = np.frombuffer(payload, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
                pos += 4 * n
            elif code == DTYPE_U8:
                arr = np.frombuffer(payload, dtype=np.uint8, count=n, offset=pos).reshape(dims).copy()
                pos += n
            else:
                raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
            if name == META_TENSOR:
                meta = json.loads(arr.tobytes().decode("utf-8"))
            else:
                tensors[name] = arr
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if pos != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - pos} trailing bytes")
    return tensors, meta


@dataclass
class Bundle:
    """A model together with what is needed to use it (vocab, schema)."""

    model: MultitaskModel
    vocab: Vocab
    schema: IntentSchema | None = None
    extra: dict = field(default_factory=dict)


def save_bundle(path: str | Path, bundle: Bundle) -> None:
    meta = {"model_config": bundle.model.cfg.to_dict(), "vocab": bundle.vocab.symbols,
            "merges": [list(m) for m in bundle.vocab.merges],
            "schema": bundle.schema.to_json() if bundle.schema else None, **bundle.extra}
    save_checkpoint(path, state_dict(bundle.model), meta)


def load_bundle(path: str | Path, expect: ModelConfig | None = None) -> Bundle:
    tensors, meta = load_checkpoint(path)
    if "model_config" not in meta:
        raise CheckpointError(f"{path}: checkpoint has no model config")
    cfg = ModelConfig.from_dict(meta["model_config"])
    if expect is not None:
        diffs = [k for k in ("vocab_size", "d_model", "n_heads", "d_ff", "n_enc_layers", "n_dec_layers",
                             "conv_channels", "n_mels")
                 if getattr(cfg, k) != getattr(expect, k)]
        if diffs:
            raise CheckpointError("incompatible checkpoint: " + ", ".join(
                f"{k}={getattr(cfg, k)} (expected {getattr(expect, k)})" for k in diffs))
    model = MultitaskModel(cfg)
    load_state_dict(model, tensors)
    schema = IntentSchema.from_json(meta["schema"]) if meta.get("schema") else None
    extra = {k: v for k, v in meta.items() if k not in ("model_config", "vocab", "merges", "schema")}
    merges = [tuple(m) for m in meta["merges"]] if "merges" in meta else None
    return Bundle(model, Vocab(meta["vocab"], merges), schema, extra)
