"""Shared encoder + hybrid CTC/attention ASR head + class-attention SLU head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numerics as nx
from .layers import (
    ClassAttention,
    ConvSubsampler,
    LayerNorm,
    Linear,
    Module,
    TransformerDecoderLayer,
    TransformerEncoderLayer,
    init_weight,
    padding_mask,
    sinusoidal_positions,
)
from .numerics import Tensor
from .tokenizer import EOS, N_SPECIALS, PAD, SOS


class ConfigError(ValueError):
    """Invalid model or run configuration."""


@dataclass(frozen=True)
class TapPoint:
    """Which hidden states feed the SLU head: ``encoder.<i>`` or ``ASR.<i>``."""

    site: str = "asr_decoder"
    layer_index: int = 2

    def __post_init__(self):
        if self.site not in ("encoder", "asr_decoder"):
            raise ConfigError(f"unknown tap site {self.site!r}")
        if self.layer_index < 0:
            raise ConfigError(f"tap layer index must be >= 0, got {self.layer_index}")

    @classmethod
    def parse(cls, text: str) -> "TapPoint":
        site, _, idx = text.partition(".")
        site_map = {"encoder": "encoder", "enc": "encoder", "asr": "asr_decoder", "ASR": "asr_decoder",
                    "asr_decoder": "asr_decoder"}
        if site not in site_map or not idx.lstrip("-").isdigit():
            raise ConfigError(f"cannot parse tap point {text!r} (expected e.g. 'encoder.3' or 'ASR.2')")
        return cls(site_map[site], int(idx))

    def __str__(self) -> str:
        return f"{'encoder' if self.site == 'encoder' else 'ASR'}.{self.layer_index}"


@dataclass
class ModelConfig:
    vocab_size: int = 40  # all ids including blank and the other specials
    n_mels: int = 80
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    n_enc_layers: int = 4
    n_dec_layers: int = 6
    conv_channels: tuple[int, int] = (8, 8)
    task: str = "intent"  # intent | sentiment | asr
    n_labels: int = 0
    slu_heads: int = 4
    slu_d_ff: int = 0
    tap: TapPoint = field(default_factory=TapPoint)
    slu_stop_grad: bool = False
    enc_pos_enc: bool = True
    max_target_len: int = 256
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.tap, str):
            self.tap = TapPoint.parse(self.tap)
        elif isinstance(self.tap, dict):
            self.tap = TapPoint(**self.tap)
        self.conv_channels = tuple(self.conv_channels)
        self.validate()

    def validate(self) -> None:
        if self.vocab_size <= N_SPECIALS:
            raise ConfigError(f"vocab_size must exceed the {N_SPECIALS} reserved specials")
        if self.d_model % self.n_heads or self.d_model % self.slu_heads:
            raise ConfigError("d_model must be divisible by n_heads and slu_heads")
        if self.task not in ("intent", "sentiment", "asr"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.task != "asr" and self.n_labels < 1:
            raise ConfigError(f"task {self.task} needs n_labels >= 1")
        limit = self.n_enc_layers if self.tap.site == "encoder" else self.n_dec_layers
        if self.task != "asr" and self.tap.layer_index >= limit:
            raise ConfigError(f"tap {self.tap} out of range: site has {limit} layers")

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def paper(cls, **kw) -> "ModelConfig":
        base = dict(vocab_size=5001, d_model=256, n_heads=4, d_ff=2048, n_enc_layers=12, n_dec_layers=6,
                    conv_channels=(64, 128), slu_heads=4, slu_d_ff=1024, tap=TapPoint("asr_decoder", 2))
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tap"] = str(self.tap)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


@dataclass
class ForwardOutput:
    ctc_log_probs: Tensor  # [B, T', V+1]
    enc_lengths: np.ndarray
    dec_logits: Tensor | None  # [B, U, V]; class k is token id k+1
    slu_logits: Tensor | None  # [B, n_labels]
    tapped: Tensor | None  # [B, L, d]
    tapped_pad: np.ndarray | None


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.subsample = ConvSubsampler(cfg.n_mels, cfg.conv_channels, cfg.d_model, rng)
        self.layers = [TransformerEncoderLayer(cfg.d_model, cfg.n_heads, cfg.d_ff, rng) for _ in range(cfg.n_enc_layers)]
        self.norm = LayerNorm(cfg.d_model)
        self.pos_enc = cfg.enc_pos_enc

    def __call__(self, feats: Tensor, lengths) -> tuple[list[Tensor], np.ndarray, np.ndarray]:
        """Returns per-layer outputs (last one post-norm), lengths and padding mask."""
        x, out_len = self.subsample(feats, lengths)
        if self.pos_enc:
            x = x + Tensor(sinusoidal_positions(x.shape[1], x.shape[2]))
        pad = padding_mask(out_len, x.shape[1])
        states = []
        for layer in self.layers:
            x = layer(x, pad)
            states.append(x)
        states[-1] = self.norm(x)
        return states, out_len, pad


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.d_model = cfg.d_model
        self.embed = init_weight(rng, cfg.d_model, (cfg.vocab_size, cfg.d_model))
        self.layers = [TransformerDecoderLayer(cfg.d_model, cfg.n_heads, cfg.d_ff, rng) for _ in range(cfg.n_dec_layers)]
        self.norm = LayerNorm(cfg.d_model)
        self.out = Linear(cfg.d_model, cfg.vocab_size - 1, rng)
        self._pe = sinusoidal_positions(cfg.max_target_len, cfg.d_model)

    def __call__(self, tokens_in: np.ndarray, tgt_pad: np.ndarray | None, memory: Tensor,
                 mem_pad: np.ndarray | None) -> tuple[Tensor, list[Tensor]]:
        U = tokens_in.shape[1]
        if U > self._pe.shape[0]:
            raise ConfigError(f"target length {U} exceeds max_target_len {self._pe.shape[0]}")
        y = nx.embedding_lookup(self.embed, tokens_in) * math.sqrt(self.d_model)
        y = y + Tensor(self._pe[:U])
        states = []
        for layer in self.layers:
            y = layer(y, tgt_pad, memory, mem_pad)
            states.append(y)
        states[-1] = self.norm(y)
        return self.out(states[-1]), states


class MultitaskModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.encoder = Encoder(cfg, nx.make_rng(cfg.seed, "init", "encoder"))
        self.ctc_proj = Linear(cfg.d_model, cfg.vocab_size, nx.make_rng(cfg.seed, "init", "ctc"))
        self.decoder = Decoder(cfg, nx.make_rng(cfg.seed, "init", "decoder"))
        self.slu = None
        if cfg.task != "asr":
            self.slu = ClassAttention(cfg.d_model, cfg.slu_heads, cfg.n_labels,
                                      nx.make_rng(cfg.seed, "init", "slu"), d_ff=cfg.slu_d_ff)

    # -- parameter groups ------------------------------------------------
    def group_parameters(self) -> dict[str, int]:
        groups = {"encoder": 0, "asr_head": 0, "slu_head": 0}
        for name, p in self.named_parameters():
            key = "encoder" if name.startswith("encoder.") else "slu_head" if name.startswith("slu.") else "asr_head"
            groups[key] += p.size
        return groups

    def freeze_encoder(self, flag: bool = True) -> None:
        self.encoder.set_trainable(not flag)

    # -- forward passes --------------------------------------------------
    def _slu(self, tapped: Tensor, pad: np.ndarray) -> Tensor:
        if self.cfg.slu_stop_grad:
            tapped = tapped.detach()
        return self.slu(tapped, pad)

    def forward_train(self, feats, feat_lengths, targets: np.ndarray, target_lengths=None,
                      slu_target=None, run_decoder: bool = True) -> ForwardOutput:
        """Teacher-forced forward pass.

        ``targets`` are gold token ids ending in eos, padded with pad
        ([B, U]); the decoder reads them shifted right behind sos.
        """
        feats = feats if isinstance(feats, Tensor) else Tensor(np.asarray(feats, dtype=nx.DEFAULT_DTYPE))
        targets = np.asarray(targets, dtype=np.int64)
        if targets.ndim != 2 or targets.shape[1] == 0:
            raise ConfigError("forward_train needs non-empty [B, U] targets")
        B, U = targets.shape
        if target_lengths is None:
            target_lengths = (targets != PAD).sum(axis=1)
        target_lengths = np.asarray(target_lengths)
        if (target_lengths < 1).any():
            raise ConfigError("empty target sequence")
        if slu_target is not None and self.slu is not None:
            slu_target = np.asarray(slu_target)
            if slu_target.shape[0] != B:
                raise ConfigError(f"slu_target batch {slu_target.shape[0]} != {B}")
        enc_states, enc_len, enc_pad = self.encoder(feats, feat_lengths)
        memory = enc_states[-1]
        ctc_lp = nx.log_softmax(self.ctc_proj(memory), axis=-1)
        dec_logits = None
        dec_states: list[Tensor] = []
        tgt_pad = padding_mask(target_lengths, U)
        tap = self.cfg.tap
        if run_decoder or tap.site == "asr_decoder":
            tokens_in = np.concatenate([np.full((B, 1), SOS), targets[:, :-1]], axis=1)
            tokens_in = np.where(tgt_pad, PAD, tokens_in)
            dec_logits, dec_states = self.decoder(tokens_in, tgt_pad, memory, enc_pad)
        tapped = tapped_pad = slu_logits = None
        if self.slu is not None:
            if tap.site == "encoder":
                tapped, tapped_pad = enc_states[tap.layer_index], enc_pad
            else:
                tapped, tapped_pad = dec_states[tap.layer_index], tgt_pad
            slu_logits = self._slu(tapped, tapped_pad)
        return ForwardOutput(ctc_lp, enc_len, dec_logits, slu_logits, tapped, tapped_pad)

    def forward_infer(self, feats, feat_lengths, max_decode_len: int = 100,
                      decode: bool = True) -> tuple[list[list[int]], Tensor | None]:
        """Greedy attention decoding plus SLU prediction.

        With a decoder tap the SLU head reads the decoder states of the
        greedy hypothesis (sos plus every token before eos).
        """
        res = self.infer(feats, feat_lengths, max_decode_len, decode=decode)
        return res["hyps"], res["slu_logits"]

    def infer(self, feats, feat_lengths, max_decode_len: int = 100, decode: bool = True,
              ctc: bool = False) -> dict:
        if max_decode_len < 1:
            raise ConfigError("max_decode_len must be >= 1")
        feats = feats if isinstance(feats, Tensor) else Tensor(np.asarray(feats, dtype=nx.DEFAULT_DTYPE))
        res: dict = {}
        with nx.no_grad():
            enc_states, enc_len, enc_pad = self.encoder(feats, feat_lengths)
            memory = enc_states[-1]
            res["enc_lengths"] = enc_len
            if ctc:
                res["ctc_log_probs"] = nx.log_softmax(self.ctc_proj(memory), axis=-1)
            tap = self.cfg.tap
            hyps: list[list[int]] = [[] for _ in range(feats.shape[0])]
            if decode or (self.slu is not None and tap.site == "asr_decoder"):
                hyps = self.greedy_decode(memory, enc_pad, max_decode_len)
            res["hyps"] = hyps
            slu_logits = None
            if self.slu is not None:
                if tap.site == "encoder":
                    slu_logits = self.slu(enc_states[tap.layer_index], enc_pad)
                else:
                    states, pad = self.decoder_states_for(hyps, memory, enc_pad)
                    slu_logits = self.slu(states[tap.layer_index], pad)
            res["slu_logits"] = slu_logits
        return res

    def encode(self, feats, feat_lengths):
        feats = feats if isinstance(feats, Tensor) else Tensor(np.asarray(feats, dtype=nx.DEFAULT_DTYPE))
        enc_states, enc_len, enc_pad = self.encoder(feats, feat_lengths)
        return enc_states[-1], enc_len, enc_pad

    def decoder_step_logprobs(self, prefixes: np.ndarray, memory: Tensor, mem_pad: np.ndarray) -> np.ndarray:
        """Next-token log-probs over token ids for each prefix row ([B, t] ids starting with sos)."""
        logits, _ = self.decoder(prefixes, None, memory, mem_pad)
        last = logits.data[:, -1, :].astype(np.float64)
        full = np.full((last.shape[0], self.cfg.vocab_size), -np.inf)
        full[:, 1:] = last
        full[:, [PAD, SOS]] = -np.inf
        m = full.max(axis=1, keepdims=True)
        return full - m - np.log(np.exp(full - m).sum(axis=1, keepdims=True))

    def greedy_decode(self, memory: Tensor, mem_pad: np.ndarray, max_len: int) -> list[list[int]]:
        B = memory.shape[0]
        seq = np.full((B, 1), SOS, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        for _ in range(max_len):
            lp = self.decoder_step_logprobs(seq, memory, mem_pad)
            nxt = lp.argmax(axis=1)
            nxt = np.where(done, EOS, nxt)
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
            done |= nxt == EOS
            if done.all():
                break
        hyps = []
        for row in seq[:, 1:]:
            toks = []
            for t in row:
                if t == EOS:
                    break
                toks.append(int(t))
            hyps.append(toks)
        return hyps

    def decoder_states_for(self, hyps: list[list[int]], memory: Tensor, mem_pad: np.ndarray):
        lengths = np.array([len(h) + 1 for h in hyps])
        L = int(lengths.max())
        tokens = np.full((len(hyps), L), PAD, dtype=np.int64)
        tokens[:, 0] = SOS
        for i, h in enumerate(hyps):
            tokens[i, 1:1 + len(h)] = h
        pad = padding_mask(lengths, L)
        _, states = self.decoder(tokens, pad, memory, mem_pad)
        return states, pad


def count_params(model_or_cfg) -> dict[str, int]:
    """Parameter counts per group (encoder, asr_head, slu_head) and total."""
    model = model_or_cfg if isinstance(model_or_cfg, MultitaskModel) else MultitaskModel(model_or_cfg)
    groups = model.group_parameters()
    groups["total"] = sum(groups.values())
    return groups
