"""Synthetic spoken-command corpora, FEAT/JSONL file I/O, batching and per-class subsets.

The synthesizer renders a transcript as a sequence of per-symbol frame
blocks.  Each symbol has a fixed 80-bin prototype (drawn from the acoustic
seed), each speaker adds a spectral offset, a per-bin gain and a tempo
factor, and every frame gets gaussian noise.  All randomness comes from
counter-based generators keyed by names, so a corpus is byte-identical
across runs and platforms.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .intent import IntentSchema, encode_intent
from .numerics import make_rng
from .tokenizer import EOS, PAD, Vocab

FEAT_MAGIC = b"FEAT"
SENTIMENTS = ("negative", "neutral", "positive")


class DataError(ValueError):
    """Malformed or insufficient data."""


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # [T, n_mels] float32
    transcript: str
    speaker: str = "spk0"
    intent: tuple[str, tuple[str, ...]] | None = None
    sentiment: str | None = None

    @property
    def label_key(self):
        if self.intent is not None:
            return self.intent
        if self.sentiment is not None:
            return self.sentiment
        return None

    @property
    def n_frames(self) -> int:
        return int(self.features.shape[0])


@dataclass
class Manifest:
    utterances: list[Utterance]
    task: str = "asr"  # intent | sentiment | asr
    schema: IntentSchema | None = None

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def by_class(self) -> "OrderedDict":
        groups: OrderedDict = OrderedDict()
        for u in self.utterances:
            groups.setdefault(u.label_key, []).append(u)
        return groups

    def speakers(self) -> list[str]:
        return sorted({u.speaker for u in self.utterances})

    def filter(self, pred) -> "Manifest":
        return Manifest([u for u in self.utterances if pred(u)], self.task, self.schema)

    def transcripts(self) -> list[str]:
        return [u.transcript for u in self.utterances]

    # -- persistence -----------------------------------------------------
    def save(self, out_dir: str | Path, name: str = "manifest.jsonl") -> Path:
        out_dir = Path(out_dir)
        (out_dir / "feats").mkdir(parents=True, exist_ok=True)
        if self.schema is not None:
            self.schema.save(out_dir / "schema.json")
        lines = []
        for u in self.utterances:
            rel = f"feats/{u.id}.feat"
            write_feat(out_dir / rel, u.features)
            rec = {"id": u.id, "feats": rel, "transcript": u.transcript, "speaker": u.speaker}
            if u.intent is not None:
                rec["intent"] = {"action": u.intent[0], "arguments": list(u.intent[1])}
            if u.sentiment is not None:
                rec["sentiment"] = u.sentiment
            lines.append(json.dumps(rec, sort_keys=True))
        path = out_dir / name
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        meta = {"task": self.task, "manifest": name}
        (out_dir / "corpus.json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            meta_path = path / "corpus.json"
            name = json.loads(meta_path.read_text())["manifest"] if meta_path.exists() else "manifest.jsonl"
            path = path / name
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        root = path.parent
        schema = IntentSchema.load(root / "schema.json") if (root / "schema.json").exists() else None
        task = "asr"
        meta_path = root / "corpus.json"
        if meta_path.exists():
            task = json.loads(meta_path.read_text()).get("task", "asr")
        utts = []
        for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                intent = None
                if "intent" in rec:
                    intent = (rec["intent"]["action"], tuple(rec["intent"]["arguments"]))
                utts.append(Utterance(rec["id"], read_feat(root / rec["feats"]), rec["transcript"],
                                      rec.get("speaker", "spk0"), intent, rec.get("sentiment")))
            except (KeyError, json.JSONDecodeError, TypeError) as exc:
                raise DataError(f"{path}:{ln}: bad manifest record ({exc})") from exc
        return cls(utts, task, schema)


# ---------------------------------------------------------------------------
# FEAT binary format: b"FEAT", u32 T, u32 D, T*D float32, all little-endian
# ---------------------------------------------------------------------------


def write_feat(path: str | Path, feats: np.ndarray) -> None:
    feats = np.asarray(feats, dtype="<f4")
    if feats.ndim != 2:
        raise DataError(f"features must be 2-D, got shape {feats.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC + struct.pack("<II", *feats.shape) + feats.tobytes(order="C"))


def read_feat(path: str | Path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read feature file {path}: {exc}") from exc
    if len(raw) < 12 or raw[:4] != FEAT_MAGIC:
        raise DataError(f"{path}: not a FEAT file")
    T, D = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 4 * T * D:
        raise DataError(f"{path}: expected {T}x{D} floats, file has {len(raw) - 12} payload bytes")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(T, D).astype(np.float32)


# ---------------------------------------------------------------------------
# grammars
# ---------------------------------------------------------------------------


def grabo_grammar() -> dict:
    """36 robot commands: 6 actions x 3 directions x 2 speeds, one fixed phrase each."""
    return {
        "schema": {
            "actions": ["approach", "move", "turn", "grab", "lift", "point"],
            "arguments": [
                {"name": "direction", "values": ["left", "right", "forward"]},
                {"name": "speed", "values": ["slowly", "quickly"]},
            ],
        },
        "phrases": {
            "approach": ["approach"], "move": ["move"], "turn": ["turn"],
            "grab": ["grab"], "lift": ["lift"], "point": ["point"],
            "left": ["left"], "right": ["right"], "forward": ["forward"],
            "slowly": ["slowly"], "quickly": ["quickly"],
        },
    }


def sentiment_grammar() -> dict:
    return {
        "lexicon": {
            "positive": ["great", "lovely", "good", "happy"],
            "negative": ["awful", "bad", "sad", "horrible"],
            "neutral": ["okay", "normal", "plain", "usual"],
        },
        "templates": ["it was {w}", "that felt {w}", "the day was {w} today", "such a {w} show"],
    }


def asr_grammar() -> dict:
    """Open-vocabulary sentences for ASR pretraining; covers the command lexicon and more."""
    words = ("approach move turn grab lift point left right forward slowly quickly the a robot "
             "please now then go stop it was that felt day today show such great lovely good happy "
             "awful bad sad horrible okay normal plain usual card stack table put on take from "
             "red black queen king two three next back open close light door music play").split()
    return {"words": words, "length": [2, 5]}


# ---------------------------------------------------------------------------
# synthesizer
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    seed: int = 0
    task: str = "intent"  # intent | sentiment | asr
    grammar: dict | None = None  # None picks the built-in grammar for the task
    n_speakers: int = 1
    speaker_prefix: str = "spk"
    acoustic_seed: int = 0
    frames_per_symbol: tuple[int, int] = (4, 8)
    noise_sigma: float = 0.3
    speaker_sigma: float = 0.5
    tempo_range: tuple[float, float] = (0.85, 1.15)
    n_mels: int = 80

    def __post_init__(self):
        if self.grammar is None:
            default = {"intent": grabo_grammar, "sentiment": sentiment_grammar, "asr": asr_grammar}.get(self.task)
            self.grammar = default() if default else {}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**d)


class Synthesizer:
    def __init__(self, spec: SynthSpec):
        lo, hi = spec.frames_per_symbol
        if not 1 <= lo <= hi:
            raise DataError(f"bad frames_per_symbol range {spec.frames_per_symbol}")
        self.spec = spec
        self._protos: dict[str, np.ndarray] = {}

    def prototype(self, symbol: str) -> np.ndarray:
        if symbol not in self._protos:
            rng = make_rng(self.spec.acoustic_seed, "prototype", symbol)
            self._protos[symbol] = rng.normal(0.0, 1.0, self.spec.n_mels)
        return self._protos[symbol]

    def speaker(self, name: str) -> tuple[np.ndarray, np.ndarray, float]:
        rng = make_rng(self.spec.acoustic_seed, "speaker", name)
        offset = rng.normal(0.0, self.spec.speaker_sigma, self.spec.n_mels)
        gain = 1.0 + rng.normal(0.0, 0.5 * self.spec.speaker_sigma, self.spec.n_mels)
        tempo = rng.uniform(*self.spec.tempo_range)
        return offset, gain, tempo

    def render(self, transcript: str, speaker: str, rng: np.random.Generator) -> np.ndarray:
        lo, hi = self.spec.frames_per_symbol
        offset, gain, tempo = self.speaker(speaker)
        silence = self.prototype("<sil>") * 0.2
        blocks = [(silence, int(rng.integers(lo, hi + 1)))]
        for ch in transcript:
            n = max(2, int(round(rng.integers(lo, hi + 1) * tempo)))
            blocks.append((self.prototype(ch), n))
        # guarantee a CTC-feasible frame budget after 4x subsampling
        repeats = sum(1 for a, b in zip(transcript, transcript[1:]) if a == b)
        need = 4 * (len(transcript) + repeats + 2)
        tail = int(rng.integers(lo, hi + 1))
        total = sum(n for _, n in blocks) + tail
        tail += max(0, need - total)
        blocks.append((silence, tail))
        frames = np.concatenate([np.repeat(p[None, :], n, axis=0) for p, n in blocks])
        frames = frames * gain + offset
        frames = frames + rng.normal(0.0, self.spec.noise_sigma, frames.shape)
        return frames.astype(np.float32)


def _phrase(grammar: dict, key: str, rng: np.random.Generator) -> str:
    options = grammar.get("phrases", {}).get(key, [key])
    return options[int(rng.integers(len(options)))] if len(options) > 1 else options[0]


def synth_generate(spec: SynthSpec, n_per_class: int, out_dir: str | Path | None = None) -> Manifest:
    """Generate ``n_per_class`` utterances per class and speaker.

    For the ASR task there is a single class, so ``n_per_class`` is the
    number of sentences per speaker.
    """
    if n_per_class < 1:
        raise DataError("n_per_class must be >= 1")
    try:
        manifest = _generate(spec, n_per_class)
    except KeyError as exc:
        raise DataError(f"grammar for task {spec.task!r} lacks key {exc}") from exc
    if out_dir is not None:
        manifest.save(out_dir)
    return manifest


def _generate(spec: SynthSpec, n_per_class: int) -> Manifest:
    synth = Synthesizer(spec)
    g = spec.grammar
    speakers = [f"{spec.speaker_prefix}{k}" for k in range(spec.n_speakers)]
    utts: list[Utterance] = []
    schema = None
    if spec.task == "intent":
        schema = IntentSchema.from_json(g["schema"])
        classes = list(schema.combinations())
        if not classes:
            raise DataError("grammar has no intent classes")
        for spk in speakers:
            for ci, (action, values) in enumerate(classes):
                for r in range(n_per_class):
                    rng = make_rng(spec.seed, "utt", spk, ci, r)
                    words = [_phrase(g, action, rng)] + [_phrase(g, v, rng) for v in values]
                    text = " ".join(w for w in words if w)
                    utts.append(Utterance(f"{spk}-c{ci:03d}-r{r:03d}", synth.render(text, spk, rng), text,
                                          spk, intent=(action, tuple(values))))
    elif spec.task == "sentiment":
        lex, templates = g["lexicon"], g["templates"]
        for spk in speakers:
            for ci, label in enumerate(SENTIMENTS):
                for r in range(n_per_class):
                    rng = make_rng(spec.seed, "utt", spk, ci, r)
                    word = lex[label][int(rng.integers(len(lex[label])))]
                    text = templates[int(rng.integers(len(templates)))].format(w=word)
                    utts.append(Utterance(f"{spk}-c{ci:03d}-r{r:03d}", synth.render(text, spk, rng), text,
                                          spk, sentiment=label))
    elif spec.task == "asr":
        words, (lo, hi) = g["words"], g["length"]
        if not words:
            raise DataError("grammar has no words")
        for spk in speakers:
            for r in range(n_per_class):
                rng = make_rng(spec.seed, "utt", spk, 0, r)
                n = int(rng.integers(lo, hi + 1))
                text = " ".join(words[int(i)] for i in rng.integers(len(words), size=n))
                utts.append(Utterance(f"{spk}-r{r:04d}", synth.render(text, spk, rng), text, spk))
    else:
        raise DataError(f"unknown task {spec.task!r}")
    return Manifest(utts, spec.task, schema)


# ---------------------------------------------------------------------------
# subsets and batching
# ---------------------------------------------------------------------------


def subset_per_class(manifest: Manifest, n: int, fold_seed: int) -> Manifest:
    """Exactly ``n`` utterances per class, sampled without replacement."""
    chosen = []
    for key, items in manifest.by_class().items():
        if len(items) < n:
            raise DataError(f"class {key!r} has {len(items)} items, {n} requested")
        rng = make_rng(fold_seed, "subset", repr(key))
        idx = np.sort(rng.choice(len(items), size=n, replace=False))
        chosen.extend(items[i] for i in idx)
    return Manifest(chosen, manifest.task, manifest.schema)


def complement(manifest: Manifest, subset: Manifest) -> Manifest:
    ids = {u.id for u in subset}
    return manifest.filter(lambda u: u.id not in ids)


@dataclass
class Batch:
    ids: list[str]
    feats: np.ndarray  # [B, T, F]
    feat_lengths: np.ndarray
    feat_pad: np.ndarray  # True on padded frames
    tokens: np.ndarray  # [B, U]: transcript ids + eos, pad-padded
    token_lengths: np.ndarray
    ctc_targets: list[np.ndarray]
    slu: np.ndarray | None  # intent bits [B, K] or sentiment ids [B]

    def targets(self) -> dict:
        return {"ctc": self.ctc_targets, "tokens": self.tokens, "slu": self.slu}

    def __len__(self) -> int:
        return len(self.ids)


def batch(utterances: Sequence[Utterance], vocab: Vocab, task: str = "asr",
          schema: IntentSchema | None = None) -> Batch:
    if not utterances:
        raise DataError("cannot batch zero utterances")
    B = len(utterances)
    lengths = np.array([u.n_frames for u in utterances])
    T, F = int(lengths.max()), utterances[0].features.shape[1]
    feats = np.zeros((B, T, F), dtype=np.float32)
    for i, u in enumerate(utterances):
        if u.features.shape[1] != F:
            raise DataError(f"utterance {u.id} has {u.features.shape[1]} bins, expected {F}")
        feats[i, : u.n_frames] = u.features
    ctc = [np.array(vocab.encode(u.transcript), dtype=np.int64) for u in utterances]
    tok_len = np.array([len(c) + 1 for c in ctc])
    tokens = np.full((B, int(tok_len.max())), PAD, dtype=np.int64)
    for i, c in enumerate(ctc):
        tokens[i, : len(c)] = c
        tokens[i, len(c)] = EOS
    slu = None
    if task == "intent":
        if schema is None:
            raise DataError("intent batches need a schema")
        slu = np.stack([encode_intent(schema, u.intent[0], u.intent[1]) for u in utterances])
    elif task == "sentiment":
        slu = np.array([SENTIMENTS.index(u.sentiment) for u in utterances], dtype=np.int64)
    pad = np.arange(T)[None, :] >= lengths[:, None]
    return Batch([u.id for u in utterances], feats, lengths, pad, tokens, tok_len, ctc, slu)


def iter_batches(utterances: Sequence[Utterance], batch_size: int, order: Iterable[int] | None = None):
    order = list(range(len(utterances))) if order is None else list(order)
    for i in range(0, len(order), batch_size):
        yield [utterances[j] for j in order[i:i + batch_size]]
