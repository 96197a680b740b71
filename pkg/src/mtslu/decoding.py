"""CTC greedy and attention beam decoding; WER, full-intent accuracy and macro-F1."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .data import SENTIMENTS, Manifest, batch, iter_batches
from .intent import decode_batch
from .tokenizer import BLANK, EOS, SOS, Vocab


@dataclass
class Hypothesis:
    tokens: list[int]  # without sos; ends with eos when finished
    score: float  # length-normalised log-probability
    logprob: float
    finished: bool


def ctc_greedy(log_probs, blank: int = BLANK) -> list[int]:
    """Per-frame argmax, collapse adjacent repeats, then drop blanks."""
    lp = log_probs.data if isinstance(log_probs, nx.Tensor) else np.asarray(log_probs)
    best = lp.argmax(axis=-1)
    out, prev = [], None
    for s in best.tolist():
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return out


def beam_search(step_fn: Callable[[list[list[int]]], np.ndarray], beam: int, max_len: int,
                len_penalty: float = 0.0, sos: int = SOS, eos: int = EOS) -> list[Hypothesis]:
    """Beam search over any next-token distribution.

    ``step_fn`` maps prefixes (each starting with sos) to next-token
    log-probs [n_prefixes, V].  Alive hypotheses are pruned on raw
    log-probability; the returned list is ranked by
    ``logprob / len(tokens) ** len_penalty`` (eos counts towards length).
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    alive: list[tuple[list[int], float]] = [([sos], 0.0)]
    finished: list[Hypothesis] = []

    def norm(lp, n):
        return lp / (max(n, 1) ** len_penalty) if len_penalty else lp

    for _ in range(max_len):
        lps = step_fn([p for p, _ in alive])
        cands = []
        for (prefix, score), row in zip(alive, lps):
            top = np.argsort(-row, kind="stable")[:beam]
            for tok in top:
                if np.isfinite(row[tok]):
                    cands.append((score + float(row[tok]), prefix, int(tok)))
        cands.sort(key=lambda c: -c[0])
        alive = []
        for lp, prefix, tok in cands[:beam]:
            if tok == eos:
                toks = prefix[1:] + [eos]
                finished.append(Hypothesis(toks, norm(lp, len(toks)), lp, True))
            else:
                alive.append((prefix + [tok], lp))
        if len(finished) >= beam or not alive:
            break
    for prefix, lp in alive:
        toks = prefix[1:]
        finished.append(Hypothesis(toks, norm(lp, len(toks)), lp, False))
    finished.sort(key=lambda h: -h.score)
    return finished[:beam] if len(finished) > beam else finished


def attn_beam(model, features: np.ndarray, beam: int = 4, max_len: int = 100,
              len_penalty: float = 0.0) -> list[Hypothesis]:
    """Beam search over the attention decoder for one utterance ([T, F] features)."""
    feats = np.asarray(features, dtype=np.float32)[None]
    with nx.no_grad():
        memory, _, pad = model.encode(feats, [feats.shape[1]])

        def step(prefixes):
            arr = np.array(prefixes, dtype=np.int64)
            n = arr.shape[0]
            mem = nx.Tensor(np.repeat(memory.data, n, axis=0))
            return model.decoder_step_logprobs(arr, mem, np.repeat(pad, n, axis=0))

        return beam_search(step, beam, max_len, len_penalty)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def edit_distance(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def wer(ref: Sequence, hyp: Sequence) -> float:
    """Levenshtein distance (unit costs) divided by the reference length."""
    if len(ref) == 0:
        raise ValueError("wer: empty reference")
    return edit_distance(ref, hyp) / len(ref)


def corpus_wer(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    errs = sum(edit_distance(r, h) for r, h in zip(refs, hyps))
    return errs / max(sum(len(r) for r in refs), 1)


def intent_accuracy(preds: Sequence, golds: Sequence) -> float:
    """Fraction of items whose action and every argument are all correct."""
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions for {len(golds)} references")
    if not golds:
        return 0.0
    hits = sum(1 for p, g in zip(preds, golds) if (p[0], tuple(p[1])) == (g[0], tuple(g[1])))
    return hits / len(golds)


def macro_f1(preds: Sequence[int], golds: Sequence[int], n_classes: int) -> dict:
    """Unweighted mean of per-class F1.

    A class absent from both predictions and references scores 0 and is
    listed under ``absent``.
    """
    preds, golds = np.asarray(preds), np.asarray(golds)
    if len(preds) != len(golds):
        raise ValueError("length mismatch")
    per, absent = [], []
    for c in range(n_classes):
        tp = int(np.sum((preds == c) & (golds == c)))
        fp = int(np.sum((preds == c) & (golds != c)))
        fn = int(np.sum((preds != c) & (golds == c)))
        if tp + fp + fn == 0:
            absent.append(c)
            per.append(0.0)
            continue
        per.append(2 * tp / (2 * tp + fp + fn))
    return {"macro_f1": float(np.mean(per)), "per_class": per, "absent": absent}


# ---------------------------------------------------------------------------
# corpus-level prediction and reports
# ---------------------------------------------------------------------------


def predict(model, manifest: Manifest, vocab: Vocab, batch_size: int = 32, decode_asr: bool = True,
            max_decode_len: int | None = None) -> list[dict]:
    task = model.cfg.task
    out = []
    with nx.no_grad():
        for utts in iter_batches(manifest.utterances, batch_size):
            b = batch(utts, vocab, "asr")
            max_len = max_decode_len or int(b.token_lengths.max()) + 10
            need_attn = decode_asr or (task != "asr" and model.cfg.tap.site == "asr_decoder")
            res = model.infer(b.feats, b.feat_lengths, max_len, decode=need_attn, ctc=decode_asr)
            hyps, slu = res["hyps"], res["slu_logits"]
            ctc = []
            if decode_asr:
                lp, enc_len = res["ctc_log_probs"].data, res["enc_lengths"]
                ctc = [ctc_greedy(lp[i, : enc_len[i]]) for i in range(len(utts))]
            intents = decode_batch(manifest.schema, slu.data) if task == "intent" else None
            for i, u in enumerate(utts):
                rec = {"id": u.id, "attn": hyps[i] if need_attn else None, "ctc": ctc[i] if ctc else None}
                if task == "intent":
                    rec["intent"] = intents[i]
                elif task == "sentiment":
                    rec["sentiment"] = SENTIMENTS[int(np.argmax(slu.data[i]))]
                out.append(rec)
    return out


def evaluate(model, manifest: Manifest, vocab: Vocab, batch_size: int = 32) -> dict:
    """Report: wer_ctc, wer_attn, accuracy | macro_f1, n_items, per_class."""
    preds = predict(model, manifest, vocab, batch_size)
    refs = [vocab.encode(u.transcript) for u in manifest]
    words = lambda ids: vocab.decode(ids).split()
    report = {
        "n_items": len(manifest),
        "wer_ctc": corpus_wer([u.transcript.split() for u in manifest], [words(p["ctc"]) for p in preds]),
        "wer_attn": corpus_wer([u.transcript.split() for u in manifest], [words(p["attn"]) for p in preds]),
        "cer_attn": corpus_wer(refs, [p["attn"] for p in preds]),
    }
    task = model.cfg.task
    if task == "intent":
        golds = [u.intent for u in manifest]
        pi = [p["intent"] for p in preds]
        report["accuracy"] = intent_accuracy(pi, golds)
        per: dict[str, list[int]] = {}
        for p, g in zip(pi, golds):
            key = " ".join((g[0],) + tuple(g[1]))
            per.setdefault(key, [0, 0])
            per[key][0] += int(p == g)
            per[key][1] += 1
        report["per_class"] = {k: c / n for k, (c, n) in sorted(per.items())}
    elif task == "sentiment":
        f1 = macro_f1([SENTIMENTS.index(p["sentiment"]) for p in preds],
                      [SENTIMENTS.index(u.sentiment) for u in manifest], 3)
        report["macro_f1"] = f1["macro_f1"]
        report["per_class"] = dict(zip(SENTIMENTS, f1["per_class"]))
        report["absent_classes"] = [SENTIMENTS[c] for c in f1["absent"]]
    return report
