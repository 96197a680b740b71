"""Command-line entry point: synth, pretrain, train, eval, decode, curve, ablation.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 incompatible
or corrupt checkpoint.  Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import SENTIMENTS, DataError, Manifest, SynthSpec, asr_grammar, grabo_grammar, read_feat, \
    sentiment_grammar, synth_generate
from .decoding import ctc_greedy, evaluate
from .harness import build_context, rows_to_csv, run_ablation, run_learning_curve, sign_test, write_json
from .intent import IntentError, decode_intent
from .model import ConfigError
from .training import Bundle, CheckpointError, finetune_mtl, load_bundle, pretrain_asr, save_bundle, state_dict
from .tokenizer import Vocab, train_bpe

log = logging.getLogger("mtslu")

EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 2, 3, 4
GRAMMARS = {"grabo": grabo_grammar, "sentiment": sentiment_grammar, "asr": asr_grammar}
DEFAULT_GRAMMAR = {"intent": "grabo", "sentiment": "sentiment", "asr": "asr"}


def _load_run_config(path: str, seed: int | None) -> RunConfig:
    cfg = RunConfig.load(path)
    return cfg.with_seed(seed) if seed is not None else cfg


def _provenance(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed}


def _check_features(bundle: Bundle, manifest: Manifest) -> None:
    if len(manifest) == 0:
        raise DataError("manifest is empty")
    dims = {u.features.shape[1] for u in manifest}
    if dims != {bundle.model.cfg.n_mels}:
        raise CheckpointError(f"checkpoint expects {bundle.model.cfg.n_mels} feature bins, data has {sorted(dims)}")


def _split_valid(cfg: RunConfig, manifest: Manifest) -> tuple[Manifest, Manifest | None]:
    held = set(cfg.data.valid_speakers)
    if not held:
        return manifest, None
    valid = manifest.filter(lambda u: u.speaker in held)
    train = manifest.filter(lambda u: u.speaker not in held)
    if len(valid) == 0 or len(train) == 0:
        raise DataError(f"valid_speakers {sorted(held)} leave an empty train or valid split")
    return train, valid


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> dict:
    try:
        raw = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read spec {args.spec}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.spec}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError("synth spec must be a JSON object")
    grammar = raw.get("grammar", DEFAULT_GRAMMAR.get(raw.get("task", "intent"), "grabo"))
    if isinstance(grammar, str):
        if grammar not in GRAMMARS:
            raise ConfigError(f"unknown grammar {grammar!r}; choose from {sorted(GRAMMARS)} or give an object")
        grammar = GRAMMARS[grammar]()
    raw["grammar"] = grammar
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        spec = SynthSpec.from_dict(raw)
    except (TypeError, DataError) as exc:
        raise ConfigError(f"bad synth spec: {exc}") from exc
    if spec.task not in ("intent", "sentiment", "asr"):
        raise ConfigError(f"unknown task {spec.task!r} in synth spec")
    m = synth_generate(spec, args.n_per_class, args.out)
    return {"out": str(args.out), "n_utterances": len(m), "task": m.task, "speakers": m.speakers()}


def cmd_pretrain(args) -> dict:
    cfg = _load_run_config(args.config, args.seed)
    manifest = Manifest.load(args.data)
    if len(manifest) == 0:
        raise DataError("pretraining manifest is empty")
    texts = manifest.transcripts()
    vocab = train_bpe(texts, cfg.data.bpe_size) if cfg.data.bpe_size else Vocab.from_texts(texts)
    mcfg = cfg.model_config(len(vocab), task="asr")
    train_set, valid = _split_valid(cfg, manifest)
    res = pretrain_asr(mcfg, cfg.pretrain_config(), train_set, vocab, valid,
                       log_path=str(args.out) + ".log.csv")
    save_bundle(args.out, Bundle(res.model, vocab, None,
                                 {"stage": "pretrain", "config": cfg.to_dict(), **_provenance(cfg)}))
    return {"out": str(args.out), "best_epoch": res.best_epoch, "final": res.history[-1], **_provenance(cfg)}


def cmd_train(args) -> dict:
    cfg = _load_run_config(args.config, args.seed)
    manifest = Manifest.load(args.data)
    if manifest.task != cfg.task.name:
        raise DataError(f"data task {manifest.task!r} does not match config task {cfg.task.name!r}")
    if manifest.task == "intent" and manifest.schema is None:
        raise DataError("intent corpus has no schema.json")
    init = load_bundle(args.init)
    n_labels = manifest.schema.total_bits if manifest.task == "intent" else len(SENTIMENTS)
    mcfg = cfg.model_config(init.model.cfg.vocab_size, n_labels)
    load_bundle(args.init, expect=mcfg)  # raises on dimension mismatch
    _check_features(init, manifest)
    train_set, valid = _split_valid(cfg, manifest)
    res = finetune_mtl(mcfg, cfg.train, state_dict(init.model), train_set, init.vocab, valid,
                       log_path=str(args.out) + ".log.csv")
    save_bundle(args.out, Bundle(res.model, init.vocab, manifest.schema,
                                 {"stage": "finetune", "config": cfg.to_dict(), **_provenance(cfg)}))
    return {"out": str(args.out), "best_epoch": res.best_epoch, "final": res.history[-1], **_provenance(cfg)}


def cmd_eval(args) -> dict:
    bundle = load_bundle(args.checkpoint)
    manifest = Manifest.load(args.data)
    _check_features(bundle, manifest)
    if bundle.model.cfg.task != "asr" and manifest.task != bundle.model.cfg.task:
        raise DataError(f"data task {manifest.task!r} does not match checkpoint task {bundle.model.cfg.task!r}")
    if manifest.schema is None and bundle.schema is not None:
        manifest.schema = bundle.schema
    if bundle.model.cfg.task == "intent" and manifest.schema.total_bits != bundle.model.cfg.n_labels:
        raise CheckpointError(f"checkpoint has {bundle.model.cfg.n_labels} intent bits, "
                              f"data schema has {manifest.schema.total_bits}")
    report = evaluate(bundle.model, manifest, bundle.vocab)
    report.update({"config_hash": bundle.extra.get("config_hash"), "seed": bundle.extra.get("seed")})
    if args.report:
        write_json(Path(args.report), report)
    return report


def cmd_decode(args) -> dict:
    bundle = load_bundle(args.checkpoint)
    feats = read_feat(args.features)
    if feats.shape[1] != bundle.model.cfg.n_mels:
        raise CheckpointError(f"checkpoint expects {bundle.model.cfg.n_mels} feature bins, file has {feats.shape[1]}")
    if feats.shape[0] < 4:
        raise DataError(f"feature file has {feats.shape[0]} frames; at least 4 are needed")
    res = bundle.model.infer(feats[None], [feats.shape[0]], args.max_len, decode=True, ctc=True)
    out = {"transcript": bundle.vocab.decode(res["hyps"][0]),
           "ctc_transcript": bundle.vocab.decode(ctc_greedy(res["ctc_log_probs"].data[0, : res["enc_lengths"][0]]))}
    task = bundle.model.cfg.task
    if task == "intent":
        action, values = decode_intent(bundle.schema, res["slu_logits"].data[0])
        out["intent"] = {"action": action, "arguments": list(values)}
    elif task == "sentiment":
        out["sentiment"] = SENTIMENTS[int(np.argmax(res["slu_logits"].data[0]))]
    return out


def _harness_context(args):
    cfg = _load_run_config(args.config, args.seed)
    ctx = build_context(cfg.harness, cfg.train, {k: v for k, v in cfg.model.items()
                                                 if k in ("slu_heads", "slu_d_ff", "slu_stop_grad")})
    if ctx.task != cfg.task.name:
        raise DataError(f"harness data task {ctx.task!r} does not match config task {cfg.task.name!r}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, ctx, out


def cmd_curve(args) -> dict:
    cfg, ctx, out = _harness_context(args)
    report = run_learning_curve(ctx, n_jobs=args.jobs)
    report.validate(min_folds=min(3, cfg.harness.folds))
    (out / "curve.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "curve.svg").write_text(report.to_svg(f"learning curve ({cfg.task.name})"), encoding="utf-8")
    summary = report.summary()
    arms = report.arms
    if "mtl" in arms:
        smallest = min(cfg.harness.sizes)
        base = [a for a in arms if a != "mtl"]
        summary["sign_tests"] = {
            f"mtl>{b}@{smallest}": sign_test(sorted_vals(report, "mtl", smallest), sorted_vals(report, b, smallest))
            for b in base}
    summary.update(_provenance(cfg))
    summary["config"] = cfg.to_dict()
    write_json(out / "summary.json", summary)
    return {"out_dir": str(out), "cells": len(report.rows), **_provenance(cfg)}


def sorted_vals(report, arm: str, size: int) -> list[float]:
    rows = sorted((r for r in report.rows if r["arm"] == arm and r["size"] == size), key=lambda r: r["fold"])
    return [r["value"] for r in rows]


def cmd_ablation(args) -> dict:
    cfg, ctx, out = _harness_context(args)
    res = run_ablation(ctx, n_jobs=args.jobs)
    (out / "ablation.csv").write_text(rows_to_csv(res["rows"]), encoding="utf-8")
    write_json(out / "ablation.json", {"summary": res["summary"], "config": cfg.to_dict(), **_provenance(cfg)})
    return {"out_dir": str(out), "cells": len(res["rows"]), **_provenance(cfg)}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtslu", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="run configuration JSON")
        sp.add_argument("--seed", type=int, default=None, help="overrides every seed in the config")

    sp = sub.add_parser("synth", help="generate a synthetic corpus (FEAT files + JSONL manifest)")
    sp.add_argument("--spec", required=True, help="synth spec JSON (SynthSpec fields; grammar may be a name)")
    sp.add_argument("--out", required=True, help="output corpus directory")
    sp.add_argument("--n-per-class", type=int, required=True,
                    help="utterances per class and speaker (sentences per speaker for asr)")
    common(sp, config=False)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("pretrain", help="ASR-only pretraining of encoder and ASR head")
    common(sp)
    sp.add_argument("--data", required=True, help="ASR corpus directory or manifest")
    sp.add_argument("--out", required=True, help="checkpoint to write")
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("train", help="multitask finetuning from a pretrained checkpoint")
    common(sp)
    sp.add_argument("--init", required=True, help="pretrained checkpoint")
    sp.add_argument("--data", required=True, help="downstream corpus directory or manifest")
    sp.add_argument("--out", required=True, help="checkpoint to write")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint; writes a JSON report")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--report", default=None, help="report path (also printed to stdout)")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("decode", help="transcribe one FEAT file and predict its label")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--features", required=True, help="FEAT file")
    sp.add_argument("--max-len", type=int, default=200, help="maximum decoded tokens")
    sp.set_defaults(fn=cmd_decode)

    for name, fn, what in (("curve", cmd_curve, "learning curves with 68%% bands (CSV, SVG, JSON)"),
                           ("ablation", cmd_ablation, "tap-point ablation, multitask vs SLU-only")):
        sp = sub.add_parser(name, help=what)
        common(sp)
        sp.add_argument("--out-dir", required=True)
        sp.add_argument("--jobs", type=int, default=1, help="parallel cells (results do not depend on it)")
        sp.set_defaults(fn=fn)
    return p


def _fail(code: int, exc: Exception) -> int:
    kind = {EXIT_CONFIG: "config_error", EXIT_DATA: "data_error", EXIT_CHECKPOINT: "checkpoint_error"}[code]
    sys.stderr.write(json.dumps({"error": kind, "exit_code": code, "message": str(exc)}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.fn(args)
    except CheckpointError as exc:
        return _fail(EXIT_CHECKPOINT, exc)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (DataError, IntentError) as exc:
        return _fail(EXIT_DATA, exc)
    sys.stdout.write(json.dumps(result, sort_keys=True, default=_jsonable) + "\n")
    return 0


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


if __name__ == "__main__":
    sys.exit(main())
