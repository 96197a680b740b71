"""Experiment orchestration: tap ablation, learning curves, pipeline baseline.

Every experiment is a grid of independent cells.  A cell rebuilds its model
from the shared pretrained tensors, so its metric depends only on
(size, fold, arm, tap) and the configuration, never on which cells ran
before it.  Folds pair a subset seed with a speaker: fold ``k`` samples its
training utterances from speaker ``k mod n_speakers`` with seed ``k`` and is
tested on that speaker's remaining utterances.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from . import numerics as nx
from .data import SENTIMENTS, DataError, Manifest, complement, subset_per_class
from .decoding import intent_accuracy, macro_f1, predict
from .intent import decode_batch, encode_intent
from .layers import Linear, Module, init_weight
from .losses import LossWeights, multihot_bce, smoothed_ce
from .model import ConfigError, ModelConfig, MultitaskModel, TapPoint
from .tokenizer import PAD, Vocab
from .training import Adam, TrainConfig, finetune_mtl, load_state_dict

log = logging.getLogger(__name__)

ARMS = ("mtl", "slu_only", "pipeline", "nlp")
CSV_HEADER = ["size", "fold", "arm", "tap", "metric", "value"]


@dataclass
class HarnessConfig:
    checkpoint: str | None = None  # pretrained ASR bundle
    data: str | None = None  # downstream corpus directory
    taps: list[str] = field(default_factory=lambda: ["encoder.3", "ASR.0", "ASR.2", "ASR.5"])
    sizes: list[int] = field(default_factory=lambda: [1, 2, 4])
    folds: int = 5
    arms: list[str] = field(default_factory=lambda: ["mtl", "pipeline"])
    n_per_class: int = 2  # ablation training size
    tap: str = "ASR.2"  # tap used by learning-curve arms
    pipeline_source: str = "attn"  # transcripts for the pipeline arm: attn | ctc
    pipeline_epochs: int = 200
    pipeline_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        for a in self.arms:
            if a not in ARMS:
                raise ConfigError(f"unknown arm {a!r}; choose from {ARMS}")
        for t in self.taps + [self.tap]:
            TapPoint.parse(t)
        if self.folds < 1:
            raise ConfigError("folds must be >= 1")
        if any(s < 1 for s in self.sizes) or list(self.sizes) != sorted(self.sizes):
            raise ConfigError(f"sizes must be positive and ascending, got {self.sizes}")
        if self.pipeline_source not in ("ctc", "attn"):
            raise ConfigError(f"pipeline_source must be ctc or attn, got {self.pipeline_source!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HarnessConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown harness config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Context:
    """Everything a cell needs; read-only once built."""

    asr_cfg: ModelConfig
    pretrained: dict[str, np.ndarray]
    vocab: Vocab
    pool: Manifest
    train_cfg: TrainConfig
    hcfg: HarnessConfig
    model_overrides: dict = field(default_factory=dict)

    @property
    def task(self) -> str:
        return self.pool.task

    @property
    def n_labels(self) -> int:
        if self.task == "intent":
            return self.pool.schema.total_bits
        return len(SENTIMENTS)

    def model_cfg(self, tap: str) -> ModelConfig:
        return self.asr_cfg.with_(task=self.task, n_labels=self.n_labels, tap=TapPoint.parse(tap),
                                  **self.model_overrides)


def fold_split(pool: Manifest, n: int, fold: int, seed: int = 0) -> tuple[Manifest, Manifest]:
    speakers = pool.speakers()
    if not speakers:
        raise DataError("downstream pool is empty")
    spk = speakers[fold % len(speakers)]
    mine = pool.filter(lambda u: u.speaker == spk)
    train = subset_per_class(mine, n, seed * 1000 + fold)
    test = complement(mine, train)
    if len(test) == 0:
        raise DataError(f"fold {fold}: speaker {spk} has no utterances left for testing at size {n}")
    return train, test


# ---------------------------------------------------------------------------
# metric helpers
# ---------------------------------------------------------------------------


def _metric_name(task: str) -> str:
    return "accuracy" if task == "intent" else "macro_f1"


def slu_score(task: str, preds: list, golds: list) -> float:
    if task == "intent":
        return intent_accuracy(preds, golds)
    return macro_f1([SENTIMENTS.index(p) for p in preds], [SENTIMENTS.index(g) for g in golds], 3)["macro_f1"]


def _golds(m: Manifest) -> list:
    return [u.intent if m.task == "intent" else u.sentiment for u in m]


# ---------------------------------------------------------------------------
# pipeline baseline: ASR transcripts -> bag-of-token-embeddings classifier
# ---------------------------------------------------------------------------


class BagOfTokens(Module):
    """Mean of token embeddings followed by a linear layer."""

    def __init__(self, vocab_size: int, dim: int, n_out: int, rng):
        self.embed = init_weight(rng, dim, (vocab_size, dim))
        self.out = Linear(dim, n_out, rng)

    def __call__(self, seqs: list[list[int]]) -> nx.Tensor:
        L = max(1, max(len(s) for s in seqs))
        ids = np.full((len(seqs), L), PAD, dtype=np.int64)
        weight = np.zeros((len(seqs), 1, L), dtype=np.float32)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
            weight[i, 0, : len(s)] = 1.0 / max(len(s), 1)
        pooled = nx.matmul(nx.Tensor(weight), nx.embedding_lookup(self.embed, ids))
        return self.out(pooled.reshape(len(seqs), -1))


def _transcribe(model: MultitaskModel, m: Manifest, vocab: Vocab, source: str) -> list[list[int]]:
    preds = predict(model, m, vocab, decode_asr=True)
    return [p["ctc"] if source == "ctc" else p["attn"] for p in preds]


def train_text_classifier(seqs, labels, task: str, schema, vocab_size: int, dim: int, epochs: int,
                          seed: int) -> BagOfTokens:
    n_out = schema.total_bits if task == "intent" else len(SENTIMENTS)
    clf = BagOfTokens(vocab_size, dim, n_out, nx.make_rng(seed, "init", "pipeline"))
    if task == "intent":
        target = np.stack([encode_intent(schema, a, v) for a, v in labels])
    else:
        target = np.array([SENTIMENTS.index(s) for s in labels])
    opt = Adam(clf.parameters(), betas=(0.9, 0.98), eps=1e-9)
    for _ in range(epochs):
        opt.zero_grad()
        logits = clf(seqs)
        loss = multihot_bce(logits, target) if task == "intent" else smoothed_ce(logits, target, 0.1, None)
        nx.backward(loss)
        opt.step(1e-2)
    return clf


def classify_text(clf: BagOfTokens, seqs, task: str, schema) -> list:
    with nx.no_grad():
        logits = clf(seqs).data
    if task == "intent":
        return decode_batch(schema, logits)
    return [SENTIMENTS[int(i)] for i in logits.argmax(axis=1)]


def run_pipeline_baseline(ctx: Context, train: Manifest, test: Manifest, oracle: bool = False,
                          seed: int = 0) -> float:
    """Transcribe with the pretrained ASR model, then classify the text.

    With ``oracle`` the gold transcripts replace the ASR output on both
    sides, which gives the text-only upper reference.
    """
    h = ctx.hcfg
    if oracle:
        tr = [ctx.vocab.encode(u.transcript) for u in train]
        te = [ctx.vocab.encode(u.transcript) for u in test]
    else:
        asr = MultitaskModel(ctx.asr_cfg)
        load_state_dict(asr, ctx.pretrained)
        tr = _transcribe(asr, train, ctx.vocab, h.pipeline_source)
        te = _transcribe(asr, test, ctx.vocab, h.pipeline_source)
    clf = train_text_classifier(tr, _golds(train), ctx.task, ctx.pool.schema, len(ctx.vocab),
                                h.pipeline_dim, h.pipeline_epochs, seed)
    return slu_score(ctx.task, classify_text(clf, te, ctx.task, ctx.pool.schema), _golds(test))


# ---------------------------------------------------------------------------
# cells
# ---------------------------------------------------------------------------


def arm_train_config(cfg: TrainConfig, arm: str) -> TrainConfig:
    if arm == "slu_only":
        w = LossWeights(cfg.weights.ctc_weight, w_asr=0.0, w_slu=1.0,
                        label_smoothing=cfg.weights.label_smoothing)
        return replace(cfg, weights=w)
    return cfg


def run_cell(ctx: Context, size: int, fold: int, arm: str, tap: str) -> dict:
    train, test = fold_split(ctx.pool, size, fold, ctx.hcfg.seed)
    seed = ctx.hcfg.seed * 1000 + fold
    if arm in ("pipeline", "nlp"):
        value = run_pipeline_baseline(ctx, train, test, oracle=arm == "nlp", seed=seed)
        tap = "-"
    elif arm in ("mtl", "slu_only"):
        cfg = replace(arm_train_config(ctx.train_cfg, arm), seed=seed)
        res = finetune_mtl(ctx.model_cfg(tap), cfg, ctx.pretrained, train, ctx.vocab)
        preds = predict(res.model, test, ctx.vocab, decode_asr=False)
        key = "intent" if ctx.task == "intent" else "sentiment"
        value = slu_score(ctx.task, [p[key] for p in preds], _golds(test))
    else:
        raise ConfigError(f"unknown arm {arm!r}")
    log.info("cell size=%d fold=%d arm=%s tap=%s -> %.4f", size, fold, arm, tap, value)
    return {"size": size, "fold": fold, "arm": arm, "tap": tap, "metric": _metric_name(ctx.task),
            "value": float(value)}


_CTX: Context | None = None


def _pool_init(ctx: Context) -> None:
    global _CTX
    _CTX = ctx


def _pool_run(job) -> dict:
    return run_cell(_CTX, *job)


def run_cells(ctx: Context, jobs: list[tuple], n_jobs: int = 1) -> list[dict]:
    """Run cells, serially or in a process pool; output order follows ``jobs``."""
    if n_jobs <= 1 or len(jobs) <= 1:
        return [run_cell(ctx, *j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs, initializer=_pool_init, initargs=(ctx,)) as ex:
        return list(ex.map(_pool_run, jobs))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def mean_se(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r["size"], r["fold"], r["arm"], r["tap"], r["metric"], repr(float(r["value"]))])
    return buf.getvalue()


def rows_from_csv(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != CSV_HEADER:
        raise DataError(f"unexpected CSV header {reader.fieldnames}")
    return [{"size": int(r["size"]), "fold": int(r["fold"]), "arm": r["arm"], "tap": r["tap"],
             "metric": r["metric"], "value": float(r["value"])} for r in reader]


@dataclass
class CurveReport:
    rows: list[dict]

    def cells(self, arm: str) -> dict[int, list[float]]:
        out: dict[int, list[float]] = {}
        for r in self.rows:
            if r["arm"] == arm:
                out.setdefault(r["size"], []).append(r["value"])
        return out

    @property
    def arms(self) -> list[str]:
        return list(dict.fromkeys(r["arm"] for r in self.rows))

    def aggregate(self) -> list[dict]:
        """Mean and 68% band (mean +/- one standard error) per (size, arm)."""
        out = []
        for arm in self.arms:
            for size, vals in sorted(self.cells(arm).items()):
                m, se = mean_se(vals)
                out.append({"size": size, "arm": arm, "n_folds": len(vals), "mean": m, "se": se,
                            "lo": m - se, "hi": m + se})
        return out

    def validate(self, min_folds: int = 3) -> None:
        for a in self.aggregate():
            if a["n_folds"] < min_folds:
                raise DataError(f"cell size={a['size']} arm={a['arm']} has {a['n_folds']} folds, "
                                f"need >= {min_folds}")

    def spearman(self, arm: str) -> float:
        """Rank correlation between size and per-size mean."""
        agg = [a for a in self.aggregate() if a["arm"] == arm]
        if len(agg) < 2:
            return float("nan")
        rho = stats.spearmanr([a["size"] for a in agg], [a["mean"] for a in agg]).statistic
        return float(rho)

    def to_csv(self) -> str:
        return rows_to_csv(self.rows)

    def summary(self) -> dict:
        return {"aggregate": self.aggregate(),
                "spearman": {arm: self.spearman(arm) for arm in self.arms}}

    def to_svg(self, title: str = "learning curve") -> str:
        return curve_svg(self.aggregate(), title)


def sign_test(a: list[float], b: list[float]) -> dict:
    """One-sided sign test of a > b over paired folds; ties are dropped."""
    wins = sum(1 for x, y in zip(a, b) if x > y)
    losses = sum(1 for x, y in zip(a, b) if x < y)
    n = wins + losses
    p = float(stats.binomtest(wins, n, 0.5, alternative="greater").pvalue) if n else 1.0
    return {"wins": wins, "losses": losses, "ties": len(a) - n, "p_value": p}


_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]


def curve_svg(agg: list[dict], title: str, width: int = 480, height: int = 320) -> str:
    """Standalone SVG line plot with shaded bands; the data table rides along as a comment."""
    pad = 48
    sizes = sorted({a["size"] for a in agg}) or [1]
    lo = min([a["lo"] for a in agg] + [0.0])
    hi = max([a["hi"] for a in agg] + [1.0])
    xs = {s: pad + (width - 2 * pad) * (i / max(len(sizes) - 1, 1)) for i, s in enumerate(sizes)}

    def y(v):
        return height - pad - (height - 2 * pad) * ((v - lo) / (hi - lo or 1.0))

    table = "\n".join(f"{a['size']},{a['arm']},{a['n_folds']},{a['mean']:.6f},{a['se']:.6f}" for a in agg)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f"<!-- data: size,arm,n_folds,mean,se\n{table}\n-->",
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>']
    for s in sizes:
        parts.append(f'<text x="{xs[s]:.1f}" y="{height - pad + 16}" text-anchor="middle" '
                     f'font-size="11">{s}</text>')
    for v in np.linspace(lo, hi, 5):
        parts.append(f'<text x="{pad - 6}" y="{y(v) + 4:.1f}" text-anchor="end" font-size="11">{v:.2f}</text>')
    arms = list(dict.fromkeys(a["arm"] for a in agg))
    for k, arm in enumerate(arms):
        pts = sorted((a for a in agg if a["arm"] == arm), key=lambda a: a["size"])
        color = _COLORS[k % len(_COLORS)]
        band = [(xs[p["size"]], y(p["hi"])) for p in pts] + [(xs[p["size"]], y(p["lo"])) for p in reversed(pts)]
        parts.append('<polygon points="' + " ".join(f"{px:.1f},{py:.1f}" for px, py in band)
                     + f'" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        parts.append('<polyline points="' + " ".join(f"{xs[p['size']]:.1f},{y(p['mean']):.1f}" for p in pts)
                     + f'" fill="none" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{width - pad + 4}" y="{pad + 14 * k}" font-size="11" fill="{color}">{arm}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def run_learning_curve(ctx: Context, sizes: list[int] | None = None, folds: int | None = None,
                       arms: list[str] | None = None, n_jobs: int = 1) -> CurveReport:
    h = ctx.hcfg
    sizes = list(h.sizes if sizes is None else sizes)
    folds = h.folds if folds is None else folds
    arms = list(h.arms if arms is None else arms)
    if sizes != sorted(sizes):
        raise ConfigError(f"sizes must be ascending, got {sizes}")
    for fold in range(folds):
        fold_split(ctx.pool, max(sizes), fold, h.seed)  # fail early on insufficient data
    jobs = [(s, f, a, h.tap) for s in sizes for a in arms for f in range(folds)]
    return CurveReport(run_cells(ctx, jobs, n_jobs))


def run_ablation(ctx: Context, taps: list[str] | None = None, n_per_class: int | None = None,
                 folds: int | None = None, n_jobs: int = 1) -> dict:
    """Every tap x fold with the multitask and SLU-only arms."""
    h = ctx.hcfg
    taps = list(h.taps if taps is None else taps)
    n = h.n_per_class if n_per_class is None else n_per_class
    folds = h.folds if folds is None else folds
    jobs = [(n, f, arm, t) for t in taps for arm in ("mtl", "slu_only") for f in range(folds)]
    rows = run_cells(ctx, jobs, n_jobs)
    summary = []
    for t in taps:
        for arm in ("mtl", "slu_only"):
            vals = [r["value"] for r in rows if r["tap"] == t and r["arm"] == arm]
            m, se = mean_se(vals)
            summary.append({"tap": t, "arm": arm, "mean": m, "se": se,
                            "var": float(np.var(vals, ddof=1)) if len(vals) > 1 else 0.0})
    return {"rows": rows, "summary": summary}


def build_context(hcfg: HarnessConfig, train_cfg: TrainConfig, model_overrides: dict | None = None) -> Context:
    """Load the pretrained bundle and the downstream pool named in ``hcfg``."""
    from .training import load_bundle

    if not hcfg.checkpoint:
        raise ConfigError("harness.checkpoint is required (pretrained ASR checkpoint)")
    if not hcfg.data:
        raise ConfigError("harness.data is required (downstream corpus directory)")
    if not Path(hcfg.checkpoint).exists():
        from .training import CheckpointError

        raise CheckpointError(f"pretrained checkpoint not found: {hcfg.checkpoint}")
    bundle = load_bundle(hcfg.checkpoint)
    pool = Manifest.load(hcfg.data)
    if pool.task not in ("intent", "sentiment"):
        raise DataError(f"downstream corpus must be intent or sentiment, got {pool.task}")
    asr_cfg = bundle.model.cfg.with_(task="asr", n_labels=0)
    from .training import state_dict

    return Context(asr_cfg, state_dict(bundle.model), bundle.vocab, pool, train_cfg, hcfg,
                   dict(model_overrides or {}))


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
