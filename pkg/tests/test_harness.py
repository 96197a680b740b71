import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from mtslu import harness
from mtslu.data import DataError, SynthSpec, synth_generate
from mtslu.harness import (
    CSV_HEADER,
    Context,
    CurveReport,
    HarnessConfig,
    fold_split,
    mean_se,
    rows_from_csv,
    rows_to_csv,
    run_ablation,
    run_cell,
    run_cells,
    run_learning_curve,
    sign_test,
)
from mtslu.model import ConfigError, ModelConfig, MultitaskModel
from mtslu.tokenizer import Vocab
from mtslu.training import TrainConfig, state_dict

SMALL = {"schema": {"actions": ["go", "stop"], "arguments": [{"name": "side", "values": ["left", "right"]}]}}


@pytest.fixture(scope="module")
def ctx():
    pool = synth_generate(SynthSpec(task="intent", grammar=SMALL, n_mels=16, n_speakers=2, seed=3), 3)
    vocab = Vocab.from_texts(pool.transcripts())
    asr = ModelConfig(vocab_size=len(vocab), n_mels=16, d_model=16, n_heads=2, d_ff=32, n_enc_layers=2,
                      n_dec_layers=3, conv_channels=(2, 2), slu_heads=2, task="asr")
    h = HarnessConfig(taps=["encoder.1", "ASR.0"], sizes=[1, 2], folds=2, arms=["mtl", "pipeline"],
                      n_per_class=1, tap="ASR.1", pipeline_epochs=20, pipeline_dim=8)
    tc = TrainConfig(batch_size=4, max_epochs=2, lr=3e-3)
    return Context(asr, state_dict(MultitaskModel(asr)), vocab, pool, tc, h)


def _row(size, fold, arm, value, tap="ASR.2"):
    return {"size": size, "fold": fold, "arm": arm, "tap": tap, "metric": "accuracy", "value": value}


def test_job_counts(ctx, monkeypatch):
    seen = []

    def fake(c, jobs, n_jobs=1):
        seen.append(list(jobs))
        return [_row(j[0], j[1], j[2], 0.5, j[3]) for j in jobs]

    monkeypatch.setattr(harness, "run_cells", fake)
    out = run_ablation(ctx, taps=["encoder.3", "ASR.0", "ASR.2", "ASR.5"], n_per_class=1, folds=3)
    assert len(seen[-1]) == 24 and len(out["rows"]) == 24 and len(out["summary"]) == 8
    monkeypatch.setattr(harness, "fold_split", lambda *a: None)
    rep = run_learning_curve(ctx, sizes=[1, 2, 4, 8], folds=5, arms=["mtl", "pipeline"])
    assert len(seen[-1]) == 40 and len(rep.rows) == 40


def test_fold_split(ctx):
    train, test = fold_split(ctx.pool, 1, 0)
    assert len(train) == 4 and len(test) == 8
    assert {u.speaker for u in train} == {u.speaker for u in test} == {"spk0"}
    assert not {u.id for u in train} & {u.id for u in test}
    t1, _ = fold_split(ctx.pool, 1, 1)
    assert {u.speaker for u in t1} == {"spk1"}
    t2, _ = fold_split(ctx.pool, 1, 2)
    assert [u.id for u in t2] != [u.id for u in train] and {u.speaker for u in t2} == {"spk0"}
    with pytest.raises(DataError):
        fold_split(ctx.pool, 3, 0)  # nothing left to test on
    with pytest.raises(DataError):
        fold_split(ctx.pool, 4, 0)


def test_csv_round_trip():
    rows = [_row(1, 0, "mtl", 0.1 + 0.2), _row(2, 1, "pipeline", 1 / 3, "-")]
    text = rows_to_csv(rows)
    assert text.splitlines()[0] == ",".join(CSV_HEADER)
    assert rows_from_csv(text) == rows
    with pytest.raises(DataError):
        rows_from_csv("a,b\n1,2\n")


def test_mean_se():
    m, se = mean_se([1.0, 2.0, 3.0, 4.0])
    assert m == 2.5
    assert se == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)
    assert mean_se([0.7]) == (0.7, 0.0)


def test_sign_test_against_binomial():
    assert sign_test([1, 1, 1, 1, 1], [0] * 5)["p_value"] == pytest.approx(1 / 32)
    r = sign_test([1, 1, 1, 1, 0.5], [0, 0, 0, 0, 0.5])
    assert (r["wins"], r["losses"], r["ties"]) == (4, 0, 1)
    assert r["p_value"] == pytest.approx(1 / 16)
    r = sign_test([1, 1, 1, 0, 0], [0, 0, 0, 1, 1])
    assert r["p_value"] == pytest.approx(sum(math.comb(5, k) for k in range(3, 6)) / 32)
    assert sign_test([0.5] * 3, [0.5] * 3)["p_value"] == 1.0


def test_curve_report_aggregate_spearman_svg():
    rows = [_row(s, f, "mtl", 0.2 * s + 0.01 * f) for s in (1, 2, 4) for f in range(3)]
    rows += [_row(s, f, "pipeline", 0.5 - 0.01 * s) for s in (1, 2, 4) for f in range(3)]
    rep = CurveReport(rows)
    agg = rep.aggregate()
    first = agg[0]
    assert (first["size"], first["arm"], first["n_folds"]) == (1, "mtl", 3)
    assert first["mean"] == pytest.approx(0.21)
    assert first["lo"] == pytest.approx(first["mean"] - first["se"])
    assert rep.spearman("mtl") == pytest.approx(stats.spearmanr([1, 2, 4], [0.21, 0.41, 0.81]).statistic)
    assert rep.spearman("mtl") == 1.0 and rep.spearman("pipeline") == -1.0
    svg = rep.to_svg()
    assert svg.startswith("<svg") and svg.count("<polygon") == 2 and svg.count("<polyline") == 2
    assert "1,mtl,3,0.210000" in svg
    rep.validate(3)
    with pytest.raises(DataError):
        CurveReport(rows[:2]).validate(3)


def test_harness_config_validation():
    with pytest.raises(ConfigError):
        HarnessConfig(arms=["mtl", "oracle"])
    with pytest.raises(ConfigError):
        HarnessConfig(sizes=[4, 2])
    with pytest.raises(ConfigError):
        HarnessConfig(taps=["decoder.1"])
    with pytest.raises(ConfigError):
        HarnessConfig.from_dict({"folds": 3, "bootstrap": True})
    with pytest.raises(ConfigError):
        HarnessConfig(pipeline_source="nbest")


def test_cells_are_isolated_and_reproducible(ctx):
    jobs = [(1, 0, "mtl", "ASR.1"), (1, 1, "slu_only", "encoder.1"), (1, 0, "pipeline", "ASR.1")]
    serial = run_cells(ctx, jobs)
    alone = run_cell(ctx, *jobs[1])
    assert alone == serial[1]
    parallel = run_cells(ctx, jobs, n_jobs=2)
    assert rows_to_csv(parallel) == rows_to_csv(serial)
    assert serial[2]["tap"] == "-" and all(0.0 <= r["value"] <= 1.0 for r in serial)


def test_oracle_arm_reads_gold_text(ctx):
    # with gold transcripts every class is separable by its words, so a text classifier gets it all
    full = replace(ctx, hcfg=replace(ctx.hcfg, pipeline_epochs=200))
    row = run_cell(full, 2, 0, "nlp", "ASR.1")
    assert row["value"] == 1.0 and row["arm"] == "nlp"
    with pytest.raises(ConfigError):
        run_cell(ctx, 1, 0, "ensemble", "ASR.1")


def test_insufficient_data_fails_before_training(ctx, monkeypatch):
    monkeypatch.setattr(harness, "run_cells", lambda *a, **k: pytest.fail("cells ran"))
    with pytest.raises(DataError):
        run_learning_curve(ctx, sizes=[1, 3], folds=2, arms=["mtl"])
