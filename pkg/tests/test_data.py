import numpy as np
import pytest

from mtslu.data import (
    DataError,
    Manifest,
    SynthSpec,
    batch,
    complement,
    grabo_grammar,
    iter_batches,
    read_feat,
    subset_per_class,
    synth_generate,
    write_feat,
)
from mtslu.tokenizer import EOS, PAD, Vocab

SMALL = {"schema": {"actions": ["go", "stop"], "arguments": [{"name": "side", "values": ["left", "right"]}]}}


def test_small_schema_counts():
    m = synth_generate(SynthSpec(task="intent", grammar=SMALL, n_mels=8), 3)
    assert len(m) == 12
    assert len(m.by_class()) == 4
    assert all(len(v) == 3 for v in m.by_class().values())
    assert {u.transcript for u in m} == {"go left", "go right", "stop left", "stop right"}


def test_grabo_has_36_classes():
    m = synth_generate(SynthSpec(task="intent", n_mels=8, n_speakers=2), 1)
    assert len(m.by_class()) == 36 and len(m) == 72
    assert m.speakers() == ["spk0", "spk1"]
    assert m.schema.n_classes == 36


def test_generation_is_deterministic(tmp_path):
    spec = SynthSpec(task="intent", grammar=SMALL, n_mels=8, seed=4, n_speakers=2)
    synth_generate(spec, 2, tmp_path / "a")
    synth_generate(spec, 2, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_zero_noise_renders_identically_modulo_timing():
    spec = SynthSpec(task="intent", grammar=SMALL, n_mels=8, noise_sigma=0.0, frames_per_symbol=(4, 4),
                     tempo_range=(1.0, 1.0))
    m = synth_generate(spec, 2)
    groups = m.by_class()
    for items in groups.values():
        assert np.array_equal(items[0].features, items[1].features)
    noisy = synth_generate(SynthSpec(task="intent", grammar=SMALL, n_mels=8), 2)
    items = next(iter(noisy.by_class().values()))
    assert not np.array_equal(items[0].features, items[1].features)


def test_sentiment_and_asr_tasks():
    s = synth_generate(SynthSpec(task="sentiment", n_mels=8), 2)
    assert sorted({u.sentiment for u in s}) == ["negative", "neutral", "positive"] and len(s) == 6
    a = synth_generate(SynthSpec(task="asr", n_mels=8, n_speakers=3), 4)
    assert len(a) == 12 and all(u.label_key is None for u in a)
    with pytest.raises(DataError):
        synth_generate(SynthSpec(task="dialogue"), 1)
    with pytest.raises(DataError):
        synth_generate(SynthSpec(), 0)
    with pytest.raises(DataError):
        SynthSpec.from_dict({"seed": 1, "loudness": 3})


def test_subset_per_class():
    m = synth_generate(SynthSpec(task="intent", n_mels=8), 3)
    one = subset_per_class(m, 1, fold_seed=0)
    assert len(one) == 36 and len(one.by_class()) == 36
    assert subset_per_class(m, 1, fold_seed=0).utterances == one.utterances
    other = subset_per_class(m, 1, fold_seed=1)
    assert [u.id for u in other] != [u.id for u in one]
    rest = complement(m, one)
    assert len(rest) == 72 and not {u.id for u in rest} & {u.id for u in one}
    with pytest.raises(DataError):
        subset_per_class(m, 4, fold_seed=0)


def test_batch_padding():
    m = synth_generate(SynthSpec(task="intent", grammar=SMALL, n_mels=8), 1)
    u1, u2 = m.utterances[0], m.utterances[1]
    u1.features, u2.features = u1.features[:10], u2.features[:7]
    v = Vocab.from_texts(m.transcripts())
    b = batch([u1, u2], v, "intent", m.schema)
    assert b.feats.shape == (2, 10, 8)
    assert b.feat_lengths.tolist() == [10, 7]
    assert b.feat_pad[1].tolist() == [False] * 7 + [True] * 3
    assert np.all(b.feats[1, 7:] == 0)
    assert b.tokens[0, len(u1.transcript)] == EOS
    assert b.tokens.shape[1] == max(len(u1.transcript), len(u2.transcript)) + 1
    short = int(np.argmin([len(u1.transcript), len(u2.transcript)]))
    assert b.tokens[short, -1] in (PAD, EOS)
    assert b.slu.shape == (2, 4) and np.all(b.slu.sum(axis=1) == 2)
    with pytest.raises(DataError):
        batch([], v)
    assert [len(x) for x in iter_batches(m.utterances, 3)] == [3, 1]


def test_feat_round_trip_and_corruption(tmp_path):
    x = np.random.default_rng(0).normal(size=(13, 5)).astype(np.float32)
    write_feat(tmp_path / "x.feat", x)
    raw = (tmp_path / "x.feat").read_bytes()
    assert raw[:4] == b"FEAT" and len(raw) == 12 + 13 * 5 * 4
    assert np.array_equal(read_feat(tmp_path / "x.feat"), x)
    (tmp_path / "y.feat").write_bytes(raw[:-4])
    with pytest.raises(DataError):
        read_feat(tmp_path / "y.feat")
    (tmp_path / "z.feat").write_bytes(b"JUNK" + raw[4:])
    with pytest.raises(DataError):
        read_feat(tmp_path / "z.feat")
    with pytest.raises(DataError):
        read_feat(tmp_path / "missing.feat")


def test_manifest_round_trip(tmp_path):
    m = synth_generate(SynthSpec(task="intent", grammar=SMALL, n_mels=8), 2, tmp_path)
    back = Manifest.load(tmp_path)
    assert back.task == "intent" and back.schema == m.schema
    assert [(u.id, u.transcript, u.intent) for u in back] == [(u.id, u.transcript, u.intent) for u in m]
    assert all(np.array_equal(a.features, b.features) for a, b in zip(back, m))
    (tmp_path / "manifest.jsonl").write_text('{"id": "x"}\n')
    with pytest.raises(DataError):
        Manifest.load(tmp_path)
    with pytest.raises(DataError):
        Manifest.load(tmp_path / "nowhere")


def test_features_carry_action_information():
    """A nearest-centroid classifier on mean-pooled frames beats chance on the action."""
    spec = SynthSpec(task="intent", n_mels=16, n_speakers=2, seed=2)
    m = synth_generate(spec, 3)
    train = [u for u in m if u.speaker == "spk0"]
    test = [u for u in m if u.speaker == "spk1"]

    def head(u):
        # the action word occupies the first few symbols after the leading silence
        return u.features[:30].mean(axis=0)

    actions = grabo_grammar()["schema"]["actions"]
    cents = {a: np.mean([head(u) for u in train if u.intent[0] == a], axis=0) for a in actions}
    # remove the speaker offset by centring each speaker's features
    mu_tr = np.mean([head(u) for u in train], axis=0)
    mu_te = np.mean([head(u) for u in test], axis=0)
    hits = 0
    for u in test:
        f = head(u) - mu_te
        pred = min(actions, key=lambda a: np.linalg.norm(f - (cents[a] - mu_tr)))
        hits += pred == u.intent[0]
    assert hits / len(test) > 2 / len(actions)
