import csv
import math

import numpy as np
import pytest

from audiocnn import architectures as A
from audiocnn import training as T
from audiocnn.dataset import ClipFeatures, LabelVocabulary, PatchStore, VocabEntry, sample_minibatch

VOCAB = LabelVocabulary((VocabEntry(0, "low", 10), VocabEntry(1, "high", 10)))


def toy_clips(n=40, seed=0):
    # "low" clips light up the lower bands, "high" clips the upper ones
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(n):
        name = "low" if i % 2 == 0 else "high"
        x = rng.standard_normal((int(rng.integers(1, 4)), 96, 64)).astype(np.float32) * 0.5
        x[:, :, :32] += 1.0 if name == "low" else -1.0
        clips.append(ClipFeatures(f"t{i:03d}", frozenset({name}), x))
    return clips


def small_spec():
    return A.build_fully_connected(1, 16, 2)


def config(**kw):
    base = dict(batch_size=8, learning_rate=1e-3, max_steps=60, validation_interval=20, validation_clips=8)
    base.update(kw)
    return T.TrainConfig(**base)


def test_config_validation():
    with pytest.raises(T.ConfigError):
        T.TrainConfig(batch_size=0)
    with pytest.raises(T.ConfigError):
        T.TrainConfig(learning_rate=0.0)
    with pytest.raises(T.ConfigError):
        T.TrainConfig(max_steps=10, lr_decay_step=11)
    with pytest.raises(T.ConfigError, match="unknown training fields"):
        T.TrainConfig.from_dict({"momentum": 0.9})
    c = config(seed=4)
    assert T.TrainConfig.from_dict(c.to_dict()) == c


def test_lr_schedule_steps_once():
    c = T.TrainConfig(learning_rate=1e-3, lr_decay_factor=10, lr_decay_step=50, max_steps=100)
    assert T.lr_schedule(49, c) == 1e-3
    assert T.lr_schedule(50, c) == pytest.approx(1e-4)
    assert T.lr_schedule(99, c) == pytest.approx(1e-4)
    assert T.lr_schedule(99, T.TrainConfig(learning_rate=1e-3)) == 1e-3


def test_training_reduces_loss_and_learns_toy_task():
    clips = toy_clips()
    state = T.init_state(small_spec(), config(max_steps=200))
    T.train(state, PatchStore(clips, VOCAB), validation=clips[:10])
    losses = [r["loss"] for r in state.history]
    assert len(losses) == 200
    assert np.mean(losses[-20:]) < 0.5 * np.mean(losses[:20])
    assert state.history[-1]["val_acc"] == 1.0
    validated = [r["step"] for r in state.history if r["val_acc"] is not None]
    assert validated == [20, 40, 60, 80, 100, 120, 140, 160, 180, 200]


def test_train_step_rejects_non_finite_loss():
    state = T.init_state(small_spec(), config())
    ids = np.arange(2)
    x = np.full((2, 96, 64), np.nan, np.float32)
    with pytest.raises(T.NumericError, match="step 0.*batch patch ids \\[0, 1\\]"):
        T.train_step(state, (ids, x, np.zeros((2, 2), np.float32)))


def test_one_best_accuracy_tie_goes_to_lowest_id():
    vocab = LabelVocabulary((VocabEntry(7, "a", 5), VocabEntry(3, "b", 1)))  # column 0 has id 7
    scores = np.array([[0.5, 0.5], [0.9, 0.1]])
    targets = np.array([[0, 1], [0, 1]])
    assert T.one_best_accuracy(scores, targets, vocab) == 0.5


def test_validate_and_subset():
    clips = toy_clips(30)
    perfect = lambda p: np.tile([1.0, 0.0] if p[0, 0, 0] > 0 else [0.0, 1.0], (len(p), 1))  # noqa: E731
    v = T.validate(perfect, clips, VOCAB)
    assert v == {"one_best_accuracy": 1.0, "mAP": 1.0}
    c = config(validation_clips=8)
    sub = T.validation_subset(clips, c)
    assert len(sub) == 8 and [x.clip_id for x in sub] == [x.clip_id for x in T.validation_subset(clips, c)]
    assert T.validation_subset(clips[:5], c) == clips[:5]
    with pytest.raises(ValueError):
        T.validate(perfect, [], VOCAB)


def test_history_csv(tmp_path):
    state = T.init_state(small_spec(), config(max_steps=20, validation_interval=10))
    T.train(state, PatchStore(toy_clips(), VOCAB), validation=toy_clips(6))
    T.write_history(state.history, tmp_path / "h.csv")
    with open(tmp_path / "h.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 20 and rows[0]["val_acc"] == "" and rows[9]["val_acc"] != ""
    assert float(rows[0]["lr"]) == 1e-3


def _params(state):
    return {p.name: p.data.copy() for p in state.network.parameters()}


def test_resume_from_checkpoint_is_bit_identical(tmp_path):
    spec = A.shrink(A.build_resnet50_audio(2), 0.0625)  # exercises batchnorm statistics too
    store = PatchStore(toy_clips(12), VOCAB)
    cfg = config(max_steps=4, batch_size=4)

    straight = T.init_state(spec, cfg)
    T.train(straight, store)

    first = T.init_state(spec, cfg)
    T.train(first, store, until=2)
    T.save_state(first, tmp_path / "mid.wck")
    resumed = T.load_state(tmp_path / "mid.wck", spec)
    assert resumed.step == 2 and resumed.config == cfg
    T.train(resumed, store)

    a, b = _params(straight), _params(resumed)
    assert a.keys() == b.keys()
    for name in a:
        assert np.array_equal(a[name], b[name]), name
    for la, lb in zip(straight.network.batchnorms(), resumed.network.batchnorms()):
        assert np.array_equal(la.moving_mean, lb.moving_mean)
        assert np.array_equal(la.moving_variance, lb.moving_variance)
    assert math.isclose(straight.running_loss, resumed.running_loss, rel_tol=0, abs_tol=0)


def test_sampler_stream_is_seeded():
    store = PatchStore(toy_clips(), VOCAB)
    a = sample_minibatch(store, 16, T.sampler_rng(3))[0]
    b = sample_minibatch(store, 16, T.sampler_rng(3))[0]
    c = sample_minibatch(store, 16, T.sampler_rng(4))[0]
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_training_size_sweep_nested_subsets():
    clips = toy_clips(20)
    reports = T.run_training_size_sweep(small_spec(), config(max_steps=10), clips, clips, VOCAB, [4, 10])
    assert sorted(reports) == [4, 10]
    assert all(0.0 <= r.balanced_auc <= 1.0 for r in reports.values())
    with pytest.raises(T.ConfigError, match="exceeds"):
        T.run_training_size_sweep(small_spec(), config(max_steps=10), clips, clips, VOCAB, [21])
