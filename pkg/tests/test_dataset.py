import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from audiocnn import dataset as D
from audiocnn import frontend as F


def vocab_of(freqs):
    return D.LabelVocabulary(tuple(D.VocabEntry(i, n, f) for i, (n, f) in enumerate(freqs.items())))


def tiny_clip(cid, labels, patches=1):
    # 1x1 "patches" keep the sampling tests cheap; only the bookkeeping matters
    return D.ClipFeatures(cid, frozenset(labels), np.full((patches, 1, 1), float(patches), np.float32))


def test_vocabulary_order_and_ties():
    v = D.LabelVocabulary.from_label_sets([["a", "b"], ["b"], ["c"], ["a"]], {"a": 5, "b": 2, "c": 1})
    assert v.names == ["b", "a", "c"]  # b and a tie at 2; id 2 < 5
    assert v.index() == {"b": 0, "a": 1, "c": 2}
    assert v.id_of()["a"] == 5


def test_vocabulary_validation():
    with pytest.raises(D.DataError, match="duplicate label ids"):
        D.LabelVocabulary((D.VocabEntry(1, "a", 1), D.VocabEntry(1, "b", 1)))
    with pytest.raises(D.DataError, match="duplicate label names"):
        D.LabelVocabulary((D.VocabEntry(1, "a", 1), D.VocabEntry(2, "a", 1)))
    with pytest.raises(D.DataError, match="frequencies"):
        D.LabelVocabulary((D.VocabEntry(1, "a", 0),))
    with pytest.raises(D.DataError, match="without ids"):
        D.LabelVocabulary.from_label_sets([["a"]], {"b": 1})


def test_vocabulary_csv_round_trip(tmp_path):
    v = vocab_of({"x": 3, "y": 9, "z": 3})
    v.to_csv(tmp_path / "v.csv")
    assert D.LabelVocabulary.from_csv(tmp_path / "v.csv") == v


def test_restrict_vocabulary_keeps_most_frequent():
    v = vocab_of({"a": 1, "b": 7, "c": 4, "d": 4})
    assert D.restrict_vocabulary(v, 2).names == ["b", "c"]
    with pytest.raises(D.DataError):
        D.restrict_vocabulary(v, 0)
    with pytest.raises(D.DataError):
        D.restrict_vocabulary(v, 5)


def test_projection_training_drops_evaluation_keeps():
    v = vocab_of({"a": 2})
    clips = [tiny_clip("1", {"a", "z"}), tiny_clip("2", {"z"})]
    train = D.project(clips, v, drop_empty=True)
    assert [(c.clip_id, c.labels) for c in train] == [("1", frozenset({"a"}))]
    ev = D.project(clips, v, drop_empty=False)
    assert [c.labels for c in ev] == [frozenset({"a"}), frozenset()]
    assert D.label_matrix(ev, v).tolist() == [[1.0], [0.0]]


def test_sampling_is_proportional_to_patch_count():
    big = tiny_clip("big", {"a"}, patches=287)
    small = [tiny_clip(f"s{i}", {"a"}) for i in range(50)]
    store = D.PatchStore([big] + small, vocab_of({"a": 51}))
    rng = np.random.default_rng(0)
    counts = np.zeros(51)
    for _ in range(10):
        ids, x, _ = D.sample_minibatch(store, 100_000, rng)
        counts += np.bincount(store.clip_of_patch[ids], minlength=51)
    expected = np.array([287] + [1] * 50) / 337 * counts.sum()
    assert chisquare(counts, expected).pvalue > 1e-3
    assert 250 < counts[0] / counts[1:].mean() < 330


def test_every_sampled_target_is_the_parent_clip_label_set():
    rng = np.random.default_rng(1)
    names = [f"l{i}" for i in range(12)]
    clips = []
    for i in range(300):
        labels = set(rng.choice(names, size=int(rng.integers(1, 4)), replace=False))
        clips.append(tiny_clip(f"c{i}", labels, patches=int(rng.integers(1, 6))))
    full = D.LabelVocabulary.from_label_sets([c.labels for c in clips])
    vocab = D.restrict_vocabulary(full, 7)
    projected = D.project(clips, vocab, drop_empty=True)
    store = D.PatchStore(projected, vocab)
    expected = {c.clip_id: D.targets_for(c.labels & set(vocab.names), vocab) for c in clips}
    ids, x, y = D.sample_minibatch(store, 100_000, rng)
    parents = store.clip_of_patch[ids]
    for k in range(len(ids)):
        clip = store.clips[parents[k]]
        assert np.array_equal(y[k], expected[clip.clip_id])
        assert x[k, 0, 0] == clip.num_patches


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sets(st.sampled_from("abcdef"), min_size=1), st.integers(1, 4)), min_size=1, max_size=20))
def test_patch_store_targets_follow_parent(spec):
    clips = [tiny_clip(f"c{i}", labels, n) for i, (labels, n) in enumerate(spec)]
    vocab = D.LabelVocabulary.from_label_sets([c.labels for c in clips])
    store = D.PatchStore(clips, vocab)
    assert len(store) == sum(n for _, n in spec)
    x, y = store.batch(np.arange(len(store)))
    for k in range(len(store)):
        parent = clips[store.clip_of_patch[k]]
        assert set(np.array(vocab.names)[y[k] == 1]) == parent.labels


def test_empty_store_rejected():
    with pytest.raises(D.DataError, match="empty store"):
        D.PatchStore([tiny_clip("x", {"a"}, 0)], vocab_of({"a": 1}))


def test_manifest_round_trip_and_errors(tmp_path):
    recs = [D.ManifestRecord("a", "a.wav", ("x",), {"source": "s"}), D.ManifestRecord("b", "b.wav", ())]
    path = tmp_path / "m.jsonl"
    D.write_manifest(path, recs)
    back = D.read_manifest(path)
    assert back == recs and back[0].meta == {"source": "s"}
    path.write_text(path.read_text() + '{"clip_id": "a", "path": "c.wav", "labels": []}\n')
    with pytest.raises(D.DataError, match=r"m.jsonl:3: duplicate clip id"):
        D.read_manifest(path)
    path.write_text('{"clip_id": "a"}\n')
    with pytest.raises(D.DataError, match=r":1: bad manifest record"):
        D.read_manifest(path)
    D.write_manifest(path, recs)
    with pytest.raises(D.DataError, match="unknown labels"):
        D.read_manifest(path, vocab_of({"y": 1}))


def test_load_clips_featurizes_relative_paths(tmp_path):
    F.write_wav(tmp_path / "a.wav", np.zeros(F.SAMPLE_RATE * 2))
    D.write_manifest(tmp_path / "m.jsonl", [D.ManifestRecord("a", "a.wav", ("x",))])
    (clip,) = D.load_clips(tmp_path / "m.jsonl")
    assert clip.patches.shape == (2, 96, 64) and clip.labels == frozenset({"x"})


def test_split_assignment_is_stable_and_proportional():
    ids = [f"clip-{i:05d}" for i in range(20000)]
    splits = np.array([D.split_of(c, 7, (0.75, 0.05, 0.2)) for c in ids])
    assert np.bincount(splits, minlength=3) / len(ids) == pytest.approx([0.75, 0.05, 0.2], abs=0.015)
    assert D.split_of("clip-00001", 7, (0.75, 0.05, 0.2)) == splits[1]
    other = np.array([D.split_of(c, 8, (0.75, 0.05, 0.2)) for c in ids[:2000]])
    assert np.any(other != splits[:2000])


def test_corpus_digest_sensitive_to_content():
    a = [tiny_clip("x", {"a"}, 2)]
    b = [tiny_clip("x", {"b"}, 2)]
    assert D.corpus_digest(a) == D.corpus_digest([tiny_clip("x", {"a"}, 2)])
    assert D.corpus_digest(a) != D.corpus_digest(b)
