import numpy as np
import pytest

from conquer.container import write_arrays
from conquer.data import (Corpus, CorpusError, DimensionMismatch, QueryRecord, SubtitleSpan, SyntheticSpec,
                          VideoRecord, assign_subtitles, batch_videos, clip_count, generate_synthetic, load_corpus,
                          load_dataset, oracle_rank_lists, query_input, write_corpus, write_features)


def sub(a, b, f):
    return SubtitleSpan(a, b, np.asarray(f, dtype=np.float64))


def test_assign_subtitles_examples():
    out = assign_subtitles([sub(0.0, 3.0, [1.0, 2.0])], 1.5, 4)
    np.testing.assert_array_equal(out, [[1, 2], [1, 2], [0, 0], [0, 0]])
    out = assign_subtitles([sub(1.4, 1.6, [1.0, 1.0])], 1.5, 3)
    np.testing.assert_array_equal(out[:, 0], [1, 1, 0])
    assert not assign_subtitles([], 1.5, 3, text_dim=2).any()


def test_assign_subtitles_means_overlaps():
    out = assign_subtitles([sub(0.0, 1.0, [2.0]), sub(0.5, 2.0, [4.0])], 1.5, 2)
    np.testing.assert_allclose(out[:, 0], [3.0, 4.0])
    with pytest.raises(ValueError):
        sub(2.0, 2.0, [1.0])


def test_clip_count():
    assert clip_count(3.0) == 2
    assert clip_count(3.1) == 3
    assert clip_count(0.2) == 1


def write_manifest(tmp_path, rows, header="# clip_len=1.5\n"):
    (tmp_path / "manifest.tsv").write_text(header + "".join("\t".join(r) + "\n" for r in rows))
    return tmp_path / "manifest.tsv"


def test_load_corpus_and_round_trip(tmp_path, rng):
    v0, t0 = rng.normal(size=(2, 6)).astype(np.float32), rng.normal(size=(2, 5)).astype(np.float32)
    v1 = rng.normal(size=(3, 6)).astype(np.float32)
    write_features(tmp_path / "a.v", v0)
    write_features(tmp_path / "a.t", t0)
    write_features(tmp_path / "b.v", v1)
    write_arrays(tmp_path / "b.s", {"spans": np.array([[0.0, 2.0]]), "features": np.ones((1, 5))})
    m = write_manifest(tmp_path, [("a", "3.0", "a.v", "a.t", "-"), ("b", "4.0", "b.v", "-", "b.s")])
    c = load_corpus(m, 6, 5)
    assert len(c) == 2 and c["a"].n_clips == 2 and c["b"].n_clips == 3
    assert c["a"].visual.tobytes() == v0.tobytes() and c["a"].textual.tobytes() == t0.tobytes()
    np.testing.assert_array_equal(c["b"].textual[:, 0], [1, 1, 0])


def test_dimension_mismatch_names_file(tmp_path, rng):
    write_features(tmp_path / "a.v", rng.normal(size=(2, 7)))
    m = write_manifest(tmp_path, [("a", "3.0", "a.v", "-", "-")])
    with pytest.raises(DimensionMismatch) as err:
        load_corpus(m, 6, 5)
    assert err.value.expected == 6 and err.value.actual == 7 and "a.v" in str(err.value)


def test_corrupt_and_inconsistent_files(tmp_path, rng):
    (tmp_path / "a.v").write_bytes(b"garbage")
    m = write_manifest(tmp_path, [("a", "3.0", "a.v", "-", "-")])
    with pytest.raises(ValueError):
        load_corpus(m, 6, 5)
    write_features(tmp_path / "a.v", rng.normal(size=(5, 6)))
    with pytest.raises(CorpusError):
        load_corpus(m, 6, 5)
    m = write_manifest(tmp_path, [("a", "3.0", "a.v")])
    with pytest.raises(CorpusError):
        load_corpus(m, 6, 5)


def test_long_videos_truncated(tmp_path, rng, caplog):
    write_features(tmp_path / "a.v", rng.normal(size=(8, 6)))
    m = write_manifest(tmp_path, [("a", "12.0", "a.v", "-", "-")])
    c = load_corpus(m, 6, 5, max_clips=5)
    assert c["a"].n_clips == 5 and c["a"].textual.shape == (5, 5)
    assert "truncating" in caplog.text


def small_spec(**kw):
    base = dict(n_videos=8, min_clips=8, max_clips=12, queries_per_video=2, visual_dim=12, text_dim=10,
                concept_dim=6, seed=3)
    base.update(kw)
    return SyntheticSpec(**base)


def test_synthetic_is_deterministic():
    a = generate_synthetic(small_spec())
    b = generate_synthetic(small_spec())
    for va, vb in zip(a[0].videos.values(), b[0].videos.values()):
        assert va.visual.tobytes() == vb.visual.tobytes() and va.textual.tobytes() == vb.textual.tobytes()
    for qa, qb in zip(a[1], b[1]):
        assert qa.tokens.tobytes() == qb.tokens.tobytes() and qa.split == qb.split
    assert [r.entries for r in a[2]] == [r.entries for r in b[2]]


def test_synthetic_spans_respect_bounds():
    spec = small_spec(span_min=2, span_max=4)
    corpus, queries, _ = generate_synthetic(spec)
    for q in queries:
        length = round((q.t_end - q.t_begin) / spec.clip_len)
        assert 2 <= length <= 4
        assert q.t_end <= corpus[q.video_id].duration + 1e-9
    with pytest.raises(ValueError):
        generate_synthetic(small_spec(span_max=9))


def test_beta_one_leaves_textual_channel_at_background():
    spec = small_spec(beta=1.0, n_videos=30, concepts_per_query=1, shared_text_map=True)
    corpus, queries, _ = generate_synthetic(spec)
    inside_t = []
    for q in queries:
        direction = q.tokens[0] / np.linalg.norm(q.tokens[0])  # noisy view of the concept in text space
        v = corpus[q.video_id]
        b, e = round(q.t_begin / spec.clip_len), round(q.t_end / spec.clip_len)
        inside_t += list(v.textual[b:e] @ direction)
    # background: projections of unit-variance noise on a unit vector are N(0, 1)
    n = len(inside_t)
    assert abs(np.mean(inside_t)) < 3 / np.sqrt(n)


def test_beta_zero_puts_signal_in_text():
    spec = small_spec(beta=0.0, n_videos=30, concepts_per_query=1, token_noise=0.0)
    corpus, queries, _ = generate_synthetic(spec)
    proj = []
    for q in queries:
        direction = q.tokens[0] / np.linalg.norm(q.tokens[0])
        v = corpus[q.video_id]
        b, e = round(q.t_begin / spec.clip_len), round(q.t_end / spec.clip_len)
        proj += list(v.textual[b:e] @ direction)
    assert np.mean(proj) > 1.0


def test_concept_vocabulary_recurs():
    spec = small_spec(concept_vocab=3, concepts_per_query=2, token_noise=0.0)
    _, queries, _ = generate_synthetic(spec)
    dirs = {tuple(np.round(q.tokens[0] / np.linalg.norm(q.tokens[0]), 6)) for q in queries}
    assert len(dirs) <= 3
    with pytest.raises(ValueError):
        generate_synthetic(small_spec(concept_vocab=1, concepts_per_query=2))


def test_oracle_planting_reproduces_requested_ranks(rng):
    vids = [f"v{i}" for i in range(30)]
    qs = [QueryRecord(f"q{i}", np.zeros((1, 2)), vids[i % 30], 0.0, 1.5) for i in range(200)]
    want = rng.integers(1, 31, size=200)
    lists = oracle_rank_lists(qs, vids, rng, ranks=want, noise=0.05)
    assert [rl.rank_of(q.video_id) for rl, q in zip(lists, qs)] == list(want)
    lists = oracle_rank_lists(qs, vids, rng, "uniform:1:10")
    got = np.array([rl.rank_of(q.video_id) for rl, q in zip(lists, qs)])
    assert got.min() >= 1 and got.max() <= 10


def test_corpus_directory_round_trip(tmp_path):
    corpus, queries, ranks = generate_synthetic(small_spec())
    write_corpus(tmp_path, corpus, queries, ranks)
    c2, q2, r2 = load_dataset(tmp_path)
    assert list(c2.videos) == list(corpus.videos)
    for v in corpus.videos:
        assert c2[v].visual.tobytes() == corpus[v].visual.tobytes()
        assert c2[v].duration == corpus[v].duration
    assert [(q.query_id, q.t_begin, q.t_end, q.split, q.beta) for q in q2] == \
           [(q.query_id, q.t_begin, q.t_end, q.split, q.beta) for q in queries]
    assert all(r2[r.query_id].entries == r.entries for r in ranks)


def test_batching(rng):
    vids = [VideoRecord(f"v{i}", n * 1.5, rng.normal(size=(n, 3)), rng.normal(size=(n, 2))) for i, n in
            enumerate((2, 5))]
    vb = batch_videos(vids, 8)
    assert vb.visual.shape == (2, 5, 3) and vb.mask.sum(1).tolist() == [2, 5]
    assert batch_videos(vids, 8, trim=False).visual.shape == (2, 8, 3)
    with pytest.raises(ValueError):
        batch_videos(vids, 4)
    qi = query_input(rng.normal(size=(3, 2)), 6, trim=False)
    assert qi.tokens.shape == (1, 6, 2) and qi.mask.sum() == 3
    with pytest.raises(ValueError):
        query_input(rng.normal(size=(7, 2)), 6)


def test_corpus_lookup_error():
    with pytest.raises(KeyError):
        Corpus({})["missing"]
