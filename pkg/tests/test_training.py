import math

import numpy as np
import pytest

from conquer import tensor as T
from conquer.config import RunConfig
from conquer.data import QueryRecord, RankList, SyntheticSpec, generate_synthetic, split_queries
from conquer.model import Conquer, load_checkpoint
from conquer.training import (EarlyStopping, TrainingError, align_ground_truth, filter_trainable,
                              sample_negatives, shared_softmax_loss, train, video_ce_loss)


def test_align_examples():
    assert align_ground_truth(3.0, 6.0, 1.5) == (2, 3)
    assert align_ground_truth(3.1, 5.9, 1.5) == (2, 3)
    assert align_ground_truth(0.0, 1.0, 1.5) == (0, 0)
    assert align_ground_truth(3.0, 60.0, 1.5, n_clips=5) == (2, 4)
    with pytest.raises(ValueError):
        align_ground_truth(2.0, 1.0, 1.5)
    with pytest.raises(ValueError):
        align_ground_truth(9.0, 10.0, 1.5, n_clips=5)


def test_loss_examples(f64):
    zeros = T.tensor(np.zeros((1, 4)))
    loss, lb, le = shared_softmax_loss(zeros, zeros, (1, 2))
    assert lb == pytest.approx(math.log(4)) and loss.item() == pytest.approx(2 * math.log(4))
    two = T.tensor(np.zeros((2, 4)))
    _, lb, _ = shared_softmax_loss(two, two, (0, 3))
    assert lb == pytest.approx(math.log(8))
    assert video_ce_loss(T.tensor(np.zeros(4))).item() == pytest.approx(math.log(4))
    assert video_ce_loss(T.tensor(np.array([60.0, 0.0, 0.0]))).item() < 1e-20
    with pytest.raises(ValueError):
        video_ce_loss(T.tensor(np.zeros(1)))


def test_loss_matches_brute_softmax(rng, f64):
    for _ in range(200):
        n = int(rng.integers(1, 10))
        b, e = rng.normal(size=(3, n)) * 2, rng.normal(size=(3, n)) * 2
        gb, ge = sorted(rng.integers(0, n, size=2))
        _, lb, le = shared_softmax_loss(T.tensor(b), T.tensor(e), (gb, ge))
        assert abs(lb - (-b[0, gb] + np.log(np.exp(b).sum()))) < 1e-9
        assert abs(le - (-e[0, ge] + np.log(np.exp(e).sum()))) < 1e-9
        r = rng.normal(size=4)
        assert abs(video_ce_loss(T.tensor(r)).item() - (-r[0] + np.log(np.exp(r).sum()))) < 1e-9


def test_masked_gt_rejected(f64):
    mask = np.array([[True, True, False]])
    s = T.tensor(np.array([[0.0, 0.0, -1e9]]))
    with pytest.raises(ValueError):
        shared_softmax_loss(s, s, (0, 2), mask)


def test_shared_normalization_couples_videos(rng, f64):
    for _ in range(10):
        b = T.tensor(rng.normal(size=(3, 5)), requires_grad=True)
        e = T.tensor(rng.normal(size=(3, 5)), requires_grad=True)
        loss, _, _ = shared_softmax_loss(b, e, (1, 3))
        loss.backward()
        assert np.abs(b.grad[1:]).sum() > 0 and np.abs(e.grad[1:]).sum() > 0
        # the concatenated distribution sums to one
        assert abs(np.exp(T.log_softmax(T.reshape(b, (15,))).data).sum() - 1) < 1e-6


def ranked(n=20):
    return RankList("q", [(f"v{i}", 1.0 - i * 0.01) for i in range(1, n + 1)])


def test_sample_negatives_examples(rng):
    with pytest.raises(TrainingError):
        sample_negatives(ranked(), "v1", 0, 1, rng)
    rl = ranked()
    for _ in range(200):
        negs = sample_negatives(rl, "v5", 10, 3, rng)
        assert len(set(negs)) == 3 and "v5" not in negs
        assert all(rl.rank_of(v) <= 15 for v in negs)
    assert sample_negatives(rl, "v5", 10, 0, rng) == []
    with pytest.raises(TrainingError):
        sample_negatives(rl, "missing", 10, 3, rng)


def test_sample_negatives_uniform(rng):
    rl = ranked()
    draws = 10_000
    counts = {}
    for _ in range(draws):
        (v,) = sample_negatives(rl, "v3", 7, 1, rng)
        counts[v] = counts.get(v, 0) + 1
    eligible = [f"v{i}" for i in range(1, 11) if i != 3]
    assert sorted(counts) == sorted(eligible)
    p = 1 / len(eligible)
    sigma = math.sqrt(draws * p * (1 - p))
    for v in eligible:
        assert abs(counts[v] - draws * p) <= 3 * sigma


def test_filter_trainable():
    qs = [QueryRecord(f"q{i}", np.zeros((1, 2)), f"v{r}", 0.0, 1.5) for i, r in enumerate((1, 100, 101, 0))]
    lists = {q.query_id: RankList(q.query_id, [(f"v{j}", -j) for j in range(1, 151)]) for q in qs}
    kept = filter_trainable(qs, lists, 100)
    assert [q.query_id for q in kept] == ["q0", "q1"]


def test_early_stopping_examples():
    s = EarlyStopping(3)
    stops = [s.update(v) for v in [10, 9, 8, 7]]
    assert stops == [False, False, False, True] and s.best_epoch == 1
    s = EarlyStopping(3)
    stops = [s.update(v) for v in [10, 9, 11, 8, 7, 6]]
    assert stops == [False] * 5 + [True] and s.best_epoch == 3


def small_run(tmp_path=None, **overrides):
    cfg = RunConfig()
    base = dict(synth_n_videos="10", synth_queries_per_video="3", synth_min_clips="8", synth_max_clips="10",
                synth_visual_dim="12", synth_text_dim="10", synth_concept_dim="6", visual_dim="12", text_dim="10",
                hidden="8", n_heads="2", ff_mult="2", n_clusters="4", max_clips="10", max_tokens="8",
                lr="3e-3", weight_decay="0.0", max_epochs="5", patience="5", depth_extension_x="5")
    base.update(overrides)
    for k, v in base.items():
        cfg.set(k, v)
    cfg.validate()
    corpus, queries, ranks = generate_synthetic(cfg.synth)
    rl = {r.query_id: r for r in ranks}
    model = Conquer(cfg.model)
    res = train(model, corpus, split_queries(queries, "train"), split_queries(queries, "val"), rl, cfg, tmp_path)
    return res, cfg


def test_training_loss_decreases(tmp_path):
    res, _ = small_run(tmp_path)
    losses = [h.loss for h in res.history]
    assert len(losses) == 5
    assert all(b < a for a, b in zip(losses, losses[1:]))
    lines = (tmp_path / "metrics.tsv").read_text().splitlines()
    assert lines[0] == "epoch\tloss\tR1@0.5\tR1@0.7\tsum" and len(lines) == 6
    model, cfg = load_checkpoint(tmp_path / "best.ckpt")
    assert cfg.model.hidden == 8
    best = res.model.state_dict()
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, best[k])


def test_training_with_video_head_runs():
    res, _ = small_run(vs_head="on", scoring="exclusive", max_epochs="2")
    assert len(res.history) == 2 and all(np.isfinite(h.loss) for h in res.history)


def test_training_errors():
    with pytest.raises(TrainingError):
        small_run(scoring="exclusive", vs_head="off")
    with pytest.raises(TrainingError):
        small_run(exclusion_depth="0")
