import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from vlcritic import critic as cr
from vlcritic.critic import CriticModel, Vocab, tokenize

from conftest import random_video, tiny_config


def test_tokenize_examples(vocab):
    tok = tokenize("push the red square to the left goal", vocab)
    assert tok.length == 8 and vocab.unk_id not in tok.token_ids
    assert vocab.unk_id in tokenize("push the crimson square to the left goal", vocab).token_ids
    for bad in ("", "   ", None):
        with pytest.raises(ValueError):
            tokenize(bad, vocab)


def test_vocab_reserved_ids_and_round_trip(vocab):
    assert (vocab.pad_id, vocab.unk_id, vocab.cls_id) == (0, 1, 2)
    assert Vocab(vocab.to_json()).words == vocab.words


def test_config_validation():
    for kw in ({"aggregator": "max_pool"}, {"embed_dim": 10, "temporal_heads": 4},
               {"max_frames": 0}, {"frame_patch": 7}):
        with pytest.raises(ValueError):
            tiny_config(**kw)


def test_text_encoder_shape_and_determinism(tiny_model):
    a = tiny_model.encode_captions(["reach the red circle", "reach the red circle"])
    assert a.shape == (2, 16)
    assert torch.equal(a[0], a[1])
    b = tiny_model.encode_captions(["reach the blue circle"])
    assert not torch.allclose(a[0], b[0])


def test_frame_encoder_is_per_frame(tiny_model):
    rng = np.random.default_rng(0)
    frames = random_video(rng, 6)
    batch = cr.encode_frames(frames, tiny_model)
    assert batch.shape == (6, 16)
    alone = cr.encode_frames(frames[3:4], tiny_model)
    assert torch.allclose(alone[0], batch[3], atol=1e-6)
    perm = rng.permutation(6)
    assert torch.allclose(cr.encode_frames(frames[perm], tiny_model), batch[perm], atol=1e-6)


@pytest.mark.parametrize("aggregator", ["tight", "sequence_cosine", "mean_pool"])
def test_prefix_shapes_and_k_limits(vocab, aggregator):
    torch.manual_seed(1)
    model = CriticModel(tiny_config(aggregator=aggregator), vocab).eval()
    rng = np.random.default_rng(1)
    cap = "push the red square to the left goal"
    assert len(cr.score_prefixes(random_video(rng, 1), cap, model).scores) == 1
    ps = cr.score_prefixes(random_video(rng, 12), cap, model)
    assert ps.scores.shape == (12,) and np.isfinite(ps.scores).all()
    with pytest.raises(ValueError):
        cr.score_prefixes(random_video(rng, 13), cap, model)
    with pytest.raises(ValueError):
        cr.score_prefixes(np.zeros((0, 64, 64, 3), np.float32), cap, model)


def test_score_is_last_prefix_and_deterministic(tiny_model):
    rng = np.random.default_rng(2)
    v = random_video(rng, 9)
    cap = "reach the green triangle"
    ps = cr.score_prefixes(v, cap, tiny_model)
    assert cr.score(v, cap, tiny_model) == ps.final == ps.scores[-1]
    assert cr.score(v, cap, tiny_model) == cr.score(v, cap, tiny_model)


def test_aggregator_mismatch_is_rejected(tiny_model):
    with pytest.raises(ValueError, match="aggregator"):
        cr.score(np.zeros((2, 64, 64, 3), np.float32), "reach the red circle", tiny_model,
                 aggregator="mean_pool")


@pytest.mark.parametrize("aggregator", ["tight", "sequence_cosine"])
def test_causal_prefix_equivalence_float32(vocab, aggregator):
    torch.manual_seed(3)
    model = CriticModel(tiny_config(aggregator=aggregator), vocab).eval()
    rng = np.random.default_rng(3)
    for K in (1, 5, 12):
        v = random_video(rng, K)
        fast = cr.score_prefixes(v, "push the blue circle to the top goal", model).scores
        slow = cr.score_prefixes_reference(v, "push the blue circle to the top goal", model).scores
        assert np.max(np.abs(fast - slow)) < 1e-5


def test_causal_prefix_equivalence_float64(vocab):
    torch.manual_seed(4)
    model = CriticModel(tiny_config(), vocab).double().eval()
    v = random_video(np.random.default_rng(4), 12).astype(np.float64)
    fast = cr.score_prefixes(torch.from_numpy(v), "reach the yellow square", model).scores
    slow = cr.score_prefixes_reference(torch.from_numpy(v), "reach the yellow square", model).scores
    assert np.max(np.abs(fast - slow)) < 1e-10


def test_padding_does_not_leak_into_valid_prefixes(tiny_model):
    rng = np.random.default_rng(5)
    short, long = random_video(rng, 4), random_video(rng, 10)
    caps = ["reach the red circle"] * 2
    batched = cr.batch_prefix_scores(tiny_model, [short, long], caps)
    alone = cr.score_prefixes(short, caps[0], tiny_model).scores
    assert len(batched[0]) == 4
    assert np.allclose(batched[0], alone, atol=1e-5)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**31))
def test_mean_pool_is_permutation_invariant(K, seed):
    torch.manual_seed(0)
    model = CriticModel(tiny_config(aggregator="mean_pool"),
                        Vocab.build(["reach the red circle"])).eval()
    rng = np.random.default_rng(seed)
    v = random_video(rng, K)
    base = cr.score(v, "reach the red circle", model)
    assert abs(cr.score(v[rng.permutation(K)], "reach the red circle", model) - base) <= 1e-6


def test_all_pair_scores_matches_paired(tiny_model):
    rng = np.random.default_rng(6)
    frames = torch.from_numpy(np.stack([random_video(rng, 5) for _ in range(3)]))
    caps = ["reach the red circle", "push the red square to the left goal"]
    with torch.no_grad():
        full = tiny_model(frames, caps)
        fe = tiny_model.encode_videos(frames)
        te = tiny_model.encode_captions(caps)
        for c in range(2):
            paired = tiny_model.paired_scores(fe, te[c].expand(3, -1))
            assert torch.allclose(full[c], paired, atol=1e-5)
    assert full.shape == (2, 3, 5)


def test_scorer_subsamples_long_videos(tiny_model):
    rng = np.random.default_rng(7)
    frames = (rng.random((30, 64, 64, 3)) * 255).astype(np.uint8)
    scorer = cr.CriticScorer(tiny_model)
    assert len(scorer.prefix_scores(frames, "reach the red circle")) == 12
    sub = scorer.subsample(frames)
    assert np.allclose(scorer.prefix_scores(frames, "reach the red circle"),
                       cr.score_prefixes(sub, "reach the red circle", tiny_model).scores, atol=1e-5)


def test_checkpoint_round_trip(tmp_path, tiny_model):
    cr.save_checkpoint(tmp_path / "ck", tiny_model, {"epoch": 3})
    model, meta = cr.load_checkpoint(tmp_path / "ck")
    assert meta["epoch"] == 3 and meta["kind"] == "critic"
    v = random_video(np.random.default_rng(8), 7)
    cap = "push the green triangle to the right goal"
    assert np.array_equal(cr.score_prefixes(v, cap, model).scores,
                          cr.score_prefixes(v, cap, tiny_model).scores)


def test_checkpoint_errors(tmp_path, tiny_model):
    with pytest.raises(FileNotFoundError):
        cr.load_checkpoint(tmp_path / "missing")
    cr.save_checkpoint(tmp_path / "p", tiny_model, {"kind": "sac_policy"})
    with pytest.raises(ValueError, match="not a critic"):
        cr.load_checkpoint(tmp_path / "p")
