import numpy as np
import pytest
import torch

from vlcritic import rl
from vlcritic import taskworld as tw
from vlcritic.rl import RLConfig, TrainingCurve


def tiny_rl(**kw):
    base = dict(total_steps=300, learning_starts=100, batch_size=32, hidden=(16, 16),
                eval_every=150, eval_episodes=2, seed=3)
    base.update(kw)
    return RLConfig(**base)


@pytest.mark.parametrize("kw", [{"gamma": 0.0}, {"gamma": 1.0}, {"eval_episodes": 0},
                                {"reward_source": "dense"}, {"total_steps": 0}])
def test_config_errors(kw):
    with pytest.raises(ValueError):
        RLConfig(**kw)


def test_steps_to_threshold_examples():
    curve = TrainingCurve()
    curve.add(1000, 0.2)
    curve.add(2000, 0.95)
    assert rl.steps_to_threshold(curve, 0.9) == 2000
    assert rl.steps_to_threshold(curve, 0.96) is None
    assert rl.steps_to_threshold(curve, 0.2) == 1000
    for bad in (0.0, 1.5):
        with pytest.raises(ValueError):
            rl.steps_to_threshold(curve, bad)


def test_curve_invariants_and_round_trip(tmp_path):
    curve = TrainingCurve()
    for k in range(1, 13):
        curve.add(1000 * k, 1.0 if k >= 3 else 0.0)
    assert curve.converged_at == 12000
    with pytest.raises(ValueError):
        curve.add(12000, 0.5)
    with pytest.raises(ValueError):
        curve.add(13000, 1.5)
    back = TrainingCurve.read_jsonl(curve.write_jsonl(tmp_path / "c.jsonl"))
    assert back.points == curve.points
    short = TrainingCurve()
    short.add(1, 1.0)
    assert short.converged_at is None


def test_evaluate_policy_expert_and_random():
    push = tw.task_by_id("push-yellow-square-right")
    assert rl.evaluate_policy(tw.ExpertPolicy(), push, 50) >= 0.95

    class Uniform:
        def __init__(self):
            self.rng = None

        def reset(self, seed):
            self.rng = np.random.default_rng(seed)

        def __call__(self, state, task):
            return self.rng.uniform(-1, 1, 2)

    assert rl.evaluate_policy(Uniform(), push, 100) <= 0.1
    assert rl.evaluate_policy(tw.ExpertPolicy(), push, 1) in (0.0, 1.0)
    with pytest.raises(ValueError):
        rl.evaluate_policy(tw.ExpertPolicy(), push, 0)


def test_eval_and_train_seeds_do_not_overlap():
    assert rl.eval_seed(0, 0) > rl.TRAIN_SEED_BASE + 10 * 1_000_000
    assert rl.eval_seed(1, 0) != rl.eval_seed(0, 0)


def test_adapter_requirement():
    task = tw.task_by_id("reach-red-circle")
    with pytest.raises(ValueError, match="requires a reward adapter"):
        rl.sac_train(task, tiny_rl(reward_source="vlc_plus_sparse"))
    with pytest.raises(ValueError):
        rl.sac_train(task, tiny_rl(), reward_adapter=rl.RewardAdapter(None))


def test_sac_is_deterministic():
    task = tw.task_by_id("reach-green-square")
    p1, c1 = rl.sac_train(task, tiny_rl())
    p2, c2 = rl.sac_train(task, tiny_rl())
    assert c1.points == c2.points and len(c1.points) == 2
    for a, b in zip(p1.actor.parameters(), p2.actor.parameters()):
        assert torch.equal(a, b)


def test_replay_holds_only_state_vectors_and_configured_rewards(monkeypatch):
    seen = []

    class Spy(rl.ReplayBuffer):
        def add(self, o, a, r, o2, terminal):
            seen.append((np.asarray(o).shape, r, terminal))
            super().add(o, a, r, o2, terminal)

    monkeypatch.setattr(rl, "ReplayBuffer", Spy)
    task = tw.task_by_id("reach-red-square")
    rl.sac_train(task, tiny_rl(normalize_sparse=False, total_steps=200, eval_every=200))
    assert len(seen) == 200
    assert all(shape == (rl.OBS_DIM,) for shape, _, _ in seen)
    assert all(r in (0.0, 1.0) and r == term for _, r, term in seen)


def test_vlc_training_leaves_normalizer_untouched_by_evaluation(tiny_model):
    task = tw.task_by_id("reach-blue-circle")
    cfg = tiny_rl(reward_source="vlc_plus_sparse", total_steps=150, eval_every=50,
                  learning_starts=100)
    adapter = rl.make_adapter(tiny_model, cfg)
    _, curve = rl.sac_train(task, cfg, adapter)
    assert len(curve.points) == 3
    # one normalizer update per environment step, none from the evaluations
    assert adapter.state.count == pytest.approx(1e-4 + 150)


def test_policy_save_load(tmp_path):
    task = tw.task_by_id("reach-green-square")
    policy, _ = rl.sac_train(task, tiny_rl(total_steps=150, eval_every=150))
    policy.save(tmp_path / "pol")
    back = rl.SACPolicy.load(tmp_path / "pol")
    obs = np.random.default_rng(0).random((5, rl.OBS_DIM)).astype(np.float32)
    assert np.array_equal(back.act_batch(obs), policy.act_batch(obs))
    assert back.meta["task_id"] == task.task_id
    s = tw.reset(task, 0)
    assert back(s, task).shape == (2,)
