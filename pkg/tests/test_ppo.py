import numpy as np
import pandas as pd
import pytest
import torch

from app.models.schemas import (
    AdapterConfig,
    AppLabel,
    EvaluationRow,
    GenerationConfig,
    PolicyArchitecture,
    PPOConfig,
    PromptMode,
    RewardConfig,
    Trajectory,
)
from app.services import ppo
from app.services.policy import PolicyCheckpoint, PolicyModel, sequence_logprob
from app.utils.errors import PPOError, RolloutError
from tests.conftest import make_record


def fd_model() -> PolicyModel:
    torch.manual_seed(1)
    return PolicyModel(PolicyArchitecture(vocab_size=10, d_model=4, n_layer=1, n_head=2, context=16))


def manual_trajectories(model: PolicyModel, seed: int = 0, count: int = 3):
    rng = np.random.default_rng(seed)
    trajectories = []
    for index in range(count):
        prompt = [0] + rng.integers(4, 10, size=3).tolist()
        response = rng.integers(4, 10, size=int(rng.integers(2, 5))).tolist()
        logprobs = sequence_logprob(model, prompt, response).numpy()
        n = len(response)
        trajectories.append(
            Trajectory(
                record_id=f"t{index}",
                prompt_ids=prompt,
                response_ids=response,
                argument=["a"],
                rewrite=["b"],
                logprobs=logprobs,
                ref_logprobs=logprobs,
                values=np.zeros(n),
                rewards=rng.normal(size=n),
                advantages=rng.normal(size=n),
                returns=rng.normal(size=n),
                score=0.5,
            )
        )
    return trajectories


def test_cosine_schedule_endpoints():
    config = PPOConfig(total_steps=2000)
    assert ppo.cosine_lr(0, config) == pytest.approx(5e-6)
    assert ppo.cosine_lr(1000, config) == pytest.approx(3.25e-6)
    assert ppo.cosine_lr(2000, config) == pytest.approx(1.5e-6)
    with pytest.raises(PPOError):
        ppo.cosine_lr(2001, config)


def brute_force_gae(rewards, values, gamma, lam):
    n = len(rewards)
    padded = list(values) + [0.0]
    deltas = [rewards[t] + gamma * padded[t + 1] - padded[t] for t in range(n)]
    return np.array([sum((gamma * lam) ** l * deltas[t + l] for l in range(n - t)) for t in range(n)])


@pytest.mark.parametrize("length", range(1, 9))
def test_gae_matches_the_double_sum(length):
    rng = np.random.default_rng(length)
    for gamma, lam in ((1.0, 0.95), (0.9, 0.5), (0.99, 1.0)):
        rewards, values = rng.normal(size=length), rng.normal(size=length)
        t = Trajectory("r", [0], list(range(length)), [], [], np.zeros(length), np.zeros(length), values, rewards=rewards)
        result = ppo.compute_gae(t, gamma, lam)
        assert np.allclose(result.advantages, brute_force_gae(rewards, values, gamma, lam), atol=1e-12)
        assert np.allclose(result.returns, result.advantages + values, atol=1e-12)


def test_gae_needs_rewards():
    t = Trajectory("r", [0], [5], [], [], np.zeros(1), np.zeros(1), np.zeros(1))
    with pytest.raises(PPOError):
        ppo.compute_gae(t, 1.0, 0.95)


def test_clipped_surrogate():
    ratio = torch.tensor([1.5, 0.5, 0.5, 1.1])
    advantages = torch.tensor([1.0, 1.0, -1.0, 2.0])
    assert ppo.clipped_surrogate(ratio, advantages, 0.2).tolist() == pytest.approx([1.2, 0.5, -0.8, 2.2])


def test_batch_advantages_are_normalized():
    model = fd_model()
    advantages = ppo.batch_advantages(manual_trajectories(model), normalize=True)
    flat = np.concatenate(advantages)
    assert flat.mean() == pytest.approx(0.0, abs=1e-12)
    assert flat.std() == pytest.approx(1.0, abs=1e-6)


def central_difference(loss_fn, parameter, index, h=1e-6):
    with torch.no_grad():
        original = parameter.data[index].item()
        parameter.data[index] = original + h
        upper = float(loss_fn())
        parameter.data[index] = original - h
        lower = float(loss_fn())
        parameter.data[index] = original
    return (upper - lower) / (2 * h)


def test_loss_gradients_match_finite_differences():
    model = fd_model()
    model.eval()
    assert sum(p.numel() for p in model.parameters()) <= 1000
    trajectories = manual_trajectories(model)
    advantages = [t.advantages for t in trajectories]

    def loss_fn():
        return ppo.ppo_loss(model, trajectories, advantages, 0.2, 0.5)[0]

    model.zero_grad()
    loss_fn().backward()
    params = dict(model.named_parameters())
    for name, index in (
        ("value_head.weight", (0, 1)),
        ("value_head.bias", (0,)),
        ("backbone.transformer.wte.weight", (5, 2)),
        ("backbone.transformer.h.0.attn.c_attn.weight", (1, 3)),
        ("backbone.transformer.h.0.mlp.c_fc.weight", (2, 7)),
    ):
        analytic = params[name].grad[index].item()
        numeric = central_difference(loss_fn, params[name], index)
        assert abs(analytic - numeric) <= 1e-4 * max(1.0, abs(numeric)), name


def test_unclipped_objective_is_the_policy_gradient():
    model = fd_model()
    model.eval()
    trajectories = manual_trajectories(model, seed=2)
    advantages = [t.advantages for t in trajectories]
    model.zero_grad()
    ppo.ppo_loss(model, trajectories, advantages, 1e6, 0.0)[0].backward()
    clipped = {name: p.grad.clone() for name, p in model.named_parameters()}

    model.zero_grad()
    tokens = sum(t.length for t in trajectories)
    surrogate = sum(
        -(ppo.response_logprobs_and_values(model, t.prompt_ids, t.response_ids)[0] * torch.as_tensor(a)).sum()
        for t, a in zip(trajectories, advantages)
    )
    (surrogate / tokens).backward()
    for name, p in model.named_parameters():
        if p.grad is not None:
            assert torch.allclose(clipped[name], p.grad, atol=1e-12), name


def test_zero_advantages_leave_the_policy_unchanged():
    model = fd_model()
    trajectories = [t.with_(advantages=np.zeros(t.length)) for t in manual_trajectories(model)]
    before = {name: p.detach().clone() for name, p in model.backbone.named_parameters()}
    optimizer = torch.optim.Adam(model.trainable_parameters(), lr=1e-2)
    config = PPOConfig(epochs=2, value_coef=0.0, normalize_advantages=False, total_steps=1)
    stats = ppo.ppo_update(model, optimizer, trajectories, config, lr=1e-2, step=1)
    for name, p in model.backbone.named_parameters():
        assert torch.equal(before[name], p.detach()), name
    assert stats.clip_fraction == 0.0


def test_non_finite_loss_aborts_with_diagnostics():
    model = fd_model()
    trajectories = [t.with_(returns=np.full(t.length, np.inf)) for t in manual_trajectories(model)]
    optimizer = torch.optim.Adam(model.trainable_parameters())
    with pytest.raises(PPOError) as excinfo:
        ppo.ppo_update(model, optimizer, trajectories, PPOConfig(total_steps=1), lr=1e-3, step=7)
    assert excinfo.value.diagnostics["step"] == 7
    assert excinfo.value.diagnostics["record_ids"] == ["t0", "t1", "t2"]


def test_updates_run_with_adapter_dropout_active(monkeypatch):
    model = fd_model().add_adapters(AdapterConfig(rank=2, dropout=0.1))
    model.eval()
    trajectories = manual_trajectories(model)
    seen = []
    original = ppo.ppo_loss

    def recording(m, *args):
        dropouts = [d for d in m.modules() if isinstance(d, torch.nn.Dropout)]
        seen.append((m.training, all(d.training for d in dropouts), any(d.p > 0 for d in dropouts)))
        return original(m, *args)

    monkeypatch.setattr(ppo, "ppo_loss", recording)
    optimizer = torch.optim.Adam(model.trainable_parameters(), lr=1e-3)
    ppo.ppo_update(model, optimizer, trajectories, PPOConfig(epochs=2, total_steps=1), lr=1e-3)
    assert seen == [(True, True, True), (True, True, True)]
    assert not model.training


@pytest.fixture
def inappropriate_records():
    texts = ["the stupid plan wastes money .", "this garbage proposal helps nobody .", "buses run late because idiotic ."]
    return [make_record(i, t, app_score=0.1, app_label=AppLabel.INAPPROPRIATE) for i, t in enumerate(texts)]


def test_rollouts_are_seeded_and_rewarded(tiny_model, vocabulary, classifier, inappropriate_records):
    config = RewardConfig(alpha_sim=0.5, beta=0.1)
    generation = GenerationConfig(max_new_tokens=6, seed=3)
    reference = tiny_model.snapshot()

    def collect():
        return ppo.collect_rollouts(
            tiny_model, reference, inappropriate_records, config, generation, vocabulary, PromptMode.ZERO_SHOT,
            step=2, app_scorer=classifier,
        )

    first, second = collect(), collect()
    assert [t.response_ids for t in first] == [t.response_ids for t in second]
    for t, record in zip(first, inappropriate_records):
        assert t.record_id == record.id
        assert t.rewards.shape == (t.length,)
        # the reference equals the policy, so only the property reward remains
        assert t.rewards.sum() == pytest.approx(t.score, abs=1e-9)
        assert 0.0 <= t.score <= 1.0


def test_rollout_failures_name_the_record(monkeypatch, tiny_model, vocabulary, classifier, inappropriate_records):
    def broken(*args, **kwargs):
        raise RuntimeError("boom")

    monkeypatch.setattr(ppo, "sample_response", broken)
    with pytest.raises(RolloutError) as excinfo:
        ppo.collect_rollouts(
            tiny_model, tiny_model.snapshot(), inappropriate_records[:1], RewardConfig(), GenerationConfig(), vocabulary,
            PromptMode.ZERO_SHOT, app_scorer=classifier,
        )
    assert excinfo.value.record_id == "arg-000"


def scripted_evaluator(gms):
    calls = iter(gms)

    def evaluate(model, batch):
        return EvaluationRow(system="PPO_app", app=0.5, sim=0.5, nes=0.5, ppl=10.0, gm=next(calls), n=len(batch))

    return evaluate


def trainer(evaluator, classifier, **ppo_fields):
    config = PPOConfig(lr_start=1e-3, lr_end=1e-4, batch_size=2, epochs=1, **ppo_fields)
    return ppo.PPOTrainer(
        RewardConfig.for_app_weight(1.0),
        config,
        GenerationConfig(max_new_tokens=5),
        evaluator,
        PromptMode.ZERO_SHOT,
        app_scorer=classifier,
    )


def test_training_keeps_the_best_validation_checkpoint(tiny_model, vocabulary, classifier, inappropriate_records):
    initial = PolicyCheckpoint.from_model(tiny_model, vocabulary)
    best, log = trainer(scripted_evaluator([0.1, 0.5, None]), classifier, total_steps=2, checkpoint_every=1).train(
        initial, inappropriate_records, inappropriate_records[:1]
    )
    assert best.step == 1
    assert best.adapters is not None
    assert set(ppo.LOG_COLUMNS) <= set(log.steps.columns)
    assert len(log.steps) == 2
    assert log.evaluations["step"].tolist() == [0, 1, 2]


def test_zero_steps_return_the_initial_policy(tiny_model, vocabulary, classifier, inappropriate_records):
    initial = PolicyCheckpoint.from_model(tiny_model, vocabulary)
    best, log = trainer(scripted_evaluator([0.3]), classifier, total_steps=0).train(
        initial, inappropriate_records, inappropriate_records
    )
    assert best is initial
    assert log.steps.empty


def test_training_needs_validation_and_inappropriate_arguments(tiny_model, vocabulary, classifier, records):
    initial = PolicyCheckpoint.from_model(tiny_model, vocabulary)
    with pytest.raises(PPOError):
        trainer(scripted_evaluator([0.3]), classifier, total_steps=1).train(initial, records, [])
    with pytest.raises(PPOError):
        trainer(scripted_evaluator([0.3]), classifier, total_steps=1).train(initial, records, records[:1])


def test_training_log_is_written(tmp_path):
    log = ppo.TrainingLog(pd.DataFrame([{c: 1.0 for c in ppo.LOG_COLUMNS}]), pd.DataFrame([{"step": 0, "gm": 0.2}]))
    steps_path, evaluations_path = log.save(tmp_path)
    assert steps_path.read_text().splitlines()[0] == ",".join(ppo.LOG_COLUMNS)
    assert evaluations_path.exists()
