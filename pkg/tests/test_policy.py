import math

import pytest
import torch

from app.models.schemas import AdapterConfig, GenerationConfig, PolicyArchitecture, PretrainConfig, PromptMode
from app.services.policy import (
    BOS_ID,
    EOS_ID,
    UNK,
    UNK_ID,
    PolicyCheckpoint,
    PolicyModel,
    Vocabulary,
    decode_response,
    encode_prompt,
    generate_rewrite,
    logits,
    mle_loss,
    nucleus_probs,
    pretrain_mle,
    render_prompt,
    response_logprobs_and_values,
    sample_next_token,
    sample_response,
    sequence_logprob,
)
from app.utils.errors import PolicyError
from tests.conftest import FIXTURES

ARGUMENT = "Only an idiot would believe this nonsense about school uniforms ."
SHOTS = [
    ("This policy is garbage and everyone knows it .", "This policy is flawed and many people see it ."),
    ("Stop whining , the data is clear .", "Please reconsider , the data is clear ."),
]


@pytest.mark.parametrize(
    "mode, shots, fixture",
    [
        (PromptMode.ZERO_SHOT, None, "prompt_zero_shot.txt"),
        (PromptMode.FEW_SHOT, SHOTS, "prompt_few_shot.txt"),
        (PromptMode.INSTRUCTION, None, "prompt_instruction.txt"),
    ],
)
def test_prompts_match_fixtures(mode, shots, fixture):
    expected = (FIXTURES / fixture).read_bytes().decode("utf-8")
    assert render_prompt(ARGUMENT, mode, shots) == expected


def test_few_shot_needs_exemplars():
    with pytest.raises(PolicyError):
        render_prompt(ARGUMENT, PromptMode.FEW_SHOT)


def test_vocabulary_reserves_control_tokens(vocabulary, tmp_path):
    assert vocabulary.encode(["never-seen-before"]) == [UNK_ID]
    assert vocabulary.tokens[UNK_ID] == UNK
    assert "###" in vocabulary
    path = tmp_path / "vocab.txt"
    vocabulary.save(path)
    assert Vocabulary.load(path).tokens == vocabulary.tokens
    with pytest.raises(PolicyError):
        Vocabulary(["a", "b"])


def test_vocabulary_truncates_rare_words():
    vocabulary = Vocabulary.build(["a a a b b c"], max_size=6)
    assert vocabulary.tokens[4:] == ["a", "b"]


def test_encoded_prompt_starts_with_bos(vocabulary):
    ids = encode_prompt(vocabulary, "the plan .", PromptMode.ZERO_SHOT)
    assert ids[0] == BOS_ID
    assert vocabulary.decode(ids[1:]) == render_prompt("the plan .", PromptMode.ZERO_SHOT).split()


def test_nucleus_keeps_smallest_head():
    probs = nucleus_probs(torch.log(torch.tensor([0.5, 0.3, 0.2], dtype=torch.float64)), 0.6, 1.0)
    assert probs.tolist() == pytest.approx([0.625, 0.375, 0.0], abs=1e-12)


def test_nucleus_keeps_ties_at_the_cutoff():
    probs = nucleus_probs(torch.log(torch.tensor([0.4, 0.3, 0.3], dtype=torch.float64)), 0.5, 1.0)
    assert probs.tolist() == pytest.approx([0.4, 0.3, 0.3], abs=1e-12)


def test_nucleus_with_full_mass_is_plain_softmax():
    step_logits = torch.tensor([1.0, -2.0, 0.5, 3.0], dtype=torch.float64)
    assert torch.allclose(nucleus_probs(step_logits, 1.0, 2.0), torch.softmax(step_logits / 2.0, dim=-1))


def test_sampled_tokens_follow_the_nucleus_distribution():
    step_logits = torch.tensor([2.0, 1.5, 1.0, 0.2, -1.0, -3.0], dtype=torch.float64)
    config = GenerationConfig(top_p=0.9, temperature=0.8)
    expected = nucleus_probs(step_logits, config.top_p, config.temperature)
    generator = torch.Generator().manual_seed(0)
    draws = 100_000
    counts = torch.zeros_like(expected)
    for _ in range(draws):
        counts[sample_next_token(step_logits, config, generator)] += 1
    for count, p in zip(counts.tolist(), expected.tolist()):
        if p == 0.0:
            assert count == 0
        else:
            assert abs(count - draws * p) <= 3 * math.sqrt(draws * p * (1 - p))


def test_a_vanishing_nucleus_decodes_greedily(tiny_model, vocabulary):
    prompt = encode_prompt(vocabulary, "the plan .", PromptMode.ZERO_SHOT)
    config = GenerationConfig(top_p=1e-9, max_new_tokens=10, seed=5)
    greedy = []
    while len(greedy) < config.max_new_tokens:
        token = int(torch.argmax(logits(tiny_model, prompt + greedy)))
        greedy.append(token)
        if token == EOS_ID:
            break
    assert sample_response(tiny_model, prompt, config) == greedy


def test_a_uniform_policy_scores_every_token_at_log_one_quarter():
    torch.manual_seed(0)
    model = PolicyModel(PolicyArchitecture(vocab_size=4, d_model=8, n_layer=1, n_head=2, context=16))
    with torch.no_grad():
        model.backbone.get_output_embeddings().weight.zero_()
    token_log_probs = sequence_logprob(model, [BOS_ID, 3], [3, 2, EOS_ID])
    assert torch.allclose(token_log_probs, torch.full((3,), math.log(0.25), dtype=torch.float64), atol=1e-12)


def test_sampling_is_reproducible(tiny_model, vocabulary):
    prompt = encode_prompt(vocabulary, "the plan .", PromptMode.ZERO_SHOT)
    config = GenerationConfig(max_new_tokens=12, seed=4)
    first = sample_response(tiny_model, prompt, config)
    assert first == sample_response(tiny_model, prompt, config)
    assert 1 <= len(first) <= 12
    assert EOS_ID not in first[:-1]


def test_sampling_respects_the_context_limit(vocabulary):
    torch.manual_seed(0)
    model = PolicyModel(PolicyArchitecture(vocab_size=len(vocabulary), d_model=8, n_layer=1, n_head=2, context=30))
    prompt = encode_prompt(vocabulary, "the plan .", PromptMode.ZERO_SHOT)
    assert len(prompt) < 30
    response = sample_response(model, prompt, GenerationConfig(max_new_tokens=64, seed=1))
    assert len(prompt) + len(response) <= 30
    with pytest.raises(PolicyError):
        sample_response(model, prompt * 2, GenerationConfig())


def test_generate_rewrite_drops_control_tokens(tiny_model, vocabulary):
    text = generate_rewrite(tiny_model, vocabulary, "the plan .", GenerationConfig(max_new_tokens=8), PromptMode.ZERO_SHOT)
    assert "<eos>" not in text.split()
    assert decode_response(vocabulary, [BOS_ID, 5, EOS_ID]) == [vocabulary.tokens[5]]


def test_token_logprobs_agree_with_next_token_logits(tiny_model, vocabulary):
    prompt = encode_prompt(vocabulary, "the plan .", PromptMode.ZERO_SHOT)
    response = [5, 9, 7, EOS_ID]
    token_log_probs = sequence_logprob(tiny_model, prompt, response)
    for t, token in enumerate(response):
        expected = torch.log_softmax(logits(tiny_model, prompt + response[:t]), dim=-1)[token]
        assert float(token_log_probs[t]) == pytest.approx(float(expected), abs=1e-9)
    _, values = response_logprobs_and_values(tiny_model, prompt, response)
    assert values.shape == (len(response),)


def test_logits_reject_bad_ids(tiny_model):
    with pytest.raises(PolicyError):
        logits(tiny_model, [])
    with pytest.raises(PolicyError):
        logits(tiny_model, [tiny_model.vocab_size])


def test_adapters_start_as_identity_and_freeze_the_base(tiny_model, vocabulary):
    prompt = encode_prompt(vocabulary, "the plan .", PromptMode.ZERO_SHOT)
    before = logits(tiny_model, prompt)
    tiny_model.add_adapters(AdapterConfig(rank=2, scale=4.0, dropout=0.0))
    assert torch.allclose(before, logits(tiny_model, prompt), atol=1e-12)
    trainable = {name for name, p in tiny_model.named_parameters() if p.requires_grad}
    assert any("lora" in name for name in trainable)
    assert all("lora" in name or name.startswith("value_head") for name in trainable)
    with pytest.raises(PolicyError):
        tiny_model.add_adapters(AdapterConfig())


def test_zero_initialized_adapters_leave_samples_and_scores_unchanged(tiny_model, vocabulary):
    prompt = encode_prompt(vocabulary, "buses run late .", PromptMode.ZERO_SHOT)
    config = GenerationConfig(max_new_tokens=12, seed=2)
    response = sample_response(tiny_model, prompt, config)
    with torch.no_grad():
        before = response_logprobs_and_values(tiny_model, prompt, response)
    tiny_model.add_adapters(AdapterConfig(rank=2, scale=8.0, dropout=0.1))
    assert sample_response(tiny_model, prompt, config) == response
    with torch.no_grad():
        after = response_logprobs_and_values(tiny_model, prompt, response)
    for old, new in zip(before, after):
        assert torch.allclose(old, new, atol=1e-12)


def test_checkpoint_restores_the_model(tiny_model, vocabulary, tmp_path):
    tiny_model.add_adapters(AdapterConfig(rank=2))
    checkpoint = PolicyCheckpoint.from_model(tiny_model, vocabulary, step=3, config_hash="abc")
    checkpoint.save(tmp_path / "policy.pt")
    restored = PolicyCheckpoint.load(tmp_path / "policy.pt")
    assert restored.step == 3
    assert restored.adapters == checkpoint.adapters
    prompt = encode_prompt(vocabulary, "the plan .", PromptMode.ZERO_SHOT)
    assert torch.equal(logits(restored.to_model(), prompt), logits(tiny_model, prompt))


def test_mle_loss_masks_prompts_and_padding(tiny_model, vocabulary):
    first = (encode_prompt(vocabulary, "the plan .", PromptMode.ZERO_SHOT), [5, 6, EOS_ID])
    second = (encode_prompt(vocabulary, "buses run late .", PromptMode.ZERO_SHOT), [7, EOS_ID])
    with torch.no_grad():
        single = [float(mle_loss(tiny_model, [pair])) for pair in (first, second)]
        joint = float(mle_loss(tiny_model, [first, second]))
    assert single[0] == pytest.approx(-float(sequence_logprob(tiny_model, *first).mean()), abs=1e-9)
    assert joint == pytest.approx((3 * single[0] + 2 * single[1]) / 5, abs=1e-9)


def test_mle_gradients_match_finite_differences(tiny_model, vocabulary):
    pairs = [
        (encode_prompt(vocabulary, "the plan .", PromptMode.ZERO_SHOT), [5, 6, EOS_ID]),
        (encode_prompt(vocabulary, "buses run late .", PromptMode.ZERO_SHOT), [7, EOS_ID]),
    ]
    tiny_model.eval()
    name, parameter = next((n, p) for n, p in tiny_model.named_parameters() if n.endswith("attn.c_attn.weight"))
    tiny_model.zero_grad()
    mle_loss(tiny_model, pairs).backward()
    analytic = parameter.grad.detach().clone()
    h = 1e-6
    for index in [(0, 0), (3, 5), (7, 20)]:
        with torch.no_grad():
            original = parameter[index].item()
            parameter[index] = original + h
            upper = float(mle_loss(tiny_model, pairs))
            parameter[index] = original - h
            lower = float(mle_loss(tiny_model, pairs))
            parameter[index] = original
        assert analytic[index].item() == pytest.approx((upper - lower) / (2 * h), rel=1e-5, abs=1e-8), (name, index)


def test_pretraining_lowers_the_loss(tiny_model, vocabulary):
    pairs = [
        (encode_prompt(vocabulary, text, PromptMode.ZERO_SHOT), vocabulary.encode(text.split()) + [EOS_ID])
        for text in ("the plan .", "buses run late .")
    ]
    with torch.no_grad():
        initial = float(mle_loss(tiny_model, pairs))
    config = PretrainConfig(steps=60, batch_size=2, learning_rate=1e-2, holdout_fraction=0.0, eval_every=20)
    checkpoint = pretrain_mle(tiny_model, pairs, config, vocabulary)
    assert checkpoint.step > 0
    assert checkpoint.scores["heldout_loss"] < initial
    assert math.isfinite(checkpoint.scores["heldout_loss"])


def test_zero_step_pretraining_returns_the_initial_policy(tiny_model, vocabulary):
    pairs = [
        (encode_prompt(vocabulary, text, PromptMode.ZERO_SHOT), vocabulary.encode(text.split()) + [EOS_ID])
        for text in ("the plan .", "buses run late .", "school uniforms reduce pressure .")
    ]
    with torch.no_grad():
        initial = float(mle_loss(tiny_model, pairs))
    checkpoint = pretrain_mle(tiny_model, pairs, PretrainConfig(steps=0, batch_size=2, holdout_fraction=0.0), vocabulary)
    assert checkpoint.step == 0
    assert checkpoint.scores["heldout_loss"] == pytest.approx(initial, abs=1e-12)
    for name, tensor in tiny_model.state_dict().items():
        assert torch.equal(checkpoint.state_dict[name], tensor), name


def test_pretraining_needs_data(tiny_model, vocabulary):
    with pytest.raises(PolicyError):
        pretrain_mle(tiny_model, [], PretrainConfig(), vocabulary)
