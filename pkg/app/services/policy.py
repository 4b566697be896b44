from __future__ import annotations

import copy
import logging
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from peft import LoraConfig, TaskType, get_peft_model
from tqdm import tqdm
from transformers import GPT2Config, GPT2LMHeadModel

from app.models.schemas import (
    AdapterConfig,
    GenerationConfig,
    PolicyArchitecture,
    PretrainConfig,
    PromptMode,
)
from app.utils.errors import PolicyError
from config.settings import settings

logger = logging.getLogger(__name__)

BOS, EOS, PAD, UNK = "<bos>", "<eos>", "<pad>", "<unk>"
RESERVED_TOKENS = (BOS, EOS, PAD, UNK)
BOS_ID, EOS_ID, PAD_ID, UNK_ID = 0, 1, 2, 3
MAX_VOCAB = 512

ZERO_SHOT_TEMPLATE = (
    "Here is some text: {x} Here is a rewrite of the text that is more appropriate and makes only minimal changes: "
)
INSTRUCTION_TEMPLATE = (
    "Below is an instruction that describes a task, paired with an input that provides further context. "
    "Write a response that appropriately completes the request.\n"
    "\n"
    "### Instruction:\n"
    "Rewrite the following argument to be more appropriate and make only minimal changes to the original argument.\n"
    "\n"
    "### Input:\n"
    "{x}\n"
    "\n"
    "### Response:\n"
)
SHOT_SEPARATOR = "\n\n"


# ---------------------------------------------------------------- vocabulary


class Vocabulary:
    """Whitespace word vocabulary; reserved tokens hold ids 0-3."""

    def __init__(self, tokens: Sequence[str]) -> None:
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise PolicyError(f"vocabulary must start with {RESERVED_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise PolicyError("vocabulary tokens must be unique")
        if len(tokens) > MAX_VOCAB:
            raise PolicyError(f"vocabulary of {len(tokens)} tokens exceeds {MAX_VOCAB}")
        self.tokens = tokens
        self._ids = {token: i for i, token in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int = MAX_VOCAB, always: Iterable[str] = ()) -> "Vocabulary":
        """Reserved tokens, then ``always`` tokens, then the most frequent words."""
        pinned = [t for t in dict.fromkeys(always) if t not in RESERVED_TOKENS]
        counts = Counter(token for text in texts for token in text.split())
        ranked = sorted((t for t in counts if t not in RESERVED_TOKENS and t not in set(pinned)), key=lambda t: (-counts[t], t))
        tokens = list(RESERVED_TOKENS) + pinned + ranked
        if len(tokens) > max_size:
            dropped = len(tokens) - max_size
            logger.warning(f"Vocabulary truncated to {max_size} tokens; {dropped} rare words map to {UNK}")
            tokens = tokens[:max_size]
        return cls(tokens)

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self._ids.get(token, UNK_ID) for token in tokens]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


# ---------------------------------------------------------------- prompts


def render_prompt(
    x: str, mode: PromptMode = PromptMode.INSTRUCTION, shots: Optional[Sequence[Tuple[str, str]]] = None
) -> str:
    mode = PromptMode(mode)
    if mode == PromptMode.INSTRUCTION:
        return INSTRUCTION_TEMPLATE.format(x=x)
    if mode == PromptMode.FEW_SHOT:
        if not shots:
            raise PolicyError("few-shot prompting needs at least one exemplar")
        prefix = "".join(ZERO_SHOT_TEMPLATE.format(x=argument) + rewrite + SHOT_SEPARATOR for argument, rewrite in shots)
        return prefix + ZERO_SHOT_TEMPLATE.format(x=x)
    return ZERO_SHOT_TEMPLATE.format(x=x)


def template_tokens() -> List[str]:
    words = (ZERO_SHOT_TEMPLATE.format(x="") + " " + INSTRUCTION_TEMPLATE.format(x="")).split()
    return list(dict.fromkeys(words))


def encode_prompt(
    vocabulary: Vocabulary,
    x: str,
    mode: PromptMode = PromptMode.INSTRUCTION,
    shots: Optional[Sequence[Tuple[str, str]]] = None,
) -> List[int]:
    return [BOS_ID] + vocabulary.encode(render_prompt(x, mode, shots).split())


# ---------------------------------------------------------------- model


class PolicyModel(nn.Module):
    """GPT-2 style decoder with a scalar value head on the final hidden state."""

    def __init__(self, architecture: PolicyArchitecture) -> None:
        super().__init__()
        self.architecture = architecture
        config = GPT2Config(
            vocab_size=architecture.vocab_size,
            n_positions=architecture.context,
            n_embd=architecture.d_model,
            n_layer=architecture.n_layer,
            n_head=architecture.n_head,
            resid_pdrop=0.0,
            embd_pdrop=0.0,
            attn_pdrop=0.0,
            bos_token_id=BOS_ID,
            eos_token_id=EOS_ID,
            pad_token_id=PAD_ID,
        )
        self.backbone = GPT2LMHeadModel(config)
        self.value_head = nn.Linear(architecture.d_model, 1)
        self.adapter_config: Optional[AdapterConfig] = None
        self.to(self.dtype)

    @property
    def dtype(self) -> torch.dtype:
        return getattr(torch, self.architecture.dtype)

    @property
    def context(self) -> int:
        return self.architecture.context

    @property
    def vocab_size(self) -> int:
        return self.architecture.vocab_size

    def add_adapters(self, adapters: AdapterConfig) -> "PolicyModel":
        """Wrap the attention projections with low-rank adapters; base weights freeze."""
        if self.adapter_config is not None:
            raise PolicyError("adapters are already attached")
        lora = LoraConfig(
            task_type=TaskType.CAUSAL_LM,
            r=adapters.rank,
            lora_alpha=adapters.scale,
            lora_dropout=adapters.dropout,
            target_modules=adapters.target_modules,
            fan_in_fan_out=True,
            bias="none",
        )
        self.backbone = get_peft_model(self.backbone, lora)
        self.adapter_config = adapters
        self.to(self.dtype)
        return self

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def forward(self, input_ids: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        outputs = self.backbone(input_ids=input_ids, output_hidden_states=True, return_dict=True)
        values = self.value_head(outputs.hidden_states[-1]).squeeze(-1)
        return outputs.logits, values

    def snapshot(self) -> "PolicyModel":
        """Frozen evaluation copy for rollout workers."""
        clone = copy.deepcopy(self)
        clone.eval()
        for parameter in clone.parameters():
            parameter.requires_grad_(False)
        return clone


@contextmanager
def evaluation(model: PolicyModel) -> Iterator[PolicyModel]:
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            yield model
    finally:
        model.train(was_training)


def _check_ids(model: PolicyModel, ids: Sequence[int]) -> None:
    if not ids:
        raise PolicyError("token prefix must not be empty")
    if len(ids) > model.context:
        raise PolicyError(f"sequence of {len(ids)} tokens exceeds the context limit {model.context}")
    bad = [i for i in ids if not 0 <= int(i) < model.vocab_size]
    if bad:
        raise PolicyError(f"token ids {bad[:5]} are outside the vocabulary of size {model.vocab_size}")


def logits(model: PolicyModel, prefix: Sequence[int]) -> torch.Tensor:
    """Next-token logits after ``prefix`` (vector of length V)."""
    _check_ids(model, prefix)
    with evaluation(model):
        scores, _ = model(torch.tensor([list(prefix)], dtype=torch.long))
    return scores[0, -1]


def nucleus_probs(step_logits: torch.Tensor, top_p: float, temperature: float) -> torch.Tensor:
    """Temperature-scaled distribution restricted to the smallest head with mass >= top_p.

    Tokens tied with the cutoff probability are all kept.
    """
    probs = torch.softmax(step_logits.to(torch.float64) / temperature, dim=-1)
    sorted_probs, _ = torch.sort(probs, descending=True, stable=True)
    reached = torch.nonzero(torch.cumsum(sorted_probs, dim=0) >= top_p)
    cutoff = sorted_probs[reached[0, 0]] if len(reached) else sorted_probs[-1]
    kept = torch.where(probs >= cutoff, probs, torch.zeros_like(probs))
    return kept / kept.sum()


def sample_next_token(step_logits: torch.Tensor, config: GenerationConfig, generator: torch.Generator) -> int:
    probs = nucleus_probs(step_logits, config.top_p, config.temperature)
    return int(torch.multinomial(probs, 1, generator=generator).item())


def sample_response(model: PolicyModel, prompt: Sequence[int], config: GenerationConfig) -> List[int]:
    """Autoregressive nucleus sampling until EOS, ``max_new_tokens`` or the context limit."""
    _check_ids(model, prompt)
    if len(prompt) >= model.context:
        raise PolicyError("prompt leaves no room for a response within the context limit")
    generator = torch.Generator().manual_seed(config.seed)
    response: List[int] = []
    with evaluation(model):
        input_ids = torch.tensor([list(prompt)], dtype=torch.long)
        past = None
        for _ in range(config.max_new_tokens):
            if len(prompt) + len(response) >= model.context:
                break
            outputs = model.backbone(input_ids=input_ids, past_key_values=past, use_cache=True, return_dict=True)
            past = outputs.past_key_values
            token = sample_next_token(outputs.logits[0, -1], config, generator)
            response.append(token)
            if token == EOS_ID:
                break
            input_ids = torch.tensor([[token]], dtype=torch.long)
    return response


def decode_response(vocabulary: Vocabulary, response: Sequence[int]) -> List[str]:
    """Rewrite tokens of a sampled response, dropping reserved control tokens."""
    return vocabulary.decode([token for token in response if token not in (BOS_ID, EOS_ID, PAD_ID)])


def generate_rewrite(
    model: PolicyModel,
    vocabulary: Vocabulary,
    argument: str,
    config: GenerationConfig,
    mode: PromptMode = PromptMode.INSTRUCTION,
    shots: Optional[Sequence[Tuple[str, str]]] = None,
) -> str:
    response = sample_response(model, encode_prompt(vocabulary, argument, mode, shots), config)
    return " ".join(decode_response(vocabulary, response))


def response_logprobs_and_values(
    model: PolicyModel, prompt: Sequence[int], response: Sequence[int]
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-token log pi(response_t | prompt, response_<t) and the value of each state (differentiable)."""
    if not response:
        raise PolicyError("response must not be empty")
    ids = list(prompt) + list(response)
    _check_ids(model, ids)
    scores, values = model(torch.tensor([ids], dtype=torch.long))
    start = len(prompt) - 1
    step_logits = scores[0, start : start + len(response)]
    log_probs = torch.log_softmax(step_logits, dim=-1)
    target = torch.tensor(list(response), dtype=torch.long)
    token_log_probs = log_probs.gather(-1, target[:, None]).squeeze(-1)
    return token_log_probs, values[0, start : start + len(response)]


def sequence_logprob(model: PolicyModel, prompt: Sequence[int], response: Sequence[int]) -> torch.Tensor:
    with evaluation(model):
        token_log_probs, _ = response_logprobs_and_values(model, prompt, response)
    return token_log_probs


# ---------------------------------------------------------------- checkpoints


@dataclass
class PolicyCheckpoint:
    architecture: PolicyArchitecture
    vocabulary: List[str]
    state_dict: Dict[str, torch.Tensor]
    adapters: Optional[AdapterConfig] = None
    step: int = 0
    config_hash: str = ""
    scores: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_model(
        cls,
        model: PolicyModel,
        vocabulary: Vocabulary,
        step: int = 0,
        config_hash: str = "",
        scores: Optional[Dict[str, float]] = None,
    ) -> "PolicyCheckpoint":
        state = {name: tensor.detach().clone() for name, tensor in model.state_dict().items()}
        return cls(model.architecture, list(vocabulary.tokens), state, model.adapter_config, step, config_hash, dict(scores or {}))

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.vocabulary)

    def to_model(self) -> PolicyModel:
        model = PolicyModel(self.architecture)
        if self.adapters is not None:
            model.add_adapters(self.adapters)
        model.load_state_dict(self.state_dict, strict=True)
        return model

    def save(self, path: Union[str, Path]) -> None:
        torch.save(
            {
                "format": 1,
                "architecture": self.architecture.model_dump(),
                "vocabulary": self.vocabulary,
                "state_dict": self.state_dict,
                "adapters": self.adapters.model_dump() if self.adapters else None,
                "step": self.step,
                "config_hash": self.config_hash,
                "scores": self.scores,
            },
            path,
        )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PolicyCheckpoint":
        payload = torch.load(path, map_location="cpu")
        if payload.get("format") != 1:
            raise PolicyError(f"unsupported checkpoint format in {path}")
        adapters = payload["adapters"]
        return cls(
            architecture=PolicyArchitecture(**payload["architecture"]),
            vocabulary=list(payload["vocabulary"]),
            state_dict=payload["state_dict"],
            adapters=AdapterConfig(**adapters) if adapters else None,
            step=int(payload["step"]),
            config_hash=payload["config_hash"],
            scores=dict(payload["scores"]),
        )


# ---------------------------------------------------------------- pretraining


def mle_loss(model: PolicyModel, pairs: Sequence[Tuple[Sequence[int], Sequence[int]]]) -> torch.Tensor:
    """Mean cross-entropy (nats/token) of targets given prompts; right padding needs no mask under causal attention."""
    sequences = [list(prompt) + list(target) for prompt, target in pairs]
    for sequence in sequences:
        _check_ids(model, sequence)
    width = max(len(sequence) for sequence in sequences)
    input_ids = torch.full((len(sequences), width), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(sequences), width - 1), dtype=model.dtype)
    for row, ((prompt, target), sequence) in enumerate(zip(pairs, sequences)):
        input_ids[row, : len(sequence)] = torch.tensor(sequence, dtype=torch.long)
        mask[row, len(prompt) - 1 : len(prompt) - 1 + len(target)] = 1.0
    scores, _ = model(input_ids)
    log_probs = torch.log_softmax(scores[:, :-1], dim=-1)
    token_log_probs = log_probs.gather(-1, input_ids[:, 1:, None]).squeeze(-1)
    return -(token_log_probs * mask).sum() / mask.sum()


def _heldout_loss(model: PolicyModel, pairs: Sequence[Tuple[Sequence[int], Sequence[int]]], batch_size: int) -> float:
    with evaluation(model):
        total, tokens = 0.0, 0
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start : start + batch_size]
            n = sum(len(target) for _, target in chunk)
            total += float(mle_loss(model, chunk)) * n
            tokens += n
    return total / tokens


def pretrain_mle(
    model: PolicyModel,
    corpus: Sequence[Tuple[Sequence[int], Sequence[int]]],
    config: PretrainConfig,
    vocabulary: Vocabulary,
    config_hash: str = "",
) -> PolicyCheckpoint:
    """Fit the policy to (prompt, target) pairs; returns the best held-out checkpoint."""
    if not corpus:
        raise PolicyError("pretraining corpus is empty")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(corpus))
    n_holdout = int(round(len(corpus) * config.holdout_fraction))
    if 0 < n_holdout < len(corpus):
        heldout = [corpus[i] for i in order[:n_holdout]]
        train = [corpus[i] for i in order[n_holdout:]]
    else:
        heldout = train = list(corpus)

    best_loss = _heldout_loss(model, heldout, config.batch_size)
    best = PolicyCheckpoint.from_model(model, vocabulary, 0, config_hash, {"heldout_loss": best_loss})
    logger.info(f"Pretraining on {len(train)} pairs; initial held-out loss {best_loss:.4f}")
    if config.steps == 0:
        return best

    optimizer = torch.optim.AdamW(model.trainable_parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    model.train()
    progress = tqdm(range(1, config.steps + 1), desc="pretrain", disable=not settings.progress)
    for step in progress:
        picks = rng.choice(len(train), size=min(config.batch_size, len(train)), replace=False)
        loss = mle_loss(model, [train[i] for i in picks])
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if step % config.eval_every == 0 or step == config.steps:
            heldout_loss = _heldout_loss(model, heldout, config.batch_size)
            progress.set_postfix(loss=f"{float(loss):.3f}", heldout=f"{heldout_loss:.3f}")
            if heldout_loss < best_loss:
                best_loss = heldout_loss
                best = PolicyCheckpoint.from_model(model, vocabulary, step, config_hash, {"heldout_loss": heldout_loss})
    logger.info(f"Pretraining finished; best held-out loss {best_loss:.4f} at step {best.step}")
    return best
