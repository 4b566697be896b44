from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from app.models.schemas import GenerationConfig, PolicyArchitecture, PromptMode, Split
from app.services.artifacts import ArtifactStore, load_sealed_checkpoint, read_records, verified
from app.services.metrics import read_pairs
from app.services.policy import (
    EOS_ID,
    PolicyModel,
    Vocabulary,
    encode_prompt,
    generate_rewrite,
    pretrain_mle,
    template_tokens,
)
from app.utils.errors import PolicyError
from config.experiment import load_experiment

logger = logging.getLogger(__name__)


def _training_texts(args: argparse.Namespace):
    if args.pairs:
        originals, rewrites = read_pairs(args.pairs)
        return [" ".join(x) for x in originals], [" ".join(y) for y in rewrites]
    if args.corpus:
        records = [r for r in read_records(verified(args.corpus, required=False)) if r.split in (None, Split.TRAIN)]
        return [r.text for r in records], [r.text for r in records]
    raise PolicyError("pass --corpus or --pairs")


def _pretrain(args: argparse.Namespace) -> int:
    config = load_experiment(args.config, args.preset, args.seed)
    arguments, targets = _training_texts(args)
    vocabulary = Vocabulary.build(arguments + targets, always=template_tokens())
    architecture = PolicyArchitecture(
        vocab_size=len(vocabulary), d_model=config.d_model, n_layer=config.n_layer, n_head=config.n_head, context=config.context
    )
    pairs = [
        (encode_prompt(vocabulary, x, config.prompt_mode), vocabulary.encode(y.split()) + [EOS_ID])
        for x, y in zip(arguments, targets)
    ]
    torch.manual_seed(config.seed)
    checkpoint = pretrain_mle(PolicyModel(architecture), pairs, config.pretrain, vocabulary, config.config_hash())
    out = Path(args.out)
    store = ArtifactStore(out.parent, checkpoint.config_hash)
    store.save_checkpoint(checkpoint, out.name)
    vocabulary.save(out.with_suffix(".vocab.txt"))
    store.seal(out.with_suffix(".vocab.txt"))
    logger.info(f"Saved pretrained policy (step {checkpoint.step}) to {out}")
    return 0


def _sample(args: argparse.Namespace) -> int:
    checkpoint = load_sealed_checkpoint(args.ckpt)
    model = checkpoint.to_model()
    generation = GenerationConfig(top_p=args.top_p, temperature=args.temperature, max_new_tokens=args.max_new_tokens, seed=args.seed)
    shots = None
    if args.shots:
        originals, rewrites = read_pairs(args.shots)
        shots = [(" ".join(x), " ".join(y)) for x, y in zip(originals, rewrites)]
    if args.text:
        texts = [args.text]
    elif args.input:
        texts = [r.text for r in read_records(verified(args.input, required=False))]
    else:
        texts = [line.strip() for line in sys.stdin if line.strip()]
    for text in texts:
        print(generate_rewrite(model, checkpoint.vocab, text, generation, PromptMode(args.prompt_mode), shots))
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("policy", help="Pretrain and sample the rewriting policy")
    commands = parser.add_subparsers(dest="action", required=True)

    pretrain = commands.add_parser("pretrain", help="Maximum-likelihood pretraining of the initial policy")
    source = pretrain.add_mutually_exclusive_group(required=True)
    source.add_argument("--corpus", help="JSON Lines corpus; the policy learns to copy")
    source.add_argument("--pairs", help="TSV with original and rewrite columns")
    pretrain.add_argument("--config")
    pretrain.add_argument("--preset")
    pretrain.add_argument("--seed", type=int)
    pretrain.add_argument("--out", required=True)
    pretrain.set_defaults(handler=_pretrain)

    sample = commands.add_parser("sample", help="Rewrite arguments with nucleus sampling")
    sample.add_argument("--ckpt", required=True)
    target = sample.add_mutually_exclusive_group()
    target.add_argument("--text")
    target.add_argument("--in", dest="input", help="JSON Lines records; one argument per stdin line otherwise")
    sample.add_argument("--prompt-mode", choices=[m.value for m in PromptMode], default=PromptMode.INSTRUCTION.value)
    sample.add_argument("--shots", help="TSV of exemplar pairs for few-shot prompting")
    sample.add_argument("--top-p", type=float, default=0.95)
    sample.add_argument("--temperature", type=float, default=1.0)
    sample.add_argument("--max-new-tokens", type=int, default=64)
    sample.add_argument("--seed", type=int, default=0)
    sample.set_defaults(handler=_sample)
