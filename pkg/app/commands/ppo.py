from __future__ import annotations

import argparse
import logging

from app.commands.common import load_classifier, load_language_model, scorer_path
from app.models.schemas import AppLabel, RewardConfig, Split
from app.services import corpus as corpus_ops
from app.services.artifacts import ArtifactStore, load_sealed_checkpoint, read_records, verified
from app.services.metrics import evaluate_system
from app.services.pipeline import generate_rewrites
from app.services.ppo import PPOTrainer
from app.services.reward import system_name
from app.services.scorers import TokenF1Similarity
from app.utils.errors import PPOError
from app.utils.hashing import derive_seed
from config.experiment import load_experiment

logger = logging.getLogger(__name__)


def _train(args: argparse.Namespace) -> int:
    config = load_experiment(args.config, args.preset, args.seed)
    config_hash = config.config_hash()
    initial = load_sealed_checkpoint(args.init, config_hash)
    records = read_records(verified(args.corpus, required=False))
    if any(r.split is None for r in records):
        raise PPOError(f"{args.corpus} must carry split tags; run `corpus split` first")
    classifier = load_classifier(scorer_path(args.classifier, config.scorers.app_scorer, "--classifier"))
    lm = load_language_model(scorer_path(args.lm, config.scorers.fluency_scorer, "--lm"))
    weight = args.app_weight if args.app_weight is not None else config.app_weights[0]
    name = system_name(weight)

    def evaluator(model, batch):
        rewrites = generate_rewrites(model, initial.vocab, batch, config.generation, config.prompt_mode)
        return evaluate_system(name, rewrites, [r.tokens for r in batch], classifier, lm)

    reward = RewardConfig.for_app_weight(
        weight,
        beta=config.beta,
        normalize=config.normalize_reward,
        app_scorer=classifier.descriptor(),
        sim_scorer=TokenF1Similarity().descriptor(),
    )
    trainer = PPOTrainer(
        reward,
        config.ppo.model_copy(update={"seed": derive_seed(config.seed, 2)}),
        config.generation,
        evaluator,
        config.prompt_mode,
        config_hash=config_hash,
        app_scorer=classifier,
    )
    validation = [r for r in corpus_ops.by_split(records, Split.VALIDATION) if r.app_label == AppLabel.INAPPROPRIATE]
    best, log = trainer.train(initial, corpus_ops.by_split(records, Split.TRAIN), validation)

    store = ArtifactStore(args.out, config_hash)
    store.save_checkpoint(best, "policy.pt")
    for path in log.save(store.root):
        store.seal(path)
    logger.info(f"{name}: selected checkpoint {best.step}; outputs in {store.root}")
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("ppo", help="Optimize the policy against the machine-feedback reward")
    commands = parser.add_subparsers(dest="action", required=True)
    train = commands.add_parser("train", help="PPO from an initial checkpoint; keeps the validation-best policy")
    train.add_argument("--config")
    train.add_argument("--preset")
    train.add_argument("--seed", type=int)
    train.add_argument("--corpus", required=True)
    train.add_argument("--init", required=True, help="sealed checkpoint from `policy pretrain` under the same config")
    train.add_argument("--classifier", help="classifier descriptor; defaults to reward.app_scorer in the config")
    train.add_argument("--lm", help="fluency descriptor; defaults to reward.fluency_scorer in the config")
    train.add_argument("--app-weight", type=float, help="appropriateness weight; alpha_sim = 1 - weight")
    train.add_argument("--out", required=True)
    train.set_defaults(handler=_train)
