from __future__ import annotations

import argparse
import logging
from pathlib import Path

from app.commands.common import load_classifier
from app.models.schemas import ClassifierTrainingConfig, LanguageModelConfig, Split
from app.services import corpus as corpus_ops
from app.services.artifacts import ArtifactStore, read_records, save_sealed_records, verified
from app.services.scorers import NGramLM, fit_appropriateness_classifier, load_lexicon
from app.utils.errors import CorpusError

logger = logging.getLogger(__name__)


def _read(path: str):
    return read_records(verified(path, required=False))


def _filter(args: argparse.Namespace) -> int:
    save_sealed_records(corpus_ops.filter_arguments(_read(args.input)), args.out)
    return 0


def _dedupe_topics(args: argparse.Namespace) -> int:
    reserved = Path(args.reserved).read_text(encoding="utf-8").splitlines()
    save_sealed_records(corpus_ops.remove_topic_leakage(_read(args.input), reserved), args.out)
    return 0


def _label(args: argparse.Namespace) -> int:
    classifier = load_classifier(args.classifier)
    save_sealed_records(corpus_ops.soft_label(_read(args.input), classifier), args.out)
    return 0


def _split(args: argparse.Namespace) -> int:
    records = corpus_ops.split_dataset(_read(args.input), args.seed)
    save_sealed_records(records, args.out)
    return 0


def _fit_scorers(args: argparse.Namespace) -> int:
    records = _read(args.input)
    train = [r for r in records if r.split in (None, Split.TRAIN)]
    labeled = [(r.tokens, r.app_label) for r in train if r.app_label is not None]
    if not labeled:
        raise CorpusError(f"{args.input} holds no labeled training arguments")
    classifier = fit_appropriateness_classifier(
        labeled, ClassifierTrainingConfig(iterations=args.iterations), load_lexicon(args.lexicon)
    )
    config = LanguageModelConfig(order=args.order, delta=args.delta)
    lm = NGramLM.fit([r.tokens for r in train], config.order, config.delta)
    store = ArtifactStore(args.out)
    store.save_descriptor(classifier.descriptor(), "classifier.json")
    store.save_descriptor(lm.descriptor(), "language_model.json")
    logger.info(f"Scorers written to {store.root}")
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("corpus", help="Filter, deduplicate, label and split argument corpora")
    commands = parser.add_subparsers(dest="action", required=True)

    filter_parser = commands.add_parser("filter", help="Keep arguments of 10-220 words and at most 1100 characters")
    filter_parser.add_argument("--in", dest="input", required=True)
    filter_parser.add_argument("--out", required=True)
    filter_parser.set_defaults(handler=_filter)

    dedupe = commands.add_parser("dedupe-topics", help="Drop arguments on reserved topics")
    dedupe.add_argument("--in", dest="input", required=True)
    dedupe.add_argument("--reserved", required=True)
    dedupe.add_argument("--out", required=True)
    dedupe.set_defaults(handler=_dedupe_topics)

    label = commands.add_parser("label", help="Attach appropriateness scores and labels")
    label.add_argument("--in", dest="input", required=True)
    label.add_argument("--classifier", required=True)
    label.add_argument("--out", required=True)
    label.set_defaults(handler=_label)

    split = commands.add_parser("split", help="Assign 70/10/20 train/validation/test tags")
    split.add_argument("--in", dest="input", required=True)
    split.add_argument("--seed", type=int, default=0)
    split.add_argument("--out", required=True)
    split.set_defaults(handler=_split)

    fit = commands.add_parser("fit-scorers", help="Fit the appropriateness classifier and fluency model on train")
    fit.add_argument("--in", dest="input", required=True)
    fit.add_argument("--lexicon", required=True)
    fit.add_argument("--iterations", type=int, default=5000)
    fit.add_argument("--order", type=int, default=3)
    fit.add_argument("--delta", type=float, default=0.1)
    fit.add_argument("--out", required=True)
    fit.set_defaults(handler=_fit_scorers)
