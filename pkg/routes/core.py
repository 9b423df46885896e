from __future__ import annotations
import dataclasses
import logging

import numpy as np

from config import PREFETCH, PROGRESS, RunConfig
from logic.contrastive import ARCH_KEYS, TrainState, build_train_state, train_loop
from logic.data import PairedDataset, SyntheticSpec, generate_synthetic_pairs, split_holdout
from logic.encoders import FeatureSequence, build_towers, embed_images, embed_sequences
from logic.metrics import (
    accuracy,
    confusion_matrix,
    cross_modal_mrr,
    mean_average_precision,
    one_hot,
    segment_scores,
    train_linear_probe,
    zero_shot_classify,
)
from logic.rerank import CandidatePool, planted_recovery, rerank
from logic.seeding import stream
from logic.tensor import parameter_checksum
from routes.registry import CommandGroup, UsageError, require
from services.checkpoint import load_checkpoint, save_checkpoint
from services.feature_file import read_feature_file, write_feature_file
from services.reports import read_events, write_history, write_metrics, write_rerank_report
from ui import render_history, render_metrics, render_rerank

log = logging.getLogger(__name__)
bp = CommandGroup("core")


def _read(path: str, cfg: RunConfig) -> PairedDataset:
    dataset = read_feature_file(path)
    if not len(dataset):
        raise UsageError(f"{path} holds no records")
    return dataset.with_modality(cfg.modality)


def _embed(state: TrainState, dataset: PairedDataset) -> tuple[np.ndarray, np.ndarray]:
    towers = state.towers
    image_z = embed_images(towers.image, [r.image_features for r in dataset])
    lang_z = embed_sequences(towers.language, [r.language for r in dataset])
    return image_z, lang_z


def _emit(args, title: str, metrics: dict):
    print(render_metrics(title, metrics))
    if args.out:
        write_metrics(args.out, metrics)


@bp.command("gen-data", help="write a synthetic paired feature file", args=[
    (("--heldout-out",), {"default": None, "help": "also write a stratified held-out split here"}),
])
def gen_data(args, cfg: RunConfig) -> int:
    out = require(args, "out")
    spec = SyntheticSpec(
        n_classes=cfg.n_classes, n_pairs=cfg.n_pairs, image_size=cfg.image_size,
        image_channels=cfg.image_channels, seq_len=cfg.seq_len, audio_dim=cfg.audio_dim,
        n_units=cfg.n_units, noise_sigma=cfg.noise_sigma, seed=cfg.seed,
    )
    dataset = generate_synthetic_pairs(spec)
    held = None
    if args.heldout_out:
        dataset, held = split_holdout(dataset, cfg.holdout, cfg.seed)
        write_feature_file(held, args.heldout_out)
    write_feature_file(dataset, out)
    print(render_metrics("gen-data", {
        "records": len(dataset),
        "heldout_records": len(held) if held is not None else 0,
        "classes": cfg.n_classes,
        "noise_sigma": cfg.noise_sigma,
    }))
    return 0


@bp.command("train", help="train both towers on a feature file", args=[
    (("--resume",), {"default": None, "help": "continue from this checkpoint"}),
    (("--epochs",), {"type": int, "default": None, "help": "epochs to run (overrides the config)"}),
    (("--history",), {"default": None, "help": "loss history TSV (default: <checkpoint>.history)"}),
])
def train(args, cfg: RunConfig) -> int:
    dataset = _read(require(args, "data"), cfg)
    checkpoint = require(args, "checkpoint")
    if args.resume:
        state = load_checkpoint(args.resume, cfg)
    else:
        state = build_train_state(cfg, dataset.image_dim, dataset.audio_dim)
    first_epoch = state.epoch + 1
    history = train_loop(
        state, dataset, cfg.epochs, cfg.batch_size,
        checkpoint_sink=lambda s: save_checkpoint(checkpoint, s),
        checkpoint_every=cfg.checkpoint_every,
        progress=PROGRESS,
        prefetch=PREFETCH,
    )
    # the final state is always written, even after zero epochs
    save_checkpoint(checkpoint, state)
    terms = state.loss_cfg.loss_terms()
    write_history(args.history or f"{checkpoint}.history", history.epoch_losses, first_epoch, terms)
    print(render_history(history.epoch_losses, first_epoch, terms))
    return 0


@bp.command("probe", help="train a probe classifier on frozen embeddings", args=[
    (("--train-data",), {"default": None, "help": "labelled records the probe learns from"}),
    (("--side",), {"choices": ["audio", "image"], "default": "audio"}),
])
def probe(args, cfg: RunConfig) -> int:
    state = load_checkpoint(require(args, "checkpoint"), cfg)
    train_set = _read(require(args, "train_data"), cfg)
    test_set = _read(require(args, "data"), cfg)
    if cfg.probe_fraction < 1.0:
        train_set, _ = split_holdout(train_set, 1.0 - cfg.probe_fraction, cfg.seed)

    before = parameter_checksum(state.towers)
    pick = 0 if args.side == "image" else 1
    x_train = _embed(state, train_set)[pick]
    x_test = _embed(state, test_set)[pick]
    n_classes = max(train_set.n_classes, test_set.n_classes)
    clf = train_linear_probe(
        x_train, train_set.labels, n_classes,
        epochs=cfg.probe_epochs, lr=cfg.probe_lr, hidden=cfg.probe_hidden, seed=cfg.seed,
    )
    predicted = clf.predict(x_test)
    unchanged = parameter_checksum(state.towers) == before
    if not unchanged:
        log.error("❌ tower parameters changed during probe evaluation")

    metrics = {
        "command": "probe",
        "side": args.side,
        "n_train": len(train_set),
        "n_test": len(test_set),
        "probe_fraction": cfg.probe_fraction,
        "accuracy": accuracy(predicted, test_set.labels),
        "map": mean_average_precision(clf.scores(x_test), one_hot(test_set.labels, n_classes)),
        "towers_unchanged": unchanged,
    }
    for c, row in enumerate(confusion_matrix(predicted, test_set.labels, n_classes)):
        metrics[f"confusion.{c}"] = row.tolist()
    _emit(args, "probe", metrics)
    return 0


@bp.command("zero-shot", help="classify by nearest class description embedding")
def zero_shot(args, cfg: RunConfig) -> int:
    state = load_checkpoint(require(args, "checkpoint"), cfg)
    dataset = _read(require(args, "data"), cfg)
    descriptions = dataset.class_unit_ids()
    if not descriptions:
        raise UsageError("zero-shot needs unit ids to describe the classes")
    classes = np.array(sorted(descriptions))
    prototypes = embed_sequences(
        state.towers.language, [FeatureSequence("text", unit_ids=descriptions[c]) for c in classes]
    )
    image_z, lang_z = _embed(state, dataset)
    samples = image_z if cfg.zero_shot_samples == "image" else lang_z
    topk = min(cfg.topk, len(classes))
    top = classes[zero_shot_classify(samples, prototypes, topk)]
    labels = dataset.labels
    metrics = {
        "command": "zero-shot",
        "samples": cfg.zero_shot_samples,
        "n": len(dataset),
        "classes": len(classes),
        "topk": topk,
        "accuracy": accuracy(top[:, 0], labels),
        "topk_accuracy": float(np.mean([l in row for l, row in zip(labels, top)])),
    }
    _emit(args, "zero-shot", metrics)
    return 0


@bp.command("retrieve", help="cross-modal MRR in both directions")
def retrieve(args, cfg: RunConfig) -> int:
    state = load_checkpoint(require(args, "checkpoint"), cfg)
    dataset = _read(require(args, "data"), cfg)
    image_z, lang_z = _embed(state, dataset)
    mrr = cross_modal_mrr(image_z, lang_z, dataset.labels, dataset.pair_ids, cfg.gallery)
    metrics = {"command": "retrieve", "gallery": cfg.gallery, "n": len(dataset), **mrr}
    _emit(args, "retrieve", metrics)
    return 0


def _untrained_towers(state: TrainState, cfg: RunConfig):
    arch_cfg = dataclasses.replace(cfg, **{k: state.arch[k] for k in ARCH_KEYS if k not in ("proj_heads", "queue_size")})

    def towers_for_trial(t: int):
        return build_towers(arch_cfg, state.arch["image_dim"], state.arch["audio_dim"], stream(cfg.seed, "init", t + 1))

    return towers_for_trial


@bp.command("rerank", help="pick the best matching images for each query", args=[
    (("--queries",), {"default": None, "help": "feature file whose language side are the queries"}),
    (("--pool",), {"default": None, "help": "feature file whose images are the candidates"}),
    (("--planted",), {"action": "store_true", "help": "measure planted-best recovery on --data instead"}),
    (("--trials",), {"type": int, "default": 1000}),
])
def rerank_cmd(args, cfg: RunConfig) -> int:
    state = load_checkpoint(require(args, "checkpoint"), cfg)
    if args.planted:
        dataset = _read(require(args, "data"), cfg)
        trained = planted_recovery(lambda t: state.towers, dataset, cfg.pool_size, cfg.noise_sigma, args.trials, cfg.seed)
        baseline = planted_recovery(_untrained_towers(state, cfg), dataset, cfg.pool_size, cfg.noise_sigma, args.trials, cfg.seed)
        _emit(args, "planted recovery", {
            "command": "rerank-planted",
            "trials": args.trials,
            "pool_size": cfg.pool_size,
            "trained_rate": trained.rate,
            "untrained_rate": baseline.rate,
            "chance": trained.chance,
            "chance_band": trained.chance_band,
        })
        return 0

    queries = _read(require(args, "queries"), cfg)
    pool_set = read_feature_file(require(args, "pool"))
    out = require(args, "out")
    query_z = embed_sequences(state.towers.language, [r.language for r in queries])
    pool_z = embed_images(state.towers.image, [r.image_features for r in pool_set])
    pool = CandidatePool(pool_z, pool_set.pair_ids, source=args.pool)
    topk = min(cfg.topk, len(pool))
    selections = rerank(query_z, pool, topk)
    write_rerank_report(out, queries.pair_ids.tolist(), selections)
    print(render_rerank(queries.pair_ids.tolist(), selections))
    return 0


@bp.command("segment-f1", help="segment-based detection scores for two event lists", args=[
    (("--predicted",), {"default": None}),
    (("--reference",), {"default": None}),
])
def segment_f1_cmd(args, cfg: RunConfig) -> int:
    scores = segment_scores(
        read_events(require(args, "predicted")),
        read_events(require(args, "reference")),
        cfg.segment_length,
    )
    metrics = {
        "command": "segment-f1",
        "averaging": "micro",
        "segment_length": cfg.segment_length,
        "f1": scores.f1,
        "precision": scores.precision,
        "recall": scores.recall,
        "error_rate": scores.error_rate,
        "substitutions": scores.substitutions,
        "deletions": scores.deletions,
        "insertions": scores.insertions,
        "tp": scores.tp,
        "fp": scores.fp,
        "fn": scores.fn,
    }
    for c, f1 in scores.class_f1.items():
        metrics[f"class_f1.{c}"] = f1
    _emit(args, "segment-f1", metrics)
    return 0
