from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, NoReturn

from tripletforge.src.config import ConfigError, RunConfig, load_config
from tripletforge.src.core import TrainingDivergedError, ValidationError, substream
from tripletforge.src.featgen import (
    ConditionTable,
    fit_feature_generator,
    generate_batch,
    load_checkpoint,
    save_checkpoint,
)
from tripletforge.src.fsta import BatchImage, gt_proposals, plan_step, write_plans
from tripletforge.src.harness import Variant, run_matrix, write_table
from tripletforge.src.ietrans import (
    apply_transfers,
    consumed_negatives,
    load_decisions,
    load_external,
    run_transfer,
    write_decisions,
    write_external,
)
from tripletforge.src.ingest import (
    FeatureStore,
    dump_annotations,
    load_annotations,
    load_features,
    load_predictions,
    write_features,
)
from tripletforge.src.manifest import build_manifest, write_manifests
from tripletforge.src.metrics import evaluate, load_groups, load_predicted_relations, write_report
from tripletforge.src.mp_sampler import build_sampler, load_sampler, write_sampler
from tripletforge.src.soft_transfer import QMode, apply_soft_transfer
from tripletforge.src.telemetry import METRICS, write_metrics

RUNTIME_VERSION = "0.1.0"
LOGGER = logging.getLogger(__name__)

_REDACTION_RULES: tuple[tuple[re.Pattern[str], str], ...] = (
    (
        re.compile(r"(?i)(bearer\s+)([A-Za-z0-9._~+/=-]+)"),
        r"\1[REDACTED]",
    ),
    (
        re.compile(
            r"(?i)(\b(?:authorization|token|password|passwd|secret|api[_-]?key)\b"
            r"\s*[:=]\s*)([^\s,;]+)"
        ),
        r"\1[REDACTED]",
    ),
    (
        re.compile(r"(?i)([?&](?:token|access_token|api_key|password)=)([^&\s]+)"),
        r"\1[REDACTED]",
    ),
)


def redact_sensitive_text(value: str) -> str:
    redacted = value
    for pattern, replacement in _REDACTION_RULES:
        redacted = pattern.sub(replacement, redacted)
    return redacted


class JSONFormatter(logging.Formatter):
    """Emit logs as single-line JSON objects for structured log aggregation."""

    def format(self, record: logging.LogRecord) -> str:
        log_entry = {
            "ts": self.formatTime(record, self.datefmt),
            "level": record.levelname,
            "logger": record.name,
            "msg": redact_sensitive_text(record.getMessage()),
        }
        if record.exc_info and record.exc_info[0] is not None:
            log_entry["error"] = redact_sensitive_text(self.formatException(record.exc_info))
        return json.dumps(log_entry)


def configure_logging(level: str) -> None:
    """Install one JSON handler on the root logger, replacing any earlier one."""
    for handler in list(logging.root.handlers):
        if isinstance(handler.formatter, JSONFormatter):
            logging.root.removeHandler(handler)
    log_handler = logging.StreamHandler()
    log_handler.setFormatter(JSONFormatter())
    logging.root.addHandler(log_handler)
    logging.root.setLevel(getattr(logging, level.upper(), logging.INFO))


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors surface as validation errors (exit 1)."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        raise ValidationError("cli", message)


@dataclass
class RunOutcome:
    inputs: dict[str, Path] = field(default_factory=dict)
    outputs: list[Path] = field(default_factory=list)


# flag dest -> config key; flags left at None keep the file/default value.
_OVERRIDES: dict[str, str] = {
    "seed": "seed",
    "log_level": "log_level",
    "annotations": "paths.annotations",
    "predictions": "paths.predictions",
    "features": "paths.features",
    "ki": "ietrans.k_i",
    "ke": "ietrans.k_e",
    "aff_threshold": "ietrans.aff_threshold",
    "ks": "soft.k_s",
    "q_mode": "soft.q_mode",
    "nt": "fsta.n_t",
    "siou": "fsta.s_iou",
    "uh": "fsta.u_h",
    "alpha": "fsta.alpha",
    "object_source": "fsta.object_source",
    "undersample": "fsta.undersample",
    "bidirectional": "fsta.bidirectional",
    "tail_only": "fsta.tail_only_s_po",
    "max_iter": "gan.max_iter",
    "eval_every": "gan.eval_every",
    "k": "eval.k",
    "reweight": "harness.reweight",
}


def _int_list(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in raw.split(",") if part.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {raw!r}") from exc


def _common_flags() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="global seed (default: 0, env TF_SEED)")
    common.add_argument("--log-level", help="log level (default: INFO, env LOG_LEVEL)")
    common.add_argument("--metrics-out", help="write Prometheus metrics to this textfile")
    return common


def _data_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--annotations", help="annotation JSON-lines file ([paths].annotations)")
    parser.add_argument("--predictions", help="biased-model prediction dump ([paths].predictions)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="tripletforge",
        description="Label transfer and feature-space augmentation for long-tailed triplets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common_flags()

    transfer = sub.add_parser("transfer", parents=[common], help="internal/external transfer")
    _data_flags(transfer)
    transfer.add_argument("--ki", type=float, help="internal transfer percentile (default: 70)")
    transfer.add_argument("--ke", type=float, help="external transfer percentile (default: 100)")
    transfer.add_argument(
        "--aff-threshold", type=float, help="parent/child affinity threshold (default: 0.1)"
    )
    transfer.add_argument("--out", help="decision file (JSON lines)")
    transfer.add_argument(
        "--external-out", help="external triplets (default: <out stem>.external.jsonl)"
    )
    transfer.add_argument("--enhanced-out", help="also write the hard-transferred dataset")

    soft = sub.add_parser("soft-transfer", parents=[common], help="soften unreliable decisions")
    _data_flags(soft)
    soft.add_argument("--decisions", required=True, help="decision file from transfer")
    soft.add_argument("--external", help="external triplets to merge into the output")
    soft.add_argument("--ks", type=float, help="percent of decisions softened (default: 10)")
    soft.add_argument(
        "--q-mode",
        choices=[mode.value for mode in QMode],
        help="probability kept on the transferred class (default: one-minus-minmax)",
    )
    soft.add_argument("--out", help="enhanced annotation file")

    sampler = sub.add_parser("build-sampler", parents=[common], help="build the MP-sampler")
    _data_flags(sampler)
    sampler.add_argument("--out", help="sampler table (JSON)")

    plan = sub.add_parser("plan-fsta", parents=[common], help="plan artificial triplets")
    _data_flags(plan)
    plan.add_argument("--sampler", help="sampler table; built from --predictions when absent")
    plan.add_argument("--nt", type=int, help="pairs sampled per image (default: 2)")
    plan.add_argument("--siou", type=float, help="pair IoU threshold (default: 0.7)")
    plan.add_argument("--uh", type=float, help="head keep probability (default: 0.2)")
    plan.add_argument("--alpha", type=float, help="artificial loss weight (default: 0.1)")
    plan.add_argument("--object-source", choices=["mp-sampler", "swap"], help="spo' objects")
    plan.add_argument(
        "--no-undersample", dest="undersample", action="store_false", default=None
    )
    plan.add_argument(
        "--no-bidirectional", dest="bidirectional", action="store_false", default=None
    )
    plan.add_argument(
        "--all-groups",
        dest="tail_only",
        action="store_false",
        default=None,
        help="plan s'po entries for every group, not only the tail",
    )
    plan.add_argument("--batch-images", type=int, default=8, help="images per step (default: 8)")
    plan.add_argument("--steps", type=int, help="stop after this many steps (default: one pass)")
    plan.add_argument("--out", help="plan file (JSON lines)")

    train = sub.add_parser("train-gen", parents=[common], help="train the feature generator")
    train.add_argument("--features", help="object feature file ([paths].features)")
    cond = train.add_mutually_exclusive_group(required=True)
    cond.add_argument("--cond", help="condition vectors, one row per object class")
    cond.add_argument(
        "--cond-synth", action="store_true", help="seeded unit Gaussian condition vectors"
    )
    train.add_argument("--max-iter", type=int, help="generator iterations (default: 55000)")
    train.add_argument("--eval-every", type=int, help="checkpoint interval (default: 500)")
    train.add_argument("--out", help="generator checkpoint")

    gen = sub.add_parser("gen-features", parents=[common], help="sample generated features")
    gen.add_argument("--ckpt", required=True, help="generator checkpoint")
    gen.add_argument("--classes", required=True, help="comma-separated class names or indices")
    gen.add_argument("--annotations", help="annotation file naming the object classes")
    gen.add_argument("--n", type=int, default=100, help="features per class (default: 100)")
    gen.add_argument("--out", help="feature file")

    ev = sub.add_parser("eval", parents=[common], help="R@K, mR@K, F1@K and Avg@K")
    ev.add_argument("--pred", required=True, help="scored relations (JSON lines)")
    ev.add_argument("--gt", required=True, help="ground-truth annotation file")
    ev.add_argument("--k", type=_int_list, help="comma-separated K values (default: 50,100)")
    ev.add_argument("--groups", help="{predicate: head|body|tail} JSON file")
    ev.add_argument("--out", help="report (JSON)")

    synth = sub.add_parser("synth-exp", parents=[common], help="synthetic comparison matrix")
    synth.add_argument("--spec", help="synthetic experiment TOML; replaces --config")
    synth.add_argument(
        "--variants",
        default="raw,ietrans,soft,fsta,full",
        help="comma-separated variants, e.g. raw,ietrans,resample(2) (default: all five)",
    )
    synth.add_argument("--seeds", type=int, default=5, help="seeds from --seed on (default: 5)")
    synth.add_argument(
        "--reweight", action="store_true", default=None, help="class-reweighted loss"
    )
    synth.add_argument("--out", help="table (.md for Markdown, JSON otherwise)")
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    return {key: getattr(args, dest) for dest, key in _OVERRIDES.items() if hasattr(args, dest)}


def _input(path: str | None, role: str) -> Path:
    if path is None:
        raise ConfigError(f"no {role} path given (--{role} or [paths].{role})")
    target = Path(path)
    if not target.is_file():
        raise FileNotFoundError(f"{role} file not found: {target}")
    return target


def _output(args: argparse.Namespace, config: RunConfig, default_name: str) -> Path:
    if args.out is not None:
        return Path(args.out)
    if config.paths.outputs is None:
        raise ConfigError("no output path given (--out or [paths].outputs)")
    outputs = Path(config.paths.outputs)
    outputs.mkdir(parents=True, exist_ok=True)
    return outputs / default_name


def _cmd_transfer(args: argparse.Namespace, config: RunConfig) -> RunOutcome:
    annotations = _input(config.paths.annotations, "annotations")
    predictions = _input(config.paths.predictions, "predictions")
    out = _output(args, config, "decisions.jsonl")
    dataset = load_annotations(annotations)
    dump = load_predictions(predictions, dataset)
    decisions, external = run_transfer(dataset, dump, config.ietrans)
    write_decisions(decisions, out)
    external_out = out.with_name(f"{out.stem}.external.jsonl")
    if args.external_out:
        external_out = Path(args.external_out)
    write_external(external, dataset.label_space.predicate_classes, external_out)
    outcome = RunOutcome(
        inputs={"annotations": annotations, "predictions": predictions},
        outputs=[out, external_out],
    )
    if args.enhanced_out:
        dump_annotations(apply_transfers(dataset, decisions, external), args.enhanced_out)
        outcome.outputs.append(Path(args.enhanced_out))
    return outcome


def _cmd_soft_transfer(args: argparse.Namespace, config: RunConfig) -> RunOutcome:
    annotations = _input(config.paths.annotations, "annotations")
    predictions = _input(config.paths.predictions, "predictions")
    decisions_path = _input(args.decisions, "decisions")
    inputs = {"annotations": annotations, "predictions": predictions, "decisions": decisions_path}
    if args.external:
        inputs["external"] = _input(args.external, "external")
    out = _output(args, config, "enhanced.jsonl")

    dataset = load_annotations(annotations)
    dump = load_predictions(predictions, dataset)
    enhanced = apply_soft_transfer(
        dataset, dump, load_decisions(decisions_path), config.soft.k_s, config.soft.q_mode
    )
    if "external" in inputs:
        external = load_external(inputs["external"], dataset)
        enhanced = enhanced.extend(external, consumed_negatives(dataset, external))
    dump_annotations(enhanced, out)
    return RunOutcome(inputs=inputs, outputs=[out])


def _cmd_build_sampler(args: argparse.Namespace, config: RunConfig) -> RunOutcome:
    annotations = _input(config.paths.annotations, "annotations")
    predictions = _input(config.paths.predictions, "predictions")
    out = _output(args, config, "sampler.json")
    dataset = load_annotations(annotations)
    table = build_sampler(dataset.label_space, load_predictions(predictions, dataset))
    write_sampler(table, out)
    LOGGER.info("MP-sampler covers %d (subject, predicate) pairs", len(table))
    return RunOutcome(
        inputs={"annotations": annotations, "predictions": predictions}, outputs=[out]
    )


def _cmd_plan_fsta(args: argparse.Namespace, config: RunConfig) -> RunOutcome:
    if args.batch_images < 1:
        raise ValidationError("cli", "--batch-images must be >= 1")
    if args.steps is not None and args.steps < 0:
        raise ValidationError("cli", "--steps must be >= 0")
    annotations = _input(config.paths.annotations, "annotations")
    inputs = {"annotations": annotations}
    dataset = load_annotations(annotations)
    sampler = None
    if args.sampler:
        inputs["sampler"] = _input(args.sampler, "sampler")
        sampler = load_sampler(inputs["sampler"])
    elif config.paths.predictions is not None:
        inputs["predictions"] = _input(config.paths.predictions, "predictions")
        sampler = build_sampler(
            dataset.label_space, load_predictions(inputs["predictions"], dataset)
        )
    out = _output(args, config, "plan.jsonl")

    images = [
        BatchImage(image_id, gt_proposals(records), records)
        for image_id, records in sorted(dataset.images.items())
    ]
    batches = [
        images[start : start + args.batch_images]
        for start in range(0, len(images), args.batch_images)
    ]
    if args.steps is not None:
        batches = batches[: args.steps]
    rng = substream(config.seed, "fsta.plan")
    plans = [
        plan_step(step, batch, dataset.label_space, sampler, config.fsta, rng)
        for step, batch in enumerate(batches)
    ]
    write_plans(plans, out)
    LOGGER.info(
        "Planned %d artificial triplets over %d steps", sum(len(p) for p in plans), len(plans)
    )
    return RunOutcome(inputs=inputs, outputs=[out])


def _cmd_train_gen(args: argparse.Namespace, config: RunConfig) -> RunOutcome:
    features_path = _input(config.paths.features, "features")
    inputs = {"features": features_path}
    store = load_features(features_path)
    if args.cond:
        inputs["conditions"] = _input(args.cond, "cond")
        conditions = ConditionTable.from_store(load_features(inputs["conditions"]))
    else:
        _, classes, _ = store.matrix()
        n_classes = int(classes.max()) + 1 if classes.size else 0
        if n_classes == 0:
            raise ValidationError("cli", "feature file has no rows")
        conditions = ConditionTable.synthesize(n_classes, config.gan.cond_dim, config.seed)
    out = _output(args, config, "gan.ckpt")

    gan_cfg = replace(config.gan, feature_dim=store.dim, cond_dim=conditions.dim)
    if gan_cfg != config.gan:
        LOGGER.info(
            "Generator dims taken from inputs: feature_dim=%d cond_dim=%d",
            store.dim,
            conditions.dim,
        )
    state = fit_feature_generator(store, conditions, gan_cfg)
    save_checkpoint(state, out)
    return RunOutcome(inputs=inputs, outputs=[out])


def _class_indices(raw: str, annotations: Path | None) -> list[int]:
    tokens = [token.strip() for token in raw.split(",") if token.strip()]
    if not tokens:
        raise ValidationError("cli", "--classes is empty")
    if all(token.isdigit() for token in tokens):
        return [int(token) for token in tokens]
    if annotations is None:
        raise ValidationError("cli", "class names need --annotations to resolve them")
    space = load_annotations(annotations).label_space
    return [space.object_index(token) for token in tokens]


def _cmd_gen_features(args: argparse.Namespace, config: RunConfig) -> RunOutcome:
    if args.n < 1:
        raise ValidationError("cli", "--n must be >= 1")
    ckpt = _input(args.ckpt, "ckpt")
    inputs = {"ckpt": ckpt}
    annotations: Path | None = None
    if args.annotations:
        annotations = inputs["annotations"] = _input(args.annotations, "annotations")
    out = _output(args, config, "generated.bin")

    state = load_checkpoint(ckpt)
    classes = [c for c in _class_indices(args.classes, annotations) for _ in range(args.n)]
    if any(not (0 <= c < state.n_classes) for c in classes):
        raise ValidationError("cli", f"checkpoint knows {state.n_classes} classes")
    rng = substream(config.seed, "featgen.sample")
    vectors = generate_batch(
        state.generator, state.conditions, classes, rng, state.config.d_z
    )
    write_features(FeatureStore.from_arrays(range(len(classes)), classes, vectors), out)
    return RunOutcome(inputs=inputs, outputs=[out])


def _cmd_eval(args: argparse.Namespace, config: RunConfig) -> RunOutcome:
    pred = _input(args.pred, "pred")
    gt = _input(args.gt, "gt")
    inputs = {"pred": pred, "gt": gt}
    if args.groups:
        inputs["groups"] = _input(args.groups, "groups")
    out = _output(args, config, "report.json")

    ground_truth = load_annotations(gt)
    space = ground_truth.label_space
    if "groups" in inputs:
        space = load_groups(inputs["groups"], space)
    report = evaluate(load_predicted_relations(pred, space), ground_truth, config.eval, space)
    write_report(report, out, space.predicate_classes)
    return RunOutcome(inputs=inputs, outputs=[out])


def _cmd_synth_exp(args: argparse.Namespace, config: RunConfig) -> RunOutcome:
    if args.seeds < 1:
        raise ValidationError("cli", "--seeds must be >= 1")
    variants = [Variant.parse(v) for v in args.variants.split(",") if v.strip()]
    out = _output(args, config, "table.json")
    seeds = range(config.seed, config.seed + args.seeds)
    table = run_matrix(config.synth, variants, seeds, config.harness_config())
    write_table(table, out)
    inputs = {"spec": Path(args.spec)} if args.spec else {}
    return RunOutcome(inputs=inputs, outputs=[out])


COMMANDS: dict[str, Callable[[argparse.Namespace, RunConfig], RunOutcome]] = {
    "transfer": _cmd_transfer,
    "soft-transfer": _cmd_soft_transfer,
    "build-sampler": _cmd_build_sampler,
    "plan-fsta": _cmd_plan_fsta,
    "train-gen": _cmd_train_gen,
    "gen-features": _cmd_gen_features,
    "eval": _cmd_eval,
    "synth-exp": _cmd_synth_exp,
}


def run(command: str, config: RunConfig, args: argparse.Namespace) -> list[Path]:
    """Execute one subcommand and write a run manifest beside every output."""
    with METRICS.pipeline_duration_seconds.labels(subcommand=command).time():
        outcome = COMMANDS[command](args, config)
    inputs = dict(outcome.inputs)
    config_file = getattr(args, "spec", None) or args.config
    if config_file:
        inputs["config"] = Path(config_file)
    manifest = build_manifest(
        version=RUNTIME_VERSION,
        subcommand=command,
        seed=config.seed,
        config=config.echo(),
        inputs=inputs,
        outputs=outcome.outputs,
    )
    write_manifests(manifest, outcome.outputs)
    LOGGER.info("%s wrote %s", command, ", ".join(str(p) for p in outcome.outputs))
    return outcome.outputs


def main(argv: Sequence[str] | None = None) -> int:
    """CLI entrypoint: parse flags, resolve config, run one pipeline; returns the exit code."""
    configure_logging(os.getenv("LOG_LEVEL", "INFO"))
    METRICS.build_info.info(
        {
            "version": os.getenv("APP_VERSION", RUNTIME_VERSION),
            "revision": os.getenv("GIT_SHA", "unknown"),
        }
    )
    try:
        args = build_parser().parse_args(argv)
        config_file = getattr(args, "spec", None) or args.config
        config = load_config(config_file, overrides=_overrides(args))
        configure_logging(config.log_level)
        run(args.command, config, args)
        if args.metrics_out:
            write_metrics(args.metrics_out)
    except TrainingDivergedError as exc:
        LOGGER.error("Training diverged: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
