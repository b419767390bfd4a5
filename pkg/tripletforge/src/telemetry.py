from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, Info, write_to_textfile

REGISTRY = CollectorRegistry()


@dataclass(frozen=True)
class PipelineMetrics:
    """Prometheus collectors for batch pipeline runs.

    Runs are short-lived, so collectors live in a dedicated registry that the
    CLI writes to a node-exporter textfile with ``--metrics-out``.
    """

    transfer_decisions_total: Counter = field(
        default_factory=lambda: Counter(
            "tripletforge_transfer_decisions_total",
            "Label transfer decisions emitted",
            ["kind"],
            registry=REGISTRY,
        )
    )
    soft_labels_total: Counter = field(
        default_factory=lambda: Counter(
            "tripletforge_soft_labels_total",
            "Transfer decisions converted to two-class soft labels",
            ["q_mode"],
            registry=REGISTRY,
        )
    )
    artificial_triplets_total: Counter = field(
        default_factory=lambda: Counter(
            "tripletforge_artificial_triplets_total",
            "Artificial triplets planned for training steps",
            ["kind", "group"],
            registry=REGISTRY,
        )
    )
    undersampled_total: Counter = field(
        default_factory=lambda: Counter(
            "tripletforge_undersampled_total",
            "Head-group artificial triplets dropped by undersampling",
            registry=REGISTRY,
        )
    )
    gan_iterations_total: Counter = field(
        default_factory=lambda: Counter(
            "tripletforge_gan_iterations_total",
            "Generator update iterations completed",
            registry=REGISTRY,
        )
    )
    gan_loss: Gauge = field(
        default_factory=lambda: Gauge(
            "tripletforge_gan_loss",
            "Most recent adversarial training loss terms",
            ["term"],
            registry=REGISTRY,
        )
    )
    generator_val_accuracy: Gauge = field(
        default_factory=lambda: Gauge(
            "tripletforge_generator_val_accuracy",
            "Frozen-classifier accuracy on generated features of the selected checkpoint",
            registry=REGISTRY,
        )
    )
    evaluations_total: Counter = field(
        default_factory=lambda: Counter(
            "tripletforge_evaluations_total",
            "Evaluation reports computed",
            registry=REGISTRY,
        )
    )
    pipeline_duration_seconds: Histogram = field(
        default_factory=lambda: Histogram(
            "tripletforge_pipeline_duration_seconds",
            "Wall-clock duration of a CLI subcommand",
            ["subcommand"],
            buckets=(0.1, 0.5, 1, 5, 15, 60, 300, 900, float("inf")),
            registry=REGISTRY,
        )
    )
    build_info: Info = field(
        default_factory=lambda: Info(
            "tripletforge",
            "Build information for the toolkit",
            registry=REGISTRY,
        )
    )


METRICS = PipelineMetrics()


def write_metrics(path: str | Path) -> None:
    """Write the registry in text exposition format (atomic rename)."""
    write_to_textfile(str(path), REGISTRY)
