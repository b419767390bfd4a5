from __future__ import annotations

import json
import logging
import struct
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np

from tripletforge.src.core import (
    ParseError,
    TrainingDivergedError,
    ValidationError,
    derive_seed,
    substream,
)
from tripletforge.src.ingest import FeatureStore
from tripletforge.src.mlp import (
    Activation,
    LayerGrad,
    Mlp,
    backward,
    forward,
    leaky_relu_grad,
)
from tripletforge.src.telemetry import METRICS

LOGGER = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TFGN"
CHECKPOINT_VERSION = 1
_CHECKPOINT_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True)
class GanConfig:
    """Object-generator hyperparameters; defaults are the full-scale published values."""

    d_z: int = 1024
    feature_dim: int = 1024
    cond_dim: int = 512
    hidden: int = 4096
    lr: float = 1e-4
    batch: int = 128
    d_train_iter: int = 5
    max_iter: int = 55_000
    lambda_gp: float = 10.0
    beta: float = 0.1
    gamma: float = 0.1
    # Read as a negative-region slope magnitude of 0.2.
    leaky_slope: float = -0.2
    seed: int = 0
    eval_every: int = 500
    eval_samples: int = 100
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.05
    pretrain_batch: int = 64

    def __post_init__(self) -> None:
        for item in fields(self):
            if item.name in {"leaky_slope", "seed"}:
                continue
            value = getattr(self, item.name)
            if item.name == "max_iter":
                if value < 0:
                    raise ValidationError("featgen", "max_iter must be >= 0")
            elif value <= 0:
                raise ValidationError("featgen", f"{item.name} must be positive, got {value}")
        if not (0.0 < abs(self.leaky_slope) < 1.0):
            raise ValidationError("featgen", "leaky_slope magnitude must be in (0, 1)")

    @property
    def slope(self) -> float:
        return abs(self.leaky_slope)


@dataclass(frozen=True)
class ConditionTable:
    """Fixed per-class condition vectors (row ``c`` conditions class ``c``)."""

    vectors: np.ndarray

    def __post_init__(self) -> None:
        if self.vectors.ndim != 2 or self.vectors.shape[0] == 0:
            raise ValidationError("featgen", "condition table must be a non-empty matrix")
        if not np.all(np.isfinite(self.vectors)):
            raise ValidationError("featgen", "condition vectors must be finite")
        if np.any(np.linalg.norm(self.vectors, axis=1) == 0.0):
            raise ValidationError("featgen", "condition vectors must be non-zero")

    @classmethod
    def synthesize(cls, n_classes: int, dim: int, seed: int) -> ConditionTable:
        """Seeded Gaussian vectors normalized to unit length."""
        rng = substream(seed, "featgen.conditions")
        vectors = rng.standard_normal((n_classes, dim))
        return cls(vectors / np.linalg.norm(vectors, axis=1, keepdims=True))

    @classmethod
    def from_store(cls, store: FeatureStore) -> ConditionTable:
        """Rows of a feature file keyed by class index 0..n-1."""
        ids = sorted(store.rows)
        if ids != list(range(len(ids))):
            raise ValidationError("featgen", "condition file must hold rows 0..n-1 keyed by class")
        return cls(np.stack([store.rows[i].vector for i in ids]))

    @property
    def n_classes(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def lookup(self, classes: Sequence[int] | np.ndarray) -> np.ndarray:
        index = np.asarray(classes, dtype=np.int64)
        if index.size and (index.min() < 0 or index.max() >= self.n_classes):
            raise ValidationError("featgen", f"unknown class in {index.tolist()}")
        return self.vectors[index]


@dataclass
class GanState:
    generator: Mlp
    discriminator: Mlp
    classifier: Mlp
    reconstructor: Mlp
    conditions: ConditionTable
    config: GanConfig
    selected_iteration: int = 0
    val_accuracy: float = 0.0

    @property
    def n_classes(self) -> int:
        return self.conditions.n_classes


@dataclass(frozen=True)
class WganGpTerms:
    critic_real: float
    critic_fake: float
    gradient_penalty: float

    @property
    def objective(self) -> float:
        """E[D(x)] - E[D(x~)] - lambda * penalty, maximized by the critic."""
        return self.critic_real - self.critic_fake - self.gradient_penalty

    @property
    def d_loss(self) -> float:
        return -self.objective


def init_generator(cfg: GanConfig, rng: np.random.Generator) -> Mlp:
    return Mlp.initialize(
        [cfg.d_z + cfg.cond_dim, cfg.hidden, cfg.feature_dim],
        [Activation.LEAKY_RELU, Activation.NONE],
        rng,
        slope=cfg.slope,
    )


def init_discriminator(cfg: GanConfig, rng: np.random.Generator) -> Mlp:
    return Mlp.initialize(
        [cfg.feature_dim + cfg.cond_dim, cfg.hidden, 1],
        [Activation.LEAKY_RELU, Activation.NONE],
        rng,
        slope=cfg.slope,
    )


def init_classifier(feature_dim: int, n_classes: int, rng: np.random.Generator) -> Mlp:
    return Mlp.initialize([feature_dim, n_classes], [Activation.SOFTMAX], rng)


def init_reconstructor(cfg: GanConfig, rng: np.random.Generator) -> Mlp:
    return Mlp.initialize(
        [cfg.feature_dim, cfg.hidden, cfg.cond_dim],
        [Activation.LEAKY_RELU, Activation.NONE],
        rng,
        slope=cfg.slope,
    )


def _check_critic(net: Mlp) -> None:
    if (
        len(net.layers) != 2
        or net.layers[0].activation is not Activation.LEAKY_RELU
        or net.layers[1].activation is not Activation.NONE
        or net.output_dim != 1
    ):
        raise ValidationError(
            "featgen", "critic must be affine+LeakyReLU followed by a scalar affine layer"
        )


def _add_grads(a: Sequence[LayerGrad], b: Sequence[LayerGrad]) -> list[LayerGrad]:
    return [
        LayerGrad(weight=x.weight + y.weight, bias=x.bias + y.bias)
        for x, y in zip(a, b, strict=True)
    ]


def critic_input_gradient(
    discriminator: Mlp, x: np.ndarray, cond: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the critic with respect to the feature part of its input.

    Returns ``(gradient, first-layer pre-activation)``.
    """
    n, d = x.shape
    _, cache = forward(discriminator, np.hstack([x, cond]))
    _, grad_in = backward(discriminator, cache, np.ones((n, 1)))
    return grad_in[:, :d], cache.preacts[0]


def gradient_penalty(
    discriminator: Mlp, x_hat: np.ndarray, cond: np.ndarray, lambda_gp: float
) -> tuple[float, list[LayerGrad]]:
    """``lambda * mean((||grad D(x_hat)|| - 1)^2)`` and its gradient w.r.t. the critic.

    The critic gradient is ``W1x^T (m * w2)`` with ``m`` the LeakyReLU
    derivative at the first pre-activation. ``m`` is piecewise constant, so
    the penalty depends on the parameters only through ``W1x`` and ``w2``.
    """
    _check_critic(discriminator)
    n, d = x_hat.shape
    grad_x, preact = critic_input_gradient(discriminator, x_hat, cond)
    norms = np.linalg.norm(grad_x, axis=1)
    penalty = float(lambda_gp * np.mean((norms - 1.0) ** 2))
    if not np.isfinite(penalty):
        raise ValidationError("featgen", "gradient penalty is not finite")

    first, second = discriminator.layers
    mask = leaky_relu_grad(preact, first.slope)
    u = mask * second.weight[0]
    safe = np.where(norms > 0.0, norms, 1.0)
    coeff = np.where(norms > 0.0, 2.0 * lambda_gp * (norms - 1.0) / (safe * n), 0.0)
    g_grad = coeff[:, None] * grad_x
    w1 = np.zeros_like(first.weight)
    w1[:, :d] = u.T @ g_grad
    w2 = (mask * (g_grad @ first.weight[:, :d].T)).sum(axis=0)[None, :]
    grads = [
        LayerGrad(weight=w1, bias=np.zeros_like(first.bias)),
        LayerGrad(weight=w2, bias=np.zeros_like(second.bias)),
    ]
    return penalty, grads


def wgan_gp_loss(
    discriminator: Mlp,
    x_real: np.ndarray,
    x_gen: np.ndarray,
    cond: np.ndarray,
    alpha: np.ndarray,
    lambda_gp: float,
) -> tuple[WganGpTerms, list[LayerGrad]]:
    """Critic terms at real, generated and interpolated features.

    Gradients are those of the critic loss ``-objective`` with respect to
    the critic parameters. ``alpha`` holds one interpolation weight per sample.
    """
    _check_critic(discriminator)
    n = x_real.shape[0]
    if x_gen.shape != x_real.shape or alpha.shape != (n,):
        raise ValidationError("featgen", "real, generated and alpha batches must align")
    out_real, cache_real = forward(discriminator, np.hstack([x_real, cond]))
    out_fake, cache_fake = forward(discriminator, np.hstack([x_gen, cond]))
    real_grads, _ = backward(discriminator, cache_real, np.full((n, 1), -1.0 / n))
    fake_grads, _ = backward(discriminator, cache_fake, np.full((n, 1), 1.0 / n))
    x_hat = alpha[:, None] * x_real + (1.0 - alpha[:, None]) * x_gen
    penalty, gp_grads = gradient_penalty(discriminator, x_hat, cond, lambda_gp)
    terms = WganGpTerms(
        critic_real=float(out_real.mean()),
        critic_fake=float(out_fake.mean()),
        gradient_penalty=penalty,
    )
    return terms, _add_grads(_add_grads(real_grads, fake_grads), gp_grads)


def cls_loss(classifier: Mlp, x: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of ``labels``; gradient w.r.t. ``x`` only."""
    loss, grads_in, _ = _classifier_pass(classifier, x, labels)
    return loss, grads_in


def _classifier_pass(
    classifier: Mlp, x: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray, list[LayerGrad]]:
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = classifier.output_dim
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValidationError("featgen", f"label out of range for {n_classes} classes")
    probs, cache = forward(classifier, x)
    n = labels.shape[0]
    picked = probs[np.arange(n), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, np.finfo(np.float64).tiny))))
    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0
    grads, grad_in = backward(classifier, cache, delta / n, from_preactivation=True)
    return loss, grad_in, grads


def recon_loss(reconstructor: Mlp, x: np.ndarray, cond: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean L2 distance (not squared) between ``R(x)`` and the condition vectors."""
    out, cache = forward(reconstructor, x)
    if out.shape != cond.shape:
        raise ValidationError(
            "featgen", f"reconstructor emits {out.shape}, conditions are {cond.shape}"
        )
    diff = out - cond
    norms = np.linalg.norm(diff, axis=1)
    n = x.shape[0]
    safe = np.where(norms > 0.0, norms, 1.0)
    grad_out = np.where(norms[:, None] > 0.0, diff / (safe[:, None] * n), 0.0)
    _, grad_in = backward(reconstructor, cache, grad_out)
    return float(norms.mean()), grad_in


def _batches(n: int, batch: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch] for i in range(0, n, batch)]


def pretrain_classifier(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    *,
    epochs: int,
    lr: float,
    batch: int,
    rng: np.random.Generator,
) -> Mlp:
    """Softmax classifier trained by cross-entropy with plain minibatch SGD."""
    if features.shape[0] == 0:
        raise ValidationError("featgen", "cannot pretrain a classifier on empty data")
    net = init_classifier(features.shape[1], n_classes, rng)
    for _ in range(epochs):
        for index in _batches(features.shape[0], batch, rng):
            _, _, grads = _classifier_pass(net, features[index], labels[index])
            net.sgd_step(grads, lr)
    loss, _, _ = _classifier_pass(net, features, labels)
    LOGGER.info("Pretrained classifier: %d epochs, final loss %.4f", epochs, loss)
    return net


def classifier_accuracy(classifier: Mlp, features: np.ndarray, labels: np.ndarray) -> float:
    if features.shape[0] == 0:
        return 0.0
    probs, _ = forward(classifier, features)
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def pretrain_reconstructor(
    features: np.ndarray,
    labels: np.ndarray,
    conditions: ConditionTable,
    cfg: GanConfig,
    *,
    rng: np.random.Generator,
) -> Mlp:
    """Regress each feature onto its class condition vector (mean squared error, SGD)."""
    if features.shape[0] == 0:
        raise ValidationError("featgen", "cannot pretrain a reconstructor on empty data")
    net = init_reconstructor(cfg, rng)
    targets = conditions.lookup(labels)
    for _ in range(cfg.pretrain_epochs):
        for index in _batches(features.shape[0], cfg.pretrain_batch, rng):
            out, cache = forward(net, features[index])
            grads, _ = backward(net, cache, (out - targets[index]) / len(index))
            net.sgd_step(grads, cfg.pretrain_lr)
    loss, _ = recon_loss(net, features, targets)
    LOGGER.info("Pretrained reconstructor: final mean L2 distance %.4f", loss)
    return net


def generate_batch(
    generator: Mlp,
    conditions: ConditionTable,
    classes: Sequence[int] | np.ndarray,
    rng: np.random.Generator,
    d_z: int,
) -> np.ndarray:
    cond = conditions.lookup(classes)
    z = rng.standard_normal((cond.shape[0], d_z))
    out, _ = forward(generator, np.hstack([z, cond]))
    return out


def _validation_accuracy(
    generator: Mlp,
    classifier: Mlp,
    conditions: ConditionTable,
    classes: np.ndarray,
    cfg: GanConfig,
) -> float:
    rng = np.random.default_rng(derive_seed(cfg.seed, "featgen.validation"))
    wanted = np.repeat(classes, cfg.eval_samples)
    generated = generate_batch(generator, conditions, wanted, rng, cfg.d_z)
    return classifier_accuracy(classifier, generated, wanted)


def _check_dims(feature_dim: int, conditions: ConditionTable, cfg: GanConfig) -> None:
    if feature_dim != cfg.feature_dim or conditions.dim != cfg.cond_dim:
        raise ValidationError(
            "featgen",
            f"data dims (features={feature_dim}, cond={conditions.dim}) do not match config "
            f"(feature_dim={cfg.feature_dim}, cond_dim={cfg.cond_dim})",
        )


def generator_loss(
    generator: Mlp,
    discriminator: Mlp,
    classifier: Mlp,
    reconstructor: Mlp,
    z: np.ndarray,
    cond: np.ndarray,
    labels: np.ndarray,
    cfg: GanConfig,
) -> tuple[float, list[LayerGrad]]:
    """``-E[D(G(z, c))] + beta * L_cls + gamma * L_recon`` and its gradient w.r.t. G.

    The critic, classifier and reconstructor only pass gradients through.
    """
    d = generator.output_dim
    x_gen, g_cache = forward(generator, np.hstack([z, cond]))
    critic_out, d_cache = forward(discriminator, np.hstack([x_gen, cond]))
    _, d_in = backward(discriminator, d_cache, np.full((z.shape[0], 1), -1.0 / z.shape[0]))
    l_cls, cls_grad = cls_loss(classifier, x_gen, labels)
    l_recon, recon_grad = recon_loss(reconstructor, x_gen, cond)
    loss = float(-critic_out.mean()) + cfg.beta * l_cls + cfg.gamma * l_recon
    grad_x = d_in[:, :d] + cfg.beta * cls_grad + cfg.gamma * recon_grad
    grads, _ = backward(generator, g_cache, grad_x)
    return loss, grads


@contextmanager
def _divergence(what: str, iteration: int) -> Iterator[None]:
    """A non-finite network output inside the block becomes a divergence."""
    try:
        yield
    except ValidationError as exc:
        raise TrainingDivergedError(what, iteration) from exc


def train_gan(
    features: np.ndarray,
    labels: np.ndarray,
    conditions: ConditionTable,
    classifier: Mlp,
    reconstructor: Mlp,
    cfg: GanConfig,
) -> GanState:
    """Alternating WGAN-GP training with frozen classifier/reconstructor regularizers.

    Each iteration runs ``d_train_iter`` critic steps then one generator
    step. The generator kept is the one with the best frozen-classifier
    accuracy on generated validation features, checked every
    ``eval_every`` iterations and at the end.
    """
    n, d = features.shape
    if n == 0:
        raise ValidationError("featgen", "cannot train the generator on empty data")
    _check_dims(d, conditions, cfg)
    labels = np.asarray(labels, dtype=np.int64)
    generator = init_generator(cfg, substream(cfg.seed, "featgen.generator.init"))
    discriminator = init_discriminator(cfg, substream(cfg.seed, "featgen.critic.init"))
    rng = substream(cfg.seed, "featgen.train")
    present = np.unique(labels)

    best = generator.copy()
    best_iteration = 0
    with _divergence("generator output", 0):
        best_accuracy = _validation_accuracy(generator, classifier, conditions, present, cfg)

    for iteration in range(1, cfg.max_iter + 1):
        for _ in range(cfg.d_train_iter):
            index = rng.integers(0, n, size=cfg.batch)
            cond = conditions.lookup(labels[index])
            z = rng.standard_normal((cfg.batch, cfg.d_z))
            with _divergence("generator output", iteration):
                x_gen, _ = forward(generator, np.hstack([z, cond]))
            alpha = rng.uniform(0.0, 1.0, size=cfg.batch)
            with _divergence("critic loss", iteration):
                terms, d_grads = wgan_gp_loss(
                    discriminator, features[index], x_gen, cond, alpha, cfg.lambda_gp
                )
            if not np.isfinite(terms.d_loss):
                raise TrainingDivergedError("critic loss", iteration)
            discriminator.sgd_step(d_grads, cfg.lr)

        index = rng.integers(0, n, size=cfg.batch)
        batch_labels = labels[index]
        cond = conditions.lookup(batch_labels)
        z = rng.standard_normal((cfg.batch, cfg.d_z))
        with _divergence("generator step", iteration):
            g_loss, g_grads = generator_loss(
                generator, discriminator, classifier, reconstructor, z, cond, batch_labels, cfg
            )
        if not np.isfinite(g_loss):
            raise TrainingDivergedError("generator loss", iteration)
        generator.sgd_step(g_grads, cfg.lr)

        METRICS.gan_iterations_total.inc()
        if iteration % cfg.eval_every == 0 or iteration == cfg.max_iter:
            METRICS.gan_loss.labels(term="critic").set(terms.d_loss)
            METRICS.gan_loss.labels(term="generator").set(g_loss)
            with _divergence("generator output", iteration):
                accuracy = _validation_accuracy(generator, classifier, conditions, present, cfg)
            LOGGER.debug(
                "GAN iteration %d: critic=%.4f generator=%.4f val_acc=%.3f",
                iteration,
                terms.d_loss,
                g_loss,
                accuracy,
            )
            if accuracy > best_accuracy:
                best, best_iteration, best_accuracy = generator.copy(), iteration, accuracy

    METRICS.generator_val_accuracy.set(best_accuracy)
    LOGGER.info(
        "Selected generator checkpoint from iteration %d (val accuracy %.3f)",
        best_iteration,
        best_accuracy,
    )
    return GanState(
        generator=best,
        discriminator=discriminator,
        classifier=classifier,
        reconstructor=reconstructor,
        conditions=conditions,
        config=cfg,
        selected_iteration=best_iteration,
        val_accuracy=best_accuracy,
    )


def fit_feature_generator(
    store: FeatureStore, conditions: ConditionTable, cfg: GanConfig
) -> GanState:
    """Pretrain the frozen regularizers on real features, then train the GAN."""
    _, classes, vectors = store.matrix()
    if vectors.shape[0] == 0:
        raise ValidationError("featgen", "feature store is empty")
    _check_dims(vectors.shape[1], conditions, cfg)
    classifier = pretrain_classifier(
        vectors,
        classes,
        conditions.n_classes,
        epochs=cfg.pretrain_epochs,
        lr=cfg.pretrain_lr,
        batch=cfg.pretrain_batch,
        rng=substream(cfg.seed, "featgen.classifier"),
    )
    reconstructor = pretrain_reconstructor(
        vectors, classes, conditions, cfg, rng=substream(cfg.seed, "featgen.reconstructor")
    )
    return train_gan(vectors, classes, conditions, classifier, reconstructor, cfg)


def generate(state: GanState, class_index: int, rng: np.random.Generator) -> np.ndarray:
    """One synthetic feature ``G(z, s_c)`` with ``z ~ N(0, I)``."""
    if not (0 <= class_index < state.n_classes):
        raise ValidationError("featgen", f"unknown class {class_index}")
    return generate_batch(
        state.generator, state.conditions, [class_index], rng, state.config.d_z
    )[0]


# --- checkpoints -------------------------------------------------------------


def _tensors(state: GanState) -> list[np.ndarray]:
    return [
        *state.generator.parameters(),
        *state.discriminator.parameters(),
        *state.classifier.parameters(),
        *state.reconstructor.parameters(),
        state.conditions.vectors,
    ]


def save_checkpoint(state: GanState, path: str | Path) -> None:
    """``TFGN`` header, JSON config echo, then raw f32 tensors in declaration order."""
    echo = json.dumps(
        {
            "config": asdict(state.config),
            "n_classes": state.n_classes,
            "selected_iteration": state.selected_iteration,
            "val_accuracy": state.val_accuracy,
        },
        sort_keys=True,
    ).encode("utf-8")
    parts = [_CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(echo)), echo]
    parts.extend(t.astype("<f4").tobytes() for t in _tensors(state))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> GanState:
    source = str(path)
    data = Path(path).read_bytes()
    if len(data) < _CHECKPOINT_HEADER.size:
        raise ParseError("featgen", source, "truncated header", offset=len(data))
    magic, version, echo_len = _CHECKPOINT_HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        raise ParseError("featgen", source, f"not a v{CHECKPOINT_VERSION} checkpoint", offset=0)
    start = _CHECKPOINT_HEADER.size
    try:
        echo: dict[str, Any] = json.loads(data[start : start + echo_len])
        cfg = GanConfig(**echo["config"])
        n_classes = int(echo["n_classes"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError("featgen", source, f"bad config echo: {exc}", offset=start) from exc

    rng = np.random.default_rng(0)
    state = GanState(
        generator=init_generator(cfg, rng),
        discriminator=init_discriminator(cfg, rng),
        classifier=init_classifier(cfg.feature_dim, n_classes, rng),
        reconstructor=init_reconstructor(cfg, rng),
        conditions=ConditionTable(np.ones((n_classes, cfg.cond_dim))),
        config=cfg,
        selected_iteration=int(echo.get("selected_iteration", 0)),
        val_accuracy=float(echo.get("val_accuracy", 0.0)),
    )
    offset = start + echo_len
    loaded: list[np.ndarray] = []
    for tensor in _tensors(state):
        size = tensor.size * 4
        if offset + size > len(data):
            raise ParseError("featgen", source, "truncated tensor data", offset=offset)
        values = np.frombuffer(data, dtype="<f4", count=tensor.size, offset=offset)
        loaded.append(values.astype(np.float64).reshape(tensor.shape))
        offset += size
    if offset != len(data):
        raise ParseError("featgen", source, "trailing bytes after tensors", offset=offset)

    nets = (state.generator, state.discriminator, state.classifier, state.reconstructor)
    cursor = 0
    for net in nets:
        for layer in net.layers:
            layer.weight = loaded[cursor]
            layer.bias = loaded[cursor + 1]
            cursor += 2
    state.conditions = ConditionTable(loaded[cursor])
    return state
