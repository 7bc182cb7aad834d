"""Natural training, IWDD adversarial training and robustness evaluation."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .attack import AttackConfig, iwda_batch
from .diffcore import NetworkSpec, backward, cross_entropy_head, init_params, make_optimizer, optimizer_step
from .errors import NumericError, ValidationError
from .models import TrainedModel

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    hidden: tuple = (128, 64)
    activation: str = "relu"
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch size must be >= 1")
        if not self.learning_rate > 0:
            raise ValidationError("learning rate must be positive")


def _inner_default():
    return AttackConfig(max_iter=20, n_critic=5, tau=0.1)


@dataclass
class DefenseConfig:
    beta: float = 0.1
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=_inner_default)
    max_skip_fraction: float = 0.1

    def __post_init__(self):
        if self.beta < 0:
            raise ValidationError("beta must be >= 0")
        if self.train.epochs < 1:
            raise ValidationError("IWDD needs at least one epoch")


@dataclass
class RiskReport:
    clean_accuracy: float
    adversarial_accuracy: dict
    risk: float = None
    beta: float = None

    @property
    def clean_error(self):
        return 1.0 - self.clean_accuracy

    def row(self, method):
        cells = [method, f"{100 * self.clean_accuracy:.2f}"]
        cells += [f"{100 * v:.2f}" for v in self.adversarial_accuracy.values()]
        return cells


def make_spec(n_in, n_classes, cfg):
    return NetworkSpec((n_in, *cfg.hidden, n_classes), cfg.activation, "logits")


def accuracy(model, dataset):
    return float(np.mean(model.predict(dataset.images) == dataset.labels))


def _ce_grad(spec, params, X, y):
    return backward(spec, params, X.reshape(len(X), -1), cross_entropy_head(y))


def _batches(n, size, rng):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _init(dataset, cfg, spec):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    spec = spec or make_spec(int(np.prod(dataset.shape)), dataset.n_classes, cfg)
    return spec, init_params(spec, rng), rng


def natural_train(dataset, cfg=None, spec=None, validation=None):
    """Mini-batch SGD on the mean cross-entropy."""
    cfg = cfg or TrainConfig()
    spec, params, rng = _init(dataset, cfg, spec)
    opt = make_optimizer("sgd", cfg.learning_rate, spec.n_params)
    for _ in range(cfg.epochs):
        for idx in _batches(len(dataset), cfg.batch_size, rng):
            g = _ce_grad(spec, params, dataset.images[idx], dataset.labels[idx])
            if not np.isfinite(g.loss):
                raise NumericError("training loss diverged", state=params)
            params, opt = optimizer_step(opt, params, g.grad_params)
    model = TrainedModel(spec, params, dataset.shape,
                         {"method": "natural", "seed": cfg.seed, "epochs": cfg.epochs,
                          "data": dict(dataset.provenance)})
    model.provenance["train_accuracy"] = accuracy(model, dataset)
    if validation is not None:
        model.provenance["validation_accuracy"] = accuracy(model, validation)
    return model


def iwdd_train(dataset, cfg=None, spec=None, validation=None, attacker=None):
    """IWDD adversarial training.

    Every batch: craft x_adv with a short IWD attack against the current
    classifier (the critic persists across batches), then descend
    beta * CE(x) + CE(x_adv). ``attacker(X, Y, model, rng, critic) -> (X_adv, critic)``
    replaces the inner attack when given.
    """
    cfg = cfg or DefenseConfig()
    tc = cfg.train
    spec, params, rng = _init(dataset, tc, spec)
    opt = make_optimizer("sgd", tc.learning_rate, spec.n_params)
    attack_rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 2]))
    critic = None
    skipped = total = 0
    for _ in range(tc.epochs):
        for idx in _batches(len(dataset), tc.batch_size, rng):
            X, Y = dataset.images[idx], dataset.labels[idx]
            model = TrainedModel(spec, params, dataset.shape)
            total += 1
            try:
                if attacker is None:
                    Xa, info = iwda_batch(X, Y, model, cfg.attack, attack_rng, critic, return_state=True,
                                          shared_critic=True)
                    critic = info["critic"]
                else:
                    Xa, critic = attacker(X, Y, model, attack_rng, critic)
            except NumericError as exc:
                skipped += 1
                log.warning("inner attack diverged, batch skipped: %s", exc)
                if skipped > cfg.max_skip_fraction * max(total, 10):
                    raise NumericError(f"{skipped} of {total} batches skipped") from exc
                continue
            g_adv = _ce_grad(spec, params, Xa, Y).grad_params
            g = g_adv if cfg.beta == 0 else cfg.beta * _ce_grad(spec, params, X, Y).grad_params + g_adv
            params, opt = optimizer_step(opt, params, g)
    model = TrainedModel(spec, params, dataset.shape,
                         {"method": "iwdd", "seed": tc.seed, "epochs": tc.epochs, "beta": cfg.beta,
                          "skipped_batches": skipped, "data": dict(dataset.provenance)})
    if skipped > cfg.max_skip_fraction * total:
        raise NumericError(f"{skipped} of {total} batches skipped")
    model.provenance["train_accuracy"] = accuracy(model, dataset)
    if validation is not None:
        model.provenance["validation_accuracy"] = accuracy(model, validation)
    return model


def empirical_adversarial_risk(model, X, Y, attacker, beta):
    """Mean of beta * CE(h(x), y) + CE(h(x_adv), y); a lower bound on the true risk."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValidationError("empty dataset")
    Xa = attacker(X, Y)
    return float(np.mean(beta * model.loss(X, Y) + model.loss(Xa, Y)))


def evaluate_defense(model, attackers, X, Y, beta=None):
    """Clean accuracy and per-attacker accuracy on all samples.

    ``attackers`` maps a name to ``attacker(X, Y) -> X_adv``.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y)
    if len(X) == 0:
        raise ValidationError("empty dataset")
    clean = float(np.mean(model.predict(X) == Y))
    adv = {}
    risk = None
    for name, attacker in attackers.items():
        Xa = attacker(X, Y)
        adv[name] = float(np.mean(model.predict(Xa) == Y))
        if beta is not None and risk is None and name != "clean":
            risk = float(np.mean(beta * model.loss(X, Y) + model.loss(Xa, Y)))
    return RiskReport(clean, adv, risk, beta)
