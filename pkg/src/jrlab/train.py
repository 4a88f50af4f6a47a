"""Joint-loss training: cross-entropy + (lambda_jr / 2) * batch-mean ||J||_F^2.

SGD with momentum and weight decay, ten-fold learning-rate quenches,
few-shot subsampling and optional FGSM adversarial training.  The Jacobian
term is always evaluated on the dropout-free network.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, DataError
from .jacreg import ConfigError, jacobian_terms, jacreg_exact
from .nn import Mlp, ParamGrads, backward, forward, predict, softmax_cross_entropy, xavier_init
from .robust import fgsm_attack

log = logging.getLogger(__name__)

QUENCH_FACTOR = 10.0


class TrainingDivergedError(RuntimeError):
    """The loss became non-finite; carries the state at the failing step."""

    def __init__(self, message, iteration, model, history):
        super().__init__(message)
        self.iteration = iteration
        self.model = model
        self.history = history


def _int_or(value, word):
    if isinstance(value, str) and value.strip().lower() == word:
        return word
    return int(value)


def _opt_float(value):
    if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none", "off")):
        return None
    return float(value)


def _opt_int(value):
    if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none", "all")):
        return None
    return int(value)


def _int_tuple(value):
    if isinstance(value, str):
        return tuple(int(v) for v in value.replace(" ", "").split(",") if v)
    return tuple(int(v) for v in value)


@dataclass
class TrainConfig:
    lambda_jr: float = 0.0
    lambda_wd: float = 0.0
    dropout_rate: float = 0.0
    n_proj: int | str = 1  # or "exact"
    eta0: float = 0.1
    quench_every: int = 5000
    total_iters: int = 15000
    batch_size: int | str = 100  # or "full"
    momentum: float = 0.9
    adv_eps_max: float | None = None
    seed: int = 0
    samples_per_class: int | None = None
    hidden: tuple = (128, 64)
    activation: str = "tanh"
    log_every: int = 100
    n_eval_jac: int = 1000
    dtype: str = "float64"

    _COERCE = {
        "lambda_jr": float,
        "lambda_wd": float,
        "dropout_rate": float,
        "n_proj": lambda v: _int_or(v, "exact"),
        "eta0": float,
        "quench_every": int,
        "total_iters": int,
        "batch_size": lambda v: _int_or(v, "full"),
        "momentum": float,
        "adv_eps_max": _opt_float,
        "seed": int,
        "samples_per_class": _opt_int,
        "hidden": _int_tuple,
        "activation": str,
        "log_every": int,
        "n_eval_jac": int,
        "dtype": str,
    }

    def __post_init__(self):
        for name, conv in self._COERCE.items():
            setattr(self, name, conv(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.lambda_jr < 0 or self.lambda_wd < 0:
            raise ConfigError("lambda_jr and lambda_wd must be non-negative")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.n_proj != "exact" and self.n_proj < 1:
            raise ConfigError("n_proj must be >= 1 or 'exact'")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.eta0 <= 0 or self.quench_every < 1 or self.total_iters < 0:
            raise ConfigError("eta0 > 0, quench_every >= 1, total_iters >= 0 required")
        if self.batch_size != "full" and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1 or 'full'")
        if self.adv_eps_max is not None and self.adv_eps_max < 0:
            raise ConfigError("adv_eps_max must be non-negative")
        if self.samples_per_class is not None and self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")
        if self.activation not in ("tanh", "relu"):
            raise ConfigError("activation must be tanh or relu")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        unknown = sorted(set(mapping) - set(cls.keys()))
        if unknown:
            raise ConfigError(
                f"unknown config key(s) {', '.join(unknown)}; valid keys: {', '.join(cls.keys())}"
            )
        return cls(**mapping)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig.from_mapping({**self.to_mapping(), **changes})

    def to_mapping(self) -> dict:
        return {k: getattr(self, k) for k in self.keys()}

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_mapping().items():
            if k == "hidden":
                v = ",".join(str(h) for h in v)
            elif v is None:
                v = "none"
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    def learning_rate(self, t: int) -> float:
        return self.eta0 * QUENCH_FACTOR ** -(t // self.quench_every)


def parse_key_values(text: str) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment; dashes fold to underscores."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def load_config(path) -> dict:
    with open(path) as fh:
        return parse_key_values(fh.read())


@dataclass
class TrainHistory:
    iteration: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    reg_value: list = field(default_factory=list)
    test_acc: list = field(default_factory=list)
    jf_norm: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    train_size: int = 0

    COLUMNS = ("iteration", "loss", "reg_value", "test_acc", "jf_norm", "lr")

    def append(self, **row) -> None:
        if self.iteration and row["iteration"] <= self.iteration[-1]:
            raise ValueError("history iterations must increase")
        for k in self.COLUMNS:
            getattr(self, k).append(row[k])

    def rows(self):
        return list(zip(*(getattr(self, k) for k in self.COLUMNS)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# train_size={self.train_size}\n")
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in self.rows():
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def subsample_per_class(dataset: Dataset, k: int, seed: int = 0) -> Dataset:
    """Exactly ``k`` examples of every class, chosen by a seeded shuffle."""
    rng = np.random.default_rng(seed)
    picked = []
    for c in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size < k:
            raise DataError(f"class {c} has {idx.size} examples, {k} requested")
        picked.append(rng.permutation(idx)[:k])
    return dataset.subset(np.sort(np.concatenate(picked)))


def sgd_step(model: Mlp, velocity: ParamGrads, grads: ParamGrads, eta, rho, lambda_wd):
    """``v <- rho v - eta (g + lambda_wd theta)``, ``theta <- theta + v``, in place.

    Weight decay covers biases as well as weights.
    """
    for p, v, g in zip(model.params(), velocity.arrays(), grads.arrays()):
        v *= rho
        if lambda_wd:
            v -= eta * (g + lambda_wd * p)
        else:
            v -= eta * g
        p += v
    return model, velocity


def fgsm_augment(batch_raw, labels, model: Mlp, eps_max: float, rng, normalizer):
    """FGSM-corrupt each example with its own amplitude drawn from U[0, eps_max].

    Returns raw images (cropped to [0, 1]); the caller preprocesses them.
    """
    if eps_max == 0:
        return np.array(batch_raw, copy=True)
    eps = rng.uniform(0.0, eps_max, size=len(labels))
    return fgsm_attack(model, batch_raw, labels, eps, normalizer)


def build_model(config: TrainConfig, n_in: int, n_out: int) -> Mlp:
    dims = [n_in, *config.hidden, n_out]
    return xavier_init(dims, config.activation, seed=config.seed, dtype=np.dtype(config.dtype))


def joint_loss_grads(
    model: Mlp,
    X: np.ndarray,
    y: np.ndarray,
    config: TrainConfig,
    drop_rng=None,
    proj_rng=None,
):
    """Supervised loss, regularizer value and the joint gradient for one batch.

    Weight decay is not included (it is applied by :func:`sgd_step`).  When no
    dropout is active the supervised and Jacobian adjoints share one backward
    pass.
    """
    L = len(model.layers)
    train_mode = config.dropout_rate > 0
    logits, trace = forward(model, X, config.dropout_rate, train_mode, drop_rng)
    loss, dlogits = softmax_cross_entropy(logits, y)
    grads = ParamGrads.zeros_like(model)
    inj = [None] * L
    inj[-1] = dlogits
    reg = float("nan")
    if config.lambda_jr > 0:
        if train_mode:
            _, jtrace = forward(model, X)
            jinj = [None] * L
        else:
            jtrace, jinj = trace, inj
        per = jacobian_terms(
            model,
            jtrace,
            n_proj=config.n_proj,
            rng=proj_rng,
            weight=config.lambda_jr / 2.0,
            grads=grads,
            inj=jinj,
        )
        reg = float(per.mean())
        if train_mode:
            backward(model, jtrace, jinj, grads)
    backward(model, trace, inj, grads)
    return loss, reg, grads


def evaluate(model: Mlp, testset: Dataset, n_eval_jac: int = 1000):
    """Clean accuracy (percent) and mean per-point ``||J||_F`` on the test set."""
    acc = 100.0 * float(np.mean(predict(model, testset.inputs) == testset.labels))
    n = min(n_eval_jac, len(testset))
    norms = []
    for s in range(0, n, 200):
        r = jacreg_exact(model, testset.inputs[s : min(s + 200, n)], with_grads=False)
        norms.append(r.frobenius_norms)
    jf = float(np.mean(np.concatenate(norms))) if norms else float("nan")
    return acc, jf


def train(
    model: Mlp,
    dataset: Dataset,
    config: TrainConfig,
    testset: Dataset | None = None,
) -> tuple[Mlp, TrainHistory]:
    """Minimize the joint loss in place on ``model``; returns it with the history."""
    if config.samples_per_class is not None:
        dataset = subsample_per_class(dataset, config.samples_per_class, config.seed)
    dtype = np.dtype(config.dtype)
    if model.dtype != dtype:
        model = model.astype(dtype)
    X_all = dataset.inputs.astype(dtype, copy=False)
    y_all = dataset.labels
    N = len(dataset)
    full = config.batch_size == "full" or config.batch_size >= N
    bs = N if full else config.batch_size

    streams = np.random.SeedSequence(config.seed).spawn(4)
    batch_rng, drop_rng, proj_rng, adv_rng = (
        np.random.Generator(np.random.Philox(s)) for s in streams
    )
    velocity = ParamGrads.zeros_like(model)
    history = TrainHistory(train_size=N)
    order = np.arange(N)
    cursor = N

    for t in range(config.total_iters + 1):
        last = t == config.total_iters
        if full:
            idx = order
        else:
            if cursor + bs > N:
                order = batch_rng.permutation(N)
                cursor = 0
            idx = order[cursor : cursor + bs]
            cursor += bs
        X, y = X_all[idx], y_all[idx]
        if config.adv_eps_max:
            raw = fgsm_augment(
                dataset.images[idx], y, model, config.adv_eps_max, adv_rng, dataset.normalizer
            )
            X = dataset.normalizer(raw).astype(dtype, copy=False)
        lr = config.learning_rate(t)
        loss, reg, grads = joint_loss_grads(model, X, y, config, drop_rng, proj_rng)
        if not np.isfinite(loss) or (config.lambda_jr > 0 and not np.isfinite(reg)):
            raise TrainingDivergedError(
                f"non-finite loss at iteration {t} (loss={loss}, reg={reg})", t, model, history
            )
        if t % config.log_every == 0 or last:
            acc, jf = (float("nan"), float("nan"))
            if testset is not None:
                acc, jf = evaluate(model, testset, config.n_eval_jac)
            history.append(iteration=t, loss=loss, reg_value=reg, test_acc=acc, jf_norm=jf, lr=lr)
            log.debug("iter %d loss %.4f reg %.4g acc %.2f", t, loss, reg, acc)
        if last:
            break
        sgd_step(model, velocity, grads, lr, config.momentum, config.lambda_wd)
    return model, history
