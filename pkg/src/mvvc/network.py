"""The volumetric classifier, its 2D baseline variant and the training harness."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted, check_random_state

from .autodiff import (
    Conv3D, Dense, Dropout, Flatten, MaxPool3D, ParamSet, ReLU, Sequential, TrainSchedule,
    lr_at, momentum_step, softmax, softmax_cross_entropy,
)
from .errors import FormatError, NumericalError, ShapeError
from .samples import (
    N_CHANNELS, PATCH, SAMPLE_SHAPE, TEST, TRAIN, VALIDATION, BaselineMode, Dataset,
    reshape_baseline,
)

__all__ = [
    "NetworkSpec",
    "TrainReport",
    "build_model",
    "build_network",
    "prepare_inputs",
    "train",
    "predict",
    "evaluate",
    "run_correspondence_experiments",
    "save_model",
    "load_model",
    "VolumetricCNNClassifier",
]


@dataclass(frozen=True)
class NetworkSpec:
    """Layer layout.  2D networks are 3D ones with unit kernel/pool depth."""

    input_shape: tuple[int, int, int, int] = (PATCH, PATCH, N_CHANNELS, 1)
    conv_kernels: tuple[tuple[int, int, int], ...] = ((3, 3, 5), (3, 3, 3))
    conv_filters: tuple[int, ...] = (32, 64)
    pool_windows: tuple[tuple[int, int, int] | None, ...] = ((2, 2, 2), None)
    fc_widths: tuple[int, ...] = (512, 512, 128, 2)
    dropout_keep_prob: float = 0.5
    feature_width: int = 512

    def __post_init__(self):
        norm = lambda t: tuple(tuple(int(v) for v in x) if x is not None else None for x in t)
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "conv_kernels", norm(self.conv_kernels))
        object.__setattr__(self, "pool_windows", norm(self.pool_windows))
        object.__setattr__(self, "conv_filters", tuple(int(v) for v in self.conv_filters))
        object.__setattr__(self, "fc_widths", tuple(int(v) for v in self.fc_widths))
        if len(self.input_shape) != 4:
            raise ShapeError(f"input shape must be (D, H, W, C), got {self.input_shape}")
        if not (len(self.conv_kernels) == len(self.conv_filters) == len(self.pool_windows)):
            raise ValueError("conv_kernels, conv_filters and pool_windows must have equal length")
        if len(self.fc_widths) < 2:
            raise ValueError("need at least two fully connected layers")
        if self.fc_widths[0] != self.feature_width:
            raise ValueError(f"first FC width {self.fc_widths[0]} != feature width {self.feature_width}")
        if not 0 < self.dropout_keep_prob <= 1:
            raise ValueError("dropout_keep_prob must lie in (0, 1]")

    @property
    def n_classes(self) -> int:
        return self.fc_widths[-1]

    def for_mode(self, mode: BaselineMode | str) -> "NetworkSpec":
        """Spec of the same family for a correspondence mode."""
        mode = BaselineMode(mode)
        if mode is BaselineMode.FULL_VOLUME:
            return self
        flat = lambda t: tuple((x[0], x[1], 1) if x is not None else None for x in t)
        side = PATCH if mode is BaselineMode.UNRELATED_PATCHES else PATCH * int(math.isqrt(N_CHANNELS))
        return replace(self, input_shape=(side, side, 1, 1), conv_kernels=flat(self.conv_kernels),
                       pool_windows=flat(self.pool_windows))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


def build_model(spec: NetworkSpec) -> Sequential:
    layers = []
    for i, (k, f, p) in enumerate(zip(spec.conv_kernels, spec.conv_filters, spec.pool_windows)):
        layers.append(Conv3D(f"conv{i + 1}", k, f))
        layers.append(ReLU())
        if p is not None:
            layers.append(MaxPool3D(p, name=f"pool{i + 1}"))
    layers.append(Flatten())
    n_fc = len(spec.fc_widths)
    for i, width in enumerate(spec.fc_widths):
        # small logit layer so an untrained net starts near uniform predictions
        layers.append(Dense(f"fc{i + 1}", width, init_scale=0.01 if i == n_fc - 1 else 1.0))
        if i < n_fc - 1:
            layers.append(ReLU())
            layers.append(Dropout(spec.dropout_keep_prob))
    return Sequential(layers, spec.input_shape)


def build_network(spec: NetworkSpec, seed: int = 0, dtype=np.float64) -> ParamSet:
    return build_model(spec).init_params(seed, dtype)


def feature_layer_index(model: Sequential) -> int:
    """Index of the layer whose output is the feature vector (first FC output)."""
    for i, layer in enumerate(model.layers):
        if isinstance(layer, Dense):
            return i
    raise ValueError("network has no dense layer")


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------


def prepare_inputs(X: np.ndarray, y: np.ndarray | None, mode: BaselineMode | str):
    """Network inputs (and labels) for a batch of ``(N, 13, 13, 16)`` samples.

    In the unrelated-patches mode every sample yields 16 rows, all carrying
    the sample's label.
    """
    mode = BaselineMode(mode)
    X = np.asarray(X)
    if X.ndim != 4 or X.shape[1:] != SAMPLE_SHAPE:
        raise ShapeError(f"expected samples of shape (N, {', '.join(map(str, SAMPLE_SHAPE))}), got {X.shape}")
    if mode is BaselineMode.FULL_VOLUME:
        xin = X[..., None]
        yin = y
    elif mode is BaselineMode.UNRELATED_PATCHES:
        xin = reshape_baseline(X, mode).reshape(-1, PATCH, PATCH, 1, 1)
        yin = None if y is None else np.repeat(np.asarray(y), N_CHANNELS)
    else:
        m = reshape_baseline(X, mode)
        xin = m[..., None, None]
        yin = y
    return xin, yin


@dataclass
class TrainReport:
    mode: str
    losses: list[float] = field(default_factory=list)
    epoch_steps: list[int] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    test_accuracy: float | None = None
    test_accesses: int = 0
    diverged: bool = False
    wall_clock: float = 0.0

    def results(self) -> dict:
        """Everything except timing (used for determinism comparisons)."""
        d = asdict(self)
        d.pop("wall_clock")
        return d

    def to_csv(self, path) -> None:
        ends = dict(zip(self.epoch_steps, zip(self.train_accuracy, self.val_accuracy)))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "train_acc", "val_acc"])
            for step, loss in enumerate(self.losses):
                tr, va = ends.get(step, ("", ""))
                w.writerow([step, repr(loss), tr if tr == "" else repr(tr), va if va == "" else repr(va)])


def _flag_divergence(losses: Sequence[float], window: int = 500, smooth: int = 50,
                     rel_tol: float = 0.05, abs_tol: float = 0.01) -> bool:
    """True when the smoothed loss ends any ``window``-step span clearly higher
    than it started."""
    if len(losses) < window + smooth:
        return False
    c = np.cumsum(np.concatenate([[0.0], losses]))
    ma = (c[smooth:] - c[:-smooth]) / smooth
    start, end = ma[:-window], ma[window:]
    return bool(np.any(end > start * (1 + rel_tol) + abs_tol))


def _forward_batches(model: Sequential, params: ParamSet, x: np.ndarray, batch: int = 512) -> np.ndarray:
    out = []
    for s in range(0, len(x), batch):
        out.append(model.forward(params, x[s : s + batch].astype(params.dtype, copy=False),
                                 train=False, record=False))
    return np.concatenate(out) if out else np.zeros((0, model.output_shape[0]))


def evaluate(model: Sequential, params: ParamSet, x: np.ndarray, y: np.ndarray) -> float:
    if len(x) == 0:
        return float("nan")
    logits = _forward_batches(model, params, x)
    return float(np.mean(np.argmax(logits, axis=1) == y))


def train(spec: NetworkSpec, dataset: Dataset, schedule: TrainSchedule,
          mode: BaselineMode | str = BaselineMode.FULL_VOLUME, dtype=np.float32,
          steps_per_epoch: int | None = None, train_eval_size: int = 1024,
          evaluate_test: bool = False, log=None) -> tuple[ParamSet, TrainReport]:
    """Minibatch momentum SGD with dropout.

    ``spec`` describes the 3D network; 2D modes derive their variant from it.
    The batch size counts samples, so every mode sees the same data per step.
    """
    mode = BaselineMode(mode)
    t0 = time.perf_counter()
    net_spec = spec.for_mode(mode)
    model = build_model(net_spec)
    tr = dataset.subset(TRAIN)
    va = dataset.subset(VALIDATION)
    if len(tr) == 0:
        raise ValueError("dataset has no training split")
    if net_spec.n_classes <= int(dataset.y.max()):
        raise ValueError("dataset labels exceed the network's class count")
    xtr, ytr = prepare_inputs(tr.X, tr.y, mode)
    xva, yva = prepare_inputs(va.X, va.y, mode)
    xtr = xtr.astype(dtype, copy=False)
    xva = xva.astype(dtype, copy=False)
    per = N_CHANNELS if mode is BaselineMode.UNRELATED_PATCHES else 1

    params = model.init_params(schedule.rng_seed, dtype)
    seeds = np.random.SeedSequence([schedule.rng_seed, 101]).spawn(3)
    shuffle_rng = np.random.default_rng(seeds[0])
    drop_rng = np.random.default_rng(seeds[1])
    eval_idx = np.random.default_rng(seeds[2]).permutation(len(tr))[:train_eval_size]
    xev, yev = prepare_inputs(tr.X[eval_idx], tr.y[eval_idx], mode)
    xev = xev.astype(dtype, copy=False)

    n = len(tr)
    bs = min(schedule.batch_size, n)
    spe = steps_per_epoch or max(1, n // bs)
    report = TrainReport(mode=mode.value)
    order = shuffle_rng.permutation(n)
    pos = 0
    for step in range(schedule.total_steps):
        if pos + bs > n:
            order = shuffle_rng.permutation(n)
            pos = 0
        idx = order[pos : pos + bs]
        pos += bs
        if per > 1:
            rows = (idx[:, None] * per + np.arange(per)[None]).ravel()
        else:
            rows = idx
        logits = model.forward(params, xtr[rows], train=True, rng=drop_rng)
        loss, dlogits = softmax_cross_entropy(logits, ytr[rows])
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite loss at step {step}")
        grads = model.backward(dlogits.astype(dtype, copy=False), params)
        try:
            momentum_step(params, grads, lr_at(schedule, step), schedule.momentum_mu)
        except NumericalError as exc:
            raise NumericalError(f"{exc} at step {step}") from exc
        report.losses.append(loss)
        if (step + 1) % spe == 0 or step + 1 == schedule.total_steps:
            report.epoch_steps.append(step)
            report.train_accuracy.append(evaluate(model, params, xev, yev))
            report.val_accuracy.append(evaluate(model, params, xva, yva))
            if log is not None:
                log(f"[{mode.value}] step {step + 1}/{schedule.total_steps} loss {loss:.4f} "
                    f"train {report.train_accuracy[-1]:.3f} val {report.val_accuracy[-1]:.3f}")
    report.diverged = _flag_divergence(report.losses)
    if evaluate_test:
        te = dataset.subset(TEST)
        xte, yte = prepare_inputs(te.X, te.y, mode)
        report.test_accuracy = evaluate(model, params, xte.astype(dtype, copy=False), yte)
        report.test_accesses += 1
    report.wall_clock = time.perf_counter() - t0
    return params, report


def predict(params: ParamSet, samples: np.ndarray, spec: NetworkSpec | None = None,
            mode: BaselineMode | str = BaselineMode.FULL_VOLUME, batch: int = 512) -> np.ndarray:
    """Per-class probabilities with dropout disabled.

    ``samples`` is one ``(13, 13, 16)`` sub-volume or a batch of them.  In the
    unrelated-patches mode the result has one row per patch.
    """
    spec = spec or NetworkSpec()
    x = np.asarray(samples)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != SAMPLE_SHAPE:
        raise ShapeError(f"expected (13, 13, 16) sub-volumes, got {np.asarray(samples).shape}")
    model = build_model(spec.for_mode(mode))
    xin, _ = prepare_inputs(x, None, mode)
    probs = softmax(_forward_batches(model, params, xin, batch).astype(np.float64))
    return probs[0] if single and probs.shape[0] == 1 else probs


def run_correspondence_experiments(dataset: Dataset, schedules: dict | TrainSchedule,
                                   spec: NetworkSpec | None = None, dtype=np.float32,
                                   modes: Sequence[BaselineMode | str] = tuple(BaselineMode),
                                   log=None) -> dict[str, tuple[ParamSet, TrainReport]]:
    """Train one model per correspondence mode on the same dataset.

    The test split is read once per mode, after training.
    """
    spec = spec or NetworkSpec()
    out = {}
    for mode in modes:
        mode = BaselineMode(mode)
        sched = schedules[mode.value] if isinstance(schedules, dict) else schedules
        out[mode.value] = train(spec, dataset, sched, mode, dtype=dtype, evaluate_test=True, log=log)
    return out


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_model(path, params: ParamSet, spec: NetworkSpec, schedule: TrainSchedule | None = None,
               mode: BaselineMode | str = BaselineMode.FULL_VOLUME) -> None:
    path = Path(path)
    params.save(path)
    side = {"spec": spec.to_json(), "mode": BaselineMode(mode).value,
            "schedule": None if schedule is None else asdict(schedule)}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(side, indent=1))


def load_model(path, dtype=np.float32):
    path = Path(path)
    params = ParamSet.load(path, dtype)
    side_path = path.with_suffix(path.suffix + ".json")
    try:
        side = json.loads(side_path.read_text())
        spec = NetworkSpec.from_json(side["spec"])
        sched = None if side.get("schedule") is None else TrainSchedule(**side["schedule"])
        mode = BaselineMode(side.get("mode", "full"))
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{side_path}: bad model sidecar: {exc}") from exc
    expect = build_model(spec.for_mode(mode)).init_params(0, dtype)
    for name in expect:
        if name not in params or params[name].shape != expect[name].shape:
            raise FormatError(f"{path}: parameter {name!r} missing or mis-shaped for the stored spec")
    return params, spec, sched, mode


# ---------------------------------------------------------------------------
# estimator wrapper
# ---------------------------------------------------------------------------


def _check_samples(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2 and X.shape[1] == int(np.prod(SAMPLE_SHAPE)):
        X = X.reshape(-1, *SAMPLE_SHAPE)
    if X.ndim != 4 or X.shape[1:] != SAMPLE_SHAPE:
        raise ValueError(f"expected samples shaped (n, 13, 13, 16) or (n, 2704), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains NaN or infinity")
    return X


class VolumetricCNNClassifier(ClassifierMixin, BaseEstimator):
    """scikit-learn style wrapper around :func:`train` / :func:`predict`.

    Accepts sub-volumes shaped ``(n, 13, 13, 16)`` or flattened to
    ``(n, 2704)``.  Labels may be any two hashable values.
    """

    def __init__(self, mode="full", batch_size=64, total_steps=2000, base_lr=0.01,
                 decay_rate=0.95, decay_steps=1000, momentum_mu=0.9, dropout_keep_prob=0.5,
                 random_state=0, dtype="float32"):
        self.mode = mode
        self.batch_size = batch_size
        self.total_steps = total_steps
        self.base_lr = base_lr
        self.decay_rate = decay_rate
        self.decay_steps = decay_steps
        self.momentum_mu = momentum_mu
        self.dropout_keep_prob = dropout_keep_prob
        self.random_state = random_state
        self.dtype = dtype

    def _schedule(self) -> TrainSchedule:
        seed = check_random_state(self.random_state).randint(0, 2**31 - 1) \
            if not isinstance(self.random_state, (int, np.integer)) else int(self.random_state)
        return TrainSchedule(base_lr=self.base_lr, decay_rate=self.decay_rate,
                             decay_steps=self.decay_steps, momentum_mu=self.momentum_mu,
                             dropout_keep_prob=self.dropout_keep_prob, batch_size=self.batch_size,
                             total_steps=self.total_steps, rng_seed=seed)

    def fit(self, X, y, X_val=None, y_val=None):
        X = _check_samples(X)
        y = np.asarray(y)
        if y.shape != (len(X),):
            raise ValueError(f"y must have shape ({len(X)},), got {y.shape}")
        self.classes_ = unique_labels(y)
        if len(self.classes_) != 2:
            raise ValueError(f"binary classifier needs exactly two classes, got {len(self.classes_)}")
        yi = np.searchsorted(self.classes_, y)
        parts_X, parts_y, parts_s = [X], [yi], [np.full(len(X), TRAIN)]
        if X_val is not None:
            Xv = _check_samples(X_val)
            parts_X.append(Xv)
            parts_y.append(np.searchsorted(self.classes_, np.asarray(y_val)))
            parts_s.append(np.full(len(Xv), VALIDATION))
        Xall = np.concatenate(parts_X)
        ds = Dataset(Xall, np.ones(Xall.shape, dtype=bool), np.concatenate(parts_y),
                     np.concatenate(parts_s))
        self.spec_ = NetworkSpec(dropout_keep_prob=self.dropout_keep_prob)
        self.params_, self.report_ = train(self.spec_, ds, self._schedule(), self.mode,
                                           dtype=np.dtype(self.dtype))
        self.n_features_in_ = int(np.prod(SAMPLE_SHAPE))
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = _check_samples(X)
        p = predict(self.params_, X, self.spec_, self.mode)
        if BaselineMode(self.mode) is BaselineMode.UNRELATED_PATCHES:
            p = p.reshape(len(X), N_CHANNELS, -1).mean(axis=1)
        return np.atleast_2d(p)

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
