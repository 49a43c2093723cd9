"""Experiment configs, task pipelines, checkpoints and metric files.

A run trains a generator (optionally against a discriminator), evaluates it
with ``s_eval`` sampled models and writes::

    out_dir/
        config.json
        train_log.csv      step, epoch, beta, loss components, disc_loss
        checkpoint.npz
        metrics.csv        experiment, metric, horizon, k, value
        calibration.csv    bin, confidence, frequency, count (classification tasks)
        samples/           per-model predictions as CSV grids
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import data as D
from . import nets
from . import tensor as T
from .dropout import VariationalModel, forward_with_sample, sample_model
from .errors import BayesSLError, ConfigError, DimensionError, UsageError
from .head import HeadConfig, MixtureDistribution, mixture_cll
from .metrics import CalibrationTable, ConfusionAccumulator, calibration, mode_coverage, top_k_percent
from .optim import Adam
from .synthetic import HybridLossConfig, TrainState, train_step
from .tensor import Tensor

log = logging.getLogger(__name__)

TASKS = ("bimodal", "mnist", "shapes")
EVAL_STREAM = 5  # SeedSequence child index; children 0-4 are the training streams


class StageError(BayesSLError):
    """A module error re-raised with the pipeline stage that hit it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ExperimentConfig:
    name: str
    task: str
    generator: dict
    discriminator: dict | None = None
    dropout_rate: float = 0.5
    alpha: float = 1.0
    beta: float = 1.0
    beta_schedule: list = field(default_factory=list)
    alpha_schedule: list = field(default_factory=list)
    weight_decay: float = 1e-6
    constant_sigma: float | None = None
    sample_noise: bool = True
    s_train: int = 1
    s_eval: int = 100
    epochs: int = 1
    batch_size: int = 8
    gen_lr: float = 1e-4
    disc_lr: float = 1e-4
    adam_betas: list = field(default_factory=lambda: [0.9, 0.999])
    gen_updates: int = 1
    disc_updates: int = 1
    seed: int = 0
    out_dir: str = "runs"
    data: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        for name in ("dropout_rate", "gen_lr", "disc_lr"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {value}")
        if not all(0.0 <= b < 1.0 for b in self.adam_betas) or len(self.adam_betas) != 2:
            raise ConfigError(f"adam_betas must be two values in [0, 1), got {self.adam_betas}")
        for name in ("s_train", "s_eval", "batch_size", "gen_updates", "disc_updates"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError(f"seed must be an explicit integer, got {self.seed!r}")
        if self.alpha > 0 and self.discriminator is None:
            raise ConfigError("alpha > 0 needs a discriminator architecture")
        self.loss_config()  # validates alpha, beta and the schedule
        nets.layer_shapes(self.generator)
        if self.discriminator is not None:
            nets.layer_shapes(self.discriminator)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        missing = [f.name for f in dataclasses.fields(cls)
                   if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
                   and f.name not in raw]
        if missing:
            raise ConfigError(f"missing config keys: {', '.join(missing)}")
        return cls(**raw)

    @classmethod
    def load(cls, ref: str | Path) -> "ExperimentConfig":
        """Read a JSON file, or a shipped config by name (e.g. ``bimodal-sl``)."""
        path = Path(ref)
        if path.exists():
            text = path.read_text()
        else:
            shipped = resources.files("bayes_sl.configs").joinpath(f"{ref}.json")
            if not shipped.is_file():
                raise ConfigError(f"no config file {ref!r} and no shipped config of that name "
                                  f"(available: {', '.join(shipped_configs())})")
            text = shipped.read_text()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{ref}: invalid JSON: {err}") from err
        if not isinstance(raw, dict):
            raise ConfigError(f"{ref}: top level must be a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def loss_config(self) -> HybridLossConfig:
        return HybridLossConfig(self.alpha, self.beta, [tuple(e) for e in self.beta_schedule],
                                self.weight_decay, [tuple(e) for e in self.alpha_schedule])


def shipped_configs() -> list[str]:
    root = resources.files("bayes_sl.configs")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json")
                  and json.loads(p.read_text()).get("task") in TASKS)


def shipped_resource(name: str) -> str:
    return resources.files("bayes_sl.configs").joinpath(name).read_text()


def eval_rng(seed: int) -> np.random.Generator:
    """Evaluation stream: fresh from the seed, so reloaded checkpoints evaluate identically."""
    return np.random.default_rng(np.random.SeedSequence(seed).spawn(EVAL_STREAM + 1)[EVAL_STREAM])


@dataclass
class MetricRow:
    experiment: str
    metric: str
    horizon: int | str
    k: float | str
    value: float


# ---------------------------------------------------------------------------
# tasks


@dataclass
class TaskData:
    train: tuple[np.ndarray, np.ndarray]
    test: Any


class Task:
    name = ""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg

    def head(self) -> HeadConfig:
        raise NotImplementedError

    def load(self) -> TaskData:
        raise NotImplementedError

    def prepare(self, data: TaskData, out_dir: Path) -> None:
        """Task-side fitting that is not part of the generator (e.g. the scoring classifier)."""

    def evaluate(self, model: VariationalModel, data: TaskData, out_dir: Path) -> list[MetricRow]:
        raise NotImplementedError

    def calibrate(self, model: VariationalModel, data: TaskData) -> CalibrationTable:
        raise UsageError(f"calibration needs class predictions; task {self.name!r} is a regression task")

    def extra_state(self) -> dict[str, np.ndarray]:
        return {}

    def load_extra_state(self, arrays: Mapping[str, np.ndarray]) -> None:
        pass

    def row(self, metric: str, value: float, horizon: int | str = "", k: float | str = "") -> MetricRow:
        return MetricRow(self.cfg.name, metric, horizon, k, float(value))


class BimodalTask(Task):
    """Two-branch 1-D regression; sampled models are probed on the multi-modal side."""

    name = "bimodal"
    defaults = {"n": 2000, "x_scale": 10.0}
    eval_defaults = {"probe": [5.0, 10.0], "probe_points": 50, "tol": 0.15, "modes": [0.3, -0.3, 0.0],
                     "plot_points": 201}

    def head(self) -> HeadConfig:
        return HeadConfig(constant_sigma=self.cfg.constant_sigma, sample_noise=self.cfg.sample_noise)

    def options(self):
        opts = {**self.defaults, **self.cfg.data}
        ev = {**self.eval_defaults, **self.cfg.eval}
        return opts, ev

    def load(self) -> TaskData:
        opts, _ = self.options()
        spec = D.Bimodal2DSpec(n=int(opts["n"]))
        x, y = D.gen_bimodal_2d(spec, self.cfg.seed)
        return TaskData((x / opts["x_scale"], y), None)

    def model_curves(self, model: VariationalModel, xs: np.ndarray) -> np.ndarray:
        """Mean output of each of ``s_eval`` sampled models at raw inputs ``xs``."""
        opts, _ = self.options()
        rng = eval_rng(self.cfg.seed)
        inputs = xs[:, None] / opts["x_scale"]
        head = self.head()
        curves = []
        for _ in range(self.cfg.s_eval):
            raw = forward_with_sample(model, sample_model(model, rng), inputs)
            curves.append(head.gaussian(raw).mu.data[:, 0])
        return np.stack(curves)

    def evaluate(self, model, data, out_dir) -> list[MetricRow]:
        _, ev = self.options()
        probe = np.linspace(ev["probe"][0], ev["probe"][1], int(ev["probe_points"]))
        means = self.model_curves(model, probe).mean(axis=1)
        counts = mode_coverage(means, ev["modes"], ev["tol"])
        rows = [self.row(f"models_near_{m:+.2f}", c) for m, c in zip(ev["modes"], counts)]
        rows.append(self.row("probe_mean_spread", means.std()))
        grid = np.linspace(-10.0, 10.0, int(ev["plot_points"]))
        curves = self.model_curves(model, grid)
        write_grid(out_dir / "samples" / "bimodal_models.csv", np.column_stack([grid, curves.T]),
                   header=["x", *(f"model_{i}" for i in range(len(curves)))])
        return rows


class MnistTask(Task):
    """Complete a digit from its lower-left quarter; score completions with a classifier."""

    name = "mnist"
    defaults = {"data_dir": None, "n_train": 10000, "n_test": 1000, "split_seed": 0}
    eval_defaults = {"k": [0.1, 1.0], "dump": 8}
    classifier_defaults = {"hidden": [256], "epochs": 5, "lr": 1e-3, "batch_size": 64, "seed": 0}

    def __init__(self, cfg):
        super().__init__(cfg)
        self.classifier: dict | None = None

    def head(self) -> HeadConfig:
        return HeadConfig(constant_sigma=self.cfg.constant_sigma, sample_noise=self.cfg.sample_noise)

    def options(self):
        opts = {**self.defaults, **self.cfg.data}
        ev = {**self.eval_defaults, **self.cfg.eval}
        clf = {**self.classifier_defaults, **ev.get("classifier", {})}
        return opts, ev, clf

    def data_dir(self) -> Path:
        opts, _, _ = self.options()
        return Path(opts["data_dir"]) if opts["data_dir"] else Path(self.cfg.out_dir) / "data" / "mnist"

    def load(self) -> TaskData:
        opts, _, _ = self.options()
        directory = self.data_dir()
        try:
            files = D.find_mnist(directory)
        except FileNotFoundError:
            log.info("materializing the bundled MNIST subset in %s", directory)
            D.write_mnist_subset(directory, n_test=int(opts["n_test"]), seed=int(opts["split_seed"]))
            files = D.find_mnist(directory)
        tr_img = D.load_idx(files["train_images"], "images")[: int(opts["n_train"])]
        tr_lab = D.load_idx(files["train_labels"], "labels")[: int(opts["n_train"])]
        te_img = D.load_idx(files["test_images"], "images")[: int(opts["n_test"])]
        te_lab = D.load_idx(files["test_labels"], "labels")[: int(opts["n_test"])]
        if len(tr_img) != len(tr_lab) or len(te_img) != len(te_lab):
            raise DimensionError("MNIST image and label files disagree in length")
        x, y = D.make_quarter_completion(tr_img)
        xt, yt = D.make_quarter_completion(te_img)
        return TaskData((x, y), {"x": xt, "y": yt, "labels": te_lab, "train_images": tr_img,
                                 "train_labels": tr_lab})

    # classifier ----------------------------------------------------------
    def classifier_arch(self) -> dict:
        _, _, clf = self.options()
        return {"kind": "mlp", "in": 784, "hidden": list(clf["hidden"]), "out": 10}

    def prepare(self, data, out_dir) -> None:
        """Fit the scoring classifier on the training digits; it depends only on the data."""
        _, _, clf = self.options()
        rng = np.random.default_rng(int(clf["seed"]))
        arch = self.classifier_arch()
        params = {name: (Tensor(M, requires_grad=True), Tensor(b, requires_grad=True))
                  for name, (M, b) in nets.init_params(arch, rng).items()}
        flat = {f"{n}.{part}": t for n, pair in params.items() for part, t in zip("Mb", pair)}
        opt = Adam(flat, lr=float(clf["lr"]))
        images = data.test["train_images"].reshape(-1, 784)
        labels = data.test["train_labels"]
        bs = int(clf["batch_size"])
        for _ in range(int(clf["epochs"])):
            order = rng.permutation(len(images))
            for i in range(0, len(order), bs):
                idx = order[i:i + bs]
                opt.zero_grad()
                loss = T.softmax_cross_entropy(nets.forward(arch, params, Tensor(images[idx])), labels[idx])
                T.backward(loss)
                opt.step()
        self.classifier = {name: (M.data, b.data) for name, (M, b) in params.items()}

    def classify(self, images: np.ndarray) -> np.ndarray:
        """Class probabilities ``N x 10`` for flattened images."""
        if self.classifier is None:
            raise UsageError("the scoring classifier has not been fitted or loaded")
        weights = {n: (Tensor(M), Tensor(b)) for n, (M, b) in self.classifier.items()}
        logits = nets.forward(self.classifier_arch(), weights, Tensor(np.clip(images, 0.0, 1.0)))
        return T.softmax(logits, axis=1).data

    def extra_state(self):
        out = {}
        for name, (M, b) in (self.classifier or {}).items():
            out[f"clf/{name}.M"], out[f"clf/{name}.b"] = M, b
        return out

    def load_extra_state(self, arrays):
        names = sorted({k[4:].rsplit(".", 1)[0] for k in arrays if k.startswith("clf/")})
        if names:
            self.classifier = {n: (arrays[f"clf/{n}.M"], arrays[f"clf/{n}.b"]) for n in names}

    # evaluation ----------------------------------------------------------
    def completions(self, model: VariationalModel, x: np.ndarray) -> np.ndarray:
        """``S x N x 784`` completions: each sampled model's mean with the seen quarter pasted in."""
        rng = eval_rng(self.cfg.seed)
        head = self.head()
        out = []
        for _ in range(self.cfg.s_eval):
            mu = head.gaussian(forward_with_sample(model, sample_model(model, rng), x)).mu.data
            out.append(D.paste_quarter(x, np.clip(mu, 0.0, 1.0)))
        return np.stack(out)

    def classifier_accuracy(self, data) -> float:
        probs = self.classify(data.test["y"])
        return float(np.mean(probs.argmax(axis=1) == data.test["labels"]))

    def evaluate(self, model, data, out_dir) -> list[MetricRow]:
        _, ev, _ = self.options()
        comps = self.completions(model, data.test["x"])
        labels = data.test["labels"]
        probs = np.stack([self.classify(c) for c in comps])  # S x N x 10
        correct = (probs.argmax(axis=2) == labels[None]).astype(np.float64).T  # N x S
        confidence = probs[:, np.arange(len(labels)), labels].T
        rows = []
        for k in ev["k"]:
            # rank samples by classifier confidence in the true class, then score their accuracy
            n_best = max(1, int(np.ceil(k * comps.shape[0] - 1e-9)))
            order = np.argsort(-confidence, axis=1, kind="stable")[:, :n_best]
            acc = np.take_along_axis(correct, order, axis=1).mean(axis=1)
            rows.append(self.row("top_k_accuracy", acc.mean(), k=k))
            rows.append(self.row("top_k_confidence", top_k_percent(confidence, k).value, k=k))
        rows.append(self.row("classifier_test_accuracy", self.classifier_accuracy(data)))
        samples = out_dir / "samples"
        for i in range(min(int(ev["dump"]), len(labels))):
            write_grid(samples / f"mnist_{i:03d}_truth.csv", data.test["y"][i].reshape(28, 28))
            for s in range(comps.shape[0]):
                write_grid(samples / f"mnist_{i:03d}_model_{s:03d}.csv", comps[s, i].reshape(28, 28))
        return rows

    def calibrate(self, model, data) -> CalibrationTable:
        comps = self.completions(model, data.test["x"])
        probs = np.stack([self.classify(c) for c in comps]).mean(axis=0)
        return calibration(probs.T, data.test["labels"], n_bins=int(self.cfg.eval.get("bins", 10)), class_axis=0)


class ShapesTask(Task):
    """Branching moving shapes: forecast segmentation frames by recursive rollout."""

    name = "shapes"
    # targets are pre-softmax class confidences: margin * one-hot, so softmax can be confident
    defaults = {"n_train": 300, "n_test": 40, "spec": {}, "target_margin": 5.0}
    eval_defaults = {"k": [0.05], "dump": 2, "bins": 10}

    def options(self):
        opts = {**self.defaults, **self.cfg.data}
        ev = {**self.eval_defaults, **self.cfg.eval}
        return opts, ev

    def spec(self) -> D.MovingShapesSpec:
        opts, _ = self.options()
        raw = dict(opts["spec"])
        if raw.get("mode_probs") is not None:
            raw["mode_probs"] = tuple(raw["mode_probs"])
        try:
            return D.MovingShapesSpec(**raw)
        except TypeError as err:
            raise ConfigError(f"bad moving-shapes spec: {err}") from err

    def head(self) -> HeadConfig:
        return HeadConfig(constant_sigma=self.cfg.constant_sigma, sample_noise=self.cfg.sample_noise,
                          disc_view="softmax", channel_axis=1)

    def load(self) -> TaskData:
        opts, _ = self.options()
        spec = self.spec()
        seeds = np.random.SeedSequence(self.cfg.seed).spawn(EVAL_STREAM + 3)[EVAL_STREAM + 1:]
        train = D.gen_moving_shapes(spec, int(opts["n_train"]), int(seeds[0].generate_state(1)[0]))
        test = D.gen_moving_shapes(spec, int(opts["n_test"]), int(seeds[1].generate_state(1)[0]))
        x, y, _ = D.shape_windows(train, spec.t_past)
        return TaskData((x, float(opts["target_margin"]) * y), test)

    def rollouts(self, model: VariationalModel, test: D.SceneSequence) -> np.ndarray:
        """``S x N x T_future x C x H x W`` class probabilities, one model sample per rollout."""
        rng = eval_rng(self.cfg.seed)
        head = self.head()
        past = D.one_hot(test.past, test.num_classes, axis=2)
        t_future = test.frames.shape[1] - test.t_past
        out = []
        for _ in range(self.cfg.s_eval):
            sample = sample_model(model, rng)
            out.append(recursive_rollout(model, sample, past, t_future, head, rng))
        return np.stack(out)

    def evaluate(self, model, data, out_dir) -> list[MetricRow]:
        _, ev = self.options()
        test = data.test
        probs = self.rollouts(model, test)
        rows = []
        c = test.num_classes
        for h in range(probs.shape[2]):
            gt = test.future[:, h]
            p = probs[:, :, h]  # S x N x C x H x W
            mean_pred = p.mean(axis=0).argmax(axis=1)
            sample_pred = p.argmax(axis=2)
            per_seq_mean = np.array([ConfusionAccumulator(c).update(mean_pred[i], gt[i]).miou()
                                     for i in range(len(gt))])
            per_sample = np.array([[ConfusionAccumulator(c).update(sample_pred[s, i], gt[i]).miou()
                                    for s in range(p.shape[0])] for i in range(len(gt))])
            rows.append(self.row("miou_mean", 100.0 * per_seq_mean.mean(), horizon=h + 1))
            rows.append(self.row("miou_dataset_mean",
                                 100.0 * ConfusionAccumulator(c).update(mean_pred, gt).miou(), horizon=h + 1))
            for k in ev["k"]:
                rows.append(self.row("miou_top_k", 100.0 * top_k_percent(per_sample, k).value,
                                     horizon=h + 1, k=k))
            mix = MixtureDistribution(np.moveaxis(p, 2, 1))  # S x C x N x H x W
            rows.append(self.row("cll", mixture_cll(mix, gt), horizon=h + 1))
        samples = out_dir / "samples"
        for i in range(min(int(ev["dump"]), probs.shape[1])):
            for t in range(test.frames.shape[1]):
                write_grid(samples / f"shapes_{i:03d}_truth_t{t}.csv", test.frames[i, t])
            for s in range(probs.shape[0]):
                for h in range(probs.shape[2]):
                    write_grid(samples / f"shapes_{i:03d}_model_{s:03d}_h{h + 1}.csv",
                               probs[s, i, h].argmax(axis=0))
        return rows

    def calibrate(self, model, data) -> CalibrationTable:
        _, ev = self.options()
        probs = self.rollouts(model, data.test).mean(axis=0)  # N x T x C x H x W
        return calibration(probs, data.test.future, n_bins=int(ev["bins"]), class_axis=2)


TASK_TYPES = {"bimodal": BimodalTask, "mnist": MnistTask, "shapes": ShapesTask}


def make_task(cfg: ExperimentConfig) -> Task:
    return TASK_TYPES[cfg.task](cfg)


def recursive_rollout(model: VariationalModel, sample, past: np.ndarray, t_future: int,
                      head: HeadConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Predict ``t_future`` frames, feeding each prediction back into the input window.

    ``past`` is ``N x window x C x H x W`` class confidences.  The same model
    sample is used at every step.  Each prediction is the softmax of the
    reparameterized sample (noise from ``rng`` when ``head.sample_noise``;
    the mean otherwise).  Returns ``N x t_future x C x H x W``.
    """
    if t_future < 1:
        raise UsageError(f"t_future must be >= 1, got {t_future}")
    past = np.asarray(past, dtype=np.float64)
    if past.ndim != 5:
        raise DimensionError(f"past must be N x window x C x H x W, got {past.shape}")
    n, window, c, h, w = past.shape
    frames = list(np.moveaxis(past, 1, 0))
    preds = []
    for _ in range(t_future):
        x = np.stack(frames[-window:], axis=1).reshape(n, window * c, h, w)
        pred = head.gaussian(forward_with_sample(model, sample, x))
        if head.sample_noise and rng is not None:
            z = rng.standard_normal(pred.mu.shape)
        else:
            z = np.zeros(pred.mu.shape)
        y = pred.mu.data + pred.sigma.data * z
        y = y - y.max(axis=1, keepdims=True)
        p = np.exp(y)
        p /= p.sum(axis=1, keepdims=True)
        preds.append(p)
        frames.append(p)
    return np.stack(preds, axis=1)


# ---------------------------------------------------------------------------
# files


def write_grid(path: Path, grid: np.ndarray, header: list[str] | None = None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    grid = np.asarray(grid)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if header:
            writer.writerow(header)
        for row in np.atleast_2d(grid):
            writer.writerow([repr(float(v)) if grid.dtype.kind == "f" else int(v) for v in row])


def write_metrics(path: Path, rows: list[MetricRow]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["experiment", "metric", "horizon", "k", "value"])
        for r in rows:
            writer.writerow([r.experiment, r.metric, r.horizon, r.k, repr(r.value)])


def read_metrics(path: Path) -> list[MetricRow]:
    with open(path, newline="") as fh:
        return [MetricRow(r["experiment"], r["metric"], r["horizon"], r["k"], float(r["value"]))
                for r in csv.DictReader(fh)]


def write_calibration(path: Path, table: CalibrationTable) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin", "confidence", "frequency", "count"])
        for b, conf, freq, count in table.rows():
            writer.writerow([b, repr(float(conf)), repr(float(freq)), count])


def save_checkpoint(path: Path, state: TrainState, task: Task | None = None) -> None:
    arrays = {f"gen/{k}": v for k, v in state.generator.state_arrays().items()}
    arrays.update(state.gen_opt.to_arrays("gen_opt/"))
    if state.disc is not None:
        arrays.update({f"disc/{k}": v for k, v in state.disc.state_arrays().items()})
        arrays.update(state.disc_opt.to_arrays("disc_opt/"))
    if task is not None:
        arrays.update(task.extra_state())
    arrays["meta/epoch"] = np.array(state.epoch)
    arrays["meta/step"] = np.array(state.step)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def build_state(cfg: ExperimentConfig, task: Task) -> TrainState:
    return TrainState.create(cfg.generator, cfg.discriminator, cfg.dropout_rate, cfg.loss_config(),
                             task.head(), cfg.seed, gen_lr=cfg.gen_lr, disc_lr=cfg.disc_lr,
                             gen_updates=cfg.gen_updates, disc_updates=cfg.disc_updates,
                             s_train=cfg.s_train, betas=tuple(cfg.adam_betas))


def load_checkpoint(path: str | Path, cfg: ExperimentConfig, task: Task | None = None) -> TrainState:
    task = task or make_task(cfg)
    state = build_state(cfg, task)
    with np.load(path) as npz:
        arrays = dict(npz)
    def section(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    try:
        state.generator.load_state_arrays(section("gen/"))
        state.gen_opt.load_arrays(arrays, "gen_opt/")
        if state.disc is not None:
            state.disc.load_state_arrays(section("disc/"))
            state.disc_opt.load_arrays(arrays, "disc_opt/")
    except KeyError as err:
        raise ConfigError(f"checkpoint {path} does not match the config: missing {err}") from err
    task.load_extra_state(arrays)
    state.epoch = int(arrays["meta/epoch"])
    state.step = int(arrays["meta/step"])
    return state


# ---------------------------------------------------------------------------
# pipeline

LOG_FIELDS = ["step", "epoch", "alpha", "beta", "alpha_term", "beta_term", "kl", "gen_loss", "disc_loss"]


def train(cfg: ExperimentConfig, task: Task, data: TaskData, out_dir: Path) -> TrainState:
    state = build_state(cfg, task)
    x, y = data.train
    n = len(x)
    bs = cfg.batch_size
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "train_log.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for epoch in range(cfg.epochs):
            order = state.rngs["data"].permutation(n)
            for i in range(0, n, bs):
                idx = order[i:i + bs]
                if len(idx) < cfg.s_train:
                    continue
                record = train_step(state, (x[idx], y[idx]))
                writer.writerow({k: record.get(k, "") for k in LOG_FIELDS})
            state.epoch += 1
            log.info("%s: epoch %d/%d done (step %d)", cfg.name, epoch + 1, cfg.epochs, state.step)
    return state


def _stage(name, fn, *args):
    try:
        return fn(*args)
    except BayesSLError as err:
        if isinstance(err, StageError):
            raise
        raise StageError(name, err) from err


@dataclass
class RunResult:
    out_dir: Path
    metrics: list[MetricRow]
    state: TrainState
    seconds: float

    def value(self, metric: str, horizon: int | str = "", k: float | str = "") -> float:
        for r in self.metrics:
            if r.metric == metric and str(r.horizon) == str(horizon) and str(r.k) == str(k):
                return r.value
        raise KeyError((metric, horizon, k))


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> RunResult:
    """Train, checkpoint, evaluate and (for classification tasks) calibrate."""
    start = time.perf_counter()
    out = Path(out_dir or Path(cfg.out_dir) / cfg.name)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    task = make_task(cfg)
    data = _stage("data", task.load)
    _stage("prepare", task.prepare, data, out)
    state = _stage("train", train, cfg, task, data, out)
    _stage("checkpoint", save_checkpoint, out / "checkpoint.npz", state, task)
    rows = _stage("evaluate", task.evaluate, state.generator, data, out)
    write_metrics(out / "metrics.csv", rows)
    if cfg.task != "bimodal":
        table = _stage("calibrate", task.calibrate, state.generator, data)
        write_calibration(out / "calibration.csv", table)
    return RunResult(out, rows, state, time.perf_counter() - start)


def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint: str | Path,
                        out_dir: str | Path | None = None) -> list[MetricRow]:
    out = Path(out_dir or Path(cfg.out_dir) / cfg.name)
    task = make_task(cfg)
    data = _stage("data", task.load)
    state = _stage("checkpoint", load_checkpoint, checkpoint, cfg, task)
    rows = _stage("evaluate", task.evaluate, state.generator, data, out)
    write_metrics(out / "metrics.csv", rows)
    return rows


def calibrate_checkpoint(cfg: ExperimentConfig, checkpoint: str | Path,
                         out_dir: str | Path | None = None) -> CalibrationTable:
    out = Path(out_dir or Path(cfg.out_dir) / cfg.name)
    task = make_task(cfg)
    data = _stage("data", task.load)
    state = _stage("checkpoint", load_checkpoint, checkpoint, cfg, task)
    table = _stage("calibrate", task.calibrate, state.generator, data)
    write_calibration(out / "calibration.csv", table)
    return table
