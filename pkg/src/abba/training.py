"""Two-phase MLP experiment: pretrain on some classes, adapt to others.

Everything is hand-written numpy. Activations use the column convention of
the adapter module: a batch is a ``features x batch`` matrix, so a layer is
``z = W x + b``. Which parameters train is decided only by the bindings: a
layer bound to ``"full"`` trains its weight and bias, a layer bound to an
adapter trains only the adapter, and an unbound layer is frozen.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .adapters import (
    AbbaAdapter,
    AbbaChain,
    HiraAdapter,
    LoraAdapter,
    abba_forward,
    init_abba,
    init_chain,
    init_hira,
    init_lora,
)
from .data import Dataset, filter_classes, load_mnist, split, synthetic_blobs
from .errors import NumericError, ParameterError, ShapeError
from .gradients import chain_backward, hira_backward, layer_backward, lora_backward
from .optim import OptimizerSettings, make_optimizer
from .seeding import rng_stream

log = logging.getLogger(__name__)

METHODS = ("none", "full", "lora", "hira", "abba", "abba_chain")
RECORD_COLUMNS = ("method", "seed", "phase", "step", "split", "loss", "accuracy")


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"


@dataclass
class Mlp:
    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("an MLP needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.activation not in ("relu", "none"):
                raise ParameterError(f"layer {i}: unknown activation {layer.activation!r}")
            if layer.bias.shape != (layer.weight.shape[0],):
                raise ShapeError(f"layer {i}: bias {layer.bias.shape} does not match weight {layer.weight.shape}")
            if i and layer.weight.shape[1] != self.layers[i - 1].weight.shape[0]:
                raise ShapeError(f"layer {i} expects {layer.weight.shape[1]} inputs, previous layer emits "
                                 f"{self.layers[i - 1].weight.shape[0]}")
        if [l.activation for l in self.layers[:-1]].count("none") or self.layers[-1].activation != "none":
            raise ParameterError("exactly the last layer must have activation 'none'")

    @classmethod
    def create(cls, sizes: list[int], rng: np.random.Generator) -> "Mlp":
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            layers.append(_dense(rng, fan_in, fan_out, "none" if i == len(sizes) - 2 else "relu"))
        return cls(layers)

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].weight.shape[1]] + [l.weight.shape[0] for l in self.layers]

    def copy(self) -> "Mlp":
        return copy.deepcopy(self)

    def with_new_head(self, classes: int, rng: np.random.Generator) -> "Mlp":
        body = copy.deepcopy(self.layers[:-1])
        return Mlp(body + [_dense(rng, self.layers[-1].weight.shape[1], classes, "none")])


def _dense(rng, fan_in: int, fan_out: int, activation: str) -> Layer:
    bound = math.sqrt(6.0 / fan_in)  # He-uniform
    return Layer(rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out), activation)


@dataclass
class AdapterBinding:
    layer_index: int
    adapter: object  # "full" or an adapter instance


def _check_bindings(model: Mlp, bindings: list[AdapterBinding]) -> dict[int, object]:
    out = {}
    for b in bindings:
        if not 0 <= b.layer_index < len(model.layers):
            raise ShapeError(f"binding refers to layer {b.layer_index}; the model has {len(model.layers)}")
        if b.layer_index in out:
            raise ParameterError(f"layer {b.layer_index} is bound twice")
        if b.adapter != "full":
            shape = model.layers[b.layer_index].weight.shape
            if b.adapter.shape != shape:
                raise ShapeError(f"adapter on layer {b.layer_index} is {b.adapter.shape}, weight is {shape}")
            if isinstance(b.adapter, HiraAdapter) and b.adapter.w0 is not model.layers[b.layer_index].weight:
                if not np.array_equal(b.adapter.w0, model.layers[b.layer_index].weight):
                    raise ShapeError(f"HiRA adapter on layer {b.layer_index} was built for a different base weight")
        out[b.layer_index] = b.adapter
    return out


def trainable_parameters(model: Mlp, bindings: list[AdapterBinding]) -> dict[str, np.ndarray]:
    """Arrays the optimizer updates in place, keyed ``l{i}.{name}``."""
    params = {}
    for i, ad in sorted(_check_bindings(model, bindings).items()):
        if ad == "full":
            params[f"l{i}.weight"] = model.layers[i].weight
            params[f"l{i}.bias"] = model.layers[i].bias
        elif isinstance(ad, AbbaAdapter):
            for name in ("b1", "a1", "b2", "a2"):
                params[f"l{i}.{name}"] = getattr(ad, name)
        elif isinstance(ad, (LoraAdapter, HiraAdapter)):
            params[f"l{i}.b"] = ad.b
            params[f"l{i}.a"] = ad.a
        elif isinstance(ad, AbbaChain):
            for j, (b, a) in enumerate(ad.pairs):
                params[f"l{i}.b{j + 1}"] = b
                params[f"l{i}.a{j + 1}"] = a
        else:
            raise ParameterError(f"unsupported binding on layer {i}: {type(ad).__name__}")
    return params


def count_trainable(model: Mlp, bindings: list[AdapterBinding]) -> int:
    return sum(p.size for p in trainable_parameters(model, bindings).values())


def _layer_forward(w0: np.ndarray, ad, x: np.ndarray) -> np.ndarray:
    if ad is None or ad == "full":
        return w0 @ x
    if isinstance(ad, AbbaAdapter):
        return abba_forward(ad, w0, x)
    if isinstance(ad, LoraAdapter):
        return w0 @ x + ad.apply(x)
    return (w0 + ad.delta()) @ x


def _layer_backward(w0: np.ndarray, ad, x: np.ndarray, g_z: np.ndarray, want_input: bool):
    """Parameter gradients (by short name) and ``dL/dx`` for one linear map."""
    if ad is None:
        return {}, (w0.T @ g_z if want_input else None)
    if ad == "full":
        return {"weight": g_z @ x.T, "bias": g_z.sum(axis=1)}, (w0.T @ g_z if want_input else None)
    if isinstance(ad, AbbaAdapter):
        grads, g_x = layer_backward(ad, w0, x, g_z)
        return grads.as_dict(), g_x
    g = g_z @ x.T
    if isinstance(ad, LoraAdapter):
        g_b, g_a = lora_backward(ad, g)
        g_x = w0.T @ g_z + ad.scale() * (ad.a.T @ (ad.b.T @ g_z)) if want_input else None
        return {"b": g_b, "a": g_a}, g_x
    w_eff = w0 + ad.delta()
    g_x = w_eff.T @ g_z if want_input else None
    if isinstance(ad, HiraAdapter):
        g_b, g_a = hira_backward(ad, g)
        return {"b": g_b, "a": g_a}, g_x
    out = {}
    for j, (g_b, g_a) in enumerate(chain_backward(ad, g)):
        out[f"b{j + 1}"] = g_b
        out[f"a{j + 1}"] = g_a
    return out, g_x


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean loss, per-class probabilities and per-sample losses; logits are ``classes x batch``."""
    shifted = logits - logits.max(axis=0, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=0))
    per_sample = log_norm - shifted[labels, np.arange(labels.size)]
    probs = np.exp(shifted - log_norm)
    return float(per_sample.mean()), probs, per_sample


def forward(model: Mlp, bindings: list[AdapterBinding], features: np.ndarray) -> np.ndarray:
    """Logits ``classes x batch`` for rows of ``features``."""
    bound = _check_bindings(model, bindings)
    h = np.asarray(features, dtype=np.float64).T
    for i, layer in enumerate(model.layers):
        h = _layer_forward(layer.weight, bound.get(i), h) + layer.bias[:, None]
        if layer.activation == "relu":
            h = np.maximum(h, 0.0)
    return h


def loss_and_gradients(
    model: Mlp, bindings: list[AdapterBinding], features: np.ndarray, labels: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy on a batch and gradients keyed like :func:`trainable_parameters`."""
    bound = _check_bindings(model, bindings)
    x = np.asarray(features, dtype=np.float64).T
    acts, pre = [x], []
    for i, layer in enumerate(model.layers):
        z = _layer_forward(layer.weight, bound.get(i), acts[-1]) + layer.bias[:, None]
        pre.append(z)
        acts.append(np.maximum(z, 0.0) if layer.activation == "relu" else z)
    loss, probs, _ = _cross_entropy(acts[-1], labels)
    g = probs
    g[labels, np.arange(labels.size)] -= 1.0
    g /= labels.size
    grads = {}
    lowest = min(bound) if bound else len(model.layers)
    for i in range(len(model.layers) - 1, lowest - 1, -1):
        layer = model.layers[i]
        if layer.activation == "relu":
            g = g * (pre[i] > 0)
        local, g = _layer_backward(layer.weight, bound.get(i), acts[i], g, want_input=i > lowest)
        for name, value in local.items():
            grads[f"l{i}.{name}"] = value
    return loss, grads


def evaluate(model: Mlp, bindings: list[AdapterBinding], data: Dataset, batch: int = 4096) -> tuple[float, float]:
    """Mean cross-entropy and accuracy over the whole dataset."""
    if len(data) == 0:
        return 0.0, 0.0
    total_loss, correct = 0.0, 0
    for start in range(0, len(data), batch):
        logits = forward(model, bindings, data.features[start : start + batch])
        labels = data.labels[start : start + batch]
        _, _, per_sample = _cross_entropy(logits, labels)
        total_loss += float(per_sample.sum())
        correct += int(np.count_nonzero(logits.argmax(axis=0) == labels))
    return total_loss / len(data), correct / len(data)


@dataclass(frozen=True)
class TrainRecord:
    step: int
    split: str
    loss: float
    accuracy: float
    phase: str


def train_phase(
    model: Mlp,
    bindings: list[AdapterBinding],
    data: Dataset,
    opt: OptimizerSettings,
    phase: str,
    seed: int = 0,
    test: Dataset | None = None,
    train_eval_limit: int | None = 2048,
) -> tuple[Mlp, list[TrainRecord]]:
    """Mini-batch training for ``opt.epochs`` epochs, updating parameters in place.

    Metrics are recorded at step 0, every ``opt.eval_every`` steps and after
    the last step. Train metrics use the first ``train_eval_limit`` samples.
    """
    if phase not in ("pretrain", "finetune"):
        raise ParameterError(f"phase must be 'pretrain' or 'finetune', got {phase!r}")
    out_dim = model.layers[-1].weight.shape[0]
    if data.class_count > out_dim:
        raise ShapeError(f"dataset has {data.class_count} classes but the model emits {out_dim} logits")
    params = trainable_parameters(model, bindings)
    optimizer = make_optimizer(opt)
    rng = rng_stream(seed, f"batches-{phase}")
    n = len(data)
    per_epoch = math.ceil(n / opt.batch_size) if n else 0
    total = per_epoch * opt.epochs
    probe = data if train_eval_limit is None or n <= train_eval_limit else Dataset(
        data.features[:train_eval_limit], data.labels[:train_eval_limit], data.class_count, data.name
    )
    records: list[TrainRecord] = []

    def record(step):
        for name, ds in (("train", probe), ("test", test)):
            if ds is not None:
                loss, acc = evaluate(model, bindings, ds)
                records.append(TrainRecord(step, name, loss, acc, phase))

    record(0)
    step = 0
    for _ in range(opt.epochs):
        order = rng.permutation(n)
        for start in range(0, n, opt.batch_size):
            idx = order[start : start + opt.batch_size]
            if params:
                loss, grads = loss_and_gradients(model, bindings, data.features[idx], data.labels[idx])
                if not math.isfinite(loss):
                    raise NumericError(f"{phase}: loss became non-finite at step {step}")
                optimizer.step(params, grads, opt.lr_at(step, total))
            step += 1
            if step % opt.eval_every == 0 or step == total:
                record(step)
    return model, records


# -- the two-phase experiment -----------------------------------------------


@dataclass
class DataConfig:
    source: str = "mnist"
    mnist_dir: str = "data/mnist"
    synthetic_per_class: int = 2000
    synthetic_sigma: float = 2.0
    synthetic_test_fraction: float = 0.25
    synthetic_seed: int = 1234
    # the synthetic fine-tune set is ~4x smaller than MNIST's, so more epochs
    # give a comparable number of optimizer steps
    synthetic_finetune_epochs: int = 8

    def __post_init__(self):
        if self.source not in ("mnist", "synthetic"):
            raise ParameterError(f"data source must be 'mnist' or 'synthetic', got {self.source!r}")
        if self.synthetic_per_class < 2 or self.synthetic_finetune_epochs < 1:
            raise ParameterError("synthetic_per_class must be >= 2 and synthetic_finetune_epochs >= 1")


@dataclass
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    hidden: list[int] = field(default_factory=lambda: [256, 256])
    pretrain_classes: list[int] = field(default_factory=lambda: list(range(8)))
    finetune_classes: list[int] = field(default_factory=lambda: [8, 9])
    methods: list[str] = field(default_factory=lambda: ["none", "full", "lora", "hira", "abba"])
    rank: int = 16
    alpha: float = 16.0
    chain_k: int = 4
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    pretrain: OptimizerSettings = field(default_factory=lambda: OptimizerSettings(lr=1e-3, batch_size=64, epochs=3))
    finetune: OptimizerSettings = field(default_factory=lambda: OptimizerSettings(lr=1e-3, batch_size=64, epochs=2))
    train_eval_limit: int = 2048

    def __post_init__(self):
        if isinstance(self.data, dict):
            self.data = DataConfig(**self.data)
        for name in ("pretrain", "finetune"):
            if isinstance(getattr(self, name), dict):
                setattr(self, name, OptimizerSettings(**getattr(self, name)))
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ParameterError(f"unknown methods {unknown}; expected a subset of {METHODS}")
        if not self.methods:
            raise ParameterError("at least one method is required")
        if not self.seeds:
            raise ParameterError("at least one seed is required")
        if self.rank < 2 or self.rank % 2:
            raise ParameterError(f"rank budget must be even and >= 2 so ABBA can use r/2 per pair, got {self.rank}")
        if "abba_chain" in self.methods and (self.chain_k < 2 or self.rank % self.chain_k):
            raise ParameterError(f"chain_k={self.chain_k} must be >= 2 and divide the rank budget {self.rank}")
        if not self.hidden:
            raise ParameterError("at least one hidden layer is required")

    def to_dict(self) -> dict:
        return asdict(self)


def load_datasets(cfg: DataConfig) -> tuple[Dataset, Dataset, str]:
    if cfg.source == "mnist":
        train, test = load_mnist(cfg.mnist_dir)
        return train, test, f"mnist:{cfg.mnist_dir}"
    full = synthetic_blobs(10, cfg.synthetic_per_class, 784, cfg.synthetic_sigma, seed=cfg.synthetic_seed, name="blobs")
    train, test = split(full, cfg.synthetic_test_fraction, seed=cfg.synthetic_seed)
    return train, test, f"synthetic:per_class={cfg.synthetic_per_class};sigma={cfg.synthetic_sigma}"


def build_bindings(model: Mlp, method: str, cfg: TrainConfig, seed: int) -> list[AdapterBinding]:
    """Phase-two bindings: the head always trains (except for ``none``), hidden layers get the method."""
    head = len(model.layers) - 1
    if method == "none":
        return []
    bindings = [AdapterBinding(head, "full")]
    for i in range(head):
        w0 = model.layers[i].weight
        layer_seed = seed * 1000 + i
        if method == "full":
            ad = "full"
        elif method == "lora":
            ad = init_lora(w0, cfg.rank, seed=layer_seed, alpha=cfg.alpha)
        elif method == "hira":
            ad = init_hira(w0, cfg.rank, seed=layer_seed, alpha=cfg.alpha)
        elif method == "abba":
            ad = init_abba(w0, cfg.rank // 2, cfg.rank // 2, seed=layer_seed, alpha=cfg.alpha)
        else:
            ad = init_chain(w0, cfg.chain_k, cfg.rank, seed=layer_seed, alpha=cfg.alpha)
        bindings.append(AdapterBinding(i, ad))
    return bindings


@dataclass
class MethodRun:
    method: str
    seed: int
    records: list[TrainRecord]
    trainable: int
    adapter_trainable: int

    @property
    def final_test_accuracy(self) -> float:
        return [r for r in self.records if r.split == "test" and r.phase == "finetune"][-1].accuracy


@dataclass
class ToyResult:
    runs: list[MethodRun]
    pretrain: dict[int, list[TrainRecord]]
    frozen_step0: dict[int, tuple[float, float]]
    metadata: dict


def run_toy_mnist(cfg: TrainConfig) -> ToyResult:
    """Pretrain on ``pretrain_classes``, then adapt each method to ``finetune_classes``.

    Each seed pretrains once; every method starts from a copy of that model
    with the same freshly initialized head. ``frozen_step0`` holds the test
    metrics of that starting point with no adapter attached.
    """
    train, test, source = load_datasets(cfg.data)
    p_train, p_test = filter_classes(train, cfg.pretrain_classes), filter_classes(test, cfg.pretrain_classes)
    f_train, f_test = filter_classes(train, cfg.finetune_classes), filter_classes(test, cfg.finetune_classes)
    sizes = [train.dim] + list(cfg.hidden) + [p_train.class_count]
    finetune_opt = cfg.finetune
    if cfg.data.source == "synthetic":
        finetune_opt = replace(cfg.finetune, epochs=cfg.data.synthetic_finetune_epochs)
    runs, pretrain, frozen = [], {}, {}
    params_by_method = {}
    for seed in cfg.seeds:
        base = Mlp.create(sizes, rng_stream(seed, "mlp-init"))
        everything = [AdapterBinding(i, "full") for i in range(len(base.layers))]
        base, records = train_phase(base, everything, p_train, cfg.pretrain, "pretrain", seed, p_test,
                                    cfg.train_eval_limit)
        pretrain[seed] = records
        start = base.with_new_head(f_train.class_count, rng_stream(seed, "head-init"))
        frozen[seed] = evaluate(start, [], f_test)
        for method in cfg.methods:
            model = start.copy()
            bindings = build_bindings(model, method, cfg, seed)
            head = [b for b in bindings if b.layer_index == len(model.layers) - 1]
            trainable = count_trainable(model, bindings)
            adapter_only = trainable - count_trainable(model, head)
            params_by_method[method] = {"trainable": trainable, "hidden_layers": adapter_only}
            log.info("seed %d method %s: %d trainable parameters", seed, method, trainable)
            _, records = train_phase(model, bindings, f_train, finetune_opt, "finetune", seed, f_test,
                                     cfg.train_eval_limit)
            runs.append(MethodRun(method, seed, records, trainable, adapter_only))
    metadata = {
        "widths": sizes[:-1] + [f_train.class_count],
        "pretrain_widths": sizes,
        "data_source": source,
        "preprocessing": "pixels scaled by 1/255, no normalization",
        "head": "replaced by a freshly initialized head for the fine-tune classes",
        "adapter_layers": list(range(len(cfg.hidden))),
        "rank_budget": cfg.rank,
        "abba_ranks": [cfg.rank // 2, cfg.rank // 2],
        "chain_ranks": [cfg.rank // cfg.chain_k] * cfg.chain_k if "abba_chain" in cfg.methods else None,
        "alpha": cfg.alpha,
        "parameters": params_by_method,
        "pretrain_optimizer": cfg.pretrain.to_dict(),
        "finetune_optimizer": finetune_opt.to_dict(),
        "seeds": list(cfg.seeds),
        "methods": list(cfg.methods),
        "train_eval_limit": cfg.train_eval_limit,
    }
    return ToyResult(runs, pretrain, frozen, metadata)


def records_csv(result: ToyResult) -> str:
    """All records, pretraining first (method ``pretrain``), in canonical order."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    rows = []
    for seed, recs in sorted(result.pretrain.items()):
        rows += [("pretrain", seed, r) for r in recs]
    for run in sorted(result.runs, key=lambda r: (METHODS.index(r.method), r.seed)):
        rows += [(run.method, run.seed, r) for r in run.records]
    for method, seed, r in rows:
        w.writerow([method, seed, r.phase, r.step, r.split, repr(float(r.loss)), repr(float(r.accuracy))])
    return buf.getvalue()


def write_outputs(result: ToyResult, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records_path = out_dir / "train_records.csv"
    meta_path = out_dir / "train_metadata.json"
    records_path.write_text(records_csv(result), encoding="utf-8", newline="")
    meta_path.write_text(json.dumps(result.metadata, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return records_path, meta_path


def accuracy_summary(result: ToyResult) -> dict[str, tuple[float, float, float]]:
    """Per method: mean, min and max final fine-tune test accuracy over seeds."""
    by_method: dict[str, list[float]] = {}
    for run in result.runs:
        by_method.setdefault(run.method, []).append(run.final_test_accuracy)
    return {m: (float(np.mean(v)), min(v), max(v)) for m, v in by_method.items()}
