"""Comparative runner: pretrain on clean data, fine-tune on corrupted data, evaluate ID and OOD."""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Literal

import numpy as np

from balora import adapters
from balora import autodiff as ad
from balora import regularizers as reg
from balora.data import BlobTask, CorruptionSpec, Dataset, MarkovTask, make_corrupted_dataset
from balora.errors import ConfigInvalid
from balora.models import Model, ModelPair, MlpClassifier, TinyLm, evaluate, forward_pair, pretrain
from balora.optim import AdamState, OptimConfig, adamw_step, lr_at

Method = Literal["FullFT", "LoRA", "PiSSA", "BA-LoRA"]
METHODS: tuple[str, ...] = ("FullFT", "LoRA", "PiSSA", "BA-LoRA")

# Offsets added to a seed's master seed, one per stochastic component.
SEED_TASK, SEED_DATA, SEED_INIT, SEED_PRETRAIN, SEED_ADAPTER, SEED_SHUFFLE = range(1, 7)
SEED_STRIDE = 1000


@dataclass(frozen=True)
class ModelConfig:
    mlp_sizes: tuple[int, ...] = (32, 64, 64, 4)
    mlp_adapter_layers: tuple[int, ...] = (0, 1)
    mlp_rank: int = 8
    lm_vocab: int = 32
    lm_dim: int = 32
    lm_context: int = 16
    lm_hidden: int = 2
    lm_adapter_layers: tuple[int, ...] = (0, 1)
    lm_rank: int = 4
    alpha: float | None = None
    sigma: float | None = None
    ba_init: Literal["lora", "pissa"] = "pissa"

    def __post_init__(self) -> None:
        if self.ba_init not in ("lora", "pissa"):
            raise ConfigInvalid(f"ba_init must be 'lora' or 'pissa', got {self.ba_init!r}")


@dataclass(frozen=True)
class DataConfig:
    separation: float = 0.35
    drift: float = 0.25
    noise: float = 1.0
    ood_shift: float = 0.5
    ood_scale: float = 1.5
    pretrain_per_class: int = 250
    train_per_class: int = 250
    test_per_class: int = 250
    pretrain_seqs: int = 256
    train_seqs: int = 256
    test_seqs: int = 128
    pretrain_epochs: int = 30
    pretrain_lr: float = 1e-2


@dataclass
class SplitData:
    pretrain: Dataset
    train: Dataset
    id_test: Dataset
    ood_test: Dataset


@dataclass
class MetricsReport:
    method: str
    task_mode: str
    corruption: dict
    records: list[dict]
    aggregate: dict
    config: dict
    wall_time_s: list[float] = field(default_factory=list)
    final_model: Model | None = field(default=None, repr=False)

    def to_dict(self, *, include_timing: bool = False) -> dict:
        out = {
            "method": self.method,
            "task_mode": self.task_mode,
            "corruption": self.corruption,
            "records": self.records,
            "aggregate": self.aggregate,
            "config": self.config,
        }
        if include_timing:
            out["wall_time_s"] = self.wall_time_s
        return out


def seed_master(base_seed: int, index: int) -> int:
    return base_seed + SEED_STRIDE * index


# --- data & pretraining -----------------------------------------------------------


def make_splits(task_mode: str, corruption: CorruptionSpec, mcfg: ModelConfig, dcfg: DataConfig, master: int) -> SplitData:
    rng = np.random.default_rng(master + SEED_DATA)
    derived = int(np.random.SeedSequence([corruption.seed, master]).generate_state(1)[0])
    corruption = replace(corruption, seed=derived)
    if task_mode == "NLU":
        task = BlobTask.make(
            mcfg.mlp_sizes[0],
            mcfg.mlp_sizes[-1],
            master + SEED_TASK,
            separation=dcfg.separation,
            drift=dcfg.drift,
            noise=dcfg.noise,
            ood_shift=dcfg.ood_shift,
            ood_scale=dcfg.ood_scale,
        )
        pre = task.sample(dcfg.pretrain_per_class, rng, domain="source")
        train = task.sample(dcfg.train_per_class, rng, domain="target")
        id_test = task.sample(dcfg.test_per_class, rng, domain="target")
        ood_test = task.sample(dcfg.test_per_class, rng, domain="ood")
        train = make_corrupted_dataset(train, corruption, task.n_classes)
    elif task_mode == "NLG":
        task = MarkovTask.make(mcfg.lm_vocab, master + SEED_TASK)
        t = mcfg.lm_context
        pre = task.sample(dcfg.pretrain_seqs, t, rng, domain="source")
        train = task.sample(dcfg.train_seqs, t, rng, domain="target")
        id_test = task.sample(dcfg.test_seqs, t, rng, domain="target")
        ood_test = task.sample(dcfg.test_seqs, t, rng, domain="ood")
        train = make_corrupted_dataset(train, corruption, task.vocab, tokens=True)
    else:
        raise ConfigInvalid(f"unknown task_mode {task_mode!r}")
    return SplitData(pre, train, id_test, ood_test)


def build_pretrained(task_mode: str, mcfg: ModelConfig, dcfg: DataConfig, data: Dataset, master: int) -> Model:
    if task_mode == "NLU":
        model: Model = MlpClassifier(list(mcfg.mlp_sizes), seed=master + SEED_INIT)
    else:
        model = TinyLm(mcfg.lm_vocab, mcfg.lm_dim, mcfg.lm_context, mcfg.lm_hidden, seed=master + SEED_INIT)
    batch = 64 if task_mode == "NLU" else 16
    return pretrain(model, data, dcfg.pretrain_epochs, master + SEED_PRETRAIN, lr=dcfg.pretrain_lr, batch_size=batch)


class PretrainCache:
    """Share pretrained references across methods that use the same seed and config."""

    def __init__(self) -> None:
        self._store: dict[tuple, Model] = {}

    def get(self, task_mode: str, mcfg: ModelConfig, dcfg: DataConfig, data: Dataset, master: int) -> Model:
        key = (task_mode, mcfg, dcfg, master)
        if key not in self._store:
            self._store[key] = build_pretrained(task_mode, mcfg, dcfg, data, master)
        return copy.deepcopy(self._store[key])


# --- fine-tuning ------------------------------------------------------------------


def prepare_pair(pretrained: Model, method: str, task_mode: str, mcfg: ModelConfig, master: int) -> ModelPair:
    if method not in METHODS:
        raise ConfigInvalid(f"unknown method {method!r}; expected one of {METHODS}")
    pair = ModelPair.from_pretrained(pretrained)
    ft = pair.finetuned
    if method == "FullFT":
        ft.set_full_finetune()
        return pair
    kind = {"LoRA": "lora", "PiSSA": "pissa", "BA-LoRA": mcfg.ba_init}[method]
    if task_mode == "NLU":
        layers, r = list(mcfg.mlp_adapter_layers), mcfg.mlp_rank
    else:
        layers, r = list(mcfg.lm_adapter_layers), mcfg.lm_rank
    ft.attach_adapters(kind, r, layers, sigma=mcfg.sigma, alpha=mcfg.alpha, seed=master + SEED_ADAPTER)
    return pair


StepHook = Callable[[int, dict[str, np.ndarray]], None]


def step_loss(pair: ModelPair, tape: ad.Tape, xb, yb, method: str, task_mode: str, rcfg: reg.RegConfig):
    """Build the method's training objective on ``tape``; returns ``(loss, parameter nodes)``."""
    if task_mode == "NLU":
        out = forward_pair(pair, tape, xb)
        task = ad.cross_entropy(out.logits, yb)
        if method == "BA-LoRA":
            return reg.objective_nlu(task, out.ref, out.ft, rcfg), out.nodes
        return task, out.nodes
    out = forward_pair(pair, tape, xb, probs=True)
    task = ad.cross_entropy(out.logits, np.asarray(yb).reshape(-1))
    if method == "BA-LoRA":
        return reg.objective_nlg(task, out.ref, out.ft, out.logits, rcfg), out.nodes
    return task, out.nodes


def finetune(
    pair: ModelPair,
    method: str,
    task_mode: str,
    train: Dataset,
    ocfg: OptimConfig,
    rcfg: reg.RegConfig,
    shuffle_seed: int,
    on_step: StepHook | None = None,
) -> list[float]:
    """Run the fine-tuning loop; returns the mean training objective per epoch.

    The frozen reference and every adapter base are checksum-verified after each epoch.
    """
    if method == "BA-LoRA" and rcfg.task_mode != task_mode:
        raise ConfigInvalid(f"reg task_mode {rcfg.task_mode} does not match run task_mode {task_mode}")
    model = pair.finetuned
    base_sums = {k: adapters.checksum(v) for k, v in model.adapter_bases().items()}
    n = len(train)
    per_epoch = math.ceil(n / ocfg.batch_size)
    total = ocfg.epochs * per_epoch
    rng = np.random.default_rng(shuffle_seed)
    state = AdamState()
    step = 0
    history = []
    for _ in range(ocfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, ocfg.batch_size):
            idx = order[start : start + ocfg.batch_size]
            tape = ad.Tape()
            loss, nodes = step_loss(pair, tape, train.x[idx], train.y[idx], method, task_mode, rcfg)
            grads = ad.backward(tape, loss)
            params = model.trainable()
            adamw_step(params, {k: grads[nodes[k].id] for k in params}, state, ocfg, step + 1, lr_at(step, total, ocfg))
            step += 1
            losses.append(float(loss.value))
            if on_step is not None:
                on_step(step, params)
        history.append(float(np.mean(losses)))
        if not pair.reference_unchanged():
            raise RuntimeError("pretrained reference changed during fine-tuning")
        if {k: adapters.checksum(v) for k, v in model.adapter_bases().items()} != base_sums:
            raise RuntimeError("frozen adapter base changed during fine-tuning")
    return history


# --- experiment ---------------------------------------------------------------------


def _run_seed(
    index: int,
    method: str,
    task_mode: str,
    corruption: CorruptionSpec,
    ocfg: OptimConfig,
    rcfg: reg.RegConfig,
    mcfg: ModelConfig,
    dcfg: DataConfig,
    cache: PretrainCache,
) -> tuple[dict, float, Model]:
    t0 = time.perf_counter()
    master = seed_master(ocfg.seed, index)
    splits = make_splits(task_mode, corruption, mcfg, dcfg, master)
    pretrained = cache.get(task_mode, mcfg, dcfg, splits.pretrain, master)
    pair = prepare_pair(pretrained, method, task_mode, mcfg, master)
    history = finetune(pair, method, task_mode, splits.train, ocfg, rcfg, master + SEED_SHUFFLE)
    ft = pair.finetuned
    id_m = evaluate(ft, splits.id_test.x, splits.id_test.y)
    ood_m = evaluate(ft, splits.ood_test.x, splits.ood_test.y)
    ref_id = evaluate(pair.pretrained, splits.id_test.x, splits.id_test.y)
    record = {
        "seed_index": index,
        "master_seed": master,
        "id_accuracy": id_m["accuracy"],
        "ood_accuracy": ood_m["accuracy"],
        "id_loss": id_m["loss"],
        "ood_loss": ood_m["loss"],
        "pretrained_id_accuracy": ref_id["accuracy"],
        "final_loss": history[-1] if history else float("nan"),
        "n_trainable": ft.n_trainable(),
        "n_model_params": ft.n_model_params(),
        "n_train": len(splits.train),
        "n_flipped": int(np.sum(splits.train.y != splits.train.clean_y)),
    }
    if task_mode == "NLG":
        record["id_perplexity"] = id_m["perplexity"]
        record["ood_perplexity"] = ood_m["perplexity"]
    return record, time.perf_counter() - t0, ft


def _aggregate(records: list[dict]) -> dict:
    keys = [k for k, v in records[0].items() if isinstance(v, float)]
    out = {}
    for k in keys:
        vals = np.array([r[k] for r in records], dtype=np.float64)
        out[k] = {
            "mean": float(vals.mean()),
            "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
        }
    return out


def effective_config(method, task_mode, corruption, ocfg, rcfg, mcfg, dcfg, n_seeds) -> dict:
    return {
        "method": method,
        "task_mode": task_mode,
        "n_seeds": n_seeds,
        "corruption": asdict(corruption),
        "optim": asdict(ocfg),
        "reg": asdict(rcfg),
        "model": asdict(mcfg),
        "data": asdict(dcfg),
    }


def run_experiment(
    method: str,
    task_mode: str,
    corruption: CorruptionSpec,
    ocfg: OptimConfig,
    rcfg: reg.RegConfig,
    n_seeds: int,
    *,
    mcfg: ModelConfig = ModelConfig(),
    dcfg: DataConfig = DataConfig(),
    cache: PretrainCache | None = None,
    threads: int | None = None,
) -> MetricsReport:
    """Fine-tune ``method`` on ``n_seeds`` independent seeds and aggregate ID/OOD metrics.

    Seeds may run on a thread pool (``threads`` or ``BALORA_THREADS``); results are
    always assembled in seed order.
    """
    if n_seeds < 1:
        raise ConfigInvalid("n_seeds must be >= 1")
    if method not in METHODS:
        raise ConfigInvalid(f"unknown method {method!r}; expected one of {METHODS}")
    if task_mode not in ("NLU", "NLG"):
        raise ConfigInvalid(f"unknown task_mode {task_mode!r}")
    if method == "BA-LoRA" and rcfg.task_mode != task_mode:
        raise ConfigInvalid(f"reg task_mode {rcfg.task_mode} does not match run task_mode {task_mode}")
    cache = cache if cache is not None else PretrainCache()
    if threads is None:
        threads = int(os.environ.get("BALORA_THREADS", "1") or 1)
    args = (method, task_mode, corruption, ocfg, rcfg, mcfg, dcfg, cache)
    if threads > 1 and n_seeds > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda i: _run_seed(i, *args), range(n_seeds)))
    else:
        results = [_run_seed(i, *args) for i in range(n_seeds)]
    records = [r for r, _, _ in results]
    return MetricsReport(
        method=method,
        task_mode=task_mode,
        corruption=asdict(corruption),
        records=records,
        aggregate=_aggregate(records),
        config=effective_config(method, task_mode, corruption, ocfg, rcfg, mcfg, dcfg, n_seeds),
        wall_time_s=[t for _, t, _ in results],
        final_model=results[0][2],
    )


# --- report output -------------------------------------------------------------------

CSV_COLUMNS = (
    "method",
    "task_mode",
    "label_noise_rate",
    "imbalance_ratio",
    "n_seeds",
    "id_accuracy_mean",
    "id_accuracy_std",
    "ood_accuracy_mean",
    "ood_accuracy_std",
    "final_loss_mean",
    "final_loss_std",
)


def reports_json(reports: list[MetricsReport], run_config: dict | None = None) -> str:
    """Deterministic JSON text: no timing, sorted keys."""
    payload = {"effective_config": run_config, "reports": [r.to_dict() for r in reports]}
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def reports_csv(reports: list[MetricsReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in reports:
        agg = r.aggregate
        writer.writerow(
            [
                r.method,
                r.task_mode,
                r.corruption["label_noise_rate"],
                r.corruption["imbalance_ratio"],
                len(r.records),
                repr(agg["id_accuracy"]["mean"]),
                repr(agg["id_accuracy"]["std"]),
                repr(agg["ood_accuracy"]["mean"]),
                repr(agg["ood_accuracy"]["std"]),
                repr(agg["final_loss"]["mean"]),
                repr(agg["final_loss"]["std"]),
            ]
        )
    return buf.getvalue()


def paired_gap(a: MetricsReport, b: MetricsReport, metric: str) -> dict:
    """Per-seed ``a - b`` differences of ``metric`` with their mean and std."""
    if len(a.records) != len(b.records):
        raise ConfigInvalid("paired comparison needs equal seed counts")
    diffs = np.array([ra[metric] - rb[metric] for ra, rb in zip(a.records, b.records)])
    return {
        "metric": metric,
        "a": a.method,
        "b": b.method,
        "per_seed": diffs.tolist(),
        "mean": float(diffs.mean()),
        "std": float(diffs.std(ddof=1)) if diffs.size > 1 else 0.0,
        "wins": int(np.sum(diffs > 0)),
        "ties": int(np.sum(diffs == 0)),
        "losses": int(np.sum(diffs < 0)),
    }
