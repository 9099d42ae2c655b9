"""Desk-scale host networks whose linear layers can carry adapters.

``MlpClassifier`` produces class logits (NLU mode); ``TinyLm`` produces
next-token logits under teacher forcing (NLG mode). A :class:`ModelPair`
couples a frozen pretrained snapshot with a trainable copy.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from balora import adapters
from balora import autodiff as ad
from balora.adapters import AdapterPair
from balora.errors import ConfigInvalid, ShapeMismatch
from balora.optim import AdamState, OptimConfig, adamw_step


@dataclass
class Linear:
    """``y = x @ W + bias`` where ``W`` is a plain matrix or an adapter's merged weight."""

    weight: np.ndarray | None
    bias: np.ndarray | None
    adapter: AdapterPair | None = None
    train_weight: bool = True
    train_bias: bool = True

    @property
    def shape(self) -> tuple[int, int]:
        return self.adapter.shape if self.adapter is not None else self.weight.shape

    def effective_weight(self) -> np.ndarray:
        return adapters.merge(self.adapter) if self.adapter is not None else self.weight

    def tensors(self, prefix: str) -> Iterator[tuple[str, np.ndarray, bool]]:
        """Yield ``(name, array, trainable)`` for every tensor of the layer."""
        if self.adapter is not None:
            yield f"{prefix}.a", self.adapter.a, True
            yield f"{prefix}.b", self.adapter.b, True
            yield f"{prefix}.base", self.adapter.base, False
        else:
            yield f"{prefix}.weight", self.weight, self.train_weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias, self.train_bias and self.adapter is None

    def apply(self, x: ad.Node, nodes: dict[str, ad.Node], prefix: str) -> ad.Node:
        if self.adapter is not None:
            p = self.adapter
            low = (x @ nodes[f"{prefix}.a"]) @ nodes[f"{prefix}.b"]
            out = x @ nodes[f"{prefix}.base"] + ad.scale(low, p.scale)
        else:
            out = x @ nodes[f"{prefix}.weight"]
        if self.bias is not None:
            out = out + nodes[f"{prefix}.bias"]
        return out


class Model:
    """Shared plumbing: tensor naming, parameter binding, adapter surgery."""

    kind: str = ""
    layers: list[Linear]

    def _layer_items(self) -> list[tuple[str, Linear]]:
        return [(f"layer{i}", layer) for i, layer in enumerate(self.layers)]

    def _extra_tensors(self) -> Iterator[tuple[str, np.ndarray, bool]]:
        return iter(())

    def tensors(self) -> Iterator[tuple[str, np.ndarray, bool]]:
        yield from self._extra_tensors()
        for prefix, layer in self._layer_items():
            yield from layer.tensors(prefix)

    def trainable(self) -> dict[str, np.ndarray]:
        return {name: arr for name, arr, train in self.tensors() if train}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: arr for name, arr, _ in self.tensors()}

    def n_trainable(self) -> int:
        return sum(arr.size for arr in self.trainable().values())

    def n_model_params(self) -> int:
        """Parameter count of the underlying dense model (adapters merged)."""
        total = sum(arr.size for name, arr, _ in self._extra_tensors())
        for layer in self.layers:
            m, n = layer.shape
            total += m * n + (layer.bias.size if layer.bias is not None else 0)
        return total

    def bind(self, tape: ad.Tape, *, trainable: bool = True) -> dict[str, ad.Node]:
        nodes = {}
        for name, arr, train in self.tensors():
            nodes[name] = tape.parameter(arr) if (train and trainable) else tape.constant(arr)
        return nodes

    def forward(self, tape: ad.Tape, nodes: dict[str, ad.Node], inputs) -> ad.Node:
        raise NotImplementedError

    def task_loss(self, logits: ad.Node, targets) -> ad.Node:
        return ad.cross_entropy(logits, np.asarray(targets).reshape(-1))

    def logits(self, inputs) -> np.ndarray:
        """Gradient-free forward pass."""
        tape = ad.Tape()
        return self.forward(tape, self.bind(tape, trainable=False), inputs).value

    def freeze(self) -> None:
        """Make every tensor read-only so accidental updates raise."""
        for _, arr, _ in self.tensors():
            arr.flags.writeable = False

    def set_full_finetune(self) -> None:
        for layer in self.layers:
            if layer.adapter is not None:
                raise ConfigInvalid("full fine-tuning needs a model without adapters")
            layer.train_weight = True
            layer.train_bias = True

    def attach_adapters(
        self,
        kind: str,
        r: int,
        layer_ids: list[int],
        *,
        sigma: float | None = None,
        alpha: float | None = None,
        seed: int = 0,
    ) -> None:
        """Replace the listed layers' weights by adapters and freeze everything else."""
        for _, arr, _ in self.tensors():
            arr.flags.writeable = True
        for layer in self.layers:
            layer.train_weight = False
            layer.train_bias = False
        for offset, i in enumerate(layer_ids):
            layer = self.layers[i]
            if layer.adapter is not None:
                raise ConfigInvalid(f"layer {i} already carries an adapter")
            w = layer.weight
            m, n = w.shape
            if kind == "lora":
                pair = adapters.lora_init(m, n, r, sigma, seed + offset, base=w, alpha=alpha)
            elif kind == "pissa":
                pair = adapters.pissa_init(w, r, alpha=alpha)
            else:
                raise ConfigInvalid(f"unknown adapter kind {kind!r}")
            pair.base.flags.writeable = False
            layer.adapter = pair
            layer.weight = None
        self._freeze_nontrainable()

    def _freeze_nontrainable(self) -> None:
        for _, arr, train in self.tensors():
            if not train:
                arr.flags.writeable = False

    def adapter_bases(self) -> dict[str, np.ndarray]:
        return {name: arr for name, arr, _ in self.tensors() if name.endswith(".base")}

    def arch(self) -> dict:
        raise NotImplementedError


def _he(rng: np.random.Generator, m: int, n: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / m), size=(m, n))


class MlpClassifier(Model):
    """ReLU MLP; the last layer emits class logits."""

    kind = "mlp"

    def __init__(self, sizes: list[int], seed: int = 0) -> None:
        if len(sizes) < 2:
            raise ConfigInvalid("MLP needs at least input and output sizes")
        rng = np.random.default_rng(seed)
        self.sizes = list(sizes)
        self.layers = [
            Linear(weight=_he(rng, m, n), bias=np.zeros(n)) for m, n in zip(sizes[:-1], sizes[1:])
        ]

    @property
    def n_classes(self) -> int:
        return self.sizes[-1]

    def forward(self, tape, nodes, inputs) -> ad.Node:
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise ShapeMismatch(f"MLP expects (B, {self.sizes[0]}) inputs, got {x.shape}")
        h = tape.constant(x)
        last = len(self.layers) - 1
        for i, (prefix, layer) in enumerate(self._layer_items()):
            h = layer.apply(h, nodes, prefix)
            if i < last:
                h = ad.relu(h)
        return h

    def arch(self) -> dict:
        return {"model": "mlp", "sizes": self.sizes}


class TinyLm(Model):
    """Next-token model: token embedding plus causal prefix mean, ReLU hidden layers, unembedding.

    The representation at position ``t`` is ``E[x_t] + mean(E[x_0..x_t])``;
    the logits at ``t`` score token ``t + 1``.
    """

    kind = "tinylm"

    def __init__(self, vocab: int = 32, dim: int = 32, context_len: int = 16, n_hidden: int = 2, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.vocab, self.dim, self.context_len, self.n_hidden = vocab, dim, context_len, n_hidden
        self.embed = rng.normal(0.0, 1.0, size=(vocab, dim))
        self.train_embed = True
        self.layers = [Linear(weight=_he(rng, dim, dim), bias=np.zeros(dim)) for _ in range(n_hidden)]
        self.layers.append(Linear(weight=rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, vocab)), bias=None))
        t = context_len
        self._mix = np.eye(t) + np.tril(np.ones((t, t))) / np.arange(1, t + 1)[:, None]

    def _extra_tensors(self):
        yield "embed", self.embed, self.train_embed

    def set_full_finetune(self) -> None:
        super().set_full_finetune()
        self.train_embed = True

    def attach_adapters(self, kind, r, layer_ids, **kw) -> None:
        self.train_embed = False
        super().attach_adapters(kind, r, layer_ids, **kw)

    def forward(self, tape, nodes, inputs) -> ad.Node:
        tokens = np.asarray(inputs, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] != self.context_len:
            raise ShapeMismatch(f"TinyLm expects (B, {self.context_len}) token ids, got {tokens.shape}")
        if tokens.min() < 0 or tokens.max() >= self.vocab:
            raise ShapeMismatch("token id out of vocabulary")
        b = tokens.shape[0]
        emb = nodes["embed"][tokens.reshape(-1)]
        mix = np.kron(np.eye(b), self._mix)
        h = tape.constant(mix) @ emb
        last = len(self.layers) - 1
        for i, (prefix, layer) in enumerate(self._layer_items()):
            h = layer.apply(h, nodes, prefix)
            if i < last:
                h = ad.relu(h)
        return h

    def arch(self) -> dict:
        return {
            "model": "tinylm",
            "vocab": self.vocab,
            "dim": self.dim,
            "context_len": self.context_len,
            "n_hidden": self.n_hidden,
        }


def build_model(arch: dict, seed: int = 0) -> Model:
    kind = arch.get("model")
    if kind == "mlp":
        return MlpClassifier(arch["sizes"], seed=seed)
    if kind == "tinylm":
        return TinyLm(arch["vocab"], arch["dim"], arch["context_len"], arch.get("n_hidden", 2), seed=seed)
    raise ConfigInvalid(f"unknown model kind {kind!r}")


def load_state(model: Model, tensors: dict[str, np.ndarray], adapter_meta: dict | None = None) -> Model:
    """Populate ``model`` from checkpoint tensors, re-creating adapters where present."""
    if "embed" in tensors:
        model.embed = tensors["embed"].copy()
    for prefix, layer in model._layer_items():
        if f"{prefix}.a" in tensors:
            meta = (adapter_meta or {}).get(prefix, {})
            a, b, base = (tensors[f"{prefix}.{k}"].copy() for k in ("a", "b", "base"))
            r = a.shape[1]
            layer.adapter = AdapterPair(
                a=a, b=b, base=base, r=r, kind=meta.get("kind", "lora"), alpha=float(meta.get("alpha", r))
            )
            layer.weight = None
        elif f"{prefix}.weight" in tensors:
            layer.weight = tensors[f"{prefix}.weight"].copy()
        else:
            raise ShapeMismatch(f"checkpoint has no weights for {prefix}")
        if layer.bias is not None:
            layer.bias = tensors[f"{prefix}.bias"].reshape(-1).copy()
    return model


def adapter_layer_meta(model: Model) -> dict:
    return {
        prefix: {"kind": layer.adapter.kind, "alpha": layer.adapter.alpha, "r": layer.adapter.r}
        for prefix, layer in model._layer_items()
        if layer.adapter is not None
    }


# --- training helpers ----------------------------------------------------------


def evaluate(model: Model, inputs, targets) -> dict[str, float]:
    """Accuracy and mean cross-entropy (plus perplexity for token models)."""
    logits = model.logits(inputs)
    y = np.asarray(targets).reshape(-1)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    ce = float(-np.mean(logp[np.arange(y.size), y]))
    out = {"accuracy": float(np.mean(np.argmax(logits, axis=1) == y)), "loss": ce}
    if isinstance(model, TinyLm):
        out["perplexity"] = float(np.exp(ce))
    return out


def pretrain(model: Model, dataset, epochs: int, seed: int, *, lr: float = 1e-2, batch_size: int = 64) -> Model:
    """Train every weight of ``model`` on clean data with Adam; deterministic for a fixed seed."""
    if len(dataset.x) == 0:
        raise ConfigInvalid("pretraining dataset is empty")
    if epochs == 0:
        return model
    model.set_full_finetune()
    cfg = OptimConfig(lr=lr, batch_size=batch_size, epochs=epochs, warmup_ratio=0.0, schedule="constant")
    rng = np.random.default_rng(seed)
    state = AdamState()
    n = len(dataset.x)
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            tape = ad.Tape()
            nodes = model.bind(tape)
            loss = model.task_loss(model.forward(tape, nodes, dataset.x[idx]), dataset.y[idx])
            grads = ad.backward(tape, loss)
            step += 1
            adamw_step(model.trainable(), {k: grads[nodes[k].id] for k in model.trainable()}, state, cfg, step)
    return model


# --- pretrained / fine-tuned pairing -----------------------------------------


@dataclass
class ModelPair:
    pretrained: Model
    finetuned: Model
    checksums: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_pretrained(cls, model: Model) -> "ModelPair":
        ref = copy.deepcopy(model)
        ref.freeze()
        pair = cls(pretrained=ref, finetuned=copy.deepcopy(model))
        pair.checksums = pair.reference_checksums()
        return pair

    def reference_checksums(self) -> dict[str, str]:
        return {name: adapters.checksum(arr) for name, arr in self.pretrained.state_dict().items()}

    def reference_unchanged(self) -> bool:
        return self.reference_checksums() == self.checksums


class PairOutputs(NamedTuple):
    ref: np.ndarray
    ft: ad.Node
    logits: ad.Node
    nodes: dict[str, ad.Node]


def forward_pair(pair: ModelPair, tape: ad.Tape, inputs, *, probs: bool = False) -> PairOutputs:
    """Reference output as a plain array, fine-tuned output on ``tape``.

    With ``probs=True`` both sides are row-softmaxed (token distributions);
    ``logits`` always holds the fine-tuned logit node.
    """
    ref_logits = pair.pretrained.logits(inputs)
    nodes = pair.finetuned.bind(tape)
    ft = pair.finetuned.forward(tape, nodes, inputs)
    if probs:
        z = ref_logits - ref_logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return PairOutputs(e / e.sum(axis=1, keepdims=True), ad.softmax_rows(ft), ft, nodes)
    return PairOutputs(ref_logits, ft, ft, nodes)
