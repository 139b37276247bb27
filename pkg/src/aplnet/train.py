"""Minibatch training and evaluation loops."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from aplnet import archive
from aplnet import autodiff as ad
from aplnet.data import Dataset, augment_batch
from aplnet.layers import Network, NetworkSpec
from aplnet.optim import SGD, NonFiniteGradient, TrainConfig

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss or gradient; carries the last finite parameters."""

    def __init__(self, message: str, last_state: dict[str, np.ndarray], epoch: int, step: int):
        super().__init__(message)
        self.last_state = last_state
        self.epoch = epoch
        self.step = step


def loss_fn(net: Network, x, y, task: str, train: bool = False, rng=None) -> ad.Tensor:
    out = net.forward(x, train=train, rng=rng)
    if task == "classification":
        return ad.softmax_xent(out, y)
    return ad.mse(out, y)


def evaluate(net: Network, ds: Dataset, task: str, batch_size: int = 1000) -> dict[str, float]:
    """Classification: error rate and mean cross-entropy. Regression: mean squared error."""
    if len(ds) == 0:
        return {"error": float("nan"), "loss": float("nan")}
    with np.errstate(over="ignore", invalid="ignore"):
        out = net.predict(ds.inputs.reshape((len(ds),) + net.spec.input_shape), batch_size)
        if task == "classification":
            labels = ds.labels
            err = float(np.mean(np.argmax(out, axis=1) != labels))
            loss = float(ad.softmax_xent(ad.Tensor(out), labels).data[0])
            return {"error": err, "loss": loss}
        mse = float(np.mean((out - ds.labels.reshape(out.shape)) ** 2))
    return {"error": mse, "loss": mse}


@dataclass
class Trainer:
    """Owns the network, optimizer state and random streams for one training run.

    Shuffling and dropout use streams derived from ``cfg.seed``, independent
    of the initialisation streams used by :class:`Network`.
    """

    net: Network
    cfg: TrainConfig
    task: str = "classification"
    frozen: bool = False
    augment_pad: int = 0
    epoch: int = 0
    losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        frozen = frozenset(self.net.apl_names()) if self.frozen else frozenset()
        self.opt = SGD(self.cfg, self.net.roles, frozen)
        self.shuffle_rng = np.random.default_rng([self.cfg.seed, 2])
        self.dropout_rng = np.random.default_rng([self.cfg.seed, 3])

    def step(self, x, y) -> float:
        params = self.net.params
        # overflow is detected explicitly below, so numpy's warnings are noise here
        with np.errstate(over="ignore", invalid="ignore"):
            loss = loss_fn(self.net, x, y, self.task, train=True, rng=self.dropout_rng)
            value = float(loss.data[0])
            if not np.isfinite(value):
                raise TrainingAborted(f"non-finite loss at step {self.opt.steps}", self.net.state(),
                                      self.epoch, self.opt.steps)
            grads = ad.backward(loss, params.values())
        before = self.net.state()
        try:
            self.opt.step(params, grads, self.epoch)
        except NonFiniteGradient as exc:
            self.net.load_state(before)
            raise TrainingAborted(str(exc), before, self.epoch, exc.step) from exc
        return value

    def run_epoch(self, ds: Dataset) -> float:
        n = len(ds)
        order = self.shuffle_rng.permutation(n)
        shape = (-1,) + self.net.spec.input_shape
        total = 0.0
        for start in range(0, n, self.cfg.batch_size):
            idx = order[start:start + self.cfg.batch_size]
            x = ds.inputs[idx].reshape(shape)
            if self.augment_pad:
                x = augment_batch(x, self.augment_pad, self.shuffle_rng)
            total += self.step(x, ds.labels[idx]) * len(idx)
        self.epoch += 1
        mean_loss = total / n
        self.losses.append(mean_loss)
        log.debug("epoch %d loss %.6f", self.epoch, mean_loss)
        return mean_loss

    def fit(self, ds: Dataset, epochs: int | None = None) -> list[float]:
        target = self.cfg.epochs if epochs is None else self.epoch + epochs
        while self.epoch < target:
            self.run_epoch(ds)
        return self.losses

    # -- checkpoints ---------------------------------------------------------------------

    def checkpoint_payload(self, init_state: dict[str, np.ndarray] | None = None):
        meta = {
            "epoch": self.epoch,
            "steps": self.opt.steps,
            "task": self.task,
            "frozen": self.frozen,
            "losses": self.losses,
            "shuffle_rng": self.shuffle_rng.bit_generator.state,
            "dropout_rng": self.dropout_rng.bit_generator.state,
        }
        tensors = {f"param/{n}": v for n, v in self.net.state().items()}
        tensors.update({f"velocity/{n}": v for n, v in self.opt.velocity.items()})
        if init_state is not None:
            tensors.update({f"init/{n}": v for n, v in init_state.items()})
        texts = {"network_spec": self.net.spec.to_text(), "meta": json.dumps(meta, sort_keys=True)}
        return texts, tensors

    def save_checkpoint(self, path, init_state=None):
        return archive.save(path, *self.checkpoint_payload(init_state))

    @classmethod
    def from_checkpoint(cls, path, cfg: TrainConfig, augment_pad: int = 0) -> "Trainer":
        texts, tensors = archive.load(path)
        net = load_network(texts, tensors)
        meta = json.loads(texts["meta"])
        tr = cls(net, cfg, meta["task"], meta["frozen"], augment_pad)
        tr.epoch = meta["epoch"]
        tr.losses = list(meta["losses"])
        tr.opt.steps = meta["steps"]
        tr.opt.velocity = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("velocity/")}
        tr.shuffle_rng.bit_generator.state = meta["shuffle_rng"]
        tr.dropout_rng.bit_generator.state = meta["dropout_rng"]
        return tr


def load_network(texts: dict[str, str], tensors: dict[str, np.ndarray], prefix: str = "param/") -> Network:
    net = Network(NetworkSpec.from_text(texts["network_spec"]))
    net.load_state({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    return net


def save_model(path, net: Network):
    return archive.save(path, {"network_spec": net.spec.to_text()},
                        {f"param/{n}": v for n, v in net.state().items()})


def load_model(path) -> Network:
    return load_network(*archive.load(path))
