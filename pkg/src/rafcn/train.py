"""Training and evaluation loops."""

from __future__ import annotations

import json
import logging
import math
import time
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .data import Sample, split_iter
from .errors import NumericalError
from .metrics import ConfusionMatrix, mean_f1, report
from .network import Network, decode, forward, init, load_checkpoint, loss, save_checkpoint
from .optim import Nadam, PlateauScheduler
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


def _stack(samples: Sequence[Sample]) -> tuple[Tensor, np.ndarray]:
    return Tensor(np.stack([s.image for s in samples])), np.stack([s.labels for s in samples])


def batch_loss(net: Network, batch: Sequence[Sample]) -> Tensor:
    """Average of the per-tile losses, computed in one pass over the stacked batch."""
    images, labels = _stack(batch)
    return loss(forward(net, images), labels)


EVAL_CHUNK = 50


def evaluate(net: Network, samples: Sequence[Sample]) -> tuple[float, ConfusionMatrix]:
    """Mean per-tile loss and the confusion matrix over ``samples``."""
    cm = ConfusionMatrix(net.config.num_classes)
    total = 0.0
    with no_grad():
        for i in range(0, len(samples), EVAL_CHUNK):
            chunk = samples[i:i + EVAL_CHUNK]
            images, labels = _stack(chunk)
            logits = forward(net, images)
            total += loss(logits, labels).item() * len(chunk)
            cm.accumulate(decode(logits.data), labels)
    return total / len(samples), cm


def shuffle_seed(seed: int, epoch: int) -> int:
    return seed * 1_000_003 + epoch


@dataclass
class TrainState:
    it: int = 0
    epoch: int = 0
    batch_in_epoch: int = 0
    best_val: float = math.inf
    stale: int = 0

    def to_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((f"train.{k}", np.array(float(v))) for k, v in vars(self).items())

    @classmethod
    def from_arrays(cls, arrs) -> "TrainState":
        st = cls()
        for k in vars(st):
            key = f"train.{k}"
            if key in arrs:
                v = float(arrs[key])
                setattr(st, k, v if k == "best_val" else int(v))
        return st


@dataclass
class TrainResult:
    net: Network
    history: list[dict] = field(default_factory=list)
    best_params: "OrderedDict[str, np.ndarray] | None" = None
    stopped_early: bool = False

    def restore_best(self) -> None:
        if self.best_params is not None:
            for name, t in self.net.parameters().items():
                t.data = self.best_params[name].copy()


class Trainer:
    """Nadam + plateau schedule + early stopping on validation loss.

    Evaluates every ``eval_every`` iterations. When ``out_dir`` is set it
    appends one JSON line per evaluation to ``log.jsonl``, rewrites
    ``last.ckpt`` and, on improvement, ``best.ckpt``. A checkpoint holds the
    parameters plus optimizer, scheduler and loop state, so resuming from it
    continues bit-exactly.
    """

    def __init__(self, cfg: RunConfig, train: Sequence[Sample], val: Sequence[Sample],
                 net: Network | None = None, out_dir=None):
        self.cfg = cfg
        self.train_set, self.val_set = list(train), list(val)
        self.net = net if net is not None else init(cfg.network)
        o = cfg.optim
        self.opt = Nadam(lr=o.lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps)
        self.sched = PlateauScheduler(lr=o.lr, factor=o.decay_factor, patience=o.plateau_patience,
                                      threshold=o.plateau_threshold, min_lr=o.min_lr)
        self.state = TrainState()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.best_params: OrderedDict[str, np.ndarray] | None = None
        self.history: list[dict] = []

    # -- persistence --------------------------------------------------------

    def _extra(self) -> "OrderedDict[str, np.ndarray]":
        extra = OrderedDict()
        extra.update(self.opt.state_dict())
        extra.update(self.sched.state_dict())
        extra.update(self.state.to_arrays())
        return extra

    def save(self, path) -> None:
        save_checkpoint(path, self.net, self._extra(), meta={"run": self.cfg.to_dict()})

    @classmethod
    def resume(cls, path, train, val, out_dir=None) -> "Trainer":
        net, header, extra = load_checkpoint(path)
        cfg = RunConfig.from_dict(header["run"])
        tr = cls(cfg, train, val, net=net, out_dir=out_dir)
        tr.opt.load_state_dict(extra)
        tr.sched.load_state_dict(extra)
        tr.state = TrainState.from_arrays(extra)
        best = Path(path).with_name("best.ckpt")
        if best.exists():
            tr.best_params = OrderedDict((n, t.data.copy()) for n, t in load_checkpoint(best)[0].parameters().items())
        return tr

    # -- loop ---------------------------------------------------------------

    def _batches(self):
        st = self.state
        while True:
            batches = list(split_iter(self.train_set, self.cfg.train.batch,
                                      shuffle_seed(self.cfg.seed, st.epoch)))
            for b in batches[st.batch_in_epoch:]:
                st.batch_in_epoch += 1
                yield b
            st.epoch += 1
            st.batch_in_epoch = 0

    def step(self, batch: Sequence[Sample]) -> float:
        self.net.zero_grad()
        value = batch_loss(self.net, batch)
        if not math.isfinite(value.item()):
            raise NumericalError("loss", f"training loss is {value.item()} at iteration {self.state.it}")
        value.backward()
        self.opt.step(self.net.parameters())
        self.state.it += 1
        return value.item()

    def run(self, max_iters: int | None = None) -> TrainResult:
        tc = self.cfg.train
        limit = tc.max_iters if max_iters is None else max_iters
        st = self.state
        window: list[float] = []
        stopped = False
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        batches = self._batches()
        while st.it < limit:
            window.append(self.step(next(batches)))
            if st.it % tc.eval_every:
                continue
            val_loss, cm = evaluate(self.net, self.val_set)
            lr = self.sched.observe(val_loss)
            self.opt.lr = lr
            improved = val_loss < st.best_val - self.cfg.optim.plateau_threshold
            if improved:
                st.best_val, st.stale = val_loss, 0
                self.best_params = OrderedDict((n, t.data.copy()) for n, t in self.net.parameters().items())
            else:
                st.stale += 1
            entry = {"iter": st.it, "train_loss": float(np.mean(window)), "val_loss": val_loss,
                     "val_mean_f1": mean_f1_quiet(cm), "lr": lr}
            window = []
            self.history.append(entry)
            log.info("iter %d train %.4f val %.4f mF1 %.4f lr %.1e", st.it, entry["train_loss"],
                     val_loss, entry["val_mean_f1"], lr)
            if self.out_dir is not None:
                with open(self.out_dir / "log.jsonl", "a") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")
                self.save(self.out_dir / "last.ckpt")
                if improved:
                    self.save(self.out_dir / "best.ckpt")
            if st.stale >= tc.early_stop_patience:
                stopped = True
                break
        return TrainResult(self.net, self.history, self.best_params, stopped)


def mean_f1_quiet(cm: ConfusionMatrix) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return mean_f1(cm)


def score(net: Network, samples: Sequence[Sample], class_names=None) -> dict:
    _, cm = evaluate(net, samples)
    return report(cm, class_names)


# -- ablation -------------------------------------------------------------------

ABLATION_ROWS = (
    ("none", "Baseline FCN"),
    ("crm_only", "RA-FCN-crm"),
    ("srm_only", "RA-FCN-srm"),
    ("parallel", "P-RA-FCN"),
    ("serial", "S-RA-FCN"),
)


def train_and_score(cfg: RunConfig, train: Sequence[Sample], val: Sequence[Sample],
                    test: Sequence[Sample], out_dir=None) -> tuple[TrainResult, dict]:
    """Train from scratch, roll back to the best validation checkpoint, score ``test``."""
    result = Trainer(cfg, train, val, out_dir=out_dir).run()
    result.restore_best()
    return result, score(result.net, test)


def ablate(cfg: RunConfig, train: Sequence[Sample], val: Sequence[Sample], test: Sequence[Sample],
           modes: Sequence[str] | None = None, out_dir=None) -> list[dict]:
    """One row per integration mode, all trained with the same seed, data and budget."""
    wanted = [m for m, _ in ABLATION_ROWS] if modes is None else list(modes)
    labels = dict(ABLATION_ROWS)
    rows = []
    for mode in wanted:
        run_cfg = cfg.replace(network={**cfg.network.to_dict(), "mode": mode})
        sub = None if out_dir is None else Path(out_dir) / mode
        t0 = time.perf_counter()
        result, rep = train_and_score(run_cfg, train, val, test, out_dir=sub)
        rows.append({"mode": mode, "model": labels.get(mode, mode), "mean_f1": rep["mean_f1"],
                     "oa": rep["oa"], "iterations": result.history[-1]["iter"] if result.history else 0,
                     "seconds": time.perf_counter() - t0, "report": rep})
        log.info("%s: mean F1 %.4f OA %.4f", mode, rep["mean_f1"], rep["oa"])
    return rows
