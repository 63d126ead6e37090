"""Training loop, freeze flags, early stopping and checkpoints.

``Trainer`` is model-agnostic: it is handed a way to draw an epoch of
examples, a way to turn a chunk of examples into a scalar loss, and an
optional validation callback returning R@10. ``lite_trainer`` wires it up for
the hierarchical model; the generative baseline supplies its own loss.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Example, SplitView, all_examples, make_batches, sampling_examples
from .errors import ChecksumError, ContractError, FormatError, TrainingError, VersionError
from .nn import Dropout, Module
from .optim import OptimizerState, adamw_step
from .tensor import Parameter, Tape, Tensor


@dataclass
class TrainConfig:
    """Optimisation settings. ``dropout`` is the run-wide rate that model
    configs inherit (see :func:`set_dropout` to change it on a built model)."""

    strategy: str = "sampling"
    lr: float = 1e-3
    batch_size: int = 64
    dropout: float = 0.1
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1
    adam_eps: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    max_seq_len: int = 21
    epochs: int = 40
    early_stop_patience: int = 20
    seed: int = 0
    freeze_rec_encoder: bool = False
    freeze_projection_head: bool = False
    fine_tune_cached_embeddings: bool = False
    phase2_epochs: int = 0
    validate: bool = True

    def __post_init__(self):
        if self.strategy not in ("sampling", "all"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @classmethod
    def profile(cls, name: str, **overrides) -> "TrainConfig":
        """``desk`` suits tiny from-scratch models; ``paper`` keeps the published values."""
        base = {
            "desk": {},
            "paper": {"lr": 5e-4, "batch_size": 256, "dropout": 0.8, "weight_decay": 0.1},
        }
        if name not in base:
            raise ValueError(f"unknown profile {name!r} (expected desk or paper)")
        return cls(**{**base[name], **overrides})


def compute_loss(logits: Tensor, targets) -> Tensor:
    """Full-softmax cross-entropy over the whole catalog.

    Every non-target item sits in the normaliser, so all un-interacted items
    act as negatives and no negative sampling is needed.
    """
    return T.cross_entropy_logits(logits, targets)


@dataclass
class StopDecision:
    stop: bool
    best_epoch: int  # 1-based
    best_value: float


def early_stop_check(history: Sequence[float], patience: int = 20) -> StopDecision:
    """Stop once ``patience`` epochs pass without a strict improvement."""
    if not history:
        raise ContractError("early stopping needs at least one validation value")
    best_idx = int(np.argmax(history))  # first maximum = first strict improvement to it
    return StopDecision(len(history) - (best_idx + 1) >= patience, best_idx + 1, float(history[best_idx]))


def set_dropout(model: Module, rate: float) -> None:
    for m in model.modules():
        if isinstance(m, Dropout):
            m.rate = rate


def trainable_parameters(model: Module, config: TrainConfig) -> dict[str, Parameter]:
    """Parameters the optimizer may touch, honouring the freeze flags."""
    frozen = set()
    if config.freeze_rec_encoder:
        frozen.add("rec_encoder")
    if config.freeze_projection_head:
        frozen.add("head")
    if getattr(model, "item_table", None) is not None:
        frozen |= {"item_encoder"}
    return {n: p for n, p in model.named_parameters() if n.split(".", 1)[0] not in frozen}


@dataclass
class EpochStats:
    epoch: int
    loss: float
    batches: int
    examples: int
    seconds: float
    lr: float

    @property
    def throughput(self) -> float:
        return self.examples / self.seconds if self.seconds > 0 else float("inf")


@dataclass
class TrainResult:
    epochs: list[EpochStats] = field(default_factory=list)
    val_history: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_value: float = float("-inf")
    stopped_early: bool = False

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]


class Trainer:
    def __init__(
        self,
        model: Module,
        config: TrainConfig,
        draw_examples: Callable[[np.random.Generator], list[Example]],
        batch_loss: Callable[[list[Example]], Tensor],
        validate: Callable[[], float] | None = None,
        steps_per_epoch: int | None = None,
        log: Callable[[str], None] | None = None,
    ):
        self.model = model
        self.config = config
        self.draw_examples = draw_examples
        self.batch_loss = batch_loss
        self.validate = validate
        self.log = log or (lambda msg: None)
        self.rng = np.random.default_rng(config.seed)
        self.params = trainable_parameters(model, config)
        self.opt = OptimizerState(
            lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps,
            weight_decay=config.weight_decay, warmup_fraction=config.warmup_fraction,
        )
        self.steps_per_epoch = steps_per_epoch
        self.global_step = 0
        self.epoch = 0
        self.best_state: dict[str, np.ndarray] | None = None
        self.result = TrainResult()

    @property
    def total_steps(self) -> int:
        per = self.steps_per_epoch
        if per is None:
            per = math.ceil(len(self.draw_examples(np.random.default_rng(0))) / self.config.batch_size)
            self.steps_per_epoch = per
        return per * self.config.epochs

    def train_epoch(self) -> EpochStats:
        cfg = self.config
        total = self.total_steps
        examples = self.draw_examples(self.rng)
        if not examples:
            raise ContractError("no training examples")
        order = self.rng.permutation(len(examples))
        examples = [examples[i] for i in order]
        self.model.train()
        start = time.perf_counter()
        losses, lr = [], 0.0
        for b, lo in enumerate(range(0, len(examples), cfg.batch_size)):
            chunk = examples[lo:lo + cfg.batch_size]
            for p in self.params.values():
                p.grad = None
            with Tape() as tape:
                loss = self.batch_loss(chunk)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite loss {value} at epoch {self.epoch + 1}, batch {b} (lr={lr:.3g}, step={self.global_step})"
                )
            tape.backward(loss)
            tape.release()
            for name, p in self.params.items():
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)  # not reached by this batch
            lr = adamw_step(self.params, self.opt, self.global_step, total)
            self.global_step += 1
            losses.append(value)
        self.epoch += 1
        stats = EpochStats(self.epoch, float(np.mean(losses)), len(losses), len(examples), time.perf_counter() - start, lr)
        self.result.epochs.append(stats)
        return stats

    def fit(self, epochs: int | None = None) -> TrainResult:
        """Train with validation-driven early stopping; restores the best epoch."""
        epochs = self.config.epochs if epochs is None else epochs
        res = self.result
        for _ in range(epochs):
            stats = self.train_epoch()
            msg = f"epoch {stats.epoch:3d}  loss {stats.loss:.4f}  {stats.seconds:.1f}s"
            if self.validate is not None and self.config.validate:
                r10 = float(self.validate())
                res.val_history.append(r10)
                decision = early_stop_check(res.val_history, self.config.early_stop_patience)
                if decision.best_epoch == len(res.val_history):
                    self.best_state = self.model.state_dict()
                res.best_epoch, res.best_value = decision.best_epoch, decision.best_value
                msg += f"  val R@10 {r10:.4f}"
                self.log(msg)
                if decision.stop:
                    res.stopped_early = True
                    break
            else:
                self.log(msg)
        if self.best_state is not None:
            self.model.load_state_dict(self.best_state)
        return res


def train_epoch(trainer: Trainer) -> EpochStats:
    return trainer.train_epoch()


# ---------------------------------------------------------------------------
# hierarchical model wiring


def lite_examples(split: SplitView, config: TrainConfig) -> Callable[[np.random.Generator], list[Example]]:
    if config.strategy == "sampling":
        return lambda rng: sampling_examples(split, config.max_seq_len, rng)
    fixed = all_examples(split, config.max_seq_len)
    return lambda rng: fixed


def lite_trainer(model, split: SplitView, config: TrainConfig, validate: bool = True, log=None) -> Trainer:
    from .evaluation import evaluate_full

    pad_to = config.max_seq_len - 1

    def batch_loss(chunk: list[Example]) -> Tensor:
        batch = make_batches(chunk, len(chunk), pad_to, model.pad_index)[0]
        return compute_loss(model(batch.inputs, batch.mask), batch.targets)

    def val() -> float:
        return evaluate_full(model, split, ks=(10,), stage="valid")["R@10"]

    draw = lite_examples(split, config)
    n_users = sum(len(t) >= 2 for t in split.train)
    per = math.ceil(n_users / config.batch_size) if config.strategy == "sampling" else None
    return Trainer(model, config, draw, batch_loss, val if validate else None, per, log)


def train_lite(model, split: SplitView, config: TrainConfig, log=None) -> tuple[TrainResult, Trainer]:
    """Phase 1 joint training, then optional phase 2 on trainable cached vectors."""
    trainer = lite_trainer(model, split, config, validate=config.validate, log=log)
    result = trainer.fit()
    if config.fine_tune_cached_embeddings and config.phase2_epochs > 0:
        model.enable_trainable_item_table()
        phase2 = TrainConfig(**{**asdict(config), "epochs": config.phase2_epochs})
        trainer2 = lite_trainer(model, split, phase2, validate=config.validate, log=log)
        return trainer2.fit(), trainer2
    return result, trainer


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"LLRECCKP"
CKPT_VERSION = 1
_HEADER = struct.Struct("<8sIQ32s")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAGS = {np.dtype(v).newbyteorder("=").str: k for k, v in _DTYPES.items()}


def _tag(arr: np.ndarray) -> int:
    key = arr.dtype.newbyteorder("=").str
    if key not in _TAGS:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    return _TAGS[key]


def _write_table(buf: io.BytesIO, table: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(table)))
    for name in sorted(table):
        arr = np.ascontiguousarray(table[name])
        tag = _tag(arr)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<BB", tag, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.astype(_DTYPES[tag], copy=False).tobytes())


def _read_table(buf: io.BytesIO) -> dict[str, np.ndarray]:
    def read(n: int) -> bytes:
        b = buf.read(n)
        if len(b) != n:
            raise FormatError("checkpoint payload ended early")
        return b

    (count,) = struct.unpack("<I", read(4))
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", read(2))
        name = read(n).decode("utf-8")
        tag, ndim = struct.unpack("<BB", read(2))
        if tag not in _DTYPES:
            raise FormatError(f"unknown dtype tag {tag}")
        shape = struct.unpack(f"<{ndim}Q", read(8 * ndim))
        dt = _DTYPES[tag]
        count_el = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(read(dt.itemsize * count_el), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    return out


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer: OptimizerState | None = None
    epoch: int = 0
    best_r10: float = 0.0
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: a sibling ``.incomplete`` file is renamed on success."""
    buf = io.BytesIO()
    _write_table(buf, ckpt.params)
    opt = ckpt.optimizer
    hyper = {}
    if opt is not None:
        hyper = {f.name: getattr(opt, f.name) for f in fields(opt) if f.name not in ("m", "v")}
        _write_table(buf, opt.m)
        _write_table(buf, opt.v)
    else:
        _write_table(buf, {})
        _write_table(buf, {})
    blob = json.dumps({
        "optimizer": hyper if opt is not None else None,
        "epoch": ckpt.epoch,
        "best_r10": ckpt.best_r10,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
    }, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)) + blob)
    payload = buf.getvalue()
    header = _HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(payload), hashlib.sha256(payload).digest())
    path = Path(path)
    tmp = path.with_name(path.name + ".incomplete")
    tmp.write_bytes(header + payload)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        if raw[:8] != CKPT_MAGIC[: len(raw[:8])]:
            raise FormatError(f"{path} is not a checkpoint")
        raise ChecksumError(f"{path} is truncated")
    magic, version, length, digest = _HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path} is not a checkpoint (bad magic {magic!r})")
    if version != CKPT_VERSION:
        raise VersionError(f"checkpoint format version {version}, this build reads {CKPT_VERSION}")
    payload = raw[_HEADER.size:]
    if len(payload) != length or hashlib.sha256(payload).digest() != digest:
        raise ChecksumError(f"{path} failed its checksum (truncated or corrupt)")
    buf = io.BytesIO(payload)
    params = _read_table(buf)
    m, v = _read_table(buf), _read_table(buf)
    (n,) = struct.unpack("<I", buf.read(4))
    info = json.loads(buf.read(n).decode("utf-8"))
    opt = None
    if info["optimizer"] is not None:
        opt = OptimizerState(**info["optimizer"], m=m, v=v)
    return Checkpoint(params, opt, info["epoch"], info["best_r10"], info["rng_state"], info["meta"])


def trainer_checkpoint(trainer: Trainer, meta: dict | None = None) -> Checkpoint:
    model = trainer.model
    rng_state = {"trainer": trainer.rng.bit_generator.state, "global_step": trainer.global_step}
    if hasattr(model, "rng"):
        rng_state["model"] = model.rng.bit_generator.state
    return Checkpoint(
        model.state_dict(), trainer.opt, trainer.epoch, max(trainer.result.val_history, default=0.0), rng_state, meta or {},
    )


def restore_trainer(trainer: Trainer, ckpt: Checkpoint) -> None:
    """Put model, optimizer and random streams back exactly as saved."""
    model = trainer.model
    model.load_state_dict(ckpt.params)
    if ckpt.optimizer is not None:
        trainer.opt = ckpt.optimizer
    trainer.epoch = ckpt.epoch
    trainer.global_step = ckpt.rng_state.get("global_step", 0)
    if "trainer" in ckpt.rng_state:
        trainer.rng.bit_generator.state = ckpt.rng_state["trainer"]
    if "model" in ckpt.rng_state and hasattr(model, "rng"):
        model.rng.bit_generator.state = ckpt.rng_state["model"]
    trainer.params = trainable_parameters(model, trainer.config)
