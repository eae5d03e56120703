"""Masked multi-task loss, Adam, and the training loop.

The loss treats each pixel of each task as a 256-way classification and
averages the cross-entropy over exactly the (pixel, task) cells whose
task is present in the sample's mask; absent tasks contribute nothing
to the value or the gradient, so label coverage never changes the loss
scale. Optimisation is plain bias-corrected Adam.

A run is a pure function of (manifest, configs, seed): sampling and
dropout share one generator whose state is checkpointed, so resuming
from any checkpoint replays the remaining steps bit-for-bit.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import data_io, gptt
from .autograd import Variable
from .errors import ConfigError, DataError, NumericError, ShapeError
from .multiscale import sample_training_patch
from .network import (NetworkConfig, build, forward, load_checkpoint,
                      save_checkpoint)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_steps: int = 1000
    checkpoint_interval: int = 500
    seed: int = 0
    precision: int = 32

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"train config: batch_size {self.batch_size} < 1")
        if self.learning_rate <= 0:
            raise ConfigError(f"train config: learning_rate {self.learning_rate} <= 0")
        if self.precision not in (32, 64):
            raise ConfigError(f"train config: precision must be 32 or 64")
        if self.max_steps < 1 or self.checkpoint_interval < 1:
            raise ConfigError("train config: steps and interval must be >= 1")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"train config: unknown fields {sorted(extra)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def masked_cross_entropy(
    logits: Variable,
    targets: np.ndarray,
    mask: np.ndarray,
    value_classes: int,
) -> Variable:
    """Mean 256-way cross-entropy over the active (pixel, task) cells.

    logits: (N, H, W, T * value_classes); targets: (N, H, W, T) integer
    classes; mask: (N, T) booleans. With no active cell the loss is an
    exact zero with zero gradients.
    """
    n, h, w, c = logits.data.shape
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if targets.ndim != 4 or targets.shape[:3] != (n, h, w):
        raise ShapeError(f"cross entropy: targets {targets.shape} do not match logits")
    t = targets.shape[3]
    if c != t * value_classes:
        raise ShapeError(
            f"cross entropy: {c} logit channels != {t} tasks * {value_classes} classes"
        )
    if mask.shape != (n, t):
        raise ShapeError(f"cross entropy: mask {mask.shape}, expected ({n}, {t})")
    if targets.min() < 0 or targets.max() >= value_classes:
        raise DataError(
            f"cross entropy: target classes outside [0, {value_classes})"
        )

    z = logits.data.reshape(n, h, w, t, value_classes)
    zmax = z.max(axis=-1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=-1, keepdims=True)
    log_probs = (z - zmax) - np.log(sez)
    picked = np.take_along_axis(log_probs, targets[..., None], axis=-1)[..., 0]

    active = np.broadcast_to(mask[:, None, None, :], (n, h, w, t))
    count = int(active.sum())
    if count == 0:
        return ag.make_op(np.zeros((), dtype=logits.data.dtype), (logits,),
                          lambda g: ag.accumulate(logits, np.zeros_like(logits.data)))
    loss = -(picked * active).sum() / count

    def bw(g):
        soft = ez / sez
        onehot = np.zeros_like(soft)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        dz = (soft - onehot) * active[..., None] * (g / count)
        ag.accumulate(logits, dz.reshape(n, h, w, c).astype(logits.data.dtype))

    return ag.make_op(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    t: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def create(cls, params: dict[str, Variable]) -> "AdamState":
        return cls(
            t=0,
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(params: dict[str, Variable], state: AdamState,
              config: TrainConfig) -> None:
    """One bias-corrected Adam update, in place."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = ag.grad_of(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    loss_log: list[tuple[int, float, float]]  # (step, loss, seconds)
    checkpoints: list[Path]
    final_checkpoint: Path
    loss_csv: Path


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _write_loss_csv(path: Path, rows: list[tuple[int, float, float]]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "seconds"])
        for step, loss, seconds in rows:
            writer.writerow([step, f"{loss:.9g}", f"{seconds:.3f}"])


def train(
    manifest: data_io.Manifest,
    net_config: NetworkConfig,
    train_config: TrainConfig,
    out_dir: str | Path,
    resume: str | Path | None = None,
) -> TrainResult:
    """Run the loop: sample patches, forward, masked loss, backward, Adam.

    Writes loss.csv plus periodic and final checkpoints under out_dir.
    A non-finite loss aborts with a diagnostic dump of the offending
    batch. Fully reproducible from (manifest, configs, seed); resuming
    from a checkpoint continues the identical stream.
    """
    train_config.validate()
    net_config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    records = manifest.split("train")
    if not records:
        raise DataError("train: manifest has no training samples")
    issues = data_io.validate_manifest(manifest, task_count=net_config.task_count)
    if issues:
        raise DataError(f"train: manifest has issues, first: {issues[0]}")
    samples = [data_io.load_sample(manifest, rec) for rec in records]
    for rec, s in zip(records, samples):
        if s.image.shape[2] != net_config.input_channels:
            raise DataError(
                f"{rec.input_path}: {s.image.shape[2]} channels, "
                f"config expects {net_config.input_channels}"
            )

    dtype = train_config.dtype
    init_ss, loop_ss = np.random.SeedSequence(train_config.seed).spawn(2)
    loop_rng = np.random.default_rng(loop_ss)

    start_step = 0
    if resume is None:
        net = build(net_config, np.random.default_rng(init_ss), dtype=dtype)
        params = net.named_parameters()
        opt = AdamState.create(params)
    else:
        if train_config.precision != 32:
            raise ConfigError("resume: only 32-bit runs can resume (checkpoints are f32)")
        net, extras = load_checkpoint(resume)
        if net.config != net_config:
            raise DataError("resume: checkpoint config differs from requested config")
        params = net.named_parameters()
        if "optimizer" in extras:
            opt = AdamState(t=extras["optimizer"]["t"],
                            m=extras["optimizer"]["m"],
                            v=extras["optimizer"]["v"])
        else:
            opt = AdamState.create(params)
        if extras.get("rng_state"):
            loop_rng.bit_generator.state = extras["rng_state"]
        start_step = extras["step"]

    patch = net_config.patch_size
    tasks = net_config.task_count
    loss_log: list[tuple[int, float, float]] = []
    checkpoints: list[Path] = []
    started = time.monotonic()

    def save(step: int) -> Path:
        path = out_dir / f"checkpoint_{step:06d}.gptc"
        save_checkpoint(path, net, step=step,
                        optimizer={"t": opt.t, "m": opt.m, "v": opt.v},
                        rng_state=_rng_state(loop_rng))
        return path

    for step in range(start_step + 1, train_config.max_steps + 1):
        xs, ts, ms = [], [], []
        for _ in range(train_config.batch_size):
            idx = int(loop_rng.integers(len(samples)))
            inp, targets, mask = sample_training_patch(samples[idx], loop_rng, patch, tasks)
            xs.append(inp)
            ts.append(targets)
            ms.append(mask)
        x = ag.var(np.stack(xs).astype(dtype))
        targets = np.stack(ts)
        mask = np.stack(ms)

        try:
            logits = forward(net, x, mode="train", rng=loop_rng)
            loss = masked_cross_entropy(logits, targets, mask, net_config.value_classes)
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                raise NumericError(f"train: non-finite loss at step {step}")
        except NumericError as exc:
            dump = out_dir / f"diagnostic_step{step:06d}"
            dump.mkdir(exist_ok=True)
            gptt.save_gptt(dump / "input.gptt", x.data.astype(np.float32))
            gptt.save_gptt(dump / "targets.gptt", targets.astype(np.float32))
            save_checkpoint(dump / "state.gptc", net, step=step)
            raise NumericError(f"{exc}; offending batch dumped to {dump}") from exc

        ag.zero_grad(params.values())
        ag.backward(loss)
        adam_step(params, opt, train_config)
        loss_log.append((step, loss_value, time.monotonic() - started))

        if step % train_config.checkpoint_interval == 0 and step < train_config.max_steps:
            checkpoints.append(save(step))

    final = save(train_config.max_steps)
    checkpoints.append(final)
    loss_csv = out_dir / "loss.csv"
    _write_loss_csv(loss_csv, loss_log)
    return TrainResult(loss_log, checkpoints, final, loss_csv)
