"""Pretraining loop: batches of view pairs, contrastive loss, AdamW updates.

Epoch slots are enumerated once per epoch (jittered windows across every
recording and group, shuffled), consumed batch_size at a time, and each
step re-encodes both views of every pair with shared parameters.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .data import Recording
from .errors import PopcontrastError
from .loss import LossConfig, batch_loss, pair_loss
from .model import EncoderConfig, encode_batch, init_params, project_head
from .numerics import ParamSet, backward
from .optim import AdamW, lr_at
from .rng import RngStream
from .sampling import SamplerConfig, build_view_pair, epoch_slots


@dataclass
class TrainConfig:
    total_steps: int = 50_000
    batch_size: int = 128
    max_lr: float = 5e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_steps: int | None = None  # default: one epoch's step count
    grad_clip: float | None = None
    seed: int = 0
    checkpoint_every: int = 0  # 0 = final checkpoint only
    temperature: float = 0.1
    dtype: str = "f32"

    def resolved_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


def steps_per_epoch(
    recordings: list[Recording], sampler_config: SamplerConfig, batch_size: int
) -> int:
    """Window-slot count of epoch 0, rounded up to whole batches."""
    n_slots = len(epoch_slots(recordings, sampler_config, epoch=0))
    return max(1, -(-n_slots // batch_size))


def train_step(
    pairs,
    params: ParamSet,
    encoder_config: EncoderConfig,
    loss_config: LossConfig,
    step_rng: RngStream,
):
    """Forward/backward over one batch; returns (loss value, total matched)."""
    active = [pair for pair in pairs if pair.n_matched > 0]
    if not active:
        return None, 0
    views = []
    for pair in active:
        views.append(pair.view1)
        views.append(pair.view2)
    reps = encode_batch(views, params, encoder_config, mode="train",
                        rng=step_rng.derive("drop"))
    proj = project_head(reps, params)
    contributions = []
    offset = 0
    for pair in active:
        n1 = pair.view1.patches.shape[0]
        n2 = pair.view2.patches.shape[0]
        p1 = proj[offset:offset + n1]
        p2 = proj[offset + n1:offset + n1 + n2]
        offset += n1 + n2
        loss_b = pair_loss(p1, p2, pair.matched_pairs, loss_config.temperature)
        contributions.append((loss_b, pair.n_matched))
    loss = batch_loss(contributions)
    params.zero_grad()
    backward(loss, params)
    return loss.item(), sum(n for _, n in contributions)


def train(
    recordings: list[Recording],
    encoder_config: EncoderConfig,
    sampler_config: SamplerConfig,
    train_config: TrainConfig,
    out_dir: str | Path,
    log_name: str = "metrics.jsonl",
) -> Checkpoint:
    """Run pretraining and write checkpoints plus a JSON-lines metrics log."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = train_config.resolved_dtype()
    root_rng = RngStream(train_config.seed)
    params = init_params(encoder_config, root_rng.derive("params"), dtype=dtype)
    optimizer = AdamW(
        params,
        beta1=train_config.beta1,
        beta2=train_config.beta2,
        eps=train_config.adam_eps,
        weight_decay=train_config.weight_decay,
    )
    loss_config = LossConfig(temperature=train_config.temperature)
    sessions = [rec.session_id for rec in recordings]

    warmup = train_config.warmup_steps
    if warmup is None:
        warmup = steps_per_epoch(recordings, sampler_config, train_config.batch_size)
    warmup = min(warmup, max(1, train_config.total_steps - 1)) if train_config.total_steps else 1

    def checkpoint(step):
        return Checkpoint(
            config=encoder_config,
            params=params,
            step=step,
            pretrain_sessions=sessions,
            extra={"sampler": asdict(sampler_config)},
        )

    log_path = out_dir / log_name
    slots: list = []
    epoch = 0
    with open(log_path, "w") as log:
        for step in range(train_config.total_steps):
            while len(slots) < train_config.batch_size:
                fresh = epoch_slots(recordings, sampler_config, epoch)
                if not fresh:
                    raise PopcontrastError("dataset produced no window slots")
                slots.extend(fresh)
                epoch += 1
            batch_slots = slots[: train_config.batch_size]
            slots = slots[train_config.batch_size :]

            t_start = time.perf_counter()
            step_rng = root_rng.derive("step", step)
            pairs = []
            for b, (ri, group_id, t1) in enumerate(batch_slots):
                try:
                    pairs.append(
                        build_view_pair(
                            recordings[ri], group_id, t1, sampler_config,
                            step_rng.derive("pair", b),
                        )
                    )
                except PopcontrastError as exc:
                    raise type(exc)(f"step {step}: {exc}") from exc

            try:
                loss_value, n_pairs = train_step(
                    pairs, params, encoder_config, loss_config, step_rng
                )
            except PopcontrastError as exc:
                raise type(exc)(f"step {step}: {exc}") from exc
            if loss_value is None:
                # every pair lost all matches to dropout; skip the update
                continue
            lr = lr_at(step, warmup, train_config.total_steps, train_config.max_lr)
            optimizer.step(lr, grad_clip=train_config.grad_clip)

            wall_ms = (time.perf_counter() - t_start) * 1000.0
            log.write(
                json.dumps(
                    {
                        "step": step,
                        "lr": lr,
                        "loss": loss_value,
                        "n_pairs": n_pairs,
                        "wall_ms": round(wall_ms, 3),
                    }
                )
                + "\n"
            )

            if (
                train_config.checkpoint_every
                and (step + 1) % train_config.checkpoint_every == 0
                and step + 1 < train_config.total_steps
            ):
                save_checkpoint(checkpoint(step + 1), out_dir / f"ckpt_{step + 1}.bin")

    final = checkpoint(train_config.total_steps)
    save_checkpoint(final, out_dir / "ckpt_final.bin")
    return final
