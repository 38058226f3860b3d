"""View-pair sampling for contrastive pretraining.

Each epoch, every recording is tiled with jittered non-overlapping windows
(one shared jitter per recording per epoch); the second view of a pair is
drawn within delta_t_max of the first, and each view independently drops
up to half of the group's neurons.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import PatchedView, Recording, make_patched_view
from .errors import GroupTooSmall, RecordingTooShort
from .rng import RngStream


@dataclass
class SamplerConfig:
    t_ctx_s: float = 10.0
    t_patch_s: float = 1.0
    bin_size_s: float | None = 0.020
    delta_t_max_s: float = 30.0
    max_neuron_dropout: float = 0.5
    seed: int = 0


@dataclass
class ViewPair:
    recording: Recording
    group_id: str
    view1: PatchedView
    view2: PatchedView
    matched_pairs: list[tuple[int, int]]

    @property
    def n_matched(self) -> int:
        return len(self.matched_pairs)


def epoch_windows(duration_s: float, t_ctx: float, rng: RngStream) -> list[float]:
    """Jittered non-overlapping window starts covering one epoch.

    A single jitter j ~ U[0, t_ctx) shifts the whole grid; windows that
    would extend past the recording are dropped.
    """
    if duration_s < t_ctx:
        raise RecordingTooShort(
            f"duration {duration_s}s shorter than window {t_ctx}s"
        )
    j = float(rng.uniform(0.0, t_ctx))
    starts = []
    t = j
    while t + t_ctx <= duration_s + 1e-9:
        starts.append(t)
        t += t_ctx
    return starts


def sample_second_view(
    t1: float, delta_t_max: float, duration_s: float, t_ctx: float, rng: RngStream
) -> float:
    """Second window start, uniform on [t1 - dTmax, t1 + dTmax] clamped in range."""
    lo = max(0.0, t1 - delta_t_max)
    hi = min(duration_s - t_ctx, t1 + delta_t_max)
    if hi <= lo:
        return lo
    return float(rng.uniform(lo, hi))


def neuron_dropout(n_neurons: int, rng: RngStream, max_fraction: float = 0.5) -> list[int]:
    """Kept indices after dropping N_drop ~ U{0..floor(max_fraction*N)} neurons."""
    if n_neurons < 1:
        raise GroupTooSmall("need at least one neuron")
    max_drop = int(np.floor(max_fraction * n_neurons))
    n_drop = int(rng.integers(0, max_drop + 1))
    if n_drop == 0:
        return list(range(n_neurons))
    dropped = set(rng.choice(n_neurons, size=n_drop, replace=False).tolist())
    return [i for i in range(n_neurons) if i not in dropped]


def build_view_pair(
    recording: Recording,
    group_id: str,
    t1: float,
    config: SamplerConfig,
    rng: RngStream,
    dropout_enabled: bool = True,
) -> ViewPair:
    """Assemble both views and the matched-pair index set for one sample."""
    all_ids = [n.neuron_id for n in recording.neurons_in_group(group_id)]
    if len(all_ids) < 2:
        raise GroupTooSmall(
            f"group {group_id} has {len(all_ids)} neurons; need >= 2"
        )
    t2 = sample_second_view(
        t1, config.delta_t_max_s, recording.duration_s, config.t_ctx_s, rng
    )
    if dropout_enabled and config.max_neuron_dropout > 0:
        keep1 = neuron_dropout(len(all_ids), rng, config.max_neuron_dropout)
        keep2 = neuron_dropout(len(all_ids), rng, config.max_neuron_dropout)
    else:
        keep1 = list(range(len(all_ids)))
        keep2 = list(range(len(all_ids)))

    ids1 = [all_ids[i] for i in keep1]
    ids2 = [all_ids[i] for i in keep2]
    view1 = make_patched_view(
        recording, group_id, t1, config.t_ctx_s, config.t_patch_s,
        config.bin_size_s, neuron_ids=ids1,
    )
    view2 = make_patched_view(
        recording, group_id, t2, config.t_ctx_s, config.t_patch_s,
        config.bin_size_s, neuron_ids=ids2,
    )
    pos2 = {nid: j for j, nid in enumerate(ids2)}
    matched = [(i, pos2[nid]) for i, nid in enumerate(ids1) if nid in pos2]
    return ViewPair(
        recording=recording,
        group_id=group_id,
        view1=view1,
        view2=view2,
        matched_pairs=matched,
    )


def epoch_slots(
    recordings: list[Recording], config: SamplerConfig, epoch: int
) -> list[tuple[int, str, float]]:
    """All (recording index, group, window start) slots for one epoch, shuffled.

    The jitter stream is keyed by (seed, epoch, session) so coverage is
    reproducible and every slot appears exactly once per epoch.
    """
    base = RngStream(config.seed)
    slots: list[tuple[int, str, float]] = []
    for ri, rec in enumerate(recordings):
        jitter_rng = base.derive("epoch_jitter", epoch, rec.session_id)
        starts = epoch_windows(rec.duration_s, config.t_ctx_s, jitter_rng)
        for group_id in rec.group_ids:
            if len(rec.neurons_in_group(group_id)) < 2:
                continue
            for t1 in starts:
                slots.append((ri, group_id, t1))
    order = base.derive("epoch_order", epoch).permutation(len(slots))
    return [slots[i] for i in order]
