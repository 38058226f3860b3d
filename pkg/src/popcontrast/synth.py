"""Synthetic labeled populations with context-coded cell types.

Every neuron fires as an inhomogeneous Poisson process whose intensity is
a softplus-rectified sinusoid. The sinusoid's frequency is set by the
group's region; the neuron's cell type sets its phase *offset relative to
a random per-group global phase*, so absolute phase carries no type
information and the type is only recoverable by comparing a neuron to its
groupmates. Baseline and amplitude draws are independent of the labels,
so single-neuron rate statistics are uninformative by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import NeuronRecord, Recording
from .rng import RngStream

REGION_NAMES = "region_{:d}"
TYPE_NAMES = "type_{:d}"


@dataclass
class SynthConfig:
    n_animals: int = 2
    groups_per_animal: int = 1
    neurons_per_group: int = 8
    duration_s: float = 120.0
    n_cell_types: int = 2
    region_frequencies_hz: list[float] = field(
        default_factory=lambda: [1.0, 2.0, 4.0, 7.0]
    )
    n_regions: int | None = None  # default: len(region_frequencies_hz)
    amplitude_range: tuple[float, float] = (1.5, 2.5)
    baseline_range: tuple[float, float] = (1.0, 1.8)
    modality: str = "spikes"
    sample_rate_hz: float = 10.0
    calcium_decay_tau_s: float = 0.5
    calcium_noise_sd: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_cell_types < 2:
            raise ValueError("need at least two cell types")
        if self.n_regions is None:
            self.n_regions = len(self.region_frequencies_hz)
        if self.n_regions > len(self.region_frequencies_hz):
            raise ValueError("more regions than available frequencies")
        if self.modality not in ("spikes", "calcium"):
            raise ValueError(f"unknown modality {self.modality}")

    def type_phase(self, cell_type_index: int) -> float:
        """Phase offset of a cell type, with deliberately uneven spacing.

        Evenly spaced offsets would leave the type labels ambiguous: with
        balanced type counts, rotating the group's global phase by one
        spacing while cyclically relabeling the types reproduces the same
        data distribution, so no decoder could recover the true labels on
        unseen groups. Spacings proportional to 1..K (offsets 2π·T_c/T_K
        with T_c the c-th triangular number) give every type a unique
        pattern of phase gaps to its groupmates, which identifies it from
        population context alone; absolute phase stays uninformative.
        """
        c, k = cell_type_index, self.n_cell_types
        return 2.0 * math.pi * (c * (c + 1) / 2) / (k * (k + 1) / 2)


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class NeuronSpec:
    """Intensity-function parameters for one synthetic neuron."""

    baseline: float
    amplitude: float
    frequency_hz: float
    phase: float  # type phase + group global phase

    def rate(self, t):
        """Intensity in Hz at time(s) t."""
        return softplus(
            self.baseline
            + self.amplitude
            * np.sin(2.0 * math.pi * self.frequency_hz * np.asarray(t) + self.phase)
        )

    @property
    def rate_max(self) -> float:
        return float(softplus(self.baseline + self.amplitude))


def poisson_spikes(spec: NeuronSpec, duration_s: float, rng: RngStream) -> np.ndarray:
    """Inhomogeneous Poisson spike times via thinning against the peak rate."""
    lam_max = spec.rate_max
    if lam_max <= 0:
        return np.empty(0)
    n_candidates = int(rng.poisson(lam_max * duration_s))
    if n_candidates == 0:
        return np.empty(0)
    candidates = np.sort(rng.uniform(0.0, duration_s, size=n_candidates))
    accept = rng.uniform(0.0, 1.0, size=n_candidates) < spec.rate(candidates) / lam_max
    return candidates[accept]


def synth_calcium(
    spike_times: np.ndarray,
    duration_s: float,
    sample_rate_hz: float,
    decay_tau_s: float,
    noise_sd: float,
    rng: RngStream | None = None,
) -> np.ndarray:
    """Exponential-kernel trace sampled from a spike train, plus white noise.

    A spike contributes 1.0 at the first sample at-or-after its time and
    decays by exp(-dt/tau) per sample thereafter.
    """
    if decay_tau_s <= 0:
        raise ValueError("decay_tau_s must be positive")
    n_samples = int(round(duration_s * sample_rate_hz))
    dt = 1.0 / sample_rate_hz
    drive = np.zeros(n_samples)
    idx = np.ceil(np.asarray(spike_times) * sample_rate_hz - 1e-9).astype(np.int64)
    idx = idx[(idx >= 0) & (idx < n_samples)]
    np.add.at(drive, idx, 1.0)
    decay = math.exp(-dt / decay_tau_s)
    trace = np.empty(n_samples)
    acc = 0.0
    for i in range(n_samples):
        acc = acc * decay + drive[i]
        trace[i] = acc
    if noise_sd > 0:
        if rng is None:
            raise ValueError("noise requires an rng stream")
        trace = trace + rng.normal(0.0, noise_sd, size=n_samples)
    return trace


def group_specs(
    config: SynthConfig, rng: RngStream, region_index: int
) -> tuple[list[NeuronSpec], list[int]]:
    """Neuron specs plus cell-type assignment for one group.

    Types are assigned round-robin then shuffled; the group's global phase
    shifts every neuron identically.
    """
    n = config.neurons_per_group
    freq = config.region_frequencies_hz[region_index]
    global_phase = float(rng.uniform(0.0, 2.0 * math.pi))
    types = [i % config.n_cell_types for i in range(n)]
    order = rng.permutation(n)
    types = [types[i] for i in order]
    specs = []
    for t_idx in types:
        specs.append(
            NeuronSpec(
                baseline=float(rng.uniform(*config.baseline_range)),
                amplitude=float(rng.uniform(*config.amplitude_range)),
                frequency_hz=freq,
                phase=config.type_phase(t_idx) + global_phase,
            )
        )
    return specs, types


def generate_dataset(config: SynthConfig) -> list[Recording]:
    """One recording per animal, fully labeled, in the package dataset format."""
    root = RngStream(config.seed)
    recordings = []
    for animal in range(config.n_animals):
        session_id = f"synth_{animal:03d}"
        neurons: list[NeuronRecord] = []
        spike_times: dict[str, np.ndarray] = {}
        traces: dict[str, np.ndarray] = {}
        for g in range(config.groups_per_animal):
            group_rng = root.derive("group", animal, g)
            region_index = (animal * config.groups_per_animal + g) % config.n_regions
            specs, types = group_specs(config, group_rng, region_index)
            group_id = f"{session_id}_g{g}"
            for j, (spec, t_idx) in enumerate(zip(specs, types)):
                nid = f"{group_id}_n{j:03d}"
                neurons.append(
                    NeuronRecord(
                        neuron_id=nid,
                        group_id=group_id,
                        cell_type=TYPE_NAMES.format(t_idx),
                        region=REGION_NAMES.format(region_index),
                    )
                )
                spikes = poisson_spikes(
                    spec, config.duration_s, group_rng.derive("spikes", j)
                )
                if config.modality == "spikes":
                    spike_times[nid] = spikes
                else:
                    traces[nid] = synth_calcium(
                        spikes,
                        config.duration_s,
                        config.sample_rate_hz,
                        config.calcium_decay_tau_s,
                        config.calcium_noise_sd,
                        group_rng.derive("noise", j),
                    )
        if config.modality == "spikes":
            rec = Recording(
                session_id=session_id,
                subject_id=f"animal_{animal:03d}",
                modality="spikes",
                duration_s=config.duration_s,
                neurons=neurons,
                spike_times=spike_times,
            )
        else:
            rec = Recording(
                session_id=session_id,
                subject_id=f"animal_{animal:03d}",
                modality="calcium",
                duration_s=config.duration_s,
                neurons=neurons,
                traces=traces,
                sample_rate_hz=config.sample_rate_hz,
            )
        recordings.append(rec)
    return recordings
