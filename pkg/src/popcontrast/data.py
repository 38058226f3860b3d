"""Recordings, spike binning / trace patching, and the on-disk dataset format.

A dataset directory holds `manifest.json` plus one CSV per session under
`spikes/` (columns neuron_id,time_s) or `traces/` (columns
neuron_id,sample_index,value). Neurons listed in the manifest without any
activity rows are valid and simply have zero spikes (or an all-zero trace).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    MissingActivity,
    NonDivisibleWindow,
    SchemaError,
    WindowOutOfRange,
)

FORMAT_VERSION = 1


@dataclass
class NeuronRecord:
    neuron_id: str
    group_id: str
    cell_type: str | None = None
    region: str | None = None


@dataclass
class Recording:
    """One session's population activity plus neuron metadata."""

    session_id: str
    subject_id: str
    modality: str  # "spikes" or "calcium"
    duration_s: float
    neurons: list[NeuronRecord]
    spike_times: dict[str, np.ndarray] = field(default_factory=dict)
    traces: dict[str, np.ndarray] = field(default_factory=dict)
    sample_rate_hz: float | None = None

    def __post_init__(self):
        if self.modality not in ("spikes", "calcium"):
            raise SchemaError(f"unknown modality: {self.modality}")
        if self.duration_s <= 0:
            raise SchemaError("duration_s must be positive")
        ids = [n.neuron_id for n in self.neurons]
        if len(set(ids)) != len(ids):
            raise SchemaError(f"duplicate neuron_id in session {self.session_id}")
        for n in self.neurons:
            if not n.group_id:
                raise SchemaError(f"empty group_id for neuron {n.neuron_id}")
        if self.modality == "calcium" and self.sample_rate_hz is None:
            raise SchemaError("calcium recordings require sample_rate_hz")
        self._fill_missing_activity()
        self._validate_activity()

    def _fill_missing_activity(self):
        for n in self.neurons:
            if self.modality == "spikes":
                if n.neuron_id not in self.spike_times:
                    self.spike_times[n.neuron_id] = np.empty(0, dtype=np.float64)
            else:
                if n.neuron_id not in self.traces:
                    self.traces[n.neuron_id] = np.zeros(self.n_samples, dtype=np.float64)

    def _validate_activity(self):
        known = {n.neuron_id for n in self.neurons}
        activity = self.spike_times if self.modality == "spikes" else self.traces
        for nid in activity:
            if nid not in known:
                raise SchemaError(f"activity for unknown neuron {nid}")
        if self.modality == "spikes":
            for nid, times in self.spike_times.items():
                times = np.sort(np.asarray(times, dtype=np.float64))
                if times.size and (times[0] < 0 or times[-1] >= self.duration_s):
                    raise SchemaError(
                        f"spike times out of [0, duration) for neuron {nid}"
                    )
                self.spike_times[nid] = times
        else:
            for nid, trace in self.traces.items():
                trace = np.asarray(trace, dtype=np.float64)
                if trace.size != self.n_samples:
                    raise SchemaError(
                        f"trace length {trace.size} != {self.n_samples} for {nid}"
                    )
                self.traces[nid] = trace

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * float(self.sample_rate_hz)))

    @property
    def group_ids(self) -> list[str]:
        seen = []
        for n in self.neurons:
            if n.group_id not in seen:
                seen.append(n.group_id)
        return seen

    def neurons_in_group(self, group_id: str) -> list[NeuronRecord]:
        return [n for n in self.neurons if n.group_id == group_id]


@dataclass
class PatchedView:
    """One T_ctx window of a population, binned (or sampled) and patched."""

    window_start_s: float
    neuron_ids: list[str]
    patches: np.ndarray  # N x P x F
    patch_timestamps_s: np.ndarray  # P, patch centers in absolute session time

    @property
    def n_neurons(self) -> int:
        return self.patches.shape[0]

    @property
    def n_patches(self) -> int:
        return self.patches.shape[1]


# -- binning and patching --------------------------------------------------


def bin_spikes(
    spike_times: np.ndarray, t0: float, t_ctx: float, bin_size: float
) -> np.ndarray:
    """Count spikes in half-open bins [t0+k*bin, t0+(k+1)*bin).

    A spike exactly on a boundary belongs to the bin on its right.
    """
    n_bins_f = t_ctx / bin_size
    n_bins = int(round(n_bins_f))
    if abs(n_bins_f - n_bins) > 1e-9 * max(1.0, n_bins_f) or n_bins < 1:
        raise NonDivisibleWindow(f"bin_size {bin_size} does not divide window {t_ctx}")
    if t0 < 0:
        raise WindowOutOfRange(f"window start {t0} < 0")
    times = np.asarray(spike_times, dtype=np.float64)
    inside = times[(times >= t0) & (times < t0 + t_ctx)]
    idx = np.floor((inside - t0) / bin_size).astype(np.int64)
    # float roundoff can push a boundary spike one bin off; clamp into range
    np.clip(idx, 0, n_bins - 1, out=idx)
    counts = np.bincount(idx, minlength=n_bins)
    return counts.astype(np.int64)


def patch_bins(counts: np.ndarray, bins_per_patch: int) -> np.ndarray:
    """Reshape a flat count vector into P x bins_per_patch rows (as reals)."""
    counts = np.asarray(counts)
    if counts.size % bins_per_patch != 0:
        raise NonDivisibleWindow(
            f"{bins_per_patch} bins per patch does not divide {counts.size} bins"
        )
    return counts.reshape(-1, bins_per_patch).astype(np.float64)


def patch_trace(
    trace: np.ndarray,
    t0: float,
    t_ctx: float,
    samples_per_patch: int,
    sample_rate_hz: float,
) -> np.ndarray:
    """Window a uniformly sampled trace and reshape into patches.

    The window is snapped to the sample grid by rounding t0 to the nearest
    sample. No binning is applied.
    """
    trace = np.asarray(trace, dtype=np.float64)
    start = int(round(t0 * sample_rate_hz))
    n = int(round(t_ctx * sample_rate_hz))
    if n % samples_per_patch != 0:
        raise NonDivisibleWindow(
            f"{samples_per_patch} samples per patch does not divide {n} samples"
        )
    if start < 0 or start + n > trace.size:
        raise WindowOutOfRange(
            f"window [{t0}, {t0 + t_ctx}) falls outside the trace"
        )
    return trace[start : start + n].reshape(-1, samples_per_patch).copy()


def make_patched_view(
    recording: Recording,
    group_id: str,
    t0: float,
    t_ctx: float,
    t_patch: float,
    bin_size: float | None,
    neuron_ids: list[str] | None = None,
) -> PatchedView:
    """Bin/patch one window of one group into an N x P x F array."""
    if t0 < 0 or t0 + t_ctx > recording.duration_s + 1e-9:
        raise WindowOutOfRange(
            f"window [{t0}, {t0 + t_ctx}) outside recording of {recording.duration_s}s"
        )
    if neuron_ids is None:
        neuron_ids = [n.neuron_id for n in recording.neurons_in_group(group_id)]
    p = int(round(t_ctx / t_patch))
    if abs(t_ctx / t_patch - p) > 1e-9 or p < 1:
        raise NonDivisibleWindow(f"t_patch {t_patch} does not divide t_ctx {t_ctx}")

    rows = []
    if recording.modality == "spikes":
        if bin_size is None:
            raise NonDivisibleWindow("spike recordings require a bin size")
        f = int(round(t_patch / bin_size))
        if abs(t_patch / bin_size - f) > 1e-9 or f < 1:
            raise NonDivisibleWindow(f"bin {bin_size} does not divide t_patch {t_patch}")
        for nid in neuron_ids:
            counts = bin_spikes(recording.spike_times[nid], t0, t_ctx, bin_size)
            rows.append(patch_bins(counts, f))
    else:
        sr = float(recording.sample_rate_hz)
        f = int(round(t_patch * sr))
        for nid in neuron_ids:
            rows.append(patch_trace(recording.traces[nid], t0, t_ctx, f, sr))

    patches = np.stack(rows, axis=0) if rows else np.zeros((0, p, 1))
    centers = t0 + (np.arange(p) + 0.5) * t_patch
    return PatchedView(
        window_start_s=t0,
        neuron_ids=list(neuron_ids),
        patches=patches,
        patch_timestamps_s=centers,
    )


# -- on-disk dataset format ------------------------------------------------


def save_dataset(recordings: list[Recording], path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    sessions = []
    for rec in recordings:
        entry = {
            "session_id": rec.session_id,
            "subject_id": rec.subject_id,
            "modality": rec.modality,
            "duration_s": rec.duration_s,
            "neurons": [
                {
                    "neuron_id": n.neuron_id,
                    "group_id": n.group_id,
                    **({"cell_type": n.cell_type} if n.cell_type else {}),
                    **({"region": n.region} if n.region else {}),
                }
                for n in rec.neurons
            ],
        }
        if rec.sample_rate_hz is not None:
            entry["sample_rate_hz"] = rec.sample_rate_hz
        sessions.append(entry)

        if rec.modality == "spikes":
            sub = path / "spikes"
            sub.mkdir(exist_ok=True)
            with open(sub / f"{rec.session_id}.csv", "w", newline="\n") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["neuron_id", "time_s"])
                for n in rec.neurons:
                    for t in rec.spike_times[n.neuron_id]:
                        writer.writerow([n.neuron_id, repr(float(t))])
        else:
            sub = path / "traces"
            sub.mkdir(exist_ok=True)
            with open(sub / f"{rec.session_id}.csv", "w", newline="\n") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["neuron_id", "sample_index", "value"])
                for n in rec.neurons:
                    for i, v in enumerate(rec.traces[n.neuron_id]):
                        writer.writerow([n.neuron_id, i, repr(float(v))])

    manifest = {"format_version": FORMAT_VERSION, "sessions": sessions}
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def load_dataset(path: str | Path) -> list[Recording]:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise SchemaError(f"no manifest.json in {path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"manifest.json is not valid JSON: {exc}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise SchemaError(
            f"manifest.json: unsupported format_version {manifest.get('format_version')}"
        )
    if "sessions" not in manifest:
        raise SchemaError("manifest.json: missing field 'sessions'")

    recordings = []
    for sess in manifest["sessions"]:
        for key in ("session_id", "subject_id", "modality", "duration_s", "neurons"):
            if key not in sess:
                raise SchemaError(f"manifest.json: session missing field '{key}'")
        neurons = []
        for nd in sess["neurons"]:
            if "neuron_id" not in nd or "group_id" not in nd:
                raise SchemaError(
                    f"manifest.json: neuron entry missing id fields in "
                    f"session {sess['session_id']}"
                )
            neurons.append(
                NeuronRecord(
                    neuron_id=nd["neuron_id"],
                    group_id=nd["group_id"],
                    cell_type=nd.get("cell_type"),
                    region=nd.get("region"),
                )
            )

        sid = sess["session_id"]
        if sess["modality"] == "spikes":
            csv_path = path / "spikes" / f"{sid}.csv"
            if not csv_path.exists():
                raise MissingActivity(f"no spikes file for session {sid}")
            spike_times: dict[str, list[float]] = {}
            with open(csv_path, newline="") as fh:
                reader = csv.DictReader(fh)
                if reader.fieldnames != ["neuron_id", "time_s"]:
                    raise SchemaError(f"{csv_path.name}: bad header {reader.fieldnames}")
                for row in reader:
                    spike_times.setdefault(row["neuron_id"], []).append(
                        float(row["time_s"])
                    )
            rec = Recording(
                session_id=sid,
                subject_id=sess["subject_id"],
                modality="spikes",
                duration_s=float(sess["duration_s"]),
                neurons=neurons,
                spike_times={k: np.array(v) for k, v in spike_times.items()},
            )
        else:
            csv_path = path / "traces" / f"{sid}.csv"
            if not csv_path.exists():
                raise MissingActivity(f"no traces file for session {sid}")
            values: dict[str, dict[int, float]] = {}
            with open(csv_path, newline="") as fh:
                reader = csv.DictReader(fh)
                if reader.fieldnames != ["neuron_id", "sample_index", "value"]:
                    raise SchemaError(f"{csv_path.name}: bad header {reader.fieldnames}")
                for row in reader:
                    values.setdefault(row["neuron_id"], {})[
                        int(row["sample_index"])
                    ] = float(row["value"])
            sr = float(sess.get("sample_rate_hz", 0.0)) or None
            n_samples = int(round(float(sess["duration_s"]) * (sr or 0.0)))
            traces = {}
            for nid, sample_map in values.items():
                trace = np.zeros(n_samples, dtype=np.float64)
                for i, v in sample_map.items():
                    trace[i] = v
                traces[nid] = trace
            rec = Recording(
                session_id=sid,
                subject_id=sess["subject_id"],
                modality="calcium",
                duration_s=float(sess["duration_s"]),
                neurons=neurons,
                traces=traces,
                sample_rate_hz=sr,
            )
        recordings.append(rec)
    return recordings
