"""Frozen-encoder evaluation: embeddings, linear probes, and drivers.

Embeddings always come from the encoder output (or a declared intermediate
layer tap), never from the projection head. Probes are multinomial
logistic regressions trained full-batch to convergence, scored by macro-F1
on held-out neurons under one of three generalization settings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint
from .data import Recording, make_patched_view
from .errors import (
    ConfigError,
    NonDivisibleBin,
    RecordingTooShort,
    SingleClass,
    SplitLeakage,
)
from .model import encode, encode_with_tap
from .rng import RngStream
from .sampling import SamplerConfig


@dataclass
class NeuronEmbedding:
    neuron_id: str
    session_id: str
    subject_id: str
    group_id: str
    vector: np.ndarray
    layer_tap: int


@dataclass
class SplitSpec:
    """Which sessions/neurons pretrain, train the probe, and are tested."""

    setting: str  # transductive | transductive_zero_shot | inductive_zero_shot
    pretrain_sessions: list[str]
    train_sessions: list[str]
    test_sessions: list[str]
    train_neurons: list[str] | None = None  # transductive neuron-wise split
    test_neurons: list[str] | None = None
    label_ratio: float = 1.0

    def validate(
        self, recordings: list[Recording], pretrain_manifest: list[str]
    ) -> None:
        if self.setting not in (
            "transductive",
            "transductive_zero_shot",
            "inductive_zero_shot",
        ):
            raise ConfigError(f"unknown setting {self.setting}")
        if not 0.0 < self.label_ratio <= 1.0:
            raise ConfigError("label_ratio must be in (0, 1]")
        subject_of = {r.session_id: r.subject_id for r in recordings}
        pre = set(self.pretrain_sessions)
        test = set(self.test_sessions)
        train = set(self.train_sessions)
        ckpt_sessions = set(pretrain_manifest)
        if self.setting == "inductive_zero_shot":
            leaked = test & (pre | ckpt_sessions)
            if leaked:
                raise SplitLeakage(
                    f"test sessions seen during pretraining: {sorted(leaked)}"
                )
        elif self.setting == "transductive_zero_shot":
            if not test <= pre:
                raise ConfigError("transductive_zero_shot test sessions must be pretrained")
            shared = {subject_of.get(s) for s in train} & {
                subject_of.get(s) for s in test
            }
            if shared:
                raise SplitLeakage(
                    f"subjects on both sides of a zero-shot split: {sorted(shared)}"
                )
        else:  # transductive
            if self.train_neurons is None or self.test_neurons is None:
                raise ConfigError("transductive split requires explicit neuron lists")
            overlap = set(self.train_neurons) & set(self.test_neurons)
            if overlap:
                raise SplitLeakage(f"neurons on both sides: {sorted(overlap)[:5]}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(**d)


@dataclass
class ProbeReport:
    setting: str
    task: str
    macro_f1: float
    per_class_f1: dict[str, float]
    confusion: list[list[int]]
    classes: list[str]
    label_ratio: float
    layer_tap: int
    checkpoint_id: str
    seed: int
    config_echo: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


# -- embedding extraction --------------------------------------------------


def _sampler_from_checkpoint(checkpoint: Checkpoint) -> SamplerConfig:
    extra = checkpoint.extra or {}
    if "sampler" not in extra:
        raise ConfigError("checkpoint carries no preprocessing settings")
    return SamplerConfig(**extra["sampler"])


def extract_embeddings(
    checkpoint: Checkpoint,
    recording: Recording,
    layer_tap: int | None = None,
) -> list[NeuronEmbedding]:
    """Average eval-mode encoder outputs over non-overlapping windows."""
    sampler = _sampler_from_checkpoint(checkpoint)
    t_ctx = sampler.t_ctx_s
    if recording.duration_s < t_ctx:
        raise RecordingTooShort(
            f"{recording.session_id}: {recording.duration_s}s < window {t_ctx}s"
        )
    expected_modality = "spikes" if sampler.bin_size_s is not None else "calcium"
    if recording.modality != expected_modality:
        raise ConfigError(
            f"checkpoint preprocessed {expected_modality}, got {recording.modality}"
        )
    starts = []
    t = 0.0
    while t + t_ctx <= recording.duration_s + 1e-9:
        starts.append(t)
        t += t_ctx
    max_tap = len(checkpoint.config.layer_kinds)
    tap = max_tap if layer_tap is None else layer_tap

    out: list[NeuronEmbedding] = []
    for group_id in recording.group_ids:
        group_neurons = recording.neurons_in_group(group_id)
        acc = None
        for t0 in starts:
            view = make_patched_view(
                recording, group_id, t0, t_ctx, sampler.t_patch_s, sampler.bin_size_s
            )
            if tap == max_tap:
                y = encode(view, checkpoint.params, checkpoint.config).data
            else:
                y = encode_with_tap(view, checkpoint.params, checkpoint.config, tap).data
            acc = y if acc is None else acc + y
        vectors = acc / len(starts)
        for n, rec in zip(group_neurons, vectors):
            out.append(
                NeuronEmbedding(
                    neuron_id=n.neuron_id,
                    session_id=recording.session_id,
                    subject_id=recording.subject_id,
                    group_id=group_id,
                    vector=rec.astype(np.float64),
                    layer_tap=tap,
                )
            )
    return out


# -- linear probe ----------------------------------------------------------


def subsample_labels(
    labels: list[str], ratio: float, rng: RngStream, stratified: bool = True
) -> np.ndarray:
    """Indices of the kept probe-training neurons at the given label ratio."""
    n = len(labels)
    if ratio >= 1.0:
        return np.arange(n)
    if not stratified:
        k = max(1, int(round(ratio * n)))
        return np.sort(rng.choice(n, size=k, replace=False))
    keep = []
    arr = np.asarray(labels)
    for cls in sorted(set(labels)):
        idx = np.flatnonzero(arr == cls)
        k = max(1, int(round(ratio * idx.size)))
        sel = rng.choice(idx.size, size=k, replace=False)
        keep.extend(idx[sel].tolist())
    return np.sort(np.asarray(keep))


def train_probe(
    embeddings: np.ndarray,
    labels: list[str],
    label_ratio: float = 1.0,
    rng: RngStream | None = None,
    l2: float = 1e-3,
    max_iter: int = 5000,
    grad_tol: float = 1e-6,
    stratified: bool = True,
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Multinomial logistic regression by full-batch gradient descent.

    Returns (weights C x D, bias C, class list). Deterministic given the
    subsampling stream.
    """
    rng = rng or RngStream(0)
    keep = subsample_labels(labels, label_ratio, rng.derive("subsample"), stratified)
    x = np.asarray(embeddings, dtype=np.float64)[keep]
    y_labels = [labels[i] for i in keep]
    classes = sorted(set(y_labels))
    if len(classes) < 2:
        raise SingleClass("probe training needs at least two classes")
    class_index = {c: i for i, c in enumerate(classes)}
    y = np.array([class_index[lbl] for lbl in y_labels])
    n, d = x.shape
    c = len(classes)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0

    w = np.zeros((c, d))
    b = np.zeros(c)
    # 1/L step size: logistic Hessian is bounded by 0.5 * X^T X / n + l2
    xt = np.hstack([x, np.ones((n, 1))])
    lip = 0.5 * np.linalg.norm(xt, 2) ** 2 / n + l2
    lr = 1.0 / lip
    for _ in range(max_iter):
        z = x @ w.T + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        err = (p - onehot) / n
        gw = err.T @ x + l2 * w
        gb = err.sum(axis=0)
        gnorm = np.sqrt((gw**2).sum() + (gb**2).sum())
        if gnorm < grad_tol:
            break
        w -= lr * gw
        b -= lr * gb
    return w, b, classes


def predict_probe(
    w: np.ndarray, b: np.ndarray, classes: list[str], embeddings: np.ndarray
) -> list[str]:
    scores = np.asarray(embeddings) @ w.T + b
    return [classes[i] for i in scores.argmax(axis=1)]


def confusion_matrix(
    predictions: list[str], labels: list[str], classes: list[str]
) -> np.ndarray:
    index = {c: i for i, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for pred, true in zip(predictions, labels):
        cm[index[true], index[pred]] += 1
    return cm


def macro_f1(
    predictions: list[str], labels: list[str], classes: list[str]
) -> tuple[float, dict[str, float]]:
    """Unweighted mean of per-class F1; a class with no support and no
    predictions contributes 0."""
    missing = set(labels) - set(classes)
    if missing:
        raise ConfigError(f"labels outside the class set: {sorted(missing)}")
    cm = confusion_matrix(predictions, labels, classes)
    per_class = {}
    for i, cls in enumerate(classes):
        tp = cm[i, i]
        fp = cm[:, i].sum() - tp
        fn = cm[i, :].sum() - tp
        denom = 2 * tp + fp + fn
        per_class[cls] = (2 * tp / denom) if denom > 0 else 0.0
    return float(np.mean(list(per_class.values()))), per_class


# -- setting drivers -------------------------------------------------------


def _label_of(task: str):
    if task == "cell_type":
        return lambda n: n.cell_type
    if task == "region":
        return lambda n: n.region
    raise ConfigError(f"unknown task {task}")


def score_embeddings(
    recordings: list[Recording],
    split: SplitSpec,
    embeddings: dict[str, NeuronEmbedding],
    pretrain_manifest: list[str],
    task: str,
    seed: int = 0,
    l2: float = 1e-3,
    stratified: bool = True,
    layer_tap: int = -1,
    checkpoint_id: str = "",
    config_echo: dict | None = None,
) -> ProbeReport:
    """Train a probe on the split's train side and score its test side."""
    split.validate(recordings, pretrain_manifest)
    label_fn = _label_of(task)
    by_session = {r.session_id: r for r in recordings}
    meta = {}
    for sid in set(split.train_sessions) | set(split.test_sessions):
        if sid not in by_session:
            raise ConfigError(f"split references unknown session {sid}")
        for n in by_session[sid].neurons:
            meta[n.neuron_id] = n

    def collect(sessions, neuron_filter):
        ids = []
        for sid in sessions:
            for n in by_session[sid].neurons:
                if label_fn(n) is None:
                    continue
                if neuron_filter is not None and n.neuron_id not in neuron_filter:
                    continue
                if n.neuron_id not in embeddings:
                    raise ConfigError(f"no embedding for neuron {n.neuron_id}")
                ids.append(n.neuron_id)
        vecs = np.stack([embeddings[i].vector for i in ids])
        labels = [label_fn(meta[i]) for i in ids]
        return vecs, labels

    train_filter = set(split.train_neurons) if split.train_neurons else None
    test_filter = set(split.test_neurons) if split.test_neurons else None
    x_train, y_train = collect(split.train_sessions, train_filter)
    x_test, y_test = collect(split.test_sessions, test_filter)

    rng = RngStream(seed, stream_id=77)
    w, b, classes = train_probe(
        x_train, y_train, split.label_ratio, rng, l2=l2, stratified=stratified
    )
    full_classes = sorted(set(classes) | set(y_test))
    preds = predict_probe(w, b, classes, x_test)
    score, per_class = macro_f1(preds, y_test, full_classes)
    cm = confusion_matrix(preds, y_test, full_classes)
    return ProbeReport(
        setting=split.setting,
        task=task,
        macro_f1=score,
        per_class_f1=per_class,
        confusion=cm.tolist(),
        classes=full_classes,
        label_ratio=split.label_ratio,
        layer_tap=layer_tap,
        checkpoint_id=checkpoint_id,
        seed=seed,
        config_echo=config_echo or {},
    )


def run_setting(
    recordings: list[Recording],
    split: SplitSpec,
    checkpoint: Checkpoint,
    task: str,
    seed: int = 0,
    layer_tap: int | None = None,
    l2: float = 1e-3,
    stratified: bool = True,
    config_echo: dict | None = None,
) -> ProbeReport:
    """Extract embeddings from a checkpoint, then train and score the probe."""
    split.validate(recordings, checkpoint.pretrain_sessions)
    by_session = {r.session_id: r for r in recordings}
    embeddings: dict[str, NeuronEmbedding] = {}
    for sid in sorted(set(split.train_sessions) | set(split.test_sessions)):
        if sid not in by_session:
            raise ConfigError(f"split references unknown session {sid}")
        for emb in extract_embeddings(checkpoint, by_session[sid], layer_tap):
            embeddings[emb.neuron_id] = emb
    tap = layer_tap if layer_tap is not None else len(checkpoint.config.layer_kinds)
    return score_embeddings(
        recordings, split, embeddings, checkpoint.pretrain_sessions, task,
        seed=seed, l2=l2, stratified=stratified, layer_tap=tap,
        checkpoint_id=checkpoint.checkpoint_id, config_echo=config_echo,
    )


# -- sweep and ablation drivers -------------------------------------------


def sweep_bin_size(
    recordings: list[Recording],
    bin_sizes_s: list[float],
    split: SplitSpec,
    encoder_config,
    sampler_config: SamplerConfig,
    train_config,
    task: str,
    cache_dir: str | Path,
) -> dict[float, ProbeReport]:
    """Pretrain (or reuse a cached checkpoint) per bin size and probe each."""
    from dataclasses import replace

    from .model import EncoderConfig
    from .training import train

    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    pretrain = [r for r in recordings if r.session_id in split.pretrain_sessions]
    reports = {}
    for bin_size in bin_sizes_s:
        f = sampler_config.t_patch_s / bin_size
        if abs(f - round(f)) > 1e-9 or round(f) < 1:
            raise NonDivisibleBin(f"bin {bin_size} does not divide patch length")
        sampler_b = replace(sampler_config, bin_size_s=bin_size)
        enc_b = EncoderConfig(**{**encoder_config.to_dict(), "f": int(round(f))})
        tag = f"bin_{bin_size:.6f}_seed{train_config.seed}"
        ckpt_path = cache_dir / tag / "ckpt_final.bin"
        if ckpt_path.exists():
            ckpt = load_checkpoint(ckpt_path)
        else:
            ckpt = train(pretrain, enc_b, sampler_b, train_config, cache_dir / tag)
        reports[bin_size] = run_setting(
            recordings, split, ckpt, task, seed=train_config.seed,
            config_echo={"bin_size_s": bin_size},
        )
    return reports


def run_ablation(
    recordings: list[Recording],
    split: SplitSpec,
    encoder_config,
    sampler_config: SamplerConfig,
    train_config,
    task: str,
    out_dir: str | Path,
    variants: tuple[str, ...] = ("full", "no_spatial", "no_neuron_dropout"),
) -> dict[str, ProbeReport]:
    """Train matched model variants on shared data/seed and probe each."""
    from dataclasses import replace

    from .model import EncoderConfig
    from .training import train

    out_dir = Path(out_dir)
    pretrain = [r for r in recordings if r.session_id in split.pretrain_sessions]
    reports = {}
    reference_count = None
    for variant in variants:
        enc_v = encoder_config
        sampler_v = sampler_config
        if variant == "no_spatial":
            enc_v = EncoderConfig(**{**encoder_config.to_dict(), "variant": "no_spatial"})
        elif variant == "no_neuron_dropout":
            sampler_v = replace(sampler_config, max_neuron_dropout=0.0)
        elif variant != "full":
            raise ConfigError(f"unknown ablation variant {variant}")
        ckpt = train(pretrain, enc_v, sampler_v, train_config, out_dir / variant)
        if reference_count is None:
            reference_count = ckpt.params.n_entries()
        elif ckpt.params.n_entries() != reference_count:
            raise ConfigError(
                f"variant {variant} parameter count {ckpt.params.n_entries()} "
                f"!= full model {reference_count}"
            )
        reports[variant] = run_setting(
            recordings, split, ckpt, task, seed=train_config.seed,
            config_echo={"variant": variant},
        )
    return reports
