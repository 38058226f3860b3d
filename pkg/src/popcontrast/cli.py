"""Command-line surface: synth, pretrain, embed, probe, ablate, sweep-binsize.

Every command reads an optional JSON config file with nested sections
(data, sampler, encoder, loss, trainer, eval, synth); flags override file
keys, which override defaults. Unknown keys are rejected. Each run writes
a `run.json` echo of the effective configuration, and errors print a
machine-parsable `error_code:` line on stderr (exit 1 for validation
errors, 2 for runtime errors).
"""

from __future__ import annotations

import dataclasses
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .data import load_dataset, save_dataset
from .errors import (
    ConfigError,
    NonDivisibleBin,
    NonDivisibleWindow,
    PopcontrastError,
    SchemaError,
    SplitLeakage,
)
from .evaluation import (
    NeuronEmbedding,
    SplitSpec,
    extract_embeddings,
    run_ablation,
    score_embeddings,
    sweep_bin_size,
)
from .model import EncoderConfig
from .sampling import SamplerConfig
from .synth import SynthConfig
from .training import TrainConfig, train

_VALIDATION_ERRORS = (
    ConfigError,
    SchemaError,
    SplitLeakage,
    NonDivisibleBin,
    NonDivisibleWindow,
)

_SECTION_TYPES = {
    "sampler": SamplerConfig,
    "encoder": EncoderConfig,
    "trainer": TrainConfig,
    "synth": SynthConfig,
}
_PLAIN_SECTIONS = {
    "data": {"path"},
    "loss": {"temperature"},
    "eval": {"task", "label_ratio", "layer_tap", "l2", "stratified", "seed"},
}


def _build_section(name: str, overrides: dict):
    cls = _SECTION_TYPES[name]
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(overrides) - fields
    if unknown:
        raise ConfigError(f"unknown keys in section '{name}': {sorted(unknown)}")
    kwargs = dict(overrides)
    for key in ("amplitude_range", "baseline_range"):
        if key in kwargs and isinstance(kwargs[key], list):
            kwargs[key] = tuple(kwargs[key])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section '{name}': {exc}") from None


class RunConfig:
    """Effective configuration assembled from defaults, file, and flags."""

    def __init__(self, file_config: dict, flag_overrides: dict | None = None):
        known = set(_SECTION_TYPES) | set(_PLAIN_SECTIONS)
        unknown = set(file_config) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        merged: dict[str, dict] = {k: dict(file_config.get(k, {})) for k in known}
        for section, extra in (flag_overrides or {}).items():
            merged[section].update({k: v for k, v in extra.items() if v is not None})
        for section, allowed in _PLAIN_SECTIONS.items():
            bad = set(merged[section]) - allowed
            if bad:
                raise ConfigError(f"unknown keys in section '{section}': {sorted(bad)}")
        if "temperature" in merged["loss"]:
            merged["trainer"]["temperature"] = merged["loss"]["temperature"]
        # NUCLR_SEED is the seed fallback when neither file nor flags set one
        env_seed = os.environ.get("NUCLR_SEED")
        if env_seed is not None:
            for section in ("trainer", "sampler", "synth"):
                merged[section].setdefault("seed", int(env_seed))
        self.sections = merged
        self.sampler = _build_section("sampler", merged["sampler"])
        self.encoder = _build_section("encoder", merged["encoder"])
        self.trainer = _build_section("trainer", merged["trainer"])
        self.synth = _build_section("synth", merged["synth"])
        self.eval = dict(merged["eval"])
        self.data = dict(merged["data"])

    def echo(self) -> dict:
        return {
            "tool_version": __version__,
            "sampler": dataclasses.asdict(self.sampler),
            "encoder": self.encoder.to_dict(),
            "trainer": dataclasses.asdict(self.trainer),
            "synth": dataclasses.asdict(self.synth),
            "eval": self.eval,
            "data": self.data,
        }


def _load_config(path: str | None, flag_overrides: dict | None = None) -> RunConfig:
    file_config = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_config = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    return RunConfig(file_config, flag_overrides)


def _write_run_echo(out_dir: Path, config: RunConfig, command: str, extras: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, **extras, "config": config.echo()}
    (out_dir / "run.json").write_text(json.dumps(payload, indent=2) + "\n")


def _fail(exc: Exception) -> int:
    code = getattr(exc, "code", "InternalError")
    click.echo(f"error_code: {code}", err=True)
    click.echo(str(exc), err=True)
    return 1 if isinstance(exc, _VALIDATION_ERRORS) else 2


def _guard(fn):
    """Run a command body, mapping package errors to exit codes."""
    try:
        fn()
        return 0
    except PopcontrastError as exc:
        return _fail(exc)
    except (OSError, ValueError) as exc:
        return _fail(exc)


class _Group(click.Group):
    """Command group that treats underscores and dashes interchangeably."""

    def get_command(self, ctx, cmd_name):
        return super().get_command(ctx, cmd_name.replace("_", "-"))


@click.group(cls=_Group)
@click.version_option(__version__)
def main():
    """Neuron-identity representation learning toolkit."""


@main.command()
@click.option("--config", "config_path", type=str, default=None)
@click.option("--out", "out_dir", type=str, required=True)
@click.option("--seed", type=int, default=None)
def synth(config_path, out_dir, seed):
    """Generate a labeled synthetic dataset directory."""

    def body():
        config = _load_config(config_path, {"synth": {"seed": seed}})
        from .synth import generate_dataset

        recordings = generate_dataset(config.synth)
        save_dataset(recordings, out_dir)
        _write_run_echo(Path(out_dir), config, "synth",
                        {"n_sessions": len(recordings)})
        click.echo(f"wrote {len(recordings)} sessions to {out_dir}")

    sys.exit(_guard(body))


@main.command()
@click.option("--config", "config_path", type=str, default=None)
@click.option("--data", "data_dir", type=str, required=True)
@click.option("--out", "out_dir", type=str, required=True)
@click.option("--steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--threads", type=int, default=1,
              help="1 guarantees bitwise-reproducible runs.")
def pretrain(config_path, data_dir, out_dir, steps, seed, threads):
    """Pretrain the encoder on a dataset directory."""

    def body():
        config = _load_config(
            config_path,
            {"trainer": {"total_steps": steps, "seed": seed},
             "sampler": {"seed": seed}},
        )
        if threads != 1:
            os.environ.setdefault("OMP_NUM_THREADS", str(threads))
        recordings = load_dataset(data_dir)
        _write_run_echo(Path(out_dir), config, "pretrain", {"data": data_dir})
        ckpt = train(recordings, config.encoder, config.sampler, config.trainer,
                     out_dir)
        click.echo(f"final checkpoint at step {ckpt.step}: {out_dir}/ckpt_final.bin")

    sys.exit(_guard(body))


@main.command()
@click.option("--checkpoint", "ckpt_path", type=str, required=True)
@click.option("--data", "data_dir", type=str, required=True)
@click.option("--out", "out_file", type=str, required=True)
@click.option("--layer-tap", type=int, default=None)
def embed(ckpt_path, data_dir, out_file, layer_tap):
    """Extract one frozen embedding per neuron into a JSON file."""

    def body():
        ckpt = load_checkpoint(ckpt_path)
        recordings = load_dataset(data_dir)
        rows = []
        for rec in recordings:
            for emb in extract_embeddings(ckpt, rec, layer_tap):
                rows.append(
                    {
                        "neuron_id": emb.neuron_id,
                        "session_id": emb.session_id,
                        "subject_id": emb.subject_id,
                        "group_id": emb.group_id,
                        "layer_tap": emb.layer_tap,
                        "vector": [float(v) for v in emb.vector],
                    }
                )
        payload = {
            "tool_version": __version__,
            "checkpoint_id": ckpt.checkpoint_id,
            "pretrain_sessions": ckpt.pretrain_sessions,
            "encoder": ckpt.config.to_dict(),
            "embeddings": rows,
        }
        Path(out_file).parent.mkdir(parents=True, exist_ok=True)
        Path(out_file).write_text(json.dumps(payload) + "\n")
        click.echo(f"wrote {len(rows)} embeddings to {out_file}")

    sys.exit(_guard(body))


@main.command()
@click.option("--embeddings", "emb_file", type=str, required=True)
@click.option("--data", "data_dir", type=str, required=True)
@click.option("--split", "split_file", type=str, required=True)
@click.option("--task", type=click.Choice(["cell_type", "region"]), required=True)
@click.option("--label-ratio", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_file", type=str, required=True)
def probe(emb_file, data_dir, split_file, task, label_ratio, seed, out_file):
    """Train and score a linear probe on frozen embeddings."""

    def body():
        payload = json.loads(Path(emb_file).read_text())
        recordings = load_dataset(data_dir)
        split = SplitSpec.from_dict(json.loads(Path(split_file).read_text()))
        if label_ratio is not None:
            split.label_ratio = label_ratio
        probe_seed = seed if seed is not None else int(os.environ.get("NUCLR_SEED", 0))
        embeddings = {
            row["neuron_id"]: NeuronEmbedding(
                neuron_id=row["neuron_id"],
                session_id=row["session_id"],
                subject_id=row["subject_id"],
                group_id=row["group_id"],
                vector=np.asarray(row["vector"], dtype=np.float64),
                layer_tap=row["layer_tap"],
            )
            for row in payload["embeddings"]
        }
        tap = payload["embeddings"][0]["layer_tap"] if payload["embeddings"] else -1
        report = score_embeddings(
            recordings, split, embeddings, payload["pretrain_sessions"], task,
            seed=probe_seed, layer_tap=tap,
            checkpoint_id=payload.get("checkpoint_id", ""),
            config_echo={"tool_version": __version__, "embeddings_file": emb_file},
        )
        Path(out_file).parent.mkdir(parents=True, exist_ok=True)
        Path(out_file).write_text(report.to_json() + "\n")
        click.echo(f"{task} macro_f1={report.macro_f1:.4f} -> {out_file}")

    sys.exit(_guard(body))


@main.command()
@click.option("--config", "config_path", type=str, default=None)
@click.option("--data", "data_dir", type=str, required=True)
@click.option("--split", "split_file", type=str, required=True)
@click.option("--task", type=click.Choice(["cell_type", "region"]), required=True)
@click.option("--variant", "variants", multiple=True,
              default=("full", "no_spatial"),
              type=click.Choice(["full", "no_spatial", "no_neuron_dropout"]))
@click.option("--out", "out_dir", type=str, required=True)
def ablate(config_path, data_dir, split_file, task, variants, out_dir):
    """Pretrain matched model variants and probe each."""

    def body():
        config = _load_config(config_path)
        recordings = load_dataset(data_dir)
        split = SplitSpec.from_dict(json.loads(Path(split_file).read_text()))
        _write_run_echo(Path(out_dir), config, "ablate",
                        {"task": task, "variants": list(variants)})
        reports = run_ablation(
            recordings, split, config.encoder, config.sampler, config.trainer,
            task, out_dir, variants=tuple(variants),
        )
        for variant, report in reports.items():
            path = Path(out_dir) / f"report_{variant}.json"
            path.write_text(report.to_json() + "\n")
            click.echo(f"{variant}: macro_f1={report.macro_f1:.4f}")

    sys.exit(_guard(body))


@main.command("sweep-binsize")
@click.option("--config", "config_path", type=str, default=None)
@click.option("--data", "data_dir", type=str, required=True)
@click.option("--split", "split_file", type=str, required=True)
@click.option("--task", type=click.Choice(["cell_type", "region"]), required=True)
@click.option("--bins", type=str, required=True,
              help="Comma-separated bin sizes in seconds, e.g. 0.01,0.02,0.05")
@click.option("--out", "out_dir", type=str, required=True)
def sweep_binsize(config_path, data_dir, split_file, task, bins, out_dir):
    """Pretrain and probe once per bin size (cached by bin size)."""

    def body():
        config = _load_config(config_path)
        recordings = load_dataset(data_dir)
        split = SplitSpec.from_dict(json.loads(Path(split_file).read_text()))
        bin_sizes = [float(v) for v in bins.split(",") if v]
        _write_run_echo(Path(out_dir), config, "sweep-binsize",
                        {"task": task, "bins": bin_sizes})
        reports = sweep_bin_size(
            recordings, bin_sizes, split, config.encoder, config.sampler,
            config.trainer, task, out_dir,
        )
        for bin_size, report in reports.items():
            path = Path(out_dir) / f"report_bin_{bin_size:.6f}.json"
            path.write_text(report.to_json() + "\n")
            click.echo(f"bin {bin_size}: macro_f1={report.macro_f1:.4f}")

    sys.exit(_guard(body))


if __name__ == "__main__":
    main()
