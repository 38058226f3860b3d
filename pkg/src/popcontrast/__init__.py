"""Contrastive learning of per-neuron identity representations."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    NeuronRecord,
    PatchedView,
    Recording,
    bin_spikes,
    load_dataset,
    make_patched_view,
    patch_bins,
    patch_trace,
    save_dataset,
)
from .evaluation import (
    NeuronEmbedding,
    ProbeReport,
    SplitSpec,
    extract_embeddings,
    macro_f1,
    run_ablation,
    run_setting,
    sweep_bin_size,
    train_probe,
)
from .loss import LossConfig, batch_loss, cosine_sim, pair_loss
from .model import (
    EncoderConfig,
    encode,
    encode_with_tap,
    init_params,
    project_head,
)
from .numerics import ParamSet, Tensor, backward, grad_check, tensor
from .optim import AdamW, lr_at
from .rng import RngStream
from .sampling import (
    SamplerConfig,
    ViewPair,
    build_view_pair,
    epoch_windows,
    neuron_dropout,
    sample_second_view,
)
from .synth import SynthConfig, generate_dataset, poisson_spikes, synth_calcium
from .training import TrainConfig, train

__version__ = "0.1.0"
