"""
Training loop: Adam with inverse square root warmup, gradient clipping and a per-step loss curve.
"""
import math
from pathlib import Path
from typing import List, Tuple, Union
import attr
import numpy as np
import pandas as pd
from config import Config
from m2former.checkpoint import save_checkpoint
from m2former.config import ExperimentConfig, save_config
from m2former.constants import CHECKPOINT_FILENAME, CONFIG_FILENAME, LOSS_CSV
from m2former.dataset import load_split, read_manifest
from m2former.decoder import TokenSequence
from m2former.exc import ConfigError, NonFiniteError
from m2former.model import M2Former
from m2former.optim import Adam, clip_grad_norm, inverse_sqrt_lr
from m2former.signal import FeatureStack, MultiChannelRecording
from m2former.tensor import Tensor, backward
from m2former.utils import logger, make_rng

LOSS_COLUMNS = ['step', 'loss', 'ctc', 'att']


@attr.s(auto_attribs=True, frozen=True, eq=False)
class TrainResult:
    checkpoint: Path
    losses: pd.DataFrame
    model: M2Former


def check_dataset(cfg: ExperimentConfig, split_dir: Union[str, Path]):
    """
    :raises ConfigError: if the dataset was generated with a different alphabet or microphone count
    """
    manifest = read_manifest(split_dir)
    n_tokens = manifest['alphabet'].get('n_tokens', 8)
    if n_tokens != cfg.data.n_tokens:
        raise ConfigError(f'Dataset has {n_tokens} tokens, config expects {cfg.data.n_tokens}')
    for entry in manifest['utterances']:
        if len(entry['channel_files']) != cfg.data.n_mics:
            raise ConfigError(
                f'Utterance {entry["utt_id"]} has {len(entry["channel_files"])} microphones, '
                f'config expects {cfg.data.n_mics}'
            )


def prepare(model: M2Former, recordings: List[MultiChannelRecording]) -> List[Tuple[FeatureStack, List[TokenSequence]]]:
    return [
        (model.features(rec), [TokenSequence(tokens) for tokens in rec.transcripts])
        for rec in recordings
    ]


def train_step(
    model: M2Former,
    optimizer: Adam,
    batch: List[Tuple[FeatureStack, List[TokenSequence]]],
    cfg: ExperimentConfig,
    step: int,
) -> dict:
    """
    One optimizer update on the mean PIT loss of a batch.

    :raises NonFiniteError: if the loss or an intermediate value is not finite
    """
    try:
        total, ctc, att = Tensor(0.0), 0.0, 0.0
        for features, refs in batch:
            result = model.loss(features, refs, cfg.loss)
            total = total + result.total_loss
            ctc += result.ctc_loss
            att += result.att_loss
        loss = total / len(batch)
    except NonFiniteError as e:
        raise NonFiniteError(f'Step {step}: {e}', step=step) from e
    if not math.isfinite(loss.item()):
        raise NonFiniteError(f'Step {step}: loss is {loss.item()}', step=step)
    optimizer.zero_grad()
    backward(loss)
    grad_norm = clip_grad_norm(optimizer.params, cfg.optim.clip_norm)
    lr = inverse_sqrt_lr(step, cfg.optim.peak_lr, cfg.optim.warmup)
    optimizer.step(lr)
    return {
        'step': step,
        'loss': loss.item(),
        'ctc': ctc / len(batch),
        'att': att / len(batch),
        'lr': lr,
        'grad_norm': grad_norm,
    }


def train(
    cfg: ExperimentConfig, dataset_dir: Union[str, Path], out_dir: Union[str, Path]
) -> TrainResult:
    """
    Train on dataset_dir/train and write the checkpoint, config and loss curve to out_dir.

    :raises FileNotFoundError: if the dataset manifest does not exist
    :raises NonFiniteError: on a non-finite loss (carries the step)
    """
    split_dir = Path(dataset_dir) / 'train'
    check_dataset(cfg, split_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = M2Former.from_config(cfg)
    model.train()
    data = prepare(model, load_split(split_dir))
    optimizer = Adam(model.parameters())
    rng = make_rng(cfg.optim.seed + 1)
    batch_size = min(cfg.optim.batch_size, len(data))
    logger.info(
        f'Training {sum(p.size for p in model.parameters())} parameters on {len(data)} utterances '
        f'for {cfg.optim.steps} steps'
    )
    rows = []
    for step in range(1, cfg.optim.steps + 1):
        logger.register_stage(f'train step {step}')
        batch = [data[i] for i in rng.choice(len(data), size=batch_size, replace=False)]
        row = train_step(model, optimizer, batch, cfg, step)
        rows.append(row)
        message = (
            f'loss={row["loss"]:.4f} ctc={row["ctc"]:.4f} att={row["att"]:.4f} '
            f'lr={row["lr"]:.2e} grad_norm={row["grad_norm"]:.3f}'
        )
        if step % Config.LOG_EVERY == 0 or step == cfg.optim.steps:
            logger.info(message)
        else:
            logger.debug(message)
    logger.register_stage()
    model.eval()
    losses = pd.DataFrame(rows, columns=LOSS_COLUMNS + ['lr', 'grad_norm'])[LOSS_COLUMNS]
    losses.to_csv(out_dir / LOSS_CSV, index=False)
    save_config(cfg, out_dir / CONFIG_FILENAME)
    checkpoint = save_checkpoint(
        model, cfg, out_dir / CHECKPOINT_FILENAME, step=cfg.optim.steps, rng_state=rng.bit_generator.state
    )
    return TrainResult(checkpoint, losses, model)
