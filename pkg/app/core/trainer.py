"""
Training, evaluation and generation for the two-stage cross-view model
"""
import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.checkpoint import META_PREFIX, load_checkpoint, pack_json, save_checkpoint, split_meta
from app.core.data import Batch, PairedSample, encode_image, make_batch, write_sample_grid
from app.core.errors import CheckpointError, DataError
from app.core.functional import concat_channels
from app.core.losses import ObjectiveTerms, discriminator_loss, generator_adv_loss, total_adv_loss, total_objective
from app.core.metrics import ConvProbe, ProbeClassifier, kl_score, psnr, ssim, topk_accuracy
from app.core.models import LossLogRow, MetricRow, TrainConfig
from app.core.networks import CrossViewModel, StageOneOutputs, StageTwoOutputs
from app.core.optim import Adam
from app.core.tensor import Tape, Variable, no_grad


logger = logging.getLogger(__name__)

LOSS_LOG_COLUMNS = ["iter", "d1", "d2", "g_adv", "l1_stage1", "l1_stage2", "tv", "total"]
PROBE_PREFIX = "probe."
TOP_K = (1, 5)


class ForwardPass(NamedTuple):
    aerial: Variable
    target: Variable
    semantic: Variable
    first: StageOneOutputs
    second: StageTwoOutputs


@dataclass
class TrainResult:
    model: CrossViewModel
    log: List[LossLogRow]
    checkpoint_path: str
    log_path: str
    probe: Optional[ConvProbe] = None
    checkpoints: List[str] = field(default_factory=list)


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".12g")
    return str(value)


class CrossViewTrainer:
    """Alternating discriminator / generator updates over one model"""

    def __init__(self, config: TrainConfig, model: Optional[CrossViewModel] = None):
        self.config = config
        self.model = model or CrossViewModel(config)
        betas = (config.beta1, config.beta2)
        self.g_optimizer = Adam(self.model.generator_parameters(), lr=config.lr, betas=betas, eps=config.eps)
        self.d_optimizer = Adam(self.model.discriminator_parameters(), lr=config.lr, betas=betas, eps=config.eps)
        self.iteration = 0

        counts = self.model.parameter_counts()
        logger.info(
            f"Model {config.method} ({config.direction}, {config.size}x{config.size}): "
            f"{counts['total']} parameters, {counts['offsets']} in offset predictors"
        )

    def forward(self, batch: Batch) -> ForwardPass:
        aerial = Variable(batch.source)
        target = Variable(batch.target)
        semantic = Variable(batch.semantic)
        first = self.model.stage1(aerial, semantic)
        second = self.model.stage2(aerial, first)
        return ForwardPass(aerial, target, semantic, first, second)

    def _semantic_pairs(self, fwd: ForwardPass) -> Tuple[Variable, Variable, Variable, Variable]:
        """(condition, real, stage-1 fake, stage-2 fake) for the semantic-guided discriminator"""
        return (
            concat_channels([fwd.aerial, fwd.semantic]),
            concat_channels([fwd.target, fwd.semantic]),
            concat_channels([fwd.first.image, fwd.first.semantic]),
            concat_channels([fwd.second.image, fwd.second.semantic]),
        )

    def discriminator_step(self, fwd: ForwardPass) -> Tuple[float, Optional[float]]:
        """One update of D1 (and D2) on detached fakes; returns the two d-losses"""
        m, w = self.model, self.config.loss_weights
        d1_terms = (
            discriminator_loss(m.d1, fwd.aerial, fwd.target, fwd.first.image),
            discriminator_loss(m.d1, fwd.aerial, fwd.target, fwd.second.image),
        )
        d2_terms: Tuple[Optional[Variable], Optional[Variable]] = (None, None)
        if m.d2 is not None:
            cond, real, fake1, fake2 = self._semantic_pairs(fwd)
            d2_terms = (discriminator_loss(m.d2, cond, real, fake1), discriminator_loss(m.d2, cond, real, fake2))

        self.d_optimizer.zero_grad()
        total_adv_loss(w, *d1_terms, *d2_terms).backward()
        self.d_optimizer.step()

        d1 = d1_terms[0].item() + w.lambda_adv * d1_terms[1].item()
        d2 = None if m.d2 is None else d2_terms[0].item() + w.lambda_adv * d2_terms[1].item()
        return d1, d2

    def generator_step(self, fwd: ForwardPass) -> ObjectiveTerms:
        """One update of Gi, Gs, Ga and the attention modules against the current discriminators"""
        m, w = self.model, self.config.loss_weights
        g1 = (
            generator_adv_loss(m.d1, fwd.aerial, fwd.first.image),
            generator_adv_loss(m.d1, fwd.aerial, fwd.second.image),
        )
        g2: Tuple[Optional[Variable], Optional[Variable]] = (None, None)
        if m.d2 is not None:
            cond, _, fake1, fake2 = self._semantic_pairs(fwd)
            g2 = (generator_adv_loss(m.d2, cond, fake1), generator_adv_loss(m.d2, cond, fake2))

        pairs = [
            (fwd.first.image, fwd.target),
            (fwd.first.semantic, fwd.semantic),
            (fwd.second.image, fwd.target),
            (fwd.second.semantic, fwd.semantic),
        ]
        terms = total_objective(w, pairs, total_adv_loss(w, *g1, *g2), fwd.second.image)

        self.g_optimizer.zero_grad()
        terms.total.backward()
        self.g_optimizer.step()
        return terms

    def step(self, batch: Batch) -> LossLogRow:
        w = self.config.loss_weights
        with Tape():
            fwd = self.forward(batch)
            d1, d2 = self.discriminator_step(fwd)
            terms = self.generator_step(fwd)
        self.iteration += 1
        adversarial = terms.adversarial
        return LossLogRow(
            iter=self.iteration,
            d1=d1,
            d2=d2,
            g_adv=adversarial.item() if isinstance(adversarial, Variable) else float(adversarial),
            l1_stage1=terms.stage1_pixel(w),
            l1_stage2=terms.stage2_pixel(w),
            tv=terms.tv.item(),
            total=terms.total.item(),
        )


# ---------------------------------------------------------------- checkpoints

def model_tensors(model: CrossViewModel, probe: Optional[ConvProbe] = None,
                  state: Optional[Dict] = None) -> Dict[str, np.ndarray]:
    tensors = {f"{META_PREFIX}config": pack_json(model.config.model_dump(mode="json"))}
    if state is not None:
        tensors[f"{META_PREFIX}state"] = pack_json(state)
    tensors.update(model.state_dict())
    if probe is not None:
        tensors.update(probe.state_dict(PROBE_PREFIX))
    return tensors


def load_model(path: str) -> Tuple[CrossViewModel, Optional[ConvProbe]]:
    """Rebuild the model (and probe, when stored) from a checkpoint"""
    meta, tensors = split_meta(load_checkpoint(path))
    if "config" not in meta:
        raise CheckpointError(f"{path}: checkpoint carries no configuration")
    try:
        config = TrainConfig(**meta["config"])
    except ValueError as e:
        raise CheckpointError(f"{path}: stored configuration is invalid: {e}") from e

    probe_state = {k: v for k, v in tensors.items() if k.startswith(PROBE_PREFIX)}
    model = CrossViewModel(config)
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith(PROBE_PREFIX)})
    probe = ConvProbe.from_state_dict(probe_state, PROBE_PREFIX) if probe_state else None
    return model, probe


# ---------------------------------------------------------------- training

def _check_dataset(config: TrainConfig, samples: Sequence[PairedSample]) -> None:
    if not samples:
        raise DataError("Training dataset is empty")
    for sample in samples:
        if sample.ground.shape[-2:] != (config.size, config.size):
            raise DataError(
                f"Sample '{sample.id}' is {sample.ground.shape[-1]}x{sample.ground.shape[-2]}, "
                f"config expects {config.size}x{config.size}"
            )
        if sample.ground_semantic.shape[0] != config.semantic_classes:
            raise DataError(
                f"Sample '{sample.id}' has {sample.ground_semantic.shape[0]} semantic classes, "
                f"config expects {config.semantic_classes}"
            )


def synthesize(model: CrossViewModel, batch: Batch) -> Tuple[np.ndarray, np.ndarray]:
    """(I'g, I''g) without recording gradients"""
    with no_grad():
        first = model.stage1(batch.source, batch.semantic)
        second = model.stage2(batch.source, first)
    return first.image.value, second.image.value


def _write_samples(model: CrossViewModel, samples: Sequence[PairedSample], path: str) -> None:
    config = model.config
    batch = make_batch(samples[: config.batch_size], config.direction, np.dtype(config.dtype).type)
    coarse, fine = synthesize(model, batch)
    write_sample_grid(path, [batch.source[0], coarse[0], fine[0], batch.target[0]])


def fit_probe(config: TrainConfig, samples: Sequence[PairedSample]) -> ConvProbe:
    batch = make_batch(samples, config.direction)
    probe = ConvProbe.create(config.semantic_classes, seed=config.seed)
    probe.fit(batch.target, batch.labels, iterations=config.probe_iterations,
              batch_size=min(16, len(samples)), seed=config.seed)
    return probe


def train(config: TrainConfig, dataset: Sequence[PairedSample], output_dir: Optional[str] = None) -> TrainResult:
    """
    Optimise the full objective over `dataset`.

    Writes loss_log.csv, checkpoint_epoch_NNN.xvfg per epoch, final.xvfg and
    (when enabled) samples/epoch_NNN.png under the output directory.
    """
    samples = list(dataset)
    _check_dataset(config, samples)
    out = output_dir or config.output_dir
    os.makedirs(out, exist_ok=True)
    dtype = np.dtype(config.dtype).type

    trainer = CrossViewTrainer(config)
    log: List[LossLogRow] = []
    checkpoints: List[str] = []
    log_path = os.path.join(out, "loss_log.csv")

    with open(log_path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(LOSS_LOG_COLUMNS)
        done = False
        for epoch in range(1, config.epochs + 1):
            order = np.random.default_rng([config.seed, epoch]).permutation(len(samples))
            for start in range(0, len(samples), config.batch_size):
                batch = make_batch([samples[i] for i in order[start: start + config.batch_size]], config.direction, dtype)
                row = trainer.step(batch)
                log.append(row)
                data = row.model_dump()
                writer.writerow([_format_cell(data[c]) for c in LOSS_LOG_COLUMNS])
                if row.iter % config.log_every == 0 or row.iter == 1:
                    logger.info(
                        f"iter {row.iter}: d1={row.d1:.4f} d2={'-' if row.d2 is None else f'{row.d2:.4f}'} "
                        f"g_adv={row.g_adv:.4f} total={row.total:.4f}"
                    )
                if config.max_iterations is not None and trainer.iteration >= config.max_iterations:
                    done = True
                    break

            path = os.path.join(out, f"checkpoint_epoch_{epoch:03d}.xvfg")
            save_checkpoint(path, model_tensors(trainer.model, state={"epoch": epoch, "iteration": trainer.iteration}))
            checkpoints.append(path)
            if config.write_samples:
                _write_samples(trainer.model, samples, os.path.join(out, "samples", f"epoch_{epoch:03d}.png"))
            logger.info(f"Epoch {epoch} finished after {trainer.iteration} iterations")
            if done:
                break

    probe = fit_probe(config, samples) if config.probe_iterations > 0 else None
    final_path = os.path.join(out, "final.xvfg")
    save_checkpoint(final_path, model_tensors(trainer.model, probe, state={"iteration": trainer.iteration}))
    return TrainResult(trainer.model, log, final_path, log_path, probe, checkpoints)


def read_loss_log(path: str) -> List[Dict[str, str]]:
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


# ---------------------------------------------------------------- evaluation

def to_pixels(images: np.ndarray) -> np.ndarray:
    """[-1, 1] to [0, 255] floats"""
    return (np.clip(images, -1.0, 1.0) + 1.0) * 127.5


def score_images(
    generated: np.ndarray,
    reference: np.ndarray,
    labels: Sequence[int],
    probe: ProbeClassifier,
    method: str,
    direction: str,
    size: int,
) -> MetricRow:
    """Metric row for (N, 3, H, W) image sets in [-1, 1]"""
    gen_px, ref_px = to_pixels(generated), to_pixels(reference)
    psnrs = [psnr(g, r, 255.0) for g, r in zip(gen_px, ref_px)]
    ssims = [ssim(g, r, 255.0) for g, r in zip(gen_px, ref_px)]
    identical = sum(math.isinf(p) for p in psnrs)
    if identical:
        logger.warning(f"{identical} of {len(psnrs)} images match their reference exactly; set PSNR is reported as inf")
    kl_mean, kl_std = kl_score(probe, generated, reference)

    topk = {}
    for k in TOP_K:
        used = min(k, probe.classes)
        if used < k:
            logger.warning(f"Probe has {probe.classes} classes; top-{k} is reported as top-{used}")
        topk[k] = topk_accuracy(probe, generated, labels, used)

    return MetricRow(
        method=method,
        direction=direction,
        size=size,
        ssim=float(np.mean(ssims)),
        psnr=math.inf if identical else float(np.mean(psnrs)),
        kl_mean=kl_mean,
        kl_std=kl_std,
        top1=topk[1],
        top5=topk[5],
    )


def evaluate(
    checkpoint: Union[str, CrossViewModel],
    dataset: Sequence[PairedSample],
    probe: Optional[ProbeClassifier] = None,
) -> List[MetricRow]:
    """
    Score I''g (first row) and I'g (second row) against the real target views.
    Without an explicit probe the checkpoint's probe is used, or one is fit on
    the evaluation targets.
    """
    stored_probe = None
    if isinstance(checkpoint, str):
        model, stored_probe = load_model(checkpoint)
    else:
        model = checkpoint
    config = model.config
    samples = list(dataset)
    if not samples:
        raise DataError("Evaluation dataset is empty")
    for sample in samples:
        if sample.ground.shape[-1] != config.size:
            raise CheckpointError(
                f"Checkpoint was trained at {config.size}x{config.size}, "
                f"sample '{sample.id}' is {sample.ground.shape[-1]}x{sample.ground.shape[-1]}"
            )

    probe = probe or stored_probe
    if probe is None:
        logger.warning("No probe classifier supplied or stored; fitting one on the evaluation targets")
        probe = fit_probe(config.model_copy(update={"probe_iterations": max(config.probe_iterations, 1)}), samples)

    dtype = np.dtype(config.dtype).type
    coarse, fine, targets, labels = [], [], [], []
    for start in range(0, len(samples), config.batch_size):
        batch = make_batch(samples[start: start + config.batch_size], config.direction, dtype)
        c, f = synthesize(model, batch)
        coarse.append(c)
        fine.append(f)
        targets.append(batch.target)
        labels.append(batch.labels)
    targets_all = np.concatenate(targets).astype(np.float64)
    labels_all = np.concatenate(labels)

    rows = [
        score_images(np.concatenate(fine).astype(np.float64), targets_all, labels_all, probe,
                     config.method, config.direction, config.size),
        score_images(np.concatenate(coarse).astype(np.float64), targets_all, labels_all, probe,
                     f"{config.method} (stage 1)", config.direction, config.size),
    ]
    logger.info(f"Evaluated {len(samples)} samples: ssim={rows[0].ssim:.4f} psnr={rows[0].psnr:.4f}")
    return rows


def generate_images(checkpoint: Union[str, CrossViewModel], dataset: Sequence[PairedSample], output_dir: str) -> List[str]:
    """Write the refined synthesis I''g of every sample as <id>.png"""
    model = load_model(checkpoint)[0] if isinstance(checkpoint, str) else checkpoint
    config = model.config
    samples = list(dataset)
    paths = []
    for start in range(0, len(samples), config.batch_size):
        chunk = samples[start: start + config.batch_size]
        _, fine = synthesize(model, make_batch(chunk, config.direction, np.dtype(config.dtype).type))
        for sample, image in zip(chunk, fine):
            path = os.path.join(output_dir, f"{sample.id}.png")
            encode_image(np.clip(image, -1.0, 1.0), path)
            paths.append(path)
    logger.info(f"Wrote {len(paths)} images to {output_dir}")
    return paths
