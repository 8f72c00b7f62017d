"""Training loop with two optimizers, a multistep schedule and periodic evaluation."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
import torch
from torch.optim import SGD, Adam
from torch.optim.lr_scheduler import MultiStepLR
from torch.utils.data import DataLoader

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .const import (
    BEST_CHECKPOINT_NAME,
    CONFIG_SNAPSHOT_NAME,
    HISTORY_NAME,
    LAST_CHECKPOINT_NAME,
    TRAIN_LOG_NAME,
    Split,
)
from .data.manifest import AttributeSchema, class_mapping, load_manifest, select
from .data.mixup import mixup
from .data.sampler import BatchCollator, PKBatchSampler, RecordDataset
from .data.transforms import AugmentConfig, RecordTransform, resolve_fill, sample_seed
from .exceptions import CheckpointError, ConfigurationError, NonFiniteLossError
from .log import history_file, log_metrics
from .losses import LossWeights, MultiTaskCriterion
from .network.model import build_model
from .retrieval.protocol import EvalSettings, evaluate_model

if TYPE_CHECKING:
    from collections.abc import Mapping

    from .config import Config
    from .data.sampler import TripletBatch
    from .network.model import MMFLNet

_LOGGER = logging.getLogger(__name__)

NONFINITE_DUMP_NAME = "nonfinite.json"


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings of one run."""

    epochs: int
    lr: float
    betas: tuple[float, float]
    eps: float
    weight_decay: float
    center_lr: float
    center_momentum: float
    milestones: tuple[int, ...]
    lr_decay: float
    eval_period: int
    seed: int
    mixup_alpha: float | None = None

    def __post_init__(self) -> None:
        """Check the schedule."""
        pairs = zip(self.milestones, self.milestones[1:], strict=False)
        if any(b <= a for a, b in pairs):
            raise ConfigurationError("LR milestones must be strictly increasing")
        if self.epochs > 0 and any(m >= self.epochs for m in self.milestones):
            raise ConfigurationError(
                f"LR milestones {list(self.milestones)} must be below "
                f"epochs={self.epochs}"
            )

    @classmethod
    def from_config(cls, config: Config) -> TrainConfig:
        """Build from a resolved configuration."""
        optim = config.section("optim")
        mixup_section = config.get("data.mixup")
        beta1, beta2 = optim["betas"]
        return cls(
            epochs=optim["epochs"],
            lr=optim["lr"],
            betas=(beta1, beta2),
            eps=optim["eps"],
            weight_decay=optim["weight_decay"],
            center_lr=optim["center_lr"],
            center_momentum=optim["center_momentum"],
            milestones=tuple(optim["milestones"]),
            lr_decay=optim["lr_decay"],
            eval_period=config.get("eval.period"),
            seed=config.get("seed"),
            mixup_alpha=mixup_section["alpha"] if mixup_section["enabled"] else None,
        )


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Return the network learning rate of an epoch."""
    passed = sum(1 for milestone in config.milestones if milestone <= epoch)
    return config.lr * config.lr_decay**passed


def parameter_groups(
    model: torch.nn.Module, weight_decay: float
) -> list[dict[str, Any]]:
    """Split parameters into decayed weights and undecayed norm and fusion scalars."""
    decayed = []
    undecayed = []
    for parameter in model.parameters():
        if not parameter.requires_grad:
            continue
        (undecayed if parameter.ndim <= 1 else decayed).append(parameter)
    return [
        {"params": decayed, "weight_decay": weight_decay},
        {"params": undecayed, "weight_decay": 0.0},
    ]


@dataclass
class StepReport:
    """Loss components of one training step."""

    epoch: int
    step: int
    lr: float
    losses: dict[str, float]

    def as_record(self) -> dict[str, Any]:
        """Return the flat history record."""
        return {"epoch": self.epoch, "step": self.step, "lr": self.lr, **self.losses}


def _cloned(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    """Detach and copy a state dict."""
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


class Trainer:
    """Owns the model, the criterion and both optimizers."""

    def __init__(
        self,
        model: MMFLNet,
        criterion: MultiTaskCriterion,
        config: TrainConfig,
        device: torch.device | str = "cpu",
    ) -> None:
        """Build the optimizers and the schedule."""
        self.model = model
        self.criterion = criterion
        self.config = config
        self.device = torch.device(device)
        self.optimizer = Adam(
            parameter_groups(model, config.weight_decay),
            lr=config.lr,
            betas=config.betas,
            eps=config.eps,
        )
        self.center_optimizer = SGD(
            criterion.parameters(), lr=config.center_lr, momentum=config.center_momentum
        )
        self.scheduler = MultiStepLR(
            self.optimizer, milestones=list(config.milestones), gamma=config.lr_decay
        )

    @property
    def lr(self) -> float:
        """Return the current network learning rate."""
        return float(self.optimizer.param_groups[0]["lr"])

    def _center_snapshot(self) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Copy the centers and their momentum buffer."""
        centers = self.criterion.center.centers
        buffer = self.center_optimizer.state.get(centers, {}).get("momentum_buffer")
        return centers.detach().clone(), None if buffer is None else buffer.clone()

    def _restore_absent(
        self, labels: torch.Tensor, snapshot: tuple[torch.Tensor, torch.Tensor | None]
    ) -> None:
        """Put back the center rows of classes that were not in the batch."""
        centers = self.criterion.center.centers
        absent = torch.ones(centers.shape[0], dtype=torch.bool, device=centers.device)
        absent[labels] = False
        saved_centers, saved_buffer = snapshot
        with torch.no_grad():
            centers[absent] = saved_centers[absent]
            buffer = self.center_optimizer.state.get(centers, {}).get("momentum_buffer")
            if buffer is not None:
                buffer[absent] = 0.0 if saved_buffer is None else saved_buffer[absent]

    def train_step(self, batch: TripletBatch, epoch: int, step: int) -> StepReport:
        """Run one forward, backward and update on a PK batch."""
        step_seed = sample_seed(self.config.seed, epoch, step)
        torch.manual_seed(step_seed)
        self.model.train()
        batch = batch.to(self.device)
        if self.config.mixup_alpha is not None:
            targets = torch.cat(
                [batch.labels.unsqueeze(1), batch.attribute_targets], dim=1
            )
            mixed = mixup(batch.images, targets, self.config.mixup_alpha, step_seed)
            output = self.model(mixed.images)
            metric_output = self.model(batch.images)
            report = self.criterion(
                output, batch.labels, batch.attribute_targets, mixed, metric_output
            )
        else:
            output = self.model(batch.images)
            report = self.criterion(output, batch.labels, batch.attribute_targets)

        if not report.is_finite():
            raise NonFiniteLossError(
                f"Non-finite loss at epoch {epoch} step {step}",
                {
                    "epoch": epoch,
                    "step": step,
                    "indices": list(batch.indices),
                    "losses": report.as_dict(),
                },
            )

        self.optimizer.zero_grad(set_to_none=True)
        self.center_optimizer.zero_grad(set_to_none=True)
        report.total.backward()
        beta = self.criterion.weights.beta_center
        if beta > 0:
            for parameter in self.criterion.parameters():
                if parameter.grad is not None:
                    parameter.grad.mul_(1.0 / beta)
        snapshot = self._center_snapshot()
        self.optimizer.step()
        self.center_optimizer.step()
        self._restore_absent(batch.labels, snapshot)

        result = StepReport(epoch=epoch, step=step, lr=self.lr, losses=report.as_dict())
        _LOGGER.debug(
            "Epoch %d step %d: total %.4f", epoch, step, result.losses["total"]
        )
        return result

    def state(
        self,
        epoch: int,
        config: Config,
        class_pids: list[int],
        history: list[dict[str, Any]],
        best_map: float,
    ) -> Checkpoint:
        """Capture a checkpoint of the current training state."""
        scheduler = self.scheduler.state_dict()
        scheduler["milestones"] = dict(scheduler["milestones"])
        return Checkpoint(
            epoch=epoch,
            config=config.snapshot(),
            class_pids=class_pids,
            model=_cloned(self.model),
            criterion=_cloned(self.criterion),
            optimizer=self.optimizer.state_dict(),
            center_optimizer=self.center_optimizer.state_dict(),
            scheduler=scheduler,
            rng={"torch": torch.get_rng_state()},
            history=[dict(entry) for entry in history],
            best_map=best_map,
        )

    def load_state(self, checkpoint: Checkpoint) -> None:
        """Restore model, centers, optimizers, schedule and RNG."""
        self.model.load_state_dict(checkpoint.model)
        self.criterion.load_state_dict(checkpoint.criterion)
        self.optimizer.load_state_dict(checkpoint.optimizer)
        self.center_optimizer.load_state_dict(checkpoint.center_optimizer)
        scheduler = dict(checkpoint.scheduler)
        scheduler["milestones"] = Counter(scheduler.get("milestones", {}))
        self.scheduler.load_state_dict(scheduler)
        if "torch" in checkpoint.rng:
            torch.set_rng_state(checkpoint.rng["torch"])


@dataclass
class FitResult:
    """Outcome of a training run."""

    checkpoint: Checkpoint
    history: list[dict[str, Any]] = field(default_factory=list)
    run_dir: Path | None = None

    @property
    def best_map(self) -> float:
        """Return the best evaluated mAP, or -1 when nothing was evaluated."""
        return self.checkpoint.best_map


def _mean_losses(reports: list[StepReport]) -> dict[str, float]:
    """Average each loss component over an epoch."""
    if not reports:
        return {}
    return {
        name: float(np.mean([report.losses[name] for report in reports]))
        for name in reports[0].losses
    }


def _write_history(run_dir: Path, history: list[Mapping[str, Any]]) -> None:
    """Write the per-epoch history as a JSON array."""
    (run_dir / HISTORY_NAME).write_text(
        json.dumps(list(history), indent=2) + "\n", encoding="utf-8"
    )


def fit(
    config: Config,
    run_dir: Path | str,
    resume: Path | str | None = None,
) -> FitResult:
    """
    Train on the manifest named by `data.manifest`.

    Every `eval.period` epochs, and after the last epoch, the model is
    evaluated consumer-to-shop; `best.pt` keeps the best mAP and `last.pt`
    the latest state. With `resume`, training continues from the epoch after
    the checkpoint's.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    data = config.section("data")
    if not data["manifest"]:
        raise ConfigurationError("data.manifest is not set")
    manifest = Path(data["manifest"])
    schema = AttributeSchema.from_config(data["attributes"])
    records = load_manifest(manifest, schema)
    image_root = Path(data["image_root"]) if data["image_root"] else manifest.parent
    train_records = select(records, Split.TRAIN)
    class_map = class_mapping(train_records)
    class_pids = sorted(class_map, key=class_map.__getitem__)

    fill = resolve_fill(data["fill"], train_records, image_root)
    if data["fill"] == "auto":
        config = config.with_overrides({"data.fill": list(fill)})
    config.write_snapshot(run_dir / CONFIG_SNAPSHOT_NAME)

    train_config = TrainConfig.from_config(config)
    device = torch.device(config.get("device"))
    torch.manual_seed(train_config.seed)
    model = build_model(config.section("model"), len(class_map), schema.value_counts)
    weights = LossWeights.from_config(config.section("loss"))
    criterion = MultiTaskCriterion(len(class_map), model.metric_dim, weights)
    model.to(device)
    criterion.to(device)
    trainer = Trainer(model, criterion, train_config, device)

    sampler = PKBatchSampler(train_records, data["p"], data["k"], train_config.seed)
    train_transform = RecordTransform(
        image_root, data["image_size"], fill, AugmentConfig.from_config(data["augment"])
    )
    loader = DataLoader(
        RecordDataset(train_records, train_transform, train_config.seed),
        batch_sampler=sampler,
        collate_fn=BatchCollator(train_records, schema, class_map, sampler.layout),
        num_workers=data["num_workers"],
    )
    eval_transform = RecordTransform(image_root, data["image_size"], fill)
    eval_settings = EvalSettings.from_config(config.section("eval"))

    start_epoch = 0
    history: list[dict[str, Any]] = []
    best_map = -1.0
    if resume is not None:
        checkpoint = load_checkpoint(resume)
        if checkpoint.class_pids != class_pids:
            raise CheckpointError(
                f"Checkpoint {resume} was trained on different identities"
            )
        trainer.load_state(checkpoint)
        start_epoch = checkpoint.epoch
        history = [dict(entry) for entry in checkpoint.history]
        best_map = checkpoint.best_map
        _LOGGER.info("Resuming from %s at epoch %d", resume, start_epoch)

    last = trainer.state(start_epoch, config, class_pids, history, best_map)
    if start_epoch >= train_config.epochs:
        save_checkpoint(last, run_dir / LAST_CHECKPOINT_NAME)
        _write_history(run_dir, history)
        return FitResult(checkpoint=last, history=history, run_dir=run_dir)

    _LOGGER.info(
        "Training %d identities for %d epochs, %d batches of %d images per epoch",
        len(class_map),
        train_config.epochs,
        len(sampler),
        sampler.batch_size,
    )
    with history_file(run_dir / TRAIN_LOG_NAME):
        for epoch in range(start_epoch, train_config.epochs):
            sampler.set_epoch(epoch)
            lr = trainer.lr
            reports = []
            for step, batch in enumerate(loader):
                try:
                    report = trainer.train_step(batch, epoch, step)
                except NonFiniteLossError as err:
                    dump = run_dir / NONFINITE_DUMP_NAME
                    dump.write_text(
                        json.dumps(err.diagnostics, indent=2), encoding="utf-8"
                    )
                    _LOGGER.error("%s, diagnostics written to %s", err, dump)
                    raise
                reports.append(report)
                log_metrics("step", report.as_record())
            trainer.scheduler.step()

            finished = epoch + 1
            entry: dict[str, Any] = {"epoch": finished, "lr": lr}
            entry |= _mean_losses(reports)
            history.append(entry)
            _LOGGER.info(
                "Epoch %d/%d: lr %.2e, total loss %.4f",
                finished,
                train_config.epochs,
                lr,
                entry.get("total", float("nan")),
            )
            improved = False
            due = finished % train_config.eval_period == 0
            if due or finished == train_config.epochs:
                result = evaluate_model(
                    model, records, eval_transform, eval_settings, device
                )
                entry |= result.summary()
                log_metrics("eval", {"epoch": finished, **result.summary()})
                if result.mAP > best_map:
                    best_map = result.mAP
                    improved = True
            last = trainer.state(finished, config, class_pids, history, best_map)
            save_checkpoint(last, run_dir / LAST_CHECKPOINT_NAME)
            if improved:
                save_checkpoint(last, run_dir / BEST_CHECKPOINT_NAME)
            _write_history(run_dir, history)

    return FitResult(checkpoint=last, history=history, run_dir=run_dir)
