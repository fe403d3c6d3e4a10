"""Training harness: loss composition, cosine schedule, early stopping,
the optimization loop, metrics logging, and the convergence comparison."""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import InjectionViT, parameter_partition, save_checkpoint
from .config import TrainingConfig, config_hash, format_config
from .evaluation import evaluate_samples, roc_auc
from .localization import coarse_patch_labels, dice_loss
from .regularizers import activation_profile, contrast_loss, suppression_loss
from .synthesis import BlendRecipe, DegenerateRecipeError, ImageSample, augment, self_blend


@dataclass
class LossBreakdown:
    """The four loss terms and their plain, unweighted sum."""

    ce: float
    dice: float
    suppression: float
    contrast: float
    total: float


def total_loss(ce: float, dice: float, suppression: float, contrast: float) -> LossBreakdown:
    """Compose the overall loss as the unweighted sum of its four terms."""
    for name, value in (("ce", ce), ("dice", dice),
                        ("suppression", suppression), ("contrast", contrast)):
        if not math.isfinite(value):
            raise ValueError(f"non-finite loss component {name!r}: {value}")
    return LossBreakdown(ce=ce, dice=dice, suppression=suppression, contrast=contrast,
                         total=ce + dice + suppression + contrast)


def lr_at(step: int, total_steps: int, config: TrainingConfig) -> float:
    """Cosine annealing from lr_init down to the lr_min floor."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside 0..{total_steps}")
    cos = math.cos(math.pi * step / total_steps)
    return config.lr_min + 0.5 * (config.lr_init - config.lr_min) * (1.0 + cos)


class EarlyStopper:
    """Stop when the monitored loss has not strictly decreased for `patience`
    consecutive epochs."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = math.inf
        self.stale = 0

    def update(self, value: float) -> bool:
        """Feed one epoch value; returns True when training should stop."""
        if value < self.best:
            self.best = value
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


@dataclass
class TrainingResult:
    model: InjectionViT
    header: dict
    log: list[dict]
    initial_state: dict
    best_state: dict
    stopped_epoch: int
    diverged: bool
    wall_time: float
    run_dir: Path | None = None
    metrics_path: Path | None = None
    best_checkpoint: Path | None = None
    last_checkpoint: Path | None = None


def _split_validation(samples: list[ImageSample], fraction: float,
                      rng: np.random.Generator) -> tuple[list[ImageSample], list[ImageSample]]:
    """Hold out a fraction of real sources (by group when groups exist)."""
    groups: dict = {}
    for s in samples:
        groups.setdefault(s.group_id if s.group_id is not None else s.sample_id, []).append(s)
    keys = sorted(groups)
    n_val = int(round(len(keys) * fraction))
    val_keys = set(np.asarray(keys, dtype=object)[rng.permutation(len(keys))[:n_val]])
    train = [s for k in keys if k not in val_keys for s in groups[k]]
    val = [s for k in keys if k in val_keys for s in groups[k]]
    return train, val


def _synthesize_fake(real: ImageSample, rng: np.random.Generator, attempts: int = 10) -> ImageSample:
    for _ in range(attempts):
        recipe = BlendRecipe.sample(rng, has_landmarks=real.landmarks is not None)
        try:
            return self_blend(real, recipe)
        except DegenerateRecipeError:
            continue
    raise RuntimeError(f"could not synthesize a usable fake for {real.sample_id}")


def _batch_tensors(reals, fakes, config: TrainingConfig, need_labels: bool):
    images = np.stack([s.pixels for s in reals] + [s.pixels for s in fakes])
    labels = torch.as_tensor([0] * len(reals) + [1] * len(fakes), dtype=torch.long)
    patch_labels = None
    if need_labels:
        maps = [
            coarse_patch_labels(s.outer_face_mask, config.backbone.patch_size,
                                config.gamma0, config.gamma1).labels
            for s in list(reals) + list(fakes)
        ]
        patch_labels = torch.as_tensor(np.stack(maps), dtype=torch.float32)
    return torch.as_tensor(images, dtype=torch.float32), labels, patch_labels


def _state_clone(model: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def train(config: TrainingConfig, samples: list[ImageSample],
          run_dir: str | Path | None = None, verbose: bool = False) -> TrainingResult:
    """Run one training job over real samples with online self-blended fakes.

    The mode picks the parameter policy: ``injected`` trains only the
    partition's trainable set on the full four-term loss, ``full_finetune``
    trains every parameter on the same loss, and ``baseline`` trains a plain
    backbone (no injection pathway) on cross-entropy alone. Validation fakes
    come from held-out reals only and are frozen across epochs. Aborts on a
    non-finite loss, restoring the last finished epoch's weights.
    """
    start = time.time()
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    baseline_mode = config.mode == "baseline"
    use_loc = config.use_localization and not baseline_mode
    use_reg = config.use_regularizers and not baseline_mode
    forward_mode = "baseline" if baseline_mode else "injected"

    model = InjectionViT(config.backbone, with_localization=use_loc)
    if config.mode == "injected":
        model.freeze_for_injection()
    else:
        model.unfreeze_all()
    initial_state = _state_clone(model)

    train_reals, val_reals = _split_validation(samples, config.val_fraction, rng)
    if not train_reals:
        raise ValueError("no training samples left after the validation split")
    val_rng = np.random.default_rng((config.seed, 0xFACE))
    val_samples = list(val_reals)
    for real in val_reals:
        val_samples.append(_synthesize_fake(real, val_rng))

    shallow_cutoff, deep_layers = config.regularizer.resolve(config.backbone.num_layers)
    optimizer = torch.optim.AdamW(
        model.trainable_parameters(), lr=config.lr_init, weight_decay=config.weight_decay
    )
    steps_per_epoch = math.ceil(len(train_reals) / config.batch_size)
    total_steps = config.max_epochs * steps_per_epoch
    stopper = EarlyStopper(config.patience)

    header = {
        "type": "header",
        "config_hash": config_hash(config),
        "seed": config.seed,
        "mode": config.mode,
        "num_train_real": len(train_reals),
        "num_val": len(val_samples),
        "steps_per_epoch": steps_per_epoch,
        "total_steps": total_steps,
    }
    log: list[dict] = []
    best_state = _state_clone(model)
    best_loss = math.inf
    last_good_state = _state_clone(model)
    diverged = False
    global_step = 0
    stopped_epoch = 0

    for epoch in range(1, config.max_epochs + 1):
        model.train()
        epoch_rng = np.random.default_rng((config.seed, epoch))
        order = epoch_rng.permutation(len(train_reals))
        sums = {"ce": 0.0, "dice": 0.0, "suppression": 0.0, "contrast": 0.0}
        layer_sums_real = np.zeros(config.backbone.num_layers)
        layer_sums_fake = np.zeros(config.backbone.num_layers)
        n_batches = 0
        n_counted = 0
        abort = False

        for lo in range(0, len(order), config.batch_size):
            reals = [train_reals[i] for i in order[lo:lo + config.batch_size]]
            fakes = [_synthesize_fake(r, epoch_rng) for r in reals]
            if config.augment_prob > 0:
                reals = [augment(s, epoch_rng) if epoch_rng.random() < config.augment_prob else s
                         for s in reals]
                fakes = [augment(s, epoch_rng) if epoch_rng.random() < config.augment_prob else s
                         for s in fakes]
            images, labels, patch_labels = _batch_tensors(reals, fakes, config, use_loc)
            b = len(reals)

            try:
                out = model(images, mode=forward_mode, localize=use_loc)
            except FloatingPointError:
                diverged = True
                abort = True
                break
            ce_t = F.cross_entropy(out.logits, labels)
            zero = torch.zeros((), dtype=ce_t.dtype)
            dice_t = dice_loss(out.patch_scores, patch_labels,
                               smooth=config.dice_smooth).mean() if use_loc else zero
            profile = None
            if forward_mode == "injected":
                profile = activation_profile(out.correlations)
            if use_reg:
                sup_t = suppression_loss(profile, config.regularizer.beta, shallow_cutoff)
                con_t = contrast_loss(profile.subset(slice(0, b)),
                                      profile.subset(slice(b, 2 * b)),
                                      config.regularizer.mu, deep_layers)
            else:
                sup_t, con_t = zero, zero

            try:
                step_breakdown = total_loss(
                    float(ce_t.detach()), float(dice_t.detach()),
                    float(sup_t.detach()), float(con_t.detach()),
                )
            except ValueError:
                diverged = True
                abort = True
                break

            optimizer.zero_grad()
            (ce_t + dice_t + sup_t + con_t).backward()
            lr = lr_at(global_step, total_steps, config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.step()
            global_step += 1

            sums["ce"] += step_breakdown.ce
            sums["dice"] += step_breakdown.dice
            sums["suppression"] += step_breakdown.suppression
            sums["contrast"] += step_breakdown.contrast
            n_batches += 1
            if profile is not None:
                for l, a in enumerate(profile.per_layer):
                    layer_sums_real[l] += float(a[:b].detach().mean())
                    layer_sums_fake[l] += float(a[b:].detach().mean())
                n_counted += 1

        if abort:
            model.load_state_dict(last_good_state)
            stopped_epoch = epoch - 1
            break

        breakdown = total_loss(
            sums["ce"] / n_batches, sums["dice"] / n_batches,
            sums["suppression"] / n_batches, sums["contrast"] / n_batches,
        )
        val_auc = None
        val_ce = None
        if val_samples:
            model.eval()
            record = evaluate_samples(model, val_samples, mode=forward_mode)
            scores = np.array([e.score for e in record.entries])
            labels_np = np.array([e.label for e in record.entries])
            val_auc = roc_auc(scores, labels_np)
            eps = 1e-7
            picked = np.where(labels_np == 1, scores, 1.0 - scores)
            val_ce = float(-np.log(np.clip(picked, eps, 1.0)).mean())

        entry = {
            "type": "epoch",
            "epoch": epoch,
            "steps": global_step,
            "lr": lr_at(min(global_step, total_steps), total_steps, config),
            **asdict(breakdown),
            "val_auc": val_auc,
            "val_ce": val_ce,
            "a_real": (layer_sums_real / max(n_counted, 1)).tolist(),
            "a_fake": (layer_sums_fake / max(n_counted, 1)).tolist(),
            "wall_time": time.time() - start,
        }
        log.append(entry)
        if verbose:
            print(f"epoch {epoch:3d} total {breakdown.total:.4f} ce {breakdown.ce:.4f} "
                  f"val_auc {val_auc if val_auc is None else round(val_auc, 4)}")

        last_good_state = _state_clone(model)
        stopped_epoch = epoch
        if breakdown.total < best_loss:
            best_loss = breakdown.total
            best_state = _state_clone(model)

        monitored = breakdown.total if config.early_stop_on == "train" else (
            val_ce if val_ce is not None else breakdown.total
        )
        if stopper.update(monitored):
            break

    result = TrainingResult(
        model=model,
        header=header,
        log=log,
        initial_state=initial_state,
        best_state=best_state,
        stopped_epoch=stopped_epoch,
        diverged=diverged,
        wall_time=time.time() - start,
    )
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.cfg").write_text(format_config(config))
        result.metrics_path = write_metrics_log(run_dir / "metrics.jsonl", header, log)
        result.last_checkpoint = run_dir / "last.ckpt"
        save_checkpoint(result.last_checkpoint, model, epoch=stopped_epoch)
        best_model = InjectionViT(config.backbone, with_localization=use_loc)
        best_model.load_state_dict(best_state)
        result.best_checkpoint = run_dir / "best.ckpt"
        save_checkpoint(result.best_checkpoint, best_model, epoch=stopped_epoch)
        result.run_dir = run_dir
    return result


def best_model(result: TrainingResult) -> InjectionViT:
    """Fresh model carrying the lowest-loss epoch's weights."""
    model = InjectionViT(result.model.config,
                         with_localization=result.model.localization is not None)
    model.load_state_dict(result.best_state)
    model.eval()
    return model


def write_metrics_log(path: str | Path, header: dict, log: list[dict]) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for entry in log:
            fh.write(json.dumps(entry) + "\n")
    return path


def load_metrics_log(path: str | Path) -> tuple[dict, list[dict]]:
    lines = [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]
    if not lines or lines[0].get("type") != "header":
        raise ValueError(f"{path} is not a metrics log")
    return lines[0], [l for l in lines[1:] if l.get("type") == "epoch"]


@dataclass
class ConvergenceReport:
    """Steps-to-threshold comparison between two runs of different modes."""

    threshold: float
    component: str
    steps_injected: int | None
    steps_full: int | None
    ratio: float | None

    @property
    def unreachable(self) -> bool:
        return self.steps_injected is None or self.steps_full is None


def _steps_to_threshold(log: list[dict], threshold: float, component: str) -> int | None:
    for entry in log:
        if entry[component] <= threshold:
            return int(entry["steps"])
    return None


def convergence_report(injected_log, full_log, loss_threshold: float,
                       component: str = "total") -> ConvergenceReport:
    """Ratio of optimizer steps needed to first reach a loss threshold.

    Both logs must come from runs that differ only in mode; the ratio is
    steps_full / steps_injected at the first epoch at or below the threshold.
    A threshold that a run never reaches is reported, not raised.
    """
    def records(log):
        if isinstance(log, TrainingResult):
            return log.header, log.log
        if isinstance(log, (str, Path)):
            return load_metrics_log(log)
        header, entries = log
        return header, entries

    header_i, entries_i = records(injected_log)
    header_f, entries_f = records(full_log)
    if header_i.get("seed") != header_f.get("seed"):
        raise ValueError("convergence comparison requires identical seeds")
    steps_i = _steps_to_threshold(entries_i, loss_threshold, component)
    steps_f = _steps_to_threshold(entries_f, loss_threshold, component)
    ratio = None
    if steps_i is not None and steps_f is not None:
        ratio = steps_f / steps_i
    return ConvergenceReport(
        threshold=loss_threshold,
        component=component,
        steps_injected=steps_i,
        steps_full=steps_f,
        ratio=ratio,
    )
