"""Condition runner: sequential tasks, per-condition objectives, artifacts.

Each run writes out/<condition>/<seed>/ containing metrics.csv (accuracy of
every earlier task after each training stage), log.txt (protocol constants
and the full epoch trace, no timestamps, byte-reproducible), checkpoints/,
and for generative replay grids/ with sample sheets.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .autodiff import Tensor
from .checkpoint import ModelCheckpoint, save_checkpoint
from .data import (
    AugmentConfig,
    TaskDataset,
    augment_batch,
    derive_seed,
    global_units,
    load_raw_task,
    make_synthetic_task,
    one_hot,
    preprocess_eval_batch,
)
from .errors import IoError
from .layers import Network, build_classifier, build_discriminator, build_generator
from .losses import FisherState, cross_entropy, ewc_penalty, fisher_diagonal
from .profiles import Profile, get_profile
from .replay import (
    FrozenClassifier,
    build_gan_training_set,
    build_noise_source,
    build_pseudo_source,
    build_rote_source,
    generate_pseudo_images,
    label_pseudo_images,
)
from .training import (
    Adam,
    SourceCycler,
    TrainSource,
    early_stop_loop,
    evaluate_accuracy,
    train_epoch,
    train_gan,
    validation_loss,
)

CONDITIONS = ("std", "reh", "pseudo_rec", "pseudo_rand", "ewc", "ewc_c10", "rote_learn")

METRICS_FIELDS = ("condition", "seed", "train_task", "eval_task", "head",
                  "accuracy", "epochs_run", "best_valid_loss")


@dataclass
class ExperimentConfig:
    profile: Profile
    condition: str
    seed: int
    out_dir: Path
    grid_every: int = 5
    data_seed: int = 0      # synthetic tasks are shared across conditions/seeds
    task_manifests: Optional[List[Path]] = None   # real data instead of synthetic

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ValueError(
                f"unknown condition {self.condition!r}; choose from {', '.join(CONDITIONS)}")
        self.out_dir = Path(self.out_dir)


def load_tasks(cfg: ExperimentConfig) -> List[TaskDataset]:
    p = cfg.profile
    if cfg.task_manifests:
        if len(cfg.task_manifests) != p.num_tasks:
            raise ValueError(f"{p.num_tasks} tasks need {p.num_tasks} manifests, "
                             f"got {len(cfg.task_manifests)}")
        return [load_raw_task(m, task_index=t) for t, m in enumerate(cfg.task_manifests)]
    per_class = p.train_per_class + p.valid_per_class + p.test_per_class
    return [make_synthetic_task(t, p.classes_per_task, per_class, seed=cfg.data_seed)
            for t in range(p.num_tasks)]


# ---------------------------------------------------------------------------
# Artifact emission


def emit_metrics_csv(rows: Sequence[dict], path) -> None:
    """Fixed column order and fixed float formatting, so identical runs emit
    byte-identical files."""
    try:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=METRICS_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            out = dict(row)
            out["accuracy"] = f"{float(row['accuracy']):.6f}"
            out["best_valid_loss"] = f"{float(row['best_valid_loss']):.6f}"
            writer.writerow(out)
        Path(path).write_text(buf.getvalue())
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def read_metrics_csv(path) -> List[dict]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    for row in rows:
        row["seed"] = int(row["seed"])
        row["train_task"] = int(row["train_task"])
        row["eval_task"] = int(row["eval_task"])
        row["accuracy"] = float(row["accuracy"])
        row["epochs_run"] = int(row["epochs_run"])
        row["best_valid_loss"] = float(row["best_valid_loss"])
    return rows


def emit_image_grid(images_raw: np.ndarray, path, cols: int = 8) -> None:
    """Tile [n,c,h,w] byte-range images into one PNG, row-major."""
    from PIL import Image

    n, c, h, w = images_raw.shape
    rows = math.ceil(n / cols)
    sheet = np.zeros((rows * h, cols * w, c), dtype=np.uint8)
    tiles = np.clip(np.rint(images_raw), 0, 255).astype(np.uint8)
    for i in range(n):
        r, k = divmod(i, cols)
        sheet[r * h : (r + 1) * h, k * w : (k + 1) * w] = tiles[i].transpose(1, 2, 0)
    img = Image.fromarray(sheet[..., 0] if c == 1 else sheet, mode="L" if c == 1 else "RGB")
    try:
        img.save(Path(path), format="PNG")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def protocol_block(p: Profile, condition: str) -> List[str]:
    """The constants a run commits to, one key=value per line.  These open
    every log file, so a finished run documents its own protocol."""
    lines = [
        f"profile={p.name}",
        f"condition={condition}",
        f"num_tasks={p.num_tasks}",
        f"classes_per_task={p.classes_per_task}",
        f"batch_size={p.batch_size}",
        f"replay_split={p.batch_size // 2}/{p.batch_size // 2}",
        f"lr_first_task={p.lr_first_task}",
        f"lr_later_tasks={p.lr_later_tasks}",
        f"adam_beta1={p.adam_beta1}",
        f"adam_beta2={p.adam_beta2}",
        f"adam_eps={p.adam_eps}",
        f"patience={p.patience}",
        f"max_epochs={p.max_epochs}",
        f"optimizer_reset=per-task",
    ]
    if condition in ("pseudo_rec", "pseudo_rand"):
        lines += [f"pseudo_train_size={p.pseudo_train_size}",
                  f"pseudo_valid_size={p.pseudo_valid_size}"]
    if condition == "pseudo_rec":
        lines += [f"gan_rehearsal_size={p.gan_rehearsal_size}",
                  f"gan_epochs={p.gan_epochs}",
                  f"gan_batch_size={p.gan_batch_size}",
                  f"gan_lr={p.gan_lr}",
                  f"gan_beta1={p.gan_beta1}"]
    if condition == "ewc":
        lines += [f"ewc_lambda={p.ewc_lambda:g}", f"fisher_samples={p.fisher_samples}"]
    if condition == "ewc_c10":
        lines += [f"ewc_lambda={p.ewc_c10_lambda:g}", f"fisher_samples={p.fisher_samples}",
                  "head=shared"]
    if condition == "rote_learn":
        lines += [f"rote_buffer_size={p.rote_buffer_size}", "rote_split=3:1"]
    return lines


# ---------------------------------------------------------------------------
# Source construction


def augment_config(p: Profile, flip_lr: bool) -> AugmentConfig:
    return AugmentConfig(crop_to=p.crop_hw, flip_lr=flip_lr,
                         brightness_delta=p.brightness_delta,
                         contrast_range=(p.contrast_lo, p.contrast_hi),
                         pad_to=p.pad_to)


def _targets(task: TaskDataset, labels: np.ndarray, width: int, shared_head: bool) -> np.ndarray:
    if shared_head:
        return one_hot(labels, width)
    return one_hot(global_units(task, labels), width)


def real_task_source(task: TaskDataset, p: Profile, width: int, shared_head: bool,
                     name: Optional[str] = None) -> TrainSource:
    """Raw train images with per-epoch distortion, plus the standardized
    validation split."""
    tr, va = task.train_idx, task.valid_idx
    return TrainSource(
        name=name or f"task{task.task_index}",
        images=task.images[tr],
        targets=_targets(task, task.labels[tr], width, shared_head),
        augment=True,
        augment_cfg=augment_config(p, task.flip_lr),
        valid_images=preprocess_eval_batch(task.images[va], p.crop_hw),
        valid_targets=_targets(task, task.labels[va], width, shared_head),
    )


# ---------------------------------------------------------------------------
# The sequential run


@dataclass
class SeedRunResult:
    rows: List[dict]
    persisted_bytes: List[int]
    run_dir: Path


def _persisted_bytes(condition: str, run_dir: Path, fishers: List[FisherState],
                     tasks_seen: List[TaskDataset], rote_stored: int,
                     image_nbytes: int) -> int:
    """Bytes a finished stage leaves behind for future stages."""
    total = sum(f.stat().st_size for f in (run_dir / "checkpoints").glob("*.prcl"))
    if condition in ("ewc", "ewc_c10"):
        for st in fishers:
            total += sum(a.nbytes for a in st.fisher.values())
            total += sum(a.nbytes for a in st.anchor.values())
    if condition == "reh":
        for task in tasks_seen:
            total += task.images.nbytes + task.labels.nbytes
    if condition == "rote_learn":
        total += rote_stored * image_nbytes
    return total


def run_seed(cfg: ExperimentConfig) -> SeedRunResult:
    p = cfg.profile
    condition = cfg.condition
    seed = cfg.seed
    run_dir = cfg.out_dir / condition / str(seed)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    if condition == "pseudo_rec":
        (run_dir / "grids").mkdir(exist_ok=True)

    shared_head = condition == "ewc_c10"
    width = p.classes_per_task if shared_head else p.joint_output_units
    tasks = load_tasks(cfg)

    model = build_classifier(p, output_units=width).build(seed=derive_seed(seed, "init"))
    gen: Optional[Network] = None
    disc: Optional[Network] = None
    fishers: List[FisherState] = []
    rote_stored = 0
    log: List[str] = list(protocol_block(p, condition))
    rows: List[dict] = []
    persisted: List[int] = []

    for t, task in enumerate(tasks):
        lr = p.lr_first_task if t == 0 else p.lr_later_tasks
        log.append(f"task={t} start lr={lr}")

        sources = [real_task_source(task, p, width, shared_head, name="new")]
        if t > 0:
            if condition == "reh":
                sources += [real_task_source(old, p, width, shared_head)
                            for old in tasks[:t]]
            elif condition == "pseudo_rec":
                frozen = FrozenClassifier.from_network(model)
                sources.append(build_pseudo_source(
                    gen, frozen, p.pseudo_train_size, p.pseudo_valid_size,
                    p.crop_hw, seed=derive_seed(seed, "pseudo", t)))
            elif condition == "pseudo_rand":
                frozen = FrozenClassifier.from_network(model)
                sources.append(build_noise_source(
                    frozen, p.pseudo_train_size, p.pseudo_valid_size,
                    (p.image_channels, p.source_hw, p.source_hw), p.crop_hw,
                    seed=derive_seed(seed, "pseudo", t), name="pseudo"))
            elif condition == "rote_learn":
                rote, rote_stored = build_rote_source(
                    tasks[:t], p.rote_buffer_size, p.classes_per_task, width,
                    seed=derive_seed(seed, "rote"),
                    augment_cfg=augment_config(p, task.flip_lr), crop_to=p.crop_hw)
                sources.append(rote)
                log.append(f"task={t} rote_stored={rote_stored}")

        opt = Adam(model.parameters(), lr=lr, beta1=p.adam_beta1,
                   beta2=p.adam_beta2, eps=p.adam_eps)
        cyclers = {src.name: SourceCycler(len(src), derive_seed(seed, "cycle", t, src.name))
                   for src in sources[1:]}

        def loss_builder(batches):
            total = None
            for _, (x, tg) in batches.items():
                term = cross_entropy(model.forward(Tensor(x), train=True), Tensor(tg))
                total = term if total is None else total + term
            if condition in ("ewc", "ewc_c10") and fishers:
                total = total + ewc_penalty(model.parameters(), fishers)
            return total

        extra = None
        if condition in ("ewc", "ewc_c10"):
            extra = lambda: float(ewc_penalty(model.parameters(), fishers).data)

        def run_one(epoch):
            return train_epoch(model, sources, loss_builder, opt, p.batch_size,
                               t, epoch, run_seed=derive_seed(seed, "task", t),
                               replay_cyclers=cyclers)

        fit = early_stop_loop(model, run_one,
                              lambda: validation_loss(model, sources, extra=extra),
                              patience=p.patience, max_epochs=p.max_epochs,
                              on_epoch=lambda e, s: log.append(
                                  f"task={t} epoch={e} train_loss={s['train_loss']:.6f} "
                                  f"valid_loss={s['valid_loss']:.6f}"))
        log.append(f"task={t} best_epoch={fit.best_epoch} "
                   f"best_valid_loss={fit.best_valid_loss:.6f} epochs_run={fit.epochs_run}")

        # consolidation / generator upkeep
        if condition in ("ewc", "ewc_c10"):
            lam = p.ewc_c10_lambda if shared_head else p.ewc_lambda
            # importance is measured on the distorted training distribution: on
            # clean centered crops a fit model is near one-hot, so per-sample
            # gradients (and the importance of most parameters) vanish, leaving
            # a large unguarded subspace the next task re-routes through
            fseed = derive_seed(seed, "fisher", t)
            images_fi = augment_batch(task.images[task.train_idx],
                                      np.arange(len(task.train_idx)),
                                      augment_config(p, task.flip_lr), fseed, 0)
            fisher = fisher_diagonal(model, images_fi, p.fisher_samples, seed=fseed)
            anchor = {name: prm.data.copy() for name, prm in model.parameters()}
            fishers.append(FisherState(fisher=fisher, anchor=anchor, lam=lam))
        if condition == "pseudo_rec":
            if gen is None:
                gen = build_generator(p).build(seed=derive_seed(seed, "gen-init"))
                disc = build_discriminator(p).build(seed=derive_seed(seed, "disc-init"))
            gan_set = build_gan_training_set(
                gen if t > 0 else None, task.images[task.train_idx],
                p.gan_rehearsal_size, t, seed=derive_seed(seed, "gan-set", t))

            def grid_hook(epoch, fakes):
                emit_image_grid(fakes, run_dir / "grids" / f"task{t}_epoch{epoch:02d}.png")

            for h in train_gan(gen, disc, gan_set, p, seed=derive_seed(seed, "gan", t),
                               sample_hook=grid_hook, grid_every=cfg.grid_every):
                log.append(f"task={t} gan_epoch={h['epoch']} d_loss={h['d_loss']:.6f} "
                           f"g_loss={h['g_loss']:.6f} d_acc={h['d_acc']:.6f}")

        # checkpoints for whatever must outlive this stage
        save_checkpoint(ModelCheckpoint(
            metadata={"profile": p.name, "condition": condition, "seed": str(seed),
                      "task": str(t), "kind": "classifier"},
            tensors=model.state_arrays()), run_dir / "checkpoints" / "classifier.prcl")
        if gen is not None:
            save_checkpoint(ModelCheckpoint(
                metadata={"profile": p.name, "kind": "generator", "task": str(t)},
                tensors=gen.state_arrays()), run_dir / "checkpoints" / "generator.prcl")
            save_checkpoint(ModelCheckpoint(
                metadata={"profile": p.name, "kind": "discriminator", "task": str(t)},
                tensors=disc.state_arrays()), run_dir / "checkpoints" / "discriminator.prcl")

        # evaluate every task seen so far
        head = "shared" if shared_head else "joint"
        for e in range(t + 1):
            ds = tasks[e]
            acc = evaluate_accuracy(
                model, ds.images[ds.test_idx], ds.labels[ds.test_idx],
                task_index=0 if shared_head else e,
                classes_per_task=p.classes_per_task, crop_to=p.crop_hw, head=head)
            # keep the quantization the CSV applies, so rows == parsed file
            rows.append({"condition": condition, "seed": seed, "train_task": t,
                         "eval_task": e, "head": head,
                         "accuracy": float(f"{acc:.6f}"),
                         "epochs_run": fit.epochs_run,
                         "best_valid_loss": float(f"{fit.best_valid_loss:.6f}")})
            log.append(f"task={t} eval_task={e} accuracy={acc:.6f}")

        nbytes = _persisted_bytes(condition, run_dir, fishers, tasks[: t + 1],
                                  rote_stored,
                                  p.image_channels * p.source_hw * p.source_hw * 4)
        persisted.append(nbytes)
        log.append(f"task={t} persisted_state_bytes={nbytes}")

    emit_metrics_csv(rows, run_dir / "metrics.csv")
    (run_dir / "log.txt").write_text("\n".join(log) + "\n")
    return SeedRunResult(rows=rows, persisted_bytes=persisted, run_dir=run_dir)


def run_condition(profile: Profile, condition: str, seeds: Sequence[int], out_dir,
                  skip_existing: bool = False, grid_every: int = 5) -> List[SeedRunResult]:
    results = []
    for seed in seeds:
        run_dir = Path(out_dir) / condition / str(seed)
        if skip_existing and (run_dir / "metrics.csv").exists():
            rows = read_metrics_csv(run_dir / "metrics.csv")
            persisted = [int(line.rsplit("=", 1)[1])
                         for line in (run_dir / "log.txt").read_text().splitlines()
                         if "persisted_state_bytes=" in line]
            results.append(SeedRunResult(rows=rows, persisted_bytes=persisted,
                                         run_dir=run_dir))
            continue
        results.append(run_seed(ExperimentConfig(
            profile=profile, condition=condition, seed=seed, out_dir=Path(out_dir),
            grid_every=grid_every)))
    return results


# ---------------------------------------------------------------------------
# Reports


@dataclass
class ConditionReport:
    condition: str
    seeds: List[int]
    final_avg_mean: float       # accuracy over all tasks after the last stage
    final_avg_std: float        # population std (ddof=0) across seeds
    first_task_final_mean: float  # retention of the first task at the end
    first_task_final_std: float
    per_task_final_means: List[float]

    @staticmethod
    def from_rows(condition: str, rows: Sequence[dict]) -> "ConditionReport":
        rows = [r for r in rows if r["condition"] == condition]
        if not rows:
            raise ValueError(f"no rows for condition {condition!r}")
        last = max(r["train_task"] for r in rows)
        seeds = sorted({r["seed"] for r in rows})
        finals = [r for r in rows if r["train_task"] == last]
        avg_per_seed = [float(np.mean([r["accuracy"] for r in finals if r["seed"] == s]))
                        for s in seeds]
        first_per_seed = [next(r["accuracy"] for r in finals
                               if r["seed"] == s and r["eval_task"] == 0)
                          for s in seeds]
        n_tasks = last + 1
        per_task = [float(np.mean([r["accuracy"] for r in finals if r["eval_task"] == e]))
                    for e in range(n_tasks)]
        return ConditionReport(
            condition=condition, seeds=seeds,
            final_avg_mean=float(np.mean(avg_per_seed)),
            final_avg_std=float(np.std(avg_per_seed)),
            first_task_final_mean=float(np.mean(first_per_seed)),
            first_task_final_std=float(np.std(first_per_seed)),
            per_task_final_means=per_task,
        )


def collect_rows(out_dir, condition: str) -> List[dict]:
    rows = []
    for path in sorted(Path(out_dir, condition).glob("*/metrics.csv")):
        rows.extend(read_metrics_csv(path))
    return rows


def write_summary_csv(out_dir, conditions: Sequence[str] = CONDITIONS) -> List[ConditionReport]:
    reports = []
    for condition in conditions:
        rows = collect_rows(out_dir, condition)
        if rows:
            reports.append(ConditionReport.from_rows(condition, rows))
    try:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["condition", "seeds", "final_avg_mean", "final_avg_std",
                         "first_task_final_mean", "first_task_final_std"])
        for r in reports:
            writer.writerow([r.condition, len(r.seeds), f"{r.final_avg_mean:.6f}",
                             f"{r.final_avg_std:.6f}", f"{r.first_task_final_mean:.6f}",
                             f"{r.first_task_final_std:.6f}"])
        Path(out_dir, "summary.csv").write_text(buf.getvalue())
    except OSError as e:
        raise IoError(f"cannot write summary: {e}") from e
    return reports


def recursion_coverage(run_dir, profile: Profile, n_samples: int = 2048,
                       seed: int = 0) -> float:
    """Fraction of generator samples the final model assigns to units of any
    task before the last one — how much old material the generator still
    produces after rehearsing only its own output."""
    from .checkpoint import load_checkpoint

    run_dir = Path(run_dir)
    gen = build_generator(profile).build(seed=0)
    gen.load_state_arrays(load_checkpoint(run_dir / "checkpoints" / "generator.prcl").tensors)
    clf = FrozenClassifier.from_checkpoint(run_dir / "checkpoints" / "classifier.prcl",
                                           build_classifier(profile))
    raw = generate_pseudo_images(gen, n_samples, seed=derive_seed(seed, "coverage"))
    _, hard = label_pseudo_images(clf, raw, profile.crop_hw)
    old_units = (profile.num_tasks - 1) * profile.classes_per_task
    return float((hard < old_units).mean())
