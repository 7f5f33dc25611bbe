"""Deterministic training loop and streaming evaluation.

Plain stochastic gradient with momentum, optional step decay, fixed data
order per seed.  A NaN loss aborts immediately with the step index and the
per-component breakdown.  Log lines never carry timestamps so two runs of
the same config are byte-identical.
"""

from __future__ import annotations

import os

import numpy as np

from atmseg import tensor as T
from atmseg.checkpoint import save_checkpoint
from atmseg.config import RunConfig
from atmseg.data import (
    DatasetSpec, generate_dataset, image_to_input, load_split,
)
from atmseg.losses import IGNORE_LABEL, ConfusionAccumulator, \
    accumulate_confusion, grouped_miou
from atmseg.model import SegModel, build_model
from atmseg.tensor import ContractViolation, Rng, Tape, Tensor, backward


class TrainingDiverged(RuntimeError):
    pass


class SgdMomentum:
    """v <- mu v - lr g;  w <- w + v.  Rejects frozen tensors up front."""

    def __init__(self, params, lr: float, momentum: float = 0.9):
        self.params = list(params)
        for name, p in self.params:
            if not p.requires_grad:
                raise ContractViolation(
                    f"optimizer given frozen tensor {name!r}"
                )
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for _, p in self.params]

    def step(self, tape: Tape):
        for (name, p), v in zip(self.params, self.velocity):
            g = tape.grad(p)
            if g is None:
                continue
            v *= self.momentum
            v -= self.lr * g.data
            p.data += v


def random_flip(image: np.ndarray, labels: np.ndarray, rng: Rng):
    if rng.integers(0, 2):
        return image[:, ::-1].copy(), labels[:, ::-1].copy()
    return image, labels


def random_scale_crop(image: np.ndarray, labels: np.ndarray, rng: Rng):
    """Resize by a random factor then crop/pad back to the original box.

    Bilinear for the image, nearest for labels; padding uses the ignore
    label so the loss never sees fabricated pixels.
    """
    H, W = labels.shape
    factor = float(rng.uniform(0.5, 2.0))
    nh, nw = max(int(H * factor), 8), max(int(W * factor), 8)
    up = T.bilinear_upsample2d(
        Tensor(np.moveaxis(image, -1, 0).astype(np.float64)), (nh, nw)
    ).data
    scaled = np.moveaxis(up, 0, -1)
    rows = np.clip(((np.arange(nh) + 0.5) * H / nh - 0.5).round(), 0, H - 1)
    cols = np.clip(((np.arange(nw) + 0.5) * W / nw - 0.5).round(), 0, W - 1)
    slab = labels[rows.astype(int)][:, cols.astype(int)]

    out_img = np.zeros((H, W, 3), dtype=scaled.dtype)
    out_lab = np.full((H, W), IGNORE_LABEL, dtype=labels.dtype)
    if nh >= H:
        r0 = int(rng.integers(0, nh - H + 1))
        c0 = int(rng.integers(0, nw - W + 1))
        out_img = scaled[r0:r0 + H, c0:c0 + W]
        out_lab = slab[r0:r0 + H, c0:c0 + W]
    else:
        r0 = int(rng.integers(0, H - nh + 1))
        c0 = int(rng.integers(0, W - nw + 1))
        out_img[r0:r0 + nh, c0:c0 + nw] = scaled
        out_lab[r0:r0 + nh, c0:c0 + nw] = slab
    return out_img, out_lab


def evaluate(model: SegModel, samples, groups=None):
    """Streamed mIoU over (image, labels) pairs; optional class grouping."""
    acc = ConfusionAccumulator(model.cfg.n_classes)
    for image, labels in samples:
        pred = model.predict(image_to_input(image))
        accumulate_confusion(pred, labels, acc)
    report = {"miou": acc.miou(), "iou": acc.iou(), "acc": acc}
    if groups is not None:
        per_group, overall = grouped_miou(acc, groups)
        report["groups"] = per_group
        report["overall"] = overall
    return report


def ensure_dataset(cfg: RunConfig, out_dir: str) -> str:
    """Generate the configured dataset when no data.dir is given."""
    root = cfg["data.dir"]
    if root:
        return root
    size = cfg["data.image_size"]
    spec = DatasetSpec(
        seed=cfg["data.seed"], image_hw=(size, size),
        n_classes=cfg["data.classes"],
        shapes_min=cfg["data.shapes_min"], shapes_max=cfg["data.shapes_max"],
        size_min=cfg["data.size_min"], size_max=cfg["data.size_max"],
        noise_std=cfg["data.noise_std"],
        train_count=cfg["data.train_count"], val_count=cfg["data.val_count"],
    )
    root = os.path.join(out_dir, "dataset")
    generate_dataset(spec, root)
    return root


def train_loop(model: SegModel, cfg: RunConfig, train_samples, val_samples,
               log=None, trainable=None, steps=None, max_steps_hint=None):
    """Run SGD steps over the training set; returns the log line list.

    ``trainable`` narrows the parameter set (continual learning); ``steps``
    overrides optim.steps.  When optim.stop_at_miou is positive, training
    stops at the first evaluation that reaches the bar.
    """
    lines = [] if log is None else log
    n_steps = cfg["optim.steps"] if steps is None else steps
    batch = cfg["optim.batch"]
    eval_every = cfg["optim.eval_every"]
    stop_bar = cfg["optim.stop_at_miou"]
    params = trainable if trainable is not None else \
        sorted(model.named_parameters().items())
    opt = SgdMomentum(params, cfg["optim.lr"], cfg["optim.momentum"])
    decay_every = cfg["optim.lr_decay_every"]

    order_rng = Rng(cfg["seed"]).split(0xDA7A)
    aug_rng = Rng(cfg["seed"]).split(0xA06)
    flip = cfg["augment.flip"]
    scale_crop = cfg["augment.scale_crop"]

    inputs = [(image_to_input(img), lab) for img, lab in train_samples]
    order = []

    for step in range(1, n_steps + 1):
        if decay_every and step > 1 and (step - 1) % decay_every == 0:
            opt.lr *= cfg["optim.lr_decay_factor"]
        while len(order) < batch:
            order.extend(order_rng.permutation(len(inputs)).tolist())
        take, order = order[:batch], order[batch:]

        with Tape() as tape:
            total = None
            comps_acc = {}
            for idx in take:
                image, labels = inputs[idx]
                if flip or scale_crop:
                    if flip:
                        image, labels = random_flip(image, labels, aug_rng)
                    if scale_crop:
                        image, labels = random_scale_crop(image, labels, aug_rng)
                loss, comps = model.loss(image, labels)
                total = loss if total is None else total + loss
                for k, v in comps.items():
                    comps_acc[k] = comps_acc.get(k, 0.0) + v.item()
            total = total * (1.0 / batch)
        value = total.item()
        if not np.isfinite(value):
            breakdown = ", ".join(
                f"{k}={v / batch:.6g}" for k, v in sorted(comps_acc.items())
            )
            raise TrainingDiverged(
                f"non-finite loss at step {step}: {breakdown}"
            )
        backward(total, tape)
        opt.step(tape)

        parts = " ".join(
            f"{k}={v / batch:.6f}" for k, v in sorted(comps_acc.items())
        )
        lines.append(f"step={step} loss={value:.9f} lr={opt.lr:.6g} {parts}")

        if eval_every and (step % eval_every == 0 or step == n_steps):
            report = evaluate(model, val_samples)
            lines.append(f"eval step={step} miou={report['miou']:.6f}")
            if stop_bar > 0 and report["miou"] >= stop_bar:
                lines.append(f"stop step={step} reached miou bar {stop_bar}")
                break
    return lines


def cl_run(cfg: RunConfig, out_dir: str):
    """Multi-task freeze-and-grow schedule with forgetting accounting.

    Generates one dataset per task (each image draws only that task's
    foreground classes), trains heads sequentially, and verifies that
    frozen parameters and head-1 raw outputs never move.  Returns a report
    dict; files land under ``out_dir``.
    """
    from atmseg.continual import (
        CLModel, TaskSpec, cl_merge_predict, format_forgetting,
        forgetting_report, global_to_task_labels, parameter_checksums,
    )

    os.makedirs(out_dir, exist_ok=True)
    tasks = cfg["cl.tasks"]
    n_classes = cfg["data.classes"]
    covered = [c for part in tasks for c in part]
    if sorted(covered) != sorted(set(covered)) or max(covered) >= n_classes:
        raise ContractViolation(
            f"task split {tasks} incompatible with {n_classes} classes"
        )
    size = cfg["data.image_size"]

    def task_dataset(index, class_ids):
        fg = tuple(c for c in class_ids if c != 0)
        spec = DatasetSpec(
            seed=cfg["data.seed"] + 1000 * index, image_hw=(size, size),
            n_classes=n_classes, class_subset=fg,
            shapes_min=cfg["data.shapes_min"], shapes_max=cfg["data.shapes_max"],
            size_min=cfg["data.size_min"], size_max=cfg["data.size_max"],
            noise_std=cfg["data.noise_std"],
            train_count=cfg["data.train_count"], val_count=cfg["data.val_count"],
        )
        root = os.path.join(out_dir, f"task{index}")
        generate_dataset(spec, root)
        return (load_split(root, "train", n_classes),
                load_split(root, "val", n_classes))

    model = CLModel(cfg.encoder_config(), cfg["seed"], cfg.loss_weights())
    lines = []
    history = {}
    val_sets = []
    pinned = None
    pinned_raw = None
    frozen_sums = None

    def merged_eval(task_index):
        """Grouped mIoU of a task's classes on its own validation set."""
        acc = ConfusionAccumulator(n_classes)
        for image, labels in val_sets[task_index - 1]:
            outputs = model.cl_forward(image_to_input(image))
            accumulate_confusion(cl_merge_predict(outputs), labels, acc)
        groups = [set(part) for part in tasks]
        per_group, overall = grouped_miou(acc, groups)
        return per_group[task_index - 1], overall

    for t, class_ids in enumerate(tasks, start=1):
        train_samples, val_samples = task_dataset(t, class_ids)
        val_sets.append(val_samples)
        spec = TaskSpec(t, class_ids)
        model.grow_task_head(spec)
        if t >= 2:
            frozen_sums = parameter_checksums(model.frozen_parameters())

        trainable = model.trainable_parameters(t)
        opt = SgdMomentum(trainable, cfg["optim.lr"], cfg["optim.momentum"])
        order_rng = Rng(cfg["seed"]).split(0xC100 + t)
        inputs = [
            (image_to_input(img), global_to_task_labels(lab, spec))
            for img, lab in train_samples
        ]
        batch = cfg["optim.batch"]
        order = []
        for step in range(1, cfg["cl.steps_per_task"] + 1):
            while len(order) < batch:
                order.extend(order_rng.permutation(len(inputs)).tolist())
            take, order = order[:batch], order[batch:]
            with Tape() as tape:
                total = None
                for idx in take:
                    image, labels = inputs[idx]
                    loss, _ = model.loss_for_task(image, labels, t)
                    total = loss if total is None else total + loss
                total = total * (1.0 / batch)
            value = total.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"task {t}: non-finite loss at step {step}")
            backward(total, tape)
            opt.step(tape)
            if step % max(cfg["optim.eval_every"], 1) == 0:
                lines.append(f"task={t} step={step} loss={value:.9f}")

        if t >= 2 and frozen_sums is not None:
            after = parameter_checksums(model.frozen_parameters())
            drift = [k for k, v in frozen_sums.items() if after.get(k) != v]
            if drift:
                raise ContractViolation(
                    f"frozen parameters changed during task {t}: {drift[:5]}"
                )
            lines.append(f"task={t} frozen_checksums=unchanged")

        if t == 1:
            pinned = [image_to_input(img) for img, _ in val_samples[:4]]
            pinned_raw = [model.cl_forward(x, t=1)[0] for x in pinned]
            save_checkpoint(
                model, os.path.join(out_dir, "after_task1.ckpt"),
                config_text=cfg.text(),
            )

        for seen in range(1, t + 1):
            miou_g, overall = merged_eval(seen)
            history.setdefault(seen, []).append((f"after_task{t}", miou_g))
            lines.append(
                f"eval after_task={t} task={seen} group_miou={miou_g:.6f} "
                f"overall={overall:.6f}"
            )

    # raw outputs of head 1 must be bit-identical after later training
    drift_raw = 0
    for x, ref in zip(pinned, pinned_raw):
        now = model.cl_forward(x, t=1)[0]
        if not (np.array_equal(now["masks"], ref["masks"])
                and np.array_equal(now["presence"], ref["presence"])):
            drift_raw += 1
    lines.append(f"raw_output_drift_samples={drift_raw}")

    report = forgetting_report(history)
    table = format_forgetting(report)
    lines.append(table.rstrip("\n"))
    with open(os.path.join(out_dir, "cl_run.log"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(out_dir, "forgetting.tsv"), "w", encoding="utf-8") as fh:
        fh.write(table)
    save_checkpoint(model, os.path.join(out_dir, "final.ckpt"),
                    config_text=cfg.text())
    return {
        "history": history, "forgetting": report,
        "raw_output_drift_samples": drift_raw, "lines": lines,
        "model": model,
    }


def run_training(cfg: RunConfig, out_dir: str):
    """End-to-end: dataset, model, loop, checkpoint, log file."""
    os.makedirs(out_dir, exist_ok=True)
    root = ensure_dataset(cfg, out_dir)
    n = cfg["data.classes"]
    train_samples = load_split(root, "train", n)
    val_samples = load_split(root, "val", n)
    model = build_model(cfg.model_config(), cfg["seed"], cfg.loss_weights())
    lines = train_loop(model, cfg, train_samples, val_samples)
    report = evaluate(model, val_samples)
    lines.append(f"final miou={report['miou']:.6f}")

    ckpt = os.path.join(out_dir, "model.ckpt")
    save_checkpoint(model, ckpt, config_text=cfg.text())
    with open(os.path.join(out_dir, "train.log"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return model, report, lines
