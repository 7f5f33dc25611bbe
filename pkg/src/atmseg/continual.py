"""Freeze-and-grow continual segmentation.

Every task owns a private head (class tokens, one attention-to-mask stage,
presence classifier) over a shared encoder.  Task 1 trains the encoder
jointly; afterwards the encoder and all earlier heads freeze, so their raw
outputs are bit-identical forever: forgetting can enter only through
argmax competition when task outputs are merged.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from atmseg import tensor as T
from atmseg.decoder import (
    AtmStage, ClassTokens, assemble_segmentation, classify_tokens,
    new_class_tokens,
)
from atmseg.encoder import EncoderConfig, ViTEncoder, _prefix
from atmseg.losses import LossWeights, total_loss
from atmseg.tensor import ContractViolation, Rng, Tensor


@dataclass
class TaskSpec:
    task_id: int
    class_ids: tuple

    def __post_init__(self):
        ids = tuple(int(c) for c in self.class_ids)
        if not ids:
            raise ContractViolation("a task needs at least one class")
        if len(set(ids)) != len(ids):
            raise ContractViolation(f"duplicate class ids in task {self.task_id}")
        self.class_ids = ids


class TaskHead:
    def __init__(self, spec: TaskSpec, cfg: EncoderConfig, rng: Rng):
        self.spec = spec
        self.class_tokens = new_class_tokens(rng, len(spec.class_ids), cfg.width)
        self.stage = AtmStage(rng, cfg.width, cfg.heads, cfg.mlp_ratio)
        self.classifier = Tensor(
            rng.truncated_normal((cfg.width, 2), 0.02), requires_grad=True
        )
        self.frozen = False

    def forward(self, final_tap, target_hw):
        out = self.stage(self.class_tokens.tokens, final_tap)
        probs = classify_tokens(out.tokens, self.classifier)
        seg = assemble_segmentation(out.mask, final_tap.grid, probs, target_hw)
        return seg, out, probs

    def params(self):
        out = [("class_tokens", self.class_tokens.tokens)]
        out += _prefix("stage", self.stage)
        out.append(("classifier", self.classifier))
        return out

    def freeze(self):
        self.frozen = True
        for _, p in self.params():
            p.requires_grad = False


class CLModel:
    def __init__(self, cfg: EncoderConfig, seed: int,
                 loss_weights: LossWeights | None = None):
        self.cfg = cfg
        self.seed = seed
        self.weights = loss_weights or LossWeights()
        self.encoder = ViTEncoder(cfg, Rng(seed).split(1))
        self.encoder_frozen = False
        self.heads: list[TaskHead] = []

    # -- growth and freezing ------------------------------------------------

    def grow_task_head(self, spec: TaskSpec) -> "CLModel":
        claimed = set()
        for head in self.heads:
            claimed |= set(head.spec.class_ids)
        overlap = claimed & set(spec.class_ids)
        if overlap:
            raise ContractViolation(
                f"task {spec.task_id} reuses class ids {sorted(overlap)}"
            )
        rng = Rng(self.seed).split(100 + len(self.heads))
        self.heads.append(TaskHead(spec, self.cfg, rng))
        if len(self.heads) >= 2:
            self.freeze_prior_tasks(len(self.heads))
        return self

    def freeze_prior_tasks(self, t: int) -> "CLModel":
        """Freeze the encoder and every head before task t (1-based)."""
        if t < 2:
            raise ContractViolation("freezing starts from the second task")
        self.encoder_frozen = True
        for _, p in self.encoder.params():
            p.requires_grad = False
        for head in self.heads[:t - 1]:
            head.freeze()
        return self

    def trainable_parameters(self, t: int):
        """Exactly the tensors task t may update."""
        if not (1 <= t <= len(self.heads)):
            raise ContractViolation(f"no head for task {t}")
        items = _prefix(f"heads.{t - 1}", self.heads[t - 1])
        if t == 1 and not self.encoder_frozen:
            items = _prefix("encoder", self.encoder) + items
        return sorted(items)

    def frozen_parameters(self):
        trainable = {id(p) for _, p in self.trainable_parameters(len(self.heads))}
        out = []
        for name, p in self.named_parameters().items():
            if id(p) not in trainable:
                out.append((name, p))
        return out

    def named_parameters(self):
        items = _prefix("encoder", self.encoder)
        for i, head in enumerate(self.heads):
            items += _prefix(f"heads.{i}", head)
        return dict(items)

    # -- forward / predict ----------------------------------------------

    def encode_final(self, image_input: np.ndarray):
        taps = self.encoder.forward_tapped(Tensor(image_input))
        return taps[-1]

    def cl_forward(self, image_input: np.ndarray, t: int | None = None):
        """Per-task (masks, presence scores, seg scores) up to task t."""
        upto = len(self.heads) if t is None else t
        if not (1 <= upto <= len(self.heads)):
            raise ContractViolation(f"no head for task {upto}")
        final = self.encode_final(image_input)
        hw = tuple(self.cfg.image_hw)
        outputs = []
        for head in self.heads[:upto]:
            seg, _, _ = head.forward(final, hw)
            outputs.append({
                "class_ids": head.spec.class_ids,
                "masks": seg.masks.data,
                "presence": seg.class_probs.data[:, 1].copy(),
                "scores": seg.seg_scores.data,
            })
        return outputs

    def loss_for_task(self, image_input: np.ndarray, task_labels: np.ndarray,
                      t: int):
        """Loss over task t's own class space.

        ``task_labels`` index into the task's class list; pixels of other
        tasks stay unlabeled (they act as mask negatives only).
        """
        head = self.heads[t - 1]
        final = self.encode_final(image_input)
        seg, out, probs = head.forward(final, tuple(self.cfg.image_hw))
        return total_loss([out], [probs], seg, task_labels, self.weights,
                          final.grid)


def cl_merge_predict(outputs) -> np.ndarray:
    """Concatenate per-task scores on the global class axis and argmax."""
    if not outputs:
        raise ContractViolation("cl_merge_predict: no task outputs")
    ids = []
    for o in outputs:
        ids.extend(o["class_ids"])
    if len(set(ids)) != len(ids):
        raise ContractViolation("tasks share class ids")
    n_global = max(ids) + 1
    hw = outputs[0]["scores"].shape[1:]
    stacked = np.full((n_global,) + hw, -np.inf)
    for o in outputs:
        for row, cid in enumerate(o["class_ids"]):
            stacked[cid] = o["scores"][row]
    return np.argmax(stacked, axis=0)


def parameter_checksums(pairs) -> dict:
    """SHA-256 of each tensor's raw bytes, keyed by name."""
    out = {}
    for name, p in pairs:
        out[name] = hashlib.sha256(
            np.ascontiguousarray(p.data).tobytes()
        ).hexdigest()
    return out


def global_to_task_labels(labels: np.ndarray, spec: TaskSpec) -> np.ndarray:
    """Re-index a global label map into a task's local class space.

    Pixels of other tasks become NEGATIVE_LABEL (mask negatives, never
    presence positives); ignore pixels pass through.
    """
    from atmseg.losses import IGNORE_LABEL, NEGATIVE_LABEL

    local = np.full(labels.shape, NEGATIVE_LABEL, dtype=np.int64)
    local[labels == IGNORE_LABEL] = IGNORE_LABEL
    for row, cid in enumerate(spec.class_ids):
        local[labels == cid] = row
    return local


def forgetting_report(history: dict) -> dict:
    """Per-task first-time vs last-time mIoU and the drop between them.

    ``history`` maps task_id -> list of (step_label, miou) in evaluation
    order; the first entry is the task's introduction measurement.
    """
    rows = []
    for task_id in sorted(history):
        entries = history[task_id]
        if not entries:
            raise ValueError(f"task {task_id} has no evaluation history")
        first = entries[0][1]
        last = entries[-1][1]
        rows.append({
            "task": task_id, "first": first, "last": last,
            "drop": first - last,
        })
    avg_drop = float(np.mean([r["drop"] for r in rows])) if rows else 0.0
    return {"rows": rows, "avg_drop": avg_drop}


def format_forgetting(report: dict) -> str:
    lines = ["task\tfirst\tlast\tdrop"]
    for r in report["rows"]:
        lines.append(
            f"{r['task']}\t{r['first']:.4f}\t{r['last']:.4f}\t{r['drop']:+.4f}"
        )
    lines.append(f"avg\t-\t-\t{report['avg_drop']:+.4f}")
    return "\n".join(lines) + "\n"
