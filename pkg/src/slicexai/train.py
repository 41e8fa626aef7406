"""Training harness: subject-level folds, flips, early stopping, freezing and
double transfer (diagnosis model fine-tuned on a disjoint prognosis task)."""
from __future__ import annotations

import copy
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .errors import (
    ArchitectureMismatch,
    ConfigError,
    DivergedLoss,
    EmptyPartition,
    SubjectLeakage,
    TooFewSubjects,
)
from .evaluation import MetricsReport, metrics_from_predictions, predict
from .model import SliceAttentionNet, build_model, load_checkpoint, save_checkpoint
from .volume import Plane, SliceSequence, Volume3D, extract_slices, prepare_sequence

log = logging.getLogger(__name__)

EVAL_AGGREGATION = {"attention": "attention-fusion", "mean": "mean-fusion",
                    "slice": "majority-vote"}


@dataclass
class TrainConfig:
    task: str = "diagnosis"
    plane: str = "axial"
    n_slices: int = 16
    batch_size: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    freeze_fraction: float = 0.0
    patience: int = 15
    flip_prob: float = 0.3
    seed: int = 0
    transfer_source: Optional[str] = None
    max_epochs: int = 200
    slice_size: int = 32
    widths: Tuple[int, ...] = (8, 16, 32)
    fusion: str = "attention"
    freeze_attention: bool = False
    reinit_head: bool = False

    def __post_init__(self):
        try:
            for name in ("learning_rate", "weight_decay", "freeze_fraction", "flip_prob"):
                setattr(self, name, float(getattr(self, name)))
            for name in ("n_slices", "batch_size", "patience", "seed", "max_epochs", "slice_size"):
                setattr(self, name, int(getattr(self, name)))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"non-numeric training setting: {exc}") from exc
        self.widths = tuple(int(w) for w in self.widths)
        self.plane = Plane.coerce(self.plane).value

    def validate(self) -> "TrainConfig":
        if self.task not in ("diagnosis", "prognosis"):
            raise ConfigError(f"task must be 'diagnosis' or 'prognosis', got {self.task!r}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if not 0.0 <= self.freeze_fraction <= 1.0:
            raise ConfigError(f"freeze_fraction must be in [0, 1], got {self.freeze_fraction}")
        if self.n_slices < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("n_slices, batch_size and max_epochs must be positive")
        if self.fusion not in EVAL_AGGREGATION:
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        try:
            return cls(**d).validate()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    def model_hparams(self) -> dict:
        return {"widths": list(self.widths), "n_slices": self.n_slices,
                "slice_size": self.slice_size, "plane": self.plane, "fusion": self.fusion}


# -- data ---------------------------------------------------------------------------

@dataclass
class PreparedData:
    """Prepared slice stacks for a set of scans of one plane.

    ``x`` has shape ``(S, N, H, W)``; ``starts`` holds the first volume index of
    each scan's slice range.
    """

    x: np.ndarray
    y: np.ndarray
    subjects: np.ndarray
    scan_ids: np.ndarray
    plane: Plane
    starts: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def indices_for(self, subject_ids) -> np.ndarray:
        return np.flatnonzero(np.isin(self.subjects, sorted(subject_ids)))

    def subset(self, idx) -> "PreparedData":
        idx = np.asarray(idx, dtype=int)
        return PreparedData(self.x[idx], self.y[idx], self.subjects[idx], self.scan_ids[idx],
                            self.plane, self.starts[idx])

    @property
    def subject_set(self) -> set:
        return set(self.subjects.tolist())


def prepare_samples(samples: Sequence[Tuple[Volume3D, int]], plane, n_slices: int,
                    slice_size: int) -> PreparedData:
    plane = Plane.coerce(plane)
    xs, starts = [], []
    for vol, _ in samples:
        seq = extract_slices(vol, plane, n_slices)
        xs.append(prepare_sequence(seq, slice_size).astype(np.float32))
        starts.append(seq.start_index)
    return PreparedData(
        x=np.stack(xs),
        y=np.array([int(lbl) for _, lbl in samples]),
        subjects=np.array([v.subject_id for v, _ in samples]),
        scan_ids=np.array([v.scan_id for v, _ in samples]),
        plane=plane,
        starts=np.array(starts),
    )


# -- folds ----------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldSplit:
    fold_id: int
    train_subjects: frozenset
    val_subjects: frozenset
    test_subjects: frozenset

    def check_disjoint(self) -> None:
        pairs = (("train", self.train_subjects, "val", self.val_subjects),
                 ("train", self.train_subjects, "test", self.test_subjects),
                 ("val", self.val_subjects, "test", self.test_subjects))
        for name_a, a, name_b, b in pairs:
            shared = set(a) & set(b)
            if shared:
                raise SubjectLeakage(
                    f"fold {self.fold_id}: subjects in both {name_a} and {name_b}: {sorted(shared)[:5]}"
                )


def make_folds(subject_labels: Dict[str, int], k: int = 5, seed: int = 0,
               val_fraction: float = 0.2) -> List[FoldSplit]:
    """Stratified subject-level k-fold split with an inner train/validation split.

    Each subject is tested in exactly one fold. Within a fold the remaining
    subjects are split ``1 - val_fraction`` / ``val_fraction`` into train and
    validation, class-interleaved so both classes reach validation when possible.
    """
    if k < 2:
        raise TooFewSubjects(f"k must be at least 2, got {k}")
    n = len(subject_labels)
    if n < k or n - math.ceil(n / k) < 2:
        raise TooFewSubjects(f"{n} subjects cannot fill {k} folds and still leave "
                             "training and validation subjects")
    rng = np.random.default_rng(seed)
    by_class: Dict[int, List[str]] = {}
    for sid in sorted(subject_labels):
        by_class.setdefault(int(subject_labels[sid]), []).append(sid)
    ordered = []
    for label in sorted(by_class):
        members = list(by_class[label])
        rng.shuffle(members)
        ordered.extend(members)
    assignment = {sid: i % k for i, sid in enumerate(ordered)}

    folds = []
    for f in range(k):
        test = {s for s, a in assignment.items() if a == f}
        rest = {}
        for label in sorted(by_class):
            members = [s for s in by_class[label] if s not in test]
            rng.shuffle(members)
            rest[label] = members
        interleaved = [s for group in itertools.zip_longest(*rest.values()) for s in group
                       if s is not None]
        n_rest = len(interleaved)
        n_val = min(max(1, round(val_fraction * n_rest)), n_rest - 1)
        val = set(interleaved[:n_val])
        train = set(interleaved[n_val:])
        split = FoldSplit(f, frozenset(train), frozenset(val), frozenset(test))
        split.check_disjoint()
        folds.append(split)
    return folds


def check_fold_against_data(fold: FoldSplit, subjects: Sequence[str]) -> None:
    """Every scan's subject must sit in exactly one partition of the fold."""
    fold.check_disjoint()
    known = fold.train_subjects | fold.val_subjects | fold.test_subjects
    stray = set(subjects) - known
    if stray:
        raise SubjectLeakage(f"fold {fold.fold_id}: subjects not assigned to any partition: "
                             f"{sorted(stray)[:5]}")


# -- augmentation ------------------------------------------------------------------------

def flip_mask(shape, flip_prob: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= flip_prob <= 1.0:
        raise ValueError(f"flip_prob must be in [0, 1], got {flip_prob}")
    return rng.random(shape) < flip_prob


def augment(seq: Union[SliceSequence, np.ndarray], flip_prob: float,
            rng: np.random.Generator):
    """Mirror each slice left-right independently with probability ``flip_prob``."""
    slices = seq.slices if isinstance(seq, SliceSequence) else np.asarray(seq)
    mask = flip_mask(slices.shape[0], flip_prob, rng)
    out = np.where(mask[:, None, None], slices[..., ::-1], slices)
    if isinstance(seq, SliceSequence):
        return SliceSequence(out, seq.plane, seq.start_index, seq.source)
    return out


# -- early stopping / history -------------------------------------------------------------------

class EarlyStopping:
    """Stop once validation loss has not improved for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def step(self, epoch: int, val_loss: float) -> bool:
        """Record an epoch; returns True if it is the new best."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class TrainingHistory:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_metrics: List[MetricsReport] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def epochs(self) -> int:
        return len(self.train_loss)


@dataclass
class Checkpoint:
    model: SliceAttentionNet
    provenance: dict

    def save(self, path) -> None:
        save_checkpoint(self.model, path, self.provenance)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        model, payload = load_checkpoint(path)
        return cls(model, payload["provenance"])


class MetricsLog:
    """Line-oriented ``key=value`` training log."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.lines: List[str] = []

    def write(self, epoch: int, split: str, loss: float, metrics: Optional[MetricsReport]):
        line = f"epoch={epoch}\tsplit={split}\tloss={loss:.6f}"
        if metrics is not None:
            line += f"\tacc={metrics.acc:.4f}\tmcc={metrics.mcc:.4f}"
        self.lines.append(line)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")


def _loss(model: SliceAttentionNet, xb: torch.Tensor, yb: torch.Tensor):
    if model.fusion == "slice":
        logits = model.slice_logits(xb)
        n = logits.shape[1]
        return F.cross_entropy(logits.reshape(-1, 2), yb.repeat_interleave(n)), \
            logits.mean(dim=1)
    logits, _ = model(xb)
    return F.cross_entropy(logits, yb), logits


@torch.no_grad()
def evaluate_loss(model: SliceAttentionNet, data: PreparedData, batch_size: int = 32) -> float:
    model.eval()
    total = 0.0
    for start in range(0, len(data), batch_size):
        xb = torch.as_tensor(data.x[start:start + batch_size])
        yb = torch.as_tensor(data.y[start:start + batch_size])
        loss, _ = _loss(model, xb, yb)
        total += float(loss.detach()) * len(yb)
    return total / len(data)


def evaluate_metrics(model: SliceAttentionNet, data: PreparedData) -> MetricsReport:
    labels, _, _ = predict(model, data.x, EVAL_AGGREGATION[model.fusion])
    return metrics_from_predictions(data.y, labels)


def _apply_freezing(model: SliceAttentionNet, config: TrainConfig) -> None:
    model.backbone.freeze(config.freeze_fraction)
    for p in model.attention.parameters():
        p.requires_grad_(not config.freeze_attention)


def train_model(config: TrainConfig, fold: FoldSplit, data: PreparedData,
                log_path=None, init_state: Optional[dict] = None,
                provenance: Optional[dict] = None) -> Tuple[Checkpoint, TrainingHistory]:
    """Train one model on ``fold``'s train subjects, early-stopping on its
    validation subjects; returns the best-validation-loss snapshot."""
    config.validate()
    check_fold_against_data(fold, data.subjects)
    if data.plane != Plane.coerce(config.plane):
        raise ConfigError(f"data prepared for {data.plane.value}, config wants {config.plane}")
    train = data.subset(data.indices_for(fold.train_subjects))
    val = data.subset(data.indices_for(fold.val_subjects))
    if len(train) == 0 or len(val) == 0:
        raise EmptyPartition(f"fold {fold.fold_id}: train has {len(train)} scans, "
                             f"validation has {len(val)}")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = build_model(config.model_hparams())
    if init_state is not None:
        model.load_state_dict(init_state)
    if config.reinit_head:
        model.head.fc.reset_parameters()
    _apply_freezing(model, config)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(params, lr=config.learning_rate,
                                  weight_decay=config.weight_decay)

    metrics_log = MetricsLog(log_path)
    history = TrainingHistory()
    stopper = EarlyStopping(config.patience)
    best_state = copy.deepcopy(model.state_dict())
    for epoch in range(1, config.max_epochs + 1):
        model.train()
        order = rng.permutation(len(train))
        total, preds = 0.0, np.empty(len(train), dtype=int)
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = train.x[idx]
            mask = flip_mask(xb.shape[:2], config.flip_prob, rng)
            if mask.any():
                xb = np.where(mask[:, :, None, None], xb[..., ::-1], xb)
            xb = torch.as_tensor(np.ascontiguousarray(xb))
            yb = torch.as_tensor(train.y[idx])
            loss, logits = _loss(model, xb, yb)
            if not torch.isfinite(loss):
                raise DivergedLoss(f"non-finite training loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(idx)
            preds[start:start + len(idx)] = logits.argmax(dim=1).numpy()
        train_loss = total / len(train)
        train_metrics = metrics_from_predictions(train.y[order], preds)

        val_loss = evaluate_loss(model, val)
        if not math.isfinite(val_loss):
            raise DivergedLoss(f"non-finite validation loss at epoch {epoch}")
        val_metrics = evaluate_metrics(model, val)
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.val_metrics.append(val_metrics)
        metrics_log.write(epoch, "train", train_loss, train_metrics)
        metrics_log.write(epoch, "val", val_loss, val_metrics)
        if stopper.step(epoch, val_loss):
            best_state = copy.deepcopy(model.state_dict())
        if stopper.should_stop:
            break
    history.best_epoch = stopper.best_epoch
    model.load_state_dict(best_state)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(True)

    prov = {
        "seed": config.seed,
        "fold_id": fold.fold_id,
        "task": config.task,
        "transfer_source": config.transfer_source,
        "freeze_fraction": config.freeze_fraction,
        "subjects": sorted(fold.train_subjects | fold.val_subjects | fold.test_subjects),
        "test_subjects": sorted(fold.test_subjects),
        "best_epoch": history.best_epoch,
        "config": config.to_dict(),
    }
    prov.update(provenance or {})
    log.info("fold %d: best epoch %d of %d, val loss %.4f", fold.fold_id,
             history.best_epoch, history.epochs, stopper.best)
    return Checkpoint(model, prov), history


_ARCH_KEYS = ("widths", "kernel_size", "n_slices", "slice_size", "plane")


def check_architecture(source_hparams: dict, config: TrainConfig) -> None:
    target = build_model(config.model_hparams()).hparams()
    diff = {k: (source_hparams.get(k), target[k]) for k in _ARCH_KEYS
            if source_hparams.get(k) != target[k]}
    if diff:
        raise ArchitectureMismatch(f"source checkpoint and target config disagree on {diff}")


def check_task_disjoint(source_subjects, target_subjects) -> None:
    """Raise SubjectLeakage if any subject belongs to both tasks."""
    shared = set(source_subjects) & set(target_subjects)
    if shared:
        raise SubjectLeakage(f"{len(shared)} subjects appear in both the source and target "
                             f"tasks, e.g. {sorted(shared)[:5]}")


def double_transfer(source: Union[Checkpoint, str, Path], config: TrainConfig,
                    fold: FoldSplit, data: PreparedData, log_path=None,
                    source_subjects: Optional[Sequence[str]] = None
                    ) -> Tuple[Checkpoint, TrainingHistory]:
    """Fine-tune a diagnosis checkpoint on a prognosis task.

    Refuses to run when any subject appears in both tasks. The source subject
    set comes from ``source_subjects`` or, failing that, the checkpoint's
    provenance.
    """
    if not isinstance(source, Checkpoint):
        source_path = str(source)
        source = Checkpoint.load(source)
        config.transfer_source = config.transfer_source or source_path
    check_task_disjoint(source_subjects if source_subjects is not None
                        else source.provenance.get("subjects", []), data.subject_set)
    check_architecture(source.model.hparams(), config)
    state = {k: v.clone() for k, v in source.model.state_dict().items()}
    return train_model(config, fold, data, log_path=log_path, init_state=state,
                       provenance={"transfer_from_task": source.provenance.get("task")})
