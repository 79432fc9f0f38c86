"""
Training and evaluation of TinyModel on associative recall.
"""
import logging
from dataclasses import replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ssmlab.core import autodiff as ad
from ssmlab.core.config import ModelConfig, TrainConfig
from ssmlab.core.data import ARDataset, ARSplit
from ssmlab.core.errors import NonFiniteError, ShapeMismatchError, TrainingDivergedError
from ssmlab.core.model import TinyModel, attach, run_model

logger = logging.getLogger(__name__)

# Rows of the depth/polarization table: (row name, layers)
TABLE_ROWS = (
    ('default', 2),
    ('default', 4),
    ('one', 2),
    ('zero', 2),
    ('zero', 4),
    ('both', 2),
    ('both', 4),
)


def masked_cross_entropy(logits, targets: np.ndarray, mask: np.ndarray,
                         normalizer: Optional[int] = None):
    """
    Mean negative log-likelihood of `targets` over masked positions.

    Accepts a tape Var (returns a scalar Var) or a plain logits array
    (returns a float). `normalizer` overrides the masked count so
    micro-batch losses sum to the batch mean.
    """
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum()) if normalizer is None else int(normalizer)
    if not mask.any() or count <= 0:
        raise ShapeMismatchError('Loss mask selects no position', dimension='mask')
    targets = np.asarray(targets, dtype=np.int64)
    if isinstance(logits, ad.Var):
        if logits.shape[:-1] != mask.shape:
            raise ShapeMismatchError(f'Logits {logits.shape} do not match mask {mask.shape}', dimension='mask')
        picked = ad.pick(ad.log_softmax(logits), targets)
        return ad.reduce_sum(picked * mask.astype(np.float64)) * (-1.0 / count)
    tape = ad.Tape(record=False)
    return float(masked_cross_entropy(tape.constant(np.asarray(logits, dtype=np.float64)),
                                      targets, mask, normalizer).value)


def masked_accuracy(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> float:
    """Argmax accuracy on masked positions; ties go to the lowest token id."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return float('nan')
    predictions = np.argmax(logits, axis=-1)
    return float(np.mean(predictions[mask] == np.asarray(targets)[mask]))


def predict(model: TinyModel, inputs: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Argmax token per position, (M, L)."""
    inputs = np.asarray(inputs)
    out = [np.argmax(run_model(model, inputs[i:i + batch_size]), axis=-1)
           for i in range(0, len(inputs), batch_size)]
    return np.concatenate(out, axis=0)


class Adam:
    """Adam without weight decay; frozen entries are never written."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.step = 0

    def update(self, tensors: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
               frozen: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        cfg = self.cfg
        self.step += 1
        updated = {}
        for name, value in tensors.items():
            g = grads[name]
            m = self.m.get(name, np.zeros_like(value))
            v = self.v.get(name, np.zeros_like(value))
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1.0 - cfg.beta1 ** self.step)
            v_hat = v / (1.0 - cfg.beta2 ** self.step)
            new = value - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
            mask = frozen.get(name)
            if mask is not None and mask.any():
                new = np.where(mask, value, new)
            updated[name] = new
        return updated


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to a global L2 norm of at most max_norm; returns the norm."""
    norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


def batch_gradients(model: TinyModel, inputs: np.ndarray, targets: np.ndarray, mask: np.ndarray,
                    micro_batch: int) -> Tuple[float, float, Dict[str, np.ndarray]]:
    """
    Loss, accuracy and parameter gradients of the batch-mean masked loss,
    accumulated over micro-batches in row order.
    """
    total = int(mask.sum())
    grads = {name: np.zeros_like(value) for name, value in model.tensors().items()}
    loss, correct = 0.0, 0
    for start in range(0, len(inputs), micro_batch):
        rows = slice(start, start + micro_batch)
        if not mask[rows].any():
            continue
        tape = ad.Tape(record=True)
        p = attach(tape, model)
        logits = model.forward_vars(tape, inputs[rows], p)
        part = masked_cross_entropy(logits, targets[rows], mask[rows], normalizer=total)
        named, _ = ad.gradients_by_name(tape, tape.backward(part, 1.0))
        for name in grads:
            grads[name] += named[name]
        loss += float(part.value)
        predictions = np.argmax(logits.value, axis=-1)
        correct += int(np.sum(predictions[mask[rows]] == targets[rows][mask[rows]]))
    return loss, correct / total, grads


def batch_schedule(dataset: ARDataset, batch_size: int, rng: np.random.Generator) -> List[Tuple[int, np.ndarray]]:
    """One epoch of (split index, row indices); each batch stays within one sequence length."""
    batches = []
    for i, split in enumerate(dataset.train):
        order = rng.permutation(split.size)
        batches.extend((i, order[s:s + batch_size]) for s in range(0, split.size, batch_size))
    return [batches[j] for j in rng.permutation(len(batches))]


def evaluate_split(model: TinyModel, split: ARSplit, batch_size: int = 64) -> Dict[str, float]:
    losses, correct = 0.0, 0
    total = int(split.mask.sum())
    for start in range(0, split.size, batch_size):
        rows = slice(start, start + batch_size)
        logits = run_model(model, split.inputs[rows])
        mask = split.mask[rows]
        if mask.any():
            losses += masked_cross_entropy(logits, split.targets[rows], mask, normalizer=total)
            correct += int(np.sum(np.argmax(logits, axis=-1)[mask] == split.targets[rows][mask]))
    return {'loss': losses, 'accuracy': correct / total if total else float('nan')}


def train(model: TinyModel, dataset: ARDataset, cfg: TrainConfig,
          eval_every_epoch: bool = True) -> Tuple[TinyModel, pd.DataFrame]:
    """
    Train with Adam on batch-mean masked cross-entropy.

    Returns:
        the trained model and per-epoch metrics (epoch, split, loss, accuracy)
    """
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(cfg)
    frozen = model.frozen()
    rows: List[Dict[str, Any]] = []
    for epoch in range(1, cfg.epochs + 1):
        epoch_loss, epoch_acc, weight = 0.0, 0.0, 0
        for split_index, batch in batch_schedule(dataset, cfg.batch_size, rng):
            split = dataset.train[split_index]
            inputs, targets, mask = split.inputs[batch], split.targets[batch], split.mask[batch]
            try:
                loss, accuracy, grads = batch_gradients(model, inputs, targets, mask, cfg.micro_batch)
            except NonFiniteError as e:
                raise TrainingDivergedError(f'Epoch {epoch}: {e}', epoch=epoch)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDivergedError(f'Epoch {epoch}: loss became non-finite', epoch=epoch)
            clip_gradients(grads, cfg.grad_clip)
            model = model.with_tensors(optimizer.update(model.tensors(), grads, frozen)).project()
            n = int(mask.sum())
            epoch_loss += loss * n
            epoch_acc += accuracy * n
            weight += n
        rows.append({'epoch': epoch, 'split': 'train', 'loss': epoch_loss / max(weight, 1),
                     'accuracy': epoch_acc / max(weight, 1)})
        logger.info(f'epoch {epoch}: loss {rows[-1]["loss"]:.4f} accuracy {rows[-1]["accuracy"]:.4f}')
        if eval_every_epoch:
            for n_kv, split in dataset.eval.items():
                result = evaluate_split(model, split)
                rows.append({'epoch': epoch, 'split': split.name, **result})
    return model, pd.DataFrame(rows, columns=['epoch', 'split', 'loss', 'accuracy'])


def evaluate_ar(model: TinyModel, eval_sets: Dict[int, ARSplit], batch_size: int = 64) -> Dict[str, Any]:
    """Masked argmax accuracy per kv-count split and their average."""
    accuracy = {n_kv: evaluate_split(model, split, batch_size)['accuracy']
                for n_kv, split in sorted(eval_sets.items())}
    return {'accuracy': accuracy, 'avg': float(np.mean(list(accuracy.values()))) if accuracy else float('nan')}


def accuracy_frame(results: Dict[str, Any], row: str = '', layers: int = 0, seed: int = 0) -> pd.DataFrame:
    """CSV layout: row, layers, seed, kv_pairs, accuracy, avg (one line per kv split)."""
    records = [{'row': row, 'layers': layers, 'seed': seed, 'kv_pairs': n_kv,
                'accuracy': acc, 'avg': results['avg']}
               for n_kv, acc in results['accuracy'].items()]
    return pd.DataFrame(records, columns=['row', 'layers', 'seed', 'kv_pairs', 'accuracy', 'avg'])


def table_models(base: ModelConfig) -> List[ModelConfig]:
    """The seven depth/polarization rows built on one base model config."""
    models = []
    for name, layers in TABLE_ROWS:
        models.append(replace(base, name=f'{name}_{layers}L', n_layers=layers,
                              one_channel=name in ('one', 'both'),
                              zero_channel=name in ('zero', 'both')))
    return models


def run_table_row(model_cfg: ModelConfig, dataset: ARDataset, train_cfg: TrainConfig,
                  seed: int) -> Tuple[TinyModel, pd.DataFrame, pd.DataFrame]:
    """Initialize, train and evaluate one table row for one seed."""
    model_cfg = replace(model_cfg, seed=seed)
    model = TinyModel.init(model_cfg, dataset.vocab_size)
    model, metrics = train(model, dataset, replace(train_cfg, seed=seed), eval_every_epoch=False)
    results = evaluate_ar(model, dataset.eval)
    table = accuracy_frame(results, row=model_cfg.name, layers=model_cfg.n_layers, seed=seed)
    logger.info(f'{model_cfg.name} seed {seed}: avg accuracy {results["avg"]:.4f}')
    return model, metrics, table


def summarize_table(tables: Sequence[pd.DataFrame]) -> pd.DataFrame:
    """Mean accuracy per (row, layers, kv_pairs) across seeds."""
    combined = pd.concat(list(tables), ignore_index=True)
    return (combined.groupby(['row', 'layers', 'kv_pairs'], as_index=False)
            .agg(accuracy=('accuracy', 'mean'), avg=('avg', 'mean'), seeds=('seed', 'nunique')))
