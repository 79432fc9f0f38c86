"""
Associative-recall data: generation, verification, and serialization.

Layout of one example of length L with n key-value pairs:

    [k1 v1 k2 v2 ... kn vn (pad)] [query section: pads, queried keys at even slots]

The model reads a queried key at position q and must predict the value
bound to it; the loss mask is true exactly there.
"""
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

from ssmlab.core.config import ARConfig
from ssmlab.core.errors import ParameterRangeError, ShapeMismatchError
from ssmlab.core.utils import (
    KIND_DATASET, Container, ensure_output_dir, read_container, write_container
)

logger = logging.getLogger(__name__)

PAD = 0


def key_range(vocab_size: int) -> Tuple[int, int]:
    """Inclusive-exclusive range of key token ids."""
    return 1, vocab_size // 2 + 1


def value_range(vocab_size: int) -> Tuple[int, int]:
    return vocab_size // 2 + 1, vocab_size


def slot_probabilities(slots: int, alpha: float) -> np.ndarray:
    """P(slot i) proportional to (i + 1)^-alpha."""
    weights = (np.arange(slots) + 1.0) ** (-alpha)
    return weights / weights.sum()


@dataclass
class ARExample:
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray


@dataclass
class ARSplit:
    """Examples of one sequence length, stored as (M, L) arrays."""
    name: str
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    kv_pairs: int

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    @property
    def seq_len(self) -> int:
        return self.inputs.shape[1]

    def example(self, i: int) -> ARExample:
        return ARExample(self.inputs[i], self.targets[i], self.mask[i])

    def subset(self, rows: np.ndarray) -> 'ARSplit':
        return ARSplit(self.name, self.inputs[rows], self.targets[rows], self.mask[rows], self.kv_pairs)


@dataclass
class ARDataset:
    """Training cells (one per length and kv fraction) and eval sets keyed by kv count."""
    vocab_size: int
    train: List[ARSplit] = field(default_factory=list)
    eval: Dict[int, ARSplit] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)

    def counts(self) -> Dict[str, int]:
        counts = {s.name: s.size for s in self.train}
        counts.update({s.name: s.size for s in self.eval.values()})
        return counts


def generate_example(rng: np.random.Generator, length: int, kv_len: int, vocab_size: int,
                     alpha: float = 1.0) -> ARExample:
    """
    One example: kv_len // 2 pairs with distinct keys, then every key
    queried once at power-law-distributed even slots of the query section.
    """
    n_kv = kv_len // 2
    if n_kv < 1:
        raise ParameterRangeError(f'kv section of {kv_len} token(s) holds no key-value pair')
    k_lo, k_hi = key_range(vocab_size)
    v_lo, v_hi = value_range(vocab_size)
    if n_kv > k_hi - k_lo:
        raise ParameterRangeError(
            f'vocab_size={vocab_size} has {k_hi - k_lo} keys, cannot draw {n_kv} distinct pairs'
        )
    slots = (length - kv_len + 1) // 2
    if n_kv > slots:
        raise ParameterRangeError(
            f'Query section of length {length - kv_len} has {slots} slots for {n_kv} queries'
        )
    keys = rng.choice(np.arange(k_lo, k_hi), size=n_kv, replace=False)
    values = rng.integers(v_lo, v_hi, size=n_kv)

    inputs = np.full(length, PAD, dtype=np.int64)
    targets = np.full(length, PAD, dtype=np.int64)
    mask = np.zeros(length, dtype=bool)
    inputs[0:2 * n_kv:2] = keys
    inputs[1:2 * n_kv:2] = values

    chosen = np.sort(rng.choice(slots, size=n_kv, replace=False, p=slot_probabilities(slots, alpha)))
    order = rng.permutation(n_kv)
    positions = kv_len + 2 * chosen
    inputs[positions] = keys[order]
    targets[positions] = values[order]
    mask[positions] = True
    return ARExample(inputs, targets, mask)


def generate_split(name: str, seed_seq: np.random.SeedSequence, count: int, length: int,
                   kv_len: int, vocab_size: int, alpha: float) -> ARSplit:
    rng = np.random.default_rng(seed_seq)
    examples = [generate_example(rng, length, kv_len, vocab_size, alpha) for _ in range(count)]
    return ARSplit(
        name=name,
        inputs=np.stack([e.inputs for e in examples]),
        targets=np.stack([e.targets for e in examples]),
        mask=np.stack([e.mask for e in examples]),
        kv_pairs=kv_len // 2,
    )


def generate_ar_dataset(cfg: ARConfig) -> ARDataset:
    """
    Generate the training cells for every (length, kv fraction) and the eval
    sets at cfg.eval_length for every kv count. Deterministic given cfg.seed.
    """
    cells = [(L, f) for L in cfg.lengths for f in cfg.kv_fractions]
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(cells) + len(cfg.eval_kv_pairs))
    dataset = ARDataset(vocab_size=cfg.vocab_size, config=cfg.to_dict())
    for seed_seq, (L, fraction) in zip(seeds, cells):
        kv_len = int(fraction * L)
        if kv_len < 2:
            raise ParameterRangeError(f'kv fraction {fraction} of length {L} leaves no room for a pair')
        name = f'train_L{L}_kv{kv_len // 2}'
        dataset.train.append(generate_split(name, seed_seq, cfg.examples_per_cell, L, kv_len,
                                            cfg.vocab_size, cfg.power_alpha))
    for seed_seq, n_kv in zip(seeds[len(cells):], cfg.eval_kv_pairs):
        dataset.eval[n_kv] = generate_split(f'eval_kv{n_kv}', seed_seq, cfg.eval_examples,
                                            cfg.eval_length, 2 * n_kv, cfg.vocab_size, cfg.power_alpha)
    logger.info(f'Generated AR dataset: {dataset.counts()}')
    return dataset


def verify_example(example: ARExample, vocab_size: int) -> Optional[str]:
    """
    Re-parse an example from its tokens alone.

    Returns None when it is well formed, otherwise a description of the
    first problem found.
    """
    k_lo, k_hi = key_range(vocab_size)
    v_lo, v_hi = value_range(vocab_size)
    tokens = [int(t) for t in example.inputs]
    bound: Dict[int, int] = {}
    i = 0
    while i + 1 < len(tokens) and k_lo <= tokens[i] < k_hi and v_lo <= tokens[i + 1] < v_hi:
        if tokens[i] in bound:
            return f'key {tokens[i]} bound twice in the kv section'
        bound[tokens[i]] = tokens[i + 1]
        i += 2
    kv_end = i
    seen = set()
    for pos in range(kv_end, len(tokens)):
        token = tokens[pos]
        masked = bool(example.mask[pos])
        if token == PAD:
            if masked:
                return f'mask set on pad position {pos}'
            continue
        if not masked:
            return f'unmasked non-pad token {token} at position {pos}'
        if token not in bound:
            return f'queried key {token} at position {pos} not in the kv section'
        if token in seen:
            return f'key {token} queried twice'
        seen.add(token)
        if int(example.targets[pos]) != bound[token]:
            return f'target {int(example.targets[pos])} at position {pos} is not the bound value {bound[token]}'
    if example.mask[:kv_end].any():
        return 'mask set inside the kv section'
    return None


def verify_split(split: ARSplit, vocab_size: int) -> Dict[str, Any]:
    """Re-parse every example; passed only when all of them verify."""
    failures = []
    for i in range(split.size):
        problem = verify_example(split.example(i), vocab_size)
        if problem is not None:
            failures.append({'example': i, 'problem': problem})
    return {
        'passed': not failures,
        'message': f'{split.size - len(failures)}/{split.size} examples verified in {split.name}',
        'checked': split.size,
        'failures': failures[:10],
    }


def verify_dataset(dataset: ARDataset) -> Dict[str, Any]:
    checks = {s.name: verify_split(s, dataset.vocab_size)
              for s in list(dataset.train) + list(dataset.eval.values())}
    return {'checks': checks, 'overall_passed': all(c['passed'] for c in checks.values())}


def query_slot_counts(split: ARSplit, kv_len: Optional[int] = None) -> np.ndarray:
    """Histogram of query slot indices i (position = kv_len + 2 i) over a split."""
    kv_len = 2 * split.kv_pairs if kv_len is None else kv_len
    slots = (split.seq_len - kv_len + 1) // 2
    positions = np.nonzero(split.mask)[1]
    return np.bincount((positions - kv_len) // 2, minlength=slots)


def power_law_fit(counts: np.ndarray, alpha: float, min_expected: float = 5.0) -> Dict[str, Any]:
    """
    Chi-square goodness of fit of single-query slot counts against the power
    law; tail bins with small expected counts are merged.
    """
    counts = np.asarray(counts, dtype=np.float64)
    expected = slot_probabilities(len(counts), alpha) * counts.sum()
    keep = np.flatnonzero(expected >= min_expected)
    cut = keep[-1] + 1 if len(keep) else 1
    observed = np.append(counts[:cut], counts[cut:].sum())
    expected = np.append(expected[:cut], expected[cut:].sum())
    if expected[-1] == 0:
        observed, expected = observed[:-1], expected[:-1]
    result = stats.chisquare(observed, expected)
    return {
        'passed': bool(result.pvalue > 1e-3),
        'message': f'chi2={result.statistic:.2f} over {len(observed)} bins, p={result.pvalue:.4f}',
        'statistic': float(result.statistic),
        'p_value': float(result.pvalue),
        'bins': int(len(observed)),
    }


def split_frame(split: ARSplit) -> pd.DataFrame:
    """Per-example summary: split, example, queries, pads."""
    return pd.DataFrame({
        'split': split.name,
        'example': np.arange(split.size),
        'queries': split.mask.sum(axis=1),
        'pads': (split.inputs == PAD).sum(axis=1),
    })


def dataset_to_container(dataset: ARDataset) -> Container:
    arrays, splits = {}, []
    for role, split in [('train', s) for s in dataset.train] + [('eval', s) for s in dataset.eval.values()]:
        splits.append({'name': split.name, 'role': role, 'kv_pairs': split.kv_pairs})
        arrays[f'{split.name}.inputs'] = split.inputs.astype(np.float64)
        arrays[f'{split.name}.targets'] = split.targets.astype(np.float64)
        arrays[f'{split.name}.mask'] = split.mask.astype(np.float64)
    meta = {'vocab_size': dataset.vocab_size, 'config': dataset.config, 'splits': splits}
    return Container(kind=KIND_DATASET, meta=meta, arrays=arrays)


def dataset_from_container(container: Container) -> ARDataset:
    meta = container.meta
    dataset = ARDataset(vocab_size=int(meta['vocab_size']), config=meta.get('config', {}))
    for entry in meta['splits']:
        name = entry['name']
        try:
            split = ARSplit(
                name=name,
                inputs=container.arrays[f'{name}.inputs'].astype(np.int64),
                targets=container.arrays[f'{name}.targets'].astype(np.int64),
                mask=container.arrays[f'{name}.mask'].astype(bool),
                kv_pairs=int(entry['kv_pairs']),
            )
        except KeyError as e:
            raise ShapeMismatchError(f'Dataset container is missing array {e}', dimension=name)
        if entry['role'] == 'train':
            dataset.train.append(split)
        else:
            dataset.eval[split.kv_pairs] = split
    return dataset


def save_dataset(out_dir: Union[str, Path], dataset: ARDataset,
                 filename: str = 'ar_dataset.ssmc') -> Dict[str, Any]:
    """
    Write the dataset container and a manifest.json next to it (config echo,
    per-split counts, SHA-256 of the container bytes).
    """
    out_dir = ensure_output_dir(out_dir)
    path = out_dir / filename
    checksum = write_container(path, dataset_to_container(dataset))
    manifest = {
        'file': filename,
        'sha256': checksum,
        'counts': dataset.counts(),
        'config': dataset.config,
        'created_utc': datetime.now(timezone.utc).isoformat(),
        'size_bytes': path.stat().st_size,
    }
    with open(out_dir / 'dataset_manifest.json', 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write('\n')
    return manifest


def load_dataset(path: Union[str, Path]) -> ARDataset:
    return dataset_from_container(read_container(path, expected_kind=KIND_DATASET))
