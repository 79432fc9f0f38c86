import json

import numpy as np
import pytest

from ssmlab.core.config import ARConfig
from ssmlab.core.data import (
    PAD, ARExample, generate_ar_dataset, generate_example, generate_split, key_range,
    load_dataset, power_law_fit, query_slot_counts, save_dataset, slot_probabilities,
    split_frame, value_range, verify_dataset, verify_example
)
from ssmlab.core.errors import ParameterRangeError

SMALL = ARConfig(vocab_size=32, lengths=[32, 64], kv_fractions=[0.25, 0.5], examples_per_cell=20,
                 eval_length=64, eval_kv_pairs=[4, 8], eval_examples=10, seed=3)


def test_example_layout(rng):
    example = generate_example(rng, length=32, kv_len=8, vocab_size=32)
    k_lo, k_hi = key_range(32)
    v_lo, v_hi = value_range(32)
    keys, values = example.inputs[0:8:2], example.inputs[1:8:2]
    assert np.all((keys >= k_lo) & (keys < k_hi)) and len(set(keys)) == 4
    assert np.all((values >= v_lo) & (values < v_hi))
    query = np.flatnonzero(example.mask)
    assert len(query) == 4
    assert np.all((query - 8) % 2 == 0)
    assert np.all(example.inputs[8:][~example.mask[8:]] == PAD)
    bound = dict(zip(keys, values))
    assert all(example.targets[q] == bound[example.inputs[q]] for q in query)
    assert verify_example(example, 32) is None


def test_single_pair_example(rng):
    example = generate_example(rng, length=8, kv_len=2, vocab_size=8)
    assert example.mask.sum() == 1
    assert example.targets[example.mask][0] == example.inputs[1]


@pytest.mark.parametrize('length, kv_len', ((8, 8), (16, 12)))
def test_query_section_too_short(length, kv_len, rng):
    with pytest.raises(ParameterRangeError):
        generate_example(rng, length, kv_len, 64)


def test_too_many_pairs_for_vocab(rng):
    with pytest.raises(ParameterRangeError):
        generate_example(rng, length=64, kv_len=20, vocab_size=16)


def test_verify_catches_corruption(rng):
    example = generate_example(rng, length=32, kv_len=8, vocab_size=32)
    q = np.flatnonzero(example.mask)[0]
    bad_target = ARExample(example.inputs, example.targets.copy(), example.mask)
    bad_target.targets[q] = (bad_target.targets[q] - 17 + 1) % 15 + 17
    assert 'not the bound value' in verify_example(bad_target, 32)
    bad_mask = ARExample(example.inputs, example.targets, example.mask.copy())
    bad_mask.mask[q] = False
    assert 'unmasked' in verify_example(bad_mask, 32)


def test_dataset_is_deterministic_and_verified():
    first = generate_ar_dataset(SMALL)
    second = generate_ar_dataset(SMALL)
    assert [s.name for s in first.train] == ['train_L32_kv4', 'train_L32_kv8', 'train_L64_kv8', 'train_L64_kv16']
    assert sorted(first.eval) == [4, 8]
    assert all(np.array_equal(a.inputs, b.inputs) for a, b in zip(first.train, second.train))
    assert first.eval[8].seq_len == 64
    report = verify_dataset(first)
    assert report['overall_passed']
    assert set(report['checks']) == set(first.counts())


def test_query_slots_follow_power_law():
    split = generate_split('probe', np.random.SeedSequence(0), count=4000, length=40, kv_len=2,
                           vocab_size=16, alpha=1.0)
    counts = query_slot_counts(split)
    assert counts.sum() == 4000
    assert counts[0] > counts[5] > counts[15]
    assert power_law_fit(counts, 1.0)['passed']
    assert not power_law_fit(counts, 0.0)['passed']
    assert slot_probabilities(4, 0.0) == pytest.approx([0.25] * 4)


def test_dataset_file_and_manifest(tmp_path):
    dataset = generate_ar_dataset(SMALL)
    manifest = save_dataset(tmp_path, dataset)
    on_disk = json.loads((tmp_path / 'dataset_manifest.json').read_text())
    assert on_disk['sha256'] == manifest['sha256']
    assert on_disk['counts']['eval_kv4'] == 10
    loaded = load_dataset(tmp_path / 'ar_dataset.ssmc')
    assert loaded.vocab_size == 32
    assert np.array_equal(loaded.eval[4].targets, dataset.eval[4].targets)
    assert loaded.eval[4].mask.dtype == bool
    assert [s.name for s in loaded.train] == [s.name for s in dataset.train]


def test_split_frame_counts_queries_and_pads():
    split = generate_ar_dataset(SMALL).eval[4]
    frame = split_frame(split)
    assert list(frame.columns) == ['split', 'example', 'queries', 'pads']
    assert (frame['split'] == 'eval_kv4').all()
    assert frame['example'].tolist() == list(range(10))
    assert (frame['queries'] == 4).all()
    assert (frame['pads'] == 64 - 8 - 4).all()
