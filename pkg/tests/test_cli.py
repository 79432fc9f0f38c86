import json

import pandas as pd
import pytest
from click.testing import CliRunner

from ssmlab import __version__
from ssmlab.cli import EXIT_OK, EXIT_USAGE, main, run

TINY = {
    'seeds': [0],
    'workers': 1,
    'ar': {'vocab_size': 16, 'lengths': [16], 'kv_fractions': [0.25], 'examples_per_cell': 16,
           'eval_length': 16, 'eval_kv_pairs': [2], 'eval_examples': 8},
    'models': [{'name': 'tiny', 'd_model': 8, 'd_state': 2, 'n_layers': 1}],
    'train': {'batch_size': 8, 'micro_batch': 8, 'epochs': 1},
    'check': {'parallel_instances': 8, 'gradient_instances': 7, 'bound_instances': 10,
              'lowpass_instances': 3, 'polarization_instances': 2, 'polarization_steps': 3,
              'envelope_length': 48, 'envelope_models': 1},
    'analysis': {'seq_len': 16, 'd_model': 2, 'd_state': 4, 'n_layers': 3, 'n_inputs': 3,
                 'lag_window': [0, 15], 'probe_length': 0},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / 'tiny.json'
    path.write_text(json.dumps(TINY))
    return path


def invoke(*args):
    return CliRunner().invoke(main, list(args), catch_exceptions=False)


def test_version():
    result = invoke('--version')
    assert result.exit_code == 0
    assert __version__ in result.output


def test_unknown_subcommand_is_usage_error():
    assert invoke('frobnicate').exit_code == EXIT_USAGE
    assert run(['check', 'nonsense']) == EXIT_USAGE


def test_bad_config_reports_line(tmp_path):
    path = tmp_path / 'bad.json'
    path.write_text('{\n  "seeds": [0,\n}\n')
    result = invoke('analyze', 'spectrum', '--config', str(path), '--out', str(tmp_path / 'out'))
    assert result.exit_code == EXIT_USAGE
    assert 'bad.json:3' in result.output


def test_unknown_config_field(tmp_path):
    path = tmp_path / 'bad.json'
    path.write_text(json.dumps({'analysis': {'colour': 'blue'}}))
    result = invoke('analyze', 'spectrum', '--config', str(path), '--out', str(tmp_path / 'out'))
    assert result.exit_code == EXIT_USAGE
    assert 'analysis.colour' in result.output


def test_spectrum_writes_csv_and_manifest(tmp_path, config_file):
    out = tmp_path / 'out'
    result = invoke('analyze', 'spectrum', '--config', str(config_file), '--out', str(out), '--seed', '3')
    assert result.exit_code == EXIT_OK, result.output
    frame = pd.read_csv(out / 'spectrum.csv')
    assert list(frame.columns) == ['channel', 'omega', 'magnitude', 'bound']
    manifest = json.loads((out / 'manifest.json').read_text())
    assert manifest['subcommand'] == 'analyze spectrum'
    assert manifest['config']['analysis']['seed'] == 3
    assert set(manifest['outputs']) == {'spectrum.csv', 'spectrum_report.json'}
    assert manifest['passed'] is True


def test_same_seed_same_bytes(tmp_path, config_file):
    for name, workers in (('a', '1'), ('b', '2')):
        assert invoke('analyze', 'smoothness', '--config', str(config_file), '--workers', workers,
                      '--out', str(tmp_path / name)).exit_code == EXIT_OK
    for csv in ('smoothness.csv', 'bound.csv'):
        assert (tmp_path / 'a' / csv).read_bytes() == (tmp_path / 'b' / csv).read_bytes()


def test_influence_and_gate_gap(tmp_path, config_file):
    out = tmp_path / 'out'
    assert invoke('analyze', 'influence', '--config', str(config_file), '--out', str(out)).exit_code == EXIT_OK
    assert list(pd.read_csv(out / 'influence.csv').columns) == ['t', 's', 'lag', 'score']
    assert list(pd.read_csv(out / 'decay.csv').columns) == ['lag', 'log_env']
    assert invoke('analyze', 'gate-gap', '--config', str(config_file), '--out', str(out)).exit_code == EXIT_OK
    gaps = pd.read_csv(out / 'gate_gap.csv')
    assert len(gaps) == 11 and gaps['cumulative'].iloc[-1] == 1.0


def test_check_theorems(tmp_path, config_file):
    out = tmp_path / 'checks'
    result = invoke('check', 'theorems', '--config', str(config_file), '--out', str(out))
    assert result.exit_code == EXIT_OK, result.output
    report = json.loads((out / 'theorems_report.json').read_text())
    assert report['overall_passed'] is True
    assert (out / 'check_parallel_form.csv').exists()
    assert (out / 'check_oversmoothing.csv').exists()


def test_data_train_eval_probe_pipeline(tmp_path, config_file):
    data_dir, train_dir = tmp_path / 'data', tmp_path / 'train'
    assert invoke('data', 'gen-ar', '--config', str(config_file), '--out', str(data_dir)).exit_code == EXIT_OK
    dataset = data_dir / 'ar_dataset.ssmc'
    assert json.loads((data_dir / 'verification_report.json').read_text())['overall_passed']
    splits = pd.read_csv(data_dir / 'splits.csv')
    counts = json.loads((data_dir / 'dataset_manifest.json').read_text())['counts']
    assert list(splits.columns) == ['split', 'example', 'queries', 'pads']
    assert len(splits) == sum(counts.values())
    assert (splits['queries'] >= 1).all()
    assert 'splits.csv' in json.loads((data_dir / 'manifest.json').read_text())['outputs']

    result = invoke('train', 'ar', '--config', str(config_file), '--out', str(train_dir),
                    '--dataset', str(dataset))
    assert result.exit_code == EXIT_OK, result.output
    checkpoint = train_dir / 'model_tiny_seed0.ssmc'
    assert checkpoint.exists()
    table = pd.read_csv(train_dir / 'table.csv')
    assert table['kv_pairs'].tolist() == [2]

    eval_dir = tmp_path / 'eval'
    assert invoke('eval', 'ar', '--config', str(config_file), '--out', str(eval_dir), '--dataset', str(dataset),
                  '--checkpoint', str(checkpoint)).exit_code == EXIT_OK
    accuracy = pd.read_csv(eval_dir / 'accuracy.csv')
    assert accuracy['accuracy'].iloc[0] == pytest.approx(table['accuracy'].iloc[0])

    probe_dir = tmp_path / 'probe'
    assert invoke('probe', 'perturb', '--config', str(config_file), '--out', str(probe_dir),
                  '--dataset', str(dataset), '--checkpoint', str(checkpoint),
                  '--region', 'both').exit_code == EXIT_OK
    probe = pd.read_csv(probe_dir / 'perturbation.csv')
    assert sorted(probe['region'].unique()) == ['leading', 'trailing']


def test_eval_needs_checkpoint(tmp_path, config_file):
    result = invoke('eval', 'ar', '--config', str(config_file), '--out', str(tmp_path / 'out'))
    assert result.exit_code == EXIT_USAGE
