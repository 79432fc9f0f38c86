import json

import numpy as np
import pandas as pd
import pytest

from ssmlab.core.errors import SSMLabError
from ssmlab.core.utils import (
    KIND_COEFFICIENTS, KIND_PARAMS, Container, file_checksum, read_container,
    write_container, write_csv, write_report
)


def test_container_preserves_arrays_and_meta(tmp_path):
    arrays = {'real': np.arange(6.0).reshape(2, 3), 'cplx': np.array([1 + 2j, -3j])}
    container = Container(kind=KIND_PARAMS, tag=2, T=1, N=3, D=2, meta={'variant': 's4'}, arrays=arrays)
    checksum = write_container(tmp_path / 'p.ssmc', container)
    assert checksum == file_checksum(tmp_path / 'p.ssmc')
    loaded = read_container(tmp_path / 'p.ssmc', expected_kind=KIND_PARAMS)
    assert loaded.tag == 2 and loaded.meta == {'variant': 's4'}
    assert np.array_equal(loaded.arrays['real'], arrays['real'])
    assert np.array_equal(loaded.arrays['cplx'], arrays['cplx'])


def test_container_kind_and_magic_checked(tmp_path):
    write_container(tmp_path / 'p.ssmc', Container(kind=KIND_PARAMS))
    with pytest.raises(SSMLabError):
        read_container(tmp_path / 'p.ssmc', expected_kind=KIND_COEFFICIENTS)
    (tmp_path / 'bad.ssmc').write_bytes(b'NOPE' + bytes(40))
    with pytest.raises(SSMLabError):
        read_container(tmp_path / 'bad.ssmc')


def test_csv_and_report_are_deterministic(tmp_path):
    df = pd.DataFrame({'t': [1, 2], 'x': [0.1, 1 / 3]})
    write_csv(df, tmp_path / 'a.csv')
    write_csv(df, tmp_path / 'b.csv')
    assert file_checksum(tmp_path / 'a.csv') == file_checksum(tmp_path / 'b.csv')
    assert pd.read_csv(tmp_path / 'a.csv')['x'].iloc[1] == 1 / 3

    write_report({'passed': np.bool_(True), 'values': np.array([1.5, 2.0]), 'n': np.int64(3)},
                 tmp_path / 'r.json')
    report = json.loads((tmp_path / 'r.json').read_text())
    assert report == {'n': 3, 'passed': True, 'values': [1.5, 2.0]}
