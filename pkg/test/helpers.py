import difflib
import os
import tempfile
from dataclasses import replace
from shutil import copy
from typing import Dict, List

from tinyloc.rssi_data import DatasetSplit, SynthConfig, generate_synthetic

TEST_FILES_DIR = os.path.join(os.path.dirname(os.path.realpath(__file__)), 'test_files')

SMALL_SYNTH = SynthConfig(samples_per_room=120, dwell=20)
"""Three rooms, 360 fingerprint samples: enough windows to train in a few seconds"""


def data_file(name: str) -> str:
    """Absolute path of a file in test_files"""
    return os.path.join(TEST_FILES_DIR, name)


def small_synthetic(seed: int = 7) -> DatasetSplit:
    """Deterministic small synthetic dataset shared by the training tests"""
    return generate_synthetic(replace(SMALL_SYNTH, seed=seed))


def copy_to_tmp(inputs: List[str] = None, renames: Dict[str, str] = None) -> str:
    """Copy test files into a fresh working directory

    :param inputs: files from test_files to copy under their own names
    :param renames: files to copy under a new name, mapping old name to new
    :return: temporary working directory
    """
    inputs = inputs or []
    renames = renames or {}
    tmp_dir = tempfile.mkdtemp()
    work_dir = os.path.join(tmp_dir, 'run')
    os.mkdir(work_dir)
    for f in inputs:
        copy(data_file(f), work_dir)
    for old_f, new_f in renames.items():
        copy(data_file(old_f), os.path.join(work_dir, new_f))
    return work_dir


def assert_files_identical(file1: os.PathLike, file2: os.PathLike) -> None:
    """Check that two files have the same bytes; for text files, report their diff

    :param file1: path of first file to compare
    :param file2: path of second file to compare
    """
    with open(file1, 'rb') as f1, open(file2, 'rb') as f2:
        data1, data2 = f1.read(), f2.read()
    if data1 == data2:
        return
    try:
        lines1, lines2 = data1.decode('utf-8').splitlines(True), data2.decode('utf-8').splitlines(True)
    except UnicodeDecodeError:
        raise AssertionError(f'Binary files {file1} ({len(data1)} B) and {file2} ({len(data2)} B) differ')
    diff = ''.join(difflib.unified_diff(lines1, lines2, fromfile=str(file1), tofile=str(file2)))
    raise AssertionError("File differs from expected value:\n" + diff)
