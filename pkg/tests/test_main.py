"""
Tests for the command-line entry point.
"""
import json
import pytest
import tempfile
import shutil
import sys
import os

sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

from main import build_parser, main
from seqcomm_dfl.controllers.selftest import tiny_config


def test_parser_defaults():
    """Test the default command line."""
    args = build_parser().parse_args([])
    assert args.mode == "train"
    assert args.seeds == "0"
    assert args.out == "runs"
    assert args.eval_episodes == 10


def test_unknown_mode_rejected():
    """Test that argparse refuses an unknown mode."""
    with pytest.raises(SystemExit):
        build_parser().parse_args(["--mode", "dance"])


def test_bad_seed_list_exits_with_two():
    """Test that an unparsable seed list is a configuration error."""
    assert main(["--seeds", "one..two"]) == 2


def test_train_from_command_line():
    """Test a one-iteration training run end to end."""
    temp_dir = tempfile.mkdtemp()
    try:
        config_path = os.path.join(temp_dir, "tiny.json")
        with open(config_path, 'w') as f:
            json.dump(tiny_config().to_dict(), f)
        out = os.path.join(temp_dir, "runs")
        assert main(["--config", config_path, "--seeds", "0", "--out", out, "--iters", "1"]) == 0
        assert os.path.exists(os.path.join(out, "seed_0", "summary.json"))
    finally:
        shutil.rmtree(temp_dir)
