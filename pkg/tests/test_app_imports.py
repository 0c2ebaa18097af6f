import json
import os
import sys

import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))


def test_main_imports_without_running_commands():
    __import__("main")


def test_parser_reads_global_flags():
    from main import build_parser

    args = build_parser().parse_args(["--seed", "4", "--fast", "--fmax", "60", "sweep-youngs", "--E", "1e5", "9e5"])

    assert args.command == "sweep-youngs"
    assert args.seed == 4 and args.reduction == "fast" and args.fmax == 60.0
    assert args.E == [1e5, 9e5]


def test_parser_rejects_unknown_styles():
    from main import build_parser

    with pytest.raises(SystemExit):
        build_parser().parse_args(["gen-dataset", "--styles", "Chop"])


def test_bad_config_exits_with_code_two(tmp_path, capsys):
    from main import main

    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"sim": {"grid": 3}}), encoding="utf-8")

    assert main(["--config", str(path), "simulate"]) == 2


def test_missing_config_exits_with_code_two(tmp_path):
    from main import main

    assert main(["--config", str(tmp_path / "missing.json"), "simulate"]) == 2


def test_eval_of_missing_record_exits_with_code_two(tmp_path):
    from main import main

    assert main(["eval", str(tmp_path / "nothing")]) == 2
