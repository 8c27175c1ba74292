import csv
import json

import pytest

from fairdpfl.config import config_from_dict
from fairdpfl.report import ReportError, empirical_cdf, read_rounds, report
from fairdpfl.runner import run


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    cfg = config_from_dict(
        {
            "data": {"synthetic": {"n": 1200}},
            "partition": {"n_clients": 8},
            "clients": {"n_test": 3},
            "fl": {"rounds": 5, "client_fraction": 0.5, "sampling_rate": 0.25},
            "fairness": {"mode": "tunable", "target": 0.12},
        }
    )
    return run(cfg, tmp_path_factory.mktemp("rep") / "run")


def test_report_tables(run_dir, tmp_path):
    paths = report(run_dir, tmp_path)
    acc = _rows(paths["accuracy"])
    disp = _rows(paths["disparity"])
    assert len(acc) == 5 and len(disp) == 5
    assert list(acc[0]) == ["seed", "round", "accuracy", "train_accuracy"]
    assert {r["target"] for r in disp} == {"0.12"}
    logged = [json.loads(line) for line in (run_dir / "rounds.jsonl").read_text().splitlines()]
    assert [float(r["accuracy"]) for r in acc] == [r["accuracy"] for r in logged]
    cdf = _rows(paths["cdf"])
    assert len(cdf) == len(logged[-1]["local_disparities"])
    assert float(cdf[-1]["cumulative_fraction"]) == 1.0
    fractions = [float(r["cumulative_fraction"]) for r in cdf]
    assert fractions == sorted(fractions)


def test_report_defaults_to_run_directory(run_dir):
    paths = report(run_dir)
    assert all(p.parent == run_dir for p in paths.values())


def test_empirical_cdf_example():
    assert empirical_cdf([0.3, 0.1]) == [(0.1, 0.5), (0.3, 1.0)]
    assert empirical_cdf([]) == []


def test_malformed_jsonl_names_the_line(tmp_path):
    good = {"seed": 0, "round": 0, "accuracy": 0.5, "global_disparity": 0.1, "local_disparities": []}
    path = tmp_path / "rounds.jsonl"
    path.write_text(json.dumps(good) + "\n{oops\n")
    with pytest.raises(ReportError, match=r"rounds.jsonl:2: malformed JSON"):
        read_rounds(path)
    path.write_text(json.dumps({"seed": 0}) + "\n")
    with pytest.raises(ReportError, match=r":1: missing field"):
        read_rounds(path)
    path.write_text("[1, 2]\n")
    with pytest.raises(ReportError, match="expected a JSON object"):
        read_rounds(path)
    path.write_text("")
    with pytest.raises(ReportError, match="no rounds"):
        read_rounds(path)
    with pytest.raises(ReportError, match="no such file"):
        read_rounds(tmp_path / "absent.jsonl")
