import numpy as np

from ui.formatting import DESK, Thresholds, fmt_acc, fmt_err, fmt_loss, fmt_metrics, fmt_occupancy, verdict


def test_number_formats():
    assert fmt_acc(0.9321) == "93.2%"
    assert fmt_acc(None) == "n/a"
    assert fmt_loss(1.23456) == "1.2346"
    assert fmt_err(3.2e-7) == "3.200e-07"


def test_occupancy_summary_ignores_empty_parts():
    occ = np.array([0, 4, 0, 10, 1, 0, 0, 1])
    assert fmt_occupancy(occ, 2) == "4/8 parts occupied | points per part min 1 max 10 mean 4.0"


def test_metrics_line():
    line = fmt_metrics({"hop_acc": 0.9, "per_layer": [0.8, 1.0], "cls_acc": None, "mean_loss": 0.5})
    assert line == "hop acc 90.0%  |  per layer 80.0% / 100.0%  |  cls acc n/a  |  loss 0.5000"


def test_verdict_against_desk_targets():
    assert verdict({"hop_acc": 0.9, "cls_acc": 0.85}) == "Pass"
    assert verdict({"hop_acc": 0.9, "cls_acc": 0.5}) == "Fail"
    # classification not measured yet
    assert verdict({"hop_acc": 0.86, "cls_acc": None}) == "Pass"
    assert verdict({}) == "n/a"


def test_custom_thresholds():
    strict = Thresholds(gradcheck_max_error=1e-6, hop_acc_min=0.99, probe_acc_min=0.99)
    assert verdict({"hop_acc": 0.95}, strict) == "Fail"
    assert DESK.to_dict() == {"gradcheck": 1e-4, "hopAcc": 0.85, "probeAcc": 0.80}
