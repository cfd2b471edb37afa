from dataclasses import dataclass

import numpy as np


def fmt_acc(x) -> str:
    return "n/a" if x is None else f"{100.0 * x:.1f}%"


def fmt_loss(x) -> str:
    return "n/a" if x is None else f"{x:.4f}"


def fmt_err(x: float) -> str:
    return f"{x:.3e}"


def fmt_occupancy(occupancy: np.ndarray, split: int) -> str:
    """One-line summary of how many points landed in each voxel part."""
    occupied = occupancy[occupancy > 0]
    return (f"{len(occupied)}/{split ** 3} parts occupied | "
            f"points per part min {int(occupied.min())} max {int(occupied.max())} mean {occupied.mean():.1f}")


def fmt_metrics(m: dict) -> str:
    parts = [f"hop acc {fmt_acc(m.get('hop_acc'))}"]
    if m.get("per_layer"):
        parts.append("per layer " + " / ".join(fmt_acc(a) for a in m["per_layer"]))
    parts.append(f"cls acc {fmt_acc(m.get('cls_acc'))}")
    if m.get("mean_loss") is not None:
        parts.append(f"loss {fmt_loss(m['mean_loss'])}")
    return "  |  ".join(parts)


@dataclass
class Thresholds:
    gradcheck_max_error: float
    hop_acc_min: float
    probe_acc_min: float

    def to_dict(self):
        return {
            "gradcheck": self.gradcheck_max_error,
            "hopAcc": self.hop_acc_min,
            "probeAcc": self.probe_acc_min,
        }


# Desk-scale targets (8 synthetic classes, 30 epochs)
DESK = Thresholds(gradcheck_max_error=1e-4, hop_acc_min=0.85, probe_acc_min=0.80)


def verdict(m: dict, th: Thresholds = DESK) -> str:
    """'Pass' when every reported accuracy clears its target, 'Fail' otherwise."""
    checks = []
    if m.get("hop_acc") is not None:
        checks.append(m["hop_acc"] >= th.hop_acc_min)
    if m.get("cls_acc") is not None:
        checks.append(m["cls_acc"] >= th.probe_acc_min)
    if not checks:
        return "n/a"
    return "Pass" if all(checks) else "Fail"
