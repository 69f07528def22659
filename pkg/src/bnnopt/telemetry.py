"""Run metrics: loss, accuracy, and the flip-ratio signal.

The flip ratio of a step is log(flipped/total + e^-9), natural log, so a
step with no flips reports exactly -9. Records are written as CSV with a
fixed column order and 17 significant digits (lossless float round-trip),
and can be rendered to a static vector-graphics figure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import DataError

#: additive floor inside the flip-ratio log; log(floor) == -9 exactly
PI_FLOOR = math.exp(-9)

_FIXED_COLUMNS = ("epoch", "step", "split", "loss", "top1", "global_pi")
_SPLITS = ("train", "validation")


def flip_ratio(flips: int, total: int) -> float:
    """Natural log of the flipped fraction, floored by e^-9."""
    if total < 1:
        raise DataError(f"flip_ratio: total must be >= 1, got {total}")
    if flips < 0 or flips > total:
        raise DataError(f"flip_ratio: flips={flips} outside [0, total={total}]")
    return math.log(flips / total + PI_FLOOR)


@dataclass(frozen=True)
class TelemetryRecord:
    """One measurement: per step or per epoch, train or validation."""

    epoch: int
    step: int
    split: str
    loss: float
    top1: float
    per_layer_pi: tuple[float, ...]
    global_pi: float

    def __post_init__(self):
        if self.split not in _SPLITS:
            raise DataError(f"split must be one of {_SPLITS}, got {self.split!r}")
        if not 0.0 <= self.top1 <= 1.0:
            raise DataError(f"top1 must be in [0, 1], got {self.top1}")


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def csv_header(num_layers: int) -> str:
    return ",".join(_FIXED_COLUMNS + tuple(f"pi_layer_{i}" for i in range(num_layers)))


def emit_csv(records, path) -> None:
    """Write records with the fixed schema; header only when empty."""
    records = list(records)
    num_layers = len(records[0].per_layer_pi) if records else 0
    lines = [csv_header(num_layers)]
    for rec in records:
        if len(rec.per_layer_pi) != num_layers:
            raise DataError(
                f"record at epoch {rec.epoch} step {rec.step} has "
                f"{len(rec.per_layer_pi)} layer columns, expected {num_layers}"
            )
        row = [
            str(rec.epoch),
            str(rec.step),
            rec.split,
            _fmt(rec.loss),
            _fmt(rec.top1),
            _fmt(rec.global_pi),
        ]
        row.extend(_fmt(p) for p in rec.per_layer_pi)
        lines.append(",".join(row))
    try:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write telemetry CSV to {path}: {exc}") from exc


def parse_csv(path) -> list[TelemetryRecord]:
    """Read back an emit_csv file; errors carry the 1-based line number."""
    try:
        with open(path, "r", encoding="ascii") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read telemetry CSV {path}: {exc}") from exc
    if not lines:
        raise DataError(f"{path}: empty file, expected a header row")
    header = lines[0].split(",")
    for col in _FIXED_COLUMNS:
        if col not in header:
            raise DataError(f"{path}: missing column {col!r} in header")
    layer_cols = [c for c in header if c.startswith("pi_layer_")]
    expected = list(_FIXED_COLUMNS) + [f"pi_layer_{i}" for i in range(len(layer_cols))]
    if header != expected:
        raise DataError(f"{path}: unexpected column order {header}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        cells = line.split(",")
        if len(cells) != len(header):
            raise DataError(
                f"{path}:{lineno}: expected {len(header)} cells, got {len(cells)}"
            )
        try:
            records.append(
                TelemetryRecord(
                    epoch=int(cells[0]),
                    step=int(cells[1]),
                    split=cells[2],
                    loss=float(cells[3]),
                    top1=float(cells[4]),
                    global_pi=float(cells[5]),
                    per_layer_pi=tuple(float(c) for c in cells[6:]),
                )
            )
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return records


def emit_plot(csv_path, out_path) -> None:
    """Render loss/accuracy/flip-ratio curves from a telemetry CSV.

    Purely a view of existing data; the output format follows the file
    extension (.svg recommended for a self-contained vector file).
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = parse_csv(csv_path)
    if not records:
        raise DataError(f"{csv_path}: no records to plot")

    fig, axes = plt.subplots(3, 1, figsize=(8, 10), sharex=True)
    ax_loss, ax_acc, ax_pi = axes
    for split, style in (("train", "-"), ("validation", "--")):
        rows = [r for r in records if r.split == split]
        if not rows:
            continue
        x = [r.step for r in rows]
        ax_loss.plot(x, [r.loss for r in rows], style, label=split)
        ax_acc.plot(x, [r.top1 for r in rows], style, label=split)
    train_rows = [r for r in records if r.split == "train"]
    if train_rows:
        x = [r.step for r in train_rows]
        ax_pi.plot(x, [r.global_pi for r in train_rows], "-", label="global")
        for i in range(len(train_rows[0].per_layer_pi)):
            ax_pi.plot(
                x,
                [r.per_layer_pi[i] for r in train_rows],
                "--",
                alpha=0.6,
                label=f"layer {i}",
            )
    ax_loss.set_ylabel("loss")
    ax_acc.set_ylabel("top-1 accuracy")
    ax_pi.set_ylabel("flip ratio (log)")
    ax_pi.set_xlabel("optimizer step")
    for ax in axes:
        ax.legend(loc="best", fontsize=8)
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    try:
        fig.savefig(out_path)
    except OSError as exc:
        raise DataError(f"cannot write figure to {out_path}: {exc}") from exc
    finally:
        plt.close(fig)
