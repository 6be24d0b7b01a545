"""Report, curve and flip-list files.

Structured reports are flat JSON objects (scalars plus arrays of flat
records). Every command writes its files through :class:`OutputSet`, which
stages them under temporary names and only renames once all are written.

Attack report schema (``attack_report.json``)::

    schema                        "attack-report/1"
    model, config_hash, seed
    baseline_accuracy, baseline_loss, baseline_robustness, baseline_empirical_robustness
    final_accuracy, final_loss, final_robustness, final_empirical_robustness
    search_baseline_*, search_final_*      same metrics on the search's evaluation split
    robustness_drop               relative drop of confidence-gap robustness (test split)
    flip_count, total_weights, total_bits
    flip_percentage               100 * flips / (8 * weights), rounded to 4 decimals
    termination_reason            target_reached | delta_exceeded | max_iterations | no_candidates
    trajectory                    [{iteration, layer_id, flips, robustness, accuracy, loss, loss_increase}]
    config                        the AttackConfig used
"""

from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path
from typing import Iterable, List, Sequence

from .quant import BitLocation


class OutputSet:
    """All-or-nothing group of output files."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self._staged: List[tuple] = []

    def add(self, name: str, payload) -> Path:
        data = payload.encode("utf-8") if isinstance(payload, str) else bytes(payload)
        path = self.directory / name
        self._staged.append((path, data))
        return path

    def commit(self) -> List[Path]:
        self.directory.mkdir(parents=True, exist_ok=True)
        temps = []
        try:
            for path, data in self._staged:
                tmp = path.with_name(path.name + ".partial")
                tmp.write_bytes(data)
                temps.append((tmp, path))
            for tmp, path in temps:
                os.replace(tmp, path)
        except BaseException:
            for tmp, _ in temps:
                if tmp.exists():
                    tmp.unlink()
            raise
        return [path for path, _ in self._staged]


def to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=False) + "\n"


def curve_csv(history) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "loss", "accuracy", "robustness"])
    for rec in history:
        writer.writerow([rec.epoch, repr(rec.loss), repr(rec.accuracy), repr(rec.robustness)])
    return buf.getvalue()


def format_flip_list(flips: Iterable[BitLocation]) -> str:
    return "".join(f"{loc.layer_id} {loc.weight_index} {loc.bit_index}\n" for loc in flips)


def parse_flip_list(text: str) -> List[BitLocation]:
    flips = []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if len(parts) != 3 or not all(p.isdigit() for p in parts):
            raise ValueError(f"flip list line {lineno}: expected 'layer_id weight_index bit_index', got {line!r}")
        flips.append(BitLocation(*(int(p) for p in parts)))
    return flips


def read_flip_list(path) -> List[BitLocation]:
    return parse_flip_list(Path(path).read_text(encoding="ascii"))


def _fmt(value, spec: str) -> str:
    return "-" if value is None else format(value, spec)


def results_table(rows: Sequence[dict]) -> str:
    """Fixed-width table: one row per model state, columns as in a results table."""
    header = f"{'Model':<12}{'Accuracy (Clean Inputs)':>26}{'Robustness (Crafted Inputs)':>30}{'Empirical':>12}{'#Bit Flips':>12}{'Flip Percentage':>18}"
    lines = [header, "-" * len(header)]
    for row in rows:
        rho = _fmt(row.get("robustness"), ".4f")
        if row.get("drop") is not None:
            rho = f"{rho} ({100 * row['drop']:.2f}%)"
        flips = "-" if row.get("flips") is None else str(row["flips"])
        pct = "-" if row.get("flip_percentage") is None else f"{row['flip_percentage']:.4f}%"
        lines.append(
            f"{row['label']:<12}{_fmt(row.get('accuracy'), '.4f'):>26}{rho:>30}"
            f"{_fmt(row.get('empirical'), '.4f'):>12}{flips:>12}{pct:>18}"
        )
    return "\n".join(lines) + "\n"


def trajectory_table(trajectory: Sequence[dict]) -> str:
    header = f"{'iter':>5}{'layer':>7}{'flips':>7}{'robustness':>13}{'accuracy':>10}{'loss':>10}{'loss+':>10}"
    lines = [header]
    for row in trajectory:
        lines.append(
            f"{row['iteration']:>5}{row['layer_id']:>7}{row['flips']:>7}{row['robustness']:>13.6f}"
            f"{row['accuracy']:>10.4f}{row['loss']:>10.4f}{row['loss_increase']:>10.4f}"
        )
    return "\n".join(lines) + "\n"


def samples_table(samples: Sequence[dict]) -> str:
    header = f"{'index':>6}{'label':>7}{'P':>4}{'C':>9}{'||r||':>10}{'P(x+r)':>8}"
    lines = [header]
    for s in samples:
        norm = "-" if s["perturbation_norm"] is None else f"{s['perturbation_norm']:.4f}"
        adv = "-" if s["adversarial_prediction"] is None else str(s["adversarial_prediction"])
        lines.append(f"{s['index']:>6}{s['label']:>7}{s['prediction']:>4}{100 * s['confidence']:>8.2f}%{norm:>10}{adv:>8}")
    return "\n".join(lines) + "\n"
