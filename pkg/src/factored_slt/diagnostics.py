"""Per-layer gradient-norm and parameter-norm tracing, plus the dominance
report that summarizes which side of a joint run drives the updates.

Watching is purely observational: records are taken from existing gradient
buffers after the backward pass and before clipping, and never touch
parameters or consume randomness, so attaching a watch cannot change a run.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

ENCODER_LAYER = "encoder_last"
BACKEND_LAYER = "backend_last"


@dataclass(frozen=True)
class NormRecord:
    step: int
    layer_id: str
    grad_norm: float
    param_norm: float


@dataclass
class NormTrace:
    watched_layers: tuple[str, ...]
    records: list[NormRecord] = field(default_factory=list)

    def steps(self) -> list[int]:
        return sorted({r.step for r in self.records})

    def series(self, layer_id: str) -> list[NormRecord]:
        return [r for r in self.records if r.layer_id == layer_id]


@dataclass
class DominanceReport:
    """fraction: share of steps where the backend layer's gradient norm is
    strictly greater than the encoder layer's (ties do not count)."""

    fraction_backend_exceeds: float
    mean_norm_ratio: float
    steps: int
    param_norm_drift: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "fraction_backend_exceeds": self.fraction_backend_exceeds,
            "mean_norm_ratio": self.mean_norm_ratio,
            "steps": self.steps,
            "param_norm_drift": self.param_norm_drift,
        }


def _resolve_selector(model: nn.Module, prefix: str) -> list[torch.nn.Parameter]:
    params = [
        p
        for name, p in model.named_parameters()
        if name == prefix or name.startswith(prefix + ".")
    ]
    if not params:
        raise ValueError(
            f"selector {prefix!r} matches no parameters of {type(model).__name__}"
        )
    return params


class WatchHandle:
    """Live recorder over named parameter groups of one model."""

    def __init__(self, model: nn.Module, selectors: dict[str, str]):
        self._groups = {
            layer_id: _resolve_selector(model, prefix)
            for layer_id, prefix in selectors.items()
        }
        self.trace = NormTrace(watched_layers=tuple(selectors))
        self.attached = True

    def detach(self) -> None:
        self.attached = False

    def record(self, step: int) -> None:
        """Append one record per watched layer; no-op once detached."""
        if not self.attached:
            return
        if all(
            p.grad is None for params in self._groups.values() for p in params
        ):
            raise RuntimeError(
                "record() called with no gradients populated; run backward first"
            )
        for layer_id, params in self._groups.items():
            grad_sq = 0.0
            param_sq = 0.0
            for p in params:
                param_sq += float((p.detach().double() ** 2).sum())
                if p.grad is not None:
                    grad_sq += float((p.grad.detach().double() ** 2).sum())
            self.trace.records.append(
                NormRecord(
                    step=step,
                    layer_id=layer_id,
                    grad_norm=math.sqrt(grad_sq),
                    param_norm=math.sqrt(param_sq),
                )
            )


def watch(model: nn.Module, selectors: dict[str, str]) -> WatchHandle:
    return WatchHandle(model, selectors)


def dominance_report(
    trace: NormTrace,
    encoder_layer: str = ENCODER_LAYER,
    backend_layer: str = BACKEND_LAYER,
) -> DominanceReport:
    if not trace.records:
        raise ValueError("cannot build a dominance report from an empty trace")
    enc = {r.step: r for r in trace.series(encoder_layer)}
    back = {r.step: r for r in trace.series(backend_layer)}
    common = sorted(set(enc) & set(back))
    if not common:
        raise ValueError(
            f"layers {encoder_layer!r} and {backend_layer!r} share no recorded steps"
        )
    exceed = sum(1 for s in common if back[s].grad_norm > enc[s].grad_norm)
    ratios = [
        back[s].grad_norm / enc[s].grad_norm for s in common if enc[s].grad_norm > 0
    ]
    drift = {}
    for layer_id in (encoder_layer, backend_layer):
        series = trace.series(layer_id)
        drift[layer_id] = series[-1].param_norm - series[0].param_norm
    return DominanceReport(
        fraction_backend_exceeds=exceed / len(common),
        mean_norm_ratio=sum(ratios) / len(ratios) if ratios else float("nan"),
        steps=len(common),
        param_norm_drift=drift,
    )


def export_trace(trace: NormTrace, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "layer_id", "grad_norm", "param_norm"])
        for r in trace.records:
            writer.writerow([r.step, r.layer_id, repr(r.grad_norm), repr(r.param_norm)])


def load_trace(path: str | Path) -> NormTrace:
    records = []
    layers: dict[str, None] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            records.append(
                NormRecord(
                    step=int(row["step"]),
                    layer_id=row["layer_id"],
                    grad_norm=float(row["grad_norm"]),
                    param_norm=float(row["param_norm"]),
                )
            )
            layers.setdefault(row["layer_id"])
    return NormTrace(watched_layers=tuple(layers), records=records)


def _smooth(values: list[float], alpha: float | None) -> list[float]:
    if alpha is None:
        return values
    out = []
    acc = None
    for v in values:
        acc = v if acc is None else alpha * acc + (1 - alpha) * v
        out.append(acc)
    return out


def plot_trace(trace: NormTrace, png_path: str | Path, smooth: float | None = None) -> None:
    """Two stacked panels: gradient norm and parameter norm against step."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax_grad, ax_param) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    for layer_id in trace.watched_layers:
        series = trace.series(layer_id)
        steps = [r.step for r in series]
        ax_grad.plot(steps, _smooth([r.grad_norm for r in series], smooth), label=layer_id)
        ax_param.plot(steps, _smooth([r.param_norm for r in series], smooth), label=layer_id)
    ax_grad.set_ylabel("grad norm")
    ax_grad.legend()
    ax_param.set_ylabel("param norm")
    ax_param.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
