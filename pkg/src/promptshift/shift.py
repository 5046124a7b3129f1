"""Feature shift: the per-layer difference between a block's output with
prompts injected and a prompt-free application of the same block to the
same input, plus the cross-modal consistency loss over shift norms.

The clean branch is a per-layer counterfactual hanging off the prompted
trunk, not a separate prompt-free trunk. It stays in the autodiff graph:
prompts never enter it directly, but the layer input itself depends on
earlier prompts and those gradients are kept (a flag can stop them).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, add, frobenius_norm, neg, scale, square, sub
from .encoder import TEXT, VISION, BlockWeights, block_forward
from .prompts import prompted_block_forward


def shifted_block(layer: BlockWeights, prompt: Tensor | None, tokens: Tensor,
                  stop_clean_gradient: bool = False) -> tuple[Tensor, Tensor]:
    """Prompted output (prompt rows discarded) and its shift against the
    clean counterfactual of the same block on the same input."""
    prompted = prompted_block_forward(layer, prompt, tokens)
    clean_in = tokens.detach() if stop_clean_gradient else tokens
    clean = block_forward(layer, clean_in)
    omega = sub(prompted, clean)
    return prompted, omega


def shift_norm(omega: Tensor, rms: bool = False) -> Tensor:
    """Frobenius norm; the RMS variant divides by sqrt(element count)."""
    n = frobenius_norm(omega)
    if rms:
        return scale(n, 1.0 / math.sqrt(omega.data.size))
    return n


def fs_layer_loss(omega_v: Tensor, omega_t: Tensor, rms: bool = False) -> Tensor:
    """Squared difference of the two scalar shift norms. Shapes may differ
    across modalities; the comparison is between scalars."""
    return square(sub(shift_norm(omega_v, rms), shift_norm(omega_t, rms)))


@dataclass
class ShiftRecord:
    """Per-layer shift tensors and norms for both modalities at one step.

    For batched passes the per-layer tensor stacks every sample's shift
    row-wise, so its Frobenius norm is the root-sum-of-squares of the
    per-sample norms.
    """

    step: int
    vision_shifts: list[Tensor]
    text_shifts: list[Tensor]
    vision_norms: list[Tensor]
    text_norms: list[Tensor]
    fs_loss: Tensor | None = None

    def vision_norm_values(self) -> list[float]:
        return [n.item() for n in self.vision_norms]

    def text_norm_values(self) -> list[float]:
        return [n.item() for n in self.text_norms]

    def fs_value(self) -> float:
        return self.fs_loss.item() if self.fs_loss is not None else 0.0

    def drop_tensors(self) -> "ShiftSummary":
        """Collapse to a plain-float summary for long-lived telemetry."""
        return ShiftSummary(
            step=self.step,
            vision_norms=self.vision_norm_values(),
            text_norms=self.text_norm_values(),
            fs_loss=self.fs_value(),
        )


@dataclass
class ShiftSummary:
    step: int
    vision_norms: list[float]
    text_norms: list[float]
    fs_loss: float
    ce_loss: float = float("nan")
    total_loss: float = float("nan")

    @property
    def layers(self) -> int:
        return max(len(self.vision_norms), len(self.text_norms))

    def norm_discrepancy(self) -> float:
        """Mean over layers of |vision norm - text norm|."""
        v, t = self.vision_norms, self.text_norms
        if not v or not t:
            return float("nan")
        return float(np.mean([abs(a - b) for a, b in zip(v, t)]))


def fs_total_loss(record: ShiftRecord, rms: bool = False) -> Tensor:
    """Hierarchical consistency loss: sum of per-layer squared norm gaps."""
    if not record.vision_shifts or not record.text_shifts:
        raise ValueError("fs loss requires both modalities")
    if len(record.vision_shifts) != len(record.text_shifts):
        raise ValueError("fs loss needs matching layer counts across modalities")
    total = None
    for ov, ot in zip(record.vision_shifts, record.text_shifts):
        term = fs_layer_loss(ov, ot, rms)
        total = term if total is None else add(total, term)
    return total


def fs_total_from_norms(vision_norms: list[Tensor], text_norms: list[Tensor]) -> Tensor:
    """Same loss, starting from already-built norm scalars."""
    if not vision_norms or not text_norms:
        raise ValueError("fs loss requires both modalities")
    total = None
    for nv, nt in zip(vision_norms, text_norms):
        term = square(sub(nv, nt))
        total = term if total is None else add(total, term)
    return total


class ShiftCollector:
    """Observes prompted block transitions and keeps per-sample shifts.

    ``observe_block`` is the hook :func:`promptshift.prompts.encode_with_prompts`
    calls; it returns the prompted output unchanged, so collection is
    passive. Call ``begin_sample`` before each encoded sequence.
    """

    def __init__(self, layers: int, rms: bool = False, stop_clean_gradient: bool = False):
        self.layers = layers
        self.rms = rms
        self.stop_clean_gradient = stop_clean_gradient
        self.samples: dict[str, list[list[Tensor]]] = {VISION: [], TEXT: []}

    def begin_sample(self, tower: str) -> None:
        self.samples[tower].append([])

    def observe_block(self, layer, prompt, tokens, tower: str, layer_idx: int) -> Tensor:
        prompted, omega = shifted_block(layer, prompt, tokens, self.stop_clean_gradient)
        self.samples[tower][-1].append(omega)
        return prompted

    def per_sample_norms(self, tower: str) -> list[list[float]]:
        """Plain-float per-sample, per-layer norms (no graph nodes)."""
        out = []
        for layers in self.samples[tower]:
            norms = [float(np.sqrt((o.data ** 2).sum())) for o in layers]
            if self.rms:
                norms = [n / math.sqrt(o.data.size) for n, o in zip(norms, layers)]
            out.append(norms)
        return out

    def stacked_shifts(self, tower: str) -> list[Tensor]:
        """Per-layer shift tensors with all samples stacked row-wise."""
        from .autodiff import concat_rows

        samples = self.samples[tower]
        if not samples:
            return []
        stacked = []
        for l in range(self.layers):
            layer_shifts = [s[l] for s in samples]
            stacked.append(layer_shifts[0] if len(layer_shifts) == 1 else concat_rows(layer_shifts))
        return stacked

    def build_record(self, step: int = 0) -> ShiftRecord:
        vision = self.stacked_shifts(VISION)
        text = self.stacked_shifts(TEXT)
        return ShiftRecord(
            step=step,
            vision_shifts=vision,
            text_shifts=text,
            vision_norms=[shift_norm(o, self.rms) for o in vision],
            text_norms=[shift_norm(o, self.rms) for o in text],
        )
