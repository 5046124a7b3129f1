"""Shift-guided residual adapters on the pooled output features of both
towers, plus the full tuned prediction pipeline.

Each adapter is layer norm -> expand -> ReLU -> contract, added back to its
input scaled by a coefficient derived from accumulated shift norms. By
default that coefficient is a gradient-stopped control signal: it scales
the adapter but routes no gradient into the shift norms (a flow-through
mode exists for experimentation).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat_rows,
    layer_norm_rows,
    matmul,
    mul,
    relu,
    scale,
)
from .encoder import (
    TEXT,
    VISION,
    BackboneWeights,
    classify,
    embed_image,
    embed_text,
)
from .prompts import PromptSet, encode_with_prompts
from .shift import ShiftCollector, ShiftRecord, shift_norm

ALPHA_MODES = ("dynamic", "fixed", "flow")


@dataclass
class AdapterWeights:
    ln_gain: Tensor
    ln_bias: Tensor
    w_up: Tensor
    w_down: Tensor
    ln_enabled: bool = True

    def tensors(self) -> list[Tensor]:
        return [self.ln_gain, self.ln_bias, self.w_up, self.w_down]


@dataclass
class SurgeryParams:
    vision: AdapterWeights
    text: AdapterWeights
    vision_gain: float
    text_gain: float
    hidden: int

    def __post_init__(self):
        if self.vision_gain < 0 or self.text_gain < 0:
            raise ValueError("surgery gains must be nonnegative")
        if self.hidden < 1:
            raise ValueError("surgery hidden width must be >= 1")

    def trainable(self) -> list[Tensor]:
        return self.vision.tensors() + self.text.tensors()

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, adapter in ((VISION, self.vision), (TEXT, self.text)):
            out[f"surgery.{name}.ln_gain"] = adapter.ln_gain.data
            out[f"surgery.{name}.ln_bias"] = adapter.ln_bias.data
            out[f"surgery.{name}.w_up"] = adapter.w_up.data
            out[f"surgery.{name}.w_down"] = adapter.w_down.data
        return out


def _init_adapter(rng: np.random.Generator, dim: int, hidden: int) -> AdapterWeights:
    # contraction starts at zero so the adapter begins as an exact identity
    return AdapterWeights(
        ln_gain=Tensor(np.ones((1, dim)), requires_grad=True),
        ln_bias=Tensor(np.zeros((1, dim)), requires_grad=True),
        w_up=Tensor(rng.standard_normal((dim, hidden)) / math.sqrt(dim), requires_grad=True),
        w_down=Tensor(np.zeros((hidden, dim)), requires_grad=True),
    )


def init_surgery(embed_dim: int, seed: int, hidden: int | None = None,
                 vision_gain: float = 0.1, text_gain: float = 0.1) -> SurgeryParams:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(32,)))
    h = hidden if hidden is not None else 4 * embed_dim
    return SurgeryParams(
        vision=_init_adapter(rng, embed_dim, h),
        text=_init_adapter(rng, embed_dim, h),
        vision_gain=vision_gain,
        text_gain=text_gain,
        hidden=h,
    )


def surgery_forward(x: Tensor, adapter: AdapterWeights, alpha) -> Tensor:
    """alpha * ReLU(LN(x) W_up) W_down + x; exact identity at alpha 0."""
    if not isinstance(alpha, Tensor) and alpha < 0:
        raise ValueError("surgery coefficient must be nonnegative")
    h = x
    if adapter.ln_enabled:
        h = add(mul(layer_norm_rows(x), adapter.ln_gain), adapter.ln_bias)
    branch = matmul(relu(matmul(h, adapter.w_up)), adapter.w_down)
    scaled = mul(branch, alpha) if isinstance(alpha, Tensor) else scale(branch, float(alpha))
    return add(x, scaled)


def compute_alpha(norms, gain: float) -> float:
    """Gain times the summed layer shift norms, as a plain scalar."""
    if gain < 0:
        raise ValueError("gain must be nonnegative")
    return float(gain) * float(sum(float(n) for n in norms))


def _alpha_tensor(omegas: list[Tensor], gain: float, rms: bool) -> Tensor:
    total = None
    for o in omegas:
        n = shift_norm(o, rms)
        total = n if total is None else add(total, n)
    return scale(total, gain)


@dataclass
class ForwardOptions:
    """Knobs of the tuned forward pass, shared by training and evaluation."""

    tau: float = 0.07
    use_tau: bool = True
    rms_shift_norm: bool = False
    stop_clean_gradient: bool = False
    alpha_mode: str = "dynamic"
    fixed_alpha: float = 0.1

    def __post_init__(self):
        if self.alpha_mode not in ALPHA_MODES:
            raise ValueError(f"unknown alpha mode {self.alpha_mode!r}")

    @property
    def effective_tau(self) -> float | None:
        return self.tau if self.use_tau else None


@dataclass
class BatchForward:
    probs: Tensor                  # (batch, classes)
    image_features: list[Tensor]   # post-surgery, pre-normalization
    text_features: list[Tensor]
    record: ShiftRecord
    alpha_vision: list
    alpha_text: object


def _image_alphas(sink: ShiftCollector, surgery: SurgeryParams, opts: ForwardOptions):
    """One coefficient per image, from that image's own shift norms."""
    if opts.alpha_mode == "fixed":
        return [opts.fixed_alpha] * len(sink.samples[VISION])
    if opts.alpha_mode == "flow":
        return [
            _alpha_tensor(omegas, surgery.vision_gain, opts.rms_shift_norm)
            for omegas in sink.samples[VISION]
        ]
    return [
        compute_alpha(norms, surgery.vision_gain)
        for norms in sink.per_sample_norms(VISION)
    ]


def _text_alpha(sink: ShiftCollector, record: ShiftRecord, surgery: SurgeryParams,
                opts: ForwardOptions):
    """One shared coefficient for the whole class set."""
    if opts.alpha_mode == "fixed":
        return opts.fixed_alpha
    if opts.alpha_mode == "flow":
        total = None
        for n in record.text_norms:
            total = n if total is None else add(total, n)
        return scale(total, surgery.text_gain)
    return compute_alpha([n.item() for n in record.text_norms], surgery.text_gain)


def tuned_forward_batch(images, class_sequences, prompts: PromptSet,
                        surgery: SurgeryParams | None, weights: BackboneWeights,
                        opts: ForwardOptions | None = None, step: int = 0) -> BatchForward:
    """Prompted forward of a batch of images against one class set.

    The text side is encoded once and shared across the batch. Shifts are
    collected for every sample; the surgery coefficients are recomputed
    from this pass's shift norms.
    """
    opts = opts or ForwardOptions(tau=weights.config.tau)
    cfg = weights.config
    sink = ShiftCollector(cfg.layers, rms=opts.rms_shift_norm,
                          stop_clean_gradient=opts.stop_clean_gradient)

    image_feats = []
    for img in images:
        sink.begin_sample(VISION)
        emb = embed_image(img, weights)
        image_feats.append(
            encode_with_prompts(emb, prompts.vision, weights.vision, VISION, weights, sink)
        )
    text_feats = []
    for seq in class_sequences:
        sink.begin_sample(TEXT)
        emb = embed_text(seq, weights)
        text_feats.append(
            encode_with_prompts(emb, prompts.text, weights.text, TEXT, weights, sink)
        )

    record = sink.build_record(step)
    alpha_v: list = [0.0] * len(image_feats)
    alpha_t = 0.0
    if surgery is not None:
        alpha_v = _image_alphas(sink, surgery, opts)
        alpha_t = _text_alpha(sink, record, surgery, opts)
        image_feats = [surgery_forward(f, surgery.vision, a) for f, a in zip(image_feats, alpha_v)]
        text_feats = [surgery_forward(f, surgery.text, alpha_t) for f in text_feats]

    batch = image_feats[0] if len(image_feats) == 1 else concat_rows(image_feats)
    class_matrix = text_feats[0] if len(text_feats) == 1 else concat_rows(text_feats)
    probs = classify(batch, class_matrix, opts.effective_tau)
    return BatchForward(
        probs=probs,
        image_features=image_feats,
        text_features=text_feats,
        record=record,
        alpha_vision=alpha_v,
        alpha_text=alpha_t,
    )


def tuned_predict(image, class_sequences, prompts: PromptSet,
                  surgery: SurgeryParams | None, weights: BackboneWeights,
                  opts: ForwardOptions | None = None, step: int = 0,
                  ) -> tuple[Tensor, ShiftRecord]:
    """Class probabilities and the shift record for a single image."""
    out = tuned_forward_batch([image], class_sequences, prompts, surgery, weights, opts, step)
    return out.probs, out.record
