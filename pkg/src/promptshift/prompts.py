"""Per-layer, per-modality learnable prompts, injected by row concatenation
and discarded after every block. Fresh prompts enter at each layer, so
outputs at prompt positions never propagate.

Modes: ``lpt`` (text prompts only), ``vpt`` (vision only), ``ivlp`` (both).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat_rows, slice_rows
from .encoder import (
    TEXT,
    VISION,
    BackboneWeights,
    BlockWeights,
    EncoderConfig,
    TowerWeights,
    block_forward,
    pool_and_project,
)

PROMPT_MODES = ("lpt", "vpt", "ivlp")
PROMPT_INIT_STD = 0.02


@dataclass
class PromptSet:
    vision: list[Tensor | None]
    text: list[Tensor | None]
    mode: str

    @property
    def layers(self) -> int:
        return len(self.vision)

    def trainable(self) -> list[Tensor]:
        return [t for t in self.vision + self.text if t is not None]

    def for_tower(self, tower: str) -> list[Tensor | None]:
        return self.vision if tower == VISION else self.text

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for tower, entries in ((VISION, self.vision), (TEXT, self.text)):
            for i, t in enumerate(entries):
                if t is not None:
                    out[f"prompt.{tower}.layer{i}"] = t.data
        return out


def normalize_mode(mode: str) -> str:
    m = mode.lower()
    if m not in PROMPT_MODES:
        raise ValueError(f"unknown prompt mode {mode!r}")
    return m


def init_prompts(a: int, b: int, config: EncoderConfig, seed: int, mode: str = "ivlp") -> PromptSet:
    """Fresh prompts, entries drawn N(0, 0.02); mode may force one side empty."""
    if a < 0 or b < 0:
        raise ValueError("prompt counts must be nonnegative")
    mode = normalize_mode(mode)
    a_eff = 0 if mode == "lpt" else a
    b_eff = 0 if mode == "vpt" else b
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(31,)))
    vision, text = [], []
    for _ in range(config.layers):
        vision.append(
            Tensor(rng.standard_normal((a_eff, config.vision_width)) * PROMPT_INIT_STD,
                   requires_grad=True)
            if a_eff else None
        )
        text.append(
            Tensor(rng.standard_normal((b_eff, config.text_width)) * PROMPT_INIT_STD,
                   requires_grad=True)
            if b_eff else None
        )
    return PromptSet(vision=vision, text=text, mode=mode)


def inject(prompt: Tensor | None, tokens: Tensor) -> Tensor:
    """Prompt rows first, original tokens after, order preserved."""
    if prompt is None:
        return tokens
    return concat_rows([prompt, tokens])


def prompted_block_forward(layer: BlockWeights, prompt: Tensor | None, tokens: Tensor) -> Tensor:
    """Run the block on [prompt, tokens] and drop the prompt-position rows."""
    out = block_forward(layer, inject(prompt, tokens))
    if prompt is None:
        return out
    p = prompt.shape[0]
    return slice_rows(out, p, p + tokens.shape[0])


def encode_with_prompts(embedded: Tensor, prompt_list, tower: TowerWeights, tower_tag: str,
                        weights: BackboneWeights, shift_sink=None) -> Tensor:
    """Prompted pass through every block, then pool.

    A shift sink, when given, observes each block transition; observation
    never changes the forward value.
    """
    if len(prompt_list) != len(tower.blocks):
        raise ValueError(
            f"need one prompt entry per layer ({len(tower.blocks)}), got {len(prompt_list)}"
        )
    x = embedded
    for idx, blk in enumerate(tower.blocks):
        if shift_sink is not None:
            x = shift_sink.observe_block(blk, prompt_list[idx], x, tower_tag, idx)
        else:
            x = prompted_block_forward(blk, prompt_list[idx], x)
    return pool_and_project(x, tower_tag, weights)
