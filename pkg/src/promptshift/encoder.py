"""Miniature two-tower transformer: a vision encoder over patch sequences
and a text encoder over synthetic token sequences, trained contrastively
and compared by cosine similarity at a fixed temperature.

Token layout of the synthetic vocabulary: ids ``0..template_len-1`` are the
fixed template, ``template_len + i`` is the class token of class ``i``, and
the final id is the end-of-sequence token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Graph,
    Tensor,
    add,
    concat_rows,
    l2_normalize_rows,
    layer_norm_rows,
    log,
    matmul,
    mul,
    neg,
    relu,
    scale,
    slice_rows,
    softmax_rows,
    sum_all,
    transpose,
)

VISION = "vision"
TEXT = "text"


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 4
    vision_width: int = 48
    text_width: int = 32
    embed_dim: int = 16
    heads: int = 4
    patch_count: int = 16
    patch_dim: int = 4
    template_len: int = 4
    class_count: int = 10
    tau: float = 0.07
    vocab_size: int | None = None

    def __post_init__(self):
        if self.layers < 1 or self.patch_count < 1 or self.template_len < 0:
            raise ValueError("layers >= 1, patch_count >= 1, template_len >= 0 required")
        if self.class_count < 2:
            raise ValueError("need at least two classes")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.vision_width % self.heads or self.text_width % self.heads:
            raise ValueError("tower widths must be divisible by the head count")

    @property
    def vocab(self) -> int:
        return self.vocab_size if self.vocab_size is not None else self.template_len + self.class_count + 1

    @property
    def eot_id(self) -> int:
        return self.vocab - 1

    @property
    def text_len(self) -> int:
        return self.template_len + 2

    def class_token_id(self, class_id: int) -> int:
        if not 0 <= class_id < self.class_count:
            raise ValueError(f"class id {class_id} out of range")
        return self.template_len + class_id

    def class_sequence(self, class_id: int) -> list[int]:
        """Template ids, then the class token, then the end token."""
        return list(range(self.template_len)) + [self.class_token_id(class_id), self.eot_id]


@dataclass
class BlockWeights:
    ln1_gain: Tensor
    ln1_bias: Tensor
    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    wo: list[Tensor]
    ln2_gain: Tensor
    ln2_bias: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def width(self) -> int:
        return self.ln1_gain.shape[1]

    def tensors(self) -> list[Tensor]:
        return (
            [self.ln1_gain, self.ln1_bias, self.ln2_gain, self.ln2_bias]
            + self.wq + self.wk + self.wv + self.wo
            + [self.w1, self.b1, self.w2, self.b2]
        )


@dataclass
class TowerWeights:
    blocks: list[BlockWeights]
    proj: Tensor

    def tensors(self) -> list[Tensor]:
        out = []
        for b in self.blocks:
            out.extend(b.tensors())
        out.append(self.proj)
        return out


@dataclass
class BackboneWeights:
    config: EncoderConfig
    vision: TowerWeights
    text: TowerWeights
    patch_embed: Tensor
    cls_token: Tensor
    pos_vision: Tensor
    token_table: Tensor
    pos_text: Tensor
    frozen: bool = False

    def parameters(self) -> list[Tensor]:
        return (
            self.vision.tensors()
            + self.text.tensors()
            + [self.patch_embed, self.cls_token, self.pos_vision, self.token_table, self.pos_text]
        )

    def freeze(self) -> None:
        """Drop gradient slots; the backbone stays untouched afterwards."""
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        self.frozen = True

    def named_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for tower_name, tower in ((VISION, self.vision), (TEXT, self.text)):
            for i, blk in enumerate(tower.blocks):
                base = f"{tower_name}.block{i}"
                out[f"{base}.ln1_gain"] = blk.ln1_gain.data
                out[f"{base}.ln1_bias"] = blk.ln1_bias.data
                out[f"{base}.ln2_gain"] = blk.ln2_gain.data
                out[f"{base}.ln2_bias"] = blk.ln2_bias.data
                for h in range(len(blk.wq)):
                    out[f"{base}.attn.q{h}"] = blk.wq[h].data
                    out[f"{base}.attn.k{h}"] = blk.wk[h].data
                    out[f"{base}.attn.v{h}"] = blk.wv[h].data
                    out[f"{base}.attn.o{h}"] = blk.wo[h].data
                out[f"{base}.mlp.w1"] = blk.w1.data
                out[f"{base}.mlp.b1"] = blk.b1.data
                out[f"{base}.mlp.w2"] = blk.w2.data
                out[f"{base}.mlp.b2"] = blk.b2.data
            out[f"{tower_name}.proj"] = tower.proj.data
        out["patch_embed"] = self.patch_embed.data
        out["cls_token"] = self.cls_token.data
        out["pos_vision"] = self.pos_vision.data
        out["token_table"] = self.token_table.data
        out["pos_text"] = self.pos_text.data
        return out

    @classmethod
    def from_named_arrays(cls, config: EncoderConfig, arrays: dict[str, np.ndarray],
                          frozen: bool = True) -> "BackboneWeights":
        def t(name):
            return Tensor(arrays[name])

        towers = {}
        for tower_name, width in ((VISION, config.vision_width), (TEXT, config.text_width)):
            blocks = []
            for i in range(config.layers):
                base = f"{tower_name}.block{i}"
                blocks.append(BlockWeights(
                    ln1_gain=t(f"{base}.ln1_gain"), ln1_bias=t(f"{base}.ln1_bias"),
                    wq=[t(f"{base}.attn.q{h}") for h in range(config.heads)],
                    wk=[t(f"{base}.attn.k{h}") for h in range(config.heads)],
                    wv=[t(f"{base}.attn.v{h}") for h in range(config.heads)],
                    wo=[t(f"{base}.attn.o{h}") for h in range(config.heads)],
                    ln2_gain=t(f"{base}.ln2_gain"), ln2_bias=t(f"{base}.ln2_bias"),
                    w1=t(f"{base}.mlp.w1"), b1=t(f"{base}.mlp.b1"),
                    w2=t(f"{base}.mlp.w2"), b2=t(f"{base}.mlp.b2"),
                ))
            towers[tower_name] = TowerWeights(blocks=blocks, proj=t(f"{tower_name}.proj"))
        return cls(
            config=config,
            vision=towers[VISION],
            text=towers[TEXT],
            patch_embed=t("patch_embed"),
            cls_token=t("cls_token"),
            pos_vision=t("pos_vision"),
            token_table=t("token_table"),
            pos_text=t("pos_text"),
            frozen=frozen,
        )


def _init_block(rng: np.random.Generator, width: int, heads: int, trainable: bool,
                residual_scale: float) -> BlockWeights:
    dh = width // heads
    hidden = 4 * width

    def w(rows, cols, gain=1.0):
        return Tensor(rng.standard_normal((rows, cols)) * (gain / math.sqrt(rows)),
                      requires_grad=trainable)

    # residual-branch outputs start small so blocks are near-identity; this
    # keeps activations and prompt-induced shifts at O(1) through the stack
    return BlockWeights(
        ln1_gain=Tensor(np.ones((1, width)), requires_grad=trainable),
        ln1_bias=Tensor(np.zeros((1, width)), requires_grad=trainable),
        wq=[w(width, dh) for _ in range(heads)],
        wk=[w(width, dh) for _ in range(heads)],
        wv=[w(width, dh) for _ in range(heads)],
        wo=[w(dh, width, gain=residual_scale) for _ in range(heads)],
        ln2_gain=Tensor(np.ones((1, width)), requires_grad=trainable),
        ln2_bias=Tensor(np.zeros((1, width)), requires_grad=trainable),
        w1=w(width, hidden),
        b1=Tensor(np.zeros((1, hidden)), requires_grad=trainable),
        w2=w(hidden, width, gain=residual_scale),
        b2=Tensor(np.zeros((1, width)), requires_grad=trainable),
    )


def init_backbone(config: EncoderConfig, seed: int, trainable: bool = True) -> BackboneWeights:
    """Random backbone; deterministic under seed."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(11,)))
    dv, dt = config.vision_width, config.text_width
    res = 1.0 / math.sqrt(2 * config.layers)
    vision = TowerWeights(
        blocks=[_init_block(rng, dv, config.heads, trainable, res) for _ in range(config.layers)],
        proj=Tensor(rng.standard_normal((dv, config.embed_dim)) / math.sqrt(dv), requires_grad=trainable),
    )
    text = TowerWeights(
        blocks=[_init_block(rng, dt, config.heads, trainable, res) for _ in range(config.layers)],
        proj=Tensor(rng.standard_normal((dt, config.embed_dim)) / math.sqrt(dt), requires_grad=trainable),
    )
    # text embeddings enter at unit scale, like patch rows on the vision
    # side; a mismatch here makes pretraining blow up the first text block
    # and with it the prompt-injection footprint
    return BackboneWeights(
        config=config,
        vision=vision,
        text=text,
        patch_embed=Tensor(rng.standard_normal((config.patch_dim, dv)) / math.sqrt(config.patch_dim),
                           requires_grad=trainable),
        cls_token=Tensor(rng.standard_normal((1, dv)), requires_grad=trainable),
        pos_vision=Tensor(rng.standard_normal((config.patch_count + 1, dv)) * 0.1, requires_grad=trainable),
        token_table=Tensor(rng.standard_normal((config.vocab, dt)), requires_grad=trainable),
        pos_text=Tensor(rng.standard_normal((config.text_len, dt)) * 0.1, requires_grad=trainable),
    )


# forward pieces -------------------------------------------------------------


def embed_image(patches, weights: BackboneWeights) -> Tensor:
    """Patch rows through the linear patch embedding, class token first,
    positional embeddings added."""
    cfg = weights.config
    arr = patches if isinstance(patches, Tensor) else Tensor(patches)
    if arr.data.ndim != 2 or arr.shape != (cfg.patch_count, cfg.patch_dim):
        raise ValueError(
            f"expected {cfg.patch_count}x{cfg.patch_dim} patches, got {arr.shape}"
        )
    rows = matmul(arr, weights.patch_embed)
    tokens = concat_rows([weights.cls_token, rows])
    return add(tokens, weights.pos_vision)


def embed_text(token_ids, weights: BackboneWeights) -> Tensor:
    """Embedding-table lookup plus positional embeddings; last row is the
    end token."""
    cfg = weights.config
    ids = list(int(i) for i in token_ids)
    if len(ids) != cfg.text_len:
        raise ValueError(f"expected sequence of length {cfg.text_len}, got {len(ids)}")
    for i in ids:
        if not 0 <= i < cfg.vocab:
            raise ValueError(f"token id {i} outside vocabulary of size {cfg.vocab}")
    rows = concat_rows([slice_rows(weights.token_table, i, i + 1) for i in ids])
    return add(rows, weights.pos_text)


def _affine_layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return add(mul(layer_norm_rows(x), gain), bias)


def block_forward(layer: BlockWeights, x: Tensor) -> Tensor:
    """Pre-layer-norm multi-head self-attention and MLP, both residual."""
    if x.data.ndim != 2 or x.shape[1] != layer.width:
        raise ValueError(f"token width {x.shape} does not match layer width {layer.width}")
    a = _affine_layer_norm(x, layer.ln1_gain, layer.ln1_bias)
    heads = len(layer.wq)
    dh = layer.wq[0].shape[1]
    attn = None
    for h in range(heads):
        q = matmul(a, layer.wq[h])
        k = matmul(a, layer.wk[h])
        v = matmul(a, layer.wv[h])
        scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(dh))
        ctx = matmul(softmax_rows(scores), v)
        out_h = matmul(ctx, layer.wo[h])
        attn = out_h if attn is None else add(attn, out_h)
    x = add(x, attn)
    b = _affine_layer_norm(x, layer.ln2_gain, layer.ln2_bias)
    hidden = relu(add(matmul(b, layer.w1), layer.b1))
    return add(x, add(matmul(hidden, layer.w2), layer.b2))


def pool_and_project(encoded: Tensor, tower: str, weights: BackboneWeights) -> Tensor:
    """Class-token row for vision, end-token row for text; project to the
    shared space and L2-normalize."""
    if encoded.data.ndim != 2 or encoded.shape[0] == 0:
        raise ValueError(f"cannot pool shape {encoded.shape}")
    if tower == VISION:
        row = slice_rows(encoded, 0, 1)
        proj = weights.vision.proj
    elif tower == TEXT:
        row = slice_rows(encoded, encoded.shape[0] - 1, encoded.shape[0])
        proj = weights.text.proj
    else:
        raise ValueError(f"unknown tower {tower!r}")
    return l2_normalize_rows(matmul(row, proj))


def encode_image(patches, weights: BackboneWeights) -> Tensor:
    x = embed_image(patches, weights)
    for blk in weights.vision.blocks:
        x = block_forward(blk, x)
    return pool_and_project(x, VISION, weights)


def encode_text(token_ids, weights: BackboneWeights) -> Tensor:
    x = embed_text(token_ids, weights)
    for blk in weights.text.blocks:
        x = block_forward(blk, x)
    return pool_and_project(x, TEXT, weights)


def classify(x: Tensor, class_features: Tensor, tau: float | None) -> Tensor:
    """Softmax over cosine similarities; rows of the output sum to one.

    ``tau`` of None skips temperature scaling."""
    if tau is not None and tau <= 0:
        raise ValueError("temperature must be positive")
    xn = l2_normalize_rows(x if isinstance(x, Tensor) else Tensor(x))
    wn = l2_normalize_rows(class_features if isinstance(class_features, Tensor) else Tensor(class_features))
    logits = matmul(xn, transpose(wn))
    if tau is not None:
        logits = scale(logits, 1.0 / tau)
    return softmax_rows(logits)


def class_feature_matrix(weights: BackboneWeights, class_ids) -> Tensor:
    """Encoded class-name features, one row per class, prompt-free."""
    rows = [encode_text(weights.config.class_sequence(c), weights) for c in class_ids]
    return concat_rows(rows)


def zero_shot_probs(patches, weights: BackboneWeights, class_ids) -> np.ndarray:
    feats = class_feature_matrix(weights, class_ids)
    return classify(encode_image(patches, weights), feats, weights.config.tau).data[0]


# contrastive pretraining -----------------------------------------------------


@dataclass
class PretrainSettings:
    lr: float = 0.01
    momentum: float = 0.9
    steps: int = 2000
    batch_size: int = 32
    log_every: int = 0


class SgdOptimizer:
    """Plain SGD with optional momentum over a fixed parameter list."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if self.momentum:
                v *= self.momentum
                v += p.grad
                p.data -= self.lr * v
            else:
                p.data -= self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def symmetric_contrastive_loss(image_feats: Tensor, text_feats: Tensor, tau: float) -> Tensor:
    """Mean of image-to-text and text-to-image cross-entropy over in-batch
    cosine similarities; features must already be unit rows."""
    n = image_feats.shape[0]
    sims = scale(matmul(image_feats, transpose(text_feats)), 1.0 / tau)
    eye = Tensor(np.eye(n))
    i2t = neg(scale(sum_all(mul(log(softmax_rows(sims)), eye)), 1.0 / n))
    t2i = neg(scale(sum_all(mul(log(softmax_rows(transpose(sims))), eye)), 1.0 / n))
    return scale(add(i2t, t2i), 0.5)


def pretrain_contrastive(images: np.ndarray, labels: np.ndarray, config: EncoderConfig,
                         opt: PretrainSettings | None = None, seed: int = 0,
                         ) -> tuple[BackboneWeights, list[float]]:
    """Train both towers on paired image/class-text batches, then freeze.

    Returns the frozen weights and the per-step loss history.
    """
    opt = opt or PretrainSettings()
    if opt.batch_size < 2:
        raise ValueError("contrastive pretraining needs batch size >= 2 for negatives")
    present = set(int(v) for v in labels)
    if present != set(range(config.class_count)):
        raise ValueError("pretraining data must cover every class")

    weights = init_backbone(config, seed=seed, trainable=True)
    optimizer = SgdOptimizer(weights.parameters(), lr=opt.lr, momentum=opt.momentum)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(12,)))
    sequences = {c: config.class_sequence(c) for c in range(config.class_count)}

    losses: list[float] = []
    for step in range(opt.steps):
        idx = rng.choice(len(images), size=opt.batch_size, replace=False)
        batch_labels = [int(labels[i]) for i in idx]
        with Graph() as g:
            feats = concat_rows([encode_image(images[i], weights) for i in idx])
            # encode each distinct class once, then gather per sample
            distinct = sorted(set(batch_labels))
            encoded = {c: encode_text(sequences[c], weights) for c in distinct}
            texts = concat_rows([encoded[c] for c in batch_labels])
            loss = symmetric_contrastive_loss(feats, texts, config.tau)
            g.backward()
        losses.append(loss.item())
        optimizer.step()
        optimizer.zero_grad()
        if opt.log_every and step % opt.log_every == 0:
            print(f"pretrain step {step}: loss {losses[-1]:.4f}")

    weights.freeze()
    return weights, losses
