"""Few-shot tuning loop, base-to-novel evaluation, ablation sweeps, and
telemetry export.

Tuning minimizes cross-entropy plus ``lambda_fs`` times the cross-modal
shift-consistency loss, by minibatch SGD over the support set. Only
prompts and surgery parameters move; the backbone stays frozen.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Graph, Tensor, add, log, mul, neg, scale, sum_all
from .data import FewShotTask, SyntheticCorpus
from .encoder import TEXT, VISION, BackboneWeights, SgdOptimizer, classify, embed_image
from .prompts import PromptSet, encode_with_prompts, init_prompts
from .shift import ShiftCollector, ShiftSummary, fs_total_from_norms
from .surgery import ForwardOptions, SurgeryParams, init_surgery, tuned_forward_batch

MODES = ("lpt", "vpt", "ivlp", "restore", "restore_no_surgery", "fixed_alpha")

# ablation rows mirror: plain consistency loss, fixed-coefficient adapters,
# and shift-guided adapters
ABLATION_MODES = ("restore_no_surgery", "fixed_alpha", "restore")


class NonFiniteLossError(RuntimeError):
    """Training loss left the reals; carries the last shift summary."""

    def __init__(self, step: int, value: float, summary: ShiftSummary | None):
        self.step = step
        self.summary = summary
        detail = f" last shift record: {summary}" if summary is not None else ""
        super().__init__(f"non-finite loss {value} at step {step};{detail}")


@dataclass
class TrainConfig:
    mode: str = "restore"
    lambda_fs: float = 1.0
    lr: float = 0.0035
    batch_size: int = 4
    epochs: int = 10
    shots: int = 16
    seed: int = 0
    prompt_len_vision: int = 2
    prompt_len_text: int = 2
    gamma: float = 0.1
    beta: float = 0.1
    tau: float = 0.07
    momentum: float = 0.0
    use_tau_in_tuning: bool = True
    rms_shift_norm: bool = False
    stop_clean_gradient: bool = False
    alpha_flow: bool = False
    fixed_alpha: float = 0.1
    surgery_hidden: int | None = None
    data_seed: int = 0
    per_class: int = 64
    noise: float = 1.0

    def __post_init__(self):
        self.mode = self.mode.lower()
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.lambda_fs < 0:
            raise ValueError("lambda_fs must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1 or self.shots < 1:
            raise ValueError("batch_size, epochs and shots must be positive")

    @property
    def prompt_mode(self) -> str:
        return self.mode if self.mode in ("lpt", "vpt") else "ivlp"

    @property
    def uses_surgery(self) -> bool:
        return self.mode in ("restore", "fixed_alpha")

    @property
    def uses_fs_loss(self) -> bool:
        return self.mode not in ("lpt", "vpt") and self.lambda_fs > 0

    def forward_options(self) -> ForwardOptions:
        if self.mode == "fixed_alpha":
            alpha_mode = "fixed"
        elif self.alpha_flow:
            alpha_mode = "flow"
        else:
            alpha_mode = "dynamic"
        return ForwardOptions(
            tau=self.tau,
            use_tau=self.use_tau_in_tuning,
            rms_shift_norm=self.rms_shift_norm,
            stop_clean_gradient=self.stop_clean_gradient,
            alpha_mode=alpha_mode,
            fixed_alpha=self.fixed_alpha,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**payload)


@dataclass
class TuneResult:
    prompts: PromptSet
    surgery: SurgeryParams | None
    telemetry: list[ShiftSummary]
    config: TrainConfig


def _cross_entropy(probs: Tensor, label_positions: list[int]) -> Tensor:
    """Mean negative log-probability of the true classes."""
    n, k = probs.shape
    onehot = np.zeros((n, k))
    for row, pos in enumerate(label_positions):
        onehot[row, pos] = 1.0
    picked = sum_all(mul(log(probs), Tensor(onehot)))
    return neg(scale(picked, 1.0 / n))


def tune(task: FewShotTask, weights: BackboneWeights, cfg: TrainConfig) -> TuneResult:
    """Minibatch SGD over the support set; returns tuned parameters and the
    per-step shift telemetry."""
    if not weights.frozen:
        raise ValueError("backbone must be frozen before tuning")

    cfg_enc = weights.config
    prompts = init_prompts(cfg.prompt_len_vision, cfg.prompt_len_text, cfg_enc,
                           seed=cfg.seed, mode=cfg.prompt_mode)
    surgery = None
    if cfg.uses_surgery:
        surgery = init_surgery(cfg_enc.embed_dim, seed=cfg.seed, hidden=cfg.surgery_hidden,
                               vision_gain=cfg.gamma, text_gain=cfg.beta)

    if cfg.mode in ("lpt", "vpt") and cfg.lambda_fs > 0:
        warnings.warn(
            f"{cfg.mode} tunes a single modality; the shift-consistency loss is skipped",
            RuntimeWarning,
            stacklevel=2,
        )

    params = prompts.trainable() + (surgery.trainable() if surgery else [])
    optimizer = SgdOptimizer(params, lr=cfg.lr, momentum=cfg.momentum)
    opts = cfg.forward_options()

    class_ids = list(task.base_class_ids)
    position = {c: i for i, c in enumerate(class_ids)}
    sequences = [cfg_enc.class_sequence(c) for c in class_ids]

    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(41,)))
    n = len(task.support_images)
    telemetry: list[ShiftSummary] = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            images = [task.support_images[i] for i in batch]
            labels = [position[int(task.support_labels[i])] for i in batch]
            with Graph() as g:
                out = tuned_forward_batch(images, sequences, prompts, surgery,
                                          weights, opts, step=step)
                ce = _cross_entropy(out.probs, labels)
                if cfg.uses_fs_loss:
                    fs = fs_total_from_norms(out.record.vision_norms, out.record.text_norms)
                    out.record.fs_loss = fs
                    total = add(ce, scale(fs, cfg.lambda_fs))
                else:
                    total = ce
                summary = out.record.drop_tensors()
                summary.ce_loss = ce.item()
                summary.total_loss = total.item()
                if not np.isfinite(summary.total_loss):
                    raise NonFiniteLossError(step, summary.total_loss,
                                             telemetry[-1] if telemetry else summary)
                g.backward()
            optimizer.step()
            optimizer.zero_grad()
            telemetry.append(summary)
            step += 1
    return TuneResult(prompts=prompts, surgery=surgery, telemetry=telemetry, config=cfg)


# evaluation ------------------------------------------------------------------


def harmonic_mean(base: float, novel: float) -> float:
    if base < 0 or novel < 0:
        raise ValueError("accuracies must be nonnegative")
    if base + novel == 0:
        return 0.0
    return 2.0 * base * novel / (base + novel)


@dataclass
class EvalReport:
    base_acc: float
    novel_acc: float
    hm: float
    per_class_acc: dict[int, float]
    mean_vision_shift: float
    mean_text_shift: float
    final_fs_loss: float

    def to_dict(self) -> dict:
        return {
            "base_acc": self.base_acc,
            "novel_acc": self.novel_acc,
            "hm": self.hm,
            "per_class_acc": {str(k): v for k, v in sorted(self.per_class_acc.items())},
            "mean_vision_shift": self.mean_vision_shift,
            "mean_text_shift": self.mean_text_shift,
            "final_fs_loss": self.final_fs_loss,
        }


def _encode_class_features(class_ids, prompts, surgery, weights, opts):
    """Post-surgery class features; the text coefficient comes from this
    class set's own shifts."""
    from .surgery import _text_alpha, surgery_forward

    cfg = weights.config
    sink = ShiftCollector(cfg.layers, rms=opts.rms_shift_norm,
                          stop_clean_gradient=opts.stop_clean_gradient)
    feats = []
    for c in class_ids:
        sink.begin_sample(TEXT)
        from .encoder import embed_text

        emb = embed_text(cfg.class_sequence(c), weights)
        feats.append(encode_with_prompts(emb, prompts.text, weights.text, TEXT, weights, sink))
    if surgery is not None:
        record = sink.build_record()
        alpha_t = _text_alpha(sink, record, surgery, opts)
        feats = [surgery_forward(f, surgery.text, alpha_t) for f in feats]
    return np.concatenate([f.data for f in feats], axis=0)


def _encode_image_feature(image, prompts, surgery, weights, opts):
    from .surgery import _image_alphas, surgery_forward

    cfg = weights.config
    sink = ShiftCollector(cfg.layers, rms=opts.rms_shift_norm,
                          stop_clean_gradient=opts.stop_clean_gradient)
    sink.begin_sample(VISION)
    emb = embed_image(image, weights)
    feat = encode_with_prompts(emb, prompts.vision, weights.vision, VISION, weights, sink)
    if surgery is not None:
        alpha = _image_alphas(sink, surgery, opts)[0]
        feat = surgery_forward(feat, surgery.vision, alpha)
    return feat


def _accuracy(images, labels, class_ids, prompts, surgery, weights, opts):
    class_feats = _encode_class_features(class_ids, prompts, surgery, weights, opts)
    hits_per_class: dict[int, list[int]] = {c: [] for c in class_ids}
    for image, label in zip(images, labels):
        feat = _encode_image_feature(image, prompts, surgery, weights, opts)
        probs = classify(feat, Tensor(class_feats), opts.effective_tau)
        predicted = class_ids[int(np.argmax(probs.data[0]))]
        hits_per_class[int(label)].append(int(predicted == int(label)))
    per_class = {c: 100.0 * float(np.mean(h)) if h else float("nan")
                 for c, h in hits_per_class.items()}
    overall = 100.0 * float(np.mean([hit for h in hits_per_class.values() for hit in h]))
    return overall, per_class


def evaluate(task: FewShotTask, artifacts: TuneResult, weights: BackboneWeights) -> EvalReport:
    """Base and novel accuracy with the tuned prompts and surgery; novel
    classes are scored zero-shot over their unseen class tokens."""
    if len(task.base_test_images) == 0 or len(task.novel_test_images) == 0:
        raise ValueError("evaluation needs nonempty base and novel test sets")
    cfg = artifacts.config
    opts = cfg.forward_options()
    base_acc, base_table = _accuracy(task.base_test_images, task.base_test_labels,
                                     task.base_class_ids, artifacts.prompts,
                                     artifacts.surgery, weights, opts)
    novel_acc, novel_table = _accuracy(task.novel_test_images, task.novel_test_labels,
                                       task.novel_class_ids, artifacts.prompts,
                                       artifacts.surgery, weights, opts)
    telemetry = artifacts.telemetry
    mean_v = float(np.mean([np.mean(s.vision_norms) for s in telemetry
                            if s.vision_norms])) if telemetry else float("nan")
    mean_t = float(np.mean([np.mean(s.text_norms) for s in telemetry
                            if s.text_norms])) if telemetry else float("nan")
    final_fs = telemetry[-1].fs_loss if telemetry else float("nan")
    return EvalReport(
        base_acc=base_acc,
        novel_acc=novel_acc,
        hm=harmonic_mean(base_acc, novel_acc),
        per_class_acc={**base_table, **novel_table},
        mean_vision_shift=mean_v,
        mean_text_shift=mean_t,
        final_fs_loss=final_fs,
    )


# sweeps ----------------------------------------------------------------------


@dataclass
class AblationCell:
    lambda_fs: float
    mode: str
    seeds: list[int]
    base: list[float]
    novel: list[float]
    hm: list[float]

    def mean_std(self, values):
        return float(np.mean(values)), float(np.std(values))


def run_single(corpus: SyntheticCorpus, weights: BackboneWeights, cfg: TrainConfig,
               ) -> tuple[EvalReport, TuneResult]:
    from .data import split_base_novel

    task = split_base_novel(corpus, shots=cfg.shots, seed=cfg.seed)
    artifacts = tune(task, weights, cfg)
    return evaluate(task, artifacts, weights), artifacts


def run_ablation(corpus: SyntheticCorpus, weights: BackboneWeights, cfg: TrainConfig,
                 grid, seeds, modes=ABLATION_MODES, out_csv=None,
                 verbose: bool = False) -> list[AblationCell]:
    """Sweep lambda values and surgery modes over matched seeds."""
    grid = list(grid)
    if not grid:
        raise ValueError("empty lambda grid")
    cells: list[AblationCell] = []
    for lam in grid:
        for mode in modes:
            cell = AblationCell(lambda_fs=float(lam), mode=mode, seeds=list(seeds),
                                base=[], novel=[], hm=[])
            for seed in seeds:
                run_cfg = replace(cfg, lambda_fs=float(lam), mode=mode, seed=int(seed))
                report, _ = run_single(corpus, weights, run_cfg)
                cell.base.append(report.base_acc)
                cell.novel.append(report.novel_acc)
                cell.hm.append(report.hm)
                if verbose:
                    print(f"lambda={lam} mode={mode} seed={seed}: "
                          f"base={report.base_acc:.2f} novel={report.novel_acc:.2f} "
                          f"hm={report.hm:.2f}")
            cells.append(cell)
    if out_csv is not None:
        write_ablation_csv(cells, out_csv)
    return cells


def write_ablation_csv(cells: list[AblationCell], path) -> None:
    lines = ["lambda_fs,mode,base_mean,base_std,novel_mean,novel_std,hm_mean,hm_std,seeds"]
    for cell in cells:
        bm, bs = cell.mean_std(cell.base)
        nm, ns = cell.mean_std(cell.novel)
        hm, hs = cell.mean_std(cell.hm)
        seeds = ";".join(str(s) for s in cell.seeds)
        lines.append(
            f"{cell.lambda_fs!r},{cell.mode},{bm!r},{bs!r},{nm!r},{ns!r},{hm!r},{hs!r},{seeds}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


# telemetry export ------------------------------------------------------------

TELEMETRY_HEADER = "step,layer,modality,norm,fs_loss"


def write_telemetry_csv(telemetry: list[ShiftSummary], path) -> None:
    """One row per (step, layer, modality); fs_loss repeats the step total."""
    lines = [TELEMETRY_HEADER]
    for s in telemetry:
        for layer, norm in enumerate(s.vision_norms):
            lines.append(f"{s.step},{layer},{VISION},{norm!r},{s.fs_loss!r}")
        for layer, norm in enumerate(s.text_norms):
            lines.append(f"{s.step},{layer},{TEXT},{norm!r},{s.fs_loss!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_telemetry_csv(path) -> list[ShiftSummary]:
    rows = Path(path).read_text().strip().splitlines()
    if not rows or rows[0] != TELEMETRY_HEADER:
        raise ValueError(f"{path}: not a telemetry file")
    by_step: dict[int, ShiftSummary] = {}
    for line in rows[1:]:
        step_s, layer_s, modality, norm_s, fs_s = line.split(",")
        step = int(step_s)
        summary = by_step.setdefault(
            step, ShiftSummary(step=step, vision_norms=[], text_norms=[], fs_loss=float(fs_s))
        )
        (summary.vision_norms if modality == VISION else summary.text_norms).append(float(norm_s))
    return [by_step[k] for k in sorted(by_step)]


def shift_telemetry_stats(telemetry: list[ShiftSummary]) -> dict:
    """Per-layer and overall average shift norms plus the cross-modal
    norm discrepancy, averaged over steps."""
    if not telemetry:
        raise ValueError("empty telemetry stream")
    layers = telemetry[0].layers
    v = np.array([s.vision_norms if s.vision_norms else [0.0] * layers for s in telemetry])
    t = np.array([s.text_norms if s.text_norms else [0.0] * layers for s in telemetry])
    per_layer_v = v.mean(axis=0)
    per_layer_t = t.mean(axis=0)
    per_layer_gap = np.abs(v - t).mean(axis=0)
    return {
        "steps": len(telemetry),
        "vision_norm_per_layer": [float(x) for x in per_layer_v],
        "text_norm_per_layer": [float(x) for x in per_layer_t],
        "vision_norm_mean": float(per_layer_v.mean()),
        "text_norm_mean": float(per_layer_t.mean()),
        "discrepancy_per_layer": [float(x) for x in per_layer_gap],
        "discrepancy_mean": float(per_layer_gap.mean()),
        "final_fs_loss": telemetry[-1].fs_loss,
    }


def export_embeddings(task: FewShotTask, artifacts: TuneResult,
                      weights: BackboneWeights) -> list[tuple[str, int, np.ndarray]]:
    """Final pooled embeddings of all test samples and class features, for
    external projection tools."""
    opts = artifacts.config.forward_options()
    rows: list[tuple[str, int, np.ndarray]] = []
    for split, images, labels in (
        ("base_test", task.base_test_images, task.base_test_labels),
        ("novel_test", task.novel_test_images, task.novel_test_labels),
    ):
        for image, label in zip(images, labels):
            feat = _encode_image_feature(image, artifacts.prompts, artifacts.surgery,
                                         weights, opts)
            rows.append((f"image_{split}", int(label), feat.data[0].copy()))
    for group, ids in (("base", task.base_class_ids), ("novel", task.novel_class_ids)):
        feats = _encode_class_features(ids, artifacts.prompts, artifacts.surgery, weights, opts)
        for c, row in zip(ids, feats):
            rows.append((f"class_{group}", int(c), row.copy()))
    return rows


def write_embeddings_csv(rows, path, embed_dim: int) -> None:
    header = "kind,label," + ",".join(f"e{i}" for i in range(embed_dim))
    lines = [header]
    for kind, label, vec in rows:
        lines.append(f"{kind},{label}," + ",".join(repr(float(x)) for x in vec))
    Path(path).write_text("\n".join(lines) + "\n")


def shift_report(telemetry: list[ShiftSummary], out_dir, embeddings=None,
                 embed_dim: int | None = None) -> dict[str, str]:
    """Write the telemetry CSV, the summary JSON, and optionally the
    embedding CSV; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    telemetry_path = out / "telemetry.csv"
    write_telemetry_csv(telemetry, telemetry_path)
    paths["telemetry"] = str(telemetry_path)
    summary_path = out / "shift_summary.json"
    summary_path.write_text(json.dumps(shift_telemetry_stats(telemetry), indent=2, sort_keys=True) + "\n")
    paths["summary"] = str(summary_path)
    if embeddings is not None:
        if embed_dim is None:
            embed_dim = len(embeddings[0][2])
        emb_path = out / "embeddings.csv"
        write_embeddings_csv(embeddings, emb_path, embed_dim)
        paths["embeddings"] = str(emb_path)
    return paths
