"""Metrics, evaluation orchestration, ablation harness, attention dumps.

Evaluation covers the skeleton builder alone (caption -> standard-font image
against the rendered ground truth) and the full two-stage model (caption +
style references -> styled glyph).  The misspelled split has no target
images, so it is scored by recognizer caption fidelity: the greedy caption
of the generated glyph must equal the requested (misspelled) caption, and a
confusion audit reports how often the output reads as a registered correct
caption instead.

Reports are plain CSV plus a text summary; rebuilding a report from the same
checkpoints, corpus and seed is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .fontgen import CoverageImpossible, select_styles
from .glyphlang import END
from .recognizer import DecodeOverrun
from .synthcorpus import SPLITS, Corpus, Record, write_pgm
from .trainkit import (
    ShapeMismatch,
    TrainConfig,
    build_fontgen,
    build_recognizer,
    build_skeleton,
    bundle_seed,
    caption_tensors,
    checkpoint_digest,
    load_checkpoint,
    load_fontgen_state,
    train_stage,
)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class MissingSplit(ValueError):
    pass


class UnknownSample(KeyError):
    pass


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2)))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = size // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(xs[:, None] ** 2 + xs[None, :] ** 2) / (2 * sigma * sigma))
    return g / g.sum()


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Structural similarity, 11x11 Gaussian window sigma 1.5, mean over the
    valid window positions."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    w = _gaussian_window()
    from numpy.lib.stride_tricks import sliding_window_view

    wa = sliding_window_view(a, (SSIM_WINDOW, SSIM_WINDOW))
    wb = sliding_window_view(b, (SSIM_WINDOW, SSIM_WINDOW))
    mu_a = np.tensordot(wa, w, axes=2)
    mu_b = np.tensordot(wb, w, axes=2)
    ex_aa = np.tensordot(wa * wa, w, axes=2)
    ex_bb = np.tensordot(wb * wb, w, axes=2)
    ex_ab = np.tensordot(wa * wb, w, axes=2)
    var_a = ex_aa - mu_a**2
    var_b = ex_bb - mu_b**2
    cov = ex_ab - mu_a * mu_b
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# model pipeline


class Pipeline:
    """Corpus plus loaded models; caches skeleton passes per caption."""

    def __init__(self, corpus: Corpus, skeleton, recognizer, fontgen=None, cfg: TrainConfig | None = None, seed: int = 0):
        self.corpus = corpus
        self.vocab = corpus.vocab
        self.skeleton = skeleton.eval() if skeleton is not None else None
        self.recognizer = recognizer.eval() if recognizer is not None else None
        self.fontgen = fontgen.eval() if fontgen is not None else None
        self.cfg = cfg or TrainConfig()
        self.seed = seed
        self.dtype = self.cfg.torch_dtype()
        self._skeleton_cache: dict[tuple, tuple] = {}

    @classmethod
    def from_checkpoints(
        cls,
        corpus: Corpus,
        skeleton_ckpt: str | Path | None = None,
        recognizer_ckpt: str | Path | None = None,
        fontgen_ckpt: str | Path | None = None,
        seed: int = 0,
    ) -> "Pipeline":
        cfg = None
        skeleton = recognizer = fontgen = None
        if skeleton_ckpt is not None:
            tensors, snap = load_checkpoint(skeleton_ckpt)
            cfg = _config_from_snapshot(snap)
            skeleton = build_skeleton(corpus.vocab, cfg)
            skeleton.load_state_dict(tensors)
        if recognizer_ckpt is not None:
            tensors, snap = load_checkpoint(recognizer_ckpt)
            rcfg = _config_from_snapshot(snap)
            cfg = cfg or rcfg
            recognizer = build_recognizer(corpus.vocab, rcfg)
            recognizer.load_state_dict(tensors)
        if fontgen_ckpt is not None:
            if skeleton is None:
                raise ValueError("a font generator checkpoint needs the skeleton too")
            tensors, snap = load_checkpoint(fontgen_ckpt)
            fontgen = build_fontgen(corpus.vocab, _config_from_snapshot(snap), skeleton)
            load_fontgen_state(fontgen, tensors)
        return cls(corpus, skeleton, recognizer, fontgen, cfg=cfg, seed=seed)

    def _skeleton_pass(self, record: Record):
        key = (record.radical_caption, record.stroke_caption, record.owners, record.slots)
        if key not in self._skeleton_cache:
            with torch.no_grad():
                content, canvas, fill_map = self.skeleton.build_content(
                    *caption_tensors(record, self.vocab, self.dtype)
                )
                image = self.skeleton.render(canvas)
            self._skeleton_cache[key] = (content, fill_map, image)
        return self._skeleton_cache[key]

    def skeleton_image(self, record: Record) -> np.ndarray:
        _, _, image = self._skeleton_pass(record)
        return image.numpy()

    def generate(self, record: Record) -> np.ndarray:
        """Full pipeline: skeleton content + style transfer for the record's
        font.  The record itself never appears in its style bundle."""
        if self.fontgen is None:
            raise ValueError("pipeline has no font generator")
        content, _, _ = self._skeleton_pass(record)
        bundle = select_styles(
            record.radical_caption,
            record.font_id,
            self.corpus.manifest,
            bundle_seed(self.seed, record.sample_id),
            self.vocab,
            t_styles=self.cfg.t_styles,
            exclude_sample=record.sample_id,
        )
        style_imgs = torch.stack(
            [torch.as_tensor(im, dtype=self.dtype) for im in bundle.images]
        )[:, None]
        cap_ids = [torch.tensor(self.vocab.encode(r.radical_caption)) for r in bundle.records]
        content_ids = torch.tensor(self.vocab.encode(record.radical_caption))
        with torch.no_grad():
            image, _ = self.fontgen.generate(content, content_ids, style_imgs, cap_ids)
        return image.numpy()

    def transfer_maps(self, record: Record):
        content, _, _ = self._skeleton_pass(record)
        bundle = select_styles(
            record.radical_caption,
            record.font_id,
            self.corpus.manifest,
            bundle_seed(self.seed, record.sample_id),
            self.vocab,
            t_styles=self.cfg.t_styles,
            exclude_sample=record.sample_id,
        )
        style_imgs = torch.stack(
            [torch.as_tensor(im, dtype=self.dtype) for im in bundle.images]
        )[:, None]
        cap_ids = [torch.tensor(self.vocab.encode(r.radical_caption)) for r in bundle.records]
        content_ids = torch.tensor(self.vocab.encode(record.radical_caption))
        with torch.no_grad():
            _, maps = self.fontgen.generate(content, content_ids, style_imgs, cap_ids)
        return maps, bundle

    def read_caption(self, image: np.ndarray) -> tuple[str, ...] | None:
        """Greedy caption of an image; None when decoding overruns."""
        try:
            with torch.no_grad():
                result = self.recognizer.recognize(
                    torch.as_tensor(image, dtype=self.dtype)
                )
        except DecodeOverrun:
            return None
        return tuple(self.vocab.decode(result.tokens))


def _config_from_snapshot(snap: dict) -> TrainConfig:
    fields = {k: v for k, v in snap.items() if k in TrainConfig.__dataclass_fields__}
    return TrainConfig(**fields)


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    COLUMNS = ("split", "model", "n", "rmse", "ssim", "caption_acc", "autocorrect_rate")

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        for row in self.rows:
            lines.append(
                ",".join(_format_cell(row.get(c)) for c in self.COLUMNS)
            )
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        lines = ["evaluation summary", "=" * 18]
        for k, v in sorted(self.meta.items()):
            lines.append(f"{k}: {v}")
        lines.append("")
        lines.append(f"{'split':<18} {'model':<10} {'n':>5} {'rmse':>8} {'ssim':>8} {'cap_acc':>8}")
        for row in self.rows:
            lines.append(
                f"{row['split']:<18} {row['model']:<10} {row['n']:>5} "
                f"{_format_cell(row.get('rmse')):>8} {_format_cell(row.get('ssim')):>8} "
                f"{_format_cell(row.get('caption_acc')):>8}"
            )
        lines.append("")
        lines.append(
            "full-scale reference values for this architecture family (not a"
            " target at this corpus size): skeleton RMSE 0.0142, SSIM 0.8914."
        )
        return "\n".join(lines) + "\n"

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(self.to_csv())
        (out / "report.txt").write_text(self.summary())


def _format_cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


# ---------------------------------------------------------------------------
# evaluation


def run_eval(
    corpus: Corpus,
    pipeline: Pipeline,
    splits: list[str],
    out_dir: str | Path | None = None,
    max_samples: int | None = None,
) -> EvalReport:
    """Evaluate the skeleton and (when loaded) the full model per split."""
    report = EvalReport()
    report.meta = {
        "seed": pipeline.seed,
        "corpus": str(corpus.root),
    }
    registered = {
        r.radical_caption
        for r in corpus.manifest.records
        if r.split in ("train", "test_seen_font", "test_unseen_font")
    }
    for split in splits:
        if split not in SPLITS:
            raise MissingSplit(split)
        records = corpus.manifest.split(split)
        if not records:
            report.rows.append({"split": split, "model": "none", "n": 0})
            continue
        if split == "misspelled":
            report.rows.extend(
                _eval_misspelled(pipeline, records, registered, max_samples)
            )
            continue
        font0 = [r for r in records if r.font_id == 0]
        if font0 and pipeline.skeleton is not None:
            report.rows.append(
                _eval_skeleton(pipeline, font0[:max_samples], split)
            )
        if pipeline.fontgen is not None:
            report.rows.append(_eval_full(pipeline, records[:max_samples], split))
    if out_dir is not None:
        report.save(out_dir)
    return report


def _eval_skeleton(pipeline: Pipeline, records: list[Record], split: str) -> dict:
    rmses, ssims, hits = [], [], []
    for r in records:
        target = pipeline.corpus.manifest.load_image(r)
        got = pipeline.skeleton_image(r)
        rmses.append(rmse(got, target))
        ssims.append(ssim(got, target))
        if pipeline.recognizer is not None:
            hits.append(pipeline.read_caption(got) == r.radical_caption)
    return {
        "split": split,
        "model": "skeleton",
        "n": len(records),
        "rmse": float(np.mean(rmses)),
        "ssim": float(np.mean(ssims)),
        "caption_acc": float(np.mean(hits)) if hits else None,
    }


def _eval_full(pipeline: Pipeline, records: list[Record], split: str) -> dict:
    rmses, ssims, hits = [], [], []
    for r in records:
        target = pipeline.corpus.manifest.load_image(r)
        got = pipeline.generate(r)
        rmses.append(rmse(got, target))
        ssims.append(ssim(got, target))
        if pipeline.recognizer is not None:
            hits.append(pipeline.read_caption(got) == r.radical_caption)
    return {
        "split": split,
        "model": "full",
        "n": len(records),
        "rmse": float(np.mean(rmses)),
        "ssim": float(np.mean(ssims)),
        "caption_acc": float(np.mean(hits)) if hits else None,
    }


def _eval_misspelled(
    pipeline: Pipeline,
    records: list[Record],
    registered: set[tuple[str, ...]],
    max_samples: int | None,
) -> list[dict]:
    """No pixel ground truth exists: score caption fidelity and audit how
    often outputs collapse onto a registered correct caption."""
    rows = []
    for model in ("skeleton", "full"):
        if model == "full" and pipeline.fontgen is None:
            continue
        hits, collapsed = [], []
        for r in records[:max_samples]:
            image = (
                pipeline.skeleton_image(r) if model == "skeleton" else pipeline.generate(r)
            )
            caption = pipeline.read_caption(image)
            hits.append(caption == r.radical_caption)
            collapsed.append(
                caption is not None
                and caption != r.radical_caption
                and caption in registered
            )
        rows.append(
            {
                "split": "misspelled",
                "model": model,
                "n": len(records[:max_samples]),
                "rmse": None,
                "ssim": None,
                "caption_acc": float(np.mean(hits)),
                "autocorrect_rate": float(np.mean(collapsed)),
            }
        )
    return rows


# ---------------------------------------------------------------------------
# ablation harness

SKELETON_VARIANTS = {
    # stream and block toggles, mirroring the builder's switches
    "radical_only": dict(use_radical=True, use_stroke=False, use_bidirectional=False, use_upsample=False),
    "stroke_only": dict(use_radical=False, use_stroke=True, use_bidirectional=False, use_upsample=False),
    "fused": dict(use_radical=True, use_stroke=True, use_bidirectional=False, use_upsample=False),
    "fused_bidir": dict(use_radical=True, use_stroke=True, use_bidirectional=True, use_upsample=False),
    "fused_upsample": dict(use_radical=True, use_stroke=True, use_bidirectional=False, use_upsample=True),
    "full": dict(use_radical=True, use_stroke=True, use_bidirectional=True, use_upsample=True),
}

FONTGEN_VARIANTS = {
    "fontgen_full": dict(),
    "fontgen_no_guided": dict(lambda_g=0.0),
    "fontgen_no_content": dict(lambda_c=0.0),
    "fontgen_pixel_only": dict(lambda_c=0.0, lambda_g=0.0),
}


def mean_row_entropy(weights: torch.Tensor) -> float:
    p = weights.clamp_min(1e-12)
    return float(-(p * p.log()).sum(dim=-1).mean())


def run_ablation(
    corpus: Corpus,
    variants: list[str],
    cfg: TrainConfig,
    out_dir: str | Path,
    recognizer_ckpt: str | Path | None = None,
    skeleton_ckpt: str | Path | None = None,
    eval_samples: int | None = 60,
) -> EvalReport:
    """Train each variant under the shared budget and evaluate it on the
    seen-font unseen-composition split (standard font for skeleton variants,
    full model for fontgen variants)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = EvalReport(meta={"budget": cfg.steps, "seed": cfg.seed})

    if recognizer_ckpt is None:
        recognizer_ckpt = train_stage("recognizer", cfg, corpus, out / "recognizer")["recognizer"]

    for name in variants:
        vdir = out / name
        if name in SKELETON_VARIANTS:
            vcfg = TrainConfig(**{**cfg.__dict__, **SKELETON_VARIANTS[name]})
            paths = train_stage("skeleton", vcfg, corpus, vdir, recognizer_ckpt=recognizer_ckpt)
            pipe = Pipeline.from_checkpoints(
                corpus, skeleton_ckpt=paths["skeleton"], recognizer_ckpt=paths["recognizer"], seed=cfg.seed
            )
            records = [r for r in corpus.manifest.split("test_seen_font") if r.font_id == 0]
            row = _eval_skeleton(pipe, records[:eval_samples], "test_seen_font")
        elif name in FONTGEN_VARIANTS:
            if skeleton_ckpt is None:
                raise ValueError(f"variant {name} needs a trained skeleton checkpoint")
            vcfg = TrainConfig(**{**cfg.__dict__, **FONTGEN_VARIANTS[name]})
            paths = train_stage(
                "fontgen", vcfg, corpus, vdir,
                recognizer_ckpt=recognizer_ckpt, skeleton_ckpt=skeleton_ckpt,
            )
            pipe = Pipeline.from_checkpoints(
                corpus,
                skeleton_ckpt=skeleton_ckpt,
                recognizer_ckpt=paths["recognizer"],
                fontgen_ckpt=paths["fontgen"],
                seed=cfg.seed,
            )
            records = corpus.manifest.split("test_seen_font")
            row = _eval_full(pipe, records[:eval_samples], "test_seen_font")
            ent = [
                mean_row_entropy(pipe.transfer_maps(r)[0].caption_match)
                for r in records[: min(16, len(records))]
            ]
            row["match_entropy"] = float(np.mean(ent))
        else:
            raise ValueError(f"unknown ablation variant {name!r}")
        row["model"] = name
        report.rows.append(row)

    (out / "ablation.csv").write_text(report.to_csv())
    (out / "ablation.txt").write_text(report.summary())
    return report


# ---------------------------------------------------------------------------
# attention dumps


def dump_attention(
    corpus: Corpus, pipeline: Pipeline, sample_id: str, out_dir: str | Path
) -> list[Path]:
    """Write the transfer attention maps of one sample as PGM heatmaps plus
    an index file labelling every row and column."""
    try:
        record = corpus.manifest.by_id(sample_id)
    except KeyError:
        raise UnknownSample(sample_id) from None
    if pipeline.fontgen is None:
        raise ValueError("attention dumps need a font generator checkpoint")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    maps, bundle = pipeline.transfer_maps(record)

    content_tokens = list(record.radical_caption)
    style_tokens = [
        f"img{i}:{tok}"
        for i, rec in enumerate(bundle.records)
        for tok in rec.radical_caption
    ]
    cells = [f"cell({i},{j})" for i in range(4) for j in range(4)]
    style_cells = [
        f"img{i}:{c}" for i in range(len(bundle.records)) for c in cells
    ]
    named = {
        "content_placement": (maps.content_placement, cells, content_tokens),
        "caption_match": (maps.caption_match, content_tokens, style_tokens),
        "style_lookup": (maps.style_lookup, style_tokens, style_cells),
        "combined": (maps.weights, cells, style_cells),
    }
    written: list[Path] = []
    index_lines = [f"sample\t{sample_id}", f"font\t{record.font_id}"]
    for name, (tensor, row_labels, col_labels) in named.items():
        arr = tensor.detach().cpu().numpy()
        assert arr.shape == (len(row_labels), len(col_labels)), name
        path = out / f"{sample_id}_{name}.pgm"
        write_pgm(path, np.clip(arr, 0.0, 1.0))
        written.append(path)
        for i, label in enumerate(row_labels):
            index_lines.append(f"{name}\trow\t{i}\t{label}")
        for j, label in enumerate(col_labels):
            index_lines.append(f"{name}\tcol\t{j}\t{label}")
    index = out / f"{sample_id}_index.txt"
    index.write_text("\n".join(index_lines) + "\n")
    written.append(index)
    return written
