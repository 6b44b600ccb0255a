"""Objectives and staged training.

Three stages share one corpus: the recognizer learns captions from real
renders, the skeleton builder learns caption -> standard-font images (the
recognizer keeps training through the content loss), and the font generator
learns style transfer against a frozen skeleton.  Losses:

  pixel    per-image root-mean-square error, available samples only
  content  caption cross-entropy; computed on the real image for available
           samples (training the recognizer) and on the generated image with
           recognizer weights frozen for unavailable ones
  guided   Frobenius distance between the transitive factors and their
           gradient-free guidance maps (radical fill map from the skeleton,
           recognizer cross-attention on the style images)

Optimization uses the adaptive-delta rule (lr 0.1, rho 0.95, eps 1e-4 by
default).  Reference mode pins torch to one thread so a fixed config + seed
reproduces checkpoints bit for bit.

Checkpoint container: b"GFCK1\\n", a JSON header line (config snapshot plus
tensor name -> dtype/shape/offset), then raw little-endian tensor data in
sorted name order.
"""

from __future__ import annotations

import hashlib
import json
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .attnkern import TransitiveMaps
from .fontgen import FEATURE_CELLS, FontGenerator, StyleBundle, select_styles
from .glyphlang import END, START, Vocabulary
from .recognizer import Recognizer, radical_rows
from .skeleton import SkeletonBuilder
from .synthcorpus import Corpus, Record

MAGIC = b"GFCK1\n"

_DTYPES = {
    "float32": ("<f4", torch.float32),
    "float64": ("<f8", torch.float64),
    "int64": ("<i8", torch.int64),
}


class ShapeMismatch(ValueError):
    pass


class DivergenceDetected(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda_c: float = 0.1
    lambda_g: float = 0.1
    lrate: float = 0.1
    rho: float = 0.95
    epsilon: float = 1e-4
    batch_size: int = 16
    steps: int = 2000
    seed: int = 0
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    dense_pairs: int = 2
    growth: int = 24
    decoder_layers: int = 2
    t_styles: int = 5
    max_decode_len: int = 32
    misspelled_fraction: float = 0.25
    token_dropout: float = 0.25  # recognizer teacher-input corruption
    conv_norm: str = "group"
    checkpoint_every: int = 0  # 0 = final checkpoint only
    upsample_mode: str = "nearest"
    use_radical: bool = True
    use_stroke: bool = True
    use_bidirectional: bool = True
    use_upsample: bool = True
    content_on_generated_available: bool = False  # optional alternative reading
    divergence_limit: float = 1e4
    divergence_patience: int = 10
    reference_mode: bool = True
    dtype: str = "float32"

    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype][1]


def save_train_config(config: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(
        "\n".join(f"{k}={v}" for k, v in asdict(config).items()) + "\n"
    )


def load_train_config(path: str | Path, overrides: dict | None = None) -> TrainConfig:
    kwargs: dict = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, value = line.split("=", 1)
        kwargs[key] = value
    return config_from_strings(kwargs, overrides)


def config_from_strings(kwargs: dict, overrides: dict | None = None) -> TrainConfig:
    merged = dict(kwargs)
    if overrides:
        merged.update({k: v for k, v in overrides.items() if v is not None})
    out: dict = {}
    for f in TrainConfig.__dataclass_fields__.values():
        if f.name not in merged:
            continue
        v = merged[f.name]
        if isinstance(v, str):
            if f.type == "bool":
                v = v.lower() in ("1", "true", "yes")
            elif f.type == "int":
                v = int(v)
            elif f.type == "float":
                v = float(v)
        out[f.name] = v
    return TrainConfig(**out)


# ---------------------------------------------------------------------------
# losses


def pixel_loss(generated: Tensor, target: Tensor) -> Tensor:
    """Mean over the batch of per-image sqrt(mean squared difference)."""
    if generated.shape != target.shape:
        raise ShapeMismatch(f"{tuple(generated.shape)} vs {tuple(target.shape)}")
    if generated.ndim == 2:
        generated, target = generated[None], target[None]
    mse = ((generated - target) ** 2).flatten(1).mean(dim=1)
    return mse.sqrt().mean()


@dataclass
class ContentSample:
    target_ids: Tensor  # caption ids followed by the end symbol
    available: bool
    real_image: Tensor | None = None
    generated_image: Tensor | None = None


@contextmanager
def _eval_mode(module: torch.nn.Module):
    was_training = module.training
    module.eval()
    try:
        yield
    finally:
        module.train(was_training)


def _frozen_call(recognizer: Recognizer, image: Tensor, teacher: Tensor):
    """Teacher-forced pass with recognizer weights detached: gradients flow
    to the image, never into the recognizer."""
    state = {k: v.detach() for k, v in recognizer.state_dict().items()}
    with _eval_mode(recognizer):
        return torch.func.functional_call(
            recognizer, state, (image,), {"teacher_tokens": teacher}
        )


def content_loss(recognizer: Recognizer, batch: list[ContentSample]) -> Tensor:
    """Sum of the two caption cross-entropy expectations: recognizer reading
    real images (available, recognizer trains) and frozen recognizer reading
    generated images (unavailable)."""
    avail, unavail = [], []
    for sample in batch:
        if sample.available:
            if sample.real_image is None:
                raise ShapeMismatch("available sample without a real image")
            result = recognizer.recognize(sample.real_image, sample.target_ids)
            avail.append(_xent_from_dists(result.dists, sample.target_ids))
        else:
            if sample.generated_image is None:
                raise ShapeMismatch("unavailable sample without a generated image")
            result = _frozen_call(recognizer, sample.generated_image, sample.target_ids)
            unavail.append(_xent_from_dists(result.dists, sample.target_ids))
    zero = torch.zeros((), dtype=_batch_dtype(batch))
    term_a = torch.stack(avail).mean() if avail else zero
    term_u = torch.stack(unavail).mean() if unavail else zero
    return term_a + term_u


def _f(t) -> float:
    return float(t.detach()) if isinstance(t, torch.Tensor) else float(t)


def _batch_dtype(batch):
    for s in batch:
        img = s.real_image if s.real_image is not None else s.generated_image
        if img is not None:
            return img.dtype
    return torch.float32


def _xent_from_dists(dists: Tensor, target_ids: Tensor) -> Tensor:
    probs = dists[torch.arange(target_ids.shape[0]), target_ids]
    return -(probs.clamp_min(1e-30)).log().mean()


def guided_loss(
    maps: TransitiveMaps,
    fill_map: Tensor,
    read_map: Tensor,
    style_rows: Tensor | None = None,
) -> Tensor:
    """|| content placement - fill map ||_2 + || style lookup - read map ||_2.

    Guidance maps are treated as constants; ``style_rows`` selects the style
    caption rows (radical steps) the read map covers.
    """
    placement = maps.content_placement
    lookup = maps.style_lookup
    if style_rows is not None:
        lookup = lookup[style_rows]
    if placement.shape != fill_map.shape:
        raise ShapeMismatch(
            f"placement {tuple(placement.shape)} vs fill map {tuple(fill_map.shape)}"
        )
    if lookup.shape != read_map.shape:
        raise ShapeMismatch(
            f"lookup {tuple(lookup.shape)} vs read map {tuple(read_map.shape)}"
        )
    fill = fill_map.detach().to(placement.dtype)
    read = read_map.detach().to(lookup.dtype)
    return torch.linalg.matrix_norm(placement - fill) + torch.linalg.matrix_norm(
        lookup - read
    )


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, tensors: dict[str, Tensor], config: dict) -> None:
    names = sorted(tensors)
    entries: dict[str, dict] = {}
    blobs: list[bytes] = []
    offset = 0
    for name in names:
        t = tensors[name].detach().cpu()
        dtype = str(t.dtype).removeprefix("torch.")
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported checkpoint dtype {dtype}")
        raw = t.numpy().astype(_DTYPES[dtype][0]).tobytes()
        entries[name] = {"dtype": dtype, "shape": list(t.shape), "offset": offset}
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config, "tensors": entries}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header.encode() + b"\n")
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    nl = raw.index(b"\n", len(MAGIC))
    header = json.loads(raw[len(MAGIC) : nl])
    base = nl + 1
    tensors: dict[str, Tensor] = {}
    for name, meta in header["tensors"].items():
        np_dtype, torch_dtype = _DTYPES[meta["dtype"]]
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        arr = np.frombuffer(raw, dtype=np_dtype, count=count, offset=base + meta["offset"])
        tensors[name] = torch.from_numpy(arr.copy()).to(torch_dtype).reshape(meta["shape"])
    return tensors, header["config"]


def checkpoint_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# model construction (deterministic given config)


def build_recognizer(vocab: Vocabulary, cfg: TrainConfig) -> Recognizer:
    torch.manual_seed(cfg.seed + 101)
    rec = Recognizer(
        len(vocab),
        start_id=vocab.id_of(START),
        end_id=vocab.id_of(END),
        d_model=cfg.d_model,
        n_heads=cfg.n_heads,
        n_layers=cfg.decoder_layers,
        dense_pairs=cfg.dense_pairs,
        growth=cfg.growth,
        max_len=cfg.max_decode_len,
        conv_norm=cfg.conv_norm,
    )
    return rec.to(cfg.torch_dtype())


def build_skeleton(vocab: Vocabulary, cfg: TrainConfig) -> SkeletonBuilder:
    torch.manual_seed(cfg.seed + 202)
    sk = SkeletonBuilder(
        len(vocab),
        d_model=cfg.d_model,
        n_heads=cfg.n_heads,
        n_layers=cfg.n_layers,
        use_radical=cfg.use_radical,
        use_stroke=cfg.use_stroke,
        use_bidirectional=cfg.use_bidirectional,
        use_upsample=cfg.use_upsample,
        upsample_mode=cfg.upsample_mode,
        conv_norm=cfg.conv_norm,
    )
    return sk.to(cfg.torch_dtype())


def build_fontgen(vocab: Vocabulary, cfg: TrainConfig, skeleton: SkeletonBuilder) -> FontGenerator:
    torch.manual_seed(cfg.seed + 303)
    fg = FontGenerator(
        skeleton.embedding,
        d_model=cfg.d_model,
        dense_pairs=cfg.dense_pairs,
        growth=cfg.growth,
        conv_norm=cfg.conv_norm,
    )
    return fg.to(cfg.torch_dtype())


def fontgen_state(fg: FontGenerator) -> dict[str, Tensor]:
    """Fontgen checkpoint payload: shared embedding tensors stay with the
    skeleton checkpoint and are stored once."""
    return {k: v for k, v in fg.state_dict().items() if not k.startswith("embedding.")}


def load_fontgen_state(fg: FontGenerator, tensors: dict[str, Tensor]) -> None:
    missing, unexpected = fg.load_state_dict(tensors, strict=False)
    if unexpected:
        raise ValueError(f"unexpected checkpoint keys {unexpected[:3]}")
    bad = [k for k in missing if not k.startswith("embedding.")]
    if bad:
        raise ValueError(f"missing checkpoint keys {bad[:3]}")


# ---------------------------------------------------------------------------
# shared tensor plumbing


def caption_tensors(record: Record, vocab: Vocabulary, dtype: torch.dtype):
    """(radical ids, stroke ids, correspondence, radical column flags)."""
    radical_ids = torch.tensor(vocab.encode(record.radical_caption))
    stroke_ids = torch.tensor(vocab.encode(record.stroke_caption))
    corr = torch.zeros(len(record.stroke_caption), len(record.radical_caption), dtype=torch.bool)
    for row, col in enumerate(record.owners):
        corr[row, col] = True
    radical_cols = torch.tensor([vocab.is_radical(t) for t in record.radical_caption])
    return radical_ids, stroke_ids, corr, radical_cols


def target_ids_with_end(record: Record, vocab: Vocabulary) -> Tensor:
    return torch.tensor(vocab.encode(list(record.radical_caption) + [END]))


def bundle_seed(seed: int, sample_id: str) -> int:
    digest = hashlib.sha256(f"{seed}:{sample_id}".encode()).digest()
    return int.from_bytes(digest[:6], "little")


def read_map_target(
    recognizer: Recognizer,
    bundle: StyleBundle,
    vocab: Vocabulary,
    dtype: torch.dtype,
) -> tuple[Tensor, Tensor]:
    """Block-diagonal guidance for the style lookup: recognizer cross
    attention rows at radical steps of each style caption, placed in that
    image's 16-cell block.  Returns (target, row index into the concatenated
    style caption)."""
    radical_id_set = {vocab.id_of(r) for r in vocab.radicals}
    t = len(bundle.records)
    blocks: list[Tensor] = []
    row_index: list[int] = []
    offset = 0
    with torch.no_grad(), _eval_mode(recognizer):
        for i, (rec, img) in enumerate(zip(bundle.records, bundle.images)):
            teacher = target_ids_with_end(rec, vocab)
            result = recognizer.recognize(torch.as_tensor(img, dtype=dtype), teacher)
            rows = radical_rows(result.cross_attention, teacher, radical_id_set)
            block = torch.zeros(rows.shape[0], FEATURE_CELLS * t, dtype=dtype)
            block[:, i * FEATURE_CELLS : (i + 1) * FEATURE_CELLS] = rows
            blocks.append(block)
            for j, tok in enumerate(rec.radical_caption):
                if vocab.is_radical(tok):
                    row_index.append(offset + j)
            offset += len(rec.radical_caption)
    return torch.cat(blocks), torch.tensor(row_index, dtype=torch.long)


# ---------------------------------------------------------------------------
# training loops

STAGES = ("recognizer", "skeleton", "fontgen")


class _LossLog:
    def __init__(self, path: Path, limit: float, patience: int):
        self.path = path
        self.rows: list[str] = ["step,total,pixel,content,guided"]
        self.limit = limit
        self.patience = patience
        self.bad_streak = 0

    def record(self, step: int, total: float, pix: float, con: float, gui: float):
        self.rows.append(f"{step},{total:.10g},{pix:.10g},{con:.10g},{gui:.10g}")
        if step % 200 == 0:
            self.flush()
        if not np.isfinite(total) or total > self.limit:
            self.bad_streak += 1
        else:
            self.bad_streak = 0
        if self.bad_streak >= self.patience:
            self.flush()
            diag = self.path.with_suffix(".diverged.txt")
            diag.write_text("\n".join(self.rows[-self.patience - 1 :]) + "\n")
            raise DivergenceDetected(
                f"loss non-finite or above {self.limit} for {self.patience} steps; see {diag}"
            )

    def flush(self):
        self.path.write_text("\n".join(self.rows) + "\n")


def _setup(cfg: TrainConfig, stage: str) -> np.random.Generator:
    if cfg.reference_mode:
        torch.set_num_threads(1)
    return np.random.default_rng(cfg.seed + STAGES.index(stage) * 7919)


def _load_images(corpus: Corpus, records: list[Record], dtype: torch.dtype) -> dict[str, Tensor]:
    return {
        r.sample_id: torch.as_tensor(corpus.manifest.load_image(r), dtype=dtype)
        for r in records
        if r.available
    }


def train_stage(
    stage: str,
    cfg: TrainConfig,
    corpus: Corpus,
    out_dir: str | Path,
    recognizer_ckpt: str | Path | None = None,
    skeleton_ckpt: str | Path | None = None,
    probe: dict | None = None,
) -> dict[str, Path]:
    """Run one training stage; returns the checkpoint paths it produced.

    The skeleton and fontgen stages need a recognizer checkpoint; fontgen
    additionally needs the skeleton.  The recognizer keeps training inside
    later stages (content loss on available samples), so each stage re-emits
    its updated recognizer checkpoint.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if stage == "recognizer":
        return _train_recognizer(cfg, corpus, out, probe)
    if recognizer_ckpt is None:
        raise ValueError(f"stage {stage} requires a recognizer checkpoint")
    if stage == "skeleton":
        return _train_skeleton(cfg, corpus, out, recognizer_ckpt, probe)
    if skeleton_ckpt is None:
        raise ValueError("stage fontgen requires a skeleton checkpoint")
    return _train_fontgen(cfg, corpus, out, recognizer_ckpt, skeleton_ckpt, probe)


def _config_snapshot(cfg: TrainConfig, stage: str, vocab_size: int) -> dict:
    snap = asdict(cfg)
    snap["stage"] = stage
    snap["vocab_size"] = vocab_size
    return snap


def _train_recognizer(cfg, corpus, out, probe):
    rng = _setup(cfg, "recognizer")
    vocab = corpus.vocab
    dtype = cfg.torch_dtype()
    rec = build_recognizer(vocab, cfg)
    records = corpus.manifest.split("train")
    images = _load_images(corpus, records, dtype)
    targets = {r.sample_id: target_ids_with_end(r, vocab) for r in records}
    opt = torch.optim.Adadelta(rec.parameters(), lr=cfg.lrate, rho=cfg.rho, eps=cfg.epsilon)
    log = _LossLog(out / "recognizer_loss.csv", cfg.divergence_limit, cfg.divergence_patience)

    for step in range(cfg.steps):
        batch = [records[int(i)] for i in rng.integers(len(records), size=cfg.batch_size)]
        memory = rec.encode(torch.stack([images[r.sample_id] for r in batch])[:, None])
        losses = []
        for i, r in enumerate(batch):
            teacher = targets[r.sample_id]
            inputs = torch.cat([torch.tensor([rec.start_id]), teacher[:-1]])
            logits, _ = rec.decode(memory[i], inputs)
            losses.append(torch.nn.functional.cross_entropy(logits, teacher))
        loss = torch.stack(losses).mean()
        if probe is not None and step == 0:
            probe["samples"] = [r.sample_id for r in batch]
            probe["loss"] = _f(loss)
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.record(step, _f(loss), 0.0, _f(loss), 0.0)
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(
                out / f"recognizer_step{step + 1:06d}.ckpt",
                rec.state_dict(),
                _config_snapshot(cfg, "recognizer", len(vocab)),
            )
    log.flush()
    path = out / "recognizer.ckpt"
    save_checkpoint(path, rec.state_dict(), _config_snapshot(cfg, "recognizer", len(vocab)))
    return {"recognizer": path}


def _skeleton_forward(sk, record, vocab, dtype):
    rid, sid, corr, cols = caption_tensors(record, vocab, dtype)
    return sk(rid, sid, corr, cols)


def _train_skeleton(cfg, corpus, out, recognizer_ckpt, probe):
    rng = _setup(cfg, "skeleton")
    vocab = corpus.vocab
    dtype = cfg.torch_dtype()
    sk = build_skeleton(vocab, cfg)
    rec = build_recognizer(vocab, cfg)
    tensors, _ = load_checkpoint(recognizer_ckpt)
    rec.load_state_dict(tensors)

    # one record per training composition (standard font target) plus the
    # misspelled captions as unavailable samples
    font0 = [r for r in corpus.manifest.split("train") if r.font_id == 0]
    missp = corpus.manifest.split("misspelled")
    images = _load_images(corpus, font0, dtype)
    opt = torch.optim.Adadelta(
        list(sk.parameters()) + list(rec.parameters()),
        lr=cfg.lrate, rho=cfg.rho, eps=cfg.epsilon,
    )
    log = _LossLog(out / "skeleton_loss.csv", cfg.divergence_limit, cfg.divergence_patience)
    n_unavail = int(round(cfg.batch_size * cfg.misspelled_fraction)) if missp else 0
    n_avail = cfg.batch_size - n_unavail

    for step in range(cfg.steps):
        batch = [font0[int(i)] for i in rng.integers(len(font0), size=n_avail)]
        batch += [missp[int(i)] for i in rng.integers(len(missp), size=n_unavail)] if n_unavail else []
        gen_images, targets, content_batch = [], [], []
        for r in batch:
            _, canvas, _ = sk.build_content(*caption_tensors(r, vocab, dtype))
            img = sk.render(canvas)
            tid = target_ids_with_end(r, vocab)
            if r.available:
                gen_images.append(img)
                targets.append(images[r.sample_id])
                content_batch.append(ContentSample(tid, True, real_image=images[r.sample_id]))
            else:
                content_batch.append(ContentSample(tid, False, generated_image=img))
        l_p = pixel_loss(torch.stack(gen_images), torch.stack(targets))
        l_c = content_loss(rec, content_batch)
        loss = l_p + cfg.lambda_c * l_c
        if probe is not None and step == 0:
            probe["samples"] = [r.sample_id for r in batch]
            probe["loss"] = _f(loss)
            probe["pixel"] = _f(l_p)
            probe["content"] = _f(l_c)
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.record(step, _f(loss), _f(l_p), _f(l_c), 0.0)
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(
                out / f"skeleton_step{step + 1:06d}.ckpt",
                sk.state_dict(),
                _config_snapshot(cfg, "skeleton", len(vocab)),
            )
    log.flush()
    sk_path = out / "skeleton.ckpt"
    rec_path = out / "recognizer.ckpt"
    save_checkpoint(sk_path, sk.state_dict(), _config_snapshot(cfg, "skeleton", len(vocab)))
    save_checkpoint(rec_path, rec.state_dict(), _config_snapshot(cfg, "recognizer", len(vocab)))
    return {"skeleton": sk_path, "recognizer": rec_path}


def _train_fontgen(cfg, corpus, out, recognizer_ckpt, skeleton_ckpt, probe):
    rng = _setup(cfg, "fontgen")
    vocab = corpus.vocab
    dtype = cfg.torch_dtype()
    manifest = corpus.manifest

    sk = build_skeleton(vocab, cfg)
    sk_tensors, _ = load_checkpoint(skeleton_ckpt)
    sk.load_state_dict(sk_tensors)
    sk.eval()
    for p in sk.parameters():
        p.requires_grad_(False)  # frozen skeleton, shared embedding included

    rec = build_recognizer(vocab, cfg)
    rec_tensors, _ = load_checkpoint(recognizer_ckpt)
    rec.load_state_dict(rec_tensors)

    fg = build_fontgen(vocab, cfg, sk)

    train = manifest.split("train")
    missp = manifest.split("misspelled")
    images = _load_images(corpus, train, dtype)

    content_cache: dict[tuple, tuple[Tensor, Tensor]] = {}
    bundle_cache: dict[str, StyleBundle] = {}
    style_tensor_cache: dict[str, tuple] = {}

    def content_for(record):
        key = (record.radical_caption, record.stroke_caption, record.owners, record.slots)
        if key not in content_cache:
            with torch.no_grad():
                content, _, fill_map = sk.build_content(*caption_tensors(record, vocab, dtype))
            content_cache[key] = (content, fill_map)
        return content_cache[key]

    def bundle_for(record):
        if record.sample_id not in bundle_cache:
            bundle_cache[record.sample_id] = select_styles(
                record.radical_caption,
                record.font_id,
                manifest,
                bundle_seed(cfg.seed, record.sample_id),
                vocab,
                t_styles=cfg.t_styles,
                exclude_sample=record.sample_id,
            )
        return bundle_cache[record.sample_id]

    def style_tensors(record):
        if record.sample_id not in style_tensor_cache:
            bundle = bundle_for(record)
            imgs = torch.stack(
                [torch.as_tensor(im, dtype=dtype) for im in bundle.images]
            )[:, None]
            cap_ids = [
                torch.tensor(vocab.encode(r.radical_caption)) for r in bundle.records
            ]
            style_tensor_cache[record.sample_id] = (bundle, imgs, cap_ids)
        return style_tensor_cache[record.sample_id]

    trainable = [p for p in fg.parameters() if p.requires_grad] + list(rec.parameters())
    opt = torch.optim.Adadelta(trainable, lr=cfg.lrate, rho=cfg.rho, eps=cfg.epsilon)
    log = _LossLog(out / "fontgen_loss.csv", cfg.divergence_limit, cfg.divergence_patience)
    n_unavail = int(round(cfg.batch_size * cfg.misspelled_fraction)) if missp else 0
    n_avail = cfg.batch_size - n_unavail

    for step in range(cfg.steps):
        batch = [train[int(i)] for i in rng.integers(len(train), size=n_avail)]
        batch += [missp[int(i)] for i in rng.integers(len(missp), size=n_unavail)] if n_unavail else []
        gen_avail, tgt_avail, content_batch, guided_terms = [], [], [], []
        for r in batch:
            content, fill_map = content_for(r)
            bundle, style_imgs, cap_ids = style_tensors(r)
            content_ids = torch.tensor(vocab.encode(r.radical_caption))
            gen_img, maps = fg.generate(content, content_ids, style_imgs, cap_ids)
            tid = target_ids_with_end(r, vocab)
            if r.available:
                gen_avail.append(gen_img)
                tgt_avail.append(images[r.sample_id])
                content_batch.append(ContentSample(tid, True, real_image=images[r.sample_id]))
            else:
                content_batch.append(ContentSample(tid, False, generated_image=gen_img))
            if cfg.lambda_g != 0.0:
                read_map, style_row_idx = read_map_target(rec, bundle, vocab, dtype)
                guided_terms.append(
                    guided_loss(maps, fill_map, read_map, style_rows=style_row_idx)
                )
        l_p = (
            pixel_loss(torch.stack(gen_avail), torch.stack(tgt_avail))
            if gen_avail
            else torch.zeros((), dtype=dtype)
        )
        l_c = content_loss(rec, content_batch)
        l_g = (
            torch.stack(guided_terms).mean()
            if guided_terms
            else torch.zeros((), dtype=dtype)
        )
        loss = l_p + cfg.lambda_c * l_c + cfg.lambda_g * l_g
        if probe is not None and step == 0:
            probe["samples"] = [r.sample_id for r in batch]
            probe["loss"] = _f(loss)
            probe["pixel"] = _f(l_p)
            probe["content"] = _f(l_c)
            probe["guided"] = _f(l_g)
        opt.zero_grad()
        loss.backward()
        opt.step()
        log.record(step, _f(loss), _f(l_p), _f(l_c), _f(l_g))
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(
                out / f"fontgen_step{step + 1:06d}.ckpt",
                fontgen_state(fg),
                _config_snapshot(cfg, "fontgen", len(vocab)),
            )
    log.flush()
    fg_path = out / "fontgen.ckpt"
    rec_path = out / "recognizer.ckpt"
    save_checkpoint(fg_path, fontgen_state(fg), _config_snapshot(cfg, "fontgen", len(vocab)))
    save_checkpoint(rec_path, rec.state_dict(), _config_snapshot(cfg, "recognizer", len(vocab)))
    return {"fontgen": fg_path, "recognizer": rec_path}
