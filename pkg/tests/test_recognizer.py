from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from glyphforge.glyphlang import END, START, default_vocabulary
from glyphforge.recognizer import (
    DecodeOverrun,
    LengthMismatch,
    RecognitionResult,
    Recognizer,
    caption_xent,
    radical_rows,
)
from oracles import xent_loop

VOCAB = default_vocabulary()


def make_recognizer(**kw):
    torch.manual_seed(0)
    return Recognizer(
        len(VOCAB),
        start_id=VOCAB.id_of(START),
        end_id=VOCAB.id_of(END),
        d_model=16,
        n_heads=2,
        n_layers=1,
        dense_pairs=1,
        growth=8,
        **kw,
    )


def test_teacher_forcing_output_length():
    rec = make_recognizer()
    teacher = torch.tensor(VOCAB.encode(["LR", "r00", "r01", END]))
    result = rec.recognize(torch.rand(64, 64), teacher)
    assert result.dists.shape == (4, len(VOCAB))
    assert result.cross_attention.shape == (4, 16)
    assert torch.allclose(result.dists.sum(1), torch.ones(4), atol=1e-6)
    assert torch.allclose(result.cross_attention.sum(1), torch.ones(4), atol=1e-6)


def test_untrained_perplexity_near_vocab_size():
    rec = make_recognizer()
    v = len(VOCAB)
    teacher = torch.tensor(VOCAB.encode(["LR", "r00", "r01", END]))
    with torch.no_grad():
        result = rec.recognize(torch.rand(64, 64), teacher)
        loss = caption_xent(result, teacher)
    ppl = math.exp(float(loss))
    assert 0.2 * v <= ppl <= 5 * v


def test_caption_xent_perfect_prediction_is_zero():
    v = len(VOCAB)
    truth = torch.tensor([3, 7, 1])
    dists = torch.zeros(3, v)
    dists[torch.arange(3), truth] = 1.0
    result = RecognitionResult(dists, torch.ones(3, 16) / 16, truth.tolist())
    assert float(caption_xent(result, truth)) == pytest.approx(0.0, abs=1e-9)


def test_caption_xent_uniform_is_log_v():
    v = len(VOCAB)
    truth = torch.tensor([3, 7])
    result = RecognitionResult(torch.full((2, v), 1.0 / v), torch.ones(2, 16) / 16, [0, 0])
    assert float(caption_xent(result, truth)) == pytest.approx(math.log(v), rel=1e-6)


def test_caption_xent_matches_loop_oracle():
    rng = np.random.default_rng(0)
    v = len(VOCAB)
    raw = rng.random((5, v)) + 1e-3
    dists = raw / raw.sum(axis=1, keepdims=True)
    truth = rng.integers(0, v, size=5)
    result = RecognitionResult(
        torch.as_tensor(dists, dtype=torch.float64), torch.ones(5, 16) / 16, truth.tolist()
    )
    got = float(caption_xent(result, torch.as_tensor(truth)))
    assert got == pytest.approx(xent_loop(dists, truth), rel=1e-10)


def test_caption_xent_length_mismatch():
    result = RecognitionResult(torch.ones(2, 5) / 5, torch.ones(2, 16) / 16, [0, 0])
    with pytest.raises(LengthMismatch):
        caption_xent(result, torch.tensor([1, 2, 3]))


def test_radical_rows_selects_radical_steps():
    cross = torch.arange(4 * 16, dtype=torch.float32).reshape(4, 16)
    teacher = torch.tensor(VOCAB.encode(["LR", "r00", "r01", END]))
    rad_ids = {VOCAB.id_of(r) for r in VOCAB.radicals}
    rows = radical_rows(cross, teacher, rad_ids)
    assert rows.shape == (2, 16)
    assert torch.equal(rows[0], cross[1])
    assert torch.equal(rows[1], cross[2])


def test_greedy_decode_overrun():
    rec = make_recognizer(max_len=4)
    # force a fixed non-end prediction
    with torch.no_grad():
        rec.out.weight.zero_()
        rec.out.bias.zero_()
        rec.out.bias[VOCAB.id_of("r00")] = 10.0
    with pytest.raises(DecodeOverrun):
        rec.recognize(torch.rand(64, 64))


def test_greedy_decode_stops_at_end():
    rec = make_recognizer(max_len=4)
    with torch.no_grad():
        rec.out.weight.zero_()
        rec.out.bias.zero_()
        rec.out.bias[rec.end_id] = 10.0
    result = rec.recognize(torch.rand(64, 64))
    assert result.tokens == []  # end came first: empty caption
