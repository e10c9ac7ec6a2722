"""
Desk-scale end-to-end checks. These train the desk configuration for the
full 3000 steps and are marked slow; the quick checks run with the unit tests.
"""

import dataclasses
import math

import numpy as np
import pytest

from code_ssm.bench import compare
from code_ssm.config import RunConfig
from code_ssm.exceptions import SequenceLengthError
from code_ssm.model import init_params, model_forward
from code_ssm.numerics import Rng
from code_ssm.synthetic import generate_corpus
from code_ssm.tokenizer import ByteTokenizer
from code_ssm.training import evaluate_mlm, pack_corpus, pretrain

SEED = 0


def desk_run(variant):
    config = RunConfig()
    model_config = dataclasses.replace(config.model, variant=variant)
    texts = generate_corpus(config.train.corpus_size, SEED)
    n_held_out = max(1, int(round(len(texts) * config.train.eval_fraction)))
    train_texts, held_out_texts = texts[:-n_held_out], texts[-n_held_out:]
    tokenizer = ByteTokenizer(model_config.vocab_size)
    rng = Rng(SEED)
    params = init_params(model_config, rng)
    result = pretrain(params, pack_corpus(train_texts, tokenizer, config.train.seq_len), config.train, rng)
    return params, result, held_out_texts, pack_corpus(held_out_texts, tokenizer, config.train.seq_len)


@pytest.fixture(scope="module")
def base_run():
    return desk_run("base")


@pytest.fixture(scope="module")
def dft_run():
    return desk_run("dft")


def held_out_accuracy(params, chunks):
    return evaluate_mlm(params, chunks, 0.15, Rng(SEED + 1))["masked_acc"]


@pytest.mark.slow
def test_masked_accuracy_within_3000_steps(base_run):
    """Test masked accuracy within 3000 steps."""
    params, result, _, eval_chunks = base_run
    assert result.steps_completed == 3000
    assert held_out_accuracy(params, eval_chunks) > 0.5


@pytest.mark.slow
def test_loss_decreases(base_run):
    """Test loss decreases."""
    losses = base_run[1].losses()
    assert np.median(losses[2500:3000]) < np.median(losses[:500])


@pytest.mark.slow
def test_ssm_beats_dft_mixing(base_run, dft_run):
    """Test ssm beats dft mixing."""
    assert held_out_accuracy(base_run[0], base_run[3]) >= held_out_accuracy(dft_run[0], dft_run[3])


@pytest.mark.slow
def test_length_extrapolation(base_run):
    """Test length extrapolation."""
    params, _, held_out_texts, eval_chunks = base_run
    in_length = held_out_accuracy(params, eval_chunks)
    long_chunks = pack_corpus(held_out_texts, ByteTokenizer(params.config.vocab_size), 256)
    logits = model_forward(params, long_chunks[:2]).logits.data
    assert logits.shape[1] == 256 and np.all(np.isfinite(logits))
    assert held_out_accuracy(params, long_chunks) >= 0.8 * in_length


def test_positional_variant_rejects_long_input():
    """Test positional variant rejects long input."""
    config = dataclasses.replace(RunConfig().model, variant="pos")
    params = init_params(config, Rng(SEED))
    with pytest.raises(SequenceLengthError):
        model_forward(params, np.full((1, config.max_position + 1), 9))


@pytest.mark.slow
def test_scaling_shapes():
    """Test scaling shapes."""
    report = compare([512, 2048], batch=4, trials=1)
    assert report.memory_ratio("attention", 2048, 512) >= 12
    assert report.memory_ratio("ssm", 2048, 512) <= 6
    assert report.get("ssm", 2048).samples_per_s >= report.get("attention", 2048).samples_per_s


def test_seeded_runs_repeat():
    """Test seeded runs repeat."""
    config = RunConfig()
    train = dataclasses.replace(config.train, total_steps=20, warmup_steps=5)
    chunks = pack_corpus(generate_corpus(64, SEED), ByteTokenizer(), config.train.seq_len)
    losses, weights = [], []
    for _ in range(2):
        rng = Rng(SEED)
        params = init_params(config.model, rng)
        losses.append(pretrain(params, chunks, train, rng).losses())
        weights.append({name: value.data.copy() for name, value in params.named_parameters()})
    assert losses[0] == losses[1]
    assert all(math.isfinite(loss) for loss in losses[0])
    for name, value in weights[0].items():
        np.testing.assert_array_equal(weights[1][name], value)
