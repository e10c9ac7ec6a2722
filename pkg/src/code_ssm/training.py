"""
Masked-language-model training for code-ssm.

This module implements the MLM data pipeline (15% selection with the
80/10/10 replacement split), masked cross-entropy, AdamW with decoupled
weight decay and its decay-free groups, warm-up learning-rate schedules, and
a deterministic training loop whose objective is pluggable so fine-tuning
reuses it.
"""

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np

from .config import TrainConfig
from .exceptions import InvalidInputError, NonFiniteError
from .layers import PadMask
from .model import EncoderParams, model_forward
from .numerics import IGNORE_INDEX, Rng, Tensor, cross_entropy, no_grad
from .tokenizer import MASK_ID, PAD_ID, SPECIAL_IDS, ByteTokenizer


logger = logging.getLogger(__name__)

MASK_REPLACE_FRACTION = 0.8
RANDOM_REPLACE_FRACTION = 0.1


@dataclass
class MaskedBatch:
    """One MLM step's inputs; labels hold the original id where a token was selected."""

    input_ids: np.ndarray
    labels: np.ndarray
    mask: PadMask

    @property
    def selected(self) -> np.ndarray:
        return self.labels != IGNORE_INDEX

    @property
    def n_selected(self) -> int:
        return int(self.selected.sum())


def mlm_mask(token_ids: np.ndarray, mask_prob: float, rng: Rng, vocab_size: int,
             special_ids: Sequence[int] = SPECIAL_IDS, mask_id: int = MASK_ID,
             pad_id: int = PAD_ID) -> MaskedBatch:
    """Select positions for prediction and corrupt them.

    Each non-special position is selected independently with probability
    ``mask_prob``. A selected token becomes [MASK] with probability 0.8, a
    random non-special token with probability 0.1, and stays as it is
    otherwise. Random draws happen for every position so the stream consumed
    from ``rng`` depends only on the batch shape.
    """
    token_ids = np.asarray(token_ids, dtype=np.int64)
    if token_ids.ndim == 1:
        token_ids = token_ids[None, :]
    if not 0 <= mask_id < vocab_size:
        raise InvalidInputError(f"mask id {mask_id} is outside the vocabulary of {vocab_size}")
    regular = np.setdiff1d(np.arange(vocab_size), np.asarray(special_ids))
    if regular.size == 0:
        raise InvalidInputError("vocabulary holds no regular tokens to sample replacements from")

    select_draw = rng.random(token_ids.shape)
    action_draw = rng.random(token_ids.shape)
    replacements = regular[rng.integers(0, regular.size, token_ids.shape)]

    eligible = ~np.isin(token_ids, np.asarray(special_ids))
    selected = eligible & (select_draw < mask_prob)

    inputs = token_ids.copy()
    to_mask = selected & (action_draw < MASK_REPLACE_FRACTION)
    to_random = selected & (action_draw >= MASK_REPLACE_FRACTION) & \
        (action_draw < MASK_REPLACE_FRACTION + RANDOM_REPLACE_FRACTION)
    inputs[to_mask] = mask_id
    inputs[to_random] = replacements[to_random]

    labels = np.where(selected, token_ids, IGNORE_INDEX)
    return MaskedBatch(input_ids=inputs, labels=labels, mask=PadMask.from_ids(token_ids, pad_id))


def masked_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tuple[Tensor, Optional[float]]:
    """Mean cross-entropy and argmax accuracy over positions whose label is not ignored."""
    return cross_entropy(logits, labels, IGNORE_INDEX)


# --- optimizer -------------------------------------------------------------

def is_decay_free(name: str) -> bool:
    """SSM kernel parameters, biases and LayerNorm affine terms are not decayed."""
    leaf = name.rsplit(".", 1)[-1]
    return "_kernel." in name or leaf == "bias" or leaf.endswith("_bias") or "ln_" in leaf


def decay_groups(names: Iterable[str]) -> Tuple[List[str], List[str]]:
    """Split parameter names into (decayed, decay-free); the two lists partition the input."""
    names = list(names)
    decayed = [name for name in names if not is_decay_free(name)]
    free = [name for name in names if is_decay_free(name)]
    assert len(decayed) + len(free) == len(names) and not set(decayed) & set(free), \
        "weight-decay groups must partition the parameters"
    return decayed, free


@dataclass
class OptimizerState:
    """Adam moments, one slot per parameter, and the number of updates applied."""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    decayed: Set[str]
    step: int = 0

    @classmethod
    def create(cls, params: Mapping[str, Tensor]) -> "OptimizerState":
        decayed, _ = decay_groups(params.keys())
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
            decayed=set(decayed),
        )

    def moments(self) -> Dict[str, Dict[str, np.ndarray]]:
        return {"m": self.m, "v": self.v}


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if total > max_norm > 0:
        factor = max_norm / (total + 1e-12)
        for name in grads:
            grads[name] = grads[name] * grads[name].dtype.type(factor)
    return total


def optimizer_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
                   state: OptimizerState, lr: float, config: TrainConfig) -> None:
    """Apply one AdamW update in place.

    Every gradient is checked before any parameter moves, so a rejected step
    leaves parameters and moments untouched.
    """
    if set(params) != set(state.m):
        raise InvalidInputError("optimizer state does not have one slot per parameter")
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"gradient of {name} is not finite", name)

    state.step += 1
    b1, b2 = config.beta1, config.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * grad
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * grad * grad
        update = (m / correction1) / (np.sqrt(v / correction2) + config.adam_eps)
        data = param.data
        if name in state.decayed and config.weight_decay > 0:
            data = data * (1.0 - lr * config.weight_decay)
        param.data = (data - lr * update).astype(param.dtype)


def lr_schedule(step: int, config: TrainConfig, schedule: Optional[str] = None) -> float:
    """Learning rate for the 0-based ``step``.

    Linear warm-up from 0 to ``config.lr`` over ``warmup_steps``, then cosine
    or linear decay reaching 0 at ``total_steps``.
    """
    schedule = schedule or config.schedule
    if step < 0:
        raise InvalidInputError(f"step must be non-negative, got {step}")
    if step < config.warmup_steps:
        return config.lr * step / config.warmup_steps
    span = config.total_steps - config.warmup_steps
    if span <= 0 or step >= config.total_steps:
        return 0.0
    progress = (step - config.warmup_steps) / span
    if schedule == "cosine":
        return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    return config.lr * (1.0 - progress)


# --- training loop ---------------------------------------------------------

Objective = Callable[[int, bool], Tuple[Tensor, Dict[str, Optional[float]]]]
CheckpointFn = Callable[[int], Any]


@dataclass
class TrainResult:
    """What a finished (or aborted) loop leaves behind."""

    steps_completed: int
    history: List[Dict[str, Any]] = field(default_factory=list)
    optimizer: Optional[OptimizerState] = None

    def losses(self) -> List[float]:
        return [record["loss"] for record in self.history]


class MetricsWriter:
    """Appends JSONL records {step, loss, masked_acc, lr, wall_ms}."""

    def __init__(self, path: Optional[Union[str, Path]]):
        self.path = Path(path) if path else None
        self._file = open(self.path, "w", encoding="utf-8") if self.path else None

    def write(self, record: Dict[str, Any]) -> None:
        if self._file is not None:
            self._file.write(json.dumps(record, sort_keys=True) + "\n")
            self._file.flush()

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None


def train_loop(params: Mapping[str, Tensor], objective: Objective, config: TrainConfig,
               schedule: Optional[str] = None, metrics_path: Optional[Union[str, Path]] = None,
               on_abort: Optional[CheckpointFn] = None, metric_key: str = "masked_acc") -> TrainResult:
    """Run ``config.total_steps`` updates of ``objective``.

    Args:
        params: Named trainable tensors, updated in place
        objective: ``objective(step, training)`` returns a scalar loss built
            from ``params`` plus named metrics; it owns data order, masking and
            dropout, all drawn from the run's single Rng
        config: Optimiser settings
        schedule: Override for ``config.schedule``
        metrics_path: JSONL metrics log, one record per log interval
        on_abort: Called with the step number before NonFiniteError
            propagates; parameters still hold the last good values
        metric_key: Name under which the objective's accuracy is logged

    Returns:
        TrainResult with the per-step history
    """
    state = OptimizerState.create(params)
    writer = MetricsWriter(metrics_path)
    result = TrainResult(steps_completed=0, optimizer=state)
    started = time.perf_counter()
    logger.info(f"Training {len(params)} tensors for {config.total_steps} steps "
                f"(lr {config.lr}, warm-up {config.warmup_steps}, {schedule or config.schedule} schedule)")
    try:
        for step in range(config.total_steps):
            lr = lr_schedule(step, config, schedule)
            for p in params.values():
                p.zero_grad()
            loss, metrics = objective(step, True)
            loss_value = float(loss.data)
            if not math.isfinite(loss_value):
                raise NonFiniteError(f"loss is {loss_value} at step {step}", "loss")
            loss.backward()
            grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                     for name, p in params.items()}
            grad_norm = clip_grad_norm(grads, config.grad_clip)
            optimizer_step(params, grads, state, lr, config)

            record = {"step": step, "loss": loss_value, metric_key: metrics.get(metric_key), "lr": lr,
                      "wall_ms": round((time.perf_counter() - started) * 1000.0, 3)}
            result.history.append(record)
            result.steps_completed = step + 1
            logger.debug(f"step {step}: loss {loss_value:.4f}, grad norm {grad_norm:.3f}, lr {lr:.2e}")
            if (step + 1) % config.log_interval == 0 or step + 1 == config.total_steps:
                writer.write(record)
                logger.info(f"step {step + 1}/{config.total_steps}: loss {loss_value:.4f}, "
                            f"{metric_key} {_fmt(metrics.get(metric_key))}, lr {lr:.2e}")
    except NonFiniteError as e:
        logger.error(f"Aborting training at step {result.steps_completed}: {e}")
        if on_abort is not None:
            on_abort(result.steps_completed)
        raise
    finally:
        writer.close()
    return result


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.3f}"


# --- corpus ----------------------------------------------------------------

def load_corpus_jsonl(path: Union[str, Path], text_field: str = "text") -> List[str]:
    """Read the ``text`` field of every JSONL record."""
    texts = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise InvalidInputError(f"{path}:{line_no} is not valid JSON: {e}") from e
            if not isinstance(record, dict) or not isinstance(record.get(text_field), str):
                raise InvalidInputError(f"{path}:{line_no} has no string field {text_field!r}")
            texts.append(record[text_field])
    return texts


def pack_corpus(texts: Sequence[str], tokenizer: ByteTokenizer, seq_len: int) -> np.ndarray:
    """Concatenate ``[CLS] text [SEP]`` records and cut the stream into rows of ``seq_len``.

    The final partial row is right-padded with [PAD].
    """
    if not texts:
        raise InvalidInputError("corpus is empty")
    stream = np.fromiter((i for text in texts for i in tokenizer.encode(text, add_special=True)),
                         dtype=np.int64)
    n_rows = -(-stream.size // seq_len)
    packed = np.full(n_rows * seq_len, PAD_ID, dtype=np.int64)
    packed[:stream.size] = stream
    return packed.reshape(n_rows, seq_len)


class BatchSampler:
    """Draws batches from epoch-wise permutations of the rows."""

    def __init__(self, n_rows: int, batch_size: int, rng: Rng):
        if n_rows < 1:
            raise InvalidInputError("cannot sample batches from zero rows")
        self.n_rows = n_rows
        self.batch_size = batch_size
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._cursor = 0

    def next_indices(self) -> np.ndarray:
        picked = []
        needed = self.batch_size
        while needed > 0:
            if self._cursor >= self._order.size:
                self._order = self.rng.permutation(self.n_rows)
                self._cursor = 0
            take = self._order[self._cursor:self._cursor + needed]
            self._cursor += take.size
            needed -= take.size
            picked.append(take)
        return np.concatenate(picked)


def mlm_objective(params: EncoderParams, chunks: np.ndarray, config: TrainConfig, rng: Rng) -> Objective:
    """Masked-LM objective over packed rows, drawing batches, masks and dropout from ``rng``."""
    sampler = BatchSampler(chunks.shape[0], config.batch_size, rng)
    vocab_size = params.config.vocab_size

    def objective(step: int, training: bool) -> Tuple[Tensor, Dict[str, Optional[float]]]:
        rows = chunks[sampler.next_indices()]
        batch = mlm_mask(rows, config.mask_prob, rng, vocab_size)
        output = model_forward(params, batch.input_ids, batch.mask, training=training, rng=rng)
        loss, accuracy = masked_cross_entropy(output.logits, batch.labels)
        return loss, {"masked_acc": accuracy}

    return objective


def pretrain(params: EncoderParams, chunks: np.ndarray, config: TrainConfig, rng: Rng,
             metrics_path: Optional[Union[str, Path]] = None,
             on_abort: Optional[CheckpointFn] = None) -> TrainResult:
    """MLM pretraining with the configured (cosine by default) schedule."""
    return train_loop(params.parameter_dict(), mlm_objective(params, chunks, config, rng), config,
                      metrics_path=metrics_path, on_abort=on_abort)


def evaluate_mlm(params: EncoderParams, chunks: np.ndarray, mask_prob: float, rng: Rng,
                 batch_size: int = 16) -> Dict[str, Any]:
    """Held-out masked loss and accuracy, weighted by the number of selected tokens."""
    if chunks.shape[0] == 0:
        raise InvalidInputError("no evaluation rows")
    total_loss = 0.0
    total_correct = 0.0
    total = 0
    with no_grad():
        for start in range(0, chunks.shape[0], batch_size):
            batch = mlm_mask(chunks[start:start + batch_size], mask_prob, rng, params.config.vocab_size)
            if batch.n_selected == 0:
                continue
            output = model_forward(params, batch.input_ids, batch.mask)
            loss, accuracy = masked_cross_entropy(output.logits, batch.labels)
            total_loss += float(loss.data) * batch.n_selected
            total_correct += accuracy * batch.n_selected
            total += batch.n_selected
    if total == 0:
        return {"loss": 0.0, "masked_acc": None, "n_masked": 0, "seq_len": int(chunks.shape[1])}
    return {"loss": total_loss / total, "masked_acc": total_correct / total, "n_masked": total,
            "seq_len": int(chunks.shape[1])}
