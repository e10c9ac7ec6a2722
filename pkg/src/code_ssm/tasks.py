"""
Downstream fine-tuning for code-ssm.

Task heads on top of the encoder (contrastive retrieval, pooled sequence and
pair classifiers, per-position type tagging), the batching that turns
synthetic records into token ids, and the fine-tune and evaluate drivers.
Fine-tuning reuses the pretraining loop with a linear schedule.
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Set, Tuple, Union

import numpy as np

from .config import TaskConfig, TrainConfig
from .exceptions import ConfigError, InvalidInputError, ShapeError
from .layers import INIT_STD, PadMask
from .metrics import MetricReport, eval_classification, eval_clone, eval_mrr, eval_token_types, top_types
from .model import EncoderParams, encode
from .numerics import (
    IGNORE_INDEX,
    Rng,
    Tensor,
    add,
    as_tensor,
    cross_entropy,
    l2_normalize,
    linear,
    masked_mean,
    matmul,
    no_grad,
    reshape,
    scale,
    select_position,
    tensor,
    transpose,
)
from .synthetic import SyntheticDataset
from .tokenizer import PAD_ID, ByteTokenizer
from .training import BatchSampler, CheckpointFn, TrainResult, train_loop


logger = logging.getLogger(__name__)

HEAD_PREFIX = "head."


@dataclass
class TaskSpec:
    """Shape of a downstream task."""

    kind: str
    n_labels: int = 2
    n_types: int = 6
    unk_id: int = 0
    pooling: str = "mean"
    context_length: int = 128
    temperature: float = 0.05

    def __post_init__(self):
        if self.kind not in ("retrieval", "seq_class", "pair_class", "token_class"):
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.n_labels < 2:
            raise ConfigError(f"n_labels must be >= 2, got {self.n_labels}")
        if not 0 <= self.unk_id < self.n_types:
            raise ConfigError(f"unk_id {self.unk_id} must lie in [0, {self.n_types})")
        if self.pooling not in ("mean", "first_token"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")

    @property
    def n_outputs(self) -> int:
        return {"seq_class": self.n_labels, "pair_class": 2, "token_class": self.n_types}.get(self.kind, 0)

    @classmethod
    def from_config(cls, config: TaskConfig) -> "TaskSpec":
        return cls(kind=config.kind, n_labels=config.n_labels, n_types=config.n_types,
                   unk_id=config.unk_id, pooling=config.pooling,
                   context_length=config.context_length, temperature=config.temperature)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TaskSpec":
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TaskHead:
    """Linear classifier on pooled or per-position hidden states."""

    weight: Tensor
    bias: Tensor

    def named_parameters(self, prefix: str = HEAD_PREFIX) -> List[Tuple[str, Tensor]]:
        return [(f"{prefix}weight", self.weight), (f"{prefix}bias", self.bias)]

    def tensors(self) -> Dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


def init_task_head(spec: TaskSpec, hidden_dim: int, rng: Rng) -> Optional[TaskHead]:
    """Randomly initialised head; retrieval has none."""
    if spec.n_outputs == 0:
        return None
    return TaskHead(weight=tensor(rng.truncated_normal((hidden_dim, spec.n_outputs), std=INIT_STD),
                                  requires_grad=True),
                    bias=tensor(np.zeros(spec.n_outputs), requires_grad=True))


def pool_sequence(hidden: Tensor, mask: Optional[PadMask] = None, pooling: str = "mean") -> Tensor:
    """Reduce (L, d) or (B, L, d) hidden states to one vector per sequence."""
    hidden = as_tensor(hidden)
    unbatched = hidden.ndim == 2
    if unbatched:
        hidden = reshape(hidden, (1,) + hidden.shape)
    if pooling == "first_token":
        pooled = select_position(hidden, 0)
    elif pooling == "mean":
        valid = mask.valid if mask is not None else np.ones(hidden.shape[:2], dtype=bool)
        pooled = masked_mean(hidden, valid)
    else:
        raise ConfigError(f"unknown pooling {pooling!r}")
    return reshape(pooled, pooled.shape[1:]) if unbatched else pooled


def retrieval_loss(query_vecs: Tensor, doc_vecs: Tensor, temperature: float = 0.05) -> Tensor:
    """Symmetric in-batch contrastive loss over cosine similarities / temperature.

    Matching pairs sit on the diagonal; the query->doc and doc->query
    cross-entropies are averaged.
    """
    query_vecs, doc_vecs = as_tensor(query_vecs), as_tensor(doc_vecs)
    if query_vecs.shape != doc_vecs.shape or query_vecs.ndim != 2:
        raise ShapeError(f"query {query_vecs.shape} and doc {doc_vecs.shape} must both be (B, d)")
    batch = query_vecs.shape[0]
    if batch < 2:
        raise InvalidInputError("contrastive retrieval needs at least two pairs per batch")
    logits = scale(matmul(l2_normalize(query_vecs), transpose(l2_normalize(doc_vecs))), 1.0 / temperature)
    targets = np.arange(batch)
    forward, _ = cross_entropy(logits, targets)
    backward, _ = cross_entropy(transpose(logits), targets)
    return scale(add(forward, backward), 0.5)


# --- batching --------------------------------------------------------------

@dataclass
class TaskArrays:
    """Token ids and targets for a whole dataset."""

    inputs: np.ndarray
    targets: np.ndarray
    second_inputs: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.inputs.shape[0]


def _pad_rows(rows: List[List[int]], length: int) -> np.ndarray:
    out = np.full((len(rows), length), PAD_ID, dtype=np.int64)
    for index, row in enumerate(rows):
        row = row[:length]
        out[index, :len(row)] = row
    return out


def _token_rows(tokens: List[str], types: List[int], tokenizer: ByteTokenizer,
                length: int) -> Tuple[List[int], List[int]]:
    """Space-joined bytes with each word's type on its first byte; words cut by the context are dropped."""
    ids = [tokenizer.cls_id]
    labels = [IGNORE_INDEX]
    for index, (word, type_id) in enumerate(zip(tokens, types)):
        piece = tokenizer.encode(word if index == 0 else " " + word)
        first = len(ids) + (0 if index == 0 else 1)
        if len(ids) + len(piece) + 1 > length:
            break
        ids += piece
        labels += [IGNORE_INDEX] * len(piece)
        labels[first] = type_id
    ids.append(tokenizer.sep_id)
    labels.append(IGNORE_INDEX)
    return ids, labels


def prepare_task_arrays(dataset: SyntheticDataset, spec: TaskSpec,
                        tokenizer: Optional[ByteTokenizer] = None) -> TaskArrays:
    """Tokenise every record to ``spec.context_length``."""
    tokenizer = tokenizer or ByteTokenizer()
    length = spec.context_length
    records = dataset.records
    if dataset.kind != spec.kind:
        raise InvalidInputError(f"dataset holds {dataset.kind} records but the task is {spec.kind}")
    if not records:
        raise InvalidInputError("dataset is empty")

    if spec.kind == "retrieval":
        return TaskArrays(inputs=tokenizer.encode_batch([r["query"] for r in records], length),
                          targets=np.arange(len(records)),
                          second_inputs=tokenizer.encode_batch([r["code"] for r in records], length))
    if spec.kind == "seq_class":
        return TaskArrays(inputs=tokenizer.encode_batch([r["text"] for r in records], length),
                          targets=np.asarray([r["label"] for r in records], dtype=np.int64))
    if spec.kind == "pair_class":
        rows = [tokenizer.encode_pair(r["first"], r["second"], length) for r in records]
        return TaskArrays(inputs=_pad_rows(rows, length),
                          targets=np.asarray([r["label"] for r in records], dtype=np.int64))

    id_rows, label_rows = zip(*(_token_rows(r["tokens"], r["types"], tokenizer, length) for r in records))
    labels = np.full((len(records), length), IGNORE_INDEX, dtype=np.int64)
    for index, row in enumerate(label_rows):
        labels[index, :len(row)] = row
    return TaskArrays(inputs=_pad_rows(list(id_rows), length), targets=labels)


# --- forward ---------------------------------------------------------------

def _mask_for(ids: np.ndarray) -> PadMask:
    return PadMask.from_ids(ids, PAD_ID)


def embed_sequences(params: EncoderParams, ids: np.ndarray, spec: TaskSpec,
                    training: bool = False, rng: Optional[Rng] = None) -> Tensor:
    mask = _mask_for(ids)
    return pool_sequence(encode(params, ids, mask, training=training, rng=rng), mask, spec.pooling)


def task_logits(params: EncoderParams, head: TaskHead, ids: np.ndarray, spec: TaskSpec,
                training: bool = False, rng: Optional[Rng] = None) -> Tensor:
    """(B, n_outputs) for sequence tasks, (B, L, n_types) for token tagging."""
    mask = _mask_for(ids)
    hidden = encode(params, ids, mask, training=training, rng=rng)
    if spec.kind == "token_class":
        return linear(hidden, head.weight, head.bias)
    return linear(pool_sequence(hidden, mask, spec.pooling), head.weight, head.bias)


def task_loss(params: EncoderParams, head: Optional[TaskHead], arrays: TaskArrays, rows: np.ndarray,
              spec: TaskSpec, training: bool = False,
              rng: Optional[Rng] = None) -> Tuple[Tensor, Dict[str, Optional[float]]]:
    if spec.kind == "retrieval":
        queries = embed_sequences(params, arrays.inputs[rows], spec, training, rng)
        docs = embed_sequences(params, arrays.second_inputs[rows], spec, training, rng)
        return retrieval_loss(queries, docs, spec.temperature), {"accuracy": None}
    logits = task_logits(params, head, arrays.inputs[rows], spec, training, rng)
    loss, accuracy = cross_entropy(logits, arrays.targets[rows])
    return loss, {"accuracy": accuracy}


# --- drivers ---------------------------------------------------------------

def finetune(params: EncoderParams, head: Optional[TaskHead], dataset: SyntheticDataset, spec: TaskSpec,
             config: TrainConfig, rng: Rng, metrics_path: Optional[Union[str, Path]] = None,
             on_abort: Optional[CheckpointFn] = None) -> TrainResult:
    """Train encoder and head together under the linear schedule."""
    arrays = prepare_task_arrays(dataset, spec)
    batch_size = min(config.batch_size, len(arrays))
    if spec.kind == "retrieval" and batch_size < 2:
        raise InvalidInputError("retrieval fine-tuning needs at least two records")
    sampler = BatchSampler(len(arrays), batch_size, rng)

    named = params.parameter_dict()
    if head is not None:
        named.update(head.named_parameters())

    def objective(step: int, training: bool):
        return task_loss(params, head, arrays, sampler.next_indices(), spec, training, rng)

    logger.info(f"Fine-tuning on {len(arrays)} {spec.kind} records")
    return train_loop(named, objective, config, schedule="linear", metrics_path=metrics_path,
                      on_abort=on_abort, metric_key="accuracy")


def _batched(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield np.arange(start, min(start + batch_size, n))


def evaluate_task(params: EncoderParams, head: Optional[TaskHead], dataset: SyntheticDataset, spec: TaskSpec,
                  batch_size: int = 32, top_set: Optional[Set[int]] = None) -> MetricReport:
    """Score a dataset with every metric that applies to its task kind."""
    arrays = prepare_task_arrays(dataset, spec)
    n = len(arrays)
    with no_grad():
        if spec.kind == "retrieval":
            queries = np.concatenate([embed_sequences(params, arrays.inputs[rows], spec).data
                                      for rows in _batched(n, batch_size)])
            docs = np.concatenate([embed_sequences(params, arrays.second_inputs[rows], spec).data
                                   for rows in _batched(n, batch_size)])
            queries = queries / np.linalg.norm(queries, axis=1, keepdims=True)
            docs = docs / np.linalg.norm(docs, axis=1, keepdims=True)
            mrr = eval_mrr(queries.astype(np.float64) @ docs.astype(np.float64).T, arrays.targets)
            return MetricReport(task=spec.kind, metrics={"mrr": mrr}, n_samples=n)

        if head is None:
            raise InvalidInputError(f"{spec.kind} evaluation needs a task head")
        logits = [task_logits(params, head, arrays.inputs[rows], spec).data for rows in _batched(n, batch_size)]

    preds = np.concatenate([chunk.argmax(axis=-1) for chunk in logits])
    if spec.kind == "token_class":
        golds = arrays.targets
        if top_set is None:
            top_set = top_types(golds, spec.unk_id)
        overall, top = eval_token_types(np.where(golds == IGNORE_INDEX, IGNORE_INDEX, preds), golds,
                                        spec.unk_id, top_set)
        return MetricReport(task=spec.kind, metrics={"overall_f1": overall, "top100_f1": top}, n_samples=n)

    golds = arrays.targets
    metrics = {
        "accuracy": eval_classification(preds, golds, "accuracy"),
        "f1_macro": eval_classification(preds, golds, "f1_macro", n_classes=spec.n_outputs),
    }
    if spec.kind == "pair_class":
        precision, recall, f1 = eval_clone(preds, golds)
        metrics.update(precision=precision, recall=recall, f1=f1)
    return MetricReport(task=spec.kind, metrics=metrics, n_samples=n)
