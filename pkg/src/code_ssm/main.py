"""
Command-line entry point for code-ssm.

Subcommands: pretrain, finetune, eval, bench, spectrum, gradcheck and
gen-data. Each resolves its configuration (preset, JSON file, ``--set``
overrides, seed), writes a ``resolved_config.json`` snapshot into a fresh
output directory and maps failures onto exit codes: 1 for usage errors, 2
for configuration errors and 3 for any other failure.
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .bench import compare
from .checkpoint import HEAD_PREFIX, load_model, save_model
from .config import PRESETS, RunConfig, load_config, write_resolved_config
from .exceptions import CodeSSMError, ConfigError
from .metrics import MetricReport, top_types
from .model import EncoderParams, init_params, model_forward
from .numerics import Rng, finite_diff_check, precision, tensor
from .ssm import spectrum, write_spectrum_csv
from .synthetic import SyntheticDataset, generate_corpus, generate_synthetic_task
from .tasks import TaskHead, TaskSpec, evaluate_task, finetune, init_task_head
from .tokenizer import ByteTokenizer
from .training import evaluate_mlm, load_corpus_jsonl, masked_cross_entropy, mlm_mask, pack_corpus, pretrain


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

CHECKPOINT_NAME = "checkpoint.cssm"
TASK_CHECKPOINT_NAME = "task_checkpoint.cssm"
EVAL_SEED_OFFSET = 1


class UsageError(Exception):
    """Raised by the parser instead of exiting, so the caller owns the exit code."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _setup_logging(level: str) -> None:
    """Configure the root logger once per process."""
    logging.basicConfig(
        level=getattr(logging, level),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[logging.StreamHandler(sys.stderr)],
        force=True,
    )
    logging.getLogger('code_ssm').setLevel(getattr(logging, level))


def _report_error(kind: str, message: str) -> None:
    reason = " ".join(str(message).split())
    print(f"codessm: error={kind} reason={reason}", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', '-c', help='Path to a JSON configuration file')
    common.add_argument('--preset', default='desk', choices=sorted(PRESETS), help='Named configuration preset')
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='Dotted override such as train.lr=5e-4 (repeatable)')
    common.add_argument('--output-dir', '-o', help='Directory for artifacts (default runs/<command>)')
    common.add_argument('--seed', type=int, help='Run seed (CODESSM_SEED takes precedence)')
    common.add_argument('--force', action='store_true', help='Write into a non-empty output directory')
    common.add_argument('--debug', '-d', action='store_true', help='Enable debug logging')

    parser = _Parser(prog='codessm', description='Bidirectional gated state-space encoder for code')
    commands = parser.add_subparsers(dest='command', parser_class=_Parser)

    pretrain_cmd = commands.add_parser('pretrain', parents=[common], help='Masked-LM pretraining')
    pretrain_cmd.add_argument('--steps', type=int, help='Override train.total_steps')
    pretrain_cmd.add_argument('--corpus', help='JSONL corpus with a "text" field (default: synthetic)')

    finetune_cmd = commands.add_parser('finetune', parents=[common], help='Fine-tune on a downstream task')
    finetune_cmd.add_argument('--steps', type=int, help='Override train.total_steps')
    finetune_cmd.add_argument('--task', choices=['retrieval', 'seq_class', 'pair_class', 'token_class'])
    finetune_cmd.add_argument('--data', help='Task JSONL (default: synthetic)')
    finetune_cmd.add_argument('--checkpoint', help='Pretrained encoder checkpoint (default: random init)')

    eval_cmd = commands.add_parser('eval', parents=[common], help='Evaluate a checkpoint')
    eval_cmd.add_argument('--checkpoint', required=True, help='Checkpoint to evaluate')
    eval_cmd.add_argument('--data', help='Task JSONL for task checkpoints')
    eval_cmd.add_argument('--corpus', help='JSONL corpus for encoder checkpoints')

    bench_cmd = commands.add_parser('bench', parents=[common], help='SSM vs attention benchmark')
    bench_cmd.add_argument('--lengths', help='Comma-separated sequence lengths')
    bench_cmd.add_argument('--batch', type=int, help='Override bench.batch')
    bench_cmd.add_argument('--trials', type=int, help='Override bench.trials')

    spectrum_cmd = commands.add_parser('spectrum', parents=[common], help='Export kernel transfer functions')
    spectrum_cmd.add_argument('--checkpoint', help='Checkpoint to analyse (default: random init)')
    spectrum_cmd.add_argument('--kernel-len', type=int, help='Override spectrum.kernel_len')
    spectrum_cmd.add_argument('--n-freq', type=int, help='Override spectrum.n_freq')

    gradcheck_cmd = commands.add_parser('gradcheck', parents=[common], help='Finite-difference gradient check')
    gradcheck_cmd.add_argument('--threshold', type=float, help='Override gradcheck.threshold')

    gen_cmd = commands.add_parser('gen-data', parents=[common], help='Write synthetic JSONL datasets')
    gen_cmd.add_argument('--task', choices=['corpus', 'retrieval', 'seq_class', 'pair_class', 'token_class'])
    gen_cmd.add_argument('--size', type=int, help='Number of records')
    return parser


def _flag_overrides(args: argparse.Namespace) -> List[str]:
    """Translate per-command flags into dotted overrides so they land in the snapshot."""
    overrides = []

    def add(key: str, value) -> None:
        overrides.append(f"{key}={json.dumps(value)}")

    if getattr(args, 'steps', None) is not None:
        add('train.total_steps', args.steps)
    if getattr(args, 'task', None) and args.task != 'corpus':
        add('task.kind', args.task)
    if getattr(args, 'lengths', None):
        try:
            add('bench.lengths', [int(part) for part in args.lengths.split(',') if part.strip()])
        except ValueError as e:
            raise ConfigError(f"--lengths must be comma-separated integers, got {args.lengths!r}") from e
    for flag, key in (('batch', 'bench.batch'), ('trials', 'bench.trials'),
                      ('kernel_len', 'spectrum.kernel_len'), ('n_freq', 'spectrum.n_freq'),
                      ('threshold', 'gradcheck.threshold')):
        if getattr(args, flag, None) is not None:
            add(key, getattr(args, flag))
    if getattr(args, 'size', None) is not None:
        add('train.corpus_size' if args.task == 'corpus' else 'task.dataset_size', args.size)
    return overrides


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.overrides) + _flag_overrides(args)
    if getattr(args, 'steps', None) is not None:
        # a short run from the command line shortens warm-up with it
        preview = load_config(args.config, args.preset, list(args.overrides), args.seed)
        if preview.train.warmup_steps > args.steps:
            logger.warning(f"Warm-up {preview.train.warmup_steps} exceeds --steps {args.steps}; "
                           f"clamping warm-up to {args.steps}")
            overrides.append(f"train.warmup_steps={args.steps}")
    return load_config(args.config, args.preset, overrides, args.seed)


def prepare_output_dir(path: Path, force: bool) -> Path:
    """Create ``path``; refuse a non-empty directory unless ``force``."""
    if path.exists() and not path.is_dir():
        raise ConfigError(f"output path {path} exists and is not a directory")
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"output directory {path} is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


# --- commands --------------------------------------------------------------

def _load_texts(config: RunConfig, corpus: Optional[str], seed: int) -> List[str]:
    if corpus:
        return load_corpus_jsonl(corpus)
    return generate_corpus(config.train.corpus_size, seed)


def cmd_pretrain(config: RunConfig, args: argparse.Namespace, out: Path) -> int:
    rng = Rng(config.seed)
    texts = _load_texts(config, args.corpus, config.seed)
    chunks = pack_corpus(texts, ByteTokenizer(config.model.vocab_size), config.train.seq_len)
    n_eval = int(round(chunks.shape[0] * config.train.eval_fraction))
    if n_eval >= chunks.shape[0]:
        n_eval = 0
    train_chunks, eval_chunks = chunks[:chunks.shape[0] - n_eval], chunks[chunks.shape[0] - n_eval:]
    logger.info(f"Packed {len(texts)} records into {chunks.shape[0]} rows of {config.train.seq_len} "
                f"({n_eval} held out)")

    params = init_params(config.model, rng)
    checkpoint_path = out / CHECKPOINT_NAME

    def save_last_good(step: int) -> None:
        save_model(checkpoint_path, params, step=step, seed=config.seed, rng=rng,
                   extra={"kind": "pretrain", "aborted": True})

    result = pretrain(params, train_chunks, config.train, rng, metrics_path=out / "metrics.jsonl",
                      on_abort=save_last_good)
    save_model(checkpoint_path, params, step=result.steps_completed, seed=config.seed, rng=rng,
               optimizer_moments=result.optimizer.moments() if result.optimizer else None,
               extra={"kind": "pretrain"})

    if eval_chunks.shape[0]:
        summary = evaluate_mlm(params, eval_chunks, config.train.mask_prob,
                               Rng(config.seed + EVAL_SEED_OFFSET), config.train.batch_size)
        MetricReport(task="mlm", metrics={"masked_acc": summary["masked_acc"] or 0.0},
                     n_samples=summary["n_masked"]).write_json(out / "report.json")
    return EXIT_OK


def _task_dataset(config: RunConfig, data: Optional[str]) -> SyntheticDataset:
    if data:
        return SyntheticDataset.read_jsonl(data, config.task.kind)
    return generate_synthetic_task(config.task.kind, config.task.dataset_size, config.seed, config.task.n_labels)


def cmd_finetune(config: RunConfig, args: argparse.Namespace, out: Path) -> int:
    spec = TaskSpec.from_config(config.task)
    train_set, eval_set = _task_dataset(config, args.data).split(config.task.eval_fraction)
    rng = Rng(config.seed)
    if args.checkpoint:
        params, _ = load_model(args.checkpoint)
    else:
        params = init_params(config.model, rng)
    head = init_task_head(spec, params.config.hidden_dim, rng)
    top_set = top_types([r["types"] for r in train_set.records], spec.unk_id) \
        if spec.kind == "token_class" else set()
    extra = {"kind": "finetune", "task": spec.to_dict(), "top_types": sorted(top_set)}
    checkpoint_path = out / TASK_CHECKPOINT_NAME
    head_tensors = head.tensors() if head is not None else None

    def save_last_good(step: int) -> None:
        save_model(checkpoint_path, params, step=step, seed=config.seed, rng=rng, head=head_tensors,
                   extra={**extra, "aborted": True})

    result = finetune(params, head, train_set, spec, config.train, rng, metrics_path=out / "metrics.jsonl",
                      on_abort=save_last_good)
    save_model(checkpoint_path, params, step=result.steps_completed, seed=config.seed, rng=rng,
               head=head_tensors, extra=extra)
    report = evaluate_task(params, head, eval_set, spec, top_set=top_set or None)
    report.write_json(out / "report.json")
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_eval(config: RunConfig, args: argparse.Namespace, out: Path) -> int:
    params, checkpoint = load_model(args.checkpoint)
    if "task" in checkpoint.extra:
        spec = TaskSpec.from_dict(checkpoint.extra["task"])
        task_config = dataclasses.replace(config, task=dataclasses.replace(config.task, kind=spec.kind))
        dataset = _task_dataset(task_config, args.data)
        if not args.data:
            _, dataset = dataset.split(config.task.eval_fraction)
        stored = checkpoint.with_prefix(HEAD_PREFIX)
        head = TaskHead(weight=tensor(stored["weight"]), bias=tensor(stored["bias"])) if stored else None
        top_set = set(checkpoint.extra.get("top_types", [])) or None
        report = evaluate_task(params, head, dataset, spec, top_set=top_set)
    else:
        texts = _load_texts(config, args.corpus, config.seed)
        chunks = pack_corpus(texts, ByteTokenizer(params.config.vocab_size), config.train.seq_len)
        summary = evaluate_mlm(params, chunks, config.train.mask_prob, Rng(config.seed + EVAL_SEED_OFFSET),
                               config.train.batch_size)
        report = MetricReport(task="mlm", metrics={"masked_acc": summary["masked_acc"] or 0.0},
                              n_samples=summary["n_masked"])
    report.write_json(out / "report.json")
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_bench(config: RunConfig, args: argparse.Namespace, out: Path) -> int:
    bench = config.bench
    report = compare(bench.lengths, bench.batch, bench.trials, bench.hidden_dim, bench.state_size,
                     bench.n_heads, seed=config.seed)
    report.write_csv(out / "bench.csv")
    report.write_json(out / "bench.json")
    print(json.dumps(report.summary(), sort_keys=True))
    return EXIT_OK


def _encoder_for(config: RunConfig, checkpoint: Optional[str]) -> EncoderParams:
    if checkpoint:
        params, _ = load_model(checkpoint)
        return params
    return init_params(config.model, Rng(config.seed))


def cmd_spectrum(config: RunConfig, args: argparse.Namespace, out: Path) -> int:
    params = _encoder_for(config, args.checkpoint)
    settings = config.spectrum
    reports = []
    for index, layer in enumerate(params.layers):
        reports.append(spectrum(layer.fwd_kernel, settings.kernel_len, settings.n_freq, index, "forward"))
        reports.append(spectrum(layer.bwd_kernel, settings.kernel_len, settings.n_freq, index, "backward"))
    write_spectrum_csv(reports, out / "spectrum.csv")
    return EXIT_OK


def cmd_gradcheck(config: RunConfig, args: argparse.Namespace, out: Path) -> int:
    settings = config.gradcheck
    model_config = dataclasses.replace(config.model, hidden_dim=settings.hidden_dim,
                                       max_position=max(config.model.max_position, settings.seq_len))
    with precision(np.float64):
        rng = Rng(config.seed)
        params = init_params(model_config, rng)
        ids = rng.integers(ByteTokenizer().first_regular_id, model_config.vocab_size,
                           (settings.batch_size, settings.seq_len))
        batch = mlm_mask(ids, max(config.train.mask_prob, 0.15), rng, model_config.vocab_size)

        def loss_fn():
            output = model_forward(params, batch.input_ids, batch.mask)
            return masked_cross_entropy(output.logits, batch.labels)[0]

        report = finite_diff_check(loss_fn, params.parameter_dict(), epsilon=settings.epsilon, atol=settings.atol,
                                   max_coords_per_param=settings.max_coords_per_param, rng=rng)

    document = {
        "max_rel_error": report.max_rel_error,
        "worst_parameter": report.worst_parameter,
        "worst_index": list(report.worst_index) if report.worst_index else None,
        "checked_coordinates": report.checked_coordinates,
        "threshold": settings.threshold,
        "atol": settings.atol,
        "per_parameter": report.per_parameter,
    }
    (out / "gradcheck.json").write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"max_rel_error={report.max_rel_error:.6e} worst={report.worst_parameter}")
    if report.max_rel_error >= settings.threshold:
        _report_error("gradcheck", f"max relative error {report.max_rel_error:.3e} in {report.worst_parameter} "
                                   f"is not below {settings.threshold}")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_gen_data(config: RunConfig, args: argparse.Namespace, out: Path) -> int:
    kind = args.task or config.task.kind
    if kind == "corpus":
        path = out / "corpus.jsonl"
        with open(path, "w", encoding="utf-8") as f:
            for text in generate_corpus(config.train.corpus_size, config.seed):
                f.write(json.dumps({"text": text}, sort_keys=True) + "\n")
        logger.info(f"Wrote {config.train.corpus_size} corpus records to {path}")
    else:
        dataset = generate_synthetic_task(kind, config.task.dataset_size, config.seed, config.task.n_labels)
        dataset.write_jsonl(out / f"{kind}.jsonl")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[RunConfig, argparse.Namespace, Path], int]] = {
    'pretrain': cmd_pretrain,
    'finetune': cmd_finetune,
    'eval': cmd_eval,
    'bench': cmd_bench,
    'spectrum': cmd_spectrum,
    'gradcheck': cmd_gradcheck,
    'gen-data': cmd_gen_data,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, run one command and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        _report_error("usage", str(e))
        return EXIT_USAGE
    except SystemExit as e:
        return int(e.code or 0)
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_USAGE

    try:
        config = _resolve_config(args)
        _setup_logging('DEBUG' if args.debug else config.log_level)
        output_dir = prepare_output_dir(Path(args.output_dir or Path('runs') / args.command), args.force)
        write_resolved_config(config, output_dir)
        logger.info(f"Running {args.command} (seed {config.seed}) into {output_dir}")
        return COMMANDS[args.command](config, args, output_dir)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        _report_error(e.kind, str(e))
        return EXIT_CONFIG
    except CodeSSMError as e:
        logger.error(f"{args.command} failed: {e}")
        _report_error(e.kind, str(e))
        return EXIT_RUNTIME
    except (OSError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}")
        _report_error("runtime", str(e))
        return EXIT_RUNTIME


def run() -> None:
    """Entry point function for console script."""
    sys.exit(main())


if __name__ == '__main__':
    run()
