"""Command-line surface.

    python main.py gen-data --n 200 --seed 7 --out data/toy.jsonl
    python main.py train --config data/toy_run.json
    python main.py y-decode --low "[0] x 6" --high "[0] x 5 + [4]" --shared 5

Every command takes --seed, --out and --log-level, returns 0 on success and
a nonzero status when it fails.
"""
from typing import List, Optional
import argparse
import os
import sys

from loguru import logger

from .bench import BENCH_MODES, bench_decode, bench_grid
from .config import (
    BEAM_SIZE,
    CHECKPOINT_PATH,
    LOG_DIR,
    LOG_LEVEL,
    OUTPUT_DELAY,
    PORT,
    STREAMING_LEFT_CONTEXT,
    TRAINING_LEFT_CONTEXT,
    init_config,
)
from .data import Dataset, check_vocab, generate_dataset, read_dataset, write_dataset
from .infer import LabelCache, offline_decode, stream_decode, y_decode
from .metrics import evaluate
from .rnnt import alignment_records, viterbi_alignment
from .templates import (
    format_bench_grid,
    format_decode_bench,
    format_delay_report,
    format_event,
    format_results_table,
    format_transcript,
)
from .train import (
    DatasetAligner,
    ReferenceAligner,
    TrainRun,
    context_from_text,
    cumulative_lookahead,
    train,
)
from .transducer import TransducerModel
from .utils import append_jsonl, log_path, save_json_data, write_jsonl


# ===== Argument types =====

def _left(text: str) -> Optional[int]:
    if text.lower() in ("full", "none", "inf"):
        return None
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("left context must be >= 0 or 'full'")
    return value


def _steps(text: str) -> List[int]:
    try:
        steps = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not steps or any(step < 1 for step in steps):
        raise argparse.ArgumentTypeError("step sizes must be positive")
    return steps


# ===== Shared helpers =====

def _configure_logging(level: str) -> None:
    logger.remove()
    logger.add(sys.stderr, level=level.upper())


def _load_model(path: str) -> TransducerModel:
    return TransducerModel.load(path).snapshot()


def _dataset(args, model: TransducerModel) -> Dataset:
    if args.data:
        dataset = read_dataset(args.data)
    else:
        dataset = generate_dataset(args.n, args.seed, feature_dim=model.spec.feature_dim)
    check_vocab(dataset.vocab, model.vocab)
    if args.limit is not None:
        dataset = Dataset(dataset.utterances[:args.limit], dataset.vocab, dataset.frame_ms,
                          dataset.feature_dim, dataset.seed, dataset.params)
    return dataset


def _config(model: TransducerModel, text: str, args):
    return context_from_text(model.spec, text, left=args.left, output_delay=args.output_delay)


def _write(args, payload) -> None:
    if not args.out:
        return
    if isinstance(payload, list):
        write_jsonl(payload, args.out)
    else:
        save_json_data(payload, args.out)
    logger.info(f"Wrote results to {args.out}")


# ===== Commands =====

def cmd_gen_data(args) -> int:
    dataset = generate_dataset(args.n, args.seed, len_range=(args.min_tokens, args.max_tokens),
                               noise=args.noise, feature_dim=args.feature_dim)
    path = args.out or os.path.join("data", f"toy_{args.n}_seed{args.seed}.jsonl")
    write_dataset(dataset, path)
    print(f"{len(dataset)} utterances, {dataset.audio_seconds:.1f} sec of audio -> {path}")
    return 0


def cmd_train(args) -> int:
    run = TrainRun.load(args.config)
    updates = {}
    if args.steps is not None:
        updates["steps"] = args.steps
    if args.seed_given:
        updates["seed"] = args.seed
    if args.data:
        updates["dataset"] = args.data
    if updates:
        run = run.model_copy(update=updates)
    result = train(run)
    print(f"{run.name}: {result.steps} steps, loss {result.first_loss} -> {result.final_loss}, "
          f"{result.skipped} skipped, checkpoint {result.checkpoint}")
    _write(args, result.model_dump(exclude={"losses"}))
    return 0


def cmd_decode(args) -> int:
    model = _load_model(args.checkpoint)
    dataset = _dataset(args, model)
    cfg = _config(model, args.config, args)
    cache = LabelCache()
    records = []
    for utt in dataset:
        hyp = offline_decode(model, utt.features, cfg, beam=args.beam, cache=cache)
        text = hyp.text(model.vocab)
        print(format_transcript(utt.id, text, utt.text(model.vocab)))
        records.append({"id": utt.id, "text": text, "labels": list(hyp.labels),
                        "emission_times": hyp.times_ms(cfg.frame_ms), "score": hyp.score,
                        "config": cfg.notation()})
    _write(args, records)
    return 0


def cmd_stream(args) -> int:
    model = _load_model(args.checkpoint)
    dataset = _dataset(args, model)
    cfg = _config(model, args.config, args)
    events_file = log_path("stream", LOG_DIR)
    records = []
    for utt in dataset:
        events, final = stream_decode(model, utt.features, cfg, args.step_size)
        print(utt.id)
        for event in events:
            print(f"  {format_event(event)}")
            record = dict(event.model_dump(), id=utt.id)
            append_jsonl(record, events_file)
            records.append(record)
    _write(args, records)
    return 0


def cmd_y_decode(args) -> int:
    model = _load_model(args.checkpoint)
    dataset = _dataset(args, model)
    low = _config(model, args.low, args)
    high = _config(model, args.high, args)
    events_file = log_path("y_stream", LOG_DIR)
    records = []
    for utt in dataset:
        result = y_decode(model, utt.features, low, high, args.shared, args.step_size, args.schedule)
        print(utt.id)
        for event in result.events:
            print(f"  {format_event(event)}")
            append_jsonl(dict(event.model_dump(), id=utt.id), events_file)
        records.append(dict(result.model_dump(), id=utt.id))
    _write(args, records)
    return 0


def cmd_align(args) -> int:
    model = _load_model(args.checkpoint)
    dataset = _dataset(args, model)
    cfg = _config(model, args.config, args)
    records = []
    for utt in dataset:
        path = viterbi_alignment(model.logits_grid(utt.features, utt.labels, cfg), utt.labels)
        records.append({"id": utt.id, "frame_ms": utt.frame_ms, "log_prob": path.log_prob,
                        "alignment": alignment_records(path, utt.labels, utt.frame_ms,
                                                       model.vocab.to_list())})
        print(f"{utt.id}\t{' '.join(str(t) for t in path.times_ms(utt.frame_ms))}")
    _write(args, records)
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    dataset = _dataset(args, model)
    references = None
    if args.reference == 'dataset':
        aligner = DatasetAligner()
        references = {utt.id: aligner.reference(utt) for utt in dataset}
    elif args.reference_checkpoint:
        aligner = ReferenceAligner(_load_model(args.reference_checkpoint))
        references = {utt.id: aligner.reference(utt) for utt in dataset}

    rows, reports = [], []
    for text in args.config or (model.spec.default_configs or [f"[full] x {model.spec.depth}"]):
        cfg = _config(model, text, args)
        report = evaluate(model, dataset, cfg, beam=args.beam, references=references)
        reports.append(report.model_dump())
        rows.append({"model": os.path.basename(args.checkpoint), "config": report.config,
                     "lookahead_ms": cumulative_lookahead(cfg), "wer": report.wer,
                     "delay_ms": report.delay.mean_ms if report.delay else None})
        if report.delay:
            logger.info(format_delay_report(report.delay))
    print(format_results_table(rows))
    _write(args, reports)
    return 0


def cmd_bench(args) -> int:
    if args.checkpoint:
        model = _load_model(args.checkpoint)
    else:
        model = TransducerModel(seed=args.seed)
    if args.decode:
        dataset = _dataset(args, model)
        cfg = _config(model, args.config, args)
        rows = [bench_decode(model, dataset, cfg, beam=args.beam, use_cache=use_cache)
                for use_cache in (False, True)]
        print(format_decode_bench(rows))
    else:
        cfg = model.context([0] * model.spec.depth,
                            left=args.left if args.left is not None else STREAMING_LEFT_CONTEXT)
        rows = bench_grid(model, args.mode or list(BENCH_MODES), args.steps,
                          audio_seconds=args.audio_seconds, repeats=args.repeats, cfg=cfg,
                          seed=args.seed)
        print(format_bench_grid(rows))
    _write(args, [row.model_dump() for row in rows])
    return 0


def cmd_serve(args) -> int:
    from .app import init_app

    model = _load_model(args.checkpoint) if args.checkpoint else None
    service = init_app(model)
    service.run(host=args.host, port=args.port, debug=False)
    return 0


# ===== Parser =====

def _add_data_args(p: argparse.ArgumentParser, limit: Optional[int] = None) -> None:
    p.add_argument("--data", default=None, help="Dataset file; generated from --seed when omitted")
    p.add_argument("--n", type=int, default=20, help="Utterances to generate without --data")
    p.add_argument("--limit", type=int, default=limit, help="Use only the first N utterances")


def _add_model_args(p: argparse.ArgumentParser, left: Optional[int] = TRAINING_LEFT_CONTEXT,
                    checkpoint: Optional[str] = CHECKPOINT_PATH) -> None:
    p.add_argument("--checkpoint", default=checkpoint)
    p.add_argument("--left", type=_left, default=left,
                   help="Left context in frames per layer, or 'full'")
    p.add_argument("--output-delay", type=int, default=OUTPUT_DELAY)


def _add_streaming_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--step-size", type=int, default=4, help="Frames per streaming call")


def build_parser() -> argparse.ArgumentParser:
    # data and model flags are added per subcommand; their defaults differ by command
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Seed for every random draw (default 0)")
    common.add_argument("--out", default=None, help="Machine-readable output path")
    common.add_argument("--log-level", default=LOG_LEVEL, help="loguru level (DEBUG, INFO, ...)")

    parser = argparse.ArgumentParser(prog="ytt", description="Variable-context transformer transducer kit")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("gen-data", parents=[common], help="Generate a synthetic dataset")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--min-tokens", type=int, default=3)
    p.add_argument("--max-tokens", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--feature-dim", type=int, default=16)
    p.set_defaults(handler=cmd_gen_data)

    p = commands.add_parser("train", parents=[common], help="Train from a JSON run spec")
    p.add_argument("--config", required=True, help="Run spec (JSON)")
    p.add_argument("--steps", type=int, default=None, help="Override the run spec's step count")
    p.add_argument("--data", default=None, help="Override the run spec's dataset")
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser("decode", parents=[common], help="Offline decode")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--config", default="[0] x 6")
    p.add_argument("--beam", type=int, default=1)
    p.set_defaults(handler=cmd_decode)

    p = commands.add_parser("stream", parents=[common], help="Single-branch streaming decode")
    _add_data_args(p)
    _add_model_args(p, left=STREAMING_LEFT_CONTEXT)
    _add_streaming_args(p)
    p.add_argument("--config", default="[0] x 6")
    p.set_defaults(handler=cmd_stream)

    p = commands.add_parser("y-decode", parents=[common],
                            help="Two-branch streaming decode with shared lower layers")
    _add_data_args(p, limit=1)
    _add_model_args(p, left=STREAMING_LEFT_CONTEXT)
    _add_streaming_args(p)
    p.add_argument("--low", required=True, help='Low-latency config, e.g. "[0] x 6"')
    p.add_argument("--high", required=True, help='High-latency config, e.g. "[0] x 5 + [4]"')
    p.add_argument("--shared", type=int, required=True, help="Shared lower layers")
    p.add_argument("--schedule", choices=["cooperative", "concurrent"], default="cooperative")
    p.set_defaults(handler=cmd_y_decode)

    p = commands.add_parser("align", parents=[common], help="Viterbi alignment dump")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--config", default="[full] x 6")
    p.set_defaults(handler=cmd_align)

    p = commands.add_parser("eval", parents=[common], help="WER, accuracy and delay")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--config", action="append", help="Repeat to evaluate several configs")
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--reference", choices=["model", "dataset"], default="model")
    p.add_argument("--reference-checkpoint", default=None,
                   help="Full-context model whose Viterbi times are the delay reference")
    p.set_defaults(handler=cmd_eval)

    p = commands.add_parser("bench", parents=[common], help="Encode/decode benchmarks")
    _add_data_args(p)
    _add_model_args(p, checkpoint=None)
    p.add_argument("--mode", action="append", choices=list(BENCH_MODES))
    p.add_argument("--steps", type=_steps, default=[1, 4, 32])
    p.add_argument("--audio-seconds", type=float, default=100.0)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--decode", action="store_true", help="Decode RTF with and without the label cache")
    p.add_argument("--config", default="[0] x 6")
    p.add_argument("--beam", type=int, default=BEAM_SIZE)
    p.set_defaults(handler=cmd_bench)

    p = commands.add_parser("serve", parents=[common], help="Run the HTTP recognition service")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=PORT)
    p.set_defaults(handler=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    _configure_logging(args.log_level)

    try:
        init_config()
        return args.handler(args)
    except Exception as e:
        logger.error(f"{args.command} failed: {str(e)}")
        return 1
