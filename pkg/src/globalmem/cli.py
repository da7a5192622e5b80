"""``globalmem`` command line: memorize, query, train, eval, bench, synth."""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from . import diffcore as dc
from . import evalbench as eb
from . import memory as memlib
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .pipeline import MODES, Pipeline, PipelineConfig
from .state import ALLOWED_BETAS, CapacityError, CompatibilityError, FormatError, fnv1a64
from .text import Vocab
from .training import (
    STAGES,
    GenSample,
    RlgfSource,
    SftSample,
    TrainingAborted,
    build_rlgf_pairs,
    default_config,
    pair_from_outcome,
    train,
)

EXIT_OK, EXIT_INPUT, EXIT_COMPAT, EXIT_NUMERIC = 0, 2, 3, 4
MODE_ALIASES = {"full": "full_context", "rag": "standard_rag"}
log = logging.getLogger("globalmem")


class InputError(ValueError):
    """Bad or missing user input."""


# --- inputs ---------------------------------------------------------------------


def read_records(path) -> list[dict]:
    """Line-delimited JSON corpus records; queries and gold_answers must pair up."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"input not found: {path}")
    out = []
    with path.open(encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{n}: {exc}") from exc
            if not isinstance(rec, dict):
                raise InputError(f"{path}:{n}: record must be an object")
            if "queries" in rec and "gold_answers" in rec and rec["gold_answers"] is not None:
                if len(rec["queries"]) != len(rec["gold_answers"]):
                    raise InputError(f"{path}:{n}: queries and gold_answers differ in length")
            out.append(rec)
    return out


def read_record(path, record: int = 0) -> dict:
    """Plain text becomes ``{"context": text}``; a ``.jsonl`` corpus yields its ``record``-th entry."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"input not found: {path}")
    if path.suffix == ".jsonl":
        recs = read_records(path)
        if not 0 <= record < len(recs):
            raise InputError(f"{path}: no record {record}")
        if not isinstance(recs[record].get("context"), str):
            raise InputError(f"{path}: record {record} has no context")
        return recs[record]
    return {"context": path.read_text(encoding="utf-8")}


def read_context(path, record: int = 0) -> str:
    return read_record(path, record)["context"]


def read_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config not found: {path}")
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise InputError(f"{path}: config must be a key-value object")
    return cfg


def parse_length(s: str) -> int:
    s = s.strip().lower()
    try:
        return int(s[:-1]) * 1024 if s.endswith("k") else int(s)
    except ValueError as exc:
        raise InputError(f"bad length {s!r}") from exc


def parse_modes(s: str) -> list[str]:
    modes = [MODE_ALIASES.get(m.strip(), m.strip()) for m in s.split(",") if m.strip()]
    bad = [m for m in modes if m not in MODES]
    if bad or not modes:
        raise InputError(f"unknown mode(s) {bad}; choose from {', '.join(MODES)} (or 'full')")
    return modes


def check_beta(beta: int) -> int:
    if beta not in ALLOWED_BETAS:
        raise InputError(f"compression ratio {beta} not allowed; choose from {{{','.join(map(str, ALLOWED_BETAS))}}}")
    return beta


def load_model(path):
    if path is None:
        raise InputError("a --checkpoint is required")
    path = Path(path)
    if not path.is_file():
        raise InputError(f"checkpoint not found: {path}")
    params, vocab = load_checkpoint(path)
    if vocab is None:
        raise InputError(f"{path}: checkpoint carries no vocabulary")
    return params, vocab


def pipeline_config(settings: dict) -> PipelineConfig:
    known = {f.name for f in fields(PipelineConfig)}
    return PipelineConfig(**{k: v for k, v in settings.items() if k in known and v is not None})


# --- manifest -----------------------------------------------------------------------


def write_manifest(args: argparse.Namespace, resolved: dict, inputs: Sequence, outputs: Sequence) -> Path:
    """Record what is about to run; written before any heavy work."""
    path = Path(args.manifest) if args.manifest else None
    if path is None:
        out = next((o for o in outputs if o), None)
        stamp = time.strftime("%Y%m%dT%H%M%S")
        path = Path(f"{out}.manifest.json") if out else Path("runs") / f"{args.command}-{stamp}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config": resolved,
        "seed": resolved.get("seed"),
        "inputs": [str(p) for p in inputs if p],
        "outputs": [str(p) for p in outputs if p],
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n", encoding="utf-8")
    return path


def resolve(args: argparse.Namespace, keys: Sequence[str], defaults: dict | None = None) -> dict:
    """Defaults, then the config file, then explicit flags (flags win)."""
    out = dict(defaults or {})
    out.update(read_config(getattr(args, "config", None)))
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def emit(obj: Any) -> None:
    print(json.dumps(obj, default=str))


# --- commands ------------------------------------------------------------------------


def cmd_memorize(args) -> int:
    check_beta(args.beta)
    context = read_context(args.input, args.record)
    params, vocab = load_model(args.checkpoint)
    settings = resolve(args, ["beta", "memory_suffix"])
    write_manifest(args, settings, [args.input, args.checkpoint], [args.out])
    pipe = Pipeline(params, vocab, pipeline_config(settings))
    mem = pipe.memorize(context)
    memlib.offload(mem, args.out)
    emit(memlib.memory_stats(mem))
    return EXIT_OK


def _print_result(r, show_clues: bool) -> None:
    if show_clues and r.clues is not None:
        print("clues:")
        for c in r.clues.clue_strings:
            print(f"  - {c}")
    if r.evidence is not None:
        print("evidence: " + " ".join(str(c) for c in r.evidence.chunk_ids))
    if r.truncated:
        print("note: context truncated to fit the model")
    if r.low_confidence:
        print("note: low confidence (no evidence)")
    print(f"answer: {r.answer}")


def cmd_query(args) -> int:
    mode = parse_modes(args.mode)[0]
    rec = read_record(args.context, args.record)
    context = rec["context"]
    params, vocab = load_model(args.checkpoint)
    if mode == "memorag" and not (args.memory and Path(args.memory).is_file()):
        raise InputError(f"memory file not found: {args.memory}")
    settings = resolve(args, ["hits", "chunk_max", "memory_suffix"])
    if "chunk_max" not in settings and "chunk_max" in rec:
        settings["chunk_max"] = rec["chunk_max"]
    write_manifest(args, settings, [args.memory, args.context, args.checkpoint], [])
    pipe = Pipeline(params, vocab, pipeline_config(settings))
    memory = None
    if mode == "memorag":
        memory = memlib.load(args.memory, params)
        fp = fnv1a64(np.asarray(pipe.context_ids(context), dtype=np.int64))
        if memory.context_fp != fp:
            raise CompatibilityError(
                f"memory was formed over a different context ({memory.context_fp:016x} != {fp:016x})"
            )
    [result] = pipe.run([args.query], context, mode, memory=memory)
    if args.json:
        emit(result.to_record())
    else:
        _print_result(result, mode == "memorag")
    return EXIT_OK


def _stage_data(stage: str, records: list[dict], pipe: Pipeline, settings: dict):
    v = pipe.vocab
    if stage == "pretrain":
        seq_len = int(settings.get("seq_len", 2 * pipe.params.config.window_l))
        stream: list[int] = []
        for r in records:
            stream += v.encode(r.get("text") or r.get("context", ""))
        data = [stream[i:i + seq_len] for i in range(0, len(stream) - seq_len + 1, seq_len)]
        if not data:
            raise InputError(f"corpus too short for one {seq_len}-token sequence")
        return data
    if stage == "sft":
        return [SftSample(pipe.context_ids(r["context"]), pipe.clue_prompt(r["query"]),
                          v.encode(r["output"]) + [v.eos]) for r in records]
    if stage == "generator":
        out = []
        for r in records:
            prompt, _ = pipe.answer_prompt(r["query"], r.get("evidence", r.get("context", "")))
            out.append(GenSample(prompt, v.encode(r["output"]) + [v.eos]))
        return out
    rng = np.random.default_rng(int(settings.get("seed", 0)))
    pairs = []
    for r in records:
        src = RlgfSource(r["context"], r["query"], list(r["clues"]), r["gold_answer"])
        outcome = build_rlgf_pairs(src, pipe, eb.token_f1, rng)
        if outcome.pair is None:
            log.info("skipped RLGF source: %s", outcome.reason)
            continue
        pairs.append(pair_from_outcome(src, outcome, pipe))
    if not pairs:
        raise InputError("no usable RLGF pairs in the data")
    return pairs


def _record_texts(records: list[dict]):
    for r in records:
        for key in ("text", "context", "query", "output", "evidence", "gold_answer"):
            if isinstance(r.get(key), str):
                yield r[key]
        for key in ("queries", "gold_answers", "clues"):
            for item in r.get(key) or []:
                if isinstance(item, str):
                    yield item


def cmd_train(args) -> int:
    stage = args.stage
    records = read_records(args.data) if stage != "toy" else []
    settings = resolve(args, ["lr", "batch_size", "epochs", "steps", "seed", "beta", "clip"])
    if stage == "toy":
        recipe_keys = {f.name for f in fields(eb.ToyRecipe)}
        recipe = eb.ToyRecipe(**{k: v for k, v in settings.items() if k in recipe_keys})
        write_manifest(args, {**asdict(recipe), "stage": stage}, [], [args.out])
        pipe, world, traces = eb.train_toy(recipe, log=lambda m: print(m, file=sys.stderr))
        save_checkpoint(pipe.params, args.out, pipe.vocab)
        emit({"stage": stage, "checkpoint": str(args.out),
              **{k: {"first": t[0], "last": t[-1], "steps": len(t)} for k, t in traces.items()}})
        return EXIT_OK
    if args.checkpoint:
        params, vocab = load_model(args.checkpoint)
    else:
        vocab = Vocab.from_texts(_record_texts(records))
        model_keys = {f.name for f in fields(ModelConfig)} - {"vocab_size", "allowed_betas"}
        mcfg = ModelConfig(vocab_size=len(vocab), **{k: v for k, v in settings.items() if k in model_keys})
        params = init_params(mcfg, seed=int(settings.get("seed", 0)), init_std=float(settings.get("init_std", 0.02)))
    tkeys = {f.name for f in fields(default_config(stage))} - {"stage"}
    tcfg = default_config(stage, **{k: (tuple(v) if k == "betas" else v) for k, v in settings.items() if k in tkeys})
    write_manifest(args, {**asdict(tcfg), **settings}, [args.data, args.checkpoint], [args.out])
    pipe = Pipeline(params, vocab, pipeline_config(settings))
    data = _stage_data(stage, records, pipe, settings)
    trace = train(stage, data, params, tcfg, checkpoint=args.out, vocab=vocab)
    emit({"stage": stage, "steps": len(trace), "first_loss": trace[0], "last_loss": trace[-1],
          "checkpoint": str(args.out)})
    return EXIT_OK


def cmd_eval(args) -> int:
    modes = parse_modes(args.modes)
    records = read_records(args.dataset)
    params, vocab = load_model(args.checkpoint)
    settings = resolve(args, ["hits", "chunk_max", "beta"])
    if records and "chunk_max" not in settings and "chunk_max" in records[0]:
        settings["chunk_max"] = records[0]["chunk_max"]
    write_manifest(args, settings, [args.dataset, args.checkpoint], [args.out])
    pipe = Pipeline(params, vocab, pipeline_config(settings))
    scores = eb.evaluate_modes(pipe, records, modes)
    print(eb.score_table(scores))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            for s in scores:
                f.write(json.dumps(asdict(s)) + "\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    lengths = [parse_length(s) for s in args.lengths.split(",") if s.strip()]
    if not lengths:
        raise InputError("no context lengths given")
    if lengths != sorted(lengths):
        raise InputError("context lengths must be ascending")
    settings = resolve(args, ["beta", "repeats", "seed", "query"])
    if args.checkpoint:
        params, vocab = load_model(args.checkpoint)
    else:
        vocab = Vocab(f"w{i}" for i in range(64))
        window = int(settings.get("window_l", 64))
        params = init_params(ModelConfig(vocab_size=len(vocab), window_l=window, mem_k=window // 4,
                                         max_seq=max(512, lengths[-1])), seed=int(settings.get("seed", 0)))
    write_manifest(args, settings, [args.checkpoint], [args.out])
    pipe = Pipeline(params, vocab, pipeline_config(settings))
    report = eb.bench_efficiency(lengths, pipe, query=settings.get("query", "what happened"),
                                 repeats=int(settings.get("repeats", 3)), seed=int(settings.get("seed", 0)))
    print(report.table())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            for rec in report.records():
                f.write(json.dumps(rec) + "\n")
    return EXIT_OK


def cmd_synth(args) -> int:
    settings = resolve(args, ["seed", "n_docs", "doc_len", "chunk_max", "world_seed"])
    write_manifest(args, settings, [], [args.out])
    world = eb.make_world(int(settings.get("world_seed", 0)))
    tasks = eb.gen_indirection_tasks(int(settings.get("seed", 0)), int(settings.get("n_docs", 10)),
                                     int(settings.get("doc_len", 96)), int(settings.get("chunk_max", 16)), world)
    eb.save_tasks(tasks, args.out)
    emit({"tasks": len(tasks), "out": str(args.out)})
    return EXIT_OK


# --- wiring ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="globalmem", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON key-value config; explicit flags override it")
        sp.add_argument("--manifest", help="where to write the run manifest")
        return sp

    m = common(sub.add_parser("memorize", help="form global memory over a document and save it"))
    m.add_argument("input")
    m.add_argument("--out", required=True)
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--beta", type=int, default=4)
    m.add_argument("--record", type=int, default=0, help="record index when the input is .jsonl")
    m.add_argument("--memory-suffix", dest="memory_suffix")
    m.set_defaults(func=cmd_memorize)

    q = common(sub.add_parser("query", help="answer one query against a document"))
    q.add_argument("--memory")
    q.add_argument("--context", required=True)
    q.add_argument("--query", required=True)
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--hits", type=int, default=3)
    q.add_argument("--mode", default="memorag")
    q.add_argument("--chunk-max", dest="chunk_max", type=int)
    q.add_argument("--record", type=int, default=0)
    q.add_argument("--memory-suffix", dest="memory_suffix")
    q.add_argument("--json", action="store_true", help="print the result as one JSON record")
    q.set_defaults(func=cmd_query)

    t = common(sub.add_parser("train", help="run one training stage"))
    t.add_argument("--stage", required=True, choices=STAGES + ("toy",))
    t.add_argument("--data")
    t.add_argument("--checkpoint", help="starting checkpoint (fresh model when omitted)")
    t.add_argument("--out", required=True)
    for name, typ in (("lr", float), ("batch-size", int), ("epochs", int), ("steps", int), ("seed", int),
                      ("beta", int), ("clip", float)):
        t.add_argument(f"--{name}", dest=name.replace("-", "_"), type=typ)
    t.set_defaults(func=cmd_train)

    e = common(sub.add_parser("eval", help="score modes over a corpus"))
    e.add_argument("dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--modes", default="memorag,standard_rag,full")
    e.add_argument("--hits", type=int, default=3)
    e.add_argument("--chunk-max", dest="chunk_max", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    b = common(sub.add_parser("bench", help="efficiency report across context lengths"))
    b.add_argument("--lengths", default="1k,2k,4k")
    b.add_argument("--checkpoint")
    b.add_argument("--beta", type=int)
    b.add_argument("--repeats", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    s = common(sub.add_parser("synth", help="write synthetic indirection tasks as corpus records"))
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--n-docs", dest="n_docs", type=int)
    s.add_argument("--doc-len", dest="doc_len", type=int)
    s.add_argument("--chunk-max", dest="chunk_max", type=int)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "train" and args.stage != "toy" and not args.data:
        parser.error("--data is required for this stage")
    try:
        return args.func(args)
    except CompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except (TrainingAborted, dc.NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        snap = getattr(exc, "snapshot", None)
        if snap:
            print(json.dumps(snap, default=str), file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, FormatError, CapacityError, OSError, KeyError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
