"""Command-line entry point: ``liber {synth,ingest,train,evaluate,efficiency,ablate}``.

Each run writes ``run-metadata.json`` into the ``--store`` directory with the
resolved configuration, seeds and client kinds, enough to repeat the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy

from . import __version__
from .clients import HttpChatClient, HttpEmbedClient, RetryPolicy
from .config import RunConfig
from .ctr import CtrModel
from .data import Dataset, LabelRule, generate_synthetic_stream, load_interactions, save_interactions
from .encoding import Projection
from .errors import ClientError, ConfigError, DataError, LiberError
from .ledger import EfficiencyLedger, ledger_report
from .metrics import auc, log_loss
from .mocks import MockChatClient, MockEmbedClient
from .pipeline import (
    ABLATION_VARIANTS,
    NO_PARTITION,
    Clients,
    TrainConfig,
    VariantConfig,
    build_training_samples,
    fit_store_projection,
    process_stream,
    reduce_store,
    run_experiment,
    split_time,
)
from .prompting import DatasetFactors
from .store import RepresentationStore

log = logging.getLogger("liber")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CLIENT, EXIT_OTHER = 0, 2, 3, 4, 1
SYNTHETIC = "synthetic"


def _dims(text: str) -> tuple[int, int]:
    try:
        d_red, d_att = (int(x) for x in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"--dims expects 'd_red,d_att', got {text!r}") from exc
    return d_red, d_att


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", required=True,
                   help="TSV/JSONL interaction file, or 'synthetic' for the built-in drift generator")
    p.add_argument("--variant", default="full",
                   help="full | no-partition | no-interest-shift | no-attention-fuse | per-step:<L>")
    p.add_argument("--k", type=int, default=20, help="partition size threshold")
    p.add_argument("--dims", type=_dims, default=(32, 32), metavar="D_RED,D_ATT")
    chat = p.add_mutually_exclusive_group()
    chat.add_argument("--mock-chat", action="store_true", help="deterministic offline chat backend (default)")
    chat.add_argument("--chat-endpoint", metavar="URL")
    embed = p.add_mutually_exclusive_group()
    embed.add_argument("--mock-embed", action="store_true", help="deterministic offline embedder (default)")
    embed.add_argument("--embed-endpoint", metavar="URL")
    p.add_argument("--chat-model", default="llama-2-13b-chat")
    p.add_argument("--embed-model", default="bert-base-uncased")
    p.add_argument("--store", default="liber-run", help="directory for stores, checkpoints and metadata")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", type=float, default=0.9, help="global-time train fraction")
    p.add_argument("--report", choices=("text", "json"), default="text")
    p.add_argument("--label-threshold", type=int, default=3, help="ratings above this are clicks")
    p.add_argument("--positive-only-rating", type=int, default=None)
    p.add_argument("--min-interactions", type=int, default=None)
    p.add_argument("--factors", default=None,
                   help="comma-separated factor words for prompts (default: the file's attribute columns)")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--workers", type=int, default=1, help="users processed concurrently")
    p.add_argument("--max-retries", type=int, default=3, help="retries per backend call on transport errors")
    p.add_argument("--synth-users", type=int, default=10)
    p.add_argument("--synth-behaviors", type=int, default=180)
    p.add_argument("--synth-topics", type=int, default=4)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="liber", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"liber {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="write a synthetic drift dataset")
    synth.add_argument("--out", required=True)
    synth.add_argument("--users", type=int, default=10)
    synth.add_argument("--behaviors", type=int, default=180)
    synth.add_argument("--topics", type=int, default=4)
    synth.add_argument("--seed", type=int, default=0)

    for name, helptext in (
        ("ingest", "partition, summarize, encode and reduce the stream"),
        ("train", "ingest, train the CTR model and evaluate it"),
        ("evaluate", "score the held-out split with a saved model"),
        ("efficiency", "compare LLM usage across variants"),
        ("ablate", "train and evaluate the four ablation variants"),
    ):
        p = sub.add_parser(name, help=helptext)
        _add_run_args(p)
        if name == "efficiency":
            p.add_argument("--variants", default="full,no-interest-shift,per-step:100,per-step:20")
        if name == "ablate":
            p.add_argument("--no-backbone", action="store_true", help="skip the zero-representation baseline row")
    return parser


def run_config(args: argparse.Namespace) -> RunConfig:
    d_red, d_att = args.dims
    return RunConfig(
        dataset=args.dataset,
        variant=args.variant,
        k=args.k,
        d_red=d_red,
        d_att=d_att,
        mock_chat=args.chat_endpoint is None,
        mock_embed=args.embed_endpoint is None,
        chat_endpoint=args.chat_endpoint,
        embed_endpoint=args.embed_endpoint,
        chat_model=args.chat_model,
        embed_model=args.embed_model,
        label_threshold=args.label_threshold,
        positive_only_rating=args.positive_only_rating,
        min_interactions=args.min_interactions,
        factors=tuple(f.strip() for f in args.factors.split(",") if f.strip()) if args.factors else None,
        seed=args.seed,
        split_ratio=args.split,
        epochs=args.epochs,
        lr=args.lr,
        batch=args.batch,
        workers=args.workers,
        max_retries=args.max_retries,
        store=args.store,
        extra={"synth": [args.synth_users, args.synth_behaviors, args.synth_topics]},
    ).validate()


def load_dataset(cfg: RunConfig) -> Dataset:
    rule = LabelRule(cfg.label_threshold, cfg.positive_only_rating)
    if cfg.dataset == SYNTHETIC and not Path(cfg.dataset).exists():
        users, behaviors, topics = cfg.extra["synth"]
        ds = generate_synthetic_stream(users, behaviors, topics, cfg.seed, rule=rule)
        if cfg.factors:
            ds.factors = DatasetFactors(cfg.factors)
        return ds
    return load_interactions(cfg.dataset, rule, factors=cfg.factors, min_interactions=cfg.min_interactions)


def make_clients(cfg: RunConfig) -> Clients:
    if cfg.mock_chat:
        chat = MockChatClient()
    else:
        chat = HttpChatClient(cfg.chat_endpoint, cfg.chat_model, temperature=cfg.temperature)
    if cfg.mock_embed:
        embed = MockEmbedClient()
    else:
        embed = HttpEmbedClient(cfg.embed_endpoint, cfg.embed_model)
    return Clients(chat, embed)


def retry_policy(cfg: RunConfig) -> RetryPolicy:
    return RetryPolicy(max_retries=cfg.max_retries)


def variant_config(cfg: RunConfig, text: Optional[str] = None) -> VariantConfig:
    return VariantConfig.parse(text or cfg.variant, k=cfg.k, d_red=cfg.d_red, d_att=cfg.d_att, seed=cfg.seed)


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(epochs=cfg.epochs, lr=cfg.lr, batch=cfg.batch, seed=cfg.seed)


def artifact(cfg: RunConfig, kind: str, variant: VariantConfig) -> Path:
    return Path(cfg.store) / f"{kind}-{variant.label.replace(':', '-')}.bin"


def write_metadata(cfg: RunConfig, command: str, argv: Sequence[str], extra: Optional[dict] = None) -> Path:
    out = Path(cfg.store)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "command": command,
        "argv": list(argv),
        "config": cfg.as_dict(),
        "seeds": {"data": cfg.seed, "model": cfg.seed, "shuffle": cfg.seed},
        "clients": {
            "chat": "mock" if cfg.mock_chat else {"endpoint": cfg.chat_endpoint, "model": cfg.chat_model,
                                                  "temperature": cfg.temperature},
            "embed": "mock" if cfg.mock_embed else {"endpoint": cfg.embed_endpoint, "model": cfg.embed_model},
        },
        "versions": {
            "liber": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__,
        },
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if extra:
        meta.update(extra)
    path = out / "run-metadata.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _check_failures(stream, n_users: int) -> None:
    if stream.failures and len(stream.failures) >= n_users:
        first = next(iter(stream.failures.values()))
        raise ClientError(f"every user failed during knowledge extraction; first error: {first}")


def _emit(rows: list[dict], fmt: str, columns: Sequence[str]) -> None:
    if fmt == "json":
        print(json.dumps(rows, indent=2))
        return
    widths = {c: max(len(c), *(len(_fmt(r.get(c))) for r in rows)) for c in columns}
    print("  ".join(c.ljust(widths[c]) for c in columns))
    for r in rows:
        print("  ".join(_fmt(r.get(c)).ljust(widths[c]) for c in columns))


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return "" if v is None else str(v)


def cmd_synth(args: argparse.Namespace) -> int:
    ds = generate_synthetic_stream(args.users, args.behaviors, args.topics, args.seed)
    save_interactions(ds, args.out)
    print(f"wrote {len(ds)} interactions for {len(ds.users())} users to {args.out}")
    return EXIT_OK


def cmd_ingest(cfg: RunConfig, args: argparse.Namespace) -> int:
    ds = load_dataset(cfg)
    variant = variant_config(cfg)
    write_metadata(cfg, "ingest", args.argv)
    store = RepresentationStore(artifact(cfg, "store", variant))
    ledger = EfficiencyLedger(variant.label)
    t_split = split_time(ds, cfg.split_ratio)
    cutoff = t_split if variant.variant == NO_PARTITION else None
    stream = process_stream(ds, variant, make_clients(cfg), store, ledger, cutoff=cutoff,
                            retry=retry_policy(cfg), workers=cfg.workers)
    _check_failures(stream, len(stream.states))
    projection = fit_store_projection(store, stream, variant.d_red, before=t_split)
    projection.save(artifact(cfg, "projection", variant))
    reduced = reduce_store(store, stream, projection)
    row = {
        "variant": variant.label,
        "users": len(stream.states),
        "entries": sum(len(t) for t in stream.timeline.values()),
        "llm_calls": ledger.llm_calls,
        "reduced_written": reduced,
        "failed_users": len(stream.failures),
        **ledger_report(ledger, max(len(stream.states), 1)).as_dict(),
    }
    _emit([row], cfg_report(args), list(row))
    return EXIT_OK


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    ds = load_dataset(cfg)
    variant = variant_config(cfg)
    write_metadata(cfg, "train", args.argv)
    store = RepresentationStore(artifact(cfg, "store", variant))
    res = run_experiment(ds, variant, make_clients(cfg), store, split_ratio=cfg.split_ratio,
                         train_cfg=train_config(cfg), retry=retry_policy(cfg), workers=cfg.workers)
    _check_failures(res.stream, len(res.stream.states))
    res.projection.save(artifact(cfg, "projection", variant))
    res.model.save(artifact(cfg, "model", variant))
    row = res.row()
    row["final_train_loss"] = res.training.epoch_losses[-1] if res.training.epoch_losses else None
    _emit([row], cfg_report(args), list(row))
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args: argparse.Namespace) -> int:
    ds = load_dataset(cfg)
    variant = variant_config(cfg)
    model_path = artifact(cfg, "model", variant)
    if not model_path.exists():
        raise ConfigError(f"no checkpoint at {model_path}; run 'liber train' first")
    write_metadata(cfg, "evaluate", args.argv)
    model = CtrModel.load(model_path)
    store = RepresentationStore(artifact(cfg, "store", variant))
    ledger = EfficiencyLedger(variant.label)
    t_split = split_time(ds, cfg.split_ratio)
    cutoff = t_split if variant.variant == NO_PARTITION else None
    stream = process_stream(ds, variant, make_clients(cfg), store, ledger, cutoff=cutoff,
                            retry=retry_policy(cfg), workers=cfg.workers)
    _check_failures(stream, len(stream.states))
    if ledger.llm_calls:
        log.warning("store was incomplete; %d new LLM calls were made", ledger.llm_calls)
    proj_path = artifact(cfg, "projection", variant)
    if not proj_path.exists():
        raise ConfigError(f"no projection at {proj_path}; run 'liber train' first")
    reduce_store(store, stream, Projection.load(proj_path))
    _, test_set = build_training_samples(ds, stream, store, cfg.split_ratio, include_long_term=model.use_long_term)
    scores = model.predict_proba(test_set)
    labels = [s.label for s in test_set]
    row = {"variant": variant.label, "auc": auc(scores, labels), "log_loss": log_loss(scores, labels),
           "n_test": len(test_set), "llm_calls": ledger.llm_calls}
    _emit([row], cfg_report(args), list(row))
    return EXIT_OK


def cmd_efficiency(cfg: RunConfig, args: argparse.Namespace) -> int:
    ds = load_dataset(cfg)
    write_metadata(cfg, "efficiency", args.argv, {"variants": args.variants})
    clients = make_clients(cfg)
    t_split = split_time(ds, cfg.split_ratio)
    rows = []
    for text in args.variants.split(","):
        variant = variant_config(cfg, text)
        ledger = EfficiencyLedger(variant.label)
        # fresh in-memory store: cached entries would hide the cost being measured
        cutoff = t_split if variant.variant == NO_PARTITION else None
        stream = process_stream(ds, variant, clients, RepresentationStore(), ledger, cutoff=cutoff,
                                retry=retry_policy(cfg), workers=cfg.workers)
        _check_failures(stream, len(stream.states))
        rows.append({"variant": variant.label, "llm_calls": ledger.llm_calls,
                     **ledger_report(ledger, max(len(stream.states), 1)).as_dict()})
    _emit(rows, cfg_report(args), ["variant", "llm_calls", "calls_per_user", "tokens_per_prompt", "time_per_user"])
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args: argparse.Namespace) -> int:
    ds = load_dataset(cfg)
    write_metadata(cfg, "ablate", args.argv)
    clients = make_clients(cfg)
    tc = train_config(cfg)
    rows = []
    for name in ABLATION_VARIANTS:
        variant = variant_config(cfg, name)
        store = RepresentationStore(artifact(cfg, "store", variant))
        res = run_experiment(ds, variant, clients, store, split_ratio=cfg.split_ratio, train_cfg=tc,
                             retry=retry_policy(cfg), workers=cfg.workers)
        _check_failures(res.stream, len(res.stream.states))
        rows.append(res.row())
    if not args.no_backbone:
        variant = variant_config(cfg, "full")
        store = RepresentationStore(artifact(cfg, "store", variant))
        res = run_experiment(ds, variant, clients, store, split_ratio=cfg.split_ratio, train_cfg=tc,
                             backbone_only=True, retry=retry_policy(cfg), workers=cfg.workers)
        rows.append(res.row())
    _emit(rows, cfg_report(args), ["variant", "auc", "log_loss", "calls_per_user", "tokens_per_prompt"])
    return EXIT_OK


def cfg_report(args: argparse.Namespace) -> str:
    return getattr(args, "report", "text")


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "efficiency": cmd_efficiency,
    "ablate": cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    args.argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            return cmd_synth(args)
        return COMMANDS[args.command](run_config(args), args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ClientError as exc:
        print(f"client error: {exc}", file=sys.stderr)
        return EXIT_CLIENT
    except LiberError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
