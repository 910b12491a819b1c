"""Command line interface: ``fvae train|generate|evaluate|gradcheck|inspect``.

Exit codes: 0 ok, 1 usage/config, 2 data, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import gradcheck, plotting
from .checkpoint import Checkpoint, read_header
from .config import RunConfig
from .errors import ConfigError, DataError, FissionError, UsageError
from .metrics import csv_header, evaluate_model
from .models import PATHWAYS
from .pgm import encode_pgm
from .runner import (
    append_jsonl,
    build_model,
    init_params,
    load_datasets,
    make_clients,
    read_jsonl,
    train_probe,
)
from .federation import train_federated
from .metrics import evaluate_losses

log = logging.getLogger("fissionvae")

CHECKPOINT_NAME = "checkpoint.fvae"
RUN_LOG = "run_log.jsonl"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _resolve_config(args) -> RunConfig:
    config = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    config = config.with_env()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "variant", None):
        changes["variant"] = args.variant
    if getattr(args, "prior", None):
        changes["prior"] = args.prior
    if getattr(args, "rounds", None) is not None:
        changes.setdefault("federation", {})["rounds"] = args.rounds
    if getattr(args, "save_every", None) is not None:
        changes["save_every"] = args.save_every
    if getattr(args, "mnist_dir", None) or getattr(args, "fashion_dir", None):
        changes["data"] = {"source": "mnist", "mnist_dir": args.mnist_dir, "fashion_dir": args.fashion_dir}
    return config.replace(**changes) if changes else config


def _config_from_checkpoint(ckpt: Checkpoint) -> RunConfig:
    config = RunConfig.from_dict(ckpt.config)
    if config.hash != ckpt.config_hash:
        raise DataError("checkpoint config does not match its recorded config hash")
    return config


def cmd_train(args):
    config = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
    run_log = out / RUN_LOG
    run_log.write_text("")

    train_set, _ = load_datasets(config)
    model = build_model(config, train_set)
    params = init_params(config, model)
    clients = make_clients(config, train_set)
    initial = evaluate_losses(model, params, train_set, seed=config.seed)
    append_jsonl(run_log, {"event": "start", "round": 0, "config_hash": config.hash,
                           "initial_loss": initial.as_dict()})
    log.info("variant %s, prior %s, %d clients, round-0 loss %.4f",
             config.variant, config.prior_name, len(clients), initial.total)

    def on_round(p, report):
        append_jsonl(run_log, report.to_record(event="round", config_hash=config.hash))
        log.info("round %d: %d participants, loss %.4f", report.round, len(report.participants),
                 report.aggregate_loss)
        if report.excluded:
            log.warning("round %d excluded clients %s", report.round, sorted(report.excluded))
        if config.save_every and report.round % config.save_every == 0:
            Checkpoint(config.to_dict(), config.hash, report.round, p).save(out / f"checkpoint_r{report.round:04d}.fvae")

    params, reports = train_federated(model, params, clients, config.federation_config(),
                                      workers=args.workers, on_round=on_round)
    final_round = reports[-1].round if reports else 0
    path = Checkpoint(config.to_dict(), config.hash, final_round, params).save(out / CHECKPOINT_NAME)
    final = evaluate_losses(model, params, train_set, seed=config.seed)
    append_jsonl(run_log, {"event": "end", "round": final_round, "config_hash": config.hash,
                           "initial_loss": initial.total, "final_loss": final.total})
    round_records = [r for r in read_jsonl(run_log) if r.get("event") == "round"]
    if round_records:
        plotting.loss_curve(round_records, out / "loss_curve.png", title=config.variant, config_hash=config.hash)
    print(f"wrote {path} (round {final_round}); loss {initial.total:.4f} -> {final.total:.4f}")
    return 0


def _write_samples(images, side, out: Path, config_hash, prefix="sample"):
    files = []
    for i, img in enumerate(images):
        name = f"{prefix}_{i:04d}.pgm"
        (out / name).write_bytes(encode_pgm(img.reshape(side, side), f"config_hash={config_hash}"))
        files.append(name)
    return files


def _swap_map(k, enabled):
    return [(g + 1) % k for g in range(k)] if enabled else None


def cmd_generate(args):
    ckpt = Checkpoint.load(args.checkpoint)
    config = _config_from_checkpoint(ckpt)
    side = config.data.side if config.data.source == "synthetic" else 28
    model = build_model(config, _shape_stub(side))
    if not 0 <= args.group < model.k:
        raise UsageError(f"group must be in [0, {model.k - 1}]")
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng([seed, args.group])
    images = model.generate(ckpt.params, args.group, args.pathway, args.n, rng,
                            swap_map=_swap_map(model.k, args.swap_priors))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = _write_samples(images, side, out, ckpt.config_hash)
    index = {
        "config_hash": ckpt.config_hash, "variant": model.kind, "prior": model.prior.strategy,
        "group": args.group, "pathway": args.pathway, "n": args.n, "seed": seed,
        "swap_priors": bool(args.swap_priors), "side": side, "files": files,
    }
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    if files and args.grid:
        plotting.sample_grid(images, out / "samples.png", side=side,
                             title=f"{model.kind} g{args.group} {args.pathway}", config_hash=ckpt.config_hash)
    print(f"wrote {len(files)} samples to {out}")
    return 0


class _shape_stub:
    """Stands in for a Dataset where only the image shape is needed."""

    def __init__(self, side):
        self.images = np.zeros((1, side, side))


def cmd_evaluate(args):
    ckpt = Checkpoint.load(args.checkpoint)
    config = _config_from_checkpoint(ckpt)
    if args.config:
        other = RunConfig.load(args.config)
        if other.hash != ckpt.config_hash:
            raise ConfigError(f"config {args.config} (hash {other.hash}) does not match the checkpoint "
                              f"(hash {ckpt.config_hash})")
    if args.mnist_dir or args.fashion_dir:
        config = config.replace(data={"source": "mnist", "mnist_dir": args.mnist_dir,
                                      "fashion_dir": args.fashion_dir})
    train_set, eval_set = load_datasets(config)
    model = build_model(config, eval_set)
    if eval_set.k != model.k:
        raise DataError(f"evaluation data has {eval_set.k} groups, checkpoint expects {model.k}")
    if not all(ckpt.params[n].shape == p.shape for n, p in model.init_params(np.random.default_rng(0)).items()):
        raise DataError("checkpoint tensors do not match the architecture of its config")
    pathways = args.pathway or list(model.valid_pathways)
    for p in pathways:
        if p not in model.valid_pathways:
            raise UsageError(f"pathway {p!r} invalid for {model.kind}; valid: {', '.join(model.valid_pathways)}")
    probe = train_probe(train_set, model.k)
    reports = evaluate_model(model, ckpt.params, eval_set, probe, pathways, seed=args.seed,
                             swap_map=_swap_map(model.k, args.swap_priors), config_hash=ckpt.config_hash)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    suffix = "_swap" if args.swap_priors else ""
    for rep in reports:
        (out / f"metrics_{rep.variant}_{rep.pathway}{suffix}.json").write_text(
            json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(out / f"metrics{suffix}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(csv_header(model.k))
        for rep in reports:
            writer.writerow(rep.csv_row())
    side = eval_set.side
    for rep in reports:
        rng = np.random.default_rng([args.seed, 99])
        grid = np.concatenate([
            model.generate(ckpt.params, g, rep.pathway, 8, rng, swap_map=_swap_map(model.k, args.swap_priors))
            for g in range(model.k)
        ])
        plotting.sample_grid(grid, out / f"samples_{rep.pathway}{suffix}.png", side=side,
                             title=f"{rep.variant} {rep.pathway}", config_hash=ckpt.config_hash)
    plotting.metric_bars([r.to_dict() for r in reports], out / f"frechet{suffix}.png",
                         config_hash=ckpt.config_hash)
    for rep in reports:
        fid = " ".join(f"{f:.3f}" for f in rep.group_fidelity)
        print(f"{rep.variant} {rep.pathway}: nll={rep.nll:.4f} frechet={rep.frechet_proxy:.4f} "
              f"separation={rep.latent_separation:.3f} fidelity=[{fid}]")
    return 0


def cmd_gradcheck(args):
    rows = gradcheck.run(seeds=args.seeds, corrupt=args.corrupt)
    print(gradcheck.format_table(rows))
    failed = [r.component for r in rows if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return 3
    return 0


def cmd_inspect(args):
    try:
        data = Path(args.checkpoint).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {args.checkpoint}: {exc}") from exc
    head, _ = read_header(data)
    print(json.dumps(head, indent=2, sort_keys=True))
    return 0


def build_parser():
    p = _Parser(prog="fvae", description="Federated FissionVAE simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run federated training")
    t.add_argument("--config", help="YAML run config")
    t.add_argument("--out", default="runs/latest")
    t.add_argument("--workers", type=int, default=1)
    t.add_argument("--save-every", type=int)
    t.add_argument("--rounds", type=int)
    t.add_argument("--variant")
    t.add_argument("--prior")
    t.add_argument("--seed", type=int)
    t.add_argument("--mnist-dir")
    t.add_argument("--fashion-dir")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="write generated samples as PGM files")
    g.add_argument("checkpoint")
    g.add_argument("--group", type=int, default=0)
    g.add_argument("--pathway", choices=PATHWAYS, default="from_z1_direct")
    g.add_argument("--n", type=int, default=16)
    g.add_argument("--seed", type=int)
    g.add_argument("--swap-priors", action="store_true")
    g.add_argument("--grid", action="store_true", help="also render a PNG grid")
    g.add_argument("--out", default="samples")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="compute metrics per generation pathway")
    e.add_argument("checkpoint")
    e.add_argument("--config", help="refuse to run unless this config matches the checkpoint")
    e.add_argument("--pathway", action="append", choices=PATHWAYS)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--swap-priors", action="store_true")
    e.add_argument("--mnist-dir")
    e.add_argument("--fashion-dir")
    e.add_argument("--out", default="eval")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect", help="print a checkpoint header")
    i.add_argument("checkpoint")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "workers", 1) < 1:
            raise ConfigError("--workers must be >= 1")
        if getattr(args, "n", 1) < 0:
            raise UsageError("--n must be >= 0")
        return args.func(args)
    except FissionError as exc:
        print(f"fvae: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
