"""Command-line front end: gen-synthetic, train, eval, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric-check
failure. Every command's output is a pure function of its flags and input
files (modulo wall-clock fields in logs).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import load_inference_model, save_checkpoint
from .config import RunConfig, parse_config, save_config
from .encoder import TextEncoderStub
from .errors import ConfigError, FedDCGError
from .gradcheck import run_gradcheck
from .infer import AGGREGATORS, evaluate, format_results_table
from .protocol import init_round_state, run_round
from .store import generate_synthetic, load_store, manifest_dict, partition_clients, save_store


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits on its own; surface the message instead so main() owns
    # the exit code.
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="feddcg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-synthetic", help="write a deterministic synthetic store")
    gen.add_argument("--domains", type=int, required=True)
    gen.add_argument("--classes", type=int, required=True)
    gen.add_argument("--dim", type=int, required=True)
    gen.add_argument("--token-dim", type=int, default=None,
                     help="defaults to --dim")
    gen.add_argument("--images-per-class", type=int, default=20,
                     help="images per (domain, class) cell")
    gen.add_argument("--shift", type=float, default=0.5, help="domain offset magnitude")
    gen.add_argument("--noise", type=float, default=0.05)
    gen.add_argument("--l-tok", type=int, default=4)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)

    train = sub.add_parser("train", help="run federated rounds from a config file")
    train.add_argument("config", help="JSON config path")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a store")
    ev.add_argument("--checkpoint", required=True, help="checkpoint directory")
    ev.add_argument("--store", required=True)
    ev.add_argument("--aggregator", default="domain_guided", choices=AGGREGATORS)
    ev.add_argument("--classes", default=None,
                    help="comma-separated store class indices to evaluate on")
    ev.add_argument("--fixed-global-weight", type=float, default=None)
    ev.add_argument("--out", default=None, help="where to write results.json")

    gc = sub.add_parser("gradcheck", help="finite-difference check of both stages")
    gc.add_argument("--seed", type=int, default=0, help="first seed")
    gc.add_argument("--trials", type=int, default=20, help="number of consecutive seeds")
    return parser


def cmd_gen_synthetic(args) -> int:
    token_dim = args.token_dim if args.token_dim is not None else args.dim
    store = generate_synthetic(
        num_domains=args.domains,
        num_classes=args.classes,
        dim=args.dim,
        token_dim=token_dim,
        images_per_class_per_domain=args.images_per_class,
        domain_shift=args.shift,
        noise=args.noise,
        seed=args.seed,
        l_tok=args.l_tok,
    )
    save_store(store, args.out)
    print(json.dumps(manifest_dict(store), indent=2, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    config = parse_config(args.config)
    if config.train_store is None:
        raise ConfigError("config has no train_store path")
    if config.out_dir is None:
        raise ConfigError("config has no out_dir path")

    store = load_store(config.train_store)
    stub = TextEncoderStub.create(config.effective_stub_seed, store.token_dim, store.dim)
    partitions = partition_clients(
        store, config.clients_per_domain, config.classes_per_client,
        config.sampling_rate, config.seed,
    )
    state = init_round_state(store, partitions, config)

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.json")
    checkpoints = out / "checkpoints"

    def write_checkpoint() -> Path:
        return save_checkpoint(
            checkpoints / f"round_{state.round:05d}",
            state.round, state.group_nets, state.bank, stub,
            config.tau, config.tau_w, config.fixed_global_weight,
        )

    last_record = None
    with (out / "rounds.jsonl").open("w") as log_file:
        for _ in range(config.rounds):
            log: list = []
            state = run_round(state, partitions, store, stub, config, log=log)
            last_record = log[-1]
            log_file.write(json.dumps(last_record, sort_keys=True) + "\n")
            if state.round % config.checkpoint_every == 0:
                write_checkpoint()
    final = write_checkpoint()

    summary = {
        "rounds": state.round,
        "clients": len(partitions),
        "final_checkpoint": str(final),
        "final_group_losses": None if last_record is None else last_record["group_losses"],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    store = load_store(args.store)
    model = load_inference_model(
        args.checkpoint, store.class_token_embeddings,
        fixed_global_weight=args.fixed_global_weight,
    )
    target = None
    if args.classes is not None:
        try:
            target = [int(c) for c in args.classes.split(",") if c.strip() != ""]
        except ValueError as exc:
            raise UsageError(f"--classes must be comma-separated integers: {exc}") from exc
    results = evaluate(model, store, args.aggregator, target_classes=target)
    print(format_results_table(results))
    if args.out is not None:
        Path(args.out).write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    report = run_gradcheck(range(args.seed, args.seed + args.trials))
    print(f"seeds: {args.seed}..{args.seed + args.trials - 1}")
    print(f"max relative error, class-grouping grads:  {report['max_rel_error_stage_a']:.3e}")
    print(f"max relative error, decoupled-prompt grads: {report['max_rel_error_stage_b']:.3e}")
    print(f"tolerance: {report['tolerance']:.1e}  ->  {'PASS' if report['passed'] else 'FAIL'}")
    return 0 if report["passed"] else 3


_COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except FedDCGError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
