"""Command-line entry point: gen-demos, pretrain, train, eval, gradcheck, sweep.

Thread env vars (OPENBLAS_NUM_THREADS etc.) are exported from R3D_THREADS at
module import, before numpy loads, which is why every command imports the
pipeline lazily. Exit codes: 0 success, 1 runtime failure, 2 bad usage or
invalid configuration.
"""

from __future__ import annotations

import argparse
import sys
from contextlib import contextmanager
from pathlib import Path

from . import runtime

runtime.export_thread_env()


@contextmanager
def _validation():
    """Config/argument checks run under this; their ValueErrors mean exit 2."""
    from .config import ConfigError
    try:
        yield
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from e


def cmd_gen_demos(args) -> int:
    from .rng import Rng
    from .synthenv import gen_demos, push_task, reach_task
    with _validation():
        if args.n < 1:
            raise ValueError("--n must be >= 1")
        spec = (reach_task if args.task == "reach" else push_task)(n_p=args.n_p)
    episodes, manifest = gen_demos(spec, args.n, Rng(args.seed), args.out)
    print(f"wrote {len(episodes)} {args.task} episodes to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    from .config import build_pretrain_config, load_json_config
    from .pretrain import pretrain
    doc = load_json_config(args.config) if args.config else None
    with _validation():
        cfg = build_pretrain_config(doc, {"n_scenes": args.scenes, "seed": args.seed})
    res = pretrain(cfg, args.out)
    print(f"pretrained {res.steps} steps; checkpoint {res.checkpoint_path}")
    print(f"final patch accuracy: {res.final_accuracy:.4f}")
    return 0


def cmd_train(args) -> int:
    from .config import build_train_config, load_json_config
    from .dataio import load_checkpoint
    from .policy import train
    doc = load_json_config(args.config) if args.config else None
    with _validation():
        cfg = build_train_config(doc, {"seed": args.seed, "epochs": args.epochs})
    init = load_checkpoint(args.init_encoder) if args.init_encoder else None
    res = train(cfg, args.data, args.out, init_encoder=init)
    print(f"trained {res.steps} steps; final train loss {res.final_train_loss:.6f}"
          + (f", val loss {res.final_val_loss:.6f}" if res.final_val_loss is not None else ""))
    print(f"checkpoint {res.checkpoint_path}")
    return 0


def _write_episode_csv(path, records):
    import csv
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "steps", "success", "final_dist"])
        for r in records:
            w.writerow([r["episode"], r["steps"], int(r["success"]), f"{r['final_dist']:.6f}"])


def cmd_eval(args) -> int:
    from .dataio import load_checkpoint
    from .policy import PolicyModel, evaluate
    from .rng import Rng
    from .synthenv import push_task, reach_task
    with _validation():
        if args.episodes < 1:
            raise ValueError("--episodes must be >= 1")
    model = PolicyModel.from_checkpoint(load_checkpoint(args.checkpoint))
    spec = (reach_task if args.task == "reach" else push_task)(n_p=model.enc_cfg.n_p)
    execute = args.execute_steps
    if execute is None:
        execute = model.train_cfg.execute_steps if model.train_cfg else 8
    rate, records = evaluate(model, spec, args.episodes, Rng(args.seed),
                             execute_steps=execute)
    out = args.out or (Path(args.checkpoint).parent / f"eval_{args.task}.csv")
    _write_episode_csv(out, records)
    print(f"success rate: {rate:.2f} over {args.episodes} episodes ({out})")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import report, run_all
    results = run_all(max_coords=args.max_coords)
    print(report(results))
    failing = [r.name for r in results if not r.passed]
    if failing:
        print(f"FAILED: {', '.join(failing)}", file=sys.stderr)
        return 1
    print("all gradient checks passed")
    return 0


def cmd_sweep(args) -> int:
    import csv
    import json
    from dataclasses import replace

    from .config import build_train_config, load_json_config
    from .policy import PolicyModel, evaluate, train
    from .rng import Rng
    from .synthenv import push_task, reach_task

    doc = load_json_config(args.config) if args.config else None
    with _validation():
        base = build_train_config(doc, {"seed": args.seed})
        values = []
        for v in args.values:
            values.append(v if args.axis == "encoder_preset" else int(v))
    # the demo manifest names the task the cells are scored on
    manifest = json.loads((Path(args.data) / "manifest.json").read_text())
    spec = (reach_task if manifest["task_id"] == "reach" else push_task)(n_p=base.n_p)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for v in values:
        cfg = replace(base, **{args.axis: v})
        res = train(cfg, args.data, out / f"cell_{v}")
        model = PolicyModel.from_checkpoint(res.checkpoint)
        rate, _ = evaluate(model, spec, args.episodes, Rng(base.seed),
                           execute_steps=cfg.execute_steps)
        val = res.final_val_loss if res.final_val_loss is not None else float("nan")
        rows.append((v, val, rate))
        print(f"{args.axis}={v}: val loss {val:.6f}, success {rate:.2f}")
    csv_path = out / "sweep.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["value", "final_val_loss", "success_rate"])
        for v, loss, rate in rows:
            w.writerow([v, f"{loss:.8e}", f"{rate:.4f}"])
    print(f"sweep table: {csv_path}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="r3d", description="3D diffusion policy toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-demos", help="generate scripted-expert demonstrations")
    g.add_argument("--task", choices=["reach", "push"], required=True)
    g.add_argument("--n", type=int, required=True, help="number of successful episodes")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--n-p", type=int, default=1024, help="points per cloud")
    g.set_defaults(func=cmd_gen_demos)

    g = sub.add_parser("pretrain", help="segmentation-pretrain the encoder")
    g.add_argument("--config", default=None, help="JSON PretrainConfig")
    g.add_argument("--scenes", type=int, default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_pretrain)

    g = sub.add_parser("train", help="train a policy on a demo store")
    g.add_argument("--config", default=None, help="JSON TrainConfig")
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--epochs", type=int, default=None)
    g.add_argument("--init-encoder", default=None, help="pretraining checkpoint")
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("eval", help="closed-loop success rate of a checkpoint")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--task", choices=["reach", "push"], required=True)
    g.add_argument("--episodes", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--execute-steps", type=int, default=None)
    g.add_argument("--out", default=None, help="per-episode CSV path")
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--max-coords", type=int, default=16)
    g.set_defaults(func=cmd_gradcheck)

    g = sub.add_parser("sweep", help="train/eval across one config axis")
    g.add_argument("--config", default=None)
    g.add_argument("--axis", choices=["encoder_preset", "decoder_depth"], required=True)
    g.add_argument("--values", nargs="+", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--episodes", type=int, default=10)
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    from .config import ConfigError
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
