"""Command-line entry point: ``balora <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 input parse error, 3 constraint violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from balora import adapters, checkpoint, linalg, models, verify
from balora.config import ConfigParseError, RunConfig, load_run_config
from balora.errors import BaloraError, CheckpointError, ConfigInvalid, NonFinite, RankTooLarge, ShapeMismatch
from balora.experiment import PretrainCache, make_splits, reports_csv, reports_json, run_experiment, seed_master

log = logging.getLogger("balora")

EXIT_OK, EXIT_RUNTIME, EXIT_PARSE, EXIT_CONSTRAINT = 0, 1, 2, 3


def _load_weight(path: str) -> np.ndarray:
    tensors, _ = checkpoint.read_checkpoint(path)
    if "W" in tensors:
        return linalg.as_matrix(tensors["W"], name="W")
    if len(tensors) == 1:
        return linalg.as_matrix(next(iter(tensors.values())), name="weight")
    raise CheckpointError(f"{path}: expected a tensor named 'W' or exactly one tensor, found {sorted(tensors)}")


def cmd_init_adapter(args) -> int:
    w = _load_weight(args.weights)
    m, n = w.shape
    if args.kind == "lora":
        pair = adapters.lora_init(m, n, args.rank, args.sigma, args.seed, base=w, alpha=args.alpha)
    else:
        pair = adapters.pissa_init(w, args.rank, alpha=args.alpha)
    checkpoint.write_checkpoint(args.out, checkpoint.adapter_tensors(pair), checkpoint.adapter_meta(pair))
    merged = adapters.merge(pair)
    norm = np.linalg.norm(w)
    rel = np.linalg.norm(merged - w) / norm if norm > 0 else float(np.linalg.norm(merged - w))
    print(f"kind={pair.kind} shape={m}x{n} rank={pair.r} alpha={pair.alpha:g}")
    print(f"reconstruction_error={rel:.3e}")
    if pair.kind == "lora":
        print(f"ab_frobenius={np.linalg.norm(pair.a @ pair.b):.3e}")
    else:
        s = linalg.singular_values(pair.base)
        head = ", ".join(f"{v:.4g}" for v in s[: min(5, s.size)])
        top = linalg.singular_values(w)[: pair.r]
        print(f"principal_singular_values=[{', '.join(f'{v:.4g}' for v in top)}]")
        print(f"residual_spectrum: nuclear={s.sum():.6g} largest=[{head}]")
    return EXIT_OK


def _checkpoint_path(base: str, method: str, n_methods: int) -> Path:
    p = Path(base)
    if n_methods == 1:
        return p
    return p.with_name(f"{p.stem}.{method}{p.suffix}")


def write_model_checkpoint(path: Path, model: models.Model, method: str, cfg: RunConfig) -> None:
    first = next((layer.adapter for layer in model.layers if layer.adapter is not None), None)
    meta = {
        "kind": first.kind if first is not None else "dense",
        "r": first.r if first is not None else None,
        "sigma": first.sigma if first is not None else None,
        "alpha": first.alpha if first is not None else None,
        "seed": seed_master(cfg.base_seed, 0),
        "method": method,
        "arch": model.arch(),
        "adapters": models.adapter_layer_meta(model),
        "effective_config": cfg.effective(),
    }
    checkpoint.write_checkpoint(path, model.state_dict(), meta)


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    cache = PretrainCache()
    reports = []
    timing = []
    for corruption in cfg.corruptions:
        for method in cfg.methods:
            log.info("running %s on %s (%d seeds)", method, corruption.label, cfg.n_seeds)
            rep = run_experiment(
                method, cfg.task_mode, corruption, cfg.optim, cfg.reg, cfg.n_seeds,
                mcfg=cfg.model, dcfg=cfg.data, cache=cache,
            )
            agg = rep.aggregate
            log.info(
                "%s %s: id=%.4f±%.4f ood=%.4f±%.4f wall=%.2fs",
                method, corruption.label,
                agg["id_accuracy"]["mean"], agg["id_accuracy"]["std"],
                agg["ood_accuracy"]["mean"], agg["ood_accuracy"]["std"], sum(rep.wall_time_s),
            )
            reports.append(rep)
            timing.append({"method": method, "corruption": rep.corruption, "wall_time_s": rep.wall_time_s})
    paths = cfg.paths
    Path(paths.report_json).write_text(reports_json(reports, cfg.effective()))
    Path(paths.report_csv).write_text(reports_csv(reports))
    Path(paths.report_json + ".timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    if paths.checkpoint_out:
        first_cell = reports[: len(cfg.methods)]
        for rep in first_cell:
            out = _checkpoint_path(paths.checkpoint_out, rep.method, len(cfg.methods))
            write_model_checkpoint(out, rep.final_model, rep.method, cfg)
    if paths.data_out:
        splits = make_splits(cfg.task_mode, cfg.corruptions[0], cfg.model, cfg.data, seed_master(cfg.base_seed, 0))
        checkpoint.write_checkpoint(
            paths.data_out,
            {"x": splits.id_test.x, "y": splits.id_test.y},
            {"kind": "dataset", "task_mode": cfg.task_mode, "split": "id_test"},
        )
    print(reports_csv(reports), end="")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    results = verify.run_suite(args.trials, args.seed)
    print(verify.format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def cmd_quant_error(args) -> int:
    w = _load_weight(args.weights)
    cb = adapters.Nf4Codebook(block_size=args.block_size)
    pair = adapters.pissa_init(w, args.rank)
    e_w = adapters.quant_error(w, cb)
    e_res = adapters.quant_error(pair.base, cb)
    ratio = e_res / e_w if e_w > 0 else float("nan")
    print(f"{'E(W)':>12} {'E(W_res)':>12} {'ratio':>8}")
    print(f"{e_w:>12.6g} {e_res:>12.6g} {ratio:>8.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    tensors, meta = checkpoint.read_checkpoint(args.checkpoint)
    if not meta or "arch" not in meta:
        raise CheckpointError(f"{args.checkpoint}: sidecar metadata with 'arch' is required")
    model = models.load_state(models.build_model(meta["arch"]), tensors, meta.get("adapters"))
    data, _ = checkpoint.read_checkpoint(args.data)
    if "x" not in data or "y" not in data:
        raise CheckpointError(f"{args.data}: dataset needs tensors 'x' and 'y'")
    x, y = data["x"], data["y"].astype(np.int64)
    if isinstance(model, models.TinyLm):
        x = x.astype(np.int64)
    else:
        y = y.reshape(-1)
    print(json.dumps(models.evaluate(model, x, y), sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="balora", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-adapter", help="split a weight matrix into an adapter checkpoint")
    p.add_argument("--weights", required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--kind", choices=("lora", "pissa"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_init_adapter)

    p = sub.add_parser("train", help="run a comparative fine-tuning experiment")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grad-check", help="finite-difference check of every regularizer")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("quant-error", help="NF4 nuclear-norm error of W and of its PiSSA residual")
    p.add_argument("--weights", required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--block-size", type=int, default=64)
    p.set_defaults(func=cmd_quant_error)

    p = sub.add_parser("eval", help="evaluate a model checkpoint on a dataset file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_PARSE if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (ConfigParseError, CheckpointError, NonFinite, ShapeMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (RankTooLarge, ConfigInvalid) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONSTRAINT
    except (BaloraError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
