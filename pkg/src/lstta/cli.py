"""Batch command line: data generation, training, evaluation and reports.

Exit codes: 1 configuration error, 2 data error, 3 numeric failure,
4 gradient check failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import experiments as ex
from . import tensor as tt
from . import toydata
from .config import ConfigError, RunConfig, load_config
from .model import ABLATION_ROWS, TrimodalModel, block_param_formula, count_params
from .tensor import NumericError, ShapeError
from .train import accuracy

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_GRADCHECK = 1, 2, 3, 4
REPORTED_TRAINABLE = 83_000_000
HEAT_CHARS = " .:-=+*#%@"

# shortcut flags and the config keys they override
SHORTCUTS = {
    "steps": ("train.steps", int),
    "lr0": ("train.lr0", float),
    "batch": ("train.batch", int),
    "seed": ("train.seed", int),
    "data_seed": ("data.seed", int),
    "k": ("model.K", int),
    "distractor_rate": ("data.distractor_rate", float),
    "out_dir": ("paths.out_dir", str),
    "data": ("paths.data", str),
    "eval_data": ("paths.eval_data", str),
    "checkpoint": ("paths.checkpoint", str),
}


def _parse_set(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def resolve(args: argparse.Namespace) -> RunConfig:
    overrides = _parse_set(args.set or [])
    for attr, (key, _) in SHORTCUTS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    for flag in ("no_ltsf", "no_al2v", "no_vl2a", "dense"):
        if getattr(args, flag, False):
            overrides[{"no_ltsf": "ablation.ltsf", "no_al2v": "ablation.al2v", "no_vl2a": "ablation.vl2a",
                       "dense": "ablation.latent_tokens"}[flag]] = False
    return load_config(args.config, overrides, getattr(args, "profile", None))


def _out_dir(cfg: RunConfig) -> Path:
    p = Path(cfg.paths.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _write_report(path: Path, text: str, cfg: RunConfig) -> None:
    """CSV file with the resolved config as a leading comment line."""
    path.write_text(f"# config: {json.dumps(cfg.to_dict(), sort_keys=True)}\n{text}", encoding="utf-8")


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _desk_only(cfg: RunConfig, what: str) -> None:
    if cfg.profile != "desk":
        raise ConfigError(f"the {cfg.profile} profile supports parameter counting only, not {what}")


# --- commands ---------------------------------------------------------------

def cmd_generate(args, cfg: RunConfig) -> int:
    spec = cfg.dataset_spec(args.split)
    if args.n is not None:
        spec.num_samples = args.n
    try:
        spec.validate()
    except toydata.DataError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out) if args.out else _out_dir(cfg) / f"{args.split}.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    n = toydata.save(toydata.generate(spec, with_meta=args.split == "train" or args.with_meta), out)
    print(f"wrote {n} samples to {out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    _desk_only(cfg, "training")
    out = _out_dir(cfg)
    ckpt = Path(cfg.paths.checkpoint) if cfg.paths.checkpoint else out / "checkpoint"
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        fh.write(ex.dumps(ex.metrics_header(cfg)) + "\n")

        def sink(rec: dict) -> None:
            line = ex.dumps(rec)
            fh.write(line + "\n")
            fh.flush()
            print(line, flush=True)

        result = ex.run(cfg, sink)
        final = {"final": True, "eval_acc": result.eval_acc, "steps": cfg.train.steps}
        fh.write(ex.dumps(final) + "\n")
    print(ex.dumps(final))
    ex.save_run(result, cfg, ckpt)
    print(f"checkpoint: {ckpt}")
    return 0


def _checkpoint_arg(args, cfg: RunConfig) -> Path:
    path = args.checkpoint or cfg.paths.checkpoint
    if not path:
        raise ConfigError("a checkpoint directory is required (--checkpoint)")
    return Path(path)


def _restored(args, cfg: RunConfig):
    path = _checkpoint_arg(args, cfg)
    try:
        saved, model = ex.restore(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from None
    # data locations may be redirected on the command line
    if args.eval_data:
        saved.paths.eval_data = args.eval_data
    return saved, model


def cmd_eval(args, cfg: RunConfig) -> int:
    saved, model = _restored(args, cfg)
    data = ex.arrays(saved, "eval")
    report = {"eval_acc": accuracy(model, data), "n": int(len(data["label"])),
              "checkpoint": str(_checkpoint_arg(args, cfg)), "config": saved.to_dict()}
    line = ex.dumps(report)
    print(line)
    (_out_dir(cfg) / "eval.json").write_text(line + "\n", encoding="utf-8")
    return 0


def _grid_report(cells, cfg: RunConfig, seeds: Sequence[int], key_cols, key_fn, name: str) -> str:
    header = [*key_cols, "mean", "sd", *[f"acc_seed{s}" for s in seeds]]
    rows = [[*key_fn(c), _fmt(c.mean), _fmt(c.sd), *[_fmt(a) for a in c.accs]] for c in cells]
    text = _csv_text(header, rows)
    _write_report(_out_dir(cfg) / f"{name}.csv", text, cfg)
    return text


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bad seed list {text!r}") from None
    if not seeds:
        raise ConfigError("need at least one seed")
    return seeds


def _progress(label: str, seed: int, acc: float) -> None:
    print(f"{label} seed={seed} eval_acc={_fmt(acc)}", file=sys.stderr, flush=True)


def cmd_ablate(args, cfg: RunConfig) -> int:
    _desk_only(cfg, "training")
    seeds = _seeds(args.seeds)
    try:
        rows = [int(r) for r in args.rows.split(",")]
    except ValueError:
        raise ConfigError(f"bad row list {args.rows!r}") from None
    if any(r not in ABLATION_ROWS for r in rows):
        raise ConfigError(f"rows must be drawn from {sorted(ABLATION_ROWS)}")
    cells = ex.grid(cfg, ex.ablation_variants(cfg, rows), seeds, _progress)

    def key(c):
        a = c.ablation
        return [c.label.split()[0].lstrip("#"), int(a.ltsf), int(a.al2v), int(a.vl2a), int(a.latent_tokens)]
    print(_grid_report(cells, cfg, seeds, ["row", "ltsf", "al2v", "vl2a", "latent_tokens"], key, "ablation"),
          end="")
    if args.figure:
        from .plotting import ablation_bars
        ablation_bars([c.label for c in cells], [c.mean for c in cells], [c.sd for c in cells], args.figure,
                      chance=1.0 / cfg.model.num_classes, config=cfg.to_dict())
    return 0


def cmd_sweep_k(args, cfg: RunConfig) -> int:
    _desk_only(cfg, "training")
    seeds = _seeds(args.seeds)
    try:
        ks = [int(k) for k in args.ks.split(",")]
    except ValueError:
        raise ConfigError(f"bad K list {args.ks!r}") from None
    if any(k < 1 for k in ks):
        raise ConfigError("K values must be positive")
    cells = ex.grid(cfg, ex.sweep_variants(cfg, ks), seeds, _progress)
    print(_grid_report(cells, cfg, seeds, ["K"], lambda c: [c.k], "sweep_k"), end="")
    if args.figure:
        from .plotting import sweep_plot
        sweep_plot(ks, [c.mean for c in cells], [c.sd for c in cells], args.figure, config=cfg.to_dict())
    return 0


def cmd_count_params(args, cfg: RunConfig) -> int:
    mc = cfg.model_config()
    m = TrimodalModel(mc, meta=True)
    c = count_params(m)
    rows = [
        ("blocks", len(m.blocks)),
        ("per_block", c["per_block"][0] if c["per_block"] else 0),
        ("per_block_formula", block_param_formula(mc.d, mc.d_h, mc.k)),
        ("blocks_total", c["blocks"]),
        ("head", c["head"]),
        *((f"encoder_{mod}", n) for mod, n in c["encoders"].items()),
        ("trainable", c["trainable"]),
        ("frozen", c["frozen"]),
        ("total", c["total"]),
    ]
    if cfg.profile == "paper":
        rows += [("reported_trainable", REPORTED_TRAINABLE),
                 ("blocks_over_reported", f"{c['blocks'] / REPORTED_TRAINABLE:.4f}")]
    text = _csv_text(["component", "count"], rows)
    print(text, end="")
    _write_report(_out_dir(cfg) / f"params_{cfg.profile}.csv", text, cfg)
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .gradcheck import CASES, TOLERANCE, run_gradcheck
    names = args.units.split(",") if args.units else list(CASES)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise ConfigError(f"unknown units {unknown}; choose from {sorted(CASES)}")
    res = run_gradcheck(seeds=range(args.seeds), names=names)
    rows = [[n, f"{r['max_rel_error']:.3e}", r["checked"], r["skipped"],
             "pass" if r["max_rel_error"] < TOLERANCE else "fail"] for n, r in res.items()]
    print(_csv_text(["unit", "max_rel_error", "checked", "skipped_kinks", "status"], rows), end="")
    return 0 if all(r[-1] == "pass" for r in rows) else EXIT_GRADCHECK


def heat_row(values: np.ndarray) -> str:
    v = np.asarray(values, dtype=float)
    top = v.max() if v.size and v.max() > 0 else 1.0
    idx = np.clip(np.rint(v / top * (len(HEAT_CHARS) - 1)).astype(int), 0, len(HEAT_CHARS) - 1)
    return "".join(HEAT_CHARS[i] for i in idx)


def cmd_inspect_mask(args, cfg: RunConfig) -> int:
    saved, model = _restored(args, cfg)
    if args.data:
        samples = toydata.load(args.data, num_classes=saved.model.num_classes)
    else:
        samples = ex.dataset(saved, args.split)
    chosen = _pick_sample(samples, args.sample_id)
    batch = toydata.to_arrays([chosen])
    with tt.no_grad():
        _, masks = model.forward(batch["visual"][0], batch["audio"][0], batch["lang"][0])
    grid = np.stack([s.data for s in masks]) if masks else np.zeros((0, saved.model.T))
    t = saved.model.T
    rows = [[j + 1, *[_fmt(x) for x in row]] for j, row in enumerate(grid)]
    text = _csv_text(["block", *[f"s_{i}" for i in range(t)]], rows)
    print(text, end="")
    _write_report(_out_dir(cfg) / f"mask_{chosen.id}.csv", text, saved)
    needle = (chosen.meta or {}).get("needle_t")
    if args.heat:
        for j, row in enumerate(grid):
            print(f"block {j + 1} |{heat_row(row)}|")
        if needle is not None:
            print(f"needle  |{' ' * needle}^{' ' * (t - needle - 1)}|")
    if args.figure:
        from .plotting import mask_heatmap
        mask_heatmap(grid, args.figure, needle_t=needle, title=f"sample {chosen.id}", config=saved.to_dict())
    return 0


def _pick_sample(samples: list[toydata.ToySample], sample_id: str) -> toydata.ToySample:
    for s in samples:
        if s.id == sample_id:
            return s
    if sample_id.isdigit() and int(sample_id) < len(samples):
        return samples[int(sample_id)]
    raise toydata.DataError(f"no sample with id or index {sample_id!r}")


# --- parser -----------------------------------------------------------------

def _common(p: argparse.ArgumentParser, training: bool = True) -> None:
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
    p.add_argument("--out-dir", dest="out_dir")
    if training:
        p.add_argument("--steps", type=int)
        p.add_argument("--lr0", type=float)
        p.add_argument("--batch", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--data-seed", dest="data_seed", type=int)
        p.add_argument("-k", "--latent-tokens", dest="k", type=int)
        p.add_argument("--distractor-rate", dest="distractor_rate", type=float)
        p.add_argument("--data", help="training JSONL (generated when absent)")
        p.add_argument("--eval-data", dest="eval_data", help="evaluation JSONL (generated when absent)")
        p.add_argument("--no-ltsf", action="store_true")
        p.add_argument("--no-al2v", action="store_true")
        p.add_argument("--no-vl2a", action="store_true")
        p.add_argument("--dense", action="store_true", help="STSI without latent tokens")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lstta", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic JSONL split")
    _common(p)
    p.add_argument("--split", choices=("train", "eval"), default="train")
    p.add_argument("-n", type=int, help="number of samples (default from config)")
    p.add_argument("--out", help="output JSONL path")
    p.add_argument("--with-meta", action="store_true", help="keep needle metadata on the eval split")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train and write metrics plus a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", help="checkpoint directory (default OUT_DIR/checkpoint)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on the eval split")
    _common(p, training=False)
    p.add_argument("--checkpoint")
    p.add_argument("--eval-data", dest="eval_data")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="ablation table over the six toggle rows")
    _common(p)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--rows", default=",".join(str(r) for r in ABLATION_ROWS))
    p.add_argument("--figure", help="also render a bar chart to this file")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-k", help="accuracy against the number of latent tokens")
    _common(p)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--ks", default="2,8,32")
    p.add_argument("--figure", help="also render the sweep to this file")
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("count-params", help="parameter breakdown")
    _common(p)
    p.add_argument("--profile", choices=("desk", "paper"))
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("gradcheck", help="finite-difference check of every unit")
    _common(p, training=False)
    p.add_argument("--seeds", type=int, default=10, help="number of seeds")
    p.add_argument("--units", help="comma-separated subset")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect-mask", help="per-block temporal masks for one sample")
    _common(p, training=False)
    p.add_argument("--checkpoint")
    p.add_argument("--sample-id", default="0", help="sample id or index")
    p.add_argument("--split", choices=("train", "eval"), default="eval")
    p.add_argument("--data", help="JSONL to draw the sample from (overrides the split)")
    p.add_argument("--eval-data", dest="eval_data")
    p.add_argument("--heat", action="store_true", help="print a text heat row per block")
    p.add_argument("--figure", help="also render a heat map to this file")
    p.set_defaults(func=cmd_inspect_mask)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (toydata.DataError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
