"""Command-line surface: ``train | sample | eval | report``.

Every subcommand accepts ``--config FILE`` (flat ``key=value`` lines) and
repeated ``--set key=value`` overrides, validated against :data:`SCHEMA`.
The fully resolved configuration is written next to every output.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from . import biometrics as bm
from . import context as cx
from . import data
from .denoiser import MODES, DenoiserConfig
from .optim import LrSchedule
from .schedule import linear_schedule
from .training import NumericalAbort, epoch_batches, new_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


@dataclass(frozen=True)
class Key:
    kind: Callable[[str], Any]
    default: Any
    help: str
    choices: Optional[Sequence[str]] = None


SCHEMA: Dict[str, Key] = {
    # schedule
    "T": Key(int, 1000, "number of diffusion steps"),
    "beta_start": Key(float, 1e-4, "first noise variance"),
    "beta_end": Key(float, 0.02, "last noise variance"),
    "sigma": Key(str, "beta", "reverse-step noise scale", ("beta", "posterior")),
    # model
    "data_dim": Key(int, 16, "sample dimension n"),
    "hidden_dim": Key(int, 64, "denoiser hidden width"),
    "depth": Key(int, 2, "number of residual blocks"),
    "time_embed_dim": Key(int, 32, "sinusoidal time embedding width"),
    "context_dim": Key(int, 16, "identity context dimension d"),
    "conditioning_mode": Key(str, "xattn", "how the context enters the denoiser", MODES),
    "attention_heads": Key(int, 4, "heads for xattn conditioning"),
    # training
    "cpd_p": Key(float, 0.0, "context dropout probability"),
    "cpd_rescale": Key(_parse_bool, True, "rescale kept context components by 1/(1-p)"),
    "gamma_max": Key(float, 1e-3, "peak learning rate"),
    "gamma_min": Key(float, 0.0, "learning-rate floor"),
    "first_phase_len": Key(int, 200, "steps in the first cosine phase"),
    "total_steps": Key(int, 3000, "optimisation steps"),
    "batch_size": Key(int, 128, "samples per step"),
    "ema_power": Key(float, 0.75, "EMA warm-up power"),
    "checkpoint_interval": Key(int, 0, "write an intermediate checkpoint every N steps (0: off)"),
    # dataset
    "dataset_path": Key(str, "", "training/reference CSV; empty generates the toy dataset"),
    "dataset_K": Key(int, 50, "toy identities"),
    "dataset_m": Key(int, 16, "toy samples per identity"),
    "dataset_s": Key(float, 0.1, "toy intra-identity std"),
    "dataset_R": Key(float, 1.0, "toy centroid radius"),
    # seeds
    "dataset_seed": Key(int, 0, "toy dataset seed"),
    "init_seed": Key(int, 0, "parameter initialisation seed"),
    "train_seed": Key(int, 1, "training randomness seed"),
    "encoder_seed": Key(int, 7, "toy encoder projection seed"),
    "eval_seed": Key(int, 0, "imposter pair subsampling seed"),
    # paths
    "out_dir": Key(str, "run", "directory for training outputs"),
}


def parse_assignment(text: str) -> tuple:
    key, sep, val = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"expected key=value, got {text!r}")
    return key.strip(), val.strip()


def read_config_file(path: str) -> Dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case (T)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        parser.read_string("[run]\n" + text, source=path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return dict(parser["run"])


def resolve_config(config_path: Optional[str], overrides: Sequence[str]) -> Dict[str, Any]:
    raw: Dict[str, str] = {}
    if config_path:
        raw.update(read_config_file(config_path))
    for item in overrides:
        k, v = parse_assignment(item)
        raw[k] = v
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    out: Dict[str, Any] = {}
    for name, key in SCHEMA.items():
        if name not in raw:
            out[name] = key.default
            continue
        try:
            out[name] = key.kind(raw[name])
        except ValueError:
            raise ConfigError(f"{name}: cannot parse {raw[name]!r} as {key.kind.__name__.lstrip('_')}") from None
        if key.choices is not None and out[name] not in key.choices:
            raise ConfigError(f"{name}: {out[name]!r} not in {list(key.choices)}")
    return out


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_resolved(cfg: Dict[str, Any], path: Path) -> None:
    path.write_text("".join(f"{k}={_fmt(v)}\n" for k, v in cfg.items()))


def schema_help() -> str:
    width = max(map(len, SCHEMA))
    lines = ["config keys (key=default):"]
    for name, key in SCHEMA.items():
        lines.append(f"  {name:<{width}} = {_fmt(key.default):<8} {key.help}")
    return "\n".join(lines)


# -- helpers -----------------------------------------------------------------

def _model_config(cfg: Dict[str, Any]) -> DenoiserConfig:
    try:
        return DenoiserConfig(data_dim=cfg["data_dim"], hidden_dim=cfg["hidden_dim"], depth=cfg["depth"],
                              time_embed_dim=cfg["time_embed_dim"], context_dim=cfg["context_dim"],
                              conditioning_mode=cfg["conditioning_mode"],
                              attention_heads=cfg["attention_heads"])
    except ValueError as exc:
        raise ConfigError(f"model config: {exc}") from None


def _check_ranges(cfg: Dict[str, Any]) -> None:
    if not 0.0 <= cfg["cpd_p"] <= 1.0:
        raise ConfigError("cpd_p must lie in [0, 1]")
    for k in ("total_steps", "checkpoint_interval"):
        if cfg[k] < 0:
            raise ConfigError(f"{k} must be >= 0")
    if cfg["batch_size"] < 1:
        raise ConfigError("batch_size must be >= 1")


def _load_or_make_dataset(cfg: Dict[str, Any]) -> data.ToyIdentityDataset:
    if cfg["dataset_path"]:
        ds = data.load_dataset(cfg["dataset_path"])
    else:
        try:
            ds = data.make_toy_dataset(cfg["dataset_K"], cfg["dataset_m"], cfg["data_dim"],
                                       cfg["dataset_s"], cfg["dataset_R"], cfg["dataset_seed"])
        except ValueError as exc:
            raise ConfigError(f"toy dataset: {exc}") from None
    if ds.n != cfg["data_dim"]:
        raise data.DataFormatError(f"dataset has {ds.n} columns but data_dim={cfg['data_dim']}")
    return ds


def _encoder(cfg: Dict[str, Any], data_dim: int) -> cx.ToyEncoder:
    return cx.make_encoder(cfg["context_dim"], data_dim, cfg["encoder_seed"])


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


# -- subcommands -------------------------------------------------------------

def cmd_train(args, cfg: Dict[str, Any]) -> int:
    _check_ranges(cfg)
    mcfg = _model_config(cfg)
    try:
        sched = linear_schedule(cfg["T"], cfg["beta_start"], cfg["beta_end"], cfg["sigma"])
        lr_sched = LrSchedule(cfg["gamma_max"], cfg["gamma_min"], cfg["first_phase_len"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    ds = _load_or_make_dataset(cfg)
    contexts = cx.encode_many(_encoder(cfg, ds.n), ds.samples) if mcfg.conditional else None

    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out / "resolved.cfg")
    data.save_dataset(ds, out / "dataset.csv")

    ck = new_checkpoint(mcfg, sched, cfg["init_seed"], cfg["cpd_p"], cfg["ema_power"])
    ck.seeds["encoder"] = cfg["encoder_seed"]
    interval = cfg["checkpoint_interval"]

    log_path = out / "train_log.csv"
    with open(log_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss", "ema_decay"])

        def on_step(row, snap):
            w.writerow([row.step, repr(row.lr), repr(row.loss), repr(row.ema_decay)])
            if interval and row.step % interval == 0:
                data.save_checkpoint(snap, out / f"checkpoint_{row.step:07d}.idfk")

        ck, rows = train(ck, epoch_batches(ds.samples, contexts), cfg["total_steps"], cfg["batch_size"],
                         lr_sched, cfg["train_seed"], cfg["cpd_rescale"], on_step=on_step)
    data.save_checkpoint(ck, out / "checkpoint.idfk")
    if rows:
        print(f"trained {len(rows)} steps, final loss {rows[-1].loss:.4f}; wrote {out}/checkpoint.idfk")
    else:
        print(f"no training steps; wrote initial checkpoint {out}/checkpoint.idfk")
    return EXIT_OK


def _sample_seeds(seed: int, ids: int, per_id: int) -> List[int]:
    # disjoint chain seeds: identity k owns base_k .. base_k + per_id - 1
    base = int(np.random.SeedSequence(seed).generate_state(1, dtype=np.uint32)[0])
    return [base + k * per_id for k in range(ids)]


def cmd_sample(args, cfg: Dict[str, Any]) -> int:
    if args.ids < 1 or args.per_id < 1:
        raise ConfigError("--ids and --per-id must be >= 1")
    if args.mode == "two-stage" and not args.uncond:
        raise ConfigError("two-stage mode needs --uncond CHECKPOINT")
    ck = data.load_checkpoint(args.checkpoint)
    if not ck.config.conditional:
        raise ConfigError("sampling identities needs a conditional checkpoint")
    cfg = dict(cfg, context_dim=ck.config.context_dim, data_dim=ck.config.data_dim)
    enc = _encoder(cfg, ck.config.data_dim)
    ss = np.random.SeedSequence(args.seed)
    ctx_seq, ref_seq = ss.spawn(2)

    if args.mode == "uniform":
        contexts = cx.sample_uniform_contexts(args.ids, ck.config.context_dim, np.random.default_rng(ctx_seq))
    elif args.mode == "authentic":
        ds = _load_or_make_dataset(cfg)
        labels = list(dict.fromkeys(ds.labels.tolist()))
        if args.ids > len(labels):
            raise data.DataFormatError(f"dataset has {len(labels)} identities, {args.ids} requested")
        first = [int(np.flatnonzero(ds.labels == lab)[0]) for lab in labels[:args.ids]]
        contexts = cx.encode_many(enc, ds.samples[first])
    else:
        uncond = data.load_checkpoint(args.uncond)
        if uncond.config.conditional:
            raise ConfigError("--uncond must point at an unconditional checkpoint")
        if uncond.config.data_dim != ck.config.data_dim:
            raise ConfigError("unconditional and conditional checkpoints disagree on data_dim")
        ref_seeds = ref_seq.generate_state(args.ids, dtype=np.uint32).astype(np.int64).tolist()
        contexts = cx.two_stage_contexts(uncond.inference_params(), uncond.schedule, enc, ref_seeds)

    samples = cx.generate_identity_sets(ck.inference_params(), ck.schedule, contexts, args.per_id,
                                        _sample_seeds(args.seed, args.ids, args.per_id))
    labels = np.repeat(np.arange(args.ids), args.per_id)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.save_dataset(data.ToyIdentityDataset(samples, labels), out)
    data.export_embeddings(contexts, np.arange(args.ids), _sibling(out, ".contexts.csv"))
    write_resolved(cfg, _sibling(out, ".resolved.cfg"))
    print(f"wrote {samples.shape[0]} samples ({args.mode} contexts) to {out}")
    return EXIT_OK


def cmd_eval(args, cfg: Dict[str, Any]) -> int:
    if args.encoder_seed is not None:
        cfg = dict(cfg, encoder_seed=args.encoder_seed)
    ds = data.load_dataset(args.samples)
    try:
        emb = cx.encode_many(_encoder(cfg, ds.n), ds.samples)
        scores = bm.build_score_sets(emb, ds.labels, np.random.default_rng(cfg["eval_seed"]))
        report = bm.report_from_scores(scores)
    except ValueError as exc:
        raise data.DataFormatError(f"{args.samples}: {exc}") from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    bm.save_report(report, out)
    bm.save_histogram(scores, _sibling(out, ".hist.csv"))
    write_resolved(cfg, _sibling(out, ".resolved.cfg"))
    print(" ".join(f"{k}={v:.4f}" for k, v in report.as_dict().items()))
    return EXIT_OK


REPORT_COLUMNS = ("run",) + bm.REPORT_FIELDS


def report_rows(paths: Sequence[str]) -> List[List[str]]:
    rows = []
    for p in paths:
        try:
            r = bm.load_report(p)
        except OSError as exc:
            raise data.DataFormatError(f"{p}: {exc.strerror}") from None
        except ValueError as exc:
            raise data.DataFormatError(str(exc)) from None
        rows.append([Path(p).stem] + [f"{v:.4f}" for v in r.as_dict().values()])
    return rows


def aligned_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    return "\n".join([fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows]) + "\n"


def cmd_report(args, cfg: Dict[str, Any]) -> int:
    rows = report_rows(args.reports)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        w.writerows(rows)
    table = aligned_table(REPORT_COLUMNS, rows)
    _sibling(out, ".txt").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(prog="idiff", description="identity-conditioned diffusion toolkit",
                                epilog=schema_help(), formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], epilog=schema_help(), formatter_class=fmt,
                       help="train a denoiser; writes checkpoint, log and resolved config to out_dir")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", parents=[common], epilog=schema_help(), formatter_class=fmt,
                       help="generate identity sets from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--mode", choices=("authentic", "uniform", "two-stage"), default="uniform")
    s.add_argument("--uncond", help="unconditional checkpoint (two-stage mode)")
    s.add_argument("--ids", type=int, default=50)
    s.add_argument("--per-id", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="samples.csv")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", parents=[common], epilog=schema_help(), formatter_class=fmt,
                       help="score a samples CSV; writes report and histogram")
    e.add_argument("samples")
    e.add_argument("--encoder-seed", type=int, default=None, help="defaults to the encoder_seed key")
    e.add_argument("--out", default="report.txt")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", parents=[common], epilog=schema_help(), formatter_class=fmt,
                       help="tabulate report files")
    r.add_argument("reports", nargs="+")
    r.add_argument("--out", default="table.csv")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.config, args.overrides)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"idiff: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as exc:
        print(f"idiff: numerical abort at {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (data.DataFormatError, data.CheckpointError, cx.DegenerateSampleError) as exc:
        print(f"idiff: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"idiff: data error: {exc.filename}: not found", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
