"""``masan`` command line: synth, pretrain, train, eval, ablate, viz, gradcheck.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness as H
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .data import export_metrics_csv, generate_synthetic_cohort, load_cohort, save_cohort, split_train_test
from .gradcheck import run_suite

GRADCHECK_TOLERANCE = 1e-3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _parse_set(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="masan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_, out_required=True):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--config", help="key=value config file")
        c.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        c.add_argument("--seed", type=int, help="experiment seed")
        c.add_argument("--out", required=out_required, help="output directory")
        c.add_argument("-v", "--verbose", action="store_true", help="log every step")
        return c

    command("synth", "write a synthetic cohort")
    for name, help_ in (("pretrain", "pretrain the patch autoencoders"),
                        ("train", "train end to end and evaluate on the test split")):
        c = command(name, help_)
        c.add_argument("--data", help="cohort directory (default: synthesize from the config)")
        if name == "train":
            c.add_argument("--init", help="checkpoint with starting weights")
    c = command("eval", "evaluate a checkpoint on its test split")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data")
    c = command("ablate", "attention vs addition fusion over several seeds")
    c.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds")
    c = command("viz", "export the fused-embedding map of one subject")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data")
    c.add_argument("--subject", help="subject id (default: first test subject of class 1)")
    command("gradcheck", "finite-difference check of every operation", out_required=False)
    return p


def _config(args) -> ExperimentConfig:
    overrides = _parse_set(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return load_config(args.config, overrides)


def _cohort(cfg: ExperimentConfig, data_dir):
    return load_cohort(data_dir) if data_dir else generate_synthetic_cohort(cfg.synthetic_spec())


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args, cfg):
    out = _out(args)
    save_cohort(generate_synthetic_cohort(cfg.synthetic_spec()), out)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    print(f"wrote {2 * cfg.synthetic.n_per_class} subjects to {out}")


def cmd_pretrain(args, cfg):
    out = _out(args)
    train, _ = split_train_test(_cohort(cfg, args.data), cfg.train_fraction, cfg.seed)
    res = H.pretrain_autoencoders(cfg, train)
    save_checkpoint(res.checkpoint, out / "pretrain.ckpt")
    H.write_trace(res.trace, out / "pretrain_trace.txt")
    if res.trace:
        print(f"pretrain: {len(res.trace)} steps, final loss {res.trace[-1]['L_total']:.6g}")


def cmd_train(args, cfg):
    out = _out(args)
    train, test = split_train_test(_cohort(cfg, args.data), cfg.train_fraction, cfg.seed)
    init = None
    if args.init:
        init = load_checkpoint(args.init)
    elif cfg.pretrain_steps > 0:
        pre = H.pretrain_autoencoders(cfg, train)
        H.write_trace(pre.trace, out / "pretrain_trace.txt")
        init = pre.checkpoint
    res = H.train_end_to_end(cfg, train, init)
    save_checkpoint(res.checkpoint, out / "model.ckpt")
    H.write_trace(res.trace, out / "loss_trace.txt")
    report = H.evaluate(res.model, test, cfg.fusion.mode, cfg.seed)
    export_metrics_csv([report], out / "metrics.csv")
    _print_report(report)


def _print_report(r: H.MetricsReport):
    flags = "".join([" (precision undefined)" if r.precision_undefined else "",
                     " (recall undefined)" if r.recall_undefined else ""])
    c = r.counts
    print(f"{r.run} seed {r.seed}: accuracy {r.accuracy:.4f} precision {r.precision:.4f} "
          f"recall {r.recall:.4f} [tp {c.tp} fp {c.fp} fn {c.fn} tn {c.tn}]{flags}")


def cmd_eval(args, cfg):
    out = _out(args)
    ck = load_checkpoint(args.checkpoint)
    ccfg = ck.config
    _, test = split_train_test(_cohort(ccfg, args.data), ccfg.train_fraction, ccfg.seed)
    report = H.evaluate(ck, test, ccfg.fusion.mode, ccfg.seed)
    export_metrics_csv([report], out / "metrics.csv")
    _print_report(report)


def cmd_ablate(args, cfg):
    out = _out(args)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got {args.seeds!r}") from None
    res = H.run_ablation(cfg, seeds)
    export_metrics_csv(res.rows, out / "ablation.csv")
    lines = ["seed,d_accuracy,d_precision,d_recall"]
    for seed, d in zip(seeds, res.deltas()):
        lines.append(f"{seed},{d['accuracy']:.4f},{d['precision']:.4f},{d['recall']:.4f}")
    m = res.mean_deltas()
    lines.append(f"mean,{m['accuracy']:.4f},{m['precision']:.4f},{m['recall']:.4f}")
    (out / "ablation_deltas.csv").write_text("\n".join(lines) + "\n", encoding="ascii")
    for r in res.rows:
        _print_report(r)
    print("mean delta (attention - addition): " + ", ".join(f"{k} {v:+.4f}" for k, v in m.items()))


def cmd_viz(args, cfg):
    out = _out(args)
    ck = load_checkpoint(args.checkpoint)
    ccfg = ck.config
    cohort = _cohort(ccfg, args.data)
    if args.subject:
        matches = [s for s in cohort if s.subject_id == args.subject]
        if not matches:
            raise ConfigError(f"no subject {args.subject!r} in the cohort")
        sample = matches[0]
    else:
        _, test = split_train_test(cohort, ccfg.train_fraction, ccfg.seed)
        sample = next((s for s in test if s.label == 1), test[0])
    vol = H.export_embedding_map(ck, sample, out / f"embedding_{sample.subject_id}")
    sig, bg = H.signal_contrast(vol, ccfg)
    print(f"{sample.subject_id}: signal cells {sig:.4f}, background cells {bg:.4f}")


def cmd_gradcheck(args, cfg):
    errors = run_suite(cfg.seed)
    width = max(len(k) for k in errors)
    for name, err in errors.items():
        status = "ok" if err < GRADCHECK_TOLERANCE else "FAIL"
        print(f"{name:<{width}}  {err:.3e}  {status}")
    worst = max(errors.values())
    if worst >= GRADCHECK_TOLERANCE:
        raise RuntimeError(f"max relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE}")


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "viz": cmd_viz, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _config(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"masan: config error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"masan: config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - every other failure is a runtime failure
        print(f"masan {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
