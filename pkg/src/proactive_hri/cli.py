"""Command-line entry point: ``hri sim-gen | train | eval | infer | inspect``.

Exit codes: 0 success, 1 usage or configuration, 2 data or format,
3 numeric failure (divergence, degenerate calibration).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .errors import ConfigError, DataError, HRIError

log = logging.getLogger("proactive_hri")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--seed", type=int, help="master seed (sim, train and infer unless set individually)")
    p.add_argument("--print-config", action="store_true", help="print the resolved config with provenance and exit")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--m", type=int, dest="model.m", help="tokens per frame")
    g.add_argument("--n", type=int, dest="model.n", help="frames per window")
    g.add_argument("--d-model", type=int, dest="model.d_model")
    g.add_argument("--blocks", type=int, dest="model.blocks")
    g.add_argument("--heads", type=int, dest="model.heads")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hri", description="Proactive interaction initiation: simulate, train, evaluate, infer.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("sim-gen", help="generate a synthetic episode dataset")
    _common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--episodes", type=int, dest="run.episodes")
    p.add_argument("--noise", type=float, dest="sim.noise")

    p = sub.add_parser("train", help="train and calibrate a checkpoint")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="per-step CSV (default: <out>.metrics.csv)")
    p.add_argument("--limit", type=int, help="use only the first N train episodes")
    p.add_argument("--no-figures", action="store_true")
    g = p.add_argument_group("training")
    g.add_argument("--steps", type=int, dest="train.steps")
    g.add_argument("--batch-size", type=int, dest="train.batch_size")
    g.add_argument("--lr", type=float, dest="train.lr")
    g.add_argument("--threads", type=int, dest="train.threads")
    g.add_argument("--eval-every", type=int, dest="train.eval_every")
    g.add_argument("--null-weight", type=float, dest="train.null_weight")
    _model_flags(p)

    p = sub.add_parser("eval", help="score every window of a split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--mode", action="append", help="inference mode (repeatable; default all three)")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("infer", help="stream frames and emit initiation commands")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", help="frame JSONL (default: stdin)")
    p.add_argument("--output", help="command JSONL (default: stdout)")
    p.add_argument("--mode", dest="infer.mode")
    p.add_argument("--deterministic", action="store_const", const="true", dest="infer.deterministic")
    p.add_argument("--refractory", type=int, dest="infer.refractory")
    p.add_argument("--suppress-warmup", action="store_const", const="true", dest="infer.suppress_warmup")
    p.add_argument("--strict", action="store_true", help="abort on a malformed line instead of skipping it")
    p.add_argument("--stats", action="store_true", help="print throughput to stderr")

    p = sub.add_parser("inspect", help="summarise a checkpoint")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("--json", action="store_true")
    return parser


def _resolve(args):
    from .config import resolve

    overrides = {k: v for k, v in vars(args).items() if "." in k}
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    return resolve(args.config, overrides)


def cmd_sim_gen(args, rc) -> int:
    from .sim import generate_dataset

    manifest = generate_dataset(rc.sim, int(rc.values["run"]["episodes"]), args.out)
    for split, entry in manifest["splits"].items():
        print(f"{split}: {entry['episodes']} episodes, {entry['positives']} positives, {entry['frames']} frames")
    print(Path(args.out) / "manifest.json")
    return EXIT_OK


def cmd_train(args, rc) -> int:
    from .checkpoint import save_checkpoint
    from .sim import atomic_write
    from .trainer import history_to_csv, run_training

    out = Path(args.out)
    metrics = Path(args.metrics) if args.metrics else out.with_name(out.name + ".metrics.csv")
    t0 = time.perf_counter()
    every = max(1, rc.train.steps // 20)

    def report(row):
        if row["step"] % every == 0 or row["step"] == rc.train.steps - 1:
            val = "" if row["val_f1"] is None else f" val_f1={row['val_f1']:.3f}"
            log.info("step %d loss=%.4f (trig %.4f act %.4f tgt %.4f)%s %.0fs", row["step"], row["total"],
                     row["trigger"], row["action"], row["target"], val, time.perf_counter() - t0)

    result = run_training(args.manifest, rc.model, rc.train, limit=args.limit, on_step=report)
    save_checkpoint(result.checkpoint, out)
    atomic_write(metrics, history_to_csv(result.history).encode())
    if not args.no_figures and result.history:
        from .plotting import plot_loss_curve

        print(plot_loss_curve(result.history, metrics.with_suffix(".png")))
    c = result.calibration
    print(f"H_trigger={c.trigger:.6f} (val F1 {c.trigger_f1:.4f})  H_target={c.target:.6f} (F1 {c.target_f1:.4f})")
    print(f"trained in {time.perf_counter() - t0:.1f}s")
    print(metrics)
    print(out)
    return EXIT_OK


def cmd_eval(args, rc) -> int:
    from .checkpoint import load_checkpoint
    from .dataset import load_split
    from .evaluation import InferenceMode, evaluate_checkpoint, write_reports

    ckpt = load_checkpoint(args.checkpoint)
    episodes = load_split(args.manifest, args.split)
    if not episodes:
        raise DataError(f"split {args.split!r} is empty")
    f_dim = episodes[0].packets[0].objects[0].feature.size if episodes[0].packets[0].objects else None
    if f_dim is not None and f_dim != ckpt.model_config.feature_dim:
        raise ConfigError(f"checkpoint expects {ckpt.model_config.feature_dim}-d features, data has {f_dim}")
    modes = [InferenceMode.parse(m) for m in args.mode] if args.mode else list(InferenceMode)
    ev = evaluate_checkpoint(ckpt, episodes, modes)
    paths = write_reports(ev, args.out, figures=not args.no_figures)
    for r in ev.reports:
        extra = f" AP={r.ap:.4f} AR={r.ar:.4f}" if r.ap is not None else ""
        top1 = "n/a" if r.action_top1 is None else f"{r.action_top1:.4f}"
        tf1 = "n/a" if r.target_f1 is None else f"{r.target_f1:.4f}"
        print(f"{r.source:>6} {r.mode:<13} H={r.threshold:.4f} P={r.precision:.4f} R={r.recall:.4f} "
              f"F1={r.f1:.4f}{extra} top1={top1} targetF1={tf1} (TP={r.tp} FP={r.fp} FN={r.fn} TN={r.tn})")
    for p in paths.values():
        print(p)
    return EXIT_OK


def _packets(stream, strict: bool):
    from .sim import packet_from_json

    for lineno, line in enumerate(stream, 1):
        if not line.strip():
            continue
        try:
            yield packet_from_json(line)
        except (ValueError, KeyError, TypeError, HRIError) as exc:
            if strict:
                raise DataError(f"line {lineno}: {exc}") from None
            log.warning("skipping malformed line %d: %s", lineno, exc)


def cmd_infer(args, rc) -> int:
    from .checkpoint import load_checkpoint
    from .inference import InferenceEngine

    engine = InferenceEngine.from_checkpoint(load_checkpoint(args.checkpoint), rc.infer)
    src = open(args.input, encoding="utf-8") if args.input else sys.stdin
    dst = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    frames, t0 = 0, time.perf_counter()
    try:
        for packet in _packets(src, args.strict):
            try:
                cmd = engine.step(packet)
            except HRIError as exc:
                if args.strict:
                    raise
                log.warning("skipping frame %s/%s: %s", packet.episode_id, packet.frame_idx, exc)
                continue
            frames += 1
            if cmd is not None:
                dst.write(cmd.to_json() + "\n")
                dst.flush()
    finally:
        if args.input:
            src.close()
        if args.output:
            dst.close()
    if args.stats:
        dt = time.perf_counter() - t0
        print(f"{frames} frames in {dt:.2f}s ({frames / dt if dt else 0:.2f} decisions/s)", file=sys.stderr)
    return EXIT_OK


def cmd_inspect(args, rc) -> int:
    from .checkpoint import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    summary = {
        "version": ckpt.version,
        "model_config": ckpt.model_config.to_dict(),
        "parameters": ckpt.parameter_count(),
        "tensors": {k: list(v.shape) for k, v in ckpt.params.items()},
        "K": ckpt.codebook.k,
        "actions": ckpt.codebook.to_dict(),
        "embedder": ckpt.embedder,
        "thresholds": ckpt.thresholds,
        "metadata": ckpt.metadata,
    }
    if args.json:
        print(json.dumps(summary, indent=2))
        return EXIT_OK
    print(f"checkpoint version {ckpt.version}")
    print("model: " + ", ".join(f"{k}={v}" for k, v in summary["model_config"].items()))
    print(f"parameters: {summary['parameters']} in {len(ckpt.params)} tensors")
    print(f"codebook: K={ckpt.codebook.k} (+NULL at index {ckpt.codebook.null_index})")
    for i, a in enumerate(ckpt.codebook.actions):
        print(f"  [{i}] {a.utterance!r} expression={a.expression_id} motion={a.motion_id}")
    if ckpt.thresholds:
        print("thresholds: " + ", ".join(f"{k}={v:.6f}" for k, v in ckpt.thresholds.items()))
    else:
        print("thresholds: uncalibrated")
    return EXIT_OK


COMMANDS = {"sim-gen": cmd_sim_gen, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version, usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    level = logging.WARNING - 10 * min(args.verbose, 1) if args.command != "train" else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr)
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    try:
        rc = _resolve(args)
        if args.print_config:
            print(rc.render())
            return EXIT_OK
        return COMMANDS[args.command](args, rc)
    except HRIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except BrokenPipeError:
        # downstream reader closed early (e.g. piped into head)
        sys.stderr.close()
        return EXIT_OK
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
