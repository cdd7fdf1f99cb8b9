"""``glyco`` command line: synth, smooth, train, predict, evaluate.

Every command that writes artifacts also writes a JSON run manifest.
Options may come from ``--config FILE`` (``key = value`` lines, keys are
option names with or without leading dashes); explicit flags win.

Exit codes: 0 ok, 1 usage, 2 I/O or parse error, 3 insufficient data,
4 checkpoint mismatch.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as ckpt_io
from .errors import CheckpointError, GlycoError, ParseError, StructuralError
from .evaluate import build_report, summary_csv, summary_table
from .features import FeatureParams
from .ingest import (
    EventKind,
    PatientDataset,
    align_to_grid,
    dataset_to_csv,
    gridded_to_csv,
    load_dataset,
)
from .kalman import DEFAULT_Q_SCALE, DEFAULT_R, fit_q_scale, smoothed_to_csv
from .pipeline import prepare
from .synth import SynthConfig, generate
from .train import TrainConfig, make_windows, predict, train

log = logging.getLogger("glyco")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DATA, EXIT_CKPT = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class InsufficientData(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict[str, str] = field(default_factory=dict)  # path -> sha256
    seed: int | None = None
    version: str = __version__
    outputs: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        path.write_text(data, encoding="utf-8", newline="\n")
    else:
        path.write_bytes(data)


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _q_scale(text: str):
    if str(text).strip().lower() == "auto":
        return "auto"
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive or 'auto', got {text!r}")
    return v


def _resolve_q(q, ds: PatientDataset, r: float) -> float:
    """``auto`` -> maximum-likelihood q_scale on the dataset's CGM stream."""
    if q != "auto":
        return float(q)
    q = fit_q_scale(align_to_grid(ds)[EventKind.CGM], r)
    log.info("fitted q_scale %.6g", q)
    return q


def _default_seed() -> int:
    env = os.environ.get("GLYCO_SEED")
    if env is None or not env.strip():
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"GLYCO_SEED must be an integer, got {env!r}") from None


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment, blank lines ignored."""
    out: dict[str, str] = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        out[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return out


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--patient-id", default=None, help="patient id for CSV input (default: file stem)")
    p.add_argument("--split", choices=("train", "test"), default="train")


def build_parser() -> _Parser:
    parser = _Parser(prog="glyco", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"glyco {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="key = value file supplying defaults")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = command("synth", "generate a synthetic patient")
    p.add_argument("--days", type=_positive_int, default=10)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    for f in ("basal_glucose", "k0", "k_c", "k_i", "sigma_p", "sigma_s",
              "spike_prob", "dropout_prob", "attenuation_prob"):
        p.add_argument("--" + f.replace("_", "-"), type=float,
                       default=getattr(SynthConfig, f))

    p = command("smooth", "Kalman/RTS-smooth the CGM stream")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--q-scale", type=_q_scale, default=DEFAULT_Q_SCALE,
                   help="process-noise scale, or 'auto' for the likelihood fit")
    p.add_argument("--r", type=float, default=DEFAULT_R)
    p.add_argument("--out", required=True, help="output CSV")
    _add_data_flags(p)

    d = TrainConfig()
    p = command("train", "train a forecaster and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--glucose-source", choices=("raw", "smoothed"), default=d.glucose_source)
    p.add_argument("--ph", type=int, choices=(30, 60), default=5 * d.ph_slots, help="minutes")
    p.add_argument("--history", type=int, choices=(30, 60, 120, 240),
                   default=5 * d.history_slots, help="minutes")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, default=d.max_epochs)
    p.add_argument("--patience", type=int, default=d.patience)
    p.add_argument("--batch-size", type=_positive_int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--hidden", type=_positive_int, default=d.hidden)
    p.add_argument("--layers", type=_positive_int, default=d.n_layers)
    p.add_argument("--dense", default=",".join(map(str, d.dense)), help="comma-separated widths")
    p.add_argument("--dropout", type=float, default=d.dropout)
    p.add_argument("--val-fraction", type=float, default=d.val_fraction)
    p.add_argument("--q-scale", type=_q_scale, default=DEFAULT_Q_SCALE,
                   help="process-noise scale, or 'auto' to fit it on the training CGM")
    p.add_argument("--r", type=float, default=DEFAULT_R)
    p.add_argument("--literal-features", action="store_true",
                   help="decay carbs from the meal time and track only the latest event")
    _add_data_flags(p)

    for name, help_text, out_help in (
        ("predict", "forecast every eligible anchor", "output CSV"),
        ("evaluate", "score forecasts and write reports", "output directory"),
    ):
        p = command(name, help_text)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True, help=out_help)
        _add_data_flags(p)
        if name == "evaluate":
            p.add_argument("--tolerance", type=int, default=5,
                           help="fingerstick match tolerance, minutes")
    return parser


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("glyco: a command is required (synth, smooth, train, predict, evaluate)")
    if args.config:
        try:
            values = read_config_file(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        for key, value in values.items():
            if key not in known or key in ("help", "config"):
                raise UsageError(f"{args.config}: unknown option {key!r} for {args.command}")
            if isinstance(known[key], argparse._StoreTrueAction):
                value = value.lower() in ("1", "true", "yes", "on")
            sub.set_defaults(**{key: value})
        # String defaults pass through each option's type conversion.
        args = parser.parse_args(argv)
    if getattr(args, "seed", 0) is None:
        args.seed = _default_seed()
    return args


def _load(args, path) -> PatientDataset:
    return load_dataset(path, patient_id=args.patient_id, split_tag=args.split)


def _manifest(args, config: dict, inputs: list, outputs: list, seed=None) -> RunManifest:
    return RunManifest(
        command=args.command,
        config=config,
        inputs={str(p): sha256_file(p) for p in inputs},
        seed=seed,
        outputs=[str(p) for p in outputs],
    )


def cmd_synth(args) -> int:
    try:
        cfg = SynthConfig(
            days=args.days, seed=args.seed, basal_glucose=args.basal_glucose, k0=args.k0,
            k_c=args.k_c, k_i=args.k_i, sigma_p=args.sigma_p, sigma_s=args.sigma_s,
            spike_prob=args.spike_prob, dropout_prob=args.dropout_prob,
            attenuation_prob=args.attenuation_prob,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = generate(cfg)
    d = Path(args.out)
    files = {
        "dataset.csv": dataset_to_csv(out.dataset),
        "latent.csv": gridded_to_csv(out.latent_truth, "glucose"),
        "faults.csv": "kind,start_slot,length,magnitude\n" + "".join(
            f"{f.kind},{f.start},{f.length},{f.magnitude!r}\n" for f in out.faults
        ),
    }
    for name, text in files.items():
        _write(d / name, text)
    config = {k: v for k, v in dataclasses.asdict(cfg).items() if not isinstance(v, (tuple, type(None)))}
    m = _manifest(args, config, [], [d / n for n in files], seed=cfg.seed)
    _write(d / "manifest.json", m.to_json())
    log.info("wrote %d slots to %s", len(out.latent_truth), d)
    return EXIT_OK


def cmd_smooth(args) -> int:
    if args.r <= 0:
        raise UsageError("--r must be positive")
    ds = _load(args, args.input)
    q = _resolve_q(args.q_scale, ds, args.r)
    prep = prepare(ds, "raw", q, args.r)
    out = Path(args.out)
    _write(out, smoothed_to_csv(prep.smoothed, prep.raw_glucose))
    m = _manifest(args, {"q_scale": q, "q_scale_flag": str(args.q_scale), "r": args.r}, [args.input], [out])
    _write(out.with_name(out.name + ".manifest.json"), m.to_json())
    return EXIT_OK


def _train_config(args, q_scale: float = DEFAULT_Q_SCALE) -> tuple[TrainConfig, FeatureParams]:
    try:
        dense = tuple(int(v) for v in str(args.dense).split(",") if v.strip())
        cfg = TrainConfig(
            history_slots=args.history // 5, ph_slots=args.ph // 5, batch_size=args.batch_size,
            lr=args.lr, max_epochs=args.epochs, patience=args.patience,
            val_fraction=args.val_fraction, hidden=args.hidden, dense=dense,
            n_layers=args.layers, dropout=args.dropout, glucose_source=args.glucose_source,
            q_scale=q_scale, r=args.r, seed=args.seed,
        )
        cfg.model_config()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg, FeatureParams(literal=bool(args.literal_features))


def cmd_train(args) -> int:
    if args.r <= 0:
        raise UsageError("--r must be positive")
    _train_config(args)  # reject bad flags before reading data
    ds = _load(args, args.data)
    cfg, feats = _train_config(args, _resolve_q(args.q_scale, ds, args.r))
    prep = prepare(ds, cfg.glucose_source, cfg.q_scale, cfg.r, feats)
    windows = make_windows(prep.block, cfg)
    if len(windows) < 2:
        raise InsufficientData(
            f"{len(windows)} complete window(s) of {cfg.history_slots}+{cfg.ph_slots} slots; need >= 2"
        )

    def report(epoch, tr, va):
        log.info("epoch %d train %.4f val %.4f", epoch, tr, va)

    ck = train(windows, cfg, feats, on_epoch=report)
    out = Path(args.out)
    _write(out, ckpt_io.dumps(ck))
    config = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    config["dense"] = list(cfg.dense)
    config["literal_features"] = feats.literal
    config["q_scale_flag"] = str(args.q_scale)
    m = _manifest(args, config, [args.data], [out], seed=cfg.seed)
    _write(out.with_name(out.name + ".manifest.json"), m.to_json())
    h = ck.history
    print(f"trained {len(h.val_loss)} epochs ({h.stop_reason}); best epoch {h.best_epoch} "
          f"val NLL {ck.best_val_loss:.4f} (initial {h.initial_val_loss:.4f})")
    return EXIT_OK


def _forecast(args):
    try:
        ck = ckpt_io.load(args.ckpt)
    except OSError as exc:
        raise OSError(exc.errno, exc.strerror, args.ckpt) from None
    ds = _load(args, args.data)
    cfg = ck.config
    prep = prepare(ds, cfg.glucose_source, cfg.q_scale, cfg.r, ck.features)
    preds = predict(ck, prep.block)
    if len(preds) == 0:
        raise InsufficientData(f"no anchor has {cfg.history_slots} consecutive glucose values")
    return ck, ds, prep, preds


def cmd_predict(args) -> int:
    ck, _, _, preds = _forecast(args)
    lines = ["anchor_ts,target_ts,mu,sigma2\n"]
    for row in zip(preds.anchor_ts.tolist(), preds.target_ts.tolist(),
                   preds.mu.tolist(), preds.sigma2.tolist()):
        lines.append(f"{row[0]},{row[1]},{row[2]!r},{row[3]!r}\n")
    out = Path(args.out)
    _write(out, "".join(lines))
    m = _manifest(args, {"ckpt": str(args.ckpt)}, [args.ckpt, args.data], [out], seed=ck.config.seed)
    _write(out.with_name(out.name + ".manifest.json"), m.to_json())
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.tolerance < 0:
        raise UsageError("--tolerance must be >= 0")
    ck, ds, prep, preds = _forecast(args)
    cfg = ck.config
    rep = build_report(
        preds, prep.raw_glucose, prep.smoothed.mean,
        patient_id=ds.patient_id, ph_slots=cfg.ph_slots, glucose_source=cfg.glucose_source,
        fingerstick=ds.stream(EventKind.FINGERSTICK), tolerance_minutes=args.tolerance,
    )
    text = summary_table([rep])
    if rep.fingerstick is not None:
        fs = rep.fingerstick
        shown = "-" if fs.mae is None else f"{fs.mae:.2f}"
        text += (f"\nfingerstick MAE of {cfg.glucose_source} CGM: {shown} "
                 f"({fs.n_matched} matched, {fs.n_unmatched} unmatched)\n")
    d = Path(args.out)
    files = {
        "report.txt": text,
        "report.csv": summary_csv([rep]),
        "anchors.csv": rep.anchors_csv(),
        "plot.csv": rep.plot_csv(),
    }
    for name, content in files.items():
        _write(d / name, content)
    config = {"ckpt": str(args.ckpt), "tolerance_minutes": args.tolerance}
    m = _manifest(args, config, [args.ckpt, args.data], [d / n for n in files], seed=cfg.seed)
    _write(d / "manifest.json", m.to_json())
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "smooth": cmd_smooth,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    np.seterr(over="ignore", under="ignore")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"glyco {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"glyco {args.command}: checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_CKPT
    except InsufficientData as exc:
        print(f"glyco {args.command}: insufficient data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ParseError, StructuralError) as exc:
        print(f"glyco {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"glyco {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except GlycoError as exc:
        print(f"glyco {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
