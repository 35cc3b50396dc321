"""Command-line entry point: ``datcftnet <command> [options]``.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .signal_io import AudioError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST_NAME = "run_manifest.json"

log = logging.getLogger("datcftnet")


class CliError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


# -- run manifest ---------------------------------------------------------------

@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: dict
    output_dir: str
    argv: List[str]

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / MANIFEST_NAME
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def version_stamp() -> dict:
    import scipy
    import torch
    return {"datcftnet": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "torch": torch.__version__}


def _start(args, config: dict) -> Optional[RunManifest]:
    out = getattr(args, "out", None)
    if out is None:
        return None
    m = RunManifest(command=args.command, config=config, seed=args.seed, version=version_stamp(),
                    output_dir=str(Path(out).resolve()), argv=list(args.argv))
    m.write(out)
    return m


# -- configuration ----------------------------------------------------------------

PRESETS = ("default", "reference", "tiny")


def _model_defaults(preset: str, variant: Optional[str]):
    from .network import ModelConfig, reference_config, tiny_config
    if preset == "reference":
        return reference_config(variant or "base")
    if preset == "tiny":
        return tiny_config(variant or "f")
    return ModelConfig(variant=variant or "base")


def resolve_config(args) -> dict:
    """Defaults <- preset <- ``--config`` JSON <- explicit flags.  Returns ``{"model", "train"}``."""
    from .network import ModelConfig
    from .training import TrainConfig

    user = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config file not found: {path}", EXIT_IO)
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid JSON ({exc})", EXIT_CONFIG) from exc
        unknown = set(user) - {"model", "train"}
        if unknown:
            raise CliError(f"unknown config sections: {sorted(unknown)}", EXIT_CONFIG)

    model = _model_defaults(getattr(args, "preset", "default"), getattr(args, "variant", None)).to_dict()
    model.update(user.get("model", {}))
    train = TrainConfig().to_dict()
    train.update(user.get("train", {}))

    flag_map = {"variant": ("model", "variant"), "chunk_len": ("model", "chunk_len"),
                "ftb_order": ("model", "ftb_order"), "mask_target": ("model", "mask_target"),
                "output_mode": ("model", "output_mode"), "loss_alpha": ("train", "loss_alpha"),
                "loss_mode": ("train", "loss_mode"), "epochs": ("train", "epochs"), "lr": ("train", "lr"),
                "batch": ("train", "batch"), "dtype": ("train", "dtype")}
    sections = {"model": model, "train": train}
    for flag, (section, key) in flag_map.items():
        val = getattr(args, flag, None)
        if val is not None:
            sections[section][key] = val
    if args.seed is not None:
        model["seed"] = train["seed"] = args.seed

    try:
        mcfg = ModelConfig.from_dict(model)
        tcfg = TrainConfig(**train)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}", EXIT_CONFIG) from exc
    return {"model": mcfg.to_dict(), "train": tcfg.to_dict()}


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


# -- helpers ------------------------------------------------------------------------

def _need_path(path, kind="file") -> Path:
    p = Path(path)
    ok = p.is_dir() if kind == "dir" else p.exists()
    if not ok:
        raise CliError(f"{kind} not found: {p}", EXIT_IO)
    return p


def _load_pairs(manifest_path):
    from .signal_io import load_wav, read_manifest
    recs = read_manifest(_need_path(manifest_path))
    if not recs:
        raise CliError(f"{manifest_path}: empty manifest", EXIT_CONFIG)
    items = []
    for r in recs:
        if "noisy_path" not in r:
            raise CliError(f"{manifest_path}: record {r.get('id')} has no noisy_path", EXIT_CONFIG)
        items.append({"noisy": load_wav(r["noisy_path"]), "clean": load_wav(r["clean_path"]),
                      "noise_kind": r.get("noise_kind", "unknown"), "snr_db": r.get("snr_db", float("nan")),
                      "id": r.get("id")})
    return items


def _load_checkpoint(path):
    from .checkpoint import Checkpoint
    try:
        ck = Checkpoint.load(_need_path(path))
    except (KeyError, ValueError) as exc:
        raise CliError(f"{path}: not a usable checkpoint ({exc})", EXIT_IO) from exc
    return ck, ck.build_model()


def _set_threads(workers: int) -> None:
    import torch
    torch.set_num_threads(max(1, workers))


# -- commands -------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .signal_io import make_synthetic_corpus, write_manifest, write_wav
    if args.n < 1:
        raise CliError("--n must be >= 1", EXIT_CONFIG)
    _start(args, {"n": args.n})
    out = Path(args.out)
    records = []
    for w, uid in make_synthetic_corpus(args.n, _seed(args)):
        rel = f"clean/{uid}.wav"
        write_wav(out / rel, w)
        records.append({"id": uid, "clean_path": rel, "duration_s": w.duration})
    write_manifest(out / "corpus.jsonl", records)
    print(f"wrote {len(records)} utterances to {out / 'clean'}")
    return EXIT_OK


def _realize_one(job):
    from .signal_io import realize, write_wav
    recipe, clean, corpus_waves, noisy_path = job
    noisy, _ = realize(recipe, clean, corpus_waves)
    write_wav(noisy_path, noisy)
    return str(noisy_path)


def _parse_snr_grid(text: str):
    if text in ("train", "test"):
        return text, None
    try:
        return "train", [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise CliError(f"--snr-grid must be 'train', 'test' or a comma list of dB values: {text!r}",
                       EXIT_CONFIG) from exc


def cmd_mix(args) -> int:
    from .signal_io import build_training_grid, load_wav_folder, recipe_record, write_manifest
    clean_dir = _need_path(args.clean_dir, "dir")
    for nk in args.noise:
        if os.sep in nk or nk.endswith(".wav"):
            _need_path(nk)
    split, snrs = _parse_snr_grid(args.snr_grid)
    _start(args, {"clean_dir": str(clean_dir), "noise": args.noise, "snr_grid": args.snr_grid})
    corpus = load_wav_folder(clean_dir)
    if not corpus:
        raise CliError(f"no WAV files in {clean_dir}", EXIT_IO)
    waves = {uid: w for w, uid in corpus}
    try:
        recipes = build_training_grid(corpus, args.noise, _seed(args), split=split, snrs=snrs)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    out = Path(args.out)
    corpus_waves = [w for w, _ in corpus]
    jobs, records = [], []
    for r in recipes:
        rec = recipe_record(r, str((clean_dir / f"{r.utterance_id}.wav").resolve()))
        rel = f"noisy/{rec['id']}.wav"
        rec["noisy_path"] = rel
        records.append(rec)
        jobs.append((r, waves[r.utterance_id], corpus_waves if r.noise_kind == "speech_shaped" else None,
                     out / rel))
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            list(pool.map(_realize_one, jobs))
    else:
        for job in jobs:
            _realize_one(job)
    write_manifest(out / "manifest.jsonl", records)
    print(f"wrote {len(records)} mixtures to {out / 'noisy'}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .network import ModelConfig, build
    from .training import TrainConfig, train
    cfg = resolve_config(args)
    _set_threads(args.workers)
    _start(args, cfg)
    pairs = [(it["noisy"], it["clean"]) for it in _load_pairs(args.data)]
    val = [(it["noisy"], it["clean"]) for it in _load_pairs(args.val_data)] if args.val_data else None
    resume = None
    if args.resume:
        resume, model = _load_checkpoint(args.resume)
    else:
        model = build(ModelConfig.from_dict(cfg["model"]))
    best = train(model, pairs, TrainConfig(**cfg["train"]), val_set=val, out_dir=args.out, resume=resume)
    val_rows = [h for h in best.history if h["split"] == "val"]
    if val_rows:
        print(f"best epoch {best.epoch}: val loss {val_rows[-1]['loss']:.4f}, SI-SDR {val_rows[-1]['sisdr']:.2f} dB")
    return EXIT_OK


def cmd_enhance(args) -> int:
    from .network import enhance
    from .signal_io import load_wav, write_wav
    src = _need_path(getattr(args, "in"))
    files = sorted(src.glob("*.wav")) if src.is_dir() else [src]
    if not files:
        raise CliError(f"no WAV files in {src}", EXIT_IO)
    ck, model = _load_checkpoint(args.ckpt)
    _set_threads(args.workers)
    _start(args, {"ckpt": str(Path(args.ckpt).resolve()), "model": ck.model_config, "inputs": [str(f) for f in files]})
    out = Path(args.out)
    for f in files:
        est = enhance(model, load_wav(f))
        if not np.all(np.isfinite(est.samples)):
            raise CliError(f"{f}: enhanced output is not finite", EXIT_NUMERIC)
        write_wav(out / f.name, est)
    print(f"enhanced {len(files)} file(s) into {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate
    items = _load_pairs(args.test_manifest)
    model, mcfg = None, None
    if args.ckpt:
        ck, model = _load_checkpoint(args.ckpt)
        mcfg = ck.model_config
    _set_threads(args.workers)
    _start(args, {"ckpt": args.ckpt, "model": mcfg, "test_manifest": str(Path(args.test_manifest).resolve()),
                  "seen_kinds": args.seen_kinds})
    report = evaluate(model, items, seen_kinds=args.seen_kinds)
    out = Path(args.out)
    report.to_csv(out / "report.csv")
    report.to_json(out / "report.json")
    for key, agg in report.aggregates.items():
        print(f"{key:>18}  n={agg['n']:<4d} SI-SDR {agg['sisdr_db']:7.2f} dB  STOI {agg['stoi']:.3f}"
              f"  LSD {agg['lsd_db']:6.2f} dB")
    if report.has_nan():
        raise CliError("report contains NaN scores", EXIT_NUMERIC)
    return EXIT_OK


def cmd_electrodogram(args) -> int:
    from .electrodogram import AceConfig, ace_process, render_electrodogram, vocode
    from .signal_io import load_wav, resample, write_wav
    src = _need_path(getattr(args, "in"))
    try:
        cfg = AceConfig(n_maxima=args.n_maxima, channel_rate=args.channel_rate, vocoder_seed=_seed(args),
                        presentation_rms=args.presentation_rms)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    _start(args, {"input": str(src.resolve()), "ace": dataclasses.asdict(cfg), "vocode": args.vocode,
                  "width": args.width, "height": args.height})
    w = load_wav(src)
    if w.sample_rate != cfg.sample_rate:
        w = resample(w, cfg.sample_rate)
    eg = ace_process(w, cfg)
    out = Path(args.out)
    eg.to_csv(out / "electrodogram.csv")
    render_electrodogram(eg, out / "electrodogram.png", args.width, args.height)
    if args.vocode:
        v = vocode(eg, cfg, len(w))
        peak = float(np.max(np.abs(v.samples))) if len(v) else 0.0
        write_wav(out / "vocoded.wav", v if peak <= 1.0 else type(v)(v.samples / peak, v.sample_rate))
    print(f"{len(eg.pulses)} pulses over {eg.n_frames} frames")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradaudit import MODULES, gradient_errors, parse_dims
    try:
        dims = parse_dims(args.dims)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    modules = MODULES if args.module == "all" else [args.module]
    _start(args, {"modules": list(modules), "dims": dims, "eps": args.eps, "tol": args.tol})
    worst_all, results = 0.0, {}
    for mod in modules:
        errs = gradient_errors(mod, dims, eps=args.eps, seed=_seed(args))
        worst = max(errs.values())
        worst_all = max(worst_all, worst)
        results[mod] = {"max_rel_error": worst, "per_tensor": errs}
        status = "PASS" if worst <= args.tol else "FAIL"
        print(f"{status}  {mod:<26} max relative error {worst:.3e}  ({len(errs)} tensors)")
    if args.out:
        Path(args.out, "gradcheck.json").write_text(json.dumps(results, indent=2, sort_keys=True))
    if not worst_all <= args.tol:
        raise CliError(f"gradient check failed: {worst_all:.3e} > {args.tol:g}", EXIT_NUMERIC)
    return EXIT_OK


def cmd_params(args) -> int:
    from .network import ModelConfig, build, count_params, param_table
    cfg = ModelConfig.from_dict(resolve_config(args)["model"])
    _start(args, {"model": cfg.to_dict()})
    model = build(cfg)
    rows = param_table(model)
    width = max(len(r[0]) for r in rows)
    print(f"{'layer':<{width}}  {'kind':<24} {'params':>10} {'closed form':>12}")
    mismatched = []
    for name, kind, n, closed in rows:
        flag = "" if closed is None or closed == n else "  MISMATCH"
        if flag:
            mismatched.append(name)
        print(f"{name:<{width}}  {kind:<24} {n:>10,d} {'-' if closed is None else format(closed, ',d'):>12}{flag}")
    total = count_params(model)
    print(f"total ({cfg.variant}): {total:,d}")
    totals = {}
    for variant in ("base", "l"):
        totals[variant] = count_params(build(ModelConfig.from_dict({**cfg.to_dict(), "variant": variant})))
    ratio = totals["base"] / totals["l"]
    print(f"base {totals['base']:,d}  l {totals['l']:,d}  ratio base/l = {ratio:.3f}")
    if args.out:
        Path(args.out, "params.json").write_text(json.dumps(
            {"rows": [list(r) for r in rows], "total": total, "base": totals["base"], "l": totals["l"],
             "ratio": ratio}, indent=2))
    if mismatched:
        raise CliError(f"closed-form count mismatch in {mismatched}", EXIT_NUMERIC)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "mix": cmd_mix, "train": cmd_train, "enhance": cmd_enhance, "eval": cmd_eval,
            "electrodogram": cmd_electrodogram, "gradcheck": cmd_gradcheck, "params": cmd_params}


# -- parser -----------------------------------------------------------------------------

def _model_flags(p: argparse.ArgumentParser) -> None:
    from .dat_rnn import MASK_TARGETS
    from .ftb import FTB_ORDERS
    from .network import OUTPUT_MODES, VARIANTS
    p.add_argument("--config", help="JSON file with 'model' and 'train' sections")
    p.add_argument("--preset", choices=PRESETS, default="default",
                   help="starting widths: default, reference (full-size) or tiny (desk-scale)")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--chunk-len", type=int, help="DAT-RNN chunk length P (even)")
    p.add_argument("--ftb-order", choices=FTB_ORDERS)
    p.add_argument("--mask-target", choices=MASK_TARGETS)
    p.add_argument("--output-mode", choices=OUTPUT_MODES)


def _common_flags(suppress: bool) -> argparse.ArgumentParser:
    def d(value):
        return argparse.SUPPRESS if suppress else value
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=d(None), help="seed for data, init and shuffling (default 0)")
    common.add_argument("--workers", type=int, default=d(1), help="worker processes/threads (1 = deterministic)")
    common.add_argument("--print-config", action="store_true", default=d(False),
                        help="print the resolved configuration and exit")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    top = _common_flags(suppress=False)
    # repeated on each subcommand; SUPPRESS keeps a flag given before the command from being reset
    common = _common_flags(suppress=True)

    parser = argparse.ArgumentParser(prog="datcftnet", parents=[top],
                                     description="Complex-spectrogram speech enhancement with a dual-path "
                                                 "attention RNN, plus cochlear-implant simulation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", parents=[common], help="synthesise a pseudo-speech corpus")
    p.add_argument("--n", type=int, default=20, help="number of utterances")
    p.add_argument("--out", required=True)

    p = sub.add_parser("mix", parents=[common], help="mix clean speech with noise on an SNR grid")
    p.add_argument("--clean-dir", required=True)
    p.add_argument("--noise", nargs="+", default=["white"],
                   help="noise kinds (white, speech_shaped, babble_synth, car_synth) or WAV paths")
    p.add_argument("--snr-grid", default="train", help="'train' (-2..14 dB), 'test' (-5,0,5) or e.g. '0,5,10'")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model on a mixture manifest")
    _model_flags(p)
    p.add_argument("--data", help="manifest.jsonl from 'mix'")
    p.add_argument("--val-data", help="validation manifest (default: training set)")
    p.add_argument("--resume", help="checkpoint (last.npz) to continue from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--loss-alpha", type=float, help="weight of the spectral magnitude L1 term")
    p.add_argument("--loss-mode", choices=("combined", "waveform", "spectral"))
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.add_argument("--out", help="run directory (checkpoints, metrics.csv)")

    p = sub.add_parser("enhance", parents=[common], help="enhance WAV files with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", required=True, help="WAV file or directory")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parents=[common], help="score noisy (and enhanced) audio per condition")
    p.add_argument("--ckpt", help="checkpoint; without it only the unprocessed mixtures are scored")
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--seen-kinds", nargs="*", default=None, help="noise kinds seen in training")
    p.add_argument("--out", required=True)

    p = sub.add_parser("electrodogram", parents=[common], help="ACE electrodogram (CSV + PNG) of a WAV")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocode", action="store_true", help="also write a noise-vocoded WAV")
    p.add_argument("--n-maxima", type=int, default=8)
    p.add_argument("--channel-rate", type=float, default=900.0)
    p.add_argument("--presentation-rms", type=float, default=None,
                   help="scale the input to this RMS before analysis (fixed front-end gain)")
    p.add_argument("--width", type=int, default=800, help="PNG width in pixels")
    p.add_argument("--height", type=int, default=400, help="PNG height in pixels")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient audit")
    p.add_argument("--module", required=True, help="module id or 'all'")
    p.add_argument("--dims", help="overrides such as 'd=4,T=6,P=4'")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out")

    p = sub.add_parser("params", parents=[common], help="per-layer parameter table and base/l ratio")
    _model_flags(p)
    p.set_defaults(preset="reference")
    p.add_argument("--out")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gradcheck":
            from .gradaudit import MODULES
            if args.module != "all" and args.module not in MODULES:
                raise CliError(f"unknown module {args.module!r}; choose from {', '.join(MODULES)} or all",
                               EXIT_CONFIG)
        if args.print_config:
            if hasattr(args, "preset"):
                print(json.dumps(resolve_config(args), indent=2, sort_keys=True))
            else:
                cfg = {k: v for k, v in vars(args).items() if k not in ("argv", "print_config", "verbose")}
                print(json.dumps(cfg, indent=2, sort_keys=True, default=str))
            return EXIT_OK
        if args.command == "train" and not args.data:
            raise CliError("train needs --data", EXIT_CONFIG)
        if args.workers < 1:
            raise CliError("--workers must be >= 1", EXIT_CONFIG)
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (OSError, AudioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
