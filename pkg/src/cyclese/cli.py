"""Command-line entry point: ``cyclese <subcommand> [flags]``.

Subcommands: synth, extract, train, enhance, evaluate, gradcheck. Every flag
may also come from a ``--config`` file of ``key=value`` lines (keys are flag
names with or without the leading dashes; command-line flags win). Logs go
to stderr, tables and produced paths to stdout.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import corpus as C
from . import features as feat
from . import trainers as T
from .errors import ConfigError, CycleSEError, NumericError
from .losses import AcseWeights, CseWeights

log = logging.getLogger("cyclese")

PAPER = "paper"
TOOLKIT = "toolkit"


def _d(kind):
    return f"(default: %(default)s; {kind})"


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _csv_floats(s):
    return tuple(float(x) for x in str(s).split(",") if x.strip())


def _csv_ints(s):
    return tuple(int(x) for x in str(s).split(",") if x.strip())


def _csv_strs(s):
    return tuple(x.strip() for x in str(s).split(",") if x.strip())


def _opt_float(s):
    return None if str(s).lower() in ("", "none", "-") else float(s)


def _add_synth(sub):
    p = sub.add_parser("synth", help="generate a synthetic corpus (features + manifests)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--kind", choices=("parallel", "unparallel"), default="parallel", help=_d(TOOLKIT))
    p.add_argument("--n-utterances", type=int, default=200, help="training utterances " + _d(TOOLKIT))
    p.add_argument("--n-heldout", type=int, default=40, help="held-out parallel utterances " + _d(TOOLKIT))
    p.add_argument("--min-duration", type=float, default=1.0, help="seconds " + _d(TOOLKIT))
    p.add_argument("--max-duration", type=float, default=3.0, help="seconds " + _d(TOOLKIT))
    p.add_argument("--sample-rate", type=int, default=16000, help="Hz " + _d(TOOLKIT))
    p.add_argument("--snr-low", type=float, default=0.0, help="dB " + _d(TOOLKIT))
    p.add_argument("--snr-high", type=float, default=20.0, help="dB " + _d(TOOLKIT))
    p.add_argument("--noise-kinds", type=_csv_strs, default=",".join(C.NOISE_KINDS),
                   help="comma-separated subset of white,pink,lowpass-rumble " + _d(TOOLKIT))
    p.add_argument("--seed", type=int, default=0, help=_d(TOOLKIT))
    p.set_defaults(func=cmd_synth)


def _add_fbank_flags(p):
    p.add_argument("--frame-length-ms", type=float, default=25.0, help=_d(TOOLKIT))
    p.add_argument("--frame-hop-ms", type=float, default=10.0, help=_d(TOOLKIT))
    p.add_argument("--fft-size", type=int, default=None, help="default: next power of two >= window; " + TOOLKIT)
    p.add_argument("--fmin-hz", type=float, default=0.0, help=_d(TOOLKIT))
    p.add_argument("--fmax-hz", type=float, default=None, help="default: Nyquist; " + TOOLKIT)
    p.add_argument("--delta-window", type=int, default=2, help=_d(TOOLKIT))


def _add_extract(sub):
    p = sub.add_parser("extract", help="29-dim log-mel + 87-dim augmented features for a WAV directory")
    p.add_argument("--wav-dir", required=True)
    p.add_argument("--out", required=True, help="output directory")
    _add_fbank_flags(p)
    p.set_defaults(func=cmd_extract)


def _add_train(sub):
    p = sub.add_parser("train", help="train baseline, CSE or ACSE models")
    p.add_argument("--regime", choices=("baseline", "cse", "cse-forward", "acse"), default="cse", help=_d(TOOLKIT))
    p.add_argument("--train", required=True,
                   help="parallel manifest (baseline/cse) or noisy-set manifest (acse)")
    p.add_argument("--clean", help="clean-set manifest (acse only)")
    p.add_argument("--heldout", help="parallel manifest for per-epoch held-out MSE")
    p.add_argument("--checkpoint", required=True, help="checkpoint path (written after every epoch)")
    p.add_argument("--log", help="training log path (one tab-separated line per epoch)")
    p.add_argument("--resume", action="store_true", help="continue from --checkpoint")
    p.add_argument("--stop-after", type=int, default=None, help="stop after this many epochs in this call")
    p.add_argument("--preset", choices=("paper", "desk"), default="paper",
                   help="desk: reduced networks and larger step for CPU-minute runs " + _d(TOOLKIT))
    p.add_argument("--stage-epochs", type=_csv_ints, default="5,5,10,10",
                   help="CSE stages: L_NC, L_CN, forward cycle, full " + _d(TOOLKIT))
    p.add_argument("--baseline-epochs", type=int, default=None,
                   help="default: sum of --stage-epochs; " + TOOLKIT)
    p.add_argument("--init-epochs", type=int, default=5, help="ACSE initialization " + _d(TOOLKIT))
    p.add_argument("--joint-epochs", type=int, default=20, help="ACSE joint training " + _d(TOOLKIT))
    p.add_argument("--lambdas", type=_csv_floats, default="0.6,0.4,1.4",
                   help="CSE weights lambda1..3 " + _d(PAPER))
    p.add_argument("--alphas", type=_csv_floats, default="1.0,8.0,8.0,0.5,0.5",
                   help="ACSE weights alpha1..5 " + _d(PAPER))
    p.add_argument("--learning-rate", type=float, default=None,
                   help=f"default: {T.PAPER_LEARNING_RATE} ({PAPER}); "
                        f"{T.DESK_PRESET['learning_rate']} with --preset desk ({TOOLKIT})")
    p.add_argument("--momentum", type=float, default=T.PAPER_MOMENTUM, help=_d(PAPER))
    p.add_argument("--clip", type=_opt_float, default=None, help="max gradient L2 norm per network " + _d(TOOLKIT))
    p.add_argument("--hidden", type=int, default=None,
                   help=f"LSTM units; default {T.PAPER_HIDDEN} ({PAPER}), {T.DESK_PRESET['hidden']} with --preset desk")
    p.add_argument("--proj", type=int, default=None,
                   help=f"projection dims; default {T.PAPER_PROJ} ({PAPER}), {T.DESK_PRESET['proj']} with --preset desk")
    p.add_argument("--layers", type=int, default=T.PAPER_LAYERS, help=_d(PAPER))
    p.add_argument("--disc-hidden", type=int, default=None,
                   help=f"discriminator units; default {T.PAPER_DISC_HIDDEN} ({PAPER}), "
                        f"{T.DESK_PRESET['disc_hidden']} with --preset desk")
    p.add_argument("--eval-every", type=int, default=1, help=_d(TOOLKIT))
    p.add_argument("--seed", type=int, default=0, help=_d(TOOLKIT))
    p.set_defaults(func=cmd_train)


def _add_enhance(sub):
    p = sub.add_parser("enhance", help="apply F from a checkpoint to raw 87-dim noisy features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", help="noisy FTR1 file")
    p.add_argument("--output", help="enhanced FTR1 file")
    p.add_argument("--manifest", help="enhance every noisy stream of a manifest instead")
    p.add_argument("--out-dir", help="directory for --manifest mode (writes enhanced.tsv)")
    p.set_defaults(func=cmd_enhance)


def _add_evaluate(sub):
    p = sub.add_parser("evaluate", help="frame MSE / segmental SNR / LSD against clean references")
    p.add_argument("--enhanced", required=True, help="manifest whose clean column holds enhanced features")
    p.add_argument("--reference", required=True, help="parallel manifest with clean and noisy streams")
    p.set_defaults(func=cmd_evaluate)


def _add_gradcheck(sub):
    p = sub.add_parser("gradcheck", help="finite-difference check of every network and loss")
    p.add_argument("--seed", type=int, default=0, help=_d(TOOLKIT))
    p.add_argument("--epsilon", type=float, default=1e-5, help=_d(TOOLKIT))
    p.add_argument("--tolerance", type=float, default=1e-4, help=_d(TOOLKIT))
    p.set_defaults(func=cmd_gradcheck)


def build_parser():
    ap = argparse.ArgumentParser(prog="cyclese", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="key=value file supplying flag defaults")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)
    for add in (_add_synth, _add_extract, _add_train, _add_enhance, _add_evaluate, _add_gradcheck):
        add(sub)
    return ap


def read_config_file(path):
    """``key=value`` lines; ``#`` starts a comment. Keys use flag spelling."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            out[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return out


def _apply_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return parser.parse_args(argv)
    values = read_config_file(known.config)
    # defaults go to the subparser actually selected; argparse converts
    # string defaults with each flag's type
    ns = parser.parse_args(argv)
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sp = sub.choices[ns.command]
    dests = {a.dest: a for a in sp._actions}
    unknown = sorted(set(values) - set(dests))
    if unknown:
        raise ConfigError(f"unknown config keys for {ns.command}: {', '.join(unknown)}")
    converted = {}
    for k, v in values.items():
        action = dests[k]
        if isinstance(action, argparse._StoreTrueAction):
            converted[k] = v.lower() in ("1", "true", "yes", "on")
        else:
            converted[k] = v
    sp.set_defaults(**converted)
    return parser.parse_args(argv)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_synth(args):
    cfg = C.SynthConfig(n_utterances=args.n_utterances, n_heldout=args.n_heldout,
                        min_duration=args.min_duration, max_duration=args.max_duration,
                        sample_rate=args.sample_rate, snr_low=args.snr_low, snr_high=args.snr_high,
                        noise_kinds=args.noise_kinds, seed=args.seed)
    out = Path(args.out)
    if args.kind == "unparallel" and args.n_utterances < 2:
        raise ConfigError("unparalleled corpora need --n-utterances >= 2")
    paths = []
    if args.kind == "parallel":
        C.build_parallel(cfg, out, "train")
        paths.append(out / "train.tsv")
    else:
        C.build_unparallel(cfg, out, "train")
        paths += [out / "train-noisy.tsv", out / "train-clean.tsv"]
    if args.n_heldout > 0:
        C.build_parallel(cfg, out, "heldout")
        paths.append(out / "heldout.tsv")
    for p in paths:
        print(p)
    return 0


def cmd_extract(args):
    fb = feat.FbankConfig(frame_length_ms=args.frame_length_ms, frame_hop_ms=args.frame_hop_ms,
                          fft_size=args.fft_size, fmin_hz=args.fmin_hz, fmax_hz=args.fmax_hz)
    if args.delta_window < 1:
        raise ConfigError("--delta-window must be at least 1")
    wavs = sorted(Path(args.wav_dir).glob("*.wav"))
    if not wavs:
        raise ConfigError(f"no .wav files in {args.wav_dir}")
    waves = [feat.read_wav(p) for p in wavs]
    for w in waves:
        fb.resolve(w.sample_rate)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    statics, augs = [], []
    for path, w in zip(wavs, waves):
        s = feat.log_mel(w, fb)
        a = feat.append_deltas(s, args.delta_window)
        feat.write_features(out / f"{path.stem}.static.ftr", s)
        feat.write_features(out / f"{path.stem}.augmented.ftr", a)
        statics.append(s)
        augs.append(a)
        print(out / f"{path.stem}.static.ftr")
        print(out / f"{path.stem}.augmented.ftr")
    feat.write_stats(out / "static.nrm", feat.compute_global_stats(statics))
    feat.write_stats(out / "augmented.nrm", feat.compute_global_stats(augs))
    print(out / "static.nrm")
    print(out / "augmented.nrm")
    return 0


_REGIMES = {"baseline": "baseline", "cse": "cse_full", "cse-forward": "cse_forward", "acse": "acse"}


def _train_config(args):
    desk = args.preset == "desk"

    def pick(value, key, paper):
        if value is not None:
            return value
        return T.DESK_PRESET[key] if desk else paper

    if len(args.lambdas) != 3:
        raise ConfigError("--lambdas needs three values")
    if len(args.alphas) != 5:
        raise ConfigError("--alphas needs five values")
    return T.TrainConfig(
        regime=_REGIMES[args.regime], stage_epochs=args.stage_epochs,
        baseline_epochs=args.baseline_epochs, acse_init_epochs=args.init_epochs,
        acse_joint_epochs=args.joint_epochs, seed=args.seed,
        cse_weights=CseWeights(*args.lambdas), acse_weights=AcseWeights(*args.alphas),
        learning_rate=pick(args.learning_rate, "learning_rate", T.PAPER_LEARNING_RATE),
        momentum=args.momentum, clip=args.clip,
        hidden=pick(args.hidden, "hidden", T.PAPER_HIDDEN), proj=pick(args.proj, "proj", T.PAPER_PROJ),
        layers=args.layers, disc_hidden=pick(args.disc_hidden, "disc_hidden", T.PAPER_DISC_HIDDEN),
        eval_every=args.eval_every, log_path=args.log,
    )


def cmd_train(args):
    # validate everything before any file is touched
    if args.regime == "acse" and not args.clean:
        raise ConfigError("--regime acse needs --clean")
    if args.regime != "acse" and args.clean:
        raise ConfigError("--clean is only used with --regime acse")
    if args.stop_after is not None and args.stop_after < 1:
        raise ConfigError("--stop-after must be at least 1")
    ckpt = Path(args.checkpoint)
    if args.resume and not ckpt.is_file():
        raise ConfigError(f"--resume given but {ckpt} does not exist")
    cfg = _train_config(args)
    if args.resume:
        state = T.load_state(ckpt)
        if state.config.regime != cfg.regime:
            raise ConfigError(f"checkpoint holds a {state.config.regime} run, not {cfg.regime}")
        if args.log and state.config.log_path != args.log:
            state.config = dataclasses.replace(state.config, log_path=args.log)
    else:
        state = T.TrainState.fresh(cfg)
    train = C.read_manifest(args.train)
    if cfg.regime == "acse":
        train = (train, C.read_manifest(args.clean))
    heldout = C.read_manifest(args.heldout) if args.heldout else None
    if ckpt.parent and not ckpt.parent.exists():
        raise ConfigError(f"checkpoint directory {ckpt.parent} does not exist")

    log.info("training %s for %d epochs (starting at epoch %d)", cfg.regime,
             state.config.total_epochs, state.epoch)
    T.run(state, train, heldout, stop_after=args.stop_after, checkpoint_path=ckpt)
    if state.epoch == 0 or not ckpt.exists():
        T.save_checkpoint(ckpt, state)
    print(ckpt)
    return 0


def cmd_enhance(args):
    single = args.input is not None or args.output is not None
    if single == (args.manifest is not None):
        raise ConfigError("use either --input/--output or --manifest/--out-dir")
    if single and not (args.input and args.output):
        raise ConfigError("--input and --output go together")
    if not single and not args.out_dir:
        raise ConfigError("--manifest needs --out-dir")
    state = T.load_state(args.checkpoint)
    if single:
        noisy = feat.read_features(args.input)
        feat.write_features(args.output, T.enhance_raw(state, noisy))
        print(args.output)
        return 0
    manifest = C.read_manifest(args.manifest)
    noisy = manifest.load_noisy()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for r, x in zip(manifest.records, noisy):
        rel = f"{r.id}.enhanced.ftr"
        feat.write_features(out / rel, T.enhance_raw(state, x))
        records.append(C.ManifestRecord(r.id, rel, None, r.snr_db, r.noise_kind))
    C.write_manifest(out / "enhanced.tsv", C.CorpusManifest(records, out))
    print(out / "enhanced.tsv")
    return 0


def cmd_evaluate(args):
    enhanced = C.read_manifest(args.enhanced)
    reference = C.read_manifest(args.reference)
    ref = {r.id: r for r in reference.records}
    missing = [i for i in enhanced.ids if i not in ref]
    if missing:
        raise ConfigError(f"ids missing from the reference manifest: {', '.join(missing[:5])}")
    metrics = (("mse", C.frame_mse), ("segsnr", C.segmental_snr), ("lsd", C.log_spectral_distance))
    print("id\t" + "\t".join(f"{m}\t{m}_noisy" for m, _ in metrics))
    rows = []
    for r in enhanced.records:
        e = feat.read_features(enhanced.resolve(r.clean_path))
        c = feat.read_features(reference.resolve(ref[r.id].clean_path))
        noisy_path = ref[r.id].noisy_path
        n = feat.read_features(reference.resolve(noisy_path)).static if noisy_path else None
        row = []
        for _, fn in metrics:
            row.append(fn(e, c))
            row.append(fn(n, c) if n is not None else float("nan"))
        rows.append(row)
        print(r.id + "\t" + "\t".join(f"{v:.6g}" for v in row))
    mean = np.mean(np.array(rows), axis=0)
    print("mean\t" + "\t".join(f"{v:.6g}" for v in mean))
    delta = [mean[2 * i] - mean[2 * i + 1] for i in range(len(metrics))]
    print("delta_vs_noisy\t" + "\t".join(f"{v:.6g}\t" for v in delta).rstrip("\t"))
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_all

    worst = 0.0
    print("check\tmax_rel_error\tseconds\tstatus")

    def report(name, err, secs):
        print(f"{name}\t{err:.3e}\t{secs:.1f}\t{'ok' if err < args.tolerance else 'FAIL'}", flush=True)

    results = run_all(args.seed, args.epsilon, report)
    worst = max(err for err, _ in results.values())
    return 0 if worst < args.tolerance else 1


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _apply_config(parser, argv)
    except (ConfigError, OSError) as exc:
        parser.error(str(exc))
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        log.error("numeric failure in %s: %s", exc.component, exc)
        return 3
    except CycleSEError as exc:
        log.error("%s", exc)
        return 2
    except OSError as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
