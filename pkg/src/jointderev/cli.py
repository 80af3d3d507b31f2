"""Command-line entry point: ``jointderev <subcommand> [options]``.

Every subcommand accepts ``--config FILE`` (JSON); keys in the file set
option defaults and explicit flags override them. Exit codes: 0 success,
1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import datasetio, doa_classic, nnet, roomsim, signals, training, wpe
from .metrics import circular_error, doa_report, summarize_by_t60

log = logging.getLogger("jointderev")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _emit(obj, out: str | None):
    text = obj if isinstance(obj, str) else json.dumps(obj, indent=1, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text if text.endswith("\n") else text + "\n")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _model_config(args) -> nnet.ModelConfig:
    presets = {"full": nnet.ModelConfig, "small": nnet.ModelConfig.small, "tiny": nnet.ModelConfig.tiny}
    kw = {"sigma_init": args.sigma_init, "dense_variant": args.dense}
    for name in ("d_model", "n_layers", "n_heads", "ffn_dim", "head_hidden"):
        if getattr(args, name) is not None:
            kw[name] = getattr(args, name)
    cfg = presets[args.model](**kw)
    return cfg


# --------------------------------------------------------------------------- subcommands


def cmd_simulate_rir(args):
    scene = roomsim.RoomScene(
        task=2 if args.interferer_angle is not None else 1,
        source_angle=args.angle,
        interferer_angle=args.interferer_angle,
        t60=args.t60,
        anechoic=args.anechoic,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    roles = ["target"] + (["interferer"] if args.interferer_angle is not None else [])
    summary = {"scene": scene.to_dict(), "files": {}}
    for role in roles:
        rir = roomsim.image_rir(scene, role)
        datasetio.write_tensor(out / f"rir_{role}.ntsr", rir.taps)
        summary["files"][role] = f"rir_{role}.ntsr"
        if not args.anechoic:
            summary.setdefault("t60_estimate", {})[role] = [roomsim.estimate_t60(h) for h in rir.taps]
    (out / "scene.json").write_text(json.dumps(summary["scene"], indent=1, sort_keys=True))
    _emit(summary, None)


def cmd_make_corpus(args):
    paths = datasetio.write_synthetic_corpus(args.out, args.count, args.seed, args.duration)
    _emit({"written": len(paths), "dir": str(args.out)}, None)


def cmd_synth_dataset(args):
    counts = {"tr": args.tr, "dt": args.dt, "et": args.et}
    path = datasetio.synth_dataset(args.corpus, args.out, args.task, counts, args.seed, args.jobs)
    _emit({"manifest": str(path), "entries": len(datasetio.read_manifest(path))}, None)


def cmd_featurize(args):
    wave = signals.read_wav(args.wav)
    feats = signals.extract_features(wave)
    data = feats.data
    if args.stats:
        stats = signals.FeatStats.from_dict(json.loads(Path(args.stats).read_text()))
        feats = signals.normalize(feats, stats)
        data = feats.data
    if args.downsample:
        data = signals.downsample(feats, args.dr).data
    datasetio.write_tensor(args.out, data.astype(np.float32))
    _emit({"out": args.out, "shape": list(data.shape)}, None)


def cmd_train(args):
    model_cfg = _model_config(args)
    tcfg = training.TrainConfig(
        total_steps=args.steps, peak_lr=args.lr, batch_size=args.batch_size,
        seed=args.seed, task=args.task, checkpoint_every=args.checkpoint_every,
    )
    utts, stats = datasetio.load_utterances(args.manifest, split="tr")
    if not utts:
        raise ValueError("no training utterances in manifest")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        params, model_cfg, state, manifest = datasetio.load_checkpoint(args.resume)
        stats = signals.FeatStats.from_dict(manifest["stats"]) if manifest.get("stats") else stats
    else:
        params = nnet.init_params(model_cfg, args.seed)
        state = None
    result = training.train(params, model_cfg, utts, tcfg, state, checkpoint_dir=out)
    datasetio.save_checkpoint(out / "final", params, model_cfg, result.state, tcfg, stats)
    training.write_loss_curve(result.curve, out / "loss_curve.csv")
    _emit({"checkpoint": str(out / "final"), "steps": result.state.step,
           "final_loss": result.curve[-1]["loss"] if result.curve else None}, None)


def _load_model(path):
    params, cfg, _, manifest = datasetio.load_checkpoint(path)
    stats = signals.FeatStats.from_dict(manifest["stats"]) if manifest.get("stats") else None
    task = (manifest.get("train_config") or {}).get("task", 1)
    return params, cfg, stats, task


def cmd_eval(args):
    params, cfg, stats, task = _load_model(args.checkpoint)
    utts, _ = datasetio.load_utterances(args.manifest, split=args.split, stats=stats)
    result = training.evaluate(params, cfg, utts, task)
    if args.csv:
        fields = ["mel_l2_0", "lsd_0"] + (["frame_acc"] if task == 1 else ["mel_l2_1", "lsd_1"])
        Path(args.csv).write_text(summarize_by_t60(result["records"], fields))
    _emit(result if args.records else result["report"], args.out)


def cmd_doa(args):
    entries = [e for e in datasetio.read_manifest(args.manifest) if args.split is None or e["split"] == args.split]
    if not entries:
        raise ValueError(f"no utterances in {args.manifest}")
    records = []
    if args.method == "neural":
        if not args.checkpoint:
            raise UsageError("--method neural needs --checkpoint")
        params, cfg, stats, _ = _load_model(args.checkpoint)
        utts, _ = datasetio.load_utterances(args.manifest, split=args.split, stats=stats)
        for e, u in zip(entries, utts):
            out, _ = nnet.forward(params, cfg, u["inputs"], 1)
            records.append((e, [c * 5.0 for c in training.vote_ranking(out["doa"], args.k)]))
    else:
        grid = doa_classic.steering_delays()
        for e in entries:
            wave = signals.read_wav(Path(args.manifest).parent / e["paths"]["mixture_wav"])
            top, _ = doa_classic.estimate_doa(signals.multi_stft(wave), args.method, grid, args.k)
            records.append((e, [a for a, _ in top]))
    lines = []
    for e, top in records:
        truth = e["scene"]["source_angle"]
        errs = [circular_error(a, truth) for a in top]
        lines.append({"utt_id": e["utt_id"], "method": args.method, "top5": top, "truth": truth,
                      "t60": e["t60"], "mae": errs[0], "hit@1": errs[0] == 0, "hit@5": min(errs) == 0})
    report = doa_report([r["top5"] for r in lines], [r["truth"] for r in lines], args.k)
    report["method"] = args.method
    if args.records:
        Path(args.records).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in lines))
    _emit(report, args.out)


def cmd_wpe(args):
    wave = signals.read_wav(args.input)
    if args.channels and args.channels < wave.n_channels:
        wave = signals.MultiWave(wave.samples[: args.channels], wave.sample_rate)
    cfg = wpe.WpeConfig(taps=args.taps, delay=args.delay, iterations=args.iters, multichannel=not args.per_channel)
    spec = signals.multi_stft(wave)
    out = signals.multi_istft(wpe.wpe_dereverb(spec, cfg))
    signals.write_wav(args.output, out)
    _emit({"out": args.output, "channels": out.n_channels, "samples": len(out)}, None)


def cmd_reconstruct(args):
    feats = datasetio.read_tensor(args.features).astype(np.float64)
    if args.stats:
        stats = signals.FeatStats.from_dict(json.loads(Path(args.stats).read_text()))
        if feats.ndim == 2 and feats.shape[1] != signals.N_MELS:
            feats = signals.upsample(feats, args.dr, args.channels)
        feats = signals.denormalize(signals.FeatTensor(feats, "mag"), stats).data
    elif feats.ndim == 2 and feats.shape[1] != signals.N_MELS:
        feats = signals.upsample(feats, args.dr, args.channels)
    if feats.ndim == 3:
        feats = feats[args.channel]
    feats = feats[:, : signals.N_MELS]
    x = signals.logmel_to_wave(feats, signals.mel_filterbank(), iters=args.iters)
    signals.write_wav(args.out, signals.MultiWave(x[None]))
    _emit({"out": args.out, "samples": len(x)}, None)


def cmd_plot_data(args):
    rows = []
    if args.kind == "spectrogram":
        if args.input.endswith(".wav"):
            feats = signals.extract_features(signals.read_wav(args.input)).data[args.channel, :, : signals.N_MELS]
        else:
            feats = datasetio.read_tensor(args.input).astype(np.float64)
            feats = feats[args.channel] if feats.ndim == 3 else feats
        header = ["frame"] + [f"bin{i}" for i in range(feats.shape[1])]
        rows = [[t] + [f"{v:.5f}" for v in row] for t, row in enumerate(feats)]
    else:
        with open(args.input) as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = list(reader)
    out = Path(args.out) if args.out else None
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    finally:
        if out:
            fh.close()


# --------------------------------------------------------------------------- parser


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show the default of every option, including those without help text."""

    def _format_action(self, action):
        if action.help is None and action.default not in (None, False, argparse.SUPPRESS):
            action.help = "(default: %(default)s)"
        return super()._format_action(action)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jointderev", description=__doc__.splitlines()[0],
                formatter_class=_Formatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, formatter_class=_Formatter)
        sp.add_argument("--config", help="JSON file of option defaults")
        sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(func=func)
        return sp

    sp = add("simulate-rir", cmd_simulate_rir, "image-method RIRs for one scene")
    sp.add_argument("--angle", type=float, default=0.0, help="target azimuth, degrees")
    sp.add_argument("--interferer-angle", type=float, default=None)
    sp.add_argument("--t60", type=float, default=0.6, help="seconds")
    sp.add_argument("--anechoic", action="store_true")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("make-corpus", cmd_make_corpus, "write speech-like synthetic wavs")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=20)
    sp.add_argument("--duration", type=float, default=2.0)

    sp = add("synth-dataset", cmd_synth_dataset, "render a reverberant dataset from a wav corpus")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--task", type=int, choices=(1, 2), default=1)
    sp.add_argument("--tr", type=int, default=8)
    sp.add_argument("--dt", type=int, default=0)
    sp.add_argument("--et", type=int, default=0)
    sp.add_argument("--jobs", type=int, default=1)

    sp = add("featurize", cmd_featurize, "log-mel + phase features of a wav")
    sp.add_argument("--wav", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--stats", help="JSON feature stats to normalise with")
    sp.add_argument("--downsample", action="store_true")
    sp.add_argument("--dr", type=int, default=3)
    sp.add_argument("--jobs", type=int, default=1)

    sp = add("train", cmd_train, "train the transformer")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True, help="checkpoint directory")
    sp.add_argument("--task", type=int, choices=(1, 2), default=1)
    sp.add_argument("--steps", type=int, default=75000)
    sp.add_argument("--lr", type=float, default=3e-4, help="peak learning rate")
    sp.add_argument("--batch-size", type=int, default=8)
    sp.add_argument("--checkpoint-every", type=int, default=0)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--model", choices=("full", "small", "tiny"), default="full")
    sp.add_argument("--sigma-init", type=float, default=10.0)
    sp.add_argument("--dense", action="store_true", help="densely connected layer stack")
    for name in ("d-model", "n-layers", "n-heads", "ffn-dim", "head-hidden"):
        sp.add_argument(f"--{name}", type=int, default=None)

    sp = add("eval", cmd_eval, "evaluate a checkpoint on a manifest")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", default="et")
    sp.add_argument("--out")
    sp.add_argument("--csv", help="per-T60 summary table")
    sp.add_argument("--records", action="store_true", help="include per-utterance records")
    sp.add_argument("--jobs", type=int, default=1)

    sp = add("doa", cmd_doa, "DOA estimation report")
    sp.add_argument("--method", choices=("srp-phat", "music", "neural"), required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", default=None)
    sp.add_argument("--checkpoint")
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--out")
    sp.add_argument("--records", help="JSON-lines file of per-utterance results")
    sp.add_argument("--jobs", type=int, default=1)

    sp = add("wpe", cmd_wpe, "WPE dereverberation of a wav")
    sp.add_argument("--input", "--in", dest="input", required=True)
    sp.add_argument("--output", "--out", dest="output", required=True)
    sp.add_argument("--taps", type=int, default=10)
    sp.add_argument("--delay", type=int, default=3)
    sp.add_argument("--iters", type=int, default=3)
    sp.add_argument("--channels", type=int, default=0, help="use the first N channels (0 = all)")
    sp.add_argument("--per-channel", action="store_true", help="independent single-channel WPE per channel")

    sp = add("reconstruct", cmd_reconstruct, "log-mel tensor to wav via pseudo-inverse + Griffin-Lim")
    sp.add_argument("--features", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--stats")
    sp.add_argument("--dr", type=int, default=3)
    sp.add_argument("--channels", type=int, default=4)
    sp.add_argument("--channel", type=int, default=0)
    sp.add_argument("--iters", type=int, default=60)

    sp = add("plot-data", cmd_plot_data, "CSV dumps for external plotting")
    sp.add_argument("--kind", choices=("spectrogram", "loss-curve"), required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--channel", type=int, default=0)
    sp.add_argument("--out")
    return p


def _apply_config(parser, argv):
    """Parse ``argv`` with defaults taken from ``--config``; explicit flags win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    pre.add_argument("command", nargs="?")
    known, _ = pre.parse_known_args([a for a in argv if a not in ("-v", "--verbose")])
    choices = parser._subparsers._group_actions[0].choices
    if known.config and known.command in choices:
        cfg = {k.replace("-", "_"): v for k, v in json.loads(Path(known.config).read_text()).items()}
        sub = choices[known.command]
        sub.set_defaults(**cfg)
        for action in sub._actions:
            if action.dest in cfg:
                action.required = False
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        if not argv:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        args = _apply_config(parser, argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
        args.func(args)
        return EXIT_OK
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except (ValueError, FileNotFoundError, OSError, KeyError) as exc:
        print(f"jointderev: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
