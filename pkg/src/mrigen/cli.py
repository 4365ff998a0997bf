"""Command-line entry point: ``mrigen <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error.
Every command writes ``run_manifest.json`` at the root of its output
directory before starting work.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import difflib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .errors import InvalidInput, NumericError
from .phantom import FieldStrength, Modality, PhantomGrid, generate_phantom, retain_head_slices

log = logging.getLogger("mrigen")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST_NAME = "run_manifest.json"
DREAMBOOTH_DEFAULTS = dict(learning_rate=5e-6, max_steps=400, batch_size=1, grad_accum_steps=1,
                           lr_schedule="constant")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        hint = ""
        if "invalid choice" in message and self._subparsers is not None:
            bad = message.split("'")[1] if "'" in message else ""
            close = difflib.get_close_matches(bad, COMMANDS, n=1)
            hint = f" (did you mean '{close[0]}'?)" if close else ""
        elif "unrecognized arguments" in message:
            bad = message.split(":", 1)[1].split()[0]
            # leftover flags surface at the top level, so search subcommand options too
            parsers = [self] + [p for a in self._actions if isinstance(a, argparse._SubParsersAction)
                                for p in a.choices.values()]
            opts = sorted({o for p in parsers for a in p._actions for o in a.option_strings})
            close = difflib.get_close_matches(bad, opts, n=1)
            hint = f" (did you mean '{close[0]}'?)" if close else ""
        raise UsageError(f"{self.prog}: {message}{hint}")


# ------------------------------------------------------------ run manifest

def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def _write_run_manifest(out_dir: Path, command, argv, config_path, config: RunConfig | None,
                        seed, started, finished=None):
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = None
    if config is not None:
        snapshot = json.loads(json.dumps(config.__dict__))
        (out_dir / "config.snapshot").write_text(config.dumps())
    manifest = {
        "command": command,
        "argv": list(argv),
        "config_path": str(config_path) if config_path else None,
        "config": snapshot,
        "seed": seed,
        "output_dir": str(out_dir),
        "version": __version__,
        "started": started,
        "finished": finished,
    }
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def replay_argv(manifest_path) -> list[str]:
    """Argument vector that re-runs the command recorded in a run manifest."""
    return json.loads(Path(manifest_path).read_text())["argv"]


def _determinism(enabled: bool):
    import torch

    if enabled:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


# ---------------------------------------------------------------- helpers

def _resolve_config(args, defaults=None) -> RunConfig:
    base = RunConfig(**(defaults or {}))
    if args.config:
        base = base.merged(**load_config(args.config).__dict__)
    flags = {k: getattr(args, k, None) for k in RunConfig.__dataclass_fields__}
    return base.merged(**flags)


def _add_config_flags(p):
    p.add_argument("--config", help="key = value run config file")
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--grad-accum-steps", type=int)
    p.add_argument("--lr-schedule", choices=["constant", "cosine"])
    p.add_argument("--seed", type=int)
    p.add_argument("--cond-dropout-prob", type=float)
    p.add_argument("--lambda-prior", type=float)
    p.add_argument("--guidance-scale", type=float)
    p.add_argument("--schedule-T", dest="schedule_T", type=int)
    p.add_argument("--beta-start", type=float)
    p.add_argument("--beta-end", type=float)
    p.add_argument("--precision", choices=["single", "double"])
    p.add_argument("--no-determinism", action="store_true", help="allow nondeterministic kernels")


def _require_seed(cfg: RunConfig, args):
    if cfg.seed is None and not args.no_determinism:
        raise UsageError("a seed is required in determinism mode (--seed or config 'seed')")


def _schedule(cfg: RunConfig):
    from .diffusion import make_schedule

    return make_schedule(cfg.schedule_T, cfg.beta_start, cfg.beta_end)


def _load_pairs(manifest, skip_errors=False):
    from .imageio import ingest_manifest

    pairs = ingest_manifest(manifest, skip_errors=skip_errors)
    if not pairs:
        raise InvalidInput(f"{manifest}: no usable entries")
    return pairs


def _image_name(meta, index):
    subject = meta.subject_id or "anon"
    return f"{meta.field.value}_{meta.modality.value}_s{meta.slice_index:02d}_{subject}_{index:05d}"


# ---------------------------------------------------------------- commands

def cmd_phantom_gen(args, argv):
    from .imageio import manifest_record, write_manifest, write_pgm, write_png

    out = Path(args.out)
    seed = args.seed
    _write_run_manifest(out, "phantom-gen", argv, None, None, seed, _now())
    fields = [FieldStrength(f) for f in args.fields.split(",")]
    modalities = [Modality(m) for m in args.modalities.split(",")]
    subjects = [f"{args.subject_prefix}{i:03d}" for i in range(args.subjects)]
    grid = PhantomGrid(size=args.size, subject_variation=args.subject_variation, subjects=subjects)
    records = []
    for i, spec in enumerate(grid.specs(args.per_class, seed=seed, fields=fields, modalities=modalities)):
        img = generate_phantom(spec)
        name = _image_name(spec.meta, i)
        if args.format in ("png", "both"):
            write_png(out / f"{name}.png", img)
        if args.format in ("pgm", "both"):
            write_pgm(out / f"{name}.pgm", img)
        ext = "png" if args.format != "pgm" else "pgm"
        records.append(manifest_record(f"{name}.{ext}", spec.meta))
    write_manifest(out / "manifest.jsonl", records)
    _write_run_manifest(out, "phantom-gen", argv, None, None, seed, _now(), _now())
    print(f"wrote {len(records)} images to {out}")


def cmd_preprocess(args, argv):
    from .imageio import manifest_record, write_manifest, write_png

    out = Path(args.out)
    started = _now()
    _write_run_manifest(out, "preprocess", argv, None, None, None, started)
    pairs = _load_pairs(args.manifest, args.skip_errors)
    if args.retain:
        volumes: dict = {}
        for img, meta in pairs:
            volumes.setdefault((meta.subject_id, meta.field, meta.modality), []).append((img, meta))
        pairs = [p for vol in volumes.values() for p in retain_head_slices(vol, args.retain)]
    records = []
    for i, (img, meta) in enumerate(pairs):
        name = f"{_image_name(meta, i)}.png"
        write_png(out / name, img)
        records.append(manifest_record(name, meta))
    write_manifest(out / "manifest.jsonl", records)
    _write_run_manifest(out, "preprocess", argv, None, None, None, started, _now())
    print(f"wrote {len(records)} images to {out}")


def _dataset(pairs, identifier=None):
    from .prompts import build_prompt
    from .training import DiffusionDataset

    images = np.stack([img for img, _ in pairs])
    prompts = [build_prompt(meta, identifier) for _, meta in pairs]
    return DiffusionDataset.from_arrays(images, prompts)


def cmd_train(args, argv):
    from .checkpoint import load_checkpoint, save_checkpoint
    from .net import UNet, UNetConfig

    cfg = _resolve_config(args)
    _require_seed(cfg, args)
    out = Path(args.out)
    started = _now()
    _write_run_manifest(out, "train", argv, args.config, cfg, cfg.seed, started)
    _determinism(not args.no_determinism)
    pairs = _load_pairs(args.data)
    size = pairs[0][0].shape[0]
    if args.init_ckpt:
        model = load_checkpoint(args.init_ckpt)
    else:
        model = UNet(UNetConfig(image_size=size), seed=cfg.seed or 0)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "metrics").mkdir(exist_ok=True)
    from .training import train

    model, curve = train(model, _dataset(pairs), _schedule(cfg), cfg.train_config(),
                         checkpoint_path=out / "checkpoints" / "last_finite.bin",
                         log_every=args.log_every)
    save_checkpoint(model, out / "checkpoints" / "model.bin")
    curve.to_csv(out / "metrics" / "loss.csv")
    _write_run_manifest(out, "train", argv, args.config, cfg, cfg.seed, started, _now())
    if len(curve):
        print(f"final loss {curve.losses[-1]:.4f}; checkpoint {out / 'checkpoints' / 'model.bin'}")


def cmd_dreambooth(args, argv):
    from .checkpoint import load_checkpoint, save_checkpoint
    from .training import train_dreambooth

    cfg = _resolve_config(args, DREAMBOOTH_DEFAULTS)
    _require_seed(cfg, args)
    out = Path(args.out)
    started = _now()
    _write_run_manifest(out, "dreambooth", argv, args.config, cfg, cfg.seed, started)
    _determinism(not args.no_determinism)
    model = load_checkpoint(args.ckpt)
    images = np.stack([img for img, _ in _load_pairs(args.instance)])
    model, curve = train_dreambooth(model, images, args.identifier, args.class_prompt, _schedule(cfg),
                                    cfg.train_config(), lambda_prior=cfg.lambda_prior)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "metrics").mkdir(exist_ok=True)
    save_checkpoint(model, out / "checkpoints" / "model.bin")
    curve.to_csv(out / "metrics" / "loss.csv")
    _write_run_manifest(out, "dreambooth", argv, args.config, cfg, cfg.seed, started, _now())
    print(f"checkpoint {out / 'checkpoints' / 'model.bin'}")


def cmd_sample(args, argv):
    from .checkpoint import load_checkpoint
    from .diffusion import sample_ddim, sample_ddpm
    from .imageio import write_image
    from .net import tokenize

    cfg = _resolve_config(args)
    _require_seed(cfg, args)
    out = Path(args.out)
    many = args.n > 1
    out_dir = out if many else out.parent
    started = _now()
    _write_run_manifest(out_dir, "sample", argv, args.config, cfg, cfg.seed, started)
    _determinism(not args.no_determinism)
    tokenize(args.prompt)
    model = load_checkpoint(args.ckpt)
    model.eval()
    schedule = _schedule(cfg)
    size = model.config.image_size
    if args.sampler == "ddpm":
        imgs = sample_ddpm(model, args.prompt, schedule, cfg.seed or 0, cfg.guidance_scale,
                           n=args.n, image_size=size)
    else:
        imgs = sample_ddim(model, args.prompt, schedule, args.steps, args.eta, cfg.seed or 0,
                           cfg.guidance_scale, n=args.n, image_size=size)
    if many:
        (out / "samples").mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(imgs):
            write_image(out / "samples" / f"sample_{i:04d}.png", img)
    else:
        write_image(out, imgs[0])
    _write_run_manifest(out_dir, "sample", argv, args.config, cfg, cfg.seed, started, _now())
    print(f"wrote {args.n} sample(s) to {out}")


def _update_metrics(out: Path, **fields):
    path = out / "metrics" / "metrics.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    data = json.loads(path.read_text()) if path.exists() else {}
    data.update(fields)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return data


def cmd_eval_fid(args, argv):
    from .imageio import load_image_dir
    from .metrics import (FileEmbedder, TinyConvEmbedder, embed_images, fid, gaussian_stats,
                          read_features, write_features)

    out = Path(args.out)
    started = _now()
    _write_run_manifest(out, "eval-fid", argv, None, None, args.embed_seed, started)
    real, gen = load_image_dir(args.real), load_image_dir(args.gen)
    emb = TinyConvEmbedder(seed=args.embed_seed)
    (out / "metrics").mkdir(parents=True, exist_ok=True)
    write_features(out / "metrics" / "features_real.bin", embed_images(real, emb))
    write_features(out / "metrics" / "features_gen.bin", embed_images(gen, emb))
    # score the stored (float32) features so the report is recomputable from the files
    fr = read_features(out / "metrics" / "features_real.bin")
    fg = read_features(out / "metrics" / "features_gen.bin")
    fields = {"fid_tinyconv": fid(gaussian_stats(fr), gaussian_stats(fg)),
              "n_images": int(len(gen)), "seed": args.embed_seed,
              "experiment": args.experiment, "config": args.label}
    if args.features_real and args.features_gen:
        ext_r = embed_images(real, FileEmbedder(args.features_real))
        ext_g = embed_images(gen, FileEmbedder(args.features_gen))
        fields["fid_external"] = fid(gaussian_stats(ext_r), gaussian_stats(ext_g))
    data = _update_metrics(out, **fields)
    _write_run_manifest(out, "eval-fid", argv, None, None, args.embed_seed, started, _now())
    print(f"fid_tinyconv {data['fid_tinyconv']:.6g}")
    if "fid_external" in fields:
        print(f"fid_external {data['fid_external']:.6g}")


def cmd_eval_msssim(args, argv):
    from .imageio import load_image_dir
    from .metrics import MsSsimWeights, pairwise_diversity

    out = Path(args.out)
    started = _now()
    _write_run_manifest(out, "eval-msssim", argv, None, None, args.seed, started)
    images = load_image_dir(args.images)
    rep = pairwise_diversity(list(images), args.pairs, args.seed, MsSsimWeights.for_size(min(images.shape[1:])))
    data = _update_metrics(out, ms_ssim_diversity=rep.mean, n_pairs=len(rep.pairs), seed=args.seed,
                           n_images=int(len(images)), experiment=args.experiment, config=args.label)
    with open(out / "metrics" / "msssim_pairs.csv", "w") as fh:
        fh.write("i,j,ms_ssim\n")
        for (i, j), v in zip(rep.pairs, rep.values):
            fh.write(f"{i},{j},{float(v)!r}\n")
    _write_run_manifest(out, "eval-msssim", argv, None, None, args.seed, started, _now())
    print(f"ms_ssim_diversity {data['ms_ssim_diversity']:.4f}")


def cmd_classify(args, argv):
    from .classify import HeadConfig, labeled, run_experiment
    from .metrics import TinyConvEmbedder

    out = Path(args.out)
    seeds = [int(s) for s in args.seeds.split(",")]
    started = _now()
    _write_run_manifest(out, "classify", argv, None, None, seeds, started)
    real = labeled(_load_pairs(args.real), "real_low")
    alt = labeled(_load_pairs(args.alt), "real_high")
    synth = labeled(_load_pairs(args.synthetic), "synthetic")
    test = labeled(_load_pairs(args.test), "real_low")
    extractor = TinyConvEmbedder(seed=args.embed_seed)
    table = run_experiment(real, alt, synth, test, seeds, extractor,
                           HeadConfig(learning_rate=args.learning_rate, epochs=args.epochs))
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    table.write_csv(reports / "comparison.csv")
    table.write_confusions(reports / "confusions.csv")
    write_classification_json(reports / "classification.json", table, args.experiment)
    (reports / "comparison.txt").write_text(table.render() + "\n")
    _write_run_manifest(out, "classify", argv, None, None, seeds, started, _now())
    print(table.render())


def write_classification_json(path, table, experiment):
    from .classify import TRAINING_SETS

    doc = {
        "experiment": experiment,
        "rows": [{"train_set": name, "seed": seed, "confusion": r.confusion.tolist(),
                  "accuracy": r.accuracy, "precision": r.precision, "recall": r.recall, "f1": r.f1}
                 for name, seed, r in table.rows],
        "mean": {name: table.mean(name) for name in TRAINING_SETS if table.reports(name)},
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def cmd_report(args, argv):
    from .reporting import collect_runs, render_csv, render_text

    out = Path(args.out) if args.out else None
    if out:
        _write_run_manifest(out, "report", argv, None, None, None, _now())
    rows, problems = collect_runs(args.runs)
    for p in problems:
        print(f"warning: {p}", file=sys.stderr)
    if not rows:
        print("warning: no runs to report", file=sys.stderr)
    text = render_text(rows)
    print(text)
    if out:
        (out / "reports").mkdir(parents=True, exist_ok=True)
        (out / "reports" / "report.txt").write_text(text + "\n")
        (out / "reports" / "report.csv").write_text(render_csv(rows))
    if problems and args.strict:
        return EXIT_DATA
    return EXIT_OK


# ------------------------------------------------------------------ parser

COMMANDS = ("phantom-gen", "preprocess", "train", "dreambooth", "sample", "eval-fid",
            "eval-msssim", "classify", "report")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mrigen", description="Text-prompted MRI phantom generation toolkit.",
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("phantom-gen", help="write a grid of synthetic phantom slices")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--subject-variation", type=float, default=0.0)
    p.add_argument("--subjects", type=int, default=16)
    p.add_argument("--subject-prefix", default="subj")
    p.add_argument("--fields", default="0.3T,3T")
    p.add_argument("--modalities", default="T1,T2,FLAIR")
    p.add_argument("--format", choices=["png", "pgm", "both"], default="png")
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("preprocess", help="normalize/crop manifest entries into 8-bit PNGs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--retain", type=int, default=0, help="keep the first K slices per volume")
    p.add_argument("--skip-errors", action="store_true")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the denoiser on a manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init-ckpt")
    p.add_argument("--log-every", type=int, default=100)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("dreambooth", help="DreamBooth fine-tuning with prior preservation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--instance", required=True, help="manifest of instance images")
    p.add_argument("--identifier", required=True)
    p.add_argument("--class-prompt", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_dreambooth)

    p = sub.add_parser("sample", help="generate images from a prompt")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--out", required=True, help="image path, or directory when --n > 1")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--sampler", choices=["ddim", "ddpm"], default="ddim")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--eta", type=float, default=1.0, help="0 = deterministic DDIM, 1 = stochastic")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sample)

    for name, helptext in (("eval-fid", "FID between two image directories"),
                           ("eval-msssim", "pairwise MS-SSIM diversity of an image directory")):
        p = sub.add_parser(name, help=helptext)
        if name == "eval-fid":
            p.add_argument("--real", required=True)
            p.add_argument("--gen", required=True)
            p.add_argument("--features-real", help="external feature file for the real set")
            p.add_argument("--features-gen", help="external feature file for the generated set")
            p.add_argument("--embed-seed", type=int, default=0)
            p.set_defaults(func=cmd_eval_fid)
        else:
            p.add_argument("--images", required=True)
            p.add_argument("--pairs", type=int, default=100)
            p.add_argument("--seed", type=int, default=0)
            p.set_defaults(func=cmd_eval_msssim)
        p.add_argument("--out", default="eval")
        p.add_argument("--experiment", default="run")
        p.add_argument("--label", default="", help="configuration label for reports")

    p = sub.add_parser("classify", help="frozen-backbone modality classification experiment")
    p.add_argument("--real", required=True)
    p.add_argument("--alt", required=True, help="alternate-domain real manifest")
    p.add_argument("--synthetic", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--learning-rate", type=float, default=5e-4)
    p.add_argument("--embed-seed", type=int, default=0)
    p.add_argument("--experiment", default="classification")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("report", help="merge run directories into one table")
    p.add_argument("runs", nargs="*")
    p.add_argument("--out")
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_report)

    parser.epilog = "commands:\n" + "\n".join(
        "  " + sp.format_usage().replace("usage: ", "").strip() for sp in sub.choices.values())
    return parser


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        code = args.func(args, argv)
    except UsageError as exc:
        print(f"mrigen {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"mrigen {args.command}: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidInput, OSError, ValueError) as exc:
        print(f"mrigen {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK if code is None else code


def main():
    sys.exit(dispatch())
