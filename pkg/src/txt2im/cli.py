"""Command-line entry point: ``txt2im <command> ...``.

Exit status is 0 on success, 1 on usage or validation errors and 2 when a run
aborts (non-finite loss and similar). Errors are reported on stderr as a single
``txt2im: error[<kind>]: <message>`` line.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Sequence

import torch

from . import config as cfgmod
from .dataset import (
    DatasetError,
    image_grid,
    load_dataset,
    load_png,
    make_synthetic_dataset,
    save_png,
    tensor_to_images,
)
from .evaluator import (
    build_style_pairs,
    default_k,
    disentangling_eval,
    evaluate_generator_agreement,
    noise_interpolation_sweep,
    sentence_interpolation_sweep,
)
from .gan_core import generate
from .style import (
    load_style,
    recover_style,
    save_style,
    style_metadata,
    style_transfer,
    train_style_encoder,
)
from .text_encoder import (
    JointEmbedding,
    load_encoder,
    save_encoder,
    train_joint_embedding,
    zero_shot_accuracy,
)
from .trainer import Regime, TrainingAborted, TrainState, load_generator, train

logger = logging.getLogger("txt2im")


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _regime(value: str) -> str:
    try:
        return Regime.parse(value).value
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _positive(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


# ---------------------------------------------------------------------------
# helpers


def _resolve_config(args, overrides: dict, default_name: str) -> cfgmod.RunConfig:
    config = cfgmod.resolve_config(args.preset, args.config, overrides, args.set)
    if args.seed is not None:
        config = cfgmod.with_seed(config, args.seed)
    if config.name == cfgmod.RunConfig.name:
        config.name = default_name
    return config


def _prepare_run(name: str) -> Path:
    path = cfgmod.run_dir(name)
    (path / "checkpoints").mkdir(parents=True, exist_ok=True)
    return path


def _checkpoint(path: str | Path, default: str = "last.pt") -> Path:
    """Accept a checkpoint file, a run directory, or ``<run>/<tag>`` for ``<run>/checkpoints/<tag>.pt``."""
    p = Path(path)
    if p.is_file():
        return p
    if p.is_dir():
        for name in (default, "last.pt"):
            if (p / "checkpoints" / name).is_file():
                return p / "checkpoints" / name
    for cand in (p.with_suffix(".pt"), p.parent / "checkpoints" / f"{p.name}.pt"):
        if cand.is_file():
            return cand
    if p.name == "best" and (p.parent / "checkpoints" / "last.pt").is_file():
        return p.parent / "checkpoints" / "last.pt"
    raise FileNotFoundError(f"no checkpoint found at {path}")


def _write_jsonl(path: Path, records: Sequence[dict]) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def _captions_from(args) -> list[str]:
    captions = list(args.caption or [])
    if args.captions_file:
        lines = [ln.strip() for ln in Path(args.captions_file).read_text(encoding="utf-8").splitlines()]
        lines = [ln for ln in lines if ln]
        if not lines:
            raise ValueError(f"caption file {args.captions_file} is empty")
        captions += lines
    if not captions:
        raise UsageError("give at least one --caption or a --captions-file")
    return captions


# ---------------------------------------------------------------------------
# commands


def cmd_make_data(args) -> int:
    out = Path(args.out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        if not args.force:
            raise ValueError(f"{out} exists and is not empty; pass --force to overwrite")
        if out.is_dir():
            shutil.rmtree(out)
        else:
            out.unlink()
    ds = make_synthetic_dataset(args.classes, args.per_class, args.resolution, args.seed)
    ds.write(out)
    print(
        f"wrote {len(ds.examples)} images of {args.classes} classes to {out} "
        f"(test classes {sorted(ds.split.test_classes)})"
    )
    return 0


def cmd_train_encoder(args) -> int:
    config = _resolve_config(args, {"name": args.name, "encoder.epochs": args.epochs}, "encoder")
    run = _prepare_run(config.name)
    config.write(run / "config.json")
    ds = load_dataset(args.data, config.encoder.resolution)
    history_path = run / "history.jsonl"
    records: list[dict] = []

    def log(record):
        records.append(record)
        _write_jsonl(history_path, records)

    model, _ = train_joint_embedding(ds.train, config.encoder, ds.test, log=log)
    save_encoder(model, run / "checkpoints" / "last.pt")
    report = {"zero_shot": zero_shot_accuracy(model, ds.test) if ds.test else None}
    (run / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"encoder saved to {run / 'checkpoints' / 'last.pt'}; zero-shot {report['zero_shot']}")
    return 0


def _default_regime(args) -> str:
    return args.regime or "gan-int-cls"


def cmd_train_gan(args) -> int:
    overrides = {"name": args.name, "trainer.epochs": args.epochs, "trainer.regime": args.regime}
    if args.encoder_mode:
        overrides["trainer.encoder_mode"] = args.encoder_mode
    config = _resolve_config(args, overrides, f"gan-{_default_regime(args)}")
    state = None
    encoder = None
    if args.resume:
        ckpt = _checkpoint(args.resume)
        if args.name is None and ckpt.parent.name == "checkpoints":
            config.name = ckpt.parent.parent.name
            run = ckpt.parent.parent
        else:
            run = _prepare_run(config.name)
        if args.regime is None:
            # resume in the checkpoint's own regime unless told otherwise
            config.trainer.regime = TrainState.load(ckpt).config.regime
        state = TrainState.load(ckpt, config.trainer)
        if state.gan_config != config.gan:
            logger.warning("resuming with the checkpoint's network shape; gan section ignored")
            config.gan = state.gan_config
    elif config.trainer.encoder_mode == "pretrained":
        if not args.encoder:
            raise UsageError("--encoder is required with encoder_mode=pretrained")
        encoder = load_encoder(_checkpoint(args.encoder))
    else:
        torch.manual_seed(config.trainer.seed)
        encoder = JointEmbedding(config.encoder)
    if not args.resume:
        run = _prepare_run(config.name)
    ds = load_dataset(args.data, config.gan.resolution)
    if encoder is not None and encoder.embed_dim != config.gan.text_dim:
        raise ValueError(f"encoder embedding size {encoder.embed_dim} != gan.text_dim {config.gan.text_dim}")
    config.write(run / "config.json")
    state, history = train(ds, config.trainer, config.gan, encoder, run_dir=run, state=state)
    print(f"trained {config.trainer.regime} to epoch {state.epoch} (step {state.step}); checkpoints in {run / 'checkpoints'}")
    return 0


def cmd_train_style(args) -> int:
    config = _resolve_config(args, {"name": args.name, "style.epochs": args.epochs}, "style")
    run = _prepare_run(config.name)
    config.write(run / "config.json")
    gan_path = _checkpoint(args.gan)
    G, encoder, meta = load_generator(gan_path)
    ds = load_dataset(args.data, G.config.resolution)
    captions = sorted({c for ex in ds.train for c in ex.captions})
    S, history = train_style_encoder(G, captions, config.style, encoder=encoder)
    _write_jsonl(run / "history.jsonl", history)
    save_style(S, run / "checkpoints" / "style.pt", meta["generator_fingerprint"], config.style, str(gan_path))
    print(f"style encoder saved to {run / 'checkpoints' / 'style.pt'}; final loss {history[-1]['style_loss']:.4f}")
    return 0


def cmd_generate(args) -> int:
    captions = _captions_from(args)
    G, encoder, _ = load_generator(_checkpoint(args.checkpoint))
    gen = torch.Generator().manual_seed(args.seed)
    z = torch.randn(len(captions) * args.count, G.config.z_dim, generator=gen)
    emb = encoder.embed_text_cached([c for c in captions for _ in range(args.count)])
    images = tensor_to_images(generate(z, emb, G))
    rows = [images[i * args.count : (i + 1) * args.count] for i in range(len(captions))]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_png(image_grid(rows), args.out)
    print(f"wrote {len(captions)}x{args.count} grid to {args.out}")
    return 0


def cmd_style_transfer(args) -> int:
    captions = _captions_from(args)
    G, encoder, meta = load_generator(_checkpoint(args.checkpoint))
    S = load_style(_checkpoint(args.style, "style.pt"), meta["generator_fingerprint"])
    rows = []
    for q in args.query:
        query = load_png(q)
        rows.append([style_transfer(query, cap, S, G, encoder) for cap in captions])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_png(image_grid(rows), args.out)
    print(f"wrote {len(rows)}x{len(captions)} style-transfer grid to {args.out}")
    return 0


def cmd_interpolate(args) -> int:
    G, encoder, _ = load_generator(_checkpoint(args.checkpoint))
    gen = torch.Generator().manual_seed(args.seed)
    rows = []
    if args.mode == "sentence":
        if not (args.caption_a and args.caption_b):
            raise UsageError("sentence interpolation needs --caption-a and --caption-b")
        emb = encoder.embed_text_cached([args.caption_a, args.caption_b])
        for _ in range(args.rows):
            z = torch.randn(1, G.config.z_dim, generator=gen)
            rows.append(tensor_to_images(sentence_interpolation_sweep(emb[0], emb[1], args.steps, z, G)))
    else:
        if not args.caption_a:
            raise UsageError("noise interpolation needs --caption-a")
        emb = encoder.embed_text_cached([args.caption_a])[0]
        for _ in range(args.rows):
            z1 = torch.randn(1, G.config.z_dim, generator=gen)
            z2 = torch.randn(1, G.config.z_dim, generator=gen)
            rows.append(tensor_to_images(noise_interpolation_sweep(emb, z1, z2, args.steps, G)))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_png(image_grid(rows), args.out)
    print(f"wrote {args.rows}x{args.steps} {args.mode} interpolation to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    config = _resolve_config(args, {"name": args.name, "eval.mode": args.mode, "eval.folds": args.folds}, "eval")
    run = _prepare_run(config.name)
    config.write(run / "config.json")
    ev = config.eval

    variants = []
    for path in args.style:
        style_path = _checkpoint(path, "style.pt")
        meta = style_metadata(style_path)
        if not meta.get("gan_checkpoint"):
            raise ValueError(f"{style_path} does not record its generator checkpoint")
        G, encoder, gmeta = load_generator(meta["gan_checkpoint"])
        S = load_style(style_path, gmeta["generator_fingerprint"])
        label = gmeta["config"]["regime"]
        taken = {v[0] for v in variants}
        i = 2
        base = label
        while label in taken:
            label = f"{base}#{i}"
            i += 1
        variants.append((label, G, encoder, S))

    resolution = variants[0][1].config.resolution
    ds = load_dataset(args.data, resolution)
    examples = ds.examples
    k = ev.k or default_k(len(examples))
    folds, _ = build_style_pairs(examples, ev.mode, k, ev.folds, ev.pairs_per_fold, ev.seed)
    encoders = {label: (lambda x, S=S: recover_style(x, S)) for label, _, _, S in variants}
    baseline_encoder = variants[0][2]
    aucs = disentangling_eval(encoders, examples, folds, text_embed=baseline_encoder.embed_text_cached)

    train_caps = sorted({c for ex in ds.train for c in ex.captions})
    test_caps = sorted({c for ex in ds.test for c in ex.captions})
    rows = []
    for label, G, encoder, _ in variants:
        row = {"variant": label, "auc": aucs[label].auc, "fold_aucs": aucs[label].fold_aucs}
        row["train_agreement"] = evaluate_generator_agreement(
            G, encoder.embed_text_cached, train_caps, ev.samples_per_caption, ev.seed
        )
        if test_caps:
            row["test_agreement"] = evaluate_generator_agreement(
                G, encoder.embed_text_cached, test_caps, ev.samples_per_caption, ev.seed
            )
        rows.append(row)
    base = aucs["caption-baseline"]
    rows.append({"variant": "caption-baseline", "auc": base.auc, "fold_aucs": base.fold_aucs})
    report = {"mode": ev.mode, "k": k, "folds": ev.folds, "rows": rows}
    (run / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")

    lines = [f"{'variant':<20} {'AUC':>6}  {'train color/shape':>18}  {'test color':>10}"]
    for row in rows:
        tr = row.get("train_agreement")
        te = row.get("test_agreement")
        lines.append(
            f"{row['variant']:<20} {row['auc']:6.3f}  "
            + (f"{tr['color']:8.3f} / {tr['shape']:.3f}  " if tr else " " * 20)
            + (f"{te['color']:10.3f}" if te else "")
        )
    text = "\n".join(ln.rstrip() for ln in lines) + "\n"
    (run / "report.txt").write_text(text)
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (sections: dataset, encoder, gan, trainer, style, eval)")
    p.add_argument("--preset", choices=sorted(cfgmod.PRESETS), help="named defaults applied before --config")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    p.add_argument("--seed", type=int, help="seed for every stochastic stage")
    p.add_argument("--name", help=f"run name; the run lives in ${cfgmod.RUNS_ENV} (default ./runs)/<name>")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="txt2im", description="Text-conditional GAN pipeline on captioned images.")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("make-data", help="generate the synthetic captioned-shapes dataset")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=_positive, default=50)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="replace an existing non-empty directory")
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train-encoder", help="train the char-CNN-RNN / image joint embedding")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=_positive)
    p.set_defaults(func=cmd_train_encoder)

    p = sub.add_parser("train-gan", help="train a text-conditional GAN")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--encoder", help="encoder checkpoint or run directory (encoder_mode=pretrained)")
    p.add_argument("--encoder-mode", choices=["pretrained", "end_to_end"])
    p.add_argument("--regime", type=_regime, help=f"one of {', '.join(r.value for r in Regime)}")
    p.add_argument("--epochs", type=_positive)
    p.add_argument("--resume", help="GAN checkpoint to continue from")
    p.set_defaults(func=cmd_train_gan)

    p = sub.add_parser("train-style", help="train the style encoder that inverts a generator")
    _common(p)
    p.add_argument("--gan", required=True, help="GAN checkpoint or run directory")
    p.add_argument("--data", required=True, help="dataset whose train-split captions drive training")
    p.add_argument("--epochs", type=_positive)
    p.set_defaults(func=cmd_train_style)

    p = sub.add_parser("generate", help="sample images for captions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--caption", action="append")
    p.add_argument("--captions-file")
    p.add_argument("--count", type=_positive, default=4, help="samples per caption")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("style-transfer", help="render captions in the style of query images")
    p.add_argument("--checkpoint", required=True, help="GAN checkpoint")
    p.add_argument("--style", required=True, help="style-encoder checkpoint or run directory")
    p.add_argument("--query", action="append", required=True, help="query PNG at the model resolution")
    p.add_argument("--caption", action="append")
    p.add_argument("--captions-file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_style_transfer)

    p = sub.add_parser("interpolate", help="sentence or noise interpolation sweeps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=["sentence", "noise"], default="sentence")
    p.add_argument("--caption-a", required=True)
    p.add_argument("--caption-b")
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--rows", type=_positive, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("evaluate", help="style-verification AUC and caption agreement for several variants")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--style", action="append", required=True, help="style checkpoint or run dir, one per variant")
    p.add_argument("--mode", choices=["background", "pose", "position"])
    p.add_argument("--folds", type=_positive)
    p.set_defaults(func=cmd_evaluate)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(f"txt2im: error[{kind}]: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.WARNING if args.quiet else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s",
        )
        if args.command == "interpolate" and args.steps < 2:
            raise UsageError("--steps must be >= 2")
        return args.func(args)
    except UsageError as exc:
        return _fail("usage", exc, 1)
    except (TrainingAborted, FloatingPointError) as exc:
        return _fail("runtime", exc, 2)
    except (ValueError, DatasetError, FileNotFoundError, KeyError) as exc:
        return _fail("validation", exc, 1)


if __name__ == "__main__":
    sys.exit(main())
