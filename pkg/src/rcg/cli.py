"""Command-line entry point: one pipeline stage per invocation.

Every stage reads and writes fixed file names inside the run directory
(``output_dir`` in the config, or ``--out``)::

    encoder.ckpt      train-encoder
    reps.rcg          extract-reps (training split, with labels)
    rdm.ckpt          train-rdm            rdm_class.ckpt  train-rdm --class-conditional
    generator.ckpt    train-gen            baseline.ckpt   train-gen --baseline
    <name>.rcg/.pgm   sample, sample-class, variations, interpolate
    eval.jsonl        evaluate

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 training divergence
or failed gradient check.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from .config import PipelineConfig, dump_config, load_config
from .data import load_dataset, split
from .encoder import train_encoder
from .errors import RcgError, TrainingError, UsageError
from .gradcheck import grad_check_suite
from .imagegen import gen_param_count, train_generator
from .io import file_hash, image_grid, load_rep_store, save_rep_store, write_pgm
from .metrics import append_report, feature_fd, rep_fd
from .pipeline import (
    SampleBatch,
    extract_reps,
    interpolate,
    load_model,
    sample_baseline,
    sample_class_conditional,
    sample_unconditional,
    save_model,
    schedule_of,
    variations,
)
from .rdm import param_count, train_rdm
from .rng import derive_seed

COMMANDS = ("train-encoder", "extract-reps", "train-rdm", "train-gen", "sample", "sample-class",
            "variations", "interpolate", "evaluate", "grad-check", "param-count")


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; 2 means data error here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _common(p):
    p.add_argument("--config", help="JSON config file (defaults apply to missing fields)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--tau", type=float, help="guidance scale")
    p.add_argument("--steps", type=int,
                   help="training steps (epochs for train-encoder) or DDIM steps when sampling")
    p.add_argument("--eta", type=float, help="DDIM eta for both samplers")
    p.add_argument("--out", help="run directory (overrides output_dir)")


def build_parser():
    parser = _Parser(prog="rcg", description="Representation-conditioned generation pipeline.")
    parser.add_argument("--print-default-config", action="store_true",
                        help="print the default JSON config and exit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    for name in COMMANDS:
        p = sub.add_parser(name)
        _common(p)
        if name == "train-rdm":
            p.add_argument("--class-conditional", action="store_true",
                           help="train a class-conditional RDM on the store's labels")
        if name == "train-gen":
            p.add_argument("--baseline", action="store_true",
                           help="train the matched unconditional baseline (rep_drop_rate=1)")
        if name in ("sample", "sample-class", "variations", "interpolate"):
            p.add_argument("--name", help="output file stem inside the run directory")
            p.add_argument("--no-guidance", action="store_true", help="disable guidance entirely")
        if name in ("sample", "sample-class", "variations"):
            p.add_argument("--n", type=int, help="number of images (default: num_samples)")
        if name == "sample":
            p.add_argument("--baseline", action="store_true",
                           help="sample the baseline generator with a null condition")
        if name == "sample-class":
            p.add_argument("--class", dest="cls", type=int, required=True)
        if name == "variations":
            p.add_argument("--index", type=int, default=0, help="held-out item used as reference")
        if name == "interpolate":
            p.add_argument("--a", type=int, default=0, help="first held-out item")
            p.add_argument("--b", type=int, default=1, help="second held-out item")
            p.add_argument("--k", type=int, default=8)
        if name == "evaluate":
            p.add_argument("--gen", required=True, help="sample batch (.rcg)")
            p.add_argument("--ref", default="heldout",
                           help="'heldout' or a sample batch; rep_fd also accepts a rep store")
            p.add_argument("--metric", choices=("feature_fd", "rep_fd"), default="feature_fd")
        if name == "param-count":
            p.add_argument("--generator", action="store_true",
                           help="count the image generator instead of the RDM")
    return parser


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    r = dataclasses.replace
    if args.seed is not None:
        cfg = r(cfg, seed=args.seed)
    if args.out is not None:
        cfg = r(cfg, output_dir=args.out)
    if args.tau is not None:
        cfg = r(cfg, guidance=r(cfg.guidance, tau=args.tau))
    if args.eta is not None:
        cfg = r(cfg, rdm_sampler=r(cfg.rdm_sampler, eta=args.eta),
                gen_sampler=r(cfg.gen_sampler, eta=args.eta))
    if args.steps is not None:
        cmd = args.command
        if cmd == "train-encoder":
            cfg = r(cfg, encoder_train=r(cfg.encoder_train, epochs=args.steps))
        elif cmd == "train-rdm":
            cfg = r(cfg, rdm_train=r(cfg.rdm_train, steps=args.steps))
        elif cmd == "train-gen":
            cfg = r(cfg, gen_train=r(cfg.gen_train, steps=args.steps))
        else:
            cfg = r(cfg, rdm_sampler=r(cfg.rdm_sampler, ddim_steps=args.steps),
                    gen_sampler=r(cfg.gen_sampler, ddim_steps=args.steps))
    return cfg


def _path(cfg, name):
    return os.path.join(cfg.output_dir, name)


def _splits(cfg):
    return split(load_dataset(cfg.dataset), cfg.dataset.heldout_fraction, cfg.dataset.seed)


def _guidance(cfg, args):
    return None if getattr(args, "no_guidance", False) else cfg.guidance


def _write_batch(cfg, batch: SampleBatch, stem):
    digest = batch.save(_path(cfg, stem + ".rcg"))
    if len(batch):
        write_pgm(_path(cfg, stem + ".pgm"), image_grid(batch.images))
    print(f"{stem}.rcg {len(batch)} images sha256 {digest}")


def cmd_train_encoder(cfg, args):
    train, _ = _splits(cfg)
    enc, hist = train_encoder(train.images, cfg.encoder, cfg.encoder_train,
                              derive_seed(cfg.seed, "encoder"))
    digest = save_model(_path(cfg, "encoder.ckpt"), "encoder", enc, trained=True,
                        history=hist)
    print(f"encoder.ckpt loss {hist[-1]['loss']:.4f} sha256 {digest}" if hist else
          f"encoder.ckpt sha256 {digest}")


def cmd_extract_reps(cfg, args):
    enc, _ = load_model(_path(cfg, "encoder.ckpt"), "encoder")
    train, _ = _splits(cfg)
    reps, labels = extract_reps(enc, train)
    digest = save_rep_store(_path(cfg, "reps.rcg"), reps, labels, {"encoder": file_hash(
        _path(cfg, "encoder.ckpt"))})
    print(f"reps.rcg {reps.shape[0]}x{reps.shape[1]} sha256 {digest}")


def cmd_train_rdm(cfg, args):
    reps, labels, _ = load_rep_store(_path(cfg, "reps.rcg"))
    rdm_cfg, name, lab = cfg.rdm, "rdm.ckpt", None
    if args.class_conditional:
        if len(labels) == 0 or labels.min() < 0:
            raise UsageError("class-conditional RDM needs a labeled representation store")
        rdm_cfg = dataclasses.replace(rdm_cfg, num_classes=int(labels.max()) + 1)
        name, lab = "rdm_class.ckpt", labels
    model, hist = train_rdm(reps, rdm_cfg, schedule_of(cfg.schedule), cfg.rdm_train,
                            derive_seed(cfg.seed, "rdm"), labels=lab)
    digest = save_model(_path(cfg, name), "rdm", model, cfg.schedule)
    print(f"{name} loss {hist[-1]['loss']:.4f} sha256 {digest}" if hist else
          f"{name} sha256 {digest}")


def cmd_train_gen(cfg, args):
    reps, _, _ = load_rep_store(_path(cfg, "reps.rcg"))
    train, _ = _splits(cfg)
    gen_cfg, name = cfg.gen, "generator.ckpt"
    if args.baseline:
        gen_cfg, name = dataclasses.replace(gen_cfg, rep_drop_rate=1.0), "baseline.ckpt"
    # baseline and RCG generator share the seed: matched init and batches
    model, hist = train_generator(train.images, reps, gen_cfg, schedule_of(cfg.schedule),
                                  cfg.gen_train, derive_seed(cfg.seed, "generator"))
    digest = save_model(_path(cfg, name), "generator", model, cfg.schedule)
    print(f"{name} loss {hist[-1]['loss']:.4f} sha256 {digest}" if hist else
          f"{name} sha256 {digest}")


def _n(cfg, args):
    n = cfg.num_samples if args.n is None else args.n
    if n < 0:
        raise UsageError("--n must be >= 0")
    return n


def cmd_sample(cfg, args):
    seed = derive_seed(cfg.seed, "sample")
    if args.baseline:
        gen, _ = load_model(_path(cfg, "baseline.ckpt"), "generator")
        batch = sample_baseline(_n(cfg, args), gen, cfg.schedule, cfg.gen_sampler, seed)
    else:
        rdm, _ = load_model(_path(cfg, "rdm.ckpt"), "rdm")
        gen, _ = load_model(_path(cfg, "generator.ckpt"), "generator")
        batch = sample_unconditional(_n(cfg, args), rdm, gen, cfg.schedule, cfg.rdm_sampler,
                                     cfg.gen_sampler, _guidance(cfg, args), seed)
    _write_batch(cfg, batch, args.name or ("baseline" if args.baseline else "samples"))


def cmd_sample_class(cfg, args):
    rdm, _ = load_model(_path(cfg, "rdm_class.ckpt"), "rdm")
    gen, _ = load_model(_path(cfg, "generator.ckpt"), "generator")
    batch = sample_class_conditional(args.cls, _n(cfg, args), rdm, gen, cfg.schedule,
                                     cfg.rdm_sampler, cfg.gen_sampler, _guidance(cfg, args),
                                     derive_seed(cfg.seed, "sample-class"))
    _write_batch(cfg, batch, args.name or f"class_{args.cls}")


def _heldout_item(cfg, index):
    _, held = _splits(cfg)
    if not 0 <= index < len(held):
        raise UsageError(f"held-out index {index} outside [0, {len(held)})")
    return held.images[index]


def cmd_variations(cfg, args):
    enc, _ = load_model(_path(cfg, "encoder.ckpt"), "encoder")
    gen, _ = load_model(_path(cfg, "generator.ckpt"), "generator")
    n = _n(cfg, args)
    seeds = [derive_seed(cfg.seed, "variations", i) for i in range(n)]
    batch = variations(_heldout_item(cfg, args.index), n, enc, gen, cfg.schedule,
                       cfg.gen_sampler, _guidance(cfg, args), seeds)
    _write_batch(cfg, batch, args.name or f"variations_{args.index}")


def cmd_interpolate(cfg, args):
    enc, _ = load_model(_path(cfg, "encoder.ckpt"), "encoder")
    gen, _ = load_model(_path(cfg, "generator.ckpt"), "generator")
    batch = interpolate(_heldout_item(cfg, args.a), _heldout_item(cfg, args.b), args.k, enc, gen,
                        cfg.schedule, cfg.gen_sampler, _guidance(cfg, args),
                        derive_seed(cfg.seed, "interpolate"))
    _write_batch(cfg, batch, args.name or f"interp_{args.a}_{args.b}")


def _rel(cfg, path):
    """Paths inside the run directory are recorded relative to it, so reports
    do not depend on where the run lives."""
    if path == "heldout":
        return path
    rel = os.path.relpath(os.path.abspath(path), os.path.abspath(cfg.output_dir))
    return path if rel.startswith("..") else rel


def cmd_evaluate(cfg, args):
    gen = SampleBatch.load(args.gen)
    seed = derive_seed(cfg.seed, "evaluate")
    if args.metric == "feature_fd":
        enc, _ = load_model(_path(cfg, "encoder.ckpt"), "encoder")
        ref = _splits(cfg)[1].images if args.ref == "heldout" else SampleBatch.load(args.ref).images
        report = feature_fd(gen.images, ref, enc, seed, _rel(cfg, args.ref))
    else:
        if args.ref == "heldout":
            raise UsageError("rep_fd needs --ref pointing at a rep store or sample batch")
        try:
            ref = load_rep_store(args.ref)[0]
        except RcgError:
            ref = SampleBatch.load(args.ref).conditions
        report = rep_fd(gen.conditions, ref, seed, _rel(cfg, args.ref))
    report.extra = {"gen": _rel(cfg, args.gen)}
    append_report(_path(cfg, "eval.jsonl"), report)
    baseline = "" if report.baseline is None else f" (half-split baseline {report.baseline:.6g})"
    print(f"{report.metric} {report.value:.6g}{baseline}")


def cmd_grad_check(cfg, args):
    reports = grad_check_suite(seed=cfg.seed)
    for name, report in reports.items():
        print(f"{name:16s} max rel error {report.max_error:.3e} "
              f"{'ok' if report.passed else 'FAIL'}")
    failed = [k for k, r in reports.items() if not r.passed]
    if failed:
        raise TrainingError(f"gradient check failed for {', '.join(failed)}")


def cmd_param_count(cfg, args):
    print(gen_param_count(cfg.gen) if args.generator else param_count(cfg.rdm))


HANDLERS = {
    "train-encoder": cmd_train_encoder, "extract-reps": cmd_extract_reps,
    "train-rdm": cmd_train_rdm, "train-gen": cmd_train_gen, "sample": cmd_sample,
    "sample-class": cmd_sample_class, "variations": cmd_variations,
    "interpolate": cmd_interpolate, "evaluate": cmd_evaluate, "grad-check": cmd_grad_check,
    "param-count": cmd_param_count,
}

# commands that only read the config need no run directory
_NO_OUTPUT = ("grad-check", "param-count")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.print_default_config:
            print(dump_config(PipelineConfig()))
            return 0
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        cfg = resolve_config(args)
        if args.command not in _NO_OUTPUT:
            os.makedirs(cfg.output_dir, exist_ok=True)
        HANDLERS[args.command](cfg, args)
        return 0
    except RcgError as exc:
        print(f"rcg: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
