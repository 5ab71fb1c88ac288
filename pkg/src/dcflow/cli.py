"""Command-line surface for the batch pipeline.

Subcommands: curate, split, train, sample, discretize, evaluate, selftest.
Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
The DCFLOW_SEED environment variable supplies the default seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import selftest as selftest_mod
from .crystal import pad_to_order
from .data_io import (CifParseError, DataFormatError, Dataset, crystal_to_record,
                      parse_cif, read_jsonl, split as split_dataset, write_jsonl)
from .discretize import DiscretizeConfig, discretize_crystal
from .geometry import LengthPrior
from .metrics import (EvalReport, MatchTolerances, calibrate_coverage_thresholds,
                      compositional_validity, coverage, density, fingerprint_set,
                      match_rate, n_el, structural_validity, wasserstein_1d)
from .sampler import (EmpiricalSizeSampler, SamplerConfig, sample_batch,
                      sample_csp_batch)
from .training import TrainingConfig, train
from .velocity_net import (checkpoint_checksum, load_checkpoint,
                           save_checkpoint)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _default_seed() -> int:
    return int(os.environ.get("DCFLOW_SEED", "0"))


def read_config_file(path: str) -> dict:
    """Flat `key = value` lines; '#' starts a comment."""
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError(f"{path}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def cmd_curate(args) -> int:
    cif_dir = Path(args.cif_dir)
    files = sorted(cif_dir.glob("*.cif"))
    if not files:
        raise DataFormatError(f"no .cif files under {cif_dir}")
    crystals, rejects = [], []
    for path in files:
        try:
            crystals.append(parse_cif(path.read_text(), min_atoms=args.min_atoms,
                                      max_atoms=args.max_atoms, l_max=args.lmax))
        except CifParseError as exc:
            rejects.append((path.name, str(exc)))
    write_jsonl(Dataset(crystals), args.out)
    print(f"curated {len(crystals)} structures, rejected {len(rejects)}")
    for name, reason in rejects:
        print(f"  reject {name}: {reason}")
    if not crystals:
        raise DataFormatError("all inputs rejected")
    return EXIT_OK


def cmd_split(args) -> int:
    fractions = tuple(float(x) for x in args.fractions.split(","))
    if len(fractions) != 3:
        raise DataFormatError("fractions must be train,val,test")
    dataset = read_jsonl(args.input)
    labeled = split_dataset(dataset, seed=args.seed, fractions=fractions)
    write_jsonl(labeled, args.out)
    counts = {lab: labeled.labels.count(lab) for lab in ("train", "val", "test")}
    print(f"split sizes: {counts}")
    return EXIT_OK


def cmd_train(args) -> int:
    settings: dict = {}
    if args.config:
        settings.update(read_config_file(args.config))
    overrides = {
        "task": args.task, "seed": args.seed, "epochs": args.epochs,
        "batch_size": args.batch_size, "learning_rate": args.learning_rate,
        "hidden_dim": args.hidden_dim, "num_layers": args.num_layers,
        "n_freq": args.n_freq, "l_max": args.lmax, "threads": args.threads,
    }
    settings.update({k: v for k, v in overrides.items() if v is not None})
    cfg = TrainingConfig.from_mapping(settings)

    dataset = read_jsonl(args.data)
    crystals = dataset.crystals
    if dataset.labels is not None and "train" in dataset.labels:
        crystals = dataset.subset("train").crystals
    crystals = [pad_to_order(c, cfg.l_max) if c.l_max < cfg.l_max else c
                for c in crystals]
    result = train(crystals, cfg, log_every=args.log_every)
    save_checkpoint(args.out, result.net, extra={
        "task": cfg.task,
        "train_config": asdict(cfg),
        "length_prior": result.length_prior.to_dict(),
        "size_counts": {str(k): v for k, v in result.size_counts.items()},
        "final_loss": result.history[-1]["total"] if result.history else None,
    })
    print(f"trained {cfg.epochs} epochs on {len(crystals)} structures -> {args.out}")
    if result.history:
        print(f"final loss {result.history[-1]['total']:.6f}")
    return EXIT_OK


def cmd_sample(args) -> int:
    net, extra = load_checkpoint(args.model)
    config = SamplerConfig(steps=args.steps, slope=args.slope, task=args.task,
                           seed=args.seed)
    length_prior = (LengthPrior.from_dict(extra["length_prior"])
                    if "length_prior" in extra else None)
    meta = {"seed": args.seed, "model_checksum": checkpoint_checksum(args.model)}
    if not args.deterministic:
        meta["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%S")

    if args.task == "csp":
        if not args.conditions:
            raise DataFormatError("CSP sampling requires --conditions")
        refs = read_jsonl(args.conditions)
        ref_crystals = (refs.subset("test").crystals
                        if refs.labels is not None and "test" in refs.labels
                        else refs.crystals)
        conditions = [pad_to_order(c, net.cfg.l_max) if c.l_max < net.cfg.l_max else c
                      for c in ref_crystals]
        results = sample_csp_batch(net, conditions, config,
                                   length_prior=length_prior, extra_meta=meta)
    else:
        counts = {int(k): v for k, v in extra.get("size_counts", {}).items()}
        if not counts:
            raise DataFormatError("checkpoint lacks a size histogram for DNG")
        results = sample_batch(net, EmpiricalSizeSampler(counts), config,
                               n_samples=args.n_samples,
                               length_prior=length_prior, extra_meta=meta)

    with open(args.out, "w") as fh:
        for crystal, sample_meta in results:
            fh.write(json.dumps(crystal_to_record(crystal, sample_meta)) + "\n")
    print(f"sampled {len(results)} structures -> {args.out}")
    return EXIT_OK


def cmd_discretize(args) -> int:
    cfg = DiscretizeConfig(tau_ratio=args.tau_ratio, top_k=args.top_k,
                           tau_abs=args.tau_abs, tau_percentile=args.tau_percentile,
                           alpha_adapt=args.alpha_adapt, tau_entropy=args.tau_entropy,
                           tau_vote=args.tau_vote)
    dataset = read_jsonl(args.input)
    out = Dataset([discretize_crystal(c, cfg) for c in dataset.crystals],
                  labels=dataset.labels)
    write_jsonl(out, args.out)
    print(f"discretized {len(out)} structures -> {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    preds = read_jsonl(args.pred).crystals
    refs_ds = read_jsonl(args.ref)
    refs = (refs_ds.subset("test").crystals
            if refs_ds.labels is not None and "test" in refs_ds.labels
            else refs_ds.crystals)
    report = EvalReport()

    if args.task == "csp":
        tol = MatchTolerances(ltol=args.ltol, stol=args.stol, angle_tol=args.angle_tol)
        rate, rmse = match_rate(preds, refs, tol)
        report.match_rate = rate
        report.rmse = rmse
    else:
        report.structural_validity = float(np.mean(
            [structural_validity(c, d_min=args.d_min) for c in preds]))
        report.compositional_validity = float(np.mean(
            [compositional_validity(c)[0] for c in preds]))
        gen_fp = fingerprint_set(preds, seed=args.seed)
        ref_fp = fingerprint_set(refs, seed=args.seed + 1)
        delta_struct, delta_comp = calibrate_coverage_thresholds(ref_fp)
        rec, prec = coverage(gen_fp, ref_fp, delta_struct, delta_comp)
        report.coverage_recall = rec
        report.coverage_precision = prec
        report.wdist_density = wasserstein_1d([density(c) for c in preds],
                                              [density(c) for c in refs])
        report.wdist_n_el = wasserstein_1d([n_el(c) for c in preds],
                                           [n_el(c) for c in refs])
        if args.plot:
            _plot_histograms(preds, refs, args.plot)

    with open(args.out, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    _print_report(report)
    return EXIT_OK


def _plot_histograms(preds, refs, out_dir: str) -> None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise DataFormatError("plotting requires matplotlib (install dcflow[plot])") from exc
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    for name, fn in (("density", density), ("n_el", n_el)):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.hist([fn(c) for c in refs], bins=24, alpha=0.6, label="reference", density=True)
        ax.hist([fn(c) for c in preds], bins=24, alpha=0.6, label="generated", density=True)
        ax.set_xlabel(name)
        ax.legend()
        fig.tight_layout()
        fig.savefig(Path(out_dir) / f"{name}.png", dpi=150)
        plt.close(fig)


def _print_report(report: EvalReport) -> None:
    def fmt(x, pct=False):
        if x is None:
            return "-"
        return f"{100 * x:.2f}" if pct else f"{x:.4f}"

    print("MR (%)  RMSE    Validity(struct/comp)  Coverage(recall/prec)  "
          "Wdist(rho)  Wdist(N_el)")
    print(f"{fmt(report.match_rate, pct=True):7} {fmt(report.rmse):7} "
          f"{fmt(report.structural_validity, pct=True):>8}/{fmt(report.compositional_validity, pct=True):<12} "
          f"{fmt(report.coverage_recall, pct=True):>8}/{fmt(report.coverage_precision, pct=True):<12} "
          f"{fmt(report.wdist_density):10} {fmt(report.wdist_n_el):10}")


def cmd_selftest(args) -> int:
    ok = selftest_mod.run_all(verbose=True)
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcflow",
                                     description="disordered-crystal flow pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    seed_default = _default_seed()

    p = sub.add_parser("curate", help="parse a directory of CIF files into JSONL")
    p.add_argument("--cif-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-atoms", type=int, default=3)
    p.add_argument("--max-atoms", type=int, default=50)
    p.add_argument("--lmax", type=int, default=2)
    p.set_defaults(fn=cmd_curate)

    p = sub.add_parser("split", help="deterministic train/val/test split")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--fractions", default="0.8,0.1,0.1")
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("train", help="train a velocity network")
    p.add_argument("--task", choices=("csp", "dng"), default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--hidden-dim", type=int, default=None)
    p.add_argument("--num-layers", type=int, default=None)
    p.add_argument("--n-freq", type=int, default=None)
    p.add_argument("--lmax", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="generate structures from a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--task", choices=("csp", "dng"), required=True)
    p.add_argument("--conditions", default=None)
    p.add_argument("--n-samples", type=int, default=100)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--slope", type=float, default=20.0)
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--out", required=True)
    p.add_argument("--deterministic", action="store_true",
                   help="suppress timestamps for byte-identical reruns")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("discretize", help="snap continuous weights to multi-hot")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau-ratio", type=float, default=3.0)
    p.add_argument("--top-k", type=int, default=2)
    p.add_argument("--tau-abs", type=float, default=0.2)
    p.add_argument("--tau-percentile", type=float, default=95.0)
    p.add_argument("--alpha-adapt", type=float, default=0.2)
    p.add_argument("--tau-entropy", type=float, default=0.9)
    p.add_argument("--tau-vote", type=int, default=4)
    p.set_defaults(fn=cmd_discretize)

    p = sub.add_parser("evaluate", help="score predictions against references")
    p.add_argument("--task", choices=("csp", "dng"), required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", default=None)
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--ltol", type=float, default=0.3)
    p.add_argument("--stol", type=float, default=0.5)
    p.add_argument("--angle-tol", type=float, default=10.0)
    p.add_argument("--d-min", type=float, default=0.5)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("selftest", help="run the built-in property suites")
    p.set_defaults(fn=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CifParseError, DataFormatError, FileNotFoundError, KeyError,
            ValueError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (RuntimeError, FloatingPointError) as exc:
        print(f"error: numerical: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
