"""Command-line entry: run / report / verify / sweep."""

import argparse
import dataclasses
import os

import torch

from .. import harmless_stage as hs
from ..model_zoo import build_model
from .config import load_config, set_dotted
from .experiment import measure_cost, run_experiment
from .report import emit_report, emit_scaling


def _add_common(p):
    p.add_argument("--config", help="key/value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="dotted override, repeatable")


def cmd_run(args):
    rc = load_config(args.config, args.overrides)
    out = run_experiment(rc, resume=not args.fresh)
    emit_report(out)
    print(f"run complete: {out}")


def cmd_report(args):
    for rd in args.run_dir:
        for p in emit_report(rd):
            print(p)
    if args.scaling:
        png, series = emit_scaling(args.scaling)
        print(png)


def _run_config(run_dir):
    """Rebuild the RunConfig a run directory was produced with."""
    from .config import parse_pairs

    rc = load_config(None, [])
    with open(os.path.join(run_dir, "manifest.txt")) as fh:
        for key, value in parse_pairs(fh.read()):
            if key == "code_version":
                continue
            set_dotted(rc, key, value)
    return rc


def cmd_verify(args):
    final = torch.load(os.path.join(args.run_dir, "final.pt"),
                       weights_only=False)
    if "records" not in final:
        raise SystemExit(f"'{args.run_dir}' has no watermark records "
                         f"(arm {final.get('arm')})")
    rc = _run_config(args.run_dir)
    from .. import data_pipeline as dp

    split = dp.load_dataset(rc.fl.dataset, root=rc.fl.data_root, seed=rc.fl.seed)
    adapter = build_model(rc.fl.arch, split.image_shape, split.num_classes,
                          seed=rc.fl.seed)
    adapter.load_state_dict(final["relearned_params"])
    ids = ([args.client] if args.client is not None
           else [r.client_id for r in final["records"]])
    for rec in final["records"]:
        if rec.client_id not in ids:
            continue
        ok, rate = hs.verify_contribution(adapter, rec, n_queries=args.queries,
                                          sigma=rc.fl.sigma, jitter=rc.fl.jitter,
                                          seed=rc.fl.seed)
        print(f"client {rec.client_id}: rate {rate:.4f} "
              f"{'VERIFIED' if ok else 'not verified'} "
              f"(target {rec.estimate.target_class})")


def cmd_sweep(args):
    base = args.out
    for k in args.ks:
        for arm in args.arms:
            rc = load_config(args.config, args.overrides)
            rc.arm = arm
            rc.fl.num_clients = k
            rc.fl.num_malicious = max(1, k // 2)
            rc.out_dir = os.path.join(base, f"k{k}_{arm}")
            out = run_experiment(rc, resume=not args.fresh)
            _, med = measure_cost(out)
            emit_report(out, quiet=True)
            print(f"k={k} {arm}: median server {med:.3f}s")
    png, series = emit_scaling(base)
    print(f"scaling plot: {png}")


def main(argv=None):
    p = argparse.ArgumentParser(
        prog="fedsan",
        description="federated watermark sanitization: run experiments, emit "
                    "reports, verify contributions")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run one arm end to end")
    _add_common(r)
    r.add_argument("--fresh", action="store_true",
                   help="ignore existing checkpoints")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="re-emit reports for finished runs")
    rep.add_argument("run_dir", nargs="+")
    rep.add_argument("--scaling", metavar="BASE_DIR",
                     help="also render the scaling plot over BASE_DIR")
    rep.set_defaults(func=cmd_report)

    v = sub.add_parser("verify", help="black-box watermark check from a run")
    v.add_argument("run_dir")
    v.add_argument("--client", type=int)
    v.add_argument("--queries", type=int, default=256)
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("sweep", help="client-count scaling grid")
    _add_common(s)
    s.add_argument("--ks", type=int, nargs="+", default=[2, 4, 8])
    s.add_argument("--arms", nargs="+", default=["sanitizer", "baseline"])
    s.add_argument("--out", default="runs/sweep")
    s.add_argument("--fresh", action="store_true")
    s.set_defaults(func=cmd_sweep)

    args = p.parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
