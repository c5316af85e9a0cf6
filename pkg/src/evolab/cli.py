"""Command-line entry point: train, eval, fit-gpd, bounds, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evt
from .config import load_config
from .envs import make_env
from .errors import EvoError
from .policy import load_checkpoint, make_policy
from .report import report
from .train import evaluate, train
from .trustregion import bound_terms, compute_nu0, tv_term_estimate, variance_pair, violation_prob_bound


def _fmt(x: float) -> str:
    return format(x, ".10g")


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.override)

    def show(m):
        print(f"epoch {m.epoch:4d}  return {m.mean_return:9.3f}  J_C {m.mean_cost:8.3f}  "
              f"viol {m.violation_rate:.3f}  nu {m.nu:.4f}  risk {m.risk_boundary:8.3f}",
              flush=True)

    metrics = train(cfg, write=True, callback=None if args.quiet else show)
    print(f"{len(metrics)} epochs -> {Path(cfg.run_dir) / cfg.run_name}")
    return 0


def cmd_eval(args) -> int:
    theta, header = load_checkpoint(args.checkpoint)
    env_kwargs = header.get("env_kwargs", {})
    policy = make_policy(make_env(header["env_id"], **env_kwargs).spec)
    ret, cost, viol = evaluate(policy, theta, header["env_id"], args.episodes, args.seed,
                               header.get("cost_limit", 25.0), header.get("gamma", 0.99),
                               env_kwargs)
    print(f"mean_return {_fmt(ret)}\nmean_cost {_fmt(cost)}\nviolation_rate {_fmt(viol)}")
    return 0


def _read_samples(path) -> np.ndarray:
    text = Path(path).read_text().replace(",", " ")
    return np.array([float(t) for t in text.split()])


def cmd_fit_gpd(args) -> int:
    x = _read_samples(args.input)
    peaks = evt.extract_peaks(x, args.mu_threshold)
    gpd = evt.fit_gpd_mle(peaks, args.min_peaks, threshold=args.mu_threshold, n_total=x.size)
    out = gpd.to_dict()
    out["mu_hat"] = 1.0 - gpd.exceedance
    if args.nu is not None:
        out["nu"] = args.nu
        out["risk_boundary"] = evt.risk_boundary(evt.TailModel(gpd, gpd, args.nu))
    out["ks_gpd"], out["ks_gauss"] = evt.tail_fit_scores(peaks, gpd)
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.output:
        Path(args.output).write_text(text + "\n")
    print(text)
    return 0


def cmd_bounds(args) -> int:
    gpd = evt.GpdParams.from_dict(json.loads(Path(args.gpd).read_text()))
    tv = tv_term_estimate(args.eps_c, args.delta, args.gamma)
    nu0 = compute_nu0(gpd, tv, args.gamma)
    j_terms, e_term = bound_terms(gpd, args.jc, args.surrogate, tv, args.gamma)
    mu_hat = 1.0 - gpd.exceedance
    print(f"tv_term {_fmt(tv)}")
    print(f"nu0 {_fmt(nu0)}")
    if j_terms > 0:
        print(f"prob_bound {_fmt(violation_prob_bound(gpd, j_terms, e_term))}")
    else:
        print("prob_bound nan  # J_terms <= 0")
    print(f"expectation_bound {_fmt(1.0 - mu_hat)}")
    print(f"jc_margin {_fmt(args.limit - args.jc)}")
    nu = args.nu if args.nu is not None else max(nu0, 1e-6)
    p = nu / gpd.exceedance
    if 0 < p < 1 and mu_hat > 0:
        f_h = float(evt.gpd_pdf(gpd, evt.gpd_quantile(gpd, p)))
        om_evo, om_qr = variance_pair(mu_hat, nu, gpd.n_total, f_h)
        print(f"omega_evo {_fmt(om_evo)}\nomega_qr {_fmt(om_qr)}")
    else:
        print("omega_evo nan\nomega_qr nan  # nu outside the fitted tail")
    return 0


def cmd_report(args) -> int:
    sys.stdout.write(report(args.runs, args.final_epochs))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evolab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the training loop")
    t.add_argument("--config", default=None)
    t.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fit-gpd", help="fit a GPD to the excesses of a sample file")
    f.add_argument("--input", required=True, help="whitespace or comma separated numbers")
    f.add_argument("--mu-threshold", type=float, required=True)
    f.add_argument("--nu", type=float, default=None)
    f.add_argument("--min-peaks", type=int, default=evt.DEFAULT_MIN_PEAKS)
    f.add_argument("--output", default=None, help="also write the JSON here")
    f.set_defaults(func=cmd_fit_gpd)

    b = sub.add_parser("bounds", help="nu0, violation bound and variance pair")
    b.add_argument("--gpd", required=True, help="JSON written by fit-gpd")
    b.add_argument("--gamma", type=float, required=True)
    b.add_argument("--delta", type=float, required=True)
    b.add_argument("--jc", type=float, required=True)
    b.add_argument("--limit", type=float, required=True)
    b.add_argument("--eps-c", type=float, default=1.0, help="max_s |E_a A_C(s, a)|")
    b.add_argument("--surrogate", type=float, default=0.0, help="predicted cost change")
    b.add_argument("--nu", type=float, default=None)
    b.set_defaults(func=cmd_bounds)

    r = sub.add_parser("report", help="ratio table over finished runs")
    r.add_argument("--runs", required=True)
    r.add_argument("--final-epochs", type=int, default=10)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (EvoError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
