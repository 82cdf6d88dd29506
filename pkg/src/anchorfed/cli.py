"""Command-line entry point.

Subcommands: gen-data, distill, run, eval, comm-audit, grad-check.
Exit codes: 0 success, 1 configuration/validation error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, FullConfig, load_config
from .data import DataError, SuiteConfig, generate_suite, load_suite, save_suite
from .distill import DistillConfig, DistillTrace, distill, load_anchors, save_anchors
from .evaluation import (
    BoundProbeConfig,
    bound_probe,
    comm_audit,
    evaluate_all,
)
from .gradcheck import run_grad_check_table
from .kernel import NumericError
from .models import load_model, save_model
from .protocol import RunConfig, run_experiment


def _write_metrics_csv(path: Path, metrics) -> None:
    with open(path, "w") as fh:
        fh.write("round,client,sampled,ce,reg,kd,total\n")
        for m in metrics:
            vals = ",".join(f"{v:.17g}" for v in (m.ce, m.reg, m.kd, m.total))
            fh.write(f"{m.round},{m.client},{int(m.sampled)},{vals}\n")


def cmd_gen_data(cfg: FullConfig, out: Path) -> None:
    suite_cfg: SuiteConfig = cfg.get("suite") or SuiteConfig()
    clients = generate_suite(suite_cfg)
    save_suite(clients, out / "suite", extra_manifest={"config_hash": cfg.hash})
    print(f"wrote {len(clients)} client datasets to {out / 'suite'}")


def cmd_distill(cfg: FullConfig, out: Path, suite_dir: Path | None) -> None:
    suite_dir = suite_dir or out / "suite"
    clients, _ = load_suite(suite_dir)
    dcfg: DistillConfig = cfg.get("distill") or DistillConfig()
    anchors_dir = out / "anchors"
    anchors_dir.mkdir(parents=True, exist_ok=True)
    for c in clients:
        client_cfg = DistillConfig(**{**dcfg.__dict__, "seed": dcfg.seed * 100003 + c.client_id})
        anchors = distill(c.train, client_cfg)
        save_anchors(anchors, anchors_dir / f"client_{c.client_id}.csv", config_hash=cfg.hash)
    print(f"wrote {len(clients)} anchor sets to {anchors_dir}")


def cmd_run(cfg: FullConfig, out: Path, suite_dir: Path | None, anchors_dir: Path | None) -> None:
    t0 = time.monotonic()
    suite_dir = suite_dir or out / "suite"
    clients, _ = load_suite(suite_dir)
    run_cfg: RunConfig = cfg.get("run") or RunConfig()
    run_cfg.validate()
    client_anchors = None
    if run_cfg.algorithm in ("desa", "logit-only"):
        anchors_dir = anchors_dir or out / "anchors"
        client_anchors = [
            load_anchors(anchors_dir / f"client_{c.client_id}.csv") for c in clients
        ]
    report = run_experiment(run_cfg, clients, client_anchors)
    out.mkdir(parents=True, exist_ok=True)
    _write_metrics_csv(out / "metrics.csv", report.metrics)

    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    for c in report.clients:
        save_model(c.model, ckpt_dir / f"client_{c.client_id}.bin")
    (ckpt_dir / "manifest.json").write_text(json.dumps(
        {"config_hash": cfg.hash, "clients": [c.client_id for c in report.clients]},
        indent=2, sort_keys=True,
    ))

    acc = evaluate_all([c.model for c in report.clients], clients)
    probe = None
    if "probe" in cfg.sections and report.clients[0].anchors is not None:
        anchors = report.clients[0].anchors
        zs = [c.broadcast_logits for c in report.clients if c.broadcast_logits is not None]
        teacher = np.mean(zs, axis=0) if zs else None
        probe = bound_probe(clients, anchors, teacher, cfg["probe"],
                            lam_reg=run_cfg.lam_reg, lam_kd=run_cfg.lam_kd)
    report_doc = {
        "config": cfg.raw,
        "config_hash": cfg.hash,
        "seed": run_cfg.seed,
        "algorithm": run_cfg.algorithm,
        "accuracy_matrix": acc.matrix.tolist(),
        "averaged_global_accuracy": acc.global_avg,
        "averaged_local_accuracy": acc.local_avg,
        "comm_total_floats": report.comm.total_floats(),
        "comm_by_kind": {k: report.comm.total_floats(k) for k in sorted(report.comm.kinds())},
        "bound_probe": probe.to_dict() if probe else None,
        "metrics_file": "metrics.csv",
        # the only non-deterministic key in this file
        "timing": {"timestamp": time.time(), "wall_clock_s": time.monotonic() - t0},
    }
    (out / "report.json").write_text(json.dumps(report_doc, indent=2, sort_keys=True))
    print(f"averaged global accuracy: {acc.global_avg:.4f}  "
          f"local: {acc.local_avg:.4f}  -> {out / 'report.json'}")


def cmd_eval(cfg: FullConfig, out: Path, suite_dir: Path | None, force: bool) -> None:
    suite_dir = suite_dir or out / "suite"
    clients, _ = load_suite(suite_dir)
    ckpt_dir = out / "checkpoints"
    manifest = json.loads((ckpt_dir / "manifest.json").read_text())
    if manifest["config_hash"] != cfg.hash and not force:
        raise ConfigError(
            f"checkpoint config hash {manifest['config_hash']} does not match "
            f"current config {cfg.hash}; pass --force to evaluate anyway"
        )
    models = [load_model(ckpt_dir / f"client_{cid}.bin") for cid in manifest["clients"]]
    acc = evaluate_all(models, clients)
    path = out / "accuracy_matrix.csv"
    with open(path, "w") as fh:
        n = len(models)
        fh.write("model," + ",".join(f"client_{j}" for j in range(n)) + "\n")
        for i in range(n):
            fh.write(f"{i}," + ",".join(f"{v:.17g}" for v in acc.matrix[i]) + "\n")
    print(f"averaged global accuracy: {acc.global_avg:.4f} -> {path}")


def cmd_comm_audit(cfg: FullConfig, out: Path) -> None:
    section = cfg.get("comm_audit")
    if section is None:
        raise ConfigError("config is missing the 'comm_audit' section")
    ledger = comm_audit(**section)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"config_hash": cfg.hash, **ledger.to_dict()}
    (out / "comm_audit.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    print(json.dumps(ledger.to_dict()))


def cmd_grad_check(seed: int) -> int:
    results = run_grad_check_table(seed=seed)
    width = max(len(r.loss_name) for r in results)
    ok = True
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.arch_id:8s} {r.loss_name:{width}s}  max_rel_err={r.max_rel_error:.3e}  {status}")
        ok = ok and r.passed
    return 0 if ok else 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anchorfed")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="config override, e.g. run.lam_kd=0 (repeatable)")
        return p

    common(sub.add_parser("gen-data", help="generate a multi-client dataset suite"))
    p = common(sub.add_parser("distill", help="distill per-client anchor sets"))
    p.add_argument("--suite-dir", type=Path, default=None)
    p = common(sub.add_parser("run", help="run a training experiment"))
    p.add_argument("--suite-dir", type=Path, default=None)
    p.add_argument("--anchors-dir", type=Path, default=None)
    p = common(sub.add_parser("eval", help="evaluate saved checkpoints"))
    p.add_argument("--suite-dir", type=Path, default=None)
    p.add_argument("--force", action="store_true", help="ignore config hash mismatch")
    common(sub.add_parser("comm-audit", help="write the communication-cost ledger"))
    common(sub.add_parser("grad-check", help="finite-difference check of all loss gradients"))
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "grad-check":
            return cmd_grad_check(seed=args.seed or 0)
        cfg = load_config(args.config, args.set, args.seed)
        out: Path = args.out
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "gen-data":
            cmd_gen_data(cfg, out)
        elif args.command == "distill":
            cmd_distill(cfg, out, args.suite_dir)
        elif args.command == "run":
            cmd_run(cfg, out, args.suite_dir, args.anchors_dir)
        elif args.command == "eval":
            cmd_eval(cfg, out, args.suite_dir, args.force)
        elif args.command == "comm-audit":
            cmd_comm_audit(cfg, out)
        return 0
    except (ConfigError, DataError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
