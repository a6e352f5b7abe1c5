"""Command-line entry points.

Subcommands: ``gen-data`` materializes a synthetic benchmark to CSV,
``run`` executes the federated protocol and writes results, transcript,
and audit report, ``oracle`` runs the centralized reference pipeline,
``compare`` joins results files, and ``audit`` re-checks a transcript.
``--seed`` overrides the master seed everywhere; verbosity is set by
the FREDA_LOG environment variable (DEBUG/INFO/WARNING/ERROR).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from .config import load_config, with_overrides
from .datamodel import Dataset, write_dataset_csv
from .errors import FredaError
from .oracle import run_oracle
from .protocol import Transcript, audit_transcript, run_full_protocol
from .protocol.engine import load_run_data

logger = logging.getLogger(__name__)

__all__ = ["main"]


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _load_results_csv(path: Path) -> dict:
    """Results rows keyed by domain id; comment header lines skipped."""
    rows = {}
    with path.open(newline="") as fh:
        filtered = (line for line in fh if not line.startswith("#"))
        for row in csv.DictReader(filtered):
            rows[int(row["domain_id"])] = {
                "mae_freda": float(row["mae_freda"]),
                "mae_enls": float(row["mae_enls"]),
                "lambda_used": float(row["lambda_used"]),
                "n_samples": int(row["n_samples"]),
            }
    if not rows:
        raise FredaError(f"{path}: no result rows")
    return rows


def _read_sentinels(path: Path) -> list:
    values = []
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            values.append(float(line))
    return values


def cmd_gen_data(args) -> int:
    cfg = with_overrides(load_config(args.config), seed=args.seed)
    shards, target, similarity = load_run_data(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, shard in enumerate(shards):
        write_dataset_csv(shard, out / f"source_{i}.csv")
    write_dataset_csv(target, out / "target.csv")
    with (out / "similarities.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain_id", "similarity"])
        for dm in sorted(similarity):
            w.writerow([dm, repr(similarity[dm])])
    sizes = ", ".join(str(s.n_samples) for s in shards)
    print(f"wrote {len(shards)} source shard(s) (sizes {sizes}) to {out}")
    print(
        f"target: {target.n_samples} samples, {target.n_features} features, "
        f"{len(set(target.domain_ids.tolist()))} domain(s)"
    )
    return 0


def cmd_run(args) -> int:
    cfg = with_overrides(
        load_config(args.config),
        seed=args.seed,
        clients=args.clients,
        transport=args.transport,
        out_dir=args.out,
    )
    result = run_full_protocol(cfg)
    report = audit_transcript(result.transcript)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "results.csv", result.metrics_csv())
    result.transcript.write_jsonl(out / "transcript.jsonl", inline_payloads=cfg.inline_payloads)
    _write_text(out / "audit.txt", report.to_text())
    model_lines = ["domain_id," + ",".join(f"coef_{j}" for j in range(result.hp.shape[0]))]
    for dm in sorted(result.models):
        beta = result.models[dm].beta
        model_lines.append(f"{dm}," + ",".join(repr(float(b)) for b in beta))
    _write_text(out / "models.csv", "\n".join(model_lines) + "\n")

    for m in result.metrics:
        print(
            f"domain {m.domain_id}: n={m.n_samples} lambda={m.lambda_used:.6g} "
            f"mae={m.mae_freda:.4f} baseline={m.mae_enls:.4f}"
        )
    for note in result.notes:
        print(f"note: {note}")
    print(f"results digest {result.digest()}")
    print(f"audit {'clean' if report.clean else 'FAILED'}; outputs in {out}")
    return 0 if report.clean else 1


def cmd_oracle(args) -> int:
    cfg = with_overrides(load_config(args.config), seed=args.seed)
    result = run_oracle(cfg)
    out = Path(cfg.out_dir)
    _write_text(out / "oracle_results.csv", result.metrics_csv())
    for m in result.metrics:
        print(
            f"domain {m.domain_id}: n={m.n_samples} lambda={m.lambda_used:.6g} "
            f"mae={m.mae_freda:.4f} baseline={m.mae_enls:.4f}"
        )
    print(f"oracle results in {out / 'oracle_results.csv'}")
    return 0


def cmd_compare(args) -> int:
    paths = [Path(p) for p in args.results]
    tables = [_load_results_csv(p) for p in paths]
    domains = sorted(tables[0])
    for path, table in zip(paths[1:], tables[1:]):
        if sorted(table) != domains:
            raise FredaError(
                f"domain sets differ: {paths[0]} has {domains}, "
                f"{path} has {sorted(table)}"
            )
    header = ["domain_id"]
    for i in range(len(tables)):
        header += [f"mae_freda_{i + 1}", f"mae_enls_{i + 1}", f"delta_vs_enls_{i + 1}"]
    for i in range(1, len(tables)):
        header.append(f"delta_freda_{i + 1}_vs_1")
    writer = csv.writer(sys.stdout)
    writer.writerow(header)
    for dm in domains:
        row = [dm]
        for table in tables:
            entry = table[dm]
            row += [
                repr(entry["mae_freda"]),
                repr(entry["mae_enls"]),
                repr(entry["mae_freda"] - entry["mae_enls"]),
            ]
        base = tables[0][dm]["mae_freda"]
        for table in tables[1:]:
            row.append(repr(table[dm]["mae_freda"] - base))
        writer.writerow(row)
    return 0


def cmd_audit(args) -> int:
    transcript = Transcript.read_jsonl(Path(args.transcript))
    sentinels = _read_sentinels(Path(args.sentinels)) if args.sentinels else ()
    report = audit_transcript(transcript, sentinels=sentinels)
    sys.stdout.write(report.to_text())
    return 0 if report.clean else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="freda",
        description="Privacy-preserving federated domain adaptation for regression.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_seed(p):
        p.add_argument("--seed", type=int, default=None, help="master seed override")

    p = sub.add_parser("gen-data", help="write a synthetic benchmark to CSV files")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    add_seed(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("run", help="execute the federated protocol")
    p.add_argument("--config", required=True)
    p.add_argument("--clients", type=int, default=None, help="source client count override")
    p.add_argument("--transport", choices=("memory", "socket"), default=None)
    p.add_argument("--out", default=None, help="output directory override")
    add_seed(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("oracle", help="run the centralized reference pipeline")
    p.add_argument("--config", required=True)
    add_seed(p)
    p.set_defaults(fn=cmd_oracle)

    p = sub.add_parser("compare", help="join results files and print deltas")
    p.add_argument("results", nargs="+", help="two or more results CSV paths")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("audit", help="re-check a transcript file")
    p.add_argument("transcript")
    p.add_argument("--sentinels", default=None, help="file of planted values, one per line")
    p.set_defaults(fn=cmd_audit)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("FREDA_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.fn is cmd_compare and len(args.results) < 2:
        parser.error("compare needs at least two results files")
    try:
        return args.fn(args)
    except FredaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
