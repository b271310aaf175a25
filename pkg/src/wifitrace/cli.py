"""Operator command line.

Subcommands: gen (synthetic/fixture datasets), ingest (encrypt or share an
event stream into a store directory), query (run one application against
the store and check it against the cleartext oracle), bench (ingest/query
sweeps), report (access-pattern and transfer artifacts).

Exit codes: 0 success, 2 usage error, 3 verification failure (publisher
rejected the device, or the protocol answer differed from the oracle).
"""

from __future__ import annotations

import argparse
import json
import secrets as _secrets
import shutil
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .cquest import CipherSuite, CquestClient, CquestEncrypter
from .errors import UnauthorizedQueryError, WifitraceError
from .generator import device_name, generate_synthetic_events, location_name
from .iquest import IquestClient, IquestEncrypter
from .model import (
    ConnectivityEvent,
    SystemConfig,
    bucket_events,
    canonical_device_id,
    dataset_fingerprint,
    read_config,
    read_events_csv,
    stream_origin,
    write_config,
    write_events_csv,
)
from .oracle import CleartextRelation
from .persist import (
    CquestState,
    encode_share_epoch,
    encode_token_epoch,
    load_cquest_state,
    load_iquest_state,
    load_share_cluster,
    load_token_store,
    save_cquest_state,
    save_iquest_state,
    save_share_cluster,
    save_token_store,
)
from .publisher import NotificationRegistry, Publisher
from .servers import ShareCluster, TokenStoreServer, access_log_csv, transfer_csv

EXIT_USAGE = 2
EXIT_VERIFICATION = 3

TABLE5_DEVICES = ("0000000000D1", "0000000000D2")


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                    extra: dict):
    doc = {
        "tool": f"wifitrace {__version__}",
        "command": command,
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "args": {k: v for k, v in vars(args).items() if k != "func" and not k.startswith("_")},
    }
    doc.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(doc, indent=2, default=str))
    return doc


# -- gen --------------------------------------------------------------------------


def cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.preset == "table5":
        events = [
            ConnectivityEvent(TABLE5_DEVICES[0], "l1", 1_000),
            ConnectivityEvent(TABLE5_DEVICES[1], "l2", 2_000),
            ConnectivityEvent(TABLE5_DEVICES[0], "l2", 3_000),
            ConnectivityEvent(TABLE5_DEVICES[0], "l1", 4_000),
        ]
        capacities = {"l1": 8, "l2": 8}
        infected = [TABLE5_DEVICES[0]]
        contacts = {TABLE5_DEVICES[1]: "contact-d2@example.org"}
    else:
        events = generate_synthetic_events(
            args.devices, args.locations, args.days, rate_model=args.rate, seed=args.seed)
        capacities = {location_name(i): args.capacity for i in range(args.locations)}
        rng = np.random.default_rng(args.seed)
        devices = [device_name(i) for i in range(args.devices)]
        infected = sorted(rng.choice(devices, size=min(args.infected, args.devices),
                                     replace=False).tolist())
        contacts = {d: f"{d.lower()}@example.org" for d in devices
                    if rng.random() < args.optin_rate}
    cfg = SystemConfig(
        epoch_duration_s=args.epoch_duration,
        distance_index=args.distance_index,
        capacities=capacities,
        top_k=args.k,
    )
    write_events_csv(out / "events.csv", events)
    write_config(out / "config.txt", cfg)
    pub_dir = out / "publisher"
    pub_dir.mkdir(exist_ok=True)
    Publisher.from_device_ids(infected).save(pub_dir / "infected.json")
    NotificationRegistry(contacts=contacts).save(pub_dir / "registry.json")
    _write_manifest(out, "gen", args, {
        "dataset_fingerprint": dataset_fingerprint(out / "events.csv"),
        "event_count": len(events),
        "infected": infected,
    })
    print(f"wrote {len(events)} events, {len(capacities)} locations -> {out}")
    return 0


# -- ingest -----------------------------------------------------------------------


def cmd_ingest(args) -> int:
    data = Path(args.data)
    store = Path(args.out)
    store.mkdir(parents=True, exist_ok=True)
    cfg = read_config(data / "config.txt")
    events = read_events_csv(data / "events.csv")
    if not events:
        print("dataset is empty", file=sys.stderr)
        return EXIT_USAGE
    origin = stream_origin(events[0].timestamp_ms, cfg)
    epochs = bucket_events(events, cfg, origin)
    rng = np.random.default_rng(args.seed)

    # the timed window covers protecting the stream AND producing the
    # serialized per-server store — the outsourcing step is part of ingest
    t0 = time.perf_counter()
    if args.mode == "cquest":
        s_q, k_pko = _secrets.token_bytes(32), _secrets.token_bytes(32)
        suite = CipherSuite(s_q, k_pko, cfg)
        encrypter = CquestEncrypter(suite, cfg, rng)
        server = TokenStoreServer(expansion_cipher=suite.u_outer)
        summaries = [encrypter.ingest(ep, server) for ep in epochs]
        mode_dir = store / "cquest"
        save_token_store(mode_dir, server)
        elapsed = time.perf_counter() - t0
        save_cquest_state(mode_dir / "state.json", CquestState(
            s_q=s_q, k_pko=k_pko, counters=encrypter.counters, origin_ms=origin,
            summaries_meta={s.epoch_id: s.metadata_bytes for s in summaries}))
        metadata_bytes = max((s.metadata_bytes for s in summaries), default=0)
        store_bytes = server.storage_bytes()
    else:
        encrypter = IquestEncrypter(cfg, rng)
        cluster = ShareCluster(cfg.server_count, cfg.field_prime)
        for ep in epochs:
            encrypter.ingest(ep, cluster)
        mode_dir = store / "iquest"
        save_share_cluster(mode_dir, cluster)
        elapsed = time.perf_counter() - t0
        save_iquest_state(mode_dir / "state.json", encrypter, origin)
        metadata_bytes = encrypter.metadata_bytes()
        store_bytes = cluster.storage_bytes()

    shutil.copy(data / "events.csv", store / "events.csv")
    shutil.copy(data / "config.txt", store / "config.txt")
    if (data / "publisher").exists():
        shutil.copytree(data / "publisher", store / "publisher", dirs_exist_ok=True)
    throughput = len(events) / elapsed * 60 if elapsed > 0 else float("inf")
    _write_manifest(store, "ingest", args, {
        "mode": args.mode,
        "dataset_fingerprint": dataset_fingerprint(store / "events.csv"),
        "rows": len(events),
        "epochs": len(epochs),
        "ingest_seconds": elapsed,
        "tuples_per_minute": throughput,
        "metadata_bytes": metadata_bytes,
        "store_bytes": store_bytes,
    })
    print(f"ingested {len(events)} rows / {len(epochs)} epochs under {args.mode} "
          f"in {elapsed:.2f}s ({throughput:,.0f} tuples/min), "
          f"metadata {metadata_bytes} B, store {store_bytes} B")
    return 0


# -- query ------------------------------------------------------------------------


@dataclass
class Deployment:
    mode: str
    cfg: SystemConfig
    events: list
    oracle: CleartextRelation
    client: object
    epoch_lo: int
    epoch_hi: int


def load_deployment(store: Path, seed: int | None = None,
                    logging_enabled: bool = False) -> Deployment:
    manifest = json.loads((store / "manifest.json").read_text())
    mode = manifest["mode"]
    cfg = read_config(store / "config.txt")
    events = read_events_csv(store / "events.csv")
    publisher = Publisher.load(store / "publisher" / "infected.json")
    publisher.audit_path = store / "publisher" / "audit.jsonl"
    registry = NotificationRegistry.load(store / "publisher" / "registry.json")
    if mode == "cquest":
        state = load_cquest_state(store / "cquest" / "state.json")
        suite = CipherSuite(state.s_q, state.k_pko, cfg)
        server = load_token_store(store / "cquest", suite)
        server.logging_enabled = logging_enabled
        client = CquestClient(suite, cfg, server, state.counters, publisher, registry)
        origin = state.origin_ms
        epoch_ids = sorted(state.counters.rows_per_epoch)
    else:
        encrypter, origin = load_iquest_state(store / "iquest" / "state.json", cfg)
        cluster = load_share_cluster(store / "iquest", cfg)
        cluster.set_logging(logging_enabled)
        client = IquestClient(cfg, cluster, encrypter, publisher, registry,
                              rng=np.random.default_rng(seed))
        epoch_ids = cluster.epochs_in(-(1 << 62), 1 << 62)
    oracle = CleartextRelation(events, cfg, origin)
    return Deployment(mode, cfg, events, oracle, client,
                      min(epoch_ids), max(epoch_ids))


def _normalize(kind: str, answer) -> list:
    if kind in ("location-trace", "user-trace"):
        return sorted(answer)
    if kind == "social-distance":
        return [list(v) for v in answer]
    return [list(v) for v in answer]


def cmd_query(args) -> int:
    store = Path(args.store)
    dep = load_deployment(store, seed=args.seed)
    lo = args.epoch_from if args.epoch_from is not None else dep.epoch_lo
    hi = args.epoch_to if args.epoch_to is not None else dep.epoch_hi
    kind = args.application
    opt = args.opt

    try:
        if kind in ("location-trace", "user-trace"):
            if not args.device:
                print("--device is required for trace queries", file=sys.stderr)
                return EXIT_USAGE
            device = canonical_device_id(args.device)
            if kind == "location-trace":
                report = dep.client.location_trace(device, lo, hi)
                oracle_answer = dep.oracle.location_trace(device, lo, hi)
            elif dep.mode == "cquest":
                counter_mode = "epoch-location" if opt == "counters" else "cmax"
                report = dep.client.user_trace(device, lo, hi, counter_mode=counter_mode)
                oracle_answer = dep.oracle.user_trace(device, lo, hi)
            else:
                report = dep.client.user_trace(device, lo, hi)
                oracle_answer = dep.oracle.user_trace(device, lo, hi)
        elif kind == "social-distance":
            if dep.mode == "cquest":
                mode = {"none": "none", "token": "token", "htab": "htab"}.get(opt)
                if mode is None:
                    print(f"--opt {opt} is not valid for cquest social-distance", file=sys.stderr)
                    return EXIT_USAGE
                report = dep.client.social_distance(lo, hi, opt=mode)
            else:
                if opt not in ("none", "aggregate"):
                    print(f"--opt {opt} is not valid for iquest social-distance", file=sys.stderr)
                    return EXIT_USAGE
                report = dep.client.social_distance(lo, hi, aggregated=(opt == "aggregate"),
                                                    include_offenders=True)
            oracle_answer = [(v.location_id, v.epoch_id, v.unique_count)
                             for v in dep.oracle.social_distance(lo, hi)]
        elif kind == "crowd-flow":
            k = args.k if args.k is not None else dep.cfg.top_k
            if k <= 0:
                print("--k must be positive", file=sys.stderr)
                return EXIT_USAGE
            if dep.mode == "cquest":
                report = dep.client.crowd_flow(lo, hi, k, opt=opt)
            else:
                if opt not in ("none", "aggregate"):
                    print(f"--opt {opt} is not valid for iquest crowd-flow", file=sys.stderr)
                    return EXIT_USAGE
                report = dep.client.crowd_flow(lo, hi, k, aggregated=(opt == "aggregate"))
            oracle_answer = dep.oracle.crowd_flow(lo, hi, k)
        else:  # unreachable behind argparse choices
            return EXIT_USAGE
    except UnauthorizedQueryError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_VERIFICATION
    except WifitraceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    protocol_norm = _normalize(kind, report.answer)
    oracle_norm = _normalize(kind, oracle_answer)
    verdict = "EQUAL" if protocol_norm == oracle_norm else "DIFFER"
    print(f"protocol[{dep.mode}] {kind}: {protocol_norm}")
    print(f"oracle            {kind}: {oracle_norm}")
    print(f"verdict: {verdict}  "
          f"(sent {report.record.total_sent} B, received {report.record.total_received} B, "
          f"{report.record.wall_time_s * 1000:.1f} ms)")

    out_dir = Path(args.out) if args.out else store
    results_dir = out_dir / "results"
    results_dir.mkdir(parents=True, exist_ok=True)
    result_doc = {
        "query_id": report.query_id,
        "kind": kind,
        "mode": dep.mode,
        "params": report.params,
        "protocol_answer": protocol_norm,
        "oracle_answer": oracle_norm,
        "verdict": verdict,
        "bytes_sent": report.record.total_sent,
        "bytes_received": report.record.total_received,
        "wall_time_s": report.record.wall_time_s,
    }
    (results_dir / f"{report.query_id}.json").write_text(json.dumps(result_doc, indent=2))
    _write_manifest(out_dir, "query", args, {
        "mode": dep.mode,
        "dataset_fingerprint": dataset_fingerprint(store / "events.csv"),
        "queries": [result_doc],
    })
    return 0 if verdict == "EQUAL" else EXIT_VERIFICATION


# -- bench ------------------------------------------------------------------------


def cmd_bench(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sizes = [int(s) for s in args.sizes.split(",") if s]
    metrics_dir = out / "metrics"
    metrics_dir.mkdir(exist_ok=True)
    rows = ["mode,target_rows,rows,epochs,ingest_s,tuples_per_min,metadata_bytes,store_bytes"]
    reports = []
    for size in sizes:
        days = size / (args.devices * args.rate)
        events = generate_synthetic_events(args.devices, args.locations, days,
                                           rate_model=args.rate, seed=args.seed)
        capacities = {location_name(i): args.capacity for i in range(args.locations)}
        cfg = SystemConfig(capacities=capacities, distance_index=args.distance_index)
        epochs = bucket_events(events, cfg)
        oracle = CleartextRelation(events, cfg)
        lo, hi = min(oracle.epoch_ids), max(oracle.epoch_ids)
        infected = device_name(0)
        publisher = Publisher.from_device_ids([infected])

        suite = CipherSuite(_secrets.token_bytes(32), _secrets.token_bytes(32), cfg)
        encrypter = CquestEncrypter(suite, cfg, np.random.default_rng(args.seed))
        server = TokenStoreServer(expansion_cipher=suite.u_outer)
        t0 = time.perf_counter()
        summaries = []
        for ep in epochs:
            summaries.append(encrypter.ingest(ep, server))
            encode_token_epoch([server.get_row(ep.epoch_id, j)
                                for j in range(server.row_count(ep.epoch_id))])
        t_cq = time.perf_counter() - t0
        rows.append(f"cquest,{size},{len(events)},{len(epochs)},{t_cq:.3f},"
                    f"{len(events) / t_cq * 60:.0f},"
                    f"{max((s.metadata_bytes for s in summaries), default=0)},"
                    f"{server.storage_bytes()}")
        ccli = CquestClient(suite, cfg, server, encrypter.counters, publisher,
                            NotificationRegistry())
        reports += [
            ccli.location_trace(infected, lo, hi),
            ccli.user_trace(infected, lo, hi, counter_mode="epoch-location"),
            ccli.social_distance(lo, hi, opt="none"),
            ccli.social_distance(lo, hi, opt="htab"),
            ccli.crowd_flow(lo, hi, args.k),
        ]

        iencrypter = IquestEncrypter(cfg, np.random.default_rng(args.seed))
        cluster = ShareCluster(cfg.server_count, cfg.field_prime)
        t0 = time.perf_counter()
        for ep in epochs:
            blocks = iencrypter.share_epoch(ep)
            for block in blocks:
                encode_share_epoch(block)
            cluster.ingest_epoch(blocks)
        t_iq = time.perf_counter() - t0
        rows.append(f"iquest,{size},{len(events)},{len(epochs)},{t_iq:.3f},"
                    f"{len(events) / t_iq * 60:.0f},"
                    f"{iencrypter.metadata_bytes()},{cluster.storage_bytes()}")
        icli = IquestClient(cfg, cluster, iencrypter, publisher, NotificationRegistry(),
                            rng=np.random.default_rng(args.seed))
        reports += [
            icli.location_trace(infected, lo, hi),
            icli.user_trace(infected, lo, hi),
            icli.social_distance(lo, hi),
            icli.social_distance(lo, hi, aggregated=True),
            icli.crowd_flow(lo, hi, args.k),
        ]
        print(f"size {size}: cquest {len(events) / t_cq * 60:,.0f} tuples/min, "
              f"iquest {len(events) / t_iq * 60:,.0f} tuples/min")

    (metrics_dir / "ingest.csv").write_text("\n".join(rows) + "\n")
    (metrics_dir / "transfer.csv").write_text(transfer_csv(reports))
    _write_manifest(out, "bench", args, {"sizes": sizes,
                                         "outputs": ["metrics/ingest.csv", "metrics/transfer.csv"]})
    print(f"bench metrics -> {metrics_dir}")
    return 0


# -- report -----------------------------------------------------------------------


def cmd_report(args) -> int:
    store = Path(args.store)
    out = Path(args.out) if args.out else store / "report"
    out.mkdir(parents=True, exist_ok=True)
    dep = load_deployment(store, seed=args.seed, logging_enabled=True)
    devices = sorted({ev.device_id for ev in dep.events})
    rng = np.random.default_rng(args.seed)
    probe = [devices[i] for i in rng.choice(len(devices), size=min(args.queries, len(devices)),
                                            replace=False)]
    # probing needs publisher approval; issue a probe-only attestation
    dep.client.publisher = Publisher.from_device_ids(probe)
    reports = [dep.client.location_trace(d, dep.epoch_lo, dep.epoch_hi) for d in probe]
    metrics = out / "metrics"
    plots = out / "plots"
    metrics.mkdir(exist_ok=True)
    plots.mkdir(exist_ok=True)
    (metrics / "access_log.csv").write_text(access_log_csv([r.record for r in reports]))
    (metrics / "transfer.csv").write_text(transfer_csv(reports))
    _plot_access_patterns(plots / "access_patterns.png", reports, dep.mode)
    _plot_transfer(plots / "transfer.png", reports)
    _write_manifest(out, "report", args, {
        "mode": dep.mode,
        "queries": [r.query_id for r in reports],
        "outputs": ["metrics/access_log.csv", "metrics/transfer.csv",
                    "plots/access_patterns.png", "plots/transfer.png"],
    })
    print(f"report artifacts -> {out}")
    return 0


def _row_positions(record, epoch_order: dict[int, int]) -> list[int]:
    flat = []
    for server_index in sorted(record.accessed_rows):
        for epoch_id, row_index, _col in record.accessed_rows[server_index]:
            flat.append(epoch_order.get(epoch_id, 0) * 100000 + row_index)
    return flat


def _plot_access_patterns(path: Path, reports, mode: str):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = sorted({e for r in reports for touches in r.record.accessed_rows.values()
                     for e, _, _ in touches})
    order = {e: i for i, e in enumerate(epochs)}
    fig, ax = plt.subplots(figsize=(8, 5))
    for i, report in enumerate(reports):
        ys = _row_positions(report.record, order)
        ax.scatter(range(len(ys)), ys, s=4, label=report.query_id)
    ax.set_xlabel("access sequence index")
    ax.set_ylabel("row position (epoch-major)")
    ax.set_title(f"{mode}: rows touched per query")
    if len(reports) <= 10:
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_transfer(path: Path, reports):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 4))
    labels = [r.query_id for r in reports]
    ax.bar(labels, [r.record.total_sent for r in reports], label="sent")
    ax.bar(labels, [r.record.total_received for r in reports],
           bottom=[r.record.total_sent for r in reports], label="received")
    ax.set_ylabel("bytes")
    ax.tick_params(axis="x", rotation=90, labelsize=6)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# -- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wifitrace",
        description="Privacy-preserving WiFi-presence analytics over simulated untrusted servers.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset (or the worked fixture)")
    p.add_argument("--out", required=True)
    p.add_argument("--devices", type=int, default=50)
    p.add_argument("--locations", type=int, default=10)
    p.add_argument("--days", type=float, default=0.25)
    p.add_argument("--rate", type=float, default=400.0,
                   help="mean events per device per day")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--capacity", type=int, default=8)
    p.add_argument("--distance-index", type=float, default=0.25, dest="distance_index")
    p.add_argument("--epoch-duration", type=int, default=900, dest="epoch_duration")
    p.add_argument("--k", type=int, default=5, help="default crowd-flow cutoff")
    p.add_argument("--infected", type=int, default=2,
                   help="how many devices the publisher attests as infected")
    p.add_argument("--optin-rate", type=float, default=0.8, dest="optin_rate")
    p.add_argument("--preset", choices=["table5"], default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("ingest", help="protect a dataset into a store directory")
    p.add_argument("--mode", choices=["cquest", "iquest"], required=True)
    p.add_argument("--data", required=True, help="directory produced by gen")
    p.add_argument("--out", required=True, help="store directory to create")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("query", help="run one application and compare with the oracle")
    p.add_argument("application",
                   choices=["location-trace", "user-trace", "social-distance", "crowd-flow"])
    p.add_argument("--store", required=True)
    p.add_argument("--device", default=None)
    p.add_argument("--from", dest="epoch_from", type=int, default=None)
    p.add_argument("--to", dest="epoch_to", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--opt", choices=["none", "counters", "token", "htab", "aggregate"],
                   default="none")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("bench", help="ingest/query sweeps over dataset sizes")
    p.add_argument("--out", required=True)
    p.add_argument("--sizes", default="1000,5000,20000")
    p.add_argument("--devices", type=int, default=50)
    p.add_argument("--locations", type=int, default=10)
    p.add_argument("--rate", type=float, default=400.0)
    p.add_argument("--capacity", type=int, default=8)
    p.add_argument("--distance-index", type=float, default=0.25, dest="distance_index")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="render access-pattern and transfer artifacts")
    p.add_argument("--store", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--queries", type=int, default=10)
    p.add_argument("--seed", type=int, default=3)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except WifitraceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
