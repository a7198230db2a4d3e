"""Command-line interface: ``bamg gen | build | bench | verify | info``.

Exit codes: 0 success, 1 usage error, 2 verification failure, 3 I/O error.
The default worker count comes from ``BAMG_THREADS`` (default 1).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .basegraph import Graph, GraphBuildParams, build_nsg, has_monotonic_path
from .blocks import BlockAssignment, assign_blocks, assign_blocks_random, block_stats
from .bmrng import (PruneParams, all_pairs_io_paths, build_bamg, build_bmrng_exact,
                    cross_block_degrees, io_path_length_trend)
from .core import (Dataset, FormatError, clustered_split, exact_knn_batch, load_fvecs,
                   load_ivecs, uniform_dataset, write_fvecs, write_ivecs)
from .navgraph import NavLayers, build_navigation
from .pq import default_m_sub, encode, train_pq
from .search import SearchParams, evaluate, search_bamg, search_baseline
from .storage import (INDEX_FILES, BaselineIndex, DiskIndex, LayoutParams, open_index,
                      write_index, write_index_baseline)

log = logging.getLogger("bamg")

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_IO = 0, 1, 2, 3
CSV_COLUMNS = ["engine", "l", "k", "alpha", "recall", "nio", "graph_reads", "raw_reads",
               "qps_wallclock"]


class UsageError(Exception):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage '{stage}' failed: {exc}")
        self.stage = stage
        self.__cause__ = exc


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("BAMG_THREADS", "8")))
    except ValueError:
        return 8


# ---------------------------------------------------------------------------
# build
# ---------------------------------------------------------------------------

@dataclass
class BuildConfig:
    data: str = ""
    out: str = ""
    layout: str = "bamg"
    R: int = 24
    L_build: int = 64
    C_cand: int = 512
    knn_k: int = 32
    block_bytes: int = 4096
    R_max: int = 31
    alpha: int = 4
    beta: float = 1.1
    gamma: int = 64
    m_sub: int = 0
    k_codes: int = 256
    pq_iters: int = 12
    pq_train: int = 50_000
    seed: int = 0
    ablate_bmrng: bool = False
    threads: int = 1

    def check(self) -> None:
        """Re-run every owning module's parameter checks."""
        if self.layout not in ("bamg", "baseline"):
            raise ValueError("layout must be 'bamg' or 'baseline'")
        self.graph_params()
        lp = self.layout_params()
        self.prune_params().check_capacity(lp.capacity)
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if not 1 <= self.k_codes <= 256:
            raise ValueError("k_codes must be in [1, 256]")
        if self.m_sub < 0:
            raise ValueError("m_sub must be >= 0 (0 picks a default)")

    def graph_params(self) -> GraphBuildParams:
        return GraphBuildParams(R=self.R, L_build=self.L_build, C_cand=self.C_cand,
                                seed=self.seed, knn_k=self.knn_k)

    def layout_params(self) -> LayoutParams:
        return LayoutParams(self.block_bytes, self.R_max)

    def prune_params(self) -> PruneParams:
        return PruneParams(self.alpha, self.beta)


def _stage(name: str, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except Exception as exc:  # noqa: BLE001 - every failure is reported with its stage
        raise StageError(name, exc) from exc


def _degree_summary(g: Graph, b: BlockAssignment) -> dict:
    intra, cross = cross_block_degrees(g, b)
    return {"avg_degree": float(g.degrees().mean()), "avg_intra": float(intra.mean()),
            "avg_cross": float(cross.mean()), "max_degree": int(g.degrees().max())}


def build_index(ds: Dataset, cfg: BuildConfig, out: str | os.PathLike) -> dict:
    """Run the whole pipeline into ``out`` (created fresh); returns the report."""
    cfg.check()
    t0 = time.perf_counter()
    out = Path(out)
    lp = cfg.layout_params()
    report: dict = {"n": ds.n, "dim": ds.dim, "layout": cfg.layout, "capacity": lp.capacity}
    nsg = _stage("nsg", build_nsg, ds, cfg.graph_params())
    report["nsg_edges"] = nsg.num_edges
    report["nsg_repair_edges"] = nsg.stats["repair_edges"]
    m_sub = cfg.m_sub or default_m_sub(ds.dim)
    k_codes = min(cfg.k_codes, ds.n)
    cb = _stage("pq", train_pq, ds, m_sub, k_codes, cfg.pq_iters, cfg.seed, cfg.pq_train)
    codes = _stage("pq", encode, cb, ds)
    report["pq"] = {"m_sub": m_sub, "k_codes": k_codes}
    if cfg.layout == "baseline":
        entry = int(nsg.stats["entry"])
        ix = _stage("write", write_index_baseline, nsg, ds, cb, codes, lp, out, entry,
                    {"build": _cfg_header(cfg)})
        report["truncated_edges"] = ix.header["truncated_edges"]
        report["avg_degree"] = float(nsg.degrees().mean())
        ix.close()
        report["wall_seconds"] = time.perf_counter() - t0
        return report
    b = _stage("assign", assign_blocks, nsg, lp.capacity, ds)
    p = cfg.prune_params()
    if cfg.ablate_bmrng:
        g = nsg
        report["edges"] = {"ablated": True}
    else:
        g = _stage("bamg", build_bamg, ds, nsg, b, p)
        report["edges"] = {k: g.stats[k] for k in ("intra_kept", "cross_kept", "cross_pruned",
                                                   "sibling_pairs", "sibling_edges_added")}
    report["degrees_nsg"] = _degree_summary(nsg, b)
    report["degrees_index"] = _degree_summary(g, b)
    st = block_stats(g, b)
    report["intra_edge_fraction"] = st.intra_edge_fraction
    report["rho_base"] = st.rho
    nl = _stage("navigation", build_navigation, ds, g, b, p, cfg.gamma, cfg.graph_params(),
                cfg.ablate_bmrng)
    report["layer_sizes"] = nl.sizes()
    report["layer_shrink"] = nl.shrink_factors()
    report["nav_forced_drop"] = nl.forced_drop
    ix = _stage("write", write_index, g, b, ds, cb, codes, lp, out,
                {"build": _cfg_header(cfg), "entry": int(nl.base_medoid)})
    _stage("write", (out / "nav.bin").write_bytes, nl.to_bytes())
    report["truncated_edges"] = ix.header["truncated_edges"]
    ix.close()
    report["wall_seconds"] = time.perf_counter() - t0
    return report


def _cfg_header(cfg: BuildConfig) -> dict:
    d = asdict(cfg)
    for k in ("data", "out", "threads"):
        d.pop(k)
    return d


def cmd_build(cfg: BuildConfig, report_path: str | None = None) -> dict:
    """Build into a temporary sibling directory, then move it into place."""
    try:
        ds = load_fvecs(cfg.data)
    except (OSError, FormatError) as exc:
        raise OSError(f"cannot read dataset {cfg.data}: {exc}") from exc
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=out.name + ".", dir=out.parent))
    try:
        report = build_index(ds, cfg, tmp)
        if out.exists():
            shutil.rmtree(out)
        tmp.rename(out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    text = format_report(report)
    if report_path:
        Path(report_path).write_text(text)
    else:
        sys.stdout.write(text)
    return report


def format_report(report: dict) -> str:
    lines = []
    for k in sorted(report):
        v = report[k]
        lines.append(f"{k}: {json.dumps(v, sort_keys=True) if isinstance(v, (dict, list)) else v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def load_engine(index_dir: str | os.PathLike, engine: str, sp_base: SearchParams):
    """Return ``(make_engine(sp) -> callable, index)`` for an index directory."""
    ix = open_index(index_dir)
    if engine == "baseline":
        if not isinstance(ix, BaselineIndex):
            raise UsageError("engine 'baseline' needs a baseline-layout index")
        return (lambda sp: (lambda q: search_baseline(ix, q, sp))), ix
    if not isinstance(ix, DiskIndex):
        raise UsageError(f"engine '{engine}' needs a block-aware index")
    nav_path = Path(index_dir) / "nav.bin"
    data = nav_path.read_bytes() if nav_path.exists() else b""
    nl = NavLayers.from_bytes(data) if data else None
    no_nav = engine == "bamg-no-nav"
    if no_nav:
        nl = None

    def make(sp: SearchParams):
        sp = SearchParams(**{**asdict(sp), "no_nav": no_nav})
        return lambda q: search_bamg(ix, nl, q, sp)
    return make, ix


def cmd_bench(index_dir, queries_path, gt_path, ls, k: int, engine: str = "bamg",
              alpha: int = 4, entry_count: int = 8, threads: int = 1, out=None) -> list[dict]:
    queries = load_fvecs(queries_path).vectors
    gt = load_ivecs(gt_path)
    make, ix = load_engine(index_dir, engine, SearchParams(k=k, l=max(ls)))
    if queries.shape[1] != ix.dim:
        raise UsageError(f"query dimension {queries.shape[1]} != index dimension {ix.dim}")
    if len(gt) < len(queries) or gt.shape[1] < k:
        raise UsageError("ground truth does not cover every query with k entries")
    rows = []
    for l in ls:
        sp = SearchParams(k=k, l=max(l, k), alpha=alpha, entry_count=entry_count)
        m = evaluate(queries, gt, make(sp), k, threads)
        rows.append({"engine": engine, "l": sp.l, "k": k, "alpha": alpha, "recall": m.recall,
                     "nio": m.nio, "graph_reads": m.graph_reads, "raw_reads": m.raw_reads,
                     "qps_wallclock": m.qps})
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: (f"{r[c]:.6f}" if isinstance(r[c], float) else r[c]) for c in CSV_COLUMNS})
    finally:
        if out:
            fh.close()
    return rows


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def _load_graph(path: str) -> Graph:
    raw = Path(path).read_bytes()
    if raw[:4] == b"BGRF":
        return Graph.from_bytes(raw)
    return Graph.from_text(raw.decode())


def _load_labels(path: str) -> np.ndarray:
    return np.array([int(t) for t in Path(path).read_text().split()], dtype=np.int64)


def _counterexample(g: Graph, b: BlockAssignment, u: int, q: int) -> dict:
    return {"pair": [u, q], "block_u": int(b.label[u]), "block_q": int(b.label[q]),
            "adjacency": {str(x): g.neighbors(x).tolist() for x in (u, q)},
            "assignment": b.label.tolist() if b.n <= 64 else "omitted (n > 64)"}


def _in_block_failures(g: Graph, b: BlockAssignment, ds: Dataset, limit: int = 5) -> list:
    """Intra-block pairs without a monotone path inside their block."""
    from .blocks import intra_block_graph
    intra = intra_block_graph(g, b)
    bad = []
    for mem in b.members:
        sub = ds.subset(mem)
        pos = {int(v): i for i, v in enumerate(mem)}
        local = Graph.from_lists([[pos[int(x)] for x in intra.neighbors(int(v))] for v in mem])
        for i in range(len(mem)):
            for j in range(len(mem)):
                if i != j and not has_monotonic_path(local, sub, i, j):
                    bad.append([int(mem[i]), int(mem[j])])
                    if len(bad) >= limit:
                        return bad
    return bad


def cmd_verify(mode: str, index: str | None = None, data: str | None = None,
               graph: str | None = None, labels: str | None = None, n: int | None = None, dim: int = 2,
               capacity: int = 8, assign: str = "random", seed: int = 0, trials: int = 200) -> dict:
    """Run one verifier; returns a JSON-able result with a ``pass`` field."""
    res: dict = {"mode": mode}
    if mode in ("bmrng-exact", "io-paths"):
        if graph:
            if not (data and labels):
                raise UsageError("--graph needs --data and --labels")
            ds = load_fvecs(data)
            g = _load_graph(graph)
            label = _load_labels(labels)
            b = BlockAssignment.from_labels(label, max(int(np.bincount(label).max()), capacity))
        elif index and mode == "io-paths":
            ix = DiskIndex(index)
            g, b, ds = ix.load_all()
            ix.close()
        else:
            ds = load_fvecs(data) if data else uniform_dataset(n or 200, dim, seed)
            if assign == "bnf":
                b = assign_blocks(build_nsg(ds, GraphBuildParams(R=min(16, ds.n - 1), L_build=32)),
                                  capacity, ds)
            else:
                b = assign_blocks_random(ds.n, capacity, seed)
            g = build_bmrng_exact(ds, b)
        if ds.n > 5_000:
            raise UsageError(f"exhaustive verification is limited to 5,000 nodes, got {ds.n}")
        checked, fails = all_pairs_io_paths(g, b, ds)
        res.update({"n": ds.n, "pairs_checked": checked, "failures": len(fails)})
        if fails:
            res["counterexamples"] = [_counterexample(g, b, u, q) for u, q in fails[:3]]
        if mode == "bmrng-exact":
            bad_in = _in_block_failures(g, b, ds)
            res["in_block_failures"] = bad_in
            fails = fails or bad_in
        res["pass"] = not fails
    elif mode == "roundtrip":
        if not index:
            raise UsageError("roundtrip needs --index")
        res.update(_roundtrip(index, data))
    elif mode == "trend":
        ds = load_fvecs(data) if data else uniform_dataset(n or 1000, dim, seed)
        caps = [1, 4, 16, 64]
        trend = io_path_length_trend(ds, caps, trials, seed)
        vals = [trend[c] for c in caps]
        res.update({"n": ds.n, "mean_blocks": {str(c): trend[c] for c in caps},
                    "pass": all(a > b_ for a, b_ in zip(vals, vals[1:]))})
    else:
        raise UsageError(f"unknown verify mode {mode!r}")
    return res


def _roundtrip(index: str, data: str | None) -> dict:
    ix = open_index(index)
    with tempfile.TemporaryDirectory() as tmp:
        if isinstance(ix, DiskIndex):
            g, b, ds = ix.load_all()
            codes = None if ix.pq is None else ix.codes_by_oid[ix.oid_of_vid]
            extra = {k: v for k, v in ix.header.items()
                     if k not in ("layout", "n", "dim", "block_bytes", "R_max", "capacity",
                                  "graph_blocks", "raw_blocks", "truncated_edges")}
            write_index(g, b, ds, ix.pq, codes, ix.lp, tmp, extra)
            names = ["graph.blk", "vectors.blk", "pq.bin"]
            # truncation already happened, so only the truncation count may differ
            h1 = {k: v for k, v in ix.header.items() if k != "truncated_edges"}
        else:
            g, ds = ix.load_all()
            extra = {k: v for k, v in ix.header.items()
                     if k not in ("layout", "n", "dim", "block_bytes", "R_max", "record_bytes",
                                  "graph_blocks", "entry", "truncated_edges")}
            write_index_baseline(g, ds, ix.pq, ix.codes, ix.lp, tmp, ix.entry, extra)
            names = ["graph.blk", "pq.bin"]
            h1 = {k: v for k, v in ix.header.items() if k != "truncated_edges"}
        mismatched = [nm for nm in names
                      if (Path(index) / nm).read_bytes() != (Path(tmp) / nm).read_bytes()]
        h2 = {k: v for k, v in open_index(tmp).header.items() if k != "truncated_edges"}
        if h1 != h2:
            mismatched.append("meta.bin")
    ix.close()
    out = {"mismatched_files": mismatched}
    if data:
        ref = load_fvecs(data)
        out["vectors_equal"] = bool(np.array_equal(ref.vectors, ds.vectors))
    out["pass"] = not mismatched and out.get("vectors_equal", True)
    return out


# ---------------------------------------------------------------------------
# gen / info
# ---------------------------------------------------------------------------

def cmd_gen(out: str, n: int, nq: int, dim: int, clusters: int, spread: float,
            latent_dim: int | None, seed: int, k: int) -> dict:
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    ds, qs = clustered_split(n, nq, dim, clusters, seed, spread, latent_dim)
    write_fvecs(d / "base.fvecs", ds)
    write_fvecs(d / "query.fvecs", qs)
    gt = exact_knn_batch(ds, qs, min(k, n))
    write_ivecs(d / "gt.ivecs", gt)
    return {"base": str(d / "base.fvecs"), "query": str(d / "query.fvecs"),
            "gt": str(d / "gt.ivecs"), "n": n, "nq": nq, "dim": dim}


def cmd_info(index: str) -> dict:
    ix = open_index(index)
    info = dict(ix.header)
    nav = Path(index) / "nav.bin"
    if nav.exists() and nav.stat().st_size:
        info["layer_sizes"] = NavLayers.from_bytes(nav.read_bytes()).sizes()
    info["files"] = {nm: (Path(index) / nm).stat().st_size
                     for nm in INDEX_FILES if (Path(index) / nm).exists()}
    ix.close()
    return info


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="bamg", description="Block-aware monotonic graph index for disk-resident ANNS.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a seeded synthetic clustered dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=10_000)
    g.add_argument("--nq", type=int, default=100)
    g.add_argument("--dim", type=int, default=64)
    g.add_argument("--clusters", type=int, default=64)
    g.add_argument("--spread", type=float, default=8.0)
    g.add_argument("--latent-dim", type=int, default=12)
    g.add_argument("--k", type=int, default=100, help="ground-truth neighbours per query")
    g.add_argument("--seed", type=int, default=0)

    b = sub.add_parser("build", help="build an index directory")
    b.add_argument("--config", help="JSON file of build options; flags win")
    b.add_argument("--data")
    b.add_argument("--out")
    b.add_argument("--layout", choices=["bamg", "baseline"])
    b.add_argument("--R", type=int)
    b.add_argument("--L-build", dest="L_build", type=int)
    b.add_argument("--C-cand", dest="C_cand", type=int)
    b.add_argument("--knn-k", dest="knn_k", type=int)
    b.add_argument("--block-bytes", dest="block_bytes", type=int)
    b.add_argument("--R-max", dest="R_max", type=int)
    b.add_argument("--alpha", type=int)
    b.add_argument("--beta", type=float)
    b.add_argument("--gamma", type=int)
    b.add_argument("--m-sub", dest="m_sub", type=int)
    b.add_argument("--k-codes", dest="k_codes", type=int)
    b.add_argument("--pq-iters", dest="pq_iters", type=int)
    b.add_argument("--pq-train", dest="pq_train", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--ablate-bmrng", dest="ablate_bmrng", action="store_true", default=None)
    b.add_argument("--threads", type=int)
    b.add_argument("--report", help="write the build report here instead of stdout")

    be = sub.add_parser("bench", help="sweep beam widths and emit CSV")
    be.add_argument("--index", required=True)
    be.add_argument("--queries", required=True)
    be.add_argument("--gt", required=True)
    be.add_argument("--l", type=_int_list, default=[16, 32, 64, 128])
    be.add_argument("--k", type=int, default=10)
    be.add_argument("--alpha", type=int, default=4)
    be.add_argument("--entry-count", type=int, default=8)
    be.add_argument("--engine", choices=["bamg", "baseline", "bamg-no-nav"], default="bamg")
    be.add_argument("--threads", type=int, default=default_threads())
    be.add_argument("--out", help="CSV path (default stdout)")

    v = sub.add_parser("verify", help="run a property verifier")
    v.add_argument("--mode", required=True, choices=["bmrng-exact", "io-paths", "roundtrip", "trend"])
    v.add_argument("--index")
    v.add_argument("--data")
    v.add_argument("--graph", help="graph file (binary or 'u: v1 v2' text) for io-paths")
    v.add_argument("--labels", help="whitespace-separated block label per VID")
    v.add_argument("--n", type=int, help="dataset size (200 for io checks, 1000 for trend)")
    v.add_argument("--dim", type=int, default=2)
    v.add_argument("--capacity", type=int, default=8)
    v.add_argument("--assign", choices=["random", "bnf"], default="random")
    v.add_argument("--trials", type=int, default=200)
    v.add_argument("--seed", type=int, default=0)

    i = sub.add_parser("info", help="print index metadata")
    i.add_argument("--index", required=True)
    return ap


def config_from_args(args: argparse.Namespace) -> BuildConfig:
    values: dict = {}
    if args.config:
        cfg_data = json.loads(Path(args.config).read_text())
        known = {f.name for f in fields(BuildConfig)}
        unknown = set(cfg_data) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        values.update(cfg_data)
    for f in fields(BuildConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            values[f.name] = val
    if "threads" not in values:
        values["threads"] = default_threads()
    cfg = BuildConfig(**values)
    if not cfg.data or not cfg.out:
        raise UsageError("build needs --data and --out (flag or config)")
    try:
        cfg.check()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.cmd == "gen":
            print(json.dumps(cmd_gen(args.out, args.n, args.nq, args.dim, args.clusters,
                                     args.spread, args.latent_dim, args.seed, args.k)))
        elif args.cmd == "build":
            cmd_build(config_from_args(args), args.report)
        elif args.cmd == "bench":
            cmd_bench(args.index, args.queries, args.gt, args.l, args.k, args.engine, args.alpha,
                      args.entry_count, args.threads, args.out)
        elif args.cmd == "verify":
            res = cmd_verify(args.mode, args.index, args.data, args.graph, args.labels, args.n,
                             args.dim, args.capacity, args.assign, args.seed, args.trials)
            print(json.dumps(res, sort_keys=True))
            return EXIT_OK if res["pass"] else EXIT_VERIFY
        elif args.cmd == "info":
            print(json.dumps(cmd_info(args.index), sort_keys=True, indent=2))
    except UsageError as exc:
        print(f"bamg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"bamg: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc.__cause__, OSError) else EXIT_USAGE
    except (OSError, FormatError) as exc:
        print(f"bamg: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"bamg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
