"""Columnar summaries over one or more run directories.

Every table is a TSV with one column per run. Floats are written with
``repr`` so values read back equal the ones in the run's records exactly.
Missing cells (a run with fewer rounds or clients) are ``NA``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .artifacts import MissingArtifact, RunLayout, read_json, read_jsonl

NA = "NA"
LOSS_KEYS = ("L_A", "L_S", "L_R", "total")


def _cell(v) -> str:
    if v is None:
        return NA
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_table(path: Path, index_name: str, index: list, columns: dict[str, dict]) -> None:
    """``columns`` maps run label -> {row key: value}."""
    labels = list(columns)
    lines = ["\t".join([index_name, *labels])]
    for key in index:
        lines.append("\t".join([str(key), *(_cell(columns[lab].get(key)) for lab in labels)]))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_labels(run_dirs: list[Path]) -> list[str]:
    names = [Path(d).resolve().name for d in run_dirs]
    if len(set(names)) == len(names):
        return names
    return [f"{i}:{n}" for i, n in enumerate(names)]


def _mean(values) -> float:
    return float(np.mean(list(values)))


def round_series(rounds: list[dict]) -> dict[str, dict[int, object]]:
    """Per-round scalars from round records, keyed by table name."""
    out: dict[str, dict[int, object]] = {f"round_loss_{k}": {} for k in LOSS_KEYS}
    out.update(round_mean_BA={}, round_mean_AR={}, round_grad_norm_sq={}, round_excluded={})
    for r in rounds:
        t = r["round"]
        if r["losses"]:
            for k in LOSS_KEYS:
                out[f"round_loss_{k}"][t] = _mean(v[k] for v in r["losses"].values())
        if r.get("metrics"):
            out["round_mean_BA"][t] = _mean(v["BA"] for v in r["metrics"].values())
            out["round_mean_AR"][t] = _mean(v["AR"] for v in r["metrics"].values())
        out["round_grad_norm_sq"][t] = r["grad_norm_sq"]
        excluded = r["aggregation"]["excluded"]
        out["round_excluded"][t] = ";".join(str(i) for i in excluded) if excluded else "-"
    return out


def final_metrics(layout: RunLayout) -> dict[str, dict[str, object]] | None:
    """Per-client BA/AR from ``evaluate`` if it ran, else from the last Phase 1 round."""
    if layout.metrics().exists():
        rec = read_jsonl(layout.metrics())[-1]
        clients, mean = rec["clients"], rec["mean"]
    elif layout.rounds().exists():
        rounds = [r for r in read_jsonl(layout.rounds()) if r.get("metrics")]
        if not rounds:
            return None
        clients = rounds[-1]["metrics"]
        mean = {k: _mean(v[k] for v in clients.values()) for k in ("BA", "AR")}
    else:
        return None
    out = {}
    for k in ("BA", "AR"):
        col = {int(cid): m[k] for cid, m in clients.items()}
        col["mean"] = mean[k]
        out[k] = col
    return out


def build_report(run_dirs: list[Path], out_dir: Path) -> list[Path]:
    """Write every table that at least one run has data for; return the paths written."""
    if not run_dirs:
        raise ValueError("report needs at least one run directory")
    labels = run_labels(run_dirs)
    layouts = [RunLayout(d) for d in run_dirs]
    for layout in layouts:
        if not any(p.exists() for p in (layout.rounds(), layout.metrics(), layout.gates())):
            raise MissingArtifact(f"{layout.root} holds no phase1, phase2 or evaluate records")
    per_round: dict[str, dict[str, dict]] = {}
    finals: dict[str, dict[str, dict]] = {"BA": {}, "AR": {}}
    gates: dict[str, dict] = {}
    summary: dict[str, dict] = {}
    for label, layout in zip(labels, layouts):
        rounds = read_jsonl(layout.rounds()) if layout.rounds().exists() else []
        for name, series in round_series(rounds).items():
            per_round.setdefault(name, {})[label] = series
        fin = final_metrics(layout)
        for k in ("BA", "AR"):
            finals[k][label] = fin[k] if fin else {}
        if layout.gates().exists():
            gates[label] = {g["client_id"]: ";".join(map(str, g["selected"])) or "-"
                            for g in read_jsonl(layout.gates())}
        row = {"rounds": len(rounds),
               "excluded_total": sum(len(r["aggregation"]["excluded"]) for r in rounds)}
        if layout.phase1_summary().exists():
            s = read_json(layout.phase1_summary())
            row.update(aggregator=s["aggregator"], sharing=s["sharing"],
                       malicious=";".join(map(str, s["malicious"])) or "-")
        if fin:
            row.update(final_mean_BA=fin["BA"]["mean"], final_mean_AR=fin["AR"]["mean"])
        manifest = layout.stage("phase1") / "manifest.json"
        if manifest.exists():
            m = read_json(manifest)
            row.update(seed=m["seed"], config_hash=m["config_hash"][:12])
        summary[label] = row

    written = []
    for name, cols in per_round.items():
        index = sorted({t for c in cols.values() for t in c})
        if index:
            path = out_dir / f"{name}.tsv"
            write_table(path, "round", index, cols)
            written.append(path)
    for k in ("BA", "AR"):
        clients = sorted({c for col in finals[k].values() for c in col if c != "mean"})
        if clients:
            path = out_dir / f"final_{k}.tsv"
            write_table(path, "client", [*clients, "mean"], finals[k])
            written.append(path)
    if gates:
        path = out_dir / "gates_selected.tsv"
        write_table(path, "client", sorted({c for col in gates.values() for c in col}), gates)
        written.append(path)
    keys = ["seed", "config_hash", "aggregator", "sharing", "malicious", "rounds", "excluded_total",
            "final_mean_BA", "final_mean_AR"]
    path = out_dir / "summary.tsv"
    write_table(path, "field", keys, summary)
    written.append(path)
    return written


def read_table(path: Path) -> tuple[list[str], dict[str, dict[str, str]]]:
    """Inverse of ``write_table`` with raw string cells: (run labels, {row key: {label: cell}})."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    labels = lines[0].split("\t")[1:]
    rows = {}
    for line in lines[1:]:
        key, *cells = line.split("\t")
        rows[key] = dict(zip(labels, cells))
    return labels, rows
