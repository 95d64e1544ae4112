"""Ablation grid: the 8 CMC/CMPC/CMCC rows and the TVP on/off pair.

Each row is one train + eval that differs from the base config only in its
toggles.  Runs are cached under ``out/runs/<config hash>`` so an interrupted
grid resumes where it stopped.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from .config import RunConfig
from .evaluate import evaluate
from .train import train

log = logging.getLogger(__name__)

TABLE4 = (
    ("PCAS", {}),
    ("w/o CMC", {"cmc": False}),
    ("w/o CMPC", {"cmpc": False}),
    ("w/o CMCC", {"cmcc": False}),
    ("w/o CMC+CMPC", {"cmc": False, "cmpc": False}),
    ("w/o CMC+CMCC", {"cmc": False, "cmcc": False}),
    ("w/o CMPC+CMCC", {"cmpc": False, "cmcc": False}),
    ("w/o CMC+CMPC+CMCC", {"cmc": False, "cmpc": False, "cmcc": False}),
)
TABLE3 = (
    ("AST", {"tvp": False}),
    ("AST+TVP", {"tvp": True}),
)
TABLES = {"table3": TABLE3, "table4": TABLE4}


class AblationError(RuntimeError):
    pass


@dataclass
class Row:
    table: str
    name: str
    seed: int
    toggles: dict
    config_hash: str
    report: dict | None = None
    error: str | None = None


@dataclass
class AblationResult:
    rows: list[Row] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps([r.__dict__ for r in self.rows], indent=2, sort_keys=True) + "\n"

    def get(self, table: str, name: str, seed: int) -> dict:
        for r in self.rows:
            if (r.table, r.name, r.seed) == (table, name, seed) and r.report is not None:
                return r.report
        raise KeyError((table, name, seed))

    def format(self) -> str:
        lines = [f"{'table':<7} {'row':<20} {'seed':>4} {'mIoU':>7} {'F':>7} {'audio acc':>9}"]
        for r in self.rows:
            if r.report is None:
                lines.append(f"{r.table:<7} {r.name:<20} {r.seed:>4}  failed: {r.error}")
                continue
            m = r.report
            lines.append(f"{r.table:<7} {r.name:<20} {r.seed:>4} {m['miou']:7.4f} {m['mean_f']:7.4f} "
                         f"{m['frame_audio_accuracy']:9.4f}")
        return "\n".join(lines)


def row_configs(base: RunConfig, tables=("table3", "table4"), seeds=None) -> list[tuple[str, str, RunConfig]]:
    seeds = [base.seed] if seeds is None else list(seeds)
    out = []
    for table in tables:
        if table not in TABLES:
            raise ValueError(f"unknown ablation table '{table}' (choose from {sorted(TABLES)})")
        for seed in seeds:
            seeded = RunConfig.from_dict({**base.to_dict(), "seed": seed})
            for name, toggles in TABLES[table]:
                out.append((table, name, seeded.with_toggles(**toggles)))
    return out


def source_digest() -> str:
    """Digest of the package sources; cached rows are reused only when it matches."""
    root = Path(__file__).resolve().parents[1]
    h = hashlib.sha256()
    for path in sorted(root.rglob("*.py")):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def run_one(cfg: RunConfig, data: Path, run_dir: Path, split: str = "test") -> dict:
    """Train + evaluate one row, or return the cached report for the same config and sources."""
    report_path = run_dir / "report.json"
    stamp = {"requested_hash": cfg.hash(), "source_digest": source_digest()}
    if report_path.exists():
        cached = json.loads(report_path.read_text())
        extra = cached.get("extra", {})
        if all(extra.get(k) == v for k, v in stamp.items()):
            return cached
    start = time.perf_counter()
    train(cfg, data, run_dir)
    report = evaluate(run_dir / "last.ckpt", data, split)
    report.extra.update(stamp, seconds=round(time.perf_counter() - start, 3))
    report_path.write_text(report.to_json())
    return json.loads(report.to_json())


def run_ablation(base: RunConfig, data: Path, out: Path, tables=("table3", "table4"), seeds=None,
                 split: str = "test") -> AblationResult:
    """Train and evaluate every row; results.json is rewritten after each row."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    result = AblationResult()
    done: dict[str, dict] = {}
    for table, name, cfg in row_configs(base, tables, seeds):
        key = cfg.hash()
        toggles = {t: getattr(cfg, t) for t in ("tvp", "cmc", "cmpc", "cmcc", "crf")}
        row = Row(table, name, cfg.seed, toggles, key)
        result.rows.append(row)
        try:
            if key not in done:
                log.info("ablation row %s / %s (seed %d, %s)", table, name, cfg.seed, key)
                done[key] = run_one(cfg, data, out / "runs" / key, split)
            row.report = done[key]
        except Exception as exc:
            row.error = f"{type(exc).__name__}: {exc}"
            (out / "results.json").write_text(result.to_json())
            raise AblationError(f"row '{name}' (seed {cfg.seed}) failed; partial results in "
                                f"{out / 'results.json'}") from exc
        (out / "results.json").write_text(result.to_json())
    (out / "table.txt").write_text(result.format() + "\n")
    return result
