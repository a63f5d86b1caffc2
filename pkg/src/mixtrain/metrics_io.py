"""Checkpoints, metric logs, report tables, and reconstruction dumps.

Formats:

* metrics log -- JSON lines, one record per epoch, append-only; readers skip
  malformed lines (including a trailing partial line from a live writer).
* checkpoint  -- text header (format version, config echo, position, and a
  byte-exact manifest) followed by a binary payload of little-endian float32
  arrays for parameters and optimizer moments plus opaque RNG stream state
  bytes. Writes are atomic (temp file + rename).
* reconstructions -- binary P6 portable pixmaps plus a per-sample MSE CSV.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional

import numpy as np

from . import nn
from . import tensor as T
from .schedule import TrainConfig, config_from_kv, config_to_kv

CHECKPOINT_MAGIC = "mixtrain-checkpoint 1"

# metric-record fields that vary between physically identical runs
NONDETERMINISTIC_FIELDS = ("run_id", "method", "timestamp")


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics log
# ---------------------------------------------------------------------------

def append_metrics(path: str, record: Mapping) -> None:
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def read_metrics(path: str, warn=None) -> list[dict]:
    """Parse a JSONL metrics file, skipping malformed lines."""
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError:
                if warn:
                    warn(f"{path}:{lineno}: skipping malformed record")
    return out


def deterministic_view(record: Mapping) -> dict:
    """Project a metric record onto its run-invariant fields."""
    out = {k: v for k, v in record.items() if k not in NONDETERMINISTIC_FIELDS}
    ledger = out.get("ledger")
    if isinstance(ledger, Mapping):
        out["ledger"] = {k: v for k, v in ledger.items() if k != "wall_clock_s"}
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _shape_token(shape) -> str:
    return "x".join(str(s) for s in shape) if shape else "-"


def _parse_shape(token: str):
    return () if token == "-" else tuple(int(s) for s in token.split("x"))


@dataclass
class CheckpointData:
    config_pairs: dict[str, str]
    position: dict[str, int]
    ledger: dict[str, int]
    params: dict[str, np.ndarray]
    moments: dict[str, np.ndarray]
    steps: dict[str, int]
    rng_streams: dict[str, bytes]

    def config(self) -> TrainConfig:
        return config_from_kv(self.config_pairs).validate()


def save_checkpoint(path: str, *, cfg: TrainConfig, params: Mapping[str, np.ndarray],
                    moments: Mapping[str, np.ndarray], steps: Mapping[str, int],
                    position: Mapping[str, int], rng_streams: Mapping[str, bytes],
                    ledger: Optional[Mapping[str, int]] = None) -> None:
    for name, arr in params.items():
        if arr.dtype != np.float32:
            raise CheckpointError(
                f"checkpoints store float32 payloads; parameter {name!r} is {arr.dtype} "
                "(float64 mode is for gradient checks, not checkpointed runs)")
    payload = io.BytesIO()
    manifest: list[str] = []

    def put_array(kind: str, name: str, arr: np.ndarray) -> None:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append(f"{kind} {name} {_shape_token(arr.shape)} {payload.tell()} {len(raw)}")
        payload.write(raw)

    for name, arr in params.items():
        put_array("param", name, arr)
    for name, arr in moments.items():
        put_array("moment", name, arr)
    for name, t in steps.items():
        manifest.append(f"step {name} {int(t)}")
    for name, blob in rng_streams.items():
        manifest.append(f"rng {name} {payload.tell()} {len(blob)}")
        payload.write(blob)

    body = payload.getvalue()
    header = [CHECKPOINT_MAGIC, "[config]", config_to_kv(cfg).rstrip("\n"), "[position]"]
    header += [f"{k}={int(v)}" for k, v in position.items()]
    if ledger:
        header.append("[ledger]")
        header += [f"{k}={int(v)}" for k, v in ledger.items()]
    header.append("[manifest]")
    header += manifest
    header.append(f"[payload] {len(body)}")
    blob = ("\n".join(header) + "\n").encode() + body

    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> CheckpointData:
    with open(path, "rb") as f:
        blob = f.read()
    marker = b"\n[payload] "
    idx = blob.find(marker)
    if idx < 0:
        raise CheckpointError(f"{path}: no payload marker found")
    header_text = blob[:idx].decode()
    rest = blob[idx + 1:]
    nl = rest.find(b"\n")
    declared = int(rest[len(b"[payload] "):nl])
    payload = rest[nl + 1:]
    if len(payload) != declared:
        raise CheckpointError(
            f"{path}: corrupted payload: expected {declared} bytes, got {len(payload)}")

    lines = header_text.splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic line {lines[0] if lines else ''!r}")
    section = None
    config_pairs: dict[str, str] = {}
    position: dict[str, int] = {}
    ledger: dict[str, int] = {}
    params: dict[str, np.ndarray] = {}
    moments: dict[str, np.ndarray] = {}
    steps: dict[str, int] = {}
    rng_streams: dict[str, bytes] = {}

    def slice_payload(off: int, nbytes: int, what: str) -> bytes:
        if off + nbytes > len(payload):
            raise CheckpointError(
                f"{path}: {what} extends to byte {off + nbytes}, payload has {len(payload)}")
        return payload[off:off + nbytes]

    for line in lines[1:]:
        if line.startswith("["):
            section = line
            continue
        if section in ("[config]", "[position]", "[ledger]"):
            k, v = line.split("=", 1)
            if section == "[config]":
                config_pairs[k] = v
            elif section == "[position]":
                position[k] = int(v)
            else:
                ledger[k] = int(v)
        elif section == "[manifest]":
            parts = line.split(" ")
            kind = parts[0]
            if kind in ("param", "moment"):
                _, name, shape_tok, off, nbytes = parts
                raw = slice_payload(int(off), int(nbytes), f"{kind} {name}")
                arr = np.frombuffer(raw, dtype="<f4").reshape(_parse_shape(shape_tok)).copy()
                (params if kind == "param" else moments)[name] = arr
            elif kind == "step":
                steps[parts[1]] = int(parts[2])
            elif kind == "rng":
                _, name, off, nbytes = parts
                rng_streams[name] = slice_payload(int(off), int(nbytes), f"rng {name}")
            else:
                raise CheckpointError(f"{path}: unknown manifest entry {line!r}")
    return CheckpointData(config_pairs=config_pairs, position=position, params=params,
                          moments=moments, steps=steps, rng_streams=rng_streams)


# ---------------------------------------------------------------------------
# report tables
# ---------------------------------------------------------------------------

def absolute_gain(a: float, baseline: float) -> float:
    return a - baseline


def relative_gain(a: float, baseline: float) -> float:
    return 100.0 * (a - baseline) / baseline


def speedup(latency_baseline: float, latency: float) -> float:
    return latency_baseline / latency


REPORT_COLUMNS = ("dataset", "p", "method", "runs", "accuracy", "latency_s",
                  "speedup_vs_ssl_sl", "abs_gain_vs_ssl_sl", "rel_gain_vs_ssl_sl",
                  "abs_gain_vs_sl", "rel_gain_vs_sl")


def report(summaries: Iterable[Mapping], requested_cells=None) -> list[dict]:
    """Aggregate run summaries into (dataset, p, method) rows.

    Seeds within a cell are averaged. Gains and speedups compare against the
    sl / ssl_sl rows of the same (dataset, p) group; absent baselines leave
    those columns empty rather than fabricated. ``requested_cells`` may list
    (dataset, p, method) triples that must appear; empty ones are marked
    missing.
    """
    cells: dict[tuple, list] = {}
    for s in summaries:
        key = (s["dataset"], float(s["p"]), s["method"])
        cells.setdefault(key, []).append(s)
    if requested_cells:
        for key in requested_cells:
            cells.setdefault((key[0], float(key[1]), key[2]), [])

    agg: dict[tuple, dict] = {}
    for key, runs in sorted(cells.items()):
        if not runs:
            agg[key] = {"dataset": key[0], "p": key[1], "method": key[2],
                        "runs": 0, "missing": True}
            continue
        agg[key] = {
            "dataset": key[0], "p": key[1], "method": key[2], "runs": len(runs),
            "missing": False,
            "accuracy": float(np.mean([r["accuracy"] for r in runs])),
            "latency_s": float(np.mean([r["latency_s"] for r in runs])),
        }
    rows = []
    for key, row in agg.items():
        if not row["missing"]:
            group = (key[0], key[1])
            for base in ("ssl_sl", "sl"):
                ref = agg.get((group[0], group[1], base))
                if ref and not ref.get("missing") and key[2] != base:
                    row[f"abs_gain_vs_{base}"] = absolute_gain(row["accuracy"], ref["accuracy"])
                    row[f"rel_gain_vs_{base}"] = relative_gain(row["accuracy"], ref["accuracy"])
                    if base == "ssl_sl":
                        row["speedup_vs_ssl_sl"] = speedup(ref["latency_s"], row["latency_s"])
        rows.append(row)
    return rows


def report_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        if r.get("missing"):
            w.writerow([r["dataset"], r["p"], r["method"], 0] + ["missing"] * 7)
        else:
            w.writerow([r["dataset"], r["p"], r["method"], r["runs"],
                        f"{r['accuracy']:.4f}", f"{r['latency_s']:.2f}"]
                       + [(f"{r[c]:.4f}" if c in r else "") for c in REPORT_COLUMNS[6:]])
    return buf.getvalue()


def report_table(rows: list[dict]) -> str:
    header = ["dataset", "p", "method", "runs", "acc%", "latency(s)", "speedup", "Δacc(ssl_sl)"]
    table = [header]
    for r in rows:
        if r.get("missing"):
            table.append([r["dataset"], f"{r['p']:g}", r["method"], "0", "missing", "-", "-", "-"])
            continue
        table.append([
            r["dataset"], f"{r['p']:g}", r["method"], str(r["runs"]),
            f"{100.0 * r['accuracy']:.2f}", f"{r['latency_s']:.2f}",
            f"{r['speedup_vs_ssl_sl']:.2f}x" if "speedup_vs_ssl_sl" in r else "-",
            f"{100.0 * r['abs_gain_vs_ssl_sl']:+.2f}" if "abs_gain_vs_ssl_sl" in r else "-",
        ])
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in table]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def pareto_csv(summaries: Iterable[Mapping]) -> str:
    """One row per run for accuracy-vs-latency scatter plots."""
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["dataset", "p", "method", "seed", "accuracy", "latency_s"])
    for s in summaries:
        w.writerow([s["dataset"], s["p"], s["method"], s["seed"],
                    f"{s['accuracy']:.6f}", f"{s['latency_s']:.3f}"])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# reconstruction dumps
# ---------------------------------------------------------------------------

def write_ppm(path: str, image: np.ndarray) -> None:
    """Write one [C,H,W] float image in [0,1] as a binary P6 pixmap."""
    c, h, w = image.shape
    if c == 1:
        rgb = np.repeat(image, 3, axis=0)
    elif c == 3:
        rgb = image
    else:
        raise ValueError(f"P6 needs 1 or 3 channels, got {c}")
    px = (np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(px.transpose(1, 2, 0).tobytes())


def dump_reconstructions(model, images: np.ndarray, out_dir: str,
                         mask_seed: int = 0, limit: Optional[int] = None) -> list[dict]:
    """Write original/reconstructed image pairs plus a per-sample MSE CSV.

    The MSE column is the reconstruction loss over all patch positions, i.e.
    the same quantity the training engine logs with loss_target=all.
    """
    os.makedirs(out_dir, exist_ok=True)
    cfg = model.cfg
    n = len(images) if limit is None else min(limit, len(images))
    plan = nn.make_mask_plan(cfg.tokens, model.mask_ratio, mask_seed)
    rows = []
    for i in range(n):
        img = images[i]
        tokens = nn.patchify(img[None].astype(model.dtype), cfg)
        feats = model.encode(T.Tensor(tokens))
        pred = model._decode(feats, plan)
        mse = float(np.mean((pred.data - tokens) ** 2))
        recon = nn.unpatchify(pred.data, cfg)[0]
        write_ppm(os.path.join(out_dir, f"orig_{i:03d}.ppm"), img)
        write_ppm(os.path.join(out_dir, f"recon_{i:03d}.ppm"), recon)
        rows.append({"index": i, "mse": mse})
    with open(os.path.join(out_dir, "reconstruction_mse.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["index", "mse"])
        w.writeheader()
        w.writerows(rows)
    return rows


def summary_path(run_dir: str) -> str:
    return os.path.join(run_dir, "summary.json")


def write_summary(run_dir: str, summary: Mapping) -> None:
    with open(summary_path(run_dir), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)


def collect_summaries(root: str) -> list[dict]:
    out = []
    for dirpath, _dirnames, filenames in sorted(os.walk(root)):
        if "summary.json" in filenames:
            with open(os.path.join(dirpath, "summary.json")) as f:
                out.append(json.load(f))
    return out
